//! Deterministic synthetic multimodal corpus.
//!
//! Token sequences come from a seeded first-order Markov chain (each
//! token allows a fixed number of successors, so context genuinely helps
//! a decoder). Each token is rendered into an "audio-like" view (its own
//! unit-norm embedding plus low noise) and a "visual-like" view (a
//! shared many-to-one viseme-class embedding, a small residual of the
//! token embedding, and high noise), making the visual view confusable
//! by construction. Splits are engineered for a length shift: labelled
//! and in-distribution test sequences stay short, the out-of-distribution
//! test set covers four longer buckets.
//!
//! Everything is derived from SplitMix64 streams keyed by (seed, role,
//! split, sample, channel), so any sample can be re-rendered in isolation
//! (the evaluation-time audio noise sweep relies on this) and corpora are
//! bit-identical across platforms: rendering uses only +,*,/ and sqrt.

mod format;

pub use format::CorpusError;

use crate::rng::SplitMix64;
use std::collections::HashSet;

/// Four fixed token-length buckets of the OOD split.
pub const OOD_BUCKETS: [(usize, usize); 4] = [(9, 12), (13, 18), (19, 24), (25, 30)];

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub content_vocab: usize,
    pub viseme_classes: usize,
    pub frame_dim: usize,
    pub frames_per_token_min: usize,
    pub frames_per_token_max: usize,
    pub sigma_audio: f64,
    pub sigma_visual: f64,
    pub visual_residual: f64,
    pub markov_successors: usize,
    pub labelled_size: usize,
    pub labelled_min_tokens: usize,
    pub labelled_max_tokens: usize,
    pub unlabelled_size: usize,
    pub unlabelled_min_tokens: usize,
    pub unlabelled_max_tokens: usize,
    pub test_id_size: usize,
    pub ood_bucket_size: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            content_vocab: 24,
            viseme_classes: 8,
            frame_dim: 16,
            frames_per_token_min: 2,
            frames_per_token_max: 4,
            sigma_audio: 0.1,
            sigma_visual: 0.3,
            visual_residual: 0.15,
            markov_successors: 6,
            labelled_size: 500,
            labelled_min_tokens: 3,
            labelled_max_tokens: 8,
            unlabelled_size: 5000,
            unlabelled_min_tokens: 3,
            unlabelled_max_tokens: 30,
            test_id_size: 500,
            ood_bucket_size: 250,
            seed: 42,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.content_vocab == 0
            || self.viseme_classes == 0
            || self.frame_dim == 0
            || self.frames_per_token_min == 0
            || self.markov_successors == 0
        {
            return Err(CorpusError::BadConfig("extents must be positive".into()));
        }
        if self.content_vocab % self.viseme_classes != 0 {
            return Err(CorpusError::BadConfig(format!(
                "content_vocab {} must be a multiple of viseme_classes {}",
                self.content_vocab, self.viseme_classes
            )));
        }
        if self.frames_per_token_min > self.frames_per_token_max {
            return Err(CorpusError::BadConfig("frames_per_token range inverted".into()));
        }
        if self.markov_successors > self.content_vocab {
            return Err(CorpusError::BadConfig("more successors than tokens".into()));
        }
        if self.labelled_min_tokens > self.labelled_max_tokens
            || self.unlabelled_min_tokens > self.unlabelled_max_tokens
        {
            return Err(CorpusError::BadConfig("token length range inverted".into()));
        }
        if self.labelled_max_tokens >= OOD_BUCKETS[0].0 {
            return Err(CorpusError::BadConfig(format!(
                "labelled_max_tokens {} must stay below the OOD range start {}",
                self.labelled_max_tokens, OOD_BUCKETS[0].0
            )));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Labelled,
    Unlabelled,
    TestId,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Labelled, Split::Unlabelled, Split::TestId, Split::TestOod];

    fn tag(self) -> u64 {
        match self {
            Split::Labelled => 1,
            Split::Unlabelled => 2,
            Split::TestId => 3,
            Split::TestOod => 4,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Split::Labelled => "labelled",
            Split::Unlabelled => "unlabelled",
            Split::TestId => "id",
            Split::TestOod => "ood",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "labelled" => Some(Split::Labelled),
            "unlabelled" => Some(Split::Unlabelled),
            "id" => Some(Split::TestId),
            "ood" => Some(Split::TestOod),
            _ => None,
        }
    }
}

/// One rendered sample. `av` is always the exact concatenation of the
/// audio and visual rows, so only the two views are stored.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<u16>,
    /// [frames x frame_dim], row-major.
    pub audio: Vec<f32>,
    pub visual: Vec<f32>,
    pub frames: usize,
}

impl Sample {
    /// AV view: per-frame concatenation, [frames x 2*frame_dim].
    pub fn av(&self, frame_dim: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.frames * 2 * frame_dim);
        for t in 0..self.frames {
            out.extend_from_slice(&self.audio[t * frame_dim..(t + 1) * frame_dim]);
            out.extend_from_slice(&self.visual[t * frame_dim..(t + 1) * frame_dim]);
        }
        out
    }
}

/// The seeded generator state: embeddings and Markov structure. Kept
/// separate from the rendered corpus so evaluation can re-render single
/// samples (noise sweeps) without replaying sequence sampling.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: CorpusConfig,
    /// Unit-norm token embeddings, [content_vocab x frame_dim].
    emission: Vec<f64>,
    /// Unit-norm viseme-class embeddings, [viseme_classes x frame_dim].
    viseme: Vec<f64>,
    /// Allowed successors per token, markov_successors each.
    successors: Vec<Vec<u16>>,
}

const ROLE_EMISSION: u64 = 1;
const ROLE_VISEME: u64 = 2;
const ROLE_MARKOV: u64 = 3;
const ROLE_SEQ: u64 = 4;
const ROLE_RENDER: u64 = 5;

const CH_DURATION: u64 = 0;
const CH_AUDIO: u64 = 1;
const CH_VISUAL: u64 = 2;

fn unit_rows(rng: &mut SplitMix64, rows: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let row: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        out.extend(row.iter().map(|v| v / norm));
    }
    out
}

impl Generator {
    pub fn new(config: CorpusConfig) -> Result<Self, CorpusError> {
        config.validate()?;
        let mut e_rng = SplitMix64::stream(config.seed, &[ROLE_EMISSION]);
        let emission = unit_rows(&mut e_rng, config.content_vocab, config.frame_dim);
        let mut v_rng = SplitMix64::stream(config.seed, &[ROLE_VISEME]);
        let viseme = unit_rows(&mut v_rng, config.viseme_classes, config.frame_dim);
        let mut m_rng = SplitMix64::stream(config.seed, &[ROLE_MARKOV]);
        let mut successors = Vec::with_capacity(config.content_vocab);
        for _ in 0..config.content_vocab {
            let mut pool: Vec<u16> = (0..config.content_vocab as u16).collect();
            m_rng.shuffle(&mut pool);
            let mut set: Vec<u16> = pool[..config.markov_successors].to_vec();
            set.sort_unstable();
            successors.push(set);
        }
        Ok(Generator {
            config,
            emission,
            viseme,
            successors,
        })
    }

    /// Many-to-one token -> viseme class map g.
    pub fn viseme_class(&self, token: u16) -> usize {
        token as usize / (self.config.content_vocab / self.config.viseme_classes)
    }

    pub fn emission_row(&self, token: u16) -> &[f64] {
        let f = self.config.frame_dim;
        &self.emission[token as usize * f..(token as usize + 1) * f]
    }

    fn viseme_row(&self, class: usize) -> &[f64] {
        let f = self.config.frame_dim;
        &self.viseme[class * f..(class + 1) * f]
    }

    /// Sample a token sequence of the given length from the Markov chain.
    pub fn walk(&self, rng: &mut SplitMix64, len: usize) -> Vec<u16> {
        let mut tokens = Vec::with_capacity(len);
        let mut cur = rng.below(self.config.content_vocab as u64) as u16;
        tokens.push(cur);
        for _ in 1..len {
            let options = &self.successors[cur as usize];
            cur = options[rng.below(options.len() as u64) as usize];
            tokens.push(cur);
        }
        tokens
    }

    /// Per-token frame durations for a sample, from its own stream.
    fn durations(&self, split: Split, index: usize, tokens: usize) -> Vec<usize> {
        let mut rng = SplitMix64::stream(
            self.config.seed,
            &[ROLE_RENDER, split.tag(), index as u64, CH_DURATION],
        );
        (0..tokens)
            .map(|_| {
                rng.range_inclusive(
                    self.config.frames_per_token_min as u64,
                    self.config.frames_per_token_max as u64,
                ) as usize
            })
            .collect()
    }

    /// Render both views of one sample. `audio_noise_multiplier` scales
    /// only the audio noise sigma (1.0 reproduces the stored corpus bit
    /// for bit; 0.0 is clean audio).
    pub fn render_views(
        &self,
        split: Split,
        index: usize,
        tokens: &[u16],
        audio_noise_multiplier: f64,
    ) -> Sample {
        let f = self.config.frame_dim;
        let durations = self.durations(split, index, tokens.len());
        let frames: usize = durations.iter().sum();
        let mut audio = Vec::with_capacity(frames * f);
        let mut visual = Vec::with_capacity(frames * f);
        let mut a_rng = SplitMix64::stream(
            self.config.seed,
            &[ROLE_RENDER, split.tag(), index as u64, CH_AUDIO],
        );
        let mut v_rng = SplitMix64::stream(
            self.config.seed,
            &[ROLE_RENDER, split.tag(), index as u64, CH_VISUAL],
        );
        let sigma_a = self.config.sigma_audio * audio_noise_multiplier;
        let sigma_v = self.config.sigma_visual;
        let beta = self.config.visual_residual;
        for (tok, dur) in tokens.iter().zip(&durations) {
            let e = self.emission_row(*tok);
            let v = self.viseme_row(self.viseme_class(*tok));
            for _ in 0..*dur {
                for j in 0..f {
                    audio.push((e[j] + sigma_a * a_rng.gaussian()) as f32);
                }
                for j in 0..f {
                    visual.push((v[j] + beta * e[j] + sigma_v * v_rng.gaussian()) as f32);
                }
            }
        }
        Sample {
            tokens: tokens.to_vec(),
            audio,
            visual,
            frames,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub labelled: Vec<Sample>,
    pub unlabelled: Vec<Sample>,
    pub test_id: Vec<Sample>,
    pub test_ood: Vec<Sample>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Labelled => &self.labelled,
            Split::Unlabelled => &self.unlabelled,
            Split::TestId => &self.test_id,
            Split::TestOod => &self.test_ood,
        }
    }

    /// OOD bucket index of a reference token length, if any.
    pub fn ood_bucket(token_len: usize) -> Option<usize> {
        OOD_BUCKETS
            .iter()
            .position(|&(lo, hi)| token_len >= lo && token_len <= hi)
    }
}

/// Generate the full corpus: sequences first (seeded rejection sampling
/// keeps all four splits disjoint as token sequences), then rendering
/// from per-sample streams.
pub fn gen_corpus(config: &CorpusConfig) -> Result<Corpus, CorpusError> {
    let generator = Generator::new(config.clone())?;
    let mut used: HashSet<Vec<u16>> = HashSet::new();

    let mut draw_split = |split: Split, sizes: &[(usize, usize, usize)]| -> Vec<Vec<u16>> {
        // sizes: (count, min_tokens, max_tokens) groups drawn in order
        let mut rng = SplitMix64::stream(config.seed, &[ROLE_SEQ, split.tag()]);
        let mut out = Vec::new();
        for &(count, min_t, max_t) in sizes {
            for _ in 0..count {
                loop {
                    let len = rng.range_inclusive(min_t as u64, max_t as u64) as usize;
                    let tokens = generator.walk(&mut rng, len);
                    if used.insert(tokens.clone()) {
                        out.push(tokens);
                        break;
                    }
                }
            }
        }
        out
    };

    let labelled_seqs = draw_split(
        Split::Labelled,
        &[(
            config.labelled_size,
            config.labelled_min_tokens,
            config.labelled_max_tokens,
        )],
    );
    let unlabelled_seqs = draw_split(
        Split::Unlabelled,
        &[(
            config.unlabelled_size,
            config.unlabelled_min_tokens,
            config.unlabelled_max_tokens,
        )],
    );
    let test_id_seqs = draw_split(
        Split::TestId,
        &[(
            config.test_id_size,
            config.labelled_min_tokens,
            config.labelled_max_tokens,
        )],
    );
    let ood_groups: Vec<(usize, usize, usize)> = OOD_BUCKETS
        .iter()
        .map(|&(lo, hi)| (config.ood_bucket_size, lo, hi))
        .collect();
    let test_ood_seqs = draw_split(Split::TestOod, &ood_groups);

    let render_all = |split: Split, seqs: Vec<Vec<u16>>| -> Vec<Sample> {
        seqs.into_iter()
            .enumerate()
            .map(|(i, tokens)| generator.render_views(split, i, &tokens, 1.0))
            .collect()
    };

    Ok(Corpus {
        config: config.clone(),
        labelled: render_all(Split::Labelled, labelled_seqs),
        unlabelled: render_all(Split::Unlabelled, unlabelled_seqs),
        test_id: render_all(Split::TestId, test_id_seqs),
        test_ood: render_all(Split::TestOod, test_ood_seqs),
    })
}

/// Re-render one sample's audio with a scaled noise sigma, leaving the
/// visual view untouched (the evaluation noise sweep). The AV view is
/// recomputed implicitly since it is always derived by concatenation.
pub fn noise_sweep_view(
    generator: &Generator,
    split: Split,
    index: usize,
    sample: &Sample,
    multiplier: f64,
) -> Sample {
    assert!(multiplier >= 0.0, "noise multiplier must be non-negative");
    let rerendered = generator.render_views(split, index, &sample.tokens, multiplier);
    Sample {
        tokens: sample.tokens.clone(),
        audio: rerendered.audio,
        visual: sample.visual.clone(),
        frames: sample.frames,
    }
}
