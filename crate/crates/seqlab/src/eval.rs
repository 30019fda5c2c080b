//! Evaluation and benchmarking: token error rate via Levenshtein
//! alignment, length-bucketed reports per decoding strategy, decode
//! throughput measurement, and the beam-size sweep.

use crate::ctc::{collapse, ctc_greedy};
use crate::data::{Corpus, Generator, Sample, Split, OOD_BUCKETS};
use crate::decode::{ar_greedy, ctc_driven_forcing, joint_beam_search, ModelDecoder};
use crate::model::{Modality, ModelError, ModelParams};
use crate::parallel::map_ordered;
use crate::autodiff::Tensor;
use std::time::Instant;

/// Unit-cost edit decomposition of hypothesis against reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn add(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
    }
}

/// Word (token) error rate: edits over max(1, reference length).
pub fn wer_rate(counts: &EditCounts, ref_tokens: usize) -> f64 {
    counts.total() as f64 / ref_tokens.max(1) as f64
}

/// Levenshtein alignment with unit costs and backtracking, preferring
/// match/substitution over deletion over insertion on ties so the
/// decomposition is deterministic. S + I + D always equals the edit
/// distance.
pub fn wer_counts(reference: &[u16], hypothesis: &[u16]) -> EditCounts {
    let n = reference.len();
    let m = hypothesis.len();
    let mut dist = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dist[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dist[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            let sub = dist[idx(i - 1, j - 1)] + sub_cost;
            let del = dist[idx(i - 1, j)] + 1;
            let ins = dist[idx(i, j - 1)] + 1;
            dist[idx(i, j)] = sub.min(del).min(ins);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[idx(i, j)];
        if i > 0 && j > 0 {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dist[idx(i - 1, j - 1)] + sub_cost == here {
                counts.substitutions += sub_cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[idx(i - 1, j)] + 1 == here {
            counts.deletions += 1;
            i -= 1;
            continue;
        }
        counts.insertions += 1;
        j -= 1;
    }
    counts
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Strategy {
    CtcGreedy,
    AttGreedy,
    JointBeam,
}

impl Strategy {
    pub fn key(self) -> &'static str {
        match self {
            Strategy::CtcGreedy => "ctc-greedy",
            Strategy::AttGreedy => "att-greedy",
            Strategy::JointBeam => "joint-beam",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        match s {
            "ctc-greedy" => Some(Strategy::CtcGreedy),
            "att-greedy" => Some(Strategy::AttGreedy),
            "joint-beam" => Some(Strategy::JointBeam),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub strategy: Strategy,
    pub modality: Modality,
    pub beam: usize,
    pub alpha: f32,
    pub length_penalty: f32,
    pub noise_multiplier: f64,
    pub threads: usize,
    /// When false, wall-time columns are written as zero so reports are
    /// byte-identical across runs.
    pub timing: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            strategy: Strategy::JointBeam,
            modality: Modality::AudioVisual,
            beam: 8,
            alpha: 0.1,
            length_penalty: 0.0,
            noise_multiplier: 1.0,
            threads: 1,
            timing: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BucketRow {
    pub bucket: (usize, usize),
    pub samples: usize,
    pub ref_tokens: usize,
    pub edits: EditCounts,
    pub wer: f64,
    pub mean_decode_ms: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub split: Split,
    pub modality: Modality,
    pub strategy: Strategy,
    pub rows: Vec<BucketRow>,
    pub overall: BucketRow,
}

/// Assemble the frame tensor of one modality view of a sample.
pub fn view_tensor(sample: &Sample, modality: Modality, frame_dim: usize) -> Tensor<f32> {
    let (vals, width) = match modality {
        Modality::Audio => (sample.audio.clone(), frame_dim),
        Modality::Visual => (sample.visual.clone(), frame_dim),
        Modality::AudioVisual => (sample.av(frame_dim), 2 * frame_dim),
    };
    Tensor::new(vec![sample.frames, width], vals).expect("sample view shape")
}

/// Decode one sample under a strategy; returns hypothesis tokens.
pub fn decode_sample(
    params: &ModelParams<f32>,
    sample: &Sample,
    opts: &EvalOptions,
) -> Result<Vec<u16>, ModelError> {
    let cfg = &params.config;
    let frames = view_tensor(sample, opts.modality, cfg.frame_dim);
    let mut enc = params.encode(&frames, sample.frames, opts.modality, false)?;
    let max_len = cfg.max_tokens - 1;
    match opts.strategy {
        Strategy::CtcGreedy => {
            let lat_var = enc.ctc_head()?;
            let lattice = enc.lattice(lat_var, cfg.blank());
            let path = ctc_greedy(&lattice);
            Ok(collapse(&path.tokens, cfg.blank()))
        }
        Strategy::AttGreedy => {
            let mut dec = ModelDecoder::new(&mut enc, cfg.sos(), cfg.eos(), cfg.max_tokens);
            Ok(ar_greedy(&mut dec, max_len)?.tokens)
        }
        Strategy::JointBeam => {
            let lat_var = enc.ctc_head()?;
            let lattice = enc.lattice(lat_var, cfg.blank());
            let mut dec = ModelDecoder::new(&mut enc, cfg.sos(), cfg.eos(), cfg.max_tokens);
            joint_beam_search(
                &mut dec,
                &lattice,
                opts.beam,
                opts.alpha,
                max_len,
                opts.length_penalty,
            )
        }
    }
}

fn split_buckets(corpus: &Corpus, split: Split) -> Vec<(usize, usize)> {
    match split {
        Split::TestOod => OOD_BUCKETS.to_vec(),
        _ => vec![(
            corpus.config.labelled_min_tokens,
            corpus.config.labelled_max_tokens,
        )],
    }
}

/// Evaluate a checkpointed model over one split, bucketed by reference
/// token length. Corpus-level WER per bucket: total edits over total
/// reference tokens.
pub fn eval_bucketed(
    params: &ModelParams<f32>,
    corpus: &Corpus,
    split: Split,
    opts: &EvalOptions,
) -> Result<EvalReport, ModelError> {
    let generator = Generator::new(corpus.config.clone()).expect("corpus config validated");
    let samples = corpus.split(split);
    let swept: Vec<Sample>;
    let samples: &[Sample] = if (opts.noise_multiplier - 1.0).abs() > f64::EPSILON
        && opts.modality != Modality::Visual
    {
        swept = samples
            .iter()
            .enumerate()
            .map(|(i, s)| crate::data::noise_sweep_view(&generator, split, i, s, opts.noise_multiplier))
            .collect();
        &swept
    } else {
        samples
    };

    let results: Vec<Result<(EditCounts, usize, f64), ModelError>> =
        map_ordered(samples, opts.threads, |_, s| {
            let started = Instant::now();
            let hyp = decode_sample(params, s, opts)?;
            let ms = started.elapsed().as_secs_f64() * 1e3;
            Ok((wer_counts(&s.tokens, &hyp), s.tokens.len(), ms))
        });

    let buckets = split_buckets(corpus, split);
    let mut rows: Vec<BucketRow> = buckets
        .iter()
        .map(|&bucket| BucketRow {
            bucket,
            samples: 0,
            ref_tokens: 0,
            edits: EditCounts::default(),
            wer: 0.0,
            mean_decode_ms: 0.0,
        })
        .collect();
    let mut overall = BucketRow {
        bucket: (usize::MAX, 0),
        samples: 0,
        ref_tokens: 0,
        edits: EditCounts::default(),
        wer: 0.0,
        mean_decode_ms: 0.0,
    };
    for r in results {
        let (edits, ref_len, ms) = r?;
        let b = rows
            .iter_mut()
            .find(|row| ref_len >= row.bucket.0 && ref_len <= row.bucket.1);
        if let Some(row) = b {
            row.samples += 1;
            row.ref_tokens += ref_len;
            row.edits.add(&edits);
            row.mean_decode_ms += ms;
        }
        overall.samples += 1;
        overall.ref_tokens += ref_len;
        overall.edits.add(&edits);
        overall.mean_decode_ms += ms;
        overall.bucket.0 = overall.bucket.0.min(ref_len);
        overall.bucket.1 = overall.bucket.1.max(ref_len);
    }
    for row in rows.iter_mut().chain(std::iter::once(&mut overall)) {
        row.wer = row.edits.total() as f64 / row.ref_tokens.max(1) as f64;
        row.mean_decode_ms = if row.samples > 0 && opts.timing {
            row.mean_decode_ms / row.samples as f64
        } else {
            0.0
        };
    }
    if !opts.timing {
        for row in rows.iter_mut() {
            row.mean_decode_ms = 0.0;
        }
        overall.mean_decode_ms = 0.0;
    }
    Ok(EvalReport {
        split,
        modality: opts.modality,
        strategy: opts.strategy,
        rows,
        overall,
    })
}

impl EvalReport {
    pub fn bucket_wer(&self, bucket: (usize, usize)) -> Option<f64> {
        self.rows.iter().find(|r| r.bucket == bucket).map(|r| r.wer)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "split,modality,strategy,bucket_lo,bucket_hi,samples,ref_tokens,substitutions,insertions,deletions,wer,mean_decode_ms\n",
        );
        let mut push_row = |r: &BucketRow, lo: String, hi: String| {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{:.6},{:.3}\n",
                self.split.key(),
                self.modality.key(),
                self.strategy.key(),
                lo,
                hi,
                r.samples,
                r.ref_tokens,
                r.edits.substitutions,
                r.edits.insertions,
                r.edits.deletions,
                r.wer,
                r.mean_decode_ms
            ));
        };
        for r in &self.rows {
            push_row(r, r.bucket.0.to_string(), r.bucket.1.to_string());
        }
        push_row(&self.overall.clone(), "all".into(), "all".into());
        out
    }
}

/// Decode timing for one target token length.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub target_tokens: usize,
    pub batch: usize,
    /// Median wall milliseconds for the whole batch, per component:
    /// CTC head + greedy + collapse; CTC-driven forcing; AR greedy;
    /// joint beam.
    pub ctc_greedy_ms: f64,
    pub forcing_ms: f64,
    pub ar_ms: f64,
    pub beam_ms: f64,
    /// Decoder forward passes over the batch (one median repetition).
    pub forcing_passes: u64,
    pub ar_passes: u64,
    pub mean_ar_tokens: f64,
    /// ar_ms / forcing_ms.
    pub speedup: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Benchmark pseudo-label generation components on freshly rendered
/// clean AV batches of fixed reference length. The first repetition is
/// warmup and excluded from the medians.
pub fn bench_decode(
    params: &ModelParams<f32>,
    generator: &Generator,
    lengths: &[usize],
    batch: usize,
    repetitions: usize,
    beam: usize,
    alpha: f32,
) -> Result<Vec<BenchRow>, ModelError> {
    let cfg = &params.config;
    let mut rows = Vec::new();
    for (li, &target_len) in lengths.iter().enumerate() {
        // fresh deterministic batch of exactly target_len tokens
        let samples: Vec<Sample> = (0..batch)
            .map(|i| {
                let mut rng = crate::rng::SplitMix64::stream(
                    generator.config.seed,
                    &[0xbe_6c, li as u64, i as u64],
                );
                let tokens = generator.walk(&mut rng, target_len);
                generator.render_views(Split::Unlabelled, 10_000_000 + i, &tokens, 1.0)
            })
            .collect();

        let mut encs = Vec::with_capacity(batch);
        for s in &samples {
            let frames = view_tensor(s, Modality::AudioVisual, cfg.frame_dim);
            encs.push(params.encode(&frames, s.frames, Modality::AudioVisual, false)?);
        }

        let mut ctc_times = Vec::new();
        let mut forcing_times = Vec::new();
        let mut ar_times = Vec::new();
        let mut beam_times = Vec::new();
        let mut forcing_passes = 0u64;
        let mut ar_passes = 0u64;
        let mut ar_tokens_total = 0usize;

        for rep in 0..repetitions + 1 {
            // (a) CTC head + greedy + collapse
            let t0 = Instant::now();
            let mut pls: Vec<Vec<u16>> = Vec::with_capacity(batch);
            for enc in encs.iter_mut() {
                enc.reset_decoder();
                let lat_var = enc.ctc_head()?;
                let lattice = enc.lattice(lat_var, cfg.blank());
                let path = ctc_greedy(&lattice);
                pls.push(collapse(&path.tokens, cfg.blank()));
            }
            let ctc_ms = t0.elapsed().as_secs_f64() * 1e3;

            // (b) CTC-driven forcing on those prefixes
            let t1 = Instant::now();
            let mut rep_forcing_passes = 0u64;
            for (enc, pl) in encs.iter_mut().zip(&pls) {
                if pl.is_empty() {
                    continue;
                }
                let mut dec = ModelDecoder::new(enc, cfg.sos(), cfg.eos(), cfg.max_tokens);
                let pl_trim: Vec<u16> = pl.iter().copied().take(cfg.max_tokens - 1).collect();
                if let Ok(out) = ctc_driven_forcing(&mut dec, &pl_trim)? {
                    rep_forcing_passes += out.passes;
                }
            }
            let forcing_ms = t1.elapsed().as_secs_f64() * 1e3;

            // (c) AR greedy
            let t2 = Instant::now();
            let mut rep_ar_passes = 0u64;
            let mut rep_ar_tokens = 0usize;
            for enc in encs.iter_mut() {
                let mut dec = ModelDecoder::new(enc, cfg.sos(), cfg.eos(), cfg.max_tokens);
                let out = ar_greedy(&mut dec, cfg.max_tokens - 1)?;
                rep_ar_passes += out.passes;
                rep_ar_tokens += out.tokens.len();
            }
            let ar_ms = t2.elapsed().as_secs_f64() * 1e3;

            // (d) joint beam
            let t3 = Instant::now();
            for enc in encs.iter_mut() {
                enc.reset_decoder();
                let lat_var = enc.ctc_head()?;
                let lattice = enc.lattice(lat_var, cfg.blank());
                let mut dec = ModelDecoder::new(enc, cfg.sos(), cfg.eos(), cfg.max_tokens);
                joint_beam_search(&mut dec, &lattice, beam, alpha, cfg.max_tokens - 1, 0.0)?;
            }
            let beam_ms = t3.elapsed().as_secs_f64() * 1e3;

            if rep > 0 {
                ctc_times.push(ctc_ms);
                forcing_times.push(forcing_ms);
                ar_times.push(ar_ms);
                beam_times.push(beam_ms);
            }
            forcing_passes = rep_forcing_passes;
            ar_passes = rep_ar_passes;
            ar_tokens_total = rep_ar_tokens;
        }

        let forcing_ms = median(forcing_times);
        let ar_ms = median(ar_times);
        rows.push(BenchRow {
            target_tokens: target_len,
            batch,
            ctc_greedy_ms: median(ctc_times),
            forcing_ms,
            ar_ms,
            beam_ms: median(beam_times),
            forcing_passes,
            ar_passes,
            mean_ar_tokens: ar_tokens_total as f64 / batch as f64,
            speedup: ar_ms / forcing_ms,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "target_tokens,batch,ctc_greedy_ms,forcing_ms,ar_ms,beam_ms,forcing_passes,ar_passes,mean_ar_tokens,speedup\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.3},{:.3},{:.3},{:.3},{},{},{:.2},{:.2}\n",
            r.target_tokens,
            r.batch,
            r.ctc_greedy_ms,
            r.forcing_ms,
            r.ar_ms,
            r.beam_ms,
            r.forcing_passes,
            r.ar_passes,
            r.mean_ar_tokens,
            r.speedup
        ));
    }
    out
}

/// WER and decode time per beam size, joint decoding.
pub fn sweep_beam(
    params: &ModelParams<f32>,
    corpus: &Corpus,
    split: Split,
    beams: &[usize],
    base: &EvalOptions,
) -> Result<String, ModelError> {
    let mut out = String::from("beam,wer,mean_decode_ms\n");
    for &beam in beams {
        let opts = EvalOptions {
            strategy: Strategy::JointBeam,
            beam,
            ..base.clone()
        };
        let report = eval_bucketed(params, corpus, split, &opts)?;
        out.push_str(&format!(
            "{},{:.6},{:.3}\n",
            beam, report.overall.wer, report.overall.mean_decode_ms
        ));
    }
    Ok(out)
}
