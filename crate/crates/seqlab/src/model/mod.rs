//! The Tiny encoder-decoder: modality-specific input projections into a
//! shared pre-norm transformer encoder, a CTC head over encoder states,
//! and a causal attention decoder with cross-attention. All parameters
//! except the three input projections are shared across the audio,
//! visual, and audiovisual paths.

mod checkpoint;
mod forward;

pub use checkpoint::CheckpointError;
pub use forward::EncodedSample;

use crate::autodiff::TensorError;
use crate::real::Real;
use crate::rng::SplitMix64;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{modality} frames must have dimension {expected}, got {got}")]
    FrameDim {
        modality: Modality,
        expected: usize,
        got: usize,
    },
    #[error("{got} frames exceed max_frames {max}")]
    TooManyFrames { got: usize, max: usize },
    #[error("{got} decoder positions exceed max_tokens {max}")]
    TooManyTokens { got: usize, max: usize },
    #[error("decoder input token {token} out of vocabulary {vocab}")]
    BadToken { token: u16, vocab: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Visual,
    AudioVisual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Visual, Modality::AudioVisual];

    pub fn key(self) -> &'static str {
        match self {
            Modality::Audio => "a",
            Modality::Visual => "v",
            Modality::AudioVisual => "av",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s {
            "a" => Some(Modality::Audio),
            "v" => Some(Modality::Visual),
            "av" => Some(Modality::AudioVisual),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Content vocabulary K_c; blank / sos / eos all live at index K_c of
    /// their respective (K_c + 1)-sized vocabularies.
    pub content_vocab: usize,
    pub frame_dim: usize,
    pub max_frames: usize,
    pub max_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
            content_vocab: 24,
            frame_dim: 16,
            max_frames: 140,
            max_tokens: 34,
        }
    }
}

impl ModelConfig {
    pub fn ctc_vocab(&self) -> usize {
        self.content_vocab + 1
    }
    pub fn decoder_input_vocab(&self) -> usize {
        self.content_vocab + 1
    }
    pub fn decoder_output_vocab(&self) -> usize {
        self.content_vocab + 1
    }
    pub fn blank(&self) -> u16 {
        self.content_vocab as u16
    }
    pub fn sos(&self) -> u16 {
        self.content_vocab as u16
    }
    pub fn eos(&self) -> u16 {
        self.content_vocab as u16
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            self.d_model,
            self.encoder_layers,
            self.decoder_layers,
            self.heads,
            self.ffn_dim,
            self.content_vocab,
            self.frame_dim,
            self.max_frames,
            self.max_tokens,
        ];
        if positive.iter().any(|&x| x == 0) {
            return Err(ModelError::BadConfig("all extents must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<R>,
}

/// Named parameter collection. Entry order is fixed by construction and
/// shared by checkpoints, the optimiser state, and EMA updates.
#[derive(Clone, Debug)]
pub struct ModelParams<R> {
    pub config: ModelConfig,
    entries: Vec<ParamEntry<R>>,
    by_name: HashMap<String, usize>,
}

/// Resolved entry indices for the fixed architecture.
#[derive(Clone, Debug)]
pub(crate) struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct NormIdx {
    pub g: usize,
    pub b: usize,
}

/// Attention projections. The key projection carries no bias: a key bias
/// shifts every score in a softmax row by the same amount and is exactly
/// functionally dead, which also makes its gradient structurally zero.
#[derive(Clone, Debug)]
pub(crate) struct AttnIdx {
    pub q: LinearIdx,
    pub k_w: usize,
    pub v: LinearIdx,
    pub o: LinearIdx,
}

#[derive(Clone, Debug)]
pub(crate) struct FfnIdx {
    pub lin1: LinearIdx,
    pub lin2: LinearIdx,
}

#[derive(Clone, Debug)]
pub(crate) struct EncLayerIdx {
    pub ln1: NormIdx,
    pub attn: AttnIdx,
    pub ln2: NormIdx,
    pub ffn: FfnIdx,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayerIdx {
    pub ln_self: NormIdx,
    pub self_attn: AttnIdx,
    pub ln_cross: NormIdx,
    pub cross_attn: AttnIdx,
    pub ln_ffn: NormIdx,
    pub ffn: FfnIdx,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamMap {
    pub proj_audio: LinearIdx,
    pub proj_visual: LinearIdx,
    pub proj_av: LinearIdx,
    pub enc: Vec<EncLayerIdx>,
    pub enc_final: NormIdx,
    pub embed: usize,
    pub dec: Vec<DecLayerIdx>,
    pub dec_final: NormIdx,
    pub ctc_head: LinearIdx,
    pub out_head: LinearIdx,
}

struct Registry<R> {
    entries: Vec<ParamEntry<R>>,
    rng: SplitMix64,
}

impl<R: Real> Registry<R> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> usize {
        // scaled uniform init, bound 1/sqrt(fan_in) with fan_in = rows
        let bound = 1.0 / (rows as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| R::from_f64(self.rng.uniform_in(-bound, bound)))
            .collect();
        self.entries.push(ParamEntry {
            name,
            shape: vec![rows, cols],
            values,
        });
        self.entries.len() - 1
    }

    fn fill(&mut self, name: String, len: usize, value: R) -> usize {
        self.entries.push(ParamEntry {
            name,
            shape: vec![len],
            values: vec![value; len],
        });
        self.entries.len() - 1
    }

    fn linear(&mut self, prefix: &str, rows: usize, cols: usize) -> LinearIdx {
        LinearIdx {
            w: self.weight(format!("{prefix}.w"), rows, cols),
            b: self.fill(format!("{prefix}.b"), cols, R::ZERO),
        }
    }

    fn norm(&mut self, prefix: &str, n: usize) -> NormIdx {
        NormIdx {
            g: self.fill(format!("{prefix}.g"), n, R::ONE),
            b: self.fill(format!("{prefix}.b"), n, R::ZERO),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k_w: self.weight(format!("{prefix}.k.w"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> FfnIdx {
        FfnIdx {
            lin1: self.linear(&format!("{prefix}.1"), d, hidden),
            lin2: self.linear(&format!("{prefix}.2"), hidden, d),
        }
    }
}

impl<R: Real> ModelParams<R> {
    /// Deterministic initialisation: weights uniform in
    /// (-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero, norm gains one,
    /// embedding bound 1/sqrt(d_model). Same seed, same bits.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut reg = Registry::<R> {
            entries: Vec::new(),
            rng: SplitMix64::stream(seed, &[0x70_61_72_61_6d]), // "param"
        };
        let d = config.d_model;
        let f = config.frame_dim;

        reg.linear("proj.audio", f, d);
        reg.linear("proj.visual", f, d);
        reg.linear("proj.av", 2 * f, d);
        for i in 0..config.encoder_layers {
            reg.norm(&format!("enc.{i}.ln1"), d);
            reg.attn(&format!("enc.{i}.attn"), d);
            reg.norm(&format!("enc.{i}.ln2"), d);
            reg.ffn(&format!("enc.{i}.ffn"), d, config.ffn_dim);
        }
        reg.norm("enc.final", d);
        reg.weight("dec.embed".into(), config.decoder_input_vocab(), d);
        for i in 0..config.decoder_layers {
            reg.norm(&format!("dec.{i}.ln_self"), d);
            reg.attn(&format!("dec.{i}.self"), d);
            reg.norm(&format!("dec.{i}.ln_cross"), d);
            reg.attn(&format!("dec.{i}.cross"), d);
            reg.norm(&format!("dec.{i}.ln_ffn"), d);
            reg.ffn(&format!("dec.{i}.ffn"), d, config.ffn_dim);
        }
        reg.norm("dec.final", d);
        reg.linear("head.ctc", d, config.ctc_vocab());
        reg.linear("head.out", d, config.decoder_output_vocab());

        let by_name = reg
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            entries: reg.entries,
            by_name,
        })
    }

    pub fn entries(&self) -> &[ParamEntry<R>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<R>] {
        &mut self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<R>> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Total scalar parameter count — a pure function of the config.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub(crate) fn map(&self) -> ParamMap {
        let lin = |prefix: &str| LinearIdx {
            w: self.by_name[&format!("{prefix}.w")],
            b: self.by_name[&format!("{prefix}.b")],
        };
        let norm = |prefix: &str| NormIdx {
            g: self.by_name[&format!("{prefix}.g")],
            b: self.by_name[&format!("{prefix}.b")],
        };
        let attn = |prefix: &str| AttnIdx {
            q: lin(&format!("{prefix}.q")),
            k_w: self.by_name[&format!("{prefix}.k.w")],
            v: lin(&format!("{prefix}.v")),
            o: lin(&format!("{prefix}.o")),
        };
        let ffn = |prefix: &str| FfnIdx {
            lin1: lin(&format!("{prefix}.1")),
            lin2: lin(&format!("{prefix}.2")),
        };
        ParamMap {
            proj_audio: lin("proj.audio"),
            proj_visual: lin("proj.visual"),
            proj_av: lin("proj.av"),
            enc: (0..self.config.encoder_layers)
                .map(|i| EncLayerIdx {
                    ln1: norm(&format!("enc.{i}.ln1")),
                    attn: attn(&format!("enc.{i}.attn")),
                    ln2: norm(&format!("enc.{i}.ln2")),
                    ffn: ffn(&format!("enc.{i}.ffn")),
                })
                .collect(),
            enc_final: norm("enc.final"),
            embed: self.by_name["dec.embed"],
            dec: (0..self.config.decoder_layers)
                .map(|i| DecLayerIdx {
                    ln_self: norm(&format!("dec.{i}.ln_self")),
                    self_attn: attn(&format!("dec.{i}.self")),
                    ln_cross: norm(&format!("dec.{i}.ln_cross")),
                    cross_attn: attn(&format!("dec.{i}.cross")),
                    ln_ffn: norm(&format!("dec.{i}.ln_ffn")),
                    ffn: ffn(&format!("dec.{i}.ffn")),
                })
                .collect(),
            dec_final: norm("dec.final"),
            ctc_head: lin("head.ctc"),
            out_head: lin("head.out"),
        }
    }
}

impl ModelParams<f32> {
    /// Convert to f64, mostly for double-precision oracle tests.
    pub fn to_f64(&self) -> ModelParams<f64> {
        ModelParams {
            config: self.config.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    values: e.values.iter().map(|&v| v as f64).collect(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
