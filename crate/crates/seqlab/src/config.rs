//! Flat, line-oriented run configuration: `key=value` with `#` comments.
//! Every key has a default; unknown keys are rejected with the offending
//! token; the effective merged configuration is echoed into the run
//! directory so experiments are reproducible from their artifacts alone.
//!
//! `content_vocab`, `frame_dim` and `seed` are single keys that feed both
//! the model and the corpus, so the two can never drift apart.

use crate::data::CorpusConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key: {0}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value}")]
    BadValue { key: String, value: String },
    #[error("bad config line {line}: {text}")]
    BadLine { line: usize, text: String },
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            corpus: CorpusConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

macro_rules! keys {
    ($($key:literal => $setter:expr, $getter:expr;)*) => {
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), ConfigError> {
            match key {
                $($key => {
                    let f: &dyn Fn(&mut RunConfig, &str) -> Option<()> = &$setter;
                    f(cfg, value).ok_or_else(|| ConfigError::BadValue {
                        key: key.to_string(),
                        value: value.to_string(),
                    })
                })*
                other => Err(ConfigError::UnknownKey(other.to_string())),
            }
        }

        fn get_key(cfg: &RunConfig, key: &str) -> String {
            match key {
                $($key => {
                    let f: &dyn Fn(&RunConfig) -> String = &$getter;
                    f(cfg)
                })*
                _ => unreachable!("get_key over KEYS only"),
            }
        }
    };
}

macro_rules! field {
    ($($path:tt)*) => {
        (
            |c: &mut RunConfig, v: &str| { c.$($path)* = v.parse().ok()?; Some(()) },
            |c: &RunConfig| c.$($path)*.to_string()
        )
    };
}

// Shared keys keep model and corpus consistent by construction.
fn set_content_vocab(c: &mut RunConfig, v: &str) -> Option<()> {
    let n = v.parse().ok()?;
    c.model.content_vocab = n;
    c.corpus.content_vocab = n;
    Some(())
}

fn set_frame_dim(c: &mut RunConfig, v: &str) -> Option<()> {
    let n = v.parse().ok()?;
    c.model.frame_dim = n;
    c.corpus.frame_dim = n;
    Some(())
}

fn set_seed(c: &mut RunConfig, v: &str) -> Option<()> {
    let n = v.parse().ok()?;
    c.corpus.seed = n;
    c.train.seed = n;
    Some(())
}

keys! {
    // model
    "d_model" => field!(model.d_model).0, field!(model.d_model).1;
    "encoder_layers" => field!(model.encoder_layers).0, field!(model.encoder_layers).1;
    "decoder_layers" => field!(model.decoder_layers).0, field!(model.decoder_layers).1;
    "heads" => field!(model.heads).0, field!(model.heads).1;
    "ffn_dim" => field!(model.ffn_dim).0, field!(model.ffn_dim).1;
    "content_vocab" => |c, v| set_content_vocab(c, v), |c| c.model.content_vocab.to_string();
    "frame_dim" => |c, v| set_frame_dim(c, v), |c| c.model.frame_dim.to_string();
    "max_frames" => field!(model.max_frames).0, field!(model.max_frames).1;
    "max_tokens" => field!(model.max_tokens).0, field!(model.max_tokens).1;
    // corpus
    "viseme_classes" => field!(corpus.viseme_classes).0, field!(corpus.viseme_classes).1;
    "frames_per_token_min" => field!(corpus.frames_per_token_min).0, field!(corpus.frames_per_token_min).1;
    "frames_per_token_max" => field!(corpus.frames_per_token_max).0, field!(corpus.frames_per_token_max).1;
    "sigma_audio" => field!(corpus.sigma_audio).0, field!(corpus.sigma_audio).1;
    "sigma_visual" => field!(corpus.sigma_visual).0, field!(corpus.sigma_visual).1;
    "visual_residual" => field!(corpus.visual_residual).0, field!(corpus.visual_residual).1;
    "markov_successors" => field!(corpus.markov_successors).0, field!(corpus.markov_successors).1;
    "labelled_size" => field!(corpus.labelled_size).0, field!(corpus.labelled_size).1;
    "labelled_min_tokens" => field!(corpus.labelled_min_tokens).0, field!(corpus.labelled_min_tokens).1;
    "labelled_max_tokens" => field!(corpus.labelled_max_tokens).0, field!(corpus.labelled_max_tokens).1;
    "unlabelled_size" => field!(corpus.unlabelled_size).0, field!(corpus.unlabelled_size).1;
    "unlabelled_min_tokens" => field!(corpus.unlabelled_min_tokens).0, field!(corpus.unlabelled_min_tokens).1;
    "unlabelled_max_tokens" => field!(corpus.unlabelled_max_tokens).0, field!(corpus.unlabelled_max_tokens).1;
    "test_id_size" => field!(corpus.test_id_size).0, field!(corpus.test_id_size).1;
    "ood_bucket_size" => field!(corpus.ood_bucket_size).0, field!(corpus.ood_bucket_size).1;
    // training
    "p_ar" => field!(train.p_ar).0, field!(train.p_ar).1;
    "tau0_ema" => field!(train.tau0_ema).0, field!(train.tau0_ema).1;
    "conf_threshold" => field!(train.conf_threshold).0, field!(train.conf_threshold).1;
    "lambda_ctc" => field!(train.lambda_ctc).0, field!(train.lambda_ctc).1;
    "label_smoothing" => field!(train.label_smoothing).0, field!(train.label_smoothing).1;
    "dec_att_pl_weight" => field!(train.dec_att_pl_weight).0, field!(train.dec_att_pl_weight).1;
    "ctc_att_pl_weight" => field!(train.ctc_att_pl_weight).0, field!(train.ctc_att_pl_weight).1;
    "w_audio" => field!(train.w_audio).0, field!(train.w_audio).1;
    "w_visual" => field!(train.w_visual).0, field!(train.w_visual).1;
    "w_av" => field!(train.w_av).0, field!(train.w_av).1;
    "gamma_audio" => field!(train.gamma_audio).0, field!(train.gamma_audio).1;
    "gamma_visual" => field!(train.gamma_visual).0, field!(train.gamma_visual).1;
    "gamma_av" => field!(train.gamma_av).0, field!(train.gamma_av).1;
    "batch_labelled" => field!(train.batch_labelled).0, field!(train.batch_labelled).1;
    "batch_unlabelled" => field!(train.batch_unlabelled).0, field!(train.batch_unlabelled).1;
    "epochs" => field!(train.epochs).0, field!(train.epochs).1;
    "warm_epochs" => field!(train.warm_epochs).0, field!(train.warm_epochs).1;
    "warmup_frac" => field!(train.warmup_frac).0, field!(train.warmup_frac).1;
    "peak_lr" => field!(train.peak_lr).0, field!(train.peak_lr).1;
    "weight_decay" => field!(train.weight_decay).0, field!(train.weight_decay).1;
    "beta1" => field!(train.beta1).0, field!(train.beta1).1;
    "beta2" => field!(train.beta2).0, field!(train.beta2).1;
    "grad_clip" => field!(train.grad_clip).0, field!(train.grad_clip).1;
    "mask_audio_max" => field!(train.mask_audio_max).0, field!(train.mask_audio_max).1;
    "mask_visual_max" => field!(train.mask_visual_max).0, field!(train.mask_visual_max).1;
    "ckpt_every" => field!(train.ckpt_every).0, field!(train.ckpt_every).1;
    "timing" => field!(train.timing).0, field!(train.timing).1;
    "threads" => field!(train.threads).0, field!(train.threads).1;
    "seed" => |c, v| set_seed(c, v), |c| c.train.seed.to_string();
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        set_key(self, key.trim(), value.trim())
    }

    /// Parse `key=value` lines; `#` starts a comment, blank lines are
    /// skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// One `--set key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::BadValue {
            key: kv.to_string(),
            value: "expected key=value".to_string(),
        })?;
        self.set(k, v)
    }

    /// Canonical echo of the effective configuration.
    pub fn echo(&self) -> String {
        let mut out = String::from("# seqlab run configuration (effective)\n");
        for &key in KEYS {
            out.push_str(&format!("{key}={}\n", get_key(self, key)));
        }
        out
    }
}
