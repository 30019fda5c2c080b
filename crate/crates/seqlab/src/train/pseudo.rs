//! Teacher pseudo-label generation on clean (unmasked) audiovisual
//! inputs. One teacher encode and one decoder pass per unlabelled sample
//! per step produce the CTC pseudo-label (greedy + collapse, gated by a
//! sequence-level confidence) and the attention pseudo-label (CTC-driven
//! forcing or AR greedy depending on the step's mode, gated per token).
//! The same pseudo-labels supervise all three student views.

use crate::ctc::{collapse, ctc_greedy, sequence_confidence};
use crate::data::Sample;
use crate::decode::{ar_greedy, ctc_driven_forcing, ModelDecoder};
use crate::eval::view_tensor;
use crate::model::{Modality, ModelError, ModelParams};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    CtcDriven,
    Ar,
}

impl Mode {
    pub fn key(self) -> &'static str {
        match self {
            Mode::CtcDriven => "ctc",
            Mode::Ar => "ar",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SkipReason {
    /// All-blank teacher CTC output: Eq. 4 has no prefix to force.
    EmptyPl,
    /// CTC pseudo-label longer than the decoder input budget.
    TooLong,
}

/// Pseudo-labels and gates for one unlabelled sample.
#[derive(Clone, Debug)]
pub struct SamplePls {
    pub mode: Mode,
    pub ctc_pl: Vec<u16>,
    /// Sequence-level CTC confidence (geometric mean of frame maxima).
    pub ctc_confidence: f32,
    pub r_ctc: bool,
    pub att_pl: Vec<u16>,
    pub att_confidences: Vec<f32>,
    /// Per-token gates 1(c_u >= threshold).
    pub r_att: Vec<bool>,
    /// Sequence gate for using the attention PL as a CTC target (AR
    /// mode): geometric mean of attention confidences >= threshold.
    /// False for empty attention PLs.
    pub r_att_seq: bool,
    pub skip: Option<SkipReason>,
    /// Decoder forward passes the teacher spent on this sample.
    pub teacher_decoder_passes: u64,
}

impl SamplePls {
    /// True when no loss term can fire: every gate closed (or skipped).
    pub fn fully_masked(&self) -> bool {
        if self.skip.is_some() {
            return true;
        }
        let any_att = self.r_att.iter().any(|&b| b);
        match self.mode {
            Mode::CtcDriven => !self.r_ctc && !any_att,
            Mode::Ar => !self.r_ctc && !any_att && !self.r_att_seq,
        }
    }
}

/// Generate pseudo-labels for one unlabelled sample from the teacher's
/// clean AV view. No gradients flow: teacher parameters enter the tape
/// as constants.
pub fn generate_pls_for_sample(
    teacher: &ModelParams<f32>,
    sample: &Sample,
    mode: Mode,
    conf_threshold: f32,
) -> Result<SamplePls, ModelError> {
    let cfg = &teacher.config;
    let frames = view_tensor(sample, Modality::AudioVisual, cfg.frame_dim);
    let mut enc = teacher.encode(&frames, sample.frames, Modality::AudioVisual, false)?;
    let lat_var = enc.ctc_head()?;
    let lattice = enc.lattice(lat_var, cfg.blank());
    let path = ctc_greedy(&lattice);
    let ctc_pl = collapse(&path.tokens, cfg.blank());
    let ctc_confidence = sequence_confidence(&path.probs);
    let r_ctc = ctc_confidence >= conf_threshold;

    let mut pls = SamplePls {
        mode,
        ctc_pl,
        ctc_confidence,
        r_ctc,
        att_pl: Vec::new(),
        att_confidences: Vec::new(),
        r_att: Vec::new(),
        r_att_seq: false,
        skip: None,
        teacher_decoder_passes: 0,
    };
    if pls.ctc_pl.is_empty() {
        pls.skip = Some(SkipReason::EmptyPl);
        return Ok(pls);
    }

    let mut dec = ModelDecoder::new(&mut enc, cfg.sos(), cfg.eos(), cfg.max_tokens);
    let att = match mode {
        Mode::CtcDriven => match ctc_driven_forcing(&mut dec, &pls.ctc_pl)? {
            Ok(att) => att,
            Err(_) => {
                pls.skip = Some(SkipReason::TooLong);
                return Ok(pls);
            }
        },
        Mode::Ar => ar_greedy(&mut dec, cfg.max_tokens - 1)?,
    };
    pls.teacher_decoder_passes = att.passes;
    pls.r_att = att
        .confidences
        .iter()
        .map(|&c| c >= conf_threshold)
        .collect();
    pls.r_att_seq = !att.tokens.is_empty()
        && sequence_confidence(&att.confidences) >= conf_threshold;
    pls.att_pl = att.tokens;
    pls.att_confidences = att.confidences;
    Ok(pls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn tiny_teacher() -> ModelParams<f32> {
        let cfg = crate::model::ModelConfig {
            d_model: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ffn_dim: 16,
            content_vocab: 4,
            frame_dim: 4,
            max_frames: 24,
            max_tokens: 8,
        };
        ModelParams::init(&cfg, 11).unwrap()
    }

    fn random_sample(rng: &mut SplitMix64, frames: usize, frame_dim: usize) -> Sample {
        Sample {
            tokens: vec![0, 1],
            audio: (0..frames * frame_dim)
                .map(|_| rng.uniform_in(-1.0, 1.0) as f32)
                .collect(),
            visual: (0..frames * frame_dim)
                .map(|_| rng.uniform_in(-1.0, 1.0) as f32)
                .collect(),
            frames,
        }
    }

    #[test]
    fn ctc_driven_alignment_and_single_pass() {
        let teacher = tiny_teacher();
        let mut rng = SplitMix64::new(5);
        let mut checked = 0;
        for i in 0..40 {
            let sample = random_sample(&mut rng, 6 + (i % 8), 4);
            let pls =
                generate_pls_for_sample(&teacher, &sample, Mode::CtcDriven, 0.0).unwrap();
            if pls.skip.is_some() {
                continue;
            }
            assert_eq!(pls.att_pl.len(), pls.ctc_pl.len(), "aligned lengths");
            assert_eq!(pls.teacher_decoder_passes, 1, "single forced pass");
            assert_eq!(pls.r_att.len(), pls.att_pl.len());
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn threshold_zero_accepts_everything() {
        let teacher = tiny_teacher();
        let mut rng = SplitMix64::new(6);
        let sample = random_sample(&mut rng, 10, 4);
        let pls = generate_pls_for_sample(&teacher, &sample, Mode::CtcDriven, 0.0).unwrap();
        if pls.skip.is_none() {
            assert!(pls.r_ctc);
            assert!(pls.r_att.iter().all(|&b| b));
        }
    }

    #[test]
    fn threshold_above_one_rejects_everything() {
        let teacher = tiny_teacher();
        let mut rng = SplitMix64::new(7);
        for i in 0..10 {
            let sample = random_sample(&mut rng, 8 + i, 4);
            let pls = generate_pls_for_sample(&teacher, &sample, Mode::Ar, 1.01).unwrap();
            if pls.skip.is_none() {
                assert!(!pls.r_ctc);
                assert!(pls.r_att.iter().all(|&b| !b));
                assert!(!pls.r_att_seq);
                assert!(pls.fully_masked());
            }
        }
    }

    #[test]
    fn ar_mode_counts_autoregressive_passes() {
        let teacher = tiny_teacher();
        let mut rng = SplitMix64::new(8);
        let sample = random_sample(&mut rng, 12, 4);
        let pls = generate_pls_for_sample(&teacher, &sample, Mode::Ar, 0.5).unwrap();
        if pls.skip.is_none() {
            let expected = pls.att_pl.len() as u64
                + u64::from(pls.att_pl.len() < teacher.config.max_tokens - 1);
            assert!(
                pls.teacher_decoder_passes == expected
                    || pls.teacher_decoder_passes == pls.att_pl.len() as u64,
                "passes {} for {} tokens",
                pls.teacher_decoder_passes,
                pls.att_pl.len()
            );
        }
    }
}
