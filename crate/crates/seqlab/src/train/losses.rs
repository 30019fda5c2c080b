//! Per-view loss construction on a sample's tape.
//!
//! Labelled views optimise the joint objective
//! lambda * CTC + (1 - lambda) * smoothed CE (CE targets are the
//! reference plus eos). Unlabelled views depend on the step mode:
//!
//! - CTC-driven mode: the CTC head is supervised by the CTC pseudo-label
//!   only; the decoder (forced with the CTC prefix, exactly as the
//!   teacher was) is supervised by both pseudo-label types, each CE term
//!   gated per token and averaged with the dual-target weight.
//! - AR mode: the decoder (forced with the attention pseudo-label) is
//!   supervised by the attention pseudo-label only; the CTC head receives
//!   both pseudo-label types, the attention one under a sequence gate.
//!
//! CTC terms are normalised by the view's frame count, CE terms by the
//! supervised position count; gates zero individual terms without
//! changing denominators, so a fully gated batch contributes an exact 0.

use super::pseudo::{Mode, SamplePls};
use crate::ctc::ctc_loss_on_tape;
use crate::autodiff::Var;
use crate::model::{EncodedSample, ModelError};
use crate::real::Real;

#[derive(Clone, Copy, Debug)]
pub struct LossParams {
    pub lambda_ctc: f64,
    pub label_smoothing: f64,
    /// Eq. 5 dual-target split: weight on CE against the attention PL
    /// (the rest goes to CE against the CTC PL).
    pub dec_att_pl_weight: f64,
    /// Eq. 6 dual-target split: weight on CTC against the attention PL.
    pub ctc_att_pl_weight: f64,
}

/// Loss pieces of one view. `var` is absent when nothing fired.
pub struct ViewLoss<R> {
    pub var: Option<Var>,
    /// CTC component value (already frame-normalised, before lambda).
    pub ctc_value: R,
    /// Attention component value (before 1 - lambda).
    pub att_value: R,
    /// Gated-but-infeasible CTC terms dropped with a count.
    pub infeasible_skips: usize,
}

fn weighted_sum<R: Real>(
    enc: &mut EncodedSample<R>,
    terms: &[(Var, R)],
) -> Result<Option<Var>, ModelError> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        if w == R::ZERO {
            continue;
        }
        let scaled = enc.tape.scale(v, w)?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => enc.tape.add(a, scaled)?,
        });
    }
    Ok(acc)
}

/// Joint labelled loss on one encoded view.
pub fn labelled_loss<R: Real>(
    enc: &mut EncodedSample<R>,
    reference: &[u16],
    lp: &LossParams,
) -> Result<ViewLoss<R>, ModelError> {
    let frames = enc.len;
    let lat = enc.ctc_head()?;
    let blank = (enc.ctc_vocab() - 1) as u16;
    let ctc_var = ctc_loss_on_tape(&mut enc.tape, lat, blank, reference)?
        .expect("labelled references are feasible by corpus construction");
    let inv_frames = R::ONE / R::from_f64(frames as f64);
    let ctc_scaled = enc.tape.scale(ctc_var, inv_frames)?;

    // sos and eos share the top index of the decoder vocabularies
    let sos = (enc.decoder_vocab() - 1) as u16;
    let mut input = Vec::with_capacity(reference.len() + 1);
    input.push(sos);
    input.extend_from_slice(reference);
    let out = enc.decode_forced(&input)?;
    let mut targets = reference.to_vec();
    targets.push(sos);
    let w = R::ONE / R::from_f64(targets.len() as f64);
    let weights = vec![w; targets.len()];
    let ce = enc.tape.smoothed_ce_rows(
        out,
        &targets,
        &weights,
        R::from_f64(lp.label_smoothing),
    )?;

    let lambda = R::from_f64(lp.lambda_ctc);
    let var = weighted_sum(enc, &[(ctc_scaled, lambda), (ce, R::ONE - lambda)])?;
    Ok(ViewLoss {
        ctc_value: enc.tape.value(ctc_scaled).values()[0],
        att_value: enc.tape.value(ce).values()[0],
        var,
        infeasible_skips: 0,
    })
}

/// Mode-specific unlabelled loss on one encoded view. Gates come
/// precomputed in the pseudo-label record; a fully gated view returns no
/// variable and zero values.
pub fn unlabelled_loss<R: Real>(
    enc: &mut EncodedSample<R>,
    pls: &SamplePls,
    lp: &LossParams,
) -> Result<ViewLoss<R>, ModelError> {
    debug_assert!(pls.skip.is_none(), "skipped samples never reach the loss");
    let frames = enc.len;
    let inv_frames = R::ONE / R::from_f64(frames as f64);
    let mut infeasible_skips = 0usize;

    let any_att = pls.r_att.iter().any(|&b| b);
    let need_lattice = match pls.mode {
        Mode::CtcDriven => pls.r_ctc,
        Mode::Ar => pls.r_ctc || pls.r_att_seq,
    };

    let mut ctc_terms: Vec<(Var, R)> = Vec::new();
    if need_lattice {
        let lat = enc.ctc_head()?;
        let blank = (enc.tape.value(lat).shape()[1] - 1) as u16;
        let push_ctc = |enc: &mut EncodedSample<R>,
                            target: &[u16],
                            weight: R,
                            skips: &mut usize|
         -> Result<Option<(Var, R)>, ModelError> {
            match ctc_loss_on_tape(&mut enc.tape, lat, blank, target)? {
                Some(v) => {
                    let scaled = enc.tape.scale(v, inv_frames)?;
                    Ok(Some((scaled, weight)))
                }
                None => {
                    *skips += 1;
                    Ok(None)
                }
            }
        };
        match pls.mode {
            Mode::CtcDriven => {
                if pls.r_ctc {
                    if let Some(t) =
                        push_ctc(enc, &pls.ctc_pl, R::ONE, &mut infeasible_skips)?
                    {
                        ctc_terms.push(t);
                    }
                }
            }
            Mode::Ar => {
                let w_att = R::from_f64(lp.ctc_att_pl_weight);
                if pls.r_ctc {
                    if let Some(t) =
                        push_ctc(enc, &pls.ctc_pl, R::ONE - w_att, &mut infeasible_skips)?
                    {
                        ctc_terms.push(t);
                    }
                }
                if pls.r_att_seq {
                    if let Some(t) = push_ctc(enc, &pls.att_pl, w_att, &mut infeasible_skips)? {
                        ctc_terms.push(t);
                    }
                }
            }
        }
    }
    let ctc_var = weighted_sum(enc, &ctc_terms)?;

    let eps = R::from_f64(lp.label_smoothing);
    let att_var = if any_att {
        let sos = (enc.decoder_vocab() - 1) as u16;
        match pls.mode {
            Mode::CtcDriven => {
                // forced with the CTC prefix, the same conditioning the
                // teacher used; every accepted position carries both CE
                // terms
                let u = pls.ctc_pl.len();
                let mut input = Vec::with_capacity(u);
                input.push(sos);
                input.extend_from_slice(&pls.ctc_pl[..u - 1]);
                let out = enc.decode_forced(&input)?;
                let w_att = R::from_f64(lp.dec_att_pl_weight);
                let inv_u = R::ONE / R::from_f64(u as f64);
                let gate = |b: bool| if b { inv_u } else { R::ZERO };
                let weights_att: Vec<R> =
                    pls.r_att.iter().map(|&b| gate(b) * w_att).collect();
                let weights_ctc: Vec<R> = pls
                    .r_att
                    .iter()
                    .map(|&b| gate(b) * (R::ONE - w_att))
                    .collect();
                let ce_att = enc.tape.smoothed_ce_rows(out, &pls.att_pl, &weights_att, eps)?;
                let ce_ctc = enc.tape.smoothed_ce_rows(out, &pls.ctc_pl, &weights_ctc, eps)?;
                Some(enc.tape.add(ce_att, ce_ctc)?)
            }
            Mode::Ar => {
                let u = pls.att_pl.len();
                let mut input = Vec::with_capacity(u);
                input.push(sos);
                input.extend_from_slice(&pls.att_pl[..u - 1]);
                let out = enc.decode_forced(&input)?;
                let inv_u = R::ONE / R::from_f64(u as f64);
                let weights: Vec<R> = pls
                    .r_att
                    .iter()
                    .map(|&b| if b { inv_u } else { R::ZERO })
                    .collect();
                Some(enc.tape.smoothed_ce_rows(out, &pls.att_pl, &weights, eps)?)
            }
        }
    } else {
        None
    };

    let lambda = R::from_f64(lp.lambda_ctc);
    let mut terms: Vec<(Var, R)> = Vec::new();
    if let Some(c) = ctc_var {
        terms.push((c, lambda));
    }
    if let Some(a) = att_var {
        terms.push((a, R::ONE - lambda));
    }
    let var = weighted_sum(enc, &terms)?;
    Ok(ViewLoss {
        ctc_value: ctc_var.map_or(R::ZERO, |v| enc.tape.value(v).values()[0]),
        att_value: att_var.map_or(R::ZERO, |v| enc.tape.value(v).values()[0]),
        var,
        infeasible_skips,
    })
}

/// Final semi-supervised combination:
/// sum_m w_m * (gamma_m * unlabelled_m + (1 - gamma_m) * labelled_m).
/// During the supervised warm start gamma is treated as zero, so the
/// labelled losses carry full modality weight.
pub fn combine_semi(w: [f64; 3], gamma: [f64; 3], labelled: [f64; 3], unlabelled: [f64; 3]) -> f64 {
    let mut total = 0.0;
    for m in 0..3 {
        total += w[m] * (gamma[m] * unlabelled[m] + (1.0 - gamma[m]) * labelled[m]);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_semi_hand_value() {
        let w = [0.7, 0.3, 0.7];
        let gamma = [0.75, 0.97, 0.75];
        let v = combine_semi(w, gamma, [1.0; 3], [2.0; 3]);
        assert!((v - 3.041).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn combine_semi_zero_unlabelled_reduces_to_weighted_labelled() {
        let w = [0.7, 0.3, 0.7];
        let gamma = [0.75, 0.97, 0.75];
        let lab = [0.9, 1.1, 1.3];
        let v = combine_semi(w, gamma, lab, [0.0; 3]);
        let expect: f64 = (0..3).map(|m| w[m] * (1.0 - gamma[m]) * lab[m]).sum();
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn combine_semi_is_linear() {
        let w = [0.7, 0.3, 0.7];
        let gamma = [0.75, 0.97, 0.75];
        let lab = [0.4, 0.5, 0.6];
        let unlab = [1.5, 0.2, 0.8];
        let v1 = combine_semi(w, gamma, lab, unlab);
        let v2 = combine_semi(
            w,
            gamma,
            lab.map(|x| 2.0 * x),
            unlab.map(|x| 2.0 * x),
        );
        assert!((v2 - 2.0 * v1).abs() < 1e-9);
    }
}
