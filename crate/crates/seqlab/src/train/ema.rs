//! Exponential-moving-average teacher: theta_T <- tau * theta_T +
//! (1 - tau) * theta_S, with tau on a cosine ramp from tau0 to exactly 1.

use crate::model::ModelParams;

/// Cosine schedule between tau0 at step 0 and exactly 1.0 at
/// `total_steps`: tau(s) = 1 - (1 - tau0) * (1 + cos(pi s / total)) / 2.
/// The endpoints are returned exactly (no trigonometric rounding), which
/// the teacher-freeze contract at the end of training relies on.
pub fn tau_schedule(step: usize, total_steps: usize, tau0: f32) -> f32 {
    assert!(step <= total_steps, "step {step} beyond total {total_steps}");
    if step == total_steps {
        // covers the degenerate single-step schedule (0, 0) as well
        return 1.0;
    }
    if step == 0 {
        return tau0;
    }
    let progress = step as f64 / total_steps as f64;
    let w = (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0;
    1.0 - ((1.0 - tau0 as f64) * w) as f32
}

/// Elementwise EMA update; the student is untouched. Layouts must match.
pub fn ema_update(teacher: &mut ModelParams<f32>, student: &ModelParams<f32>, tau: f32) {
    assert_eq!(
        teacher.entries().len(),
        student.entries().len(),
        "parameter layout mismatch"
    );
    for (t, s) in teacher.entries_mut().iter_mut().zip(student.entries()) {
        assert_eq!(t.name, s.name, "parameter layout mismatch");
        for (tv, sv) in t.values.iter_mut().zip(&s.values) {
            *tv = tau * *tv + (1.0 - tau) * *sv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};

    fn params(seed: u64) -> ModelParams<f32> {
        let cfg = ModelConfig {
            d_model: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ffn_dim: 8,
            content_vocab: 3,
            frame_dim: 4,
            max_frames: 8,
            max_tokens: 6,
        };
        ModelParams::init(&cfg, seed).unwrap()
    }

    #[test]
    fn schedule_hits_endpoints_and_midpoint() {
        assert_eq!(tau_schedule(0, 100, 0.998), 0.998);
        assert_eq!(tau_schedule(100, 100, 0.998), 1.0);
        let mid = tau_schedule(50, 100, 0.998);
        assert!((mid - 0.999).abs() < 1e-7, "midpoint {mid}");
    }

    #[test]
    fn schedule_is_monotone_non_decreasing() {
        let mut prev = 0.0f32;
        for s in 0..=200 {
            let t = tau_schedule(s, 200, 0.998);
            assert!(t >= prev);
            prev = t;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn tau_one_freezes_teacher_bitwise() {
        let mut teacher = params(1);
        let student = params(2);
        let before: Vec<Vec<f32>> = teacher.entries().iter().map(|e| e.values.clone()).collect();
        ema_update(&mut teacher, &student, 1.0);
        for (b, e) in before.iter().zip(teacher.entries()) {
            assert_eq!(b, &e.values);
        }
    }

    #[test]
    fn tau_zero_copies_student() {
        let mut teacher = params(1);
        let student = params(2);
        ema_update(&mut teacher, &student, 0.0);
        for (t, s) in teacher.entries().iter().zip(student.entries()) {
            assert_eq!(t.values, s.values);
        }
    }

    #[test]
    fn ema_arithmetic() {
        let mut teacher = params(1);
        let student = params(2);
        for e in teacher.entries_mut() {
            e.values.fill(1.0);
        }
        let mut student = student;
        for e in student.entries_mut() {
            e.values.fill(0.0);
        }
        ema_update(&mut teacher, &student, 0.9);
        for e in teacher.entries() {
            for &v in &e.values {
                assert!((v - 0.9).abs() < 1e-7);
            }
        }
    }
}
