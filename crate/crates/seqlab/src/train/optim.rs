//! Adaptive-moment optimiser with decoupled weight decay, global
//! gradient-norm clipping, and the linear-warmup / cosine-decay learning
//! rate schedule.

use crate::model::ModelParams;

/// Per-entry gradient buffers aligned with a parameter registry.
pub type GradBuffers = Vec<Vec<f32>>;

pub fn zero_grads(params: &ModelParams<f32>) -> GradBuffers {
    params
        .entries()
        .iter()
        .map(|e| vec![0.0f32; e.values.len()])
        .collect()
}

/// Scale gradients so the global L2 norm does not exceed `clip`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradBuffers, clip: f32) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > clip as f64 && norm > 0.0 {
        let scale = (clip as f64 / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Linear warmup to the peak over `warmup_steps`, then cosine decay to
/// zero at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, peak: f32) -> f32 {
    if total_steps == 0 {
        return peak;
    }
    if warmup_steps > 0 && step < warmup_steps {
        return peak * (step + 1) as f32 / warmup_steps as f32;
    }
    let decay_steps = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / decay_steps as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
    peak * cosine as f32
}

pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    m: GradBuffers,
    v: GradBuffers,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ModelParams<f32>, beta1: f32, beta2: f32, weight_decay: f32) -> Self {
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: zero_grads(params),
            v: zero_grads(params),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &GradBuffers, lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (ei, entry) in params.entries_mut().iter_mut().enumerate() {
            let g = &grads[ei];
            let m = &mut self.m[ei];
            let v = &mut self.v[ei];
            for (i, p) in entry.values.iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};

    fn tiny_params() -> ModelParams<f32> {
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
        ModelParams::init(&cfg, 3).unwrap()
    }

    #[test]
    fn warmup_rises_linearly_then_cosine_decays_to_zero() {
        let peak = 3e-3f32;
        let lr0 = lr_schedule(0, 100, 30, peak);
        let lr29 = lr_schedule(29, 100, 30, peak);
        assert!(lr0 > 0.0 && lr0 < lr29);
        assert!((lr29 - peak).abs() < 1e-9);
        let lr_mid = lr_schedule(65, 100, 30, peak);
        assert!(lr_mid < peak && lr_mid > 0.0);
        let lr_end = lr_schedule(100, 100, 30, peak);
        assert!(lr_end.abs() < 1e-9);
    }

    #[test]
    fn clipping_preserves_direction_and_caps_norm() {
        let mut grads: GradBuffers = vec![vec![3.0, 4.0]]; // norm 5
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-9);
        let clipped = ((grads[0][0] as f64).powi(2) + (grads[0][1] as f64).powi(2)).sqrt();
        assert!((clipped - 1.0).abs() < 1e-5);
        assert!((grads[0][0] / grads[0][1] - 0.75).abs() < 1e-5);

        let mut small: GradBuffers = vec![vec![0.1, 0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0], vec![0.1, 0.1], "below threshold stays untouched");
    }

    #[test]
    fn adamw_first_step_moves_against_gradient() {
        let mut params = tiny_params();
        let before = params.entries()[0].values.clone();
        let mut grads = zero_grads(&params);
        for g in grads[0].iter_mut() {
            *g = 1.0;
        }
        let mut opt = AdamW::new(&params, 0.9, 0.98, 0.0);
        opt.step(&mut params, &grads, 1e-2);
        for (b, a) in before.iter().zip(&params.entries()[0].values) {
            assert!(a < b, "positive gradient must decrease the parameter");
            assert!((b - a - 1e-2).abs() < 1e-4, "first Adam step is ~lr in magnitude");
        }
    }

    #[test]
    fn weight_decay_shrinks_unused_parameters() {
        let mut params = tiny_params();
        let before: f32 = params.entries()[0].values.iter().map(|v| v.abs()).sum();
        let grads = zero_grads(&params);
        let mut opt = AdamW::new(&params, 0.9, 0.98, 0.1);
        opt.step(&mut params, &grads, 1e-2);
        let after: f32 = params.entries()[0].values.iter().map(|v| v.abs()).sum();
        assert!(after < before);
    }
}
