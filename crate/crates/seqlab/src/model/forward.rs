//! Forward passes: modality projection + encoder, CTC head, and the
//! teacher-forced decoder. Each sample owns its tape, so batches are
//! processed per sample and can be parallelised with order-stable
//! collection; parameters enter a tape either as differentiable inputs
//! (student) or constants (teacher / inference, no gradient flow).

use super::{AttnIdx, LinearIdx, Modality, ModelError, ModelParams, NormIdx, ParamMap};
use crate::autodiff::{Tape, Tensor, Var};
use crate::ctc::Lattice;
use crate::real::Real;

/// Sinusoidal absolute position table rows [0, len).
fn position_rows<R: Real>(len: usize, d: usize) -> Tensor<R> {
    let mut values = Vec::with_capacity(len * d);
    for p in 0..len {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / d as f64);
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            values.push(R::from_f64(v));
        }
    }
    Tensor::new(vec![len, d], values).expect("position table shape")
}

pub(crate) struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn get(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

fn bind<R: Real>(
    tape: &mut Tape<R>,
    params: &ModelParams<R>,
    trainable: bool,
) -> Result<Bound, ModelError> {
    let mut vars = Vec::with_capacity(params.entries().len());
    for e in params.entries() {
        let t = Tensor::new(e.shape.clone(), e.values.clone())?;
        let v = if trainable {
            tape.input_tensor(t)?
        } else {
            tape.constant_tensor(t)?
        };
        vars.push(v);
    }
    Ok(Bound { vars })
}

/// One encoded sample: hidden states [frames x d_model] on its own tape.
/// Rows at or beyond `len` are zeroed and never attended to.
pub struct EncodedSample<R: Real> {
    pub tape: Tape<R>,
    pub(crate) bound: Bound,
    pub(crate) map: ParamMap,
    pub hidden: Var,
    pub frames: usize,
    pub len: usize,
    pub modality: Modality,
    heads: usize,
    max_tokens: usize,
    encoding_len: usize,
}

fn linear<R: Real>(
    tape: &mut Tape<R>,
    bound: &Bound,
    idx: &LinearIdx,
    x: Var,
) -> Result<Var, ModelError> {
    let m = tape.matmul(x, bound.get(idx.w))?;
    Ok(tape.add_bias(m, bound.get(idx.b))?)
}

fn norm<R: Real>(
    tape: &mut Tape<R>,
    bound: &Bound,
    idx: &NormIdx,
    x: Var,
) -> Result<Var, ModelError> {
    Ok(tape.layer_norm(x, bound.get(idx.g), bound.get(idx.b), R::from_f64(1e-5))?)
}

/// Multi-head scaled dot-product attention. `allowed` is the
/// [queries x keys] attention mask; excluded entries get weight exactly 0.
fn attention<R: Real>(
    tape: &mut Tape<R>,
    bound: &Bound,
    idx: &AttnIdx,
    x_q: Var,
    x_kv: Var,
    allowed: &[bool],
    heads: usize,
) -> Result<Var, ModelError> {
    let d = tape.value(x_q).shape()[1];
    let dk = d / heads;
    let scale = R::from_f64(1.0 / (dk as f64).sqrt());
    let q = linear(tape, bound, &idx.q, x_q)?;
    let k = tape.matmul(x_kv, bound.get(idx.k_w))?;
    let v = linear(tape, bound, &idx.v, x_kv)?;
    let mut ctx: Option<Var> = None;
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let probs = tape.masked_softmax_rows(scaled, allowed)?;
        let ctx_h = tape.matmul(probs, vh)?;
        ctx = Some(match ctx {
            None => ctx_h,
            Some(c) => tape.concat_cols(c, ctx_h)?,
        });
    }
    linear(tape, bound, &idx.o, ctx.expect("at least one head"))
}

fn ffn<R: Real>(
    tape: &mut Tape<R>,
    bound: &Bound,
    idx: &super::FfnIdx,
    x: Var,
) -> Result<Var, ModelError> {
    let h = linear(tape, bound, &idx.lin1, x)?;
    let g = tape.gelu(h)?;
    linear(tape, bound, &idx.lin2, g)
}

impl<R: Real> ModelParams<R> {
    /// Encode one sample's frames. `len <= frames` marks the true frame
    /// count; the rest is padding that is excluded from attention and
    /// zeroed in the output. AV frames carry 2F features; A and V carry F.
    pub fn encode(
        &self,
        frames: &Tensor<R>,
        len: usize,
        modality: Modality,
        trainable: bool,
    ) -> Result<EncodedSample<R>, ModelError> {
        let (l, fdim) = frames.dims2().ok_or_else(|| ModelError::BadConfig(
            "frames must be a [frames x features] matrix".into(),
        ))?;
        let expected = match modality {
            Modality::AudioVisual => 2 * self.config.frame_dim,
            _ => self.config.frame_dim,
        };
        if fdim != expected {
            return Err(ModelError::FrameDim {
                modality,
                expected,
                got: fdim,
            });
        }
        if l > self.config.max_frames {
            return Err(ModelError::TooManyFrames {
                got: l,
                max: self.config.max_frames,
            });
        }
        assert!(len >= 1 && len <= l, "sample length out of range");

        let mut tape = Tape::new();
        let bound = bind(&mut tape, self, trainable)?;
        let map = self.map();
        let proj = match modality {
            Modality::Audio => &map.proj_audio,
            Modality::Visual => &map.proj_visual,
            Modality::AudioVisual => &map.proj_av,
        };
        let x_in = tape.constant_tensor(frames.clone())?;
        let projected = linear(&mut tape, &bound, proj, x_in)?;
        let pos = tape.constant_tensor(position_rows(l, self.config.d_model))?;
        let mut x = tape.add(projected, pos)?;

        // self-attention may look at any true frame, never at padding
        let mut allowed = vec![false; l * l];
        for i in 0..l {
            for j in 0..len {
                allowed[i * l + j] = true;
            }
        }
        for layer in &map.enc {
            let h1 = norm(&mut tape, &bound, &layer.ln1, x)?;
            let a = attention(&mut tape, &bound, &layer.attn, h1, h1, &allowed, self.config.heads)?;
            x = tape.add(x, a)?;
            let h2 = norm(&mut tape, &bound, &layer.ln2, x)?;
            let f = ffn(&mut tape, &bound, &layer.ffn, h2)?;
            x = tape.add(x, f)?;
        }
        x = norm(&mut tape, &bound, &map.enc_final, x)?;
        if len < l {
            let keep: Vec<bool> = (0..l).map(|i| i < len).collect();
            x = tape.row_mask(x, &keep)?;
        }
        let encoding_len = tape.len();
        Ok(EncodedSample {
            tape,
            bound,
            map,
            hidden: x,
            frames: l,
            len,
            modality,
            heads: self.config.heads,
            max_tokens: self.config.max_tokens,
            encoding_len,
        })
    }
}

impl<R: Real> EncodedSample<R> {
    /// Frame-level log-probabilities over the CTC vocabulary. The same
    /// lattice node feeds the loss and greedy decoding; nothing is
    /// recomputed.
    pub fn ctc_head(&mut self) -> Result<Var, ModelError> {
        let map_head = self.map.ctc_head.clone();
        let logits = linear(&mut self.tape, &self.bound, &map_head, self.hidden)?;
        Ok(self.tape.log_softmax(logits, 1)?)
    }

    /// Extract the lattice values (true frames only) for decoding.
    pub fn lattice(&self, lattice_var: Var, blank: u16) -> Lattice<R> {
        let t = self.tape.value(lattice_var);
        let (_, vocab) = t.dims2().expect("lattice is 2-D");
        Lattice::new(
            t.values()[..self.len * vocab].to_vec(),
            self.len,
            vocab,
            blank,
        )
    }

    /// Teacher-forced decoder pass: feed `input_tokens` (starting with
    /// sos) and get log-probabilities for every position in parallel.
    /// Position u sees input positions <= u (causal mask) plus the
    /// encoder states.
    pub fn decode_forced(&mut self, input_tokens: &[u16]) -> Result<Var, ModelError> {
        let u = input_tokens.len();
        assert!(u >= 1, "decoder needs at least the sos token");
        if u > self.max_tokens {
            return Err(ModelError::TooManyTokens {
                got: u,
                max: self.max_tokens,
            });
        }
        let vocab = self.tape.value(self.bound.get(self.map.embed)).shape()[0];
        for &t in input_tokens {
            if t as usize >= vocab {
                return Err(ModelError::BadToken { token: t, vocab });
            }
        }
        let d = self.tape.value(self.hidden).shape()[1];
        let emb = self.tape.embedding(self.bound.get(self.map.embed), input_tokens)?;
        let pos = self.tape.constant_tensor(position_rows(u, d))?;
        let mut x = self.tape.add(emb, pos)?;

        let mut causal = vec![false; u * u];
        for i in 0..u {
            for j in 0..=i {
                causal[i * u + j] = true;
            }
        }
        let mut cross_allowed = vec![false; u * self.frames];
        for i in 0..u {
            for j in 0..self.len {
                cross_allowed[i * self.frames + j] = true;
            }
        }
        let heads = self.heads;
        let dec_layers: Vec<_> = self.map.dec.clone();
        for layer in &dec_layers {
            let h1 = norm(&mut self.tape, &self.bound, &layer.ln_self, x)?;
            let a = attention(
                &mut self.tape,
                &self.bound,
                &layer.self_attn,
                h1,
                h1,
                &causal,
                heads,
            )?;
            x = self.tape.add(x, a)?;
            let h2 = norm(&mut self.tape, &self.bound, &layer.ln_cross, x)?;
            let c = attention(
                &mut self.tape,
                &self.bound,
                &layer.cross_attn,
                h2,
                self.hidden,
                &cross_allowed,
                heads,
            )?;
            x = self.tape.add(x, c)?;
            let h3 = norm(&mut self.tape, &self.bound, &layer.ln_ffn, x)?;
            let f = ffn(&mut self.tape, &self.bound, &layer.ffn, h3)?;
            x = self.tape.add(x, f)?;
        }
        x = norm(&mut self.tape, &self.bound, &self.map.dec_final, x)?;
        let head = self.map.out_head.clone();
        let logits = linear(&mut self.tape, &self.bound, &head, x)?;
        Ok(self.tape.log_softmax(logits, 1)?)
    }

    /// Gradient of a parameter entry after backward, by registry index.
    pub fn param_grad(&self, entry_idx: usize) -> Option<&[R]> {
        self.tape.grad(self.bound.get(entry_idx))
    }

    /// Drop everything recorded after the encoder pass. Inference paths
    /// that run many decoder passes over one encoding call this between
    /// passes to keep the tape bounded.
    pub fn reset_decoder(&mut self) {
        self.tape.truncate(self.encoding_len);
    }

    /// Decoder input vocabulary size (content tokens + sos).
    pub fn decoder_vocab(&self) -> usize {
        self.tape.value(self.bound.get(self.map.embed)).shape()[0]
    }

    /// CTC head vocabulary size (content tokens + blank).
    pub fn ctc_vocab(&self) -> usize {
        self.tape.value(self.bound.get(self.map.ctc_head.b)).shape()[0]
    }
}
