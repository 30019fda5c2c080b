//! CTC algorithms over per-frame log-probability lattices.
//!
//! The marginal loss -log sum_{pi in B^-1(y)} prod_t P(pi_t | x) is
//! computed with the extended-label forward recursion in the log domain
//! (pairwise log-sum-exp, no scaling trick; lengths here never need one).
//! `collapse` is the standard B: merge adjacent repeats first, then delete
//! blanks. A brute-force path enumeration over vocab^L serves as the test
//! oracle for both the loss and the prefix scoring in `decode`.

use crate::autodiff::{CustomVjp, Result, Tape, Tensor, TensorError, Var};
use crate::real::{log_add, Real};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CtcError {
    #[error("brute force bounds exceeded: frames {frames} (max 8), vocab {vocab} (max 5)")]
    BruteForceBounds { frames: usize, vocab: usize },
    #[error("lattice row {0} does not match vocab size")]
    BadLattice(usize),
}

/// Per-frame log-probabilities over the CTC vocabulary (content tokens
/// plus blank). One lattice object feeds greedy decoding, the loss, and
/// prefix scoring alike; it is extracted from the model head once and
/// never recomputed.
#[derive(Clone, Debug)]
pub struct Lattice<R> {
    values: Vec<R>,
    frames: usize,
    vocab: usize,
    blank: u16,
}

impl<R: Real> Lattice<R> {
    pub fn new(values: Vec<R>, frames: usize, vocab: usize, blank: u16) -> Self {
        assert_eq!(values.len(), frames * vocab, "lattice shape mismatch");
        assert!((blank as usize) < vocab);
        Lattice {
            values,
            frames,
            vocab,
            blank,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn blank(&self) -> u16 {
        self.blank
    }

    #[inline]
    pub fn logp(&self, t: usize, k: u16) -> R {
        self.values[t * self.vocab + k as usize]
    }

    pub fn row(&self, t: usize) -> &[R] {
        &self.values[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }
}

/// Greedy per-frame decode: argmax token id (possibly blank) and its
/// probability for every frame. Ties break to the lowest token index so
/// runs are bitwise reproducible.
#[derive(Clone, Debug)]
pub struct FramePath<R> {
    pub tokens: Vec<u16>,
    pub probs: Vec<R>,
}

pub fn ctc_greedy<R: Real>(lattice: &Lattice<R>) -> FramePath<R> {
    let mut tokens = Vec::with_capacity(lattice.frames);
    let mut probs = Vec::with_capacity(lattice.frames);
    for t in 0..lattice.frames {
        let row = lattice.row(t);
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        tokens.push(best as u16);
        probs.push(row[best].exp());
    }
    FramePath { tokens, probs }
}

/// The standard CTC post-processing map B: merge adjacent repeated
/// symbols, then delete blanks. (Removing blanks first would differ on
/// paths like [a, blank, a]; this implementation is merge-then-remove.)
pub fn collapse(tokens: &[u16], blank: u16) -> Vec<u16> {
    let mut out = Vec::new();
    let mut prev: Option<u16> = None;
    for &t in tokens {
        if prev != Some(t) && t != blank {
            out.push(t);
        }
        prev = Some(t);
    }
    out
}

/// Geometric mean of the per-frame max probabilities:
/// exp(mean_t log c_t). A zero probability clamps its log at -1e9, which
/// drives the confidence to zero rather than NaN.
pub fn sequence_confidence<R: Real>(probs: &[R]) -> R {
    assert!(!probs.is_empty(), "confidence needs at least one frame");
    let clamp = R::from_f64(-1e9);
    let mut acc = R::ZERO;
    for &p in probs {
        let lp = if p <= R::ZERO { clamp } else { p.ln() };
        acc += lp.max(clamp);
    }
    (acc / R::from_f64(probs.len() as f64)).exp()
}

/// Minimum number of frames a target needs: one per token plus one blank
/// between each adjacent repeated pair.
pub fn min_path_len(target: &[u16]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

/// Outcome of the CTC marginal: infeasible targets (too long for the
/// lattice, or requiring a zero-probability symbol everywhere) are
/// flagged rather than thrown so the caller can skip the sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CtcOutcome<R> {
    Loss(R),
    Infeasible,
}

impl<R: Real> CtcOutcome<R> {
    pub fn loss(self) -> Option<R> {
        match self {
            CtcOutcome::Loss(l) => Some(l),
            CtcOutcome::Infeasible => None,
        }
    }
}

fn extended_labels(target: &[u16], blank: u16) -> Vec<u16> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

fn forward_alphas<R: Real>(lattice: &Lattice<R>, ext: &[u16]) -> Vec<Vec<R>> {
    let frames = lattice.frames;
    let s_len = ext.len();
    let ninf = R::NEG_INFINITY;
    let mut alpha = vec![vec![ninf; s_len]; frames];
    alpha[0][0] = lattice.logp(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = lattice.logp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != lattice.blank && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            if acc != ninf {
                alpha[t][s] = acc + lattice.logp(t, ext[s]);
            }
        }
    }
    alpha
}

fn backward_betas<R: Real>(lattice: &Lattice<R>, ext: &[u16]) -> Vec<Vec<R>> {
    let frames = lattice.frames;
    let s_len = ext.len();
    let ninf = R::NEG_INFINITY;
    let mut beta = vec![vec![ninf; s_len]; frames];
    beta[frames - 1][s_len - 1] = lattice.logp(frames - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[frames - 1][s_len - 2] = lattice.logp(frames - 1, ext[s_len - 2]);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[t + 1][s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != lattice.blank && ext[s + 2] != ext[s] {
                acc = log_add(acc, beta[t + 1][s + 2]);
            }
            if acc != ninf {
                beta[t][s] = acc + lattice.logp(t, ext[s]);
            }
        }
    }
    beta
}

fn log_marginal<R: Real>(lattice: &Lattice<R>, target: &[u16]) -> R {
    let ext = extended_labels(target, lattice.blank);
    let alpha = forward_alphas(lattice, &ext);
    let last = &alpha[lattice.frames - 1];
    let mut logp = last[ext.len() - 1];
    if ext.len() > 1 {
        logp = log_add(logp, last[ext.len() - 2]);
    }
    logp
}

/// Negative log marginal probability of `target` under the lattice.
pub fn ctc_loss<R: Real>(lattice: &Lattice<R>, target: &[u16]) -> CtcOutcome<R> {
    if lattice.frames < min_path_len(target) {
        return CtcOutcome::Infeasible;
    }
    let logp = log_marginal(lattice, target);
    if logp == R::NEG_INFINITY {
        return CtcOutcome::Infeasible;
    }
    CtcOutcome::Loss(-logp)
}

/// Loss plus its gradient with respect to every lattice entry, via the
/// forward-backward decomposition: the occupancy of (t, s) is
/// alpha[t][s] + beta[t][s] - logp(t, ext[s]), and
/// d(-log p)/d l[t][k] = -exp(lse over {s: ext[s]=k} occupancy - log p).
pub fn ctc_loss_with_grad<R: Real>(lattice: &Lattice<R>, target: &[u16]) -> Option<(R, Vec<R>)> {
    if lattice.frames < min_path_len(target) {
        return None;
    }
    let ext = extended_labels(target, lattice.blank);
    let alpha = forward_alphas(lattice, &ext);
    let beta = backward_betas(lattice, &ext);
    let last = &alpha[lattice.frames - 1];
    let mut logp = last[ext.len() - 1];
    if ext.len() > 1 {
        logp = log_add(logp, last[ext.len() - 2]);
    }
    if logp == R::NEG_INFINITY {
        return None;
    }
    let ninf = R::NEG_INFINITY;
    let mut grad = vec![R::ZERO; lattice.frames * lattice.vocab];
    for t in 0..lattice.frames {
        let mut per_symbol = vec![ninf; lattice.vocab];
        for (s, &lab) in ext.iter().enumerate() {
            let a = alpha[t][s];
            let b = beta[t][s];
            if a == ninf || b == ninf {
                continue;
            }
            let occ = a + b - lattice.logp(t, lab);
            per_symbol[lab as usize] = log_add(per_symbol[lab as usize], occ);
        }
        for k in 0..lattice.vocab {
            if per_symbol[k] != ninf {
                grad[t * lattice.vocab + k] = -(per_symbol[k] - logp).exp();
            }
        }
    }
    Some((-logp, grad))
}

/// Exact marginal by enumerating every path in vocab^frames and summing
/// the probabilities of those that collapse to `target`. Exponential;
/// bounded to frames <= 8 and vocab <= 5. Returns +infinity when no path
/// collapses to the target.
pub fn brute_force_ctc(lattice: &Lattice<f64>, target: &[u16]) -> std::result::Result<f64, CtcError> {
    if lattice.frames > 8 || lattice.vocab > 5 {
        return Err(CtcError::BruteForceBounds {
            frames: lattice.frames,
            vocab: lattice.vocab,
        });
    }
    let mut total = 0.0f64;
    let mut path = vec![0u16; lattice.frames];
    loop {
        if collapse(&path, lattice.blank) == target {
            let mut logp = 0.0;
            for (t, &k) in path.iter().enumerate() {
                logp += lattice.logp(t, k);
            }
            total += logp.exp();
        }
        // odometer increment over vocab^frames
        let mut pos = 0;
        loop {
            if pos == lattice.frames {
                return Ok(if total > 0.0 {
                    -total.ln()
                } else {
                    f64::INFINITY
                });
            }
            path[pos] += 1;
            if (path[pos] as usize) < lattice.vocab {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

// The adjoint is computed eagerly at forward time (the recursion already
// produces everything needed), so the Vjp just replays a stored buffer.
struct StoredGradVjp<R> {
    grad: Vec<R>,
}

impl<R: Real> CustomVjp<R> for StoredGradVjp<R> {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }
    fn backward(&self, _inputs: &[&Tensor<R>], _output: &Tensor<R>, out_grad: &[R]) -> Vec<Vec<R>> {
        let g0 = out_grad[0];
        vec![self.grad.iter().map(|&g| g * g0).collect()]
    }
}

/// Record the CTC loss of a lattice held on a tape. `lattice_var` must be
/// a [frames x vocab] node of log-probabilities (frames beyond
/// `frames` rows are not supported here; slice first). Returns `None`
/// when the target is infeasible for the lattice, in which case nothing
/// is recorded.
pub fn ctc_loss_on_tape<R: Real>(
    tape: &mut Tape<R>,
    lattice_var: Var,
    blank: u16,
    target: &[u16],
) -> Result<Option<Var>> {
    let t = tape.value(lattice_var);
    let (frames, vocab) = t.dims2().ok_or(TensorError::BadShape {
        op: "ctc_loss",
        expected: "[frames x vocab] lattice",
        got: format!("{:?}", t.shape()),
    })?;
    let lattice = Lattice::new(t.values().to_vec(), frames, vocab, blank);
    match ctc_loss_with_grad(&lattice, target) {
        None => Ok(None),
        Some((loss, grad)) => {
            let var = tape.push_custom(
                vec![lattice_var],
                Tensor::scalar(loss),
                Box::new(StoredGradVjp { grad }),
            )?;
            Ok(Some(var))
        }
    }
}

#[cfg(test)]
mod tests;
