//! Attention-side decoding: autoregressive greedy, CTC-driven teacher
//! forcing (pseudo-labels in one parallel pass), label-synchronous CTC
//! prefix scoring, and joint CTC-attention beam search.
//!
//! Everything is written against the [`StepDecoder`] trait so tests can
//! drive the algorithms with scripted decoders, and instrumentation
//! (decoder forward-pass counts) falls out of the trait naturally.

use crate::ctc::Lattice;
use crate::model::{EncodedSample, ModelError};
use crate::real::{log_add, Real};

/// Abstraction over one decoder: given the content tokens generated so
/// far, return distributions. The model-backed implementation prepends
/// sos and runs one teacher-forced pass per call.
pub trait StepDecoder<R: Real> {
    /// Log-probabilities at every output position for the forced input
    /// [sos, prefix...]: row u is the distribution over token u+1 given
    /// prefix[..u]. One decoder forward pass.
    fn forced_rows(&mut self, prefix: &[u16]) -> Result<Vec<Vec<R>>, ModelError>;

    /// Distribution over the next token after `prefix`. One forward pass.
    fn next_logprobs(&mut self, prefix: &[u16]) -> Result<Vec<R>, ModelError> {
        Ok(self.forced_rows(prefix)?.pop().expect("at least one row"))
    }

    fn eos(&self) -> u16;
    /// Maximum decoder input length (sos included).
    fn max_tokens(&self) -> usize;
    /// Number of forward passes taken so far.
    fn passes(&self) -> u64;
}

/// Model-backed decoder over a fixed encoding. Each call truncates the
/// tape back to the encoder pass, so arbitrarily many calls stay bounded.
pub struct ModelDecoder<'a, R: Real> {
    enc: &'a mut EncodedSample<R>,
    sos: u16,
    eos: u16,
    max_tokens: usize,
    passes: u64,
}

impl<'a, R: Real> ModelDecoder<'a, R> {
    pub fn new(enc: &'a mut EncodedSample<R>, sos: u16, eos: u16, max_tokens: usize) -> Self {
        ModelDecoder {
            enc,
            sos,
            eos,
            max_tokens,
            passes: 0,
        }
    }
}

impl<R: Real> StepDecoder<R> for ModelDecoder<'_, R> {
    fn forced_rows(&mut self, prefix: &[u16]) -> Result<Vec<Vec<R>>, ModelError> {
        self.enc.reset_decoder();
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(self.sos);
        input.extend_from_slice(prefix);
        let out = self.enc.decode_forced(&input)?;
        self.passes += 1;
        let t = self.enc.tape.value(out);
        let (rows, _) = t.dims2().expect("decoder output is 2-D");
        Ok((0..rows).map(|r| t.row(r).to_vec()).collect())
    }

    fn eos(&self) -> u16 {
        self.eos
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn passes(&self) -> u64 {
        self.passes
    }
}

/// Attention-side label sequence: content tokens with their per-token max
/// probabilities. `ended_with_eos` distinguishes a genuine stop from a
/// max-length cut-off; `passes` counts decoder forwards (U_AR + 1 when
/// eos fired, U_AR otherwise).
#[derive(Clone, Debug, PartialEq)]
pub struct AttLabelSequence<R> {
    pub tokens: Vec<u16>,
    pub confidences: Vec<R>,
    pub ended_with_eos: bool,
    pub passes: u64,
}

fn argmax_lowest<R: Real>(row: &[R]) -> usize {
    let mut best = 0usize;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Autoregressive greedy decoding: start from sos, feed back the argmax
/// at each step, stop at eos or `max_len` content tokens. eos is excluded
/// from the returned tokens.
pub fn ar_greedy<R: Real>(
    dec: &mut dyn StepDecoder<R>,
    max_len: usize,
) -> Result<AttLabelSequence<R>, ModelError> {
    assert!(max_len + 1 <= dec.max_tokens(), "max_len exceeds decoder input budget");
    let before = dec.passes();
    let mut tokens: Vec<u16> = Vec::new();
    let mut confidences: Vec<R> = Vec::new();
    let mut ended_with_eos = false;
    loop {
        let row = dec.next_logprobs(&tokens)?;
        let best = argmax_lowest(&row) as u16;
        if best == dec.eos() {
            ended_with_eos = true;
            break;
        }
        confidences.push(row[best as usize].exp());
        tokens.push(best);
        if tokens.len() >= max_len {
            break;
        }
    }
    Ok(AttLabelSequence {
        tokens,
        confidences,
        ended_with_eos,
        passes: dec.passes() - before,
    })
}

/// Why a pseudo-label was dropped rather than produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForcingSkip {
    /// The CTC pseudo-label is too long for the decoder input budget.
    TooLong,
}

/// CTC-driven teacher forcing: condition the decoder on the fixed CTC
/// prefix [sos, ctc_pl[..U-1]] and read off all U output argmaxes from a
/// single forward pass. Output position u depends only on ctc_pl[..u]
/// and the encoding, and the output length equals the CTC pseudo-label
/// length exactly.
pub fn ctc_driven_forcing<R: Real>(
    dec: &mut dyn StepDecoder<R>,
    ctc_pl: &[u16],
) -> Result<Result<AttLabelSequence<R>, ForcingSkip>, ModelError> {
    assert!(!ctc_pl.is_empty(), "empty CTC pseudo-labels are handled upstream");
    if ctc_pl.len() + 1 > dec.max_tokens() {
        return Ok(Err(ForcingSkip::TooLong));
    }
    let before = dec.passes();
    let rows = dec.forced_rows(&ctc_pl[..ctc_pl.len() - 1])?;
    debug_assert_eq!(rows.len(), ctc_pl.len());
    let mut tokens = Vec::with_capacity(rows.len());
    let mut confidences = Vec::with_capacity(rows.len());
    for row in &rows {
        // the pseudo-label vocabulary is content-only: eos (the highest
        // index) is not a valid target, so argmax over content tokens
        let content = &row[..row.len() - 1];
        let best = argmax_lowest(content);
        tokens.push(best as u16);
        confidences.push(content[best].exp());
    }
    Ok(Ok(AttLabelSequence {
        tokens,
        confidences,
        ended_with_eos: false,
        passes: dec.passes() - before,
    }))
}

/// Label-synchronous CTC prefix scoring state for one hypothesis:
/// log-probabilities of the paths that collapse exactly to the hypothesis
/// and end in blank / in its last label, per frame, plus the prefix
/// probability (mass of all paths whose collapse extends the hypothesis).
#[derive(Clone, Debug)]
pub struct PrefixState<R> {
    ending_blank: Vec<R>,
    ending_label: Vec<R>,
    last: Option<u16>,
    log_prefix: R,
}

impl<R: Real> PrefixState<R> {
    /// log P(all paths whose collapse starts with this hypothesis).
    pub fn log_prefix_prob(&self) -> R {
        self.log_prefix
    }

    /// log P(paths that collapse to exactly this hypothesis).
    pub fn log_full_prob(&self) -> R {
        log_add(
            *self.ending_blank.last().unwrap(),
            *self.ending_label.last().unwrap(),
        )
    }
}

/// Incremental prefix scorer over one lattice (true frames only).
pub struct CtcPrefixScorer<'a, R> {
    lattice: &'a Lattice<R>,
}

impl<'a, R: Real> CtcPrefixScorer<'a, R> {
    pub fn new(lattice: &'a Lattice<R>) -> Self {
        CtcPrefixScorer { lattice }
    }

    /// State of the empty hypothesis: only all-blank paths collapse to it,
    /// and every path extends it (prefix probability 1).
    pub fn init(&self) -> PrefixState<R> {
        let frames = self.lattice.frames();
        let blank = self.lattice.blank();
        let mut ending_blank = Vec::with_capacity(frames);
        let mut acc = R::ZERO;
        for t in 0..frames {
            acc += self.lattice.logp(t, blank);
            ending_blank.push(acc);
        }
        PrefixState {
            ending_blank,
            ending_label: vec![R::NEG_INFINITY; frames],
            last: None,
            log_prefix: R::ZERO,
        }
    }

    /// Extend a hypothesis by one content token, maintaining the two
    /// running per-frame quantities and returning the new state. The new
    /// prefix probability sums, over the frame where the appended label
    /// is first emitted, transition mass times that frame's label
    /// probability (completions contribute mass one because lattice rows
    /// are normalised).
    pub fn extend(&self, state: &PrefixState<R>, token: u16) -> PrefixState<R> {
        let frames = self.lattice.frames();
        let blank = self.lattice.blank();
        let ninf = R::NEG_INFINITY;
        let mut ending_blank = vec![ninf; frames];
        let mut ending_label = vec![ninf; frames];
        let mut log_prefix = ninf;
        let repeat = state.last == Some(token);
        for t in 0..frames {
            // mass of paths that finish the old hypothesis before t and
            // can start `token` at t (a repeated label needs a blank
            // in between, so only blank-ending paths qualify)
            let start_mass = if t == 0 {
                if state.last.is_none() {
                    R::ZERO // empty hypothesis: probability one
                } else {
                    ninf
                }
            } else if repeat {
                state.ending_blank[t - 1]
            } else {
                log_add(state.ending_blank[t - 1], state.ending_label[t - 1])
            };
            let p_tok = self.lattice.logp(t, token);
            let continued = if t == 0 { ninf } else { ending_label[t - 1] };
            ending_label[t] = p_tok + log_add(start_mass, continued);
            let prev_new = if t == 0 {
                ninf
            } else {
                log_add(ending_blank[t - 1], ending_label[t - 1])
            };
            ending_blank[t] = self.lattice.logp(t, blank) + prev_new;
            if start_mass != ninf {
                log_prefix = log_add(log_prefix, start_mass + p_tok);
            }
        }
        PrefixState {
            ending_blank,
            ending_label,
            last: Some(token),
            log_prefix,
        }
    }
}

/// Convenience form of the prefix score: the log prefix probability of
/// `prefix + [next_token]` under the lattice.
pub fn ctc_prefix_score<R: Real>(lattice: &Lattice<R>, prefix: &[u16], next_token: u16) -> R {
    let scorer = CtcPrefixScorer::new(lattice);
    let mut state = scorer.init();
    for &t in prefix {
        state = scorer.extend(&state, t);
    }
    scorer.extend(&state, next_token).log_prefix_prob()
}

#[derive(Clone, Debug)]
struct Hypothesis<R: Real> {
    tokens: Vec<u16>,
    att: R,
    ctc_state: Option<PrefixState<R>>,
    /// CTC component: prefix probability while open, full-sequence
    /// probability once finished.
    ctc: R,
    finished: bool,
}

impl<R: Real> Hypothesis<R> {
    fn combined(&self, alpha: R, length_penalty: R) -> R {
        alpha * self.ctc
            + (R::ONE - alpha) * self.att
            + length_penalty * R::from_f64(self.tokens.len() as f64)
    }
}

/// Total order for beam ranking: higher combined score first, then the
/// lexicographically smallest token sequence, then finished-before-open.
fn hyp_order<R: Real>(
    a: &Hypothesis<R>,
    b: &Hypothesis<R>,
    alpha: R,
    length_penalty: R,
) -> std::cmp::Ordering {
    let sa = a.combined(alpha, length_penalty);
    let sb = b.combined(alpha, length_penalty);
    sb.partial_cmp(&sa)
        .expect("beam scores are never NaN")
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| b.finished.cmp(&a.finished))
}

/// Joint CTC-attention beam search over content tokens plus eos.
///
/// Each hypothesis is scored by alpha * log P_ctc + (1 - alpha) * log
/// P_att plus an optional additive per-token reward (default zero). The
/// CTC term is the label-synchronous prefix probability while a
/// hypothesis is open and the full-sequence probability once it emits
/// eos; the attention term always includes the eos step of finished
/// hypotheses. Finished hypotheses stay in the beam and compete for slots
/// (which is what makes beam 1 with alpha 0 coincide with greedy
/// decoding); any hypothesis still open at `max_len` is closed with its
/// eos score. Ties break to the lexicographically smallest sequence.
pub fn joint_beam_search<R: Real>(
    dec: &mut dyn StepDecoder<R>,
    lattice: &Lattice<R>,
    beam: usize,
    alpha: R,
    max_len: usize,
    length_penalty: R,
) -> Result<Vec<u16>, ModelError> {
    assert!(beam >= 1, "beam must be at least 1");
    assert!(alpha >= R::ZERO && alpha <= R::ONE, "alpha must be in [0, 1]");
    assert!(max_len + 1 <= dec.max_tokens(), "max_len exceeds decoder input budget");
    let scorer = CtcPrefixScorer::new(lattice);
    let use_ctc = alpha != R::ZERO;
    let eos = dec.eos();

    let root = Hypothesis {
        tokens: Vec::new(),
        att: R::ZERO,
        ctc_state: use_ctc.then(|| scorer.init()),
        ctc: R::ZERO,
        finished: false,
    };
    let mut live: Vec<Hypothesis<R>> = vec![root];

    for _ in 0..max_len {
        if live.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates: Vec<Hypothesis<R>> = Vec::new();
        for h in &live {
            if h.finished {
                candidates.push(h.clone());
                continue;
            }
            let row = dec.next_logprobs(&h.tokens)?;
            let content_vocab = row.len() - 1;
            for c in 0..content_vocab {
                let mut tokens = h.tokens.clone();
                tokens.push(c as u16);
                let (state, ctc) = if use_ctc {
                    let s = scorer.extend(h.ctc_state.as_ref().unwrap(), c as u16);
                    let p = s.log_prefix_prob();
                    (Some(s), p)
                } else {
                    (None, R::ZERO)
                };
                candidates.push(Hypothesis {
                    tokens,
                    att: h.att + row[c],
                    ctc_state: state,
                    ctc,
                    finished: false,
                });
            }
            // eos closes the hypothesis: full-sequence CTC probability
            let ctc_full = if use_ctc {
                h.ctc_state.as_ref().unwrap().log_full_prob()
            } else {
                R::ZERO
            };
            candidates.push(Hypothesis {
                tokens: h.tokens.clone(),
                att: h.att + row[eos as usize],
                ctc_state: None,
                ctc: ctc_full,
                finished: true,
            });
        }
        candidates.sort_by(|a, b| hyp_order(a, b, alpha, length_penalty));
        candidates.truncate(beam);
        live = candidates;
    }

    // close anything still open with its eos score
    let mut best: Option<Hypothesis<R>> = None;
    for mut h in live {
        if !h.finished {
            let row = dec.next_logprobs(&h.tokens)?;
            h.att += row[eos as usize];
            h.ctc = if use_ctc {
                h.ctc_state.as_ref().unwrap().log_full_prob()
            } else {
                R::ZERO
            };
            h.ctc_state = None;
            h.finished = true;
        }
        best = match best {
            None => Some(h),
            Some(b) => {
                if hyp_order(&h, &b, alpha, length_penalty) == std::cmp::Ordering::Less {
                    Some(h)
                } else {
                    Some(b)
                }
            }
        };
    }
    Ok(best.expect("beam is never empty").tokens)
}

#[cfg(test)]
mod tests;
