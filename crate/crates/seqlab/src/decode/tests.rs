use super::*;
use crate::ctc::{collapse, ctc_loss, CtcOutcome, Lattice};
use crate::model::{Modality, ModelConfig, ModelError, ModelParams};
use crate::rng::SplitMix64;
use std::collections::HashMap;

/// Scripted decoder: a table from content prefixes to next-token
/// log-distributions, with a uniform fallback.
struct Scripted {
    vocab: usize,
    table: HashMap<Vec<u16>, Vec<f64>>,
    passes: u64,
}

impl Scripted {
    fn new(vocab: usize) -> Self {
        Scripted {
            vocab,
            table: HashMap::new(),
            passes: 0,
        }
    }

    fn script(mut self, prefix: &[u16], probs: &[f64]) -> Self {
        assert_eq!(probs.len(), self.vocab);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        self.table
            .insert(prefix.to_vec(), probs.iter().map(|p| p.ln()).collect());
        self
    }

    fn row(&self, prefix: &[u16]) -> Vec<f64> {
        self.table
            .get(prefix)
            .cloned()
            .unwrap_or_else(|| vec![-(self.vocab as f64).ln(); self.vocab])
    }
}

impl StepDecoder<f64> for Scripted {
    fn forced_rows(&mut self, prefix: &[u16]) -> Result<Vec<Vec<f64>>, ModelError> {
        self.passes += 1;
        Ok((0..=prefix.len()).map(|u| self.row(&prefix[..u])).collect())
    }
    fn eos(&self) -> u16 {
        (self.vocab - 1) as u16
    }
    fn max_tokens(&self) -> usize {
        64
    }
    fn passes(&self) -> u64 {
        self.passes
    }
}

#[test]
fn ar_greedy_immediate_eos_is_empty() {
    let mut dec = Scripted::new(5).script(&[], &[0.05, 0.05, 0.05, 0.05, 0.8]);
    let out = ar_greedy(&mut dec, 10).unwrap();
    assert!(out.tokens.is_empty());
    assert!(out.ended_with_eos);
    assert_eq!(out.passes, 1);
}

#[test]
fn ar_greedy_hand_built_two_steps() {
    // step 1: argmax token 3 with probability 0.9; step 2 (after 3): eos
    let mut dec = Scripted::new(5)
        .script(&[], &[0.02, 0.02, 0.03, 0.9, 0.03])
        .script(&[3], &[0.1, 0.05, 0.05, 0.05, 0.75]);
    let out = ar_greedy(&mut dec, 10).unwrap();
    assert_eq!(out.tokens, vec![3]);
    assert!((out.confidences[0] - 0.9).abs() < 1e-12);
    assert!(out.ended_with_eos);
    assert_eq!(out.passes, 2, "U_AR + 1 passes when eos fires");
}

#[test]
fn ar_greedy_is_deterministic_and_respects_max_len() {
    let mut dec = Scripted::new(4).script(&[], &[0.7, 0.1, 0.1, 0.1]);
    // fallback rows are uniform, so argmax ties at token 0 forever
    let a = ar_greedy(&mut dec, 6).unwrap();
    let mut dec2 = Scripted::new(4).script(&[], &[0.7, 0.1, 0.1, 0.1]);
    let b = ar_greedy(&mut dec2, 6).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.tokens.len(), 6, "cut off at max_len");
    assert!(!a.ended_with_eos);
    assert_eq!(a.passes, 6, "U_AR passes when max_len stops decoding");
}

#[test]
fn forcing_output_length_equals_ctc_prefix_length() {
    for len in 1..=7usize {
        let pl: Vec<u16> = (0..len as u16).map(|t| t % 3).collect();
        let mut dec = Scripted::new(5);
        let out = ctc_driven_forcing(&mut dec, &pl).unwrap().unwrap();
        assert_eq!(out.tokens.len(), pl.len());
        assert_eq!(out.confidences.len(), pl.len());
        assert_eq!(out.passes, 1, "exactly one decoder forward");
    }
}

#[test]
fn forcing_skips_overlong_prefixes_without_error() {
    struct TinyBudget(Scripted);
    impl StepDecoder<f64> for TinyBudget {
        fn forced_rows(&mut self, p: &[u16]) -> Result<Vec<Vec<f64>>, ModelError> {
            self.0.forced_rows(p)
        }
        fn eos(&self) -> u16 {
            self.0.eos()
        }
        fn max_tokens(&self) -> usize {
            4
        }
        fn passes(&self) -> u64 {
            self.0.passes()
        }
    }
    let mut dec = TinyBudget(Scripted::new(5));
    assert_eq!(
        ctc_driven_forcing(&mut dec, &[0, 1, 2, 0]).unwrap(),
        Err(ForcingSkip::TooLong)
    );
    assert!(ctc_driven_forcing(&mut dec, &[0, 1, 2]).unwrap().is_ok());
}

#[test]
fn forcing_position_depends_only_on_earlier_prefix_tokens() {
    // scripted rows keyed by the prefix seen so far make the causality
    // explicit: position u reads prefix[..u] only
    let base: Vec<u16> = vec![1, 2, 0];
    let mut dec = Scripted::new(5)
        .script(&[], &[0.6, 0.1, 0.1, 0.1, 0.1])
        .script(&[1], &[0.1, 0.6, 0.1, 0.1, 0.1])
        .script(&[1, 2], &[0.1, 0.1, 0.6, 0.1, 0.1]);
    let a = ctc_driven_forcing(&mut dec, &base).unwrap().unwrap();
    let mut perturbed = base.clone();
    perturbed[2] = 1; // change the last prefix token
    let mut dec2 = Scripted::new(5)
        .script(&[], &[0.6, 0.1, 0.1, 0.1, 0.1])
        .script(&[1], &[0.1, 0.6, 0.1, 0.1, 0.1])
        .script(&[1, 2], &[0.1, 0.1, 0.6, 0.1, 0.1]);
    let b = ctc_driven_forcing(&mut dec2, &perturbed).unwrap().unwrap();
    assert_eq!(a.tokens[..2], b.tokens[..2]);
}

fn random_lattice(rng: &mut SplitMix64, frames: usize, vocab: usize) -> Lattice<f64> {
    let mut vals = Vec::with_capacity(frames * vocab);
    for _ in 0..frames {
        let logits: Vec<f64> = (0..vocab).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let lz = z.ln() + mx;
        vals.extend(logits.iter().map(|l| l - lz));
    }
    Lattice::new(vals, frames, vocab, (vocab - 1) as u16)
}

/// Brute-force prefix probability: mass of all paths whose collapse has
/// `prefix` as a (not necessarily proper) prefix.
fn brute_prefix_prob(lattice: &Lattice<f64>, prefix: &[u16]) -> f64 {
    let frames = lattice.frames();
    let vocab = lattice.vocab();
    let mut total = 0.0;
    let mut path = vec![0u16; frames];
    loop {
        let c = collapse(&path, lattice.blank());
        if c.len() >= prefix.len() && &c[..prefix.len()] == prefix {
            let mut logp = 0.0;
            for (t, &k) in path.iter().enumerate() {
                logp += lattice.logp(t, k);
            }
            total += logp.exp();
        }
        let mut pos = 0;
        loop {
            if pos == frames {
                return total;
            }
            path[pos] += 1;
            if (path[pos] as usize) < vocab {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

#[test]
fn prefix_score_one_hot_spelling() {
    // lattice that deterministically spells "a b": prefix score of the
    // full sequence is log 1 = 0
    let hi = (1.0f64 - 2e-12).ln();
    let lo = 1e-12f64.ln();
    #[rustfmt::skip]
    let vals = vec![
        hi, lo, lo,
        lo, hi, lo,
    ];
    let lattice = Lattice::new(vals, 2, 3, 2);
    let score = ctc_prefix_score(&lattice, &[0], 1);
    assert!(score.abs() < 1e-9, "score {score}");
}

#[test]
fn prefix_score_impossible_symbol_is_neg_infinity() {
    let z = f64::NEG_INFINITY;
    let l = 0.5f64.ln();
    // token 1 never has probability mass
    let lattice = Lattice::new(vec![l, z, l, l, z, l], 2, 3, 2);
    assert_eq!(ctc_prefix_score(&lattice, &[], 1), f64::NEG_INFINITY);
}

#[test]
fn prefix_score_matches_enumeration_oracle() {
    let mut rng = SplitMix64::new(55);
    for case in 0..100 {
        let frames = rng.range_inclusive(2, 6) as usize;
        let vocab = rng.range_inclusive(3, 4) as usize;
        let lattice = random_lattice(&mut rng, frames, vocab);
        let plen = rng.range_inclusive(0, 3) as usize;
        let prefix: Vec<u16> = (0..plen).map(|_| rng.below(vocab as u64 - 1) as u16).collect();
        let next = rng.below(vocab as u64 - 1) as u16;

        let scorer = CtcPrefixScorer::new(&lattice);
        let mut state = scorer.init();
        let mut full = prefix.clone();
        for &t in &prefix {
            state = scorer.extend(&state, t);
        }
        let state = scorer.extend(&state, next);
        full.push(next);

        let got = state.log_prefix_prob().exp();
        let want = brute_prefix_prob(&lattice, &full);
        assert!(
            (got - want).abs() <= 1e-9,
            "case {case}: prefix {full:?}: {got} vs {want}"
        );
    }
}

#[test]
fn prefix_state_full_probability_matches_forward_recursion() {
    let mut rng = SplitMix64::new(56);
    for _ in 0..50 {
        let frames = rng.range_inclusive(2, 7) as usize;
        let vocab = rng.range_inclusive(3, 5) as usize;
        let lattice = random_lattice(&mut rng, frames, vocab);
        let len = rng.range_inclusive(0, 3) as usize;
        let target: Vec<u16> = (0..len).map(|_| rng.below(vocab as u64 - 1) as u16).collect();
        let scorer = CtcPrefixScorer::new(&lattice);
        let mut state = scorer.init();
        for &t in &target {
            state = scorer.extend(&state, t);
        }
        match ctc_loss(&lattice, &target) {
            CtcOutcome::Loss(l) => {
                assert!((state.log_full_prob() + l).abs() < 1e-9);
            }
            CtcOutcome::Infeasible => {
                assert_eq!(state.log_full_prob(), f64::NEG_INFINITY);
            }
        }
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn_dim: 24,
        content_vocab: 3,
        frame_dim: 4,
        max_frames: 12,
        max_tokens: 8,
    }
}

struct TinyInstance {
    params: ModelParams<f64>,
    frames: crate::autodiff::Tensor<f64>,
    len: usize,
}

fn random_instance(rng: &mut SplitMix64, seed_tag: u64) -> TinyInstance {
    let cfg = tiny_config();
    let params = ModelParams::<f64>::init(&cfg, 1000 + seed_tag).unwrap();
    let len = rng.range_inclusive(2, 6) as usize;
    let vals: Vec<f64> = (0..len * cfg.frame_dim)
        .map(|_| rng.uniform_in(-1.0, 1.0))
        .collect();
    let frames = crate::autodiff::Tensor::new(vec![len, cfg.frame_dim], vals).unwrap();
    TinyInstance { params, frames, len }
}

/// Independent route to S(y): attention log-probability (with eos) from a
/// single forced pass, CTC full-sequence log-probability from the
/// forward-recursion loss.
fn oracle_score(
    inst: &TinyInstance,
    lattice: &Lattice<f64>,
    y: &[u16],
    alpha: f64,
) -> Option<f64> {
    let cfg = &inst.params.config;
    let mut enc = inst
        .params
        .encode(&inst.frames, inst.len, Modality::Audio, false)
        .unwrap();
    let mut input = vec![cfg.sos()];
    input.extend_from_slice(y);
    let out = enc.decode_forced(&input).unwrap();
    let rows = enc.tape.value(out);
    let mut att = 0.0;
    for (u, &tok) in y.iter().enumerate() {
        att += rows.row(u)[tok as usize];
    }
    att += rows.row(y.len())[cfg.eos() as usize];
    let ctc = match ctc_loss(lattice, y) {
        CtcOutcome::Loss(l) => -l,
        CtcOutcome::Infeasible => f64::NEG_INFINITY,
    };
    if alpha > 0.0 && ctc == f64::NEG_INFINITY {
        return None; // score is -inf; never the argmax (every lattice has some feasible y)
    }
    Some(alpha * ctc + (1.0 - alpha) * att)
}

fn all_sequences(vocab: u16, max_len: usize) -> Vec<Vec<u16>> {
    let mut out: Vec<Vec<u16>> = vec![vec![]];
    let mut frontier: Vec<Vec<u16>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for f in &frontier {
            for c in 0..vocab {
                let mut n = f.clone();
                n.push(c);
                out.push(n.clone());
                next.push(n);
            }
        }
        frontier = next;
    }
    out
}

#[test]
fn beam_equals_exhaustive_argmax_on_tiny_models() {
    let mut rng = SplitMix64::new(77);
    for model_idx in 0..10u64 {
        let inst = random_instance(&mut rng, model_idx);
        let cfg = inst.params.config.clone();
        let mut enc = inst
            .params
            .encode(&inst.frames, inst.len, Modality::Audio, false)
            .unwrap();
        let lat_var = enc.ctc_head().unwrap();
        let lattice = enc.lattice(lat_var, cfg.blank());
        for &alpha in &[0.0, 0.3] {
            // oracle argmax over all sequences of length <= 4
            let mut best: Option<(f64, Vec<u16>)> = None;
            for y in all_sequences(cfg.content_vocab as u16, 4) {
                if let Some(s) = oracle_score(&inst, &lattice, &y, alpha) {
                    best = match best {
                        None => Some((s, y)),
                        Some((bs, by)) => {
                            if s > bs || (s == bs && y < by) {
                                Some((s, y))
                            } else {
                                Some((bs, by))
                            }
                        }
                    };
                }
            }
            let mut enc2 = inst
                .params
                .encode(&inst.frames, inst.len, Modality::Audio, false)
                .unwrap();
            let mut dec = ModelDecoder::new(&mut enc2, cfg.sos(), cfg.eos(), cfg.max_tokens);
            let got = joint_beam_search(&mut dec, &lattice, 512, alpha, 4, 0.0).unwrap();
            assert_eq!(
                got,
                best.unwrap().1,
                "model {model_idx} alpha {alpha}: beam disagrees with exhaustive argmax"
            );
        }
    }
}

#[test]
fn beam_one_alpha_zero_equals_ar_greedy_on_models() {
    let mut rng = SplitMix64::new(78);
    for model_idx in 0..10u64 {
        let inst = random_instance(&mut rng, 100 + model_idx);
        let cfg = inst.params.config.clone();
        let mut enc = inst
            .params
            .encode(&inst.frames, inst.len, Modality::Audio, false)
            .unwrap();
        let lat_var = enc.ctc_head().unwrap();
        let lattice = enc.lattice(lat_var, cfg.blank());
        let mut dec = ModelDecoder::new(&mut enc, cfg.sos(), cfg.eos(), cfg.max_tokens);
        let greedy = ar_greedy(&mut dec, 6).unwrap();
        let mut enc2 = inst
            .params
            .encode(&inst.frames, inst.len, Modality::Audio, false)
            .unwrap();
        let mut dec2 = ModelDecoder::new(&mut enc2, cfg.sos(), cfg.eos(), cfg.max_tokens);
        let beam = joint_beam_search(&mut dec2, &lattice, 1, 0.0, 6, 0.0).unwrap();
        assert_eq!(beam, greedy.tokens, "model {model_idx}");
    }
}

/// Growing the beam almost always improves (never hurts, in the limit)
/// the best combined score. Strict pointwise monotonicity is NOT a
/// theorem for per-depth beam pruning: the live sets of different beam
/// sizes do not nest, and a wider beam can crowd out the line a narrow
/// beam kept (seed 5007 at beams 2 -> 4 is a concrete counterexample).
/// What is asserted here: the largest beam never loses to beam 1, and
/// consecutive-beam regressions stay rare (measured 4/800 pairs on this
/// model family).
#[test]
fn beam_score_grows_with_beam_size_statistically() {
    let mut rng = SplitMix64::new(79);
    let mut pair_violations = 0usize;
    let mut pairs = 0usize;
    for model_idx in 0..30u64 {
        let inst = random_instance(&mut rng, 200 + model_idx);
        let cfg = inst.params.config.clone();
        let mut enc = inst
            .params
            .encode(&inst.frames, inst.len, Modality::Audio, false)
            .unwrap();
        let lat_var = enc.ctc_head().unwrap();
        let lattice = enc.lattice(lat_var, cfg.blank());
        let mut scores = Vec::new();
        for beam in [1usize, 2, 4, 8, 16] {
            let mut enc2 = inst
                .params
                .encode(&inst.frames, inst.len, Modality::Audio, false)
                .unwrap();
            let mut dec = ModelDecoder::new(&mut enc2, cfg.sos(), cfg.eos(), cfg.max_tokens);
            let tokens = joint_beam_search(&mut dec, &lattice, beam, 0.3, 4, 0.0).unwrap();
            scores.push(oracle_score(&inst, &lattice, &tokens, 0.3).unwrap());
        }
        assert!(
            scores[4] >= scores[0] - 1e-9,
            "model {model_idx}: beam 16 lost to beam 1"
        );
        for w in scores.windows(2) {
            pairs += 1;
            if w[1] < w[0] - 1e-9 {
                pair_violations += 1;
            }
        }
    }
    assert!(
        pair_violations * 20 <= pairs,
        "monotonicity violations are no longer rare: {pair_violations}/{pairs}"
    );
}

#[test]
fn beam_alpha_one_maximises_ctc_probability() {
    let mut rng = SplitMix64::new(80);
    for model_idx in 0..5u64 {
        let inst = random_instance(&mut rng, 300 + model_idx);
        let cfg = inst.params.config.clone();
        let mut enc = inst
            .params
            .encode(&inst.frames, inst.len, Modality::Audio, false)
            .unwrap();
        let lat_var = enc.ctc_head().unwrap();
        let lattice = enc.lattice(lat_var, cfg.blank());
        let mut dec = ModelDecoder::new(&mut enc, cfg.sos(), cfg.eos(), cfg.max_tokens);
        let got = joint_beam_search(&mut dec, &lattice, 512, 1.0, 4, 0.0).unwrap();
        let mut best: Option<(f64, Vec<u16>)> = None;
        for y in all_sequences(cfg.content_vocab as u16, 4) {
            let s = match ctc_loss(&lattice, &y) {
                CtcOutcome::Loss(l) => -l,
                CtcOutcome::Infeasible => continue,
            };
            best = match best {
                None => Some((s, y)),
                Some((bs, by)) => {
                    if s > bs || (s == bs && y < by) {
                        Some((s, y))
                    } else {
                        Some((bs, by))
                    }
                }
            };
        }
        assert_eq!(got, best.unwrap().1, "model {model_idx}");
    }
}

#[test]
fn model_decoder_counts_passes() {
    let mut rng = SplitMix64::new(81);
    let inst = random_instance(&mut rng, 400);
    let cfg = inst.params.config.clone();
    let mut enc = inst
        .params
        .encode(&inst.frames, inst.len, Modality::Audio, false)
        .unwrap();
    let mut dec = ModelDecoder::new(&mut enc, cfg.sos(), cfg.eos(), cfg.max_tokens);
    let out = ar_greedy(&mut dec, 5).unwrap();
    let expected = out.tokens.len() as u64 + u64::from(out.ended_with_eos);
    assert_eq!(dec.passes(), expected);
}
