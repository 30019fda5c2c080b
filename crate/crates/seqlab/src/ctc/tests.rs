use super::*;
use crate::autodiff::grad_check;
use crate::rng::SplitMix64;

/// Random lattice with log-softmax-normalised rows.
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

#[test]
fn hand_enumerated_two_frame_case() {
    // P(a) = P(blank) = 0.5 per frame; target "a".
    // Valid paths: (a,-), (-,a), (a,a) with total probability 0.75.
    let half = 0.5f64.ln();
    let lattice = Lattice::new(vec![half; 4], 2, 2, 1);
    let loss = ctc_loss(&lattice, &[0]).loss().unwrap();
    assert!((loss - (-0.75f64.ln())).abs() < 1e-12);
}

#[test]
fn certain_single_frame_is_free() {
    let lattice = Lattice::new(vec![0.0, f64::NEG_INFINITY], 1, 2, 1);
    let loss = ctc_loss(&lattice, &[0]).loss().unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn repeated_token_needs_separator_frame() {
    let half = 0.5f64.ln();
    let lattice = Lattice::new(vec![half; 4], 2, 2, 1);
    assert_eq!(min_path_len(&[0, 0]), 3);
    assert_eq!(ctc_loss(&lattice, &[0, 0]), CtcOutcome::Infeasible);
}

#[test]
fn empty_target_is_the_all_blank_path() {
    let mut rng = SplitMix64::new(1);
    let lattice = random_lattice(&mut rng, 4, 3);
    let expected: f64 = -(0..4).map(|t| lattice.logp(t, 2)).sum::<f64>();
    let loss = ctc_loss(&lattice, &[]).loss().unwrap();
    assert!((loss - expected).abs() < 1e-12);
}

#[test]
fn matches_brute_force_on_200_random_instances() {
    let mut rng = SplitMix64::new(77);
    let mut done = 0;
    while done < 200 {
        let frames = rng.range_inclusive(2, 6) as usize;
        let vocab = rng.range_inclusive(3, 4) as usize;
        let target_len = rng.range_inclusive(0, 3) as usize;
        let target: Vec<u16> = (0..target_len)
            .map(|_| rng.below(vocab as u64 - 1) as u16)
            .collect();
        let lattice = random_lattice(&mut rng, frames, vocab);
        let oracle = brute_force_ctc(&lattice, &target).unwrap();
        match ctc_loss(&lattice, &target) {
            CtcOutcome::Loss(l) => {
                assert!(
                    (l - oracle).abs() <= 1e-9,
                    "loss {l} vs oracle {oracle} (frames {frames}, target {target:?})"
                );
            }
            CtcOutcome::Infeasible => assert!(oracle.is_infinite()),
        }
        done += 1;
    }
}

#[test]
fn brute_force_concentrated_path() {
    // All mass on the path (a, blank, a): collapse = [a, a].
    let big = (1.0f64 - 2e-12).ln();
    let tiny = 1e-12f64.ln();
    #[rustfmt::skip]
    let vals = vec![
        big, tiny, tiny,
        tiny, tiny, big,
        big, tiny, tiny,
    ];
    let lattice = Lattice::new(vals, 3, 3, 2);
    let path_logp = big * 3.0;
    let loss = brute_force_ctc(&lattice, &[0, 0]).unwrap();
    assert!((loss - (-path_logp)).abs() < 1e-6);
}

#[test]
fn brute_force_impossible_symbol_is_infinite() {
    // Token 1 has zero probability at every frame; any target containing it
    // gets +infinity.
    let z = f64::NEG_INFINITY;
    let l = 0.5f64.ln();
    let lattice = Lattice::new(vec![l, z, l, l, z, l], 2, 3, 2);
    assert!(brute_force_ctc(&lattice, &[1]).unwrap().is_infinite());
}

#[test]
fn brute_force_rejects_oversized_instances() {
    let lattice = Lattice::new(vec![0.0; 9 * 3], 9, 3, 2);
    assert!(matches!(
        brute_force_ctc(&lattice, &[0]),
        Err(CtcError::BruteForceBounds { .. })
    ));
}

#[test]
fn lattice_gradient_matches_finite_differences() {
    let mut rng = SplitMix64::new(5);
    for _ in 0..20 {
        let frames = rng.range_inclusive(2, 6) as usize;
        let vocab = rng.range_inclusive(3, 4) as usize;
        let target_len = rng.range_inclusive(0, 2) as usize;
        let target: Vec<u16> = (0..target_len)
            .map(|_| rng.below(vocab as u64 - 1) as u16)
            .collect();
        if frames < min_path_len(&target) {
            continue;
        }
        let lattice = random_lattice(&mut rng, frames, vocab);
        let (_, grad) = ctc_loss_with_grad(&lattice, &target).unwrap();
        // central differences on the raw lattice entries
        let h = 1e-6;
        let mut max_rel = 0.0f64;
        for idx in 0..lattice.values().len() {
            let mut vp = lattice.values().to_vec();
            vp[idx] += h;
            let lp = Lattice::new(vp, frames, vocab, lattice.blank());
            let mut vm = lattice.values().to_vec();
            vm[idx] -= h;
            let lm = Lattice::new(vm, frames, vocab, lattice.blank());
            let numeric = (ctc_loss(&lp, &target).loss().unwrap()
                - ctc_loss(&lm, &target).loss().unwrap())
                / (2.0 * h);
            let denom = grad[idx].abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((grad[idx] - numeric).abs() / denom);
        }
        assert!(max_rel <= 1e-5, "relative error {max_rel}");
    }
}

#[test]
fn tape_ctc_loss_differentiates_through_log_softmax() {
    let mut rng = SplitMix64::new(9);
    let frames = 5;
    let vocab = 4;
    let logits: Vec<f64> = (0..frames * vocab).map(|_| rng.uniform_in(-1.5, 1.5)).collect();
    let logits = crate::autodiff::Tensor::new(vec![frames, vocab], logits).unwrap();
    let err = grad_check(
        |t, v| {
            let lp = t.log_softmax(v[0], 1)?;
            Ok(ctc_loss_on_tape(t, lp, 3, &[0, 2, 1])?.expect("feasible"))
        },
        &[logits],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-5, "relative error {err}");
}

#[test]
fn tape_ctc_loss_skips_infeasible() {
    let mut t = crate::autodiff::Tape::<f64>::new();
    let lat = t.constant(vec![2, 2], vec![0.5f64.ln(); 4]).unwrap();
    assert!(ctc_loss_on_tape(&mut t, lat, 1, &[0, 0]).unwrap().is_none());
}

#[test]
fn collapse_definition_cases() {
    let b = 9u16;
    assert_eq!(collapse(&[b, 0, 0, b, 1], b), vec![0, 1]);
    assert_eq!(collapse(&[0, 0, 1, 1, 1], b), vec![0, 1]);
    assert_eq!(collapse(&[b, b, b], b), Vec::<u16>::new());
    // merge-then-remove: [a, -, a] keeps both a's
    assert_eq!(collapse(&[0, b, 0], b), vec![0, 0]);
}

#[test]
fn collapse_is_idempotent_on_canonical_sequences() {
    let b = 3u16;
    let mut rng = SplitMix64::new(4);
    for _ in 0..200 {
        let len = rng.below(6) as usize;
        let mut seq: Vec<u16> = Vec::new();
        for _ in 0..len {
            let mut tok = rng.below(3) as u16;
            if seq.last() == Some(&tok) {
                tok = (tok + 1) % 3;
            }
            seq.push(tok);
        }
        assert_eq!(collapse(&seq, b), seq);
    }
}

/// Constructively generate B^-1(y) for a given path length: choose how
/// many frames each token occupies (>=1) and how blanks pad around them,
/// with at least one blank between adjacent equal tokens.
fn preimages(y: &[u16], len: usize, blank: u16) -> Vec<Vec<u16>> {
    fn go(y: &[u16], len: usize, blank: u16, prev: Option<u16>, out: &mut Vec<Vec<u16>>, cur: &mut Vec<u16>) {
        if y.is_empty() {
            if cur.len() + len == cur.len() + len {
                let mut full = cur.clone();
                full.extend(std::iter::repeat(blank).take(len));
                out.push(full);
            }
            return;
        }
        // leading blanks before the next token
        let min_blanks = usize::from(prev == Some(y[0]));
        for blanks in min_blanks..=len {
            let after_blanks = len - blanks;
            if after_blanks < y.len() {
                break;
            }
            // repetitions of the first token
            for reps in 1..=(after_blanks - (y.len() - 1)) {
                let mut cur2 = cur.clone();
                cur2.extend(std::iter::repeat(blank).take(blanks));
                cur2.extend(std::iter::repeat(y[0]).take(reps));
                go(&y[1..], after_blanks - reps, blank, Some(y[0]), out, &mut cur2);
            }
        }
    }
    let mut out = Vec::new();
    let mut cur = Vec::new();
    go(y, len, blank, None, &mut out, &mut cur);
    out
}

#[test]
fn collapse_recovers_every_constructed_preimage() {
    let blank = 3u16;
    let symbols = [0u16, 1, 2];
    let mut targets: Vec<Vec<u16>> = vec![vec![]];
    for len in 1..=3usize {
        let mut stack = vec![Vec::<u16>::new()];
        while let Some(cur) = stack.pop() {
            if cur.len() == len {
                targets.push(cur);
                continue;
            }
            for &s in &symbols {
                let mut nxt = cur.clone();
                nxt.push(s);
                stack.push(nxt);
            }
        }
    }
    let mut checked = 0usize;
    for y in &targets {
        for len in y.len()..=5 {
            for path in preimages(y, len, blank) {
                assert_eq!(&collapse(&path, blank), y, "path {path:?}");
                checked += 1;
            }
        }
    }
    assert!(checked > 1000, "only {checked} preimages generated");

    // Cross-check the generator against full enumeration for length 3:
    // every path of length 3 collapses to a target of length <= 3, so the
    // constructed preimage sets partition vocab^3 exactly.
    let len = 3usize;
    let mut total = 0usize;
    for y in &targets {
        if y.len() <= len {
            total += preimages(y, len, blank).len();
        }
    }
    assert_eq!(total, 4usize.pow(len as u32));
}

#[test]
fn greedy_one_hot_and_tie_break() {
    // one-hot-ish frames
    let hi = (1.0f64 - 2e-9).ln();
    let lo = 1e-9f64.ln();
    let lattice = Lattice::new(vec![hi, lo, lo, lo, lo, hi], 2, 3, 2);
    let path = ctc_greedy(&lattice);
    assert_eq!(path.tokens, vec![0, 2]);
    assert!(path.probs.iter().all(|&p| p > 0.999));

    // uniform frame picks the lowest index
    let u = (1.0f64 / 3.0).ln();
    let lattice = Lattice::new(vec![u; 3], 1, 3, 2);
    assert_eq!(ctc_greedy(&lattice).tokens, vec![0]);
}

#[test]
fn greedy_matches_independent_per_frame_max() {
    let mut rng = SplitMix64::new(21);
    let lattice = random_lattice(&mut rng, 10, 4);
    let path = ctc_greedy(&lattice);
    for t in 0..10 {
        let row = lattice.row(t);
        let best = row
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(lattice.logp(t, path.tokens[t]), best);
        assert!((path.probs[t] - best.exp()).abs() < 1e-15);
    }
}

#[test]
fn sequence_confidence_closed_forms() {
    let c = sequence_confidence(&[0.9f64, 0.8]);
    let expected = ((0.9f64.ln() + 0.8f64.ln()) / 2.0).exp();
    assert!((c - expected).abs() < 1e-12);
    assert!(c >= 0.8, "0.8485 passes the 0.8 threshold");

    assert_eq!(sequence_confidence(&[1.0f64, 1.0, 1.0]), 1.0);

    let c2 = sequence_confidence(&[1.0f64, 0.5]);
    assert!((c2 - 0.5f64.sqrt()).abs() < 1e-12);
    assert!(c2 < 0.8, "0.7071 is rejected at 0.8");
}

#[test]
fn sequence_confidence_zero_prob_collapses_to_zero() {
    assert_eq!(sequence_confidence(&[0.9f64, 0.0]), 0.0);
}

#[test]
fn sequence_confidence_is_monotone_in_each_frame() {
    let mut rng = SplitMix64::new(31);
    for _ in 0..200 {
        let n = rng.range_inclusive(1, 6) as usize;
        let probs: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.05, 1.0)).collect();
        let base = sequence_confidence(&probs);
        let idx = rng.below(n as u64) as usize;
        let mut raised = probs.clone();
        raised[idx] = (raised[idx] + 0.1).min(1.0);
        assert!(sequence_confidence(&raised) >= base - 1e-15);
    }
}

#[test]
fn raising_threshold_never_accepts_more() {
    let mut rng = SplitMix64::new(41);
    let confs: Vec<f64> = (0..100).map(|_| rng.uniform()).collect();
    let accepted = |thr: f64| -> Vec<usize> {
        confs
            .iter()
            .enumerate()
            .filter(|(_, &c)| c >= thr)
            .map(|(i, _)| i)
            .collect()
    };
    let mut prev = accepted(0.0);
    for thr in [0.2, 0.5, 0.8, 0.9, 1.01] {
        let cur = accepted(thr);
        assert!(cur.iter().all(|i| prev.contains(i)));
        prev = cur;
    }
}
