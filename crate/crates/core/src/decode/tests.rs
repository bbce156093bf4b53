use std::cell::Cell;

use proptest::prelude::*;

use super::*;
use crate::corpus::PointMass;
use crate::model::ModelConfig;
use crate::rng;

fn tiny(mode: AttentionMode, seed: u64) -> Transformer<f64> {
    Transformer::init(ModelConfig {
        vocab_size: 9,
        n_max: 8,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        dropout_p: 0.0,
        attention_mode: mode,
        seed,
    })
    .unwrap()
}

/// Wraps a model and counts forward passes.
struct Counting<'a, M> {
    inner: &'a M,
    calls: Cell<usize>,
}

impl<M: FillModel> FillModel for Counting<'_, M> {
    fn n_max(&self) -> usize {
        self.inner.n_max()
    }

    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn fill_log_probs(&self, ids: &[TokenId], positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.fill_log_probs(ids, positions)
    }
}

#[test]
fn entropy_examples() {
    assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
    assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
    assert!((entropy(&[0.5, 0.5]).unwrap() - 0.6931).abs() < 1e-4);
    assert!(entropy(&[1.5, -0.5]).is_err());
    assert!(entropy(&[0.5, 0.4]).is_err());
}

#[test]
fn positional_policies() {
    let mut r = rng::stream(0, 0);
    let masks = [2, 5, 7];
    assert_eq!(masks[select_position(&masks, &[], &OrderPolicy::LeftToRight, &mut r).unwrap()], 2);
    assert_eq!(masks[select_position(&masks, &[], &OrderPolicy::RightToLeft, &mut r).unwrap()], 7);
    let fixed = OrderPolicy::Fixed(vec![7, 2, 5]);
    assert_eq!(masks[select_position(&masks, &[], &fixed, &mut r).unwrap()], 7);
    assert_eq!(select_position(&[2, 5], &[], &fixed, &mut r).unwrap(), 0);
    assert!(matches!(
        select_position(&[], &[], &OrderPolicy::LeftToRight, &mut r),
        Err(Error::NoMasks)
    ));
}

#[test]
fn random_policy_is_uniform() {
    let mut r = rng::stream(1, 0);
    let mut counts = [0usize; 3];
    for _ in 0..30_000 {
        counts[select_position(&[1, 4, 6], &[], &OrderPolicy::Random, &mut r).unwrap()] += 1;
    }
    let stat: f64 = counts.iter().map(|&c| (c as f64 - 10_000.0).powi(2) / 10_000.0).sum();
    // chi-square, df 2, p = 0.001
    assert!(stat < 13.816, "{counts:?}");
}

#[test]
fn entropy_policies() {
    let mut r = rng::stream(0, 0);
    let masks = [3, 6];
    let d = vec![vec![0.0, 1.0, 0.0, 0.0], vec![0.25; 4]];
    assert_eq!(select_position(&masks, &d, &OrderPolicy::MinEntropy, &mut r).unwrap(), 0);
    assert_eq!(select_position(&masks, &d, &OrderPolicy::MaxEntropy, &mut r).unwrap(), 1);
    // equal distributions: leftmost position wins, whatever the list order
    let same = vec![vec![0.5, 0.5]; 3];
    for policy in [OrderPolicy::MinEntropy, OrderPolicy::MaxEntropy] {
        let masks = [9, 1, 4];
        assert_eq!(masks[select_position(&masks, &same, &policy, &mut r).unwrap()], 1);
    }
}

#[test]
fn greedy_picks_first_argmax() {
    let mut r = rng::stream(0, 0);
    let g = SamplerConfig::greedy();
    assert_eq!(sample_token(&[0.1, 0.7, 0.2], &g, &mut r), 1);
    assert_eq!(sample_token(&[0.4, 0.2, 0.4], &g, &mut r), 0);
}

#[test]
fn plain_sampling_matches_probabilities() {
    let probs = [0.1, 0.2, 0.3, 0.4];
    let s = SamplerConfig::nucleus(1.0, 1.0);
    let mut r = rng::stream(2, 0);
    let mut counts = [0usize; 4];
    let draws = 100_000;
    for _ in 0..draws {
        counts[sample_token(&probs, &s, &mut r) as usize] += 1;
    }
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, p)| {
            let e = p * draws as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // chi-square, df 3, p = 0.001
    assert!(stat < 16.266, "{counts:?}");
}

#[test]
fn tiny_top_p_is_argmax() {
    let mut r = rng::stream(3, 0);
    let s = SamplerConfig::nucleus(1e-9, 0.8);
    for _ in 0..1000 {
        assert_eq!(sample_token(&[0.2, 0.3, 0.5], &s, &mut r), 2);
    }
}

#[test]
fn nucleus_keeps_the_crossing_token() {
    let mut r = rng::stream(4, 0);
    let probs = [0.2, 0.5, 0.3];
    // 0.5 + 0.3 reaches 0.8 exactly: both kept, 0.2 excluded
    let s = SamplerConfig::nucleus(0.8, 1.0);
    let mut seen = [false; 3];
    for _ in 0..2000 {
        seen[sample_token(&probs, &s, &mut r) as usize] = true;
    }
    assert_eq!(seen, [false, true, true]);
    // 0.5 alone reaches 0.5
    let s = SamplerConfig::nucleus(0.5, 1.0);
    assert!((0..500).all(|_| sample_token(&probs, &s, &mut r) == 1));
    // 0.51 needs the crossing token too
    let s = SamplerConfig::nucleus(0.51, 1.0);
    assert!((0..2000).any(|_| sample_token(&probs, &s, &mut r) == 2));
}

#[test]
fn zero_probability_tokens_are_never_drawn() {
    let mut r = rng::stream(5, 0);
    let s = SamplerConfig::nucleus(1.0, 3.0);
    for _ in 0..2000 {
        assert_ne!(sample_token(&[0.0, 0.6, 0.0, 0.4], &s, &mut r) % 2, 0);
    }
}

#[test]
fn sampler_validation() {
    assert!(SamplerConfig::nucleus(0.0, 1.0).validate().is_err());
    assert!(SamplerConfig::nucleus(1.1, 1.0).validate().is_err());
    assert!(SamplerConfig::nucleus(0.9, 0.0).validate().is_err());
    assert!(SamplerConfig::nucleus(0.9, f64::INFINITY).validate().is_err());
    assert!(SamplerConfig::default().validate().is_ok());
    assert_eq!(SamplerConfig::default().top_p, 0.95);
    assert_eq!(SamplerConfig::default().temperature, 0.8);
}

#[test]
fn policy_names_round_trip() {
    for p in OrderPolicy::NAMED.into_iter().chain([OrderPolicy::Fixed(vec![2, 0, 1])]) {
        assert_eq!(p.to_string().parse::<OrderPolicy>().unwrap(), p);
    }
    assert!("entropy".parse::<OrderPolicy>().is_err());
    assert!("fixed:a".parse::<OrderPolicy>().is_err());
}

#[test]
fn no_masks_returns_input() {
    let m = tiny(AttentionMode::Bidirectional, 0);
    let x = TokenSequence::new(vec![4, 5, 6]).unwrap();
    let masked = MaskedSequence::from_positions(&x, &[]).unwrap();
    let counting = Counting { inner: &m, calls: Cell::new(0) };
    let out = fill_in(&counting, &masked, &OrderPolicy::Random, &SamplerConfig::default(), &mut rng::stream(0, 0)).unwrap();
    assert_eq!(out.sequence, x);
    assert_eq!(out.forward_passes, 0);
    assert_eq!(counting.calls.get(), 0);
}

#[test]
fn one_forward_pass_per_mask() {
    let m = tiny(AttentionMode::Bidirectional, 1);
    let x = TokenSequence::new(vec![4, 5, 6, 7, 8, 4, 5]).unwrap();
    for k in 1..=x.len() {
        let positions: Vec<usize> = (0..k).map(|i| (i * 3) % x.len()).collect();
        let masked = MaskedSequence::from_positions(&x, &positions).unwrap();
        for policy in OrderPolicy::NAMED {
            let counting = Counting { inner: &m, calls: Cell::new(0) };
            let out = fill_in(&counting, &masked, &policy, &SamplerConfig::default(), &mut rng::stream(k as u64, 1)).unwrap();
            assert_eq!(counting.calls.get(), masked.mask_count());
            assert_eq!(out.forward_passes, masked.mask_count());
            for (i, (&a, &b)) in out.sequence.ids().iter().zip(x.ids()).enumerate() {
                if !masked.mask_positions().contains(&i) {
                    assert_eq!(a, b);
                } else {
                    assert!(a >= Vocab::N_SPECIAL as TokenId);
                }
            }
            let mut order = out.realized_order();
            match policy {
                OrderPolicy::LeftToRight => assert_eq!(order, masked.mask_positions()),
                OrderPolicy::RightToLeft => {
                    order.reverse();
                    assert_eq!(order, masked.mask_positions());
                }
                _ => {
                    order.sort_unstable();
                    assert_eq!(order, masked.mask_positions());
                }
            }
        }
    }
}

#[test]
fn greedy_fill_is_deterministic() {
    let m = tiny(AttentionMode::Bidirectional, 2);
    let masked = MaskedSequence::from_masked_ids(vec![Vocab::MASK, 5, Vocab::MASK, Vocab::MASK, 7]).unwrap();
    for policy in OrderPolicy::NAMED {
        let a = fill_in(&m, &masked, &policy, &SamplerConfig::greedy(), &mut rng::stream(9, 0)).unwrap();
        let b = fill_in(&m, &masked, &policy, &SamplerConfig::greedy(), &mut rng::stream(9, 0)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn entropy_policy_matches_the_model_distributions() {
    let m = tiny(AttentionMode::Bidirectional, 3);
    let masked = MaskedSequence::from_masked_ids(vec![4, Vocab::MASK, 6, Vocab::MASK, Vocab::MASK]).unwrap();
    let lp = m.fill_log_probs(masked.ids(), masked.mask_positions()).unwrap();
    let probs: Vec<Vec<f64>> = lp.iter().map(|r| r.iter().map(|x| x.exp()).collect()).collect();
    let h: Vec<f64> = probs.iter().map(|p| entropy(p).unwrap()).collect();
    for (policy, want) in [
        (OrderPolicy::MinEntropy, h.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0),
        (OrderPolicy::MaxEntropy, h.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0),
    ] {
        let out = fill_in(&m, &masked, &policy, &SamplerConfig::greedy(), &mut rng::stream(0, 0)).unwrap();
        assert_eq!(out.trace[0].position, masked.mask_positions()[want]);
        assert!((out.trace[0].entropy - h[want]).abs() < 1e-12);
    }
}

#[test]
fn too_long_and_wrong_mode_are_errors() {
    let m = tiny(AttentionMode::Bidirectional, 0);
    let long = MaskedSequence::from_masked_ids(vec![Vocab::MASK; 9]).unwrap();
    let r = fill_in(&m, &long, &OrderPolicy::LeftToRight, &SamplerConfig::greedy(), &mut rng::stream(0, 0));
    assert!(matches!(r, Err(Error::SequenceTooLong { len: 9, n_max: 8 })));
    let c = tiny(AttentionMode::Causal, 0);
    let short = MaskedSequence::from_masked_ids(vec![Vocab::MASK; 2]).unwrap();
    assert!(fill_in(&c, &short, &OrderPolicy::LeftToRight, &SamplerConfig::greedy(), &mut rng::stream(0, 0)).is_err());
    assert!(CausalModel::next_log_probs(&m, &[Vocab::EOS]).is_err());
}

#[test]
fn support_restricted_distributions() {
    let m = tiny(AttentionMode::Bidirectional, 4);
    let lp = m.fill_log_probs(&[Vocab::MASK, 5], &[0]).unwrap();
    let p: Vec<f64> = lp[0].iter().map(|x| x.exp()).collect();
    assert!(p[..4].iter().all(|&x| x == 0.0));
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let c = tiny(AttentionMode::Causal, 4);
    let lp = c.next_log_probs(&[Vocab::EOS, 6]).unwrap();
    let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
    assert!(p[Vocab::EOS as usize] > 0.0);
    assert_eq!((p[0], p[2], p[3]), (0.0, 0.0, 0.0));
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn from_scratch_uses_the_length_prior() {
    let m = tiny(AttentionMode::Bidirectional, 5);
    let p_len = PointMass { n: 3 };
    let mut r = rng::stream(6, 0);
    for policy in OrderPolicy::NAMED {
        for _ in 0..5 {
            let out = generate_from_scratch(&m, &p_len, &policy, &SamplerConfig::default(), &mut r).unwrap();
            assert_eq!(out.sequence.len(), 3);
            assert!(!out.sequence.ids().contains(&Vocab::MASK));
            assert_eq!(out.forward_passes, 3);
        }
    }
}

proptest! {
    #[test]
    fn temperature_keeps_greedy_argmax(
        probs in proptest::collection::vec(0.01f64..1.0, 2..10),
        t in 0.05f64..5.0,
    ) {
        let sum: f64 = probs.iter().sum();
        let probs: Vec<f64> = probs.iter().map(|p| p / sum).collect();
        let mut r = rng::stream(0, 0);
        let base = sample_token(&probs, &SamplerConfig::greedy(), &mut r);
        let scaled = SamplerConfig { temperature: t, ..SamplerConfig::greedy() };
        prop_assert_eq!(sample_token(&probs, &scaled, &mut r), base);
        // a vanishing nucleus reduces to the same argmax at any temperature
        prop_assert_eq!(sample_token(&probs, &SamplerConfig::nucleus(1e-12, t), &mut r), base);
    }

    #[test]
    fn entropy_choice_ignores_mask_relabeling(
        raw in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 4), 2..6),
        shift in 0usize..6,
    ) {
        let dists: Vec<Vec<f64>> = raw
            .iter()
            .map(|d| {
                let s: f64 = d.iter().sum();
                d.iter().map(|x| x / s).collect()
            })
            .collect();
        let positions: Vec<usize> = (0..dists.len()).map(|i| 10 + 3 * i).collect();
        let k = shift % dists.len();
        let mut p2 = positions.clone();
        let mut d2 = dists.clone();
        p2.rotate_left(k);
        d2.rotate_left(k);
        let mut r = rng::stream(0, 0);
        for policy in [OrderPolicy::MinEntropy, OrderPolicy::MaxEntropy] {
            let a = positions[select_position(&positions, &dists, &policy, &mut r).unwrap()];
            let b = p2[select_position(&p2, &d2, &policy, &mut r).unwrap()];
            prop_assert_eq!(a, b);
        }
    }
}
