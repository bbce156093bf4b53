use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn t64(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| ((i as f64 + 1.0) * 0.618 + seed as f64 * 1.7).sin())
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i}")).collect()
}

/// Run `f` on a fresh graph with every block registered as a parameter and
/// return (loss, grads).
fn with_graph<'a>(
    build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + 'a,
) -> impl Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)> + 'a {
    move |params| {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
        let loss = build(&mut g, &vars)?;
        let value = g.value(loss).item().unwrap();
        let grads = g.backward(loss)?;
        Ok((value, grads.into_blocks().into_iter().map(Option::unwrap).collect()))
    }
}

fn check(params: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>) -> f64 {
    let report = finite_diff_check(with_graph(build), &names(params.len()), &params, 1e-5, 1e-6).unwrap();
    report.max_rel_error()
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(g: &mut Graph<'_, f64>, x: Var) -> Result<Var> {
    let w = t64(g.shape(x), 99);
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let y = g.softmax(x, 1.0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn gelu_at_zero_is_zero() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.gelu(x);
    assert_eq!(g.value(y).data(), &[0.0]);
}

#[test]
fn layer_norm_of_constant_row_is_zero_before_affine() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 4], 3.25));
    let gain = g.constant(Tensor::full(&[4], 1.0));
    let bias = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_of_sum_is_all_ones() {
    let w = t64(&[3, 2], 0);
    let mut g = Graph::new();
    let v = g.param(0, &w);
    let loss = g.sum(v);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(0).unwrap().data().iter().all(|&x| x == 1.0));
}

#[test]
fn zero_scaled_loss_has_zero_grad() {
    let w = t64(&[4], 1);
    let mut g = Graph::new();
    let v = g.param(0, &w);
    let y = g.gelu(v);
    let s = g.sum(y);
    let loss = g.scale(s, 0.0);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(0).unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn unused_parameter_gets_zero_grad() {
    let (a, b) = (t64(&[3], 0), t64(&[5], 1));
    let mut g = Graph::new();
    let va = g.param(0, &a);
    let _vb = g.param(1, &b);
    let loss = g.sum(va);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(1).unwrap(), &Tensor::zeros(&[5]));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let w = t64(&[3], 0);
    let mut g = Graph::new();
    let v = g.param(0, &w);
    assert!(matches!(g.backward(v), Err(Error::InvalidArgument(_))));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    assert!(g.add(a, b).is_err());
}

#[test]
fn matmul_grads_match_finite_differences() {
    let err = check(vec![t64(&[3, 4], 0), t64(&[4, 5], 1)], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y)
    });
    assert!(err < 1e-6, "{err}");
    // batched, shared rhs
    let err = check(vec![t64(&[2, 3, 4], 0), t64(&[4, 5], 1)], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y)
    });
    assert!(err < 1e-6, "{err}");
    // batched both sides, transposed rhs
    let err = check(vec![t64(&[2, 3, 4], 0), t64(&[2, 5, 4], 1)], |g, v| {
        let y = g.matmul_t(v[0], v[1])?;
        probe(g, y)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn elementwise_and_bias_grads_match_finite_differences() {
    let err = check(vec![t64(&[2, 3], 0), t64(&[2, 3], 1), t64(&[3], 2)], |g, v| {
        let a = g.add(v[0], v[1])?;
        let s = g.sub(a, v[1])?;
        let m = g.mul(s, v[1])?;
        let b = g.add_bias(m, v[2])?;
        let c = g.scale(b, -1.5);
        probe(g, c)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_layer_norm_gelu_grads_match_finite_differences() {
    let err = check(vec![t64(&[3, 5], 0)], |g, v| {
        let y = g.softmax(v[0], 0.7)?;
        probe(g, y)
    });
    assert!(err < 1e-6, "{err}");
    let err = check(vec![t64(&[3, 6], 0), t64(&[6], 1), t64(&[6], 2)], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        probe(g, y)
    });
    assert!(err < 1e-6, "{err}");
    let err = check(vec![t64(&[7], 3)], |g, v| {
        let y = g.gelu(v[0]);
        probe(g, y)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn shape_ops_grads_match_finite_differences() {
    let err = check(vec![t64(&[2, 3, 4], 0)], |g, v| {
        let p = g.permute(v[0], &[1, 2, 0])?;
        let r = g.reshape(p, &[3, 8])?;
        let t = g.transpose(r)?;
        probe(g, t)
    });
    assert!(err < 1e-6, "{err}");
    let err = check(vec![t64(&[5, 3], 0)], |g, v| {
        let e = g.embedding(v[0], &[4, 0, 4, 2])?;
        probe(g, e)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn causal_softmax_and_cross_entropy_grads_match_finite_differences() {
    let err = check(vec![t64(&[2, 3, 3], 0)], |g, v| {
        let m = g.causal_mask(v[0])?;
        let s = g.softmax(m, 1.0)?;
        probe(g, s)
    });
    assert!(err < 1e-6, "{err}");
    let support: Arc<[bool]> = vec![true, false, true, true, true].into();
    let err = check(vec![t64(&[3, 5], 0)], move |g, v| {
        g.cross_entropy(v[0], &[(0, 2), (2, 4), (2, 0)], Some(&support))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn causal_mask_blocks_future_entries() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[3, 3]));
    let m = g.causal_mask(x).unwrap();
    let s = g.softmax(m, 1.0).unwrap();
    let p = g.value(s).data();
    assert_eq!(&p[0..3], &[1.0, 0.0, 0.0]);
    assert_eq!(&p[3..6], &[0.5, 0.5, 0.0]);
}

#[test]
fn cross_entropy_ignores_untargeted_rows_and_unsupported_columns() {
    let logits = Tensor::new(vec![2, 3], vec![0.0f64, 0.0, 50.0, 1.0, 2.0, 3.0]).unwrap();
    let support: Arc<[bool]> = vec![true, true, false].into();
    let mut g = Graph::new();
    let l = g.param(0, &logits);
    let loss = g.cross_entropy(l, &[(0, 1)], Some(&support)).unwrap();
    assert!((g.value(loss).item().unwrap() - 2f64.ln()).abs() < 1e-12);
    let grads = g.backward(loss).unwrap();
    let gl = grads.get(0).unwrap().data();
    assert_eq!(gl[2], 0.0);
    assert!(gl[3..].iter().all(|&x| x == 0.0));
    // unsupported target is an error
    let mut g = Graph::new();
    let l = g.param(0, &logits);
    assert!(g.cross_entropy(l, &[(0, 2)], Some(&support)).is_err());
}

#[test]
fn dropout_zero_is_identity_and_seeded_dropout_repeats() {
    let x = t64(&[4, 4], 0);
    let mut g = Graph::new();
    let v = g.param(0, &x);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = g.dropout(v, 0.0, &mut rng).unwrap();
    assert_eq!(g.value(y), &x);

    let run = || {
        let mut g = Graph::new();
        let v = g.param(0, &x);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = g.dropout(v, 0.5, &mut rng).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.data().iter().any(|&v| v == 0.0));
}

#[test]
fn linear_model_passes_tight_gradient_check() {
    let x = t64(&[6, 3], 10);
    let target = t64(&[6, 2], 11);
    let params = vec![t64(&[3, 2], 0), t64(&[2], 1)];
    let report = finite_diff_check(
        with_graph(|g, v| {
            let xv = g.constant(x.clone());
            let y = g.matmul(xv, v[0])?;
            let y = g.add_bias(y, v[1])?;
            let tv = g.constant(target.clone());
            let d = g.sub(y, tv)?;
            let sq = g.mul(d, d)?;
            Ok(g.sum(sq))
        }),
        &names(2),
        &params,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn l2_loss_gradient_is_twice_the_residual() {
    let w = t64(&[5], 0);
    let target = t64(&[5], 3);
    let mut g = Graph::new();
    let v = g.param(0, &w);
    let t = g.constant(target.clone());
    let d = g.sub(v, t).unwrap();
    let sq = g.mul(d, d).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    for ((gr, &p), &tv) in grads.get(0).unwrap().data().iter().zip(w.data()).zip(target.data()) {
        assert!((gr - 2.0 * (p - tv)).abs() < 1e-12);
    }
}

#[test]
fn corrupted_gradient_rule_fails_the_check() {
    let params = vec![t64(&[4], 0)];
    let honest = with_graph(|g, v| {
        let y = g.gelu(v[0]);
        Ok(g.sum(y))
    });
    let corrupted = |p: &[Tensor<f64>]| {
        let (l, mut gr) = honest(p)?;
        for x in gr[0].data_mut() {
            *x *= 1.01;
        }
        Ok((l, gr))
    };
    let report = finite_diff_check(corrupted, &names(1), &params, 1e-5, 1e-4).unwrap();
    assert!(!report.passed());
}

#[test]
fn backward_is_linear_in_the_loss() {
    let w = t64(&[3, 3], 4);
    let grads_of = |a: f64, b: f64| {
        let mut g = Graph::new();
        let v = g.param(0, &w);
        let s = g.softmax(v, 1.0).unwrap();
        let l1 = probe(&mut g, s).unwrap();
        let e = g.gelu(v);
        let l2 = g.sum(e);
        let l1 = g.scale(l1, a);
        let l2 = g.scale(l2, b);
        let loss = g.add(l1, l2).unwrap();
        g.backward(loss).unwrap().get(0).unwrap().clone()
    };
    let (g1, g2, gc) = (grads_of(1.0, 0.0), grads_of(0.0, 1.0), grads_of(2.0, -3.0));
    for i in 0..9 {
        let expect = 2.0 * g1.data()[i] - 3.0 * g2.data()[i];
        assert!((gc.data()[i] - expect).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        row in proptest::collection::vec(-30.0f32..30.0, 1..12),
        temp in 0.1f32..4.0,
    ) {
        let n = row.len();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![n], row).unwrap());
        let y = g.softmax(x, temp).unwrap();
        let p = g.value(y).data();
        let sum: f32 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&v| v >= 0.0 && v <= 1.0));
    }
}

proptest! {
    #[test]
    fn softmax_entries_are_strictly_inside_unit_interval_for_moderate_logits(
        row in proptest::collection::vec(-3.0f32..3.0, 2..12),
        temp in 0.5f32..4.0,
    ) {
        let n = row.len();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![n], row).unwrap());
        let y = g.softmax(x, temp).unwrap();
        prop_assert!(g.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
