//! Analytic gradients against central finite differences, in f64.

use ptdt_diffcore::{Graph, NdArray, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray<f64> {
    let n = shape.iter().product();
    NdArray::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Builds a scalar loss from the given parameter leaves.
type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn eval(params: &[NdArray<f64>], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars);
    g.value(loss).data()[0]
}

/// Max relative error over every coordinate of every parameter.
fn check(params: Vec<NdArray<f64>>, build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]).unwrap();
        for i in 0..p.len() {
            let mut plus = params.clone();
            plus[pi].make_mut()[i] += STEP;
            let mut minus = params.clone();
            minus[pi].make_mut()[i] -= STEP;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * STEP);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(err);
        }
    }
    worst
}

fn target(shape: &[usize], seed: u64) -> NdArray<f64> {
    randn(&mut ChaCha8Rng::seed_from_u64(seed), shape)
}

#[test]
fn gradcheck_matmul_add_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[4, 2]), randn(&mut rng, &[2])];
    let err = check(params, &|g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        let y = g.add_bias(y, v[2]).unwrap();
        g.mse(y, &target(&[3, 2], 9)).unwrap()
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn gradcheck_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = vec![randn(&mut rng, &[2, 3]), randn(&mut rng, &[2, 3])];
    let err = check(params, &|g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let m = g.mul(s, v[1]).unwrap();
        let r = g.relu(m).unwrap();
        let t = g.tanh(r).unwrap();
        let t = g.scale(t, 1.7).unwrap();
        g.mse(t, &target(&[2, 3], 8)).unwrap()
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn gradcheck_masked_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ninf = f64::NEG_INFINITY;
    let mask = NdArray::new(
        vec![3, 3],
        vec![0.0, ninf, ninf, 0.0, 0.0, ninf, ninf, ninf, ninf],
    )
    .unwrap();
    let params = vec![randn(&mut rng, &[3, 3])];
    let err = check(params, &move |g, v| {
        let p = g.softmax_masked(v[0], &mask).unwrap();
        g.mse(p, &target(&[3, 3], 7)).unwrap()
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn gradcheck_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = vec![randn(&mut rng, &[3, 5]), randn(&mut rng, &[5]), randn(&mut rng, &[5])];
    let err = check(params, &|g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
        g.mse(y, &target(&[3, 5], 6)).unwrap()
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn gradcheck_embedding_and_row_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = vec![randn(&mut rng, &[4, 3]), randn(&mut rng, &[2, 2])];
    let err = check(params, &|g, v| {
        let e = g.embedding(v[0], &[2, 0, 2]).unwrap();
        let f = g.embedding(v[1], &[1, 1, 0]).unwrap();
        let c = g.concat_cols(&[e, f]).unwrap();
        let s = g.slice_cols(c, 1, 3).unwrap();
        let i = g.interleave_rows(&[s, s]).unwrap();
        let r = g.select_rows(i, &[0, 3, 5, 5]).unwrap();
        let r = g.reshape(r, &[2, 6]).unwrap();
        g.mse_rows(r, &target(&[2, 6], 5), Some(&[1.0, 0.5])).unwrap()
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn gradcheck_batched_attention_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ninf = f64::NEG_INFINITY;
    let mut mask = vec![0.0; 2 * 3 * 3];
    for b in 0..2 {
        for i in 0..3 {
            for j in (i + 1)..3 {
                mask[(b * 3 + i) * 3 + j] = ninf;
            }
        }
    }
    let mask = NdArray::new(vec![2, 3, 3], mask).unwrap();
    let params = vec![
        randn(&mut rng, &[2, 3, 4]),
        randn(&mut rng, &[2, 3, 4]),
        randn(&mut rng, &[2, 3, 4]),
    ];
    let err = check(params, &move |g, v| {
        let s = g.bmm_nt(v[0], v[1]).unwrap();
        let p = g.softmax_masked(s, &mask).unwrap();
        let o = g.bmm(p, v[2]).unwrap();
        g.mse(o, &target(&[2, 3, 4], 4)).unwrap()
    });
    assert!(err < TOL, "relative error {err}");
}

/// One pre-norm attention + MLP layer, parameters drawn at random, checked at
/// six random coordinates.
#[test]
fn gradcheck_random_one_layer_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, d) = (4, 6);
    let shapes: Vec<Vec<usize>> = vec![
        vec![n, d],
        vec![d],
        vec![d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d, 2 * d],
        vec![2 * d],
        vec![2 * d, d],
    ];
    let params: Vec<NdArray<f64>> = shapes.iter().map(|s| randn(&mut rng, s)).collect();
    let ninf = f64::NEG_INFINITY;
    let mask = NdArray::new(
        vec![1, n, n],
        (0..n * n).map(|k| if k % n > k / n { ninf } else { 0.0 }).collect(),
    )
    .unwrap();
    let build = move |g: &mut Graph<f64>, v: &[Var]| {
        let h = g.layer_norm(v[0], v[1], v[2]).unwrap();
        let q = g.matmul(h, v[3]).unwrap();
        let k = g.matmul(h, v[4]).unwrap();
        let val = g.matmul(h, v[5]).unwrap();
        let q = g.reshape(q, &[1, n, d]).unwrap();
        let k = g.reshape(k, &[1, n, d]).unwrap();
        let val = g.reshape(val, &[1, n, d]).unwrap();
        let s = g.bmm_nt(q, k).unwrap();
        let s = g.scale(s, 1.0 / (d as f64).sqrt()).unwrap();
        let p = g.softmax_masked(s, &mask).unwrap();
        let a = g.bmm(p, val).unwrap();
        let a = g.reshape(a, &[n, d]).unwrap();
        let x = g.add(v[0], a).unwrap();
        let m = g.matmul(x, v[6]).unwrap();
        let m = g.add_bias(m, v[7]).unwrap();
        let m = g.relu(m).unwrap();
        let m = g.matmul(m, v[8]).unwrap();
        let y = g.add(x, m).unwrap();
        g.mse(y, &target(&[n, d], 3)).unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    for _ in 0..6 {
        let pi = rng.gen_range(0..params.len());
        let i = rng.gen_range(0..params[pi].len());
        let mut plus = params.clone();
        plus[pi].make_mut()[i] += STEP;
        let mut minus = params.clone();
        minus[pi].make_mut()[i] -= STEP;
        let numeric = (eval(&plus, &build) - eval(&minus, &build)) / (2.0 * STEP);
        let analytic = grads.get(vars[pi]).unwrap().data()[i];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        assert!(err < TOL, "param {pi} coord {i}: analytic {analytic} numeric {numeric}");
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Graph::<f32>::new();
        let a = g.param(randn(&mut rng, &[8, 16]).cast());
        let b = g.param(randn(&mut rng, &[16, 4]).cast());
        let y = g.matmul(a, b).unwrap();
        let y = g.tanh(y).unwrap();
        let loss = g.mse(y, &NdArray::zeros(&[8, 4])).unwrap();
        let grads = g.backward(loss).unwrap();
        (
            g.value(loss).to_vec(),
            grads.get(a).unwrap().to_vec(),
            grads.get(b).unwrap().to_vec(),
        )
    };
    let (l1, a1, b1) = run();
    let (l2, a2, b2) = run();
    assert_eq!(l1[0].to_bits(), l2[0].to_bits());
    assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn masked_positions_get_zero_weight(
            logits in prop::collection::vec(-30.0f64..30.0, 12),
            mask_bits in prop::collection::vec(any::<bool>(), 12),
        ) {
            let mask: Vec<f64> = mask_bits.iter().map(|&m| if m { f64::NEG_INFINITY } else { 0.0 }).collect();
            let mut g = Graph::new();
            let x = g.constant(NdArray::new(vec![3, 4], logits).unwrap());
            let y = g.softmax_masked(x, &NdArray::new(vec![3, 4], mask).unwrap()).unwrap();
            for (row, bits) in g.value(y).data().chunks(4).zip(mask_bits.chunks(4)) {
                for (&w, &masked) in row.iter().zip(bits) {
                    if masked {
                        prop_assert_eq!(w, 0.0);
                    }
                }
                if bits.iter().any(|&m| !m) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
