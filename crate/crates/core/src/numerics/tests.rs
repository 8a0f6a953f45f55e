use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn m(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Central-difference gradient of `f` at `x`.
fn numeric_grad(x: &Tensor<f64>, h: f64, f: &dyn Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    out
}

fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[test]
fn matmul_identity_and_hand_sum() {
    let b = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
    assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
    let out = matmul(&b, &m(&[&[1.0], &[1.0]])).unwrap();
    assert_eq!(out.data(), &[3.0, 7.0]);
    assert!(matches!(matmul(&b, &Tensor::<f64>::zeros(&[3, 1])), Err(Error::Shape(_))));
}

#[test]
fn matmul_variants_agree() {
    let mut r = rng(1);
    let a = Tensor::<f64>::randn(&[4, 6], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[5, 6], 1.0, &mut r);
    let bt = kernels::transpose(&b).unwrap();
    assert!(matmul_nt(&a, &b).unwrap().max_abs_diff(&matmul(&a, &bt).unwrap()) < 1e-12);
    let at = kernels::transpose(&a).unwrap();
    let c = Tensor::<f64>::randn(&[4, 3], 1.0, &mut r);
    assert!(matmul_tn(&a, &c).unwrap().max_abs_diff(&matmul(&at, &c).unwrap()) < 1e-12);
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut r = rng(2);
    let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut r);
    // Weighted sum so the upstream gradient is not all ones.
    let w = Tensor::<f64>::randn(&[5, 3], 1.0, &mut r);
    let loss = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let p = matmul(a, b).unwrap();
        p.data().iter().zip(w.data()).map(|(x, y)| x * y).sum::<f64>()
    };
    let mut g = Graph::new();
    let (va, vb) = (g.param(a.clone()), g.param(b.clone()));
    let p = g.matmul(va, vb).unwrap();
    let wc = g.constant(w.clone());
    let prod = g.mul(p, wc).unwrap();
    let l = g.sum(prod).unwrap();
    g.backward(l).unwrap();
    let na = numeric_grad(&a, 1e-5, &|x| loss(x, &b));
    let nb = numeric_grad(&b, 1e-5, &|x| loss(&a, x));
    assert!(max_rel_err(g.grad(va).unwrap(), &na) < 1e-6);
    assert!(max_rel_err(g.grad(vb).unwrap(), &nb) < 1e-6);
}

#[test]
fn softmax_examples() {
    let s = m(&[&[1.0, 1.0, 1.0]]);
    let out = masked_softmax(&s, &[true, true, false]).unwrap();
    assert_eq!(out.data(), &[0.5, 0.5, 0.0]);
    let one = masked_softmax(&m(&[&[0.0]]), &[true]).unwrap();
    assert_eq!(one.data(), &[1.0]);
    assert!(matches!(
        masked_softmax(&s, &[false, false, false]),
        Err(Error::DegenerateRow { row: 0 })
    ));
}

#[test]
fn softmax_random_rows_are_stochastic() {
    use rand::Rng;
    let mut r = rng(3);
    for _ in 0..20 {
        let s = Tensor::<f32>::randn(&[8, 8], 3.0, &mut r);
        let allowed: Vec<bool> = (0..64).map(|k| k % 9 == 0 || r.gen_bool(0.5)).collect();
        let out = masked_softmax(&s, &allowed).unwrap();
        for i in 0..8 {
            let total: f64 = out.row(i).iter().map(|&v| v as f64).sum();
            assert!((total - 1.0).abs() < 1e-6);
            for j in 0..8 {
                if !allowed[i * 8 + j] {
                    assert_eq!(out.at(i, j), 0.0);
                }
            }
        }
    }
}

#[test]
fn softmax_survives_huge_scores() {
    let s = Tensor::<f32>::new(vec![1, 3], vec![1e30, -1e30, 5.0]).unwrap();
    let out = masked_softmax(&s, &[true; 3]).unwrap();
    assert_eq!(out.data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn silu_values() {
    let x = Tensor::<f64>::new(vec![3], vec![0.0, 1.0, -1000.0]).unwrap();
    let y = silu(&x);
    assert_eq!(y.data()[0], 0.0);
    // σ(1) = 1/(1+e⁻¹) evaluated independently.
    assert!((y.data()[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
    assert!(y.data()[2].abs() < 1e-300);
    let y32 = silu(&Tensor::<f32>::scalar(-1000.0));
    assert!(y32.all_finite());
}

#[test]
fn layer_norm_examples() {
    let ones = Tensor::<f64>::full(&[2], 1.0);
    let zeros = Tensor::<f64>::zeros(&[2]);
    let (c, _) = layer_norm(&m(&[&[3.0, 3.0]]), &ones, &zeros, 1e-5).unwrap();
    assert_eq!(c.data(), &[0.0, 0.0]);
    let (u, _) = layer_norm(&m(&[&[1.0, -1.0]]), &ones, &zeros, 1e-12).unwrap();
    assert!((u.data()[0] - 1.0).abs() < 1e-9 && (u.data()[1] + 1.0).abs() < 1e-9);

    let mut r = rng(4);
    let x = Tensor::<f64>::randn(&[1, 32], 2.0, &mut r);
    let (y, _) = layer_norm(&x, &Tensor::full(&[32], 1.0), &Tensor::zeros(&[32]), 1e-5).unwrap();
    let mean = y.sum() / 32.0;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-4);
}

#[test]
fn backward_of_linear_map() {
    let x = Tensor::<f64>::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
    let mut g = Graph::new();
    let w = g.param(Tensor::full(&[2, 3], 0.5));
    let xv = g.constant(x);
    let y = g.matmul(w, xv).unwrap();
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    assert!(g.grad(xv).is_none());
}

#[test]
fn backward_contract() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::scalar(2.0));
    let s = g.scale(a, 3.0).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[3.0]);
    assert!(matches!(g.backward(s), Err(Error::State(_))));
    assert!(matches!(g.scale(a, 1.0), Err(Error::State(_))));

    let mut fresh = Graph::<f64>::new();
    let mut other = Graph::<f64>::new();
    let v = other.param(Tensor::scalar(1.0));
    assert!(matches!(fresh.backward(v), Err(Error::State(_))));
}

#[test]
fn non_finite_is_surfaced() {
    let mut g = Graph::<f32>::new();
    let a = g.param(Tensor::scalar(f32::MAX));
    assert!(matches!(g.scale(a, 10.0), Err(Error::NonFinite("scale"))));
}

/// Two-layer net with every differentiable op, checked element-wise.
#[test]
fn composite_net_gradients() {
    let mut r = rng(5);
    let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut r);
    let w1 = Tensor::<f64>::randn(&[6, 8], 0.5, &mut r);
    let w2 = Tensor::<f64>::randn(&[8, 5], 0.5, &mut r);
    let gamma = Tensor::<f64>::randn(&[6], 1.0, &mut r);
    let beta = Tensor::<f64>::randn(&[6], 1.0, &mut r);
    let allowed: Vec<bool> = (0..16).map(|k| k % 4 <= k / 4 || k == 3).collect();
    let targets = [1usize, 4, 0, 2];
    let active = [true, false, true, true];

    let run = |params: [&Tensor<f64>; 5], g: &mut Graph<f64>| {
        let vs: Vec<Var> = params.iter().map(|p| g.param((*p).clone())).collect();
        let h = g.layer_norm(vs[0], vs[3], vs[4], 1e-5).unwrap();
        let h = g.rms_norm(h, vs[3], 1e-6).unwrap();
        let a = g.matmul(h, vs[1]).unwrap();
        let a = g.silu(a).unwrap();
        let left = g.slice_cols(a, 0, 4).unwrap();
        let left = g.rope(left, &[0, 3, 1, 7], 100.0).unwrap();
        let right = g.slice_cols(a, 4, 4).unwrap();
        let scores = g.matmul_nt(left, right).unwrap();
        let att = g.masked_softmax(scores, &allowed).unwrap();
        let mixed = g.matmul(att, right).unwrap();
        let cat = g.concat_cols(&[mixed, left]).unwrap();
        let gated = g.mul(cat, a).unwrap();
        let picked = g.gather_rows(gated, &[0, 1, 1, 3]).unwrap();
        let logits = g.matmul(picked, vs[2]).unwrap();
        let loss = g.cross_entropy(logits, &targets, &active).unwrap();
        (vs, loss)
    };

    let params = [&x, &w1, &w2, &gamma, &beta];
    let mut g = Graph::new();
    let (vs, loss) = run(params, &mut g);
    g.backward(loss).unwrap();

    for k in 0..5 {
        let f = |p: &Tensor<f64>| {
            let mut ps = params;
            ps[k] = p;
            let mut g = Graph::new();
            let (_, loss) = run(ps, &mut g);
            g.value(loss).data()[0]
        };
        let numeric = numeric_grad(params[k], 1e-5, &f);
        let err = max_rel_err(g.grad(vs[k]).unwrap(), &numeric);
        assert!(err < 1e-4, "param {k}: rel err {err}");
    }
}

#[test]
fn rope_properties() {
    let mut r = rng(6);
    let x = Tensor::<f64>::randn(&[3, 8], 1.0, &mut r);
    assert_eq!(kernels::rope(&x, &[0, 0, 0], 10000.0, false).unwrap(), x);
    let y = kernels::rope(&x, &[5, 9, 100], 10000.0, false).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let n0 = x.at(i, 2 * k).hypot(x.at(i, 2 * k + 1));
            let n1 = y.at(i, 2 * k).hypot(y.at(i, 2 * k + 1));
            assert!((n0 - n1).abs() < 1e-12);
        }
    }
    let back = kernels::rope(&y, &[5, 9, 100], 10000.0, true).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-12);
    assert!(matches!(
        kernels::rope(&Tensor::<f64>::zeros(&[1, 3]), &[0], 1e4, false),
        Err(Error::Config(_))
    ));
}

#[test]
fn deterministic_ops() {
    let mut r = rng(7);
    let a = Tensor::<f32>::randn(&[9, 13], 1.0, &mut r);
    let b = Tensor::<f32>::randn(&[13, 4], 1.0, &mut r);
    assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
}

#[test]
fn op_counter_tracks_rows() {
    reset_op_counts();
    let a = Tensor::<f32>::zeros(&[3, 2]);
    let b = Tensor::<f32>::zeros(&[2, 5]);
    matmul(&a, &b).unwrap();
    let c = op_counts();
    assert_eq!((c.matmul_calls, c.matmul_rows, c.macs), (1, 3, 30));
}
