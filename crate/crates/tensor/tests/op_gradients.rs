//! Every differentiable op against central differences on random shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sot_tensor::{grad_check, Graph, NormStats, Result, Tensor, Var};

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts an arbitrary-shaped output with fixed random weights so every
/// output coordinate influences the scalar.
fn probe(v: &Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = v.graph().constant(rand_tensor(&mut rng, v.shape()));
    v.mul(&w)?.sum()
}

fn check(name: &str, shapes: &[Vec<usize>], f: impl Fn(&Var, &[usize]) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for shape in shapes {
        let x = rand_tensor(&mut rng, shape);
        let err = grad_check(|v| probe(&f(v, shape)?, 7), &x, EPS).unwrap();
        assert!(err < TOL, "{name} {shape:?}: rel err {err}");
    }
}

fn shapes2() -> Vec<Vec<usize>> {
    vec![vec![3, 4], vec![5, 2], vec![1, 7]]
}

fn shapes3() -> Vec<Vec<usize>> {
    vec![vec![2, 3, 4], vec![4, 1, 3], vec![3, 5, 2]]
}

fn constant_like(v: &Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    v.graph().constant(rand_tensor(&mut rng, v.shape()))
}

#[test]
fn elementwise_binary() {
    check("add", &shapes3(), |v, _| v.add(&constant_like(v, 1)));
    check("sub", &shapes3(), |v, _| constant_like(v, 1).sub(v));
    check("mul", &shapes3(), |v, _| v.mul(&constant_like(v, 2)));
    check("mul_self", &shapes2(), |v, _| v.mul(v));
    check("scale", &shapes2(), |v, _| v.scale(-2.5));
    check("add_scalar", &shapes2(), |v, _| v.add_scalar(3.0));
}

#[test]
fn elementwise_unary() {
    check("relu", &shapes3(), |v, _| v.relu());
    check("sigmoid", &shapes3(), |v, _| v.sigmoid());
    check("abs", &shapes3(), |v, _| v.abs());
    check("log", &shapes2(), |v, _| v.mul(v)?.add_scalar(0.5)?.ln());
    check("pow", &shapes2(), |v, _| v.mul(v)?.add_scalar(0.2)?.powf(2.0));
    check("clamp", &shapes2(), |v, _| v.clamp(-0.5, 0.5));
}

#[test]
fn matmul_and_linear() {
    for (n, k, m) in [(3, 4, 2), (1, 5, 3), (6, 2, 4)] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = rand_tensor(&mut rng, &[k, m]);
        let a = rand_tensor(&mut rng, &[n, k]);
        let err = grad_check(|v| probe(&v.matmul(&v.graph().constant(b.clone()))?, 1), &a, EPS).unwrap();
        assert!(err < TOL, "matmul lhs {err}");
        let err = grad_check(|v| probe(&v.graph().constant(a.clone()).matmul(v)?, 1), &b, EPS).unwrap();
        assert!(err < TOL, "matmul rhs {err}");

        let w = rand_tensor(&mut rng, &[m, k]);
        let bias = rand_tensor(&mut rng, &[m]);
        let g = |x: &Tensor, w: &Tensor, b: &Tensor, which: usize| {
            let (x, w, b) = (x.clone(), w.clone(), b.clone());
            move |v: &Var| {
                let gr = v.graph();
                let xs = if which == 0 { v.clone() } else { gr.constant(x.clone()) };
                let ws = if which == 1 { v.clone() } else { gr.constant(w.clone()) };
                let bs = if which == 2 { v.clone() } else { gr.constant(b.clone()) };
                probe(&xs.linear(&ws, Some(&bs))?, 5)
            }
        };
        assert!(grad_check(g(&a, &w, &bias, 0), &a, EPS).unwrap() < TOL);
        assert!(grad_check(g(&a, &w, &bias, 1), &w, EPS).unwrap() < TOL);
        assert!(grad_check(g(&a, &w, &bias, 2), &bias, EPS).unwrap() < TOL);
    }
}

#[test]
fn shape_ops() {
    check("reshape", &shapes3(), |v, s| v.reshape(&[s[0] * s[1], s[2]]));
    check("transpose", &shapes2(), |v, _| v.transpose());
    check("permute", &shapes3(), |v, _| v.permute(&[2, 0, 1]));
    check("concat0", &shapes3(), |v, _| v.graph().concat(&[v.clone(), constant_like(v, 3), v.clone()], 0));
    check("concat1", &shapes3(), |v, _| v.graph().concat(&[constant_like(v, 3), v.clone()], 1));
    check("gather", &shapes2(), |v, s| v.gather_rows(&[s[0] - 1, 0, s[0] - 1, 0]));
}

#[test]
fn reductions() {
    for axis in 0..3 {
        check("softmax", &shapes3(), |v, _| v.softmax(axis));
        check("max_axis", &shapes3(), |v, _| v.max_axis(axis));
        check("sum_axis", &shapes3(), |v, _| v.sum_axis(axis));
        check("mean_axis", &shapes3(), |v, _| v.mean_axis(axis));
    }
    check("sum", &shapes2(), |v, _| v.sum());
    check("mean", &shapes2(), |v, _| v.mean());
}

#[test]
fn convolutions() {
    let cases = [
        (vec![2, 3, 6], vec![4, 3, 3]),
        (vec![1, 2, 5], vec![3, 2, 1]),
        (vec![2, 2, 4, 3], vec![3, 2, 3, 3]),
        (vec![1, 3, 3, 5], vec![2, 3, 3, 1]),
        (vec![1, 2, 3, 3, 4], vec![2, 2, 3, 3, 3]),
    ];
    for (xs, ws) in cases {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &xs);
        let w = rand_tensor(&mut rng, &ws);
        let b = rand_tensor(&mut rng, &[ws[0]]);
        let (wc, bc, xc) = (w.clone(), b.clone(), x.clone());
        let e_x = grad_check(
            |v| probe(&v.conv(&v.graph().constant(wc.clone()), Some(&v.graph().constant(bc.clone())))?, 9),
            &x,
            EPS,
        )
        .unwrap();
        let e_w = grad_check(
            |v| probe(&v.graph().constant(xc.clone()).conv(v, Some(&v.graph().constant(b.clone())))?, 9),
            &w,
            EPS,
        )
        .unwrap();
        let e_b = grad_check(
            |v| probe(&v.graph().constant(x.clone()).conv(&v.graph().constant(w.clone()), Some(v))?, 9),
            &b,
            EPS,
        )
        .unwrap();
        assert!(e_x < TOL && e_w < TOL && e_b < TOL, "{xs:?}/{ws:?}: {e_x} {e_w} {e_b}");
    }
}

#[test]
fn batch_norm_both_modes() {
    for shape in [vec![2, 3, 4], vec![1, 2, 5], vec![3, 2, 2, 2]] {
        let c = shape[1];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &shape);
        let scale = rand_tensor(&mut rng, &[c]);
        let shift = rand_tensor(&mut rng, &[c]);
        let mean: Vec<f64> = (0..c).map(|i| i as f64 * 0.1).collect();
        let var: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
        for batch in [true, false] {
            let stats = if batch {
                NormStats::Batch { eps: 1e-5 }
            } else {
                NormStats::Fixed { mean: &mean, var: &var, eps: 1e-5 }
            };
            let (sc, sh) = (scale.clone(), shift.clone());
            let err = grad_check(
                |v| {
                    let g = v.graph();
                    probe(&v.batch_norm(&g.constant(sc.clone()), &g.constant(sh.clone()), stats)?.0, 4)
                },
                &x,
                EPS,
            )
            .unwrap();
            assert!(err < TOL, "bn x batch={batch} {shape:?}: {err}");
            let xc = x.clone();
            let sh2 = shift.clone();
            let err = grad_check(
                |v| {
                    let g = v.graph();
                    probe(&g.constant(xc.clone()).batch_norm(v, &g.constant(sh2.clone()), stats)?.0, 4)
                },
                &scale,
                EPS,
            )
            .unwrap();
            assert!(err < TOL, "bn scale batch={batch}: {err}");
        }
    }
}

#[test]
fn scatter_mean_gradient() {
    for (n, c, cells) in [(5, 2, 3), (8, 3, 4), (3, 1, 5)] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let x = rand_tensor(&mut rng, &[n, c]);
        let ids: Vec<Option<usize>> = (0..n)
            .map(|i| if i % 4 == 3 { None } else { Some(rng.gen_range(0..cells)) })
            .collect();
        let err = grad_check(|v| probe(&v.scatter_mean(&ids, cells)?, 2), &x, EPS).unwrap();
        assert!(err < TOL, "scatter_mean: {err}");
    }
}

#[test]
fn eval_forward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[1, 3, 5, 4]);
    let w = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    let run = || {
        let g = Graph::no_grad();
        let y = g.constant(x.clone()).conv(&g.constant(w.clone()), None).unwrap();
        y.softmax(1).unwrap().value().clone()
    };
    assert_eq!(run(), run());
}
