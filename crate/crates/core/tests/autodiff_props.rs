use eluq_core::autodiff::{gradient_check, matmul, BatchNormMode, Graph, Result, Tensor, Var, SELU_ALPHA, SELU_SCALE};
use eluq_core::rng::stream;
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-6;
const STEP: f64 = 1e-5;

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Random weights so every output element matters.
fn contract<'g>(g: &'g Graph<f64>, v: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let shape = v.shape();
    let c = uniform(&mut stream(seed, "contract", 0), &shape, -1.5, 1.5);
    v.mul(g.constant(c))?.sum()
}

fn check(
    leaves: &[Tensor<f64>],
    build: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
) -> f64 {
    let rep = gradient_check(leaves, build, STEP, TOL).expect("gradient check runs");
    rep.max_rel_error
}

fn unary<'g>(name: &str, x: Var<'g, f64>) -> Result<Var<'g, f64>> {
    match name {
        "neg" => x.neg(),
        "exp" => x.exp(),
        "log" => x.log(),
        "sqrt" => x.sqrt(),
        "square" => x.square(),
        "tanh" => x.tanh(),
        "selu" => x.selu(),
        "softplus" => x.softplus(),
        "sigmoid" => x.sigmoid(),
        "sum_axis0" => x.sum_axis(0),
        "sum_axis1" => x.sum_axis(1),
        "mean_axis0" => x.mean_axis(0),
        "mean_axis1" => x.mean_axis(1),
        "reshape" => x.reshape(&[2, 6]),
        "add_scalar" => x.add_scalar(0.37),
        "mul_scalar" => x.mul_scalar(-1.7),
        _ => unreachable!(),
    }
}

const UNARY: [&str; 16] = [
    "neg", "exp", "log", "sqrt", "square", "tanh", "selu", "softplus", "sigmoid", "sum_axis0", "sum_axis1",
    "mean_axis0", "mean_axis1", "reshape", "add_scalar", "mul_scalar",
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn unary_primitives_match_finite_differences(seed in any::<u64>()) {
        let mut rng = stream(seed, "inputs", 0);
        for (k, name) in UNARY.iter().enumerate() {
            let x = match *name {
                "log" | "sqrt" => uniform(&mut rng, &[3, 4], 0.2, 3.0),
                // keep clear of the kink at 0
                "selu" => Tensor::from_fn(&[3, 4], |_| {
                    let v: f64 = rng.gen_range(0.01..2.0);
                    if rng.gen() { v } else { -v }
                }),
                _ => uniform(&mut rng, &[3, 4], -2.0, 2.0),
            };
            let err = check(&[x], |g, v| contract(g, unary(name, v[0])?, seed ^ k as u64));
            prop_assert!(err < TOL, "{name}: {err:e}");
        }
    }

    #[test]
    fn binary_primitives_match_finite_differences(seed in any::<u64>()) {
        let mut rng = stream(seed, "inputs", 1);
        let a = uniform(&mut rng, &[3, 4], -2.0, 2.0);
        let b = uniform(&mut rng, &[3, 4], -2.0, 2.0);
        let pos = uniform(&mut rng, &[3, 4], 0.3, 2.5);
        let m = uniform(&mut rng, &[4, 5], -2.0, 2.0);
        let row = uniform(&mut rng, &[1, 4], -2.0, 2.0);
        let errs = [
            ("add", check(&[a.clone(), b.clone()], |g, v| contract(g, v[0].add(v[1])?, seed))),
            ("sub", check(&[a.clone(), b.clone()], |g, v| contract(g, v[0].sub(v[1])?, seed))),
            ("mul", check(&[a.clone(), b.clone()], |g, v| contract(g, v[0].mul(v[1])?, seed))),
            ("div", check(&[a.clone(), pos.clone()], |g, v| contract(g, v[0].div(v[1])?, seed))),
            ("matmul", check(&[a.clone(), m], |g, v| contract(g, v[0].matmul(v[1])?, seed))),
            ("broadcast add", check(&[a.clone(), row.clone()], |g, v| contract(g, v[0].add(v[1])?, seed))),
            ("broadcast_to", check(&[row], |g, v| contract(g, v[0].broadcast_to(&[3, 4])?, seed))),
            ("sum", check(&[a.clone()], |_, v| v[0].square()?.sum())),
            ("mean", check(&[a.clone()], |_, v| v[0].tanh()?.mean())),
        ];
        for (name, err) in errs {
            prop_assert!(err < TOL, "{name}: {err:e}");
        }
    }

    #[test]
    fn normalization_and_sampling_match_finite_differences(seed in any::<u64>()) {
        let mut rng = stream(seed, "inputs", 2);
        let x = uniform(&mut rng, &[8, 5], -2.0, 2.0);
        let gamma = uniform(&mut rng, &[1, 5], 0.5, 1.5);
        let beta = uniform(&mut rng, &[1, 5], -0.5, 0.5);
        let mode = BatchNormMode::Eval {
            running_mean: uniform(&mut rng, &[1, 5], -0.5, 0.5),
            running_var: uniform(&mut rng, &[1, 5], 0.5, 2.0),
            eps: 1e-3,
        };
        let eps = uniform(&mut rng, &[8, 5], -2.0, 2.0);
        let std = uniform(&mut rng, &[8, 5], 0.2, 2.0);
        let leaves = [x.clone(), gamma, beta];
        let train = check(&leaves, |g, v| {
            let (y, _) = v[0].batch_norm(v[1], v[2], &BatchNormMode::Train { eps: 1e-3 })?;
            contract(g, y.selu()?.tanh()?, seed)
        });
        let eval = check(&leaves, |g, v| contract(g, v[0].batch_norm(v[1], v[2], &mode)?.0, seed));
        let gauss = check(&[x, std], |g, v| contract(g, g.gaussian_sample(v[0], v[1], eps.clone())?, seed));
        prop_assert!(train < TOL, "batch_norm train composite: {train:e}");
        prop_assert!(eval < TOL, "batch_norm eval: {eval:e}");
        prop_assert!(gauss < TOL, "gaussian_sample: {gauss:e}");
    }

    /// Eval-mode normalization is affine: f(a x) - f(0) scales with a.
    #[test]
    fn eval_batch_norm_is_affine(seed in any::<u64>(), a in -3.0f64..3.0) {
        let mut rng = stream(seed, "bn", 0);
        let x = uniform(&mut rng, &[4, 3], -2.0, 2.0);
        let mode = BatchNormMode::Eval {
            running_mean: uniform(&mut rng, &[1, 3], -1.0, 1.0),
            running_var: uniform(&mut rng, &[1, 3], 0.3, 3.0),
            eps: 1e-3,
        };
        let gamma = uniform(&mut rng, &[1, 3], 0.5, 1.5);
        let beta = uniform(&mut rng, &[1, 3], -0.5, 0.5);
        let f = |t: Tensor<f64>| {
            let g = Graph::new();
            let (y, _) = g
                .constant(t)
                .batch_norm(g.constant(gamma.clone()), g.constant(beta.clone()), &mode)
                .unwrap();
            let v = y.value().clone();
            v
        };
        let f0 = f(Tensor::zeros(&[4, 3]));
        let f1 = f(x.clone());
        let fa = f(x.map(|v| a * v));
        for i in 0..12 {
            let lin = f0.data()[i] + a * (f1.data()[i] - f0.data()[i]);
            prop_assert!((fa.data()[i] - lin).abs() < 1e-12 * (1.0 + lin.abs()));
        }
    }

    #[test]
    fn matmul_matches_triple_loop(seed in any::<u64>(), m in 1usize..7, k in 1usize..7, n in 1usize..7) {
        let mut rng = stream(seed, "mm", 0);
        let a = uniform(&mut rng, &[m, k], -3.0, 3.0);
        let b = uniform(&mut rng, &[k, n], -3.0, 3.0);
        let c = matmul(&a, false, &b, false).unwrap();
        prop_assert_eq!(c.shape(), &[m, n][..]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.at(i, l) * b.at(l, j);
                }
                prop_assert!((c.at(i, j) - s).abs() < 1e-12 * (1.0 + s.abs()));
            }
        }
    }

    /// With the noise frozen the sampling node is a pure function.
    #[test]
    fn frozen_sampling_is_bit_identical(seed in any::<u64>()) {
        let mut rng = stream(seed, "gs", 0);
        let mean = uniform(&mut rng, &[5, 2], -1.0, 1.0);
        let std = uniform(&mut rng, &[5, 2], 0.1, 1.0);
        let eps = uniform(&mut rng, &[5, 2], -2.0, 2.0);
        let run = || {
            let g = Graph::new();
            let out = g
                .gaussian_sample(g.constant(mean.clone()), g.constant(std.clone()), eps.clone())
                .unwrap();
            let bits: Vec<u64> = out.value().data().iter().map(|v| v.to_bits()).collect();
            bits
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn selu_constants_and_continuity() {
    assert!((SELU_SCALE - 1.05070098).abs() < 1e-8);
    assert!((SELU_ALPHA - 1.67326324).abs() < 1e-8);
    let g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1e-12f64, 0.0, 1e-12, 1.0, -1.0]));
    let y = x.selu().unwrap();
    let v = y.value();
    assert!(v.data()[0].abs() < 1e-11 && v.data()[1] == 0.0 && v.data()[2].abs() < 1e-11);
    assert!((v.data()[3] - SELU_SCALE).abs() < 1e-15);
    assert!((v.data()[4] - SELU_SCALE * SELU_ALPHA * ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
}
