//! Built-in numerical checks: gradients, flow invertibility, KL oracles,
//! weighted averages and noiseless reconstruction.

use std::time::Instant;

use rand::Rng;

use crate::analysis::weighted_average;
use crate::autodiff::{gradient_check, hooks, BatchNormMode, Graph, Result, Tensor, Var, DEFAULT_STEP};
use crate::generator::{generate, GeneratorConfig};
use crate::kinematics::Method;
use crate::mnf::{uniform_tensor, CouplingFlow, LayerNoise, MnfConfig, MnfDenseLayer, Parameterized};
use crate::model::{
    physics_loss, regression_loss, total_loss_graph, EluqNetwork, ForwardMode, LossWeights, TargetScaler,
    TargetTransform, Topology,
};
use crate::rng::{standard_normal, stream};

pub const GRAD_TOL: f64 = 1e-5;
pub const FLOW_ROUNDTRIP_TOL: f64 = 1e-10;
pub const FLOW_LOGDET_TOL: f64 = 1e-6;
pub const KL_QUADRATURE_TOL: f64 = 1e-8;
pub const EXACT_TOL: f64 = 1e-12;
pub const RECO_TOL: f64 = 1e-9;

/// One named check with its measured error.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            error,
            tolerance,
            passed: error < tolerance,
        }
    }

    fn failed(name: impl Into<String>, why: &str) -> Self {
        Self {
            name: format!("{} ({why})", name.into()),
            error: f64::NAN,
            tolerance: 0.0,
            passed: false,
        }
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict}  {:<40} error {:.3e}  tol {:.0e}", self.name, self.error, self.tolerance)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelftestOptions {
    /// Perturbs the SELU adjoint constant so the gradient suite must fail.
    pub corrupt_selu: bool,
    /// Events for the reconstruction round trip.
    pub reco_events: u64,
}

#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

pub fn run(opts: &SelftestOptions) -> SelftestReport {
    let t0 = Instant::now();
    if opts.corrupt_selu {
        hooks::set_selu_grad_scale(crate::autodiff::SELU_SCALE * 1.01);
    }
    let mut checks = primitive_gradients();
    checks.extend(mnf_gradients());
    checks.push(loss_gradient());
    hooks::reset_selu_grad_scale();
    checks.extend(flow_checks());
    checks.extend(kl_checks());
    checks.extend(weighted_average_checks());
    let n = if opts.reco_events == 0 { 10_000 } else { opts.reco_events };
    checks.extend(reconstruction_checks(n));
    SelftestReport {
        checks,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn grad(name: &str, leaves: &[Tensor<f64>], build: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>) -> CheckResult {
    match gradient_check(leaves, build, DEFAULT_STEP, GRAD_TOL) {
        Ok(rep) => CheckResult::new(format!("grad {name}"), rep.max_rel_error, GRAD_TOL),
        Err(e) => CheckResult::failed(format!("grad {name}"), &e.to_string()),
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Uniform with `|x| >= gap`, for functions with a kink at zero.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(gap..2.0);
        if rng.gen::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Weights the output with fixed coefficients and sums it to a scalar.
fn contract<'g>(g: &'g Graph<f64>, v: Var<'g, f64>) -> Result<Var<'g, f64>> {
    let shape = v.shape();
    let mut rng = stream(99, "selftest-contract", shape.iter().product::<usize>() as u64);
    let c = uniform(&mut rng, &shape, -1.5, 1.5);
    v.mul(g.constant(c))?.sum()
}

/// Finite-difference checks of every graph primitive.
pub fn primitive_gradients() -> Vec<CheckResult> {
    let mut rng = stream(7, "selftest", 0);
    let a = uniform(&mut rng, &[3, 4], -1.5, 1.5);
    let b = uniform(&mut rng, &[3, 4], -1.5, 1.5);
    let m = uniform(&mut rng, &[4, 2], -1.5, 1.5);
    let pos = uniform(&mut rng, &[3, 4], 0.3, 2.5);
    let kinked = away_from_zero(&mut rng, &[3, 4], 0.05);
    let row = uniform(&mut rng, &[1, 4], -1.0, 1.0);
    let bn_x = uniform(&mut rng, &[6, 3], -2.0, 2.0);
    let gamma = uniform(&mut rng, &[1, 3], 0.5, 1.5);
    let beta = uniform(&mut rng, &[1, 3], -0.5, 0.5);
    let eps_noise = standard_normal(&mut rng, &[3, 4]);
    let eval_mode = BatchNormMode::Eval {
        running_mean: uniform(&mut rng, &[1, 3], -0.5, 0.5),
        running_var: uniform(&mut rng, &[1, 3], 0.5, 2.0),
        eps: 1e-3,
    };

    vec![
        grad("matmul", &[a.clone(), m.clone()], |g, v| contract(g, v[0].matmul(v[1])?)),
        grad("add", &[a.clone(), b.clone()], |g, v| contract(g, v[0].add(v[1])?)),
        grad("sub", &[a.clone(), b.clone()], |g, v| contract(g, v[0].sub(v[1])?)),
        grad("mul", &[a.clone(), b.clone()], |g, v| contract(g, v[0].mul(v[1])?)),
        grad("div", &[a.clone(), pos.clone()], |g, v| contract(g, v[0].div(v[1])?)),
        grad("neg", &[a.clone()], |g, v| contract(g, v[0].neg()?)),
        grad("exp", &[a.clone()], |g, v| contract(g, v[0].exp()?)),
        grad("log", &[pos.clone()], |g, v| contract(g, v[0].log()?)),
        grad("sqrt", &[pos.clone()], |g, v| contract(g, v[0].sqrt()?)),
        grad("square", &[a.clone()], |g, v| contract(g, v[0].square()?)),
        grad("tanh", &[a.clone()], |g, v| contract(g, v[0].tanh()?)),
        grad("selu", &[kinked], |g, v| contract(g, v[0].selu()?)),
        grad("softplus", &[a.clone()], |g, v| contract(g, v[0].softplus()?)),
        grad("sigmoid", &[a.clone()], |g, v| contract(g, v[0].sigmoid()?)),
        grad("sum", &[a.clone()], |_, v| v[0].square()?.sum()),
        grad("mean", &[a.clone()], |_, v| v[0].square()?.mean()),
        grad("sum_axis0", &[a.clone()], |g, v| contract(g, v[0].sum_axis(0)?)),
        grad("sum_axis1", &[a.clone()], |g, v| contract(g, v[0].sum_axis(1)?)),
        grad("mean_axis0", &[a.clone()], |g, v| contract(g, v[0].mean_axis(0)?)),
        grad("mean_axis1", &[a.clone()], |g, v| contract(g, v[0].mean_axis(1)?)),
        grad("broadcast_to", &[row], |g, v| contract(g, v[0].broadcast_to(&[3, 4])?)),
        grad("reshape", &[a.clone()], |g, v| contract(g, v[0].reshape(&[2, 6])?)),
        grad("add_scalar", &[a.clone()], |g, v| contract(g, v[0].add_scalar(0.7)?)),
        grad("mul_scalar", &[a.clone()], |g, v| contract(g, v[0].mul_scalar(-1.3)?)),
        grad("batch_norm train", &[bn_x.clone(), gamma.clone(), beta.clone()], |g, v| {
            contract(g, v[0].batch_norm(v[1], v[2], &BatchNormMode::Train { eps: 1e-3 })?.0)
        }),
        grad("batch_norm eval", &[bn_x, gamma, beta], move |g, v| {
            contract(g, v[0].batch_norm(v[1], v[2], &eval_mode)?.0)
        }),
        grad("gaussian_sample", &[a, pos], move |g, v| {
            contract(g, g.gaussian_sample(v[0], v[1], eps_noise.clone())?)
        }),
    ]
}

/// Layer with every parameter moved off its initialization so flows and
/// auxiliary terms are non-trivial.
fn scrambled_layer(in_dim: usize, out_dim: usize, seed: u64) -> MnfDenseLayer<f64> {
    let cfg = MnfConfig {
        flow_hidden: 6,
        ..MnfConfig::default()
    };
    let mut rng = stream(seed, "selftest-layer", 0);
    let mut l = MnfDenseLayer::new(in_dim, out_dim, &cfg, &mut rng);
    for p in l.params_mut() {
        let shape = p.shape().to_vec();
        *p = crate::autodiff::Param::new(uniform_tensor(&shape, 0.5, &mut rng));
    }
    l
}

/// The MNF layer's output and its KL estimate, against all parameters and
/// the input, with recorded noise.
pub fn mnf_gradients() -> Vec<CheckResult> {
    let l = scrambled_layer(3, 2, 1);
    let mut rng = stream(2, "selftest-noise", 0);
    let noise = l.draw_noise(4, &mut rng);
    let x = uniform(&mut rng, &[4, 3], -1.0, 1.0);
    let mut leaves: Vec<Tensor<f64>> = l.params().iter().map(|p| (***p).clone()).collect();
    leaves.push(x);
    let n = leaves.len() - 1;
    vec![
        grad("mnf forward", &leaves, |g, v| contract(g, l.forward_bound(g, &v[..n], v[n], &noise)?.0)),
        grad("mnf kl_term", &leaves, |g, v| {
            let (_, ctx) = l.forward_bound(g, &v[..n], v[n], &noise)?;
            l.kl_term(&ctx)
        }),
    ]
}

/// Regression, physics and KL terms of the full objective on a small
/// network in training mode.
pub fn loss_gradient() -> CheckResult {
    let topo = Topology {
        input: 4,
        trunk: vec![5, 4],
        head: vec![3],
        output: 3,
    };
    let cfg = MnfConfig {
        flow_hidden: 4,
        init_log_var: -4.0,
        ..MnfConfig::default()
    };
    let mut rng = stream(3, "selftest-net", 0);
    let mut net = match EluqNetwork::<f64>::eluq(topo, cfg, &mut rng) {
        Ok(n) => n,
        Err(e) => return CheckResult::failed("grad full loss", &e.to_string()),
    };
    // exact derivative of the clamp, not the training slope floor
    net.clamp.grad_floor = 0.0;
    let batch = 6;
    let x = uniform(&mut rng, &[batch, 4], -1.0, 1.0);
    let targets: Vec<[f64; 3]> = (0..batch)
        .map(|_| {
            let (x, y) = (rng.gen_range(1e-3..0.5), rng.gen_range(0.05..0.9));
            [x, 1e5 * x * y, y]
        })
        .collect();
    let ts = TargetScaler::fit(&targets, TargetTransform::Log10);
    let v = Tensor::from_fn(&[batch, 3], |i| ts.scale(i % 3, targets[i / 3][i % 3]));
    let ln_s = Tensor::from_fn(&[batch, 1], |_| 1e5f64.ln());
    let noise: Vec<LayerNoise<f64>> = net.draw_noise(batch, &mut rng);
    let weights = LossWeights {
        alpha: 1.0,
        beta: 0.5,
        batches_per_epoch: 3,
    };
    let leaves: Vec<Tensor<f64>> = net.params().iter().map(|p| (***p).clone()).collect();
    grad("full loss", &leaves, |g, vars| {
        let out = net.forward_bound(g, vars, &x, &noise, ForwardMode::TRAIN)?;
        let s = out.s.expect("variance head");
        let reg = regression_loss(out.v_hat, s, g.constant(v.clone()))?;
        let phys = physics_loss(out.v_hat, &ts, &ln_s)?;
        total_loss_graph(reg, Some(phys), out.kl, &weights)
    })
}

fn randomized_flow(dim: usize, seed: u64) -> CouplingFlow<f64> {
    let mut rng = stream(seed, "selftest-flow", 0);
    let mut f = CouplingFlow::new(dim, 2, 8, &mut rng);
    for p in f.params_mut() {
        let shape = p.shape().to_vec();
        *p = crate::autodiff::Param::new(uniform_tensor(&shape, 0.4, &mut rng));
    }
    f
}

/// `ln |det A|` by Gaussian elimination with partial pivoting.
fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).expect("non-empty");
        a.swap(c, p);
        let piv = a[c][c];
        if piv == 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += piv.abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / piv;
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}

/// Round trip through the inverse and log-det against a numerical Jacobian,
/// on dimensions 2 to 6.
pub fn flow_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    for dim in 2..=6 {
        let f = randomized_flow(dim, dim as u64);
        let mut rng = stream(dim as u64, "selftest-z", 0);
        let z = uniform(&mut rng, &[1, dim], -2.0, 2.0);
        let run = || -> Result<(f64, f64)> {
            let (zt, ld) = f.apply(&z)?;
            let (back, _) = f.inverse(&zt)?;
            let h = 1e-6;
            let mut jac = vec![vec![0.0; dim]; dim];
            for i in 0..dim {
                let mut zp = z.clone();
                zp.data_mut()[i] += h;
                let mut zm = z.clone();
                zm.data_mut()[i] -= h;
                let (fp, fm) = (f.apply(&zp)?.0, f.apply(&zm)?.0);
                for (k, row) in jac.iter_mut().enumerate() {
                    row[i] = (fp.data()[k] - fm.data()[k]) / (2.0 * h);
                }
            }
            Ok((back.max_abs_diff(&z), (log_abs_det(jac) - ld).abs()))
        };
        match run() {
            Ok((rt, ld)) => {
                out.push(CheckResult::new(format!("flow roundtrip dim {dim}"), rt, FLOW_ROUNDTRIP_TOL));
                out.push(CheckResult::new(format!("flow log-det dim {dim}"), ld, FLOW_LOGDET_TOL));
            }
            Err(e) => out.push(CheckResult::failed(format!("flow dim {dim}"), &e.to_string())),
        }
    }
    out
}

/// `KL(N(m, v) || N(0, 1))` by composite Simpson quadrature over `m ± 14 σ`.
fn kl_quadrature(m: f64, v: f64) -> f64 {
    let sd = v.sqrt();
    let n = 4000;
    let (lo, hi) = (m - 14.0 * sd, m + 14.0 * sd);
    let h = (hi - lo) / n as f64;
    let f = |w: f64| {
        let log_q = -0.5 * ((w - m) * (w - m) / v + v.ln() + std::f64::consts::TAU.ln());
        let log_p = -0.5 * (w * w + std::f64::consts::TAU.ln());
        log_q.exp() * (log_q - log_p)
    };
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Closed-form KL cases and the Gaussian weight term against quadrature.
pub fn kl_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let degenerate = MnfConfig {
        degenerate: true,
        ..MnfConfig::default()
    };
    let kl_of = |l: &MnfDenseLayer<f64>, noise: &LayerNoise<f64>| -> Result<(f64, f64, Vec<f64>)> {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, l.in_dim()]));
        let (_, ctx) = l.forward(&g, x, noise)?;
        let parts = l.kl_parts(&ctx)?;
        Ok((parts.total.item(), parts.gaussian.item(), ctx.z().tensor().data().to_vec()))
    };
    let set = |p: &mut crate::autodiff::Param<f64>, v: f64| crate::autodiff::Param::make_mut(p).data_mut().fill(v);

    let mut l = MnfDenseLayer::new(3, 2, &degenerate, &mut stream(1, "selftest-kl", 0));
    set(&mut l.mean_w, 0.0);
    set(&mut l.mean_b, 0.0);
    l.set_log_vars(0.0);
    out.push(match kl_of(&l, &LayerNoise::zeros(3, 2, 1)) {
        Ok((kl, _, _)) => CheckResult::new("kl posterior equals prior", kl.abs(), EXACT_TOL),
        Err(e) => CheckResult::failed("kl posterior equals prior", &e.to_string()),
    });

    let mut l = MnfDenseLayer::new(1, 1, &degenerate, &mut stream(2, "selftest-kl", 0));
    set(&mut l.mean_w, 1.0);
    set(&mut l.mean_b, 0.0);
    l.set_log_vars(0.0);
    out.push(match kl_of(&l, &LayerNoise::zeros(1, 1, 1)) {
        Ok((kl, _, _)) => CheckResult::new("kl N(1,1) vs N(0,1)", (kl - 0.5).abs(), EXACT_TOL),
        Err(e) => CheckResult::failed("kl N(1,1) vs N(0,1)", &e.to_string()),
    });

    let l = scrambled_layer(3, 2, 5);
    let noise = l.draw_noise(1, &mut stream(6, "selftest-kl", 0));
    out.push(match kl_of(&l, &noise) {
        Ok((_, gauss, z)) => {
            let o = l.out_dim();
            let mut quad = 0.0;
            for (k, (m, lv)) in l.mean_w.data().iter().zip(l.log_var_w.data()).enumerate() {
                quad += kl_quadrature(z[k / o] * m, lv.exp());
            }
            for (m, lv) in l.mean_b.data().iter().zip(l.log_var_b.data()) {
                quad += kl_quadrature(*m, lv.exp());
            }
            CheckResult::new("kl gaussian term vs quadrature", (gauss - quad).abs(), KL_QUADRATURE_TOL)
        }
        Err(e) => CheckResult::failed("kl gaussian term vs quadrature", &e.to_string()),
    });
    out
}

/// Inverse-variance weighting: equal-sigma limits and a two-pass oracle.
pub fn weighted_average_checks() -> Vec<CheckResult> {
    let mut rng = stream(11, "selftest-wavg", 0);
    let vals: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.5..1.5)).collect();
    let sig: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.01..0.3)).collect();
    let s0 = 0.137;
    let equal = vec![s0; vals.len()];
    let mut out = Vec::new();
    match (weighted_average(&vals, &equal), weighted_average(&vals, &sig)) {
        (Ok(eq), Ok(w)) => {
            let arith = vals.iter().sum::<f64>() / vals.len() as f64;
            out.push(CheckResult::new("wavg equal sigma = mean", ((eq.mean - arith) / arith).abs(), EXACT_TOL));
            out.push(CheckResult::new("wavg sigma_w sqrt(N) = sigma0", ((eq.event_level() - s0) / s0).abs(), EXACT_TOL));
            let mut num = 0.0;
            let mut den = 0.0;
            for (v, s) in vals.iter().zip(&sig) {
                num += v / (s * s);
                den += 1.0 / (s * s);
            }
            let naive = num / den;
            out.push(CheckResult::new("wavg naive-sum oracle", ((w.mean - naive) / naive).abs(), EXACT_TOL));
            let naive_sigma = den.sqrt().recip();
            out.push(CheckResult::new("wavg sigma naive-sum oracle", ((w.sigma - naive_sigma) / naive_sigma).abs(), EXACT_TOL));
        }
        (Err(e), _) | (_, Err(e)) => out.push(CheckResult::failed("wavg", &e.to_string())),
    }
    out
}

/// Noiseless, radiation-free events: every method recovers the truth and
/// `Q² = s x y` holds for the truth.
pub fn reconstruction_checks(n_events: u64) -> Vec<CheckResult> {
    let cfg = GeneratorConfig::noiseless(2024);
    let events = match generate(&cfg, n_events) {
        Ok(e) => e,
        Err(e) => return vec![CheckResult::failed("noiseless reconstruction", &e.to_string())],
    };
    let s = cfg.beam.s();
    let mut out = Vec::new();
    for m in Method::ALL {
        let mut worst: f64 = 0.0;
        let mut failures = 0;
        for ev in &events {
            match m.reconstruct(&ev.features, &cfg.beam) {
                Ok(t) => {
                    for (a, b) in t.as_array().iter().zip(ev.truth.as_array()) {
                        worst = worst.max(((a - b) / b).abs());
                    }
                }
                Err(_) => failures += 1,
            }
        }
        let name = format!("noiseless {} reconstruction", m.tag());
        out.push(if failures > 0 {
            CheckResult::failed(name, &format!("{failures} events failed"))
        } else {
            CheckResult::new(name, worst, RECO_TOL)
        });
    }
    let q2 = events
        .iter()
        .map(|e| ((e.truth.q2 - s * e.truth.x * e.truth.y) / e.truth.q2).abs())
        .fold(0.0, f64::max);
    out.push(CheckResult::new("truth Q2 = s x y", q2, EXACT_TOL));
    out
}
