//! Value-only stochastic forward pass for posterior sampling.
//!
//! Mirrors [`Network::forward_bound`] in evaluation mode without building a
//! graph. Instead of per-row pre-activation noise, each pass draws one weight
//! matrix per layer and shares it across the rows of the batch: the
//! distribution of any single row's output is the same, and a layer costs one
//! matrix product instead of two.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::mnf::{BatchNorm, CouplingFlow, DenseLayer, MnfDenseLayer};
use crate::model::{Block, Head, Layer, Network, VarianceClamp};
use crate::Real;

/// Frozen copy of one dense layer's sampling distribution.
#[derive(Debug, Clone)]
pub struct DenseView<T> {
    in_dim: usize,
    out_dim: usize,
    mean_w: Vec<T>,
    mean_b: Vec<T>,
    /// Weight and bias standard deviations; `None` for deterministic layers.
    std: Option<(Vec<T>, Vec<T>)>,
    z: Option<ZView<T>>,
}

#[derive(Debug, Clone)]
struct ZView<T> {
    mean: Vec<T>,
    std: Vec<T>,
    flow: CouplingFlow<T>,
}

/// Layers that can be frozen into a [`DenseView`].
pub trait Sampleable<T: Real>: Layer<T> {
    fn view(&self) -> DenseView<T>;
}

fn half_exp<T: Real>(t: &Tensor<T>) -> Vec<T> {
    t.data().iter().map(|v| (*v * T::lit(0.5)).exp()).collect()
}

impl<T: Real> Sampleable<T> for MnfDenseLayer<T> {
    fn view(&self) -> DenseView<T> {
        let z = (!self.is_degenerate()).then(|| ZView {
            mean: self.qz_mean.data().to_vec(),
            std: half_exp(&self.qz_log_var),
            flow: self.q_flow.clone(),
        });
        DenseView {
            in_dim: self.in_dim(),
            out_dim: self.out_dim(),
            mean_w: self.mean_w.data().to_vec(),
            mean_b: self.mean_b.data().to_vec(),
            std: Some((half_exp(&self.log_var_w), half_exp(&self.log_var_b))),
            z,
        }
    }
}

impl<T: Real> Sampleable<T> for DenseLayer<T> {
    fn view(&self) -> DenseView<T> {
        DenseView {
            in_dim: self.in_dim(),
            out_dim: self.out_dim(),
            mean_w: self.weight.data().to_vec(),
            mean_b: self.bias.data().to_vec(),
            std: None,
            z: None,
        }
    }
}

fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    let v: f64 = StandardNormal.sample(rng);
    T::lit(v)
}

impl<T: Real> DenseView<T> {
    fn stochastic(&self) -> bool {
        self.std.is_some()
    }

    /// `out = x W + b` for one draw of `(z, W, b)`; `w` is scratch space.
    fn apply<R: Rng + ?Sized>(&self, x: &[T], rows: usize, rng: &mut R, w: &mut Vec<T>, out: &mut Vec<T>) {
        let (i, o) = (self.in_dim, self.out_dim);
        let z = self.z.as_ref().map(|zv| {
            let z0: Vec<T> = (0..i).map(|k| zv.std[k] * normal::<T, R>(rng) + zv.mean[k]).collect();
            let z0 = Tensor::new(vec![1, i], z0).expect("z row");
            zv.flow.apply(&z0).expect("flow dims fixed at construction").0
        });
        let mut bias = self.mean_b.clone();
        let weights: &[T] = match (&self.std, &z) {
            (None, None) => &self.mean_w,
            (std, z) => {
                w.clear();
                w.extend_from_slice(&self.mean_w);
                if let Some(z) = z {
                    for (row, &zk) in w.chunks_mut(o).zip(z.data()) {
                        row.iter_mut().for_each(|v| *v = *v * zk);
                    }
                }
                if let Some((sw, sb)) = std {
                    for (v, s) in w.iter_mut().zip(sw) {
                        *v += *s * normal::<T, R>(rng);
                    }
                    for (b, s) in bias.iter_mut().zip(sb) {
                        *b += *s * normal::<T, R>(rng);
                    }
                }
                w
            }
        };
        out.resize(rows * o, T::zero());
        T::gemm(rows, i, o, T::one(), x, false, weights, false, T::zero(), out);
        for r in out.chunks_mut(o) {
            for (m, b) in r.iter_mut().zip(&bias) {
                *m += *b;
            }
        }
    }
}

/// Batch norm with running statistics folded into `a x + c`.
#[derive(Debug, Clone)]
struct NormView<T> {
    a: Vec<T>,
    c: Vec<T>,
}

impl<T: Real> NormView<T> {
    fn new(bn: &BatchNorm<T>) -> Self {
        let a: Vec<T> = bn
            .running_var
            .data()
            .iter()
            .zip(bn.gamma.data())
            .map(|(&v, &g)| g / (v + bn.eps).sqrt())
            .collect();
        let c = bn
            .beta
            .data()
            .iter()
            .zip(bn.running_mean.data())
            .zip(&a)
            .map(|((&b, &m), &a)| b - m * a)
            .collect();
        Self { a, c }
    }

    /// Batch norm, then SELU, in place.
    fn apply_selu(&self, x: &mut [T]) {
        let d = self.a.len();
        let scale = T::lit(crate::autodiff::SELU_SCALE);
        let sa = T::lit(crate::autodiff::SELU_SCALE * crate::autodiff::SELU_ALPHA);
        for r in x.chunks_mut(d) {
            for ((v, &a), &c) in r.iter_mut().zip(&self.a).zip(&self.c) {
                let u = a * *v + c;
                *v = if u > T::zero() { scale * u } else { sa * (u.exp() - T::one()) };
            }
        }
    }
}

#[derive(Debug, Clone)]
struct HeadView<T> {
    blocks: Vec<(DenseView<T>, NormView<T>)>,
    out: DenseView<T>,
}

fn blocks<T: Real, L: Sampleable<T>>(bs: &[Block<T, L>]) -> Vec<(DenseView<T>, NormView<T>)> {
    bs.iter().map(|b| (b.layer.view(), NormView::new(&b.norm))).collect()
}

fn head<T: Real, L: Sampleable<T>>(h: &Head<T, L>) -> HeadView<T> {
    HeadView {
        blocks: blocks(&h.blocks),
        out: h.out.view(),
    }
}

/// Frozen network for repeated stochastic evaluation.
#[derive(Debug, Clone)]
pub struct Sampler<T> {
    input: usize,
    trunk: Vec<(DenseView<T>, NormView<T>)>,
    value: HeadView<T>,
    logvar: Option<HeadView<T>>,
    clamp: VarianceClamp,
}

impl<T: Real> Sampler<T> {
    pub fn new<L: Sampleable<T>>(net: &Network<T, L>) -> Self {
        Self {
            input: net.topology().input,
            trunk: blocks(&net.trunk),
            value: head(&net.value_head),
            logvar: net.logvar_head.as_ref().map(head),
            clamp: net.clamp,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    /// Whether repeated passes differ.
    pub fn stochastic(&self) -> bool {
        self.trunk.iter().any(|(d, _)| d.stochastic()) || self.value.out.stochastic()
    }

    pub fn has_logvar(&self) -> bool {
        self.logvar.is_some()
    }

    /// One pass over `rows x input` scaled features: `(v_hat, s)`, both
    /// `rows x 3` row-major; `s` is empty without a log-variance head.
    ///
    /// Noise is drawn per layer in forward order: the `z0` row, the weight
    /// matrix (row-major), then the bias.
    pub fn pass<R: Rng + ?Sized>(&self, x: &[T], rows: usize, rng: &mut R) -> (Vec<T>, Vec<T>) {
        let mut w = Vec::new();
        let mut h = x.to_vec();
        let mut next = Vec::new();
        for (d, n) in &self.trunk {
            d.apply(&h, rows, rng, &mut w, &mut next);
            n.apply_selu(&mut next);
            std::mem::swap(&mut h, &mut next);
        }
        let mut run = |hv: &HeadView<T>, rng: &mut R| {
            let mut a = h.clone();
            for (d, n) in &hv.blocks {
                d.apply(&a, rows, rng, &mut w, &mut next);
                n.apply_selu(&mut next);
                std::mem::swap(&mut a, &mut next);
            }
            let mut out = Vec::new();
            hv.out.apply(&a, rows, rng, &mut w, &mut out);
            out
        };
        let v = run(&self.value, rng);
        let s = match &self.logvar {
            Some(hv) => run(hv, rng).into_iter().map(|r| T::lit(self.clamp.value(r.as_f64()))).collect(),
            None => Vec::new(),
        };
        (v, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mnf::{LayerNoise, MnfConfig, Parameterized};
    use crate::model::{EluqNetwork, Topology};
    use crate::rng::stream;
    use rand::SeedableRng;

    fn perturbed(log_var: f64) -> EluqNetwork<f64> {
        let mut rng = stream(8, "init", 0);
        let mut net = EluqNetwork::<f64>::eluq(Topology::compact(), MnfConfig::default(), &mut rng).unwrap();
        for p in net.params_mut() {
            let m = crate::autodiff::Param::make_mut(p);
            for (k, v) in m.data_mut().iter_mut().enumerate() {
                *v += 0.01 * ((k % 7) as f64 - 3.0);
            }
        }
        net.set_log_vars(log_var);
        net
    }

    fn features(rows: usize) -> Tensor<f64> {
        Tensor::from_fn(&[rows, 15], |i| ((i * 13 % 29) as f64 / 14.0 - 1.0) * 0.9)
    }

    /// With vanishing weight variances only `z` is random; replaying the
    /// sampler's `z` draws through the graph must give the same outputs.
    #[test]
    fn matches_graph_forward() {
        let net = perturbed(-60.0);
        let x = features(6);
        let sampler = Sampler::new(&net);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (v, s) = sampler.pass(x.data(), 6, &mut r);

        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let noise: Vec<LayerNoise<f64>> = net
            .layers()
            .iter()
            .map(|l| {
                let (i, o) = (l.in_dim(), l.out_dim());
                let z = crate::rng::standard_normal(&mut r, &[1, i]);
                let _: Tensor<f64> = crate::rng::standard_normal(&mut r, &[i * o + o, 1]);
                LayerNoise { z, ..LayerNoise::zeros(i, o, 6) }
            })
            .collect();
        let (gv, gs) = net.predict(&x, &noise, false).unwrap();
        let dv = gv.data().iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let ds = gs.unwrap().data().iter().zip(&s).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dv < 1e-10 && ds < 1e-10, "{dv} {ds}");
    }

    /// Shared weight draws and per-row pre-activation noise give the same
    /// per-row predictive moments.
    #[test]
    fn moments_match_local_noise() {
        let net = perturbed(-4.0);
        let x = features(2);
        let sampler = Sampler::new(&net);
        let n = 3000;
        let mut rng = stream(5, "test", 0);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for _ in 0..n {
            a.push(sampler.pass(x.data(), 2, &mut rng).0);
            let noise = net.draw_noise(2, &mut rng);
            b.push(net.predict(&x, &noise, false).unwrap().0.data().to_vec());
        }
        let moments = |xs: &[Vec<f64>], k: usize| {
            let m = xs.iter().map(|r| r[k]).sum::<f64>() / n as f64;
            let v = xs.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            (m, v.sqrt())
        };
        for k in 0..6 {
            let ((ma, sa), (mb, sb)) = (moments(&a, k), moments(&b, k));
            assert!((sa / sb - 1.0).abs() < 0.1, "output {k}: std {sa} vs {sb}");
            assert!((ma - mb).abs() < 5.0 * sa * (2.0 / n as f64).sqrt(), "output {k}: mean {ma} vs {mb}");
        }
    }
}
