//! Bicephalous regression network: a shared trunk of dense, batch-norm and
//! SELU blocks feeding a value head and a log-variance head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::clamp::VarianceClamp;
use super::scaler::INPUT_CLIP;
use crate::autodiff::{BatchStats, Graph, Param, Result, Tensor, TensorError, Var};
use crate::mnf::{bind, BatchNorm, DenseLayer, LayerNoise, MnfConfig, MnfDenseLayer, Parameterized};
use crate::Real;

/// Layer widths. The trunk is `input -> trunk[0] -> ... -> trunk[last]`; each
/// head continues with the `head` widths and ends in `output` linear units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub input: usize,
    pub trunk: Vec<usize>,
    pub head: Vec<usize>,
    pub output: usize,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            input: 15,
            trunk: vec![128, 128, 128],
            head: vec![64],
            output: 3,
        }
    }
}

impl Topology {
    /// Narrow widths for single-core test runs.
    pub fn compact() -> Self {
        Self {
            input: 15,
            trunk: vec![64, 64, 64],
            head: vec![32],
            output: 3,
        }
    }

    pub fn with_input(mut self, input: usize) -> Self {
        self.input = input;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 || self.trunk.is_empty() || self.trunk.contains(&0) || self.head.contains(&0) {
            return Err(TensorError::Contract(format!("invalid topology {self}")));
        }
        Ok(())
    }
}

/// `input:trunk,widths:head,widths:output`, e.g. `15:128,128,128:64:3`.
impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        write!(f, "{}:{}:{}:{}", self.input, join(&self.trunk), join(&self.head), self.output)
    }
}

impl FromStr for Topology {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 4 {
            return Err(format!("topology `{s}`: expected in:trunk:head:out"));
        }
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("topology `{s}`: bad width `{t}`"));
        let list = |t: &str| -> std::result::Result<Vec<usize>, String> {
            if t.trim().is_empty() {
                Ok(Vec::new())
            } else {
                t.split(',').map(num).collect()
            }
        };
        let topo = Topology {
            input: num(parts[0])?,
            trunk: list(parts[1])?,
            head: list(parts[2])?,
            output: num(parts[3])?,
        };
        topo.validate().map_err(|e| e.to_string())?;
        Ok(topo)
    }
}

/// A dense layer kind usable inside [`Network`].
pub trait Layer<T: Real>: Parameterized<T> + Clone + Send + Sync {
    const BAYESIAN: bool;

    fn build<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, cfg: &MnfConfig, rng: &mut R) -> Self;

    fn dims(&self) -> (usize, usize);

    /// Output and, when `with_kl`, the layer's KL penalty.
    fn apply<'g>(
        &self,
        g: &'g Graph<T>,
        vars: &[Var<'g, T>],
        x: Var<'g, T>,
        noise: Option<&LayerNoise<T>>,
        with_kl: bool,
    ) -> Result<(Var<'g, T>, Option<Var<'g, T>>)>;

    fn draw_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<LayerNoise<T>>;
}

impl<T: Real> Layer<T> for MnfDenseLayer<T> {
    const BAYESIAN: bool = true;

    fn build<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, cfg: &MnfConfig, rng: &mut R) -> Self {
        MnfDenseLayer::new(in_dim, out_dim, cfg, rng)
    }

    fn dims(&self) -> (usize, usize) {
        (self.in_dim(), self.out_dim())
    }

    fn apply<'g>(
        &self,
        g: &'g Graph<T>,
        vars: &[Var<'g, T>],
        x: Var<'g, T>,
        noise: Option<&LayerNoise<T>>,
        with_kl: bool,
    ) -> Result<(Var<'g, T>, Option<Var<'g, T>>)> {
        let noise = noise.ok_or_else(|| TensorError::Contract("MNF layer needs noise".into()))?;
        let (out, ctx) = self.forward_bound(g, vars, x, noise)?;
        let kl = if with_kl { Some(self.kl_term(&ctx)?) } else { None };
        Ok((out, kl))
    }

    fn draw_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<LayerNoise<T>> {
        Some(MnfDenseLayer::draw_noise(self, batch, rng))
    }
}

impl<T: Real> Layer<T> for DenseLayer<T> {
    const BAYESIAN: bool = false;

    fn build<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, _cfg: &MnfConfig, rng: &mut R) -> Self {
        DenseLayer::new(in_dim, out_dim, rng)
    }

    fn dims(&self) -> (usize, usize) {
        (self.in_dim(), self.out_dim())
    }

    fn apply<'g>(
        &self,
        _g: &'g Graph<T>,
        vars: &[Var<'g, T>],
        x: Var<'g, T>,
        _noise: Option<&LayerNoise<T>>,
        _with_kl: bool,
    ) -> Result<(Var<'g, T>, Option<Var<'g, T>>)> {
        Ok((self.forward_bound(vars, x)?, None))
    }

    fn draw_noise<R: Rng + ?Sized>(&self, _batch: usize, _rng: &mut R) -> Option<LayerNoise<T>> {
        None
    }
}

/// Dense layer followed by batch norm and SELU.
#[derive(Debug, Clone)]
pub struct Block<T, L> {
    pub layer: L,
    pub norm: BatchNorm<T>,
}

#[derive(Debug, Clone)]
pub struct Head<T, L> {
    pub blocks: Vec<Block<T, L>>,
    pub out: L,
}

impl<T: Real, L: Layer<T>> Head<T, L> {
    fn new<R: Rng + ?Sized>(input: usize, widths: &[usize], output: usize, cfg: &MnfConfig, rng: &mut R) -> Self {
        let mut prev = input;
        let blocks = widths
            .iter()
            .map(|&w| {
                let b = Block {
                    layer: L::build(prev, w, cfg, rng),
                    norm: BatchNorm::new(w),
                };
                prev = w;
                b
            })
            .collect();
        Self {
            blocks,
            out: L::build(prev, output, cfg, rng),
        }
    }
}

/// Options of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    /// Batch statistics (training) or running statistics (evaluation).
    pub train: bool,
    pub with_kl: bool,
}

impl ForwardMode {
    pub const TRAIN: ForwardMode = ForwardMode {
        train: true,
        with_kl: true,
    };
    pub const EVAL: ForwardMode = ForwardMode {
        train: false,
        with_kl: false,
    };
}

/// Result of [`Network::forward_bound`].
#[derive(Debug)]
pub struct NetOutput<'g, T> {
    pub v_hat: Var<'g, T>,
    /// Clamped log-variance, when the network has a variance head.
    pub s: Option<Var<'g, T>>,
    pub s_raw: Option<Var<'g, T>>,
    /// Summed KL penalty of every Bayesian layer.
    pub kl: Option<Var<'g, T>>,
    /// Batch statistics per batch-norm, in [`Network::norms_mut`] order.
    pub bn_stats: Vec<BatchStats<T>>,
}

/// Shared-trunk regression network over a dense layer kind `L`.
#[derive(Debug, Clone)]
pub struct Network<T, L> {
    topology: Topology,
    mnf: MnfConfig,
    pub clamp: VarianceClamp,
    pub trunk: Vec<Block<T, L>>,
    pub value_head: Head<T, L>,
    pub logvar_head: Option<Head<T, L>>,
}

/// The Bayesian network with MNF layers throughout.
pub type EluqNetwork<T> = Network<T, MnfDenseLayer<T>>;
/// Deterministic counterpart with ordinary dense layers.
pub type DnnBaseline<T> = Network<T, DenseLayer<T>>;

impl<T: Real, L: Layer<T>> Network<T, L> {
    pub fn new<R: Rng + ?Sized>(topology: Topology, mnf: MnfConfig, logvar_head: bool, rng: &mut R) -> Result<Self> {
        topology.validate()?;
        let mut prev = topology.input;
        let trunk = topology
            .trunk
            .iter()
            .map(|&w| {
                let b = Block {
                    layer: L::build(prev, w, &mnf, rng),
                    norm: BatchNorm::new(w),
                };
                prev = w;
                b
            })
            .collect();
        let value_head = Head::new(prev, &topology.head, topology.output, &mnf, rng);
        let logvar_head = logvar_head.then(|| Head::new(prev, &topology.head, topology.output, &mnf, rng));
        Ok(Self {
            topology,
            mnf,
            clamp: VarianceClamp::default(),
            trunk,
            value_head,
            logvar_head,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn mnf_config(&self) -> &MnfConfig {
        &self.mnf
    }

    pub fn has_logvar_head(&self) -> bool {
        self.logvar_head.is_some()
    }

    fn heads(&self) -> impl Iterator<Item = &Head<T, L>> {
        std::iter::once(&self.value_head).chain(self.logvar_head.as_ref())
    }

    /// Every dense layer in forward order: trunk, value head, log-variance head.
    pub fn layers(&self) -> Vec<&L> {
        let mut out: Vec<&L> = self.trunk.iter().map(|b| &b.layer).collect();
        for h in self.heads() {
            out.extend(h.blocks.iter().map(|b| &b.layer));
            out.push(&h.out);
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut L> {
        let mut out: Vec<&mut L> = self.trunk.iter_mut().map(|b| &mut b.layer).collect();
        for h in std::iter::once(&mut self.value_head).chain(self.logvar_head.as_mut()) {
            out.extend(h.blocks.iter_mut().map(|b| &mut b.layer));
            out.push(&mut h.out);
        }
        out
    }

    pub fn norms(&self) -> Vec<&BatchNorm<T>> {
        let mut out: Vec<&BatchNorm<T>> = self.trunk.iter().map(|b| &b.norm).collect();
        for h in self.heads() {
            out.extend(h.blocks.iter().map(|b| &b.norm));
        }
        out
    }

    pub fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out: Vec<&mut BatchNorm<T>> = self.trunk.iter_mut().map(|b| &mut b.norm).collect();
        for h in std::iter::once(&mut self.value_head).chain(self.logvar_head.as_mut()) {
            out.extend(h.blocks.iter_mut().map(|b| &mut b.norm));
        }
        out
    }

    /// One noise draw per layer in [`Network::layers`] order (empty for
    /// deterministic layers).
    pub fn draw_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<LayerNoise<T>> {
        self.layers().iter().filter_map(|l| l.draw_noise(batch, rng)).collect()
    }

    /// Zero noise: every Bayesian layer at its mean.
    pub fn zero_noise(&self, batch: usize) -> Vec<LayerNoise<T>> {
        if !L::BAYESIAN {
            return Vec::new();
        }
        self.layers()
            .iter()
            .map(|l| {
                let (i, o) = l.dims();
                LayerNoise::zeros(i, o, batch)
            })
            .collect()
    }

    /// Applies the batch statistics of a training pass to the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) {
        for (bn, st) in self.norms_mut().into_iter().zip(stats) {
            bn.update_running(st);
        }
    }

    /// Binds every parameter, in [`Parameterized::named_params`] order.
    pub fn bind<'g>(&self, g: &'g Graph<T>, frozen: bool) -> Vec<Var<'g, T>> {
        bind(g, &self.params(), frozen)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != self.topology.input {
            return Err(TensorError::ShapeMismatch {
                op: "network_input",
                lhs: x.shape().to_vec(),
                rhs: vec![0, self.topology.input],
            });
        }
        let clip = T::lit(INPUT_CLIP);
        if let Some(i) = x.data().iter().position(|v| !(v.abs() <= clip)) {
            return Err(TensorError::Contract(format!(
                "unscaled input: element {i} = {} exceeds {INPUT_CLIP}",
                x.data()[i]
            )));
        }
        Ok(())
    }

    /// One stochastic pass with parameters bound by [`Network::bind`].
    pub fn forward_bound<'g>(
        &self,
        g: &'g Graph<T>,
        vars: &[Var<'g, T>],
        x: &Tensor<T>,
        noise: &[LayerNoise<T>],
        mode: ForwardMode,
    ) -> Result<NetOutput<'g, T>> {
        self.check_input(x)?;
        let n_layers = self.layers().len();
        if L::BAYESIAN && noise.len() != n_layers {
            return Err(TensorError::Contract(format!(
                "expected noise for {n_layers} layers, got {}",
                noise.len()
            )));
        }
        let mut cursor = 0usize;
        let mut take = |n: usize| {
            let s = &vars[cursor..cursor + n];
            cursor += n;
            s
        };
        let mut layer_idx = 0usize;
        let mut next_noise = || {
            let n = noise.get(layer_idx);
            layer_idx += 1;
            n
        };
        let mut kl: Option<Var<'g, T>> = None;
        let mut stats = Vec::new();
        let mut add_kl = |k: Option<Var<'g, T>>| -> Result<()> {
            if let Some(k) = k {
                kl = Some(match kl {
                    Some(acc) => acc.add(k)?,
                    None => k,
                });
            }
            Ok(())
        };

        let block = |b: &Block<T, L>, h: Var<'g, T>, vars: &[Var<'g, T>], nz: Option<&LayerNoise<T>>| {
            let nl = b.layer.params().len();
            let (h, k) = b.layer.apply(g, &vars[..nl], h, nz, mode.with_kl)?;
            let (h, st) = b.norm.forward_bound(&vars[nl..], h, mode.train)?;
            Ok::<_, TensorError>((h.selu()?, k, st))
        };

        let mut h = g.constant(x.clone());
        for b in &self.trunk {
            let n = b.layer.params().len() + 2;
            let (out, k, st) = block(b, h, take(n), next_noise())?;
            h = out;
            add_kl(k)?;
            stats.extend(st);
        }
        let trunk_out = h;

        let mut run_head = |head: &Head<T, L>| -> Result<Var<'g, T>> {
            let mut h = trunk_out;
            for b in &head.blocks {
                let n = b.layer.params().len() + 2;
                let (out, k, st) = block(b, h, take(n), next_noise())?;
                h = out;
                add_kl(k)?;
                stats.extend(st);
            }
            let n = head.out.params().len();
            let (out, k) = head.out.apply(g, take(n), h, next_noise(), mode.with_kl)?;
            add_kl(k)?;
            Ok(out)
        };
        let v_hat = run_head(&self.value_head)?;
        let s_raw = match &self.logvar_head {
            Some(head) => Some(run_head(head)?),
            None => None,
        };
        let s = match s_raw {
            Some(r) => Some(self.clamp.apply(r)?),
            None => None,
        };
        Ok(NetOutput {
            v_hat,
            s,
            s_raw,
            kl,
            bn_stats: stats,
        })
    }

    /// Convenience forward that binds the parameters as trainable leaves.
    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        x: &Tensor<T>,
        noise: &[LayerNoise<T>],
        mode: ForwardMode,
    ) -> Result<(Vec<Var<'g, T>>, NetOutput<'g, T>)> {
        let vars = self.bind(g, false);
        let out = self.forward_bound(g, &vars, x, noise, mode)?;
        Ok((vars, out))
    }

    /// Value-only pass with frozen parameters.
    pub fn predict(&self, x: &Tensor<T>, noise: &[LayerNoise<T>], train_bn: bool) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let g = Graph::new();
        let vars = self.bind(&g, true);
        let out = self.forward_bound(
            &g,
            &vars,
            x,
            noise,
            ForwardMode {
                train: train_bn,
                with_kl: false,
            },
        )?;
        Ok((out.v_hat.tensor(), out.s.map(|s| s.tensor())))
    }
}

impl<T: Real, L: Layer<T>> Parameterized<T> for Network<T, L> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        fn push_block<'a, T: Real, L: Layer<T>>(
            prefix: String,
            b: &'a Block<T, L>,
            out: &mut Vec<(String, &'a Param<T>)>,
        ) {
            for (n, p) in b.layer.named_params() {
                out.push((format!("{prefix}.dense.{n}"), p));
            }
            for (n, p) in b.norm.named_params() {
                out.push((format!("{prefix}.bn.{n}"), p));
            }
        }
        let mut out = Vec::new();
        for (i, b) in self.trunk.iter().enumerate() {
            push_block(format!("trunk{i}"), b, &mut out);
        }
        for (name, head) in [("value", Some(&self.value_head)), ("logvar", self.logvar_head.as_ref())] {
            let Some(head) = head else { continue };
            for (i, b) in head.blocks.iter().enumerate() {
                push_block(format!("{name}{i}"), b, &mut out);
            }
            for (n, p) in head.out.named_params() {
                out.push((format!("{name}_out.{n}"), p));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for b in &mut self.trunk {
            out.extend(b.layer.params_mut());
            out.extend(b.norm.params_mut());
        }
        for head in std::iter::once(&mut self.value_head).chain(self.logvar_head.as_mut()) {
            for b in &mut head.blocks {
                out.extend(b.layer.params_mut());
                out.extend(b.norm.params_mut());
            }
            out.extend(head.out.params_mut());
        }
        out
    }
}

impl<T: Real> EluqNetwork<T> {
    pub fn eluq<R: Rng + ?Sized>(topology: Topology, mnf: MnfConfig, rng: &mut R) -> Result<Self> {
        Self::new(topology, mnf, true, rng)
    }

    /// Switches every layer to (or from) the mean-field limit.
    pub fn set_degenerate(&mut self, on: bool) {
        self.mnf.degenerate = on;
        for l in self.layers_mut() {
            l.set_degenerate(on);
        }
    }

    pub fn set_log_vars(&mut self, value: f64) {
        for l in self.layers_mut() {
            l.set_log_vars(value);
        }
    }

    /// Deterministic network sharing this one's posterior means, batch-norm
    /// parameters and running statistics.
    pub fn mean_network(&self) -> DnnBaseline<T> {
        let map_head = |h: &Head<T, MnfDenseLayer<T>>| Head {
            blocks: h
                .blocks
                .iter()
                .map(|b| Block {
                    layer: mean_layer(&b.layer),
                    norm: b.norm.clone(),
                })
                .collect(),
            out: mean_layer(&h.out),
        };
        Network {
            topology: self.topology.clone(),
            mnf: self.mnf,
            clamp: self.clamp,
            trunk: self
                .trunk
                .iter()
                .map(|b| Block {
                    layer: mean_layer(&b.layer),
                    norm: b.norm.clone(),
                })
                .collect(),
            value_head: map_head(&self.value_head),
            logvar_head: self.logvar_head.as_ref().map(map_head),
        }
    }
}

fn mean_layer<T: Real>(l: &MnfDenseLayer<T>) -> DenseLayer<T> {
    DenseLayer {
        weight: l.mean_w.clone(),
        bias: l.mean_b.clone(),
    }
}

impl<T: Real> DnnBaseline<T> {
    pub fn dnn<R: Rng + ?Sized>(topology: Topology, logvar_head: bool, rng: &mut R) -> Result<Self> {
        Self::new(topology, MnfConfig::default(), logvar_head, rng)
    }
}
