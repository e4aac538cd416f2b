//! Synthetic neutral-current DIS events: truth sampling, exact final states,
//! detector smearing and a toy initial-state-radiation model.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{fmt_f64, ConfigError, KeyValues};
use crate::kinematics::{
    compute_features, wrap_angle, BeamConfig, ElectronState, FeatureVector, HfsState,
    KinematicTriplet, KinematicsError, Method, PhotonRecord,
};
use crate::rng::{stream, StreamRng};

pub const RADIATIVE_BIT: u8 = 1 << 3;
/// Smearing gave up after [`MAX_SMEAR_ATTEMPTS`]; the event carries unsmeared states.
pub const UNUSABLE_BIT: u8 = 1 << 4;

pub const MAX_TRUTH_ATTEMPTS: usize = 1_000_000;
pub const MAX_SMEAR_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("generator configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Parse(#[from] ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingLaw {
    /// Log-uniform in `x` and `Q²`, rejected on the `y` window.
    LogXQ2,
    /// Log-uniform in `x` and `y`, rejected on the `Q²` window.
    LogXY,
}

impl SamplingLaw {
    pub fn tag(&self) -> &'static str {
        match self {
            SamplingLaw::LogXQ2 => "log_x_q2",
            SamplingLaw::LogXY => "log_x_y",
        }
    }
}

impl std::str::FromStr for SamplingLaw {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "log_x_q2" => Ok(SamplingLaw::LogXQ2),
            "log_x_y" => Ok(SamplingLaw::LogXY),
            _ => Err(format!("unknown sampling law `{s}`")),
        }
    }
}

/// `σ/E = a/√E ⊕ b` plus a Gaussian angular σ (rad) for θ and φ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolution {
    pub stochastic: f64,
    pub constant: f64,
    pub angle: f64,
}

impl Resolution {
    pub const NONE: Resolution = Resolution {
        stochastic: 0.0,
        constant: 0.0,
        angle: 0.0,
    };

    pub fn relative(&self, energy: f64) -> f64 {
        (self.stochastic * self.stochastic / energy + self.constant * self.constant).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.stochastic == 0.0 && self.constant == 0.0 && self.angle == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmearingConfig {
    pub electron: Resolution,
    pub hfs: Resolution,
}

impl SmearingConfig {
    pub const NONE: SmearingConfig = SmearingConfig {
        electron: Resolution::NONE,
        hfs: Resolution::NONE,
    };
}

impl Default for SmearingConfig {
    fn default() -> Self {
        Self {
            electron: Resolution {
                stochastic: 0.10,
                constant: 0.01,
                angle: 0.002,
            },
            hfs: Resolution {
                stochastic: 0.50,
                constant: 0.05,
                angle: 0.020,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadiationConfig {
    pub probability: f64,
    /// Photon energy is drawn from `dN/dE ∝ 1/E` on `[frac_min, frac_max]·E0`.
    pub frac_min: f64,
    pub frac_max: f64,
    /// Share of radiative events whose photon overlaps the electron cluster.
    pub collinear_fraction: f64,
    /// Mean of the extra-cluster Poisson law.
    pub cluster_mean: f64,
    /// Photon pseudorapidity window (electron-beam side).
    pub eta_min: f64,
    pub eta_max: f64,
}

impl Default for RadiationConfig {
    fn default() -> Self {
        Self {
            probability: 0.1,
            frac_min: 0.01,
            frac_max: 0.5,
            collinear_fraction: 0.3,
            cluster_mean: 0.7,
            eta_min: -7.0,
            eta_max: -4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub beam: BeamConfig<f64>,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub q2_range: (f64, f64),
    pub law: SamplingLaw,
    pub smearing: SmearingConfig,
    pub radiation: RadiationConfig,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            beam: BeamConfig::hera(),
            x_range: (2e-4, 1.0),
            y_range: (0.01, 0.8),
            q2_range: (200.0, 5e4),
            law: SamplingLaw::LogXQ2,
            smearing: SmearingConfig::default(),
            radiation: RadiationConfig::default(),
            seed: 1,
        }
    }
}

/// Config keys in header order.
pub const GENERATOR_KEYS: [&str; 23] = [
    "beam.e0",
    "beam.ep",
    "gen.x_min",
    "gen.x_max",
    "gen.y_min",
    "gen.y_max",
    "gen.q2_min",
    "gen.q2_max",
    "gen.law",
    "smear.e_stoch",
    "smear.e_const",
    "smear.e_angle",
    "smear.h_stoch",
    "smear.h_const",
    "smear.h_angle",
    "rad.p_isr",
    "rad.frac_min",
    "rad.frac_max",
    "rad.collinear_frac",
    "rad.cluster_mean",
    "rad.eta_min",
    "rad.eta_max",
    "seed",
];

impl GeneratorConfig {
    pub fn noiseless(seed: u64) -> Self {
        Self {
            smearing: SmearingConfig::NONE,
            radiation: RadiationConfig {
                probability: 0.0,
                ..RadiationConfig::default()
            },
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |m: String| Err(GeneratorError::Config(m));
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        let (q0, q1) = self.q2_range;
        if !(x0 > 0.0 && x0 <= x1 && x1 <= 1.0) {
            return bad(format!("x range ({x0}, {x1}) must satisfy 0 < lo <= hi <= 1"));
        }
        if !(y0 > 0.0 && y0 <= y1 && y1 < 1.0) {
            return bad(format!("y range ({y0}, {y1}) must satisfy 0 < lo <= hi < 1"));
        }
        if !(q0 > 0.0 && q0 <= q1 && q1.is_finite()) {
            return bad(format!("Q2 range ({q0}, {q1}) is empty"));
        }
        let s = &self.smearing;
        for (name, v) in [
            ("electron stochastic", s.electron.stochastic),
            ("electron constant", s.electron.constant),
            ("electron angle", s.electron.angle),
            ("hfs stochastic", s.hfs.stochastic),
            ("hfs constant", s.hfs.constant),
            ("hfs angle", s.hfs.angle),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} resolution {v} must be non-negative"));
            }
        }
        let r = &self.radiation;
        for (name, p) in [
            ("ISR probability", r.probability),
            ("collinear fraction", r.collinear_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(r.frac_min > 0.0 && r.frac_min <= r.frac_max && r.frac_max < 1.0) {
            return bad(format!(
                "photon energy fractions ({}, {}) must satisfy 0 < lo <= hi < 1",
                r.frac_min, r.frac_max
            ));
        }
        if !(r.cluster_mean >= 0.0 && r.cluster_mean.is_finite()) {
            return bad(format!("cluster mean {} must be non-negative", r.cluster_mean));
        }
        if !(r.eta_min <= r.eta_max) {
            return bad("photon eta window is empty".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let f = |v: f64| fmt_f64(v);
        kv.set("beam.e0", f(self.beam.electron_energy()));
        kv.set("beam.ep", f(self.beam.proton_energy()));
        kv.set("gen.x_min", f(self.x_range.0));
        kv.set("gen.x_max", f(self.x_range.1));
        kv.set("gen.y_min", f(self.y_range.0));
        kv.set("gen.y_max", f(self.y_range.1));
        kv.set("gen.q2_min", f(self.q2_range.0));
        kv.set("gen.q2_max", f(self.q2_range.1));
        kv.set("gen.law", self.law.tag());
        let s = &self.smearing;
        kv.set("smear.e_stoch", f(s.electron.stochastic));
        kv.set("smear.e_const", f(s.electron.constant));
        kv.set("smear.e_angle", f(s.electron.angle));
        kv.set("smear.h_stoch", f(s.hfs.stochastic));
        kv.set("smear.h_const", f(s.hfs.constant));
        kv.set("smear.h_angle", f(s.hfs.angle));
        let r = &self.radiation;
        kv.set("rad.p_isr", f(r.probability));
        kv.set("rad.frac_min", f(r.frac_min));
        kv.set("rad.frac_max", f(r.frac_max));
        kv.set("rad.collinear_frac", f(r.collinear_fraction));
        kv.set("rad.cluster_mean", f(r.cluster_mean));
        kv.set("rad.eta_min", f(r.eta_min));
        kv.set("rad.eta_max", f(r.eta_max));
        kv.set("seed", self.seed);
        kv
    }

    /// Applies the generator keys present in `kv` on top of `self`. Keys
    /// outside [`GENERATOR_KEYS`] are ignored.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<(), GeneratorError> {
        let mut e0 = self.beam.electron_energy();
        let mut ep = self.beam.proton_energy();
        kv.read_into("beam.e0", &mut e0)?;
        kv.read_into("beam.ep", &mut ep)?;
        self.beam = BeamConfig::new(e0, ep)?;
        kv.read_into("gen.x_min", &mut self.x_range.0)?;
        kv.read_into("gen.x_max", &mut self.x_range.1)?;
        kv.read_into("gen.y_min", &mut self.y_range.0)?;
        kv.read_into("gen.y_max", &mut self.y_range.1)?;
        kv.read_into("gen.q2_min", &mut self.q2_range.0)?;
        kv.read_into("gen.q2_max", &mut self.q2_range.1)?;
        kv.read_into("gen.law", &mut self.law)?;
        let s = &mut self.smearing;
        kv.read_into("smear.e_stoch", &mut s.electron.stochastic)?;
        kv.read_into("smear.e_const", &mut s.electron.constant)?;
        kv.read_into("smear.e_angle", &mut s.electron.angle)?;
        kv.read_into("smear.h_stoch", &mut s.hfs.stochastic)?;
        kv.read_into("smear.h_const", &mut s.hfs.constant)?;
        kv.read_into("smear.h_angle", &mut s.hfs.angle)?;
        let r = &mut self.radiation;
        kv.read_into("rad.p_isr", &mut r.probability)?;
        kv.read_into("rad.frac_min", &mut r.frac_min)?;
        kv.read_into("rad.frac_max", &mut r.frac_max)?;
        kv.read_into("rad.collinear_frac", &mut r.collinear_fraction)?;
        kv.read_into("rad.cluster_mean", &mut r.cluster_mean)?;
        kv.read_into("rad.eta_min", &mut r.eta_min)?;
        kv.read_into("rad.eta_max", &mut r.eta_max)?;
        kv.read_into("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self, GeneratorError> {
        let mut cfg = Self::default();
        cfg.apply_kv(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratedEvent {
    pub truth: KinematicTriplet<f64>,
    pub features: FeatureVector<f64>,
    /// [`Method::flag_bit`] per failed classical method, plus
    /// [`RADIATIVE_BIT`] and [`UNUSABLE_BIT`].
    pub flags: u8,
}

impl GeneratedEvent {
    pub fn radiative(&self) -> bool {
        self.flags & RADIATIVE_BIT != 0
    }

    pub fn usable(&self) -> bool {
        self.flags & UNUSABLE_BIT == 0
    }

    pub fn method_failed(&self, m: Method) -> bool {
        self.flags & m.flag_bit() != 0
    }
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.gen();
    (lo.ln() + u * (hi.ln() - lo.ln())).exp().clamp(lo, hi)
}

/// Draws `(x, Q², y)` from the configured law with `Q² = s x y`.
pub fn sample_truth<R: Rng + ?Sized>(
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> Result<KinematicTriplet<f64>, GeneratorError> {
    let s = cfg.beam.s();
    let (y0, y1) = cfg.y_range;
    let (q0, q1) = cfg.q2_range;
    for _ in 0..MAX_TRUTH_ATTEMPTS {
        let x = log_uniform(rng, cfg.x_range);
        if x >= 1.0 {
            continue;
        }
        let y = match cfg.law {
            SamplingLaw::LogXQ2 => log_uniform(rng, cfg.q2_range) / (s * x),
            SamplingLaw::LogXY => log_uniform(rng, cfg.y_range),
        };
        if !(y >= y0 && y <= y1) {
            continue;
        }
        let q2 = s * x * y;
        if q2 >= q0 && q2 <= q1 {
            return Ok(KinematicTriplet { x, q2, y });
        }
    }
    Err(GeneratorError::Config(format!(
        "no accepted phase space after {MAX_TRUTH_ATTEMPTS} draws"
    )))
}

/// Exact massless final state of `e p -> e X` for the given truth.
pub fn build_states(
    truth: &KinematicTriplet<f64>,
    beam: &BeamConfig<f64>,
    phi_e: f64,
) -> Result<(ElectronState<f64>, HfsState<f64>), GeneratorError> {
    let e0 = beam.electron_energy();
    let ep = beam.proton_energy();
    let y = truth.y;
    if !(y > 0.0 && y < 1.0) {
        return Err(KinematicsError::Domain {
            what: "y",
            value: y,
        }
        .into());
    }
    if !(truth.q2 > 0.0) {
        return Err(KinematicsError::Domain {
            what: "Q2",
            value: truth.q2,
        }
        .into());
    }
    let sigma_e = 2.0 * e0 * (1.0 - y);
    let pt = (truth.q2 * (1.0 - y)).sqrt();
    let pz = (pt * pt - sigma_e * sigma_e) / (2.0 * sigma_e);
    let energy = (pt * pt + sigma_e * sigma_e) / (2.0 * sigma_e);
    let phi = wrap_angle(phi_e);
    let electron = ElectronState {
        pt,
        pz,
        energy,
        phi,
    };
    let hfs = HfsState {
        pt,
        pz: (ep - e0) - pz,
        energy: e0 + ep - energy,
        phi: wrap_angle(phi + PI),
    };
    Ok((electron, hfs))
}

/// Massless object `(E, θ, φ)` with energy and angles smeared. `None` when
/// no valid draw was found.
fn smear_object<R: Rng + ?Sized>(
    energy: f64,
    theta: f64,
    phi: f64,
    res: &Resolution,
    rng: &mut R,
) -> Option<(f64, f64, f64)> {
    let rel = res.relative(energy);
    for _ in 0..MAX_SMEAR_ATTEMPTS {
        let n_e: f64 = StandardNormal.sample(rng);
        let n_t: f64 = StandardNormal.sample(rng);
        let n_p: f64 = StandardNormal.sample(rng);
        let e = energy * (1.0 + rel * n_e);
        let t = theta + res.angle * n_t;
        if e > 0.0 && t > 0.0 && t < PI {
            return Some((e, t, wrap_angle(phi + res.angle * n_p)));
        }
    }
    None
}

/// Smears both objects. The electron is a single massless cluster; the HFS is
/// measured as its massless current jet, the proton remnant escaping down the
/// beam pipe. Objects whose resolution is entirely zero are returned untouched.
///
/// `Err` carries the input states when a smeared energy stayed non-positive
/// after [`MAX_SMEAR_ATTEMPTS`] draws.
pub fn apply_smearing<R: Rng + ?Sized>(
    states: (ElectronState<f64>, HfsState<f64>),
    cfg: &SmearingConfig,
    rng: &mut R,
) -> Result<(ElectronState<f64>, HfsState<f64>), (ElectronState<f64>, HfsState<f64>)> {
    let (mut e, mut h) = states;
    if !cfg.electron.is_zero() {
        let theta = e.pt.atan2(e.pz);
        let (en, t, phi) = smear_object(e.energy, theta, e.phi, &cfg.electron, rng).ok_or(states)?;
        e = ElectronState {
            pt: en * t.sin(),
            pz: en * t.cos(),
            energy: en,
            phi,
        };
    }
    if !cfg.hfs.is_zero() {
        let sigma = h.sigma();
        let jet_e = (h.pt * h.pt + sigma * sigma) / (2.0 * sigma);
        let jet_pz = (h.pt * h.pt - sigma * sigma) / (2.0 * sigma);
        let theta = h.pt.atan2(jet_pz);
        let (en, t, phi) = smear_object(jet_e, theta, h.phi, &cfg.hfs, rng).ok_or(states)?;
        h = HfsState {
            pt: en * t.sin(),
            pz: en * t.cos(),
            energy: en,
            phi,
        };
    }
    Ok((e, h))
}

/// Photon energy from `1/E` on `[frac_min, frac_max]·E0`.
pub fn sample_photon_energy<R: Rng + ?Sized>(
    cfg: &RadiationConfig,
    e0: f64,
    rng: &mut R,
) -> f64 {
    loop {
        let e = e0 * log_uniform(rng, (cfg.frac_min, cfg.frac_max));
        if e < e0 {
            return e;
        }
    }
}

/// Possibly radiates an initial-state photon. On radiation the states are
/// rebuilt at the reduced electron energy `E0 - E_γ` keeping `(Q², y)`, and
/// the photon record carries the calorimeter proxies.
pub fn apply_radiation<R: Rng + ?Sized>(
    truth: &KinematicTriplet<f64>,
    states: (ElectronState<f64>, HfsState<f64>),
    beam: &BeamConfig<f64>,
    cfg: &RadiationConfig,
    rng: &mut R,
) -> Result<(ElectronState<f64>, HfsState<f64>, Option<PhotonRecord<f64>>), GeneratorError> {
    let u: f64 = rng.gen();
    if !(u < cfg.probability) {
        return Ok((states.0, states.1, None));
    }
    let e0 = beam.electron_energy();
    let e_gamma = sample_photon_energy(cfg, e0, rng);
    let reduced = beam.with_electron_energy(e0 - e_gamma)?;
    let (e, h) = build_states(truth, &reduced, states.0.phi)?;

    let eta = cfg.eta_min + rng.gen::<f64>() * (cfg.eta_max - cfg.eta_min);
    let dphi = PI * (2.0 * rng.gen::<f64>() - 1.0);
    let collinear = rng.gen::<f64>() < cfg.collinear_fraction;
    let cone = if collinear { 1.0 + e_gamma / e.energy } else { 1.0 };
    let extra = if cfg.cluster_mean > 0.0 {
        Poisson::new(cfg.cluster_mean)
            .expect("positive mean")
            .sample(rng)
    } else {
        0.0
    };
    let photon = PhotonRecord {
        energy: e_gamma,
        eta,
        phi: wrap_angle(e.phi + dphi),
        ecal_cone_ratio: cone,
        ecal_cluster_count: 1.0 + extra,
    };
    Ok((e, h, Some(photon)))
}

/// Event `index` of the stream defined by `cfg.seed`. Independent of how
/// other events are scheduled.
pub fn generate_event(cfg: &GeneratorConfig, index: u64) -> Result<GeneratedEvent, GeneratorError> {
    let mut rng: StreamRng = stream(cfg.seed, "generator", index);
    let truth = sample_truth(cfg, &mut rng)?;
    let phi_e = PI * (2.0 * rng.gen::<f64>() - 1.0);
    let states = build_states(&truth, &cfg.beam, phi_e)?;
    let (e, h, photon) = apply_radiation(&truth, states, &cfg.beam, &cfg.radiation, &mut rng)?;
    let mut flags = if photon.is_some() { RADIATIVE_BIT } else { 0 };
    let (e, h) = match apply_smearing((e, h), &cfg.smearing, &mut rng) {
        Ok(s) => s,
        Err(s) => {
            flags |= UNUSABLE_BIT;
            s
        }
    };
    let features = compute_features(&e, &h, photon.as_ref(), &cfg.beam)?;
    for m in Method::ALL {
        if m.reconstruct(&features, &cfg.beam).is_err() {
            flags |= m.flag_bit();
        }
    }
    Ok(GeneratedEvent {
        truth,
        features,
        flags,
    })
}

/// Events `start..start + n` in index order, generated in parallel.
pub fn generate_range(
    cfg: &GeneratorConfig,
    start: u64,
    n: u64,
) -> Result<Vec<GeneratedEvent>, GeneratorError> {
    (start..start + n)
        .into_par_iter()
        .map(|i| generate_event(cfg, i))
        .collect()
}

pub fn generate(cfg: &GeneratorConfig, n_events: u64) -> Result<Vec<GeneratedEvent>, GeneratorError> {
    cfg.validate()?;
    if n_events == 0 {
        return Err(GeneratorError::Config("n_events must be positive".into()));
    }
    generate_range(cfg, 0, n_events)
}
