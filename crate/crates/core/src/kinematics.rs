//! DIS kinematic algebra, the fifteen detector-level features and the classical
//! electron, double-angle and Jacquet-Blondel reconstructions.
//!
//! Coordinates: `+z` along the proton beam, the incoming electron at
//! `p_z = -E0`. Beams and the hadronic final state are treated as massless.

use std::f64::consts::PI;

use thiserror::Error;

use crate::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("{what} = {value} is outside its domain")]
    Domain { what: &'static str, value: f64 },
}

/// Beam energies and the derived squared centre-of-mass energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig<T> {
    electron_energy: T,
    proton_energy: T,
    s: T,
}

impl<T: Real> BeamConfig<T> {
    pub fn new(electron_energy: T, proton_energy: T) -> Result<Self, KinematicsError> {
        for (what, v) in [("E0", electron_energy), ("Ep", proton_energy)] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(KinematicsError::Domain {
                    what,
                    value: v.as_f64(),
                });
            }
        }
        Ok(Self {
            electron_energy,
            proton_energy,
            s: T::lit(4.0) * electron_energy * proton_energy,
        })
    }

    /// HERA-II running conditions.
    pub fn hera() -> Self {
        Self::new(T::lit(27.6), T::lit(920.0)).expect("positive beam energies")
    }

    pub fn electron_energy(&self) -> T {
        self.electron_energy
    }

    pub fn proton_energy(&self) -> T {
        self.proton_energy
    }

    /// Mandelstam `s = 4 E0 Ep`.
    pub fn s(&self) -> T {
        self.s
    }

    /// Same proton beam, different electron energy (initial-state radiation).
    pub fn with_electron_energy(&self, electron_energy: T) -> Result<Self, KinematicsError> {
        Self::new(electron_energy, self.proton_energy)
    }
}

/// `(x, Q², y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicTriplet<T> {
    pub x: T,
    pub q2: T,
    pub y: T,
}

impl<T: Real> KinematicTriplet<T> {
    pub fn as_array(&self) -> [T; 3] {
        [self.x, self.q2, self.y]
    }

    pub fn from_array(v: [T; 3]) -> Self {
        Self {
            x: v[0],
            q2: v[1],
            y: v[2],
        }
    }

    /// `|Q² - s x y| / Q²`.
    pub fn constraint_residual(&self, beam: &BeamConfig<T>) -> T {
        ((self.q2 - beam.s() * self.x * self.y) / self.q2).abs()
    }
}

/// Canonical column names of the feature vector, in dataset order.
pub const FEATURE_NAMES: [&str; 15] = [
    "pT_bal",
    "pz_bal",
    "gamma_energy",
    "gamma_eta",
    "gamma_dphi",
    "ecal_cone_ratio",
    "ecal_cluster_count",
    "pT_e",
    "pz_e",
    "E_e",
    "T",
    "Pz_h",
    "E_h",
    "dphi_eh",
    "delta_sigma",
];

pub const NUM_FEATURES: usize = FEATURE_NAMES.len();

/// The fifteen detector-level inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector<T> {
    pub pt_bal: T,
    pub pz_bal: T,
    pub gamma_energy: T,
    pub gamma_eta: T,
    pub gamma_dphi: T,
    pub ecal_cone_ratio: T,
    pub ecal_cluster_count: T,
    pub pt_e: T,
    pub pz_e: T,
    pub e_e: T,
    pub t: T,
    pub pz_h: T,
    pub e_h: T,
    pub dphi_eh: T,
    pub delta_sigma: T,
}

impl<T: Real> FeatureVector<T> {
    pub fn to_array(&self) -> [T; NUM_FEATURES] {
        [
            self.pt_bal,
            self.pz_bal,
            self.gamma_energy,
            self.gamma_eta,
            self.gamma_dphi,
            self.ecal_cone_ratio,
            self.ecal_cluster_count,
            self.pt_e,
            self.pz_e,
            self.e_e,
            self.t,
            self.pz_h,
            self.e_h,
            self.dphi_eh,
            self.delta_sigma,
        ]
    }

    pub fn from_array(a: [T; NUM_FEATURES]) -> Self {
        Self {
            pt_bal: a[0],
            pz_bal: a[1],
            gamma_energy: a[2],
            gamma_eta: a[3],
            gamma_dphi: a[4],
            ecal_cone_ratio: a[5],
            ecal_cluster_count: a[6],
            pt_e: a[7],
            pz_e: a[8],
            e_e: a[9],
            t: a[10],
            pz_h: a[11],
            e_h: a[12],
            dphi_eh: a[13],
            delta_sigma: a[14],
        }
    }

    /// `Σ_e = E_e - p_{z,e}`.
    pub fn sigma_e(&self) -> T {
        self.e_e - self.pz_e
    }

    /// Hadronic `Σ = Σ_e - ΔΣ`.
    pub fn sigma_h(&self) -> T {
        self.sigma_e() - self.delta_sigma
    }
}

/// Scattered electron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElectronState<T> {
    pub pt: T,
    pub pz: T,
    pub energy: T,
    pub phi: T,
}

impl<T: Real> ElectronState<T> {
    pub fn sigma(&self) -> T {
        self.energy - self.pz
    }
}

/// Aggregate hadronic final state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HfsState<T> {
    /// Transverse momentum `T`.
    pub pt: T,
    pub pz: T,
    pub energy: T,
    pub phi: T,
}

impl<T: Real> HfsState<T> {
    pub fn sigma(&self) -> T {
        self.energy - self.pz
    }
}

/// Radiated photon as seen by the calorimeter, with the ECAL proxies it induces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotonRecord<T> {
    pub energy: T,
    pub eta: T,
    pub phi: T,
    pub ecal_cone_ratio: T,
    pub ecal_cluster_count: T,
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle<T: Real>(phi: T) -> T {
    let pi = T::lit(PI);
    let two_pi = pi + pi;
    let mut a = phi % two_pi;
    if a > pi {
        a -= two_pi;
    } else if a <= -pi {
        a += two_pi;
    }
    a
}

/// `Q² = s x y`.
pub fn q2_from_sxy<T: Real>(x: T, y: T, beam: &BeamConfig<T>) -> Result<T, KinematicsError> {
    let unit = |what, v: T| {
        if v > T::zero() && v < T::one() {
            Ok(())
        } else {
            Err(KinematicsError::Domain {
                what,
                value: v.as_f64(),
            })
        }
    };
    unit("x", x)?;
    unit("y", y)?;
    Ok(beam.s() * x * y)
}

/// Classical reconstruction methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Electron,
    DoubleAngle,
    JacquetBlondel,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Electron, Method::DoubleAngle, Method::JacquetBlondel];

    pub fn tag(&self) -> &'static str {
        match self {
            Method::Electron => "EL",
            Method::DoubleAngle => "DA",
            Method::JacquetBlondel => "JB",
        }
    }

    /// Bit in the per-event failure flags.
    pub fn flag_bit(&self) -> u8 {
        match self {
            Method::Electron => 1,
            Method::DoubleAngle => 1 << 1,
            Method::JacquetBlondel => 1 << 2,
        }
    }

    pub fn reconstruct<T: Real>(
        &self,
        f: &FeatureVector<T>,
        beam: &BeamConfig<T>,
    ) -> Result<KinematicTriplet<T>, ReconstructionFailure> {
        match self {
            Method::Electron => electron_method(f, beam),
            Method::DoubleAngle => da_method(f, beam),
            Method::JacquetBlondel => jb_method(f, beam),
        }
    }
}

/// A classical method could not produce a physical triplet for this event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{} reconstruction failed: {reason}", method.tag())]
pub struct ReconstructionFailure {
    pub method: Method,
    pub reason: &'static str,
}

fn finish<T: Real>(
    method: Method,
    q2: T,
    y: T,
    beam: &BeamConfig<T>,
) -> Result<KinematicTriplet<T>, ReconstructionFailure> {
    let fail = |reason| Err(ReconstructionFailure { method, reason });
    if !(y > T::zero() && y < T::one()) {
        return fail("y outside (0, 1)");
    }
    if !(q2 > T::zero()) || !q2.is_finite() {
        return fail("non-positive Q2");
    }
    let x = q2 / (beam.s() * y);
    if !(x > T::zero() && x < T::one()) {
        return fail("x outside (0, 1)");
    }
    Ok(KinematicTriplet { x, q2, y })
}

/// Electron method: `y = 1 - Σ_e / 2E0`, `Q² = p_{T,e}² / (1 - y)`.
pub fn electron_method<T: Real>(
    f: &FeatureVector<T>,
    beam: &BeamConfig<T>,
) -> Result<KinematicTriplet<T>, ReconstructionFailure> {
    let two_e0 = beam.electron_energy() + beam.electron_energy();
    let sigma_e = f.sigma_e();
    if !(f.pt_e > T::zero()) || !(sigma_e > T::zero()) {
        return Err(ReconstructionFailure {
            method: Method::Electron,
            reason: "degenerate electron",
        });
    }
    let y = T::one() - sigma_e / two_e0;
    let q2 = f.pt_e * f.pt_e / (T::one() - y);
    finish(Method::Electron, q2, y, beam)
}

/// Jacquet-Blondel: `y = Σ / 2E0`, `Q² = T² / (1 - y)`.
pub fn jb_method<T: Real>(
    f: &FeatureVector<T>,
    beam: &BeamConfig<T>,
) -> Result<KinematicTriplet<T>, ReconstructionFailure> {
    let two_e0 = beam.electron_energy() + beam.electron_energy();
    let sigma = f.sigma_h();
    if !(f.t > T::zero()) {
        return Err(ReconstructionFailure {
            method: Method::JacquetBlondel,
            reason: "zero hadronic transverse momentum",
        });
    }
    let y = sigma / two_e0;
    let q2 = f.t * f.t / (T::one() - y);
    finish(Method::JacquetBlondel, q2, y, beam)
}

/// Double angle, from `tan(θ/2) = Σ_e / p_{T,e}` and `tan(γ/2) = Σ / T`.
pub fn da_method<T: Real>(
    f: &FeatureVector<T>,
    beam: &BeamConfig<T>,
) -> Result<KinematicTriplet<T>, ReconstructionFailure> {
    let (sigma_e, sigma) = (f.sigma_e(), f.sigma_h());
    let positive = [f.pt_e, f.t, sigma_e, sigma].iter().all(|&v| v > T::zero());
    if !positive {
        return Err(ReconstructionFailure {
            method: Method::DoubleAngle,
            reason: "degenerate angles",
        });
    }
    let tan_theta = sigma_e / f.pt_e;
    let tan_gamma = sigma / f.t;
    let sum = tan_theta + tan_gamma;
    let y = tan_gamma / sum;
    let e0 = beam.electron_energy();
    let q2 = T::lit(4.0) * e0 * e0 / (tan_theta * sum);
    finish(Method::DoubleAngle, q2, y, beam)
}

/// Fills the fifteen features from the reconstructed objects.
pub fn compute_features<T: Real>(
    e: &ElectronState<T>,
    h: &HfsState<T>,
    photon: Option<&PhotonRecord<T>>,
    beam: &BeamConfig<T>,
) -> Result<FeatureVector<T>, KinematicsError> {
    if !(h.pt > T::zero()) {
        return Err(KinematicsError::Domain {
            what: "T",
            value: h.pt.as_f64(),
        });
    }
    let two_e0 = beam.electron_energy() + beam.electron_energy();
    let (sigma_e, sigma) = (e.sigma(), h.sigma());
    let (gamma_energy, gamma_eta, gamma_dphi, cone, clusters) = match photon {
        Some(p) => (
            p.energy,
            p.eta,
            wrap_angle(p.phi - e.phi),
            p.ecal_cone_ratio,
            p.ecal_cluster_count,
        ),
        None => (T::zero(), T::zero(), T::zero(), T::one(), T::one()),
    };
    Ok(FeatureVector {
        pt_bal: T::one() - e.pt / h.pt,
        pz_bal: T::one() - (sigma_e + sigma) / two_e0,
        gamma_energy,
        gamma_eta,
        gamma_dphi,
        ecal_cone_ratio: cone,
        ecal_cluster_count: clusters,
        pt_e: e.pt,
        pz_e: e.pz,
        e_e: e.energy,
        t: h.pt,
        pz_h: h.pz,
        e_h: h.energy,
        dphi_eh: wrap_angle(e.phi - h.phi),
        delta_sigma: sigma_e - sigma,
    })
}
