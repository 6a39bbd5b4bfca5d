//! Coefficient models: σ, V, a, the payoff f, and the standing assumptions.

mod coeff;
mod payoff;
mod profile;
mod scenario;
mod validate;

pub use coeff::{ClosedTransform, CoeffSpec, CoeffValues, DerivativeBackend, DiffusionCoefficient, OdeProfile, FD_STEP};
pub use payoff::{PayoffKind, PayoffSpec};
pub use profile::{QuadratureConfig, SigmaSpec, VolatilityProfile, MIN_PANELS, V_END_TOL};
pub use scenario::Scenario;
pub use validate::{validate, validate_with, AssumptionCheck, ValidationGrid, ValidationReport};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// How the transformed drift b is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DriftMode {
    /// b from the space transform of a.
    #[default]
    Derived,
    /// a ≡ 1 with linear mean reversion b(t,x) = -k·x.
    OrnsteinUhlenbeck { k: f64 },
}

/// One scenario's coefficients; immutable once built.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub profile: VolatilityProfile,
    pub coeff: DiffusionCoefficient,
    pub payoff: Option<PayoffSpec>,
    pub drift: DriftMode,
    /// Offset ℓ > 0 in the supermartingale potential.
    pub ell: f64,
}

impl ModelSpec {
    pub fn new(profile: VolatilityProfile, coeff: DiffusionCoefficient, payoff: Option<PayoffSpec>) -> Self {
        Self { profile, coeff, payoff, drift: DriftMode::Derived, ell: 1.0 }
    }

    /// a ≡ a0 with constant σ balanced so that V(1) = 1.
    pub fn constant(a0: f64, c: f64) -> Result<Self> {
        let profile = VolatilityProfile::build(SigmaSpec::balanced(c), c, QuadratureConfig::default())?;
        Ok(Self::new(profile, DiffusionCoefficient::constant(a0), Some(PayoffSpec::identity())))
    }

    /// a ≡ 1, σ² = 1/2, c = 1/2, f = id.
    pub fn back_pedersen() -> Self {
        Self::constant(1.0, 0.5).expect("balanced profile is valid")
    }

    pub fn with_drift(mut self, drift: DriftMode) -> Self {
        self.drift = drift;
        self
    }

    pub fn with_payoff(mut self, payoff: PayoffSpec) -> Self {
        self.payoff = Some(payoff);
        self
    }

    pub fn v(&self, t: f64) -> f64 {
        self.profile.v(t)
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.profile.sigma(t)
    }

    pub fn sigma2(&self, t: f64) -> f64 {
        self.profile.sigma2(t)
    }

    pub fn a(&self, t: f64, z: f64) -> f64 {
        self.coeff.a(t, z)
    }

    pub fn ou_rate(&self) -> Option<f64> {
        match self.drift {
            DriftMode::OrnsteinUhlenbeck { k } => Some(k),
            DriftMode::Derived => None,
        }
    }
}

/// a_t + (a²/2)·a_zz at (t,z), derivatives from the coefficient's backend.
pub fn pde_residual(coeff: &DiffusionCoefficient, t: f64, z: f64) -> f64 {
    let d = coeff.derivs(t, z);
    d.a_t + 0.5 * d.a * d.a * d.a_zz
}
