use serde::{Deserialize, Serialize};

use super::{
    CoeffSpec, DerivativeBackend, DiffusionCoefficient, DriftMode, ModelSpec, PayoffSpec, QuadratureConfig, SigmaSpec,
    VolatilityProfile,
};
use crate::error::{Error, Result};

fn default_ell() -> f64 {
    1.0
}

/// Serializable scenario description; the TOML form round-trips exactly.
///
/// ```toml
/// name = "back-pedersen"
/// c = 0.5
///
/// [sigma]
/// kind = "constant"
/// sigma = 0.7071067811865476
///
/// [coefficient]
/// family = "constant"
/// a0 = 1.0
///
/// [payoff]
/// kind = "identity"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub c: f64,
    #[serde(default)]
    pub derivatives: DerivativeBackend,
    #[serde(default = "default_ell")]
    pub ell: f64,
    pub sigma: SigmaSpec,
    pub coefficient: CoeffSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payoff: Option<PayoffSpec>,
    #[serde(default)]
    pub drift: DriftMode,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
}

impl Scenario {
    pub fn new(name: &str, c: f64, sigma: SigmaSpec, coefficient: CoeffSpec) -> Self {
        Self {
            name: name.into(),
            c,
            derivatives: DerivativeBackend::Analytic,
            ell: 1.0,
            sigma,
            coefficient,
            payoff: None,
            drift: DriftMode::Derived,
            quadrature: QuadratureConfig::default(),
        }
    }

    /// a ≡ 1, σ² = 1/2, c = 1/2, f = id.
    pub fn back_pedersen() -> Self {
        let mut s = Self::new("back-pedersen", 0.5, SigmaSpec::balanced(0.5), CoeffSpec::Constant { a0: 1.0 });
        s.payoff = Some(PayoffSpec::identity());
        s
    }

    /// σ ≡ 0, c = 1: the insider knows Z₁ at time 0.
    pub fn static_information() -> Self {
        let mut s = Self::new("static", 1.0, SigmaSpec::Constant { sigma: 0.0 }, CoeffSpec::Constant { a0: 1.0 });
        s.payoff = Some(PayoffSpec::identity());
        s
    }

    /// a = √((z+1)² + e^(-t)) with the balanced constant σ.
    pub fn sqrt_quadratic() -> Self {
        let mut s = Self::new(
            "sqrt-quadratic",
            0.5,
            SigmaSpec::balanced(0.5),
            CoeffSpec::SqrtQuadratic { k1: 1.0, k2: 1.0, k3: 1.0 },
        );
        // A(1,·) grows like ln|z| minus an offset, so |z| needs k1 > 1
        s.payoff = Some(PayoffSpec { k1: 2.0, ..PayoffSpec::identity() });
        s
    }

    /// a ≡ 1 signal with mean reversion -kσ²Z.
    pub fn ornstein_uhlenbeck(k: f64) -> Self {
        let mut s = Self::new("ou", 0.5, SigmaSpec::balanced(0.5), CoeffSpec::Constant { a0: 1.0 });
        s.drift = DriftMode::OrnsteinUhlenbeck { k };
        s
    }

    pub fn build(&self) -> Result<ModelSpec> {
        if !(self.ell > 0.0) {
            return Err(Error::Config(format!("ell must be positive, got {}", self.ell)));
        }
        if let DriftMode::OrnsteinUhlenbeck { k } = self.drift {
            if !(k > 0.0) || !matches!(self.coefficient, CoeffSpec::Constant { a0 } if a0 == 1.0) {
                return Err(Error::Config("mean-reverting mode needs k > 0 and a = 1".into()));
            }
        }
        let profile = VolatilityProfile::build(self.sigma.clone(), self.c, self.quadrature)?;
        let coeff = DiffusionCoefficient::new(self.coefficient.clone(), self.derivatives)?;
        Ok(ModelSpec { profile, coeff, payoff: self.payoff.clone(), drift: self.drift, ell: self.ell })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PayoffKind;

    #[test]
    fn presets_round_trip_through_toml() {
        let mut soft = Scenario::sqrt_quadratic();
        soft.payoff = Some(PayoffSpec { kind: PayoffKind::SoftStep { scale: 0.3 }, k1: 2.0, k2: 1.0 });
        soft.sigma = SigmaSpec::SquaredPolynomial { coeffs: vec![0.1, 0.2, 0.30000000000000004] };
        for s in [Scenario::back_pedersen(), Scenario::static_information(), Scenario::ornstein_uhlenbeck(1.0), soft] {
            let text = s.to_toml().unwrap();
            let back = Scenario::from_toml(&text).unwrap();
            assert_eq!(back, s, "{text}");
            assert_eq!(back.to_toml().unwrap(), text);
        }
    }

    #[test]
    fn parses_documented_example() {
        let text = r#"
name = "back-pedersen"
c = 0.5

[sigma]
kind = "constant"
sigma = 0.7071067811865476

[coefficient]
family = "constant"
a0 = 1.0

[payoff]
kind = "identity"
"#;
        let s = Scenario::from_toml(text).unwrap();
        assert_eq!(s, Scenario::back_pedersen());
        assert!(s.build().is_ok());
    }

    #[test]
    fn unknown_fields_are_reported_with_location() {
        let err = Scenario::from_toml("name = \"x\"\nc = 0.5\nsigmaa = 1\n").unwrap_err().to_string();
        assert!(err.contains("sigmaa") || err.contains("line"), "{err}");
    }
}
