use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayoffKind {
    Identity,
    Affine { slope: f64, intercept: f64 },
    /// f(z) = z + scale·tanh(z)
    SoftStep { scale: f64 },
    Constant { value: f64 },
}

/// Terminal payoff f with growth constants: |f(z)| ≤ k1·exp(k2·|A(1,z)|).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffSpec {
    #[serde(flatten)]
    pub kind: PayoffKind,
    #[serde(default = "one")]
    pub k1: f64,
    #[serde(default = "one")]
    pub k2: f64,
}

fn one() -> f64 {
    1.0
}

impl PayoffSpec {
    pub fn identity() -> Self {
        Self { kind: PayoffKind::Identity, k1: 1.0, k2: 1.0 }
    }

    pub fn f(&self, z: f64) -> f64 {
        match self.kind {
            PayoffKind::Identity => z,
            PayoffKind::Affine { slope, intercept } => slope * z + intercept,
            PayoffKind::SoftStep { scale } => z + scale * z.tanh(),
            PayoffKind::Constant { value } => value,
        }
    }

    pub fn f_prime(&self, z: f64) -> f64 {
        match self.kind {
            PayoffKind::Identity => 1.0,
            PayoffKind::Affine { slope, .. } => slope,
            PayoffKind::SoftStep { scale } => {
                let th = z.tanh();
                1.0 + scale * (1.0 - th * th)
            }
            PayoffKind::Constant { .. } => 0.0,
        }
    }

    /// First grid point where f fails to increase strictly, if any.
    pub fn monotonicity_witness(&self, lo: f64, hi: f64, n: usize) -> Option<f64> {
        let step = (hi - lo) / n as f64;
        (0..n).map(|i| lo + i as f64 * step).find(|&z| self.f(z + step) <= self.f(z))
    }
}
