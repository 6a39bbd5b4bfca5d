use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{simpson, HermiteTable};

/// Tagged description of the signal time-change rate σ(t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaSpec {
    Constant { sigma: f64 },
    /// σ²(t) = Σ coeffs[i]·tⁱ
    SquaredPolynomial { coeffs: Vec<f64> },
}

impl SigmaSpec {
    pub fn sigma2(&self, t: f64) -> f64 {
        match self {
            SigmaSpec::Constant { sigma } => sigma * sigma,
            SigmaSpec::SquaredPolynomial { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma2(t).max(0.0).sqrt()
    }

    /// The constant σ that makes V(1) = 1 for a given c.
    pub fn balanced(c: f64) -> Self {
        SigmaSpec::Constant { sigma: (1.0 - c).max(0.0).sqrt() }
    }
}

/// Quadrature settings recorded with every artifact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    pub panels: usize,
    /// Largest log-time y = -ln(1-t) kept in the tables.
    pub y_max: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { panels: 4096, y_max: 32.0 * std::f64::consts::LN_2 }
    }
}

pub const MIN_PANELS: usize = 1024;
pub const V_END_TOL: f64 = 1e-9;

fn t_of(y: f64) -> f64 {
    -(-y).exp_m1()
}

fn y_of(t: f64) -> f64 {
    -(-t).ln_1p()
}

/// σ, c and the operational time V(t) = c + ∫σ², with the derived λ and Λ.
///
/// All integrals use composite Simpson and are interpolated with cubic Hermite
/// pieces whose slopes are the exact integrands. V lives on a uniform t-grid;
/// L = -ln λ and Λ live on a uniform grid in y = -ln(1-t), which keeps panels
/// proportional to 1-t as the 1/(V-t) singularity at t = 1 requires.
#[derive(Debug, Clone)]
pub struct VolatilityProfile {
    pub sigma: SigmaSpec,
    pub c: f64,
    pub quad: QuadratureConfig,
    v_end: f64,
    v_tab: HermiteTable,
    // L(t) = ∫₀ᵗ ds/(V(s)-s) = -ln λ(t)
    l_tab: HermiteTable,
    big_lambda_tab: HermiteTable,
}

fn cumulative<F: Fn(f64) -> f64>(f: F, h: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut vals = Vec::with_capacity(n + 1);
    let mut slopes = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    vals.push(0.0);
    slopes.push(f(0.0));
    for j in 0..n {
        let y0 = j as f64 * h;
        acc += simpson(&f, y0, y0 + h, 1);
        vals.push(acc);
        slopes.push(f(y0 + h));
    }
    (vals, slopes)
}

impl VolatilityProfile {
    pub fn build(sigma: SigmaSpec, c: f64, quad: QuadratureConfig) -> Result<Self> {
        if quad.panels < MIN_PANELS {
            return Err(Error::Config(format!("need at least {MIN_PANELS} quadrature panels, got {}", quad.panels)));
        }
        let n = quad.panels;
        let h = quad.y_max / n as f64;
        let s2 = |t: f64| sigma.sigma2(t);

        if let Some(t) = (0..=n).map(|i| i as f64 / n as f64).find(|&t| s2(t) < 0.0) {
            return Err(Error::AssumptionViolation { assumption: "sigma^2 >= 0".into(), witness: format!("t={t}") });
        }

        // V on a uniform t-grid with the exact slope σ²
        let ht = 1.0 / n as f64;
        let (vv, dv) = cumulative(s2, ht, n);
        let v_tab = HermiteTable::new(0.0, ht, vv.iter().map(|v| c + v).collect(), dv);
        let v_end = c + vv[n];

        // V(t) - t near t = 1 is a difference of two small numbers; evaluate it as
        // (V(1) - 1) + w - ∫_{1-w}^1 σ² with w = 1-t carried exactly
        let remaining = |w: f64| {
            let m = 8usize.max((2048.0 * w).ceil() as usize);
            w * simpson(|s| s2(1.0 - w * s), 0.0, 1.0, m)
        };
        let gap_w = |w: f64| (v_end - 1.0) + w - remaining(w);

        // V(t) > t on a uniform grid and on the dyadic points approaching 1
        let probes = (0..n).map(|i| 1.0 - i as f64 / n as f64).chain((1..=32).map(|k| 0.5f64.powi(k)));
        for w in probes {
            let g = gap_w(w);
            if g <= 0.0 {
                return Err(Error::AssumptionViolation {
                    assumption: "V(t) > t".into(),
                    witness: format!("t={}, V(t)={}", 1.0 - w, g + 1.0 - w),
                });
            }
        }
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::AssumptionViolation { assumption: "c in (0,1]".into(), witness: format!("c={c}") });
        }
        if (v_end - 1.0).abs() > V_END_TOL {
            return Err(Error::AssumptionViolation { assumption: "V(1) = 1".into(), witness: format!("V(1)={v_end}") });
        }

        // dL/dy = (1-t)/(V(t)-t)
        let l_rate = |y: f64| {
            let w = (-y).exp();
            w / gap_w(w)
        };
        let (lv, dl) = cumulative(l_rate, h, n);
        let l_tab = HermiteTable::new(0.0, h, lv, dl);

        // dΛ/dy = (1+σ²)(1-t)/λ² = (1+σ²)·exp(2L - y)
        let big_rate = |y: f64| (1.0 + s2(t_of(y))) * (2.0 * l_tab.eval(y) - y).exp();
        let (gv, dg) = cumulative(big_rate, h, n);
        let big_lambda_tab = HermiteTable::new(0.0, h, gv, dg);

        Ok(Self { sigma, c, quad, v_end, v_tab, l_tab, big_lambda_tab })
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma.sigma(t)
    }

    pub fn sigma2(&self, t: f64) -> f64 {
        self.sigma.sigma2(t)
    }

    /// Operational time V(t) = c + ∫₀ᵗ σ².
    pub fn v(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return self.c + self.sigma2(0.0) * t;
        }
        if t >= 1.0 {
            return self.v_end + self.sigma2(1.0) * (t - 1.0);
        }
        self.v_tab.eval(t)
    }

    /// V(t) - t, evaluated without cancellation as t approaches 1.
    pub fn gap(&self, t: f64) -> f64 {
        if t < 0.5 {
            return self.v(t) - t;
        }
        let w = 1.0 - t;
        let m = 8usize.max((2048.0 * w).ceil() as usize);
        let s2 = |s: f64| self.sigma2(1.0 - w * s);
        (self.v_end - 1.0) + w - w * simpson(s2, 0.0, 1.0, m)
    }

    /// V(1) by composite Simpson on [0,1].
    pub fn v_end(&self) -> f64 {
        self.v_end
    }

    /// ln(1/λ(t)) = ∫₀ᵗ ds/(V(s)-s); valid for t < 1 - 2^-32.
    pub fn log_inv_lambda(&self, t: f64) -> f64 {
        self.l_tab.eval(y_of(t.max(0.0)))
    }

    pub fn lambda(&self, t: f64) -> f64 {
        (-self.log_inv_lambda(t)).exp()
    }

    /// Λ(t) = ∫₀ᵗ (1+σ²)/λ² ds.
    pub fn big_lambda(&self, t: f64) -> f64 {
        self.big_lambda_tab.eval(y_of(t.max(0.0)))
    }

    /// exp(-∫ₛᵗ du/(V(u)-u)) for s ≤ t.
    pub fn decay(&self, s: f64, t: f64) -> f64 {
        (self.log_inv_lambda(s) - self.log_inv_lambda(t)).exp()
    }

    /// λ²Λ log Λ at tₙ = 1-2⁻ⁿ for n = 1..=20.
    pub fn tail_sequence(&self) -> Vec<(f64, f64)> {
        (1..=20)
            .map(|k| {
                let t = 1.0 - 0.5f64.powi(k);
                let big = self.big_lambda(t);
                let lam = self.lambda(t);
                (t, lam * lam * big * big.ln())
            })
            .collect()
    }
}
