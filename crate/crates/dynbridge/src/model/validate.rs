use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{pde_residual, DerivativeBackend, ModelSpec, V_END_TOL};
use crate::transform::SpaceTransform;

/// Grid on which the standing assumptions are checked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationGrid {
    pub nt: usize,
    pub nz: usize,
    pub z_half_width: f64,
    /// Finite bound standing in for "uniformly bounded".
    pub drift_bound: f64,
}

impl Default for ValidationGrid {
    fn default() -> Self {
        Self { nt: 51, nz: 81, z_half_width: 4.0, drift_bound: 1e3 }
    }
}

impl ValidationGrid {
    fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.nt).map(move |i| i as f64 / (self.nt - 1) as f64)
    }

    fn space(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.nz).map(move |j| -self.z_half_width + 2.0 * self.z_half_width * j as f64 / (self.nz - 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub pass: bool,
    /// The extreme value found (minimum or maximum, depending on the check).
    pub value: f64,
    pub witness: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub fn validate(model: &ModelSpec) -> ValidationReport {
    validate_with(model, &ValidationGrid::default())
}

pub fn validate_with(model: &ModelSpec, grid: &ValidationGrid) -> ValidationReport {
    let mut checks = Vec::new();
    let mut push = |name: &str, pass: bool, value: f64, witness: Option<String>| {
        checks.push(AssumptionCheck { name: name.into(), pass, value, witness: if pass { None } else { witness } });
    };
    let p = &model.profile;

    let mut gap_min = (f64::INFINITY, 0.0);
    for t in grid.times().filter(|&t| t < 1.0).chain((1..=20).map(|k| 1.0 - 0.5f64.powi(k))) {
        let g = p.v(t) - t;
        if g < gap_min.0 {
            gap_min = (g, t);
        }
    }
    push("V(t) > t", gap_min.0 > 0.0, gap_min.0, Some(format!("t={}", gap_min.1)));

    let v1 = p.v_end();
    push("V(1) = 1", (v1 - 1.0).abs() <= V_END_TOL, v1, Some(format!("V(1)={v1}")));

    let s2_max = grid.times().map(|t| p.sigma2(t)).fold(0.0, f64::max);
    push("sigma^2 bounded", s2_max.is_finite(), s2_max, Some("non-finite sigma^2".into()));

    // heuristic proxy: the sequence must decrease from n = 10 on and end small
    let tail = p.tail_sequence();
    let decreasing = tail[9..].windows(2).all(|w| w[1].1 < w[0].1);
    let last = tail[19].1;
    push(
        "tail decay lambda^2 Lambda log Lambda",
        decreasing && last < 1e-3,
        last,
        Some(format!("sequence {:?}", tail.iter().map(|x| x.1).collect::<Vec<_>>())),
    );

    let eps = model.coeff.epsilon();
    let mut a_min = (f64::INFINITY, 0.0, 0.0);
    for t in grid.times() {
        for z in grid.space() {
            let a = model.coeff.a(t, z);
            if a < a_min.0 {
                a_min = (a, t, z);
            }
        }
    }
    push(
        "a >= epsilon",
        a_min.0 >= eps * (1.0 - 1e-12),
        a_min.0,
        Some(format!("a({}, {}) = {} < epsilon = {eps}", a_min.1, a_min.2, a_min.0)),
    );

    if model.coeff.equilibrium_ready() {
        let tol = match model.coeff.backend {
            DerivativeBackend::Analytic => 1e-8,
            DerivativeBackend::FiniteDifference => 1e-4,
        };
        let mut worst = (0.0f64, 0.0, 0.0);
        for t in grid.times() {
            for z in grid.space() {
                let r = pde_residual(&model.coeff, t, z).abs();
                if r > worst.0 {
                    worst = (r, t, z);
                }
            }
        }
        push("volatility PDE", worst.0 < tol, worst.0, Some(format!("|residual|({}, {}) = {:e}", worst.1, worst.2, worst.0)));
    }

    match SpaceTransform::new(Arc::new(model.clone())) {
        Ok(tr) => {
            let (mut bmax, mut bxmax, mut btmax) = (0.0f64, 0.0f64, 0.0f64);
            let mut failure = None;
            let h = 1e-4;
            'outer: for t in grid.times() {
                for x in grid.space() {
                    let ev = |t: f64, x: f64| tr.eval_b(t, x);
                    let vals = (ev(t, x), ev(t, x + h), ev(t, x - h), ev((t + h).min(1.0), x), ev((t - h).max(0.0), x));
                    match vals {
                        (Ok(b), Ok(bp), Ok(bm), Ok(tp), Ok(tm)) => {
                            let dt = (t + h).min(1.0) - (t - h).max(0.0);
                            bmax = bmax.max(b.abs());
                            bxmax = bxmax.max(((bp - bm) / (2.0 * h)).abs());
                            btmax = btmax.max(((tp - tm) / dt).abs());
                        }
                        _ => {
                            failure = Some(format!("b not evaluable at ({t}, {x})"));
                            break 'outer;
                        }
                    }
                }
            }
            let ok = |v: f64| failure.is_none() && v.is_finite() && v <= grid.drift_bound;
            let w = failure.clone().unwrap_or_else(|| format!("exceeds {}", grid.drift_bound));
            push("b bounded", ok(bmax), bmax, Some(w.clone()));
            push("b_x bounded", ok(bxmax), bxmax, Some(w.clone()));
            push("b_t bounded", ok(btmax), btmax, Some(w));
        }
        Err(e) => push("b bounded", false, f64::NAN, Some(e.to_string())),
    }

    if let Some(payoff) = &model.payoff {
        let w = payoff.monotonicity_witness(-grid.z_half_width, grid.z_half_width, 400);
        push("f strictly increasing", w.is_none(), w.unwrap_or(0.0), w.map(|z| format!("z={z}")));
    }

    ValidationReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoeffSpec, DiffusionCoefficient, QuadratureConfig, SigmaSpec, VolatilityProfile};

    #[test]
    fn back_pedersen_passes_everything() {
        let r = validate(&ModelSpec::back_pedersen());
        assert!(r.passed(), "{r:#?}");
    }

    #[test]
    fn sqrt_quadratic_reports_its_lower_bound() {
        let profile = VolatilityProfile::build(SigmaSpec::balanced(0.5), 0.5, QuadratureConfig::default()).unwrap();
        let coeff = DiffusionCoefficient::new(CoeffSpec::SqrtQuadratic { k1: 1.0, k2: 1.0, k3: 1.0 }, DerivativeBackend::Analytic).unwrap();
        let r = validate(&ModelSpec::new(profile, coeff, None));
        assert!(r.passed(), "{r:#?}");
        let a = r.get("a >= epsilon").unwrap();
        // grid minimum sits at z = -k2, t = 1
        assert!((a.value - (-0.5f64).exp()).abs() < 1e-12);
    }
}
