//! Space transform A(t,x) = ∫₀ˣ dy/a(t,y), its inverse, and the reduced drift
//! b(t,x) = A_t(t,A⁻¹(t,x)) - ½a_z(t,A⁻¹(t,x)) of the unit-diffusion process.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{ClosedTransform, DriftMode, ModelSpec};
use crate::quad::{adaptive, simpson, HermiteTable};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformConfig {
    pub rel_tol: f64,
    pub max_segments: usize,
    /// Largest |x| the inverse may bracket out to.
    pub domain_bound: f64,
    /// Panels of the b and B_int tables on [0,1].
    pub table_panels: usize,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self { rel_tol: 1e-10, max_segments: 4000, domain_bound: 1e4, table_panels: 4096 }
    }
}

#[derive(Debug, Clone)]
enum DriftKind {
    TimeOnly { b: HermiteTable, b_cum: HermiteTable },
    Linear { k: f64 },
    General,
}

fn time_tables<B: Fn(f64) -> f64>(bfun: B, n: usize) -> DriftKind {
    let h = 1.0 / n as f64;
    let dh = 1e-6;
    let nodes: Vec<f64> = (0..=n).map(|j| j as f64 * h).collect();
    let vals: Vec<f64> = nodes.iter().map(|&t| bfun(t)).collect();
    let slopes: Vec<f64> = nodes.iter().map(|&t| (bfun(t + dh) - bfun(t - dh)) / (2.0 * dh)).collect();
    let mut cum = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    cum.push(0.0);
    for j in 0..n {
        acc += simpson(&bfun, nodes[j], nodes[j + 1], 1);
        cum.push(acc);
    }
    DriftKind::TimeOnly { b: HermiteTable::new(0.0, h, vals.clone(), slopes), b_cum: HermiteTable::new(0.0, h, cum, vals) }
}

#[derive(Debug, Clone)]
pub struct SpaceTransform {
    model: Arc<ModelSpec>,
    kind: DriftKind,
    closed: Option<ClosedTransform>,
    pub cfg: TransformConfig,
}

impl SpaceTransform {
    pub fn new(model: Arc<ModelSpec>) -> Result<Self> {
        Self::with_config(model, TransformConfig::default())
    }

    pub fn with_config(model: Arc<ModelSpec>, cfg: TransformConfig) -> Result<Self> {
        let closed = model.coeff.closed_transform();
        let kind = match model.drift {
            DriftMode::OrnsteinUhlenbeck { k } => DriftKind::Linear { k },
            DriftMode::Derived if model.coeff.equilibrium_ready() => {
                // b(t,x) = -½ a_z(t,0) once a solves the volatility PDE
                let coeff = model.coeff.clone();
                time_tables(move |t| -0.5 * coeff.analytic(t, 0.0).a_z, cfg.table_panels)
            }
            DriftMode::Derived => DriftKind::General,
        };
        Ok(Self { model, kind, closed, cfg })
    }

    /// Transform of `model` with the drift replaced by a given function of time.
    /// Used to study kernels for drifts no shipped coefficient family produces.
    pub fn with_time_drift<B: Fn(f64) -> f64>(model: Arc<ModelSpec>, b: B) -> Self {
        let cfg = TransformConfig::default();
        let kind = time_tables(b, cfg.table_panels);
        Self { closed: model.coeff.closed_transform(), model, kind, cfg }
    }

    pub fn model(&self) -> &Arc<ModelSpec> {
        &self.model
    }

    pub fn b_is_time_only(&self) -> bool {
        matches!(self.kind, DriftKind::TimeOnly { .. })
    }

    pub fn ou_rate(&self) -> Option<f64> {
        match self.kind {
            DriftKind::Linear { k } => Some(k),
            _ => None,
        }
    }

    /// A(t,x): closed form where the family has one, else adaptive quadrature.
    pub fn eval_a(&self, t: f64, x: f64) -> Result<f64> {
        if self.ou_rate().is_some() {
            return Ok(x);
        }
        match self.closed {
            Some(c) => Ok(c.a_of(t, x)),
            None => self.eval_a_quadrature(t, x),
        }
    }

    /// A(t,x) by adaptive Gauss-Kronrod, regardless of closed forms.
    pub fn eval_a_quadrature(&self, t: f64, x: f64) -> Result<f64> {
        let coeff = &self.model.coeff;
        adaptive(|y| 1.0 / coeff.a(t, y), 0.0, x, self.cfg.rel_tol, 1e-15, self.cfg.max_segments)
    }

    /// A⁻¹(t,u): bracket outward from 0, bisect to 1e-6, polish with Newton.
    pub fn eval_a_inv(&self, t: f64, u: f64) -> Result<f64> {
        if self.ou_rate().is_some() {
            return Ok(u);
        }
        if let Some(c) = self.closed {
            return Ok(c.a_inv(t, u));
        }
        if u == 0.0 {
            return Ok(0.0);
        }
        let coeff = &self.model.coeff;
        let dir = u.signum();
        let (mut lo, mut hi) = (0.0f64, dir * coeff.a(t, 0.0) * u.abs().max(1e-3));
        while dir * (self.eval_a(t, hi)? - u) < 0.0 {
            lo = hi;
            hi *= 2.0;
            if hi.abs() > self.cfg.domain_bound {
                return Err(Error::BracketFailure { t, u, bound: self.cfg.domain_bound });
            }
        }
        while (hi - lo).abs() > 1e-6 {
            let mid = 0.5 * (lo + hi);
            if dir * (self.eval_a(t, mid)? - u) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut x = 0.5 * (lo + hi);
        for _ in 0..5 {
            let r = self.eval_a(t, x)? - u;
            if r.abs() < 1e-13 {
                break;
            }
            x -= r * coeff.a(t, x);
        }
        Ok(x)
    }

    /// b(t,x); tabulated when it depends on t only.
    pub fn eval_b(&self, t: f64, x: f64) -> Result<f64> {
        match &self.kind {
            DriftKind::Linear { k } => Ok(-k * x),
            DriftKind::TimeOnly { b, .. } => Ok(b.eval(t)),
            DriftKind::General => self.eval_b_definition(t, x),
        }
    }

    /// b from its two-term definition, with A_t = -∫₀^(A⁻¹) a_t/a² dy.
    pub fn eval_b_definition(&self, t: f64, x: f64) -> Result<f64> {
        if let DriftKind::Linear { k } = self.kind {
            return Ok(-k * x);
        }
        let coeff = &self.model.coeff;
        let y = self.eval_a_inv(t, x)?;
        let a_t = -adaptive(
            |s| {
                let d = coeff.analytic(t, s);
                d.a_t / (d.a * d.a)
            },
            0.0,
            y,
            self.cfg.rel_tol,
            1e-14,
            self.cfg.max_segments,
        )?;
        Ok(a_t - 0.5 * coeff.analytic(t, y).a_z)
    }

    /// b(t, xs[i]) into out[i] for increasing xs. The general case tabulates A
    /// and A_t along a fine y-grid once instead of inverting A per point.
    pub fn b_on_grid(&self, t: f64, xs: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.kind {
            DriftKind::Linear { k } => {
                for (o, x) in out.iter_mut().zip(xs) {
                    *o = -k * x;
                }
                return Ok(());
            }
            DriftKind::TimeOnly { b, .. } => {
                out.fill(b.eval(t));
                return Ok(());
            }
            DriftKind::General => {}
        }
        let n = xs.len();
        let (y_lo, y_hi) = (self.eval_a_inv(t, xs[0])?, self.eval_a_inv(t, xs[n - 1])?);
        let coeff = &self.model.coeff;
        let m = 4 * n.max(2);
        let hy = (y_hi - y_lo) / m as f64;
        let f_a = |y: f64| 1.0 / coeff.a(t, y);
        let f_at = |y: f64| {
            let d = coeff.analytic(t, y);
            -d.a_t / (d.a * d.a)
        };
        let mut a_val = self.eval_a(t, y_lo)?;
        let mut at_val = adaptive(f_at, 0.0, y_lo, self.cfg.rel_tol, 1e-14, self.cfg.max_segments)?;
        let mut ys = Vec::with_capacity(m + 1);
        let mut xa = Vec::with_capacity(m + 1);
        let mut bv = Vec::with_capacity(m + 1);
        for j in 0..=m {
            let y = y_lo + j as f64 * hy;
            if j > 0 {
                a_val += simpson(f_a, y - hy, y, 1);
                at_val += simpson(f_at, y - hy, y, 1);
            }
            ys.push(y);
            xa.push(a_val);
            bv.push(at_val - 0.5 * coeff.analytic(t, y).a_z);
        }
        let mut j = 0;
        for (o, &x) in out.iter_mut().zip(xs) {
            while j + 1 < m && xa[j + 1] < x {
                j += 1;
            }
            // cubic Lagrange through the four surrounding nodes
            let j0 = j.saturating_sub(1).min(m - 3);
            let mut acc = 0.0;
            for i in j0..j0 + 4 {
                let mut w = 1.0;
                for k in j0..j0 + 4 {
                    if k != i {
                        w *= (x - xa[k]) / (xa[i] - xa[k]);
                    }
                }
                acc += w * bv[i];
            }
            *o = acc;
        }
        Ok(())
    }

    /// b(t) for the time-only case.
    pub fn b_time(&self, t: f64) -> Option<f64> {
        match &self.kind {
            DriftKind::TimeOnly { b, .. } => Some(b.eval(t)),
            _ => None,
        }
    }

    /// B_int(t,u) = ∫ₜᵘ b(s) ds; requires a time-only drift.
    pub fn b_int(&self, t: f64, u: f64) -> Result<f64> {
        match &self.kind {
            DriftKind::TimeOnly { b_cum, .. } => Ok(b_cum.eval(u) - b_cum.eval(t)),
            _ => Err(Error::BackendMismatch("B_int needs a drift that depends on time only".into())),
        }
    }

    /// sup |b(t)| over [0,1] for the time-only case.
    pub fn b_sup(&self) -> Option<f64> {
        match &self.kind {
            DriftKind::TimeOnly { b, .. } => Some(b.nodes().iter().fold(0.0f64, |m, v| m.max(v.abs()))),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoeffSpec, Scenario};

    fn with_coeff(spec: CoeffSpec) -> SpaceTransform {
        let mut s = Scenario::back_pedersen();
        s.coefficient = spec;
        SpaceTransform::new(Arc::new(s.build().unwrap())).unwrap()
    }

    #[test]
    fn constant_coefficients() {
        let one = with_coeff(CoeffSpec::Constant { a0: 1.0 });
        let two = with_coeff(CoeffSpec::Constant { a0: 2.0 });
        assert_eq!(one.eval_a(0.3, 1.7).unwrap(), 1.7);
        assert_eq!(two.eval_a(0.3, 1.0).unwrap(), 0.5);
        assert_eq!(one.eval_a_inv(0.9, -0.4).unwrap(), -0.4);
        assert_eq!(two.eval_a_inv(0.2, 0.5).unwrap(), 1.0);
        assert_eq!(one.eval_b(0.5, 3.0).unwrap(), 0.0);
        assert_eq!(one.b_int(0.1, 0.9).unwrap(), 0.0);
    }

    #[test]
    fn closed_and_quadrature_transforms_agree() {
        let tr = with_coeff(CoeffSpec::SqrtQuadratic { k1: 1.0, k2: 1.0, k3: 1.0 });
        // independent oracle: composite Simpson with 20000 panels on 1/a(0,y)
        let oracle = simpson(|y| 1.0 / ((y + 1.0) * (y + 1.0) + 1.0).sqrt(), 0.0, 1.0, 20_000);
        assert!((tr.eval_a(0.0, 1.0).unwrap() - oracle).abs() < 1e-9);
        assert!((tr.eval_a_quadrature(0.0, 1.0).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn time_only_drift_matches_definition() {
        let tr = with_coeff(CoeffSpec::SqrtQuadratic { k1: 1.0, k2: 1.0, k3: 1.0 });
        assert!((tr.b_time(0.0).unwrap() + 0.5 / 2f64.sqrt()).abs() < 1e-12);
        for &(t, x) in &[(0.0f64, 0.0), (0.0, 2.0), (0.4, -1.5), (0.8, 0.7), (1.0, -3.0)] {
            let closed = -0.5 / (1.0 + (-t).exp()).sqrt();
            assert!((tr.eval_b(t, x).unwrap() - closed).abs() < 1e-10);
            assert!((tr.eval_b_definition(t, x).unwrap() - closed).abs() < 1e-7, "({t},{x})");
        }
    }

    #[test]
    fn b_int_matches_quadrature_of_b() {
        let tr = with_coeff(CoeffSpec::SqrtQuadratic { k1: 1.0, k2: 1.0, k3: 1.0 });
        let exact = simpson(|s: f64| -0.5 / (1.0 + (-s).exp()).sqrt(), 0.2, 0.9, 2000);
        assert!((tr.b_int(0.2, 0.9).unwrap() - exact).abs() < 1e-12);
    }

    #[test]
    fn mean_reverting_mode_is_linear() {
        let tr = SpaceTransform::new(Arc::new(Scenario::ornstein_uhlenbeck(1.5).build().unwrap())).unwrap();
        assert_eq!(tr.eval_b(0.3, 2.0).unwrap(), -3.0);
        assert!(tr.b_int(0.0, 1.0).is_err());
    }

    #[test]
    fn general_drift_for_non_equilibrium_family() {
        let tr = with_coeff(CoeffSpec::TanhBump { base: 1.0, amp: 0.5 });
        assert!(!tr.b_is_time_only());
        // time-homogeneous: b(x) = -½ a'(A⁻¹(x))
        let x = 0.8;
        let y = tr.eval_a_inv(0.0, x).unwrap();
        let th = y.tanh();
        assert!((tr.eval_b(0.5, x).unwrap() + 0.25 * (1.0 - th * th)).abs() < 1e-12);
    }

    #[test]
    fn grid_drift_matches_pointwise_drift() {
        let tr = with_coeff(CoeffSpec::TanhBump { base: 1.0, amp: 0.5 });
        let xs: Vec<f64> = (0..101).map(|i| -2.0 + 0.04 * i as f64).collect();
        let mut out = vec![0.0; xs.len()];
        tr.b_on_grid(0.3, &xs, &mut out).unwrap();
        for (x, b) in xs.iter().zip(&out).step_by(10) {
            assert!((tr.eval_b(0.3, *x).unwrap() - b).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn given_time_drift_is_integrated() {
        let tr = SpaceTransform::with_time_drift(Arc::new(ModelSpec::back_pedersen()), |_| 0.2);
        assert!((tr.b_int(0.1, 0.6).unwrap() - 0.1).abs() < 1e-14);
        assert_eq!(tr.eval_b(0.4, 3.0).unwrap(), 0.2);
    }

    #[test]
    fn inverse_fails_outside_the_range_of_a() {
        // A(x) = atan(x) never reaches 2
        let tr = with_coeff(CoeffSpec::Quadratic);
        assert!(matches!(tr.eval_a_inv(0.0, 2.0), Err(Error::BracketFailure { .. })));
    }
}
