//! Transition kernels: the Gaussian kernel q, the fundamental solution Γ of
//! the transformed forward equation, G, ρ, p and the log-derivative that
//! drives the bridge, plus the pricing functions F and H built on them.
//!
//! Γ is closed-form when b depends on time only (a shifted heat kernel) or is
//! linear (the mean-reverting case); otherwise it comes from a numeric forward
//! solve in `pdesolve`, one solve per source point.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, PayoffKind, PayoffSpec};
use crate::pdesolve::{solve_forward_field, DensitySurface, GridConfig};
use crate::quad::simpson;
use crate::transform::SpaceTransform;

/// Kernels are only evaluated for u - t at least this large.
pub const MIN_HORIZON: f64 = 1e-6;

const INV_SQRT_TAU: f64 = 0.398_942_280_401_432_7;

/// (2πt)^(-1/2) exp(-(x-y)²/2t).
pub fn gaussian_q(t: f64, x: f64, y: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::DomainError(format!("q needs t > 0, got {t}")));
    }
    Ok(q(t, x, y))
}

fn q(s: f64, m: f64, z: f64) -> f64 {
    let d = z - m;
    INV_SQRT_TAU / s.sqrt() * (-d * d / (2.0 * s)).exp()
}

/// q(s,m,z) with its derivatives in the mean and the variance.
#[derive(Debug, Clone, Copy)]
struct QParts {
    q: f64,
    q_m: f64,
    q_mm: f64,
    q_s: f64,
}

fn q_parts(s: f64, m: f64, z: f64) -> QParts {
    let v = q(s, m, z);
    let d = z - m;
    let q_m = v * d / s;
    let q_mm = v * (d * d / (s * s) - 1.0 / s);
    QParts { q: v, q_m, q_mm, q_s: 0.5 * q_mm }
}

/// Γ(t,x;u,z) = q(s, m, z) for a closed kernel, with the partials of s and m.
#[derive(Debug, Clone, Copy)]
struct GaussForm {
    s: f64,
    m: f64,
    s_t: f64,
    s_u: f64,
    m_t: f64,
    m_u: f64,
    m_x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelBackend {
    ClosedTimeOnly,
    ClosedOu,
    Numeric,
}

/// Γ and its first/second partials at (t,x;u,z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaJet {
    pub value: f64,
    pub t: f64,
    pub x: f64,
    pub xx: f64,
    pub u: f64,
    pub z: f64,
    pub zz: f64,
}

/// p(t,x,z) = Γ(t,x;V(t),z) and its partials, t-derivative taken along u = V(t).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PJet {
    pub value: f64,
    pub t: f64,
    pub x: f64,
    pub xx: f64,
    pub z: f64,
    pub zz: f64,
}

/// Drift on a space grid, cached per time bucket for the numeric backend.
type DriftCache = Mutex<Vec<(i64, Vec<f64>, Vec<f64>)>>;

pub struct TransitionKernel {
    tr: Arc<SpaceTransform>,
    backend: KernelBackend,
    pub grid: GridConfig,
    /// Time spacing at which a general b(t,·) is re-tabulated for numeric solves.
    pub b_refresh: f64,
    cache: DriftCache,
}

impl std::fmt::Debug for TransitionKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransitionKernel").field("backend", &self.backend).field("grid", &self.grid).finish()
    }
}

impl TransitionKernel {
    pub fn build(tr: Arc<SpaceTransform>, backend: KernelBackend) -> Result<Self> {
        match backend {
            KernelBackend::ClosedTimeOnly if !tr.b_is_time_only() => {
                return Err(Error::BackendMismatch("closed time-only kernel needs b = b(t)".into()))
            }
            KernelBackend::ClosedOu if tr.ou_rate().is_none() => {
                return Err(Error::BackendMismatch("closed mean-reverting kernel needs the linear drift mode".into()))
            }
            _ => {}
        }
        Ok(Self { tr, backend, grid: GridConfig::default(), b_refresh: 0.02, cache: Mutex::new(Vec::new()) })
    }

    /// Closed backend when one applies, numeric otherwise.
    pub fn auto(tr: Arc<SpaceTransform>) -> Self {
        let backend = if tr.b_is_time_only() {
            KernelBackend::ClosedTimeOnly
        } else if tr.ou_rate().is_some() {
            KernelBackend::ClosedOu
        } else {
            KernelBackend::Numeric
        };
        Self::build(tr, backend).expect("backend chosen to match the drift")
    }

    pub fn for_model(model: ModelSpec) -> Result<Self> {
        Ok(Self::auto(Arc::new(SpaceTransform::new(Arc::new(model))?)))
    }

    pub fn with_grid(mut self, grid: GridConfig) -> Self {
        self.grid = grid;
        self
    }

    pub fn backend(&self) -> KernelBackend {
        self.backend
    }

    pub fn is_closed(&self) -> bool {
        self.backend != KernelBackend::Numeric
    }

    pub fn transform(&self) -> &Arc<SpaceTransform> {
        &self.tr
    }

    pub fn model(&self) -> &Arc<ModelSpec> {
        self.tr.model()
    }

    fn check_horizon(t: f64, u: f64) -> Result<()> {
        if u - t < MIN_HORIZON {
            return Err(Error::DomainError(format!("kernel needs u - t >= {MIN_HORIZON}, got t={t}, u={u}")));
        }
        Ok(())
    }

    fn form(&self, t: f64, x: f64, u: f64) -> Result<GaussForm> {
        Self::check_horizon(t, u)?;
        match self.backend {
            KernelBackend::ClosedTimeOnly => Ok(GaussForm {
                s: u - t,
                m: x + self.tr.b_int(t, u)?,
                s_t: -1.0,
                s_u: 1.0,
                m_t: -self.tr.eval_b(t, x)?,
                m_u: self.tr.eval_b(u, x)?,
                m_x: 1.0,
            }),
            KernelBackend::ClosedOu => {
                let k = self.tr.ou_rate().expect("checked at build");
                let e = (-k * (u - t)).exp();
                Ok(GaussForm {
                    s: -(-2.0 * k * (u - t)).exp_m1() / (2.0 * k),
                    m: x * e,
                    s_t: -e * e,
                    s_u: e * e,
                    m_t: k * x * e,
                    m_u: -k * x * e,
                    m_x: e,
                })
            }
            KernelBackend::Numeric => Err(Error::BackendMismatch("no closed form for a numeric kernel".into())),
        }
    }

    /// Mean and variance of the Gaussian Γ(t,x;u,·); closed backends only.
    pub fn gamma_moments(&self, t: f64, x: f64, u: f64) -> Result<(f64, f64)> {
        let f = self.form(t, x, u)?;
        Ok((f.m, f.s))
    }

    /// Γ(t,x;u,z) = q(u-t, x + B_int(t,u), z): the time-only closed form.
    pub fn gamma_closed(&self, t: f64, x: f64, u: f64, z: f64) -> Result<f64> {
        if self.backend != KernelBackend::ClosedTimeOnly {
            return Err(Error::BackendMismatch("gamma_closed needs a drift that depends on time only".into()));
        }
        let f = self.form(t, x, u)?;
        Ok(q(f.s, f.m, z))
    }

    /// Γ(t,x;u,z) in transformed coordinates.
    pub fn gamma(&self, t: f64, x: f64, u: f64, z: f64) -> Result<f64> {
        if self.is_closed() {
            let f = self.form(t, x, u)?;
            return Ok(q(f.s, f.m, z));
        }
        Ok(self.numeric_surface(t, x, u)?.final_density(z))
    }

    pub fn gamma_jet(&self, t: f64, x: f64, u: f64, z: f64) -> Result<GammaJet> {
        let f = self.form(t, x, u)?;
        let p = q_parts(f.s, f.m, z);
        Ok(GammaJet {
            value: p.q,
            t: p.q_s * f.s_t + p.q_m * f.m_t,
            x: p.q_m * f.m_x,
            xx: p.q_mm * f.m_x * f.m_x,
            u: p.q_s * f.s_u + p.q_m * f.m_u,
            z: -p.q_m,
            zz: p.q_mm,
        })
    }

    /// p(t,x,z) = Γ(t,x;V(t),z).
    pub fn p(&self, t: f64, x: f64, z: f64) -> Result<f64> {
        self.gamma(t, x, self.model().v(t), z)
    }

    pub fn p_jet(&self, t: f64, x: f64, z: f64) -> Result<PJet> {
        let model = self.model();
        let v = model.v(t);
        let s2 = model.sigma2(t);
        let f = self.form(t, x, v)?;
        let p = q_parts(f.s, f.m, z);
        let big_s_t = f.s_t + s2 * f.s_u;
        let big_m_t = f.m_t + s2 * f.m_u;
        Ok(PJet {
            value: p.q,
            t: p.q_s * big_s_t + p.q_m * big_m_t,
            x: p.q_m * f.m_x,
            xx: p.q_mm * f.m_x * f.m_x,
            z: -p.q_m,
            zz: p.q_mm,
        })
    }

    /// ∂ₓ log Γ(t,x;u,z) in transformed coordinates.
    pub fn gamma_log_dx(&self, t: f64, x: f64, u: f64, z: f64) -> Result<f64> {
        if self.is_closed() {
            let f = self.form(t, x, u)?;
            return Ok((z - f.m) / f.s * f.m_x);
        }
        let h = 0.02;
        let up = self.gamma(t, x + h, u, z)?.max(f64::MIN_POSITIVE).ln();
        let dn = self.gamma(t, x - h, u, z)?.max(f64::MIN_POSITIVE).ln();
        Ok((up - dn) / (2.0 * h))
    }

    /// p_x/p at (t, x̃, z̃): the drift correction of the transformed bridge.
    pub fn transformed_drift(&self, t: f64, x: f64, z: f64) -> Result<f64> {
        self.gamma_log_dx(t, x, self.model().v(t), z)
    }

    /// Numeric Γ(t,x;u,·) by a forward solve from (t,x).
    pub fn numeric_surface(&self, t: f64, x: f64, u: f64) -> Result<DensitySurface> {
        Self::check_horizon(t, u)?;
        solve_forward_field(|s, zs, out| self.fill_drift(s, zs, out), t, x, u, &self.grid)
    }

    fn fill_drift(&self, t: f64, zs: &[f64], out: &mut [f64]) -> Result<()> {
        if self.tr.b_is_time_only() || self.tr.ou_rate().is_some() {
            return self.tr.b_on_grid(t, zs, out);
        }
        if zs.len() < 64 {
            for (o, &z) in out.iter_mut().zip(zs) {
                *o = self.tr.eval_b(t, z)?;
            }
            return Ok(());
        }
        // general b: tabulate at bucket times and interpolate linearly in t
        let bucket = (t / self.b_refresh).floor() as i64;
        let row = |k: i64| -> Result<Vec<f64>> {
            let mut cache = self.cache.lock().expect("drift cache");
            if let Some((_, _, v)) = cache.iter().find(|(kk, g, _)| *kk == k && g.as_slice() == zs) {
                return Ok(v.clone());
            }
            let mut v = vec![0.0; zs.len()];
            self.tr.b_on_grid(k as f64 * self.b_refresh, zs, &mut v)?;
            if cache.len() > 256 {
                cache.clear();
            }
            cache.push((k, zs.to_vec(), v.clone()));
            Ok(v)
        };
        let (lo, hi) = (row(bucket)?, row(bucket + 1)?);
        let f = t / self.b_refresh - bucket as f64;
        for i in 0..zs.len() {
            out[i] = lo[i] * (1.0 - f) + hi[i] * f;
        }
        Ok(())
    }

    /// G(t,x;u,z) = Γ(t,A(t,x);u,A(u,z)) / a(u,z).
    pub fn g(&self, t: f64, x: f64, u: f64, z: f64) -> Result<f64> {
        let xt = self.tr.eval_a(t, x)?;
        let zt = self.tr.eval_a(u, z)?;
        Ok(self.gamma(t, xt, u, zt)? / self.model().a(u, z))
    }

    /// ∂ₓG(t,x;u,z).
    pub fn g_dx(&self, t: f64, x: f64, u: f64, z: f64) -> Result<f64> {
        let xt = self.tr.eval_a(t, x)?;
        let zt = self.tr.eval_a(u, z)?;
        let model = self.model();
        let gx = if self.is_closed() {
            self.gamma_jet(t, xt, u, zt)?.x
        } else {
            let h = 0.02;
            (self.gamma(t, xt + h, u, zt)? - self.gamma(t, xt - h, u, zt)?) / (2.0 * h)
        };
        Ok(gx / model.a(t, x) / model.a(u, z))
    }

    /// ρ(t,x,z) = G(t,x;V(t),z).
    pub fn rho(&self, t: f64, x: f64, z: f64) -> Result<f64> {
        self.g(t, x, self.model().v(t), z)
    }

    /// ∂ₓ log ρ(t,x,z) = ∂ log Γ / a(t,x) at the transformed coordinates.
    pub fn log_dx_rho(&self, t: f64, x: f64, z: f64) -> Result<f64> {
        let model = self.model();
        let v = model.v(t);
        let xt = self.tr.eval_a(t, x)?;
        let zt = self.tr.eval_a(v, z)?;
        Ok(self.gamma_log_dx(t, xt, v, zt)? / model.a(t, x))
    }

    /// The X-drift a²(t,x)·∂ₓ log ρ(t,x,z) of the bridge.
    pub fn bridge_drift(&self, t: f64, x: f64, z: f64) -> Result<f64> {
        let a = self.model().a(t, x);
        Ok(a * a * self.log_dx_rho(t, x, z)?)
    }
}

/// Evaluation grid for the kernel diagnostics: z is placed at `offsets`
/// standard deviations √(u-t) from x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelGrid {
    pub times: Vec<f64>,
    pub horizons: Vec<f64>,
    pub xs: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl Default for KernelGrid {
    fn default() -> Self {
        Self {
            times: vec![0.0, 0.25, 0.5],
            horizons: vec![0.05, 0.1, 0.25, 0.5],
            xs: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            offsets: vec![-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0],
        }
    }
}

impl KernelGrid {
    pub fn points(&self) -> Vec<(f64, f64, f64, f64)> {
        let mut out = Vec::new();
        for &t in &self.times {
            for &tau in &self.horizons {
                if t + tau > 1.0 + 1e-12 {
                    continue;
                }
                for &x in &self.xs {
                    for &d in &self.offsets {
                        out.push((t, x, t + tau, x + d * tau.sqrt()));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HRatioReport {
    pub sup: f64,
    /// sup|b| over [0,1] when b depends on time only.
    pub b_sup: Option<f64>,
    pub finite: bool,
    pub at: Vec<f64>,
    pub points: usize,
}

/// sup of |h_x/h| with h = Γ/q over the grid; h_x/h = ∂ₓlog Γ - (z-x)/(u-t).
pub fn h_ratio_diagnostic(kernel: &TransitionKernel, grid: &KernelGrid) -> Result<HRatioReport> {
    let pts = grid.points();
    let mut sup = 0.0f64;
    let mut at = Vec::new();
    let mut finite = true;
    for &(t, x, u, z) in &pts {
        let r = kernel.gamma_log_dx(t, x, u, z)? - (z - x) / (u - t);
        if !r.is_finite() {
            finite = false;
        }
        if r.abs() > sup || !r.is_finite() {
            sup = r.abs();
            at = vec![t, x, u, z];
        }
    }
    Ok(HRatioReport { sup, b_sup: kernel.transform().b_sup(), finite, at, points: pts.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AronsonConstants {
    pub m1: f64,
    pub alpha1: f64,
    pub m2: f64,
    pub alpha2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AronsonReport {
    pub constants: Option<AronsonConstants>,
    /// Point where no lattice constant worked, if any.
    pub violation: Option<Vec<f64>>,
    pub points: usize,
}

const ARONSON_M_FLOOR: f64 = 1.0 / 1024.0;

/// Searches M₁q(α₁τ,x,z) ≤ Γ(t,x;u,z) ≤ M₂q(α₂τ,x,z) over a coarse lattice:
/// α₁ falls from 1 and α₂ rises from 1 until the grid extreme of Γ/q(ατ) gives
/// a usable M (at least 1/1024 below, at most 1024 above). M is then rounded
/// to a power of two on the safe side.
pub fn aronson_check(kernel: &TransitionKernel, grid: &KernelGrid) -> Result<AronsonReport> {
    let pts = grid.points();
    let mut gam = Vec::with_capacity(pts.len());
    for &(t, x, u, z) in &pts {
        gam.push(kernel.gamma(t, x, u, z)?);
    }
    let ratios = |alpha: f64| -> (f64, f64, usize, usize) {
        let (mut lo, mut hi, mut ilo, mut ihi) = (f64::INFINITY, 0.0f64, 0, 0);
        for (i, (&(t, x, u, z), g)) in pts.iter().zip(&gam).enumerate() {
            let r = g / q(alpha * (u - t), x, z);
            if r < lo {
                lo = r;
                ilo = i;
            }
            if r > hi {
                hi = r;
                ihi = i;
            }
        }
        (lo, hi, ilo, ihi)
    };
    let snap_down = |m: f64| if m >= 1.0 - 1e-12 { 1.0 } else { 2f64.powf(m.log2().floor()) };
    let snap_up = |m: f64| if m <= 1.0 + 1e-12 { 1.0 } else { 2f64.powf(m.log2().ceil()) };

    let mut lower = None;
    let mut worst_lo = 0;
    for k in 0..10 {
        let alpha = 1.0 - 0.1 * k as f64;
        let (lo, _, i, _) = ratios(alpha);
        if lo >= ARONSON_M_FLOOR {
            lower = Some((snap_down(lo), alpha));
            break;
        }
        worst_lo = i;
    }
    let mut upper = None;
    let mut worst_hi = 0;
    for alpha in [1.0, 1.25, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0] {
        let (_, hi, _, i) = ratios(alpha);
        if hi <= 1.0 / ARONSON_M_FLOOR {
            upper = Some((snap_up(hi), alpha));
            break;
        }
        worst_hi = i;
    }
    let pt = |i: usize| {
        let (t, x, u, z) = pts[i];
        vec![t, x, u, z]
    };
    Ok(match (lower, upper) {
        (Some((m1, alpha1)), Some((m2, alpha2))) => {
            AronsonReport { constants: Some(AronsonConstants { m1, alpha1, m2, alpha2 }), violation: None, points: pts.len() }
        }
        (None, _) => AronsonReport { constants: None, violation: Some(pt(worst_lo)), points: pts.len() },
        (_, None) => AronsonReport { constants: None, violation: Some(pt(worst_hi)), points: pts.len() },
    })
}

/// Pricing window half-width in standard deviations of the Gaussian kernel.
pub const WINDOW_SD: f64 = 8.0;
/// Largest kernel mass the window may leave out.
pub const WINDOW_MISS: f64 = 1e-8;

/// F, H and w = a. H(t,x) = ∫f(y)G(t,x;1,y)dy is integrated directly; F is
/// the same integral started from operational time, F(t,z) = H(V(t),z).
#[derive(Debug)]
pub struct PricingFunctions {
    kernel: Arc<TransitionKernel>,
    payoff: PayoffSpec,
    pub panels: usize,
    pub window_sd: f64,
    /// f∘A⁻¹(1,·) affine: H is f at the transformed mean, no quadrature needed.
    affine: bool,
}

pub fn build_pricing(kernel: Arc<TransitionKernel>) -> Result<PricingFunctions> {
    // Simpson on a Gaussian-weighted smooth integrand converges
    // geometrically; 32 panels over ±8 sd is already at rounding level.
    build_pricing_with(kernel, WINDOW_SD, 32)
}

pub fn build_pricing_with(kernel: Arc<TransitionKernel>, window_sd: f64, panels: usize) -> Result<PricingFunctions> {
    let payoff = kernel.model().payoff.clone().ok_or_else(|| Error::Config("pricing needs a payoff".into()))?;
    // two-sided Gaussian tail outside ±window_sd
    let missing = statrs::function::erf::erfc(window_sd / std::f64::consts::SQRT_2);
    if missing > WINDOW_MISS {
        return Err(Error::TailBoundExceeded { missing });
    }
    let model = kernel.model();
    let linear_a = model.coeff.is_constant().is_some() || kernel.transform().ou_rate().is_some();
    let affine_f = matches!(payoff.kind, PayoffKind::Identity | PayoffKind::Affine { .. } | PayoffKind::Constant { .. });
    let affine = linear_a && affine_f && kernel.is_closed();
    Ok(PricingFunctions { kernel, payoff, panels, window_sd, affine })
}

impl PricingFunctions {
    pub fn kernel(&self) -> &Arc<TransitionKernel> {
        &self.kernel
    }

    pub fn payoff(&self) -> &PayoffSpec {
        &self.payoff
    }

    pub fn w(&self, t: f64, x: f64) -> f64 {
        self.kernel.model().a(t, x)
    }

    /// Growth bound |f(y)| ≤ k₁exp(k₂|A(1,y)|), checked where the window ends.
    fn check_growth(&self, y_tilde: f64) -> Result<()> {
        let tr = self.kernel.transform();
        let y = tr.eval_a_inv(1.0, y_tilde)?;
        let bound = self.payoff.k1 * (self.payoff.k2 * y_tilde.abs()).exp();
        if self.payoff.f(y).abs() > bound * (1.0 + 1e-12) {
            return Err(Error::AssumptionViolation {
                assumption: "payoff growth |f| <= k1 exp(k2 |A(1,.)|)".into(),
                witness: format!("y={y}"),
            });
        }
        Ok(())
    }

    /// H(t,x) = ∫ f(y) G(t,x;1,y) dy.
    pub fn h(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.h_with_dx(t, x, false)?.0)
    }

    /// ∂ₓH(t,x), from the Gaussian score under the same quadrature.
    pub fn h_x(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.h_with_dx(t, x, true)?.1)
    }

    /// F(t,z) = ∫ f(y) G(V(t),z;1,y) dy.
    pub fn f(&self, t: f64, z: f64) -> Result<f64> {
        self.h(self.kernel.model().v(t), z)
    }

    fn h_with_dx(&self, t: f64, x: f64, want_dx: bool) -> Result<(f64, f64)> {
        let model = self.kernel.model();
        let tr = self.kernel.transform();
        if t >= 1.0 - MIN_HORIZON {
            return Ok((self.payoff.f(x), self.payoff.f_prime(x)));
        }
        let xt = tr.eval_a(t, x)?;
        let a_tx = model.a(t, x);
        let fa = |yt: f64| -> Result<f64> { Ok(self.payoff.f(tr.eval_a_inv(1.0, yt)?)) };
        if !self.kernel.is_closed() {
            let surf = self.kernel.numeric_surface(t, xt, 1.0)?;
            let row = surf.last();
            let mut acc = 0.0;
            for (i, w) in row.iter().enumerate() {
                if *w > 0.0 {
                    acc += fa(surf.z(i))? * w;
                }
            }
            let h = acc * surf.dz;
            let dx = if want_dx {
                let d = 0.02;
                (self.h(t, tr.eval_a_inv(t, xt + d)?)? - self.h(t, tr.eval_a_inv(t, xt - d)?)?) / (2.0 * d) / a_tx
            } else {
                0.0
            };
            return Ok((h, dx));
        }
        let form = self.kernel.form(t, xt, 1.0)?;
        let sd = form.s.sqrt();
        if self.affine {
            let y = tr.eval_a_inv(1.0, form.m)?;
            let dy_dm = model.a(1.0, y);
            return Ok((self.payoff.f(y), self.payoff.f_prime(y) * dy_dm * form.m_x / a_tx));
        }
        let hw = self.window_sd * sd + self.payoff.k2 * form.s;
        self.check_growth(form.m - hw)?;
        self.check_growth(form.m + hw)?;
        let h = simpson(|yt| fa(yt).unwrap_or(f64::NAN) * q(form.s, form.m, yt), form.m - hw, form.m + hw, self.panels);
        if !h.is_finite() {
            return Err(Error::QuadratureFailure { tol: WINDOW_MISS, budget: self.panels });
        }
        let dx = if want_dx {
            let score = |yt: f64| (yt - form.m) / form.s;
            simpson(|yt| fa(yt).unwrap_or(f64::NAN) * q(form.s, form.m, yt) * score(yt), form.m - hw, form.m + hw, self.panels)
                * form.m_x
                / a_tx
        } else {
            0.0
        };
        Ok((h, dx))
    }

    /// ξ(t,a) by plain Newton from `guess`, falling back to [`Self::xi`]
    /// when it does not settle within a few steps.
    pub fn xi_near(&self, t: f64, level: f64, guess: f64) -> Result<f64> {
        if t >= 1.0 - MIN_HORIZON {
            return self.payoff_inverse(level);
        }
        let mut x = guess;
        for _ in 0..8 {
            let (h, hx) = self.h_with_dx(t, x, true)?;
            if !(hx > 0.0) {
                break;
            }
            let step = (h - level) / hx;
            x -= step;
            if step.abs() < 1e-12 * (1.0 + x.abs()) {
                return Ok(x);
            }
        }
        self.xi(t, level)
    }

    /// ξ(t,a): the x with H(t,x) = a, by bracketing and safeguarded Newton.
    pub fn xi(&self, t: f64, level: f64) -> Result<f64> {
        if t >= 1.0 - MIN_HORIZON {
            return self.payoff_inverse(level);
        }
        let bound = 1e3;
        let (mut lo, mut hi) = (-1.0f64, 1.0f64);
        while self.h(t, lo)? > level {
            lo *= 2.0;
            if lo < -bound {
                return Err(Error::RootFindFailure(format!("H({t},.) stays above {level}")));
            }
        }
        while self.h(t, hi)? < level {
            hi *= 2.0;
            if hi > bound {
                return Err(Error::RootFindFailure(format!("H({t},.) stays below {level}")));
            }
        }
        // Newton on the bracket, falling back to bisection when a step leaves it
        let mut x = 0.5 * (lo + hi);
        for _ in 0..200 {
            let (h, hx) = self.h_with_dx(t, x, true)?;
            if h < level {
                lo = x;
            } else {
                hi = x;
            }
            let newton = x - (h - level) / hx;
            let next = if hx > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            let done = (next - x).abs() < 1e-12 * (1.0 + x.abs()) || hi - lo < 1e-12 * (1.0 + x.abs());
            x = next;
            if done {
                break;
            }
        }
        Ok(x)
    }

    fn payoff_inverse(&self, level: f64) -> Result<f64> {
        let (mut lo, mut hi) = (-1.0f64, 1.0f64);
        let f = |x: f64| self.payoff.f(x);
        while f(lo) > level {
            lo *= 2.0;
            if lo < -1e6 {
                return Err(Error::RootFindFailure(format!("f stays above {level}")));
            }
        }
        while f(hi) < level {
            hi *= 2.0;
            if hi > 1e6 {
                return Err(Error::RootFindFailure(format!("f stays below {level}")));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoeffSpec, PayoffSpec, Scenario};
    use crate::quad::adaptive;

    fn kernel_of(s: Scenario) -> TransitionKernel {
        TransitionKernel::for_model(s.build().unwrap()).unwrap()
    }

    fn shifted(b: f64) -> TransitionKernel {
        let tr = SpaceTransform::with_time_drift(Arc::new(ModelSpec::back_pedersen()), move |_| b);
        TransitionKernel::build(Arc::new(tr), KernelBackend::ClosedTimeOnly).unwrap()
    }

    #[test]
    fn gaussian_kernel_basics() {
        assert!((gaussian_q(1.0, 0.0, 0.0).unwrap() - 0.398_942_280_4).abs() < 1e-10);
        assert_eq!(gaussian_q(0.3, 0.2, -0.7).unwrap(), gaussian_q(0.3, -0.7, 0.2).unwrap());
        let mass = adaptive(|y| q(0.25, 0.0, y), -10.0, 10.0, 1e-12, 1e-15, 200).unwrap();
        assert!((mass - 1.0).abs() < 1e-10);
        assert!(matches!(gaussian_q(0.0, 0.0, 0.0), Err(Error::DomainError(_))));
    }

    #[test]
    fn zero_drift_kernel_is_the_heat_kernel() {
        let k = shifted(0.0);
        assert_eq!(k.gamma(0.1, 0.3, 0.6, -0.2).unwrap(), q(0.5, 0.3, -0.2));
    }

    #[test]
    fn constant_drift_shifts_the_mean() {
        let k = shifted(0.2);
        let g = k.gamma_closed(0.0, 0.0, 1.0, 0.2).unwrap();
        assert!((g - q(1.0, 0.2, 0.2)).abs() < 1e-15);
        assert!((g - 0.398_94).abs() < 1e-5);
    }

    #[test]
    fn mean_reverting_kernel_formula() {
        let k = kernel_of(Scenario::ornstein_uhlenbeck(1.3));
        assert_eq!(k.backend(), KernelBackend::ClosedOu);
        let (s, t, x, z): (f64, f64, f64, f64) = (0.1, 0.7, 0.4, -0.3);
        let var = (1.0 - (-2.0 * 1.3 * (t - s)).exp()) / (2.0 * 1.3);
        let mean = x * (-1.3 * (t - s)).exp();
        assert!((k.gamma(s, x, t, z).unwrap() - q(var, mean, z)).abs() < 1e-14);
        assert!(matches!(k.gamma_closed(s, x, t, z), Err(Error::BackendMismatch(_))));
    }

    #[test]
    fn gaussian_case_kernels() {
        let k = kernel_of(Scenario::back_pedersen());
        let model = k.model().clone();
        for &(t, x, z) in &[(0.0, 0.0, 0.5), (0.3, -0.4, 0.8), (0.9, 1.0, 1.1)] {
            let v = model.v(t);
            assert!((k.g(t, x, 0.95, z).unwrap() - q(0.95 - t, x, z)).abs() < 1e-14);
            assert!((k.log_dx_rho(t, x, z).unwrap() - (z - x) / (v - t)).abs() < 1e-12);
        }
    }

    #[test]
    fn equilibrium_family_log_derivative() {
        let k = kernel_of(Scenario::sqrt_quadratic());
        let tr = k.transform().clone();
        let model = k.model().clone();
        for &(t, x, z) in &[(0.1, 0.3, -0.5), (0.5, -1.0, 0.2), (0.8, 0.5, 0.9)] {
            let v = model.v(t);
            let closed = (tr.eval_a(v, z).unwrap() - tr.eval_a(t, x).unwrap() - tr.b_int(t, v).unwrap())
                / (model.a(t, x) * (v - t));
            let got = k.log_dx_rho(t, x, z).unwrap();
            assert!((got - closed).abs() < 1e-12);
            // oracle: central difference of log ρ
            let h = 1e-5;
            let fd = (k.rho(t, x + h, z).unwrap().ln() - k.rho(t, x - h, z).unwrap().ln()) / (2.0 * h);
            assert!((got - fd).abs() < 1e-6, "{got} vs {fd}");
        }
    }

    #[test]
    fn g_integrates_to_one_with_zero_mean_derivative() {
        let k = kernel_of(Scenario::sqrt_quadratic());
        for &(t, u, x) in &[(0.0, 0.5, 0.0), (0.2, 0.9, -1.0), (0.5, 0.51, 0.7)] {
            let mass = adaptive(|z| k.g(t, x, u, z).unwrap(), -40.0, 40.0, 1e-12, 1e-14, 4000).unwrap();
            let dmass = adaptive(|z| k.g_dx(t, x, u, z).unwrap(), -40.0, 40.0, 1e-12, 1e-14, 4000).unwrap();
            assert!((mass - 1.0).abs() < 1e-6, "{mass}");
            assert!(dmass.abs() < 1e-6, "{dmass}");
        }
    }

    #[test]
    fn chapman_kolmogorov() {
        let k = kernel_of(Scenario::sqrt_quadratic());
        let (t, s, u, x, z) = (0.1, 0.4, 0.8, 0.3, -0.2);
        let lhs = adaptive(|y| k.g(t, x, s, y).unwrap() * k.g(s, y, u, z).unwrap(), -30.0, 30.0, 1e-10, 1e-14, 4000).unwrap();
        assert!((lhs - k.g(t, x, u, z).unwrap()).abs() < 1e-4);
    }

    #[test]
    fn h_ratio_is_the_integrated_drift_rate() {
        assert_eq!(h_ratio_diagnostic(&shifted(0.0), &KernelGrid::default()).unwrap().sup, 0.0);
        let k = kernel_of(Scenario::sqrt_quadratic());
        let r = h_ratio_diagnostic(&k, &KernelGrid::default()).unwrap();
        assert!(r.finite && r.sup <= r.b_sup.unwrap() + 1e-9);
        let tr = k.transform();
        let (t, x, u, z) = (0.2, 0.5, 0.7, 1.0);
        let ratio = k.gamma_log_dx(t, x, u, z).unwrap() - (z - x) / (u - t);
        assert!((ratio + tr.b_int(t, u).unwrap() / (u - t)).abs() < 1e-12);
    }

    #[test]
    fn aronson_constants() {
        let r = aronson_check(&shifted(0.0), &KernelGrid::default()).unwrap();
        assert_eq!(r.constants, Some(AronsonConstants { m1: 1.0, alpha1: 1.0, m2: 1.0, alpha2: 1.0 }));
        let r = aronson_check(&shifted(0.2), &KernelGrid::default()).unwrap();
        let c = r.constants.unwrap();
        // oracle: completing the square, Γ/q(τ) = exp(0.2(z-x) - 0.02τ)
        let grid = KernelGrid::default();
        let lo = grid.points().iter().map(|&(t, x, u, z)| (0.2 * (z - x) - 0.02 * (u - t)).exp()).fold(f64::INFINITY, f64::min);
        assert!(c.m1 <= lo && c.m1 > lo / 2.0);
    }

    #[test]
    fn pricing_identity_payoff_gaussian() {
        let k = Arc::new(kernel_of(Scenario::back_pedersen()));
        let p = build_pricing(k).unwrap();
        for &(t, x) in &[(0.0, 0.3), (0.5, -1.2), (0.99, 2.0)] {
            assert_eq!(p.h(t, x).unwrap(), x);
            assert_eq!(p.f(t, x).unwrap(), x);
            assert_eq!(p.h_x(t, x).unwrap(), 1.0);
        }
    }

    #[test]
    fn pricing_by_quadrature_matches_gaussian_oracle() {
        // soft step payoff on a ≡ 1: H(t,x) = x + 0.3 E[tanh(x + √(1-t)N)]
        let mut s = Scenario::back_pedersen();
        s.payoff = Some(PayoffSpec { kind: PayoffKind::SoftStep { scale: 0.3 }, k1: 2.0, k2: 1.0 });
        let p = build_pricing(Arc::new(kernel_of(s))).unwrap();
        let (t, x) = (0.4f64, 0.25);
        let sd = (1.0 - t).sqrt();
        let oracle = x + 0.3 * adaptive(|e| (x + sd * e).tanh() * q(1.0, 0.0, e), -12.0, 12.0, 1e-13, 1e-15, 2000).unwrap();
        assert!((p.h(t, x).unwrap() - oracle).abs() < 1e-10);
        let hx = (p.h(t, x + 1e-5).unwrap() - p.h(t, x - 1e-5).unwrap()) / 2e-5;
        assert!((p.h_x(t, x).unwrap() - hx).abs() < 1e-7);
        assert!((p.h(1.0, x).unwrap() - (x + 0.3 * x.tanh())).abs() < 1e-15);
    }

    #[test]
    fn constant_payoff_prices_flat() {
        let mut s = Scenario::sqrt_quadratic();
        s.payoff = Some(PayoffSpec { kind: PayoffKind::Constant { value: 2.5 }, k1: 2.5, k2: 0.0 });
        let p = build_pricing(Arc::new(kernel_of(s))).unwrap();
        assert!((p.h(0.3, 0.7).unwrap() - 2.5).abs() < 1e-12);
        assert!((p.f(0.3, 0.7).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn narrow_window_is_refused() {
        let k = Arc::new(kernel_of(Scenario::back_pedersen()));
        assert!(matches!(build_pricing_with(k, 4.0, 100), Err(Error::TailBoundExceeded { .. })));
    }

    #[test]
    fn pricing_is_increasing_for_the_equilibrium_family() {
        let p = build_pricing(Arc::new(kernel_of(Scenario::sqrt_quadratic()))).unwrap();
        let mut last = f64::NEG_INFINITY;
        for i in 0..41 {
            let h = p.h(0.3, -4.0 + 0.2 * i as f64).unwrap();
            assert!(h > last);
            last = h;
        }
        assert!((p.h(1.0, 0.4).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn xi_inverts_h() {
        let p = build_pricing(Arc::new(kernel_of(Scenario::sqrt_quadratic()))).unwrap();
        let x = p.xi(0.5, 0.3).unwrap();
        assert!((p.h(0.5, x).unwrap() - 0.3).abs() < 1e-10);
    }

    #[test]
    fn numeric_backend_matches_closed_form() {
        let closed = kernel_of(Scenario::sqrt_quadratic());
        let numeric = TransitionKernel::build(closed.transform().clone(), KernelBackend::Numeric).unwrap();
        let (t, x, u) = (0.2, 0.1, 0.6);
        let surf = numeric.numeric_surface(t, x, u).unwrap();
        let l1: f64 = (0..surf.nz).map(|i| (surf.last()[i] - closed.gamma(t, x, u, surf.z(i)).unwrap()).abs()).sum::<f64>() * surf.dz;
        assert!(l1 < 1e-3, "{l1:e}");
    }

    #[test]
    fn numeric_backend_for_a_general_drift() {
        let mut s = Scenario::back_pedersen();
        s.coefficient = CoeffSpec::TanhBump { base: 1.0, amp: 0.5 };
        let k = kernel_of(s);
        assert_eq!(k.backend(), KernelBackend::Numeric);
        let surf = k.numeric_surface(0.0, 0.0, 0.3).unwrap();
        assert!((surf.mass(0) - 1.0).abs() < 1e-5, "{} {}", surf.mass(0), surf.mass(surf.u_grid.len() - 1));
        let r = h_ratio_diagnostic(&k, &KernelGrid { times: vec![0.0], horizons: vec![0.25], xs: vec![0.0], offsets: vec![-1.0, 0.0, 1.0] }).unwrap();
        // |b| ≤ amp/2 here; the ratio is bounded by sup|b| plus FD noise
        assert!(r.finite && r.sup < 0.25 + 0.1, "{r:?}");
    }
}
