//! Finite differences: numeric fundamental solutions of w_u = ½w_zz - (bw)_z,
//! and residual checks for the PDE identities the bridge construction relies on.
//!
//! The forward solver is Crank-Nicolson on a conservative Scharfetter-Gummel
//! flux (exponentially fitted, so the drift term is upwinded without losing
//! second order for small cell Péclet numbers). A few implicit Euler half
//! steps start the run to damp the high modes of the narrow initial Gaussian.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{PricingFunctions, TransitionKernel};
use crate::model::{pde_residual, ModelSpec};
use crate::simulate::phi_jet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub dz: f64,
    pub du: f64,
    /// Initial Gaussian width as a multiple of dz.
    pub mollifier_cells: f64,
    /// Implicit Euler half steps before switching to Crank-Nicolson.
    pub rannacher_half_steps: usize,
    /// Largest allowed cell Péclet number |b|·dz/D with D = ½.
    pub peclet_limit: f64,
    pub boundary_tol: f64,
    /// Domain half-width in units of √(horizon - t0).
    pub width_sd: f64,
    /// Keep every n-th time level (0: final level only).
    pub record_every: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            dz: 1.0 / 400.0,
            du: 1.0 / 400.0,
            mollifier_cells: 2.0,
            rannacher_half_steps: 4,
            peclet_limit: 2.0,
            boundary_tol: 1e-8,
            width_sd: 10.0,
            record_every: 0,
        }
    }
}

impl GridConfig {
    pub fn refined(&self, factor: f64) -> Self {
        Self { dz: self.dz / factor, du: self.du / factor, ..*self }
    }
}

/// Density w(u,z) on a uniform z-grid, one row per recorded time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySurface {
    pub t0: f64,
    pub x0: f64,
    pub u_grid: Vec<f64>,
    pub z_min: f64,
    pub dz: f64,
    pub nz: usize,
    pub values: Vec<Vec<f64>>,
    pub du: f64,
    pub delta: f64,
    /// Largest mass found in the outer 1% bands over the recorded rows.
    pub boundary_mass: f64,
}

impl DensitySurface {
    pub fn z(&self, i: usize) -> f64 {
        self.z_min + i as f64 * self.dz
    }

    pub fn z_grid(&self) -> Vec<f64> {
        (0..self.nz).map(|i| self.z(i)).collect()
    }

    pub fn last(&self) -> &[f64] {
        self.values.last().expect("at least the final row")
    }

    pub fn mass(&self, row: usize) -> f64 {
        self.values[row].iter().sum::<f64>() * self.dz
    }

    /// Linear interpolation in z of row `row`; zero outside the grid.
    pub fn density(&self, row: usize, z: f64) -> f64 {
        let s = (z - self.z_min) / self.dz;
        if s < 0.0 || s > (self.nz - 1) as f64 {
            return 0.0;
        }
        let i = (s.floor() as usize).min(self.nz - 2);
        let f = s - i as f64;
        let r = &self.values[row];
        r[i] * (1.0 - f) + r[i + 1] * f
    }

    pub fn final_density(&self, z: f64) -> f64 {
        self.density(self.values.len() - 1, z)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["u".to_string()];
        header.extend(self.z_grid().iter().map(|z| format!("{z}")));
        w.write_record(&header)?;
        for (u, row) in self.u_grid.iter().zip(&self.values) {
            let mut rec = vec![format!("{u}")];
            rec.extend(row.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - 0.5 * x + x * x / 12.0
    } else {
        x / x.exp_m1()
    }
}

/// Solves tridiagonal systems in place (Thomas algorithm).
fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], scratch: &mut [f64]) {
    let n = diag.len();
    scratch[0] = upper[0] / diag[0];
    rhs[0] /= diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * scratch[i - 1];
        scratch[i] = upper[i] / m;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
}

struct Operator {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

impl Operator {
    fn new(n: usize) -> Self {
        Self { lower: vec![0.0; n], diag: vec![0.0; n], upper: vec![0.0; n] }
    }

    /// Fills L from face drifts; interior nodes only, the two ends are Dirichlet.
    fn assemble(&mut self, faces: &[f64], dz: f64) {
        let n = self.diag.len();
        let k = 0.5 / (dz * dz);
        for i in 1..n - 1 {
            let pm = faces[i - 1] * dz / 0.5;
            let pp = faces[i] * dz / 0.5;
            self.lower[i] = k * bernoulli(-pm);
            self.upper[i] = k * bernoulli(pp);
            self.diag[i] = -k * (bernoulli(-pp) + bernoulli(pm));
        }
        self.lower[0] = 0.0;
        self.diag[0] = 0.0;
        self.upper[0] = 0.0;
        self.lower[n - 1] = 0.0;
        self.diag[n - 1] = 0.0;
        self.upper[n - 1] = 0.0;
    }

    fn apply(&self, w: &[f64], out: &mut [f64]) {
        let n = w.len();
        out[0] = 0.0;
        out[n - 1] = 0.0;
        for i in 1..n - 1 {
            out[i] = self.lower[i] * w[i - 1] + self.diag[i] * w[i] + self.upper[i] * w[i + 1];
        }
    }
}

struct Stepper<'a, F> {
    fill: &'a F,
    faces: Vec<f64>,
    bf: Vec<f64>,
    op: Operator,
    lw: Vec<f64>,
    lo: Vec<f64>,
    di: Vec<f64>,
    up: Vec<f64>,
    scratch: Vec<f64>,
    cfg: &'a GridConfig,
}

impl<'a, F: Fn(f64, &[f64], &mut [f64]) -> Result<()>> Stepper<'a, F> {
    fn new(fill: &'a F, faces: Vec<f64>, cfg: &'a GridConfig) -> Self {
        let n = faces.len() + 1;
        Self {
            fill,
            bf: vec![0.0; faces.len()],
            faces,
            op: Operator::new(n),
            lw: vec![0.0; n],
            lo: vec![0.0; n],
            di: vec![0.0; n],
            up: vec![0.0; n],
            scratch: vec![0.0; n],
            cfg,
        }
    }

    fn assemble(&mut self, u: f64) -> Result<()> {
        (self.fill)(u, &self.faces, &mut self.bf)?;
        let p = self.bf.iter().fold(0.0f64, |m, v| m.max(v.abs())) * self.cfg.dz / 0.5;
        if p > self.cfg.peclet_limit {
            return Err(Error::StabilityFailure { peclet: p, limit: self.cfg.peclet_limit });
        }
        self.op.assemble(&self.bf, self.cfg.dz);
        Ok(())
    }

    /// Solves (I - θh L(u_to)) w⁺ = rhs in place.
    fn solve(&mut self, theta_h: f64, w: &mut [f64]) {
        for i in 0..w.len() {
            self.lo[i] = -theta_h * self.op.lower[i];
            self.di[i] = 1.0 - theta_h * self.op.diag[i];
            self.up[i] = -theta_h * self.op.upper[i];
        }
        thomas(&self.lo, &self.di, &self.up, w, &mut self.scratch);
    }

    fn implicit(&mut self, u_to: f64, h: f64, w: &mut [f64]) -> Result<()> {
        self.assemble(u_to)?;
        self.solve(h, w);
        Ok(())
    }

    fn crank_nicolson(&mut self, u_from: f64, u_to: f64, w: &mut [f64]) -> Result<()> {
        let h = u_to - u_from;
        self.assemble(u_from)?;
        self.op.apply(w, &mut self.lw);
        for (wi, li) in w.iter_mut().zip(&self.lw) {
            *wi += 0.5 * h * li;
        }
        self.implicit(u_to, 0.5 * h, w)
    }
}

/// Forward solve with a pointwise drift b(u,z).
pub fn solve_forward<B: Fn(f64, f64) -> f64>(b: B, t0: f64, x0: f64, horizon: f64, cfg: &GridConfig) -> Result<DensitySurface> {
    solve_forward_field(
        |u, zs, out| {
            for (o, &z) in out.iter_mut().zip(zs) {
                *o = b(u, z);
            }
            Ok(())
        },
        t0,
        x0,
        horizon,
        cfg,
    )
}

/// Forward solve with a drift supplied on whole grids at once; `fill(u, zs, out)`
/// writes b(u, zs[i]) into out[i].
pub fn solve_forward_field<F>(fill: F, t0: f64, x0: f64, horizon: f64, cfg: &GridConfig) -> Result<DensitySurface>
where
    F: Fn(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let delta = cfg.mollifier_cells * cfg.dz;
    let t_start = t0 + delta * delta;
    if !(horizon > t_start) {
        return Err(Error::DomainError(format!("horizon {horizon} must exceed t0 + delta^2 = {t_start}")));
    }
    let tau = horizon - t0;

    // domain from the Gaussian spread plus the drift range over the spread
    let spread = cfg.width_sd * tau.sqrt();
    let probe: Vec<f64> = (0..=20).map(|j| x0 - spread + spread * j as f64 / 10.0).collect();
    let mut pb = vec![0.0; probe.len()];
    let mut bmax = 0.0f64;
    for u in [t0, 0.5 * (t0 + horizon), horizon] {
        fill(u, &probe, &mut pb)?;
        bmax = pb.iter().fold(bmax, |m, v| m.max(v.abs()));
    }
    let half = spread + bmax * tau;
    let nz = 2 * (half / cfg.dz).ceil() as usize + 1;
    let z_min = x0 - (nz / 2) as f64 * cfg.dz;
    let zs: Vec<f64> = (0..nz).map(|i| z_min + i as f64 * cfg.dz).collect();
    let faces: Vec<f64> = zs.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();

    // the mollifier is the exact solution at t0 + δ² for locally constant b
    fill(t0, &[x0], &mut pb[..1])?;
    let centre = x0 + pb[0] * delta * delta;
    let norm = 1.0 / (std::f64::consts::TAU * delta * delta).sqrt();
    let mut w: Vec<f64> = zs.iter().map(|z| norm * (-(z - centre).powi(2) / (2.0 * delta * delta)).exp()).collect();
    w[0] = 0.0;
    w[nz - 1] = 0.0;

    let steps = ((horizon - t_start) / cfg.du).ceil().max(1.0) as usize;
    let du = (horizon - t_start) / steps as f64;
    let band = (nz / 100).max(2);
    let boundary = |w: &[f64]| (w[..band].iter().sum::<f64>() + w[nz - band..].iter().sum::<f64>()) * cfg.dz;

    let mut st = Stepper::new(&fill, faces, cfg);
    let mut u_grid = Vec::new();
    let mut values = Vec::new();
    let mut boundary_mass = 0.0f64;
    // Rannacher start: pairs of implicit half steps, rounded up to whole steps
    let start_steps = cfg.rannacher_half_steps.div_ceil(2).min(steps);
    for step in 1..=steps {
        let (u_from, u_to) = (t_start + (step - 1) as f64 * du, t_start + step as f64 * du);
        if step <= start_steps {
            st.implicit(u_from + 0.5 * du, 0.5 * du, &mut w)?;
            st.implicit(u_to, 0.5 * du, &mut w)?;
        } else {
            st.crank_nicolson(u_from, u_to, &mut w)?;
        }
        if cfg.record_every > 0 && step % cfg.record_every == 0 && step < steps {
            boundary_mass = boundary_mass.max(boundary(&w));
            u_grid.push(u_to);
            values.push(w.clone());
        }
    }
    boundary_mass = boundary_mass.max(boundary(&w));
    u_grid.push(horizon);
    values.push(w);
    if boundary_mass > cfg.boundary_tol {
        return Err(Error::GridTooSmall { mass: boundary_mass, limit: cfg.boundary_tol });
    }
    Ok(DensitySurface { t0, x0, u_grid, z_min, dz: cfg.dz, nz, values, du, delta, boundary_mass })
}

/// Largest residual found over a point set, with its location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub name: String,
    pub max_abs: f64,
    pub at: Vec<f64>,
    pub points: usize,
    /// Accuracy the check is held to (the FD noise floor for numeric kernels).
    pub tolerance: f64,
    pub pass: bool,
}

impl ResidualReport {
    fn from_iter<I: IntoIterator<Item = (f64, Vec<f64>)>>(name: &str, tolerance: f64, it: I) -> Self {
        let mut worst = (0.0f64, Vec::new());
        let mut points = 0;
        let mut finite = true;
        for (r, at) in it {
            points += 1;
            if !r.is_finite() {
                finite = false;
                worst = (f64::INFINITY, at);
                break;
            }
            if r.abs() > worst.0 {
                worst = (r.abs(), at);
            }
        }
        Self { name: name.into(), max_abs: worst.0, at: worst.1, points, tolerance, pass: finite && worst.0 < tolerance }
    }
}

/// FD steps for residuals of numeric kernels; the floor follows from the
/// surface accuracy (~1e-5) divided by the squared step.
pub const NUMERIC_STEP: f64 = 0.05;
pub const NUMERIC_FLOOR: f64 = 1e-2;

/// Residual of v_t + b v_x + ½v_xx = 0 for v(t,x) = Γ(t,x;u,z) at fixed (u,z).
/// Points are (t, x̃, u, z̃) in transformed coordinates.
pub fn adjoint_residual(kernel: &TransitionKernel, points: &[(f64, f64, f64, f64)], tolerance: f64) -> Result<ResidualReport> {
    let tr = kernel.transform();
    let mut out = Vec::with_capacity(points.len());
    for &(t, x, u, z) in points {
        let b = tr.eval_b(t, x)?;
        let r = if kernel.is_closed() {
            let j = kernel.gamma_jet(t, x, u, z)?;
            j.t + b * j.x + 0.5 * j.xx
        } else {
            let h = NUMERIC_STEP;
            let g = |t: f64, x: f64| kernel.gamma(t, x, u, z);
            let (c, xp, xm) = (g(t, x)?, g(t, x + h)?, g(t, x - h)?);
            let ht = h * h;
            let gt = (g(t + ht, x)? - g(t - ht, x)?) / (2.0 * ht);
            gt + b * (xp - xm) / (2.0 * h) + 0.5 * (xp - 2.0 * c + xm) / (h * h)
        };
        out.push((r, vec![t, x, u, z]));
    }
    Ok(ResidualReport::from_iter("adjoint equation", tolerance, out))
}

/// Residual of p_t + b p_x + ½p_xx + σ²(b(V,z)p)_z - ½σ²p_zz = 0 for
/// p(t,x̃,z̃) = Γ(t,x̃;V(t),z̃). Points are (t, x̃, z̃).
pub fn joint_density_residual(kernel: &TransitionKernel, points: &[(f64, f64, f64)], tolerance: f64) -> Result<ResidualReport> {
    let tr = kernel.transform();
    let model = tr.model();
    let mut out = Vec::with_capacity(points.len());
    for &(t, x, z) in points {
        let s2 = model.sigma2(t);
        let v = model.v(t);
        let b = tr.eval_b(t, x)?;
        let bz = tr.eval_b(v, z)?;
        // ∂_z b(V,z): zero for time-only drifts, -k in the mean-reverting mode
        let bz_z = match tr.ou_rate() {
            Some(k) => -k,
            None if tr.b_is_time_only() => 0.0,
            None => (tr.eval_b(v, z + 1e-4)? - tr.eval_b(v, z - 1e-4)?) / 2e-4,
        };
        let r = if kernel.is_closed() {
            let j = kernel.p_jet(t, x, z)?;
            j.t + b * j.x + 0.5 * j.xx + s2 * (bz_z * j.value + bz * j.z) - 0.5 * s2 * j.zz
        } else {
            let h = NUMERIC_STEP;
            let p = |t: f64, x: f64, z: f64| kernel.p(t, x, z);
            let c = p(t, x, z)?;
            let (xp, xm) = (p(t, x + h, z)?, p(t, x - h, z)?);
            let (zp, zm) = (p(t, x, z + h)?, p(t, x, z - h)?);
            let ht = h * h;
            let pt = (p(t + ht, x, z)? - p(t - ht, x, z)?) / (2.0 * ht);
            let pz = (zp - zm) / (2.0 * h);
            pt + b * (xp - xm) / (2.0 * h) + 0.5 * (xp - 2.0 * c + xm) / (h * h) + s2 * (bz_z * c + bz * pz)
                - 0.5 * s2 * (zp - 2.0 * c + zm) / (h * h)
        };
        out.push((r, vec![t, x, z]));
    }
    Ok(ResidualReport::from_iter("joint density equation", tolerance, out))
}

/// The three pricing identities on a grid of (t, x) points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingResiduals {
    pub w: ResidualReport,
    pub h: ResidualReport,
    pub f: ResidualReport,
}

impl PricingResiduals {
    pub fn pass(&self) -> bool {
        self.w.pass && self.h.pass && self.f.pass
    }
}

/// FD steps used on the quadrature-defined H and F.
pub const PRICING_STEP_T: f64 = 1e-4;
pub const PRICING_STEP_X: f64 = 1e-3;

/// Residuals of w_t + ½w²w_xx, H_t + ½w²H_xx and F_t + ½σ²a²(V,z)F_zz. The w
/// residual uses the coefficient's own derivatives, H and F centred differences.
pub fn pricing_pde_residual(pricing: &PricingFunctions, points: &[(f64, f64)], tol_w: f64, tol_hf: f64) -> Result<PricingResiduals> {
    let model = pricing.kernel().transform().model().clone();
    let (ht, hx) = (PRICING_STEP_T, PRICING_STEP_X);
    let mut w = Vec::new();
    let mut h = Vec::new();
    let mut f = Vec::new();
    for &(t, x) in points {
        w.push((pde_residual(&model.coeff, t, x), vec![t, x]));
        let a = pricing.w(t, x);
        let c = pricing.h(t, x)?;
        let h_t = (pricing.h(t + ht, x)? - pricing.h(t - ht, x)?) / (2.0 * ht);
        let h_xx = (pricing.h(t, x + hx)? - 2.0 * c + pricing.h(t, x - hx)?) / (hx * hx);
        h.push((h_t + 0.5 * a * a * h_xx, vec![t, x]));
        let av = model.a(model.v(t), x);
        let c = pricing.f(t, x)?;
        let f_t = (pricing.f(t + ht, x)? - pricing.f(t - ht, x)?) / (2.0 * ht);
        let f_zz = (pricing.f(t, x + hx)? - 2.0 * c + pricing.f(t, x - hx)?) / (hx * hx);
        f.push((f_t + 0.5 * model.sigma2(t) * av * av * f_zz, vec![t, x]));
    }
    Ok(PricingResiduals {
        w: ResidualReport::from_iter("w equation", tol_w, w),
        h: ResidualReport::from_iter("H equation", tol_hf, h),
        f: ResidualReport::from_iter("F equation", tol_hf, f),
    })
}

/// Residual of φ_t + (z-x)/(V-t) φ_x + ½φ_xx + ½σ²φ_zz, relative to φ.
pub fn phi_pde_residual(model: &ModelSpec, points: &[(f64, f64, f64)], tolerance: f64) -> ResidualReport {
    let it = points.iter().map(|&(t, x, z)| {
        let j = phi_jet(model, t, x, z);
        let r = j.t + (z - x) / model.profile.gap(t) * j.x + 0.5 * j.xx + 0.5 * model.sigma2(t) * j.zz;
        (r / j.value, vec![t, x, z])
    });
    ResidualReport::from_iter("phi equation", tolerance, it)
}
