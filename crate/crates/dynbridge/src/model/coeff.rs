use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::HermiteTable;

/// Shipped diffusion-coefficient families.
///
/// The first five solve a_t + (a²/2)·a_zz = 0; `Quadratic` and `TanhBump` do
/// not and exercise the general (state-dependent drift) code paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CoeffSpec {
    /// a ≡ a0
    Constant { a0: f64 },
    /// a = √(k1(z+k2)² + k3·e^(-k1 t))
    SqrtQuadratic { k1: f64, k2: f64, k3: f64 },
    /// a = g(z)/√(k1 t + k2) with g'' = k1/g, g(0) = g0, g'(0) = 0
    SeparableTime { k1: f64, k2: f64, g0: f64, half_width: f64 },
    /// a = y(z/√(t+t_shift)) with y²y'' = x·y', y(0) = y0, y'(0) = slope
    SelfSimilar { y0: f64, slope: f64, t_shift: f64, half_width: f64 },
    /// a = e^(-2k1 t)·y(z·e^(2k1 t)) with -½y²y'' = 2k1(x y' - y), y(0) = y0, y'(0) = 0
    ScaledSelfSimilar { k1: f64, y0: f64, half_width: f64 },
    /// a = 1 + z²; fails the volatility PDE
    Quadratic,
    /// a = base + amp·tanh(z); time-homogeneous, not equilibrium-ready
    TanhBump { base: f64, amp: f64 },
}

impl CoeffSpec {
    pub fn equilibrium_ready(&self) -> bool {
        matches!(
            self,
            CoeffSpec::Constant { .. }
                | CoeffSpec::SqrtQuadratic { .. }
                | CoeffSpec::SeparableTime { .. }
                | CoeffSpec::SelfSimilar { .. }
                | CoeffSpec::ScaledSelfSimilar { .. }
        )
    }
}

/// a and its first partials at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoeffValues {
    pub a: f64,
    pub a_t: f64,
    pub a_z: f64,
    pub a_zz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeBackend {
    #[default]
    Analytic,
    FiniteDifference,
}

/// Relative step of the central-difference fallback.
pub const FD_STEP: f64 = 1e-5;

/// Tabulated solution of a second-order profile ODE y'' = F(x, y, y').
///
/// Values come from a cubic Hermite table built on RK4 nodes; y'' is returned
/// through the ODE itself, so residuals built from (y, y', y'') vanish up to
/// the table accuracy of y and y'. Outside the table the profile continues
/// linearly and never drops below the smallest tabulated value.
#[derive(Debug, Clone)]
pub struct OdeProfile {
    y: HermiteTable,
    dy: HermiteTable,
    rhs: ProfileRhs,
    floor: f64,
}

#[derive(Debug, Clone, Copy)]
enum ProfileRhs {
    InverseForce { k1: f64 },
    SelfSimilar,
    Scaled { k1: f64 },
}

impl ProfileRhs {
    fn eval(self, x: f64, y: f64, dy: f64) -> f64 {
        match self {
            ProfileRhs::InverseForce { k1 } => k1 / y,
            ProfileRhs::SelfSimilar => x * dy / (y * y),
            ProfileRhs::Scaled { k1 } => -4.0 * k1 * (x * dy - y) / (y * y),
        }
    }
}

const ODE_STEP: f64 = 1e-3;

impl OdeProfile {
    fn solve(rhs: ProfileRhs, y0: f64, dy0: f64, half_width: f64) -> Result<Self> {
        let n = (half_width / ODE_STEP).ceil() as usize;
        let h = half_width / n as f64;
        let march = |dir: f64| -> Result<Vec<(f64, f64)>> {
            let mut out = Vec::with_capacity(n + 1);
            let (mut y, mut p) = (y0, dy0);
            out.push((y, p));
            let s = dir * h;
            for i in 0..n {
                let x = dir * i as f64 * h;
                let f = |x: f64, y: f64, p: f64| rhs.eval(x, y, p);
                let (k1y, k1p) = (p, f(x, y, p));
                let (k2y, k2p) = (p + 0.5 * s * k1p, f(x + 0.5 * s, y + 0.5 * s * k1y, p + 0.5 * s * k1p));
                let (k3y, k3p) = (p + 0.5 * s * k2p, f(x + 0.5 * s, y + 0.5 * s * k2y, p + 0.5 * s * k2p));
                let (k4y, k4p) = (p + s * k3p, f(x + s, y + s * k3y, p + s * k3p));
                y += s / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
                p += s / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
                if !(y > 0.0) || !y.is_finite() || !p.is_finite() {
                    return Err(Error::OdeFailure(format!("profile leaves y > 0 at x = {}", x + s)));
                }
                out.push((y, p));
            }
            Ok(out)
        };
        let right = march(1.0)?;
        let left = march(-1.0)?;
        let mut ys = Vec::with_capacity(2 * n + 1);
        let mut ps = Vec::with_capacity(2 * n + 1);
        for &(y, p) in left.iter().rev().chain(right.iter().skip(1)) {
            ys.push(y);
            ps.push(p);
        }
        let x0 = -(n as f64) * h;
        let pps: Vec<f64> = ys
            .iter()
            .zip(&ps)
            .enumerate()
            .map(|(i, (&y, &p))| rhs.eval(x0 + i as f64 * h, y, p))
            .collect();
        let floor = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(Self {
            y: HermiteTable::new(x0, h, ys, ps.clone()),
            dy: HermiteTable::new(x0, h, ps, pps),
            rhs,
            floor,
        })
    }

    /// (y, y', y'') at x.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let (lo, hi) = (self.y.x_min(), self.y.x_max());
        if x < lo || x > hi {
            let edge = if x < lo { lo } else { hi };
            let (ye, pe) = (self.y.eval(edge), self.dy.eval(edge));
            let y = ye + pe * (x - edge);
            return if y < self.floor { (self.floor, 0.0, 0.0) } else { (y, pe, 0.0) };
        }
        let y = self.y.eval(x);
        let p = self.dy.eval(x);
        (y, p, self.rhs.eval(x, y, p))
    }

    pub fn min_value(&self) -> f64 {
        self.floor
    }

    pub fn half_width(&self) -> f64 {
        self.y.x_max()
    }
}

/// Closed-form transform A(t,x) = ∫₀ˣ dy/a(t,y) when the family has one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClosedTransform {
    Scale { a0: f64 },
    Asinh { k1: f64, k2: f64, k3: f64 },
}

impl ClosedTransform {
    pub fn a_of(&self, t: f64, x: f64) -> f64 {
        match *self {
            ClosedTransform::Scale { a0 } => x / a0,
            ClosedTransform::Asinh { k1, k2, k3 } => {
                let r = (k3 * (-k1 * t).exp()).sqrt();
                let s = k1.sqrt();
                ((s * (x + k2) / r).asinh() - (s * k2 / r).asinh()) / s
            }
        }
    }

    pub fn a_inv(&self, t: f64, u: f64) -> f64 {
        match *self {
            ClosedTransform::Scale { a0 } => a0 * u,
            ClosedTransform::Asinh { k1, k2, k3 } => {
                let r = (k3 * (-k1 * t).exp()).sqrt();
                let s = k1.sqrt();
                r / s * (s * u + (s * k2 / r).asinh()).sinh() - k2
            }
        }
    }
}

/// The coefficient a(t,z) with derivatives and its certified lower bound.
#[derive(Debug, Clone)]
pub struct DiffusionCoefficient {
    pub spec: CoeffSpec,
    pub backend: DerivativeBackend,
    profile: Option<OdeProfile>,
    epsilon: f64,
}

impl DiffusionCoefficient {
    pub fn new(spec: CoeffSpec, backend: DerivativeBackend) -> Result<Self> {
        let bad = |what: &str| Err(Error::Config(format!("{what} in {spec:?}")));
        let (profile, epsilon) = match spec {
            CoeffSpec::Constant { a0 } => {
                if !(a0 > 0.0) {
                    return bad("a0 must be positive");
                }
                (None, a0)
            }
            CoeffSpec::SqrtQuadratic { k1, k2, k3 } => {
                if !(k1 > 0.0 && k2 > 0.0 && k3 > 0.0) {
                    return bad("k1, k2, k3 must be positive");
                }
                // minimum over z at z = -k2, over t at t = 1
                (None, (k3 * (-k1).exp()).sqrt())
            }
            CoeffSpec::SeparableTime { k1, k2, g0, half_width } => {
                if !(k1 > 0.0 && k2 > 0.0 && g0 > 0.0 && half_width > 0.0) {
                    return bad("k1, k2, g0, half_width must be positive");
                }
                let p = OdeProfile::solve(ProfileRhs::InverseForce { k1 }, g0, 0.0, half_width)?;
                let eps = p.min_value() / (k1 + k2).sqrt();
                (Some(p), eps)
            }
            CoeffSpec::SelfSimilar { y0, slope, t_shift, half_width } => {
                if !(y0 > 0.0 && t_shift > 0.0 && half_width > 0.0) {
                    return bad("y0, t_shift, half_width must be positive");
                }
                let p = OdeProfile::solve(ProfileRhs::SelfSimilar, y0, slope, half_width)?;
                let eps = p.min_value();
                (Some(p), eps)
            }
            CoeffSpec::ScaledSelfSimilar { k1, y0, half_width } => {
                if !(k1 > 0.0 && y0 > 0.0 && half_width > 0.0) {
                    return bad("k1, y0, half_width must be positive");
                }
                let p = OdeProfile::solve(ProfileRhs::Scaled { k1 }, y0, 0.0, half_width)?;
                let eps = (-2.0 * k1).exp() * p.min_value();
                (Some(p), eps)
            }
            CoeffSpec::Quadratic => (None, 1.0),
            CoeffSpec::TanhBump { base, amp } => {
                if !(base - amp.abs() > 0.0) {
                    return bad("base must exceed |amp|");
                }
                (None, base - amp.abs())
            }
        };
        Ok(Self { spec, backend, profile, epsilon })
    }

    pub fn constant(a0: f64) -> Self {
        Self::new(CoeffSpec::Constant { a0 }, DerivativeBackend::Analytic).expect("positive constant")
    }

    /// Claimed uniform lower bound; `model::validate` re-checks it on a grid.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn equilibrium_ready(&self) -> bool {
        self.spec.equilibrium_ready()
    }

    pub fn is_constant(&self) -> Option<f64> {
        match self.spec {
            CoeffSpec::Constant { a0 } => Some(a0),
            _ => None,
        }
    }

    pub fn closed_transform(&self) -> Option<ClosedTransform> {
        match self.spec {
            CoeffSpec::Constant { a0 } => Some(ClosedTransform::Scale { a0 }),
            CoeffSpec::SqrtQuadratic { k1, k2, k3 } => Some(ClosedTransform::Asinh { k1, k2, k3 }),
            _ => None,
        }
    }

    pub fn ode_profile(&self) -> Option<&OdeProfile> {
        self.profile.as_ref()
    }

    pub fn a(&self, t: f64, z: f64) -> f64 {
        match self.spec {
            CoeffSpec::Constant { a0 } => a0,
            CoeffSpec::SqrtQuadratic { k1, k2, k3 } => (k1 * (z + k2).powi(2) + k3 * (-k1 * t).exp()).sqrt(),
            CoeffSpec::Quadratic => 1.0 + z * z,
            CoeffSpec::TanhBump { base, amp } => base + amp * z.tanh(),
            _ => self.analytic(t, z).a,
        }
    }

    /// Derivatives through the configured backend.
    pub fn derivs(&self, t: f64, z: f64) -> CoeffValues {
        match self.backend {
            DerivativeBackend::Analytic => self.analytic(t, z),
            DerivativeBackend::FiniteDifference => self.finite_diff(t, z),
        }
    }

    pub fn analytic(&self, t: f64, z: f64) -> CoeffValues {
        match self.spec {
            CoeffSpec::Constant { a0 } => CoeffValues { a: a0, a_t: 0.0, a_z: 0.0, a_zz: 0.0 },
            CoeffSpec::SqrtQuadratic { k1, k2, k3 } => {
                let cc = k3 * (-k1 * t).exp();
                let a = (k1 * (z + k2).powi(2) + cc).sqrt();
                CoeffValues { a, a_t: -k1 * cc / (2.0 * a), a_z: k1 * (z + k2) / a, a_zz: k1 * cc / (a * a * a) }
            }
            CoeffSpec::SeparableTime { k1, k2, .. } => {
                let (g, dg, ddg) = self.profile.as_ref().expect("tabulated").eval(z);
                let s = (k1 * t + k2).sqrt();
                CoeffValues { a: g / s, a_t: -0.5 * k1 * g / (s * s * s), a_z: dg / s, a_zz: ddg / s }
            }
            CoeffSpec::SelfSimilar { t_shift, .. } => {
                let tt = t + t_shift;
                let r = tt.sqrt();
                let x = z / r;
                let (y, dy, ddy) = self.profile.as_ref().expect("tabulated").eval(x);
                CoeffValues { a: y, a_t: -0.5 * x * dy / tt, a_z: dy / r, a_zz: ddy / tt }
            }
            CoeffSpec::ScaledSelfSimilar { k1, .. } => {
                let g = (2.0 * k1 * t).exp();
                let x = z * g;
                let (y, dy, ddy) = self.profile.as_ref().expect("tabulated").eval(x);
                CoeffValues { a: y / g, a_t: 2.0 * k1 / g * (x * dy - y), a_z: dy, a_zz: g * ddy }
            }
            CoeffSpec::Quadratic => CoeffValues { a: 1.0 + z * z, a_t: 0.0, a_z: 2.0 * z, a_zz: 2.0 },
            CoeffSpec::TanhBump { base, amp } => {
                let th = z.tanh();
                let sech2 = 1.0 - th * th;
                CoeffValues { a: base + amp * th, a_t: 0.0, a_z: amp * sech2, a_zz: -2.0 * amp * th * sech2 }
            }
        }
    }

    pub fn finite_diff(&self, t: f64, z: f64) -> CoeffValues {
        let hz = FD_STEP * z.abs().max(1.0);
        let ht = FD_STEP * t.abs().max(1.0);
        let a = self.a(t, z);
        let (ap, am) = (self.a(t, z + hz), self.a(t, z - hz));
        CoeffValues {
            a,
            a_t: (self.a(t + ht, z) - self.a(t - ht, z)) / (2.0 * ht),
            a_z: (ap - am) / (2.0 * hz),
            a_zz: (ap - 2.0 * a + am) / (hz * hz),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn families() -> Vec<CoeffSpec> {
        vec![
            CoeffSpec::Constant { a0: 1.3 },
            CoeffSpec::SqrtQuadratic { k1: 1.0, k2: 1.0, k3: 1.0 },
            CoeffSpec::SeparableTime { k1: 0.5, k2: 1.0, g0: 1.0, half_width: 8.0 },
            CoeffSpec::SelfSimilar { y0: 2.0, slope: 0.05, t_shift: 1.0, half_width: 4.0 },
            CoeffSpec::ScaledSelfSimilar { k1: 0.25, y0: 1.0, half_width: 8.0 },
        ]
    }

    #[test]
    fn analytic_and_fd_derivatives_agree() {
        for spec in families() {
            let c = DiffusionCoefficient::new(spec.clone(), DerivativeBackend::Analytic).unwrap();
            for &(t, z) in &[(0.1, -1.2), (0.5, 0.3), (0.9, 2.1)] {
                let an = c.analytic(t, z);
                let fd = c.finite_diff(t, z);
                assert!((an.a_t - fd.a_t).abs() < 1e-7, "{spec:?} a_t");
                assert!((an.a_z - fd.a_z).abs() < 1e-7, "{spec:?} a_z");
                assert!((an.a_zz - fd.a_zz).abs() < 1e-4, "{spec:?} a_zz");
            }
        }
    }

    #[test]
    fn separable_profile_matches_its_first_integral() {
        // g'' = k/g with g(0)=g0, g'(0)=0 integrates to z = g0·√(π/2k)·erfi(√ln(g/g0))
        let (k, g0) = (0.5, 1.0);
        let c = DiffusionCoefficient::new(
            CoeffSpec::SeparableTime { k1: k, k2: 1.0, g0, half_width: 8.0 },
            DerivativeBackend::Analytic,
        )
        .unwrap();
        let erfi = |s: f64| {
            // power series, all terms positive
            let mut term = s;
            let mut acc = s;
            for n in 1..200 {
                term *= s * s / n as f64;
                acc += term / (2 * n + 1) as f64;
            }
            acc * 2.0 / std::f64::consts::PI.sqrt()
        };
        for z in [0.3, 1.0, 2.5, 5.0] {
            let (g, dg, _) = c.ode_profile().unwrap().eval(z);
            let s = (g / g0).ln().sqrt();
            let z_back = g0 * (std::f64::consts::PI / (2.0 * k)).sqrt() * erfi(s);
            assert!((z_back - z).abs() < 1e-8, "z={z}: {z_back}");
            assert!((dg - (2.0 * k * (g / g0).ln()).sqrt()).abs() < 1e-8);
        }
    }

    #[test]
    fn sqrt_quadratic_lower_bound() {
        let c = DiffusionCoefficient::new(CoeffSpec::SqrtQuadratic { k1: 1.0, k2: 1.0, k3: 1.0 }, DerivativeBackend::Analytic).unwrap();
        assert!((c.epsilon() - (-0.5f64).exp()).abs() < 1e-15);
        assert!((c.epsilon() - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn closed_transform_inverts() {
        let ct = ClosedTransform::Asinh { k1: 1.0, k2: 1.0, k3: 1.0 };
        for &(t, x) in &[(0.0, 1.0), (0.7, -3.0), (1.0, 5.0)] {
            assert!((ct.a_inv(t, ct.a_of(t, x)) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_nonpositive_constant() {
        assert!(DiffusionCoefficient::new(CoeffSpec::Constant { a0: 0.0 }, DerivativeBackend::Analytic).is_err());
    }
}
