//! Filtering the signal from the observed bridge: the Kalman-Bucy filter of
//! the Gaussian case, a particle filter in transformed coordinates, and a
//! consistency check of the Kushner-Stratonovich drift.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::TransitionKernel;
use crate::model::ModelSpec;
use crate::quad::simpson;
use crate::rng::{NodeStream, Tag};
use crate::simulate::{Signal, SignalScheme, SignalState};

#[derive(Debug, Clone, Serialize)]
pub struct KalmanBucyOutput {
    pub times: Vec<f64>,
    pub z_hat: Vec<f64>,
    pub gamma: Vec<f64>,
    /// max |γ_t - (V(t) - t)|
    pub gamma_error: f64,
    /// max |Ẑ_t - X_t|
    pub tracking_error: f64,
}

/// Kalman-Bucy filter for a ≡ 1: dẐ = γ/(V-t)(dX - (Ẑ-X)/(V-t)dt) and
/// γ' = σ² - γ/(V-t), from Ẑ₀ = 0, γ₀ = c, along one observed path.
pub fn kalman_bucy(model: &ModelSpec, times: &[f64], xs: &[f64]) -> Result<KalmanBucyOutput> {
    if times.len() != xs.len() || times.len() < 2 {
        return Err(Error::Config("need matching times and observations".into()));
    }
    if model.coeff.is_constant() != Some(1.0) {
        return Err(Error::Config("the Kalman-Bucy filter applies to a = 1".into()));
    }
    let p = &model.profile;
    let rhs = |t: f64, g: f64| p.sigma2(t) - g / p.gap(t);
    let mut gamma = vec![p.c];
    let mut z_hat = vec![0.0];
    for n in 0..times.len() - 1 {
        let (t0, t1) = (times[n], times[n + 1]);
        let (g0, zh) = (gamma[n], z_hat[n]);
        let tau = p.gap(t0);
        z_hat.push(zh + g0 / tau * ((xs[n + 1] - xs[n]) - (zh - xs[n]) / tau * (t1 - t0)));
        // RK4 with steps short against the 1/(V-t) rate
        let m = ((t1 - t0) / (0.1 * p.gap(t1))).ceil().max(1.0) as usize;
        let h = (t1 - t0) / m as f64;
        let (mut t, mut g) = (t0, g0);
        for _ in 0..m {
            let k1 = rhs(t, g);
            let k2 = rhs(t + 0.5 * h, g + 0.5 * h * k1);
            let k3 = rhs(t + 0.5 * h, g + 0.5 * h * k2);
            let k4 = rhs(t + h, g + h * k3);
            g += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            t += h;
        }
        gamma.push(g);
    }
    let gamma_error = times.iter().zip(&gamma).map(|(&t, g)| (g - p.gap(t)).abs()).fold(0.0, f64::max);
    let tracking_error = xs.iter().zip(&z_hat).map(|(x, z)| (x - z).abs()).fold(0.0, f64::max);
    Ok(KalmanBucyOutput { times: times.to_vec(), z_hat, gamma, gamma_error, tracking_error })
}

#[derive(Debug, Clone, Serialize)]
pub struct ParticleConfig {
    pub n: usize,
    pub seed: u64,
    /// Resample when ESS < resample_frac·n.
    pub resample_frac: f64,
    /// Fail when ESS < floor_frac·n.
    pub floor_frac: f64,
}

impl ParticleConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, resample_frac: 0.5, floor_frac: 0.01 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParticleOutput {
    pub times: Vec<f64>,
    /// Posterior mean of Z_t.
    pub mean: Vec<f64>,
    /// Posterior mean and variance of U_t = A(V(t), Z_t).
    pub u_mean: Vec<f64>,
    pub u_var: Vec<f64>,
    /// ESS after each weight update, before any resampling.
    pub ess: Vec<f64>,
    pub resamples: usize,
}

impl ParticleOutput {
    pub fn min_ess(&self) -> f64 {
        self.ess.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Posterior mean at the observation time closest to t.
    pub fn mean_at(&self, t: f64) -> f64 {
        let i = self.times.iter().enumerate().min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs())).map_or(0, |(i, _)| i);
        self.mean[i]
    }
}

fn systematic_resample(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n);
    let (mut acc, mut j) = (weights[0] / total, 0);
    for i in 0..n {
        let target = (i as f64 + u0) / n as f64;
        while acc < target && j + 1 < n {
            j += 1;
            acc += weights[j] / total;
        }
        out.push(j);
    }
    out
}

fn ess(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    s * s / s2
}

/// Bootstrap filter for U given one path of R observed at `times`. Particles
/// move by the exact U transition; weights use the Euler likelihood
/// exp(κΔR - ½κ²Δt) with κ = p_x/p(t,R,U) + b(t,R).
pub fn particle_filter(kernel: &TransitionKernel, times: &[f64], rs: &[f64], cfg: &ParticleConfig) -> Result<ParticleOutput> {
    if times.len() != rs.len() || times.len() < 2 {
        return Err(Error::Config("need matching times and observations".into()));
    }
    if cfg.n < 2 {
        return Err(Error::Config("need at least two particles".into()));
    }
    if !kernel.is_closed() {
        return Err(Error::BackendMismatch("the particle filter evaluates p_x/p per particle and step".into()));
    }
    let model = kernel.model();
    let tr = kernel.transform();
    let signal = Signal::new(kernel, SignalScheme::Exact)?;
    let mut init = NodeStream::new(cfg.seed, 0, Tag::Particles);
    let mut moves = NodeStream::new(cfg.seed, 1, Tag::Particles);
    let mut resampler = NodeStream::new(cfg.seed, 0, Tag::Resample);
    let mut parts: Vec<SignalState> = (0..cfg.n).map(|_| signal.init_from(init.normal())).collect::<Result<_>>()?;
    let mut logw = vec![0.0; cfg.n];
    let mut w = vec![1.0; cfg.n];
    let mut out = ParticleOutput {
        times: times.to_vec(),
        mean: Vec::with_capacity(times.len()),
        u_mean: Vec::with_capacity(times.len()),
        u_var: Vec::with_capacity(times.len()),
        ess: Vec::new(),
        resamples: 0,
    };
    let summarize = |out: &mut ParticleOutput, parts: &[SignalState], w: &[f64]| {
        let s: f64 = w.iter().sum();
        let mz = parts.iter().zip(w).map(|(p, w)| p.z * w).sum::<f64>() / s;
        let mu = parts.iter().zip(w).map(|(p, w)| p.u * w).sum::<f64>() / s;
        let vu = parts.iter().zip(w).map(|(p, w)| (p.u - mu).powi(2) * w).sum::<f64>() / s;
        out.mean.push(mz);
        out.u_mean.push(mu);
        out.u_var.push(vu);
    };
    summarize(&mut out, &parts, &w);
    for n in 0..times.len() - 1 {
        let (t0, t1) = (times[n], times[n + 1]);
        let dt = t1 - t0;
        let dr = rs[n + 1] - rs[n];
        let b = tr.eval_b(t0, rs[n])?;
        for (p, lw) in parts.iter().zip(logw.iter_mut()) {
            let kappa = kernel.transformed_drift(t0, rs[n], p.u)? + b;
            *lw += kappa * dr - 0.5 * kappa * kappa * dt;
        }
        let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (wi, lw) in w.iter_mut().zip(logw.iter_mut()) {
            *lw -= top;
            *wi = lw.exp();
        }
        let e = ess(&w);
        out.ess.push(e);
        if e < cfg.floor_frac * cfg.n as f64 {
            return Err(Error::DegenerateWeights { ess: e, floor: cfg.floor_frac * cfg.n as f64 });
        }
        if e < cfg.resample_frac * cfg.n as f64 {
            let idx = systematic_resample(&w, resampler.uniform());
            parts = idx.iter().map(|&i| parts[i]).collect();
            logw.fill(0.0);
            w.fill(1.0);
            out.resamples += 1;
        }
        let (v0, v1) = (model.v(t0), model.v(t1));
        let sd = (v1 - v0).max(0.0).sqrt();
        for p in parts.iter_mut() {
            signal.step(p, v0, v1, sd * moves.normal())?;
        }
        summarize(&mut out, &parts, &w);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub max_abs: f64,
    pub at: Option<(f64, f64)>,
    pub points: usize,
}

/// ∫(p_x/p + b)(t,x,z) p(t,x,z) dz against b(t,x): the filtered mean of the
/// bridge drift must be the own-filtration drift.
pub fn ks_consistency(kernel: &TransitionKernel, points: &[(f64, f64)]) -> Result<ConsistencyReport> {
    if !kernel.is_closed() {
        return Err(Error::BackendMismatch("consistency check integrates closed-form jets".into()));
    }
    let tr = kernel.transform();
    let model = kernel.model();
    let mut rep = ConsistencyReport { max_abs: 0.0, at: None, points: points.len() };
    for &(t, x) in points {
        let (m, v) = kernel.gamma_moments(t, x, model.v(t))?;
        let w = 12.0 * v.sqrt();
        let b = tr.eval_b(t, x)?;
        let fail = std::cell::RefCell::new(None);
        let integral = simpson(
            |z| match kernel.p_jet(t, x, z) {
                Ok(j) => j.x + b * j.value,
                Err(e) => {
                    fail.borrow_mut().get_or_insert(e);
                    0.0
                }
            },
            m - w,
            m + w,
            2000,
        );
        if let Some(e) = fail.into_inner() {
            return Err(e);
        }
        let err = (integral - b).abs();
        if rep.at.is_none() || err > rep.max_abs {
            rep.max_abs = err;
            rep.at = Some((t, x));
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Scenario;
    use crate::simulate::{simulate_bridge, simulate_transformed, Recording, SimConfig, TimeGrid};
    use crate::stats;

    fn kernel(s: Scenario) -> TransitionKernel {
        TransitionKernel::for_model(s.build().unwrap()).unwrap()
    }

    proptest::proptest! {
        #[test]
        fn resampling_keeps_population_and_order(
            w in proptest::collection::vec(1e-6f64..1.0, 1..200),
            u0 in 0.0f64..1.0,
        ) {
            let idx = systematic_resample(&w, u0);
            proptest::prop_assert_eq!(idx.len(), w.len());
            proptest::prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
            proptest::prop_assert!(idx.iter().all(|&i| i < w.len()));
            let e = ess(&w);
            proptest::prop_assert!(e >= 1.0 - 1e-9 && e <= w.len() as f64 + 1e-9);
        }
    }

    #[test]
    fn kalman_bucy_keeps_the_filter_on_the_observation() {
        let k = kernel(Scenario::back_pedersen());
        let g = TimeGrid::geometric(2048, 1e-3).unwrap();
        let e = simulate_bridge(&k, &g, &SimConfig::new(3, 4).recording(Recording::All)).unwrap();
        for p in 0..3 {
            let out = kalman_bucy(k.model(), &e.times, e.path("X", p).unwrap()).unwrap();
            assert!(out.gamma_error < 1e-8, "{}", out.gamma_error);
            assert!(out.tracking_error < 1e-8, "{}", out.tracking_error);
        }
    }

    #[test]
    fn kalman_bucy_needs_unit_a() {
        let k = kernel(Scenario::sqrt_quadratic());
        assert!(kalman_bucy(k.model(), &[0.0, 0.1], &[0.0, 0.1]).is_err());
    }

    #[test]
    fn systematic_resampling_follows_the_weights() {
        let idx = systematic_resample(&[1.0, 0.0, 3.0, 0.0], 0.5);
        assert_eq!(idx, vec![0, 2, 2, 2]);
        assert!((ess(&[1.0, 1.0, 1.0, 1.0]) - 4.0).abs() < 1e-12);
        assert!((ess(&[1.0, 0.0, 0.0, 0.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn particle_posterior_mean_matches_the_gaussian_posterior() {
        // Gaussian case: Z_t given the observations is N(X_t, V(t) - t)
        let k = kernel(Scenario::back_pedersen());
        let g = TimeGrid::uniform(1000, 0.2).unwrap();
        let e = simulate_transformed(&k, &g, &SimConfig::new(2, 31).recording(Recording::All)).unwrap();
        for p in 0..2 {
            let rs = e.path("R", p).unwrap();
            let out = particle_filter(&k, &e.times, rs, &ParticleConfig::new(2000, 5 + p as u64)).unwrap();
            for t in [0.25, 0.5, 0.75] {
                let i = e.index_of(t);
                assert!((out.mean[i] - rs[i]).abs() < 0.05, "{t}: {} vs {}", out.mean[i], rs[i]);
            }
            assert!(out.min_ess() > 200.0, "{}", out.min_ess());
        }
    }

    #[test]
    fn degenerate_weights_are_reported() {
        let k = kernel(Scenario::back_pedersen());
        // an observation path that jumps far from every particle
        let times = [0.0, 0.01, 0.02];
        let rs = [0.0, 40.0, 80.0];
        let r = particle_filter(&k, &times, &rs, &ParticleConfig::new(200, 1));
        assert!(matches!(r, Err(Error::DegenerateWeights { .. })), "{r:?}");
    }

    #[test]
    fn filtered_drift_is_the_own_filtration_drift() {
        for s in [Scenario::back_pedersen(), Scenario::sqrt_quadratic(), Scenario::ornstein_uhlenbeck(1.0)] {
            let k = kernel(s);
            let pts = [(0.1, 0.0), (0.5, 0.7), (0.9, -1.2)];
            let r = ks_consistency(&k, &pts).unwrap();
            assert!(r.max_abs < 1e-8, "{r:?}");
        }
    }

    #[test]
    fn posterior_mean_is_unbiased_for_the_signal() {
        // E[Z_t - E(Z_t | F^X_t)] = 0 across paths
        let k = kernel(Scenario::back_pedersen());
        let g = TimeGrid::uniform(400, 0.3).unwrap();
        let e = simulate_transformed(&k, &g, &SimConfig::new(40, 2).recording(Recording::All)).unwrap();
        let i = e.index_of(0.5);
        let errs: Vec<f64> = (0..40)
            .map(|p| {
                let out = particle_filter(&k, &e.times, e.path("R", p).unwrap(), &ParticleConfig::new(300, p as u64)).unwrap();
                out.mean[i] - e.series["U"][p][i]
            })
            .collect();
        assert!(stats::mean_zero_test(&errs, 0.01).unwrap().pass);
    }
}
