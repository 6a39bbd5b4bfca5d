//! The insider-trading equilibrium: market runs for a given demand strategy,
//! the value function Ψ, rational-pricing and Brownianity checks, and the
//! comparison of strategies.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::kernels::{PricingFunctions, TransitionKernel};
use crate::quad::{adaptive, simpson};
use crate::rng::{NodeStream, Tag};
use crate::simulate::{closed_only, default_scheme, simulate_model, PathEnsemble, PathModel, SimConfig, Signal, SignalState, Step, TimeGrid};
use crate::stats::{self, Alternative, OwnPastReport, TestVerdict};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyKind {
    /// No trading.
    Zero,
    /// `scale` times the bridge demand α* = a(t,x)·∂ₓlog ρ(t,x,z).
    Optimal { scale: f64 },
    /// (z - x)/(1 - t), the Brownian-bridge demand that ignores V.
    Naive,
}

/// A trading rate α(t, X_t, Z_t): dθ = α dt and the order flow is dY = dB + α dt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Strategy {
    pub label: String,
    pub kind: StrategyKind,
}

impl Strategy {
    pub fn optimal() -> Self {
        Self::scaled(1.0)
    }

    pub fn scaled(scale: f64) -> Self {
        let label = if scale == 1.0 { "optimal".to_string() } else { format!("{scale}x optimal") };
        Self { label, kind: StrategyKind::Optimal { scale } }
    }

    pub fn zero() -> Self {
        Self { label: "zero".into(), kind: StrategyKind::Zero }
    }

    pub fn naive() -> Self {
        Self { label: "naive".into(), kind: StrategyKind::Naive }
    }

    pub fn rate(&self, kernel: &TransitionKernel, t: f64, x: f64, z: f64) -> Result<f64> {
        match self.kind {
            StrategyKind::Zero => Ok(0.0),
            StrategyKind::Optimal { scale } => Ok(scale * kernel.model().a(t, x) * kernel.log_dx_rho(t, x, z)?),
            StrategyKind::Naive => Ok((z - x) / (1.0 - t)),
        }
    }
}

#[derive(Clone)]
struct MarketState {
    sig: SignalState,
    y: f64,
    x: f64,
    price: f64,
    theta: f64,
    // ∫ S α dt and ∫ θ dS
    s_alpha: f64,
    theta_ds: f64,
    adm: f64,
    qv: f64,
}

struct MarketModel<'a> {
    pricing: &'a PricingFunctions,
    strategy: &'a Strategy,
    signal: Signal<'a>,
}

impl PathModel for MarketModel<'_> {
    type State = MarketState;

    fn series(&self) -> Vec<&'static str> {
        vec!["Y", "X", "Z", "S", "QV"]
    }

    fn stats(&self) -> Vec<&'static str> {
        vec!["wealth", "wealth_alt", "admissibility", "theta", "qv"]
    }

    fn init(&self, seed: u64, path: u64) -> Result<MarketState> {
        Ok(MarketState {
            sig: self.signal.init(seed, path)?,
            y: 0.0,
            x: 0.0,
            price: self.pricing.h(0.0, 0.0)?,
            theta: 0.0,
            s_alpha: 0.0,
            theta_ds: 0.0,
            adm: 0.0,
            qv: 0.0,
        })
    }

    fn drift(&self, t: f64, s: &MarketState) -> Result<f64> {
        self.strategy.rate(self.pricing.kernel(), t, s.x, s.sig.z)
    }

    fn advance(&self, s: &mut MarketState, st: &Step, alpha: f64) -> Result<()> {
        let dt = st.dt();
        let dy = alpha * dt + st.db;
        s.x += self.pricing.w(st.t0, s.x) * dy;
        s.y += dy;
        s.qv += dy * dy;
        s.s_alpha += s.price * alpha * dt;
        s.adm += s.price * s.price * dt;
        let next = self.pricing.h(st.t1, s.x)?;
        s.theta_ds += s.theta * (next - s.price);
        s.theta += alpha * dt;
        s.price = next;
        self.signal.step(&mut s.sig, st.v0, st.v1, st.dwv)
    }

    fn record(&self, _t: f64, s: &MarketState, out: &mut Vec<f64>) -> Result<()> {
        out.extend([s.y, s.x, s.sig.z, s.price, s.qv]);
        Ok(())
    }

    fn finish(&self, s: &MarketState, out: &mut Vec<f64>) -> Result<()> {
        // F(1,Z₁) = f(Z₁), proxied by the signal at the last node
        let value = self.pricing.payoff().f(s.sig.z);
        let wealth = value * s.theta - s.s_alpha;
        let wealth_alt = (value - s.price) * s.theta + s.theta_ds;
        out.extend([wealth, wealth_alt, s.adm, s.theta, s.qv]);
        Ok(())
    }
}

/// One strategy's market run.
#[derive(Debug, Clone, Serialize)]
pub struct MarketOutcome {
    pub strategy: Strategy,
    /// Series Y (order flow), X, Z, S = H(t,X_t), QV (realized [Y]); path
    /// stats wealth = ∫(f(Z₁) - S)α dt, wealth_alt = (f(Z₁) - S₁)θ₁ + ∫θ dS,
    /// admissibility = ∫S² dt.
    pub ensemble: PathEnsemble,
}

impl MarketOutcome {
    pub fn wealth(&self) -> &[f64] {
        &self.ensemble.path_stats["wealth"]
    }

    /// Mean terminal wealth and its standard error.
    pub fn mean_wealth(&self) -> (f64, f64) {
        stats::mean_se(self.wealth())
    }

    /// Largest pathwise gap between the two wealth formulas.
    pub fn wealth_formula_gap(&self) -> f64 {
        let alt = &self.ensemble.path_stats["wealth_alt"];
        self.wealth().iter().zip(alt).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Mean of ∫H(t,X_t)² dt.
    pub fn admissibility(&self) -> f64 {
        stats::mean(&self.ensemble.path_stats["admissibility"])
    }
}

/// Simulates the market: dY = dB + α dt, X = ∫w dY, S = H(t,X).
pub fn run_market(pricing: &PricingFunctions, strategy: &Strategy, grid: &TimeGrid, cfg: &SimConfig) -> Result<MarketOutcome> {
    let kernel = pricing.kernel();
    closed_only(kernel)?;
    let m = MarketModel { pricing, strategy, signal: Signal::new(kernel, default_scheme(kernel))? };
    let ensemble = simulate_model(&m, &kernel.model().profile, grid, cfg, &format!("market-{}", strategy.label))?;
    Ok(MarketOutcome { strategy: strategy.clone(), ensemble })
}

/// Ψᵃ(t,x) = ∫_{ξ(t,a)}^x (H(t,u) - a)/w(t,u) du + ½∫ₜ¹ H_x(s,ξ(s,a)) w(s,ξ(s,a)) ds,
/// the insider's value from (t,x) when the asset is worth a.
pub fn psi(pricing: &PricingFunctions, level: f64, t: f64, x: f64) -> Result<f64> {
    let xi = pricing.xi(t, level)?;
    let (lo, hi, sign) = if xi <= x { (xi, x, 1.0) } else { (x, xi, -1.0) };
    let first = adaptive(|u| pricing.h(t, u).map_or(f64::NAN, |h| (h - level) / pricing.w(t, u)), lo, hi, 1e-10, 1e-12, 4096)?;
    let fail = std::cell::RefCell::new(None);
    // ξ(s,a) moves slowly in s, so each node warm-starts from the last
    let last = std::cell::Cell::new(xi);
    let second = simpson(
        |s| match pricing.xi_near(s, level, last.get()).and_then(|q| {
            last.set(q);
            Ok(pricing.h_x(s, q)? * pricing.w(s, q))
        }) {
            Ok(v) => v,
            Err(e) => {
                fail.borrow_mut().get_or_insert(e);
                0.0
            }
        },
        t,
        1.0,
        64,
    );
    if let Some(e) = fail.into_inner() {
        return Err(e);
    }
    Ok(sign * first + 0.5 * second)
}

/// E[Ψ^{f(Z₁)}(0,0)] over exact draws of Z₁, the wealth the optimal demand
/// should earn.
pub fn expected_value_via_psi(pricing: &PricingFunctions, n: usize, seed: u64) -> Result<(f64, f64)> {
    let kernel = pricing.kernel();
    let signal = Signal::new(kernel, default_scheme(kernel))?;
    let p = &kernel.model().profile;
    let (c, v1) = (p.c, p.v_end());
    let vals: Vec<f64> = (0..n as u64)
        .map(|i| {
            let mut s = signal.init(seed, i)?;
            let dw = (v1 - c).max(0.0).sqrt() * NodeStream::new(seed, i, Tag::Aux).normal();
            signal.step(&mut s, c, v1, dw)?;
            psi(pricing, pricing.payoff().f(s.z), 0.0, 0.0)
        })
        .collect::<Result<_>>()?;
    Ok(stats::mean_se(&vals))
}

#[derive(Debug, Clone, Serialize)]
pub struct PricingCheck {
    pub t: f64,
    pub x: f64,
    pub h: f64,
    pub mc: f64,
    pub se: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RationalPricingReport {
    pub rows: Vec<PricingCheck>,
    /// Per-point z threshold after a Bonferroni correction at `alpha`.
    pub z_crit: f64,
    pub pass: bool,
}

/// Nested Monte Carlo of H(t,x) = E[f(X₁) | X_t = x] with X run by Euler
/// under its own-filtration law dX = a(s,X)dW, compared with the quadrature H.
pub fn verify_rational_pricing(
    pricing: &PricingFunctions,
    points: &[(f64, f64)],
    n_inner: usize,
    steps: usize,
    seed: u64,
    alpha: f64,
) -> Result<RationalPricingReport> {
    if n_inner < stats::MIN_SAMPLES || steps == 0 {
        return Err(Error::TooFewSamples { need: stats::MIN_SAMPLES, got: n_inner });
    }
    let model = pricing.kernel().model();
    let z_crit = Normal::standard().inverse_cdf(1.0 - stats::bonferroni(alpha, points.len()) / 2.0);
    let mut rows = Vec::with_capacity(points.len());
    for (j, &(t, x)) in points.iter().enumerate() {
        let dt = (1.0 - t) / steps as f64;
        let sq = dt.sqrt();
        let vals: Vec<f64> = (0..n_inner as u64)
            .map(|i| {
                let mut g = NodeStream::new(seed, j as u64 * n_inner as u64 + i, Tag::Inner);
                let mut y = x;
                for n in 0..steps {
                    y += model.a(t + n as f64 * dt, y) * sq * g.normal();
                }
                pricing.payoff().f(y)
            })
            .collect();
        let (mc, se) = stats::mean_se(&vals);
        let h = pricing.h(t, x)?;
        let pass = (mc - h).abs() <= z_crit * se + 1e-12;
        rows.push(PricingCheck { t, x, h, mc, se, pass });
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(RationalPricingReport { rows, z_crit, pass })
}

/// Checkpoints for the own-past regressions.
pub const REGRESSION_TIMES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Serialize)]
pub struct BrownianityReport {
    /// max over checkpoints of |mean QV_t - t|/t.
    pub qv_rel_error: f64,
    pub qv_pass: bool,
    /// Jarque-Bera on standardized increments, Bonferroni over windows.
    pub normality: TestVerdict,
    /// Increments have mean zero, Bonferroni over windows.
    pub centred: TestVerdict,
    pub own_past: OwnPastReport,
    /// Smallest |t| of Z_t in regressions of Y-increments on (Y_t, Z_t).
    pub insider_min_abs_t: f64,
    /// The order flow is predictable from the insider's information.
    pub insider_detects: bool,
    pub pass: bool,
}

/// Tests that the order flow Y is a Brownian motion in its own filtration
/// but not in the insider's.
pub fn brownianity_tests(outcome: &MarketOutcome, alpha: f64) -> Result<BrownianityReport> {
    let ens = &outcome.ensemble;
    let end = *ens.times.last().unwrap_or(&1.0);
    let mut qv_rel_error = 0.0f64;
    for t in [0.25, 0.5, 0.75, end] {
        let k = ens.index_of(t);
        let tk = ens.times[k];
        qv_rel_error = qv_rel_error.max((stats::mean(&ens.column("QV", k)?) - tk).abs() / tk);
    }
    let cols = ens.columns_at("Y", &REGRESSION_TIMES)?;
    let times: Vec<f64> = REGRESSION_TIMES.iter().map(|&t| ens.times[ens.index_of(t)]).collect();
    let windows = cols.len() - 1;
    let level = stats::bonferroni(alpha, windows);
    let (mut worst_jb, mut worst_mean): (Option<TestVerdict>, Option<TestVerdict>) = (None, None);
    for k in 0..windows {
        let sd = (times[k + 1] - times[k]).sqrt();
        let inc: Vec<f64> = cols[k + 1].iter().zip(&cols[k]).map(|(b, a)| (b - a) / sd).collect();
        let jb = stats::normality_test(&inc, level)?;
        let mz = stats::mean_zero_test(&inc, level)?;
        if worst_jb.as_ref().is_none_or(|w| jb.p_value < w.p_value) {
            worst_jb = Some(jb);
        }
        if worst_mean.as_ref().is_none_or(|w| mz.p_value < w.p_value) {
            worst_mean = Some(mz);
        }
    }
    let normality = worst_jb.ok_or(Error::TooFewSamples { need: 2, got: cols.len() })?;
    let centred = worst_mean.ok_or(Error::TooFewSamples { need: 2, got: cols.len() })?;
    let own_past = stats::own_past_regression(&cols, 3, alpha)?;
    let zs = ens.columns_at("Z", &REGRESSION_TIMES)?;
    let mut insider_min_abs_t = f64::INFINITY;
    let mut insider_detects = true;
    for k in 0..windows {
        let inc: Vec<f64> = cols[k + 1].iter().zip(&cols[k]).map(|(b, a)| b - a).collect();
        let r = stats::ols_robust(&inc, &[cols[k].clone(), zs[k].clone()])?;
        insider_min_abs_t = insider_min_abs_t.min(r.t[2].abs());
        insider_detects &= r.p[2] < level;
    }
    let qv_pass = qv_rel_error <= 0.02;
    let pass = qv_pass && normality.pass && centred.pass && own_past.verdict.pass && insider_detects;
    Ok(BrownianityReport { qv_rel_error, qv_pass, normality, centred, own_past, insider_min_abs_t, insider_detects, pass })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// The optimal demand earns more at the test level.
    OptimalHigher,
    Tie,
    /// The alternative earns more at the test level.
    AlternativeHigher,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub mean: f64,
    pub se: f64,
    pub welch: TestVerdict,
    pub ranking: Ranking,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub optimal_mean: f64,
    pub optimal_se: f64,
    pub rows: Vec<ComparisonRow>,
}

/// Runs the optimal demand and each alternative on the same noise and ranks
/// mean terminal wealth by Welch tests at `alpha`.
pub fn compare_strategies(pricing: &PricingFunctions, alternatives: &[Strategy], grid: &TimeGrid, cfg: &SimConfig, alpha: f64) -> Result<Comparison> {
    let best = run_market(pricing, &Strategy::optimal(), grid, cfg)?;
    compare_with(&best, pricing, alternatives, grid, cfg, alpha)
}

/// As [`compare_strategies`], reusing an optimal run made with the same grid and config.
pub fn compare_with(
    best: &MarketOutcome,
    pricing: &PricingFunctions,
    alternatives: &[Strategy],
    grid: &TimeGrid,
    cfg: &SimConfig,
    alpha: f64,
) -> Result<Comparison> {
    let (optimal_mean, optimal_se) = best.mean_wealth();
    let mut rows = Vec::with_capacity(alternatives.len());
    for s in alternatives {
        let other = run_market(pricing, s, grid, cfg)?;
        let (mean, se) = other.mean_wealth();
        let up = stats::welch_mean_compare(best.wealth(), other.wealth(), Alternative::Greater, alpha)?;
        let down = stats::welch_mean_compare(other.wealth(), best.wealth(), Alternative::Greater, alpha)?;
        let ranking = if !up.pass {
            Ranking::OptimalHigher
        } else if !down.pass {
            Ranking::AlternativeHigher
        } else {
            Ranking::Tie
        };
        rows.push(ComparisonRow { label: s.label.clone(), mean, se, welch: up, ranking });
    }
    Ok(Comparison { optimal_mean, optimal_se, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::build_pricing;
    use crate::model::Scenario;
    use std::sync::Arc;

    fn pricing(s: Scenario) -> PricingFunctions {
        build_pricing(Arc::new(TransitionKernel::for_model(s.build().unwrap()).unwrap())).unwrap()
    }

    #[test]
    fn psi_in_the_gaussian_case() {
        // H = x, w = 1: Ψᵃ(t,x) = (x-a)²/2 + (1-t)/2
        let p = pricing(Scenario::back_pedersen());
        for (a, t, x) in [(0.0, 0.0, 0.0), (0.7, 0.3, -0.2), (-1.0, 0.9, 0.4)] {
            let v = psi(&p, a, t, x).unwrap();
            let exact = 0.5 * (x - a) * (x - a) + 0.5 * (1.0 - t);
            assert!((v - exact).abs() < 1e-9, "{v} {exact}");
        }
    }

    #[test]
    fn psi_vanishes_on_the_terminal_diagonal() {
        let p = pricing(Scenario::sqrt_quadratic());
        let a = 0.4;
        let x = p.xi(1.0 - 1e-4, a).unwrap();
        assert!(psi(&p, a, 1.0 - 1e-4, x).unwrap().abs() < 1e-3);
    }

    #[test]
    fn optimal_wealth_matches_psi() {
        let p = pricing(Scenario::back_pedersen());
        let (v, se) = expected_value_via_psi(&p, 2000, 3).unwrap();
        assert!((v - 1.0).abs() < 4.0 * se, "{v} {se}");
        let g = TimeGrid::uniform(1024, 1e-3).unwrap();
        let out = run_market(&p, &Strategy::optimal(), &g, &SimConfig::new(2000, 5)).unwrap();
        let (m, se) = out.mean_wealth();
        assert!((m - 1.0).abs() < 3.0 * se + 2e-3, "{m} {se}");
        // the two wealth formulas differ by Σ ΔS·αΔt only
        assert!(out.wealth_formula_gap() < 0.2, "{}", out.wealth_formula_gap());
        assert!(out.admissibility().is_finite());
    }

    #[test]
    fn zero_strategy_earns_nothing() {
        let p = pricing(Scenario::back_pedersen());
        let g = TimeGrid::uniform(64, 1e-3).unwrap();
        let out = run_market(&p, &Strategy::zero(), &g, &SimConfig::new(50, 1)).unwrap();
        assert!(out.wealth().iter().all(|w| *w == 0.0));
    }

    #[test]
    fn order_flow_is_brownian_for_the_optimal_demand() {
        let p = pricing(Scenario::back_pedersen());
        let g = TimeGrid::uniform(2048, 1e-3).unwrap();
        let out = run_market(&p, &Strategy::optimal(), &g, &SimConfig::new(3000, 17)).unwrap();
        let r = brownianity_tests(&out, 0.01).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn naive_demand_ties_in_the_gaussian_case() {
        // with V(t) - t = (1-t)/2 the naive rate is half the optimal one and
        // every κ(Z-X)/(V-t) demand with κ > 0 has the same expected wealth
        let p = pricing(Scenario::back_pedersen());
        let g = TimeGrid::uniform(1024, 1e-3).unwrap();
        let c = compare_strategies(&p, &[Strategy::naive(), Strategy::zero()], &g, &SimConfig::new(1500, 2), 0.01).unwrap();
        assert_eq!(c.rows[0].ranking, Ranking::Tie, "{c:?}");
        assert_eq!(c.rows[1].ranking, Ranking::OptimalHigher);
    }

    #[test]
    fn nested_pricing_agrees_with_quadrature() {
        let p = pricing(Scenario::sqrt_quadratic());
        let pts = [(0.2, 0.3), (0.6, -0.8)];
        let r = verify_rational_pricing(&p, &pts, 2000, 100, 4, 0.01).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn strategy_rates() {
        let p = pricing(Scenario::back_pedersen());
        let k = p.kernel();
        let (t, x, z) = (0.5, 0.1, 0.4);
        // V(t) - t = 0.25
        assert!((Strategy::optimal().rate(k, t, x, z).unwrap() - 1.2).abs() < 1e-9);
        assert!((Strategy::scaled(2.0).rate(k, t, x, z).unwrap() - 2.4).abs() < 1e-9);
        assert!((Strategy::naive().rate(k, t, x, z).unwrap() - 0.6).abs() < 1e-12);
    }
}
