//! Path simulation: the signal, the bridge, its transformed pair, the OU
//! comparison process, and the supermartingale potential φ.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::TransitionKernel;
use crate::model::{ModelSpec, VolatilityProfile};
use crate::quad::simpson;
use crate::rng::{NodeStream, Tag};
use crate::stats;
use crate::transform::SpaceTransform;

pub const GEOMETRIC_SWITCH: f64 = 0.9;
pub const GEOMETRIC_RATIO: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Refinement {
    Uniform,
    /// Uniform up to `switch`, then 1 - t shrinks by `ratio` per step.
    Geometric { switch: f64, ratio: f64 },
}

/// Simulation nodes on [0, 1 - eps_end].
#[derive(Debug, Clone, Serialize)]
pub struct TimeGrid {
    pub nodes: Vec<f64>,
    pub eps_end: f64,
    pub refinement: Refinement,
}

impl TimeGrid {
    pub fn uniform(steps: usize, eps_end: f64) -> Result<Self> {
        check_grid(steps, eps_end)?;
        let end = 1.0 - eps_end;
        let mut nodes: Vec<f64> = (0..=steps).map(|i| end * i as f64 / steps as f64).collect();
        nodes[steps] = end;
        Ok(Self { nodes, eps_end, refinement: Refinement::Uniform })
    }

    pub fn geometric(steps: usize, eps_end: f64) -> Result<Self> {
        Self::geometric_with(steps, eps_end, GEOMETRIC_SWITCH, GEOMETRIC_RATIO)
    }

    /// `steps` counts all steps; the geometric tail takes what it needs to
    /// reach eps_end and the rest go to the uniform part.
    pub fn geometric_with(steps: usize, eps_end: f64, switch: f64, ratio: f64) -> Result<Self> {
        check_grid(steps, eps_end)?;
        if !(0.0 < switch && switch < 1.0 && 0.0 < ratio && ratio < 1.0) {
            return Err(Error::Config(format!("geometric grid needs switch, ratio in (0,1), got {switch}, {ratio}")));
        }
        if eps_end >= 1.0 - switch {
            return Self::uniform(steps, eps_end);
        }
        let mut tail = Vec::new();
        let mut gap = 1.0 - switch;
        loop {
            gap *= ratio;
            if gap <= eps_end * (1.0 + 1e-12) {
                break;
            }
            tail.push(1.0 - gap);
        }
        tail.push(1.0 - eps_end);
        if steps <= tail.len() {
            return Err(Error::Config(format!("{steps} steps cannot cover a geometric tail of {} steps", tail.len())));
        }
        let n_u = steps - tail.len();
        let mut nodes: Vec<f64> = (0..=n_u).map(|i| switch * i as f64 / n_u as f64).collect();
        nodes.extend(tail);
        Ok(Self { nodes, eps_end, refinement: Refinement::Geometric { switch, ratio } })
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn end(&self) -> f64 {
        self.nodes[self.steps()]
    }

    /// Index of the node closest to t.
    pub fn nearest(&self, t: f64) -> usize {
        let i = self.nodes.partition_point(|&s| s < t);
        if i == 0 {
            0
        } else if i > self.steps() {
            self.steps()
        } else if (self.nodes[i] - t).abs() < (t - self.nodes[i - 1]).abs() {
            i
        } else {
            i - 1
        }
    }
}

fn check_grid(steps: usize, eps_end: f64) -> Result<()> {
    if steps == 0 || !(eps_end > 0.0 && eps_end < 1.0) {
        return Err(Error::Config(format!("need steps >= 1 and eps_end in (0,1), got {steps}, {eps_end}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Recording {
    All,
    /// Nearest grid node to each time.
    Times(Vec<f64>),
}

/// Checkpoints recorded by default; the grid end is always added.
pub const CHECKPOINTS: [f64; 13] = [0.0, 0.1, 0.2, 0.25, 0.3, 0.4, 0.5, 0.6, 0.7, 0.75, 0.8, 0.9, 0.99];

#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
    pub record: Recording,
    /// Steps with |α·Δt| > clip·√Δt are halved.
    pub clip: f64,
    pub max_halvings: u32,
}

impl SimConfig {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self { n_paths, seed, workers: 0, record: Recording::Times(CHECKPOINTS.to_vec()), clip: 5.0, max_halvings: 12 }
    }

    pub fn recording(mut self, record: Recording) -> Self {
        self.record = record;
        self
    }

    pub fn workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    fn record_nodes(&self, grid: &TimeGrid) -> Vec<usize> {
        let mut idx: Vec<usize> = match &self.record {
            Recording::All => (0..=grid.steps()).collect(),
            Recording::Times(ts) => ts.iter().map(|&t| grid.nearest(t)).chain([grid.steps()]).collect(),
        };
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

/// Recorded paths. `series[name][path][k]` is the value at `times[k]`.
#[derive(Debug, Clone, Serialize)]
pub struct PathEnsemble {
    pub scheme: String,
    pub master_seed: u64,
    pub steps: usize,
    pub eps_end: f64,
    pub refinement: Refinement,
    pub record_nodes: Vec<usize>,
    pub times: Vec<f64>,
    pub series: BTreeMap<String, Vec<Vec<f64>>>,
    /// One value per path, e.g. realized quadratic variation at the end.
    pub path_stats: BTreeMap<String, Vec<f64>>,
    /// Steps split because the drift exceeded the clip.
    pub halvings: usize,
    /// Steps whose drift was still clipped after the last halving.
    pub clipped: usize,
}

/// Per-time mean and standard deviation of one series.
#[derive(Debug, Clone, Serialize)]
pub struct SeriesSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub scheme: String,
    pub master_seed: u64,
    pub n_paths: usize,
    pub steps: usize,
    pub eps_end: f64,
    pub refinement: Refinement,
    pub times: Vec<f64>,
    pub series: BTreeMap<String, SeriesSummary>,
    pub path_stats: BTreeMap<String, f64>,
    pub halvings: usize,
    pub clipped: usize,
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.series.values().next().map_or(0, |s| s.len())
    }

    /// Recorded index closest to t.
    pub fn index_of(&self, t: f64) -> usize {
        self.times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map_or(0, |(k, _)| k)
    }

    pub fn series(&self, name: &str) -> Result<&Vec<Vec<f64>>> {
        self.series.get(name).ok_or_else(|| Error::Config(format!("no series named {name}")))
    }

    /// Values of a series across paths at recorded index k.
    pub fn column(&self, name: &str, k: usize) -> Result<Vec<f64>> {
        Ok(self.series(name)?.iter().map(|p| p[k]).collect())
    }

    /// Columns of a series at the recorded indices closest to `times`.
    pub fn columns_at(&self, name: &str, times: &[f64]) -> Result<Vec<Vec<f64>>> {
        times.iter().map(|&t| self.column(name, self.index_of(t))).collect()
    }

    /// One path of a series over all recorded times.
    pub fn path(&self, name: &str, p: usize) -> Result<&[f64]> {
        Ok(&self.series(name)?[p])
    }

    pub fn summary(&self) -> EnsembleSummary {
        let series = self
            .series
            .iter()
            .map(|(name, paths)| {
                let (mean, sd) = (0..self.times.len())
                    .map(|k| {
                        let col: Vec<f64> = paths.iter().map(|p| p[k]).collect();
                        (stats::mean(&col), stats::variance(&col).sqrt())
                    })
                    .unzip();
                (name.clone(), SeriesSummary { mean, sd })
            })
            .collect();
        let path_stats = self.path_stats.iter().map(|(k, v)| (k.clone(), stats::mean(v))).collect();
        EnsembleSummary {
            scheme: self.scheme.clone(),
            master_seed: self.master_seed,
            n_paths: self.n_paths(),
            steps: self.steps,
            eps_end: self.eps_end,
            refinement: self.refinement,
            times: self.times.clone(),
            series,
            path_stats,
            halvings: self.halvings,
            clipped: self.clipped,
        }
    }

    /// Long format: one row per (path, recorded time).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let names: Vec<&String> = self.series.keys().collect();
        let mut header = vec!["path".to_string(), "t".to_string()];
        header.extend(names.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for p in 0..self.n_paths() {
            for (k, t) in self.times.iter().enumerate() {
                let mut row = vec![p.to_string(), t.to_string()];
                row.extend(names.iter().map(|n| self.series[*n][p][k].to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &self.summary())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// SHA-256 over the recorded values in a fixed order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, paths) in &self.series {
            h.update(name.as_bytes());
            for v in paths.iter().flatten() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One Euler step with its driving increments. `dwv` is the signal's
/// Brownian increment in operational time V, `db` the observer's in t.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Step {
    pub t0: f64,
    pub t1: f64,
    pub v0: f64,
    pub v1: f64,
    pub dwv: f64,
    pub db: f64,
}

impl Step {
    pub fn dt(&self) -> f64 {
        self.t1 - self.t0
    }
}

/// A process advanced node by node by the shared engine.
pub(crate) trait PathModel: Sync {
    type State: Clone + Send;
    fn series(&self) -> Vec<&'static str>;
    fn stats(&self) -> Vec<&'static str> {
        Vec::new()
    }
    fn init(&self, seed: u64, path: u64) -> Result<Self::State>;
    /// Drift subject to the clip; zero for driftless models.
    fn drift(&self, t: f64, s: &Self::State) -> Result<f64>;
    fn advance(&self, s: &mut Self::State, step: &Step, alpha: f64) -> Result<()>;
    fn record(&self, t: f64, s: &Self::State, out: &mut Vec<f64>) -> Result<()>;
    fn finish(&self, _s: &Self::State, _out: &mut Vec<f64>) -> Result<()> {
        Ok(())
    }
}

struct PathOut {
    rec: Vec<Vec<f64>>,
    stats: Vec<f64>,
    halvings: usize,
    clipped: usize,
}

struct Walker<'a> {
    profile: &'a VolatilityProfile,
    seed: u64,
    path: u64,
    node: u64,
    sub: u64,
    clip: f64,
    max_halvings: u32,
    halvings: usize,
    clipped: usize,
}

/// Brownian-bridge split of an increment over clock [c0,c2] at c1.
fn bridge_split(dw: f64, c0: f64, c1: f64, c2: f64, e: f64) -> f64 {
    let span = c2 - c0;
    if span <= 0.0 {
        return 0.0;
    }
    dw * (c1 - c0) / span + ((c1 - c0) * (c2 - c1) / span).max(0.0).sqrt() * e
}

impl Walker<'_> {
    fn step<M: PathModel>(&mut self, m: &M, s: &mut M::State, st: Step, depth: u32) -> Result<()> {
        let dt = st.dt();
        let mut alpha = m.drift(st.t0, s)?;
        let lim = self.clip * dt.sqrt();
        if !alpha.is_finite() {
            return Err(Error::DomainError(format!("drift is {alpha} at t={}", st.t0)));
        }
        if (alpha * dt).abs() > lim {
            if depth < self.max_halvings {
                self.halvings += 1;
                let tm = 0.5 * (st.t0 + st.t1);
                let vm = self.profile.v(tm);
                let (e1, e2) = NodeStream::refine(self.seed, self.path, self.node, self.sub).pair();
                self.sub += 1;
                let dwv = bridge_split(st.dwv, st.v0, vm, st.v1, e1);
                let db = bridge_split(st.db, st.t0, tm, st.t1, e2);
                self.step(m, s, Step { t1: tm, v1: vm, dwv, db, ..st }, depth + 1)?;
                return self.step(m, s, Step { t0: tm, v0: vm, dwv: st.dwv - dwv, db: st.db - db, ..st }, depth + 1);
            }
            self.clipped += 1;
            alpha = alpha.signum() * lim / dt;
        }
        m.advance(s, &st, alpha)
    }
}

fn run_path<M: PathModel>(m: &M, profile: &VolatilityProfile, grid: &TimeGrid, cfg: &SimConfig, nodes: &[usize], p: u64) -> Result<PathOut> {
    let names = m.series();
    let mut rec = vec![Vec::with_capacity(nodes.len()); names.len()];
    let mut buf = Vec::with_capacity(names.len());
    let mut s = m.init(cfg.seed, p)?;
    let mut noise = NodeStream::new(cfg.seed, p, Tag::Noise);
    let mut w = Walker {
        profile,
        seed: cfg.seed,
        path: p,
        node: 0,
        sub: 0,
        clip: cfg.clip,
        max_halvings: cfg.max_halvings,
        halvings: 0,
        clipped: 0,
    };
    let mut push = |s: &M::State, t: f64, rec: &mut Vec<Vec<f64>>| -> Result<()> {
        buf.clear();
        m.record(t, s, &mut buf)?;
        for (r, v) in rec.iter_mut().zip(&buf) {
            r.push(*v);
        }
        Ok(())
    };
    let mut next = 0;
    if nodes.first() == Some(&0) {
        push(&s, 0.0, &mut rec)?;
        next = 1;
    }
    let mut v0 = profile.v(0.0);
    for n in 0..grid.steps() {
        let (t0, t1) = (grid.nodes[n], grid.nodes[n + 1]);
        let v1 = profile.v(t1);
        let (e_sig, e_obs) = noise.pair();
        w.node = n as u64;
        w.sub = 0;
        let st = Step { t0, t1, v0, v1, dwv: (v1 - v0).max(0.0).sqrt() * e_sig, db: (t1 - t0).sqrt() * e_obs };
        w.step(m, &mut s, st, 0)?;
        v0 = v1;
        if next < nodes.len() && nodes[next] == n + 1 {
            push(&s, t1, &mut rec)?;
            next += 1;
        }
    }
    let mut stats = Vec::new();
    m.finish(&s, &mut stats)?;
    Ok(PathOut { rec, stats, halvings: w.halvings, clipped: w.clipped })
}

/// Runs `f` for paths 0..n on `workers` threads, keeping path order.
pub(crate) fn par_paths<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    let work = || (0..n as u64).into_par_iter().map(&f).collect::<Result<Vec<T>>>();
    if workers == 0 {
        return work();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?
        .install(work)
}

pub(crate) fn simulate_model<M: PathModel>(
    m: &M,
    profile: &VolatilityProfile,
    grid: &TimeGrid,
    cfg: &SimConfig,
    scheme: &str,
) -> Result<PathEnsemble> {
    if cfg.n_paths == 0 {
        return Err(Error::Config("n_paths must be positive".into()));
    }
    let nodes = cfg.record_nodes(grid);
    let outs = par_paths(cfg.n_paths, cfg.workers, |p| run_path(m, profile, grid, cfg, &nodes, p))?;
    let names = m.series();
    let stat_names = m.stats();
    let mut series: BTreeMap<String, Vec<Vec<f64>>> = names.iter().map(|n| (n.to_string(), Vec::with_capacity(cfg.n_paths))).collect();
    let mut path_stats: BTreeMap<String, Vec<f64>> = stat_names.iter().map(|n| (n.to_string(), Vec::with_capacity(cfg.n_paths))).collect();
    let (mut halvings, mut clipped) = (0, 0);
    for out in outs {
        for (name, r) in names.iter().zip(out.rec) {
            series.get_mut(*name).expect("declared series").push(r);
        }
        for (name, v) in stat_names.iter().zip(out.stats) {
            path_stats.get_mut(*name).expect("declared stat").push(v);
        }
        halvings += out.halvings;
        clipped += out.clipped;
    }
    Ok(PathEnsemble {
        scheme: scheme.to_string(),
        master_seed: cfg.seed,
        steps: grid.steps(),
        eps_end: grid.eps_end,
        refinement: grid.refinement,
        times: nodes.iter().map(|&i| grid.nodes[i]).collect(),
        record_nodes: nodes,
        series,
        path_stats,
        halvings,
        clipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalScheme {
    /// Exact Gaussian steps of U = A(V(t),Z); needs b free of x.
    Exact,
    /// Euler-Maruyama on Z in operational time.
    Euler,
}

#[derive(Debug, Clone)]
enum InitialLaw {
    Gaussian { mean: f64, sd: f64 },
    /// Inverse CDF of a tabulated density in transformed coordinates.
    Table { u: Vec<f64>, cdf: Vec<f64> },
}

impl InitialLaw {
    fn sample(&self, e: f64) -> f64 {
        match self {
            InitialLaw::Gaussian { mean, sd } => mean + sd * e,
            InitialLaw::Table { u, cdf } => {
                let q = 0.5 * statrs::function::erf::erfc(-e / std::f64::consts::SQRT_2);
                let i = cdf.partition_point(|&c| c < q).clamp(1, cdf.len() - 1);
                let span = cdf[i] - cdf[i - 1];
                let f = if span > 0.0 { ((q - cdf[i - 1]) / span).clamp(0.0, 1.0) } else { 0.5 };
                u[i - 1] + f * (u[i] - u[i - 1])
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SignalState {
    pub u: f64,
    pub z: f64,
}

/// Z started from μ = G(0,0;c,·) and run in operational time.
pub(crate) struct Signal<'a> {
    tr: &'a SpaceTransform,
    scheme: SignalScheme,
    ou: Option<f64>,
    init: InitialLaw,
}

impl<'a> Signal<'a> {
    pub fn new(kernel: &'a TransitionKernel, scheme: SignalScheme) -> Result<Self> {
        let tr = kernel.transform().as_ref();
        let ou = tr.ou_rate();
        if scheme == SignalScheme::Exact && ou.is_none() && !tr.b_is_time_only() {
            return Err(Error::Config("exact signal steps need b free of x".into()));
        }
        let c = kernel.model().profile.c;
        let init = if kernel.is_closed() {
            let (mean, var) = kernel.gamma_moments(0.0, 0.0, c)?;
            InitialLaw::Gaussian { mean, sd: var.sqrt() }
        } else {
            let surf = kernel.numeric_surface(0.0, 0.0, c)?;
            let row = surf.last();
            let mut cdf = Vec::with_capacity(row.len());
            let mut acc = 0.0;
            cdf.push(0.0);
            for i in 1..row.len() {
                acc += 0.5 * (row[i - 1] + row[i]) * surf.dz;
                cdf.push(acc);
            }
            for c in cdf.iter_mut() {
                *c /= acc;
            }
            InitialLaw::Table { u: surf.z_grid(), cdf }
        };
        Ok(Self { tr, scheme, ou, init })
    }

    pub fn init(&self, seed: u64, path: u64) -> Result<SignalState> {
        self.init_from(NodeStream::new(seed, path, Tag::Init).normal())
    }

    /// Initial state from a standard normal draw.
    pub fn init_from(&self, e: f64) -> Result<SignalState> {
        let u = self.init.sample(e);
        let c = self.tr.model().profile.c;
        Ok(SignalState { u, z: self.tr.eval_a_inv(c, u)? })
    }

    pub fn step(&self, s: &mut SignalState, v0: f64, v1: f64, dwv: f64) -> Result<()> {
        let dv = v1 - v0;
        if dv <= 0.0 {
            return Ok(());
        }
        match (self.scheme, self.ou) {
            (SignalScheme::Exact, Some(k)) => {
                let decay = (-k * dv).exp();
                let sd = (-(-2.0 * k * dv).exp_m1() / (2.0 * k)).sqrt();
                s.z = s.z * decay + sd * dwv / dv.sqrt();
                s.u = s.z;
            }
            (SignalScheme::Exact, None) => {
                s.u += self.tr.b_int(v0, v1)? + dwv;
                s.z = self.tr.eval_a_inv(v1, s.u)?;
            }
            (SignalScheme::Euler, ou) => {
                let drift = ou.map_or(0.0, |k| -k * s.z * dv);
                s.z += self.tr.model().a(v0, s.z) * dwv + drift;
                s.u = f64::NAN;
            }
        }
        Ok(())
    }

    /// U = A(V(t),Z), recomputed when the scheme does not carry it.
    pub fn u(&self, s: &SignalState, v: f64) -> Result<f64> {
        if s.u.is_nan() {
            self.tr.eval_a(v, s.z)
        } else {
            Ok(s.u)
        }
    }
}

/// Drift of the observed coordinate as a function of (t, x, signal).
pub type DriftFn<'a> = dyn Fn(f64, f64, f64) -> Result<f64> + Sync + 'a;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Coordinates {
    Original,
    Transformed,
}

#[derive(Clone)]
pub(crate) struct PairState {
    sig: SignalState,
    x: f64,
    qv: f64,
    int_a2: f64,
}

struct PairModel<'a> {
    signal: Signal<'a>,
    model: &'a ModelSpec,
    coords: Coordinates,
    drift: Option<&'a DriftFn<'a>>,
}

impl PairModel<'_> {
    fn target(&self, t: f64, s: &PairState) -> Result<f64> {
        match self.coords {
            Coordinates::Original => Ok(s.sig.z),
            Coordinates::Transformed => self.signal.u(&s.sig, self.model.v(t)),
        }
    }

    fn vol(&self, t: f64, x: f64) -> f64 {
        match self.coords {
            Coordinates::Original => self.model.a(t, x),
            Coordinates::Transformed => 1.0,
        }
    }
}

impl PathModel for PairModel<'_> {
    type State = PairState;

    fn series(&self) -> Vec<&'static str> {
        match (self.drift.is_some(), self.coords) {
            (false, _) => vec!["Z", "U"],
            (true, Coordinates::Original) => vec!["X", "Z"],
            (true, Coordinates::Transformed) => vec!["R", "U"],
        }
    }

    fn stats(&self) -> Vec<&'static str> {
        if self.drift.is_some() {
            vec!["qv", "int_a2"]
        } else {
            Vec::new()
        }
    }

    fn init(&self, seed: u64, path: u64) -> Result<PairState> {
        Ok(PairState { sig: self.signal.init(seed, path)?, x: 0.0, qv: 0.0, int_a2: 0.0 })
    }

    fn drift(&self, t: f64, s: &PairState) -> Result<f64> {
        match self.drift {
            Some(f) => f(t, s.x, self.target(t, s)?),
            None => Ok(0.0),
        }
    }

    fn advance(&self, s: &mut PairState, st: &Step, alpha: f64) -> Result<()> {
        if self.drift.is_some() {
            let a = self.vol(st.t0, s.x);
            let dx = alpha * st.dt() + a * st.db;
            s.x += dx;
            s.qv += dx * dx;
            s.int_a2 += a * a * st.dt();
        }
        self.signal.step(&mut s.sig, st.v0, st.v1, st.dwv)
    }

    fn record(&self, t: f64, s: &PairState, out: &mut Vec<f64>) -> Result<()> {
        let v = self.model.v(t);
        match (self.drift.is_some(), self.coords) {
            (false, _) => out.extend([s.sig.z, self.signal.u(&s.sig, v)?]),
            (true, Coordinates::Original) => out.extend([s.x, s.sig.z]),
            (true, Coordinates::Transformed) => out.extend([s.x, self.signal.u(&s.sig, v)?]),
        }
        Ok(())
    }

    fn finish(&self, s: &PairState, out: &mut Vec<f64>) -> Result<()> {
        if self.drift.is_some() {
            out.extend([s.qv, s.int_a2]);
        }
        Ok(())
    }
}

/// Z (and U = A(V(t),Z)) from the initial law μ.
pub fn simulate_signal(kernel: &TransitionKernel, grid: &TimeGrid, cfg: &SimConfig, scheme: SignalScheme) -> Result<PathEnsemble> {
    let m = PairModel { signal: Signal::new(kernel, scheme)?, model: kernel.model(), coords: Coordinates::Original, drift: None };
    let name = match scheme {
        SignalScheme::Exact => "signal-exact",
        SignalScheme::Euler => "signal-euler",
    };
    simulate_model(&m, &kernel.model().profile, grid, cfg, name)
}

pub(crate) fn default_scheme(kernel: &TransitionKernel) -> SignalScheme {
    let tr = kernel.transform();
    if tr.b_is_time_only() || tr.ou_rate().is_some() {
        SignalScheme::Exact
    } else {
        SignalScheme::Euler
    }
}

pub(crate) fn closed_only(kernel: &TransitionKernel) -> Result<()> {
    if kernel.is_closed() {
        Ok(())
    } else {
        Err(Error::BackendMismatch("path simulation needs a closed-form kernel; the numeric backend solves a PDE per drift evaluation".into()))
    }
}

/// The bridge dX = a(t,X)dB + a²∂ₓlog ρ(t,X,Z) dt by Euler, with Z exact
/// when possible.
pub fn simulate_bridge(kernel: &TransitionKernel, grid: &TimeGrid, cfg: &SimConfig) -> Result<PathEnsemble> {
    closed_only(kernel)?;
    let drift = |t: f64, x: f64, z: f64| kernel.bridge_drift(t, x, z);
    simulate_bridge_with_drift(kernel, grid, cfg, &drift, "bridge-euler")
}

/// Same noise and signal as [`simulate_bridge`] with a caller-supplied drift
/// α(t, x, z).
pub fn simulate_bridge_with_drift(kernel: &TransitionKernel, grid: &TimeGrid, cfg: &SimConfig, drift: &DriftFn<'_>, scheme: &str) -> Result<PathEnsemble> {
    let signal = Signal::new(kernel, default_scheme(kernel))?;
    let m = PairModel { signal, model: kernel.model(), coords: Coordinates::Original, drift: Some(drift) };
    simulate_model(&m, &kernel.model().profile, grid, cfg, scheme)
}

/// The transformed pair: dR = dB + (p_x/p(t,R,U) + b(t,R))dt with U exact.
/// Driven by the same noise as [`simulate_bridge`] for equal seeds.
pub fn simulate_transformed(kernel: &TransitionKernel, grid: &TimeGrid, cfg: &SimConfig) -> Result<PathEnsemble> {
    closed_only(kernel)?;
    let tr = kernel.transform();
    let drift = |t: f64, r: f64, u: f64| Ok(kernel.transformed_drift(t, r, u)? + tr.eval_b(t, r)?);
    let m = PairModel { signal: Signal::new(kernel, default_scheme(kernel))?, model: kernel.model(), coords: Coordinates::Transformed, drift: Some(&drift) };
    simulate_model(&m, &kernel.model().profile, grid, cfg, "transformed-euler")
}

/// Mean and variance of R_t from its explicit Gaussian solution: R_t = U₀ +
/// ∫₀ᵗσ²b(V) - B(t,V(t)) - E(0,t)(U₀ - B(0,c)) - ∫E(s,t)(σdβ - dB), with
/// E(s,t) = exp(-∫ₛᵗ dr/(V(r)-r)) and U₀ ~ N(B(0,c), c).
pub fn exact_r_moments(kernel: &TransitionKernel, t: f64) -> Result<(f64, f64)> {
    let tr = kernel.transform();
    if !tr.b_is_time_only() {
        return Err(Error::BackendMismatch("the explicit R solution needs b = b(t)".into()));
    }
    if !(0.0..1.0).contains(&t) {
        return Err(Error::DomainError(format!("t = {t} outside [0,1)")));
    }
    let model = kernel.model();
    let p = &model.profile;
    let c = p.c;
    let b = |s: f64| tr.b_time(s).unwrap_or(0.0);
    let n = 2000;
    let drift = simpson(|s| p.sigma2(s) * b(p.v(s)), 0.0, t, n);
    let mean = tr.b_int(0.0, c)? + drift - tr.b_int(t, p.v(t))?;
    let e0 = p.decay(0.0, t);
    let var = c * (1.0 - e0).powi(2)
        + simpson(
            |s| {
                let e = p.decay(s, t);
                p.sigma2(s) * (1.0 - e).powi(2) + e * e
            },
            0.0,
            t,
            n,
        );
    Ok((mean, var))
}

/// Independent draws of R_t from [`exact_r_moments`].
pub fn sample_exact_r(kernel: &TransitionKernel, t: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    let (m, v) = exact_r_moments(kernel, t)?;
    let sd = v.sqrt();
    Ok((0..n as u64).map(|i| m + sd * NodeStream::new(seed, i, Tag::Aux).normal()).collect())
}

/// Coefficients of the OU coupling ODE b' = θ - γb at t.
fn ou_coefficients(model: &ModelSpec, k: f64, t: f64) -> (f64, f64) {
    let tau = model.profile.gap(t);
    let kt = k * tau;
    let gamma = k / kt.tanh() - k * model.sigma2(t);
    let theta = k / kt.sinh();
    (gamma, theta)
}

/// Drift of the OU bridge: 2k(Z - X e^{-kτ})/(e^{kτ} - e^{-kτ}) - kX, τ = V(t) - t.
pub fn ou_bridge_drift(model: &ModelSpec, k: f64, t: f64, x: f64, z: f64) -> f64 {
    let tau = model.profile.gap(t);
    let kt = k * tau;
    k * (z - x * (-kt).exp()) / kt.sinh() - k * x
}

/// b(t) solving b' + γb = θ, b(0) = 0, at increasing `times` (from 0). With
/// b(t) so chosen, Y = X - b(t)Z has no Z in its drift.
pub fn ou_coupling(model: &ModelSpec, k: f64, times: &[f64]) -> Result<Vec<f64>> {
    if !(k > 0.0) {
        return Err(Error::Config(format!("mean reversion k must be positive, got {k}")));
    }
    let rhs = |t: f64, b: f64| {
        let (g, th) = ou_coefficients(model, k, t);
        th - g * b
    };
    let mut out = Vec::with_capacity(times.len());
    let (mut t, mut b) = (0.0, 0.0);
    for &target in times {
        if target < t || target >= 1.0 {
            return Err(Error::OdeFailure(format!("times must increase within [0,1), got {target}")));
        }
        let span = target - t;
        if span > 0.0 {
            // RK4 is stable for hγ ≲ 2.8; γ ~ 1/(V-t) grows toward the end
            let (g_end, _) = ou_coefficients(model, k, target);
            let n = ((span * g_end.abs().max(1.0) / 0.1).ceil() as usize).max((span / 0.01).ceil() as usize);
            let h = span / n as f64;
            for _ in 0..n {
                let k1 = rhs(t, b);
                let k2 = rhs(t + 0.5 * h, b + 0.5 * h * k1);
                let k3 = rhs(t + 0.5 * h, b + 0.5 * h * k2);
                let k4 = rhs(t + h, b + h * k3);
                b += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                t += h;
            }
            t = target;
        }
        if !b.is_finite() {
            return Err(Error::OdeFailure(format!("b diverged at t = {t}")));
        }
        out.push(b);
    }
    Ok(out)
}

/// (t, b(t)) at t = 1 - 1e-10, approached on a geometric grid.
pub fn ou_coupling_end(model: &ModelSpec, k: f64) -> Result<(f64, f64)> {
    let mut times: Vec<f64> = (0..=50).map(|i| 0.01 * i as f64).collect();
    let mut gap = 0.5;
    while gap > 1e-10 {
        gap = (gap * 0.9f64).max(1e-10);
        times.push(1.0 - gap);
    }
    let b = ou_coupling(model, k, &times)?;
    Ok((times[times.len() - 1], b[b.len() - 1]))
}

/// OU bridge paths with Y = X - b(t)Z at the recorded times.
#[derive(Debug, Clone, Serialize)]
pub struct OuBridge {
    pub ensemble: PathEnsemble,
    /// b at the recorded times.
    pub coupling: Vec<f64>,
}

pub fn simulate_ou_bridge(kernel: &TransitionKernel, grid: &TimeGrid, cfg: &SimConfig) -> Result<OuBridge> {
    let model = kernel.model();
    let k = kernel
        .transform()
        .ou_rate()
        .ok_or_else(|| Error::Config("the OU bridge needs a mean-reverting model".into()))?;
    let drift = |t: f64, x: f64, z: f64| Ok(ou_bridge_drift(model, k, t, x, z));
    let mut ensemble = simulate_bridge_with_drift(kernel, grid, cfg, &drift, "ou-bridge-euler")?;
    let coupling = ou_coupling(model, k, &ensemble.times)?;
    let y = ensemble.series["X"]
        .iter()
        .zip(&ensemble.series["Z"])
        .map(|(xs, zs)| xs.iter().zip(zs).zip(&coupling).map(|((x, z), b)| x - b * z).collect())
        .collect();
    ensemble.series.insert("Y".into(), y);
    Ok(OuBridge { ensemble, coupling })
}

/// φ and the derivatives that enter its backward equation.
#[derive(Debug, Clone, Copy)]
pub struct PhiJet {
    pub value: f64,
    pub t: f64,
    pub x: f64,
    pub xx: f64,
    pub z: f64,
    pub zz: f64,
}

/// ln φ(t,x,z) with φ = (2(Λ+ℓ))^{-1/2} exp((x-z)²/(2λ²(Λ+ℓ))).
pub fn log_phi(model: &ModelSpec, t: f64, x: f64, z: f64) -> f64 {
    let p = &model.profile;
    let s = p.big_lambda(t) + model.ell;
    let lam = p.lambda(t);
    let d = x - z;
    -0.5 * (2.0 * s).ln() + d * d / (2.0 * lam * lam * s)
}

pub fn phi(model: &ModelSpec, t: f64, x: f64, z: f64) -> f64 {
    log_phi(model, t, x, z).exp()
}

/// Analytic jet of φ, using λ' = -λ/(V-t) and Λ' = (1+σ²)/λ².
pub fn phi_jet(model: &ModelSpec, t: f64, x: f64, z: f64) -> PhiJet {
    let p = &model.profile;
    let s = p.big_lambda(t) + model.ell;
    let lam = p.lambda(t);
    let s2 = model.sigma2(t);
    let g = lam * lam * s;
    let dg = -2.0 * g / p.gap(t) + (1.0 + s2);
    let ds = (1.0 + s2) / (lam * lam);
    let d = x - z;
    let value = phi(model, t, x, z);
    let curv = value * (d * d / (g * g) + 1.0 / g);
    PhiJet {
        value,
        t: value * (-ds / (2.0 * s) - d * d * dg / (2.0 * g * g)),
        x: value * d / g,
        xx: curv,
        z: -value * d / g,
        zz: curv,
    }
}

/// Mean of φ(t,X_t,Z_t) over recorded times; a supermartingale has means
/// that never rise by more than `slack` joint standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct SupermartingaleReport {
    pub times: Vec<f64>,
    pub means: Vec<f64>,
    pub ses: Vec<f64>,
    /// Largest rise between consecutive means, in joint standard errors.
    pub worst_rise: f64,
    pub pass: bool,
}

pub fn supermartingale_diagnostic(model: &ModelSpec, ens: &PathEnsemble, slack: f64) -> Result<SupermartingaleReport> {
    let (xs, zs) = (ens.series("X")?, ens.series("Z")?);
    let mut means = Vec::with_capacity(ens.times.len());
    let mut ses = Vec::with_capacity(ens.times.len());
    for (k, &t) in ens.times.iter().enumerate() {
        let vals: Vec<f64> = xs.iter().zip(zs).map(|(x, z)| phi(model, t, x[k], z[k])).collect();
        let (m, se) = stats::mean_se(&vals);
        means.push(m);
        ses.push(se);
    }
    let mut worst = f64::NEG_INFINITY;
    for k in 1..means.len() {
        let joint = (ses[k] * ses[k] + ses[k - 1] * ses[k - 1]).sqrt();
        let rise = (means[k] - means[k - 1]) / joint.max(f64::MIN_POSITIVE);
        worst = worst.max(rise);
    }
    let pass = worst.is_finite() && worst <= slack || means.len() < 2;
    Ok(SupermartingaleReport { times: ens.times.clone(), means, ses, worst_rise: worst, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Scenario;
    use std::sync::Arc;

    fn kernel(s: Scenario) -> TransitionKernel {
        TransitionKernel::for_model(s.build().unwrap()).unwrap()
    }

    #[test]
    fn uniform_grid_ends_at_one_minus_eps() {
        let g = TimeGrid::uniform(10, 1e-3).unwrap();
        assert_eq!(g.steps(), 10);
        assert_eq!(g.end(), 1.0 - 1e-3);
        assert!((g.nodes[5] - 0.4995).abs() < 1e-15);
    }

    #[test]
    fn geometric_tail_shrinks_by_the_ratio() {
        let g = TimeGrid::geometric(200, 1e-3).unwrap();
        assert_eq!(g.steps(), 200);
        assert_eq!(g.end(), 1.0 - 1e-3);
        let start = g.nearest(0.9);
        assert!((g.nodes[start] - 0.9).abs() < 1e-15);
        for i in start..g.steps() - 1 {
            let r = (1.0 - g.nodes[i + 1]) / (1.0 - g.nodes[i]);
            assert!((r - 0.75).abs() < 1e-9, "{i} {r}");
        }
        assert!(g.nodes.windows(2).all(|w| w[1] > w[0]));
        assert!(TimeGrid::geometric(10, 1e-3).is_err());
    }

    #[test]
    fn bridge_split_preserves_the_increment_law() {
        // W(1) given W(2) = w: mean w/2, variance 1/2
        let draws: Vec<f64> = (0..20000).map(|i| bridge_split(1.0, 0.0, 1.0, 2.0, NodeStream::new(3, i, Tag::Aux).normal())).collect();
        let (m, _) = stats::mean_se(&draws);
        assert!((m - 0.5).abs() < 0.02);
        assert!((stats::variance(&draws) - 0.5).abs() < 0.02);
    }

    #[test]
    fn paths_do_not_depend_on_worker_count() {
        let k = kernel(Scenario::back_pedersen());
        let g = TimeGrid::uniform(64, 1e-3).unwrap();
        let a = simulate_bridge(&k, &g, &SimConfig::new(40, 9).workers(1)).unwrap();
        let b = simulate_bridge(&k, &g, &SimConfig::new(40, 9).workers(3)).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = simulate_bridge(&k, &g, &SimConfig::new(40, 10).workers(1)).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn signal_has_the_operational_time_law() {
        // Gaussian case: Z_t ~ N(0, V(t))
        let k = kernel(Scenario::back_pedersen());
        let g = TimeGrid::uniform(50, 1e-3).unwrap();
        let e = simulate_signal(&k, &g, &SimConfig::new(4000, 1), SignalScheme::Exact).unwrap();
        for t in [0.0, 0.5, 0.999] {
            let col = e.column("Z", e.index_of(t)).unwrap();
            let v = k.model().v(t);
            assert!(stats::mean(&col).abs() < 4.0 * (v / 4000.0).sqrt());
            assert!((stats::variance(&col) / v - 1.0).abs() < 0.08, "{t}");
        }
    }

    #[test]
    fn static_signal_does_not_move() {
        let k = kernel(Scenario::static_information());
        let g = TimeGrid::uniform(20, 1e-3).unwrap();
        let e = simulate_signal(&k, &g, &SimConfig::new(50, 2), SignalScheme::Exact).unwrap();
        for p in e.series("Z").unwrap() {
            assert!(p.iter().all(|z| *z == p[0]));
        }
    }

    #[test]
    fn euler_and_exact_signal_agree_in_law() {
        let k = kernel(Scenario::sqrt_quadratic());
        let g = TimeGrid::uniform(400, 1e-3).unwrap();
        let cfg = SimConfig::new(2000, 4);
        let ex = simulate_signal(&k, &g, &cfg, SignalScheme::Exact).unwrap();
        let eu = simulate_signal(&k, &g, &SimConfig::new(2000, 5), SignalScheme::Euler).unwrap();
        let i = ex.index_of(0.75);
        let v = stats::ks_two_sample(&ex.column("Z", i).unwrap(), &eu.column("Z", i).unwrap(), 0.01).unwrap();
        assert!(v.pass, "{v:?}");
        // U is carried exactly and matches A(V,Z)
        let u = ex.column("U", i).unwrap();
        let z = ex.column("Z", i).unwrap();
        let tr = k.transform();
        assert!((tr.eval_a(k.model().v(ex.times[i]), z[0]).unwrap() - u[0]).abs() < 1e-9);
    }

    #[test]
    fn gaussian_bridge_hits_the_signal() {
        let k = kernel(Scenario::back_pedersen());
        let g = TimeGrid::geometric(1024, 1e-3).unwrap();
        let e = simulate_bridge(&k, &g, &SimConfig::new(500, 11)).unwrap();
        let end = e.times.len() - 1;
        let gaps: Vec<f64> = e.column("X", end).unwrap().iter().zip(e.column("Z", end).unwrap()).map(|(x, z)| (x - z).abs()).collect();
        // |X - Z| at 1 - ε is about √(V-t)·0.67 ≈ 0.015
        assert!(stats::median(&gaps) < 0.03, "{}", stats::median(&gaps));
        // X_t ~ N(0, t) in its own filtration
        let x = e.column("X", e.index_of(0.5)).unwrap();
        assert!((stats::variance(&x) - 0.5).abs() < 0.08);
        assert_eq!(e.clipped, 0);
    }

    #[test]
    fn transformed_pair_tracks_the_bridge_pathwise() {
        // a = 1: R = X exactly, so the two schemes coincide up to rounding
        let k = kernel(Scenario::back_pedersen());
        let g = TimeGrid::uniform(256, 1e-3).unwrap();
        let cfg = SimConfig::new(20, 3);
        let b = simulate_bridge(&k, &g, &cfg).unwrap();
        let r = simulate_transformed(&k, &g, &cfg).unwrap();
        for (xp, rp) in b.series["X"].iter().zip(&r.series["R"]) {
            for (x, r) in xp.iter().zip(rp) {
                assert!((x - r).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn transformed_coordinates_match_a_of_x() {
        // A(t,X_t) and R_t share noise; the gap is Euler error O(Δt)
        let k = kernel(Scenario::sqrt_quadratic());
        let tr = k.transform();
        let errs: Vec<f64> = [128usize, 512]
            .iter()
            .map(|&n| {
                let g = TimeGrid::uniform(n, 0.05).unwrap();
                let cfg = SimConfig::new(200, 8);
                let b = simulate_bridge(&k, &g, &cfg).unwrap();
                let r = simulate_transformed(&k, &g, &cfg).unwrap();
                let i = b.index_of(0.5);
                let t = b.times[i];
                let d: Vec<f64> = (0..200).map(|p| (tr.eval_a(t, b.series["X"][p][i]).unwrap() - r.series["R"][p][i]).abs()).collect();
                stats::mean(&d)
            })
            .collect();
        assert!(errs[1] < 0.5 * errs[0], "{errs:?}");
    }

    #[test]
    fn explicit_r_law_is_the_own_filtration_law() {
        // in its own filtration R is Brownian with drift b(t): N(B(0,t), t)
        let k = kernel(Scenario::back_pedersen());
        for t in [0.1, 0.5, 0.9, 0.99] {
            let (m, v) = exact_r_moments(&k, t).unwrap();
            assert!(m.abs() < 1e-12);
            assert!((v - t).abs() < 1e-7, "{t} {v}");
        }
        let tr = Arc::new(SpaceTransform::with_time_drift(Arc::new(ModelSpec::back_pedersen()), |s| 0.3 * s));
        let k = TransitionKernel::auto(tr);
        let (m, v) = exact_r_moments(&k, 0.6).unwrap();
        assert!((m - 0.15 * 0.36).abs() < 1e-9, "{m}");
        assert!((v - 0.6).abs() < 1e-7);
    }

    #[test]
    fn euler_r_matches_the_explicit_sampler() {
        let k = kernel(Scenario::back_pedersen());
        let g = TimeGrid::uniform(512, 1e-3).unwrap();
        let e = simulate_transformed(&k, &g, &SimConfig::new(3000, 21)).unwrap();
        let i = e.index_of(0.5);
        let exact = sample_exact_r(&k, e.times[i], 3000, 77).unwrap();
        assert!(stats::ks_two_sample(&e.column("R", i).unwrap(), &exact, 0.01).unwrap().pass);
    }

    #[test]
    fn euler_strong_error_shrinks_with_the_step() {
        // paths at Δt and 2Δt built from the same fine increments
        let model = ModelSpec::back_pedersen();
        let p = &model.profile;
        let t_end = 0.9;
        let fine = 1024;
        let errs: Vec<f64> = (0..100u64)
            .map(|path| {
                let mut noise = NodeStream::new(5, path, Tag::Noise);
                let dt = t_end / fine as f64;
                let incs: Vec<(f64, f64)> = (0..fine).map(|_| noise.pair()).collect();
                let z0 = NodeStream::new(5, path, Tag::Init).normal() * p.c.sqrt();
                let run = |stride: usize| {
                    let (mut r, mut u) = (0.0, z0);
                    for n in (0..fine).step_by(stride) {
                        let t0 = n as f64 * dt;
                        let (mut dwv, mut db) = (0.0, 0.0);
                        for (eb, ew) in &incs[n..n + stride] {
                            dwv += (0.5 * dt).sqrt() * eb;
                            db += dt.sqrt() * ew;
                        }
                        let h = stride as f64 * dt;
                        r += (u - r) / p.gap(t0) * h + db;
                        u += dwv;
                    }
                    r
                };
                ((run(4) - run(1)).abs(), (run(8) - run(1)).abs())
            })
            .fold(vec![0.0, 0.0], |mut acc, (a, b)| {
                acc[0] += a;
                acc[1] += b;
                acc
            });
        assert!(errs[0] < 0.75 * errs[1], "{errs:?}");
    }

    #[test]
    fn follmer_drift_uses_the_supplied_function() {
        let k = kernel(Scenario::back_pedersen());
        let g = TimeGrid::uniform(200, 1e-3).unwrap();
        let drift = |t: f64, x: f64, z: f64| Ok((z - x) / (1.0 - t));
        let e = simulate_bridge_with_drift(&k, &g, &SimConfig::new(400, 6), &drift, "follmer").unwrap();
        // V(t) ≠ t here, so Var X_t departs from t
        let x = e.column("X", e.index_of(0.5)).unwrap();
        assert!((stats::variance(&x) - 0.5).abs() > 0.05, "{}", stats::variance(&x));
    }

    #[test]
    fn drift_clip_halves_steps() {
        let k = kernel(Scenario::back_pedersen());
        let g = TimeGrid::uniform(10, 1e-3).unwrap();
        let drift = |_: f64, _: f64, _: f64| Ok(1e3);
        let mut cfg = SimConfig::new(2, 1);
        cfg.max_halvings = 3;
        let e = simulate_bridge_with_drift(&k, &g, &cfg, &drift, "clip").unwrap();
        assert!(e.halvings > 0 && e.clipped > 0);
        let x = e.column("X", e.times.len() - 1).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn numeric_kernels_are_refused_for_paths() {
        let mut s = Scenario::back_pedersen();
        s.coefficient = crate::model::CoeffSpec::TanhBump { base: 1.0, amp: 0.5 };
        let k = kernel(s);
        let g = TimeGrid::uniform(10, 1e-3).unwrap();
        assert!(matches!(simulate_bridge(&k, &g, &SimConfig::new(2, 1)), Err(Error::BackendMismatch(_))));
    }

    #[test]
    fn ou_drift_is_the_kernel_bridge_drift() {
        let k = kernel(Scenario::ornstein_uhlenbeck(1.0));
        for (t, x, z) in [(0.1, 0.3, -0.2), (0.7, -1.0, 0.5), (0.99, 0.2, 0.25)] {
            let a = ou_bridge_drift(k.model(), 1.0, t, x, z);
            let b = k.transformed_drift(t, x, z).unwrap() + k.transform().eval_b(t, x).unwrap();
            assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "{a} {b}");
        }
    }

    #[test]
    fn ou_coupling_removes_z_from_the_y_drift() {
        // drift of Y = X - bZ: X-drift - b'Z + kσ²bZ must equal -k·coth(kτ)·Y
        let model = Scenario::ornstein_uhlenbeck(1.3).build().unwrap();
        let k = 1.3;
        let times = [0.2, 0.5, 0.8, 0.95];
        let bs = ou_coupling(&model, k, &times).unwrap();
        for (&t, &b) in times.iter().zip(&bs) {
            let (g, th) = ou_coefficients(&model, k, t);
            let db = th - g * b;
            let tau = model.profile.gap(t);
            for (y, z) in [(0.4, -1.1), (-0.3, 2.0)] {
                let x = y + b * z;
                let dy = ou_bridge_drift(&model, k, t, x, z) - db * z + k * model.sigma2(t) * b * z;
                assert!((dy + k / (k * tau).tanh() * y).abs() < 1e-10, "{t} {dy}");
            }
        }
    }

    #[test]
    fn ou_coupling_reaches_one() {
        let model = Scenario::ornstein_uhlenbeck(1.0).build().unwrap();
        let (t, b) = ou_coupling_end(&model, 1.0).unwrap();
        assert!(1.0 - t <= 1.1e-10);
        assert!((b - 1.0).abs() < 1e-8, "{b}");
        // b(0.25) against a fine explicit Euler reference
        let n = 200_000;
        let h = 0.25 / n as f64;
        let mut r = 0.0;
        for i in 0..n {
            let (g, th) = ou_coefficients(&model, 1.0, i as f64 * h);
            r += h * (th - g * r);
        }
        assert!((ou_coupling(&model, 1.0, &[0.25]).unwrap()[0] - r).abs() < 1e-5);
    }

    #[test]
    fn ou_bridge_records_y() {
        let k = kernel(Scenario::ornstein_uhlenbeck(1.0));
        let g = TimeGrid::geometric(512, 1e-3).unwrap();
        let o = simulate_ou_bridge(&k, &g, &SimConfig::new(300, 2)).unwrap();
        let end = o.ensemble.times.len() - 1;
        let x = o.ensemble.column("X", end).unwrap();
        let z = o.ensemble.column("Z", end).unwrap();
        let gaps: Vec<f64> = x.iter().zip(&z).map(|(x, z)| (x - z).abs()).collect();
        assert!(stats::median(&gaps) < 0.05);
        assert_eq!(o.coupling.len(), o.ensemble.times.len());
        assert!(o.ensemble.series.contains_key("Y"));
    }

    #[test]
    fn phi_jet_matches_finite_differences() {
        let model = ModelSpec::back_pedersen();
        let (t, x, z) = (0.4, 0.3, -0.2);
        let j = phi_jet(&model, t, x, z);
        let h = 1e-5;
        let ft = (phi(&model, t + h, x, z) - phi(&model, t - h, x, z)) / (2.0 * h);
        let fx = (phi(&model, t, x + h, z) - phi(&model, t, x - h, z)) / (2.0 * h);
        let fz = (phi(&model, t, x, z + h) - phi(&model, t, x, z - h)) / (2.0 * h);
        assert!((ft - j.t).abs() < 1e-6 * j.value.abs().max(1.0), "{ft} {}", j.t);
        assert!((fx - j.x).abs() < 1e-7);
        assert!((fz - j.z).abs() < 1e-7);
    }

    #[test]
    fn phi_blows_up_off_target_near_the_end() {
        let model = ModelSpec::back_pedersen();
        assert!(log_phi(&model, 1.0 - 1e-4, 0.5, 0.0) > 1e6f64.ln());
        assert!(phi(&model, 0.0, 0.0, 0.0) < 1.0);
    }

    #[test]
    fn phi_is_a_supermartingale_along_the_bridge() {
        let k = kernel(Scenario::back_pedersen());
        let g = TimeGrid::geometric(1024, 1e-3).unwrap();
        let e = simulate_bridge(&k, &g, &SimConfig::new(4000, 12)).unwrap();
        let r = supermartingale_diagnostic(k.model(), &e, 2.0).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn csv_and_summary_are_written() {
        let k = kernel(Scenario::back_pedersen());
        let g = TimeGrid::uniform(16, 1e-3).unwrap();
        let e = simulate_bridge(&k, &g, &SimConfig::new(3, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        e.write_csv(&dir.path().join("p.csv")).unwrap();
        e.write_summary_json(&dir.path().join("p.json")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * e.times.len());
        assert!(text.starts_with("path,t,X,Z"));
        let js: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("p.json")).unwrap()).unwrap();
        assert_eq!(js["n_paths"], 3);
    }
}
