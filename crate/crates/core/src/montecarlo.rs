//! Euler simulation of square-root models, density processes along paths,
//! and the statistical experiments built on them.
//!
//! The scheme iterates
//!
//! ```text
//!     X_{t+h} = X_t + (a X_t + b) h + Sigma ( sqrt(|v(X_t)|) . sqrt(h) Z ),
//! ```
//!
//! with `Z` a standard Gaussian vector, deliberately using `sqrt(|v|)` with
//! no truncation or reflection: the dynamics under study are exactly the
//! ones whose factors may cross zero. Alongside the state, the engine
//! accumulates the log-density of the reweighting with parameter `lambda`,
//!
//! ```text
//!     log L_{t+h} = log L_t + phi_t . sqrt(h) Z - |phi_t|^2 h / 2,
//!     phi_{t,i}   = sgn(v_i(X_t)) sqrt(|v_i(X_t)|) lambda_i,
//! ```
//!
//! frozen at zero from the first grid crossing of the factor below zero
//! when running in stopped mode. Under this discrete scheme `L` is a
//! product of unit-mean lognormals, so `E[L] = 1` holds exactly at every
//! grid time, and reweighting by `L` reproduces the Euler chain of the
//! tilted model exactly on the same grid; the statistical checks therefore
//! test pure Monte Carlo noise, not discretization bias.
//!
//! Determinism: every path draws from its own counter-indexed stream of a
//! seeded ChaCha generator, paths are grouped into fixed-size batches, and
//! batch results merge through a fixed pairwise tree, so results are
//! bit-identical for any worker count.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::certify::{to_tilted_model, Certificate, CertificateRoute};
use crate::error::{Error, Result};
use crate::model::{sgn, SdeModel};

/// Paths per work unit; fixed so that parallel scheduling cannot affect
/// which paths share an accumulator.
pub const BATCH_SIZE: u64 = 1024;
/// State sup-norm beyond which a path is flagged as exploded.
pub const OVERFLOW_LIMIT: f64 = 1e12;
/// Fraction of excluded paths above which a run fails loudly.
pub const MAX_EXCLUDED_FRACTION: f64 = 1e-3;
/// Upper bound on the total step count of a single run.
pub const MAX_TOTAL_STEPS: usize = 100_000_000;

/// Environment variable overriding the simulation worker count
/// (0 or unset: automatic).
pub const WORKERS_ENV: &str = "FELLER_PROBE_THREADS";

/// Simulation configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    /// Horizon `T`.
    pub horizon: f64,
    /// Requested step; the effective step is `T / n` for the smallest
    /// multiple of four `n` with `T / n <= dt`, so the quarter points of
    /// the horizon fall exactly on the grid.
    pub dt: f64,
    pub n_paths: u64,
    pub master_seed: u64,
    /// Discretization tag; only `"euler-abs"` is recognized.
    #[serde(default = "default_scheme")]
    pub scheme: String,
}

fn default_scheme() -> String {
    "euler-abs".to_owned()
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidInput(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if !(self.dt > 0.0) || self.dt > self.horizon {
            return Err(Error::InvalidInput(format!(
                "step must satisfy 0 < dt <= horizon, got {}",
                self.dt
            )));
        }
        if self.n_paths == 0 {
            return Err(Error::InvalidInput("need at least one path".into()));
        }
        if self.scheme != "euler-abs" {
            return Err(Error::InvalidInput(format!(
                "unknown scheme {:?}; only \"euler-abs\" is supported",
                self.scheme
            )));
        }
        let (n_steps, _) = self.grid();
        if n_steps > MAX_TOTAL_STEPS {
            return Err(Error::InvalidInput(format!(
                "grid of {n_steps} steps exceeds the {MAX_TOTAL_STEPS} step limit"
            )));
        }
        Ok(())
    }

    /// Effective grid: step count (a multiple of four) and step size.
    pub fn grid(&self) -> (usize, f64) {
        let raw = (self.horizon / self.dt).ceil() as usize;
        let n = raw.max(1).div_ceil(4) * 4;
        (n, self.horizon / n as f64)
    }

    /// Convenience constructor used throughout the tests.
    pub fn new(horizon: f64, dt: f64, n_paths: u64, master_seed: u64) -> Self {
        SimConfig {
            horizon,
            dt,
            n_paths,
            master_seed,
            scheme: default_scheme(),
        }
    }
}

/// Full trajectory of one path, for diagnostics and invariant tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathRecord {
    /// Grid-indexed states, including the start (length `n_steps + 1`).
    pub states: Vec<Vec<f64>>,
    /// Grid-indexed log-density, `logl[0] = 0`.
    pub logl: Vec<f64>,
    /// First grid index (>= 1) at which the factor is negative.
    pub tau_index: Option<usize>,
}

/// Estimates at one measurement time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimeStats {
    pub t: f64,
    pub mean_state: Vec<f64>,
    pub se_state: Vec<f64>,
    /// Mean and standard error of the first factor `v_1(X_t)`.
    pub mean_factor: f64,
    pub se_factor: f64,
    pub mean_l: f64,
    pub se_l: f64,
    /// Estimate of `P(tau < t)` with its binomial standard error.
    pub frac_tau_before: f64,
    pub se_tau: f64,
    pub tau_count: u64,
    /// Estimate of `P(v_1(X_t) < 0)` with its binomial standard error.
    pub frac_v_negative: f64,
    pub se_v_negative: f64,
    pub v_negative_count: u64,
}

/// Aggregated simulation output at the four quarter points of the horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimResult {
    pub times: Vec<TimeStats>,
    /// Paths included in the statistics.
    pub n_paths: u64,
    pub n_excluded: u64,
    pub n_steps: usize,
    pub dt_effective: f64,
}

impl SimResult {
    /// Stats at the horizon.
    pub fn at_horizon(&self) -> &TimeStats {
        self.times.last().expect("quarter points are non-empty")
    }
}

/// Row-major copy of the model for the inner loop.
struct FlatModel {
    p: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    sigma: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    x0: Vec<f64>,
    identity_sigma: bool,
}

impl FlatModel {
    fn new(m: &SdeModel) -> Self {
        let p = m.p;
        let flat = |mat: &nalgebra::DMatrix<f64>| -> Vec<f64> {
            (0..p).flat_map(|i| (0..p).map(move |j| mat[(i, j)])).collect()
        };
        let identity_sigma = (0..p).all(|i| {
            (0..p).all(|j| m.sigma[(i, j)] == if i == j { 1.0 } else { 0.0 })
        });
        FlatModel {
            p,
            a: flat(&m.a),
            b: m.b.iter().copied().collect(),
            sigma: flat(&m.sigma),
            alpha: m.alpha.iter().copied().collect(),
            beta: flat(&m.beta),
            x0: m.x0.iter().copied().collect(),
            identity_sigma,
        }
    }

    #[inline]
    fn factors(&self, x: &[f64], v: &mut [f64]) {
        for i in 0..self.p {
            let mut acc = self.alpha[i];
            let row = &self.beta[i * self.p..(i + 1) * self.p];
            for j in 0..self.p {
                acc += row[j] * x[j];
            }
            v[i] = acc;
        }
    }
}

/// Per-path grid snapshots folded into the accumulators only when the path
/// finishes without overflowing.
struct PathOutcome {
    states: [Vec<f64>; 4],
    factors: [f64; 4],
    logl: [f64; 4],
    tau_index: Option<usize>,
    excluded: bool,
}

/// Merge-only moment accumulator for one batch of paths.
#[derive(Clone)]
struct Accum {
    p: usize,
    n: u64,
    n_excluded: u64,
    sum_state: [Vec<f64>; 4],
    sumsq_state: [Vec<f64>; 4],
    sum_factor: [f64; 4],
    sumsq_factor: [f64; 4],
    sum_l: [f64; 4],
    sumsq_l: [f64; 4],
    tau_count: [u64; 4],
    vneg_count: [u64; 4],
}

impl Accum {
    fn zero(p: usize) -> Self {
        let zv = || [vec![0.0; p], vec![0.0; p], vec![0.0; p], vec![0.0; p]];
        Accum {
            p,
            n: 0,
            n_excluded: 0,
            sum_state: zv(),
            sumsq_state: zv(),
            sum_factor: [0.0; 4],
            sumsq_factor: [0.0; 4],
            sum_l: [0.0; 4],
            sumsq_l: [0.0; 4],
            tau_count: [0; 4],
            vneg_count: [0; 4],
        }
    }

    fn push(&mut self, out: &PathOutcome, quarter_indices: &[usize; 4]) {
        if out.excluded {
            self.n_excluded += 1;
            return;
        }
        self.n += 1;
        for q in 0..4 {
            for j in 0..self.p {
                let s = out.states[q][j];
                self.sum_state[q][j] += s;
                self.sumsq_state[q][j] += s * s;
            }
            let f = out.factors[q];
            self.sum_factor[q] += f;
            self.sumsq_factor[q] += f * f;
            let l = out.logl[q].exp();
            self.sum_l[q] += l;
            self.sumsq_l[q] += l * l;
            if out.tau_index.is_some_and(|k| k < quarter_indices[q]) {
                self.tau_count[q] += 1;
            }
            if f < 0.0 {
                self.vneg_count[q] += 1;
            }
        }
    }

    fn merge(mut self, other: &Accum) -> Accum {
        self.n += other.n;
        self.n_excluded += other.n_excluded;
        for q in 0..4 {
            for j in 0..self.p {
                self.sum_state[q][j] += other.sum_state[q][j];
                self.sumsq_state[q][j] += other.sumsq_state[q][j];
            }
            self.sum_factor[q] += other.sum_factor[q];
            self.sumsq_factor[q] += other.sumsq_factor[q];
            self.sum_l[q] += other.sum_l[q];
            self.sumsq_l[q] += other.sumsq_l[q];
            self.tau_count[q] += other.tau_count[q];
            self.vneg_count[q] += other.vneg_count[q];
        }
        self
    }
}

/// Merges accumulators along a fixed binary tree over the batch order, so
/// the floating-point result does not depend on scheduling.
fn pairwise_merge(mut items: Vec<Accum>, p: usize) -> Accum {
    if items.is_empty() {
        return Accum::zero(p);
    }
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut iter = items.into_iter();
        while let Some(first) = iter.next() {
            match iter.next() {
                Some(second) => next.push(first.merge(&second)),
                None => next.push(first),
            }
        }
        items = next;
    }
    items.pop().expect("non-empty")
}

/// Sums a slice along a fixed pairwise tree (deterministic and accurate).
fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Scratch space reused across the paths of one batch.
struct Buffers {
    x: Vec<f64>,
    v: Vec<f64>,
    z: Vec<f64>,
    root: Vec<f64>,
    newx: Vec<f64>,
}

impl Buffers {
    fn new(p: usize) -> Self {
        Buffers {
            x: vec![0.0; p],
            v: vec![0.0; p],
            z: vec![0.0; p],
            root: vec![0.0; p],
            newx: vec![0.0; p],
        }
    }
}

trait StepSink {
    fn on_state(&mut self, grid_index: usize, x: &[f64], logl: f64);
}

struct NoSink;
impl StepSink for NoSink {
    #[inline]
    fn on_state(&mut self, _: usize, _: &[f64], _: f64) {}
}

struct RecordSink {
    states: Vec<Vec<f64>>,
    logl: Vec<f64>,
}
impl StepSink for RecordSink {
    fn on_state(&mut self, _: usize, x: &[f64], logl: f64) {
        self.states.push(x.to_vec());
        self.logl.push(logl);
    }
}

/// Points the generator at the start of the dedicated stream for one path,
/// making each path's noise a pure function of `(master_seed, path_index)`
/// regardless of what was drawn before on the same generator instance.
#[inline]
fn select_path_stream(rng: &mut ChaCha8Rng, path: u64) {
    rng.set_stream(path);
    rng.set_word_pos(0);
}

/// Runs one path on the effective grid. Quarter-point snapshots are taken
/// at the indices in `quarters`; the sink sees every grid state.
#[allow(clippy::too_many_arguments)]
fn run_path<S: StepSink>(
    fm: &FlatModel,
    lambda: &[f64],
    stopped: bool,
    n_steps: usize,
    h: f64,
    quarters: &[usize; 4],
    rng: &mut ChaCha8Rng,
    buf: &mut Buffers,
    sink: &mut S,
) -> PathOutcome {
    let p = fm.p;
    let sqrt_h = h.sqrt();
    let lambda_zero = lambda.iter().all(|&l| l == 0.0);

    buf.x.copy_from_slice(&fm.x0);
    fm.factors(&buf.x, &mut buf.v);
    let mut logl = 0.0f64;
    let mut tau_index: Option<usize> = None;
    let mut out = PathOutcome {
        states: [vec![0.0; p], vec![0.0; p], vec![0.0; p], vec![0.0; p]],
        factors: [0.0; 4],
        logl: [0.0; 4],
        tau_index: None,
        excluded: false,
    };
    sink.on_state(0, &buf.x, logl);

    for k in 0..n_steps {
        for j in 0..p {
            buf.z[j] = StandardNormal.sample(rng);
            buf.root[j] = buf.v[j].abs().sqrt();
        }
        // Density increment, from the pre-step state (predictable in the
        // driving noise). In stopped mode the integrand is zero from the
        // first grid crossing onward.
        if !lambda_zero && !(stopped && tau_index.is_some()) {
            let mut dot = 0.0;
            let mut norm2 = 0.0;
            for j in 0..p {
                let phi = sgn(buf.v[j]) * buf.root[j] * lambda[j];
                dot += phi * buf.z[j];
                norm2 += phi * phi;
            }
            logl += dot * sqrt_h - 0.5 * norm2 * h;
        }
        // State update.
        for i in 0..p {
            let arow = &fm.a[i * p..(i + 1) * p];
            let mut drift = fm.b[i];
            for j in 0..p {
                drift += arow[j] * buf.x[j];
            }
            let diffusion = if fm.identity_sigma {
                buf.root[i] * buf.z[i]
            } else {
                let srow = &fm.sigma[i * p..(i + 1) * p];
                let mut acc = 0.0;
                for j in 0..p {
                    acc += srow[j] * buf.root[j] * buf.z[j];
                }
                acc
            };
            buf.newx[i] = buf.x[i] + drift * h + diffusion * sqrt_h;
        }
        std::mem::swap(&mut buf.x, &mut buf.newx);

        let sup = buf.x.iter().fold(0.0f64, |m, &xi| m.max(xi.abs()));
        if !sup.is_finite() || sup > OVERFLOW_LIMIT || !logl.is_finite() {
            out.excluded = true;
            return out;
        }

        fm.factors(&buf.x, &mut buf.v);
        if tau_index.is_none() && buf.v[0] < 0.0 {
            tau_index = Some(k + 1);
        }
        sink.on_state(k + 1, &buf.x, logl);
        if let Some(q) = quarters.iter().position(|&qi| qi == k + 1) {
            out.states[q].copy_from_slice(&buf.x);
            out.factors[q] = buf.v[0];
            out.logl[q] = logl;
        }
    }
    out.tau_index = tau_index;
    out
}

fn quarter_indices(n_steps: usize) -> [usize; 4] {
    [n_steps / 4, n_steps / 2, 3 * n_steps / 4, n_steps]
}

/// Worker-count override from the environment; `None` means automatic.
fn configured_workers() -> Option<usize> {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

fn with_pool<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    let n = workers.or_else(configured_workers).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::InternalConsistency(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

fn check_inputs(model: &SdeModel, cfg: &SimConfig, lambda: &DVector<f64>) -> Result<()> {
    cfg.validate()?;
    if lambda.len() != model.p {
        return Err(Error::InvalidInput(format!(
            "tilt parameter has length {}, expected {}",
            lambda.len(),
            model.p
        )));
    }
    Ok(())
}

fn simulate_accum(
    model: &SdeModel,
    cfg: &SimConfig,
    lambda: &DVector<f64>,
    stopped: bool,
    workers: Option<usize>,
) -> Result<(Accum, usize, f64)> {
    check_inputs(model, cfg, lambda)?;
    let fm = FlatModel::new(model);
    let (n_steps, h) = cfg.grid();
    let quarters = quarter_indices(n_steps);
    let lam: Vec<f64> = lambda.iter().copied().collect();
    let n_batches = cfg.n_paths.div_ceil(BATCH_SIZE);

    let accums: Vec<Accum> = with_pool(workers, || {
        (0..n_batches)
            .into_par_iter()
            .map(|batch| {
                let lo = batch * BATCH_SIZE;
                let hi = ((batch + 1) * BATCH_SIZE).min(cfg.n_paths);
                let mut acc = Accum::zero(fm.p);
                let mut buf = Buffers::new(fm.p);
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
                for path in lo..hi {
                    select_path_stream(&mut rng, path);
                    let out = run_path(
                        &fm, &lam, stopped, n_steps, h, &quarters, &mut rng, &mut buf,
                        &mut NoSink,
                    );
                    acc.push(&out, &quarters);
                }
                acc
            })
            .collect()
    })?;
    Ok((pairwise_merge(accums, fm.p), n_steps, h))
}

fn finalize(acc: Accum, cfg: &SimConfig, n_steps: usize, h: f64) -> Result<SimResult> {
    let total = acc.n + acc.n_excluded;
    if acc.n_excluded as f64 > MAX_EXCLUDED_FRACTION * total as f64 {
        return Err(Error::SafetyCap(format!(
            "{} of {} paths exploded beyond |X| = {OVERFLOW_LIMIT:.0e}; \
             the tilted dynamics are too unstable on this horizon",
            acc.n_excluded, total
        )));
    }
    if acc.n == 0 {
        return Err(Error::SafetyCap("no paths survived".into()));
    }
    let n = acc.n as f64;
    let mean_se = |sum: f64, sumsq: f64| -> (f64, f64) {
        let mean = sum / n;
        if acc.n < 2 {
            return (mean, 0.0);
        }
        let var = ((sumsq - sum * sum / n) / (n - 1.0)).max(0.0);
        (mean, (var / n).sqrt())
    };
    let binom = |count: u64| -> (f64, f64) {
        let frac = count as f64 / n;
        (frac, (frac * (1.0 - frac) / n).sqrt())
    };
    let mut times = Vec::with_capacity(4);
    for q in 0..4 {
        let mut mean_state = Vec::with_capacity(acc.p);
        let mut se_state = Vec::with_capacity(acc.p);
        for j in 0..acc.p {
            let (m, s) = mean_se(acc.sum_state[q][j], acc.sumsq_state[q][j]);
            mean_state.push(m);
            se_state.push(s);
        }
        let (mean_factor, se_factor) = mean_se(acc.sum_factor[q], acc.sumsq_factor[q]);
        let (mean_l, se_l) = mean_se(acc.sum_l[q], acc.sumsq_l[q]);
        let (frac_tau, se_tau) = binom(acc.tau_count[q]);
        let (frac_neg, se_neg) = binom(acc.vneg_count[q]);
        times.push(TimeStats {
            t: (q + 1) as f64 * cfg.horizon / 4.0,
            mean_state,
            se_state,
            mean_factor,
            se_factor,
            mean_l,
            se_l,
            frac_tau_before: frac_tau,
            se_tau,
            tau_count: acc.tau_count[q],
            frac_v_negative: frac_neg,
            se_v_negative: se_neg,
            v_negative_count: acc.vneg_count[q],
        });
    }
    Ok(SimResult {
        times,
        n_paths: acc.n,
        n_excluded: acc.n_excluded,
        n_steps,
        dt_effective: h,
    })
}

/// Simulates the model under the reweighting parameter `lambda`, returning
/// quarter-point statistics. `stopped` freezes the density at the first
/// grid crossing of the factor below zero.
pub fn simulate(
    model: &SdeModel,
    cfg: &SimConfig,
    lambda: &DVector<f64>,
    stopped: bool,
) -> Result<SimResult> {
    simulate_with_workers(model, cfg, lambda, stopped, None)
}

/// [`simulate`] with an explicit worker-count override (used by the
/// determinism tests; `None` defers to the environment).
pub fn simulate_with_workers(
    model: &SdeModel,
    cfg: &SimConfig,
    lambda: &DVector<f64>,
    stopped: bool,
    workers: Option<usize>,
) -> Result<SimResult> {
    let (acc, n_steps, h) = simulate_accum(model, cfg, lambda, stopped, workers)?;
    finalize(acc, cfg, n_steps, h)
}

/// Replays selected paths with full trajectory recording. Deterministic:
/// the same indices always reproduce the same paths as the aggregate run.
pub fn simulate_paths(
    model: &SdeModel,
    cfg: &SimConfig,
    lambda: &DVector<f64>,
    stopped: bool,
    path_indices: &[u64],
) -> Result<Vec<PathRecord>> {
    check_inputs(model, cfg, lambda)?;
    let fm = FlatModel::new(model);
    let (n_steps, h) = cfg.grid();
    let quarters = quarter_indices(n_steps);
    let lam: Vec<f64> = lambda.iter().copied().collect();
    let mut records = Vec::with_capacity(path_indices.len());
    let mut buf = Buffers::new(fm.p);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    for &path in path_indices {
        if path >= cfg.n_paths {
            return Err(Error::InvalidInput(format!(
                "path index {path} out of range (n_paths = {})",
                cfg.n_paths
            )));
        }
        select_path_stream(&mut rng, path);
        let mut sink = RecordSink {
            states: Vec::with_capacity(n_steps + 1),
            logl: Vec::with_capacity(n_steps + 1),
        };
        let out = run_path(
            &fm, &lam, stopped, n_steps, h, &quarters, &mut rng, &mut buf, &mut sink,
        );
        records.push(PathRecord {
            states: sink.states,
            logl: sink.logl,
            tau_index: out.tau_index,
        });
    }
    Ok(records)
}

/// Terminal states and log-densities of all surviving paths, in path order.
pub struct TerminalSample {
    pub states: Vec<Vec<f64>>,
    pub logl: Vec<f64>,
    pub n_excluded: u64,
}

/// Collects `(X_T, log L_T)` for every path that does not overflow.
pub fn simulate_terminals(
    model: &SdeModel,
    cfg: &SimConfig,
    lambda: &DVector<f64>,
    stopped: bool,
) -> Result<TerminalSample> {
    check_inputs(model, cfg, lambda)?;
    let fm = FlatModel::new(model);
    let (n_steps, h) = cfg.grid();
    let quarters = quarter_indices(n_steps);
    let lam: Vec<f64> = lambda.iter().copied().collect();
    let n_batches = cfg.n_paths.div_ceil(BATCH_SIZE);

    let p = fm.p;
    let batches: Vec<(Vec<Vec<f64>>, Vec<f64>, u64)> = with_pool(None, || {
        (0..n_batches)
            .into_par_iter()
            .map(|batch| {
                let lo = batch * BATCH_SIZE;
                let hi = ((batch + 1) * BATCH_SIZE).min(cfg.n_paths);
                let mut states = Vec::with_capacity((hi - lo) as usize);
                let mut logl = Vec::with_capacity((hi - lo) as usize);
                let mut excluded = 0u64;
                let mut buf = Buffers::new(p);
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
                for path in lo..hi {
                    select_path_stream(&mut rng, path);
                    let out = run_path(
                        &fm, &lam, stopped, n_steps, h, &quarters, &mut rng, &mut buf,
                        &mut NoSink,
                    );
                    if out.excluded {
                        excluded += 1;
                    } else {
                        states.push(out.states[3].clone());
                        logl.push(out.logl[3]);
                    }
                }
                (states, logl, excluded)
            })
            .collect()
    })?;

    let mut states = Vec::with_capacity(cfg.n_paths as usize);
    let mut logl = Vec::with_capacity(cfg.n_paths as usize);
    let mut n_excluded = 0;
    for (s, l, e) in batches {
        states.extend(s);
        logl.extend(l);
        n_excluded += e;
    }
    let total = cfg.n_paths;
    if n_excluded as f64 > MAX_EXCLUDED_FRACTION * total as f64 {
        return Err(Error::SafetyCap(format!(
            "{n_excluded} of {total} paths exploded beyond |X| = {OVERFLOW_LIMIT:.0e}"
        )));
    }
    Ok(TerminalSample {
        states,
        logl,
        n_excluded,
    })
}

/// One unit-mean check of the density at a fixed time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleCheck {
    pub t: f64,
    pub mean_l: f64,
    pub se_l: f64,
    pub z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub checks: Vec<MartingaleCheck>,
    pub pass: bool,
}

/// Tests `E[L_t] = 1` at `T/4`, `T/2`, `T`; each z-score must stay below 4.
/// With a zero tilt the density is identically one, giving `z = 0` exactly.
pub fn martingale_check(
    model: &SdeModel,
    cfg: &SimConfig,
    lambda: &DVector<f64>,
    stopped: bool,
) -> Result<MartingaleReport> {
    let result = simulate(model, cfg, lambda, stopped)?;
    let mut checks = Vec::new();
    for q in [0usize, 1, 3] {
        let stats = &result.times[q];
        let dev = (stats.mean_l - 1.0).abs();
        let z = if stats.se_l > 0.0 {
            dev / stats.se_l
        } else if dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        checks.push(MartingaleCheck {
            t: stats.t,
            mean_l: stats.mean_l,
            se_l: stats.se_l,
            z,
            pass: z < 4.0,
        });
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(MartingaleReport { checks, pass })
}

/// Agreement check between reweighted expectations under the original
/// model and plain expectations under the tilted model, for one bounded
/// functional of the terminal state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionalCheck {
    pub name: String,
    pub reweighted_mean: f64,
    pub reweighted_se: f64,
    pub tilted_mean: f64,
    pub tilted_se: f64,
    pub z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GirsanovReport {
    pub functionals: Vec<FunctionalCheck>,
    pub pass: bool,
}

fn mean_se_of(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let sum = pairwise_sum(values);
    let mean = sum / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let centered: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&centered) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Compares `E[f(X_T) L_T]` over paths of `model` against `E[f(X_T)]` over
/// paths of the drift-tilted model, for bounded functionals of the factor
/// and the second coordinate. On the shared Euler grid the two expectations
/// agree exactly in law, so the comparison is powered by sampling noise
/// alone; each functional must match within four combined standard errors.
pub fn girsanov_consistency(
    model: &SdeModel,
    cfg: &SimConfig,
    lambda: &DVector<f64>,
) -> Result<GirsanovReport> {
    let primal = simulate_terminals(model, cfg, lambda, false)?;
    let tilted_model = crate::certify::tilt_model(model, lambda)?;
    let mut tilted_cfg = cfg.clone();
    tilted_cfg.master_seed = cfg.master_seed.wrapping_add(1);
    let tilted = simulate_terminals(&tilted_model, &tilted_cfg, &DVector::zeros(model.p), false)?;

    let factor = |m: &SdeModel, x: &[f64]| -> f64 {
        let mut acc = m.alpha[0];
        for j in 0..m.p {
            acc += m.beta[(0, j)] * x[j];
        }
        acc
    };
    let mut functionals: Vec<(String, Box<dyn Fn(&SdeModel, &[f64]) -> f64>)> = vec![
        (
            "tanh(V_T)".into(),
            Box::new(move |m, x| factor(m, x).tanh()),
        ),
        (
            "1[V_T<0]".into(),
            Box::new(move |m, x| if factor(m, x) < 0.0 { 1.0 } else { 0.0 }),
        ),
    ];
    if model.p >= 2 {
        functionals.push(("tanh(Y_T)".into(), Box::new(|_, x| x[1].tanh())));
    }

    let mut checks = Vec::new();
    for (name, f) in &functionals {
        let weighted: Vec<f64> = primal
            .states
            .iter()
            .zip(&primal.logl)
            .map(|(x, &ll)| f(model, x) * ll.exp())
            .collect();
        let plain: Vec<f64> = tilted
            .states
            .iter()
            .map(|x| f(&tilted_model, x))
            .collect();
        let (lhs, se_lhs) = mean_se_of(&weighted);
        let (rhs, se_rhs) = mean_se_of(&plain);
        let combined = (se_lhs * se_lhs + se_rhs * se_rhs).sqrt();
        let dev = (lhs - rhs).abs();
        let z = if combined > 0.0 {
            dev / combined
        } else if dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        checks.push(FunctionalCheck {
            name: name.clone(),
            reweighted_mean: lhs,
            reweighted_se: se_lhs,
            tilted_mean: rhs,
            tilted_se: se_rhs,
            z,
            pass: z < 4.0,
        });
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(GirsanovReport {
        functionals: checks,
        pass,
    })
}

/// Outcome of the negativity experiment driven by a certificate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NegativityReport {
    /// Which event is counted: factor negative at `t0` (diagonal route) or
    /// first crossing before `t0` (column route).
    pub event: String,
    pub t0: f64,
    pub n_paths: u64,
    pub event_count: u64,
    pub fraction: f64,
    /// 99% one-sided lower confidence bound on the event probability.
    pub lower_confidence_99: f64,
    pub pass: bool,
    pub tilted_mean_factor: f64,
    pub tilted_se: f64,
    /// Closed-form mean of the factor at `t0` under the tilted dynamics.
    pub ode_prediction: f64,
    /// Mean of the tilted Euler chain itself on the run's grid; the
    /// z-score tests the sample against this value, which shares the
    /// scheme's discretization and so leaves pure sampling noise.
    pub discrete_prediction: f64,
    pub tilted_z: f64,
    pub tilted_agrees: bool,
}

/// Mean of the Euler chain at the horizon: the recursion
/// `m_{k+1} = m_k + h (a m_k + b)` is exact for the chain's expectation
/// because the diffusion term has conditional mean zero.
pub fn discrete_chain_mean(model: &SdeModel, cfg: &SimConfig) -> DVector<f64> {
    let (n_steps, h) = cfg.grid();
    let mut mean = model.x0.clone();
    for _ in 0..n_steps {
        mean = &mean + (&model.a * &mean + &model.b) * h;
    }
    mean
}

/// One-sided 99% lower confidence bound for a binomial proportion
/// (Clopper-Pearson; zero when no events were observed).
pub fn binomial_lcb_99(count: u64, n: u64) -> f64 {
    if count == 0 {
        return 0.0;
    }
    if count >= n {
        // The upper-boundary case has its own closed form.
        return 0.01f64.powf(1.0 / n as f64);
    }
    Beta::new(count as f64, (n - count + 1) as f64)
        .expect("valid shape parameters")
        .inverse_cdf(0.01)
}

/// Simulates the original model under its own measure at the certificate's
/// target time and counts the negativity event the certificate predicts;
/// passes when the 99% lower confidence bound on the event probability is
/// strictly positive. Also simulates the tilted model and compares its
/// sample factor mean with the closed-form prediction.
pub fn negativity_experiment(
    model: &SdeModel,
    cert: &Certificate,
    cfg: &SimConfig,
) -> Result<NegativityReport> {
    let mut run_cfg = cfg.clone();
    run_cfg.horizon = cert.t0;
    run_cfg.dt = run_cfg.dt.min(cert.t0);
    let zero = DVector::zeros(model.p);
    let base = simulate(model, &run_cfg, &zero, false)?;
    let horizon_stats = base.at_horizon();
    let (event, count): (String, u64) = match &cert.route {
        CertificateRoute::IndependentFactors { .. } => (
            "factor negative at t0".into(),
            horizon_stats.v_negative_count,
        ),
        CertificateRoute::ProportionalFactors { .. } => {
            ("first crossing before t0".into(), horizon_stats.tau_count)
        }
    };
    let n = base.n_paths;
    let fraction = count as f64 / n as f64;
    let lcb = binomial_lcb_99(count, n);

    let tilted_model = to_tilted_model(model, cert)?;
    let mut tilted_cfg = run_cfg.clone();
    tilted_cfg.master_seed = run_cfg.master_seed.wrapping_add(1);
    let tilted = simulate(&tilted_model, &tilted_cfg, &zero, false)?;
    let t_stats = tilted.at_horizon();
    let chain_mean = discrete_chain_mean(&tilted_model, &tilted_cfg);
    let discrete_prediction = tilted_model.volatility(&chain_mean)[0];
    let dev = (t_stats.mean_factor - discrete_prediction).abs();
    let tilted_z = if t_stats.se_factor > 0.0 {
        dev / t_stats.se_factor
    } else if dev == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };

    Ok(NegativityReport {
        event,
        t0: cert.t0,
        n_paths: n,
        event_count: count,
        fraction,
        lower_confidence_99: lcb,
        pass: count > 0 && lcb > 0.0,
        tilted_mean_factor: t_stats.mean_factor,
        tilted_se: t_stats.se_factor,
        ode_prediction: cert.expected_value,
        discrete_prediction,
        tilted_z,
        tilted_agrees: tilted_z < 4.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::certify_c22;
    use nalgebra::DMatrix;

    fn canonical_2x2(a: [[f64; 2]; 2], b: [f64; 2], beta_rows: [[f64; 2]; 2], x0: [f64; 2]) -> SdeModel {
        SdeModel::new(
            2,
            DMatrix::from_row_slice(2, 2, &[a[0][0], a[0][1], a[1][0], a[1][1]]),
            DVector::from_column_slice(&b),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(
                2,
                2,
                &[
                    beta_rows[0][0],
                    beta_rows[0][1],
                    beta_rows[1][0],
                    beta_rows[1][1],
                ],
            ),
            DVector::from_column_slice(&x0),
        )
        .unwrap()
    }

    fn feller_ok_model() -> SdeModel {
        canonical_2x2(
            [[-1.0, 0.1], [0.1, -1.0]],
            [2.0, 2.0],
            [[1.0, 0.0], [0.0, 1.0]],
            [2.0, 2.0],
        )
    }

    #[test]
    fn grid_rounds_to_quarter_multiples() {
        let cfg = SimConfig::new(1.0, 0.3, 16, 1);
        assert_eq!(cfg.grid(), (4, 0.25));
        let cfg = SimConfig::new(1.0, 0.2, 16, 1);
        assert_eq!(cfg.grid(), (8, 0.125));
        let cfg = SimConfig::new(2.0, 1.0e-2, 16, 1);
        let (n, h) = cfg.grid();
        assert_eq!(n % 4, 0);
        assert!(h <= 1.0e-2 + 1e-15);
        assert!((n as f64 * h - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_tilt_density_is_exactly_one() {
        let m = feller_ok_model();
        let cfg = SimConfig::new(0.5, 1.0 / 64.0, 512, 9);
        let res = simulate(&m, &cfg, &DVector::zeros(2), false).unwrap();
        for stats in &res.times {
            assert_eq!(stats.mean_l, 1.0);
            assert_eq!(stats.se_l, 0.0);
        }
        let recs = simulate_paths(&m, &cfg, &DVector::zeros(2), false, &[0, 5, 511]).unwrap();
        for r in recs {
            assert!(r.logl.iter().all(|&l| l == 0.0));
            assert_eq!(r.logl.len(), r.states.len());
            assert_eq!(r.logl[0], 0.0);
        }
    }

    #[test]
    fn martingale_zero_tilt_z_is_zero() {
        let m = feller_ok_model();
        let cfg = SimConfig::new(0.5, 1.0 / 32.0, 256, 2);
        let rep = martingale_check(&m, &cfg, &DVector::zeros(2), false).unwrap();
        assert!(rep.pass);
        for c in rep.checks {
            assert_eq!(c.z, 0.0);
        }
    }

    #[test]
    fn constant_volatility_density_is_lognormal() {
        // a = 0, b = 0, alpha = (1, 1), beta = 0: v = 1 and X = W, so
        // log L_T ~ N(-lambda^2 T / 2, lambda^2 T) and E[L_T] = 1.
        let m = SdeModel::new(
            2,
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DVector::from_column_slice(&[1.0, 1.0]),
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
        )
        .unwrap();
        let lambda = DVector::from_column_slice(&[0.8, 0.0]);
        let cfg = SimConfig::new(1.0, 1.0 / 16.0, 20_000, 3);
        let rep = martingale_check(&m, &cfg, &lambda, false).unwrap();
        assert!(rep.pass, "{rep:?}");
        // Mean of log L_T should sit near -lambda^2 T / 2 = -0.32.
        let sample = simulate_terminals(&m, &cfg, &lambda, false).unwrap();
        let (mean_ll, se_ll) = mean_se_of(&sample.logl);
        assert!((mean_ll - (-0.32)).abs() < 4.0 * se_ll, "{mean_ll} +- {se_ll}");
    }

    #[test]
    fn discrete_mean_recursion_matches_sample_mean() {
        // The Euler chain's mean obeys m_{k+1} = m_k + h (a m_k + b)
        // exactly, so the sample mean is an unbiased estimate of that
        // recursion: a pure-noise test with no discretization bias.
        let m = feller_ok_model();
        let cfg = SimConfig::new(1.0, 1.0 / 32.0, 20_000, 4);
        let res = simulate(&m, &cfg, &DVector::zeros(2), false).unwrap();
        let (n_steps, h) = cfg.grid();
        let mut mean = m.x0.clone();
        let mut at_quarters = Vec::new();
        for k in 0..n_steps {
            mean = &mean + (&m.a * &mean + &m.b) * h;
            if (k + 1) % (n_steps / 4) == 0 {
                at_quarters.push(mean.clone());
            }
        }
        for (q, stats) in res.times.iter().enumerate() {
            for j in 0..2 {
                let dev = (stats.mean_state[j] - at_quarters[q][j]).abs();
                assert!(
                    dev < 4.0 * stats.se_state[j],
                    "quarter {q} coord {j}: {dev} vs se {}",
                    stats.se_state[j]
                );
            }
        }
    }

    #[test]
    fn stopped_density_freezes_at_first_crossing() {
        // Violation-profile model: the factor crosses zero with visible
        // probability, so some recorded paths have a crossing index.
        let m = canonical_2x2(
            [[-2.0, 0.5], [-1.0, -1.5]],
            [0.0, 1.0],
            [[1.0, 0.0], [1.0, 0.0]],
            [0.5, 0.2],
        );
        let lambda = DVector::from_column_slice(&[0.4, 0.3]);
        let cfg = SimConfig::new(1.0, 1.0 / 64.0, 256, 7);
        let recs = simulate_paths(&m, &cfg, &lambda, true, &(0..256).collect::<Vec<_>>()).unwrap();
        let mut crossed = 0;
        for r in &recs {
            if let Some(k) = r.tau_index {
                crossed += 1;
                // Factor is v_1(x) = x_1 here.
                assert!(r.states[k][0] < 0.0);
                for earlier in 1..k {
                    assert!(r.states[earlier][0] >= 0.0);
                }
                for later in k..r.logl.len() {
                    assert_eq!(r.logl[later], r.logl[k], "density moved after freezing");
                }
            }
        }
        assert!(crossed > 10, "only {crossed} of 256 paths crossed");
        // The same run without stopping keeps accumulating afterwards on
        // at least some crossed paths.
        let recs_open =
            simulate_paths(&m, &cfg, &lambda, false, &(0..256).collect::<Vec<_>>()).unwrap();
        let mut moved = 0;
        for r in &recs_open {
            if let Some(k) = r.tau_index {
                if r.logl[r.logl.len() - 1] != r.logl[k] {
                    moved += 1;
                }
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn replay_is_independent_of_request_order_and_matches_aggregate() {
        let m = feller_ok_model();
        let cfg = SimConfig::new(0.5, 1.0 / 32.0, 64, 21);
        let lambda = DVector::from_column_slice(&[0.3, 0.1]);
        // Noise for path k depends only on (master_seed, k): replaying one
        // path alone matches replaying it after others.
        let alone = simulate_paths(&m, &cfg, &lambda, false, &[37]).unwrap();
        let grouped = simulate_paths(&m, &cfg, &lambda, false, &[0, 55, 37, 2]).unwrap();
        assert_eq!(alone[0].states, grouped[2].states);
        assert_eq!(alone[0].logl, grouped[2].logl);
        // Replayed terminals equal the aggregate run's terminals.
        let terms = simulate_terminals(&m, &cfg, &lambda, false).unwrap();
        assert_eq!(terms.states[37], *alone[0].states.last().unwrap());
        assert_eq!(terms.logl[37], *alone[0].logl.last().unwrap());
    }

    #[test]
    fn results_identical_across_worker_counts() {
        let m = feller_ok_model();
        let cfg = SimConfig::new(1.0, 1.0 / 32.0, 2500, 11);
        let lambda = DVector::from_column_slice(&[0.3, 0.2]);
        let one = simulate_with_workers(&m, &cfg, &lambda, false, Some(1)).unwrap();
        let four = simulate_with_workers(&m, &cfg, &lambda, false, Some(4)).unwrap();
        let a = serde_json::to_string(&one).unwrap();
        let b = serde_json::to_string(&four).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exploding_paths_fail_loudly() {
        let m = canonical_2x2(
            [[40.0, 0.0], [0.0, 40.0]],
            [0.0, 0.0],
            [[1.0, 0.0], [0.0, 1.0]],
            [1.0, 1.0],
        );
        let cfg = SimConfig::new(1.0, 1.0 / 64.0, 64, 5);
        match simulate(&m, &cfg, &DVector::zeros(2), false) {
            Err(Error::SafetyCap(_)) => {}
            other => panic!("expected safety-cap failure, got {other:?}"),
        }
    }

    #[test]
    fn girsanov_zero_tilt_agrees() {
        let m = feller_ok_model();
        let cfg = SimConfig::new(0.5, 1.0 / 16.0, 4000, 13);
        let rep = girsanov_consistency(&m, &cfg, &DVector::zeros(2)).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn girsanov_reweighting_matches_tilted_model() {
        let m = feller_ok_model();
        let cfg = SimConfig::new(0.5, 1.0 / 16.0, 8000, 17);
        let lambda = DVector::from_column_slice(&[0.5, 0.0]);
        let rep = girsanov_consistency(&m, &cfg, &lambda).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn negativity_experiment_reports_certificate_route() {
        let m = canonical_2x2(
            [[-1.0, -1.0], [1.0, -1.0]],
            [0.0, 1.0],
            [[1.0, 0.0], [0.0, 1.0]],
            [1.0, 0.0],
        );
        let cert = certify_c22(&m, 1.0).unwrap();
        let cfg = SimConfig::new(1.0, 1.0 / 256.0, 4000, 19);
        let rep = negativity_experiment(&m, &cert, &cfg).unwrap();
        assert_eq!(rep.event, "factor negative at t0");
        assert!(rep.tilted_agrees, "{rep:?}");
        assert!(rep.tilted_mean_factor < 0.0);
        // The fraction and its bound are consistent with the counts.
        assert_eq!(rep.pass, rep.event_count > 0 && rep.lower_confidence_99 > 0.0);
    }

    #[test]
    fn binomial_bound_edges() {
        assert_eq!(binomial_lcb_99(0, 100), 0.0);
        let lcb = binomial_lcb_99(1, 100);
        assert!(lcb > 0.0 && lcb < 0.01);
        let all = binomial_lcb_99(50, 50);
        assert!(all > 0.9);
    }
}
