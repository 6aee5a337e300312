//! Monte Carlo experiments: strong errors, order fits, timing and moments.
//!
//! Every sample draws one [`NoiseBatch`] on the reference grid and coarsens it
//! to each ladder level, so schemes and reference see the same path. Samples
//! run on a worker pool; results are collected by sample index and reduced
//! sequentially, which keeps every reported number independent of the worker count.

use std::time::{Duration, Instant};

use log::{debug, warn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mat::norm2;
use crate::model::SdeProblem;
use crate::noise::{GridSpec, NoiseBatch, NoiseLevel, DEFAULT_LEVY_TERMS};
use crate::schemes::{integrate_final, integrate_path, SchemeSpec};

/// Rows with an RMS error below this are left out of the fit.
pub const FIT_FLOOR: f64 = 1e-11;

/// Largest tolerated fraction of reference paths lost to blowup.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.01;

const PILOT_PATHS: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorNorm {
    /// Euclidean error at the final time.
    Final,
    /// Largest Euclidean error over the coarse grid points.
    SupOverGrid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference {
    /// The problem's exact-solution hook evaluated on a grid of `steps`.
    Exact { steps: usize },
    /// A scheme run on a grid of `steps`.
    Scheme { spec: SchemeSpec, steps: usize },
}

impl Reference {
    pub fn steps(&self) -> usize {
        match *self {
            Reference::Exact { steps } | Reference::Scheme { steps, .. } => steps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub schemes: Vec<SchemeSpec>,
    pub t_final: f64,
    /// Step counts of the Δt ladder.
    pub ladder: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
    pub reference: Reference,
    pub levy_terms: usize,
    /// Skip Lévy areas on problems flagged as having commutative noise.
    pub commutative_bypass: bool,
    /// Worker threads; `None` uses every available core.
    pub workers: Option<usize>,
    pub error_norm: ErrorNorm,
    /// Compare the reference against itself at half the step on a pilot.
    pub reference_self_test: bool,
}

impl ExperimentConfig {
    pub fn new(schemes: Vec<SchemeSpec>, ladder: Vec<usize>, reference: Reference) -> Self {
        ExperimentConfig {
            schemes,
            t_final: 1.0,
            ladder,
            samples: 1000,
            seed: 42,
            reference,
            levy_terms: DEFAULT_LEVY_TERMS,
            commutative_bypass: true,
            workers: None,
            error_norm: ErrorNorm::Final,
            reference_self_test: true,
        }
    }

    fn validate(&self, problem: &SdeProblem) -> Result<GridSpec> {
        if self.samples < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 samples, got {}",
                self.samples
            )));
        }
        if self.schemes.is_empty() {
            return Err(Error::InvalidInput("no schemes given".into()));
        }
        if self.ladder.is_empty() {
            return Err(Error::InvalidInput("empty Δt ladder".into()));
        }
        let r = self.reference.steps();
        if let Some(&n) = self.ladder.iter().find(|&&n| n >= r) {
            return Err(Error::InvalidInput(format!(
                "reference grid ({r} steps) must be finer than every ladder level, got {n}"
            )));
        }
        if matches!(self.reference, Reference::Exact { .. }) && problem.exact().is_none() {
            return Err(Error::InvalidInput(format!(
                "problem `{}` has no exact solution; use a reference scheme",
                problem.name()
            )));
        }
        let mut levels = self.ladder.clone();
        levels.push(r);
        GridSpec::new(self.t_final, &levels)
    }

    fn levy_terms_for(&self, problem: &SdeProblem) -> Option<usize> {
        let needs = self.schemes.iter().any(SchemeSpec::needs_iterated)
            || matches!(self.reference, Reference::Scheme { spec, .. } if spec.needs_iterated());
        let bypass = self.commutative_bypass && problem.commutative_noise();
        (needs && !bypass && problem.noise_dim() > 1).then_some(self.levy_terms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares on `(log2 Δt, log2 err)`.
pub fn fit_order(rows: &[(f64, f64)]) -> Result<Fit> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|(dt, e)| *dt > 0.0 && e.is_finite() && *e >= FIT_FLOOR)
        .map(|(dt, e)| (dt.log2(), e.log2()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::TooFewRows(pts.len()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("fit needs at least two distinct step sizes".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(Fit {
        slope,
        intercept,
        r2,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub dt: f64,
    pub steps: usize,
    pub rms_error: f64,
    /// Jackknife standard error of `rms_error`.
    pub stderr: f64,
    /// Integration time summed over samples; zero unless timed.
    pub wall_seconds: f64,
    /// Paths on which the scheme itself tripped the overflow guard.
    pub blowups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTable {
    pub scheme: String,
    pub spec: SchemeSpec,
    /// Sorted by Δt, largest first.
    pub rows: Vec<ErrorRow>,
    /// `None` when fewer than two rows sit above [`FIT_FLOOR`].
    pub fit: Option<Fit>,
}

impl ErrorTable {
    fn new(spec: SchemeSpec, mut rows: Vec<ErrorRow>) -> Self {
        rows.sort_by(|a, b| b.dt.total_cmp(&a.dt));
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.dt, r.rms_error)).collect();
        ErrorTable {
            scheme: spec.label(),
            spec,
            rows,
            fit: fit_order(&pts).ok(),
        }
    }

    pub fn at_floor(&self) -> bool {
        self.fit.is_none()
    }

    pub fn median_rms(&self) -> f64 {
        let mut v: Vec<f64> = self.rows.iter().map(|r| r.rms_error).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Timing {
    pub noise_seconds: f64,
    pub reference_seconds: f64,
    pub integration_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfTest {
    /// RMS gap between the reference at Δt_ref and Δt_ref/2.
    pub gap: f64,
    /// Smallest ladder error divided by ten.
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct StrongErrorReport {
    pub tables: Vec<ErrorTable>,
    pub samples: usize,
    pub excluded: usize,
    pub timing: Timing,
    pub self_test: Option<SelfTest>,
}

/// Per-sample outcome: squared errors per (scheme, level), or `None` when the
/// reference blew up.
struct SampleOutcome {
    sq: Option<Vec<f64>>,
    blown: Vec<bool>,
    integration: Vec<Duration>,
    noise: Duration,
    reference: Duration,
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::InvalidInput("worker count must be >= 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Reference states at each coarse grid point of `steps` (only the last one
/// for [`ErrorNorm::Final`]).
fn reference_states(
    problem: &SdeProblem,
    config: &ExperimentConfig,
    batch: &NoiseBatch,
) -> Result<Option<Vec<f64>>> {
    let r = config.reference.steps();
    let level = batch.level(r).expect("reference level");
    let d = problem.state_dim();
    match config.reference {
        Reference::Exact { .. } => {
            let traj = (problem.exact().expect("checked"))(level, problem.u0());
            Ok(match config.error_norm {
                ErrorNorm::Final => Some(traj.last().to_vec()),
                ErrorNorm::SupOverGrid => Some(traj.states),
            })
        }
        Reference::Scheme { spec, .. } => match config.error_norm {
            ErrorNorm::Final => integrate_final(problem, &spec, level),
            ErrorNorm::SupOverGrid => {
                let path = integrate_path(problem, &spec, level)?;
                if path.blew_up() {
                    Ok(None)
                } else {
                    debug_assert_eq!(path.trajectory.states.len(), (r + 1) * d);
                    Ok(Some(path.trajectory.states))
                }
            }
        },
    }
}

fn run_sample(
    problem: &SdeProblem,
    config: &ExperimentConfig,
    grid: &GridSpec,
    levy: Option<usize>,
    sample: u64,
    timed: bool,
) -> Result<SampleOutcome> {
    let n_cells = config.schemes.len() * config.ladder.len();
    let t0 = Instant::now();
    let batch = NoiseBatch::generate(config.seed, sample, problem.noise_dim(), grid, levy)?;
    let noise = t0.elapsed();
    let t1 = Instant::now();
    let reference = reference_states(problem, config, &batch)?;
    let ref_time = t1.elapsed();
    let mut out = SampleOutcome {
        sq: None,
        blown: vec![false; n_cells],
        integration: vec![Duration::ZERO; n_cells],
        noise,
        reference: ref_time,
    };
    let Some(reference) = reference else {
        return Ok(out);
    };
    let d = problem.state_dim();
    let r = config.reference.steps();
    let mut sq = vec![0.0; n_cells];
    for (s, spec) in config.schemes.iter().enumerate() {
        for (k, &steps) in config.ladder.iter().enumerate() {
            let cell = s * config.ladder.len() + k;
            let level = batch.level(steps).expect("ladder level");
            let start = timed.then(Instant::now);
            let err = match config.error_norm {
                ErrorNorm::Final => {
                    let fin = integrate_final(problem, spec, level)?;
                    if let Some(t) = start {
                        out.integration[cell] = t.elapsed();
                    }
                    fin.map(|u| distance(&u, &reference))
                }
                ErrorNorm::SupOverGrid => {
                    let path = integrate_path(problem, spec, level)?;
                    if let Some(t) = start {
                        out.integration[cell] = t.elapsed();
                    }
                    (!path.blew_up()).then(|| {
                        let factor = r / steps;
                        (0..=steps)
                            .map(|n| {
                                let refn = &reference[n * factor * d..(n * factor + 1) * d];
                                distance(path.trajectory.state(n), refn)
                            })
                            .fold(0.0, f64::max)
                    })
                }
            };
            match err {
                Some(e) => sq[cell] = e * e,
                None => {
                    sq[cell] = f64::INFINITY;
                    out.blown[cell] = true;
                }
            }
        }
    }
    out.sq = Some(sq);
    Ok(out)
}

/// `sqrt(mean(x))` with its leave-one-out jackknife standard error.
pub fn rms_with_jackknife(sq: &[f64]) -> (f64, f64) {
    let n = sq.len();
    let total: f64 = sq.iter().sum();
    let rms = (total / n as f64).sqrt();
    if n < 2 || !total.is_finite() {
        return (rms, f64::NAN);
    }
    let loo: Vec<f64> = sq
        .iter()
        .map(|&e| ((total - e) / (n - 1) as f64).max(0.0).sqrt())
        .collect();
    let mean = loo.iter().sum::<f64>() / n as f64;
    let var: f64 = loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    (rms, ((n - 1) as f64 / n as f64 * var).sqrt())
}

fn run(problem: &SdeProblem, config: &ExperimentConfig, timed: bool) -> Result<StrongErrorReport> {
    let grid = config.validate(problem)?;
    let levy = config.levy_terms_for(problem);
    let started = Instant::now();
    let outcomes: Vec<Result<SampleOutcome>> = with_pool(config.workers, || {
        (0..config.samples as u64)
            .into_par_iter()
            .map(|s| run_sample(problem, config, &grid, levy, s, timed))
            .collect()
    })?;
    let outcomes: Vec<SampleOutcome> = outcomes.into_iter().collect::<Result<_>>()?;

    let excluded = outcomes.iter().filter(|o| o.sq.is_none()).count();
    if excluded as f64 > MAX_EXCLUDED_FRACTION * config.samples as f64 {
        return Err(Error::ExclusionLimit {
            excluded,
            total: config.samples,
        });
    }
    if excluded > 0 {
        warn!("{excluded} of {} reference paths blew up and were excluded", config.samples);
    }
    let kept: Vec<&SampleOutcome> = outcomes.iter().filter(|o| o.sq.is_some()).collect();
    let mut timing = Timing::default();
    for o in &outcomes {
        timing.noise_seconds += o.noise.as_secs_f64();
        timing.reference_seconds += o.reference.as_secs_f64();
        timing.integration_seconds += o.integration.iter().map(Duration::as_secs_f64).sum::<f64>();
    }

    let n_levels = config.ladder.len();
    let mut tables = Vec::with_capacity(config.schemes.len());
    for (s, spec) in config.schemes.iter().enumerate() {
        let rows = config
            .ladder
            .iter()
            .enumerate()
            .map(|(k, &steps)| {
                let cell = s * n_levels + k;
                let sq: Vec<f64> = kept.iter().map(|o| o.sq.as_ref().unwrap()[cell]).collect();
                let (rms_error, stderr) = rms_with_jackknife(&sq);
                let wall_seconds = if timed {
                    kept.iter().map(|o| o.integration[cell].as_secs_f64()).sum()
                } else {
                    0.0
                };
                ErrorRow {
                    dt: grid.dt(steps),
                    steps,
                    rms_error,
                    stderr,
                    wall_seconds,
                    blowups: kept.iter().filter(|o| o.blown[cell]).count(),
                }
            })
            .collect();
        let table = ErrorTable::new(*spec, rows);
        if let Some(fit) = table.fit {
            debug!("{}: slope {:.4} (R² {:.4})", table.scheme, fit.slope, fit.r2);
        }
        tables.push(table);
    }

    let self_test = if config.reference_self_test {
        let min_err = tables
            .iter()
            .flat_map(|t| t.rows.iter().map(|r| r.rms_error))
            .filter(|e| e.is_finite() && *e > 0.0)
            .fold(f64::INFINITY, f64::min);
        let st = reference_self_test(problem, config, min_err)?;
        if !st.passed {
            warn!(
                "reference self-test: Δt_ref vs Δt_ref/2 gap {:.3e} exceeds {:.3e}",
                st.gap, st.threshold
            );
        }
        Some(st)
    } else {
        None
    };
    timing.total_seconds = started.elapsed().as_secs_f64();

    Ok(StrongErrorReport {
        tables,
        samples: config.samples,
        excluded,
        timing,
        self_test,
    })
}

/// RMS strong errors for every scheme and ladder level.
pub fn strong_error(problem: &SdeProblem, config: &ExperimentConfig) -> Result<StrongErrorReport> {
    run(problem, config, false)
}

/// As [`strong_error`], with each row's integration time filled in. Noise
/// synthesis and the reference are timed separately in [`Timing`].
pub fn efficiency(problem: &SdeProblem, config: &ExperimentConfig) -> Result<StrongErrorReport> {
    run(problem, config, true)
}

fn reference_self_test(
    problem: &SdeProblem,
    config: &ExperimentConfig,
    min_err: f64,
) -> Result<SelfTest> {
    let r = config.reference.steps();
    let grid = GridSpec::new(config.t_final, &[2 * r, r])?;
    let levy = config.levy_terms_for(problem);
    let fin = |level: &NoiseLevel| -> Result<Option<Vec<f64>>> {
        match config.reference {
            Reference::Exact { .. } => {
                Ok(Some((problem.exact().expect("checked"))(level, problem.u0()).last().to_vec()))
            }
            Reference::Scheme { spec, .. } => integrate_final(problem, &spec, level),
        }
    };
    let gaps: Vec<Result<Option<f64>>> = with_pool(config.workers, || {
        (0..PILOT_PATHS)
            .into_par_iter()
            .map(|s| {
                let batch = NoiseBatch::generate(config.seed, s, problem.noise_dim(), &grid, levy)?;
                let a = fin(batch.level(r).unwrap())?;
                let b = fin(batch.level(2 * r).unwrap())?;
                Ok(a.zip(b).map(|(a, b)| distance(&a, &b).powi(2)))
            })
            .collect()
    })?;
    let sq: Vec<f64> = gaps
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let gap = if sq.is_empty() {
        f64::INFINITY
    } else {
        (sq.iter().sum::<f64>() / sq.len() as f64).sqrt()
    };
    let threshold = min_err / 10.0;
    Ok(SelfTest {
        gap,
        threshold,
        passed: gap < threshold,
    })
}

#[derive(Debug, Clone)]
pub struct MomentTrajectory {
    pub times: Vec<f64>,
    /// Sample mean of the state at each time, over paths that stayed bounded.
    pub mean: Vec<Vec<f64>>,
    pub mean_norm: Vec<f64>,
    pub blowups: usize,
    pub samples: usize,
}

impl MomentTrajectory {
    pub fn blowup_fraction(&self) -> f64 {
        self.blowups as f64 / self.samples as f64
    }

    pub fn max_mean_norm(&self) -> f64 {
        self.mean_norm.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentConfig {
    pub steps: usize,
    pub t_final: f64,
    pub samples: usize,
    pub seed: u64,
    pub levy_terms: usize,
    pub workers: Option<usize>,
}

/// Sample mean `E[u(t)]` on every grid point.
pub fn moment_trajectory(
    problem: &SdeProblem,
    spec: &SchemeSpec,
    config: &MomentConfig,
) -> Result<MomentTrajectory> {
    if config.samples == 0 {
        return Err(Error::InvalidInput("need at least one sample".into()));
    }
    let grid = GridSpec::new(config.t_final, &[config.steps])?;
    let d = problem.state_dim();
    let levy = (spec.needs_iterated() && !problem.commutative_noise() && problem.noise_dim() > 1)
        .then_some(config.levy_terms);
    let paths: Vec<Result<Option<Vec<f64>>>> = with_pool(config.workers, || {
        (0..config.samples as u64)
            .into_par_iter()
            .map(|s| {
                let batch = NoiseBatch::generate(config.seed, s, problem.noise_dim(), &grid, levy)?;
                let path = integrate_path(problem, spec, batch.finest())?;
                Ok((!path.blew_up()).then_some(path.trajectory.states))
            })
            .collect()
    })?;
    let mut sum = vec![0.0; (config.steps + 1) * d];
    let mut kept = 0usize;
    for p in paths {
        if let Some(states) = p? {
            kept += 1;
            for (acc, v) in sum.iter_mut().zip(&states) {
                *acc += v;
            }
        }
    }
    let blowups = config.samples - kept;
    let scale = if kept > 0 { 1.0 / kept as f64 } else { f64::NAN };
    let mean: Vec<Vec<f64>> = sum
        .chunks(d)
        .map(|c| c.iter().map(|v| v * scale).collect())
        .collect();
    let mean_norm = mean.iter().map(|m| norm2(m)).collect();
    let dt = grid.dt(config.steps);
    Ok(MomentTrajectory {
        times: (0..=config.steps).map(|n| n as f64 * dt).collect(),
        mean,
        mean_norm,
        blowups,
        samples: config.samples,
    })
}
