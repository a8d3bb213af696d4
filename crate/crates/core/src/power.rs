//! Monte Carlo power over design grids.
//!
//! Replicate `r` of grid cell `(i, j)` simulates from the substream
//! `(base_seed, i, j, r)`, fits the generating model and Wald-tests the
//! relatedness effect. Counts are aggregated per cell, so results are
//! identical for any worker count or scheduling order.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmm::{
    fit_crossed, wald_from_t, CrossedStats, FitOptions, ModelSpec, DEFAULT_THRESHOLD,
};
use crate::rng::StreamKey;
use crate::simulate::simulate_crossed;
use crate::types::{ensure_valid, Criterion, Factor, PowerCell, Scenario, INTERCEPT, RELATEDNESS};

/// Stream tag separating residual sweeps from participant × item grids.
const TAG_SWEEP: u64 = 0x5357_4545_50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureMode {
    /// Failed fits leave the denominator.
    #[default]
    Exclude,
    /// Failed fits count as non-significant.
    Nonsig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeSdOverride {
    pub participant_slope_sd: f64,
}

pub fn default_participants() -> Vec<usize> {
    (1..=8).map(|k| 12 * k).collect()
}

pub fn default_items() -> Vec<usize> {
    vec![20, 40, 90]
}

pub const DEFAULT_NSIM: usize = 500;

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_criterion() -> Criterion {
    Criterion::Reml
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerGridRequest {
    pub base: Scenario,
    pub participants: Vec<usize>,
    pub items: Vec<usize>,
    pub n_sim: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub base_seed: u64,
    #[serde(default)]
    pub slope_sd_override: Option<SlopeSdOverride>,
    #[serde(default)]
    pub residual_sds: Option<Vec<f64>>,
    #[serde(default = "default_criterion")]
    pub criterion: Criterion,
    #[serde(default)]
    pub failures: FailureMode,
    #[serde(default)]
    pub fit_options: FitOptions,
}

impl PowerGridRequest {
    /// Default grid (12–96 participants by 12; 20, 40, 90 items) and options.
    pub fn new(base: Scenario, base_seed: u64) -> Self {
        PowerGridRequest {
            base,
            participants: default_participants(),
            items: default_items(),
            n_sim: DEFAULT_NSIM,
            threshold: DEFAULT_THRESHOLD,
            base_seed,
            slope_sd_override: None,
            residual_sds: None,
            criterion: Criterion::Reml,
            failures: FailureMode::Exclude,
            fit_options: FitOptions::default(),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_sim < 1 {
            v.push("n_sim must be >= 1".to_string());
        }
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            v.push(format!("threshold = {} must be > 0", self.threshold));
        }
        for (name, list) in [("participants", &self.participants), ("items", &self.items)] {
            if list.is_empty() {
                v.push(format!("{name} must not be empty"));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                v.push(format!("{name} must be strictly increasing"));
            }
        }
        if let Some(sds) = &self.residual_sds {
            if sds.is_empty() {
                v.push("residual_sds must not be empty".to_string());
            }
            if sds.windows(2).any(|w| !(w[0] < w[1])) {
                v.push("residual_sds must be strictly increasing".to_string());
            }
        }
        if let Some(o) = &self.slope_sd_override {
            if !(o.participant_slope_sd >= 0.0 && o.participant_slope_sd.is_finite()) {
                v.push("participant_slope_sd override must be finite and >= 0".to_string());
            }
        }
        v
    }

    /// The base scenario with the slope-sd override applied.
    pub fn effective_base(&self) -> Result<Scenario> {
        match self.slope_sd_override {
            Some(o) => {
                self.base
                    .with_random_sd(Factor::Participant, RELATEDNESS, o.participant_slope_sd)
            }
            None => Ok(self.base.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerReport {
    pub cells: Vec<PowerCell>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub residual_sd: f64,
    #[serde(flatten)]
    pub cell: PowerCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub warnings: Vec<String>,
}

/// Model fitted inside the engine: the scenario's own generative structure.
pub fn generating_spec(s: &Scenario, criterion: Criterion) -> ModelSpec {
    ModelSpec {
        fixed_terms: vec![INTERCEPT.to_string(), RELATEDNESS.to_string()],
        random_terms: [
            (Factor::Participant, s.by_participant.term_names.clone()),
            (Factor::Item, s.by_item.term_names.clone()),
        ]
        .into(),
        criterion,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Failed,
    Significant,
    NotSignificant,
}

fn run_replicate(
    s: &Scenario,
    spec: &ModelSpec,
    req: &PowerGridRequest,
    key: StreamKey,
) -> Outcome {
    let codes = [s.contrasts.related_code, s.contrasts.unrelated_code];
    let fit = simulate_crossed(s, key.seed())
        .and_then(|data| CrossedStats::from_crossed(&data, codes, spec))
        .and_then(|stats| fit_crossed(&stats, spec, &req.fit_options));
    match fit {
        Ok(f) if f.status.is_usable() => {
            let t = f.t_values[RELATEDNESS];
            if t.is_finite() && wald_from_t(t, req.threshold).significant {
                Outcome::Significant
            } else {
                Outcome::NotSignificant
            }
        }
        _ => Outcome::Failed,
    }
}

struct CellJob {
    scenario: Scenario,
    key: StreamKey,
}

/// Runs every replicate of every job on `workers` threads (0 = all cores).
fn run_jobs(
    jobs: &[CellJob],
    req: &PowerGridRequest,
    workers: usize,
    progress: Option<&(dyn Fn(usize, usize) + Sync)>,
) -> Result<Vec<(usize, usize)>> {
    let spec = generating_spec(&jobs[0].scenario, req.criterion);
    let n_sim = req.n_sim;
    let total = jobs.len() * n_sim;
    let done = AtomicUsize::new(0);
    let work = || -> Vec<Outcome> {
        (0..total)
            .into_par_iter()
            .map(|k| {
                let job = &jobs[k / n_sim];
                let out =
                    run_replicate(&job.scenario, &spec, req, job.key.child((k % n_sim) as u64));
                if let Some(cb) = progress {
                    let d = done.fetch_add(1, Ordering::Relaxed) + 1;
                    cb(d, total);
                }
                out
            })
            .collect()
    };
    let outcomes = if workers == 0 {
        work()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Numerical(format!("cannot start worker pool: {e}")))?
            .install(work)
    };
    Ok(outcomes
        .chunks(n_sim)
        .map(|chunk| {
            let converged = chunk.iter().filter(|o| **o != Outcome::Failed).count();
            let sig = chunk.iter().filter(|o| **o == Outcome::Significant).count();
            (converged, sig)
        })
        .collect())
}

fn convergence_warning(cell: &PowerCell, label: &str) -> Option<String> {
    ((cell.n_converged as f64) < 0.9 * cell.n_sim as f64).then(|| {
        format!(
            "{label}: only {} of {} fits converged",
            cell.n_converged, cell.n_sim
        )
    })
}

/// Power for every (participants, items) combination of the request.
pub fn power_curve(
    req: &PowerGridRequest,
    workers: usize,
    progress: Option<&(dyn Fn(usize, usize) + Sync)>,
) -> Result<PowerReport> {
    let v = req.violations();
    if !v.is_empty() {
        return Err(Error::Validation(v));
    }
    let base = req.effective_base()?;
    ensure_valid(&base)?;
    let root = StreamKey::root(req.base_seed);
    let mut jobs = Vec::new();
    for (i, &np) in req.participants.iter().enumerate() {
        for (j, &ni) in req.items.iter().enumerate() {
            let scenario = base.with_sizes(np, ni);
            ensure_valid(&scenario)?;
            jobs.push(CellJob {
                scenario,
                key: root.path(&[i as u64, j as u64]),
            });
        }
    }
    let counts = run_jobs(&jobs, req, workers, progress)?;
    let nonsig = req.failures == FailureMode::Nonsig;
    let mut cells = Vec::with_capacity(jobs.len());
    let mut warnings = Vec::new();
    for (job, (conv, sig)) in jobs.iter().zip(counts) {
        let cell = PowerCell::from_counts(
            job.scenario.n_participants,
            job.scenario.n_items,
            req.n_sim,
            conv,
            sig,
            nonsig,
        );
        warnings.extend(convergence_warning(
            &cell,
            &format!(
                "{} participants x {} items",
                cell.n_participants, cell.n_items
            ),
        ));
        cells.push(cell);
    }
    Ok(PowerReport { cells, warnings })
}

/// Power as a function of residual sd at a single design point.
///
/// The design point is the only entry of `participants` and `items`.
pub fn residual_sweep(
    req: &PowerGridRequest,
    workers: usize,
    progress: Option<&(dyn Fn(usize, usize) + Sync)>,
) -> Result<SweepReport> {
    let mut v = req.violations();
    let sds = match &req.residual_sds {
        Some(s) => s.clone(),
        None => {
            v.push("residual_sds is required for a sweep".to_string());
            Vec::new()
        }
    };
    if req.participants.len() != 1 || req.items.len() != 1 {
        v.push("a residual sweep needs exactly one participants and one items value".to_string());
    }
    if !v.is_empty() {
        return Err(Error::Validation(v));
    }
    let base = req
        .effective_base()?
        .with_sizes(req.participants[0], req.items[0]);
    let root = StreamKey::root(req.base_seed).child(TAG_SWEEP);
    let mut jobs = Vec::new();
    for (k, &sd) in sds.iter().enumerate() {
        let scenario = crate::types::Scenario {
            residual_sd: sd,
            ..base.clone()
        };
        ensure_valid(&scenario)?;
        jobs.push(CellJob {
            scenario,
            key: root.child(k as u64),
        });
    }
    let counts = run_jobs(&jobs, req, workers, progress)?;
    let nonsig = req.failures == FailureMode::Nonsig;
    let mut cells = Vec::with_capacity(jobs.len());
    let mut warnings = Vec::new();
    for ((job, (conv, sig)), sd) in jobs.iter().zip(counts).zip(sds) {
        let cell = PowerCell::from_counts(
            job.scenario.n_participants,
            job.scenario.n_items,
            req.n_sim,
            conv,
            sig,
            nonsig,
        );
        warnings.extend(convergence_warning(&cell, &format!("residual sd {sd}")));
        cells.push(SweepCell {
            residual_sd: sd,
            cell,
        });
    }
    Ok(SweepReport { cells, warnings })
}
