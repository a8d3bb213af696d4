use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::balanced::CrossedStats;
use super::design::{build_design, Design};
use super::optimize::{minimize_bounded, NelderMeadOptions};
use super::pls::{sigma2_from_pwrss, PlsModel, PlsSolution};
use super::theta::{Theta, ThetaLayout};
use super::ModelSpec;
use crate::error::{Error, Result};
use crate::rng::StreamKey;
use crate::stats::quantile_sorted;
use crate::types::{
    ContrastCoding, Criterion, Factor, FitResult, FitStatus, RandomStructure, TrialTable, VarComp,
};

/// Diagonal theta entries below this count as on the boundary.
pub const SINGULAR_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Deviance evaluations allowed per optimizer run.
    pub max_iter: usize,
    pub tol: f64,
    pub n_restarts: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 20_000,
            tol: 1e-6,
            n_restarts: 3,
        }
    }
}

/// Relative sd of the initial random effects (sd / residual sd).
const START_DIAGONAL: f64 = 0.5;

enum Objective<'a> {
    Crossed(&'a CrossedStats),
    General(PlsModel),
}

impl Objective<'_> {
    fn layout(&self) -> &ThetaLayout {
        match self {
            Objective::Crossed(s) => s.layout(),
            Objective::General(m) => m.layout(),
        }
    }

    fn deviance(&self, theta: &[f64], criterion: Criterion) -> f64 {
        match self {
            Objective::Crossed(s) => s.deviance_at(theta, criterion),
            Objective::General(m) => m
                .deviance(
                    &Theta {
                        values: theta.to_vec(),
                    },
                    criterion,
                )
                .unwrap_or(f64::INFINITY),
        }
    }

    fn solve(&self, theta: &Theta) -> Result<PlsSolution> {
        match self {
            Objective::Crossed(s) => s.solve(theta),
            Objective::General(m) => m.solve(theta),
        }
    }

    fn n_obs(&self) -> usize {
        match self {
            Objective::Crossed(s) => s.n_obs(),
            Objective::General(m) => m.n_obs(),
        }
    }
}

/// Deterministic restart point: every coordinate moved by a fifth of its
/// magnitude (at least 0.05), alternating in sign.
fn perturb(x: &[f64], run: usize, lower: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(j, &v)| {
            let sign = if (j + run) % 2 == 0 { 1.0 } else { -1.0 };
            (v + sign * 0.2 * v.abs().max(0.25)).max(lower[j])
        })
        .collect()
}

fn optimize(obj: &Objective, spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    let layout = obj.layout().clone();
    let lower = layout.lower_bounds();
    let nm = NelderMeadOptions {
        max_evals: opts.max_iter,
        f_tol: opts.tol,
        x_tol: opts.tol,
        ..Default::default()
    };
    let criterion = spec.criterion;
    let f = |x: &[f64]| obj.deviance(x, criterion);

    let mut best = minimize_bounded(f, &layout.initial(START_DIAGONAL).values, &lower, &nm);
    let mut any_converged = best.converged;
    let mut evals = best.evals;
    for run in 1..opts.n_restarts.max(1) {
        let start = perturb(&best.x, run, &lower);
        let r = minimize_bounded(f, &start, &lower, &nm);
        evals += r.evals;
        any_converged |= r.converged;
        if r.f < best.f || (r.f == best.f && r.converged && !best.converged) {
            best = r;
        }
    }
    if !best.f.is_finite() {
        return Err(Error::Numerical(
            "profiled deviance is not finite anywhere the optimizer looked".into(),
        ));
    }
    let theta = Theta { values: best.x };
    let sol = obj.solve(&theta)?;
    let status = if !any_converged {
        FitStatus::Failed
    } else if layout
        .diagonal_positions()
        .iter()
        .any(|&p| theta.values[p] < SINGULAR_TOLERANCE)
    {
        FitStatus::ConvergedSingular
    } else {
        FitStatus::Converged
    };
    Ok(assemble(
        spec,
        &layout,
        theta,
        &sol,
        obj.n_obs(),
        status,
        evals,
    ))
}

fn structure_from_theta(
    factor: Factor,
    terms: &[String],
    t: &DMatrix<f64>,
    sigma: f64,
) -> RandomStructure {
    let q = terms.len();
    let cov = t * t.transpose() * (sigma * sigma);
    let sds: Vec<f64> = (0..q).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    let corr = (0..q)
        .map(|i| {
            (0..q)
                .map(|j| {
                    if i == j {
                        1.0
                    } else if sds[i] > 0.0 && sds[j] > 0.0 {
                        (cov[(i, j)] / (sds[i] * sds[j])).clamp(-1.0, 1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    RandomStructure {
        factor_name: factor.as_str().to_string(),
        term_names: terms.to_vec(),
        sds,
        corr,
    }
}

fn assemble(
    spec: &ModelSpec,
    layout: &ThetaLayout,
    theta: Theta,
    sol: &PlsSolution,
    n: usize,
    status: FitStatus,
    evals: usize,
) -> FitResult {
    let p = spec.fixed_terms.len();
    let sigma2 = sigma2_from_pwrss(spec.criterion, sol.pwrss, n, p);
    let sigma = sigma2.sqrt();
    let mut estimates = IndexMap::new();
    let mut std_errors = IndexMap::new();
    let mut t_values = IndexMap::new();
    for (j, term) in spec.fixed_terms.iter().enumerate() {
        let est = sol.beta[j];
        let se = (sigma2 * sol.cov_unscaled[(j, j)]).sqrt();
        estimates.insert(term.clone(), est);
        std_errors.insert(term.clone(), se);
        t_values.insert(term.clone(), est / se);
    }
    let factors = layout.factors(&theta.values);
    let varcomp = VarComp {
        by_participant: structure_from_theta(
            Factor::Participant,
            spec.terms_for(Factor::Participant),
            &factors[0],
            sigma,
        ),
        by_item: structure_from_theta(
            Factor::Item,
            spec.terms_for(Factor::Item),
            &factors[1],
            sigma,
        ),
        residual_sd: sigma,
    };
    FitResult {
        estimates,
        std_errors,
        t_values,
        varcomp,
        deviance: sol.deviance(spec.criterion, n, p),
        criterion: spec.criterion,
        status,
        theta: theta.values,
        n_obs: n,
        n_evaluations: evals,
    }
}

fn check_preconditions(design: &Design, spec: &ModelSpec) -> Result<()> {
    for f in &design.factors {
        if !spec.terms_for(f.factor).is_empty() && f.n_levels() < 2 {
            return Err(Error::Data(format!(
                "random factor `{}` has {} level(s); at least 2 are needed",
                f.factor.as_str(),
                f.n_levels()
            )));
        }
    }
    if design.n_obs() <= design.n_fixed() {
        return Err(Error::Data(format!(
            "{} observations cannot support {} fixed effects",
            design.n_obs(),
            design.n_fixed()
        )));
    }
    design.check_rank()
}

/// Fits `spec` to an already-built design.
///
/// Balanced crossed designs with intercept and relatedness fixed effects use
/// the closed-form stratum deviance; everything else uses dense penalized
/// least squares. Both evaluate the same profiled deviance.
pub fn fit_design(design: &Design, spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    spec.validate()?;
    check_preconditions(design, spec)?;
    match CrossedStats::from_design(design, spec) {
        Some(stats) => optimize(&Objective::Crossed(&stats), spec, opts),
        None => optimize(&Objective::General(PlsModel::new(design)), spec, opts),
    }
}

/// Fits `spec` forcing the general dense evaluator.
pub fn fit_design_general(
    design: &Design,
    spec: &ModelSpec,
    opts: &FitOptions,
) -> Result<FitResult> {
    spec.validate()?;
    check_preconditions(design, spec)?;
    optimize(&Objective::General(PlsModel::new(design)), spec, opts)
}

/// Fits `spec` to the correct trials of `table`.
pub fn fit_lmm(
    table: &TrialTable,
    spec: &ModelSpec,
    contrasts: &ContrastCoding,
    opts: &FitOptions,
) -> Result<FitResult> {
    let design = build_design(table, spec, contrasts)?;
    fit_design(&design, spec, opts)
}

/// Fits from precomputed crossed statistics (the spec's fixed terms must match).
pub fn fit_crossed(stats: &CrossedStats, spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    if stats.fixed_terms() != spec.fixed_terms.as_slice() {
        return Err(Error::validation(
            "crossed statistics were built for a different model",
        ));
    }
    optimize(&Objective::Crossed(stats), spec, opts)
}

/// New response vector drawn from the fitted model on the same design.
pub fn simulate_from_fit(
    design: &Design,
    fit: &FitResult,
    stream: StreamKey,
) -> Result<DVector<f64>> {
    let beta = DVector::from_iterator(
        design.fixed_terms.len(),
        design.fixed_terms.iter().map(|t| fit.estimates[t.as_str()]),
    );
    let mut y = &design.x * beta;
    for (slot, fd) in design.factors.iter().enumerate() {
        let rs = match fd.factor {
            Factor::Participant => &fit.varcomp.by_participant,
            Factor::Item => &fit.varcomp.by_item,
        };
        if rs.dim() == 0 {
            continue;
        }
        let effects =
            crate::simulate::draw_random_effects(rs, fd.n_levels(), stream.child(slot as u64))?;
        for (r, &lev) in fd.level_of_row.iter().enumerate() {
            for k in 0..fd.q() {
                y[r] += effects[(lev, k)] * fd.values[(r, k)];
            }
        }
    }
    let mut rng = stream.child(2).rng();
    for v in y.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v += fit.varcomp.residual_sd * e;
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub estimate: f64,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub n_boot: usize,
    pub n_used: usize,
    pub level: f64,
    pub intervals: IndexMap<String, BootstrapInterval>,
}

/// Named scalar parameters of a fit: fixed effects, random sds and
/// correlations, residual sd.
pub fn fit_parameters(fit: &FitResult) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = fit.estimates.iter().map(|(k, v)| (k.clone(), *v)).collect();
    for rs in [&fit.varcomp.by_participant, &fit.varcomp.by_item] {
        for (k, t) in rs.term_names.iter().enumerate() {
            out.push((format!("sd({}:{})", rs.factor_name, t), rs.sds[k]));
        }
        for i in 0..rs.dim() {
            for j in 0..i {
                out.push((
                    format!(
                        "cor({}:{},{})",
                        rs.factor_name, rs.term_names[j], rs.term_names[i]
                    ),
                    rs.corr[i][j],
                ));
            }
        }
    }
    out.push(("residual".to_string(), fit.varcomp.residual_sd));
    out
}

/// Parametric-bootstrap percentile intervals for every fit parameter.
///
/// Replicate `b` simulates from `StreamKey::root(seed).child(b)` and refits
/// with a single optimizer run; failed refits are dropped.
pub fn parametric_bootstrap(
    design: &Design,
    spec: &ModelSpec,
    fit: &FitResult,
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapSummary> {
    let root = StreamKey::root(seed);
    let opts = FitOptions {
        n_restarts: 1,
        ..Default::default()
    };
    let draws: Vec<Option<Vec<f64>>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let y = simulate_from_fit(design, fit, root.child(b as u64)).ok()?;
            let refit = fit_design(&design.with_response(y), spec, &opts).ok()?;
            refit
                .status
                .is_usable()
                .then(|| fit_parameters(&refit).into_iter().map(|(_, v)| v).collect())
        })
        .collect();
    let used: Vec<Vec<f64>> = draws.into_iter().flatten().collect();
    let names = fit_parameters(fit);
    let alpha = (1.0 - level) / 2.0;
    let mut intervals = IndexMap::new();
    for (k, (name, est)) in names.into_iter().enumerate() {
        let mut col: Vec<f64> = used
            .iter()
            .map(|v| v[k])
            .filter(|v| v.is_finite())
            .collect();
        col.sort_by(f64::total_cmp);
        let (low, high) = if col.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (
                quantile_sorted(&col, alpha),
                quantile_sorted(&col, 1.0 - alpha),
            )
        };
        intervals.insert(
            name,
            BootstrapInterval {
                estimate: est,
                low,
                high,
            },
        );
    }
    Ok(BootstrapSummary {
        n_boot,
        n_used: used.len(),
        level,
        intervals,
    })
}
