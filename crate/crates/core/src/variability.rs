//! Variability diagnostics: odd/even split-half reliability, comparison of
//! independent correlations, variance-ratio F-tests, a two-group
//! location-scale comparison and descriptive per-participant effect sds.
//!
//! Error trials (`correct == false`) are removed before every analysis.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamKey;
use crate::special::{f_sf, normal_sf};
use crate::stats::{mean, ml_sd, pearson, quantile_sorted, sample_sd};
use crate::types::{Condition, TrialTable};

/// Two-sided 95% normal quantile.
const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfMeans {
    pub participant_id: String,
    pub odd_mean: f64,
    pub even_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityResult {
    pub per_participant: Vec<HalfMeans>,
    pub r: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Fisher-z 95% interval for a correlation from `n` pairs.
pub fn fisher_interval(r: f64, n: usize) -> (f64, f64) {
    if r.abs() >= 1.0 {
        return (r, r);
    }
    let z = r.atanh();
    let half = Z_95 / ((n as f64) - 3.0).sqrt();
    ((z - half).tanh(), (z + half).tanh())
}

fn group_by_participant<'a>(table: &'a TrialTable) -> Vec<(String, Vec<&'a crate::types::Trial>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<&str, Vec<&crate::types::Trial>> = HashMap::new();
    for row in table.rows.iter().filter(|r| !r.is_error()) {
        let e = groups.entry(row.participant_id.as_str()).or_default();
        if e.is_empty() {
            order.push(row.participant_id.clone());
        }
        e.push(row);
    }
    order
        .into_iter()
        .map(|id| {
            let rows = groups.remove(id.as_str()).unwrap();
            (id, rows)
        })
        .collect()
}

/// Correlation across participants between mean RT on odd- and on
/// even-numbered trials (parity of `trial_index`).
pub fn split_half(table: &TrialTable) -> Result<ReliabilityResult> {
    if let Some(k) = table.rows.iter().position(|r| r.trial_index.is_none()) {
        return Err(Error::Data(format!(
            "split-half reliability needs trial_index; row {} has none",
            k + 1
        )));
    }
    let groups = group_by_participant(table);
    let mut per_participant = Vec::with_capacity(groups.len());
    for (id, rows) in groups {
        let (mut odd, mut even) = (Vec::new(), Vec::new());
        for r in rows {
            if r.trial_index.unwrap() % 2 == 1 {
                odd.push(r.rt_ms);
            } else {
                even.push(r.rt_ms);
            }
        }
        if odd.is_empty() || even.is_empty() {
            return Err(Error::Data(format!(
                "participant `{id}` needs at least one odd and one even correct trial"
            )));
        }
        per_participant.push(HalfMeans {
            participant_id: id,
            odd_mean: mean(&odd),
            even_mean: mean(&even),
        });
    }
    if per_participant.len() < 4 {
        return Err(Error::Data(format!(
            "split-half reliability needs at least 4 participants, got {}",
            per_participant.len()
        )));
    }
    let odd: Vec<f64> = per_participant.iter().map(|h| h.odd_mean).collect();
    let even: Vec<f64> = per_participant.iter().map(|h| h.even_mean).collect();
    let r = pearson(&odd, &even);
    if !r.is_finite() {
        return Err(Error::Numerical(
            "half means have zero variance across participants".into(),
        ));
    }
    let (ci_low, ci_high) = fisher_interval(r, per_participant.len());
    Ok(ReliabilityResult {
        per_participant,
        r,
        ci_low,
        ci_high,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationComparison {
    pub z: f64,
    pub p_two_sided: f64,
}

/// Fisher-z test for two correlations from independent samples.
pub fn compare_correlations(
    r1: f64,
    n1: usize,
    r2: f64,
    n2: usize,
) -> Result<CorrelationComparison> {
    if n1 < 4 || n2 < 4 {
        return Err(Error::validation(format!(
            "correlation comparison needs n >= 4 in each sample (got {n1}, {n2})"
        )));
    }
    for r in [r1, r2] {
        if r.abs() >= 1.0 {
            return Err(Error::PerfectCorrelation(r));
        }
        if !r.is_finite() {
            return Err(Error::validation(format!("correlation {r} is not finite")));
        }
    }
    let se = (1.0 / (n1 as f64 - 3.0) + 1.0 / (n2 as f64 - 3.0)).sqrt();
    let z = (r2.atanh() - r1.atanh()) / se;
    Ok(CorrelationComparison {
        z,
        p_two_sided: (2.0 * normal_sf(z.abs())).min(1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceRatioResult {
    pub f: f64,
    pub df1: f64,
    pub df2: f64,
    /// One-sided upper-tail probability of `f`.
    pub p: f64,
}

/// F-test of `sd_a² / sd_b²` with `(n_a − 1, n_b − 1)` degrees of freedom.
pub fn variance_ratio_test(
    sd_a: f64,
    n_a: usize,
    sd_b: f64,
    n_b: usize,
) -> Result<VarianceRatioResult> {
    if !(sd_a > 0.0 && sd_b > 0.0 && sd_a.is_finite() && sd_b.is_finite()) {
        return Err(Error::validation(format!(
            "variance ratio needs positive finite sds (got {sd_a}, {sd_b})"
        )));
    }
    if n_a < 2 || n_b < 2 {
        return Err(Error::validation(format!(
            "variance ratio needs n >= 2 per group (got {n_a}, {n_b})"
        )));
    }
    let f = (sd_a * sd_a) / (sd_b * sd_b);
    let (df1, df2) = ((n_a - 1) as f64, (n_b - 1) as f64);
    Ok(VarianceRatioResult {
        f,
        df1,
        df2,
        p: f_sf(f, df1, df2),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationScaleResult {
    pub mean_a: f64,
    pub mean_b: f64,
    pub sd_a: f64,
    pub sd_b: f64,
    pub mean_diff: f64,
    pub mean_ci: (f64, f64),
    pub sd_diff: f64,
    pub sd_ci: (f64, f64),
    pub n_a: usize,
    pub n_b: usize,
    pub n_boot: usize,
}

fn resample_stats(xs: &[f64], stream: StreamKey) -> (f64, f64) {
    let mut rng = stream.rng();
    let n = xs.len();
    let (mut s, mut ss) = (0.0, 0.0);
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let v = xs[rng.random_range(0..n)];
        s += v;
        draws.push(v);
    }
    let m = s / n as f64;
    for v in &draws {
        ss += (v - m) * (v - m);
    }
    (m, (ss / n as f64).sqrt())
}

/// Group means and ML sds (divisor `n`) with per-group nonparametric
/// bootstrap percentile 95% intervals for `b − a`.
pub fn location_scale_fit(
    table_a: &TrialTable,
    table_b: &TrialTable,
    n_boot: usize,
    seed: u64,
) -> Result<LocationScaleResult> {
    if n_boot < 200 {
        return Err(Error::validation(format!(
            "n_boot = {n_boot} must be >= 200"
        )));
    }
    let a: Vec<f64> = table_a
        .rows
        .iter()
        .filter(|r| !r.is_error())
        .map(|r| r.rt_ms)
        .collect();
    let b: Vec<f64> = table_b
        .rows
        .iter()
        .filter(|r| !r.is_error())
        .map(|r| r.rt_ms)
        .collect();
    for (name, g) in [("a", &a), ("b", &b)] {
        if g.len() < 2 {
            return Err(Error::Data(format!(
                "group {name} has {} correct rows; at least 2 are needed",
                g.len()
            )));
        }
    }
    let (mean_a, mean_b) = (mean(&a), mean(&b));
    let (sd_a, sd_b) = (ml_sd(&a), ml_sd(&b));
    let root = StreamKey::root(seed);
    let reps: Vec<(f64, f64)> = (0..n_boot as u64)
        .into_par_iter()
        .map(|k| {
            let s = root.child(k);
            let (ma, sa) = resample_stats(&a, s.child(0));
            let (mb, sb) = resample_stats(&b, s.child(1));
            (mb - ma, sb - sa)
        })
        .collect();
    let interval = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        (quantile_sorted(&v, 0.025), quantile_sorted(&v, 0.975))
    };
    Ok(LocationScaleResult {
        mean_a,
        mean_b,
        sd_a,
        sd_b,
        mean_diff: mean_b - mean_a,
        mean_ci: interval(reps.iter().map(|r| r.0).collect()),
        sd_diff: sd_b - sd_a,
        sd_ci: interval(reps.iter().map(|r| r.1).collect()),
        n_a: a.len(),
        n_b: b.len(),
        n_boot,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantEffect {
    pub participant_id: String,
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeSdResult {
    pub per_participant: Vec<ParticipantEffect>,
    pub grand_mean: f64,
    pub sd: f64,
}

/// Per-participant `mean(related) − mean(unrelated)`, their unweighted mean
/// and their sd (divisor `n − 1`).
pub fn descriptive_slope_sd(table: &TrialTable) -> Result<SlopeSdResult> {
    let mut per_participant = Vec::new();
    for (id, rows) in group_by_participant(table) {
        let pick = |c: Condition| -> Vec<f64> {
            rows.iter()
                .filter(|r| r.condition == c)
                .map(|r| r.rt_ms)
                .collect()
        };
        let (rel, unrel) = (pick(Condition::Related), pick(Condition::Unrelated));
        if rel.is_empty() || unrel.is_empty() {
            let missing = if rel.is_empty() {
                "related"
            } else {
                "unrelated"
            };
            return Err(Error::Data(format!(
                "participant `{id}` has no correct {missing} trials"
            )));
        }
        per_participant.push(ParticipantEffect {
            participant_id: id,
            diff: mean(&rel) - mean(&unrel),
        });
    }
    if per_participant.len() < 2 {
        return Err(Error::Data(format!(
            "descriptive slope sd needs at least 2 participants, got {}",
            per_participant.len()
        )));
    }
    let diffs: Vec<f64> = per_participant.iter().map(|p| p.diff).collect();
    Ok(SlopeSdResult {
        grand_mean: mean(&diffs),
        sd: sample_sd(&diffs),
        per_participant,
    })
}
