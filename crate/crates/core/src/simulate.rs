//! Synthetic response times from the crossed participant×item generative model
//!
//! ```text
//! rt = b0 + b_rel·x + u0[p] + u1[p]·x + v0[i] + v1[i]·x + e,   e ~ N(0, residual_sd²)
//! ```
//!
//! with `x` the contrast code of the trial's condition and `(u0, u1)`,
//! `(v0, v1)` multivariate normal with covariance `diag(sd)·corr·diag(sd)`.
//! Draws for participant `p` and item `i` come from their own substreams, so
//! the effects of unit `k` do not depend on how many units are simulated after it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::StreamKey;
use crate::types::{
    ensure_valid, min_eigenvalue, Condition, RandomStructure, Scenario, Trial, TrialTable,
    INTERCEPT, PSD_TOLERANCE, RELATEDNESS,
};

const TAG_PARTICIPANT: u64 = 1;
const TAG_ITEM: u64 = 2;
const TAG_RESIDUAL: u64 = 3;
const TAG_ORDER: u64 = 4;

/// A factor `F` with `F·Fᵀ` equal to the covariance of `rs`.
///
/// Uses Cholesky when the covariance is positive definite and a symmetric
/// eigendecomposition with negative eigenvalues clipped to zero otherwise.
pub fn covariance_factor(rs: &RandomStructure) -> Result<DMatrix<f64>> {
    let q = rs.dim();
    if rs.corr.len() != q || rs.corr.iter().any(|r| r.len() != q) || rs.term_names.len() != q {
        return Err(Error::validation(format!(
            "{}: sds, term_names and corr dimensions disagree",
            rs.factor_name
        )));
    }
    if q == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let min_eig = min_eigenvalue(&rs.corr);
    if min_eig < -PSD_TOLERANCE {
        return Err(Error::validation(format!(
            "{}: correlation matrix is not positive semi-definite (smallest eigenvalue {min_eig:.3e})",
            rs.factor_name
        )));
    }
    let cov = rs.covariance();
    if let Some(chol) = cov.clone().cholesky() {
        return Ok(chol.l());
    }
    let eig = SymmetricEigen::new(cov);
    let scale = DVector::from_iterator(q, eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&scale))
}

/// `n_units` independent multivariate-normal effect vectors, one row per unit.
///
/// Unit `k` is drawn from `stream.child(k)`.
pub fn draw_random_effects(
    rs: &RandomStructure,
    n_units: usize,
    stream: StreamKey,
) -> Result<DMatrix<f64>> {
    let factor = covariance_factor(rs)?;
    let q = rs.dim();
    let mut out = DMatrix::zeros(n_units, q);
    let mut z = DVector::zeros(q);
    for unit in 0..n_units {
        let mut rng = stream.child(unit as u64).rng();
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let effect = &factor * &z;
        for k in 0..q {
            out[(unit, k)] = effect[k];
        }
    }
    Ok(out)
}

/// Fully crossed responses indexed `[participant][item][condition][replicate]`,
/// condition 0 = related, 1 = unrelated.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossedResponses {
    pub n_participants: usize,
    pub n_items: usize,
    pub obs_per_cell: usize,
    pub rt: Vec<f64>,
}

impl CrossedResponses {
    #[inline]
    pub fn index(&self, p: usize, i: usize, c: usize, k: usize) -> usize {
        ((p * self.n_items + i) * 2 + c) * self.obs_per_cell + k
    }

    #[inline]
    pub fn get(&self, p: usize, i: usize, c: usize, k: usize) -> f64 {
        self.rt[self.index(p, i, c, k)]
    }
}

/// Per-condition design value of each random term, `[term][condition]`.
fn term_values(rs: &RandomStructure, codes: [f64; 2]) -> Result<Vec<[f64; 2]>> {
    rs.term_names
        .iter()
        .map(|t| match t.as_str() {
            INTERCEPT => Ok([1.0, 1.0]),
            RELATEDNESS => Ok(codes),
            other => Err(Error::validation(format!(
                "{}: random term `{other}` cannot be simulated (only intercept and relatedness)",
                rs.factor_name
            ))),
        })
        .collect()
}

/// Draws one fully crossed dataset from `s`.
pub fn simulate_crossed(s: &Scenario, seed: u64) -> Result<CrossedResponses> {
    ensure_valid(s)?;
    if let Some(t) = s
        .fixed
        .coefficients
        .keys()
        .find(|k| k.as_str() != INTERCEPT && k.as_str() != RELATEDNESS)
    {
        return Err(Error::validation(format!(
            "fixed term `{t}` cannot be simulated (only intercept and relatedness)"
        )));
    }
    let codes = [s.contrasts.related_code, s.contrasts.unrelated_code];
    let p_terms = term_values(&s.by_participant, codes)?;
    let i_terms = term_values(&s.by_item, codes)?;

    let root = StreamKey::root(seed);
    let u = draw_random_effects(
        &s.by_participant,
        s.n_participants,
        root.child(TAG_PARTICIPANT),
    )?;
    let v = draw_random_effects(&s.by_item, s.n_items, root.child(TAG_ITEM))?;

    let b0 = s.fixed.get(INTERCEPT);
    let b1 = s.fixed.get(RELATEDNESS);
    let fixed_part = [b0 + b1 * codes[0], b0 + b1 * codes[1]];

    // Item contribution per (item, condition).
    let mut item_part = vec![[0.0; 2]; s.n_items];
    for (i, part) in item_part.iter_mut().enumerate() {
        for c in 0..2 {
            part[c] = i_terms
                .iter()
                .enumerate()
                .map(|(k, tv)| v[(i, k)] * tv[c])
                .sum();
        }
    }

    let r = s.obs_per_cell;
    let mut rt = Vec::with_capacity(s.n_participants * s.n_items * 2 * r);
    let resid_stream = root.child(TAG_RESIDUAL);
    for p in 0..s.n_participants {
        let mut rng = resid_stream.child(p as u64).rng();
        let mut part_p = [0.0; 2];
        for c in 0..2 {
            part_p[c] = p_terms
                .iter()
                .enumerate()
                .map(|(k, tv)| u[(p, k)] * tv[c])
                .sum();
        }
        for part_i in &item_part {
            for c in 0..2 {
                let mean = fixed_part[c] + part_p[c] + part_i[c];
                for _ in 0..r {
                    let e: f64 = rng.sample(StandardNormal);
                    rt.push(mean + s.residual_sd * e);
                }
            }
        }
    }
    Ok(CrossedResponses {
        n_participants: s.n_participants,
        n_items: s.n_items,
        obs_per_cell: r,
        rt,
    })
}

fn label(prefix: char, k: usize, n: usize) -> String {
    let width = n.to_string().len();
    format!("{prefix}{:0width$}", k + 1)
}

/// Long-format table of one simulated dataset.
///
/// Rows are in design order (participant, item, condition, replicate);
/// `trial_index` is a seeded random presentation order within each participant.
pub fn simulate_trials(s: &Scenario, seed: u64) -> Result<TrialTable> {
    let data = simulate_crossed(s, seed)?;
    let order_stream = StreamKey::root(seed).child(TAG_ORDER);
    let per_participant = s.n_items * 2 * s.obs_per_cell;
    let mut rows = Vec::with_capacity(data.rt.len());
    for p in 0..s.n_participants {
        let mut order: Vec<u32> = (1..=per_participant as u32).collect();
        order.shuffle(&mut order_stream.child(p as u64).rng());
        let pid = label('p', p, s.n_participants);
        let mut slot = 0;
        for i in 0..s.n_items {
            let iid = label('i', i, s.n_items);
            for (c, cond) in Condition::BOTH.iter().enumerate() {
                for k in 0..s.obs_per_cell {
                    rows.push(Trial {
                        participant_id: pid.clone(),
                        item_id: iid.clone(),
                        condition: *cond,
                        setting: None,
                        trial_index: Some(order[slot]),
                        replicate: Some(k as u32 + 1),
                        rt_ms: data.get(p, i, c, k),
                        correct: None,
                    });
                    slot += 1;
                }
            }
        }
    }
    Ok(TrialTable::new(rows))
}
