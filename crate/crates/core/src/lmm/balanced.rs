//! Closed-form profiled deviance for fully crossed, balanced two-condition designs.
//!
//! When every participant × item × condition cell holds the same number `r`
//! of observations, the marginal covariance `V₀ = I + ZΛΛᵀZᵀ` is diagonalized
//! by the orthogonal split of the data into within-cell, interaction,
//! participant, item and grand-mean strata. Within each stratum `V₀` acts on
//! the two-dimensional condition space as
//!
//! ```text
//! within, interaction:  I
//! participant:          B_p = I + r·n_items·A_p          (n_participants − 1 copies)
//! item:                 B_i = I + r·n_participants·A_i   (n_items − 1 copies)
//! grand mean:           B_g = I + r·n_items·A_p + r·n_participants·A_i
//! ```
//!
//! where `A_f = G_f T_f T_fᵀ G_fᵀ` maps a factor's relative covariance into
//! condition space. With intercept and relatedness as the fixed effects the
//! grand-mean stratum is absorbed exactly by `β`, so each evaluation costs a
//! handful of 2×2 operations once the sufficient statistics are accumulated.

use nalgebra::{DMatrix, DVector};

use super::design::Design;
use super::pls::{deviance_from_parts, PlsSolution};
use super::theta::{Theta, ThetaLayout};
use super::ModelSpec;
use crate::error::{Error, Result};
use crate::simulate::CrossedResponses;
use crate::types::{Criterion, Factor, INTERCEPT, RELATEDNESS};

type M2 = [[f64; 2]; 2];

#[inline]
fn det2(a: &M2) -> f64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

#[inline]
fn inv2(a: &M2) -> M2 {
    let d = det2(a);
    [[a[1][1] / d, -a[0][1] / d], [-a[1][0] / d, a[0][0] / d]]
}

#[inline]
fn mul2(a: &M2, b: &M2) -> M2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

#[inline]
fn transpose2(a: &M2) -> M2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

/// `tr(A⁻¹ W)` for symmetric 2×2 `A`, `W`.
#[inline]
fn trace_inv_prod(a: &M2, w: &M2) -> f64 {
    let d = det2(a);
    (a[1][1] * w[0][0] - a[0][1] * w[1][0] - a[1][0] * w[0][1] + a[0][0] * w[1][1]) / d
}

fn term_row(term: &str, code: f64) -> Option<f64> {
    match term {
        INTERCEPT => Some(1.0),
        RELATEDNESS => Some(code),
        _ => None,
    }
}

/// Sufficient statistics of a balanced crossed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossedStats {
    pub n_participants: usize,
    pub n_items: usize,
    pub obs_per_cell: usize,
    /// Relatedness code of condition slot 0 and 1.
    pub codes: [f64; 2],
    pub ss_within: f64,
    pub ss_interaction: f64,
    pub w_participant: M2,
    pub w_item: M2,
    pub grand_mean: [f64; 2],
    fixed_terms: Vec<String>,
    /// Condition-space design of each factor's random terms, `[c][k]`.
    random_rows: [Vec<[f64; 2]>; 2],
    /// Condition-space fixed-effect design `[c][j]`.
    fixed_rows: M2,
    layout: ThetaLayout,
}

impl CrossedStats {
    /// `cell_means[(p·n_items + i)·2 + c]` with `r` observations per cell.
    fn from_cell_means(
        np: usize,
        ni: usize,
        r: usize,
        codes: [f64; 2],
        cell_means: &[f64],
        ss_within: f64,
        spec: &ModelSpec,
    ) -> Result<Self> {
        let mut fixed_rows = [[0.0; 2]; 2];
        if spec.fixed_terms.len() != 2 {
            return Err(Error::validation(
                "crossed fast path needs exactly two fixed terms",
            ));
        }
        for (j, t) in spec.fixed_terms.iter().enumerate() {
            for c in 0..2 {
                fixed_rows[c][j] = term_row(t, codes[c])
                    .ok_or_else(|| Error::validation(format!("term `{t}` not supported")))?;
            }
        }
        let mut random_rows: [Vec<[f64; 2]>; 2] = [Vec::new(), Vec::new()];
        for (slot, f) in [Factor::Participant, Factor::Item].into_iter().enumerate() {
            for t in spec.terms_for(f) {
                let a = term_row(t, codes[0]);
                let b = term_row(t, codes[1]);
                match (a, b) {
                    (Some(a), Some(b)) => random_rows[slot].push([a, b]),
                    _ => return Err(Error::validation(format!("term `{t}` not supported"))),
                }
            }
        }
        // random_rows[f][k] holds [value under c=0, value under c=1]; transpose
        // happens at evaluation time.

        let mut grand = [0.0; 2];
        let mut mp = vec![[0.0; 2]; np];
        let mut mi = vec![[0.0; 2]; ni];
        for p in 0..np {
            for i in 0..ni {
                for c in 0..2 {
                    let m = cell_means[(p * ni + i) * 2 + c];
                    mp[p][c] += m;
                    mi[i][c] += m;
                    grand[c] += m;
                }
            }
        }
        for v in mp.iter_mut() {
            v[0] /= ni as f64;
            v[1] /= ni as f64;
        }
        for v in mi.iter_mut() {
            v[0] /= np as f64;
            v[1] /= np as f64;
        }
        grand[0] /= (np * ni) as f64;
        grand[1] /= (np * ni) as f64;

        let mut ss_int = 0.0;
        for p in 0..np {
            for i in 0..ni {
                for c in 0..2 {
                    let d = cell_means[(p * ni + i) * 2 + c] - mp[p][c] - mi[i][c] + grand[c];
                    ss_int += d * d;
                }
            }
        }
        let outer = |rows: &[[f64; 2]], scale: f64| {
            let mut w = [[0.0; 2]; 2];
            for v in rows {
                let d = [v[0] - grand[0], v[1] - grand[1]];
                for a in 0..2 {
                    for b in 0..2 {
                        w[a][b] += d[a] * d[b];
                    }
                }
            }
            for row in w.iter_mut() {
                for x in row.iter_mut() {
                    *x *= scale;
                }
            }
            w
        };
        let rf = r as f64;
        Ok(CrossedStats {
            n_participants: np,
            n_items: ni,
            obs_per_cell: r,
            codes,
            ss_within,
            ss_interaction: rf * ss_int,
            w_participant: outer(&mp, rf * ni as f64),
            w_item: outer(&mi, rf * np as f64),
            grand_mean: grand,
            fixed_terms: spec.fixed_terms.clone(),
            layout: ThetaLayout::new(vec![random_rows[0].len(), random_rows[1].len()]),
            random_rows,
            fixed_rows,
        })
    }

    /// Statistics of simulated crossed responses under `spec`
    /// (condition slot 0 = related).
    pub fn from_crossed(
        data: &CrossedResponses,
        codes: [f64; 2],
        spec: &ModelSpec,
    ) -> Result<Self> {
        let (np, ni, r) = (data.n_participants, data.n_items, data.obs_per_cell);
        let mut means = Vec::with_capacity(np * ni * 2);
        let mut ss_within = 0.0;
        for cell in data.rt.chunks_exact(r) {
            let m = cell.iter().sum::<f64>() / r as f64;
            ss_within += cell.iter().map(|y| (y - m) * (y - m)).sum::<f64>();
            means.push(m);
        }
        Self::from_cell_means(np, ni, r, codes, &means, ss_within, spec)
    }

    /// Statistics of `design` when it is fully crossed and balanced with
    /// intercept and relatedness as the only fixed terms; `None` otherwise.
    pub fn from_design(design: &Design, spec: &ModelSpec) -> Option<Self> {
        if spec.fixed_terms.len() != 2
            || !spec
                .fixed_terms
                .iter()
                .all(|t| t == INTERCEPT || t == RELATEDNESS)
            || spec.fixed_terms[0] == spec.fixed_terms[1]
        {
            return None;
        }
        let rel_col = spec.fixed_terms.iter().position(|t| t == RELATEDNESS)?;
        let n = design.n_obs();
        let mut codes: Vec<f64> = Vec::with_capacity(2);
        for r in 0..n {
            let v = design.x[(r, rel_col)];
            if !codes.contains(&v) {
                if codes.len() == 2 {
                    return None;
                }
                codes.push(v);
            }
        }
        if codes.len() != 2 {
            return None;
        }
        let codes = [codes[0], codes[1]];
        let part = design.factor(Factor::Participant);
        let item = design.factor(Factor::Item);
        let (np, ni) = (part.n_levels(), item.n_levels());
        if np < 2 || ni < 2 || n % (np * ni * 2) != 0 {
            return None;
        }
        let r = n / (np * ni * 2);
        let mut count = vec![0usize; np * ni * 2];
        let mut sum = vec![0.0; np * ni * 2];
        let mut cell_of_row = Vec::with_capacity(n);
        for row in 0..n {
            let c = if design.x[(row, rel_col)] == codes[0] {
                0
            } else {
                1
            };
            let k = (part.level_of_row[row] * ni + item.level_of_row[row]) * 2 + c;
            count[k] += 1;
            sum[k] += design.y[row];
            cell_of_row.push(k);
        }
        if count.iter().any(|&c| c != r) {
            return None;
        }
        let means: Vec<f64> = sum.iter().map(|s| s / r as f64).collect();
        let ss_within = (0..n)
            .map(|row| {
                let d = design.y[row] - means[cell_of_row[row]];
                d * d
            })
            .sum();
        Self::from_cell_means(np, ni, r, codes, &means, ss_within, spec).ok()
    }

    pub fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    pub fn n_obs(&self) -> usize {
        self.n_participants * self.n_items * 2 * self.obs_per_cell
    }

    pub fn fixed_terms(&self) -> &[String] {
        &self.fixed_terms
    }

    /// `A_f` for each factor: the factor's relative covariance in condition space.
    fn condition_covariances(&self, theta: &[f64]) -> [M2; 2] {
        let mut out = [[[0.0; 2]; 2]; 2];
        let mut pos = 0;
        for (slot, rows) in self.random_rows.iter().enumerate() {
            let q = rows.len();
            // G·T where G[c][k] = rows[k][c], T lower triangular column-major
            let mut gt = [[0.0; 4]; 2];
            for j in 0..q {
                for i in j..q {
                    let t = theta[pos];
                    pos += 1;
                    for c in 0..2 {
                        gt[c][j] += rows[i][c] * t;
                    }
                }
            }
            let a = &mut out[slot];
            for c in 0..2 {
                for d in 0..2 {
                    a[c][d] = (0..q).map(|k| gt[c][k] * gt[d][k]).sum();
                }
            }
        }
        out
    }

    fn strata(&self, theta: &[f64]) -> (M2, M2, M2) {
        let [ap, ai] = self.condition_covariances(theta);
        let r = self.obs_per_cell as f64;
        let sp = r * self.n_items as f64;
        let si = r * self.n_participants as f64;
        let mut bp = [[0.0; 2]; 2];
        let mut bi = [[0.0; 2]; 2];
        let mut bg = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let id = if a == b { 1.0 } else { 0.0 };
                bp[a][b] = id + sp * ap[a][b];
                bi[a][b] = id + si * ai[a][b];
                bg[a][b] = id + sp * ap[a][b] + si * ai[a][b];
            }
        }
        (bp, bi, bg)
    }

    fn parts(&self, theta: &[f64]) -> (f64, f64, f64, M2) {
        let (bp, bi, bg) = self.strata(theta);
        let np = self.n_participants as f64;
        let ni = self.n_items as f64;
        let logdet_v = (np - 1.0) * det2(&bp).ln() + (ni - 1.0) * det2(&bi).ln() + det2(&bg).ln();
        let pwrss = self.ss_within
            + self.ss_interaction
            + trace_inv_prod(&bp, &self.w_participant)
            + trace_inv_prod(&bi, &self.w_item);
        let big_n = (self.n_participants * self.n_items * self.obs_per_cell) as f64;
        let logdet_xvx =
            2.0 * big_n.ln() + 2.0 * det2(&self.fixed_rows).abs().ln() - det2(&bg).ln();
        (logdet_v, logdet_xvx, pwrss, bg)
    }

    /// Profiled deviance at a raw theta slice; `+∞` where it is undefined.
    pub fn deviance_at(&self, theta: &[f64], criterion: Criterion) -> f64 {
        let (logdet_v, logdet_xvx, pwrss, _) = self.parts(theta);
        if !(pwrss > 0.0) {
            return f64::INFINITY;
        }
        let d = deviance_from_parts(criterion, logdet_v, logdet_xvx, pwrss, self.n_obs(), 2);
        if d.is_finite() {
            d
        } else {
            f64::INFINITY
        }
    }

    pub fn deviance(&self, theta: &Theta, criterion: Criterion) -> Result<f64> {
        self.layout.check(theta)?;
        Ok(self.deviance_at(&theta.values, criterion))
    }

    pub fn solve(&self, theta: &Theta) -> Result<PlsSolution> {
        self.layout.check(theta)?;
        let (logdet_v, logdet_xvx, pwrss, bg) = self.parts(&theta.values);
        if !(pwrss.is_finite() && pwrss > 0.0) {
            return Err(Error::Numerical(format!(
                "penalized residual sum of squares is {pwrss}"
            )));
        }
        let c = &self.fixed_rows;
        let cinv = inv2(c);
        let beta = [
            cinv[0][0] * self.grand_mean[0] + cinv[0][1] * self.grand_mean[1],
            cinv[1][0] * self.grand_mean[0] + cinv[1][1] * self.grand_mean[1],
        ];
        let big_n = (self.n_participants * self.n_items * self.obs_per_cell) as f64;
        let cov = mul2(&mul2(&cinv, &bg), &transpose2(&cinv));
        Ok(PlsSolution {
            beta: DVector::from_row_slice(&beta),
            cov_unscaled: DMatrix::from_fn(2, 2, |i, j| cov[i][j] / big_n),
            pwrss,
            logdet_v,
            logdet_xvx,
        })
    }
}
