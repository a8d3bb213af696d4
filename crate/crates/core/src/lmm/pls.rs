//! Profiled deviance through penalized least squares on dense cross-products.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::design::Design;
use super::theta::{Theta, ThetaLayout};
use crate::error::{Error, Result};
use crate::types::Criterion;

/// Profiled deviance from its ingredients.
///
/// `logdet_v` is `log|I + ZΛΛᵀZᵀ|`, `logdet_xvx` is `log|XᵀV₀⁻¹X|` and
/// `pwrss` the penalized residual sum of squares at the conditional optimum.
pub(crate) fn deviance_from_parts(
    criterion: Criterion,
    logdet_v: f64,
    logdet_xvx: f64,
    pwrss: f64,
    n: usize,
    p: usize,
) -> f64 {
    match criterion {
        Criterion::Ml => {
            let n = n as f64;
            logdet_v + n * (1.0 + (2.0 * PI * pwrss / n).ln())
        }
        Criterion::Reml => {
            let nmp = (n - p) as f64;
            logdet_v + logdet_xvx + nmp * (1.0 + (2.0 * PI * pwrss / nmp).ln())
        }
    }
}

/// Residual variance estimate implied by the criterion.
pub(crate) fn sigma2_from_pwrss(criterion: Criterion, pwrss: f64, n: usize, p: usize) -> f64 {
    match criterion {
        Criterion::Ml => pwrss / n as f64,
        Criterion::Reml => pwrss / (n - p) as f64,
    }
}

/// Conditional solution at one `theta`.
#[derive(Debug, Clone)]
pub struct PlsSolution {
    pub beta: DVector<f64>,
    /// `(XᵀV₀⁻¹X)⁻¹`; multiply by σ² for the fixed-effect covariance.
    pub cov_unscaled: DMatrix<f64>,
    pub pwrss: f64,
    pub logdet_v: f64,
    pub logdet_xvx: f64,
}

impl PlsSolution {
    pub fn deviance(&self, criterion: Criterion, n: usize, p: usize) -> f64 {
        deviance_from_parts(criterion, self.logdet_v, self.logdet_xvx, self.pwrss, n, p)
    }
}

/// Precomputed cross-products for repeated deviance evaluation.
#[derive(Debug, Clone)]
pub struct PlsModel {
    layout: ThetaLayout,
    /// (offset, q, n_levels) per factor
    blocks: Vec<(usize, usize, usize)>,
    ztz: DMatrix<f64>,
    ztx: DMatrix<f64>,
    zty: DVector<f64>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    n: usize,
    p: usize,
}

impl PlsModel {
    pub fn new(design: &Design) -> Self {
        let n = design.n_obs();
        let p = design.n_fixed();
        let mut blocks = Vec::new();
        let mut offset = 0;
        for f in &design.factors {
            blocks.push((offset, f.q(), f.n_levels()));
            offset += f.n_columns();
        }
        let qt = offset;
        let mut ztz = DMatrix::zeros(qt, qt);
        let mut ztx = DMatrix::zeros(qt, p);
        let mut zty = DVector::zeros(qt);
        let mut cols: Vec<(usize, f64)> = Vec::with_capacity(8);
        for r in 0..n {
            cols.clear();
            for (f, &(off, q, _)) in design.factors.iter().zip(&blocks) {
                let base = off + f.level_of_row[r] * q;
                for k in 0..q {
                    cols.push((base + k, f.values[(r, k)]));
                }
            }
            let yr = design.y[r];
            for &(a, va) in &cols {
                zty[a] += va * yr;
                for j in 0..p {
                    ztx[(a, j)] += va * design.x[(r, j)];
                }
                for &(b, vb) in &cols {
                    ztz[(a, b)] += va * vb;
                }
            }
        }
        let xt = design.x.transpose();
        PlsModel {
            layout: ThetaLayout::new(design.factors.iter().map(|f| f.q()).collect()),
            blocks,
            ztz,
            ztx,
            zty,
            xtx: &xt * &design.x,
            xty: &xt * &design.y,
            yty: design.y.dot(&design.y),
            n,
            p,
        }
    }

    pub fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    /// Index of the factor eliminated level by level: the one with more columns.
    fn dense_block_split(&self) -> usize {
        let cols = |b: &(usize, usize, usize)| b.1 * b.2;
        (0..self.blocks.len())
            .max_by_key(|&k| cols(&self.blocks[k]))
            .unwrap_or(0)
    }

    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn n_fixed(&self) -> usize {
        self.p
    }

    /// Left-multiplies the rows of `m` by `Λᵀ`.
    fn lambda_t_rows(&self, factors: &[DMatrix<f64>], m: &mut DMatrix<f64>) {
        let ncols = m.ncols();
        let mut buf = vec![0.0; 8];
        for (t, &(off, q, nlev)) in factors.iter().zip(&self.blocks) {
            if q == 0 {
                continue;
            }
            buf.resize(q, 0.0);
            for lev in 0..nlev {
                let base = off + lev * q;
                for c in 0..ncols {
                    for i in 0..q {
                        // (Tᵀ)_{i,k} = T_{k,i}, nonzero for k >= i
                        buf[i] = (i..q).map(|k| t[(k, i)] * m[(base + k, c)]).sum();
                    }
                    for i in 0..q {
                        m[(base + i, c)] = buf[i];
                    }
                }
            }
        }
    }

    /// Right-multiplies the columns of `m` by `Λ`.
    fn lambda_cols(&self, factors: &[DMatrix<f64>], m: &mut DMatrix<f64>) {
        let nrows = m.nrows();
        let mut buf = vec![0.0; 8];
        for (t, &(off, q, nlev)) in factors.iter().zip(&self.blocks) {
            if q == 0 {
                continue;
            }
            buf.resize(q, 0.0);
            for lev in 0..nlev {
                let base = off + lev * q;
                for r in 0..nrows {
                    for j in 0..q {
                        buf[j] = (j..q).map(|k| m[(r, base + k)] * t[(k, j)]).sum();
                    }
                    for j in 0..q {
                        m[(r, base + j)] = buf[j];
                    }
                }
            }
        }
    }

    pub fn solve(&self, theta: &Theta) -> Result<PlsSolution> {
        self.layout.check(theta)?;
        let factors = self.layout.factors(&theta.values);
        let qt = self.ztz.nrows();

        let mut m = self.ztz.clone();
        self.lambda_cols(&factors, &mut m);
        self.lambda_t_rows(&factors, &mut m);
        for i in 0..qt {
            m[(i, i)] += 1.0;
        }
        let chol = BlockCholesky::new(&m, self.blocks[self.dense_block_split()])?;
        let logdet_v = chol.logdet();

        let mut lzty = DMatrix::from_column_slice(qt, 1, self.zty.as_slice());
        self.lambda_t_rows(&factors, &mut lzty);
        let mut lztx = self.ztx.clone();
        self.lambda_t_rows(&factors, &mut lztx);
        let cu = chol.solve_lower(&lzty)?;
        let rzx = chol.solve_lower(&lztx)?;

        let xvx = &self.xtx - rzx.transpose() * &rzx;
        let rhs = &self.xty - (rzx.transpose() * &cu).column(0);
        let xchol = xvx.clone().cholesky().ok_or_else(|| {
            Error::Numerical(
                "XᵀV⁻¹X is not positive definite (rank-deficient fixed effects)".into(),
            )
        })?;
        let logdet_xvx = 2.0 * xchol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let beta = xchol.solve(&rhs);
        let pwrss = self.yty - cu.column(0).dot(&cu.column(0)) - rhs.dot(&beta);
        if !(pwrss.is_finite() && pwrss > 0.0) {
            return Err(Error::Numerical(format!(
                "penalized residual sum of squares is {pwrss}"
            )));
        }
        Ok(PlsSolution {
            beta,
            cov_unscaled: xchol.inverse(),
            pwrss,
            logdet_v,
            logdet_xvx,
        })
    }

    pub fn deviance(&self, theta: &Theta, criterion: Criterion) -> Result<f64> {
        Ok(self.solve(theta)?.deviance(criterion, self.n, self.p))
    }
}

/// Profiled ML or REML deviance of `design` at `theta`.
pub fn profiled_deviance(theta: &Theta, design: &Design, criterion: Criterion) -> Result<f64> {
    PlsModel::new(design).deviance(theta, criterion)
}

/// Cholesky factor of `M = ΛᵀZᵀZΛ + I` exploiting that one factor's block of
/// `M` is block diagonal (one `q × q` block per level): that factor is
/// eliminated level by level and only the Schur complement of the remaining
/// columns is factored densely.
struct BlockCholesky {
    /// (offset, q, n_levels) of the block-diagonal factor
    sparse: (usize, usize, usize),
    /// Inverses of the per-level lower factors.
    level_inv: Vec<DMatrix<f64>>,
    level_logdet: f64,
    /// Column indices of the remaining (dense) part.
    rest: Vec<usize>,
    /// `L_ba`: rest × sparse columns.
    l_ba: DMatrix<f64>,
    l_bb: DMatrix<f64>,
}

impl BlockCholesky {
    fn new(m: &DMatrix<f64>, sparse: (usize, usize, usize)) -> Result<Self> {
        let not_pd = || Error::Numerical("random-effects system is not positive definite".into());
        let (off, q, nlev) = sparse;
        let na = q * nlev;
        let rest: Vec<usize> = (0..m.nrows())
            .filter(|&i| i < off || i >= off + na)
            .collect();
        let mut level_inv = Vec::with_capacity(nlev);
        let mut level_logdet = 0.0;
        let mut l_ba = DMatrix::zeros(rest.len(), na);
        for lev in 0..nlev {
            let base = off + lev * q;
            let block = m.view((base, base), (q, q)).into_owned();
            let l = block.cholesky().ok_or_else(not_pd)?.l();
            level_logdet += 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let inv = l
                .solve_lower_triangular(&DMatrix::identity(q, q))
                .ok_or_else(not_pd)?;
            // L_ba block = M_ba block · L⁻ᵀ
            for (r, &i) in rest.iter().enumerate() {
                for j in 0..q {
                    let mut acc = 0.0;
                    for k in 0..=j {
                        acc += m[(i, base + k)] * inv[(j, k)];
                    }
                    l_ba[(r, lev * q + j)] = acc;
                }
            }
            level_inv.push(inv);
        }
        let nb = rest.len();
        let mut s = DMatrix::zeros(nb, nb);
        for (a, &i) in rest.iter().enumerate() {
            for (b, &j) in rest.iter().enumerate() {
                s[(a, b)] = m[(i, j)];
            }
        }
        if nb > 0 && na > 0 {
            s -= &l_ba * l_ba.transpose();
        }
        let l_bb = if nb > 0 {
            s.cholesky().ok_or_else(not_pd)?.l()
        } else {
            DMatrix::zeros(0, 0)
        };
        Ok(BlockCholesky {
            sparse,
            level_inv,
            level_logdet,
            rest,
            l_ba,
            l_bb,
        })
    }

    fn logdet(&self) -> f64 {
        self.level_logdet + 2.0 * self.l_bb.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L⁻¹ r`, with rows ordered as (block-diagonal part, rest).
    fn solve_lower(&self, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (off, q, nlev) = self.sparse;
        let na = q * nlev;
        let k = r.ncols();
        let mut out = DMatrix::zeros(na + self.rest.len(), k);
        for (lev, inv) in self.level_inv.iter().enumerate() {
            let base = off + lev * q;
            for c in 0..k {
                for i in 0..q {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += inv[(i, j)] * r[(base + j, c)];
                    }
                    out[(lev * q + i, c)] = acc;
                }
            }
        }
        if !self.rest.is_empty() {
            let mut rb = DMatrix::zeros(self.rest.len(), k);
            for (a, &i) in self.rest.iter().enumerate() {
                for c in 0..k {
                    rb[(a, c)] = r[(i, c)];
                }
            }
            if na > 0 {
                rb -= &self.l_ba * out.rows(0, na);
            }
            let cb = self
                .l_bb
                .solve_lower_triangular(&rb)
                .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
            out.rows_mut(na, self.rest.len()).copy_from(&cb);
        }
        Ok(out)
    }
}
