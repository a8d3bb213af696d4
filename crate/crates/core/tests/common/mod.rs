//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use lmmpower::lmm::{Design, Theta};
use lmmpower::{Condition, Criterion, Trial, TrialTable};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Gaussian −2·log-likelihood of `y ~ N(Xβ, σ²V₀)` at the profiled optimum,
/// built from the dense n×n marginal covariance `V₀ = I + Z Σ Zᵀ`.
///
/// ML: σ² = r²/n, β the GLS estimate.
/// REML: the restricted likelihood `(n−p)·ln(2πσ²) + ln|V₀| + ln|XᵀV₀⁻¹X| + r²/σ²`
/// with σ² = r²/(n−p).
pub fn dense_deviance(design: &Design, theta: &[f64], criterion: Criterion) -> f64 {
    let n = design.n_obs();
    let p = design.n_fixed();
    let z = design.z_dense();
    // relative covariance of the stacked random effects, block per level
    let mut sigma = DMatrix::<f64>::zeros(z.ncols(), z.ncols());
    let mut pos = 0;
    let mut offset = 0;
    for f in &design.factors {
        let q = f.q();
        let mut t = DMatrix::<f64>::zeros(q, q);
        for j in 0..q {
            for i in j..q {
                t[(i, j)] = theta[pos];
                pos += 1;
            }
        }
        let block = &t * t.transpose();
        for lev in 0..f.n_levels() {
            let o = offset + lev * q;
            sigma.view_mut((o, o), (q, q)).copy_from(&block);
        }
        offset += f.n_columns();
    }
    let v0 = DMatrix::<f64>::identity(n, n) + &z * sigma * z.transpose();
    let chol = v0.clone().cholesky().expect("V0 is positive definite");
    let logdet_v: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let vinv_x = chol.solve(&design.x);
    let vinv_y = chol.solve(&design.y);
    let xtvx = design.x.transpose() * &vinv_x;
    let beta = xtvx
        .clone()
        .cholesky()
        .expect("X'V⁻¹X is positive definite")
        .solve(&(design.x.transpose() * &vinv_y));
    let resid = &design.y - &design.x * &beta;
    let r2 = resid.dot(&chol.solve(&resid));
    let two_pi = 2.0 * std::f64::consts::PI;
    match criterion {
        Criterion::Ml => {
            let s2 = r2 / n as f64;
            n as f64 * (two_pi * s2).ln() + logdet_v + r2 / s2
        }
        Criterion::Reml => {
            let m = (n - p) as f64;
            let s2 = r2 / m;
            let logdet_xvx = xtvx.determinant().ln();
            m * (two_pi * s2).ln() + logdet_v + logdet_xvx + r2 / s2
        }
    }
}

/// Ordinary least squares: coefficients and residual sum of squares.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, f64) {
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * y;
    let beta = qr
        .r()
        .solve_upper_triangular(&qty)
        .expect("full-rank design");
    let rss = (y - x * &beta).norm_squared();
    (beta, rss)
}

/// Gaussian deviance of the OLS fit: n·(1 + ln(2π·RSS/n)) for ML, the
/// restricted analogue with `n − p` and `ln|XᵀX|` for REML.
pub fn ols_deviance(x: &DMatrix<f64>, y: &DVector<f64>, criterion: Criterion) -> f64 {
    let (_, rss) = ols(x, y);
    let n = y.len() as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    match criterion {
        Criterion::Ml => n * (1.0 + (two_pi * rss / n).ln()),
        Criterion::Reml => {
            let m = n - x.ncols() as f64;
            (x.transpose() * x).determinant().ln() + m * (1.0 + (two_pi * rss / m).ln())
        }
    }
}

/// Random crossed table: `np × ni × 2` cells with RTs around 800 ms and,
/// when `drop_prob > 0`, some rows removed to unbalance the design.
pub fn toy_table(seed: u64, np: usize, ni: usize, drop_prob: f64) -> TrialTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pu: Vec<(f64, f64)> = (0..np)
        .map(|_| (rng.random_range(-80.0..80.0), rng.random_range(-30.0..30.0)))
        .collect();
    let iv: Vec<(f64, f64)> = (0..ni)
        .map(|_| (rng.random_range(-60.0..60.0), rng.random_range(-30.0..30.0)))
        .collect();
    let mut rows = Vec::new();
    for p in 0..np {
        for i in 0..ni {
            for c in Condition::BOTH {
                if drop_prob > 0.0 && rng.random::<f64>() < drop_prob {
                    continue;
                }
                let x = if c == Condition::Related { 0.5 } else { -0.5 };
                let e: f64 = rng.sample(StandardNormal);
                let rt =
                    800.0 + 25.0 * x + pu[p].0 + pu[p].1 * x + iv[i].0 + iv[i].1 * x + 60.0 * e;
                rows.push(Trial {
                    participant_id: format!("p{p}"),
                    item_id: format!("i{i}"),
                    condition: c,
                    setting: None,
                    trial_index: None,
                    replicate: None,
                    rt_ms: rt,
                    correct: None,
                });
            }
        }
    }
    TrialTable::new(rows)
}

/// Uniform random theta respecting the diagonal lower bounds.
pub fn random_theta(rng: &mut impl Rng, lower: &[f64]) -> Theta {
    Theta {
        values: lower
            .iter()
            .map(|&lo| {
                if lo == 0.0 {
                    rng.random_range(0.0..2.0)
                } else {
                    rng.random_range(-1.5..1.5)
                }
            })
            .collect(),
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
