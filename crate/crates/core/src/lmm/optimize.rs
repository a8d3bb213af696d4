//! Nelder–Mead simplex search with projection onto lower bounds.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Spread of function values across the simplex.
    pub f_tol: f64,
    /// Largest coordinate distance from the best vertex.
    pub x_tol: f64,
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_evals: 20_000,
            f_tol: 1e-6,
            x_tol: 1e-6,
            initial_step: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], lower: &[f64]) {
    for (v, &lo) in x.iter_mut().zip(lower) {
        if *v < lo {
            *v = lo;
        }
    }
}

/// Minimizes `f` subject to `x >= lower`, starting from `x0`.
///
/// Non-finite function values are treated as `+∞`. Convergence requires both
/// the function spread and the simplex size to fall below their tolerances.
pub fn minimize_bounded<F>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    opts: &NelderMeadOptions,
) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut start = x0.to_vec();
    project(&mut start, lower);
    if n == 0 {
        let v = eval(&start, &mut evals);
        return NelderMeadResult {
            x: start,
            f: v,
            evals,
            converged: true,
        };
    }

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(start.clone());
    for k in 0..n {
        let mut v = start.clone();
        let step = if start[k] != 0.0 {
            opts.initial_step * start[k].abs().max(0.1)
        } else {
            opts.initial_step
        };
        v[k] += step;
        project(&mut v, lower);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut order: Vec<usize> = (0..=n).collect();
    let mut converged = false;
    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial2 = vec![0.0; n];

    loop {
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];

        let f_spread = values[worst] - values[best];
        let x_spread = simplex
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[best]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if f_spread.is_finite() && f_spread <= opts.f_tol && x_spread <= opts.x_tol {
            converged = true;
            break;
        }
        if evals >= opts.max_evals {
            break;
        }

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &idx in &order[..n] {
            for (c, v) in centroid.iter_mut().zip(&simplex[idx]) {
                *c += v / n as f64;
            }
        }

        for j in 0..n {
            trial[j] = centroid[j] + alpha * (centroid[j] - simplex[worst][j]);
        }
        project(&mut trial, lower);
        let f_r = eval(&trial, &mut evals);

        if f_r < values[best] {
            for j in 0..n {
                trial2[j] = centroid[j] + gamma * (trial[j] - centroid[j]);
            }
            project(&mut trial2, lower);
            let f_e = eval(&trial2, &mut evals);
            if f_e < f_r {
                simplex[worst].copy_from_slice(&trial2);
                values[worst] = f_e;
            } else {
                simplex[worst].copy_from_slice(&trial);
                values[worst] = f_r;
            }
            continue;
        }
        if f_r < values[second_worst] {
            simplex[worst].copy_from_slice(&trial);
            values[worst] = f_r;
            continue;
        }
        // contraction, outside if the reflection improved on the worst vertex
        let outside = f_r < values[worst];
        for j in 0..n {
            trial2[j] = if outside {
                centroid[j] + rho * (trial[j] - centroid[j])
            } else {
                centroid[j] + rho * (simplex[worst][j] - centroid[j])
            };
        }
        project(&mut trial2, lower);
        let f_c = eval(&trial2, &mut evals);
        if f_c < values[worst].min(f_r) {
            simplex[worst].copy_from_slice(&trial2);
            values[worst] = f_c;
            continue;
        }
        // shrink toward the best vertex
        let best_x = simplex[best].clone();
        for &idx in &order[1..] {
            for j in 0..n {
                simplex[idx][j] = best_x[j] + sigma * (simplex[idx][j] - best_x[j]);
            }
            project(&mut simplex[idx], lower);
            values[idx] = eval(&simplex[idx], &mut evals);
        }
    }

    let best = (0..=n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap();
    NelderMeadResult {
        x: simplex[best].clone(),
        f: values[best],
        evals,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_unconstrained() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = minimize_bounded(
            f,
            &[-1.2, 1.0],
            &[f64::NEG_INFINITY; 2],
            &NelderMeadOptions {
                f_tol: 1e-12,
                x_tol: 1e-8,
                ..Default::default()
            },
        );
        assert!(r.converged);
        assert!(
            (r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5,
            "{r:?}"
        );
    }

    #[test]
    fn active_bound() {
        let f = |x: &[f64]| (x[0] + 1.0).powi(2) + (x[1] - 2.0).powi(2);
        let r = minimize_bounded(
            f,
            &[1.0, 1.0],
            &[0.0, f64::NEG_INFINITY],
            &Default::default(),
        );
        assert!(r.converged);
        assert!(r.x[0].abs() < 1e-6);
        assert!((r.x[1] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn eval_budget_respected() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let r = minimize_bounded(
            f,
            &[5.0; 6],
            &[f64::NEG_INFINITY; 6],
            &NelderMeadOptions {
                max_evals: 20,
                ..Default::default()
            },
        );
        assert!(!r.converged);
        assert!(r.evals <= 20 + 6 + 2);
    }

    #[test]
    fn nan_is_worst() {
        let f = |x: &[f64]| {
            if x[0] > 3.0 {
                f64::NAN
            } else {
                (x[0] - 2.0).powi(2)
            }
        };
        let r = minimize_bounded(f, &[0.0], &[f64::NEG_INFINITY], &Default::default());
        assert!((r.x[0] - 2.0).abs() < 1e-5);
    }
}
