mod common;

use common::ols;
use lmmpower::lmm::{build_design, fit_lmm, parametric_bootstrap, FitOptions, ModelSpec};
use lmmpower::simulate::simulate_trials;
use lmmpower::stats::sample_sd;
use lmmpower::variability::{descriptive_slope_sd, location_scale_fit, split_half};
use lmmpower::{
    scenarios, ContrastCoding, Criterion, Factor, FitStatus, FixedEffects, RandomStructure,
    Scenario, Trial, TrialTable,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn scenario(
    participant: RandomStructure,
    item: RandomStructure,
    residual: f64,
    np: usize,
    ni: usize,
) -> Scenario {
    Scenario {
        fixed: FixedEffects::new(&[("intercept", 900.0), ("relatedness", 30.0)]),
        by_participant: participant,
        by_item: item,
        residual_sd: residual,
        contrasts: ContrastCoding::default(),
        n_participants: np,
        n_items: ni,
        obs_per_cell: 1,
    }
}

#[test]
fn zero_random_sds_reduce_to_ols() {
    let s = scenario(
        RandomStructure::intercept_slope("participant", 0.0, 0.0, 0.0),
        RandomStructure::intercept_slope("item", 0.0, 0.0, 0.0),
        50.0,
        20,
        20,
    );
    for seed in 0..10 {
        let table = simulate_trials(&s, seed).unwrap();
        let spec = ModelSpec::maximal(Criterion::Reml);
        let fit = fit_lmm(
            &table,
            &spec,
            &ContrastCoding::default(),
            &FitOptions::default(),
        )
        .unwrap();
        let d = build_design(&table, &spec, &ContrastCoding::default()).unwrap();
        let (beta, _) = ols(&d.x, &d.y);
        assert!((fit.estimates["intercept"] - beta[0]).abs() < 1e-3);
        assert!((fit.estimates["relatedness"] - beta[1]).abs() < 1e-3);
        // sampling noise alone gives sds of a few ms at this size (an item
        // mean of 40 trials has SE 50/√40 ≈ 7.9), so bound them by noise level
        for sd in fit
            .varcomp
            .by_participant
            .sds
            .iter()
            .chain(&fit.varcomp.by_item.sds)
        {
            assert!(*sd < 20.0, "seed {seed}: fitted sd {sd}");
        }
        assert_eq!(fit.status, FitStatus::ConvergedSingular, "seed {seed}");
    }
}

#[test]
fn split_half_attenuation() {
    // half-means of 225 trials: error variance 200²/225 on top of the 100² signal
    let s = scenario(
        RandomStructure::uncorrelated("participant", &["intercept", "relatedness"], &[100.0, 0.0]),
        RandomStructure::uncorrelated("item", &["intercept", "relatedness"], &[0.0, 0.0]),
        200.0,
        500,
        225,
    );
    let expected = 100.0f64.powi(2) / (100.0f64.powi(2) + 200.0f64.powi(2) / 225.0);
    let r = split_half(&simulate_trials(&s, 4).unwrap()).unwrap();
    assert!((r.r - expected).abs() < 0.01, "{} vs {expected}", r.r);
    assert!(r.ci_low <= r.r && r.r <= r.ci_high);
}

#[test]
fn descriptive_slope_sd_is_residual_noise() {
    // item effects are shared by every participant and cancel; only the
    // difference of two 90-trial residual means remains
    let base = scenarios::lab_semantic();
    let s = Scenario {
        residual_sd: 264.69,
        n_participants: 2000,
        n_items: 90,
        ..base
    }
    .with_random_sd(Factor::Participant, "relatedness", 0.0)
    .unwrap()
    .with_random_sd(Factor::Item, "relatedness", 0.0)
    .unwrap();
    let expected = 264.69 * (2.0f64 / 90.0).sqrt();
    let got = descriptive_slope_sd(&simulate_trials(&s, 5).unwrap()).unwrap();
    assert!(
        (got.sd / expected - 1.0).abs() < 0.05,
        "{} vs {expected}",
        got.sd
    );
}

#[test]
fn participant_mean_sd_ignores_item_variance() {
    // every participant sees the same items, so item intercepts shift all
    // participant means equally
    let s = Scenario {
        fixed: FixedEffects::new(&[("intercept", 900.0), ("relatedness", 0.0)]),
        ..scenario(
            RandomStructure::uncorrelated(
                "participant",
                &["intercept", "relatedness"],
                &[120.0, 0.0],
            ),
            RandomStructure::uncorrelated("item", &["intercept", "relatedness"], &[80.0, 0.0]),
            250.0,
            2000,
            40,
        )
    };
    let table = simulate_trials(&s, 6).unwrap();
    let mut sums = std::collections::BTreeMap::<String, (f64, usize)>::new();
    for r in &table.rows {
        let e = sums.entry(r.participant_id.clone()).or_default();
        e.0 += r.rt_ms;
        e.1 += 1;
    }
    let means: Vec<f64> = sums.values().map(|(s, n)| s / *n as f64).collect();
    let expected = (120.0f64.powi(2) + 250.0f64.powi(2) / 80.0).sqrt();
    assert!((sample_sd(&means) / expected - 1.0).abs() < 0.05);
}

#[test]
fn location_scale_recovers_normal_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let table = |mean: f64, sd: f64, rng: &mut ChaCha8Rng, tag: &str| {
        let d = Normal::new(mean, sd).unwrap();
        TrialTable::new(
            (0..15_000)
                .map(|k| Trial {
                    participant_id: format!("{tag}{}", k / 100),
                    item_id: format!("i{}", k % 100),
                    condition: lmmpower::Condition::Related,
                    setting: None,
                    trial_index: None,
                    replicate: None,
                    rt_ms: d.sample(rng),
                    correct: None,
                })
                .collect(),
        )
    };
    let a = table(900.0, 230.0, &mut rng, "a");
    let b = table(1180.0, 276.0, &mut rng, "b");
    let r = location_scale_fit(&a, &b, 400, 3).unwrap();
    assert!((r.mean_diff - 280.0).abs() < 9.0);
    assert!((r.sd_diff - 46.0).abs() < 6.0);
    assert!(r.mean_ci.0 < r.mean_diff && r.mean_diff < r.mean_ci.1);
    let same = location_scale_fit(&a, &a, 200, 3).unwrap();
    assert_eq!((same.mean_diff, same.sd_diff), (0.0, 0.0));
    assert!(same.mean_ci.0 <= 0.0 && 0.0 <= same.mean_ci.1);
}

#[test]
fn condition_difference_tracks_relatedness() {
    // analytic sd of the difference at 45×90 is about 10 ms per dataset
    let s = scenarios::lab_phonological();
    let diffs: Vec<f64> = (0..50)
        .map(|seed| {
            let t = simulate_trials(&s, 1000 + seed).unwrap();
            let pick = |c| {
                let v: Vec<f64> = t
                    .rows
                    .iter()
                    .filter(|r| r.condition == c)
                    .map(|r| r.rt_ms)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            pick(lmmpower::Condition::Related) - pick(lmmpower::Condition::Unrelated)
        })
        .collect();
    let avg = diffs.iter().sum::<f64>() / diffs.len() as f64;
    assert!((avg - 30.85).abs() < 6.0, "{avg}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    lmmpower::stats::median(&v)
}

#[test]
fn recovery_of_bundled_scenario() {
    let s = scenarios::lab_phonological();
    let spec = ModelSpec::maximal(Criterion::Reml);
    let fits: Vec<_> = (0..20)
        .map(|seed| {
            fit_lmm(
                &simulate_trials(&s, 100 + seed).unwrap(),
                &spec,
                &s.contrasts,
                &FitOptions::default(),
            )
            .unwrap()
        })
        .collect();
    let est = median(fits.iter().map(|f| f.estimates["relatedness"]).collect());
    let resid = median(fits.iter().map(|f| f.varcomp.residual_sd).collect());
    // reported interval 11.94–49.76
    let se = (49.76 - 11.94) / 2.0 / 1.96;
    assert!((est - 30.85).abs() <= 2.0 * se, "{est}");
    assert!((resid / 223.56 - 1.0).abs() <= 0.03, "{resid}");
}

#[test]
fn parametric_bootstrap_is_self_consistent() {
    // refits of data drawn from a fit should center on that fit's values
    let s = scenarios::online_semantic().with_sizes(30, 40);
    let spec = ModelSpec::maximal(Criterion::Reml);
    let table = simulate_trials(&s, 9).unwrap();
    let design = build_design(&table, &spec, &s.contrasts).unwrap();
    let fit = lmmpower::lmm::fit_design(&design, &spec, &FitOptions::default()).unwrap();
    let n_boot = 200;
    let boot = parametric_bootstrap(&design, &spec, &fit, n_boot, 0.95, 21).unwrap();
    assert!(boot.n_used >= 190);
    // centre of the bootstrap interval vs generating value, in units of the fit's SE
    for term in ["intercept", "relatedness"] {
        let ci = &boot.intervals[term];
        let mid = 0.5 * (ci.low + ci.high);
        let se = fit.std_errors[term];
        assert!(
            (mid - fit.estimates[term]).abs() < 0.5 * se,
            "{term}: {mid} vs {}",
            fit.estimates[term]
        );
        assert!(ci.low < fit.estimates[term] && fit.estimates[term] < ci.high);
        // interval width should reflect ≈ 2·1.96 Wald SEs
        let ratio = (ci.high - ci.low) / (2.0 * 1.96 * se);
        assert!((0.75..1.3).contains(&ratio), "{term}: width ratio {ratio}");
    }
    let resid = &boot.intervals["residual"];
    assert!(resid.low < fit.varcomp.residual_sd && fit.varcomp.residual_sd < resid.high);
}
