use lmmpower::power::{
    power_curve, residual_sweep, FailureMode, PowerGridRequest, SlopeSdOverride,
};
use lmmpower::scenarios;

#[test]
fn thread_count_does_not_change_counts() {
    let mut req = PowerGridRequest::new(scenarios::online_phonological(), 99);
    req.participants = vec![12, 24];
    req.items = vec![20, 40];
    req.n_sim = 60;
    let one = power_curve(&req, 1, None).unwrap();
    let four = power_curve(&req, 4, None).unwrap();
    assert_eq!(one, four);
}

#[test]
fn near_noiseless_sweep_is_certain() {
    let mut req = PowerGridRequest::new(scenarios::online_phonological(), 3);
    req.participants = vec![45];
    req.items = vec![90];
    req.n_sim = 50;
    req.residual_sds = Some(vec![1.0]);
    // the random slopes still add noise; remove them to isolate the residual
    let mut base = req.base.clone();
    base.by_participant.sds = vec![0.0, 0.0];
    base.by_item.sds = vec![0.0, 0.0];
    req.base = base;
    let r = residual_sweep(&req, 0, None).unwrap();
    assert_eq!(r.cells[0].cell.power, 1.0);
}

#[test]
fn power_grows_with_participants() {
    let mut req = PowerGridRequest::new(scenarios::lab_phonological(), 8);
    req.participants = vec![12, 36, 60];
    req.items = vec![40];
    req.n_sim = 300;
    let r = power_curve(&req, 0, None).unwrap();
    for w in r.cells.windows(2) {
        assert!(w[1].power + 2.0 * w[1].mc_se.max(w[0].mc_se) >= w[0].power);
    }
}

#[test]
fn items_limit_power_without_participant_slopes() {
    // With no by-participant slope variance, Var(β̂) → σ²_item_slope / n_items
    // as participants grow. online_semantic is left out: its residual term
    // 2σ²/(n_p·n_i) is still large at 48 × 20, worth about 0.13 in power.
    for (k, base) in [
        scenarios::lab_semantic(),
        scenarios::lab_phonological(),
        scenarios::online_phonological(),
    ]
    .into_iter()
    .enumerate()
    {
        let mut req = PowerGridRequest::new(base, 12 + k as u64);
        req.participants = vec![48, 96];
        req.items = vec![20];
        req.n_sim = 2000;
        req.slope_sd_override = Some(SlopeSdOverride {
            participant_slope_sd: 0.0,
        });
        let r = power_curve(&req, 0, None).unwrap();
        assert!(r.cells[1].power - r.cells[0].power < 0.10, "{:?}", r.cells);
    }
}

#[test]
fn failure_modes_share_counts() {
    let mut req = PowerGridRequest::new(scenarios::lab_semantic(), 4);
    req.participants = vec![12];
    req.items = vec![20];
    req.n_sim = 40;
    let a = power_curve(&req, 0, None).unwrap();
    req.failures = FailureMode::Nonsig;
    let b = power_curve(&req, 0, None).unwrap();
    assert_eq!(a.cells[0].n_significant, b.cells[0].n_significant);
    assert_eq!(a.cells[0].n_converged, b.cells[0].n_converged);
    assert!(b.cells[0].power <= a.cells[0].power);
}
