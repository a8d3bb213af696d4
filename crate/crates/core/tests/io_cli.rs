use std::path::Path;
use std::process::Command;

use lmmpower::io::{self, ColumnMap, Payload, Report, ReportFormat};
use lmmpower::power::PowerReport;
use lmmpower::simulate::simulate_trials;
use lmmpower::{scenarios, PowerCell};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lmmpower"))
}

#[test]
fn simulated_table_round_trips_through_csv() {
    let s = scenarios::online_semantic().with_sizes(12, 20);
    let table = simulate_trials(&s, 42).unwrap();
    assert!(
        table.rows.iter().all(|r| r.rt_ms > 0.0),
        "pick a seed without negative draws"
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    io::write_trials(&table, &path).unwrap();
    let back = io::load_trials(&path, &ColumnMap::default()).unwrap();
    assert_eq!(back, table);
    // byte-identical re-serialization
    assert_eq!(
        io::trials_to_csv(&back),
        std::fs::read_to_string(&path).unwrap()
    );
}

fn grid_report(n: usize) -> Report {
    let cells = (0..n)
        .map(|k| {
            PowerCell::from_counts(
                12 * (k / 3 + 1),
                [20, 40, 90][k % 3],
                500,
                497,
                (k * 37) % 497,
                false,
            )
        })
        .collect();
    Report::new(
        "power",
        Some(7),
        serde_json::json!({ "grid": "default" }),
        Payload::Power(PowerReport {
            cells,
            warnings: vec![],
        }),
    )
}

#[test]
fn report_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut report = grid_report(24);
    report.timing.elapsed_ms = 1234.5678901234567;
    report
        .input_digests
        .insert("x".into(), io::digest_bytes(b"abc"));
    let written = io::write_report(
        &report,
        &[ReportFormat::Json, ReportFormat::Csv],
        &dir.path().join("r"),
    )
    .unwrap();
    assert_eq!(written.len(), 2);
    let back = io::read_report(&written[0]).unwrap();
    assert_eq!(back, report);
    let csv = std::fs::read_to_string(&written[1]).unwrap();
    assert_eq!(csv.lines().count(), 25);
    // full-precision floats
    for line in csv.lines().skip(1) {
        let power: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
        assert!(report_cells(&report).iter().any(|c| c.power == power));
    }
    assert_eq!(
        report.input_digests["x"],
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    );
}

fn report_cells(r: &Report) -> Vec<PowerCell> {
    match &r.results {
        Payload::Power(p) => p.cells.clone(),
        _ => unreachable!(),
    }
}

#[test]
fn write_failure_names_the_path() {
    let err = io::write_report(
        &grid_report(1),
        &[ReportFormat::Json],
        Path::new("/nonexistent-dir/r"),
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("/nonexistent-dir/r.json"));
}

#[test]
fn cli_power_writes_reproducible_report() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("pw");
    let run = |threads: &str| {
        let out = bin()
            .args([
                "--seed",
                "5",
                "--nsim",
                "20",
                "--threads",
                threads,
                "--quiet",
                "power",
                "--scenario",
            ])
            .args([
                "lab_phonological",
                "--participants",
                "12,24",
                "--items",
                "20",
            ])
            .arg("--out")
            .arg(&stem)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
        assert!(
            stderr.contains("reproduce: lmmpower --seed 5 --nsim 20"),
            "{stderr}"
        );
        io::read_report(&stem.with_extension("json")).unwrap()
    };
    let a = run("1");
    let b = run("3");
    assert_eq!(report_cells(&a), report_cells(&b));
    assert_eq!(a.version, env!("CARGO_PKG_VERSION"));
    assert!(a.input_digests.contains_key("bundled:lab_phonological"));
    let csv = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
    assert!(csv.starts_with("n_participants,n_items,n_sim,n_converged,power,mc_se\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // validation: correlation out of bounds
    let bad = dir.path().join("bad.json");
    let mut v: serde_json::Value =
        serde_json::from_str(scenarios::source("lab_semantic").unwrap()).unwrap();
    v["by_participant"]["corr"] = serde_json::json!([[1.0, 1.2], [1.2, 1.0]]);
    std::fs::write(&bad, v.to_string()).unwrap();
    let out = bin()
        .args(["simulate", "--scenario"])
        .arg(&bad)
        .arg("--trials")
        .arg(dir.path().join("t.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("correlation bounds"));

    // I/O: missing data file
    let out = bin()
        .args(["fit", "--data", "/nonexistent/x.csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // numerical: perfect split-half correlations cannot be compared
    let csv = dir.path().join("perfect.csv");
    let mut text = String::from("participant_id,item_id,condition,trial_index,rt_ms\n");
    for p in 0..5 {
        for k in 1..=4 {
            text.push_str(&format!("p{p},i{k},related,{k},{}\n", 600 + 50 * p));
        }
    }
    std::fs::write(&csv, text).unwrap();
    let out = bin()
        .args(["reliability", "--data"])
        .arg(&csv)
        .arg("--data")
        .arg(&csv)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn cli_simulate_then_fit_and_analyses() {
    let dir = tempfile::tempdir().unwrap();
    let trials = dir.path().join("sim.csv");
    let st = bin()
        .args([
            "--seed",
            "3",
            "--quiet",
            "simulate",
            "--scenario",
            "lab_semantic",
            "--participants",
            "12",
            "--items",
            "16",
            "--trials",
        ])
        .arg(&trials)
        .output()
        .unwrap();
    assert!(st.status.success());
    let report: Report = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(report.command, "simulate");

    let stem = dir.path().join("fit");
    let st = bin()
        .args(["--quiet", "fit", "--nboot", "20", "--data"])
        .arg(&trials)
        .arg("--out")
        .arg(&stem)
        .output()
        .unwrap();
    assert!(
        st.status.success(),
        "{}",
        String::from_utf8_lossy(&st.stderr)
    );
    let csv = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
    assert!(csv.starts_with("term,estimate,std_error,t_value,ci_low,ci_high\n"));
    assert!(csv.contains("\nrelatedness,"));

    for args in [vec!["varcomp", "--data"], vec!["reliability", "--data"]] {
        let st = bin()
            .args(["--quiet"])
            .args(&args)
            .arg(&trials)
            .output()
            .unwrap();
        assert!(
            st.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&st.stderr)
        );
    }
    let st = bin()
        .args(["--quiet", "compare", "--nboot", "200", "--a"])
        .arg(&trials)
        .arg("--b")
        .arg(&trials)
        .output()
        .unwrap();
    assert!(
        st.status.success(),
        "{}",
        String::from_utf8_lossy(&st.stderr)
    );
    let r: Report = serde_json::from_slice(&st.stdout).unwrap();
    match r.results {
        Payload::Compare(c) => {
            assert_eq!(c.location_scale.mean_diff, 0.0);
            let fit = c.interaction.unwrap();
            assert!(fit.estimates["setting:relatedness"].abs() < 1e-6);
        }
        _ => panic!("wrong payload"),
    }

    let st = bin()
        .args(["varcomp", "--f-test", "1.2922847,45,1,45"])
        .output()
        .unwrap();
    let r: Report = serde_json::from_slice(&st.stdout).unwrap();
    let Payload::Varcomp(v) = r.results else {
        panic!()
    };
    assert!((v.f_tests[0].result.p - 0.05).abs() < 0.015);
}
