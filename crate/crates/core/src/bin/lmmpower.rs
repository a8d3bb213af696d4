use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lmmpower::io::{
    self, ColumnMap, ComparePayload, FitPayload, NamedReliability, NamedSlopeSd,
    NamedVarianceRatio, Payload, ReliabilityPayload, Report, ReportFormat, ScenarioMode,
    SimulatePayload, VarcompPayload,
};
use lmmpower::lmm::{self, build_design, fit_design, parametric_bootstrap, FitOptions, ModelSpec};
use lmmpower::power::{self, FailureMode, PowerGridRequest, SlopeSdOverride};
use lmmpower::simulate::simulate_trials;
use lmmpower::variability;
use lmmpower::{scenarios, Criterion, Error, FitResult, Result, Scenario, Setting, TrialTable};

#[derive(Parser, Debug)]
#[command(
    name = "lmmpower",
    version,
    about = "Power analysis and variability diagnostics for crossed RT designs"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Master seed for every random draw.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Simulated datasets per design cell.
    #[arg(long, global = true, default_value_t = power::DEFAULT_NSIM)]
    nsim: usize,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// |t| at or above which an effect counts as significant.
    #[arg(long, global = true, default_value_t = lmm::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, global = true, value_enum, default_value_t = CriterionArg::Reml)]
    criterion: CriterionArg,
    /// How failed fits enter the power denominator.
    #[arg(long, global = true, value_enum, default_value_t = FailuresArg::Exclude)]
    failures: FailuresArg,
    /// Report path stem; `<stem>.json` / `<stem>.csv` are written. Without it the JSON goes to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report formats written next to --out.
    #[arg(long, global = true, value_enum, value_delimiter = ',', default_values_t = [FormatArg::Json, FormatArg::Csv])]
    format: Vec<FormatArg>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum CriterionArg {
    Reml,
    Ml,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum FailuresArg {
    Exclude,
    Nonsig,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum ModelArg {
    /// Intercept + relatedness, correlated random intercepts and slopes.
    Maximal,
    /// Random intercepts only.
    Intercepts,
    /// Setting × relatedness on a table pooling both settings.
    Interaction,
}

#[derive(Args, Debug, Clone)]
struct ScenarioArgs {
    /// Bundled scenario name or path to a scenario JSON file.
    #[arg(long)]
    scenario: String,
    /// Drop unknown scenario keys with a warning instead of failing.
    #[arg(long)]
    lax: bool,
    /// Zero every random-effect correlation.
    #[arg(long)]
    no_correlations: bool,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Column remapping, `canonical=header` (repeatable).
    #[arg(long = "col")]
    cols: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a trial table from a scenario.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        participants: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        /// Destination CSV for the simulated trials.
        #[arg(long)]
        trials: PathBuf,
    },
    /// Fit a mixed model to a trial table, with parametric-bootstrap intervals.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cols: DataArgs,
        #[arg(long, value_enum, default_value_t = ModelArg::Maximal)]
        model: ModelArg,
        /// Bootstrap draws (0 disables intervals).
        #[arg(long, default_value_t = 500)]
        nboot: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Monte Carlo power over a participants × items grid.
    Power {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_delimiter = ',')]
        participants: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        items: Option<Vec<usize>>,
        /// Replace the by-participant relatedness slope sd.
        #[arg(long)]
        slope_sd: Option<f64>,
    },
    /// Power as a function of residual sd at one design point.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        participants: usize,
        #[arg(long)]
        items: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [100.0, 150.0, 200.0, 250.0, 300.0])]
        residual_sds: Vec<f64>,
        #[arg(long)]
        slope_sd: Option<f64>,
    },
    /// Odd/even split-half reliability; two datasets are also compared.
    Reliability {
        #[arg(long = "data", required = true, num_args = 1..=2)]
        data: Vec<PathBuf>,
        #[command(flatten)]
        cols: DataArgs,
    },
    /// Per-participant effect sds and variance-ratio F-tests.
    Varcomp {
        #[arg(long = "data", num_args = 1..=2)]
        data: Vec<PathBuf>,
        #[command(flatten)]
        cols: DataArgs,
        /// Summary-statistic F-test instead of data: sd_a,n_a,sd_b,n_b.
        #[arg(long, value_delimiter = ',')]
        f_test: Option<Vec<f64>>,
    },
    /// Two-group location-scale comparison and setting × relatedness fit.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[command(flatten)]
        cols: DataArgs,
        #[arg(long, default_value_t = 1000)]
        nboot: usize,
        /// Skip the pooled interaction fit.
        #[arg(long)]
        no_interaction: bool,
    },
}

impl Global {
    fn criterion(&self) -> Criterion {
        match self.criterion {
            CriterionArg::Reml => Criterion::Reml,
            CriterionArg::Ml => Criterion::Ml,
        }
    }

    fn failures(&self) -> FailureMode {
        match self.failures {
            FailuresArg::Exclude => FailureMode::Exclude,
            FailuresArg::Nonsig => FailureMode::Nonsig,
        }
    }

    fn echo(&self) -> serde_json::Value {
        json!({
            "seed": self.seed,
            "nsim": self.nsim,
            "threads": self.threads,
            "threshold": self.threshold,
            "criterion": self.criterion().to_string(),
            "failures": format!("{:?}", self.failures).to_lowercase(),
        })
    }
}

const GLOBAL_VALUED: [&str; 8] = [
    "--seed",
    "--nsim",
    "--threads",
    "--threshold",
    "--criterion",
    "--failures",
    "--out",
    "--format",
];

/// Command line with every reproducibility-relevant global made explicit.
fn reproduction_line(raw: &[OsString], g: &Global) -> String {
    let mut rest = Vec::new();
    let mut skip = false;
    for a in raw.iter().skip(1) {
        let a = a.to_string_lossy().into_owned();
        if skip {
            skip = false;
            continue;
        }
        if GLOBAL_VALUED.contains(&a.as_str()) {
            skip = true;
            continue;
        }
        if GLOBAL_VALUED
            .iter()
            .any(|f| a.starts_with(&format!("{f}=")))
        {
            continue;
        }
        rest.push(if a.contains(' ') { format!("'{a}'") } else { a });
    }
    let crit = format!("{:?}", g.criterion).to_lowercase();
    let fail = format!("{:?}", g.failures).to_lowercase();
    let mut line = format!(
        "lmmpower --seed {} --nsim {} --threshold {} --criterion {crit} --failures {fail}",
        g.seed, g.nsim, g.threshold
    );
    if let Some(o) = &g.out {
        line.push_str(&format!(" --out {}", o.display()));
    }
    for a in rest {
        line.push(' ');
        line.push_str(&a);
    }
    line
}

fn load_scenario_arg(
    args: &ScenarioArgs,
    report_digests: &mut Vec<(String, String)>,
) -> Result<Scenario> {
    let mode = if args.lax {
        ScenarioMode::Lax
    } else {
        ScenarioMode::Strict
    };
    let scenario = if let Some(src) = scenarios::source(&args.scenario) {
        report_digests.push((
            format!("bundled:{}", args.scenario),
            io::digest_bytes(src.as_bytes()),
        ));
        io::parse_scenario(src, mode)?.0
    } else {
        let path = Path::new(&args.scenario);
        let (s, warnings) = io::load_scenario_with(path, mode)?;
        for w in warnings {
            eprintln!("warning: {w}");
        }
        report_digests.push((path.display().to_string(), io::digest_file(path)?));
        s
    };
    Ok(if args.no_correlations {
        scenario.without_correlations()
    } else {
        scenario
    })
}

fn load_data(
    path: &Path,
    cols: &DataArgs,
    digests: &mut Vec<(String, String)>,
) -> Result<TrialTable> {
    let map = ColumnMap::from_pairs(&cols.cols)?;
    let table = io::load_trials(path, &map)?;
    digests.push((path.display().to_string(), io::digest_file(path)?));
    Ok(table)
}

fn label_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn progress_printer(quiet: bool) -> impl Fn(usize, usize) + Sync {
    let step = std::sync::atomic::AtomicUsize::new(0);
    move |done, total| {
        if quiet {
            return;
        }
        let pct = done * 100 / total.max(1);
        if pct >= step.load(std::sync::atomic::Ordering::Relaxed) + 10 || done == total {
            step.store(pct, std::sync::atomic::Ordering::Relaxed);
            eprintln!("progress: {done}/{total} fits ({pct}%)");
        }
    }
}

fn fit_table(fit: &FitResult, boot: Option<&lmm::BootstrapSummary>) -> String {
    let mut out = format!(
        "{:<34} {:>12} {:>10} {:>8} {:>12} {:>12}\n",
        "term", "estimate", "se", "t", "ci_low", "ci_high"
    );
    for (name, value) in lmm::fit_parameters(fit) {
        let se = fit.std_errors.get(&name);
        let t = fit.t_values.get(&name);
        let ci = boot.and_then(|b| b.intervals.get(&name));
        let cell =
            |v: Option<f64>, prec: usize| v.map(|x| format!("{x:.prec$}")).unwrap_or_default();
        out.push_str(&format!(
            "{:<34} {:>12.2} {:>10} {:>8} {:>12} {:>12}\n",
            name,
            value,
            cell(se.copied(), 2),
            cell(t.copied(), 2),
            cell(ci.map(|c| c.low), 2),
            cell(ci.map(|c| c.high), 2),
        ));
    }
    out.push_str(&format!(
        "criterion {}  deviance {:.4}  status {:?}  n_obs {}\n",
        fit.criterion, fit.deviance, fit.status, fit.n_obs
    ));
    out
}

/// Tags each table with a setting (kept when present) and keeps participant
/// ids distinct between the two groups.
fn pool_for_interaction(a: &TrialTable, b: &TrialTable) -> TrialTable {
    let mut rows = Vec::with_capacity(a.len() + b.len());
    for (tag, table, setting) in [("a", a, Setting::Lab), ("b", b, Setting::Online)] {
        for r in &table.rows {
            let mut r = r.clone();
            r.participant_id = format!("{tag}:{}", r.participant_id);
            r.setting = Some(r.setting.unwrap_or(setting));
            rows.push(r);
        }
    }
    TrialTable::new(rows)
}

fn run(cli: &Cli) -> Result<Report> {
    let g = &cli.global;
    let mut digests = Vec::new();
    let crit = g.criterion();
    let (name, request, payload) = match &cli.command {
        Command::Simulate {
            scenario,
            participants,
            items,
            trials,
        } => {
            let mut s = load_scenario_arg(scenario, &mut digests)?;
            s = s.with_sizes(
                participants.unwrap_or(s.n_participants),
                items.unwrap_or(s.n_items),
            );
            let table = simulate_trials(&s, g.seed)?;
            io::write_trials(&table, trials)?;
            let payload = Payload::Simulate(SimulatePayload {
                n_rows: table.len(),
                trials_path: trials.display().to_string(),
                trials_sha256: io::digest_file(trials)?,
            });
            ("simulate", json!({ "scenario": s }), payload)
        }
        Command::Fit {
            data,
            cols,
            model,
            nboot,
            level,
        } => {
            let table = load_data(data, cols, &mut digests)?;
            let spec = match model {
                ModelArg::Maximal => ModelSpec::maximal(crit),
                ModelArg::Intercepts => ModelSpec::intercepts_only(crit),
                ModelArg::Interaction => ModelSpec::setting_interaction(crit),
            };
            let contrasts = Default::default();
            let design = build_design(&table, &spec, &contrasts)?;
            let fit = fit_design(&design, &spec, &FitOptions::default())?;
            let boot = if *nboot > 0 {
                let pool = worker_pool(g.threads)?;
                Some(pool.install(|| {
                    parametric_bootstrap(&design, &spec, &fit, *nboot, *level, g.seed)
                })?)
            } else {
                None
            };
            if !g.quiet {
                eprint!("{}", fit_table(&fit, boot.as_ref()));
            }
            (
                "fit",
                json!({ "data": data.display().to_string(), "model": spec, "nboot": nboot, "level": level }),
                Payload::Fit(FitPayload {
                    fit,
                    bootstrap: boot,
                }),
            )
        }
        Command::Power {
            scenario,
            participants,
            items,
            slope_sd,
        } => {
            let base = load_scenario_arg(scenario, &mut digests)?;
            let mut req = grid_request(base, g);
            if let Some(p) = participants {
                req.participants = p.clone();
            }
            if let Some(i) = items {
                req.items = i.clone();
            }
            req.slope_sd_override = slope_sd.map(|sd| SlopeSdOverride {
                participant_slope_sd: sd,
            });
            let progress = progress_printer(g.quiet);
            let report = power::power_curve(&req, g.threads, Some(&progress))?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            (
                "power",
                serde_json::to_value(&req).expect("request serializes"),
                Payload::Power(report),
            )
        }
        Command::Sweep {
            scenario,
            participants,
            items,
            residual_sds,
            slope_sd,
        } => {
            let base = load_scenario_arg(scenario, &mut digests)?;
            let mut req = grid_request(base, g);
            req.participants = vec![*participants];
            req.items = vec![*items];
            req.residual_sds = Some(residual_sds.clone());
            req.slope_sd_override = slope_sd.map(|sd| SlopeSdOverride {
                participant_slope_sd: sd,
            });
            let progress = progress_printer(g.quiet);
            let report = power::residual_sweep(&req, g.threads, Some(&progress))?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            (
                "sweep",
                serde_json::to_value(&req).expect("request serializes"),
                Payload::Sweep(report),
            )
        }
        Command::Reliability { data, cols } => {
            let mut datasets = Vec::new();
            for path in data {
                let table = load_data(path, cols, &mut digests)?;
                datasets.push(NamedReliability {
                    dataset: label_of(path),
                    result: variability::split_half(&table)?,
                });
            }
            let comparison = match datasets.as_slice() {
                [a, b] => Some(variability::compare_correlations(
                    a.result.r,
                    a.result.per_participant.len(),
                    b.result.r,
                    b.result.per_participant.len(),
                )?),
                _ => None,
            };
            let files: Vec<String> = data.iter().map(|p| p.display().to_string()).collect();
            (
                "reliability",
                json!({ "data": files }),
                Payload::Reliability(ReliabilityPayload {
                    datasets,
                    comparison,
                }),
            )
        }
        Command::Varcomp { data, cols, f_test } => {
            if data.is_empty() && f_test.is_none() {
                return Err(Error::validation("varcomp needs --data or --f-test"));
            }
            let mut slope_sds = Vec::new();
            for path in data {
                let table = load_data(path, cols, &mut digests)?;
                slope_sds.push(NamedSlopeSd {
                    dataset: label_of(path),
                    result: variability::descriptive_slope_sd(&table)?,
                });
            }
            let mut f_tests = Vec::new();
            if let [a, b] = slope_sds.as_slice() {
                f_tests.push(NamedVarianceRatio {
                    label: format!("{}/{}", a.dataset, b.dataset),
                    result: variability::variance_ratio_test(
                        a.result.sd,
                        a.result.per_participant.len(),
                        b.result.sd,
                        b.result.per_participant.len(),
                    )?,
                });
            }
            if let Some(v) = f_test {
                if v.len() != 4 {
                    return Err(Error::validation("--f-test takes sd_a,n_a,sd_b,n_b"));
                }
                let n = |x: f64| -> Result<usize> {
                    if x >= 0.0 && x.fract() == 0.0 {
                        Ok(x as usize)
                    } else {
                        Err(Error::validation(format!(
                            "group size {x} is not a whole number"
                        )))
                    }
                };
                f_tests.push(NamedVarianceRatio {
                    label: "summary".to_string(),
                    result: variability::variance_ratio_test(v[0], n(v[1])?, v[2], n(v[3])?)?,
                });
            }
            let files: Vec<String> = data.iter().map(|p| p.display().to_string()).collect();
            (
                "varcomp",
                json!({ "data": files, "f_test": f_test }),
                Payload::Varcomp(VarcompPayload { slope_sds, f_tests }),
            )
        }
        Command::Compare {
            a,
            b,
            cols,
            nboot,
            no_interaction,
        } => {
            let ta = load_data(a, cols, &mut digests)?;
            let tb = load_data(b, cols, &mut digests)?;
            let pool = worker_pool(g.threads)?;
            let location_scale =
                pool.install(|| variability::location_scale_fit(&ta, &tb, *nboot, g.seed))?;
            let interaction = if *no_interaction {
                None
            } else {
                let pooled = pool_for_interaction(&ta, &tb);
                let spec = ModelSpec::setting_interaction(crit);
                Some(lmm::fit_lmm(
                    &pooled,
                    &spec,
                    &Default::default(),
                    &FitOptions::default(),
                )?)
            };
            (
                "compare",
                json!({ "a": a.display().to_string(), "b": b.display().to_string(), "nboot": nboot }),
                Payload::Compare(ComparePayload {
                    location_scale,
                    interaction,
                }),
            )
        }
    };
    let mut request = request;
    if let Some(obj) = request.as_object_mut() {
        obj.insert("options".into(), g.echo());
    }
    let mut report = Report::new(name, Some(g.seed), request, payload);
    report.input_digests.extend(digests);
    Ok(report)
}

fn grid_request(base: Scenario, g: &Global) -> PowerGridRequest {
    let mut req = PowerGridRequest::new(base, g.seed);
    req.n_sim = g.nsim;
    req.threshold = g.threshold;
    req.criterion = g.criterion();
    req.failures = g.failures();
    req
}

fn worker_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Numerical(format!("cannot start worker pool: {e}")))
}

fn main() -> ExitCode {
    let raw: Vec<OsString> = std::env::args_os().collect();
    let cli = Cli::parse_from(&raw);
    let g = &cli.global;
    eprintln!("reproduce: {}", reproduction_line(&raw, g));
    let started = Instant::now();
    let outcome = run(&cli).and_then(|mut report| {
        report.timing.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
        match &g.out {
            Some(stem) => {
                let formats: Vec<ReportFormat> = g
                    .format
                    .iter()
                    .map(|f| match f {
                        FormatArg::Json => ReportFormat::Json,
                        FormatArg::Csv => ReportFormat::Csv,
                    })
                    .collect();
                for p in io::write_report(&report, &formats, stem)? {
                    eprintln!("wrote {}", p.display());
                }
            }
            None => println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            ),
        }
        Ok(())
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
