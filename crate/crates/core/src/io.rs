//! Trial CSV ingestion, scenario files and run reports.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lmm::BootstrapSummary;
use crate::power::{PowerReport, SweepReport};
use crate::types::{validate_scenario, FitResult, Scenario, Trial, TrialTable, SCENARIO_KEYS};
use crate::variability::{
    CorrelationComparison, LocationScaleResult, ReliabilityResult, SlopeSdResult,
    VarianceRatioResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioMode {
    /// Unknown top-level keys are errors.
    Strict,
    /// Unknown top-level keys are dropped with a warning.
    Lax,
}

/// Parses and validates a scenario; returns warnings produced in lax mode.
pub fn parse_scenario(text: &str, mode: ScenarioMode) -> Result<(Scenario, Vec<String>)> {
    let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: PathBuf::from("<scenario>"),
        message: e.to_string(),
    })?;
    let obj = value.as_object_mut().ok_or_else(|| Error::Parse {
        path: PathBuf::from("<scenario>"),
        message: "scenario must be a JSON object".into(),
    })?;
    let unknown: Vec<String> = obj
        .keys()
        .filter(|k| !SCENARIO_KEYS.contains(&k.as_str()))
        .cloned()
        .collect();
    let mut warnings = Vec::new();
    if !unknown.is_empty() {
        match mode {
            ScenarioMode::Strict => {
                return Err(Error::Validation(
                    unknown
                        .iter()
                        .map(|k| format!("unknown scenario key `{k}`"))
                        .collect(),
                ))
            }
            ScenarioMode::Lax => {
                for k in unknown {
                    obj.remove(&k);
                    warnings.push(format!("ignoring unknown scenario key `{k}`"));
                }
            }
        }
    }
    let scenario: Scenario = serde_json::from_value(value).map_err(|e| Error::Parse {
        path: PathBuf::from("<scenario>"),
        message: e.to_string(),
    })?;
    let violations = validate_scenario(&scenario);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok((scenario, warnings))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { message, .. } => Error::Parse {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    }
}

/// Strictly parsed, validated scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    load_scenario_with(path, ScenarioMode::Strict).map(|(s, _)| s)
}

pub fn load_scenario_with(path: &Path, mode: ScenarioMode) -> Result<(Scenario, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenario(&text, mode).map_err(|e| with_path(e, path))
}

pub const TRIAL_COLUMNS: [&str; 8] = [
    "participant_id",
    "item_id",
    "condition",
    "setting",
    "trial_index",
    "replicate",
    "rt_ms",
    "correct",
];

const REQUIRED_COLUMNS: [&str; 4] = ["participant_id", "item_id", "condition", "rt_ms"];

/// Maps canonical column names to the header names used in a file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColumnMap {
    renames: HashMap<String, String>,
}

impl ColumnMap {
    /// Parses `canonical=header` pairs.
    pub fn from_pairs<S: AsRef<str>>(pairs: &[S]) -> Result<Self> {
        let mut renames = HashMap::new();
        for p in pairs {
            let p = p.as_ref();
            let (canon, header) = p.split_once('=').ok_or_else(|| {
                Error::validation(format!("column mapping `{p}` is not canonical=header"))
            })?;
            if !TRIAL_COLUMNS.contains(&canon) {
                return Err(Error::validation(format!(
                    "unknown canonical column `{canon}`"
                )));
            }
            renames.insert(canon.to_string(), header.to_string());
        }
        Ok(ColumnMap { renames })
    }

    fn header_for<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.renames
            .get(canonical)
            .map(|s| s.as_str())
            .unwrap_or(canonical)
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Reads a trial table from CSV text; `source` names the input in errors.
pub fn parse_trials<R: Read>(reader: R, columns: &ColumnMap, source: &Path) -> Result<TrialTable> {
    let parse_err = |message: String| Error::Parse {
        path: source.to_path_buf(),
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    let mut idx: HashMap<&str, usize> = HashMap::new();
    for canon in TRIAL_COLUMNS {
        let h = columns.header_for(canon);
        if let Some(pos) = headers.iter().position(|x| x == h) {
            idx.insert(canon, pos);
        }
    }
    let missing: Vec<String> = REQUIRED_COLUMNS
        .iter()
        .filter(|c| !idx.contains_key(*c))
        .map(|c| format!("missing required column `{}`", columns.header_for(c)))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(missing));
    }

    let mut rows = Vec::new();
    let mut bad_rt = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row_no = k + 1;
        let rec = rec.map_err(|e| parse_err(format!("row {row_no}: {e}")))?;
        let field = |c: &str| idx.get(c).and_then(|&i| rec.get(i)).unwrap_or("");
        let opt = |c: &str| Some(field(c)).filter(|s| !s.is_empty());
        let int = |c: &str| -> Result<Option<u32>> {
            opt(c)
                .map(|s| {
                    s.parse::<u32>()
                        .map_err(|_| parse_err(format!("row {row_no}: unparseable {c} `{s}`")))
                })
                .transpose()
        };
        let condition = field("condition")
            .parse()
            .map_err(|e: Error| parse_err(format!("row {row_no}: {e}")))?;
        let setting = opt("setting")
            .map(|s| {
                s.parse()
                    .map_err(|e: Error| parse_err(format!("row {row_no}: {e}")))
            })
            .transpose()?;
        let correct = opt("correct")
            .map(|s| {
                parse_bool(s)
                    .ok_or_else(|| parse_err(format!("row {row_no}: unparseable correct `{s}`")))
            })
            .transpose()?;
        let rt_text = field("rt_ms");
        let rt_ms = if rt_text.is_empty() {
            bad_rt.push(format!("row {row_no}: rt_ms is missing"));
            f64::NAN
        } else {
            let v: f64 = rt_text
                .parse()
                .map_err(|_| parse_err(format!("row {row_no}: unparseable rt_ms `{rt_text}`")))?;
            if !(v.is_finite() && v > 0.0) {
                bad_rt.push(format!("row {row_no}: rt_ms = {rt_text} must be > 0"));
            }
            v
        };
        rows.push(Trial {
            participant_id: field("participant_id").to_string(),
            item_id: field("item_id").to_string(),
            condition,
            setting,
            trial_index: int("trial_index")?,
            replicate: int("replicate")?,
            rt_ms,
            correct,
        });
    }
    if !bad_rt.is_empty() {
        return Err(Error::Validation(bad_rt));
    }
    let table = TrialTable::new(rows);
    let dup = table.violations();
    if !dup.is_empty() {
        return Err(Error::Validation(dup));
    }
    Ok(table)
}

pub fn load_trials(path: &Path, columns: &ColumnMap) -> Result<TrialTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_trials(file, columns, path)
}

fn opt_to_string<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn trials_to_csv(table: &TrialTable) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRIAL_COLUMNS).expect("in-memory write");
    for r in &table.rows {
        w.write_record([
            r.participant_id.clone(),
            r.item_id.clone(),
            r.condition.to_string(),
            opt_to_string(r.setting),
            opt_to_string(r.trial_index),
            opt_to_string(r.replicate),
            r.rt_ms.to_string(),
            opt_to_string(r.correct),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Writes `contents` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_trials(table: &TrialTable, path: &Path) -> Result<()> {
    write_atomic(path, trials_to_csv(table).as_bytes())
}

/// Hex SHA-256 of a file's bytes.
pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(digest_bytes(&bytes))
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitPayload {
    pub fit: FitResult,
    pub bootstrap: Option<BootstrapSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReliability {
    pub dataset: String,
    pub result: ReliabilityResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityPayload {
    pub datasets: Vec<NamedReliability>,
    pub comparison: Option<CorrelationComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSlopeSd {
    pub dataset: String,
    pub result: SlopeSdResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedVarianceRatio {
    pub label: String,
    pub result: VarianceRatioResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarcompPayload {
    pub slope_sds: Vec<NamedSlopeSd>,
    pub f_tests: Vec<NamedVarianceRatio>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparePayload {
    pub location_scale: LocationScaleResult,
    pub interaction: Option<FitResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatePayload {
    pub n_rows: usize,
    pub trials_path: String,
    pub trials_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Payload {
    Power(PowerReport),
    Sweep(SweepReport),
    Fit(FitPayload),
    Simulate(SimulatePayload),
    Reliability(ReliabilityPayload),
    Varcomp(VarcompPayload),
    Compare(ComparePayload),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_ms: f64,
}

/// Everything needed to reproduce and audit one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub base_seed: Option<u64>,
    pub request: serde_json::Value,
    pub input_digests: IndexMap<String, String>,
    pub results: Payload,
    pub timing: Timing,
}

impl Report {
    pub fn new(
        command: &str,
        base_seed: Option<u64>,
        request: serde_json::Value,
        results: Payload,
    ) -> Self {
        Report {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            base_seed,
            request,
            input_digests: IndexMap::new(),
            results,
            timing: Timing { elapsed_ms: 0.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReportFormat {
    Json,
    Csv,
}

fn num(v: f64) -> String {
    v.to_string()
}

/// The flat results table of a report.
pub fn report_csv(report: &Report) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut put = |rec: Vec<String>| w.write_record(&rec).expect("in-memory write");
    let long_header = || {
        vec![
            "section".into(),
            "label".into(),
            "statistic".into(),
            "value".into(),
        ]
    };
    let long = |section: &str, label: &str, stat: &str, v: f64| {
        vec![
            section.to_string(),
            label.to_string(),
            stat.to_string(),
            num(v),
        ]
    };
    match &report.results {
        Payload::Power(p) => {
            put([
                "n_participants",
                "n_items",
                "n_sim",
                "n_converged",
                "power",
                "mc_se",
            ]
            .map(String::from)
            .to_vec());
            for c in &p.cells {
                put(vec![
                    c.n_participants.to_string(),
                    c.n_items.to_string(),
                    c.n_sim.to_string(),
                    c.n_converged.to_string(),
                    num(c.power),
                    num(c.mc_se),
                ]);
            }
        }
        Payload::Sweep(p) => {
            put([
                "residual_sd",
                "n_participants",
                "n_items",
                "n_sim",
                "n_converged",
                "power",
                "mc_se",
            ]
            .map(String::from)
            .to_vec());
            for s in &p.cells {
                let c = &s.cell;
                put(vec![
                    num(s.residual_sd),
                    c.n_participants.to_string(),
                    c.n_items.to_string(),
                    c.n_sim.to_string(),
                    c.n_converged.to_string(),
                    num(c.power),
                    num(c.mc_se),
                ]);
            }
        }
        Payload::Fit(f) => {
            put([
                "term",
                "estimate",
                "std_error",
                "t_value",
                "ci_low",
                "ci_high",
            ]
            .map(String::from)
            .to_vec());
            let ci = |name: &str| {
                f.bootstrap
                    .as_ref()
                    .and_then(|b| b.intervals.get(name))
                    .map(|i| (num(i.low), num(i.high)))
                    .unwrap_or_default()
            };
            for (name, value) in crate::lmm::fit_parameters(&f.fit) {
                let (se, t) = match f.fit.std_errors.get(&name) {
                    Some(se) => (num(*se), num(f.fit.t_values[&name])),
                    None => (String::new(), String::new()),
                };
                let (lo, hi) = ci(&name);
                put(vec![name, num(value), se, t, lo, hi]);
            }
        }
        Payload::Simulate(s) => {
            put(["n_rows", "trials_path", "trials_sha256"]
                .map(String::from)
                .to_vec());
            put(vec![
                s.n_rows.to_string(),
                s.trials_path.clone(),
                s.trials_sha256.clone(),
            ]);
        }
        Payload::Reliability(r) => {
            put(long_header());
            for d in &r.datasets {
                put(long("reliability", &d.dataset, "r", d.result.r));
                put(long("reliability", &d.dataset, "ci_low", d.result.ci_low));
                put(long("reliability", &d.dataset, "ci_high", d.result.ci_high));
                put(long(
                    "reliability",
                    &d.dataset,
                    "n_participants",
                    d.result.per_participant.len() as f64,
                ));
            }
            if let Some(c) = &r.comparison {
                put(long("comparison", "fisher_z", "z", c.z));
                put(long("comparison", "fisher_z", "p_two_sided", c.p_two_sided));
            }
        }
        Payload::Varcomp(v) => {
            put(long_header());
            for s in &v.slope_sds {
                put(long(
                    "slope_sd",
                    &s.dataset,
                    "grand_mean",
                    s.result.grand_mean,
                ));
                put(long("slope_sd", &s.dataset, "sd", s.result.sd));
                put(long(
                    "slope_sd",
                    &s.dataset,
                    "n_participants",
                    s.result.per_participant.len() as f64,
                ));
            }
            for t in &v.f_tests {
                put(long("f_test", &t.label, "f", t.result.f));
                put(long("f_test", &t.label, "df1", t.result.df1));
                put(long("f_test", &t.label, "df2", t.result.df2));
                put(long("f_test", &t.label, "p", t.result.p));
            }
        }
        Payload::Compare(c) => {
            put(long_header());
            let l = &c.location_scale;
            for (stat, v) in [
                ("mean_diff", l.mean_diff),
                ("mean_ci_low", l.mean_ci.0),
                ("mean_ci_high", l.mean_ci.1),
                ("sd_diff", l.sd_diff),
                ("sd_ci_low", l.sd_ci.0),
                ("sd_ci_high", l.sd_ci.1),
            ] {
                put(long("location_scale", "b_minus_a", stat, v));
            }
            if let Some(f) = &c.interaction {
                for (term, est) in &f.estimates {
                    put(long("interaction_fit", term, "estimate", *est));
                    put(long(
                        "interaction_fit",
                        term,
                        "std_error",
                        f.std_errors[term],
                    ));
                    put(long("interaction_fit", term, "t_value", f.t_values[term]));
                }
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Writes `<stem>.json` and/or `<stem>.csv`; returns the paths written.
pub fn write_report(
    report: &Report,
    formats: &[ReportFormat],
    stem: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for fmt in formats {
        let (ext, body) = match fmt {
            ReportFormat::Json => (
                "json",
                serde_json::to_string_pretty(report).expect("report serializes") + "\n",
            ),
            ReportFormat::Csv => ("csv", report_csv(report)),
        };
        let path = stem.with_extension(ext);
        write_atomic(&path, body.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios;

    fn parse(text: &str) -> Result<TrialTable> {
        parse_trials(text.as_bytes(), &ColumnMap::default(), Path::new("t.csv"))
    }

    #[test]
    fn well_formed_four_rows() {
        let t = parse(
            "participant_id,item_id,condition,rt_ms\n\
             p1,i1,related,812.5\np1,i1,unrelated,790\np2,i1,related,1001\np2,i1,unrelated,955.25\n",
        )
        .unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.rows[3].rt_ms, 955.25);
        assert_eq!(t.rows[0].setting, None);
    }

    #[test]
    fn negative_rt_cites_row() {
        let mut text = String::from("participant_id,item_id,condition,rt_ms\n");
        for k in 1..=8 {
            let rt = if k == 7 {
                "-12".to_string()
            } else {
                format!("{}", 700 + k)
            };
            text.push_str(&format!("p{k},i1,related,{rt}\n"));
        }
        let e = parse(&text).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("row 7") && !msg.contains("row 6"), "{msg}");
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn missing_and_unparseable() {
        let e = parse("participant_id,item_id,rt_ms\np,i,800\n").unwrap_err();
        assert!(e.to_string().contains("`condition`"));
        let e = parse("participant_id,item_id,condition,rt_ms\np,i,related,fast\n").unwrap_err();
        assert!(e.to_string().contains("unparseable rt_ms"));
        let e = parse("participant_id,item_id,condition,rt_ms\np,i,related,\n").unwrap_err();
        assert!(e.to_string().contains("missing"));
        let e = parse("participant_id,item_id,condition,rt_ms\np,i,Related,700\n").unwrap_err();
        assert!(e.to_string().contains("`Related`"), "{e}");
    }

    #[test]
    fn duplicate_key_rejected() {
        let e = parse("participant_id,item_id,condition,rt_ms\np,i,related,700\np,i,related,710\n")
            .unwrap_err();
        assert!(e.to_string().contains("duplicate"));
        parse("participant_id,item_id,condition,replicate,rt_ms\np,i,related,1,700\np,i,related,2,710\n")
            .unwrap();
    }

    #[test]
    fn column_remapping() {
        let map =
            ColumnMap::from_pairs(&["participant_id=subj", "rt_ms=RT", "correct=acc"]).unwrap();
        let t = parse_trials(
            "subj,item_id,condition,RT,acc\ns1,i,related,700,1\ns1,i,unrelated,650,0\n".as_bytes(),
            &map,
            Path::new("x"),
        )
        .unwrap();
        assert_eq!(t.rows[0].participant_id, "s1");
        assert_eq!(t.rows[1].correct, Some(false));
        assert!(ColumnMap::from_pairs(&["nope=x"]).is_err());
    }

    #[test]
    fn scenario_modes() {
        let base = scenarios::source("lab_phonological").unwrap();
        let mut v: serde_json::Value = serde_json::from_str(base).unwrap();
        v["note"] = "x".into();
        let text = v.to_string();
        assert!(parse_scenario(&text, ScenarioMode::Strict).is_err());
        let (_, w) = parse_scenario(&text, ScenarioMode::Lax).unwrap();
        assert_eq!(w.len(), 1);

        let mut v: serde_json::Value = serde_json::from_str(base).unwrap();
        v.as_object_mut().unwrap().remove("obs_per_cell");
        let (s, _) = parse_scenario(&v.to_string(), ScenarioMode::Strict).unwrap();
        assert_eq!(s.obs_per_cell, 1);

        let mut v: serde_json::Value = serde_json::from_str(base).unwrap();
        v["by_item"]["corr"] = serde_json::json!([[1.0, 1.2], [1.2, 1.0]]);
        let e = parse_scenario(&v.to_string(), ScenarioMode::Strict).unwrap_err();
        assert!(e.to_string().contains("correlation bounds"), "{e}");
    }

    #[test]
    fn csv_header_only_for_empty_power() {
        let r = Report::new(
            "power",
            Some(1),
            serde_json::json!({}),
            Payload::Power(PowerReport {
                cells: vec![],
                warnings: vec![],
            }),
        );
        let csv = report_csv(&r);
        assert_eq!(
            csv,
            "n_participants,n_items,n_sim,n_converged,power,mc_se\n"
        );
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["results"]["cells"], serde_json::json!([]));
    }
}
