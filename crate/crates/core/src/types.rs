//! Domain objects shared by simulation, fitting and the variability analyses.
//!
//! All response-time quantities are in milliseconds on the raw scale.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest eigenvalue a correlation matrix may have and still count as PSD.
pub const PSD_TOLERANCE: f64 = 1e-8;

pub const INTERCEPT: &str = "intercept";
pub const RELATEDNESS: &str = "relatedness";
pub const SETTING: &str = "setting";
pub const SETTING_RELATEDNESS: &str = "setting:relatedness";

/// Every term label the model machinery understands, in canonical order.
pub const KNOWN_TERMS: [&str; 4] = [INTERCEPT, RELATEDNESS, SETTING, SETTING_RELATEDNESS];

/// One grouping factor's random-effect standard deviations and correlations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomStructure {
    pub factor_name: String,
    pub term_names: Vec<String>,
    pub sds: Vec<f64>,
    pub corr: Vec<Vec<f64>>,
}

impl RandomStructure {
    /// Independent terms (identity correlation).
    pub fn uncorrelated(factor_name: &str, term_names: &[&str], sds: &[f64]) -> Self {
        let q = sds.len();
        let corr = (0..q)
            .map(|i| (0..q).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        RandomStructure {
            factor_name: factor_name.to_string(),
            term_names: term_names.iter().map(|s| s.to_string()).collect(),
            sds: sds.to_vec(),
            corr,
        }
    }

    /// Intercept + relatedness structure with a single correlation.
    pub fn intercept_slope(factor_name: &str, sd_intercept: f64, sd_slope: f64, corr: f64) -> Self {
        RandomStructure {
            factor_name: factor_name.to_string(),
            term_names: vec![INTERCEPT.to_string(), RELATEDNESS.to_string()],
            sds: vec![sd_intercept, sd_slope],
            corr: vec![vec![1.0, corr], vec![corr, 1.0]],
        }
    }

    pub fn empty(factor_name: &str) -> Self {
        RandomStructure {
            factor_name: factor_name.to_string(),
            term_names: Vec::new(),
            sds: Vec::new(),
            corr: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.sds.len()
    }

    pub fn sd_of(&self, term: &str) -> Option<f64> {
        self.term_names
            .iter()
            .position(|t| t == term)
            .map(|k| self.sds[k])
    }

    /// Covariance matrix diag(sds) · corr · diag(sds).
    pub fn covariance(&self) -> DMatrix<f64> {
        let q = self.dim();
        DMatrix::from_fn(q, q, |i, j| self.sds[i] * self.corr[i][j] * self.sds[j])
    }

    /// Every violated invariant, each prefixed with `path`.
    pub fn violations(&self, path: &str) -> Vec<String> {
        let mut out = Vec::new();
        let q = self.sds.len();
        if self.term_names.len() != q {
            out.push(format!(
                "{path}: term_names has {} entries but sds has {q}",
                self.term_names.len()
            ));
        }
        if self.corr.len() != q || self.corr.iter().any(|row| row.len() != q) {
            out.push(format!("{path}.corr: must be a {q}x{q} matrix"));
            return out;
        }
        let mut seen = HashSet::new();
        for name in &self.term_names {
            if !seen.insert(name.as_str()) {
                out.push(format!("{path}.term_names: duplicate term `{name}`"));
            }
        }
        for (k, sd) in self.sds.iter().enumerate() {
            if !sd.is_finite() || *sd < 0.0 {
                out.push(format!("{path}.sds[{k}] = {sd} must be finite and >= 0"));
            }
        }
        let mut entries_ok = true;
        for i in 0..q {
            if self.corr[i][i] != 1.0 {
                out.push(format!(
                    "{path}.corr[{i}][{i}] = {} but the diagonal must be 1",
                    self.corr[i][i]
                ));
                entries_ok = false;
            }
            for j in 0..q {
                let c = self.corr[i][j];
                if !c.is_finite() || !(-1.0..=1.0).contains(&c) {
                    out.push(format!(
                        "{path}.corr[{i}][{j}] = {c} is outside the correlation bounds [-1, 1]"
                    ));
                    entries_ok = false;
                }
                if j > i && self.corr[i][j] != self.corr[j][i] {
                    out.push(format!(
                        "{path}.corr is not symmetric at ({i}, {j}): {} vs {}",
                        self.corr[i][j], self.corr[j][i]
                    ));
                    entries_ok = false;
                }
            }
        }
        if entries_ok && q > 0 {
            let min_eig = min_eigenvalue(&self.corr);
            if min_eig < -PSD_TOLERANCE {
                out.push(format!(
                    "{path}.corr is not positive semi-definite (smallest eigenvalue {min_eig:.3e})"
                ));
            }
        }
        out
    }
}

pub(crate) fn min_eigenvalue(m: &[Vec<f64>]) -> f64 {
    let q = m.len();
    let mat = DMatrix::from_fn(q, q, |i, j| m[i][j]);
    SymmetricEigen::new(mat)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Fixed-effect coefficients keyed by term label, in ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixedEffects {
    pub coefficients: IndexMap<String, f64>,
}

impl FixedEffects {
    pub fn new(pairs: &[(&str, f64)]) -> Self {
        FixedEffects {
            coefficients: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn get(&self, term: &str) -> f64 {
        self.coefficients.get(term).copied().unwrap_or(0.0)
    }
}

/// Numeric codes for the two-level predictors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastCoding {
    pub related_code: f64,
    pub unrelated_code: f64,
    #[serde(default = "default_online_code")]
    pub online_code: f64,
    #[serde(default = "default_lab_code")]
    pub lab_code: f64,
}

fn default_online_code() -> f64 {
    0.5
}

fn default_lab_code() -> f64 {
    -0.5
}

impl Default for ContrastCoding {
    fn default() -> Self {
        ContrastCoding {
            related_code: 0.5,
            unrelated_code: -0.5,
            online_code: 0.5,
            lab_code: -0.5,
        }
    }
}

impl ContrastCoding {
    pub fn condition_code(&self, c: Condition) -> f64 {
        match c {
            Condition::Related => self.related_code,
            Condition::Unrelated => self.unrelated_code,
        }
    }

    pub fn setting_code(&self, s: Setting) -> f64 {
        match s {
            Setting::Lab => self.lab_code,
            Setting::Online => self.online_code,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let codes = [
            ("related_code", self.related_code),
            ("unrelated_code", self.unrelated_code),
            ("online_code", self.online_code),
            ("lab_code", self.lab_code),
        ];
        for (name, v) in codes {
            if !v.is_finite() {
                out.push(format!("contrasts.{name} = {v} must be finite"));
            }
        }
        if self.related_code == self.unrelated_code {
            out.push(format!(
                "contrasts: related_code and unrelated_code must differ (both {})",
                self.related_code
            ));
        }
        if self.online_code == self.lab_code {
            out.push(format!(
                "contrasts: online_code and lab_code must differ (both {})",
                self.online_code
            ));
        }
        out
    }
}

fn default_obs_per_cell() -> usize {
    1
}

/// Complete generative parameterization for one setting and manipulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub fixed: FixedEffects,
    pub by_participant: RandomStructure,
    pub by_item: RandomStructure,
    pub residual_sd: f64,
    #[serde(default)]
    pub contrasts: ContrastCoding,
    pub n_participants: usize,
    pub n_items: usize,
    #[serde(default = "default_obs_per_cell")]
    pub obs_per_cell: usize,
}

/// Keys accepted at the top level of a scenario file.
pub const SCENARIO_KEYS: [&str; 8] = [
    "fixed",
    "by_participant",
    "by_item",
    "residual_sd",
    "contrasts",
    "n_participants",
    "n_items",
    "obs_per_cell",
];

impl Scenario {
    pub fn with_sizes(&self, n_participants: usize, n_items: usize) -> Scenario {
        Scenario {
            n_participants,
            n_items,
            ..self.clone()
        }
    }

    /// Copy with every random-effect correlation set to zero.
    pub fn without_correlations(&self) -> Scenario {
        let strip = |rs: &RandomStructure| {
            let q = rs.dim();
            RandomStructure {
                corr: (0..q)
                    .map(|i| (0..q).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect(),
                ..rs.clone()
            }
        };
        Scenario {
            by_participant: strip(&self.by_participant),
            by_item: strip(&self.by_item),
            ..self.clone()
        }
    }

    /// Copy with the standard deviation of one random term replaced.
    pub fn with_random_sd(&self, factor: Factor, term: &str, sd: f64) -> Result<Scenario> {
        let mut s = self.clone();
        let rs = match factor {
            Factor::Participant => &mut s.by_participant,
            Factor::Item => &mut s.by_item,
        };
        let k = rs
            .term_names
            .iter()
            .position(|t| t == term)
            .ok_or_else(|| Error::UnknownTerm(format!("{}:{term}", factor.as_str())))?;
        rs.sds[k] = sd;
        Ok(s)
    }
}

/// Every violated invariant of `s`; empty when the scenario is valid.
pub fn validate_scenario(s: &Scenario) -> Vec<String> {
    let mut out = Vec::new();
    if !s.fixed.coefficients.contains_key(INTERCEPT) {
        out.push("fixed: must contain `intercept`".to_string());
    }
    for (k, v) in &s.fixed.coefficients {
        if !KNOWN_TERMS.contains(&k.as_str()) {
            out.push(format!("fixed: unknown term `{k}`"));
        }
        if !v.is_finite() {
            out.push(format!("fixed.{k} = {v} must be finite"));
        }
    }
    for (path, rs, expected) in [
        ("by_participant", &s.by_participant, "participant"),
        ("by_item", &s.by_item, "item"),
    ] {
        if rs.factor_name != expected {
            out.push(format!(
                "{path}.factor_name is `{}` but must be `{expected}`",
                rs.factor_name
            ));
        }
        out.extend(rs.violations(path));
        for t in &rs.term_names {
            if t != INTERCEPT && !s.fixed.coefficients.contains_key(t) {
                out.push(format!(
                    "{path}: random term `{t}` is neither `intercept` nor a fixed-effect term"
                ));
            }
        }
    }
    if !(s.residual_sd.is_finite() && s.residual_sd > 0.0) {
        out.push(format!("residual_sd = {} must be > 0", s.residual_sd));
    }
    if s.n_participants < 2 {
        out.push(format!(
            "n_participants = {} must be >= 2",
            s.n_participants
        ));
    }
    if s.n_items < 2 {
        out.push(format!("n_items = {} must be >= 2", s.n_items));
    }
    if s.obs_per_cell < 1 {
        out.push(format!("obs_per_cell = {} must be >= 1", s.obs_per_cell));
    }
    out.extend(s.contrasts.violations());
    out
}

/// Fails with every violation when `s` is invalid.
pub fn ensure_valid(s: &Scenario) -> Result<()> {
    let v = validate_scenario(s);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(v))
    }
}

/// The two random grouping factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Participant,
    Item,
}

impl Factor {
    pub fn as_str(self) -> &'static str {
        match self {
            Factor::Participant => "participant",
            Factor::Item => "item",
        }
    }
}

impl FromStr for Factor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "participant" => Ok(Factor::Participant),
            "item" => Ok(Factor::Item),
            other => Err(Error::Data(format!("unknown grouping factor `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Related,
    Unrelated,
}

impl Condition {
    pub const BOTH: [Condition; 2] = [Condition::Related, Condition::Unrelated];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Related => "related",
            Condition::Unrelated => "unrelated",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "related" => Ok(Condition::Related),
            "unrelated" => Ok(Condition::Unrelated),
            other => Err(Error::Data(format!(
                "unknown condition label `{other}` (expected `related` or `unrelated`)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Lab,
    Online,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Lab => "lab",
            Setting::Online => "online",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lab" => Ok(Setting::Lab),
            "online" => Ok(Setting::Online),
            other => Err(Error::Data(format!(
                "unknown setting label `{other}` (expected `lab` or `online`)"
            ))),
        }
    }
}

/// One trial of long-format response-time data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub participant_id: String,
    pub item_id: String,
    pub condition: Condition,
    #[serde(default)]
    pub setting: Option<Setting>,
    #[serde(default)]
    pub trial_index: Option<u32>,
    /// Distinguishes repeated observations of the same participant×item×condition cell.
    #[serde(default)]
    pub replicate: Option<u32>,
    pub rt_ms: f64,
    #[serde(default)]
    pub correct: Option<bool>,
}

impl Trial {
    pub fn is_error(&self) -> bool {
        self.correct == Some(false)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialTable {
    pub rows: Vec<Trial>,
}

impl TrialTable {
    pub fn new(rows: Vec<Trial>) -> Self {
        TrialTable { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows with `correct == false` removed.
    pub fn correct_only(&self) -> TrialTable {
        TrialTable {
            rows: self
                .rows
                .iter()
                .filter(|r| !r.is_error())
                .cloned()
                .collect(),
        }
    }

    /// Participant ids in order of first appearance.
    pub fn participants(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.participant_id.as_str()))
            .map(|r| r.participant_id.clone())
            .collect()
    }

    /// Every violated row-level invariant.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut keys = BTreeSet::new();
        for (k, r) in self.rows.iter().enumerate() {
            let row = k + 1;
            if !(r.rt_ms.is_finite() && r.rt_ms > 0.0) {
                out.push(format!("row {row}: rt_ms = {} must be > 0", r.rt_ms));
            }
            let key = (
                r.setting,
                r.participant_id.as_str(),
                r.item_id.as_str(),
                r.condition,
                r.replicate.unwrap_or(1),
            );
            if !keys.insert(key) {
                out.push(format!(
                    "row {row}: duplicate (participant, item, condition, replicate) key ({}, {}, {}, {})",
                    r.participant_id,
                    r.item_id,
                    r.condition,
                    r.replicate.unwrap_or(1)
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(rename = "REML")]
    Reml,
    #[serde(rename = "ML")]
    Ml,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Reml => "REML",
            Criterion::Ml => "ML",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    ConvergedSingular,
    Failed,
}

impl FitStatus {
    pub fn is_usable(self) -> bool {
        !matches!(self, FitStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarComp {
    pub by_participant: RandomStructure,
    pub by_item: RandomStructure,
    pub residual_sd: f64,
}

/// Output of a mixed-model fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub estimates: IndexMap<String, f64>,
    pub std_errors: IndexMap<String, f64>,
    pub t_values: IndexMap<String, f64>,
    pub varcomp: VarComp,
    pub deviance: f64,
    pub criterion: Criterion,
    pub status: FitStatus,
    /// Relative covariance factors at the optimum.
    pub theta: Vec<f64>,
    pub n_obs: usize,
    pub n_evaluations: usize,
}

impl FitResult {
    pub fn estimate(&self, term: &str) -> Option<f64> {
        self.estimates.get(term).copied()
    }

    pub fn std_error(&self, term: &str) -> Option<f64> {
        self.std_errors.get(term).copied()
    }
}

/// Monte Carlo power estimate for one design point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerCell {
    pub n_participants: usize,
    pub n_items: usize,
    pub n_sim: usize,
    pub n_converged: usize,
    pub n_significant: usize,
    pub power: f64,
    pub mc_se: f64,
}

impl PowerCell {
    /// Power over converged fits; with `failures_nonsignificant`, failed fits
    /// stay in the denominator.
    pub fn from_counts(
        n_participants: usize,
        n_items: usize,
        n_sim: usize,
        n_converged: usize,
        n_significant: usize,
        failures_nonsignificant: bool,
    ) -> Self {
        let denom = if failures_nonsignificant {
            n_sim
        } else {
            n_converged
        };
        let (power, mc_se) = if denom > 0 {
            let p = n_significant as f64 / denom as f64;
            (p, (p * (1.0 - p) / denom as f64).sqrt())
        } else {
            (0.0, 0.0)
        };
        PowerCell {
            n_participants,
            n_items,
            n_sim,
            n_converged,
            n_significant,
            power,
            mc_se,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios;

    #[test]
    fn bundled_lab_phonological_is_valid() {
        let s = scenarios::lab_phonological();
        assert!(validate_scenario(&s).is_empty());
        assert_eq!(s.residual_sd, 223.56);
    }

    #[test]
    fn zero_residual_sd_is_named() {
        let mut s = scenarios::lab_phonological();
        s.residual_sd = 0.0;
        let v = validate_scenario(&s);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("residual_sd"));
    }

    #[test]
    fn correlation_out_of_bounds_is_named() {
        let mut s = scenarios::lab_phonological();
        s.by_participant.corr = vec![vec![1.0, 1.2], vec![1.2, 1.0]];
        let v = validate_scenario(&s);
        assert!(!v.is_empty());
        assert!(v.iter().any(|m| m.contains("correlation bounds")), "{v:?}");
    }

    #[test]
    fn non_psd_correlation_rejected() {
        let rs = RandomStructure {
            factor_name: "item".into(),
            term_names: vec!["intercept".into(), "relatedness".into(), "setting".into()],
            sds: vec![1.0, 1.0, 1.0],
            corr: vec![
                vec![1.0, 0.9, -0.9],
                vec![0.9, 1.0, 0.9],
                vec![-0.9, 0.9, 1.0],
            ],
        };
        let v = rs.violations("by_item");
        assert!(
            v.iter().any(|m| m.contains("positive semi-definite")),
            "{v:?}"
        );
    }

    #[test]
    fn zero_sds_are_valid() {
        let rs = RandomStructure::intercept_slope("participant", 0.0, 0.0, 0.5);
        assert!(rs.violations("p").is_empty());
    }

    #[test]
    fn mismatched_lengths_reported() {
        let mut rs = RandomStructure::intercept_slope("participant", 1.0, 1.0, 0.0);
        rs.sds.push(3.0);
        assert!(!rs.violations("p").is_empty());
    }

    #[test]
    fn random_term_must_be_fixed() {
        let mut s = scenarios::lab_phonological();
        s.fixed.coefficients.shift_remove(RELATEDNESS);
        let v = validate_scenario(&s);
        assert!(
            v.iter().any(|m| m.contains("random term `relatedness`")),
            "{v:?}"
        );
    }

    #[test]
    fn equal_contrast_codes_rejected() {
        let c = ContrastCoding {
            related_code: 0.5,
            unrelated_code: 0.5,
            ..Default::default()
        };
        assert_eq!(c.violations().len(), 1);
    }

    #[test]
    fn power_cell_counts() {
        let c = PowerCell::from_counts(12, 90, 100, 80, 60, false);
        assert_eq!(c.power, 0.75);
        assert!((c.mc_se - (0.75f64 * 0.25 / 80.0).sqrt()).abs() < 1e-15);
        let c = PowerCell::from_counts(12, 90, 100, 80, 60, true);
        assert_eq!(c.power, 0.6);
    }

    #[test]
    fn condition_labels_are_case_sensitive() {
        let err = "Related".parse::<Condition>().unwrap_err();
        assert!(err.to_string().contains("`Related`"));
    }

    #[test]
    fn duplicate_keys_detected() {
        let t = Trial {
            participant_id: "p1".into(),
            item_id: "i1".into(),
            condition: Condition::Related,
            setting: None,
            trial_index: None,
            replicate: None,
            rt_ms: 800.0,
            correct: None,
        };
        let table = TrialTable::new(vec![t.clone(), t]);
        assert_eq!(table.violations().len(), 1);
    }
}
