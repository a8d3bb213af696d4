//! Gaussian linear mixed models with crossed participant and item random
//! effects, fitted by minimizing the profiled ML or REML deviance over the
//! relative covariance parameters.

mod balanced;
mod design;
mod fit;
mod optimize;
mod pls;
mod theta;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use balanced::CrossedStats;
pub use design::{build_design, Design, FactorDesign};
#[doc(hidden)]
pub use fit::fit_design_general;
pub use fit::{
    fit_crossed, fit_design, fit_lmm, fit_parameters, parametric_bootstrap, simulate_from_fit,
    BootstrapInterval, BootstrapSummary, FitOptions, SINGULAR_TOLERANCE,
};
pub use optimize::{minimize_bounded, NelderMeadOptions, NelderMeadResult};
pub use pls::{profiled_deviance, PlsModel, PlsSolution};
pub use theta::{Theta, ThetaLayout};

use crate::error::{Error, Result};
use crate::types::{
    Criterion, Factor, FitResult, INTERCEPT, KNOWN_TERMS, RELATEDNESS, SETTING, SETTING_RELATEDNESS,
};

/// Model formula: fixed terms, random terms per grouping factor, criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub fixed_terms: Vec<String>,
    pub random_terms: BTreeMap<Factor, Vec<String>>,
    pub criterion: Criterion,
}

fn labels(terms: &[&str]) -> Vec<String> {
    terms.iter().map(|s| s.to_string()).collect()
}

impl ModelSpec {
    /// Intercept + relatedness, with correlated random intercepts and
    /// relatedness slopes for both participants and items.
    pub fn maximal(criterion: Criterion) -> Self {
        let both = labels(&[INTERCEPT, RELATEDNESS]);
        ModelSpec {
            fixed_terms: both.clone(),
            random_terms: [(Factor::Participant, both.clone()), (Factor::Item, both)].into(),
            criterion,
        }
    }

    pub fn intercepts_only(criterion: Criterion) -> Self {
        ModelSpec {
            fixed_terms: labels(&[INTERCEPT, RELATEDNESS]),
            random_terms: [
                (Factor::Participant, labels(&[INTERCEPT])),
                (Factor::Item, labels(&[INTERCEPT])),
            ]
            .into(),
            criterion,
        }
    }

    /// Setting × relatedness model for a table pooling both settings.
    ///
    /// Setting varies between participants, so only items get random setting terms.
    pub fn setting_interaction(criterion: Criterion) -> Self {
        let all = labels(&KNOWN_TERMS);
        ModelSpec {
            fixed_terms: all.clone(),
            random_terms: [
                (Factor::Participant, labels(&[INTERCEPT, RELATEDNESS])),
                (Factor::Item, all),
            ]
            .into(),
            criterion,
        }
    }

    pub fn terms_for(&self, f: Factor) -> &[String] {
        self.random_terms
            .get(&f)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if !self.fixed_terms.iter().any(|t| t == INTERCEPT) {
            v.push("fixed_terms must contain `intercept`".to_string());
        }
        for t in &self.fixed_terms {
            if !KNOWN_TERMS.contains(&t.as_str()) {
                v.push(format!("unknown fixed term `{t}`"));
            }
        }
        for (i, t) in self.fixed_terms.iter().enumerate() {
            if self.fixed_terms[..i].contains(t) {
                v.push(format!("duplicate fixed term `{t}`"));
            }
        }
        for (f, terms) in &self.random_terms {
            for (i, t) in terms.iter().enumerate() {
                if !self.fixed_terms.contains(t) {
                    v.push(format!(
                        "random term `{t}` for {} is not a fixed term",
                        f.as_str()
                    ));
                }
                if terms[..i].contains(t) {
                    v.push(format!("duplicate random term `{t}` for {}", f.as_str()));
                }
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    pub fn uses_setting(&self) -> bool {
        self.fixed_terms
            .iter()
            .any(|t| t == SETTING || t == SETTING_RELATEDNESS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub t: f64,
    pub significant: bool,
}

pub const DEFAULT_THRESHOLD: f64 = 1.96;

/// Two-sided Wald test: significant when `|t| >= threshold`.
pub fn wald_test(fit: &FitResult, term: &str, threshold: f64) -> Result<WaldTest> {
    let t = *fit
        .t_values
        .get(term)
        .ok_or_else(|| Error::UnknownTerm(term.to_string()))?;
    Ok(wald_from_t(t, threshold))
}

pub fn wald_from_t(t: f64, threshold: f64) -> WaldTest {
    WaldTest {
        t,
        significant: t.abs() >= threshold,
    }
}
