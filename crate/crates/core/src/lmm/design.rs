use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use super::ModelSpec;
use crate::error::{Error, Result};
use crate::types::{
    ContrastCoding, Factor, Trial, TrialTable, INTERCEPT, RELATEDNESS, SETTING, SETTING_RELATEDNESS,
};

/// Random-effect incidence for one grouping factor.
///
/// `Z_f` is implicit: row `r` has the values `values.row(r)` in columns
/// `level_of_row[r]·q .. level_of_row[r]·q + q`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorDesign {
    pub factor: Factor,
    pub terms: Vec<String>,
    pub levels: Vec<String>,
    pub level_of_row: Vec<usize>,
    pub values: DMatrix<f64>,
}

impl FactorDesign {
    pub fn q(&self) -> usize {
        self.terms.len()
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn n_columns(&self) -> usize {
        self.q() * self.n_levels()
    }

    /// Dense `n × (levels·q)` incidence matrix.
    pub fn z_dense(&self) -> DMatrix<f64> {
        let q = self.q();
        let mut z = DMatrix::zeros(self.level_of_row.len(), self.n_columns());
        for (r, &lev) in self.level_of_row.iter().enumerate() {
            for k in 0..q {
                z[(r, lev * q + k)] = self.values[(r, k)];
            }
        }
        z
    }
}

/// Fixed-effect matrix, random-effect structures and response.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub fixed_terms: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Participant then item; a factor without random terms has `q() == 0`.
    pub factors: Vec<FactorDesign>,
}

impl Design {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    pub fn factor(&self, f: Factor) -> &FactorDesign {
        self.factors
            .iter()
            .find(|d| d.factor == f)
            .expect("both factors present")
    }

    /// Dense `Z = [Z_participant | Z_item]`.
    pub fn z_dense(&self) -> DMatrix<f64> {
        let n = self.n_obs();
        let total: usize = self.factors.iter().map(|f| f.n_columns()).sum();
        let mut z = DMatrix::zeros(n, total);
        let mut offset = 0;
        for f in &self.factors {
            let zf = f.z_dense();
            z.view_mut((0, offset), (n, zf.ncols())).copy_from(&zf);
            offset += zf.ncols();
        }
        z
    }

    /// Copy with a different response vector.
    pub fn with_response(&self, y: DVector<f64>) -> Design {
        assert_eq!(y.len(), self.n_obs());
        Design { y, ..self.clone() }
    }

    /// Errors when a fixed-effect column is identically zero or linearly
    /// dependent on earlier columns (relative tolerance 1e-10).
    pub fn check_rank(&self) -> Result<()> {
        let mut basis: Vec<DVector<f64>> = Vec::new();
        for (j, term) in self.fixed_terms.iter().enumerate() {
            let col = self.x.column(j).into_owned();
            let norm = col.norm();
            if norm == 0.0 {
                return Err(Error::DegenerateDesign(format!(
                    "fixed-effect column `{term}` is constant zero"
                )));
            }
            let mut resid = col.clone();
            for b in &basis {
                let proj = b.dot(&resid);
                resid -= b * proj;
            }
            // second pass for stability
            for b in &basis {
                let proj = b.dot(&resid);
                resid -= b * proj;
            }
            let rn = resid.norm();
            if rn <= 1e-10 * norm {
                return Err(Error::DegenerateDesign(format!(
                    "fixed-effect column `{term}` is collinear with earlier columns"
                )));
            }
            basis.push(resid / rn);
        }
        Ok(())
    }
}

fn term_value(term: &str, row: &Trial, row_no: usize, c: &ContrastCoding) -> Result<f64> {
    let setting = || {
        row.setting.map(|s| c.setting_code(s)).ok_or_else(|| {
            Error::Data(format!(
                "term `{term}` needs the `setting` column but row {row_no} has none"
            ))
        })
    };
    match term {
        INTERCEPT => Ok(1.0),
        RELATEDNESS => Ok(c.condition_code(row.condition)),
        SETTING => setting(),
        SETTING_RELATEDNESS => Ok(setting()? * c.condition_code(row.condition)),
        other => Err(Error::UnknownTerm(other.to_string())),
    }
}

fn index_levels(ids: impl Iterator<Item = String>) -> (Vec<String>, Vec<usize>) {
    let mut levels = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    let mut of_row = Vec::new();
    for id in ids {
        let next = levels.len();
        let k = *lookup.entry(id.clone()).or_insert_with(|| {
            levels.push(id);
            next
        });
        of_row.push(k);
    }
    (levels, of_row)
}

/// Builds the model matrices for `spec` from the correct trials of `table`.
pub fn build_design(
    table: &TrialTable,
    spec: &ModelSpec,
    contrasts: &ContrastCoding,
) -> Result<Design> {
    spec.validate()?;
    let cv = contrasts.violations();
    if !cv.is_empty() {
        return Err(Error::Validation(cv));
    }
    let rows: Vec<&Trial> = table.rows.iter().filter(|r| !r.is_error()).collect();
    if rows.is_empty() {
        return Err(Error::Data("trial table has no usable rows".into()));
    }
    let n = rows.len();
    let p = spec.fixed_terms.len();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for (r, row) in rows.iter().enumerate() {
        // simulated tables may hold negative latencies; only finiteness matters here
        if !row.rt_ms.is_finite() {
            return Err(Error::Data(format!(
                "row {}: rt_ms = {} is not finite",
                r + 1,
                row.rt_ms
            )));
        }
        y[r] = row.rt_ms;
        for (j, term) in spec.fixed_terms.iter().enumerate() {
            x[(r, j)] = term_value(term, row, r + 1, contrasts)?;
        }
    }
    let mut factors = Vec::with_capacity(2);
    for factor in [Factor::Participant, Factor::Item] {
        let terms = spec.random_terms.get(&factor).cloned().unwrap_or_default();
        let ids = rows.iter().map(|r| match factor {
            Factor::Participant => r.participant_id.clone(),
            Factor::Item => r.item_id.clone(),
        });
        let (levels, level_of_row) = index_levels(ids);
        let mut values = DMatrix::zeros(n, terms.len());
        for (r, row) in rows.iter().enumerate() {
            for (k, term) in terms.iter().enumerate() {
                values[(r, k)] = term_value(term, row, r + 1, contrasts)?;
            }
        }
        factors.push(FactorDesign {
            factor,
            terms,
            levels,
            level_of_row,
            values,
        });
    }
    Ok(Design {
        fixed_terms: spec.fixed_terms.clone(),
        x,
        y,
        factors,
    })
}
