//! Tables indexed by (covariate stratum, instrument value).
//!
//! Policies, instrument densities and tabular treatment kernels are all
//! `values[stratum][z]` over a finite covariate stratification. A table may
//! condition on a subset of covariate columns (`columns`), which is how a
//! policy on `W_{S'}` is evaluated against data carrying the full `W`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::math::key_of;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableRepr {
    columns: Vec<usize>,
    strata: Vec<Vec<f64>>,
    support: Vec<f64>,
    values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "TableRepr", into = "TableRepr")]
pub struct StratifiedTable {
    columns: Vec<usize>,
    strata: Vec<Vec<f64>>,
    support: Vec<f64>,
    values: Vec<Vec<f64>>,
    index: HashMap<Vec<u64>, usize>,
}

impl PartialEq for StratifiedTable {
    fn eq(&self, other: &Self) -> bool {
        self.columns == other.columns
            && self.strata == other.strata
            && self.support == other.support
            && self.values == other.values
    }
}

impl TryFrom<TableRepr> for StratifiedTable {
    type Error = Error;
    fn try_from(r: TableRepr) -> Result<Self> {
        StratifiedTable::new(r.columns, r.strata, r.support, r.values)
    }
}

impl From<StratifiedTable> for TableRepr {
    fn from(t: StratifiedTable) -> Self {
        TableRepr {
            columns: t.columns,
            strata: t.strata,
            support: t.support,
            values: t.values,
        }
    }
}

impl StratifiedTable {
    pub fn new(
        columns: Vec<usize>,
        strata: Vec<Vec<f64>>,
        support: Vec<f64>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if strata.is_empty() {
            return Err(validation("table has no strata"));
        }
        if support.is_empty() {
            return Err(validation("table has an empty instrument support"));
        }
        if strata.len() != values.len() {
            return Err(validation(format!(
                "{} strata but {} value rows",
                strata.len(),
                values.len()
            )));
        }
        let mut index = HashMap::new();
        for (s, key) in strata.iter().enumerate() {
            if key.len() != columns.len() {
                return Err(validation(format!(
                    "stratum {s} has {} covariate values, expected {}",
                    key.len(),
                    columns.len()
                )));
            }
            if index.insert(key_of(key), s).is_some() {
                return Err(validation(format!("duplicate stratum {key:?}")));
            }
        }
        for (s, row) in values.iter().enumerate() {
            if row.len() != support.len() {
                return Err(validation(format!(
                    "row for stratum {:?} has {} entries, expected {}",
                    strata[s],
                    row.len(),
                    support.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(validation(format!("non-finite entry in stratum {:?}", strata[s])));
            }
        }
        let mut sorted = support.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        sorted.dedup();
        if sorted.len() != support.len() {
            return Err(validation("instrument support has repeated values"));
        }
        Ok(Self {
            columns,
            strata,
            support,
            values,
            index,
        })
    }

    /// A table that ignores covariates: the same row for every `w`.
    pub fn constant(support: Vec<f64>, row: Vec<f64>) -> Result<Self> {
        Self::new(Vec::new(), vec![Vec::new()], support, vec![row])
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn strata(&self) -> &[Vec<f64>] {
        &self.strata
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn row(&self, stratum: usize) -> &[f64] {
        &self.values[stratum]
    }

    pub fn z_index(&self, z: f64) -> Option<usize> {
        self.support.iter().position(|s| *s == z)
    }

    pub fn stratum_of_values(&self, vals: &[f64]) -> Option<usize> {
        self.index.get(&key_of(vals)).copied()
    }

    /// Stratum of a full covariate vector, projected onto this table's columns.
    pub fn stratum_of(&self, w: &[f64]) -> Result<usize> {
        let vals = project(&self.columns, w)?;
        self.stratum_of_values(&vals)
            .ok_or_else(|| validation(format!("no table row for covariates {vals:?} (columns {:?})", self.columns)))
    }

    /// Stratum of a partial covariate vector whose entries are the columns `cols`.
    pub fn stratum_of_view(&self, cols: &[usize], vals: &[f64]) -> Result<usize> {
        let mut out = Vec::with_capacity(self.columns.len());
        for c in &self.columns {
            let pos = cols.iter().position(|x| x == c).ok_or_else(|| {
                validation(format!("table conditions on column {c}, which is not available in {cols:?}"))
            })?;
            out.push(vals[pos]);
        }
        self.stratum_of_values(&out)
            .ok_or_else(|| validation(format!("no table row for covariates {out:?} (columns {:?})", self.columns)))
    }

    pub fn get(&self, z: f64, w: &[f64]) -> Result<f64> {
        let s = self.stratum_of(w)?;
        let k = self
            .z_index(z)
            .ok_or_else(|| validation(format!("instrument value {z} not in support {:?}", self.support)))?;
        Ok(self.values[s][k])
    }

    /// Checks entries lie in [0, 1] and each row sums to one within `tol`.
    pub fn validate_pmf_rows(&self, what: &str, tol: f64) -> Result<()> {
        for (s, row) in self.values.iter().enumerate() {
            if let Some(k) = row.iter().position(|p| !(0.0..=1.0).contains(p)) {
                return Err(validation(format!(
                    "{what}: entry {} at stratum {:?}, z={} is not a probability",
                    row[k], self.strata[s], self.support[k]
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(validation(format!(
                    "{what}: row for stratum {:?} sums to {sum}, not 1",
                    self.strata[s]
                )));
            }
        }
        Ok(())
    }

    pub fn validate_probabilities(&self, what: &str) -> Result<()> {
        for (s, row) in self.values.iter().enumerate() {
            if let Some(k) = row.iter().position(|p| !(0.0..=1.0).contains(p)) {
                return Err(validation(format!(
                    "{what}: entry {} at stratum {:?}, z={} is not a probability",
                    row[k], self.strata[s], self.support[k]
                )));
            }
        }
        Ok(())
    }

    pub fn map_values(&self, f: impl Fn(usize, usize, f64) -> f64) -> Self {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(s, row)| row.iter().enumerate().map(|(k, v)| f(s, k, *v)).collect())
            .collect();
        Self {
            values,
            ..self.clone()
        }
    }
}

/// Picks `columns` out of a full covariate vector.
pub fn project(columns: &[usize], w: &[f64]) -> Result<Vec<f64>> {
    columns
        .iter()
        .map(|&c| {
            w.get(c)
                .copied()
                .ok_or_else(|| validation(format!("covariate column {c} missing (row has {} values)", w.len())))
        })
        .collect()
}
