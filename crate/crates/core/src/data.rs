use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::math::{cmp_rows, key_of};
use crate::table::project;

/// Observed rows `(W, Z, A, Y)` with covariates stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedDataset {
    pub dim: usize,
    pub w: Vec<f64>,
    pub z: Vec<f64>,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
    pub seed: Option<u64>,
}

impl ObservedDataset {
    pub fn new(dim: usize, w: Vec<f64>, z: Vec<f64>, a: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = z.len();
        if a.len() != n || y.len() != n || w.len() != n * dim {
            return Err(validation(format!(
                "column lengths disagree: w {} (dim {dim}), z {n}, a {}, y {}",
                w.len(),
                a.len(),
                y.len()
            )));
        }
        if w.iter().chain(&z).chain(&a).chain(&y).any(|v| !v.is_finite()) {
            return Err(validation("dataset contains non-finite values"));
        }
        Ok(Self {
            dim,
            w,
            z,
            a,
            y,
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn covariates(&self, i: usize) -> &[f64] {
        &self.w[i * self.dim..(i + 1) * self.dim]
    }

    /// Sorted distinct instrument values.
    pub fn instrument_support(&self) -> Vec<f64> {
        distinct_sorted(&self.z)
    }

    pub fn is_binary_treatment(&self) -> bool {
        self.a.iter().all(|a| *a == 0.0 || *a == 1.0)
    }

    /// Distinct covariate strata on `columns` and each row's stratum index.
    pub fn strata(&self, columns: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let projected: Vec<Vec<f64>> = (0..self.len())
            .map(|i| project(columns, self.covariates(i)))
            .collect::<Result<_>>()?;
        let mut uniq = projected.clone();
        uniq.sort_by(|a, b| cmp_rows(a, b));
        uniq.dedup_by(|a, b| key_of(a) == key_of(b));
        let index: std::collections::HashMap<Vec<u64>, usize> =
            uniq.iter().enumerate().map(|(s, v)| (key_of(v), s)).collect();
        let assign = projected.iter().map(|v| index[&key_of(v)]).collect();
        Ok((uniq, assign))
    }

    pub fn all_columns(&self) -> Vec<usize> {
        (0..self.dim).collect()
    }

    pub fn y_range(&self) -> Option<(f64, f64)> {
        if self.is_empty() {
            return None;
        }
        let lo = self.y.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((lo, hi))
    }
}

pub(crate) fn distinct_sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup_by(|a, b| key_of(&[*a]) == key_of(&[*b]));
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldTag {
    /// Instrument redrawn from `h*`, treatment and outcome propagated with the natural latents.
    InstrumentIntervention,
    /// Treatment drawn from a target law independently of the outcome latents.
    IndependentPolicy,
}

/// Draws from an intervened world. `z_star` is absent in the independent-policy world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualDataset {
    pub dim: usize,
    pub w: Vec<f64>,
    pub z_star: Option<Vec<f64>>,
    pub a_star: Vec<f64>,
    pub y_star: Vec<f64>,
    pub world: WorldTag,
    pub seed: u64,
}

impl CounterfactualDataset {
    pub fn len(&self) -> usize {
        self.a_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_star.is_empty()
    }

    pub fn covariates(&self, i: usize) -> &[f64] {
        &self.w[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean_outcome(&self) -> f64 {
        crate::math::mean(&self.y_star)
    }

    /// Monte Carlo standard error of the outcome mean.
    pub fn outcome_se(&self) -> f64 {
        crate::math::sd_population(&self.y_star) / (self.len() as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_ragged_columns() {
        assert!(ObservedDataset::new(1, vec![0.0, 1.0], vec![0.0], vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn strata_are_sorted_and_assigned() {
        let d = ObservedDataset::new(
            2,
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0],
            vec![0.0, 1.0, 1.0],
            vec![0.0, 1.0, 0.0],
            vec![0.5, 0.2, 0.1],
        )
        .unwrap();
        let (strata, assign) = d.strata(&[0, 1]).unwrap();
        assert_eq!(strata, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(assign, vec![1, 0, 1]);
        let (s1, a1) = d.strata(&[1]).unwrap();
        assert_eq!(s1, vec![vec![0.0], vec![1.0]]);
        assert_eq!(a1, vec![0, 1, 0]);
        assert_eq!(d.instrument_support(), vec![0.0, 1.0]);
    }
}
