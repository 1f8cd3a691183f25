//! Nuisance fits: treatment kernel `p(A|Z,W)`, outcome regression
//! `Q(Z,W) = E[Y|Z,W]` and natural instrument density `h(Z|W)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ObservedDataset;
use crate::error::{validation, Error, Result};
use crate::hal::{self, HalBasis, HalFit, Link};
use crate::table::StratifiedTable;

/// Sieve settings shared by every HAL-backed fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HalOptions {
    pub max_degree: usize,
    pub max_knots_per_dim: usize,
    pub folds: usize,
    pub grid_len: usize,
    pub min_ratio: f64,
    /// Fixed penalty; cross-validated when absent.
    pub lambda: Option<f64>,
}

impl Default for HalOptions {
    fn default() -> Self {
        Self {
            max_degree: 2,
            max_knots_per_dim: 50,
            folds: 5,
            grid_len: 20,
            min_ratio: 1e-3,
            lambda: None,
        }
    }
}

/// Builds the basis on row-major `rows` and fits with a fixed or
/// cross-validated penalty.
pub(crate) fn fit_hal(
    rows: &[f64],
    dim: usize,
    y: &[f64],
    weights: &[f64],
    link: Link,
    opts: &HalOptions,
) -> Result<(HalBasis, HalFit)> {
    let basis = hal::build_basis(rows, dim, opts.max_degree, opts.max_knots_per_dim)?;
    let x = basis.design(rows, dim)?;
    let x = if dim == 0 {
        hal::SparseDesign { n_rows: y.len(), cols: Vec::new() }
    } else {
        x
    };
    let lambda = match opts.lambda {
        Some(l) => l,
        None => {
            let grid = hal::lambda_grid(&x, y, weights, link, opts.grid_len, opts.min_ratio)?;
            hal::cross_validate_lambda(&x, y, weights, link, opts.folds, &grid)?
        }
    };
    let fit = hal::fit_weighted_l1(&x, y, weights, lambda, link)?;
    Ok((basis, fit))
}

fn features(z: f64, w: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(w.len() + 1);
    f.push(z);
    f.extend_from_slice(w);
    f
}

fn feature_rows(data: &ObservedDataset) -> Vec<f64> {
    (0..data.len())
        .flat_map(|i| features(data.z[i], data.covariates(i)))
        .collect()
}

/// Estimated `p(A|Z,W)` for a binary treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionalKernel {
    /// `P(A = 1 | z, w)` indexed `[stratum][z]`.
    Tabular { table: StratifiedTable },
    /// Logistic HAL on the features `(z, w_1, .., w_d)`.
    Hal {
        basis: HalBasis,
        fit: HalFit,
        support: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    Tabular,
    Hal(HalOptions),
}

impl ConditionalKernel {
    pub fn tabular(table: StratifiedTable) -> Self {
        Self::Tabular { table }
    }

    pub fn support(&self) -> &[f64] {
        match self {
            Self::Tabular { table } => table.support(),
            Self::Hal { support, .. } => support,
        }
    }

    /// Strata the kernel is tabulated on, if any.
    pub fn table(&self) -> Option<&StratifiedTable> {
        match self {
            Self::Tabular { table } => Some(table),
            Self::Hal { .. } => None,
        }
    }

    pub fn p1(&self, z: f64, w: &[f64]) -> Result<f64> {
        match self {
            Self::Tabular { table } => table.get(z, w),
            Self::Hal { basis, fit, .. } => {
                if w.len() + 1 != basis.dim {
                    return Err(validation(format!(
                        "kernel expects {} covariates, got {}",
                        basis.dim - 1,
                        w.len()
                    )));
                }
                Ok(fit.mean_at(basis.predictor(fit, &features(z, w))))
            }
        }
    }

    /// `P(A = 1 | z, w)` where `vals` are the covariates in columns `cols`.
    pub fn p1_view(&self, z: f64, cols: &[usize], vals: &[f64]) -> Result<f64> {
        match self {
            Self::Tabular { table } => {
                let s = table.stratum_of_view(cols, vals)?;
                let k = table
                    .z_index(z)
                    .ok_or_else(|| validation(format!("instrument value {z} not in kernel support")))?;
                Ok(table.row(s)[k])
            }
            Self::Hal { basis, .. } => {
                let full: Vec<usize> = (0..basis.dim - 1).collect();
                if cols != full.as_slice() {
                    return Err(validation(format!(
                        "HAL kernel needs all covariate columns {full:?}, got {cols:?}"
                    )));
                }
                self.p1(z, vals)
            }
        }
    }

    pub fn prob(&self, a: f64, z: f64, w: &[f64]) -> Result<f64> {
        let p = self.p1(z, w)?;
        Ok(if a == 1.0 { p } else { 1.0 - p })
    }
}

/// Fits `p(A|Z,W)` on all covariate columns.
pub fn fit_treatment_kernel(data: &ObservedDataset, kind: &KernelKind) -> Result<ConditionalKernel> {
    fit_treatment_kernel_on(data, &data.all_columns(), kind)
}

/// Fits `p(A|Z,W_S)` on the covariate subset `columns`.
pub fn fit_treatment_kernel_on(
    data: &ObservedDataset,
    columns: &[usize],
    kind: &KernelKind,
) -> Result<ConditionalKernel> {
    if data.is_empty() {
        return Err(validation("dataset is empty"));
    }
    if !data.is_binary_treatment() {
        return Err(validation("treatment kernel needs a binary treatment"));
    }
    let support = data.instrument_support();
    match kind {
        KernelKind::Tabular => {
            let (strata, assign) = data.strata(columns)?;
            let q = support.len();
            let mut n = vec![vec![0.0f64; q]; strata.len()];
            let mut ones = vec![vec![0.0f64; q]; strata.len()];
            for i in 0..data.len() {
                let k = support.iter().position(|z| *z == data.z[i]).unwrap_or(0);
                n[assign[i]][k] += 1.0;
                ones[assign[i]][k] += data.a[i];
            }
            let empty: Vec<String> = (0..strata.len())
                .flat_map(|s| (0..q).map(move |k| (s, k)))
                .filter(|&(s, k)| n[s][k] == 0.0)
                .map(|(s, k)| format!("(w={:?}, z={})", strata[s], support[k]))
                .collect();
            if !empty.is_empty() {
                return Err(validation(format!(
                    "no observations in stratum {}",
                    empty.join(", ")
                )));
            }
            let values = ones
                .iter()
                .zip(&n)
                .map(|(o, n)| o.iter().zip(n).map(|(o, n)| o / n).collect())
                .collect();
            Ok(ConditionalKernel::tabular(StratifiedTable::new(
                columns.to_vec(),
                strata,
                support,
                values,
            )?))
        }
        KernelKind::Hal(opts) => {
            if columns != data.all_columns().as_slice() {
                return Err(Error::Unsupported("HAL kernels are fit on all covariate columns".into()));
            }
            let rows = feature_rows(data);
            let weights = vec![1.0; data.len()];
            let (basis, fit) = fit_hal(&rows, data.dim + 1, &data.a, &weights, Link::Logit, opts)?;
            Ok(ConditionalKernel::Hal { basis, fit, support })
        }
    }
}

/// Tabular natural instrument density `h(z|w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentDensity {
    table: StratifiedTable,
}

impl InstrumentDensity {
    pub fn new(table: StratifiedTable) -> Self {
        Self { table }
    }

    pub fn table(&self) -> &StratifiedTable {
        &self.table
    }

    pub fn support(&self) -> &[f64] {
        self.table.support()
    }

    pub fn validate(&self) -> Result<()> {
        self.table.validate_pmf_rows("instrument density", 1e-9)
    }

    /// `h(z|w)`; zero for `z` outside the support.
    pub fn prob(&self, z: f64, w: &[f64]) -> Result<f64> {
        let s = self.table.stratum_of(w)?;
        Ok(self.table.z_index(z).map_or(0.0, |k| self.table.row(s)[k]))
    }

    pub fn prob_view(&self, z: f64, cols: &[usize], vals: &[f64]) -> Result<f64> {
        let s = self.table.stratum_of_view(cols, vals)?;
        Ok(self.table.z_index(z).map_or(0.0, |k| self.table.row(s)[k]))
    }

    /// Whether `h(z|w) > 0`.
    pub fn positive(&self, z: f64, w: &[f64]) -> Result<bool> {
        Ok(self.prob(z, w)? > 0.0)
    }
}

pub fn fit_instrument_density(data: &ObservedDataset) -> Result<InstrumentDensity> {
    fit_instrument_density_on(data, &data.all_columns())
}

/// Empirical `h(z|w_S)` per observed stratum of the covariate subset `columns`.
pub fn fit_instrument_density_on(data: &ObservedDataset, columns: &[usize]) -> Result<InstrumentDensity> {
    if data.is_empty() {
        return Err(validation("dataset is empty"));
    }
    let support = data.instrument_support();
    let (strata, assign) = data.strata(columns)?;
    let mut counts = vec![vec![0.0f64; support.len()]; strata.len()];
    for i in 0..data.len() {
        let k = support.iter().position(|z| *z == data.z[i]).unwrap_or(0);
        counts[assign[i]][k] += 1.0;
    }
    let values = counts
        .into_iter()
        .map(|row| {
            let n: f64 = row.iter().sum();
            row.into_iter().map(|c| c / n).collect()
        })
        .collect();
    Ok(InstrumentDensity::new(StratifiedTable::new(
        columns.to_vec(),
        strata,
        support,
        values,
    )?))
}

/// Estimated `Q(z, w) = E[Y | Z = z, W = w]` with the outcome range used
/// to scale the logistic fluctuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeRegression {
    /// Coefficients `(intercept, z, w_1, .., w_d)`.
    OlsMainEffects { coef: Vec<f64>, bounds: (f64, f64) },
    /// Cell means indexed `[stratum][z]`.
    Saturated { table: StratifiedTable, bounds: (f64, f64) },
    Hal {
        basis: HalBasis,
        fit: HalFit,
        bounds: (f64, f64),
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    #[default]
    OlsMainEffects,
    Saturated,
    Hal(HalOptions),
}

impl OutcomeRegression {
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Self::OlsMainEffects { bounds, .. } | Self::Saturated { bounds, .. } | Self::Hal { bounds, .. } => *bounds,
        }
    }

    pub fn predict(&self, z: f64, w: &[f64]) -> Result<f64> {
        match self {
            Self::OlsMainEffects { coef, .. } => {
                if coef.len() != w.len() + 2 {
                    return Err(validation(format!(
                        "regression has {} covariate coefficients, row has {} covariates",
                        coef.len() - 2,
                        w.len()
                    )));
                }
                Ok(coef[0] + coef[1] * z + coef[2..].iter().zip(w).map(|(b, x)| b * x).sum::<f64>())
            }
            Self::Saturated { table, .. } => {
                let s = table.stratum_of(w)?;
                let k = table.z_index(z).ok_or_else(|| {
                    validation(format!("saturated regression has no cell for z={z}"))
                })?;
                Ok(table.row(s)[k])
            }
            Self::Hal { basis, fit, .. } => Ok(basis.predictor(fit, &features(z, w))),
        }
    }
}

pub fn fit_outcome_regression(data: &ObservedDataset, kind: &OutcomeKind) -> Result<OutcomeRegression> {
    let bounds = data.y_range().ok_or_else(|| validation("dataset is empty"))?;
    match kind {
        OutcomeKind::OlsMainEffects => {
            let coef = ols_main_effects(data)?;
            Ok(OutcomeRegression::OlsMainEffects { coef, bounds })
        }
        OutcomeKind::Saturated => {
            let columns = data.all_columns();
            let (strata, assign) = data.strata(&columns)?;
            let support = data.instrument_support();
            let q = support.len();
            let mut n = vec![vec![0.0f64; q]; strata.len()];
            let mut sum = vec![vec![0.0f64; q]; strata.len()];
            for i in 0..data.len() {
                let k = support.iter().position(|z| *z == data.z[i]).unwrap_or(0);
                n[assign[i]][k] += 1.0;
                sum[assign[i]][k] += data.y[i];
            }
            let mut values = Vec::with_capacity(strata.len());
            for s in 0..strata.len() {
                let mut row = Vec::with_capacity(q);
                for k in 0..q {
                    if n[s][k] == 0.0 {
                        return Err(validation(format!(
                            "saturated regression: no observations in stratum (w={:?}, z={})",
                            strata[s], support[k]
                        )));
                    }
                    row.push(sum[s][k] / n[s][k]);
                }
                values.push(row);
            }
            Ok(OutcomeRegression::Saturated {
                table: StratifiedTable::new(columns, strata, support, values)?,
                bounds,
            })
        }
        OutcomeKind::Hal(opts) => {
            let rows = feature_rows(data);
            let weights = vec![1.0; data.len()];
            let (basis, fit) = fit_hal(&rows, data.dim + 1, &data.y, &weights, Link::Identity, opts)?;
            Ok(OutcomeRegression::Hal { basis, fit, bounds })
        }
    }
}

/// Normal equations for `y ~ 1 + z + w`.
fn ols_main_effects(data: &ObservedDataset) -> Result<Vec<f64>> {
    let p = data.dim + 2;
    let n = data.len();
    if n == 0 {
        return Err(validation("dataset is empty"));
    }
    let x = DMatrix::from_fn(n, p, |i, j| match j {
        0 => 1.0,
        1 => data.z[i],
        _ => data.covariates(i)[j - 2],
    });
    let y = DVector::from_column_slice(&data.y);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * y;
    let eig = xtx.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= max * 1e-12 {
        return Err(Error::Singular(
            "design of y ~ 1 + z + w is rank deficient (constant or collinear columns)".into(),
        ));
    }
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Singular("normal equations are not positive definite".into()))?;
    Ok(chol.solve(&xty).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_rows() -> ObservedDataset {
        ObservedDataset::new(
            1,
            vec![0.0, 0.0, 1.0, 1.0],
            vec![0.0, 1.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0, 0.0],
            vec![1.5, 2.0, -3.0, 4.0],
        )
        .unwrap()
    }

    #[test]
    fn single_observation_strata_give_exact_frequencies() {
        let k = fit_treatment_kernel(&four_rows(), &KernelKind::Tabular).unwrap();
        assert_eq!(k.p1(0.0, &[0.0]).unwrap(), 0.0);
        assert_eq!(k.p1(1.0, &[0.0]).unwrap(), 1.0);
        assert_eq!(k.p1(0.0, &[1.0]).unwrap(), 1.0);
        assert_eq!(k.prob(0.0, 1.0, &[1.0]).unwrap(), 1.0);
    }

    #[test]
    fn empty_stratum_is_reported() {
        let d = ObservedDataset::new(1, vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let err = fit_treatment_kernel(&d, &KernelKind::Tabular).unwrap_err().to_string();
        assert!(err.contains("w=[0.0], z=1"), "{err}");
    }

    #[test]
    fn saturated_interpolates() {
        let d = four_rows();
        let q = fit_outcome_regression(&d, &OutcomeKind::Saturated).unwrap();
        for i in 0..4 {
            assert_eq!(q.predict(d.z[i], d.covariates(i)).unwrap(), d.y[i]);
        }
        assert_eq!(q.bounds(), (-3.0, 4.0));
    }

    #[test]
    fn ols_recovers_noiseless_line() {
        let z = vec![0.0, 1.0, 0.0, 1.0, 1.0];
        let w = vec![0.0, 0.0, 1.0, 1.0, 2.0];
        let y: Vec<f64> = z.iter().map(|z| 2.0 * z + 3.0).collect();
        let d = ObservedDataset::new(1, w, z.clone(), vec![0.0; 5], y).unwrap();
        let OutcomeRegression::OlsMainEffects { coef, .. } =
            fit_outcome_regression(&d, &OutcomeKind::OlsMainEffects).unwrap()
        else {
            panic!()
        };
        for (c, t) in coef.iter().zip([3.0, 2.0, 0.0]) {
            assert!((c - t).abs() < 1e-10, "{coef:?}");
        }
    }

    #[test]
    fn ols_rejects_constant_instrument() {
        let d = ObservedDataset::new(1, vec![0.0, 1.0, 2.0], vec![1.0; 3], vec![0.0; 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            fit_outcome_regression(&d, &OutcomeKind::OlsMainEffects),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn single_stratum_density_is_marginal_frequency() {
        let d = ObservedDataset::new(0, vec![], vec![0.0, 1.0, 1.0, 1.0], vec![0.0; 4], vec![0.0; 4]).unwrap();
        let h = fit_instrument_density(&d).unwrap();
        assert_eq!(h.prob(1.0, &[]).unwrap(), 0.75);
        assert_eq!(h.prob(2.0, &[]).unwrap(), 0.0);
    }

    #[test]
    fn hal_kernel_tracks_perfect_compliance() {
        let n = 200;
        let z: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let w: Vec<f64> = (0..n).map(|i| ((i / 2) % 3) as f64).collect();
        let d = ObservedDataset::new(1, w, z.clone(), z, vec![0.0; n]).unwrap();
        let k = fit_treatment_kernel(
            &d,
            &KernelKind::Hal(HalOptions {
                lambda: Some(1e-3),
                ..HalOptions::default()
            }),
        )
        .unwrap();
        assert!(k.p1(1.0, &[1.0]).unwrap() > 0.95);
        assert!(k.p1(0.0, &[2.0]).unwrap() < 0.05);
    }
}
