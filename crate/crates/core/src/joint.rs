//! Discrete joint law of `(W, Z, A)` with cell outcome means.
//!
//! Built either exactly from an [`NpsemSpec`] (natural or instrument-intervened
//! world) or empirically from an [`ObservedDataset`]. Every identification
//! formula in the crate has an enumeration counterpart computed from this
//! type, which is what the exact oracles in the tests use.

use std::collections::HashMap;

use crate::data::{distinct_sorted, ObservedDataset};
use crate::estimators::CovariateLaw;
use crate::error::{validation, Result};
use crate::induced::{BMatrix, InducedMarginal, InstrumentPolicy, Provenance};
use crate::math::key_of;
use crate::npsem::NpsemSpec;
use crate::nuisance::{ConditionalKernel, InstrumentDensity, OutcomeRegression};
use crate::table::StratifiedTable;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    /// Covariate columns the strata are defined on.
    pub columns: Vec<usize>,
    pub strata: Vec<Vec<f64>>,
    pub support: Vec<f64>,
    /// `P(W = s, Z = z, A = a)`, indexed `[s][z][a]`.
    pub prob: Vec<Vec<[f64; 2]>>,
    /// `E[Y | W = s, Z = z, A = a]`; zero on empty cells.
    pub mean_y: Vec<Vec<[f64; 2]>>,
}

impl DiscreteJoint {
    /// Natural-world joint of a discrete model.
    pub fn natural(spec: &NpsemSpec) -> Result<Self> {
        spec.validate()?;
        let rows = spec.instrument_policy.clone();
        Ok(Self::from_rows(spec, &rows))
    }

    /// Joint of `(W, Z*, A*)` with `Z* ~ policy` and `A*` propagated through
    /// the unaltered treatment equation.
    pub fn intervened(spec: &NpsemSpec, policy: &InstrumentPolicy) -> Result<Self> {
        spec.validate()?;
        let rows: Vec<Vec<f64>> = (0..spec.n_strata())
            .map(|s| spec.policy_row_unchecked(policy, s))
            .collect::<Result<_>>()?;
        Ok(Self::from_rows(spec, &rows))
    }

    fn from_rows(spec: &NpsemSpec, rows: &[Vec<f64>]) -> Self {
        let q = spec.instrument_support.len();
        let mut prob = Vec::with_capacity(spec.n_strata());
        let mut mean_y = Vec::with_capacity(spec.n_strata());
        for (s, row) in rows.iter().enumerate() {
            let pw = spec.covariate_pmf[s];
            let mut pr = Vec::with_capacity(q);
            let mut my = Vec::with_capacity(q);
            for (k, h) in row.iter().enumerate() {
                let p = spec.kernel_p1(k, s);
                pr.push([pw * h * (1.0 - p), pw * h * p]);
                my.push([spec.cell_mean(0, p, s), spec.cell_mean(1, p, s)]);
            }
            prob.push(pr);
            mean_y.push(my);
        }
        Self {
            columns: spec.all_columns(),
            strata: spec.covariate_values.clone(),
            support: spec.instrument_support.clone(),
            prob,
            mean_y,
        }
    }

    /// Empirical joint on the covariate `columns` of a binary-treatment dataset.
    pub fn from_data(data: &ObservedDataset, columns: &[usize]) -> Result<Self> {
        if data.is_empty() {
            return Err(validation("dataset is empty"));
        }
        if !data.is_binary_treatment() {
            return Err(validation("the discrete joint needs a binary treatment"));
        }
        let (strata, assign) = data.strata(columns)?;
        let support = distinct_sorted(&data.z);
        let zpos: HashMap<Vec<u64>, usize> =
            support.iter().enumerate().map(|(k, z)| (key_of(&[*z]), k)).collect();
        let q = support.len();
        let mut count = vec![vec![[0.0f64; 2]; q]; strata.len()];
        let mut sum_y = vec![vec![[0.0f64; 2]; q]; strata.len()];
        for i in 0..data.len() {
            let k = zpos[&key_of(&[data.z[i]])];
            let a = data.a[i] as usize;
            count[assign[i]][k][a] += 1.0;
            sum_y[assign[i]][k][a] += data.y[i];
        }
        let n = data.len() as f64;
        let mut prob = count.clone();
        let mut mean_y = sum_y;
        for s in 0..strata.len() {
            for k in 0..q {
                for a in 0..2 {
                    prob[s][k][a] = count[s][k][a] / n;
                    if count[s][k][a] > 0.0 {
                        mean_y[s][k][a] /= count[s][k][a];
                    }
                }
            }
        }
        Ok(Self {
            columns: columns.to_vec(),
            strata,
            support,
            prob,
            mean_y,
        })
    }

    pub fn n_strata(&self) -> usize {
        self.strata.len()
    }

    pub fn total(&self) -> f64 {
        self.prob.iter().flatten().map(|c| c[0] + c[1]).sum()
    }

    pub fn w_pmf(&self, s: usize) -> f64 {
        self.prob[s].iter().map(|c| c[0] + c[1]).sum()
    }

    fn zw_mass(&self, s: usize, k: usize) -> f64 {
        self.prob[s][k][0] + self.prob[s][k][1]
    }

    /// `h(z|w)`; `None` on a zero-mass stratum.
    pub fn h(&self, s: usize, k: usize) -> Option<f64> {
        let pw = self.w_pmf(s);
        (pw > 0.0).then(|| self.zw_mass(s, k) / pw)
    }

    /// `P(A = 1 | z, w)`; `None` on a zero-mass cell.
    pub fn kernel_p1(&self, s: usize, k: usize) -> Option<f64> {
        let m = self.zw_mass(s, k);
        (m > 0.0).then(|| self.prob[s][k][1] / m)
    }

    /// `E[Y | z, w]`; `None` on a zero-mass cell.
    pub fn q(&self, s: usize, k: usize) -> Option<f64> {
        let m = self.zw_mass(s, k);
        (m > 0.0).then(|| (self.prob[s][k][0] * self.mean_y[s][k][0] + self.prob[s][k][1] * self.mean_y[s][k][1]) / m)
    }

    /// Observational `P(A = 1 | w)`.
    pub fn g1(&self, s: usize) -> Option<f64> {
        let pw = self.w_pmf(s);
        (pw > 0.0).then(|| self.prob[s].iter().map(|c| c[1]).sum::<f64>() / pw)
    }

    /// `P(Z = z | A = a, W = w)`; `None` when `P(A = a, W = w) = 0`.
    pub fn z_given_aw(&self, s: usize, a: usize, k: usize) -> Option<f64> {
        let m: f64 = self.prob[s].iter().map(|c| c[a]).sum();
        (m > 0.0).then(|| self.prob[s][k][a] / m)
    }

    pub fn mean_outcome(&self) -> f64 {
        self.prob
            .iter()
            .zip(&self.mean_y)
            .flat_map(|(p, m)| p.iter().zip(m))
            .map(|(p, m)| p[0] * m[0] + p[1] * m[1])
            .sum()
    }

    /// Marginalizes onto a subset of this joint's covariate columns.
    pub fn marginalize(&self, columns: &[usize]) -> Result<Self> {
        let pos: Vec<usize> = columns
            .iter()
            .map(|c| {
                self.columns
                    .iter()
                    .position(|x| x == c)
                    .ok_or_else(|| validation(format!("column {c} is not in the joint's columns {:?}", self.columns)))
            })
            .collect::<Result<_>>()?;
        let q = self.support.len();
        let mut strata: Vec<Vec<f64>> = Vec::new();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut prob: Vec<Vec<[f64; 2]>> = Vec::new();
        let mut weighted: Vec<Vec<[f64; 2]>> = Vec::new();
        let mut order: Vec<usize> = (0..self.n_strata()).collect();
        let key_rows: Vec<Vec<f64>> = self.strata.iter().map(|w| pos.iter().map(|&p| w[p]).collect()).collect();
        order.sort_by(|&a, &b| crate::math::cmp_rows(&key_rows[a], &key_rows[b]));
        for s in order {
            let key = &key_rows[s];
            let t = *index.entry(key_of(key)).or_insert_with(|| {
                strata.push(key.clone());
                prob.push(vec![[0.0; 2]; q]);
                weighted.push(vec![[0.0; 2]; q]);
                strata.len() - 1
            });
            for k in 0..q {
                for a in 0..2 {
                    prob[t][k][a] += self.prob[s][k][a];
                    weighted[t][k][a] += self.prob[s][k][a] * self.mean_y[s][k][a];
                }
            }
        }
        let mean_y = prob
            .iter()
            .zip(&weighted)
            .map(|(p, w)| {
                p.iter()
                    .zip(w)
                    .map(|(p, w)| {
                        let f = |a: usize| if p[a] > 0.0 { w[a] / p[a] } else { 0.0 };
                        [f(0), f(1)]
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            columns: columns.to_vec(),
            strata,
            support: self.support.clone(),
            prob,
            mean_y,
        })
    }

    fn require_positive(&self, what: &str, s: usize, k: usize, v: Option<f64>) -> Result<f64> {
        v.ok_or_else(|| {
            validation(format!(
                "{what}: cell (w={:?}, z={}) has no mass",
                self.strata[s], self.support[k]
            ))
        })
    }

    /// Treatment kernel `P(A = 1 | z, w)` as a tabular fit.
    pub fn kernel(&self) -> Result<ConditionalKernel> {
        let mut values = Vec::with_capacity(self.n_strata());
        for s in 0..self.n_strata() {
            let row = (0..self.support.len())
                .map(|k| self.require_positive("treatment kernel", s, k, self.kernel_p1(s, k)))
                .collect::<Result<_>>()?;
            values.push(row);
        }
        Ok(ConditionalKernel::tabular(self.table(values)?))
    }

    /// Natural instrument density `h(z|w)`.
    pub fn density(&self) -> Result<InstrumentDensity> {
        let mut values = Vec::with_capacity(self.n_strata());
        for s in 0..self.n_strata() {
            let pw = self.w_pmf(s);
            if pw <= 0.0 {
                return Err(validation(format!("stratum {:?} has no mass", self.strata[s])));
            }
            values.push((0..self.support.len()).map(|k| self.zw_mass(s, k) / pw).collect());
        }
        Ok(InstrumentDensity::new(self.table(values)?))
    }

    /// Saturated outcome regression `E[Y | z, w]`.
    pub fn outcome_regression(&self) -> Result<OutcomeRegression> {
        let mut values = Vec::with_capacity(self.n_strata());
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in 0..self.n_strata() {
            let row: Vec<f64> = (0..self.support.len())
                .map(|k| self.require_positive("outcome regression", s, k, self.q(s, k)))
                .collect::<Result<_>>()?;
            for v in &row {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
            values.push(row);
        }
        Ok(OutcomeRegression::Saturated {
            table: self.table(values)?,
            bounds: (lo, hi),
        })
    }

    /// Marginal law of the strata.
    pub fn covariate_law(&self) -> CovariateLaw {
        CovariateLaw {
            strata: self.strata.clone(),
            pmf: (0..self.n_strata()).map(|s| self.w_pmf(s)).collect(),
        }
    }

    /// Observational `P(A | W)`.
    pub fn observed_marginal(&self) -> Result<InducedMarginal> {
        let p1 = (0..self.n_strata())
            .map(|s| {
                self.g1(s)
                    .ok_or_else(|| validation(format!("stratum {:?} has no mass", self.strata[s])))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut g = InducedMarginal::binary(self.columns.clone(), self.strata.clone(), p1)?;
        g.provenance = Provenance::Observed;
        Ok(g)
    }

    /// `P(Z = z | A = a, W = w)` as one table per treatment value. Rows with
    /// `P(A = a, W = w) = 0` are filled with zeros.
    pub fn posterior_tables(&self) -> Result<[StratifiedTable; 2]> {
        let make = |a: usize| -> Result<StratifiedTable> {
            let values = (0..self.n_strata())
                .map(|s| {
                    (0..self.support.len())
                        .map(|k| self.z_given_aw(s, a, k).unwrap_or(0.0))
                        .collect()
                })
                .collect();
            self.table(values)
        };
        Ok([make(0)?, make(1)?])
    }

    /// The per-stratum operator `B` of the joint of `(Z, A)` given `W = s`.
    pub fn b_matrix(&self, s: usize) -> Result<BMatrix> {
        let pw = self.w_pmf(s);
        if pw <= 0.0 {
            return Err(validation(format!("stratum {:?} has no mass", self.strata[s])));
        }
        let joint: Vec<Vec<f64>> = self.prob[s]
            .iter()
            .map(|c| vec![c[0] / pw, c[1] / pw])
            .collect();
        BMatrix::from_joint(&joint)
    }

    fn table(&self, values: Vec<Vec<f64>>) -> Result<StratifiedTable> {
        StratifiedTable::new(self.columns.clone(), self.strata.clone(), self.support.clone(), values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn natural_toy_joint_matches_hand_values() {
        let j = DiscreteJoint::natural(&NpsemSpec::toy()).unwrap();
        assert!((j.total() - 1.0).abs() < 1e-15);
        assert!((j.g1(0).unwrap() - 0.42).abs() < 1e-12);
        assert!((j.g1(1).unwrap() - 0.56).abs() < 1e-12);
        assert!((j.mean_outcome() - 0.724).abs() < 1e-12);
        assert!((j.h(1, 1).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn marginalizing_to_nothing_pools_strata() {
        let j = DiscreteJoint::natural(&NpsemSpec::toy()).unwrap();
        let m = j.marginalize(&[]).unwrap();
        assert_eq!(m.n_strata(), 1);
        assert!((m.w_pmf(0) - 1.0).abs() < 1e-15);
        assert!((m.mean_outcome() - j.mean_outcome()).abs() < 1e-12);
        assert!(j.marginalize(&[3]).is_err());
    }

    #[test]
    fn empirical_joint_from_four_rows() {
        let d = ObservedDataset::new(
            1,
            vec![0.0, 0.0, 1.0, 1.0],
            vec![0.0, 1.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0, 0.0],
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let j = DiscreteJoint::from_data(&d, &[0]).unwrap();
        assert_eq!(j.kernel_p1(0, 1), Some(1.0));
        assert_eq!(j.q(1, 1), Some(4.0));
        assert_eq!(j.prob[1][0][1], 0.25);
    }
}
