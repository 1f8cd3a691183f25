//! The induced-marginal map `h* -> g(h*)(a|w) = sum_z p(a|z,w) h*(z|w)`,
//! its Bayes form, the finite operator `B`, Z-compatibility, implied-policy
//! inversion for binary instruments, and the reduced-covariate family.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::hal::{HalBasis, HalFit};
use crate::joint::DiscreteJoint;
use crate::nuisance::{ConditionalKernel, InstrumentDensity};
use crate::table::StratifiedTable;

/// Tolerance on interval membership in the Z-compatibility check.
pub const COMPATIBILITY_TOL: f64 = 1e-9;
/// Strata with `|g1 - g0|` at or below this are treated as weak-instrument strata.
pub const DEGENERATE_TOL: f64 = 1e-12;
const ROW_TOL: f64 = 1e-9;

/// A stochastic policy `h*(z|w)` on the instrument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InstrumentPolicy {
    /// `h*(z|w)` indexed `[stratum][z]`, possibly on a subset of covariate columns.
    Tabular { table: StratifiedTable },
    /// `h*(1|w) = expit(basis(w) . beta)` for a binary instrument.
    BasisLogistic { basis: HalBasis, fit: HalFit },
}

impl InstrumentPolicy {
    pub fn tabular(table: StratifiedTable) -> Result<Self> {
        table.validate_pmf_rows("instrument policy", ROW_TOL)?;
        Ok(Self::Tabular { table })
    }

    /// Binary policy from `h*(1|w)` per stratum.
    pub fn binary(columns: Vec<usize>, strata: Vec<Vec<f64>>, p1: Vec<f64>) -> Result<Self> {
        let values = p1.iter().map(|p| vec![1.0 - p, *p]).collect();
        Self::tabular(StratifiedTable::new(columns, strata, vec![0.0, 1.0], values)?)
    }

    /// The same row for every covariate value.
    pub fn constant(support: Vec<f64>, row: Vec<f64>) -> Result<Self> {
        Self::tabular(StratifiedTable::constant(support, row)?)
    }

    /// All mass on `z0` regardless of covariates.
    pub fn point_mass(support: Vec<f64>, z0: f64) -> Result<Self> {
        let row = support.iter().map(|z| if *z == z0 { 1.0 } else { 0.0 }).collect();
        Self::constant(support, row)
    }

    pub fn from_density(h: &InstrumentDensity) -> Self {
        Self::Tabular { table: h.table().clone() }
    }

    pub fn support(&self) -> Vec<f64> {
        match self {
            Self::Tabular { table } => table.support().to_vec(),
            Self::BasisLogistic { .. } => vec![0.0, 1.0],
        }
    }

    /// Covariate columns the policy conditions on.
    pub fn columns(&self) -> Vec<usize> {
        match self {
            Self::Tabular { table } => table.columns().to_vec(),
            Self::BasisLogistic { basis, .. } => (0..basis.dim).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Tabular { table } => table.validate_pmf_rows("instrument policy", ROW_TOL),
            Self::BasisLogistic { basis, fit } => {
                if basis.len() != fit.beta.len() {
                    return Err(validation("policy basis and coefficients disagree in length"));
                }
                Ok(())
            }
        }
    }

    /// `h*(z|w)` for a full covariate vector; zero off the support.
    pub fn prob(&self, z: f64, w: &[f64]) -> Result<f64> {
        match self {
            Self::Tabular { table } => {
                let s = table.stratum_of(w)?;
                Ok(table.z_index(z).map_or(0.0, |k| table.row(s)[k]))
            }
            Self::BasisLogistic { basis, fit } => {
                if w.len() < basis.dim {
                    return Err(validation(format!(
                        "policy needs {} covariates, got {}",
                        basis.dim,
                        w.len()
                    )));
                }
                let p1 = fit.mean_at(basis.predictor(fit, &w[..basis.dim]));
                Ok(if z == 1.0 {
                    p1
                } else if z == 0.0 {
                    1.0 - p1
                } else {
                    0.0
                })
            }
        }
    }

    /// `h*(z|w)` where `vals` holds the covariates in columns `cols`.
    pub fn prob_view(&self, z: f64, cols: &[usize], vals: &[f64]) -> Result<f64> {
        match self {
            Self::Tabular { table } => {
                let s = table.stratum_of_view(cols, vals)?;
                Ok(table.z_index(z).map_or(0.0, |k| table.row(s)[k]))
            }
            Self::BasisLogistic { basis, .. } => {
                let mut w = vec![0.0; basis.dim];
                for (d, slot) in w.iter_mut().enumerate() {
                    let pos = cols.iter().position(|c| *c == d).ok_or_else(|| {
                        validation(format!("policy needs covariate column {d}, not in {cols:?}"))
                    })?;
                    *slot = vals[pos];
                }
                self.prob(z, &w)
            }
        }
    }

    /// `h*(1|w)` for a binary instrument.
    pub fn p1(&self, w: &[f64]) -> Result<f64> {
        self.prob(1.0, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    InducedFromPolicy,
    #[default]
    UserTarget,
    Observed,
}

/// Conditional treatment pmf `g(a|w)` per covariate stratum, `a in {0, 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducedMarginal {
    table: StratifiedTable,
    pub provenance: Provenance,
}

impl InducedMarginal {
    /// From `g(1|w)` per stratum.
    pub fn binary(columns: Vec<usize>, strata: Vec<Vec<f64>>, p1: Vec<f64>) -> Result<Self> {
        let values = p1.iter().map(|p| vec![1.0 - p, *p]).collect();
        let g = Self {
            table: StratifiedTable::new(columns, strata, vec![0.0, 1.0], values)?,
            provenance: Provenance::UserTarget,
        };
        g.validate()?;
        Ok(g)
    }

    /// From a table whose support is the treatment values `(0, 1)`.
    pub fn from_table(table: StratifiedTable, provenance: Provenance) -> Result<Self> {
        if table.support() != [0.0, 1.0] {
            return Err(validation("treatment marginal must be over a in {0, 1}"));
        }
        Ok(Self { table, provenance })
    }

    pub fn validate(&self) -> Result<()> {
        self.table.validate_pmf_rows("treatment marginal", ROW_TOL)
    }

    pub fn table(&self) -> &StratifiedTable {
        &self.table
    }

    pub fn columns(&self) -> &[usize] {
        self.table.columns()
    }

    pub fn strata(&self) -> &[Vec<f64>] {
        self.table.strata()
    }

    /// `g(1|w)` per stratum, in stratum order.
    pub fn p1_rows(&self) -> Vec<f64> {
        self.table.values().iter().map(|r| r[1]).collect()
    }

    pub fn p1(&self, w: &[f64]) -> Result<f64> {
        self.table.get(1.0, w)
    }

    pub fn p1_view(&self, cols: &[usize], vals: &[f64]) -> Result<f64> {
        Ok(self.table.row(self.table.stratum_of_view(cols, vals)?)[1])
    }
}

fn kernel_strata(kernel: &ConditionalKernel, policy: &InstrumentPolicy) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    match (kernel.table(), policy) {
        (Some(t), _) => Ok((t.columns().to_vec(), t.strata().to_vec())),
        (None, InstrumentPolicy::Tabular { table }) => Ok((table.columns().to_vec(), table.strata().to_vec())),
        _ => Err(Error::Unsupported(
            "neither the kernel nor the policy is tabulated; use induced_marginal_at with explicit strata".into(),
        )),
    }
}

/// `g(h*)(a|w)` on the kernel's strata (or the policy's, for a HAL kernel).
pub fn induced_marginal(kernel: &ConditionalKernel, policy: &InstrumentPolicy) -> Result<InducedMarginal> {
    let (columns, strata) = kernel_strata(kernel, policy)?;
    induced_marginal_at(kernel, policy, &columns, &strata)
}

/// `g(h*)(1|w) = sum_z p(1|z,w) h*(z|w)` evaluated on the given strata.
pub fn induced_marginal_at(
    kernel: &ConditionalKernel,
    policy: &InstrumentPolicy,
    columns: &[usize],
    strata: &[Vec<f64>],
) -> Result<InducedMarginal> {
    let ksup = kernel.support();
    let mut p1 = Vec::with_capacity(strata.len());
    for vals in strata {
        let mut g = 0.0;
        for z in policy.support() {
            let mass = policy.prob_view(z, columns, vals)?;
            if mass == 0.0 {
                continue;
            }
            if !ksup.contains(&z) {
                return Err(validation(format!(
                    "policy puts mass on z={z}, outside the kernel support {ksup:?}"
                )));
            }
            g += mass * kernel.p1_view(z, columns, vals)?;
        }
        p1.push(g.clamp(0.0, 1.0));
    }
    let mut g = InducedMarginal::binary(columns.to_vec(), strata.to_vec(), p1)?;
    g.provenance = Provenance::InducedFromPolicy;
    Ok(g)
}

/// Bayes form `g(a|w) E[h*(Z|w)/h(Z|w) | A = a, W = w]`.
///
/// `z_given_aw[a]` holds `P(Z = z | A = a, W = w)`; strata are taken from `g_obs`.
pub fn induced_marginal_bayes(
    g_obs: &InducedMarginal,
    h: &InstrumentDensity,
    policy: &InstrumentPolicy,
    z_given_aw: &[StratifiedTable; 2],
) -> Result<InducedMarginal> {
    let cols = g_obs.columns().to_vec();
    let mut values = Vec::with_capacity(g_obs.strata().len());
    for (s, vals) in g_obs.strata().iter().enumerate() {
        let g_row = g_obs.table().row(s);
        let mut row = [0.0; 2];
        for a in 0..2 {
            if g_row[a] == 0.0 {
                continue;
            }
            let post = &z_given_aw[a];
            let ps = post.stratum_of_view(&cols, vals)?;
            let mut ratio = 0.0;
            for (k, &z) in post.support().iter().enumerate() {
                let pz = post.row(ps)[k];
                if pz == 0.0 {
                    continue;
                }
                let hs = policy.prob_view(z, &cols, vals)?;
                let hn = h.prob_view(z, &cols, vals)?;
                if hn == 0.0 {
                    if hs > 0.0 {
                        return Err(Error::Positivity(format!(
                            "h(z={z}|w={vals:?}) = 0 but the policy puts mass {hs} there"
                        )));
                    }
                    continue;
                }
                ratio += pz * hs / hn;
            }
            row[a] = g_row[a] * ratio;
        }
        values.push(row.to_vec());
    }
    let table = StratifiedTable::new(cols, g_obs.strata().to_vec(), vec![0.0, 1.0], values)?;
    InducedMarginal::from_table(table, Provenance::InducedFromPolicy)
}

/// Marginals of the joint that generated a [`BMatrix`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSummary {
    /// `P(A = a)`.
    pub g: Vec<f64>,
    /// `P(Z = z)`.
    pub h: Vec<f64>,
    /// `P(Z = z | A = a)`, indexed `[a][z]`.
    pub b: Vec<Vec<f64>>,
}

/// Finite operator mapping a policy vector over the instrument support to
/// the induced treatment pmf: `(B h*)(a) = sum_z P(a|z) h*(z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BMatrix {
    /// Entries indexed `[a][z]`.
    pub entries: Vec<Vec<f64>>,
    pub joint: Option<JointSummary>,
}

impl BMatrix {
    /// From raw entries (e.g. a CSV import); every row must have the same length.
    pub fn from_entries(entries: Vec<Vec<f64>>) -> Result<Self> {
        let q = entries.first().map_or(0, |r| r.len());
        if entries.is_empty() || q == 0 {
            return Err(validation("B matrix is empty"));
        }
        for (a, row) in entries.iter().enumerate() {
            if row.len() != q {
                return Err(validation(format!("B row {a} has {} entries, expected {q}", row.len())));
            }
            if let Some(z) = row.iter().position(|v| !v.is_finite()) {
                return Err(validation(format!("B entry ({a}, {z}) is not finite")));
            }
        }
        Ok(Self { entries, joint: None })
    }

    /// From the joint pmf `P(Z = z, A = a)` indexed `[z][a]`.
    pub fn from_joint(joint: &[Vec<f64>]) -> Result<Self> {
        let q = joint.len();
        let na = joint.first().map_or(0, |r| r.len());
        if q == 0 || na == 0 || joint.iter().any(|r| r.len() != na) {
            return Err(validation("joint of (Z, A) must be a non-empty rectangular table"));
        }
        let h: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
        let g: Vec<f64> = (0..na).map(|a| joint.iter().map(|r| r[a]).sum()).collect();
        if let Some(z) = h.iter().position(|p| *p <= 0.0) {
            return Err(validation(format!("marginal P(Z = z_{z}) is zero")));
        }
        if let Some(a) = g.iter().position(|p| *p <= 0.0) {
            return Err(validation(format!("marginal P(A = {a}) is zero")));
        }
        let entries = (0..na).map(|a| (0..q).map(|z| joint[z][a] / h[z]).collect()).collect();
        let b = (0..na).map(|a| (0..q).map(|z| joint[z][a] / g[a]).collect()).collect();
        Ok(Self {
            entries,
            joint: Some(JointSummary { g, h, b }),
        })
    }

    /// From the instrument marginal `h` and `P(A = 1 | Z = z)` for a binary treatment.
    pub fn from_kernel(h: &[f64], p1: &[f64]) -> Result<Self> {
        if h.len() != p1.len() {
            return Err(validation("instrument pmf and kernel lengths differ"));
        }
        let joint: Vec<Vec<f64>> = h.iter().zip(p1).map(|(h, p)| vec![h * (1.0 - p), h * p]).collect();
        Self::from_joint(&joint)
    }

    pub fn n_treatment(&self) -> usize {
        self.entries.len()
    }

    pub fn n_instrument(&self) -> usize {
        self.entries[0].len()
    }

    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.n_instrument() {
            return Err(validation(format!(
                "policy vector has {} entries, B has {} columns",
                h.len(),
                self.n_instrument()
            )));
        }
        Ok(self
            .entries
            .iter()
            .map(|row| row.iter().zip(h).map(|(b, h)| b * h).sum())
            .collect())
    }

    /// `B^T v`.
    pub fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n_treatment() {
            return Err(validation(format!(
                "vector has {} entries, B has {} rows",
                v.len(),
                self.n_treatment()
            )));
        }
        Ok((0..self.n_instrument())
            .map(|z| self.entries.iter().zip(v).map(|(row, v)| row[z] * v).sum())
            .collect())
    }
}

pub fn build_b_matrix(joint: &[Vec<f64>]) -> Result<BMatrix> {
    BMatrix::from_joint(joint)
}

fn require_binary(kernel: &ConditionalKernel) -> Result<()> {
    if kernel.support() != [0.0, 1.0] {
        return Err(Error::Unsupported(format!(
            "binary instrument with support (0, 1) required, kernel support is {:?}",
            kernel.support()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCompatibility {
    pub w: Vec<f64>,
    pub g_star: f64,
    pub g0: f64,
    pub g1: f64,
    pub compatible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityReport {
    pub compatible: bool,
    pub strata: Vec<StratumCompatibility>,
}

impl CompatibilityReport {
    pub fn violations(&self) -> Vec<&StratumCompatibility> {
        self.strata.iter().filter(|s| !s.compatible).collect()
    }
}

fn within(g_star: f64, g0: f64, g1: f64) -> bool {
    if (g1 - g0).abs() <= DEGENERATE_TOL {
        (g_star - g0).abs() <= COMPATIBILITY_TOL
    } else {
        g_star >= g0.min(g1) - COMPATIBILITY_TOL && g_star <= g0.max(g1) + COMPATIBILITY_TOL
    }
}

/// Checks `g*(w)` lies between `g0(w) = p(1|0,w)` and `g1(w) = p(1|1,w)` on
/// every stratum of `g_star`; weak-instrument strata force equality.
pub fn z_compatible(g_star: &InducedMarginal, kernel: &ConditionalKernel) -> Result<CompatibilityReport> {
    require_binary(kernel)?;
    let cols = g_star.columns();
    let mut strata = Vec::with_capacity(g_star.strata().len());
    for (vals, gs) in g_star.strata().iter().zip(g_star.p1_rows()) {
        let g0 = kernel.p1_view(0.0, cols, vals)?;
        let g1 = kernel.p1_view(1.0, cols, vals)?;
        strata.push(StratumCompatibility {
            w: vals.clone(),
            g_star: gs,
            g0,
            g1,
            compatible: within(gs, g0, g1),
        });
    }
    Ok(CompatibilityReport {
        compatible: strata.iter().all(|s| s.compatible),
        strata,
    })
}

pub(crate) fn incompatibility_error(report: &CompatibilityReport) -> Error {
    let list: Vec<String> = report
        .violations()
        .iter()
        .map(|s| format!("w={:?}: g*={} not in [{}, {}]", s.w, s.g_star, s.g0.min(s.g1), s.g0.max(s.g1)))
        .collect();
    validation(format!("target is not Z-compatible at {}", list.join("; ")))
}

/// Inverts `g* = g0 (1 - h*) + g1 h*` per stratum of `g_star`.
///
/// Weak-instrument strata (`g0 = g1`) keep the natural `h(1|w)`, since every
/// policy induces the same marginal there.
pub fn implied_policy_for_target(
    g_star: &InducedMarginal,
    kernel: &ConditionalKernel,
    natural: &InstrumentDensity,
) -> Result<InstrumentPolicy> {
    let report = z_compatible(g_star, kernel)?;
    if !report.compatible {
        return Err(incompatibility_error(&report));
    }
    let cols = g_star.columns().to_vec();
    let mut p1 = Vec::with_capacity(report.strata.len());
    for s in &report.strata {
        let h = if (s.g1 - s.g0).abs() <= DEGENERATE_TOL {
            natural.prob_view(1.0, &cols, &s.w)?
        } else {
            ((s.g_star - s.g0) / (s.g1 - s.g0)).clamp(0.0, 1.0)
        };
        p1.push(h);
    }
    InstrumentPolicy::binary(cols, g_star.strata().to_vec(), p1)
}

/// One member of the reduced-covariate identification family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedMember {
    pub columns: Vec<usize>,
    pub marginal: InducedMarginal,
    /// `sum_{w_S} P(w_S) sum_z h*(z|w_S') E[Y | z, w_S]`.
    pub gcomp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedFamily {
    pub members: Vec<ReducedMember>,
    /// `max |h(z|w) - h(z)|` on the joint's finest strata; zero under
    /// marginal instrument randomization.
    pub randomization_gap: f64,
    /// Largest pairwise difference of the G-computation values.
    pub max_disagreement: f64,
}

impl ReducedFamily {
    /// Whether marginal randomization holds, i.e. the members must agree.
    pub fn randomized(&self, tol: f64) -> bool {
        self.randomization_gap <= tol
    }
}

/// Induced marginals and G-computation values for each covariate subset
/// `S` containing the policy's columns `S'`.
pub fn induced_family_reduced(
    joint: &DiscreteJoint,
    policy: &InstrumentPolicy,
    subsets: &[Vec<usize>],
) -> Result<ReducedFamily> {
    let s_prime = policy.columns();
    let mut members = Vec::with_capacity(subsets.len());
    for cols in subsets {
        if let Some(c) = s_prime.iter().find(|c| !cols.contains(c)) {
            return Err(validation(format!(
                "policy column {c} is not in subset {cols:?}; each subset must contain {s_prime:?}"
            )));
        }
        let m = joint.marginalize(cols)?;
        let kernel = m.kernel()?;
        let marginal = induced_marginal_at(&kernel, policy, cols, &m.strata)?;
        let mut gcomp = 0.0;
        for s in 0..m.n_strata() {
            let mut inner = 0.0;
            for (k, &z) in m.support.iter().enumerate() {
                let hs = policy.prob_view(z, cols, &m.strata[s])?;
                if hs == 0.0 {
                    continue;
                }
                let q = m.q(s, k).ok_or_else(|| {
                    Error::Positivity(format!("no mass at (w={:?}, z={z}) under the natural law", m.strata[s]))
                })?;
                inner += hs * q;
            }
            gcomp += m.w_pmf(s) * inner;
        }
        members.push(ReducedMember {
            columns: cols.clone(),
            marginal,
            gcomp,
        });
    }
    let pooled = joint.marginalize(&[])?;
    let mut gap: f64 = 0.0;
    for s in 0..joint.n_strata() {
        for k in 0..joint.support.len() {
            if let (Some(a), Some(b)) = (joint.h(s, k), pooled.h(0, k)) {
                gap = gap.max((a - b).abs());
            }
        }
    }
    let mut disagreement: f64 = 0.0;
    for a in &members {
        for b in &members {
            disagreement = disagreement.max((a.gcomp - b.gcomp).abs());
        }
    }
    Ok(ReducedFamily {
        members,
        randomization_gap: gap,
        max_disagreement: disagreement,
    })
}
