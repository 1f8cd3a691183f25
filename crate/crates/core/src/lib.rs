//! Implied interventions for instrumental-variable causal inference.
//!
//! A stochastic policy `h*(z|w)` on a randomized instrument identifies the
//! counterfactual mean `E[Y^{h*}]` and induces a treatment marginal
//! `g(h*)(a|w) = sum_z p(a|z,w) h*(z|w)`. This crate provides
//!
//! * [`npsem`]: a discrete structural model for simulation and exact oracles,
//! * [`hal`]: the Highly Adaptive Lasso sieve and a weighted L1 GLM solver,
//! * [`nuisance`]: treatment kernel, outcome regression and instrument density fits,
//! * [`induced`]: the induced-marginal map, its Bayes form, the `B` operator,
//!   Z-compatibility and implied-policy inversion,
//! * [`estimators`]: G-computation, TMLE with the efficient influence curve,
//!   Wald contrasts and the Monte Carlo replication harness,
//! * [`kl`]: EM-HAL projection of a target treatment law in KL,
//! * [`ls`]: least-squares projection by projected gradient descent on the simplex.

pub mod data;
pub mod error;
pub mod estimators;
pub mod hal;
pub mod induced;
pub mod io;
pub mod joint;
pub mod kl;
pub mod ls;
pub mod math;
pub mod npsem;
pub mod nuisance;
pub mod rng;
pub mod table;

pub use data::{CounterfactualDataset, ObservedDataset, WorldTag};
pub use error::{Error, Result};
pub use estimators::{EicEstimate, ReplicationReport};
pub use hal::{HalBasis, HalFit, Link};
pub use induced::{BMatrix, InducedMarginal, InstrumentPolicy};
pub use joint::DiscreteJoint;
pub use kl::{EmState, TreatmentTarget};
pub use ls::{PgdState, TiltPolicy};
pub use npsem::{NpsemSpec, OutcomeMode};
pub use nuisance::{ConditionalKernel, InstrumentDensity, OutcomeRegression};
