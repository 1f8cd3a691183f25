pub mod kl;
pub mod ls;
pub mod replicate;
pub mod simulate;
pub mod tmle;

use std::path::PathBuf;

use implied_core::nuisance::{HalOptions, OutcomeKind};
use implied_core::NpsemSpec;
use serde::{Deserialize, Serialize};

use crate::run::read_text;

/// Outcome-regression learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Linear regression on `(z, w)` main effects.
    Ols,
    /// Cell means per `(z, w)`.
    Saturated,
    /// Cross-validated Highly Adaptive Lasso.
    Hal,
}

impl Outcome {
    pub fn kind(self) -> OutcomeKind {
        match self {
            Self::Ols => OutcomeKind::OlsMainEffects,
            Self::Saturated => OutcomeKind::Saturated,
            Self::Hal => OutcomeKind::Hal(HalOptions::default()),
        }
    }
}

/// Loads a model spec, falling back to the built-in binary example.
/// Returns the spec and the file text (empty for the built-in one).
pub fn load_spec(path: Option<&PathBuf>) -> anyhow::Result<(NpsemSpec, String)> {
    match path {
        Some(p) => {
            let text = read_text(p)?;
            let spec = implied_core::io::spec_from_toml(&text)
                .map_err(|e| anyhow::Error::new(e).context(format!("spec {}", p.display())))?;
            Ok((spec, text))
        }
        None => Ok((NpsemSpec::toy(), String::new())),
    }
}
