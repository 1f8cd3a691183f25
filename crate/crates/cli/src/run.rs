//! Plumbing shared by the subcommands: config files, provenance, output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use implied_core::Error as CoreError;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NON_CONVERGENCE: u8 = 3;
pub const EXIT_POSITIVITY: u8 = 4;

/// How a command finished when it did not fail outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Done,
    NotConverged,
}

impl Status {
    pub fn from_converged(converged: bool) -> Self {
        if converged {
            Self::Done
        } else {
            Self::NotConverged
        }
    }
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Validation(_)
                | CoreError::Parse(_)
                | CoreError::Unsupported(_)
                | CoreError::Singular(_)
                | CoreError::Io(_) => EXIT_VALIDATION,
                CoreError::NonConvergence(_) => EXIT_NON_CONVERGENCE,
                CoreError::Positivity(_) => EXIT_POSITIVITY,
                CoreError::Invariant(_) => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_VALIDATION;
        }
    }
    1
}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    CoreError::Validation(msg.into()).into()
}

/// Declares a parameter struct whose fields are all optional, usable both as
/// clap flags and as keys of a flat TOML config file, with `overlay` letting
/// flags win over file values.
macro_rules! params {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $(#[$fmeta:meta])* pub $field:ident : Option<$ty:ty>, )*
        }
    ) => {
        $(#[$meta])*
        pub struct $name {
            $( $(#[$fmeta])* pub $field: Option<$ty>, )*
        }

        impl $name {
            pub fn overlay(self, file: Self) -> Self {
                Self { $( $field: self.$field.or(file.$field), )* }
            }
        }
    };
}
pub(crate) use params;

/// Reads a flat TOML config; unknown keys are rejected.
pub fn load_config<P: DeserializeOwned + Default>(path: Option<&Path>) -> Result<P> {
    let Some(path) = path else {
        return Ok(P::default());
    };
    let text = read_text(path)?;
    toml::from_str(&text)
        .map_err(|e| CoreError::Parse(format!("config {}: {e}", path.display())))
        .map_err(Into::into)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Provenance stamped into every JSON artifact.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config_hash: String,
}

impl Meta {
    /// Hashes the resolved parameters together with the contents of every
    /// input file. Output locations are not part of the hash.
    pub fn new<P: Serialize>(command: &'static str, seed: u64, params: &P, inputs: &[&str]) -> Result<Self> {
        let digests: Vec<String> = inputs.iter().map(|t| sha256_hex(t.as_bytes())).collect();
        let canonical = serde_json::to_vec(&serde_json::json!({
            "command": command,
            "params": params,
            "inputs": digests,
        }))?;
        Ok(Self {
            tool: "implied",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config_hash: sha256_hex(&canonical),
        })
    }
}

/// Collects output files and writes them with a JSON summary listing their digests.
pub struct Outputs {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Outputs {
    pub fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir, files: BTreeMap::new() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.files.insert(name.to_string(), sha256_hex(contents.as_bytes()));
        Ok(())
    }

    /// Writes `name` as `{meta, result, files}`.
    pub fn finish<T: Serialize>(self, name: &str, meta: &Meta, result: &T) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a, T> {
            meta: &'a Meta,
            result: &'a T,
            files: &'a BTreeMap<String, String>,
        }
        let mut text = serde_json::to_string_pretty(&Summary {
            meta,
            result,
            files: &self.files,
        })?;
        text.push('\n');
        let path = self.dir.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Encoding of tabular results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    /// Tables as CSV files next to the JSON summary.
    #[default]
    Csv,
    /// Tables embedded in the JSON summary only.
    Json,
}

/// Multiplier for probabilities in reports.
pub fn prob_scale(percent: bool) -> f64 {
    if percent {
        100.0
    } else {
        1.0
    }
}

pub fn scale_name(percent: bool) -> &'static str {
    if percent {
        "percent"
    } else {
        "proportion"
    }
}
