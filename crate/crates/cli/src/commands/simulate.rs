use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use implied_core::io::dataset_to_csv;
use implied_core::npsem::simulate_natural;
use serde::{Deserialize, Serialize};

use super::load_spec;
use crate::run::{load_config, params, sha256_hex, Meta, Status};

params! {
    #[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Params {
        /// Model spec in TOML; the built-in binary example when absent.
        #[arg(long)]
        #[serde(skip_serializing)]
        pub spec: Option<PathBuf>,
        /// Number of rows.
        #[arg(long)]
        pub n: Option<usize>,
        #[arg(long)]
        pub seed: Option<u64>,
        /// Output CSV; a JSON sidecar with the same stem records provenance.
        #[arg(long)]
        #[serde(skip_serializing)]
        pub out: Option<PathBuf>,
    }
}

#[derive(clap::Args)]
pub struct Args {
    /// Flat TOML file with any of the options below; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    params: Params,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    meta: Meta,
    n: usize,
    seed: u64,
    spec: &'a implied_core::NpsemSpec,
    data_sha256: String,
}

pub fn run(args: Args) -> Result<Status> {
    let mut p = args.params.overlay(load_config(args.config.as_deref())?);
    let n = *p.n.get_or_insert(1000);
    let seed = *p.seed.get_or_insert(1);
    let out = p.out.clone().unwrap_or_else(|| PathBuf::from("data.csv"));
    let (spec, spec_text) = load_spec(p.spec.as_ref())?;
    let meta = Meta::new("simulate", seed, &p, &[&spec_text])?;

    let data = simulate_natural(&spec, n, seed)?;
    let csv = dataset_to_csv(&data);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
    let sidecar = Sidecar {
        meta,
        n,
        seed,
        spec: &spec,
        data_sha256: sha256_hex(csv.as_bytes()),
    };
    let side = out.with_extension("json");
    fs::write(&side, serde_json::to_string_pretty(&sidecar)? + "\n")
        .with_context(|| format!("writing {}", side.display()))?;
    Ok(Status::Done)
}
