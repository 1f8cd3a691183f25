use std::path::PathBuf;

use anyhow::Result;
use implied_core::estimators::{gcomp_estimate, tmle_estimate, TmleOptions};
use implied_core::induced::induced_marginal;
use implied_core::io::{dataset_from_csv, marginal_to_csv, policy_from_csv};
use implied_core::nuisance::{fit_instrument_density, fit_outcome_regression, fit_treatment_kernel_on, KernelKind};
use implied_core::table::StratifiedTable;
use implied_core::{InducedMarginal, InstrumentPolicy};
use serde::{Deserialize, Serialize};

use super::Outcome;
use crate::run::{invalid, load_config, params, prob_scale, read_text, scale_name, Format, Meta, Outputs, Status};

params! {
    #[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Params {
        /// Observed data CSV with columns w1..wd,z,a,y.
        #[arg(long)]
        #[serde(skip_serializing)]
        pub data: Option<PathBuf>,
        /// Instrument policy CSV with columns w..,z,prob.
        #[arg(long)]
        #[serde(skip_serializing)]
        pub policy: Option<PathBuf>,
        #[arg(long, value_enum)]
        pub outcome: Option<Outcome>,
        /// Nominal level of the confidence interval.
        #[arg(long)]
        pub alpha: Option<f64>,
        /// Repeat the targeting step until the score equation is solved.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        pub iterate: Option<bool>,
        /// Recorded in the provenance block; the fits are deterministic.
        #[arg(long)]
        pub seed: Option<u64>,
        #[arg(long)]
        #[serde(skip_serializing)]
        pub out_dir: Option<PathBuf>,
        #[arg(long, value_enum)]
        pub format: Option<Format>,
        /// Report probabilities as percentages.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        pub percent: Option<bool>,
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
pub struct PolicyRow {
    pub w: Vec<f64>,
    pub z: f64,
    pub prob: f64,
}

#[derive(Serialize)]
pub struct MarginalRow {
    pub w: Vec<f64>,
    pub prob: f64,
}

pub fn policy_rows(table: &StratifiedTable, scale: f64) -> Vec<PolicyRow> {
    let mut rows = Vec::new();
    for (s, w) in table.strata().iter().enumerate() {
        for (k, z) in table.support().iter().enumerate() {
            rows.push(PolicyRow {
                w: w.clone(),
                z: *z,
                prob: table.row(s)[k] * scale,
            });
        }
    }
    rows
}

pub fn marginal_rows(g: &InducedMarginal, scale: f64) -> Vec<MarginalRow> {
    g.strata()
        .iter()
        .zip(g.p1_rows())
        .map(|(w, p)| MarginalRow { w: w.clone(), prob: p * scale })
        .collect()
}

#[derive(Serialize)]
struct Report {
    psi: f64,
    se: f64,
    ci_lower: f64,
    ci_upper: f64,
    alpha: f64,
    mean_eic: f64,
    epsilon: f64,
    targeting_steps: usize,
    n: usize,
    plugin: f64,
    outcome: Outcome,
    probability_scale: &'static str,
    policy_columns: Vec<usize>,
    policy: Vec<PolicyRow>,
    induced_marginal: Vec<MarginalRow>,
}

pub fn run(args: Args) -> Result<Status> {
    let mut p = args.params.overlay(load_config(args.config.as_deref())?);
    let data_path = p.data.clone().ok_or_else(|| invalid("--data is required"))?;
    let policy_path = p.policy.clone().ok_or_else(|| invalid("--policy is required"))?;
    let outcome = *p.outcome.get_or_insert(Outcome::Hal);
    let alpha = *p.alpha.get_or_insert(0.05);
    let iterate = *p.iterate.get_or_insert(false);
    let seed = *p.seed.get_or_insert(0);
    let format = *p.format.get_or_insert(Format::Json);
    let percent = *p.percent.get_or_insert(false);
    let out_dir = p.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));

    let data_text = read_text(&data_path)?;
    let policy_text = read_text(&policy_path)?;
    let meta = Meta::new("tmle", seed, &p, &[&data_text, &policy_text])?;
    let data = dataset_from_csv(&data_text)?;
    let policy = policy_from_csv(&policy_text)?;
    let InstrumentPolicy::Tabular { table } = &policy else {
        unreachable!("policy files are tabular")
    };

    let q = fit_outcome_regression(&data, &outcome.kind())?;
    let h = fit_instrument_density(&data)?;
    let plugin = gcomp_estimate(&data, &q, &policy)?;
    let opts = TmleOptions {
        alpha,
        iterate,
        ..TmleOptions::default()
    };
    let est = tmle_estimate(&data, &q, &h, &policy, &opts)?;
    let kernel = fit_treatment_kernel_on(&data, &policy.columns(), &KernelKind::Tabular)?;
    let induced = induced_marginal(&kernel, &policy)?;

    let scale = prob_scale(percent);
    let mut out = Outputs::new(out_dir)?;
    if format == Format::Csv {
        out.write("tmle_induced.csv", &marginal_to_csv(&induced, percent))?;
    }
    let report = Report {
        psi: est.psi,
        se: est.se,
        ci_lower: est.ci.0,
        ci_upper: est.ci.1,
        alpha: est.alpha,
        mean_eic: est.mean_eic,
        epsilon: est.epsilon,
        targeting_steps: est.steps,
        n: est.n,
        plugin,
        outcome,
        probability_scale: scale_name(percent),
        policy_columns: table.columns().to_vec(),
        policy: policy_rows(table, scale),
        induced_marginal: marginal_rows(&induced, scale),
    };
    out.finish("tmle.json", &meta, &report)?;
    println!(
        "psi = {:.6}  se = {:.6}  {:.0}% CI [{:.6}, {:.6}]  plug-in = {:.6}",
        est.psi,
        est.se,
        100.0 * (1.0 - alpha),
        est.ci.0,
        est.ci.1,
        plugin
    );
    Ok(Status::Done)
}
