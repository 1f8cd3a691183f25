use std::path::PathBuf;

use anyhow::Result;
use implied_core::estimators::{replicate_table1, DensitySource, ReplicationConfig, ReplicationRow};
use implied_core::io::policy_from_csv;
use implied_core::NpsemSpec;
use serde::{Deserialize, Serialize};

use super::{load_spec, Outcome};
use crate::run::{invalid, load_config, params, prob_scale, read_text, scale_name, Format, Meta, Outputs, Status};

/// Where the instrument density in the clever covariate comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    /// The design randomization of the model.
    Known,
    /// Stratified frequencies on each simulated dataset.
    Estimated,
}

params! {
    #[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Params {
        /// Model spec in TOML; the built-in binary example when absent.
        #[arg(long)]
        #[serde(skip_serializing)]
        pub spec: Option<PathBuf>,
        /// Policy CSV (w..,z,prob); the example policy h*(1|w) = (0.7, 0.4) when absent.
        #[arg(long)]
        #[serde(skip_serializing)]
        pub policy: Option<PathBuf>,
        /// Sample sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        pub n_list: Option<Vec<usize>>,
        /// Replications per sample size.
        #[arg(long)]
        pub reps: Option<usize>,
        #[arg(long)]
        pub seed: Option<u64>,
        /// Interval levels, comma separated.
        #[arg(long, value_delimiter = ',')]
        pub alphas: Option<Vec<f64>>,
        #[arg(long, value_enum)]
        pub outcome: Option<Outcome>,
        #[arg(long, value_enum)]
        pub density: Option<Density>,
        #[arg(long)]
        #[serde(skip_serializing)]
        pub out_dir: Option<PathBuf>,
        #[arg(long, value_enum)]
        pub format: Option<Format>,
        /// Report coverage as percentages.
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
struct Summary {
    truth: f64,
    reps: usize,
    alphas: Vec<f64>,
    probability_scale: &'static str,
    rows: Vec<ReplicationRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    samples: Option<Vec<implied_core::estimators::ReplicationSamples>>,
}

fn samples_for_n(s: &implied_core::estimators::ReplicationSamples) -> String {
    let mut out = String::from("rep,psi_tmle,psi_plugin,se\n");
    for r in 0..s.tmle.len() {
        out.push_str(&format!("{},{:.12},{:.12},{:.12}\n", r, s.tmle[r], s.plugin[r], s.se[r]));
    }
    out
}

pub fn run(args: Args) -> Result<Status> {
    let mut p = args.params.overlay(load_config(args.config.as_deref())?);
    let defaults = ReplicationConfig::default();
    let cfg = ReplicationConfig {
        n_list: p.n_list.get_or_insert(defaults.n_list).clone(),
        reps: *p.reps.get_or_insert(defaults.reps),
        seed: *p.seed.get_or_insert(defaults.seed),
        alphas: p.alphas.get_or_insert(defaults.alphas).clone(),
        outcome: p.outcome.get_or_insert(Outcome::Ols).kind(),
        density: match p.density.get_or_insert(Density::Known) {
            Density::Known => DensitySource::Known,
            Density::Estimated => DensitySource::Estimated,
        },
    };
    let format = *p.format.get_or_insert(Format::Csv);
    let percent = *p.percent.get_or_insert(false);
    let out_dir = p.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    if cfg.n_list.is_empty() {
        return Err(invalid("--n-list needs at least one sample size"));
    }

    let (spec, spec_text) = load_spec(p.spec.as_ref())?;
    let (policy, policy_text) = match &p.policy {
        Some(path) => {
            let text = read_text(path)?;
            (policy_from_csv(&text)?, text)
        }
        None => (NpsemSpec::toy_policy(), String::new()),
    };
    let meta = Meta::new("replicate-table1", cfg.seed, &p, &[&spec_text, &policy_text])?;
    let report = replicate_table1(&spec, &policy, &cfg)?;

    let scale = prob_scale(percent);
    let rows: Vec<ReplicationRow> = report
        .rows
        .iter()
        .map(|r| ReplicationRow {
            coverage: r.coverage.iter().map(|c| c * scale).collect(),
            ..r.clone()
        })
        .collect();
    let mut out = Outputs::new(out_dir)?;
    let samples = match format {
        Format::Csv => {
            out.write("table1.csv", &report.to_csv(percent))?;
            for s in &report.samples {
                out.write(&format!("samples_n{}.csv", s.n), &samples_for_n(s))?;
            }
            None
        }
        Format::Json => Some(report.samples.clone()),
    };
    let summary = Summary {
        truth: report.truth,
        reps: report.reps,
        alphas: report.alphas.clone(),
        probability_scale: scale_name(percent),
        rows,
        samples,
    };
    out.finish("replicate.json", &meta, &summary)?;
    print!("truth = {:.6}\n{}", report.truth, report.to_csv(percent));
    Ok(Status::Done)
}
