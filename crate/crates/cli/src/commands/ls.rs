use std::path::PathBuf;

use anyhow::Result;
use implied_core::io::{b_matrix_from_csv, dataset_from_csv};
use implied_core::ls::{ls_project, unconstrained_solution, PgdOptions};
use implied_core::{DiscreteJoint, Error as CoreError};
use serde::{Deserialize, Serialize};

use crate::run::{invalid, load_config, params, prob_scale, read_text, scale_name, Format, Meta, Outputs, Status};

params! {
    #[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Params {
        /// Operator CSV without header: one line per treatment value, one column per instrument value.
        #[arg(long)]
        #[serde(skip_serializing)]
        pub b: Option<PathBuf>,
        /// Observed data CSV to estimate the operator from instead of `--b`; covariates are marginalized.
        #[arg(long)]
        #[serde(skip_serializing)]
        pub data: Option<PathBuf>,
        /// Target treatment pmf, comma separated.
        #[arg(long, value_delimiter = ',')]
        pub target: Option<Vec<f64>>,
        /// Starting policy, comma separated; uniform when absent.
        #[arg(long, value_delimiter = ',')]
        pub h0: Option<Vec<f64>>,
        #[arg(long)]
        pub step: Option<f64>,
        #[arg(long)]
        pub tol: Option<f64>,
        #[arg(long)]
        pub max_iter: Option<usize>,
        /// Recorded in the provenance block; the solver is deterministic.
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
struct Report {
    b: Vec<Vec<f64>>,
    target: Vec<f64>,
    policy: Vec<f64>,
    implied: Vec<f64>,
    risk: f64,
    iterations: usize,
    converged: bool,
    final_step: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    unconstrained: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    unconstrained_note: Option<String>,
    probability_scale: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    risk_trace: Option<Vec<f64>>,
}

pub fn run(args: Args) -> Result<Status> {
    let mut p = args.params.overlay(load_config(args.config.as_deref())?);
    let target = p.target.clone().ok_or_else(|| invalid("--target is required"))?;
    let defaults = PgdOptions::default();
    let opts = PgdOptions {
        step: *p.step.get_or_insert(defaults.step),
        tol: *p.tol.get_or_insert(defaults.tol),
        max_iter: *p.max_iter.get_or_insert(defaults.max_iter),
    };
    let seed = *p.seed.get_or_insert(0);
    let format = *p.format.get_or_insert(Format::Json);
    let percent = *p.percent.get_or_insert(false);
    let out_dir = p.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));

    let (b, input) = match (&p.b, &p.data) {
        (Some(path), None) => {
            let text = read_text(path)?;
            (b_matrix_from_csv(&text)?, text)
        }
        (None, Some(path)) => {
            let text = read_text(path)?;
            let data = dataset_from_csv(&text)?;
            (DiscreteJoint::from_data(&data, &[])?.b_matrix(0)?, text)
        }
        _ => return Err(invalid("give exactly one of --b and --data")),
    };
    if target.len() != b.n_treatment() {
        return Err(invalid(format!(
            "target has {} entries but the operator has {} treatment rows",
            target.len(),
            b.n_treatment()
        )));
    }
    let q = b.n_instrument();
    let h0 = p.h0.get_or_insert_with(|| vec![1.0 / q as f64; q]).clone();
    let meta = Meta::new("ls-project", seed, &p, &[&input])?;

    let (state, implied) = ls_project(&b, &target, &h0, &opts)?;
    let (unconstrained, note) = match unconstrained_solution(&b, &target) {
        Ok(v) => (Some(v), None),
        Err(CoreError::Singular(msg)) => (None, Some(msg)),
        Err(e) => return Err(e.into()),
    };

    let scale = prob_scale(percent);
    let scaled = |v: &[f64]| v.iter().map(|x| x * scale).collect::<Vec<_>>();
    let mut out = Outputs::new(out_dir)?;
    let risk_trace = match format {
        Format::Csv => {
            let mut trace = String::from("iteration,risk\n");
            for (i, r) in state.risk_trace.iter().enumerate() {
                trace.push_str(&format!("{i},{r:.15e}\n"));
            }
            out.write("ls_trace.csv", &trace)?;
            let mut pol = String::from("z_index,prob\n");
            for (k, v) in state.h.iter().enumerate() {
                pol.push_str(&format!("{k},{}\n", v * scale));
            }
            out.write("ls_policy.csv", &pol)?;
            None
        }
        Format::Json => Some(state.risk_trace.clone()),
    };
    let risk = state.risk_trace.last().copied().unwrap_or(f64::NAN);
    let report = Report {
        b: b.entries.clone(),
        target: scaled(&target),
        policy: scaled(&state.h),
        implied: scaled(&implied),
        risk,
        iterations: state.iterations,
        converged: state.converged,
        final_step: state.step,
        unconstrained,
        unconstrained_note: note,
        probability_scale: scale_name(percent),
        risk_trace,
    };
    out.finish("ls.json", &meta, &report)?;
    println!(
        "policy = {:?}  implied = {:?}  risk = {risk:.3e}  converged = {}",
        state.h, implied, state.converged
    );
    Ok(Status::from_converged(state.converged))
}
