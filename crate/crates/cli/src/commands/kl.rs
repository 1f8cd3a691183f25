use std::path::PathBuf;

use anyhow::Result;
use implied_core::induced::{implied_policy_for_target, induced_marginal_at, z_compatible};
use implied_core::io::{dataset_from_csv, marginal_from_csv, policy_to_csv};
use implied_core::kl::{implied_density, kl_divergence, kl_project, GaussianTreatmentSetting, KlConfig, KlProjection};
use implied_core::nuisance::{fit_instrument_density, fit_treatment_kernel, KernelKind};
use implied_core::table::StratifiedTable;
use implied_core::{InstrumentPolicy, TreatmentTarget};
use serde::{Deserialize, Serialize};

use crate::run::{invalid, load_config, params, prob_scale, read_text, scale_name, Format, Meta, Outputs, Status};

/// Which treatment model the target lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Binary treatment, kernel estimated from `--data`, target from `--target`.
    Binary,
    /// Continuous treatment `A | Z, W ~ N(gamma Z + sin(w1) log(1 + w2^2), sigma^2)`
    /// with `W ~ U[-2, 2]^2`, and a Gaussian target.
    Gaussian,
}

params! {
    #[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Params {
        /// Inferred from whether `--target` is given when absent.
        #[arg(long, value_enum)]
        pub setting: Option<Setting>,
        /// Observed data CSV (binary setting).
        #[arg(long)]
        #[serde(skip_serializing)]
        pub data: Option<PathBuf>,
        /// Target treatment marginal CSV with columns w..,prob (binary setting).
        #[arg(long)]
        #[serde(skip_serializing)]
        pub target: Option<PathBuf>,
        /// Number of simulated covariate rows (Gaussian setting).
        #[arg(long)]
        pub n: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        pub target_mean: Option<f64>,
        #[arg(long)]
        pub target_sd: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        pub gamma: Option<f64>,
        #[arg(long)]
        pub sigma: Option<f64>,
        /// Fixed HAL penalty; cross-validated when absent.
        #[arg(long)]
        pub lambda: Option<f64>,
        #[arg(long)]
        pub max_iter: Option<usize>,
        #[arg(long)]
        pub tol: Option<f64>,
        #[arg(long)]
        pub seed: Option<u64>,
        /// Monte Carlo draws for the continuous KL estimate.
        #[arg(long)]
        pub kl_draws: Option<usize>,
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
struct Common {
    setting: Setting,
    lambda: f64,
    iterations: usize,
    converged: bool,
    final_penalized_loglik: f64,
    kl_fitted: f64,
    kl_natural: f64,
    probability_scale: &'static str,
}

#[derive(Serialize)]
struct StratumRow {
    w: Vec<f64>,
    target: f64,
    policy: f64,
    implied: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    closed_form_policy: Option<f64>,
}

#[derive(Serialize)]
struct BinaryReport {
    #[serde(flatten)]
    common: Common,
    target_compatible: bool,
    strata: Vec<StratumRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct GaussianReport {
    #[serde(flatten)]
    common: Common,
    target_mean: f64,
    target_sd: f64,
    gamma: f64,
    sigma: f64,
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    implied: Option<Vec<GridRow>>,
}

#[derive(Serialize)]
struct GridRow {
    a: f64,
    target: f64,
    implied: f64,
    natural: f64,
}

fn trace_csv(fit: &KlProjection) -> String {
    let mut out = String::from("iteration,penalized_loglik\n");
    for (i, v) in fit.state.loglik_trace.iter().enumerate() {
        out.push_str(&format!("{i},{v:.12}\n"));
    }
    out
}

fn common(setting: Setting, fit: &KlProjection, kl_fitted: f64, kl_natural: f64, percent: bool) -> Common {
    Common {
        setting,
        lambda: fit.state.lambda,
        iterations: fit.state.iterations,
        converged: fit.state.converged,
        final_penalized_loglik: fit.state.loglik_trace.last().copied().unwrap_or(f64::NAN),
        kl_fitted,
        kl_natural,
        probability_scale: scale_name(percent),
    }
}

pub fn run(args: Args) -> Result<Status> {
    let mut p = args.params.overlay(load_config(args.config.as_deref())?);
    let setting = *p.setting.get_or_insert(if p.target.is_some() { Setting::Binary } else { Setting::Gaussian });
    let defaults = KlConfig::default();
    let cfg = KlConfig {
        lambda: p.lambda,
        max_iter: *p.max_iter.get_or_insert(defaults.max_iter),
        tol: *p.tol.get_or_insert(defaults.tol),
        seed: *p.seed.get_or_insert(defaults.seed),
        ..defaults
    };
    let format = *p.format.get_or_insert(Format::Csv);
    let percent = *p.percent.get_or_insert(false);
    let out_dir = p.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    match setting {
        Setting::Binary => binary(p, cfg, format, percent, out_dir),
        Setting::Gaussian => gaussian(p, cfg, format, percent, out_dir),
    }
}

fn binary(p: Params, cfg: KlConfig, format: Format, percent: bool, out_dir: PathBuf) -> Result<Status> {
    let data_path = p.data.clone().ok_or_else(|| invalid("the binary setting needs --data"))?;
    let target_path = p.target.clone().ok_or_else(|| invalid("the binary setting needs --target"))?;
    let data_text = read_text(&data_path)?;
    let target_text = read_text(&target_path)?;
    let meta = Meta::new("kl-project", cfg.seed, &p, &[&data_text, &target_text])?;
    let data = dataset_from_csv(&data_text)?;
    let g_star = marginal_from_csv(&target_text)?;
    let kernel = fit_treatment_kernel(&data, &KernelKind::Tabular)?;
    let natural = fit_instrument_density(&data)?;
    let target = TreatmentTarget::Binary(g_star.clone());

    let fit = kl_project(&target, &kernel, &data.w, data.dim, data.len(), &cfg)?;
    let kl_fitted = kl_divergence(&target, &kernel, &data.w, data.dim, &fit.prior_p1, 0, 0)?;
    let natural_p1: Vec<f64> = (0..data.len())
        .map(|i| natural.prob(1.0, data.covariates(i)))
        .collect::<implied_core::Result<_>>()?;
    let kl_natural = kl_divergence(&target, &kernel, &data.w, data.dim, &natural_p1, 0, 0)?;

    let cols = data.all_columns();
    let (strata, _) = data.strata(&cols)?;
    let p1: Vec<f64> = strata.iter().map(|w| fit.policy.p1(w)).collect::<implied_core::Result<_>>()?;
    let table = StratifiedTable::new(
        cols.clone(),
        strata.clone(),
        vec![0.0, 1.0],
        p1.iter().map(|v| vec![1.0 - v, *v]).collect(),
    )?;
    let tabular = InstrumentPolicy::tabular(table.clone())?;
    let implied = induced_marginal_at(&kernel, &tabular, &cols, &strata)?;
    let compat = z_compatible(&g_star, &kernel)?;
    let closed = if compat.compatible {
        Some(implied_policy_for_target(&g_star, &kernel, &natural)?)
    } else {
        None
    };

    let scale = prob_scale(percent);
    let mut rows = Vec::with_capacity(strata.len());
    for (s, w) in strata.iter().enumerate() {
        rows.push(StratumRow {
            w: w.clone(),
            target: g_star.p1(w)? * scale,
            policy: p1[s] * scale,
            implied: implied.p1_rows()[s] * scale,
            closed_form_policy: closed.as_ref().map(|c| c.p1(w)).transpose()?.map(|v| v * scale),
        });
    }

    let mut out = Outputs::new(out_dir)?;
    let trace = match format {
        Format::Csv => {
            out.write("kl_policy.csv", &policy_to_csv(&table.map_values(|_, _, v| v * scale)))?;
            out.write("kl_trace.csv", &trace_csv(&fit))?;
            let mut csv = String::new();
            for c in &cols {
                csv.push_str(&format!("w{},", c + 1));
            }
            csv.push_str("target,implied\n");
            for r in &rows {
                for v in &r.w {
                    csv.push_str(&format!("{v},"));
                }
                csv.push_str(&format!("{},{}\n", r.target, r.implied));
            }
            out.write("kl_implied.csv", &csv)?;
            None
        }
        Format::Json => Some(fit.state.loglik_trace.clone()),
    };
    let report = BinaryReport {
        common: common(Setting::Binary, &fit, kl_fitted, kl_natural, percent),
        target_compatible: compat.compatible,
        strata: rows,
        trace,
    };
    out.finish("kl.json", &meta, &report)?;
    println!(
        "KL(target || implied) = {kl_fitted:.6} (natural policy {kl_natural:.6}), {} EM iterations, converged = {}",
        fit.state.iterations, fit.state.converged
    );
    Ok(Status::from_converged(fit.state.converged))
}

fn gaussian(mut p: Params, cfg: KlConfig, format: Format, percent: bool, out_dir: PathBuf) -> Result<Status> {
    let n = *p.n.get_or_insert(500);
    let mean = *p.target_mean.get_or_insert(1.0);
    let sd = *p.target_sd.get_or_insert(0.2);
    let base = GaussianTreatmentSetting::default();
    let setting = GaussianTreatmentSetting {
        gamma: *p.gamma.get_or_insert(base.gamma),
        sigma: *p.sigma.get_or_insert(base.sigma),
    };
    let draws = *p.kl_draws.get_or_insert(20_000);
    let meta = Meta::new("kl-project", cfg.seed, &p, &[])?;

    let kernel = setting.kernel();
    let w = setting.covariates(n, cfg.seed);
    let target = TreatmentTarget::Gaussian { mean, sd };
    let fit = kl_project(&target, &kernel, &w, 2, n, &cfg)?;
    let natural: Vec<f64> = w.chunks(2).map(|wi| setting.natural_p1(wi)).collect();
    let kl_fitted = kl_divergence(&target, &kernel, &w, 2, &fit.prior_p1, draws, cfg.seed)?;
    let kl_natural = kl_divergence(&target, &kernel, &w, 2, &natural, draws, cfg.seed)?;

    // Overlay grid covering both the target and the reachable mixture.
    let reach = 5f64.ln() + 4.0 * setting.sigma;
    let lo = (mean - 4.0 * sd).min(setting.gamma.min(0.0) - reach);
    let hi = (mean + 4.0 * sd).max(setting.gamma.max(0.0) + reach);
    let points = 201;
    let mut grid = Vec::with_capacity(points);
    for k in 0..points {
        let a = lo + (hi - lo) * k as f64 / (points - 1) as f64;
        let z = (a - mean) / sd;
        grid.push(GridRow {
            a,
            target: (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt()),
            implied: implied_density(&kernel, &w, 2, &fit.prior_p1, a)?,
            natural: implied_density(&kernel, &w, 2, &natural, a)?,
        });
    }

    let scale = prob_scale(percent);
    let mut out = Outputs::new(out_dir)?;
    let (trace, implied) = match format {
        Format::Csv => {
            let mut surface = String::from("w1,w2,policy,natural\n");
            for (i, wi) in w.chunks(2).enumerate() {
                surface.push_str(&format!(
                    "{},{},{},{}\n",
                    wi[0],
                    wi[1],
                    fit.prior_p1[i] * scale,
                    natural[i] * scale
                ));
            }
            out.write("kl_policy.csv", &surface)?;
            out.write("kl_trace.csv", &trace_csv(&fit))?;
            let mut csv = String::from("a,target,implied,natural\n");
            for g in &grid {
                csv.push_str(&format!("{:.6},{:.10e},{:.10e},{:.10e}\n", g.a, g.target, g.implied, g.natural));
            }
            out.write("kl_implied.csv", &csv)?;
            (None, None)
        }
        Format::Json => (Some(fit.state.loglik_trace.clone()), Some(grid)),
    };
    let report = GaussianReport {
        common: common(Setting::Gaussian, &fit, kl_fitted, kl_natural, percent),
        target_mean: mean,
        target_sd: sd,
        gamma: setting.gamma,
        sigma: setting.sigma,
        n,
        trace,
        implied,
    };
    out.finish("kl.json", &meta, &report)?;
    println!(
        "KL(target || implied) = {kl_fitted:.6} (natural policy {kl_natural:.6}), {} EM iterations, converged = {}",
        fit.state.iterations, fit.state.converged
    );
    Ok(Status::from_converged(fit.state.converged))
}
