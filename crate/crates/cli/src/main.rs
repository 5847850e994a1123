//! Batch front end for the imputation pipeline: `fit`, `impute`,
//! `analyze`, and `simulate`.
//!
//! All randomness flows from the one `--seed` value; the worker-thread
//! count is a performance knob only and never changes any output byte.
//! Every artifact embeds the fully resolved configuration, so a result
//! file identifies the run that produced it.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use distimp::data::TrialDataset;
use distimp::estimands::{
    complete_data_variance, solve_complete, solve_di, EstimandSpec, PointEstimate,
};
use distimp::imputation::{completed_endpoint, impute, ImputationSet, SubjectDraws};
use distimp::inference::{
    rubin_combine, weighted_bootstrap, BootstrapConfig, InferenceOutput, WeightScheme,
};
use distimp::mmrm;
use distimp::rng::derive_seed;
use distimp::sensitivity::SensitivityModel;
use distimp::sim::{paper_scenario, run_monte_carlo, McReport, Preset};

use config::{resolve, resolve_required, ConfigFile};

/// Seed salts separating the imputation and bootstrap streams of one run.
const SALT_IMPUTE: u64 = 0xA1;
const SALT_BOOT: u64 = 0xA2;

#[derive(Parser)]
#[command(
    name = "distimp",
    version,
    about = "Distributional and multiple imputation for longitudinal trials with monotone dropout"
)]
struct Cli {
    /// Worker threads (defaults to all cores; never affects results).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Flat key=value configuration file; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the two-arm repeated-measures model to the observed data.
    Fit(FitArgs),
    /// Impute missing values and emit one completed dataset.
    Impute(ImputeArgs),
    /// Point and interval estimation of a treatment effect.
    Analyze(AnalyzeArgs),
    /// Monte Carlo benchmark of MI vs DI on a preset scenario.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Wide CSV: columns x1..xp, group (1/2), y1..yT; missing cells empty
    /// or NA.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Treat the input as long format (subject,group,x1..xp,visit,y) and
    /// pivot to wide.
    #[arg(long)]
    long: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Output JSON path for the fitted parameters.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ImputeArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Sensitivity model: mar (condition each subject's own-arm law on its
    /// observed visits), j2r (missing values follow the control arm's
    /// conditional profile given the subject's observed history), rtb (the
    /// final visit reverts to the subject's own-arm baseline marginal law),
    /// washout (mar for control dropouts, rtb for treatment dropouts).
    #[arg(long)]
    model: Option<SensitivityModelOpt>,
    /// Number of imputations.
    #[arg(long)]
    m: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Which completed dataset to emit (1-based).
    #[arg(long)]
    emit: Option<usize>,
    /// Output CSV path for the emitted completed dataset.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Sensitivity model (see `impute --help` for semantics).
    #[arg(long)]
    model: Option<SensitivityModelOpt>,
    /// Estimand: ate | ate-ancova | risk:<threshold> | qte:<level> | cdf |
    /// cdf:<lo>:<hi>:<points>.
    #[arg(long)]
    estimand: Option<String>,
    /// Inference route: di (weighted bootstrap) or mi (Rubin's rule).
    #[arg(long)]
    method: Option<String>,
    /// Number of imputations.
    #[arg(long)]
    m: Option<usize>,
    /// Bootstrap replicates (di only).
    #[arg(long)]
    b: Option<usize>,
    /// Bootstrap weight distribution: exp1 | poisson1.
    #[arg(long)]
    weights: Option<WeightSchemeOpt>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV path for CDF curves (cdf estimand only).
    #[arg(long, name = "cdf-out")]
    cdf_out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario cell: {j2r,rtb,washout}-{ate,risk,qte}.
    #[arg(long)]
    preset: Option<PresetOpt>,
    /// Subjects per arm.
    #[arg(long)]
    n: Option<usize>,
    /// Number of imputations.
    #[arg(long)]
    m: Option<usize>,
    /// Bootstrap replicates.
    #[arg(long)]
    b: Option<usize>,
    /// Monte Carlo replications.
    #[arg(long)]
    reps: Option<usize>,
    /// Bootstrap weight distribution: exp1 | poisson1.
    #[arg(long)]
    weights: Option<WeightSchemeOpt>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the first replication's dataset to this CSV (with
    /// `--reps 0`, only generate the dataset).
    #[arg(long, name = "emit-data")]
    emit_data: Option<PathBuf>,
}

// FromStr newtype wrappers so clap and the config file share parsers.
macro_rules! fromstr_opt {
    ($name:ident, $inner:ty) => {
        #[derive(Debug, Clone, Copy)]
        struct $name($inner);
        impl std::str::FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                s.parse().map($name)
            }
        }
    };
}
fromstr_opt!(SensitivityModelOpt, SensitivityModel);
fromstr_opt!(WeightSchemeOpt, WeightScheme);
fromstr_opt!(PresetOpt, Preset);

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let threads = cli.threads.or(cfg.get("threads")?);
    let run_all = || -> Result<()> {
        match cli.command {
            Command::Fit(args) => cmd_fit(args, &cfg),
            Command::Impute(args) => cmd_impute(args, &cfg),
            Command::Analyze(args) => cmd_analyze(args, &cfg),
            Command::Simulate(args) => cmd_simulate(args, &cfg),
        }
    };
    match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .context("building thread pool")?
            .install(run_all),
        None => run_all(),
    }
}

fn load_dataset(input: &InputArgs, cfg: &ConfigFile) -> Result<(TrialDataset, PathBuf, bool)> {
    let path = resolve_required(input.input.clone(), cfg, "input")?;
    let long = input.long || cfg.get_flag("long")?;
    let ds = if long {
        TrialDataset::load_csv_long(&path)
    } else {
        TrialDataset::load_csv(&path)
    }
    .with_context(|| format!("loading {}", path.display()))?;
    Ok((ds, path, long))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_fit(args: FitArgs, cfg: &ConfigFile) -> Result<()> {
    let (ds, input_path, long) = load_dataset(&args.input, cfg)?;
    let out: PathBuf = resolve(args.out, cfg, "out", PathBuf::from("fit.json"))?;
    let fit = mmrm::fit(&ds, None)?;
    let config = serde_json::json!({
        "command": "fit",
        "input": input_path,
        "long": long,
    });
    let doc = serde_json::json!({ "config": config, "fit": fit });
    write_text(&out, &serde_json::to_string_pretty(&doc)?)?;
    let sizes = ds.group_sizes();
    println!(
        "fit: {} subjects (control {}, treatment {}), T = {}, loglik = {:.4}; wrote {}",
        ds.n_subjects(),
        sizes[0],
        sizes[1],
        ds.n_visits(),
        fit.loglik.unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_impute(args: ImputeArgs, cfg: &ConfigFile) -> Result<()> {
    let (ds, input_path, long) = load_dataset(&args.input, cfg)?;
    let model = resolve_required(args.model, cfg, "model")?.0;
    let m = resolve(args.m, cfg, "m", 100)?;
    let seed = resolve(args.seed, cfg, "seed", 0)?;
    let emit = resolve(args.emit, cfg, "emit", 1)?;
    let out: PathBuf = resolve(args.out, cfg, "out", PathBuf::from("imputed.csv"))?;
    if emit == 0 || emit > m {
        bail!("--emit must be between 1 and M = {m}");
    }
    let fit = mmrm::fit(&ds, None)?;
    let set = impute(&fit, &ds, model, m, derive_seed(seed, SALT_IMPUTE))?;
    let config = serde_json::json!({
        "command": "impute",
        "input": input_path,
        "long": long,
        "model": model,
        "m": m,
        "seed": seed,
        "emit": emit,
    });
    let text = completed_csv(&ds, &set, emit - 1, &config)?;
    write_text(&out, &text)?;
    println!(
        "impute: model {model}, M = {m}, seed {seed}; emitted completion {emit} to {} ({} incomplete subjects)",
        out.display(),
        set.n_incomplete()
    );
    Ok(())
}

/// The m-th completed dataset in the wide layout, with the resolved config
/// embedded as leading comment lines. Visits a model does not impute (the
/// intermediate visits under rtb/washout) stay NA.
fn completed_csv(
    ds: &TrialDataset,
    set: &ImputationSet,
    m_idx: usize,
    config: &serde_json::Value,
) -> Result<String> {
    let mut text = String::new();
    for (key, value) in config.as_object().into_iter().flatten() {
        text.push_str(&format!("# {key}={value}\n"));
    }
    let mut header = Vec::new();
    for j in 1..=ds.n_covariates() {
        header.push(format!("x{j}"));
    }
    header.push("group".into());
    for k in 1..=ds.n_visits() {
        header.push(format!("y{k}"));
    }
    text.push_str(&header.join(","));
    text.push('\n');
    for (i, s) in ds.subjects().iter().enumerate() {
        let mut cells: Vec<String> = s.covariates.iter().map(|x| format!("{x}")).collect();
        cells.push(s.group.label().to_string());
        let mut visit_values: Vec<Option<f64>> = (0..ds.n_visits())
            .map(|k| s.outcomes.get(k).copied())
            .collect();
        if let SubjectDraws::Imputed { visits, draws } = set.subject(i) {
            for (row, visit) in visits.iter().enumerate() {
                visit_values[visit - 1] = Some(draws[(row, m_idx)]);
            }
        }
        for v in visit_values {
            cells.push(v.map_or("NA".into(), |x| format!("{x}")));
        }
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    Ok(text)
}

/// Estimand grammar: `ate`, `ate-ancova`, `risk:<threshold>`, `qte:<q>`,
/// `cdf`, `cdf:<lo>:<hi>:<points>`. A bare `cdf` gets its grid from the
/// pooled endpoint range after imputation.
fn parse_estimand(s: &str) -> Result<ParsedEstimand> {
    if s == "ate" {
        return Ok(ParsedEstimand::Spec(EstimandSpec::AteSimple));
    }
    if s == "ate-ancova" {
        return Ok(ParsedEstimand::Spec(EstimandSpec::AteAncova));
    }
    if s == "cdf" {
        return Ok(ParsedEstimand::CdfAuto);
    }
    if let Some(rest) = s.strip_prefix("risk:") {
        let threshold: f64 = rest.parse().map_err(|_| anyhow!("bad risk threshold '{rest}'"))?;
        return Ok(ParsedEstimand::Spec(EstimandSpec::RiskDiff { threshold }));
    }
    if let Some(rest) = s.strip_prefix("qte:") {
        let q: f64 = rest.parse().map_err(|_| anyhow!("bad quantile level '{rest}'"))?;
        return Ok(ParsedEstimand::Spec(EstimandSpec::Qte { q }));
    }
    if let Some(rest) = s.strip_prefix("cdf:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            bail!("cdf grid must be cdf:<lo>:<hi>:<points>");
        }
        let lo: f64 = parts[0].parse().map_err(|_| anyhow!("bad grid lo"))?;
        let hi: f64 = parts[1].parse().map_err(|_| anyhow!("bad grid hi"))?;
        let points: usize = parts[2].parse().map_err(|_| anyhow!("bad grid size"))?;
        if points < 2 || hi <= lo || !hi.is_finite() || !lo.is_finite() {
            bail!("cdf grid needs hi > lo and at least 2 points");
        }
        let grid = (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect();
        return Ok(ParsedEstimand::Spec(EstimandSpec::CdfCurve { grid }));
    }
    bail!("unknown estimand '{s}' (expected ate|ate-ancova|risk:c|qte:q|cdf)")
}

enum ParsedEstimand {
    Spec(EstimandSpec),
    CdfAuto,
}

fn auto_cdf_grid(ds: &TrialDataset, set: &ImputationSet) -> EstimandSpec {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, s) in ds.subjects().iter().enumerate() {
        match set.subject(i) {
            SubjectDraws::Complete => {
                let y = *s.outcomes.last().unwrap();
                lo = lo.min(y);
                hi = hi.max(y);
            }
            SubjectDraws::Imputed { draws, .. } => {
                let last = draws.nrows() - 1;
                for m in 0..draws.ncols() {
                    lo = lo.min(draws[(last, m)]);
                    hi = hi.max(draws[(last, m)]);
                }
            }
        }
    }
    let margin = 0.01 * (hi - lo).max(1.0);
    let (lo, hi) = (lo - margin, hi + margin);
    let points = 201;
    EstimandSpec::CdfCurve {
        grid: (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect(),
    }
}

fn cmd_analyze(args: AnalyzeArgs, cfg: &ConfigFile) -> Result<()> {
    let (ds, input_path, long) = load_dataset(&args.input, cfg)?;
    let model = resolve_required(args.model, cfg, "model")?.0;
    let estimand_str: String = resolve(args.estimand, cfg, "estimand", "ate-ancova".into())?;
    let method: String = resolve(args.method, cfg, "method", "di".into())?;
    let m = resolve(args.m, cfg, "m", 100)?;
    let b = resolve(args.b, cfg, "b", 100)?;
    let weights = resolve(args.weights, cfg, "weights", WeightSchemeOpt(WeightScheme::Exp1))?.0;
    let seed = resolve(args.seed, cfg, "seed", 0)?;
    let out: PathBuf = resolve(args.out, cfg, "out", PathBuf::from("analysis.json"))?;
    let cdf_out: Option<PathBuf> = args.cdf_out.or(cfg.get("cdf-out")?);
    if method != "di" && method != "mi" {
        bail!("--method must be di or mi");
    }

    let fit = mmrm::fit(&ds, None)?;
    let set = impute(&fit, &ds, model, m, derive_seed(seed, SALT_IMPUTE))?;
    let spec = match parse_estimand(&estimand_str)? {
        ParsedEstimand::Spec(spec) => spec,
        ParsedEstimand::CdfAuto => auto_cdf_grid(&ds, &set),
    };
    let config = serde_json::json!({
        "command": "analyze",
        "input": input_path,
        "long": long,
        "model": model,
        "estimand": estimand_str,
        "method": method,
        "m": m,
        "b": b,
        "weights": weights.to_string(),
        "seed": seed,
    });

    if let EstimandSpec::CdfCurve { grid } = &spec {
        // Curve estimand: emit the pooled DI point curves; interval
        // estimation is defined for the scalar estimands.
        let point = solve_di(&set, &ds, &spec)?;
        let path = cdf_out.unwrap_or_else(|| out.with_extension("cdf.csv"));
        let mut text = String::new();
        for (key, value) in config.as_object().into_iter().flatten() {
            text.push_str(&format!("# {key}={value}\n"));
        }
        text.push_str("value,cdf_control,cdf_treatment,difference\n");
        let c1 = point.tau_1.as_curve().unwrap();
        let c2 = point.tau_2.as_curve().unwrap();
        let d = point.tau.as_curve().unwrap();
        for (i, t) in grid.iter().enumerate() {
            text.push_str(&format!("{t},{},{},{}\n", c1[i], c2[i], d[i]));
        }
        write_text(&path, &text)?;
        let doc = serde_json::json!({ "config": config, "point": point });
        write_text(&out, &serde_json::to_string_pretty(&doc)?)?;
        println!(
            "analyze: cdf over {} grid points; curves in {}, point estimates in {}",
            grid.len(),
            path.display(),
            out.display()
        );
        return Ok(());
    }

    let (result, point): (InferenceOutput, PointEstimate) = if method == "di" {
        let cfg_b = BootstrapConfig {
            replicates: b,
            weight_scheme: weights,
            seed: derive_seed(seed, SALT_BOOT),
        };
        let point = solve_di(&set, &ds, &spec)?;
        let result = weighted_bootstrap(&set, &ds, &fit, model, &spec, &cfg_b)?;
        (result, point)
    } else {
        let mut estimates = Vec::with_capacity(m);
        let mut within = Vec::with_capacity(m);
        let mut last_point = None;
        for m_idx in 0..m {
            let endpoints = completed_endpoint(&set, &ds, m_idx)?;
            let est = solve_complete(&ds, &endpoints, &spec)?;
            estimates.push(est.scalar().ok_or_else(|| anyhow!("scalar estimand expected"))?);
            within.push(complete_data_variance(&ds, &endpoints, &spec)?);
            last_point = Some(est);
        }
        let result = rubin_combine(&estimates, &within)?;
        (result, last_point.expect("at least one imputation"))
    };

    let doc = serde_json::json!({ "config": config, "result": result, "point": point });
    write_text(&out, &serde_json::to_string_pretty(&doc)?)?;
    println!(
        "analyze[{method}] model={model} estimand={estimand_str}: tau = {:.4}, se = {:.4}, 95% CI ({:.4}, {:.4}), p = {:.4}; wrote {}",
        result.tau_hat,
        result.se,
        result.ci.0,
        result.ci.1,
        result.p_value,
        out.display()
    );
    Ok(())
}

fn cmd_simulate(args: SimulateArgs, cfg: &ConfigFile) -> Result<()> {
    let preset = resolve_required(args.preset, cfg, "preset")?.0;
    let mut scn = paper_scenario(preset);
    scn.n_per_group = resolve(args.n, cfg, "n", scn.n_per_group)?;
    scn.m = resolve(args.m, cfg, "m", scn.m)?;
    scn.b = resolve(args.b, cfg, "b", scn.b)?;
    scn.n_reps = resolve(args.reps, cfg, "reps", scn.n_reps)?;
    scn.seed = resolve(args.seed, cfg, "seed", scn.seed)?;
    scn.weight_scheme = resolve(
        args.weights,
        cfg,
        "weights",
        WeightSchemeOpt(scn.weight_scheme),
    )?
    .0;
    let out: PathBuf = resolve(args.out, cfg, "out", PathBuf::from("metrics.csv"))?;

    if let Some(data_path) = &args.emit_data {
        let ds = distimp::sim::replication_dataset(&scn, 0)?;
        ds.write_csv(data_path)
            .with_context(|| format!("writing {}", data_path.display()))?;
        println!(
            "simulate: wrote replication-0 dataset ({} subjects) to {}",
            ds.n_subjects(),
            data_path.display()
        );
        if scn.n_reps == 0 {
            return Ok(());
        }
    }

    let report = run_monte_carlo(&scn)?;
    let config = serde_json::json!({
        "command": "simulate",
        "preset": preset.to_string(),
        "n": scn.n_per_group,
        "m": scn.m,
        "b": scn.b,
        "reps": scn.n_reps,
        "weights": scn.weight_scheme.to_string(),
        "seed": scn.seed,
        "true_tau": report.true_tau,
    });
    write_text(&out, &metrics_csv(&report, &config))?;
    print_metrics(&report);
    println!("simulate: wrote {}", out.display());
    Ok(())
}

fn metrics_csv(report: &McReport, config: &serde_json::Value) -> String {
    let mut text = String::new();
    for (key, value) in config.as_object().into_iter().flatten() {
        text.push_str(&format!("# {key}={value}\n"));
    }
    text.push_str("method,point_est,true_var,var_est,relative_bias_pct,coverage_pct,mean_ci_length\n");
    for row in [&report.mi, &report.di] {
        let name = match row.method {
            distimp::inference::InferenceMethod::MiRubin => "MI",
            distimp::inference::InferenceMethod::DiWeightedBootstrap => "DI",
            distimp::inference::InferenceMethod::Wald => "Wald",
        };
        text.push_str(&format!(
            "{name},{},{},{},{},{},{}\n",
            row.mean_point,
            row.mc_var,
            row.mean_var_est,
            100.0 * row.relative_bias,
            100.0 * row.coverage,
            row.mean_ci_length
        ));
    }
    text
}

fn print_metrics(report: &McReport) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "true tau = {:.4}; {} replications ({} failed)",
        report.true_tau, report.n_reps, report.n_failed
    );
    let _ = writeln!(
        out,
        "{:<4} {:>10} {:>10} {:>10} {:>10} {:>9} {:>10}",
        "", "Point est", "True var", "Var est", "Rel bias%", "Cover%", "CI length"
    );
    for (name, row) in [("MI", &report.mi), ("DI", &report.di)] {
        let _ = writeln!(
            out,
            "{:<4} {:>10.4} {:>10.5} {:>10.5} {:>10.2} {:>9.2} {:>10.4}",
            name,
            row.mean_point,
            row.mc_var,
            row.mean_var_est,
            100.0 * row.relative_bias,
            100.0 * row.coverage,
            row.mean_ci_length
        );
    }
}
