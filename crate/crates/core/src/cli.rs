//! Command-line front end: `summarize`, `generate`, `fit` and `simulate`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::bundle_io::{merge_bundles, read_bundle_dir, write_bundle_dir};
use crate::error::{Error, Result};
use crate::glmm::{
    design_with_intercept, fit_glmm, fit_logistic, render_comparison, CiMethod, FitReport, GlmmOptions, LogisticOptions,
};
use crate::ingest::{load_csv, write_clusters_csv, CategoricalSpec, IngestSpec, LoadedData};
use crate::moments::{summarize_cluster, ClusterData, VariableKind, VariableMeta};
use crate::pseudogen::{generate_cluster, GenerateOptions, MomentDiagnostics};
use crate::seeding::derive_seed;
use crate::simlab::{run_experiment, ExperimentReport, SimConfig};

pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Parser)]
#[command(name = "pseudoglmm", version, about = "Moment summaries, pseudo-data and random-intercept logistic fits")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Base seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: log::LevelFilter,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reduce each cluster of a CSV to a moment bundle.
    Summarize(SummarizeArgs),
    /// Generate pseudo-data from a bundle directory.
    Generate(GenerateArgs),
    /// Fit a fixed-effects or random-intercept logistic model.
    Fit(FitArgs),
    /// Run the simulation study.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ColumnArgs {
    #[arg(long, default_value = "cluster_id")]
    pub cluster_col: String,
    #[arg(long, default_value = "y")]
    pub response_col: String,
    /// Comma-separated predictor columns (default: all other columns).
    #[arg(long, value_delimiter = ',')]
    pub predictors: Option<Vec<String>>,
    /// `column` or `column=reference,level2,...`; repeatable.
    #[arg(long)]
    pub categorical: Vec<CategoricalSpec>,
}

impl ColumnArgs {
    fn ingest_spec(&self, standardize: Vec<String>) -> IngestSpec {
        IngestSpec {
            cluster_column: self.cluster_col.clone(),
            response_column: self.response_col.clone(),
            predictors: self.predictors.clone(),
            categorical: self.categorical.clone(),
            standardize,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub columns: ColumnArgs,
    #[arg(long, default_value_t = 3)]
    pub max_order: u32,
    /// Comma-separated numeric columns to standardize per cluster.
    #[arg(long, value_delimiter = ',')]
    pub standardize: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub bundles: PathBuf,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol_ssd: Option<f64>,
    #[arg(long)]
    pub tol_step: Option<f64>,
    #[arg(long)]
    pub tol_grad: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Fixed,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CiArg {
    Wald,
    Profile,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Second data set fitted with the same options and shown side by side.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[command(flatten)]
    pub columns: ColumnArgs,
    #[arg(long, value_enum, default_value_t = ModelArg::Mixed)]
    pub model: ModelArg,
    #[arg(long = "nagq", default_value_t = 7)]
    pub n_agq: usize,
    #[arg(long, value_enum, default_value_t = CiArg::Wald)]
    pub ci: CiArg,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// JSON configuration; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses arguments, configures logging and the thread pool, and runs.
pub fn run(cli: Cli) -> Result<()> {
    let _ = env_logger::Builder::new()
        .filter_level(cli.global.log_level)
        .format_timestamp(None)
        .try_init();
    if cli.global.threads == Some(0) {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.global.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&cli.global, &cli.command))
}

fn dispatch(global: &GlobalArgs, command: &Command) -> Result<()> {
    match command {
        Command::Summarize(a) => cmd_summarize(global, a).map(|_| ()),
        Command::Generate(a) => cmd_generate(global, a).map(|_| ()),
        Command::Fit(a) => cmd_fit(global, a).map(|_| ()),
        Command::Simulate(a) => cmd_simulate(global, a).map(|_| ()),
    }
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_writer(fs::File::create(path)?))
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(e.to_string())
}

/// Per-cluster metadata. Columns requested for standardization that are
/// constant within the cluster are summarized on their original scale.
fn cluster_metas(c: &ClusterData, metas: &[VariableMeta]) -> Vec<VariableMeta> {
    metas
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let col = c.x.column(j);
            if m.standardized && col.iter().all(|&v| v == col[0]) {
                warn!("cluster `{}`: `{}` is constant, left unstandardized", c.cluster_id, m.name);
                VariableMeta::numeric(m.name.clone())
            } else {
                m.clone()
            }
        })
        .collect()
}

pub fn cmd_summarize(global: &GlobalArgs, args: &SummarizeArgs) -> Result<Vec<PathBuf>> {
    if !(1..=4).contains(&args.max_order) {
        return Err(Error::Usage(format!("--max-order must be 1..=4 (got {})", args.max_order)));
    }
    let loaded = load_csv(&args.input, &args.columns.ingest_spec(args.standardize.clone()))?;
    let LoadedData { response_name, predictors, dataset } = loaded;
    let results: Vec<Option<_>> = dataset
        .clusters
        .par_iter()
        .map(|c| match summarize_cluster(c, &response_name, &cluster_metas(c, &predictors), args.max_order) {
            Err(Error::ClusterTooSmall { cluster_id, n }) => {
                eprintln!("notice: skipping cluster `{cluster_id}` with n = {n}");
                Ok(None)
            }
            other => other.map(Some),
        })
        .collect::<Result<_>>()?;
    let bundles: Vec<_> = results.into_iter().flatten().collect();
    if bundles.is_empty() {
        return Err(Error::InvalidInput("no cluster has at least 2 observations".into()));
    }
    let set = merge_bundles(bundles)?;
    create_out(&global.out)?;
    let paths = write_bundle_dir(&global.out, &set)?;
    info!("wrote {} bundles to {}", set.bundles.len(), global.out.display());
    Ok(paths)
}

#[derive(Debug, Serialize)]
pub struct GenerateSummary {
    pub seed: u64,
    pub n_clusters: usize,
    pub n_obs: usize,
    pub max_abs_difference: f64,
    /// Worst absolute moment difference by moment order over all clusters.
    pub max_abs_difference_by_order: BTreeMap<u32, f64>,
    pub warnings: Vec<String>,
}

pub fn cmd_generate(global: &GlobalArgs, args: &GenerateArgs) -> Result<GenerateSummary> {
    let set = read_bundle_dir(&args.bundles)?;
    let seed = global.seed.unwrap_or(DEFAULT_SEED);
    let mut base = GenerateOptions::default();
    if let Some(v) = args.max_iter {
        base.lm.max_iterations = Some(v);
    }
    for (flag, value, slot) in [
        ("--tol-ssd", args.tol_ssd, &mut base.lm.tol_ssd),
        ("--tol-step", args.tol_step, &mut base.lm.tol_step),
        ("--tol-grad", args.tol_grad, &mut base.lm.tol_grad),
    ] {
        if let Some(v) = value {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Usage(format!("{flag} must be a non-negative number")));
            }
            *slot = v;
        }
    }
    let generated: Vec<(ClusterData, MomentDiagnostics)> = set
        .bundles
        .par_iter()
        .enumerate()
        .map(|(i, b)| {
            let opts = GenerateOptions {
                seed: derive_seed(seed, &[i as u64]),
                ..base.clone()
            };
            let (pseudo, diag) = generate_cluster(b, &opts)?;
            Ok((pseudo.to_original_scale(), diag))
        })
        .collect::<Result<_>>()?;

    create_out(&global.out)?;
    let names: Vec<String> = set
        .variable_signature
        .iter()
        .filter(|(_, k)| *k != VariableKind::BinaryResponse)
        .map(|(n, _)| n.clone())
        .collect();
    let clusters: Vec<ClusterData> = generated.iter().map(|(c, _)| c.clone()).collect();
    write_clusters_csv(fs::File::create(global.out.join("pseudo.csv"))?, "cluster_id", "y", &names, &clusters)?;

    let mut w = csv_writer(&global.out.join("diagnostics.csv"))?;
    w.write_record(["cluster_id", "multi_index", "order", "target", "achieved", "abs_difference"])
        .map_err(csv_err)?;
    let mut by_order = BTreeMap::new();
    let mut warnings = Vec::new();
    for (_, d) in &generated {
        for r in &d.rows {
            w.write_record([
                d.cluster_id.clone(),
                r.multi_index.to_string(),
                r.multi_index.total_order().to_string(),
                fmt17(r.target),
                fmt17(r.achieved),
                fmt17(r.abs_difference),
            ])
            .map_err(csv_err)?;
        }
        for (k, v) in d.max_abs_difference_by_order() {
            let e = by_order.entry(k).or_insert(0.0f64);
            *e = e.max(v);
        }
        warnings.extend(d.warnings.iter().map(|m| format!("{}: {m}", d.cluster_id)));
    }
    w.flush()?;
    let summary = GenerateSummary {
        seed,
        n_clusters: clusters.len(),
        n_obs: clusters.iter().map(ClusterData::n).sum(),
        max_abs_difference: by_order.values().copied().fold(0.0, f64::max),
        max_abs_difference_by_order: by_order,
        warnings,
    };
    write_json(&global.out.join("generate_summary.json"), &summary)?;
    for (k, v) in &summary.max_abs_difference_by_order {
        println!("order {k}: max |moment difference| = {v:.4e}");
    }
    for m in &summary.warnings {
        warn!("{m}");
    }
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct FitOutput {
    pub data: String,
    pub report: FitReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compare: Option<Box<FitOutput>>,
}

fn fit_one(path: &Path, args: &FitArgs) -> Result<FitReport> {
    let loaded = load_csv(path, &args.columns.ingest_spec(Vec::new()))?;
    let data = loaded.dataset;
    let mut names = vec![crate::glmm::INTERCEPT_NAME.to_string()];
    names.extend(data.predictor_names.iter().cloned());
    match args.model {
        ModelArg::Fixed => {
            let (y, x) = data.pooled();
            let fit = fit_logistic(&y, &design_with_intercept(&x), &LogisticOptions::default())?;
            Ok(FitReport::from_fixed(&fit, &names, &y, &x, data.clusters.len(), args.level))
        }
        ModelArg::Mixed => {
            let opts = GlmmOptions {
                n_quad: args.n_agq,
                level: args.level,
                ci_method: match args.ci {
                    CiArg::Wald => CiMethod::Wald,
                    CiArg::Profile => CiMethod::Profile,
                },
                ..GlmmOptions::default()
            };
            opts.validate()?;
            let fit = fit_glmm(&data, &opts)?;
            Ok(FitReport::from_glmm(&fit, &data))
        }
    }
}

fn label(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn cmd_fit(global: &GlobalArgs, args: &FitArgs) -> Result<FitOutput> {
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Error::Usage(format!("--level must be in (0, 1) (got {})", args.level)));
    }
    let report = fit_one(&args.data, args)?;
    let compare = match &args.compare {
        Some(p) => Some(Box::new(FitOutput {
            data: label(p),
            report: fit_one(p, args)?,
            compare: None,
        })),
        None => None,
    };
    let out = FitOutput {
        data: label(&args.data),
        report,
        compare,
    };
    let mut columns = vec![(out.data.as_str(), &out.report)];
    if let Some(c) = &out.compare {
        columns.push((c.data.as_str(), &c.report));
    }
    let table = render_comparison(&columns);
    create_out(&global.out)?;
    write_json(&global.out.join("fit.json"), &out)?;
    fs::write(global.out.join("fit.txt"), &table)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(table.as_bytes())?;
    for (name, r) in &columns {
        if !r.converged {
            writeln!(stdout, "WARNING: fit of `{name}` did not converge")?;
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct SimulateSummary<'a> {
    config: &'a SimConfig,
    summary: &'a [crate::simlab::ParamSummary],
    aic: &'a [crate::simlab::AicSummary],
    n_not_converged: BTreeMap<String, usize>,
}

pub fn load_sim_config(path: Option<&Path>) -> Result<SimConfig> {
    match path {
        Some(p) => {
            let raw = fs::read_to_string(p)?;
            serde_json::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
        None => Ok(SimConfig::default()),
    }
}

pub fn cmd_simulate(global: &GlobalArgs, args: &SimulateArgs) -> Result<ExperimentReport> {
    let mut cfg = load_sim_config(args.config.as_deref())?;
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let report = run_experiment(&cfg)?;
    create_out(&global.out)?;

    let mut w = csv_writer(&global.out.join("report.csv"))?;
    w.write_record([
        "replicate", "arm", "parameter", "truth", "estimate", "bias", "std_error", "ci_lower", "ci_upper", "covered",
        "converged",
    ])
    .map_err(csv_err)?;
    for r in &report.params {
        w.write_record([
            r.replicate.to_string(),
            r.arm.label(),
            r.parameter.clone(),
            fmt17(r.truth),
            fmt17(r.estimate),
            fmt17(r.bias),
            fmt17(r.std_error),
            fmt17(r.ci_lower),
            fmt17(r.ci_upper),
            r.covered.to_string(),
            r.converged.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv_writer(&global.out.join("arms.csv"))?;
    w.write_record(["replicate", "arm", "converged", "loglik", "aic", "max_moment_difference", "error"])
        .map_err(csv_err)?;
    for a in &report.arms {
        w.write_record([
            a.replicate.to_string(),
            a.arm.label(),
            a.converged.to_string(),
            fmt17(a.loglik),
            fmt17(a.aic),
            a.max_moment_difference.map(fmt17).unwrap_or_default(),
            a.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut n_not_converged = BTreeMap::new();
    for a in &report.arms {
        *n_not_converged.entry(a.arm.label()).or_insert(0) += usize::from(!a.converged);
    }
    write_json(
        &global.out.join("summary.json"),
        &SimulateSummary {
            config: &report.config,
            summary: &report.summary,
            aic: &report.aic,
            n_not_converged,
        },
    )?;
    println!("{:<6} {:<12} {:>9} {:>9} {:>9} {:>6}", "arm", "parameter", "bias", "|bias|", "coverage", "band");
    for s in &report.summary {
        println!(
            "{:<6} {:<12} {:>9.4} {:>9.4} {:>9.4} {:>6}",
            s.arm.label(),
            s.parameter,
            s.mean_bias,
            s.mean_abs_bias,
            s.coverage,
            if s.coverage_in_band { "in" } else { "out" }
        );
    }
    Ok(report)
}
