//! Subcommand plumbing: gen, train, eval, sweep, compare.
//!
//! A run is fully determined by a JSON config plus flag overrides (flags
//! win); every artifact embeds the resolved config so results stay
//! attributable. Exit codes: 0 success, 1 usage, 2 data/IO, 3 numerical
//! failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{bin_of, boundaries_for_groups, ClassCatalog, GroupPartition, NUM_BINS};
use crate::error::{Error, Result};
use crate::head::{load_checkpoint, save_checkpoint, HeadLayout, HeadParams};
use crate::inference::{
    BagsPredictor, NcmPredictor, PlainSoftmaxPredictor, TauSelectPredictor,
};
use crate::metrics::{evaluate, export_norms, MetricsReport};
use crate::synthdata::{self, Dataset, SynthConfig};
use crate::train::{self, Method, SamplerKind, TrainConfig, TrainHistory};

pub const THREADS_ENV: &str = "LONGTAIL_LAB_THREADS";

/// Everything a run needs, in one serializable bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    /// Foreground groups for the group-softmax layout.
    pub num_groups: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { synth: SynthConfig::default(), train: TrainConfig::default(), num_groups: 4 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn partition(&self, catalog: &ClassCatalog) -> Result<GroupPartition> {
        GroupPartition::assign(catalog, &boundaries_for_groups(self.num_groups)?)
    }
}

#[derive(Parser)]
#[command(name = "longtail-lab", about = "Long-tail classifier-head experiments on synthetic features")]
struct TopLevel {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the generation and training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Uniform,
    Rfs,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    /// Pick from the checkpoint layout (plain softmax or group softmax).
    Auto,
    /// Background-gated tau-normalized scoring on a plain checkpoint.
    Tau,
    /// Background-gated nearest-class-mean scoring on a plain checkpoint.
    Ncm,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepAxis {
    Beta,
    Groups,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    #[arg(long)]
    rfs_t: Option<f64>,
    /// Checkpoint to continue from (required for tail_finetune).
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tail dataset.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a classifier head on a generated dataset.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Evaluate a checkpoint and export metrics + weight norms.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        predictor: PredictorArg,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
    },
    /// Train + eval across one axis (beta or groups), one row per value.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values, e.g. 0,1,2,4,8,16.
        #[arg(long)]
        values: String,
    },
    /// Train + eval several methods side by side.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated method names.
        #[arg(long)]
        methods: String,
    },
}

/// Parse argv and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let top = match TopLevel::try_parse_from(args) {
        Ok(top) => top,
        Err(err) => {
            // clap handles --help/--version by "erroring" with exit code 0
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(top.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => 1,
                Error::Numeric(_) => 3,
                _ => 2,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen { common } => cmd_gen(common),
        Command::Train { common, dataset, flags } => {
            cmd_train(common, &dataset, flags).map(|_| ())
        }
        Command::Eval { common, checkpoint, dataset, predictor, tau } => {
            cmd_eval(common, &checkpoint, &dataset, predictor, tau).map(|_| ())
        }
        Command::Sweep { common, dataset, axis, values } => cmd_sweep(common, &dataset, axis, &values),
        Command::Compare { common, dataset, methods } => cmd_compare(common, &dataset, &methods),
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.synth.seed = seed;
        config.train.seed = seed;
    }
    Ok(config)
}

fn ensure_out_dir(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        let non_empty = std::fs::read_dir(path)?.next().is_some();
        if non_empty && !force {
            return Err(Error::config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                path.display()
            )));
        }
    } else {
        std::fs::create_dir_all(path)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text.as_bytes())?;
    Ok(())
}

fn cmd_gen(common: CommonArgs) -> Result<()> {
    let config = load_config(&common)?;
    ensure_out_dir(&common.out, common.force)?;
    let dataset = synthdata::generate(&config.synth)?;
    synthdata::save(&dataset, &common.out)?;
    let mut per_bin = [0usize; NUM_BINS];
    for &count in dataset.catalog.counts() {
        per_bin[bin_of(count) - 1] += 1;
    }
    println!(
        "generated {} classes ({} train / {} eval records) into {}",
        dataset.catalog.num_foreground(),
        dataset.train.len(),
        dataset.eval.len(),
        common.out.display()
    );
    for (b, n) in per_bin.iter().enumerate() {
        println!("  bin {} (counts in {}): {} classes", b + 1, bin_range_label(b + 1), n);
    }
    Ok(())
}

fn bin_range_label(bin: usize) -> &'static str {
    match bin {
        1 => "[1, 10)",
        2 => "[10, 100)",
        3 => "[100, 1000)",
        _ => "[1000, inf)",
    }
}

struct TrainOutcome {
    params: HeadParams,
    history: TrainHistory,
    train_config: TrainConfig,
}

fn resolve_train_config(config: &RunConfig, flags: &TrainFlags) -> Result<(TrainConfig, usize)> {
    let mut tc = config.train.clone();
    let mut groups = config.num_groups;
    if let Some(name) = &flags.method {
        tc.method = Method::parse(name)?;
    }
    let is_bags = tc.method == Method::Bags;
    match flags.beta {
        Some(beta) if is_bags => tc.beta = beta,
        Some(_) => eprintln!("warning: --beta only applies to method=bags; ignoring"),
        None => {}
    }
    match flags.gamma {
        Some(gamma) if tc.method == Method::Focal => tc.gamma = gamma,
        Some(_) => eprintln!("warning: --gamma only applies to method=focal; ignoring"),
        None => {}
    }
    match flags.groups {
        Some(g) if is_bags => groups = g,
        Some(_) => eprintln!("warning: --groups only applies to method=bags; ignoring"),
        None => {}
    }
    if let Some(sampler) = flags.sampler {
        tc.sampler = match sampler {
            SamplerArg::Uniform => SamplerKind::Uniform,
            SamplerArg::Rfs => SamplerKind::Rfs,
        };
    }
    match flags.rfs_t {
        Some(t) if tc.sampler == SamplerKind::Rfs => tc.rfs_t = t,
        Some(_) => eprintln!("warning: --rfs-t only applies with --sampler rfs; ignoring"),
        None => {}
    }
    if flags.init_checkpoint.is_some() && tc.method != Method::TailFinetune {
        eprintln!("warning: --init-checkpoint only applies to method=tail_finetune; ignoring");
    }
    Ok((tc, groups))
}

fn train_once(
    dataset: &Dataset,
    config: &RunConfig,
    tc: &TrainConfig,
    groups: usize,
    init_checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    let layout = if tc.method == Method::Bags {
        let partition = GroupPartition::assign(&dataset.catalog, &boundaries_for_groups(groups)?)?;
        HeadLayout::Bags { partition }
    } else {
        HeadLayout::Plain { num_foreground: dataset.catalog.num_foreground() }
    };
    let init_from = match (tc.method, init_checkpoint) {
        (Method::TailFinetune, Some(path)) => Some(load_checkpoint(path)?.0),
        (Method::TailFinetune, None) => {
            return Err(Error::config("tail_finetune requires --init-checkpoint"))
        }
        _ => None,
    };
    let (params, history) = train::train(dataset, layout, tc, init_from)?;
    let _ = config;
    Ok(TrainOutcome { params, history, train_config: tc.clone() })
}

fn cmd_train(common: CommonArgs, dataset_dir: &Path, flags: TrainFlags) -> Result<TrainOutcome> {
    let config = load_config(&common)?;
    let (tc, groups) = resolve_train_config(&config, &flags)?;
    ensure_out_dir(&common.out, common.force)?;
    let dataset = synthdata::load(dataset_dir)?;
    let outcome = train_once(&dataset, &config, &tc, groups, flags.init_checkpoint.as_deref())?;
    save_checkpoint(
        &outcome.params,
        tc.seed,
        outcome.train_config.method.name(),
        &common.out.join("checkpoint.bin"),
    )?;
    write_json(&outcome.history, &common.out.join("history.json"))?;
    let resolved = RunConfig { synth: dataset.config.clone(), train: tc.clone(), num_groups: groups };
    write_json(&resolved, &common.out.join("config.json"))?;
    println!(
        "trained method={} for {} epochs (final loss {:.6}) into {}",
        tc.method.name(),
        outcome.history.epoch_loss.len(),
        outcome.history.epoch_loss.last().copied().unwrap_or(f64::NAN),
        common.out.display()
    );
    Ok(outcome)
}

/// MetricsReport plus the config that produced it.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub config: RunConfig,
    pub report: MetricsReport,
}

fn evaluate_params(
    params: &HeadParams,
    dataset: &Dataset,
    method: &str,
    predictor: PredictorArg,
    tau: f64,
) -> Result<MetricsReport> {
    let report = match (params.layout(), predictor) {
        (HeadLayout::Bags { .. }, PredictorArg::Auto) => {
            let p = BagsPredictor::new(params)?;
            evaluate(&p, &dataset.eval, &dataset.catalog, method)?
        }
        (HeadLayout::Bags { .. }, _) => {
            return Err(Error::config(
                "tau/ncm predictors apply to plain-layout checkpoints only",
            ))
        }
        (HeadLayout::Plain { .. }, PredictorArg::Auto) => {
            let p = PlainSoftmaxPredictor::new(params)?;
            evaluate(&p, &dataset.eval, &dataset.catalog, method)?
        }
        (HeadLayout::Plain { .. }, PredictorArg::Tau) => {
            let p = TauSelectPredictor::new(params, tau)?;
            evaluate(&p, &dataset.eval, &dataset.catalog, &format!("{method}+tau"))?
        }
        (HeadLayout::Plain { .. }, PredictorArg::Ncm) => {
            let p = NcmPredictor::new(params, &dataset.train)?;
            evaluate(&p, &dataset.eval, &dataset.catalog, &format!("{method}+ncm"))?
        }
    };
    report.with_norms(params.weight_norms(), &dataset.catalog)
}

fn cmd_eval(
    common: CommonArgs,
    checkpoint: &Path,
    dataset_dir: &Path,
    predictor: PredictorArg,
    tau: f64,
) -> Result<MetricsReport> {
    let config = load_config(&common)?;
    ensure_out_dir(&common.out, common.force)?;
    let dataset = synthdata::load(dataset_dir)?;
    let (params, _seed, method) = load_checkpoint(checkpoint)?;
    let report = evaluate_params(&params, &dataset, &method, predictor, tau)?;
    let resolved = RunConfig { synth: dataset.config.clone(), ..config };
    if let Some(norms) = &report.weight_norms {
        export_norms(norms, &dataset.catalog, &common.out.join("norms.csv"))?;
    }
    let artifact = EvalArtifact { config: resolved, report };
    write_json(&artifact, &common.out.join("report.json"))?;
    println!(
        "method={} overall={:.4} bg={:.4} norm/count r={}",
        artifact.report.method,
        artifact.report.overall_acc,
        artifact.report.acc_bg,
        artifact
            .report
            .norm_count_correlation
            .map(|r| format!("{r:.3}"))
            .unwrap_or_else(|| "n/a".into()),
    );
    Ok(artifact.report)
}

fn metrics_csv_cells(report: &MetricsReport) -> String {
    let bins: Vec<String> = report
        .acc_per_bin
        .iter()
        .map(|b| b.map(|v| format!("{v:.6}")).unwrap_or_default())
        .collect();
    format!("{:.6},{},{:.6}", report.overall_acc, bins.join(","), report.acc_bg)
}

fn sweep_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| Error::config(format!("{THREADS_ENV} must be a positive integer")))
        })
        .transpose()?
        .unwrap_or(jobs)
        .max(1);
    rayon::ThreadPoolBuilder::new()
        .num_threads(cap.min(jobs.max(1)))
        .build()
        .map_err(|e| Error::config(format!("could not build worker pool: {e}")))
    }

fn cmd_sweep(common: CommonArgs, dataset_dir: &Path, axis: SweepAxis, values: &str) -> Result<()> {
    let config = load_config(&common)?;
    ensure_out_dir(&common.out, common.force)?;
    let dataset = synthdata::load(dataset_dir)?;
    let raw: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if raw.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }

    // each worker trains an independent head against the shared read-only dataset
    let jobs: Vec<(String, TrainConfig, usize)> = raw
        .iter()
        .map(|v| {
            let mut tc = config.train.clone();
            tc.method = Method::Bags;
            let mut groups = config.num_groups;
            match axis {
                SweepAxis::Beta => {
                    tc.beta = v
                        .parse::<f64>()
                        .map_err(|_| Error::config(format!("bad beta value {v:?}")))?;
                }
                SweepAxis::Groups => {
                    groups = v
                        .parse::<usize>()
                        .map_err(|_| Error::config(format!("bad groups value {v:?}")))?;
                }
            }
            Ok((v.to_string(), tc, groups))
        })
        .collect::<Result<_>>()?;

    let pool = sweep_pool(jobs.len())?;
    let rows: Vec<Result<String>> = pool.install(|| {
        jobs.par_iter()
            .map(|(label, tc, groups)| {
                let outcome = train_once(&dataset, &config, tc, *groups, None)?;
                let report = evaluate_params(
                    &outcome.params,
                    &dataset,
                    tc.method.name(),
                    PredictorArg::Auto,
                    1.0,
                )?;
                Ok(format!("{label},{}", metrics_csv_cells(&report)))
            })
            .collect()
    });

    let axis_name = match axis {
        SweepAxis::Beta => "beta",
        SweepAxis::Groups => "groups",
    };
    let mut csv = format!("{axis_name},overall_acc,acc_bin1,acc_bin2,acc_bin3,acc_bin4,acc_bg\n");
    for row in rows {
        csv.push_str(&row?);
        csv.push('\n');
    }
    std::fs::write(common.out.join("sweep.csv"), csv.as_bytes())?;
    write_json(&config, &common.out.join("config.json"))?;
    println!("swept {axis_name} over {} values into {}", raw.len(), common.out.display());
    Ok(())
}

fn cmd_compare(common: CommonArgs, dataset_dir: &Path, methods: &str) -> Result<()> {
    let config = load_config(&common)?;
    ensure_out_dir(&common.out, common.force)?;
    let dataset = synthdata::load(dataset_dir)?;
    let names: Vec<&str> = methods.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(Error::config("compare needs at least one method"));
    }

    let mut rows = Vec::new();
    let mut baseline: Option<HeadParams> = None;
    for name in &names {
        let method = Method::parse(name)?;
        let mut tc = config.train.clone();
        tc.method = method;
        // tail finetuning continues from a softmax baseline trained on the spot
        let init = if method == Method::TailFinetune {
            if baseline.is_none() {
                let mut base_tc = config.train.clone();
                base_tc.method = Method::Softmax;
                baseline =
                    Some(train_once(&dataset, &config, &base_tc, config.num_groups, None)?.params);
            }
            baseline.clone()
        } else {
            None
        };
        let layout = if method == Method::Bags {
            HeadLayout::Bags { partition: config.partition(&dataset.catalog)? }
        } else {
            HeadLayout::Plain { num_foreground: dataset.catalog.num_foreground() }
        };
        let (params, _history) = train::train(&dataset, layout, &tc, init)?;
        if method == Method::Softmax && baseline.is_none() {
            baseline = Some(params.clone());
        }
        let report =
            evaluate_params(&params, &dataset, method.name(), PredictorArg::Auto, 1.0)?;
        rows.push(report);
    }

    let mut csv = String::from("method,overall_acc,acc_bin1,acc_bin2,acc_bin3,acc_bin4,acc_bg\n");
    for report in &rows {
        csv.push_str(&format!("{},{}\n", report.method, metrics_csv_cells(report)));
    }
    std::fs::write(common.out.join("compare.csv"), csv.as_bytes())?;
    write_json(&config, &common.out.join("config.json"))?;

    println!(
        "{:<14} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "method", "overall", "bin1", "bin2", "bin3", "bin4", "bg"
    );
    for report in &rows {
        let bin = |b: usize| {
            report.acc_per_bin[b].map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        };
        println!(
            "{:<14} {:>8.4} {:>8} {:>8} {:>8} {:>8} {:>8.4}",
            report.method,
            report.overall_acc,
            bin(0),
            bin(1),
            bin(2),
            bin(3),
            report.acc_bg
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_overrides_respect_method() {
        let config = RunConfig::default();
        let flags = TrainFlags {
            method: Some("bags".into()),
            beta: Some(4.0),
            gamma: Some(3.0), // ignored with a warning: not focal
            groups: Some(2),
            sampler: Some(SamplerArg::Rfs),
            rfs_t: Some(0.01),
            init_checkpoint: None,
        };
        let (tc, groups) = resolve_train_config(&config, &flags).unwrap();
        assert_eq!(tc.method, Method::Bags);
        assert_eq!(tc.beta, 4.0);
        assert_eq!(tc.gamma, config.train.gamma);
        assert_eq!(groups, 2);
        assert_eq!(tc.sampler, SamplerKind::Rfs);
        assert_eq!(tc.rfs_t, 0.01);
    }

    #[test]
    fn unknown_method_lists_valid_names() {
        let config = RunConfig::default();
        let flags = TrainFlags {
            method: Some("nonesuch".into()),
            beta: None,
            gamma: None,
            groups: None,
            sampler: None,
            rfs_t: None,
            init_checkpoint: None,
        };
        let err = resolve_train_config(&config, &flags).unwrap_err();
        let message = err.to_string();
        for method in Method::ALL {
            assert!(message.contains(method.name()), "{message} missing {}", method.name());
        }
    }

    #[test]
    fn out_dir_guard() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        ensure_out_dir(&out, false).unwrap();
        std::fs::write(out.join("x"), b"x").unwrap();
        assert!(ensure_out_dir(&out, false).is_err());
        ensure_out_dir(&out, true).unwrap();
    }

    #[test]
    fn run_config_round_trips() {
        let config = RunConfig::default();
        let json = serde_json::to_string(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
        // empty object falls back to defaults entirely
        let from_empty: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(from_empty.num_groups, 4);
    }
}
