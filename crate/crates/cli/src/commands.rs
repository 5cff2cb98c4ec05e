//! Subcommand implementations. Each returns its result; the binary only maps errors to exit codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dapnet_core::checkpoint;
use dapnet_core::config::{ExpertKind, ModelConfig, RoutingMode};
use dapnet_core::data::{self, Dataset, LoadOptions, NormalizationStats, Sample, Split};
use dapnet_core::model::DapNet;
use dapnet_core::train::{self, mean_std};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataConfig, RunConfig};
use crate::error::{CliError, CliResult};
use crate::report::{routing_rows, routing_table, write_routing_csv, Report, RoutingRow, TrainingSummary};

pub const VARIANTS: [&str; 6] = [
    "full",
    "only_expert1",
    "only_expert2",
    "only_expert3",
    "avg_ensemble",
    "ce_loss",
];
pub const DEFAULT_DELTAS: [f64; 6] = [0.1, 0.2, 0.5, 0.6, 0.7, 0.9];

fn absolute(p: &Path) -> CliResult<PathBuf> {
    std::path::absolute(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

/// Makes every path in the configuration absolute.
pub fn resolve_paths(cfg: &mut RunConfig) -> CliResult<()> {
    for p in [&mut cfg.data.train, &mut cfg.data.val, &mut cfg.data.test]
        .into_iter()
        .flatten()
    {
        *p = absolute(p)?;
    }
    cfg.out = absolute(&cfg.out)?;
    Ok(())
}

/// Datasets as loaded from disk, before splitting and normalisation.
#[derive(Debug, Clone)]
pub struct Sources {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
}

fn check_compatible(reference: &Dataset, other: &Dataset, what: &str) -> CliResult<()> {
    if (reference.t, reference.c) != (other.t, other.c) {
        return Err(CliError::config(format!(
            "{what} set has T={}, C={} but the training set has T={}, C={}",
            other.t, other.c, reference.t, reference.c
        )));
    }
    if reference.classes != other.classes {
        return Err(CliError::config(format!(
            "{what} set classes {:?} differ from training classes {:?}",
            other.classes, reference.classes
        )));
    }
    Ok(())
}

pub fn load_sources(cfg: &DataConfig) -> CliResult<Sources> {
    let opts = LoadOptions {
        impute_zero: cfg.impute_zero,
    };
    let train_dir = cfg
        .train
        .as_ref()
        .ok_or_else(|| CliError::config("data.train is not set"))?;
    let train = data::load_dataset(train_dir, opts)?;
    let load = |p: &Option<PathBuf>, what: &str| -> CliResult<Option<Dataset>> {
        let Some(dir) = p else { return Ok(None) };
        let ds = data::load_dataset(dir, opts)?;
        check_compatible(&train, &ds, what)?;
        Ok(Some(ds))
    };
    let val = load(&cfg.val, "validation")?;
    let test = load(&cfg.test, "test")?;
    Ok(Sources { train, val, test })
}

/// Normalised splits for one run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    /// Where the final report is computed: the test set, or validation when there is none.
    pub eval: Dataset,
    pub stats: NormalizationStats,
}

fn with_split(mut ds: Dataset, split: Split) -> Dataset {
    ds.split = split;
    ds
}

pub fn prepare(src: &Sources, cfg: &DataConfig, seed: u64) -> CliResult<Prepared> {
    let (train, val, eval) = match (&src.val, &src.test) {
        (Some(v), Some(t)) => (
            with_split(src.train.clone(), Split::Train),
            with_split(v.clone(), Split::Val),
            with_split(t.clone(), Split::Test),
        ),
        (None, Some(t)) => {
            let vf = cfg.val_fraction;
            if !(vf > 0.0 && vf < 1.0) {
                return Err(CliError::config(format!("data.val_fraction = {vf} must lie in (0, 1)")));
            }
            let parts = data::stratified_partition(&src.train, &[1.0 - vf, vf], seed)?;
            (
                src.train.subset(&parts[0], Split::Train),
                src.train.subset(&parts[1], Split::Val),
                with_split(t.clone(), Split::Test),
            )
        }
        (Some(v), None) => (
            with_split(src.train.clone(), Split::Train),
            with_split(v.clone(), Split::Val),
            with_split(v.clone(), Split::Val),
        ),
        (None, None) => data::stratified_split(&src.train, cfg.split, seed)?,
    };
    let (train, stats) = data::normalize(&train, None)?;
    Ok(Prepared {
        val: stats.apply(&val)?,
        eval: stats.apply(&eval)?,
        train,
        stats,
    })
}

/// Fills dataset-derived fields left at zero and rejects explicit mismatches.
pub fn resolve_model(model: &mut ModelConfig, ds: &Dataset) -> CliResult<()> {
    for (name, field, actual) in [
        ("model.t", &mut model.t, ds.t),
        ("model.c", &mut model.c, ds.c),
        ("model.n_classes", &mut model.n_classes, ds.n_classes()),
    ] {
        if *field == 0 {
            *field = actual;
        } else if *field != actual {
            return Err(CliError::config(format!(
                "{name} = {field} but the dataset has {actual}"
            )));
        }
    }
    Ok(())
}

/// Everything a finished training run produced.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub config: RunConfig,
    pub report: Report,
    pub routing: Vec<RoutingRow>,
    pub experts: Vec<&'static str>,
}

fn expert_names(cfg: &ModelConfig) -> Vec<&'static str> {
    cfg.experts.iter().map(|k| k.name()).collect()
}

/// One full training run with artifacts written to `cfg.out`. `label` prefixes progress lines.
pub fn train_run(cfg: &RunConfig, src: &Sources, label: &str) -> CliResult<TrainResult> {
    let mut cfg = cfg.clone();
    resolve_paths(&mut cfg)?;
    cfg.loss.validate()?;
    cfg.train.validate()?;
    let seed = cfg.train.seed;
    let prep = prepare(src, &cfg.data, seed)?;
    resolve_model(&mut cfg.model, &prep.train)?;
    cfg.model.validate()?;

    let out = cfg.out.clone();
    create_dir(&out)?;
    write_json(&out.join("config.echo.json"), &cfg)?;

    let mut model = DapNet::new(cfg.model.clone(), seed)?;
    let history_path = out.join("history.ndjson");
    let mut history =
        fs::File::create(&history_path).map_err(|e| CliError::data(format!("{}: {e}", history_path.display())))?;
    let mut history_err = None;
    let fit = train::fit_with(&mut model, &prep.train, &prep.val, &cfg.train, &cfg.loss, |rec| {
        eprintln!(
            "{label}epoch {:>3}  lr {:.3e}  train {:.5}  val {:.5}  val_acc {:.4}",
            rec.epoch, rec.lr, rec.train.l_total, rec.val_loss, rec.val_accuracy
        );
        let line = serde_json::to_string(rec).expect("history records serialise");
        if let Err(e) = writeln!(history, "{line}") {
            history_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = history_err {
        return Err(CliError::data(format!("{}: {e}", history_path.display())));
    }

    let p = train::predict(&model, &prep.eval, cfg.train.batch_size, &cfg.loss)?;
    let summary = TrainingSummary {
        best_epoch: fit.best_epoch,
        stop_epoch: fit.stop_epoch,
        early_stopped: fit.early_stopped,
    };
    let report = Report::new(prep.eval.split, &p, &prep.eval.classes, Some(summary));
    let experts = expert_names(&cfg.model);
    let routing = routing_rows(&p.records, &p.labels, &prep.eval.classes);
    write_json(&out.join("metrics.json"), &report)?;
    write_routing_csv(&out.join("routing.csv"), &experts, &routing)?;
    let echo = serde_json::to_value(&cfg).map_err(|e| CliError::data(e.to_string()))?;
    checkpoint::save(
        &out.join("checkpoint.bin"),
        &model,
        &prep.stats,
        &prep.train.classes,
        echo,
    )?;
    Ok(TrainResult {
        config: cfg,
        report,
        routing,
        experts,
    })
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainResult> {
    let src = load_sources(&cfg.data)?;
    let result = train_run(cfg, &src, "")?;
    print!("{}", result.report.table());
    Ok(result)
}

/// A checkpointed model together with a dataset mapped onto its classes.
pub struct Inference {
    pub model: DapNet,
    pub run: RunConfig,
    pub data: Dataset,
}

/// Maps `ds` labels onto `classes` by name; unknown names are a configuration error.
pub fn relabel(ds: &Dataset, classes: &[String]) -> CliResult<Dataset> {
    let map = ds
        .classes
        .iter()
        .map(|c| {
            classes.iter().position(|k| k == c).ok_or_else(|| {
                CliError::config(format!(
                    "class {c:?} is not known to the checkpoint (classes {classes:?})"
                ))
            })
        })
        .collect::<CliResult<Vec<usize>>>()?;
    let samples = ds
        .samples
        .iter()
        .map(|s| Sample {
            label: map[s.label],
            ..s.clone()
        })
        .collect();
    Ok(Dataset {
        classes: classes.to_vec(),
        samples,
        ..ds.clone()
    })
}

pub fn load_inference(checkpoint_path: &Path, data_dir: &Path, impute_zero: bool) -> CliResult<Inference> {
    let (model, header) = checkpoint::load(checkpoint_path)?;
    let ds = data::load_dataset(data_dir, LoadOptions { impute_zero })?;
    if (ds.t, ds.c) != (model.cfg.t, model.cfg.c) {
        return Err(CliError::config(format!(
            "dataset has T={}, C={} but the model expects T={}, C={}",
            ds.t, ds.c, model.cfg.t, model.cfg.c
        )));
    }
    let ds = relabel(&ds, &header.classes)?;
    let ds = header.normalization.apply(&ds)?;
    let run: RunConfig = serde_json::from_value(header.run).unwrap_or_default();
    Ok(Inference { model, run, data: ds })
}

#[derive(Debug, Clone, Serialize)]
struct InferenceEcho<'a> {
    command: &'a str,
    checkpoint: PathBuf,
    data: PathBuf,
    impute_zero: bool,
    out: PathBuf,
}

pub struct InferenceArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub impute_zero: bool,
}

fn start_inference(command: &str, args: &InferenceArgs) -> CliResult<(Inference, PathBuf)> {
    let inf = load_inference(&args.checkpoint, &args.data, args.impute_zero)?;
    let out = absolute(&args.out)?;
    create_dir(&out)?;
    let echo = InferenceEcho {
        command,
        checkpoint: absolute(&args.checkpoint)?,
        data: absolute(&args.data)?,
        impute_zero: args.impute_zero,
        out: out.clone(),
    };
    write_json(&out.join("config.echo.json"), &echo)?;
    Ok((inf, out))
}

pub fn cmd_eval(args: &InferenceArgs) -> CliResult<Report> {
    let (inf, out) = start_inference("eval", args)?;
    let p = train::predict(&inf.model, &inf.data, inf.run.train.batch_size, &inf.run.loss)?;
    let report = Report::new(inf.data.split, &p, &inf.data.classes, None);
    write_json(&out.join("metrics.json"), &report)?;
    print!("{}", report.table());
    Ok(report)
}

pub fn cmd_inspect_routing(args: &InferenceArgs) -> CliResult<Vec<RoutingRow>> {
    let (inf, out) = start_inference("inspect-routing", args)?;
    let p = train::predict(&inf.model, &inf.data, inf.run.train.batch_size, &inf.run.loss)?;
    let experts = expert_names(&inf.model.cfg);
    let rows = routing_rows(&p.records, &p.labels, &inf.data.classes);
    write_routing_csv(&out.join("routing.csv"), &experts, &rows)?;
    print!("{}", routing_table(&experts, &rows));
    Ok(rows)
}

/// Rewrites `cfg` into an ablation variant.
pub fn apply_variant(cfg: &mut RunConfig, variant: &str) -> CliResult<()> {
    let single = |cfg: &mut RunConfig, kind: ExpertKind| {
        cfg.model.experts = vec![kind];
        cfg.model.top_k = 1;
    };
    match variant {
        "full" => {}
        "only_expert1" => single(cfg, ExpertKind::Periodicity),
        "only_expert2" => single(cfg, ExpertKind::Correlation),
        "only_expert3" => single(cfg, ExpertKind::Hybrid),
        "avg_ensemble" => cfg.model.routing = RoutingMode::Uniform,
        "ce_loss" => {
            cfg.loss.gamma = 0.0;
            cfg.loss.smoothing = 0.0;
            cfg.loss.delta = 0.0;
        }
        other => {
            return Err(CliError::config(format!(
                "unknown variant {other:?}; expected one of {}",
                VARIANTS.join(", ")
            )))
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub key: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub accuracies: Vec<f64>,
}

struct Job {
    key: String,
    seed: u64,
    cfg: RunConfig,
}

fn run_jobs(jobs: Vec<Job>, src: &Sources, threads: usize) -> CliResult<Vec<(String, u64, TrainResult)>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    pool.install(|| {
        jobs.into_par_iter()
            .map(|j| {
                let label = format!("[{} seed {}] ", j.key, j.seed);
                train_run(&j.cfg, src, &label).map(|r| (j.key, j.seed, r))
            })
            .collect()
    })
}

fn summarise(keys: &[String], results: &[(String, u64, TrainResult)]) -> Vec<SummaryRow> {
    keys.iter()
        .map(|k| {
            let accuracies: Vec<f64> = results
                .iter()
                .filter(|(key, _, _)| key == k)
                .map(|(_, _, r)| r.report.metrics.accuracy)
                .collect();
            let (mean_accuracy, std_accuracy) = mean_std(&accuracies);
            SummaryRow {
                key: k.clone(),
                mean_accuracy,
                std_accuracy,
                accuracies,
            }
        })
        .collect()
}

fn write_summary(path: &Path, key_name: &str, seeds: &[u64], rows: &[SummaryRow]) -> CliResult<String> {
    let fail = |e: csv::Error| CliError::data(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut head = vec![key_name.to_string(), "mean_accuracy".into(), "std_accuracy".into()];
    head.extend(seeds.iter().map(|s| format!("seed_{s}")));
    w.write_record(&head).map_err(fail)?;
    for r in rows {
        let mut rec = vec![
            r.key.clone(),
            format!("{:.9}", r.mean_accuracy),
            format!("{:.9}", r.std_accuracy),
        ];
        rec.extend(r.accuracies.iter().map(|a| format!("{a:.9}")));
        w.write_record(&rec).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
    let text = String::from_utf8(bytes).expect("csv output is UTF-8");
    write_text(path, &text)?;
    Ok(text)
}

#[derive(Serialize)]
struct DriverEcho<'a, T: Serialize> {
    base: &'a RunConfig,
    grid: &'a [T],
    seeds: &'a [u64],
    jobs: usize,
}

/// Trains every variant for every seed under `out/<variant>/seed-<s>/` and
/// writes `ablation.csv` (variant, mean, std, one column per seed).
pub fn cmd_ablate(base: &RunConfig, variants: &[String], seeds: &[u64], jobs: usize) -> CliResult<Vec<SummaryRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(CliError::config("need at least one variant and one seed"));
    }
    let mut base = base.clone();
    resolve_paths(&mut base)?;
    let mut work = Vec::new();
    for v in variants {
        let mut cfg = base.clone();
        apply_variant(&mut cfg, v)?;
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.train.seed = seed;
            cfg.out = base.out.join(v).join(format!("seed-{seed}"));
            work.push(Job {
                key: v.clone(),
                seed,
                cfg,
            });
        }
    }
    let src = load_sources(&base.data)?;
    create_dir(&base.out)?;
    write_json(
        &base.out.join("config.echo.json"),
        &DriverEcho {
            base: &base,
            grid: variants,
            seeds,
            jobs,
        },
    )?;
    let results = run_jobs(work, &src, jobs)?;
    let rows = summarise(variants, &results);
    print!(
        "{}",
        write_summary(&base.out.join("ablation.csv"), "variant", seeds, &rows)?
    );
    Ok(rows)
}

/// Trains once per (δ, seed) under `out/delta-<δ>/seed-<s>/` and writes `sweep.csv`.
pub fn cmd_sweep_delta(base: &RunConfig, deltas: &[f64], seeds: &[u64], jobs: usize) -> CliResult<Vec<SummaryRow>> {
    if deltas.is_empty() || seeds.is_empty() {
        return Err(CliError::config("need at least one delta and one seed"));
    }
    if let Some(d) = deltas.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(CliError::config(format!("delta values must be positive, got {d}")));
    }
    let mut base = base.clone();
    resolve_paths(&mut base)?;
    let keys: Vec<String> = deltas.iter().map(|d| d.to_string()).collect();
    let mut work = Vec::new();
    for (key, &delta) in keys.iter().zip(deltas) {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.loss.delta = delta;
            cfg.train.seed = seed;
            cfg.out = base.out.join(format!("delta-{key}")).join(format!("seed-{seed}"));
            work.push(Job {
                key: key.clone(),
                seed,
                cfg,
            });
        }
    }
    let src = load_sources(&base.data)?;
    create_dir(&base.out)?;
    write_json(
        &base.out.join("config.echo.json"),
        &DriverEcho {
            base: &base,
            grid: deltas,
            seeds,
            jobs,
        },
    )?;
    let results = run_jobs(work, &src, jobs)?;
    let rows = summarise(&keys, &results);
    print!("{}", write_summary(&base.out.join("sweep.csv"), "delta", seeds, &rows)?);
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SynthArgs {
    pub n_per_class: usize,
    pub t: usize,
    pub c: usize,
    pub seed: u64,
}

/// Writes the synthetic three-class dataset to `out` in the canonical layout.
pub fn cmd_synth(args: &SynthArgs, out: &Path) -> CliResult<Dataset> {
    let ds = data::synth_moe_dataset(args.n_per_class, args.t, args.c, args.seed)?;
    data::write_dataset(&ds, out)?;
    write_json(&out.join("config.echo.json"), args)?;
    eprintln!(
        "wrote {} samples ({} classes, T={}, C={}) to {}",
        ds.len(),
        ds.n_classes(),
        ds.t,
        ds.c,
        out.display()
    );
    Ok(ds)
}
