//! Command-line front end: cohort generation, training and cross-validation,
//! evaluation, interpretation outputs, the lambda sweep, and a seeded
//! self-verification command.
//!
//! Configuration comes from an optional JSON file with flat dotted keys
//! (e.g. {"data.seed": 7, "loss.lambda1": 0.1}); command-line flags override
//! file values. Unknown keys are rejected. Every command that writes output
//! also writes the fully resolved configuration next to it.
//!
//! Exit codes: 0 ok, 1 selftest failure, 2 config/argument error, 3 i/o
//! error, 4 numeric abort.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::data::{generate_cohort, load_dataset, CohortConfig, Provenance};
use crate::diffcore::{grad_check, Matrix2D, NodeId, Tape};
use crate::error::{Error, Result};
use crate::graph::{build_graph, edge_quota};
use crate::interpret::{
    collect_scores, overlap, read_label_map, salient_nodes, score_histogram_series,
    write_histogram_csv, write_overlap_csv, write_salient_csv, OverlapLevel, ScoreRecord,
};
use crate::loss::{bce_score_loss, cross_entropy, glc_loss, mmd_loss, rank_split, LossConfig};
use crate::model::{load_checkpoint, pool_size, save_checkpoint, PoolKind, PrGnnModel};
use crate::train::{
    cross_validate, end_to_end_grad_check, evaluate, subject_vote_accuracy, EpochReport,
    TrainConfig,
};

/// Lambda cells of the sweep, as (lambda1, lambda2).
pub const SWEEP_CELLS: [(f64, f64); 5] = [(0.0, 0.0), (0.1, 0.0), (0.1, 0.1), (0.1, 0.5), (0.1, 1.0)];

#[derive(Parser)]
#[command(name = "prgnn", version, about = "Pooling-regularized graph attention networks for connectome classification and salient-node extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Default)]
pub struct CommonOpts {
    /// JSON config file with flat dotted keys; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed feeding the named data/init/shuffle streams.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pooling kind: topk or sage.
    #[arg(long)]
    pub pool: Option<String>,
    /// Distance loss: mmd or bce.
    #[arg(long)]
    pub dist: Option<String>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Train this many folds concurrently (capped by PRGNN_THREADS).
    #[arg(long)]
    pub parallel_folds: Option<usize>,
    /// Report subject-level majority-vote accuracy instead of instance-level.
    #[arg(long)]
    pub subject_vote: bool,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with planted salient nodes.
    GenData(CommonOpts),
    /// Cross-validated training; writes checkpoints, epoch logs and a summary.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Run the five (lambda1, lambda2) sweep cells instead of one setting.
        #[arg(long)]
        sweep: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write salient-node rankings, kept-set overlap and histogram CSVs.
    Interpret {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint for a paired overlap comparison.
        #[arg(long)]
        compare_checkpoint: Option<PathBuf>,
        /// Epoch JSON-lines log to export histogram series from.
        #[arg(long)]
        epoch_log: Option<PathBuf>,
        /// Optional node_id,name CSV passed through to outputs.
        #[arg(long)]
        label_map: Option<PathBuf>,
        /// Ranking depth for the salient-node lists.
        #[arg(long, default_value_t = 21)]
        top: usize,
    },
    /// Shorthand for train --sweep.
    Sweep(CommonOpts),
    /// Seeded self-verification: gradient checks, loss closed forms,
    /// pooling and graph invariants.
    Selftest {
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Fully resolved run configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub cohort: CohortConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub parallel_folds: usize,
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cohort: CohortConfig::default(),
            train: TrainConfig::default(),
            folds: 5,
            parallel_folds: 1,
            manifest: None,
            out_dir: PathBuf::from("prgnn_out"),
        }
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::Config(format!("{key}: expected a non-negative integer, got {v}")))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    Ok(as_u64(key, v)? as usize)
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Config(format!("{key}: expected a number, got {v}")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::Config(format!("{key}: expected a boolean, got {v}")))
}

fn as_str(key: &str, v: &Value) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("{key}: expected a string, got {v}")))
}

impl RunConfig {
    fn apply_key(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "data.seed" => self.cohort.seed = as_u64(key, v)?,
            "data.n_subjects_per_class" => self.cohort.n_subjects_per_class = as_usize(key, v)?,
            "data.n_nodes" => self.cohort.n_nodes = as_usize(key, v)?,
            "data.planted_set" => {
                let arr = v.as_array().ok_or_else(|| {
                    Error::Config(format!("{key}: expected an array of node ids"))
                })?;
                self.cohort.planted_set = arr
                    .iter()
                    .map(|x| as_usize(key, x))
                    .collect::<Result<Vec<_>>>()?;
            }
            "data.effect_size" => self.cohort.effect_size = as_f64(key, v)?,
            "data.n_timepoints" => self.cohort.n_timepoints = as_usize(key, v)?,
            "data.n_augment" => self.cohort.n_augment = as_usize(key, v)?,
            "data.top_frac" => self.cohort.top_frac = as_f64(key, v)?,
            "train.epochs" => self.train.epochs = as_usize(key, v)?,
            "train.base_lr" => self.train.base_lr = as_f64(key, v)?,
            "train.halve_every" => self.train.halve_every = as_usize(key, v)?,
            "train.batch_size" => self.train.batch_size = as_usize(key, v)?,
            "train.seed" => self.train.seed = as_u64(key, v)?,
            "train.subject_vote" => self.train.subject_vote = as_bool(key, v)?,
            "loss.lambda1" => self.train.loss.lambda1 = as_f64(key, v)?,
            "loss.lambda2" => self.train.loss.lambda2 = as_f64(key, v)?,
            "loss.sigma" => self.train.loss.sigma = as_f64(key, v)?,
            "loss.dist" => self.train.loss.dist_kind = as_str(key, v)?.parse()?,
            "loss.n_classes" => self.train.loss.n_classes = as_usize(key, v)?,
            "model.pool" => self.train.pool_kind = as_str(key, v)?.parse()?,
            "model.d1" => self.train.dims[1] = as_usize(key, v)?,
            "model.d2" => self.train.dims[2] = as_usize(key, v)?,
            "model.ratio" => self.train.ratio = as_f64(key, v)?,
            "run.folds" => self.folds = as_usize(key, v)?,
            "run.parallel_folds" => self.parallel_folds = as_usize(key, v)?,
            "run.manifest" => self.manifest = Some(PathBuf::from(as_str(key, v)?)),
            "run.out" => self.out_dir = PathBuf::from(as_str(key, v)?),
            unknown => {
                return Err(Error::Config(format!("unknown config key {unknown:?}")));
            }
        }
        Ok(())
    }

    fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::io(path, format!("parse config: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config file must be a JSON object".into()))?;
        let mut keys: Vec<&String> = obj.keys().collect();
        keys.sort();
        for key in keys {
            self.apply_key(key, &obj[key])?;
        }
        Ok(())
    }

    fn apply_flags(&mut self, opts: &CommonOpts) -> Result<()> {
        if let Some(seed) = opts.seed {
            self.cohort.seed = seed;
            self.train.seed = seed;
        }
        if let Some(pool) = &opts.pool {
            self.train.pool_kind = pool.parse()?;
        }
        if let Some(dist) = &opts.dist {
            self.train.loss.dist_kind = dist.parse()?;
        }
        if let Some(l1) = opts.lambda1 {
            self.train.loss.lambda1 = l1;
        }
        if let Some(l2) = opts.lambda2 {
            self.train.loss.lambda2 = l2;
        }
        if let Some(sigma) = opts.sigma {
            self.train.loss.sigma = sigma;
        }
        if let Some(folds) = opts.folds {
            self.folds = folds;
        }
        if let Some(epochs) = opts.epochs {
            self.train.epochs = epochs;
        }
        if let Some(out) = &opts.out {
            self.out_dir = out.clone();
        }
        if let Some(manifest) = &opts.manifest {
            self.manifest = Some(manifest.clone());
        }
        if let Some(p) = opts.parallel_folds {
            self.parallel_folds = p;
        }
        if opts.subject_vote {
            self.train.subject_vote = true;
        }
        Ok(())
    }

    pub fn resolve(opts: &CommonOpts) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &opts.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_flags(opts)?;
        Ok(cfg)
    }

    /// Flat dotted-key echo of every resolved value.
    pub fn echo(&self) -> Value {
        let mut map: BTreeMap<String, Value> = BTreeMap::new();
        map.insert("data.seed".into(), json!(self.cohort.seed));
        map.insert(
            "data.n_subjects_per_class".into(),
            json!(self.cohort.n_subjects_per_class),
        );
        map.insert("data.n_nodes".into(), json!(self.cohort.n_nodes));
        map.insert("data.planted_set".into(), json!(self.cohort.planted_set));
        map.insert("data.effect_size".into(), json!(self.cohort.effect_size));
        map.insert("data.n_timepoints".into(), json!(self.cohort.n_timepoints));
        map.insert("data.n_augment".into(), json!(self.cohort.n_augment));
        map.insert("data.top_frac".into(), json!(self.cohort.top_frac));
        map.insert("train.epochs".into(), json!(self.train.epochs));
        map.insert("train.base_lr".into(), json!(self.train.base_lr));
        map.insert("train.halve_every".into(), json!(self.train.halve_every));
        map.insert("train.batch_size".into(), json!(self.train.batch_size));
        map.insert("train.seed".into(), json!(self.train.seed));
        map.insert("train.subject_vote".into(), json!(self.train.subject_vote));
        map.insert("loss.lambda1".into(), json!(self.train.loss.lambda1));
        map.insert("loss.lambda2".into(), json!(self.train.loss.lambda2));
        map.insert("loss.sigma".into(), json!(self.train.loss.sigma));
        map.insert("loss.dist".into(), json!(self.train.loss.dist_kind));
        map.insert("loss.n_classes".into(), json!(self.train.loss.n_classes));
        map.insert("model.pool".into(), json!(self.train.pool_kind));
        map.insert("model.d1".into(), json!(self.train.dims[1]));
        map.insert("model.d2".into(), json!(self.train.dims[2]));
        map.insert("model.ratio".into(), json!(self.train.ratio));
        map.insert("run.folds".into(), json!(self.folds));
        map.insert("run.parallel_folds".into(), json!(self.parallel_folds));
        map.insert(
            "run.manifest".into(),
            json!(self.manifest.as_ref().map(|p| p.display().to_string())),
        );
        map.insert("run.out".into(), json!(self.out_dir.display().to_string()));
        json!(map)
    }
}

fn thread_cap() -> usize {
    std::env::var("PRGNN_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(usize::MAX)
}

fn ensure_out_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_echo(cfg: &RunConfig, command: &str) -> Result<()> {
    let mut echo = cfg.echo();
    echo["command"] = json!(command);
    let path = cfg.out_dir.join("config_echo.json");
    let text = serde_json::to_string_pretty(&echo)
        .map_err(|e| Error::io(&path, format!("serialize echo: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::io(path, format!("serialize: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(opts) => {
            let cfg = RunConfig::resolve(&opts)?;
            cmd_gen_data(&cfg)?;
            Ok(0)
        }
        Command::Train { common, sweep } => {
            let cfg = RunConfig::resolve(&common)?;
            cmd_train(&cfg, sweep)?;
            Ok(0)
        }
        Command::Sweep(opts) => {
            let cfg = RunConfig::resolve(&opts)?;
            cmd_train(&cfg, true)?;
            Ok(0)
        }
        Command::Eval { common, checkpoint } => {
            let cfg = RunConfig::resolve(&common)?;
            cmd_eval(&cfg, &checkpoint)?;
            Ok(0)
        }
        Command::Interpret {
            common,
            checkpoint,
            compare_checkpoint,
            epoch_log,
            label_map,
            top,
        } => {
            let cfg = RunConfig::resolve(&common)?;
            cmd_interpret(
                &cfg,
                &checkpoint,
                compare_checkpoint.as_deref(),
                epoch_log.as_deref(),
                label_map.as_deref(),
                top,
            )?;
            Ok(0)
        }
        Command::Selftest { seed } => cmd_selftest(seed.unwrap_or(0)),
    }
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    cfg.cohort.validate()?;
    ensure_out_dir(&cfg.out_dir)?;
    write_echo(cfg, "gen-data")?;
    let manifest = generate_cohort(&cfg.cohort, &cfg.out_dir)?;
    let path = cfg.out_dir.join("manifest.json");
    println!("manifest: {}", path.display());
    println!(
        "instances: {} ({} subjects x {} augmentations)",
        manifest.entries.len(),
        2 * cfg.cohort.n_subjects_per_class,
        cfg.cohort.n_augment
    );
    Ok(())
}

fn prepared_train_config(cfg: &RunConfig, manifest_classes: usize, n_nodes: usize) -> TrainConfig {
    let mut train = cfg.train.clone();
    train.loss.n_classes = manifest_classes;
    train.dims[0] = n_nodes;
    train
}

fn write_epoch_log(path: &Path, reports: &[EpochReport]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in reports {
        let line = serde_json::to_string(r).map_err(|e| Error::io(path, format!("serialize: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::io(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

fn cmd_train(cfg: &RunConfig, sweep: bool) -> Result<()> {
    let manifest_path = cfg
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("train requires --manifest (or run.manifest)".into()))?;
    let (manifest, graphs) = load_dataset(&manifest_path)?;
    if graphs.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    ensure_out_dir(&cfg.out_dir)?;
    write_echo(cfg, if sweep { "sweep" } else { "train" })?;
    let base_train = prepared_train_config(cfg, manifest.n_classes, graphs[0].n_nodes);
    let parallel = cfg.parallel_folds.min(thread_cap()).max(1);

    if sweep {
        let mut rows = Vec::new();
        println!("lambda1-lambda2  accuracy");
        for (l1, l2) in SWEEP_CELLS {
            let mut train = base_train.clone();
            train.loss.lambda1 = l1;
            train.loss.lambda2 = l2;
            let (_, summary) = cross_validate(&graphs, cfg.folds, &train, parallel)?;
            println!("{l1}-{l2}  {}", summary.formatted);
            rows.push(json!({
                "lambda1": l1,
                "lambda2": l2,
                "mean": summary.mean,
                "std": summary.std,
                "formatted": summary.formatted,
                "fold_accuracy": summary.accuracy,
            }));
        }
        write_json(&cfg.out_dir.join("sweep.json"), &rows)?;
        println!("sweep: {}", cfg.out_dir.join("sweep.json").display());
        return Ok(());
    }

    let (outcomes, summary) = cross_validate(&graphs, cfg.folds, &base_train, parallel)?;
    for outcome in &outcomes {
        let f = outcome.summary.fold;
        save_checkpoint(
            &cfg.out_dir.join(format!("fold{f}.checkpoint.json")),
            &outcome.model,
            cfg.echo(),
        )?;
        write_epoch_log(&cfg.out_dir.join(format!("epochs_fold{f}.jsonl")), &outcome.reports)?;
        println!("fold {f}: accuracy {:.3}", outcome.summary.accuracy);
    }
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    println!("accuracy: {}", summary.formatted);
    println!("summary: {}", cfg.out_dir.join("summary.json").display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let manifest_path = cfg
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("eval requires --manifest (or run.manifest)".into()))?;
    let ckpt = load_checkpoint(checkpoint)?;
    let (_, graphs) = load_dataset(&manifest_path)?;
    let eval = evaluate(&ckpt.model, &graphs)?;
    ensure_out_dir(&cfg.out_dir)?;
    write_echo(cfg, "eval")?;
    let vote = subject_vote_accuracy(&eval.predictions);
    let out = json!({
        "accuracy": eval.accuracy,
        "subject_vote_accuracy": vote,
        "n_instances": eval.predictions.len(),
        "predictions": eval.predictions,
    });
    write_json(&cfg.out_dir.join("eval.json"), &out)?;
    println!("instance accuracy: {:.3}", eval.accuracy);
    if cfg.train.subject_vote {
        println!("subject-vote accuracy: {vote:.3}");
    }
    Ok(())
}

fn class_records(records: &[ScoreRecord], class: usize) -> Vec<ScoreRecord> {
    records.iter().filter(|r| r.label == class).cloned().collect()
}

fn cmd_interpret(
    cfg: &RunConfig,
    checkpoint: &Path,
    compare: Option<&Path>,
    epoch_log: Option<&Path>,
    label_map_path: Option<&Path>,
    top: usize,
) -> Result<()> {
    let manifest_path = cfg
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("interpret requires --manifest (or run.manifest)".into()))?;
    let ckpt = load_checkpoint(checkpoint)?;
    let (manifest, graphs) = load_dataset(&manifest_path)?;
    ensure_out_dir(&cfg.out_dir)?;
    write_echo(cfg, "interpret")?;
    let label_map = match label_map_path {
        Some(p) => Some(read_label_map(p)?),
        None => None,
    };

    let records = collect_scores(&ckpt.model, &graphs)?;
    for class in 0..manifest.n_classes {
        let ranked = salient_nodes(&records, class, top)?;
        let path = cfg.out_dir.join(format!("salient_class{class}.csv"));
        write_salient_csv(&path, &ranked, label_map.as_ref())?;
        println!("class {class} salient nodes: {}", path.display());

        let of_class = class_records(&records, class);
        if of_class.len() >= 2 {
            let rep = overlap(&of_class, OverlapLevel::Layer2)?;
            let opath = cfg.out_dir.join(format!("overlap_layer2_class{class}.csv"));
            write_overlap_csv(&opath, &rep)?;
            let l1 = overlap(&of_class, OverlapLevel::Layer1)?;
            println!(
                "class {class} mean kept-set overlap: layer1 {:.4}, layer2 {:.4}",
                l1.mean, rep.mean
            );
        }
    }

    // planted-node recovery against generator metadata, when available
    if let Provenance::Synthetic(gen) = &manifest.provenance {
        if !gen.planted_set.is_empty() {
            let ranked = salient_nodes(&records, 1, top)?;
            let top_ids: std::collections::BTreeSet<usize> =
                ranked.iter().map(|n| n.node_id).collect();
            let recovered = gen.planted_set.iter().filter(|i| top_ids.contains(i)).count();
            println!(
                "planted-node recovery: {recovered}/{} in class-1 top {top}",
                gen.planted_set.len()
            );
        }
    }

    if let Some(log) = epoch_log {
        let reports = read_epoch_log(log)?;
        let rows = score_histogram_series(&reports)?;
        let hpath = cfg.out_dir.join("score_histograms.csv");
        write_histogram_csv(&hpath, &rows)?;
        println!("histograms: {}", hpath.display());
    }

    if let Some(other) = compare {
        let other_ckpt = load_checkpoint(other)?;
        let other_records = collect_scores(&other_ckpt.model, &graphs)?;
        println!("paired overlap comparison (layer2):");
        for class in 0..manifest.n_classes {
            let a = class_records(&records, class);
            let b = class_records(&other_records, class);
            if a.len() >= 2 && b.len() >= 2 {
                let oa = overlap(&a, OverlapLevel::Layer2)?;
                let ob = overlap(&b, OverlapLevel::Layer2)?;
                println!(
                    "  class {class}: {:.4} vs {:.4} (delta {:+.4})",
                    oa.mean,
                    ob.mean,
                    oa.mean - ob.mean
                );
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

type Check = (String, std::result::Result<(), String>);

fn check<F: FnOnce() -> std::result::Result<(), String>>(name: &str, f: F) -> Check {
    (name.to_string(), f())
}

fn random_matrix(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Matrix2D {
    use rand::Rng;
    Matrix2D::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .expect("finite")
}

fn primitive_gradient_checks(seed: u64) -> Vec<Check> {
    type Builder = fn(&Tape, &[NodeId]) -> Result<NodeId>;
    let cases: Vec<(&str, usize, Builder)> = vec![
        ("add", 2, |t, ids| t.sum_all(t.add(ids[0], ids[1])?)),
        ("sub", 2, |t, ids| t.sum_all(t.sub(ids[0], ids[1])?)),
        ("mul", 2, |t, ids| t.sum_all(t.mul(ids[0], ids[1])?)),
        ("div", 2, |t, ids| {
            let d = t.affine(ids[1], 1.0, 3.0)?;
            t.sum_all(t.div(ids[0], d)?)
        }),
        ("matmul", 2, |t, ids| {
            let y = t.matmul(ids[0], t.transpose(ids[1])?)?;
            t.sum_all(t.mul(y, y)?)
        }),
        ("neg", 1, |t, ids| t.sum_all(t.neg(ids[0])?)),
        ("relu", 1, |t, ids| t.sum_all(t.relu(ids[0])?)),
        ("sigmoid", 1, |t, ids| t.sum_all(t.sigmoid(ids[0])?)),
        ("exp", 1, |t, ids| t.sum_all(t.exp(ids[0])?)),
        ("log", 1, |t, ids| t.sum_all(t.log(t.affine(ids[0], 1.0, 3.0)?)?)),
        ("sqrt", 1, |t, ids| t.sum_all(t.sqrt(t.affine(ids[0], 1.0, 3.0)?)?)),
        ("recip", 1, |t, ids| t.sum_all(t.recip(t.affine(ids[0], 1.0, 3.0)?)?)),
        ("affine", 1, |t, ids| t.sum_all(t.affine(ids[0], -2.5, 0.7)?)),
        ("clamp", 1, |t, ids| t.sum_all(t.clamp(ids[0], -1.0, 1.0)?)),
        ("transpose", 1, |t, ids| {
            let y = t.transpose(ids[0])?;
            t.sum_all(t.mul(y, y)?)
        }),
        ("gather_rows", 1, |t, ids| {
            let y = t.gather_rows(ids[0], &[0, 2, 2])?;
            t.sum_all(t.mul(y, y)?)
        }),
        ("mean_rows", 1, |t, ids| {
            let y = t.mean_rows(ids[0])?;
            t.sum_all(t.mul(y, y)?)
        }),
        ("mean_all", 1, |t, ids| t.mean_all(ids[0])),
        ("sum", 1, |t, ids| t.sum_all(ids[0])),
    ];
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    cases
        .into_iter()
        .map(|(name, arity, builder)| {
            check(&format!("gradient:{name}"), || {
                for trial in 0..3 {
                    let point: Vec<Matrix2D> =
                        (0..arity).map(|_| random_matrix(&mut rng, 3, 4)).collect();
                    let report = grad_check(builder, &point, 1e-5, 1e-6)
                        .map_err(|e| format!("trial {trial}: {e}"))?;
                    if !report.passed() {
                        return Err(format!(
                            "trial {trial}: rel err {:.3e} exceeds 1e-6",
                            report.max_rel_err
                        ));
                    }
                }
                Ok(())
            })
        })
        .collect()
}

fn selftest_graphs(seed: u64) -> Result<Vec<crate::graph::BrainGraph>> {
    let cfg = CohortConfig {
        seed,
        n_subjects_per_class: 2,
        n_nodes: 8,
        planted_set: vec![0, 1, 2],
        effect_size: 1.0,
        n_timepoints: 40,
        n_augment: 1,
        top_frac: 0.2,
    };
    crate::data::generate_instances(&cfg)?
        .into_iter()
        .map(|i| {
            build_graph(
                &i.pearson,
                &i.partial,
                cfg.top_frac,
                i.label,
                &i.subject_id,
                &i.instance_id,
            )
        })
        .collect()
}

fn model_gradient_checks(seed: u64) -> Vec<Check> {
    use crate::loss::DistKind;
    let configs = [
        ("topk-bce", PoolKind::TopK, DistKind::Bce),
        ("topk-mmd", PoolKind::TopK, DistKind::Mmd),
        ("sage-bce", PoolKind::Sage, DistKind::Bce),
        ("sage-mmd", PoolKind::Sage, DistKind::Mmd),
    ];
    configs
        .into_iter()
        .map(|(name, pool, dist)| {
            check(&format!("model-gradient:{name}"), || {
                let graphs = selftest_graphs(seed).map_err(|e| e.to_string())?;
                let mut rng = crate::util::substream(seed, crate::util::Stream::Init);
                let model = PrGnnModel::init([8, 5, 4], pool, 0.5, &mut rng)
                    .map_err(|e| e.to_string())?;
                let loss_cfg = LossConfig {
                    lambda1: 0.1,
                    lambda2: 0.1,
                    sigma: 5.0,
                    dist_kind: dist,
                    n_classes: 2,
                };
                let report = end_to_end_grad_check(&model, &graphs, &loss_cfg, 1e-5, 1e-4)
                    .map_err(|e| e.to_string())?;
                if report.passed() {
                    Ok(())
                } else {
                    Err(format!("rel err {:.3e} exceeds 1e-4", report.max_rel_err))
                }
            })
        })
        .collect()
}

fn loss_closed_form_checks(seed: u64) -> Vec<Check> {
    use crate::loss::RankedScores;
    use rand::{Rng, SeedableRng};
    vec![
        check("loss:bce-closed-form", || {
            let v = bce_score_loss(&[RankedScores {
                a: vec![0.5],
                b: vec![0.5],
            }])
            .map_err(|e| e.to_string())?;
            if (v - 0.69315).abs() <= 1e-6 + 4e-6 && (v - 2.0_f64.ln()).abs() <= 1e-12 {
                Ok(())
            } else {
                Err(format!("got {v}, expected ln 2"))
            }
        }),
        check("loss:mmd-closed-form", || {
            let v = mmd_loss(
                &[RankedScores {
                    a: vec![1.0],
                    b: vec![0.0],
                }],
                5.0,
            )
            .map_err(|e| e.to_string())?;
            if (v + 0.36254).abs() <= 1e-4 {
                Ok(())
            } else {
                Err(format!("got {v}, expected -0.36254"))
            }
        }),
        check("loss:glc-trace-identity", || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
            for _ in 0..100 {
                let m = rng.random_range(2..6);
                let n = rng.random_range(1..8);
                let s = Matrix2D::new(
                    m,
                    n,
                    (0..m * n).map(|_| rng.random_range(0.0..1.0)).collect(),
                )
                .expect("finite");
                let mut trace = 0.0;
                for col in 0..n {
                    let column: Vec<f64> = (0..m).map(|r| s.get(r, col)).collect();
                    let sum: f64 = column.iter().sum();
                    let sq: f64 = column.iter().map(|v| v * v).sum();
                    trace += m as f64 * sq - sum * sum;
                }
                let oracle = 2.0 * trace / ((m * m) as f64 * n as f64);
                let ours = glc_loss(&[s]).map_err(|e| e.to_string())?;
                if (oracle - ours).abs() > 1e-10 {
                    return Err(format!("pairwise {ours} vs trace {oracle}"));
                }
            }
            Ok(())
        }),
        check("loss:glc-identical-zero", || {
            let s = Matrix2D::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7]]).expect("finite");
            let v = glc_loss(&[s]).map_err(|e| e.to_string())?;
            if v == 0.0 {
                Ok(())
            } else {
                Err(format!("got {v}"))
            }
        }),
        check("loss:ce-uniform", || {
            let v = cross_entropy(&[0.0, 0.0], 0).map_err(|e| e.to_string())?;
            if (v - 2.0_f64.ln()).abs() <= 1e-12 {
                Ok(())
            } else {
                Err(format!("got {v}"))
            }
        }),
    ]
}

fn pooling_and_graph_checks(seed: u64) -> Vec<Check> {
    use rand::{Rng, SeedableRng};
    vec![
        check("pool:cardinality", || {
            if pool_size(84, 0.5) == 42 && pool_size(42, 0.5) == 21 {
                Ok(())
            } else {
                Err("ceil(ratio N) chain broke".into())
            }
        }),
        check("pool:tie-break", || {
            let h = Matrix2D::filled(4, 2, 1.0);
            let e = Matrix2D::zeros(4, 4);
            let (_, _, idx) = crate::model::pool(&h, &e, &[0.5; 4], 0.5).map_err(|e| e.to_string())?;
            if idx == vec![0, 1] {
                Ok(())
            } else {
                Err(format!("tie-break produced {idx:?}"))
            }
        }),
        check("rank-split:partition", || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x51);
            let scores: Vec<f64> = (0..84).map(|_| rng.random_range(0.0..1.0)).collect();
            let rs = rank_split(&scores, 42).map_err(|e| e.to_string())?;
            let min_a = rs.a.iter().copied().fold(f64::INFINITY, f64::min);
            let max_b = rs.b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if min_a >= max_b && rs.a.len() == 42 {
                Ok(())
            } else {
                Err(format!("min(a)={min_a} max(b)={max_b}"))
            }
        }),
        check("graph:edge-quota", || {
            if edge_quota(84, 0.1) == 349 {
                Ok(())
            } else {
                Err(format!("got {}", edge_quota(84, 0.1)))
            }
        }),
        check("graph:build-validate", || {
            let graphs = selftest_graphs(seed).map_err(|e| e.to_string())?;
            for g in &graphs {
                let violations = g.validate();
                if !violations.is_empty() {
                    return Err(format!("{:?}", violations[0]));
                }
            }
            Ok(())
        }),
        check("attention:row-sums", || {
            let graphs = selftest_graphs(seed).map_err(|e| e.to_string())?;
            let g = &graphs[0];
            let mut rng = crate::util::substream(seed, crate::util::Stream::Init);
            let model =
                PrGnnModel::init([8, 5, 4], PoolKind::TopK, 0.5, &mut rng).map_err(|e| e.to_string())?;
            let alpha = crate::model::attention_matrix(&g.features, &g.adjacency, &model.conv1)
                .map_err(|e| e.to_string())?;
            for i in 0..alpha.rows() {
                let sum: f64 = alpha.row(i).iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(format!("row {i} sums to {sum}"));
                }
            }
            Ok(())
        }),
    ]
}

/// Runs all self-verification checks, printing one PASS/FAIL line each.
/// Seeded, so repeated runs produce identical reports. Returns exit code 1
/// on any failure.
pub fn cmd_selftest(seed: u64) -> Result<i32> {
    let started = std::time::Instant::now();
    let mut checks: Vec<Check> = Vec::new();
    checks.extend(primitive_gradient_checks(seed));
    checks.extend(loss_closed_form_checks(seed));
    checks.extend(pooling_and_graph_checks(seed));
    checks.extend(model_gradient_checks(seed));

    let mut failures = 0;
    for (name, outcome) in &checks {
        match outcome {
            Ok(()) => println!("PASS {name}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!(
        "selftest: {} checks, {failures} failures ({:.1}s)",
        checks.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(if failures > 0 { 1 } else { 0 })
}
