//! Adam training with a halving learning-rate schedule, mini-batch loss
//! assembly (distance losses per pooling layer, group consistency per class
//! within each batch), subject-stratified cross-validation and per-epoch
//! reporting.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::split_subject_labels;
use crate::diffcore::{Matrix2D, Tape};
use crate::error::{Error, Result};
use crate::graph::BrainGraph;
use crate::loss::{
    bce_loss_node, cross_entropy_node, glc_loss_node, mmd_loss_node, rank_split_nodes, DistKind,
    LossConfig,
};
use crate::model::{forward, forward_nodes, pool_size, PoolKind, PrGnnModel};
use crate::util::{mean_std, substream, Stream};

pub const HIST_BINS: usize = 20;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Learning rate halves every this many epochs.
    pub halve_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub pool_kind: PoolKind,
    pub dims: [usize; 3],
    pub ratio: f64,
    /// Aggregate test predictions by subject majority vote instead of
    /// counting instances.
    pub subject_vote: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            base_lr: 1e-3,
            halve_every: 20,
            batch_size: 4,
            seed: 0,
            loss: LossConfig::default(),
            pool_kind: PoolKind::TopK,
            dims: crate::model::DEFAULT_DIMS,
            ratio: crate::model::DEFAULT_RATIO,
            subject_vote: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if self.halve_every == 0 {
            return Err(Error::Config("halve_every must be at least 1".into()));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("ratio must be in (0,1), got {}", self.ratio)));
        }
        self.loss.validate()
    }
}

/// base_lr halved every `halve_every` epochs (floor semantics).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * 0.5_f64.powi((epoch / cfg.halve_every) as i32)
}

/// Per-parameter first/second moment estimates with a shared step counter.
pub struct AdamState {
    m: Vec<Matrix2D>,
    v: Vec<Matrix2D>,
    t: u64,
}

impl AdamState {
    pub fn new(model: &PrGnnModel) -> Self {
        let zeros: Vec<Matrix2D> = model
            .params()
            .iter()
            .map(|(_, p)| Matrix2D::zeros(p.rows(), p.cols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update over all parameters. Gradients are given
/// in [`PrGnnModel::params`] order; a non-finite gradient aborts, naming
/// the parameter.
pub fn adam_step(
    model: &mut PrGnnModel,
    grads: &[Matrix2D],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (i, (name, param)) in model.params_mut().into_iter().enumerate() {
        let g = &grads[i];
        if g.check_finite().is_err() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
        if g.shape() != param.shape() {
            return Err(Error::Dimension(format!(
                "gradient for {name} is {:?}, parameter is {:?}",
                g.shape(),
                param.shape()
            )));
        }
        let m = state.m[i].values_mut();
        let v = state.v[i].values_mut();
        let p = param.values_mut();
        for (j, &gj) in g.values().iter().enumerate() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Per-epoch training record, streamed as one JSON line each.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    /// Distance loss per pooling layer.
    pub dist: [f64; 2],
    /// Group-consistency loss summed over classes.
    pub glc: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub layer1_kept_mean: f64,
    pub layer1_dropped_mean: f64,
    pub layer2_kept_mean: f64,
    pub layer2_dropped_mean: f64,
    /// 20-bin histograms of pooling scores over [0,1], accumulated over the
    /// epoch's training forwards; counts sum to instances x layer width.
    pub hist_layer1: Vec<u64>,
    pub hist_layer2: Vec<u64>,
}

fn bin_of(score: f64) -> usize {
    ((score * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
}

#[derive(Default)]
struct ScoreStats {
    hist: [Vec<u64>; 2],
    kept_sum: [f64; 2],
    kept_n: [usize; 2],
    dropped_sum: [f64; 2],
    dropped_n: [usize; 2],
}

impl ScoreStats {
    fn new() -> Self {
        ScoreStats {
            hist: [vec![0; HIST_BINS], vec![0; HIST_BINS]],
            ..Default::default()
        }
    }

    fn record(&mut self, layer: usize, scores: &[f64], k: usize) {
        let order = crate::util::rank_descending(scores);
        for (rank, &i) in order.iter().enumerate() {
            let s = scores[i];
            self.hist[layer][bin_of(s)] += 1;
            if rank < k {
                self.kept_sum[layer] += s;
                self.kept_n[layer] += 1;
            } else {
                self.dropped_sum[layer] += s;
                self.dropped_n[layer] += 1;
            }
        }
    }

    fn mean_kept(&self, layer: usize) -> f64 {
        self.kept_sum[layer] / self.kept_n[layer].max(1) as f64
    }

    fn mean_dropped(&self, layer: usize) -> f64 {
        self.dropped_sum[layer] / self.dropped_n[layer].max(1) as f64
    }
}

/// The weighted batch loss plus its components and per-graph forwards, all
/// on the caller's tape.
pub struct BatchLoss {
    pub total: crate::diffcore::NodeId,
    pub ce: f64,
    pub dist: [f64; 2],
    pub glc: f64,
    pub forwards: Vec<crate::model::GraphForward>,
}

/// Assembles the full training objective for one mini-batch: mean
/// cross-entropy, the distance loss per pooling layer over the batch, and
/// the per-class group-consistency terms, weighted by the loss config.
pub fn assemble_batch_loss(
    tape: &Tape,
    nodes: &crate::model::ModelNodes,
    batch: &[&BrainGraph],
    loss_cfg: &LossConfig,
    ratio: f64,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut ce_nodes = Vec::with_capacity(batch.len());
    let mut pairs = [Vec::new(), Vec::new()];
    let mut per_class: Vec<Vec<crate::diffcore::NodeId>> = vec![Vec::new(); loss_cfg.n_classes];
    let mut forwards = Vec::with_capacity(batch.len());

    for g in batch {
        let fwd = forward_nodes(tape, nodes, g)?;
        ce_nodes.push(cross_entropy_node(tape, fwd.logits, g.label)?);
        per_class[g.label].push(fwd.s1);
        for (layer, s) in [fwd.s1, fwd.s2].into_iter().enumerate() {
            let n = tape.shape(s).0;
            let k = pool_size(n, ratio);
            if k > 0 && k < n {
                pairs[layer].push(rank_split_nodes(tape, s, k)?);
            }
        }
        forwards.push(fwd);
    }

    let mut ce_total = ce_nodes[0];
    for &node in &ce_nodes[1..] {
        ce_total = tape.add(ce_total, node)?;
    }
    let ce_mean = tape.affine(ce_total, 1.0 / ce_nodes.len() as f64, 0.0)?;

    let mut dist_values = [0.0; 2];
    let mut dist_nodes = Vec::new();
    for layer in 0..2 {
        if pairs[layer].is_empty() {
            continue;
        }
        let node = match loss_cfg.dist_kind {
            DistKind::Mmd => mmd_loss_node(tape, &pairs[layer], loss_cfg.sigma)?,
            DistKind::Bce => bce_loss_node(tape, &pairs[layer])?,
        };
        dist_values[layer] = tape.value(node).scalar_value()?;
        dist_nodes.push(node);
    }

    let glc_node = glc_loss_node(tape, &per_class)?;
    let glc_value = tape.value(glc_node).scalar_value()?;

    let mut total = ce_mean;
    if loss_cfg.lambda1 != 0.0 && !dist_nodes.is_empty() {
        let mut dist_sum = dist_nodes[0];
        for &node in &dist_nodes[1..] {
            dist_sum = tape.add(dist_sum, node)?;
        }
        total = tape.add(total, tape.affine(dist_sum, loss_cfg.lambda1, 0.0)?)?;
    }
    if loss_cfg.lambda2 != 0.0 {
        total = tape.add(total, tape.affine(glc_node, loss_cfg.lambda2, 0.0)?)?;
    }

    Ok(BatchLoss {
        total,
        ce: tape.value(ce_mean).scalar_value()?,
        dist: dist_values,
        glc: glc_value,
        forwards,
    })
}

/// Checks the gradient of the full training objective with respect to every
/// model parameter against central finite differences.
pub fn end_to_end_grad_check(
    model: &PrGnnModel,
    graphs: &[BrainGraph],
    loss_cfg: &LossConfig,
    step: f64,
    tol: f64,
) -> Result<crate::diffcore::GradCheckReport> {
    let point: Vec<Matrix2D> = model.params().into_iter().map(|(_, p)| p.clone()).collect();
    let batch: Vec<&BrainGraph> = graphs.iter().collect();
    crate::diffcore::grad_check(
        |tape, ids| {
            let nodes = crate::model::ModelNodes::from_param_ids(model, ids, model.ratio)?;
            Ok(assemble_batch_loss(tape, &nodes, &batch, loss_cfg, model.ratio)?.total)
        },
        &point,
        step,
        tol,
    )
}

struct BatchOutcome {
    ce: f64,
    dist: [f64; 2],
    glc: f64,
    n_correct: usize,
}

fn train_batch(
    model: &mut PrGnnModel,
    adam: &mut AdamState,
    batch: &[&BrainGraph],
    cfg: &TrainConfig,
    lr: f64,
    stats: &mut ScoreStats,
) -> Result<BatchOutcome> {
    let tape = Tape::new();
    let nodes = model.place_on(&tape)?;
    let loss = assemble_batch_loss(&tape, &nodes, batch, &cfg.loss, cfg.ratio)?;

    let mut n_correct = 0;
    for (fwd, g) in loss.forwards.iter().zip(batch) {
        for (layer, s) in [fwd.s1, fwd.s2].into_iter().enumerate() {
            let values = tape.value(s);
            let k = pool_size(values.rows(), cfg.ratio);
            stats.record(layer, values.values(), k);
        }
        let logits = tape.value(fwd.logits);
        let predicted = logits
            .values()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if predicted == g.label {
            n_correct += 1;
        }
    }

    let total_value = tape.value(loss.total).scalar_value()?;
    if !total_value.is_finite() {
        return Err(Error::Numeric(format!(
            "training loss became non-finite ({total_value})"
        )));
    }

    let grads = tape.backward(loss.total)?;
    let grad_mats: Vec<Matrix2D> = nodes
        .param_ids
        .iter()
        .map(|&id| grads.grad_or_zeros(id, tape.shape(id)))
        .collect();
    adam_step(model, &grad_mats, adam, lr)?;

    Ok(BatchOutcome {
        ce: loss.ce,
        dist: loss.dist,
        glc: loss.glc,
        n_correct,
    })
}

/// Trains on `train`, reporting per-epoch metrics (validation accuracy when
/// `val` is nonempty). Returns the final-epoch model; there is no early
/// stopping.
pub fn train_fold(
    train: &[BrainGraph],
    val: &[BrainGraph],
    cfg: &TrainConfig,
) -> Result<(PrGnnModel, Vec<EpochReport>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for class in 0..cfg.loss.n_classes {
        if !train.iter().any(|g| g.label == class) {
            return Err(Error::Config(format!(
                "class {class} has no instances in the training set"
            )));
        }
    }

    let mut init_rng = substream(cfg.seed, Stream::Init);
    let mut model = PrGnnModel::init(cfg.dims, cfg.pool_kind, cfg.ratio, &mut init_rng)?;
    let mut adam = AdamState::new(&model);
    let mut shuffle_rng = substream(cfg.seed, Stream::Shuffle);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut reports = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut shuffle_rng);

        let mut stats = ScoreStats::new();
        let mut ce_acc = 0.0;
        let mut dist_acc = [0.0; 2];
        let mut glc_acc = 0.0;
        let mut n_correct = 0;
        let mut n_batches = 0;

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&BrainGraph> = chunk.iter().map(|&i| &train[i]).collect();
            let outcome = train_batch(&mut model, &mut adam, &batch, cfg, lr, &mut stats)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}: {msg}")),
                    other => other,
                })?;
            ce_acc += outcome.ce;
            dist_acc[0] += outcome.dist[0];
            dist_acc[1] += outcome.dist[1];
            glc_acc += outcome.glc;
            n_correct += outcome.n_correct;
            n_batches += 1;
        }

        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(evaluate(&model, val)?.accuracy)
        };

        let nb = n_batches as f64;
        reports.push(EpochReport {
            epoch,
            lr,
            ce: ce_acc / nb,
            dist: [dist_acc[0] / nb, dist_acc[1] / nb],
            glc: glc_acc / nb,
            train_accuracy: n_correct as f64 / train.len() as f64,
            val_accuracy,
            layer1_kept_mean: stats.mean_kept(0),
            layer1_dropped_mean: stats.mean_dropped(0),
            layer2_kept_mean: stats.mean_kept(1),
            layer2_dropped_mean: stats.mean_dropped(1),
            hist_layer1: stats.hist[0].clone(),
            hist_layer2: stats.hist[1].clone(),
        });
    }

    Ok((model, reports))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub subject_id: String,
    pub label: usize,
    pub predicted: usize,
}

pub struct EvalResult {
    /// Instance-level accuracy.
    pub accuracy: f64,
    pub predictions: Vec<Prediction>,
    pub traces: Vec<crate::model::ForwardTrace>,
}

pub fn evaluate(model: &PrGnnModel, graphs: &[BrainGraph]) -> Result<EvalResult> {
    let mut predictions = Vec::with_capacity(graphs.len());
    let mut traces = Vec::with_capacity(graphs.len());
    let mut n_correct = 0;
    for g in graphs {
        let trace = forward(model, g)?;
        let predicted = trace.predicted();
        if predicted == g.label {
            n_correct += 1;
        }
        predictions.push(Prediction {
            instance_id: g.instance_id.clone(),
            subject_id: g.subject_id.clone(),
            label: g.label,
            predicted,
        });
        traces.push(trace);
    }
    let accuracy = if graphs.is_empty() {
        0.0
    } else {
        n_correct as f64 / graphs.len() as f64
    };
    Ok(EvalResult {
        accuracy,
        predictions,
        traces,
    })
}

/// Majority vote over each subject's instances (ties go to the smaller
/// class id); accuracy over subjects.
pub fn subject_vote_accuracy(predictions: &[Prediction]) -> f64 {
    use std::collections::BTreeMap;
    let mut per_subject: BTreeMap<&str, (usize, BTreeMap<usize, usize>)> = BTreeMap::new();
    for p in predictions {
        let entry = per_subject
            .entry(&p.subject_id)
            .or_insert_with(|| (p.label, BTreeMap::new()));
        *entry.1.entry(p.predicted).or_insert(0) += 1;
    }
    if per_subject.is_empty() {
        return 0.0;
    }
    let mut correct = 0;
    for (label, votes) in per_subject.values() {
        let winner = votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&class, _)| class)
            .unwrap_or(0);
        if winner == *label {
            correct += 1;
        }
    }
    correct as f64 / per_subject.len() as f64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub accuracy: f64,
    pub test_subjects: Vec<String>,
}

/// Cross-validation output; `formatted` follows the "mean(std)" convention,
/// e.g. "0.797(0.051)".
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvSummary {
    pub fold: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub formatted: String,
}

pub struct FoldOutcome {
    pub summary: FoldSummary,
    pub model: PrGnnModel,
    pub reports: Vec<EpochReport>,
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3}({std:.3})")
}

/// Subject-stratified k-fold cross-validation. Per-fold training seeds are
/// derived as `cfg.seed + fold`; folds are independent and may run
/// concurrently (`parallel` > 1).
pub fn cross_validate(
    graphs: &[BrainGraph],
    k_folds: usize,
    cfg: &TrainConfig,
    parallel: usize,
) -> Result<(Vec<FoldOutcome>, CvSummary)> {
    cfg.validate()?;
    let mut subjects: Vec<(String, usize)> = Vec::new();
    for g in graphs {
        if !subjects.iter().any(|(id, _)| id == &g.subject_id) {
            subjects.push((g.subject_id.clone(), g.label));
        } else if let Some((_, label)) = subjects.iter().find(|(id, _)| id == &g.subject_id) {
            if *label != g.label {
                return Err(Error::Validation(format!(
                    "subject {} appears with two labels",
                    g.subject_id
                )));
            }
        }
    }
    let folds = split_subject_labels(&subjects, k_folds, cfg.seed)?;

    let run_fold = |f: usize| -> Result<FoldOutcome> {
        let (train_ids, test_ids) = &folds[f];
        let train_set: Vec<BrainGraph> = graphs
            .iter()
            .filter(|g| train_ids.contains(&g.subject_id))
            .cloned()
            .collect();
        let test_set: Vec<BrainGraph> = graphs
            .iter()
            .filter(|g| test_ids.contains(&g.subject_id))
            .cloned()
            .collect();
        let fold_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(f as u64),
            ..cfg.clone()
        };
        let (model, reports) = train_fold(&train_set, &test_set, &fold_cfg)?;
        let eval = evaluate(&model, &test_set)?;
        let accuracy = if cfg.subject_vote {
            subject_vote_accuracy(&eval.predictions)
        } else {
            eval.accuracy
        };
        Ok(FoldOutcome {
            summary: FoldSummary {
                fold: f,
                accuracy,
                test_subjects: test_ids.clone(),
            },
            model,
            reports,
        })
    };

    let outcomes: Vec<FoldOutcome> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel.min(k_folds))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        use rayon::prelude::*;
        pool.install(|| (0..k_folds).into_par_iter().map(run_fold).collect::<Result<Vec<_>>>())?
    } else {
        (0..k_folds).map(run_fold).collect::<Result<Vec<_>>>()?
    };

    let accuracies: Vec<f64> = outcomes.iter().map(|o| o.summary.accuracy).collect();
    let (mean, std) = mean_std(&accuracies);
    let summary = CvSummary {
        fold: (0..k_folds).collect(),
        accuracy: accuracies,
        mean,
        std,
        formatted: format_mean_std(mean, std),
    };
    Ok((outcomes, summary))
}
