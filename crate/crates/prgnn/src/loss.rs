//! Loss terms: cross-entropy on logits, two score-distance losses (MMD and
//! BCE) that push kept and dropped pooling scores apart, and a group-level
//! consistency (GLC) penalty that makes first-layer score vectors agree
//! within a class.
//!
//! Every term exists in two forms: a plain evaluator on values (used for
//! closed-form checks and reporting) and a tape builder (used in training,
//! where gradients must flow). Tests pin the two forms against each other.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix2D, NodeId, Tape};
use crate::error::{Error, Result};
use crate::util::rank_descending;

/// Scores are clamped into [SCORE_CLAMP, 1 - SCORE_CLAMP] before logs;
/// sigmoid outputs can saturate in double precision.
pub const SCORE_CLAMP: f64 = 1e-7;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistKind {
    Mmd,
    Bce,
}

impl std::str::FromStr for DistKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mmd" => Ok(DistKind::Mmd),
            "bce" => Ok(DistKind::Bce),
            other => Err(Error::Config(format!("unknown distance loss {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Gaussian-kernel scale in the MMD loss.
    pub sigma: f64,
    pub dist_kind: DistKind,
    pub n_classes: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.1,
            lambda2: 0.1,
            sigma: 5.0,
            dist_kind: DistKind::Bce,
            n_classes: 2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !self.lambda1.is_finite() || !self.lambda2.is_finite() || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config(format!(
                "lambdas must be finite and >= 0, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        Ok(())
    }
}

/// One instance's pooling scores split at rank k: `a` holds the top-k in
/// descending order, `b` the remainder in descending order.
#[derive(Clone, Debug)]
pub struct RankedScores {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Splits a score vector at rank `k`, descending, ties by smaller index.
pub fn rank_split(scores: &[f64], k: usize) -> Result<RankedScores> {
    if k == 0 || k >= scores.len() {
        return Err(Error::Argument(format!(
            "rank_split k={k} out of range for {} scores",
            scores.len()
        )));
    }
    let order = rank_descending(scores);
    Ok(RankedScores {
        a: order[..k].iter().map(|&i| scores[i]).collect(),
        b: order[k..].iter().map(|&i| scores[i]).collect(),
    })
}

fn gauss_kernel(x: f64, y: f64, sigma: f64) -> f64 {
    (-(x - y) * (x - y) / sigma).exp()
}

/// Kernel two-sample discrepancy between each instance's kept and dropped
/// score groups, averaged over instances and negated: separating the groups
/// decreases the loss. Always <= 0.
pub fn mmd_loss(batch: &[RankedScores], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be > 0, got {sigma}")));
    }
    if batch.is_empty() {
        return Err(Error::Argument("mmd_loss on empty batch".into()));
    }
    let mut total = 0.0;
    for rs in batch {
        if rs.a.is_empty() || rs.b.is_empty() {
            return Err(Error::Argument(
                "mmd_loss requires nonempty kept and dropped groups".into(),
            ));
        }
        let (k, r) = (rs.a.len() as f64, rs.b.len() as f64);
        let mut aa = 0.0;
        for &x in &rs.a {
            for &y in &rs.a {
                aa += gauss_kernel(x, y, sigma);
            }
        }
        let mut bb = 0.0;
        for &x in &rs.b {
            for &y in &rs.b {
                bb += gauss_kernel(x, y, sigma);
            }
        }
        let mut ab = 0.0;
        for &x in &rs.a {
            for &y in &rs.b {
                ab += gauss_kernel(x, y, sigma);
            }
        }
        total += aa / (k * k) + bb / (r * r) - 2.0 * ab / (k * r);
    }
    Ok(-total / batch.len() as f64)
}

/// Binary cross-entropy pushing kept scores toward 1 and dropped scores
/// toward 0, averaged over instances. Always >= 0.
pub fn bce_score_loss(batch: &[RankedScores]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("bce_score_loss on empty batch".into()));
    }
    let mut total = 0.0;
    for rs in batch {
        let n = (rs.a.len() + rs.b.len()) as f64;
        let mut term = 0.0;
        for &x in &rs.a {
            term += x.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP).ln();
        }
        for &x in &rs.b {
            term += (1.0 - x.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)).ln();
        }
        total += -term / n;
    }
    Ok(total / batch.len() as f64)
}

/// Group-level consistency: per class, the mean squared Euclidean distance
/// between all ordered pairs of first-layer score vectors, normalized by the
/// squared instance count and by the score length; summed over classes.
/// Classes with fewer than two instances contribute zero.
///
/// The per-coordinate normalization keeps the term commensurate with the
/// distance losses (which normalize by node count the same way), so equal
/// lambdas weight the two regularizers comparably at any graph size.
pub fn glc_loss(per_class: &[Matrix2D]) -> Result<f64> {
    let mut n_cols: Option<usize> = None;
    let mut total = 0.0;
    for s in per_class {
        if s.rows() == 0 {
            continue;
        }
        match n_cols {
            None => n_cols = Some(s.cols()),
            Some(n) if n != s.cols() => {
                return Err(Error::Dimension(format!(
                    "glc_loss: score length {} differs from {}",
                    s.cols(),
                    n
                )))
            }
            _ => {}
        }
        let m = s.rows();
        if m < 2 {
            continue;
        }
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                let (ri, rj) = (s.row(i), s.row(j));
                let mut d = 0.0;
                for c in 0..s.cols() {
                    let diff = ri[c] - rj[c];
                    d += diff * diff;
                }
                acc += d;
            }
        }
        total += acc / ((m * m) as f64 * s.cols() as f64);
    }
    Ok(total)
}

/// Numerically stable -log softmax(logits)[label].
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    Ok(lse - (logits[label] - m))
}

/// Weighted total: ce + lambda1 * sum(dist per layer) + lambda2 * sum(glc
/// per class).
pub fn total_loss(ce: f64, dist_per_layer: &[f64], glc_per_class: &[f64], cfg: &LossConfig) -> f64 {
    ce + cfg.lambda1 * dist_per_layer.iter().sum::<f64>()
        + cfg.lambda2 * glc_per_class.iter().sum::<f64>()
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

/// Splits an N x 1 score node at rank k via gathers, so gradients flow into
/// both groups. The selection itself is treated as constant during backward;
/// near-ties at the boundary flag a kink for the gradient checker.
pub fn rank_split_nodes(tape: &Tape, s: NodeId, k: usize) -> Result<(NodeId, NodeId)> {
    let sv = tape.value(s);
    if sv.cols() != 1 {
        return Err(Error::Dimension(format!(
            "rank_split_nodes expects a column vector, got {:?}",
            sv.shape()
        )));
    }
    let n = sv.rows();
    if k == 0 || k >= n {
        return Err(Error::Argument(format!(
            "rank_split_nodes k={k} out of range for {n} scores"
        )));
    }
    let order = rank_descending(sv.values());
    if (sv.values()[order[k - 1]] - sv.values()[order[k]]).abs() <= tape.kink_eps() {
        tape.flag_kink();
    }
    let a = tape.gather_rows(s, &order[..k])?;
    let b = tape.gather_rows(s, &order[k..])?;
    Ok((a, b))
}

/// Sum over all entries of exp(-(x_i - y_j)^2 / sigma) for column vectors x
/// (p x 1) and y (q x 1), as a 1x1 node.
fn kernel_sum_node(tape: &Tape, x: NodeId, y: NodeId, sigma: f64) -> Result<NodeId> {
    let p = tape.shape(x).0;
    let q = tape.shape(y).0;
    let ones_row_q = tape.constant(Matrix2D::filled(1, q, 1.0))?;
    let ones_row_p = tape.constant(Matrix2D::filled(1, p, 1.0))?;
    let left = tape.matmul(x, ones_row_q)?; // p x q of x_i
    let right = tape.transpose(tape.matmul(y, ones_row_p)?)?; // p x q of y_j
    let diff = tape.sub(left, right)?;
    let sq = tape.mul(diff, diff)?;
    let scaled = tape.affine(sq, -1.0 / sigma, 0.0)?;
    let kern = tape.exp(scaled)?;
    tape.sum_all(kern)
}

/// MMD distance loss over a batch of per-instance (kept, dropped) score
/// node pairs.
pub fn mmd_loss_node(tape: &Tape, pairs: &[(NodeId, NodeId)], sigma: f64) -> Result<NodeId> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be > 0, got {sigma}")));
    }
    if pairs.is_empty() {
        return Err(Error::Argument("mmd_loss_node on empty batch".into()));
    }
    let mut acc: Option<NodeId> = None;
    for &(a, b) in pairs {
        let k = tape.shape(a).0 as f64;
        let r = tape.shape(b).0 as f64;
        let aa = kernel_sum_node(tape, a, a, sigma)?;
        let bb = kernel_sum_node(tape, b, b, sigma)?;
        let ab = kernel_sum_node(tape, a, b, sigma)?;
        let t1 = tape.affine(aa, 1.0 / (k * k), 0.0)?;
        let t2 = tape.affine(bb, 1.0 / (r * r), 0.0)?;
        let t3 = tape.affine(ab, -2.0 / (k * r), 0.0)?;
        let inst = tape.add(tape.add(t1, t2)?, t3)?;
        acc = Some(match acc {
            None => inst,
            Some(prev) => tape.add(prev, inst)?,
        });
    }
    tape.affine(acc.unwrap(), -1.0 / pairs.len() as f64, 0.0)
}

/// BCE distance loss over a batch of per-instance (kept, dropped) score
/// node pairs.
pub fn bce_loss_node(tape: &Tape, pairs: &[(NodeId, NodeId)]) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(Error::Argument("bce_loss_node on empty batch".into()));
    }
    let mut acc: Option<NodeId> = None;
    for &(a, b) in pairs {
        let n = (tape.shape(a).0 + tape.shape(b).0) as f64;
        let ca = tape.clamp(a, SCORE_CLAMP, 1.0 - SCORE_CLAMP)?;
        let la = tape.sum_all(tape.log(ca)?)?;
        let cb = tape.clamp(b, SCORE_CLAMP, 1.0 - SCORE_CLAMP)?;
        let one_minus = tape.affine(cb, -1.0, 1.0)?;
        let lb = tape.sum_all(tape.log(one_minus)?)?;
        let inst = tape.affine(tape.add(la, lb)?, -1.0 / n, 0.0)?;
        acc = Some(match acc {
            None => inst,
            Some(prev) => tape.add(prev, inst)?,
        });
    }
    tape.affine(acc.unwrap(), 1.0 / pairs.len() as f64, 0.0)
}

/// GLC loss from per-class lists of N x 1 first-layer score nodes, using
/// the expansion sum_ij |s_i - s_j|^2 = 2 M sum_i |s_i|^2 - 2 |sum_i s_i|^2.
pub fn glc_loss_node(tape: &Tape, per_class: &[Vec<NodeId>]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for class in per_class {
        let m = class.len();
        if m < 2 {
            continue;
        }
        let n = tape.shape(class[0]).0;
        let mut sq_sum: Option<NodeId> = None; // sum_i |s_i|^2
        let mut vec_sum: Option<NodeId> = None; // sum_i s_i
        for &s in class {
            let sq = tape.sum_all(tape.mul(s, s)?)?;
            sq_sum = Some(match sq_sum {
                None => sq,
                Some(prev) => tape.add(prev, sq)?,
            });
            vec_sum = Some(match vec_sum {
                None => s,
                Some(prev) => tape.add(prev, s)?,
            });
        }
        let vs = vec_sum.unwrap();
        let t2 = tape.sum_all(tape.mul(vs, vs)?)?;
        let scaled_t1 = tape.affine(sq_sum.unwrap(), m as f64, 0.0)?;
        let diff = tape.sub(scaled_t1, t2)?;
        let class_loss = tape.affine(diff, 2.0 / ((m * m) as f64 * n as f64), 0.0)?;
        acc = Some(match acc {
            None => class_loss,
            Some(prev) => tape.add(prev, class_loss)?,
        });
    }
    match acc {
        Some(node) => Ok(node),
        None => tape.constant(Matrix2D::scalar(0.0)),
    }
}

/// Cross-entropy node from a 1 x C logits node. The max subtraction uses a
/// detached constant; softmax is shift invariant so both the value and the
/// gradient are exact.
pub fn cross_entropy_node(tape: &Tape, logits: NodeId, label: usize) -> Result<NodeId> {
    let lv = tape.value(logits);
    if lv.rows() != 1 {
        return Err(Error::Dimension(format!(
            "cross_entropy_node expects 1 x C logits, got {:?}",
            lv.shape()
        )));
    }
    let c = lv.cols();
    if label >= c {
        return Err(Error::Argument(format!(
            "label {label} out of range for {c} logits"
        )));
    }
    let m = lv.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.affine(logits, 1.0, -m)?;
    let lse = tape.log(tape.sum_all(tape.exp(shifted)?)?)?;
    let picked = tape.gather_rows(tape.transpose(shifted)?, &[label])?;
    tape.sub(lse, tape.sum_all(picked)?)
}
