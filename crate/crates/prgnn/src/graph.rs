//! Brain-graph data type and construction from connectivity matrices.
//!
//! Graphs are built from a pair of correlation matrices: partial
//! correlations define sparse edges (largest positive entries up to a
//! fraction of all node pairs), Pearson correlation rows become node
//! features. Nodes left isolated by thresholding are reconnected through
//! their single strongest incident edge.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::diffcore::Matrix2D;
use crate::error::{Error, Result};

/// Minimum weight assigned to a repair edge, so attention weighting (which
/// multiplies by the edge value) never zeroes out a repaired node's only
/// connection.
pub const MIN_REPAIR_WEIGHT: f64 = 1e-6;

/// One classification instance: node features, weighted adjacency, label.
///
/// Immutable after construction; safe to share across threads.
#[derive(Clone, Debug)]
pub struct BrainGraph {
    pub n_nodes: usize,
    /// N x d node feature matrix (Pearson rows; d = N when built here).
    pub features: Matrix2D,
    /// N x N symmetric nonnegative adjacency, zero diagonal.
    pub adjacency: Matrix2D,
    pub label: usize,
    pub subject_id: String,
    pub instance_id: String,
}

/// A single failed [`BrainGraph`] invariant. `validate` reports every
/// violation, not just the first.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NotSquare { rows: usize, cols: usize },
    Asymmetric { i: usize, j: usize, eij: f64, eji: f64 },
    NonzeroDiagonal { i: usize, value: f64 },
    NegativeWeight { i: usize, j: usize, value: f64 },
    IsolatedNode { i: usize },
    FeatureRows { expected: usize, found: usize },
    NonFinite { what: &'static str },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotSquare { rows, cols } => {
                write!(f, "adjacency is {rows}x{cols}, not square")
            }
            Violation::Asymmetric { i, j, eij, eji } => {
                write!(f, "asymmetric edge ({i},{j}): {eij} vs {eji}")
            }
            Violation::NonzeroDiagonal { i, value } => {
                write!(f, "nonzero diagonal at node {i}: {value}")
            }
            Violation::NegativeWeight { i, j, value } => {
                write!(f, "negative weight at ({i},{j}): {value}")
            }
            Violation::IsolatedNode { i } => write!(f, "isolated node {i}"),
            Violation::FeatureRows { expected, found } => {
                write!(f, "feature matrix has {found} rows, expected {expected}")
            }
            Violation::NonFinite { what } => write!(f, "non-finite entries in {what}"),
        }
    }
}

impl BrainGraph {
    /// Checks all invariants, returning every violation found.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let e = &self.adjacency;
        if e.rows() != e.cols() || e.rows() != self.n_nodes {
            v.push(Violation::NotSquare {
                rows: e.rows(),
                cols: e.cols(),
            });
            return v;
        }
        if e.check_finite().is_err() {
            v.push(Violation::NonFinite { what: "adjacency" });
        }
        if self.features.check_finite().is_err() {
            v.push(Violation::NonFinite { what: "features" });
        }
        let n = self.n_nodes;
        for i in 0..n {
            let d = e.get(i, i);
            if d != 0.0 {
                v.push(Violation::NonzeroDiagonal { i, value: d });
            }
            for j in (i + 1)..n {
                let (eij, eji) = (e.get(i, j), e.get(j, i));
                if (eij - eji).abs() > 1e-12 {
                    v.push(Violation::Asymmetric { i, j, eij, eji });
                }
                if eij < 0.0 {
                    v.push(Violation::NegativeWeight { i, j, value: eij });
                }
            }
            if e.row(i).iter().all(|&w| w <= 0.0) {
                v.push(Violation::IsolatedNode { i });
            }
        }
        if self.features.rows() != n {
            v.push(Violation::FeatureRows {
                expected: n,
                found: self.features.rows(),
            });
        }
        v
    }
}

fn check_square_symmetric(m: &Matrix2D, name: &str, tol: f64) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(Error::Validation(format!(
            "{name} matrix is {}x{}, not square",
            m.rows(),
            m.cols()
        )));
    }
    for i in 0..m.rows() {
        for j in (i + 1)..m.cols() {
            if (m.get(i, j) - m.get(j, i)).abs() > tol {
                return Err(Error::Validation(format!(
                    "{name} matrix asymmetric at ({i},{j}): {} vs {}",
                    m.get(i, j),
                    m.get(j, i)
                )));
            }
        }
    }
    Ok(())
}

/// Number of edges retained by thresholding: the ceiling of
/// `top_frac * N(N-1)/2`, capped by how many strictly positive
/// upper-triangle entries exist.
pub fn edge_quota(n: usize, top_frac: f64) -> usize {
    (top_frac * (n * (n - 1) / 2) as f64).ceil() as usize
}

/// Builds a graph from a Pearson matrix (features) and a partial-correlation
/// matrix (edges).
///
/// Keeps the `edge_quota` largest strictly positive upper-triangle entries
/// of `partial` as undirected weighted edges, ties broken by smaller (i,j);
/// then reconnects every isolated node through its largest incident entry,
/// clamped to at least [`MIN_REPAIR_WEIGHT`]. Repair edges are additive on
/// top of the quota. Deterministic.
pub fn build_graph(
    pearson: &Matrix2D,
    partial: &Matrix2D,
    top_frac: f64,
    label: usize,
    subject_id: &str,
    instance_id: &str,
) -> Result<BrainGraph> {
    check_square_symmetric(pearson, "pearson", 1e-9)?;
    check_square_symmetric(partial, "partial", 1e-9)?;
    let n = partial.rows();
    if pearson.rows() != n {
        return Err(Error::Validation(format!(
            "pearson is {}x{} but partial is {}x{}",
            pearson.rows(),
            pearson.cols(),
            n,
            n
        )));
    }
    if n < 2 {
        return Err(Error::Validation(format!("need at least 2 nodes, got {n}")));
    }
    if !(top_frac > 0.0 && top_frac < 1.0) {
        return Err(Error::Argument(format!(
            "top_frac must lie in (0,1), got {top_frac}"
        )));
    }

    let mut positive: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = partial.get(i, j);
            if v > 0.0 {
                positive.push((i, j, v));
            }
        }
    }
    positive.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| (a.0, a.1).cmp(&(b.0, b.1))));
    let quota = edge_quota(n, top_frac).min(positive.len());

    let mut adjacency = Matrix2D::zeros(n, n);
    for &(i, j, v) in &positive[..quota] {
        adjacency.set(i, j, v);
        adjacency.set(j, i, v);
    }

    // Reconnect isolated nodes via their single largest incident entry.
    let isolated: Vec<usize> = (0..n)
        .filter(|&i| adjacency.row(i).iter().all(|&w| w <= 0.0))
        .collect();
    for i in isolated {
        if adjacency.row(i).iter().any(|&w| w > 0.0) {
            continue; // already repaired as the partner of an earlier node
        }
        let mut best_j = usize::MAX;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            let v = partial.get(i, j);
            if v > best_v {
                best_v = v;
                best_j = j;
            }
        }
        let w = best_v.max(MIN_REPAIR_WEIGHT);
        adjacency.set(i, best_j, w);
        adjacency.set(best_j, i, w);
    }

    Ok(BrainGraph {
        n_nodes: n,
        features: pearson.clone(),
        adjacency,
        label,
        subject_id: subject_id.to_string(),
        instance_id: instance_id.to_string(),
    })
}

/// Writes a matrix as N lines of comma-separated decimals. The default f64
/// formatting is the shortest representation that parses back exactly, so
/// round-trips are lossless.
pub fn write_matrix_text(m: &Matrix2D, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in 0..m.rows() {
        let line = m
            .row(r)
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix_text(path: &Path) -> Result<Matrix2D> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, format!("line {}: {e}", lineno + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|e| {
                    Error::io(path, format!("line {}: bad number {tok:?}: {e}", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::io(path, "empty matrix file"));
    }
    let cols = rows[0].len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(Error::io(
            path,
            format!("line {}: {} columns, expected {cols}", i + 1, r.len()),
        ));
    }
    Matrix2D::from_rows(&rows)
}
