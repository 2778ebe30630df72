//! Salient-node extraction and individual-vs-group interpretation: score
//! aggregation across instances, ranked node lists per class, pairwise
//! overlap of kept-node sets, and exportable score-histogram series.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix2D;
use crate::error::{Error, Result};
use crate::graph::BrainGraph;
use crate::model::{forward, PrGnnModel};
use crate::train::EpochReport;

/// Per-instance interpretation substrate: first-layer scores plus the node
/// sets surviving each pooling, in original node ids.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub instance_id: String,
    pub subject_id: String,
    pub label: usize,
    pub layer1_scores: Vec<f64>,
    pub layer1_kept: Vec<usize>,
    pub layer2_kept: Vec<usize>,
}

pub fn collect_scores(model: &PrGnnModel, graphs: &[BrainGraph]) -> Result<Vec<ScoreRecord>> {
    graphs
        .iter()
        .map(|g| {
            let trace = forward(model, g)?;
            Ok(ScoreRecord {
                instance_id: g.instance_id.clone(),
                subject_id: g.subject_id.clone(),
                label: g.label,
                layer1_scores: trace.scores[0].clone(),
                layer1_kept: trace.kept_idx[0].clone(),
                layer2_kept: trace.kept_idx[1].clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SalientNode {
    pub node_id: usize,
    pub mean_score: f64,
    /// 1-based rank (1 = most salient).
    pub rank: usize,
}

/// Ranks nodes by their mean first-layer score over all instances of
/// `class`, descending, ties by node id. Returns the `top_m` best (all
/// nodes if `top_m` exceeds N).
pub fn salient_nodes(records: &[ScoreRecord], class: usize, top_m: usize) -> Result<Vec<SalientNode>> {
    let of_class: Vec<&ScoreRecord> = records.iter().filter(|r| r.label == class).collect();
    if of_class.is_empty() {
        return Err(Error::Argument(format!("no records with class {class}")));
    }
    let n = of_class[0].layer1_scores.len();
    if of_class.iter().any(|r| r.layer1_scores.len() != n) {
        return Err(Error::Dimension("records disagree on node count".into()));
    }
    let mut means = vec![0.0; n];
    for r in &of_class {
        for (i, &s) in r.layer1_scores.iter().enumerate() {
            means[i] += s;
        }
    }
    for m in &mut means {
        *m /= of_class.len() as f64;
    }
    let order = crate::util::rank_descending(&means);
    Ok(order
        .into_iter()
        .take(top_m)
        .enumerate()
        .map(|(rank, node_id)| SalientNode {
            node_id,
            mean_score: means[node_id],
            rank: rank + 1,
        })
        .collect())
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum OverlapLevel {
    Layer1,
    Layer2,
}

pub struct OverlapReport {
    pub instance_ids: Vec<String>,
    /// Symmetric Jaccard matrix, unit diagonal.
    pub jaccard: Matrix2D,
    /// Mean over unordered pairs.
    pub mean: f64,
}

fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pairwise Jaccard similarity of kept-node sets at the given pooling level.
pub fn overlap(records: &[ScoreRecord], level: OverlapLevel) -> Result<OverlapReport> {
    if records.len() < 2 {
        return Err(Error::Argument(format!(
            "overlap needs at least 2 records, got {}",
            records.len()
        )));
    }
    let sets: Vec<BTreeSet<usize>> = records
        .iter()
        .map(|r| {
            let kept = match level {
                OverlapLevel::Layer1 => &r.layer1_kept,
                OverlapLevel::Layer2 => &r.layer2_kept,
            };
            kept.iter().copied().collect()
        })
        .collect();
    let n = sets.len();
    let mut matrix = Matrix2D::zeros(n, n);
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        matrix.set(i, i, 1.0);
        for j in (i + 1)..n {
            let v = jaccard(&sets[i], &sets[j]);
            matrix.set(i, j, v);
            matrix.set(j, i, v);
            acc += v;
            pairs += 1;
        }
    }
    Ok(OverlapReport {
        instance_ids: records.iter().map(|r| r.instance_id.clone()).collect(),
        jaccard: matrix,
        mean: acc / pairs as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramRow {
    pub epoch: usize,
    pub layer: usize,
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: u64,
}

/// Flattens per-epoch score histograms into rows suitable for plotting.
pub fn score_histogram_series(reports: &[EpochReport]) -> Result<Vec<HistogramRow>> {
    if reports.is_empty() {
        return Err(Error::Argument("no epoch reports".into()));
    }
    let bins = crate::train::HIST_BINS;
    let width = 1.0 / bins as f64;
    let mut rows = Vec::with_capacity(reports.len() * bins * 2);
    for r in reports {
        for (layer, hist) in [(1usize, &r.hist_layer1), (2usize, &r.hist_layer2)] {
            for (b, &count) in hist.iter().enumerate() {
                rows.push(HistogramRow {
                    epoch: r.epoch,
                    layer,
                    bin_low: b as f64 * width,
                    bin_high: (b + 1) as f64 * width,
                    count,
                });
            }
        }
    }
    Ok(rows)
}

/// Optional node_id -> name map ("id,name" per line, header allowed).
pub fn read_label_map(path: &Path) -> Result<std::collections::BTreeMap<usize, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = std::collections::BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((id, name)) = line.split_once(',') else {
            return Err(Error::io(path, format!("line {}: expected id,name", lineno + 1)));
        };
        let Ok(id) = id.trim().parse::<usize>() else {
            if lineno == 0 {
                continue; // header row
            }
            return Err(Error::io(path, format!("line {}: bad node id {id:?}", lineno + 1)));
        };
        map.insert(id, name.trim().to_string());
    }
    Ok(map)
}

pub fn write_salient_csv(
    path: &Path,
    nodes: &[SalientNode],
    label_map: Option<&std::collections::BTreeMap<usize, String>>,
) -> Result<()> {
    let mut w = csv_writer(path)?;
    let header = if label_map.is_some() {
        "node_id,mean_score,rank,name"
    } else {
        "node_id,mean_score,rank"
    };
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for n in nodes {
        match label_map {
            Some(map) => {
                let name = map.get(&n.node_id).map(String::as_str).unwrap_or("");
                writeln!(w, "{},{},{},{}", n.node_id, n.mean_score, n.rank, name)
            }
            None => writeln!(w, "{},{},{}", n.node_id, n.mean_score, n.rank),
        }
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_overlap_csv(path: &Path, report: &OverlapReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    writeln!(w, "instance_i,instance_j,jaccard").map_err(|e| Error::io(path, e))?;
    let n = report.instance_ids.len();
    for i in 0..n {
        for j in (i + 1)..n {
            writeln!(
                w,
                "{},{},{}",
                report.instance_ids[i],
                report.instance_ids[j],
                report.jaccard.get(i, j)
            )
            .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_histogram_csv(path: &Path, rows: &[HistogramRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    writeln!(w, "epoch,layer,bin_low,bin_high,count").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.epoch, r.layer, r.bin_low, r.bin_high, r.count)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, label: usize, scores: Vec<f64>, k1: Vec<usize>, k2: Vec<usize>) -> ScoreRecord {
        ScoreRecord {
            instance_id: id.to_string(),
            subject_id: id.split('_').next().unwrap_or(id).to_string(),
            label,
            layer1_scores: scores,
            layer1_kept: k1,
            layer2_kept: k2,
        }
    }

    #[test]
    fn salient_single_record_follows_its_order() {
        let r = record("a_0", 1, vec![0.1, 0.9, 0.5], vec![1, 2], vec![1]);
        let ranked = salient_nodes(&[r], 1, 3).unwrap();
        let ids: Vec<usize> = ranked.iter().map(|n| n.node_id).collect();
        assert_eq!(ids, vec![1, 2, 0]);
        assert_eq!(ranked[0].rank, 1);
    }

    #[test]
    fn salient_ties_break_by_node_id() {
        let r1 = record("a_0", 0, vec![0.8, 0.2], vec![0], vec![0]);
        let r2 = record("b_0", 0, vec![0.2, 0.8], vec![1], vec![1]);
        let ranked = salient_nodes(&[r1, r2], 0, 2).unwrap();
        assert_eq!(ranked[0].node_id, 0);
        assert_eq!(ranked[0].mean_score, ranked[1].mean_score);
    }

    #[test]
    fn salient_missing_class_errors() {
        let r = record("a_0", 0, vec![0.5], vec![0], vec![0]);
        assert!(salient_nodes(&[r], 1, 1).is_err());
    }

    #[test]
    fn overlap_hand_values() {
        let identical = vec![
            record("a", 0, vec![0.5; 4], vec![0, 1], vec![0]),
            record("b", 0, vec![0.5; 4], vec![1, 0], vec![0]),
        ];
        let rep = overlap(&identical, OverlapLevel::Layer1).unwrap();
        assert_eq!(rep.mean, 1.0);

        let disjoint = vec![
            record("a", 0, vec![0.5; 4], vec![0, 1], vec![0]),
            record("b", 0, vec![0.5; 4], vec![2, 3], vec![2]),
        ];
        let rep = overlap(&disjoint, OverlapLevel::Layer1).unwrap();
        assert_eq!(rep.mean, 0.0);

        let partial = vec![
            record("a", 0, vec![0.5; 31], (0..21).collect(), vec![]),
            record("b", 0, vec![0.5; 31], (10..31).collect(), vec![]),
        ];
        let rep = overlap(&partial, OverlapLevel::Layer1).unwrap();
        assert!((rep.mean - 11.0 / 31.0).abs() < 1e-12);
    }

    #[test]
    fn overlap_needs_two_records() {
        let r = record("a", 0, vec![0.5], vec![0], vec![0]);
        assert!(overlap(&[r], OverlapLevel::Layer2).is_err());
    }

    #[test]
    fn histogram_series_shape_and_conservation() {
        let report = EpochReport {
            epoch: 0,
            lr: 0.001,
            ce: 0.7,
            dist: [0.0, 0.0],
            glc: 0.0,
            train_accuracy: 0.5,
            val_accuracy: None,
            layer1_kept_mean: 0.5,
            layer1_dropped_mean: 0.5,
            layer2_kept_mean: 0.5,
            layer2_dropped_mean: 0.5,
            hist_layer1: {
                let mut h = vec![0; 20];
                h[9] = 6;
                h[10] = 6;
                h
            },
            hist_layer2: vec![1; 20],
        };
        let rows = score_histogram_series(&[report]).unwrap();
        assert_eq!(rows.len(), 40);
        let layer1_total: u64 = rows.iter().filter(|r| r.layer == 1).map(|r| r.count).sum();
        assert_eq!(layer1_total, 12);
        // uniform 0.5 scores land in the bins around 0.5
        let central: u64 = rows
            .iter()
            .filter(|r| r.layer == 1 && r.bin_low >= 0.449 && r.bin_high <= 0.551)
            .map(|r| r.count)
            .sum();
        assert_eq!(central, 12);
    }

    #[test]
    fn csv_writers_produce_parseable_output() {
        let dir = tempfile::tempdir().unwrap();
        let nodes = vec![SalientNode {
            node_id: 3,
            mean_score: 0.75,
            rank: 1,
        }];
        let p = dir.path().join("salient.csv");
        write_salient_csv(&p, &nodes, None).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("node_id,mean_score,rank\n3,0.75,1"));

        let map_path = dir.path().join("names.csv");
        std::fs::write(&map_path, "node_id,name\n3,region-three\n").unwrap();
        let map = read_label_map(&map_path).unwrap();
        assert_eq!(map.get(&3).unwrap(), "region-three");
        write_salient_csv(&p, &nodes, Some(&map)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("region-three"));
    }
}
