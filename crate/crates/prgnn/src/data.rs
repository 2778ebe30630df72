//! Synthetic cohorts with planted salient nodes, dataset persistence, and
//! subject-level cross-validation splits.
//!
//! Each subject gets a covariance Sigma = (A A^T + N I) / N drawn from a
//! seeded Gaussian A; class-1 subjects additionally get `effect_size` added
//! to every off-diagonal covariance entry inside the planted node set
//! (re-projected to SPD if needed). Every augmentation copy resamples
//! `n_timepoints` observations from N(0, Sigma) and recomputes the empirical
//! Pearson and ridge-regularized partial correlations, so copies of one
//! subject share structure but not noise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix2D;
use crate::error::{Error, Result};
use crate::graph::{build_graph, read_matrix_text, write_matrix_text, BrainGraph};

pub const DEFAULT_N_NODES: usize = 84;
pub const DEFAULT_TOP_FRAC: f64 = 0.1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortConfig {
    pub seed: u64,
    pub n_subjects_per_class: usize,
    pub n_nodes: usize,
    /// Node indices carrying the class-1 effect.
    pub planted_set: Vec<usize>,
    pub effect_size: f64,
    pub n_timepoints: usize,
    /// Independent resamples per subject.
    pub n_augment: usize,
    pub top_frac: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            seed: 0,
            n_subjects_per_class: 40,
            n_nodes: DEFAULT_N_NODES,
            planted_set: (0..10).collect(),
            effect_size: 1.5,
            n_timepoints: 150,
            n_augment: 10,
            top_frac: DEFAULT_TOP_FRAC,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 2 {
            return Err(Error::Config(format!("need at least 2 nodes, got {}", self.n_nodes)));
        }
        if self.n_subjects_per_class == 0 {
            return Err(Error::Config("need at least one subject per class".into()));
        }
        if self.n_timepoints < 4 {
            return Err(Error::Config(format!(
                "need at least 4 timepoints, got {}",
                self.n_timepoints
            )));
        }
        if self.n_augment == 0 {
            return Err(Error::Config("n_augment must be at least 1".into()));
        }
        if !(self.top_frac > 0.0 && self.top_frac < 1.0) {
            return Err(Error::Config(format!(
                "top_frac must lie in (0,1), got {}",
                self.top_frac
            )));
        }
        if !(self.effect_size >= 0.0 && self.effect_size.is_finite()) {
            return Err(Error::Config(format!(
                "effect_size must be finite and >= 0, got {}",
                self.effect_size
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &i in &self.planted_set {
            if i >= self.n_nodes {
                return Err(Error::Config(format!(
                    "planted node {i} out of range for {} nodes",
                    self.n_nodes
                )));
            }
            if !seen.insert(i) {
                return Err(Error::Config(format!("planted node {i} listed twice")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub label: usize,
    pub pearson: PathBuf,
    pub partial: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Provenance {
    External(String),
    Synthetic(CohortConfig),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_classes: usize,
    pub entries: Vec<ManifestEntry>,
    pub provenance: Provenance,
}

impl DatasetManifest {
    pub fn top_frac(&self) -> f64 {
        match &self.provenance {
            Provenance::Synthetic(cfg) => cfg.top_frac,
            Provenance::External(_) => DEFAULT_TOP_FRAC,
        }
    }

    /// Unique (subject, label) pairs in first-appearance order; errors if a
    /// subject carries two labels.
    pub fn subjects(&self) -> Result<Vec<(String, usize)>> {
        let mut order: Vec<(String, usize)> = Vec::new();
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &self.entries {
            match seen.get(e.subject_id.as_str()) {
                None => {
                    seen.insert(&e.subject_id, e.label);
                    order.push((e.subject_id.clone(), e.label));
                }
                Some(&label) if label != e.label => {
                    return Err(Error::Validation(format!(
                        "subject {} appears with labels {} and {}",
                        e.subject_id, label, e.label
                    )));
                }
                _ => {}
            }
        }
        Ok(order)
    }
}

fn standard_normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Subject covariance: Wishart-style base normalized to unit-scale
/// diagonal, plus the planted block for class 1, projected back to SPD by
/// growing the diagonal if the effect broke positive definiteness.
///
/// The Gaussian factor mixes a cohort-wide component with a subject
/// component in equal shares, the analogue of the large-scale organization
/// all subjects of a real cohort share; without it no globally consistent
/// node ordering exists for the pooling scores to converge on.
fn subject_covariance(
    rng: &mut ChaCha8Rng,
    shared: &DMatrix<f64>,
    cfg: &CohortConfig,
    label: usize,
) -> Result<(DMatrix<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let n = cfg.n_nodes;
    let own = standard_normal_matrix(rng, n, n);
    let a = shared * 0.85_f64.sqrt() + own * 0.15_f64.sqrt();
    let mut sigma = (&a * a.transpose() + DMatrix::identity(n, n) * n as f64) / n as f64;
    if label == 1 && cfg.effect_size > 0.0 {
        for &i in &cfg.planted_set {
            for &j in &cfg.planted_set {
                if i != j {
                    sigma[(i, j)] += cfg.effect_size;
                }
            }
        }
    }
    let mut delta = 1e-8 * (sigma.trace() / n as f64).max(1.0);
    for _ in 0..64 {
        if let Some(chol) = sigma.clone().cholesky() {
            return Ok((sigma, chol));
        }
        for i in 0..n {
            sigma[(i, i)] += delta;
        }
        delta *= 2.0;
    }
    Err(Error::Numeric(
        "subject covariance could not be projected to SPD".into(),
    ))
}

/// T x N observations from N(0, Sigma) via the Cholesky factor.
fn sample_observations(
    rng: &mut ChaCha8Rng,
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    t: usize,
    n: usize,
) -> DMatrix<f64> {
    let z = standard_normal_matrix(rng, t, n);
    z * chol.l().transpose()
}

/// Empirical Pearson correlation of the columns of x.
fn pearson_matrix(x: &DMatrix<f64>) -> Result<Matrix2D> {
    let (t, n) = x.shape();
    let cov = covariance(x);
    let mut out = Matrix2D::zeros(n, n);
    for i in 0..n {
        out.set(i, i, 1.0);
        for j in (i + 1)..n {
            let denom = (cov[(i, i)] * cov[(j, j)]).sqrt();
            let r = if denom > 0.0 { cov[(i, j)] / denom } else { 0.0 };
            out.set(i, j, r);
            out.set(j, i, r);
        }
    }
    let _ = t;
    out.check_finite()?;
    Ok(out)
}

fn covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (t, _) = x.shape();
    let means = x.row_mean();
    let centered = x - DMatrix::from_fn(t, x.ncols(), |_, c| means[c]);
    (centered.transpose() * &centered) / (t as f64 - 1.0)
}

/// Partial correlations from the ridge-regularized precision matrix:
/// rho_ij = -P_ij / sqrt(P_ii P_jj), ridge = 1e-3 trace / N.
fn partial_matrix(x: &DMatrix<f64>) -> Result<Matrix2D> {
    let n = x.ncols();
    let mut cov = covariance(x);
    let ridge = 1e-3 * cov.trace() / n as f64;
    for i in 0..n {
        cov[(i, i)] += ridge;
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Numeric("ridge-regularized covariance not SPD".into()))?;
    let prec = chol.inverse();
    let mut out = Matrix2D::zeros(n, n);
    for i in 0..n {
        out.set(i, i, 1.0);
        for j in (i + 1)..n {
            // average the two triangles; the inverse is symmetric up to
            // rounding
            let pij = 0.5 * (prec[(i, j)] + prec[(j, i)]);
            let rho = -pij / (prec[(i, i)] * prec[(j, j)]).sqrt();
            out.set(i, j, rho);
            out.set(j, i, rho);
        }
    }
    out.check_finite()?;
    Ok(out)
}

/// One generated instance, before or without persistence.
pub struct GeneratedInstance {
    pub subject_id: String,
    pub instance_id: String,
    pub label: usize,
    pub pearson: Matrix2D,
    pub partial: Matrix2D,
}

/// Generates the full cohort in memory, in a deterministic order
/// (class-0 subjects then class-1, augmentations inner). Each subject's
/// stream is seeded with `seed + subject_index`.
pub fn generate_instances(cfg: &CohortConfig) -> Result<Vec<GeneratedInstance>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let n_subjects = 2 * cfg.n_subjects_per_class;
    let mut shared_rng = crate::util::substream(cfg.seed, crate::util::Stream::SharedStructure);
    let shared = standard_normal_matrix(&mut shared_rng, cfg.n_nodes, cfg.n_nodes);
    for s in 0..n_subjects {
        let label = usize::from(s >= cfg.n_subjects_per_class);
        let subject_id = format!("s{s:03}");
        let mut rng = crate::util::substream(cfg.seed.wrapping_add(s as u64), crate::util::Stream::Data);
        let (_sigma, chol) = subject_covariance(&mut rng, &shared, cfg, label)?;
        for a in 0..cfg.n_augment {
            let x = sample_observations(&mut rng, &chol, cfg.n_timepoints, cfg.n_nodes);
            let pearson = pearson_matrix(&x)?;
            let partial = partial_matrix(&x)?;
            out.push(GeneratedInstance {
                subject_id: subject_id.clone(),
                instance_id: format!("{subject_id}_a{a:02}"),
                label,
                pearson,
                partial,
            });
        }
    }
    Ok(out)
}

/// Generates the cohort and persists it: matrices under
/// `out_dir/matrices/`, manifest at `out_dir/manifest.json`. Deterministic
/// for a fixed seed, byte for byte.
pub fn generate_cohort(cfg: &CohortConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let instances = generate_instances(cfg)?;
    let matrices = out_dir.join("matrices");
    std::fs::create_dir_all(&matrices).map_err(|e| Error::io(&matrices, e))?;
    let mut entries = Vec::with_capacity(instances.len());
    for inst in &instances {
        let pearson_rel = PathBuf::from("matrices").join(format!("{}_pearson.csv", inst.instance_id));
        let partial_rel = PathBuf::from("matrices").join(format!("{}_partial.csv", inst.instance_id));
        write_matrix_text(&inst.pearson, &out_dir.join(&pearson_rel))?;
        write_matrix_text(&inst.partial, &out_dir.join(&partial_rel))?;
        entries.push(ManifestEntry {
            subject_id: inst.subject_id.clone(),
            label: inst.label,
            pearson: pearson_rel,
            partial: partial_rel,
        });
    }
    let manifest = DatasetManifest {
        n_classes: 2,
        entries,
        provenance: Provenance::Synthetic(cfg.clone()),
    };
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::io(path, format!("serialize manifest: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::io(path, format!("parse manifest: {e}")))?;
    manifest.subjects()?;
    Ok(manifest)
}

fn instance_id_from(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("instance");
    stem.strip_suffix("_pearson").unwrap_or(stem).to_string()
}

/// Loads every instance of a manifest, building graphs with the manifest's
/// thresholding fraction. Paths resolve relative to the manifest location.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<BrainGraph>)> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let top_frac = manifest.top_frac();
    let mut graphs = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        if entry.label >= manifest.n_classes {
            return Err(Error::Validation(format!(
                "entry {} has label {} but manifest declares {} classes",
                entry.subject_id, entry.label, manifest.n_classes
            )));
        }
        let pearson = read_matrix_text(&base.join(&entry.pearson))?;
        let partial = read_matrix_text(&base.join(&entry.partial))?;
        graphs.push(build_graph(
            &pearson,
            &partial,
            top_frac,
            entry.label,
            &entry.subject_id,
            &instance_id_from(&entry.pearson),
        )?);
    }
    Ok((manifest, graphs))
}

/// Stratified subject-level folds: every subject lands in exactly one test
/// fold, shuffled per class by the split seed, so augmented copies never
/// straddle train and test.
pub fn split_by_subject(
    manifest: &DatasetManifest,
    k_folds: usize,
    seed: u64,
) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    split_subject_labels(&manifest.subjects()?, k_folds, seed)
}

pub(crate) fn split_subject_labels(
    subjects: &[(String, usize)],
    k_folds: usize,
    seed: u64,
) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    if k_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k_folds}")));
    }
    let mut per_class: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (id, label) in subjects {
        per_class.entry(*label).or_default().push(id.clone());
    }
    for (label, ids) in &per_class {
        if ids.len() < k_folds {
            return Err(Error::Config(format!(
                "class {label} has {} subjects, fewer than {k_folds} folds",
                ids.len()
            )));
        }
    }
    let mut rng = crate::util::substream(seed, crate::util::Stream::Shuffle);
    let mut fold_tests: Vec<Vec<String>> = vec![Vec::new(); k_folds];
    for ids in per_class.values() {
        let mut shuffled = ids.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng);
        for (i, id) in shuffled.into_iter().enumerate() {
            fold_tests[i % k_folds].push(id);
        }
    }
    let mut out = Vec::with_capacity(k_folds);
    for f in 0..k_folds {
        let test = fold_tests[f].clone();
        let train: Vec<String> = subjects
            .iter()
            .map(|(id, _)| id.clone())
            .filter(|id| !test.contains(id))
            .collect();
        out.push((train, test));
    }
    Ok(out)
}
