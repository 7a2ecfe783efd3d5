//! Datasets, semi-paired splits, synthetic data, and the dataset
//! directory format.
//!
//! A [`MultimodalDataset`] holds two feature matrices describing the
//! same objects (row `i` of `X1` and row `i` of `X2` are the same
//! object) plus optional multi-hot evaluation labels. A
//! [`SemiPairedSplit`] destroys part of that correspondence for
//! training: a chosen fraction of objects stays paired, the rest keep
//! exactly one modality, and the unpaired portion of `X2` is shuffled
//! so the discarded correspondence cannot leak.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DmhError, Result};
use crate::Mat;

/// Two feature matrices over the same objects plus optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    /// n × d1 features of modality 1.
    pub x1: Mat,
    /// n × d2 features of modality 2.
    pub x2: Mat,
    /// n × L multi-hot labels (0/1), evaluation only.
    pub labels: Option<Array2<u8>>,
}

impl MultimodalDataset {
    pub fn new(x1: Mat, x2: Mat, labels: Option<Array2<u8>>) -> Result<Self> {
        let ds = MultimodalDataset { x1, x2, labels };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.x1.nrows()
    }

    pub fn d1(&self) -> usize {
        self.x1.ncols()
    }

    pub fn d2(&self) -> usize {
        self.x2.ncols()
    }

    pub fn label_dim(&self) -> usize {
        self.labels.as_ref().map_or(0, |l| l.ncols())
    }

    pub fn validate(&self) -> Result<()> {
        if self.x1.nrows() != self.x2.nrows() {
            return Err(DmhError::shape(
                format!("{} rows", self.x1.nrows()),
                format!("{} rows", self.x2.nrows()),
                "X1 and X2 must describe the same objects",
            ));
        }
        for (name, m) in [("X1", &self.x1), ("X2", &self.x2)] {
            if !m.iter().all(|v| v.is_finite()) {
                return Err(DmhError::Data(format!("{name} contains non-finite values")));
            }
        }
        if let Some(l) = &self.labels {
            if l.nrows() != self.x1.nrows() {
                return Err(DmhError::shape(
                    format!("{} rows", self.x1.nrows()),
                    format!("{} rows", l.nrows()),
                    "labels must align with features",
                ));
            }
            if !l.iter().all(|&v| v <= 1) {
                return Err(DmhError::Data("labels must be 0/1".into()));
            }
        }
        Ok(())
    }

    /// Dataset restricted to `idx` (row order follows `idx`).
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let n = self.n();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(DmhError::Data(format!("subset index {bad} out of range (n={n})")));
        }
        Ok(MultimodalDataset {
            x1: self.x1.select(Axis(0), idx),
            x2: self.x2.select(Axis(0), idx),
            labels: self.labels.as_ref().map(|l| l.select(Axis(0), idx)),
        })
    }
}

/// Configuration of the synthetic generator: clustered latent points
/// projected into two feature spaces.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticConfig {
    pub n_total: usize,
    pub d_latent: usize,
    pub d1: usize,
    pub d2: usize,
    pub n_clusters: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_total: 1200,
            d_latent: 8,
            d1: 64,
            d2: 64,
            n_clusters: 4,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_total == 0 {
            return Err(DmhError::Config("n_total must be positive".into()));
        }
        if self.d_latent == 0 || self.d1 == 0 || self.d2 == 0 {
            return Err(DmhError::Config("dimensions must be positive".into()));
        }
        if self.d_latent > self.d1.min(self.d2) {
            return Err(DmhError::Config(format!(
                "d_latent={} must be <= min(d1={}, d2={})",
                self.d_latent, self.d1, self.d2
            )));
        }
        if self.n_clusters < 2 {
            return Err(DmhError::Config("n_clusters must be >= 2".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(DmhError::Config("noise_sigma must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Spread of cluster centers in latent space (within-cluster spread is 1).
const CENTER_SIGMA: f64 = 2.0;

/// Ground truth retained by the generator so tests can audit pairing
/// and complementation against the latent points.
#[derive(Debug, Clone)]
pub struct GeneratorAudit {
    /// n × d_latent latent points (one per object).
    pub latent: Mat,
    /// Cluster id per object.
    pub cluster: Vec<usize>,
    /// d_latent × d1 projection.
    pub p1: Mat,
    /// d_latent × d2 projection.
    pub p2: Mat,
}

/// Round every entry through 32-bit precision so the on-disk format
/// (32-bit floats) round-trips exactly.
pub fn quantize_f32(m: &mut Mat) {
    m.mapv_inplace(|x| x as f32 as f64);
}

/// Synthetic semi-paired benchmark data: `n_total` latent points from
/// `n_clusters` Gaussian clusters, projected by two fixed random maps
/// into the modality feature spaces, plus isotropic feature noise.
/// Labels are one-hot cluster ids. Cluster assignment is stratified
/// (`i mod n_clusters`), so counts per cluster differ by at most one.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<MultimodalDataset> {
    generate_synthetic_with_audit(config).map(|(ds, _)| ds)
}

/// As [`generate_synthetic`], additionally returning the latent ground
/// truth for auditing.
pub fn generate_synthetic_with_audit(config: &SyntheticConfig) -> Result<(MultimodalDataset, GeneratorAudit)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    // Draw order is part of the format: centers, P1, P2, latents, noise1, noise2.
    let centers = crate::linalg::random_gaussian(&mut rng, config.n_clusters, config.d_latent, CENTER_SIGMA);
    let proj_sigma = (config.d_latent as f64).sqrt().recip();
    let p1 = crate::linalg::random_gaussian(&mut rng, config.d_latent, config.d1, proj_sigma);
    let p2 = crate::linalg::random_gaussian(&mut rng, config.d_latent, config.d2, proj_sigma);

    let cluster: Vec<usize> = (0..config.n_total).map(|i| i % config.n_clusters).collect();
    let mut latent = Array2::<f64>::zeros((config.n_total, config.d_latent));
    for (i, mut row) in latent.outer_iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = centers[[cluster[i], j]] + std_normal.sample(&mut rng);
        }
    }

    let mut make_modality = |p: &Mat| -> Mat {
        let mut x = latent.dot(p);
        if config.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, config.noise_sigma).unwrap();
            for v in x.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        quantize_f32(&mut x);
        x
    };
    let x1 = make_modality(&p1);
    let x2 = make_modality(&p2);

    let mut labels = Array2::<u8>::zeros((config.n_total, config.n_clusters));
    for (i, &c) in cluster.iter().enumerate() {
        labels[[i, c]] = 1;
    }

    let ds = MultimodalDataset::new(x1, x2, Some(labels))?;
    Ok((ds, GeneratorAudit { latent, cluster, p1, p2 }))
}

/// Partition of the training objects into paired / modality-1-only /
/// modality-2-only, with the audit permutation of the shuffled `X2`
/// portion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemiPairedSplit {
    /// Objects observed in both modalities (sorted).
    pub paired: Vec<usize>,
    /// Objects observed only in modality 1 (sorted).
    pub only1: Vec<usize>,
    /// Objects observed only in modality 2 (sorted).
    pub only2: Vec<usize>,
    /// `x2_source[i]` = original dataset row whose `X2` features occupy
    /// object slot `i` after the unpaired shuffle; identity on paired
    /// slots.
    pub x2_source: Vec<usize>,
}

impl SemiPairedSplit {
    pub fn n(&self) -> usize {
        self.x2_source.len()
    }

    pub fn n_m(&self) -> usize {
        self.paired.len()
    }

    pub fn n_1(&self) -> usize {
        self.only1.len()
    }

    pub fn n_2(&self) -> usize {
        self.only2.len()
    }

    /// Objects with a modality-1 description (paired ∪ only1, sorted).
    pub fn observed1(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.paired.iter().chain(&self.only1).cloned().collect();
        v.sort_unstable();
        v
    }

    /// Objects with a modality-2 description (paired ∪ only2, sorted).
    pub fn observed2(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.paired.iter().chain(&self.only2).cloned().collect();
        v.sort_unstable();
        v
    }

    /// Per-object membership flags `(has_modality1, has_modality2)`.
    pub fn observed_flags(&self) -> Vec<(bool, bool)> {
        let mut flags = vec![(false, false); self.n()];
        for &i in &self.paired {
            flags[i] = (true, true);
        }
        for &i in &self.only1 {
            flags[i].0 = true;
        }
        for &i in &self.only2 {
            flags[i].1 = true;
        }
        flags
    }

    /// `X2` after the correspondence-destroying shuffle: row `i` holds
    /// the original row `x2_source[i]`.
    pub fn shuffled_x2(&self, x2: &Mat) -> Result<Mat> {
        if x2.nrows() != self.n() {
            return Err(DmhError::shape(
                format!("{} rows", self.n()),
                format!("{} rows", x2.nrows()),
                "shuffled_x2 input",
            ));
        }
        Ok(x2.select(Axis(0), &self.x2_source))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let mut seen = vec![0u8; n];
        for part in [&self.paired, &self.only1, &self.only2] {
            for &i in part {
                if i >= n {
                    return Err(DmhError::Data(format!("split index {i} out of range (n={n})")));
                }
                seen[i] += 1;
            }
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(DmhError::Data("paired/only1/only2 must partition 0..n".into()));
        }
        let mut perm_seen = vec![false; n];
        for &j in &self.x2_source {
            if j >= n || perm_seen[j] {
                return Err(DmhError::Data("x2_source is not a permutation".into()));
            }
            perm_seen[j] = true;
        }
        for &i in &self.paired {
            if self.x2_source[i] != i {
                return Err(DmhError::Data("x2_source must be identity on paired slots".into()));
            }
        }
        Ok(())
    }
}

/// Semi-pair a dataset: keep `floor(pairing_ratio · n)` objects fully
/// paired, split the remainder between the two single-modality groups
/// (`only1_fraction` of it to modality 1; odd remainders lean to
/// modality 1 at 0.5), and shuffle the unpaired portion of `X2`.
/// `k` is the neighbor count the paired pool must support: the split
/// is rejected unless `n_m ≥ k + 1`.
pub fn make_semi_paired_with_fraction(
    dataset: &MultimodalDataset,
    pairing_ratio: f64,
    k: usize,
    only1_fraction: f64,
    seed: u64,
) -> Result<SemiPairedSplit> {
    if !(0.0..=1.0).contains(&pairing_ratio) {
        return Err(DmhError::Config(format!("pairing_ratio must be in [0,1], got {pairing_ratio}")));
    }
    if !(0.0..=1.0).contains(&only1_fraction) {
        return Err(DmhError::Config(format!("only1_fraction must be in [0,1], got {only1_fraction}")));
    }
    let n = dataset.n();
    let n_m = (pairing_ratio * n as f64).floor() as usize;
    if n_m < k + 1 {
        return Err(DmhError::Config(format!(
            "paired pool too small: n_m={n_m} but k-NN over the paired set needs n_m >= {} (k={k})",
            k + 1
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let u = n - n_m;
    let n_2 = ((u as f64) * (1.0 - only1_fraction)).floor() as usize;
    let n_1 = u - n_2;

    let mut paired = order[..n_m].to_vec();
    let mut only1 = order[n_m..n_m + n_1].to_vec();
    let mut only2 = order[n_m + n_1..].to_vec();
    paired.sort_unstable();
    only1.sort_unstable();
    only2.sort_unstable();

    // Destroy correspondence: permute X2 rows within the unpaired slots.
    let mut unpaired: Vec<usize> = only1.iter().chain(&only2).cloned().collect();
    unpaired.sort_unstable();
    let mut shuffled = unpaired.clone();
    shuffled.shuffle(&mut rng);
    let mut x2_source: Vec<usize> = (0..n).collect();
    for (slot, src) in unpaired.iter().zip(&shuffled) {
        x2_source[*slot] = *src;
    }

    let split = SemiPairedSplit { paired, only1, only2, x2_source };
    split.validate()?;
    Ok(split)
}

/// [`make_semi_paired_with_fraction`] with the even 50/50 unpaired split.
pub fn make_semi_paired(dataset: &MultimodalDataset, pairing_ratio: f64, k: usize, seed: u64) -> Result<SemiPairedSplit> {
    make_semi_paired_with_fraction(dataset, pairing_ratio, k, 0.5, seed)
}

/// Disjoint random query/retrieval split; both halves keep labels.
pub fn split_query_retrieval(
    dataset: &MultimodalDataset,
    n_query: usize,
    seed: u64,
) -> Result<(MultimodalDataset, MultimodalDataset)> {
    let n = dataset.n();
    if n_query == 0 || n_query >= n {
        return Err(DmhError::Config(format!("n_query must satisfy 0 < n_query < {n}, got {n_query}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut q = order[..n_query].to_vec();
    let mut r = order[n_query..].to_vec();
    q.sort_unstable();
    r.sort_unstable();
    Ok((dataset.subset(&q)?, dataset.subset(&r)?))
}

// ---------------------------------------------------------------------------
// Dataset directory format: meta.json + X1.f32 + X2.f32 [+ labels.u8]
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    n_total: usize,
    d1: usize,
    d2: usize,
    label_dim: usize,
    endianness: String,
}

fn write_f32_matrix(path: &Path, m: &Mat) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for &v in m.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32_matrix(path: &Path, rows: usize, cols: usize, field: &str) -> Result<Mat> {
    let bytes = fs::read(path)?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(DmhError::Data(format!(
            "{field}: expected {expected} bytes for {rows}x{cols} float32, found {}",
            bytes.len()
        )));
    }
    let mut m = Array2::<f64>::zeros((rows, cols));
    for (slot, chunk) in m.iter_mut().zip(bytes.chunks_exact(4)) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(DmhError::Data(format!("{field}: non-finite value in payload")));
        }
        *slot = v as f64;
    }
    Ok(m)
}

/// Write `meta.json`, `X1.f32`, `X2.f32`, and `labels.u8` (when labels
/// are present) into `dir`, creating it if needed. Payloads are
/// row-major little-endian 32-bit floats / 0-1 bytes.
pub fn save_dataset(dataset: &MultimodalDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        n_total: dataset.n(),
        d1: dataset.d1(),
        d2: dataset.d2(),
        label_dim: dataset.label_dim(),
        endianness: "little".into(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    write_f32_matrix(&dir.join("X1.f32"), &dataset.x1)?;
    write_f32_matrix(&dir.join("X2.f32"), &dataset.x2)?;
    if let Some(l) = &dataset.labels {
        let bytes: Vec<u8> = l.iter().cloned().collect();
        fs::write(dir.join("labels.u8"), bytes)?;
    }
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`], validating
/// byte counts against the manifest.
pub fn load_dataset(dir: &Path) -> Result<MultimodalDataset> {
    let meta_path = dir.join("meta.json");
    let mut meta_raw = String::new();
    fs::File::open(&meta_path)
        .map_err(|e| DmhError::Data(format!("cannot open {}: {e}", meta_path.display())))?
        .read_to_string(&mut meta_raw)?;
    let meta: DatasetMeta =
        serde_json::from_str(&meta_raw).map_err(|e| DmhError::Data(format!("meta.json: {e}")))?;
    if meta.endianness != "little" {
        return Err(DmhError::Data(format!(
            "meta.json: unsupported endianness marker {:?}",
            meta.endianness
        )));
    }
    let x1 = read_f32_matrix(&dir.join("X1.f32"), meta.n_total, meta.d1, "X1.f32")?;
    let x2 = read_f32_matrix(&dir.join("X2.f32"), meta.n_total, meta.d2, "X2.f32")?;
    let labels_path = dir.join("labels.u8");
    let labels = if meta.label_dim > 0 {
        let bytes = fs::read(&labels_path)
            .map_err(|e| DmhError::Data(format!("labels.u8 (label_dim={}): {e}", meta.label_dim)))?;
        let expected = meta.n_total * meta.label_dim;
        if bytes.len() != expected {
            return Err(DmhError::Data(format!(
                "labels.u8: expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        if bytes.iter().any(|&b| b > 1) {
            return Err(DmhError::Data("labels.u8: values must be 0 or 1".into()));
        }
        Some(Array2::from_shape_vec((meta.n_total, meta.label_dim), bytes).expect("size checked"))
    } else {
        if labels_path.exists() {
            return Err(DmhError::Data("labels.u8 present but meta.json says label_dim=0".into()));
        }
        None
    };
    MultimodalDataset::new(x1, x2, labels)
}

// ---------------------------------------------------------------------------
// Relevance
// ---------------------------------------------------------------------------

/// Ground-truth relevance between a query set and a database: two items
/// are relevant iff their multi-hot label vectors share at least one
/// active bit.
#[derive(Debug, Clone)]
pub struct RelevanceOracle {
    query_bits: Vec<Vec<u64>>,
    db_bits: Vec<Vec<u64>>,
}

fn pack_label_rows(labels: &Array2<u8>) -> Vec<Vec<u64>> {
    let words = labels.ncols().div_ceil(64);
    labels
        .outer_iter()
        .map(|row| {
            let mut w = vec![0u64; words];
            for (j, &b) in row.iter().enumerate() {
                if b != 0 {
                    w[j / 64] |= 1 << (j % 64);
                }
            }
            w
        })
        .collect()
}

impl RelevanceOracle {
    pub fn new(query_labels: &Array2<u8>, db_labels: &Array2<u8>) -> Result<Self> {
        if query_labels.ncols() != db_labels.ncols() {
            return Err(DmhError::shape(
                format!("{} label columns", query_labels.ncols()),
                format!("{} label columns", db_labels.ncols()),
                "relevance oracle",
            ));
        }
        if query_labels.iter().chain(db_labels.iter()).any(|&b| b > 1) {
            return Err(DmhError::Data("labels must be 0/1".into()));
        }
        Ok(RelevanceOracle {
            query_bits: pack_label_rows(query_labels),
            db_bits: pack_label_rows(db_labels),
        })
    }

    pub fn n_queries(&self) -> usize {
        self.query_bits.len()
    }

    pub fn n_db(&self) -> usize {
        self.db_bits.len()
    }

    pub fn relevant(&self, query: usize, db: usize) -> bool {
        self.query_bits[query]
            .iter()
            .zip(&self.db_bits[db])
            .any(|(a, b)| a & b != 0)
    }

    /// Number of database items relevant to `query`.
    pub fn relevant_count(&self, query: usize) -> usize {
        (0..self.n_db()).filter(|&d| self.relevant(query, d)).count()
    }
}

/// One-hot labels from a cluster-id vector (test/benchmark helper).
pub fn one_hot(cluster: &[usize], n_clusters: usize) -> Array2<u8> {
    let mut l = Array2::<u8>::zeros((cluster.len(), n_clusters));
    for (i, &c) in cluster.iter().enumerate() {
        l[[i, c]] = 1;
    }
    l
}

/// Euclidean distance between two rows (helper shared by neighbor
/// selection and tests).
pub fn row_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_config() -> SyntheticConfig {
        SyntheticConfig {
            n_total: 40,
            d_latent: 3,
            d1: 6,
            d2: 5,
            n_clusters: 4,
            noise_sigma: 0.1,
            seed: 42,
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = small_config();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_rows_are_linear_images_of_latents() {
        let cfg = SyntheticConfig { noise_sigma: 0.0, ..small_config() };
        let (ds, audit) = generate_synthetic_with_audit(&cfg).unwrap();
        let mut expect1 = audit.latent.dot(&audit.p1);
        let mut expect2 = audit.latent.dot(&audit.p2);
        quantize_f32(&mut expect1);
        quantize_f32(&mut expect2);
        assert_eq!(ds.x1, expect1);
        assert_eq!(ds.x2, expect2);
    }

    #[test]
    fn stratified_cluster_counts_are_even() {
        let cfg = SyntheticConfig { n_total: 400, ..small_config() };
        let ds = generate_synthetic(&cfg).unwrap();
        let labels = ds.labels.unwrap();
        for c in 0..4 {
            let count: u32 = labels.column(c).iter().map(|&b| b as u32).sum();
            assert_eq!(count, 100);
        }
    }

    #[test]
    fn generator_rejects_bad_config() {
        let cfg = SyntheticConfig { d_latent: 10, d1: 6, ..small_config() };
        assert!(matches!(generate_synthetic(&cfg), Err(DmhError::Config(_))));
        let cfg = SyntheticConfig { n_clusters: 1, ..small_config() };
        assert!(matches!(generate_synthetic(&cfg), Err(DmhError::Config(_))));
    }

    #[test]
    fn fully_paired_split_has_no_singles() {
        let ds = generate_synthetic(&small_config()).unwrap();
        let split = make_semi_paired(&ds, 1.0, 3, 7).unwrap();
        assert_eq!(split.n_m(), 40);
        assert_eq!(split.n_1(), 0);
        assert_eq!(split.n_2(), 0);
        assert_eq!(split.x2_source, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let cfg = SyntheticConfig { n_total: 1000, ..small_config() };
        let ds = generate_synthetic(&cfg).unwrap();
        let split = make_semi_paired(&ds, 0.5, 3, 1).unwrap();
        assert_eq!((split.n_m(), split.n_1(), split.n_2()), (500, 250, 250));

        // floor() exactly, odd remainder leaning to only1
        let cfg = SyntheticConfig { n_total: 10, ..small_config() };
        let ds = generate_synthetic(&cfg).unwrap();
        let split = make_semi_paired(&ds, 0.33, 1, 1).unwrap();
        assert_eq!(split.n_m(), 3);
        assert_eq!(split.n_1(), 4);
        assert_eq!(split.n_2(), 3);
    }

    #[test]
    fn only1_fraction_knob_controls_unpaired_composition() {
        let ds = generate_synthetic(&small_config()).unwrap();
        let split = make_semi_paired_with_fraction(&ds, 0.5, 3, 1.0, 7).unwrap();
        assert_eq!(split.n_1(), 20);
        assert_eq!(split.n_2(), 0);
        let split = make_semi_paired_with_fraction(&ds, 0.5, 3, 0.0, 7).unwrap();
        assert_eq!(split.n_1(), 0);
        assert_eq!(split.n_2(), 20);
    }

    #[test]
    fn split_rejects_tiny_paired_pool() {
        let ds = generate_synthetic(&small_config()).unwrap();
        let err = make_semi_paired(&ds, 0.05, 3, 7).unwrap_err();
        match err {
            DmhError::Config(msg) => assert!(msg.contains("4"), "message should name the minimum: {msg}"),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn shuffle_preserves_x2_multiset_and_paired_rows() {
        let ds = generate_synthetic(&small_config()).unwrap();
        let split = make_semi_paired(&ds, 0.5, 3, 9).unwrap();
        let shuffled = split.shuffled_x2(&ds.x2).unwrap();
        for &i in &split.paired {
            assert_eq!(shuffled.row(i), ds.x2.row(i));
        }
        let sort_rows = |m: &Mat| {
            let mut rows: Vec<Vec<u64>> =
                m.outer_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
            rows.sort();
            rows
        };
        assert_eq!(sort_rows(&shuffled), sort_rows(&ds.x2));
    }

    #[test]
    fn paired_rows_keep_latent_correspondence_after_shuffle() {
        let cfg = SyntheticConfig { noise_sigma: 0.0, n_total: 60, ..small_config() };
        let (ds, audit) = generate_synthetic_with_audit(&cfg).unwrap();
        let split = make_semi_paired(&ds, 0.9, 3, 3).unwrap();
        let shuffled = split.shuffled_x2(&ds.x2).unwrap();
        let mut truth = audit.latent.dot(&audit.p2);
        quantize_f32(&mut truth);
        // Every slot i holds the projection of latent row x2_source[i]:
        // identity on paired slots, the audit permutation elsewhere.
        for i in 0..ds.n() {
            assert_eq!(shuffled.row(i), truth.row(split.x2_source[i]));
        }
        let moved = split
            .only1
            .iter()
            .chain(&split.only2)
            .filter(|&&i| split.x2_source[i] != i)
            .count();
        assert!(moved > 0, "shuffle should move at least one unpaired row");
    }

    #[test]
    fn query_retrieval_split_is_disjoint_and_sized() {
        let cfg = SyntheticConfig { n_total: 50, ..small_config() };
        let ds = generate_synthetic(&cfg).unwrap();
        let (q, r) = split_query_retrieval(&ds, 10, 5).unwrap();
        assert_eq!(q.n(), 10);
        assert_eq!(r.n(), 40);
        assert!(q.labels.is_some() && r.labels.is_some());
        // Disjoint: every query row differs from every retrieval row
        // (features are continuous, duplicates have probability zero).
        for qr in q.x1.outer_iter() {
            assert!(r.x1.outer_iter().all(|rr| rr != qr));
        }
        let (q2, r2) = split_query_retrieval(&ds, 10, 5).unwrap();
        assert_eq!(q, q2);
        assert_eq!(r, r2);

        assert!(split_query_retrieval(&ds, 0, 5).is_err());
        assert!(split_query_retrieval(&ds, 50, 5).is_err());
        let (q3, r3) = split_query_retrieval(&ds, 49, 5).unwrap();
        assert_eq!((q3.n(), r3.n()), (49, 1));
    }

    #[test]
    fn dataset_roundtrip_is_exact() {
        let ds = generate_synthetic(&small_config()).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, loaded);
        // Payload bytes are stable under re-save.
        let x1_bytes = fs::read(dir.path().join("X1.f32")).unwrap();
        let dir2 = tempdir().unwrap();
        save_dataset(&loaded, dir2.path()).unwrap();
        assert_eq!(x1_bytes, fs::read(dir2.path().join("X1.f32")).unwrap());
    }

    #[test]
    fn roundtrip_without_labels_loads_none() {
        let mut ds = generate_synthetic(&small_config()).unwrap();
        ds.labels = None;
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert!(!dir.path().join("labels.u8").exists());
        let loaded = load_dataset(dir.path()).unwrap();
        assert!(loaded.labels.is_none());
    }

    #[test]
    fn loader_rejects_payload_size_mismatch() {
        let ds = generate_synthetic(&small_config()).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("X1.f32");
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, DmhError::Data(ref m) if m.contains("X1.f32")), "{err}");
    }

    #[test]
    fn loader_rejects_non_finite_payload() {
        let ds = generate_synthetic(&small_config()).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("X2.f32");
        let mut bytes = fs::read(&path).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, DmhError::Data(ref m) if m.contains("X2.f32")), "{err}");
    }

    #[test]
    fn loader_rejects_missing_labels_promised_by_meta() {
        let ds = generate_synthetic(&small_config()).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("labels.u8")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn relevance_is_shared_active_bit() {
        let q = ndarray::array![[1u8, 0, 1], [0, 1, 0]];
        let d = ndarray::array![[1u8, 0, 0], [0, 0, 1], [0, 1, 0], [0, 0, 0]];
        let oracle = RelevanceOracle::new(&q, &d).unwrap();
        assert!(oracle.relevant(0, 0));
        assert!(oracle.relevant(0, 1));
        assert!(!oracle.relevant(0, 2));
        assert!(!oracle.relevant(0, 3));
        assert!(oracle.relevant(1, 2));
        assert_eq!(oracle.relevant_count(0), 2);
        assert_eq!(oracle.relevant_count(1), 1);
    }

    #[test]
    fn subset_preserves_row_content() {
        let ds = generate_synthetic(&small_config()).unwrap();
        let sub = ds.subset(&[3, 0, 7]).unwrap();
        assert_eq!(sub.n(), 3);
        assert_eq!(sub.x1.row(0), ds.x1.row(3));
        assert_eq!(sub.x2.row(2), ds.x2.row(7));
        assert!(ds.subset(&[40]).is_err());
    }
}
