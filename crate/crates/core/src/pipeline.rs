//! End-to-end training: alternates the local-embedding completion, the
//! binary-embedding solver, and the encoder fitting, feeding the
//! encoders' feature-layer outputs back into the next round. Owns the
//! ablation variants and model persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::binary_embedding::{
    binarize, gbe_loss, run_gbe_from, similarity_from_embedding, CodeMatrices, GbeParams,
};
use crate::codes::CodeSet;
use crate::data::{quantize_f32, SemiPairedSplit};
use crate::derive_seed;
use crate::encoders::{encode, run_dam_from, DamParams, EncoderArch, EncoderParams, Layer};
use crate::error::{DmhError, Result};
use crate::linalg::symmetric_eigen_desc;
use crate::local_embedding::{run_cle_with_mode_from, CleParams, ComplementMode};
use crate::Mat;

/// Magic bytes of a model file (format version rides in byte 4).
pub const MODEL_MAGIC: [u8; 4] = *b"DMH\x01";

/// Outer rounds that run the code solver in its stochastic mode.
/// Later rounds switch to warm-started monotone full-batch
/// refinement: the stochastic kicks are what escapes the near-uniform
/// kernel plateau while the joint geometry is still organizing, but
/// they would keep relabeling borderline rows forever, whereas the
/// full-batch steps converge on the organized codes.
const GBE_STOCHASTIC_ROUNDS: usize = 3;
/// Iteration cap for the full-batch refinement rounds (each iteration
/// is an n×n objective evaluation; a warm iterate needs few).
const GBE_REFINE_ITERS: usize = 40;

/// Training-time ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// The full method.
    #[default]
    Full,
    /// Missing-modality rows complemented with zeros instead of
    /// neighborhood reconstructions.
    Zero,
    /// Binary codes from top-c principal components of the embedding
    /// instead of the divergence-matching solver.
    Pca,
    /// Features never refreshed by the encoders; every round consumes
    /// the initial features.
    Fix,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::Zero => "zero",
            Variant::Pca => "pca",
            Variant::Fix => "fix",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = DmhError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "zero" => Ok(Variant::Zero),
            "pca" => Ok(Variant::Pca),
            "fix" => Ok(Variant::Fix),
            other => Err(DmhError::Config(format!(
                "unknown variant '{other}' (expected full, zero, pca or fix)"
            ))),
        }
    }
}

/// Full training configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DmhConfig {
    pub cle: CleParams,
    pub gbe: GbeParams,
    pub dam: DamParams,
    /// Code length in bits.
    pub c: usize,
    /// Maximum outer alternation rounds.
    pub outer_iters: usize,
    /// Early stop once all three stage objectives change less than
    /// this (relative) between consecutive rounds.
    pub outer_tol: f64,
    pub variant: Variant,
    /// Master seed; every stage of every round gets a derived seed.
    pub seed: u64,
    /// Hidden widths of the modality-1 encoder.
    pub hidden_dims1: Vec<usize>,
    /// Hidden widths of the modality-2 encoder.
    pub hidden_dims2: Vec<usize>,
    /// Hidden layer whose activations refresh the features
    /// (default: last hidden layer).
    pub feature_layer: Option<usize>,
}

impl Default for DmhConfig {
    fn default() -> Self {
        DmhConfig {
            cle: CleParams::default(),
            // Full-batch descent on the code objective cannot leave the
            // near-uniform kernel plateau; the stochastic row-block mode
            // with a small quantization weight does, so training runs
            // use it by default.
            gbe: GbeParams {
                gamma: 1e-4,
                learning_rate: 150.0,
                max_iters: 2000,
                row_subsample: Some(128),
                ..GbeParams::default()
            },
            dam: DamParams::default(),
            c: 16,
            outer_iters: 5,
            outer_tol: 0.01,
            variant: Variant::Full,
            seed: 0,
            hidden_dims1: vec![1024, 512],
            hidden_dims2: vec![1024, 512],
            feature_layer: None,
        }
    }
}

impl DmhConfig {
    pub fn validate(&self) -> Result<()> {
        self.cle.validate()?;
        self.gbe.validate()?;
        self.dam.validate()?;
        if self.c == 0 {
            return Err(DmhError::Config("code length c must be positive".into()));
        }
        if self.outer_iters == 0 {
            return Err(DmhError::Config("outer_iters must be positive".into()));
        }
        if !(self.outer_tol.is_finite() && self.outer_tol >= 0.0) {
            return Err(DmhError::Config("outer_tol must be finite and nonnegative".into()));
        }
        for (name, dims) in [("hidden_dims1", &self.hidden_dims1), ("hidden_dims2", &self.hidden_dims2)] {
            if dims.is_empty() || dims.iter().any(|&h| h == 0) {
                return Err(DmhError::Config(format!("{name} must be nonempty positive widths")));
            }
            if let Some(fl) = self.feature_layer {
                if fl >= dims.len() {
                    return Err(DmhError::Config(format!(
                        "feature_layer {fl} out of range for {name} with {} layers",
                        dims.len()
                    )));
                }
            }
        }
        Ok(())
    }

    fn arch(&self, input_dim: usize, hidden: &[usize]) -> EncoderArch {
        EncoderArch {
            input_dim,
            hidden_dims: hidden.to_vec(),
            code_dim: self.c,
            feature_layer_index: self.feature_layer.unwrap_or(hidden.len() - 1),
        }
    }

    /// Check the embedding dimension against every feature space the
    /// solver will see: the raw inputs and the refreshed encoder
    /// features.
    fn validate_dims(&self, d1: usize, d2: usize) -> Result<()> {
        let arch1 = self.arch(d1, &self.hidden_dims1);
        let arch2 = self.arch(d2, &self.hidden_dims2);
        arch1.validate()?;
        arch2.validate()?;
        let mut min_dim = d1.min(d2);
        if self.variant != Variant::Fix {
            min_dim = min_dim.min(arch1.feature_dim()).min(arch2.feature_dim());
        }
        if self.cle.d > min_dim {
            return Err(DmhError::Config(format!(
                "embedding dimension d={} exceeds the smallest feature space ({min_dim}) seen during training",
                self.cle.d
            )));
        }
        Ok(())
    }
}

/// Feature-refresh summary logged per round (absent when the variant
/// never refreshes).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ZRefreshStats {
    /// Frobenius norm of the refreshed modality-1 features.
    pub z1_norm: f64,
    /// Frobenius norm of the refreshed modality-2 features.
    pub z2_norm: f64,
}

/// One outer round of the alternation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OuterIterationLog {
    /// 1-based round index.
    pub iteration: usize,
    /// Final local-embedding objective.
    pub l1: f64,
    /// Final code-learning objective (for the PCA variant: the
    /// residual energy left outside the top-c subspace).
    pub l2: f64,
    /// Final encoder regression loss.
    pub l3: f64,
    /// Largest projection orthonormality defect seen this round.
    pub max_ortho_defect: f64,
    /// Present iff the round refreshed the features.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_refresh: Option<ZRefreshStats>,
}

/// Trained hash model: two encoders plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DmhModel {
    pub theta1: EncoderParams,
    pub theta2: EncoderParams,
    pub c: usize,
    /// Configuration snapshot as passed to training.
    pub config: DmhConfig,
    pub log: Vec<OuterIterationLog>,
}

impl DmhModel {
    /// ±1 code matrix for modality-1 inputs.
    pub fn encode1(&self, x: &Mat) -> Result<Mat> {
        encode(&self.theta1, x)
    }

    /// ±1 code matrix for modality-2 inputs.
    pub fn encode2(&self, x: &Mat) -> Result<Mat> {
        encode(&self.theta2, x)
    }

    /// Packed hash codes for modality-1 inputs.
    pub fn hash1(&self, x: &Mat) -> Result<CodeSet> {
        CodeSet::from_signs(&self.encode1(x)?)
    }

    /// Packed hash codes for modality-2 inputs.
    pub fn hash2(&self, x: &Mat) -> Result<CodeSet> {
        CodeSet::from_signs(&self.encode2(x)?)
    }
}

/// Prefix runtime errors with the stage that raised them.
fn attribute(stage: &str, e: DmhError) -> DmhError {
    match e {
        DmhError::Config(m) => DmhError::Config(format!("{stage}: {m}")),
        DmhError::Data(m) => DmhError::Data(format!("{stage}: {m}")),
        DmhError::Numeric(m) => DmhError::Numeric(format!("{stage}: {m}")),
        DmhError::Shape { expected, got, context } => DmhError::Shape {
            expected,
            got,
            context: format!("{stage}: {context}"),
        },
        io @ DmhError::Io(_) => io,
    }
}

/// Copy of `x` with unobserved rows zeroed.
fn masked(x: &Mat, observed: impl Fn(usize) -> bool) -> Mat {
    let mut out = x.clone();
    for i in 0..out.nrows() {
        if !observed(i) {
            out.row_mut(i).fill(0.0);
        }
    }
    out
}

/// Binary codes from the top-c principal components of `y`: center,
/// project onto the leading eigenvectors of the covariance, take signs
/// (`sign(0) = −1`). Directions beyond the rank of `y` contribute zero
/// scores (all −1 bits) and a warning.
pub fn pca_embed(y: &Mat, c: usize) -> Result<CodeMatrices> {
    let (n, d) = y.dim();
    if n <= c {
        return Err(DmhError::Config(format!(
            "need more than c={c} rows for principal-component codes, got {n}"
        )));
    }
    if c == 0 {
        return Err(DmhError::Config("code length c must be positive".into()));
    }
    let mean = y.mean_axis(ndarray::Axis(0)).expect("n > 0");
    let centered = y - &mean.broadcast((n, d)).expect("broadcast mean");
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let (vals, vecs) = symmetric_eigen_desc(&cov)?;
    let top = c.min(d);
    let vmax = vals[0].max(0.0);
    let mut scores = Array2::<f64>::zeros((n, c));
    let mut deficient = c.saturating_sub(d);
    for j in 0..top {
        if vals[j] <= vmax * 1e-12 {
            deficient += 1;
            continue; // zero scores → all −1 bits
        }
        // Canonical direction: largest-magnitude entry positive.
        let col = vecs.column(j);
        let lead = col
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(1.0);
        let flip = if lead < 0.0 { -1.0 } else { 1.0 };
        let projected = centered.dot(&col.to_owned());
        scores.column_mut(j).assign(&(projected * flip));
    }
    if deficient > 0 {
        log::warn!(
            "embedding rank below code length: {deficient} of {c} principal directions degenerate; their bits are all −1"
        );
    }
    let h = binarize(&scores);
    Ok(CodeMatrices { hhat: scores, h, c })
}

/// Mean squared row norm over the given rows (0 when none).
fn mean_sq_row_norm(m: &Mat, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|&i| m.row(i).dot(&m.row(i))).sum::<f64>() / rows.len() as f64
}

/// Center the given rows per column and rescale them to a target mean
/// squared row norm; all other rows stay untouched (zero placeholders).
/// Rectifier activations carry a large common positive component; the
/// inner-product code target degenerates toward uniform under such an
/// offset, and the local least squares is scale-sensitive, so
/// refreshed features are put back into the regime the initial
/// features established.
fn renormalize_rows(m: &mut Mat, rows: &[usize], target_msrn: f64) {
    if rows.is_empty() {
        return;
    }
    let mut mean = Array1::<f64>::zeros(m.ncols());
    for &i in rows {
        mean += &m.row(i);
    }
    mean /= rows.len() as f64;
    for &i in rows {
        let mut r = m.row_mut(i);
        r -= &mean;
    }
    let msrn = mean_sq_row_norm(m, rows);
    if msrn > 0.0 && target_msrn > 0.0 {
        let factor = (target_msrn / msrn).sqrt();
        for &i in rows {
            m.row_mut(i).mapv_inplace(|v| v * factor);
        }
    }
}

/// Quantize every parameter to the nearest f32 (the serialized grid),
/// so saved and in-memory models encode identically.
fn quantize_params(p: &mut EncoderParams) {
    for layer in &mut p.layers {
        quantize_f32(&mut layer.w);
        layer.b.mapv_inplace(|v| v as f32 as f64);
    }
}

/// Train the full method (any variant) on row-aligned features.
/// Unobserved rows of `x1`/`x2` are ignored.
pub fn train_dmh(x1: &Mat, x2: &Mat, split: &SemiPairedSplit, config: &DmhConfig) -> Result<DmhModel> {
    config.validate()?;
    split.validate()?;
    let n = split.n();
    if x1.nrows() != n || x2.nrows() != n {
        return Err(DmhError::shape(
            format!("{n} rows"),
            format!("{}/{} rows", x1.nrows(), x2.nrows()),
            "features must be row-aligned with the split",
        ));
    }
    config.validate_dims(x1.ncols(), x2.ncols())?;

    let flags = split.observed_flags();
    let x1 = masked(x1, |i| flags[i].0);
    let x2 = masked(x2, |i| flags[i].1);
    let arch1 = config.arch(x1.ncols(), &config.hidden_dims1);
    let arch2 = config.arch(x2.ncols(), &config.hidden_dims2);
    let complement = match config.variant {
        Variant::Zero => ComplementMode::Zero,
        _ => ComplementMode::LocalWeights,
    };

    let observed1 = split.observed1();
    let observed2 = split.observed2();
    let scale1 = mean_sq_row_norm(&x1, &observed1);
    let scale2 = mean_sq_row_norm(&x2, &observed2);

    let mut z1 = x1.clone();
    let mut z2 = x2.clone();
    let mut log: Vec<OuterIterationLog> = Vec::with_capacity(config.outer_iters);
    let mut theta: Option<(EncoderParams, EncoderParams)> = None;
    // Relaxed codes of the previous round; later rounds continue from
    // them (the code objective is invariant under bit permutations and
    // sign flips, so a cold restart could hand the encoders an
    // arbitrarily relabeled target every round).
    let mut prev_hhat: Option<Mat> = None;
    // Shared embedding of the previous round: a cold restart picks a
    // new rotation frame and basin each round, which moves the code
    // target even when the geometry is settled.
    let mut prev_y: Option<Mat> = None;

    for iteration in 1..=config.outer_iters {
        let round_seed = derive_seed(config.seed, iteration as u64);

        // Stage 1: manifold completion and shared embedding.
        let cle = run_cle_with_mode_from(
            &z1,
            &z2,
            split,
            &config.cle,
            derive_seed(round_seed, 101),
            complement,
            prev_y.as_ref(),
        )
        .map_err(|e| attribute("local embedding", e))?;
        let l1 = cle.final_objective();

        // Stage 2: binary codes.
        let (codes, l2) = match config.variant {
            Variant::Pca => {
                let codes = pca_embed(&cle.state.y, config.c)
                    .map_err(|e| attribute("principal-component codes", e))?;
                // Residual energy outside the retained subspace
                // (Pythagoras against orthonormal directions).
                let total: f64 = {
                    let mean = cle.state.y.mean_axis(ndarray::Axis(0)).expect("n > 0");
                    cle.state
                        .y
                        .rows()
                        .into_iter()
                        .map(|r| r.iter().zip(mean.iter()).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
                        .sum()
                };
                let captured: f64 = codes.hhat.iter().map(|v| v * v).sum();
                (codes, (total - captured).max(0.0))
            }
            _ => {
                let mut gbe_params = config.gbe.clone();
                gbe_params.seed = derive_seed(round_seed, 102);
                if iteration > GBE_STOCHASTIC_ROUNDS && prev_hhat.is_some() {
                    gbe_params.row_subsample = None;
                    gbe_params.max_iters = gbe_params.max_iters.min(GBE_REFINE_ITERS);
                } else {
                    // Diminishing step size over the stochastic rounds:
                    // warm-started rounds refine the previous codes and
                    // need smaller kicks than the cold organization
                    // round.
                    gbe_params.learning_rate /= iteration as f64;
                }
                let gbe = run_gbe_from(&cle.state.y, &gbe_params, config.c, prev_hhat.as_ref())
                    .map_err(|e| attribute("binary embedding", e))?;
                // In stochastic mode the trace holds per-block losses;
                // log the full objective at the final iterate so
                // consecutive rounds stay comparable.
                let l2 = if gbe_params.row_subsample.is_some_and(|m| m < cle.state.y.nrows()) {
                    let s_y = similarity_from_embedding(&cle.state.y)
                        .map_err(|e| attribute("binary embedding", e))?;
                    gbe_loss(&s_y, &gbe.codes.hhat, gbe_params.gamma)
                } else {
                    gbe.final_loss()
                };
                (gbe.codes, l2)
            }
        };

        // Stage 3: encoders regress the codes from the raw inputs,
        // continuing from the previous round's parameters.
        let mut dam_params = config.dam.clone();
        dam_params.seed = derive_seed(round_seed, 103);
        let warm = theta.as_ref().map(|(t1, t2)| (t1, t2));
        let dam = run_dam_from(&x1, &x2, &codes.h, split, &dam_params, &arch1, &arch2, warm)
            .map_err(|e| attribute("encoder training", e))?;
        let l3 = *dam.loss_trace.last().expect("trace never empty");

        let z_refresh = if config.variant == Variant::Fix {
            None
        } else {
            let mut z1_new = dam.z1;
            let mut z2_new = dam.z2;
            renormalize_rows(&mut z1_new, &observed1, scale1);
            renormalize_rows(&mut z2_new, &observed2, scale2);
            let stats = ZRefreshStats {
                z1_norm: crate::linalg::fro_norm(&z1_new),
                z2_norm: crate::linalg::fro_norm(&z2_new),
            };
            z1 = z1_new;
            z2 = z2_new;
            Some(stats)
        };
        theta = Some((dam.theta1, dam.theta2));
        prev_hhat = Some(codes.hhat);
        prev_y = Some(cle.state.y);
        log.push(OuterIterationLog {
            iteration,
            l1,
            l2,
            l3,
            max_ortho_defect: cle.max_ortho_defect,
            z_refresh,
        });

        if log.len() >= 2 {
            let prev = &log[log.len() - 2];
            let cur = &log[log.len() - 1];
            let settled = [(prev.l1, cur.l1), (prev.l2, cur.l2), (prev.l3, cur.l3)]
                .iter()
                .all(|&(a, b)| ((a - b) / a.abs().max(f64::MIN_POSITIVE)).abs() < config.outer_tol);
            if settled {
                break;
            }
        }
    }

    let (mut theta1, mut theta2) = theta.expect("at least one round ran");
    quantize_params(&mut theta1);
    quantize_params(&mut theta2);
    Ok(DmhModel { theta1, theta2, c: config.c, config: config.clone(), log })
}

/// Train an ablation variant (rejects the full method; use
/// [`train_dmh`] for that).
pub fn train_variant(x1: &Mat, x2: &Mat, split: &SemiPairedSplit, config: &DmhConfig) -> Result<DmhModel> {
    if config.variant == Variant::Full {
        return Err(DmhError::Config(
            "train_variant expects an ablation variant (zero, pca or fix)".into(),
        ));
    }
    train_dmh(x1, x2, split, config)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct BlobInfo {
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    c: usize,
    config: DmhConfig,
    log: Vec<OuterIterationLog>,
    arch1: EncoderArch,
    arch2: EncoderArch,
    /// Weight and bias shapes, in serialization order: per encoder,
    /// per layer, weights then biases (biases as 1 × len).
    blobs: Vec<BlobInfo>,
}

const MODEL_VERSION: u32 = 1;

fn push_blobs(p: &EncoderParams, blobs: &mut Vec<BlobInfo>, payload: &mut Vec<u8>) {
    for layer in &p.layers {
        blobs.push(BlobInfo { rows: layer.w.nrows(), cols: layer.w.ncols() });
        for v in layer.w.iter() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        blobs.push(BlobInfo { rows: 1, cols: layer.b.len() });
        for v in layer.b.iter() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
}

/// Write the model container: magic, little-endian header length,
/// JSON header, then f32 little-endian parameter blobs.
pub fn save_model(model: &DmhModel, path: &Path) -> Result<()> {
    let mut blobs = Vec::new();
    let mut payload = Vec::new();
    push_blobs(&model.theta1, &mut blobs, &mut payload);
    push_blobs(&model.theta2, &mut blobs, &mut payload);
    let header = ModelHeader {
        version: MODEL_VERSION,
        c: model.c,
        config: model.config.clone(),
        log: model.log.clone(),
        arch1: model.theta1.arch.clone(),
        arch2: model.theta2.arch.clone(),
        blobs,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MODEL_MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

fn take_params(arch: &EncoderArch, blobs: &[BlobInfo], values: &mut std::slice::Iter<'_, f64>) -> Result<EncoderParams> {
    let mut layers = Vec::with_capacity(blobs.len() / 2);
    for pair in blobs.chunks(2) {
        let [wb, bb] = pair else {
            return Err(DmhError::Data("model header: odd blob count".into()));
        };
        let mut w = Array2::zeros((wb.rows, wb.cols));
        for v in w.iter_mut() {
            *v = *values.next().ok_or_else(|| DmhError::Data("model payload too short".into()))?;
        }
        let mut b = Array1::zeros(bb.cols);
        for v in b.iter_mut() {
            *v = *values.next().ok_or_else(|| DmhError::Data("model payload too short".into()))?;
        }
        layers.push(Layer { w, b });
    }
    let params = EncoderParams { arch: arch.clone(), layers };
    params.validate()?;
    Ok(params)
}

/// Read a model container written by [`save_model`].
pub fn load_model(path: &Path) -> Result<DmhModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MODEL_MAGIC {
        return Err(DmhError::Data(format!(
            "not a model file (magic {magic:02x?}, expected {MODEL_MAGIC:02x?})"
        )));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| DmhError::Data("model header truncated".into()))?;
    let header: ModelHeader = serde_json::from_slice(&header_bytes)?;
    if header.version != MODEL_VERSION {
        return Err(DmhError::Data(format!(
            "unsupported model version {} (this build reads {MODEL_VERSION})",
            header.version
        )));
    }
    let expected: usize = header.blobs.iter().map(|b| b.rows * b.cols).sum();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected * 4 {
        return Err(DmhError::Data(format!(
            "model payload has {} bytes, expected {}",
            payload.len(),
            expected * 4
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if !values.iter().all(|v| v.is_finite()) {
        return Err(DmhError::Data("model payload contains non-finite values".into()));
    }
    let n1 = header.arch1.hidden_dims.len() + 1;
    let mut iter = values.iter();
    let theta1 = take_params(&header.arch1, &header.blobs[..n1 * 2], &mut iter)?;
    let theta2 = take_params(&header.arch2, &header.blobs[n1 * 2..], &mut iter)?;
    for theta in [&theta1, &theta2] {
        if theta.arch.code_dim != header.c {
            return Err(DmhError::Data(format!(
                "encoder code dim {} does not match model c={}",
                theta.arch.code_dim, header.c
            )));
        }
    }
    Ok(DmhModel { theta1, theta2, c: header.c, config: header.config, log: header.log })
}
