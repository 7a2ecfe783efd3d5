//! Modality-specific hash encoders: small feedforward networks trained
//! to regress the learned binary codes, with a designated hidden layer
//! whose activations refresh the feature matrices between alternation
//! rounds.
//!
//! Each encoder is an affine/ReLU stack with a tanh output head
//! (approximating the sign function). Training is plain mini-batch SGD
//! on `Σ‖f(x) − h‖²` summed over the rows the modality observes.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SemiPairedSplit;
use crate::derive_seed;
use crate::error::{DmhError, Result};
use crate::linalg::{random_gaussian, sign_pm1};
use crate::{Mat, Vec1};

/// Plateau detection compares the mean loss of the last
/// [`PLATEAU_WINDOW`] epochs against the mean of the window before it
/// and stops once the relative improvement drops below
/// [`PLATEAU_TOL`]. Window means rather than per-epoch deltas:
/// stochastic epoch losses fluctuate by more than the slow descent
/// they ride on, so nearby epochs routinely tie or regress during
/// genuine progress, while averaged windows only flatten at a real
/// stall.
const PLATEAU_WINDOW: usize = 10;
const PLATEAU_TOL: f64 = 1e-4;

/// Network shape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct EncoderArch {
    pub input_dim: usize,
    /// Hidden widths; every hidden layer uses ReLU.
    pub hidden_dims: Vec<usize>,
    /// Output width (code length); the output layer uses tanh.
    pub code_dim: usize,
    /// Which hidden layer's activations refresh the features.
    pub feature_layer_index: usize,
}

impl EncoderArch {
    /// Architecture with the default hidden stack [1024, 512] and the
    /// last hidden layer as the feature layer.
    pub fn new(input_dim: usize, code_dim: usize) -> Self {
        EncoderArch { input_dim, hidden_dims: vec![1024, 512], code_dim, feature_layer_index: 1 }
    }

    /// Architecture with explicit hidden widths, feature layer = last
    /// hidden layer.
    pub fn with_hidden(input_dim: usize, hidden_dims: Vec<usize>, code_dim: usize) -> Self {
        let feature_layer_index = hidden_dims.len().saturating_sub(1);
        EncoderArch { input_dim, hidden_dims, code_dim, feature_layer_index }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.code_dim == 0 {
            return Err(DmhError::Config("encoder dimensions must be positive".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(DmhError::Config("at least one hidden layer is required".into()));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(DmhError::Config("hidden widths must be positive".into()));
        }
        if self.feature_layer_index >= self.hidden_dims.len() {
            return Err(DmhError::Config(format!(
                "feature_layer_index {} out of range for {} hidden layers",
                self.feature_layer_index,
                self.hidden_dims.len()
            )));
        }
        Ok(())
    }

    /// Width of the feature layer.
    pub fn feature_dim(&self) -> usize {
        self.hidden_dims[self.feature_layer_index]
    }

    /// Layer sizes from input to output.
    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.code_dim);
        dims
    }
}

/// One affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// input_dim × output_dim.
    pub w: Mat,
    /// output_dim.
    pub b: Vec1,
}

/// Encoder weights plus their shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub arch: EncoderArch,
    pub layers: Vec<Layer>,
}

impl EncoderParams {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let dims = self.arch.layer_dims();
        if self.layers.len() + 1 != dims.len() {
            return Err(DmhError::shape(
                format!("{} layers", dims.len() - 1),
                format!("{} layers", self.layers.len()),
                "encoder parameter stack",
            ));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.w.dim() != (dims[l], dims[l + 1]) || layer.b.len() != dims[l + 1] {
                return Err(DmhError::shape(
                    format!("{}x{} weights", dims[l], dims[l + 1]),
                    format!("{}x{} weights, {} biases", layer.w.nrows(), layer.w.ncols(), layer.b.len()),
                    format!("encoder layer {l}"),
                ));
            }
        }
        Ok(())
    }

    /// Total scalar parameter count.
    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

/// Training hyperparameters for both encoders.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DamParams {
    /// Modality-1 learning rate.
    pub lr1: f64,
    /// Modality-2 learning rate.
    pub lr2: f64,
    pub batch_size: usize,
    /// SGD steps per epoch for modality 1 (`None` = one full pass).
    pub t1: Option<usize>,
    /// SGD steps per epoch for modality 2 (`None` = one full pass).
    pub t2: Option<usize>,
    /// Epoch budget (0 = no training, parameters stay at init).
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DamParams {
    fn default() -> Self {
        DamParams {
            lr1: 10f64.powf(-4.5),
            lr2: 10f64.powf(-3.5),
            batch_size: 128,
            t1: None,
            t2: None,
            epochs: 30,
            seed: 0,
        }
    }
}

impl DamParams {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr1", self.lr1), ("lr2", self.lr2)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(DmhError::Config(format!("{name} must be finite and positive")));
            }
        }
        if self.batch_size == 0 {
            return Err(DmhError::Config("batch_size must be positive".into()));
        }
        if self.t1 == Some(0) || self.t2 == Some(0) {
            return Err(DmhError::Config("inner step counts must be positive".into()));
        }
        Ok(())
    }
}

/// Fresh encoder: weights `N(0, 2/fan_in)` (He scaling), biases zero.
pub fn init_encoder(arch: &EncoderArch, seed: u64) -> Result<EncoderParams> {
    arch.validate()?;
    let dims = arch.layer_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .windows(2)
        .map(|io| {
            let std = (2.0 / io[0] as f64).sqrt();
            Layer { w: random_gaussian(&mut rng, io[0], io[1], std), b: Array1::zeros(io[1]) }
        })
        .collect();
    Ok(EncoderParams { arch: arch.clone(), layers })
}

/// Network outputs for a batch of rows.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// n × c, every entry strictly inside (−1, 1).
    pub codes_approx: Mat,
    /// n × feature_dim activations of the feature layer.
    pub features: Mat,
}

fn relu(m: &mut Mat) {
    m.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// All activations, input first, output last.
fn forward_full(params: &EncoderParams, x: &Mat) -> Result<Vec<Mat>> {
    if x.ncols() != params.arch.input_dim {
        return Err(DmhError::shape(
            format!("{} cols", params.arch.input_dim),
            format!("{} cols", x.ncols()),
            "encoder input",
        ));
    }
    let n_layers = params.layers.len();
    let mut acts = Vec::with_capacity(n_layers + 1);
    acts.push(x.clone());
    for (l, layer) in params.layers.iter().enumerate() {
        let mut a = acts[l].dot(&layer.w);
        a += &layer.b;
        if l + 1 < n_layers {
            relu(&mut a);
        } else {
            a.mapv_inplace(f64::tanh);
        }
        acts.push(a);
    }
    Ok(acts)
}

/// Run the network on a batch of rows.
pub fn forward(params: &EncoderParams, x: &Mat) -> Result<ForwardOutput> {
    let acts = forward_full(params, x)?;
    let features = acts[params.arch.feature_layer_index + 1].clone();
    let codes_approx = acts.into_iter().last().expect("nonempty activation stack");
    Ok(ForwardOutput { codes_approx, features })
}

/// Hash codes for a batch of rows: `sign(forward)`, with
/// `sign(0) = −1`.
pub fn encode(params: &EncoderParams, x: &Mat) -> Result<Mat> {
    Ok(forward(params, x)?.codes_approx.mapv(sign_pm1))
}

/// Regression loss of both encoders' outputs against the code matrix,
/// summed over the rows each modality observes. `codes_approx_1` is
/// row-aligned with `split.observed1()`, `codes_approx_2` with
/// `split.observed2()`, `h` with all objects.
pub fn dam_loss(codes_approx_1: &Mat, codes_approx_2: &Mat, h: &Mat, split: &SemiPairedSplit) -> Result<f64> {
    let mut total = 0.0;
    for (codes, observed) in [(codes_approx_1, split.observed1()), (codes_approx_2, split.observed2())] {
        if codes.nrows() != observed.len() || codes.ncols() != h.ncols() {
            return Err(DmhError::shape(
                format!("{}x{}", observed.len(), h.ncols()),
                format!("{}x{}", codes.nrows(), codes.ncols()),
                "encoder outputs vs observed rows",
            ));
        }
        for (r, &i) in observed.iter().enumerate() {
            total += codes
                .row(r)
                .iter()
                .zip(h.row(i).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    Ok(total)
}

/// Batch loss `Σ‖f(x) − h‖²` and its gradient with respect to every
/// layer's weights and biases (reverse-mode through the
/// affine/ReLU/tanh stack).
pub fn batch_gradient(params: &EncoderParams, x: &Mat, h: &Mat) -> Result<(f64, Vec<Layer>)> {
    if h.nrows() != x.nrows() || h.ncols() != params.arch.code_dim {
        return Err(DmhError::shape(
            format!("{}x{}", x.nrows(), params.arch.code_dim),
            format!("{}x{}", h.nrows(), h.ncols()),
            "batch targets",
        ));
    }
    let acts = forward_full(params, x)?;
    let n_layers = params.layers.len();
    let out = &acts[n_layers];
    let loss: f64 = out
        .iter()
        .zip(h.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if !loss.is_finite() {
        return Err(DmhError::Numeric("non-finite loss in encoder batch".into()));
    }
    // d/da of Σ(a−h)², then through tanh: ∘（1 − a²).
    let mut delta = out - h;
    delta.zip_mut_with(out, |d, &a| *d = 2.0 * *d * (1.0 - a * a));
    let mut grads = vec![
        Layer { w: Array2::zeros((0, 0)), b: Array1::zeros(0) };
        n_layers
    ];
    for l in (0..n_layers).rev() {
        let gw = acts[l].t().dot(&delta);
        let gb = delta.sum_axis(Axis(0));
        if !gw.iter().all(|v| v.is_finite()) || !gb.iter().all(|v| v.is_finite()) {
            return Err(DmhError::Numeric(format!("non-finite gradient in layer {l}")));
        }
        if l > 0 {
            let mut prev = delta.dot(&params.layers[l].w.t());
            // ReLU gate: activations are zero exactly where the unit
            // was clamped.
            prev.zip_mut_with(&acts[l], |d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = prev;
        }
        grads[l] = Layer { w: gw, b: gb };
    }
    Ok((loss, grads))
}

/// One mini-batch SGD step for one modality; returns the batch loss
/// before the update.
pub fn train_step(params: &mut EncoderParams, x_batch: &Mat, h_batch: &Mat, lr: f64) -> Result<f64> {
    if x_batch.nrows() == 0 {
        return Err(DmhError::Config("empty training batch".into()));
    }
    let (loss, grads) = batch_gradient(params, x_batch, h_batch)?;
    for (layer, grad) in params.layers.iter_mut().zip(grads) {
        layer.w.zip_mut_with(&grad.w, |w, &g| *w -= lr * g);
        layer.b.zip_mut_with(&grad.b, |b, &g| *b -= lr * g);
    }
    Ok(loss)
}

/// Trained encoders plus the refreshed features.
#[derive(Debug, Clone)]
pub struct DamResult {
    pub theta1: EncoderParams,
    pub theta2: EncoderParams,
    /// n × feature_dim₁; rows without a modality-1 description are zero.
    pub z1: Mat,
    /// n × feature_dim₂; rows without a modality-2 description are zero.
    pub z2: Mat,
    /// Total regression loss after initialization and after each epoch.
    pub loss_trace: Vec<f64>,
    pub epochs_run: usize,
}

/// Rows of `m` selected by `idx`, paired with the same rows of `h`.
fn gather(m: &Mat, h: &Mat, idx: &[usize]) -> (Mat, Mat) {
    (m.select(Axis(0), idx), h.select(Axis(0), idx))
}

/// Mini-batch steps over one modality for one epoch: `steps` batches
/// drawn from a reshuffled index cycle.
fn run_epoch(
    params: &mut EncoderParams,
    x: &Mat,
    h: &Mat,
    lr: f64,
    batch_size: usize,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut cursor = 0;
    for _ in 0..steps {
        if cursor >= n {
            order.shuffle(rng);
            cursor = 0;
        }
        let end = (cursor + batch_size).min(n);
        let idx = &order[cursor..end];
        let (xb, hb) = gather(x, h, idx);
        train_step(params, &xb, &hb, lr)?;
        cursor = end;
    }
    Ok(())
}

/// Train both encoders against the code matrix `h` (row-aligned with
/// all objects): per epoch, `t1` SGD steps on modality 1 followed by
/// `t2` on modality 2, until the epoch budget or a loss plateau
/// (successive 10-epoch mean losses within relative 1e-4). Returns the
/// parameters and the refreshed feature matrices (feature-layer
/// outputs over observed rows, zero elsewhere).
pub fn run_dam(
    x1: &Mat,
    x2: &Mat,
    h: &Mat,
    split: &SemiPairedSplit,
    params: &DamParams,
    arch1: &EncoderArch,
    arch2: &EncoderArch,
) -> Result<DamResult> {
    run_dam_from(x1, x2, h, split, params, arch1, arch2, None)
}

/// [`run_dam`] continued from existing parameters instead of a fresh
/// random initialization. Alternated training passes the previous
/// round's encoders here so the regression keeps converging across
/// rounds rather than restarting.
#[allow(clippy::too_many_arguments)]
pub fn run_dam_from(
    x1: &Mat,
    x2: &Mat,
    h: &Mat,
    split: &SemiPairedSplit,
    params: &DamParams,
    arch1: &EncoderArch,
    arch2: &EncoderArch,
    init: Option<(&EncoderParams, &EncoderParams)>,
) -> Result<DamResult> {
    params.validate()?;
    arch1.validate()?;
    arch2.validate()?;
    let n = split.n();
    if x1.nrows() != n || x2.nrows() != n || h.nrows() != n {
        return Err(DmhError::shape(
            format!("{n} rows"),
            format!("{}/{}/{} rows", x1.nrows(), x2.nrows(), h.nrows()),
            "features and codes must be row-aligned with the split",
        ));
    }
    if arch1.input_dim != x1.ncols() || arch2.input_dim != x2.ncols() {
        return Err(DmhError::shape(
            format!("input dims {}/{}", arch1.input_dim, arch2.input_dim),
            format!("{}/{}", x1.ncols(), x2.ncols()),
            "encoder input dimensions",
        ));
    }
    if arch1.code_dim != h.ncols() || arch2.code_dim != h.ncols() {
        return Err(DmhError::Config(format!(
            "encoder code dims {}/{} do not match code matrix width {}",
            arch1.code_dim,
            arch2.code_dim,
            h.ncols()
        )));
    }

    let obs1 = split.observed1();
    let obs2 = split.observed2();
    let (x1o, h1o) = gather(x1, h, &obs1);
    let (x2o, h2o) = gather(x2, h, &obs2);

    let (mut theta1, mut theta2) = match init {
        Some((t1, t2)) => {
            t1.validate()?;
            t2.validate()?;
            if t1.arch != *arch1 || t2.arch != *arch2 {
                return Err(DmhError::Config(
                    "warm-start parameters do not match the requested architectures".into(),
                ));
            }
            (t1.clone(), t2.clone())
        }
        None => (
            init_encoder(arch1, derive_seed(params.seed, 1))?,
            init_encoder(arch2, derive_seed(params.seed, 2))?,
        ),
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, 3));

    let full_loss = |t1: &EncoderParams, t2: &EncoderParams| -> Result<f64> {
        let c1 = forward(t1, &x1o)?.codes_approx;
        let c2 = forward(t2, &x2o)?.codes_approx;
        dam_loss(&c1, &c2, h, split)
    };

    let steps1 = params.t1.unwrap_or_else(|| x1o.nrows().div_ceil(params.batch_size));
    let steps2 = params.t2.unwrap_or_else(|| x2o.nrows().div_ceil(params.batch_size));

    let mut loss_trace = vec![full_loss(&theta1, &theta2)?];
    let mut epochs_run = 0;
    for _ in 0..params.epochs {
        run_epoch(&mut theta1, &x1o, &h1o, params.lr1, params.batch_size, steps1, &mut shuffle_rng)?;
        run_epoch(&mut theta2, &x2o, &h2o, params.lr2, params.batch_size, steps2, &mut shuffle_rng)?;
        epochs_run += 1;
        let loss = full_loss(&theta1, &theta2)?;
        loss_trace.push(loss);
        if epochs_run >= 2 * PLATEAU_WINDOW {
            let epochs = &loss_trace[1..]; // skip the initialization loss
            let recent: f64 = epochs[epochs_run - PLATEAU_WINDOW..].iter().sum::<f64>() / PLATEAU_WINDOW as f64;
            let earlier: f64 = epochs[epochs_run - 2 * PLATEAU_WINDOW..epochs_run - PLATEAU_WINDOW]
                .iter()
                .sum::<f64>()
                / PLATEAU_WINDOW as f64;
            if (earlier - recent) / earlier.abs().max(f64::MIN_POSITIVE) < PLATEAU_TOL {
                break;
            }
        }
    }

    // Refreshed features: feature-layer outputs on observed rows.
    let mut z1 = Array2::zeros((n, arch1.feature_dim()));
    let f1 = forward(&theta1, &x1o)?.features;
    for (r, &i) in obs1.iter().enumerate() {
        z1.row_mut(i).assign(&f1.row(r));
    }
    let mut z2 = Array2::zeros((n, arch2.feature_dim()));
    let f2 = forward(&theta2, &x2o)?.features;
    for (r, &i) in obs2.iter().enumerate() {
        z2.row_mut(i).assign(&f2.row(r));
    }

    Ok(DamResult { theta1, theta2, z1, z2, loss_trace, epochs_run })
}
