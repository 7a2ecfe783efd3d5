//! Complemented local embedding: learns modality-invariant features
//! for semi-paired data while filling in the missing modality.
//!
//! The solver alternates four updates until the objective
//!
//! ```text
//!   (1/2n) Σ_v Σ_i ‖z̄ᵢᵛ − Qᵛ yᵢ‖²
//! + (λ/n)  Σ_i ‖yᵢ − Σ_j W_ij y_ij‖²
//! + η      Σ_i ‖yᵢ‖²
//! ```
//!
//! stabilizes: per-modality projections `Qᵛ` (closed form followed by
//! polar orthogonalization), locally linear reconstruction weights `W`
//! (sum-to-one constrained least squares), complemented features `Z̄`
//! (observed rows verbatim, missing rows reconstructed from paired
//! neighbors), and the shared embedding `Y` (per-row stationarity
//! solve, Gauss–Seidel order).
//!
//! Every neighbor of every object is a *paired* object: paired rows
//! pick neighbors from the intersection of their kNN lists in both
//! feature spaces; single-modality rows pick plain kNN among the
//! paired pool in their observed space, and those weights are solved
//! in that feature space (the only one available before `Y` exists).

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SemiPairedSplit;
use crate::error::{DmhError, Result};
use crate::linalg::{condition_number, orthonormality_defect, random_gaussian, thin_svd, SpdSolver};
use crate::{Mat, Vec1};

/// Orthonormality budget for every projection update.
pub const ORTHO_TOL: f64 = 1e-8;

/// Relative objective increase beyond which a sweep is considered
/// non-monotone (update-order diagnostic).
const MONOTONE_SLACK: f64 = 1e-6;

/// Solver parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CleParams {
    /// Local-consistency weight λ.
    pub lambda: f64,
    /// Embedding-norm regularization η.
    pub eta: f64,
    /// Neighbors per object.
    pub k: usize,
    /// Embedding dimension.
    pub d: usize,
    /// Maximum alternation sweeps.
    pub max_iters: usize,
    /// Stop when the relative objective change per sweep drops below
    /// this.
    pub tol: f64,
    /// When true, a sweep that increases the objective by more than a
    /// tiny relative slack is an error instead of a warning.
    pub strict: bool,
}

impl Default for CleParams {
    fn default() -> Self {
        CleParams {
            lambda: 0.1,
            eta: 0.01,
            k: 3,
            d: 512,
            max_iters: 50,
            tol: 1e-4,
            strict: false,
        }
    }
}

impl CleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(DmhError::Config("lambda must be finite and nonnegative".into()));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(DmhError::Config("eta must be finite and nonnegative".into()));
        }
        if self.k == 0 {
            return Err(DmhError::Config("k must be positive".into()));
        }
        if self.d == 0 {
            return Err(DmhError::Config("d must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(DmhError::Config("max_iters must be positive".into()));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(DmhError::Config("tol must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Everything the solver learns.
#[derive(Debug, Clone)]
pub struct ManifoldState {
    /// n × d modality-invariant embedding.
    pub y: Mat,
    /// dz1 × d projection of modality 1.
    pub q1: Mat,
    /// dz2 × d projection of modality 2.
    pub q2: Mat,
    /// n × k reconstruction weights (rows sum to 1).
    pub w: Mat,
    /// n × k neighbor table (global object indices; always paired
    /// objects).
    pub neighbors: Array2<usize>,
    /// n × dz1 complemented modality-1 features.
    pub zbar1: Mat,
    /// n × dz2 complemented modality-2 features.
    pub zbar2: Mat,
}

/// Outcome of [`run_cle`].
#[derive(Debug, Clone)]
pub struct CleResult {
    pub state: ManifoldState,
    /// Objective after initialization and after every sweep.
    pub objective_trace: Vec<f64>,
    /// Sweeps executed.
    pub sweeps: usize,
    /// Largest `‖QᵀQ − I‖_F` observed across all projection updates.
    pub max_ortho_defect: f64,
}

impl CleResult {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace never empty")
    }
}

// ---------------------------------------------------------------------------
// Neighbor selection
// ---------------------------------------------------------------------------

/// Squared Euclidean distances from row `i` to all rows of `z`.
fn distances_from(z: &Mat, i: usize) -> Vec<f64> {
    let ri = z.row(i);
    (0..z.nrows())
        .map(|j| {
            let rj = z.row(j);
            ri.iter().zip(rj.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
        })
        .collect()
}

/// Rank of every other row by distance to row `i` (self gets
/// `usize::MAX`); ties broken by ascending row index.
fn rank_others(z: &Mat, i: usize) -> Vec<usize> {
    let d = distances_from(z, i);
    let mut order: Vec<usize> = (0..z.nrows()).filter(|&j| j != i).collect();
    order.sort_unstable_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    let mut rank = vec![usize::MAX; z.nrows()];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r;
    }
    rank
}

/// Neighbors of paired objects: for each of the `n_m` rows, the `k`
/// objects present in both modality-wise kNN lists. The candidate list
/// size grows geometrically (k, 2k, 4k, …, n_m−1) until the
/// intersection holds at least `k` members; the `k` with smallest
/// summed rank win (ties by index). Indices are local to the paired
/// pool.
pub fn select_paired_neighbors(z1_paired: &Mat, z2_paired: &Mat, k: usize) -> Result<Array2<usize>> {
    let n_m = z1_paired.nrows();
    if z2_paired.nrows() != n_m {
        return Err(DmhError::shape(
            format!("{n_m} rows"),
            format!("{} rows", z2_paired.nrows()),
            "paired features must align",
        ));
    }
    if n_m <= k {
        return Err(DmhError::Config(format!(
            "paired pool of {n_m} cannot supply k={k} neighbors (need n_m > k)"
        )));
    }
    let rows: Vec<Vec<usize>> = (0..n_m)
        .into_par_iter()
        .map(|i| {
            let rank1 = rank_others(z1_paired, i);
            let rank2 = rank_others(z2_paired, i);
            let mut m = k;
            loop {
                m = m.min(n_m - 1);
                let mut members: Vec<usize> = (0..n_m)
                    .filter(|&j| j != i && rank1[j] < m && rank2[j] < m)
                    .collect();
                if members.len() >= k {
                    members.sort_unstable_by_key(|&j| (rank1[j] + rank2[j], j));
                    members.truncate(k);
                    return members;
                }
                debug_assert!(m < n_m - 1, "full candidate list must contain everyone");
                m *= 2;
            }
        })
        .collect();
    Ok(table_from_rows(&rows, k))
}

/// Plain kNN of each unpaired description among the paired pool of the
/// same modality. Indices are local to the paired pool.
pub fn select_unpaired_neighbors(zv_unpaired: &Mat, zv_paired: &Mat, k: usize) -> Result<Array2<usize>> {
    let n_m = zv_paired.nrows();
    if n_m < k {
        return Err(DmhError::Config(format!(
            "paired pool of {n_m} cannot supply k={k} neighbors"
        )));
    }
    if zv_unpaired.ncols() != zv_paired.ncols() {
        return Err(DmhError::shape(
            format!("{} cols", zv_paired.ncols()),
            format!("{} cols", zv_unpaired.ncols()),
            "unpaired/paired features must share a space",
        ));
    }
    let rows: Vec<Vec<usize>> = (0..zv_unpaired.nrows())
        .into_par_iter()
        .map(|i| {
            let ri = zv_unpaired.row(i);
            let mut order: Vec<(f64, usize)> = (0..n_m)
                .map(|j| {
                    let rj = zv_paired.row(j);
                    let d: f64 = ri.iter().zip(rj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, j)
                })
                .collect();
            order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order[..k].iter().map(|&(_, j)| j).collect()
        })
        .collect();
    Ok(table_from_rows(&rows, k))
}

fn table_from_rows(rows: &[Vec<usize>], k: usize) -> Array2<usize> {
    Array2::from_shape_fn((rows.len(), k), |(i, j)| rows[i][j])
}

// ---------------------------------------------------------------------------
// Reconstruction weights
// ---------------------------------------------------------------------------

/// Ill-conditioning threshold for the local Gram matrix.
const COND_LIMIT: f64 = 1e12;

/// Locally linear reconstruction weights of `center` from `neighbors`
/// (k × dim): minimizes `‖Σ_j w_j (center − neighbor_j)‖²` subject to
/// `Σ w = 1`, via `w ∝ A⁻¹ 1` with `A = BᵀB`, `B = [center − n_j]_j`.
/// Ill-conditioned `A` gets trace-scaled Tikhonov regularization; a
/// fully degenerate `A = 0` (all neighbors equal the center) returns
/// uniform weights. The returned row sums to 1 exactly up to the final
/// renormalization.
pub fn update_weights(center: ArrayView1<f64>, neighbors: &Mat) -> Result<Vec1> {
    let k = neighbors.nrows();
    if k == 0 {
        return Err(DmhError::Config("need at least one neighbor".into()));
    }
    if neighbors.ncols() != center.len() {
        return Err(DmhError::shape(
            format!("{} cols", center.len()),
            format!("{} cols", neighbors.ncols()),
            "neighbors must share the center's dimension",
        ));
    }
    if !center.iter().all(|v| v.is_finite()) || !neighbors.iter().all(|v| v.is_finite()) {
        return Err(DmhError::Numeric("non-finite input to weight solve".into()));
    }
    // B columns are center − neighbor_j; A = BᵀB in one pass.
    let mut a = Array2::<f64>::zeros((k, k));
    for p in 0..k {
        for q in p..k {
            let mut s = 0.0;
            for t in 0..center.len() {
                s += (center[t] - neighbors[[p, t]]) * (center[t] - neighbors[[q, t]]);
            }
            a[[p, q]] = s;
            a[[q, p]] = s;
        }
    }
    let trace: f64 = a.diag().sum();
    if trace <= 0.0 {
        // Every neighbor coincides with the center: any convex
        // combination reconstructs it; pick the uniform one.
        return Ok(Array1::from_elem(k, 1.0 / k as f64));
    }
    let needs_reg = match condition_number(&a) {
        Ok(c) => c > COND_LIMIT,
        Err(_) => true,
    };
    if needs_reg {
        let eps = 1e-3 * trace / k as f64;
        for p in 0..k {
            a[[p, p]] += eps;
        }
    }
    let ones = Array1::ones(k);
    let solve = |a: &Mat| SpdSolver::new(a).and_then(|s| s.solve_vec(&ones));
    let x = match solve(&a) {
        Ok(x) => x,
        Err(_) => {
            // Cholesky can still fail on a borderline-singular A that
            // passed the condition estimate; regularize and retry.
            let eps = 1e-3 * trace / k as f64;
            let mut a2 = a.clone();
            for p in 0..k {
                a2[[p, p]] += eps;
            }
            solve(&a2)?
        }
    };
    let sum: f64 = x.sum();
    if sum == 0.0 || !sum.is_finite() {
        return Err(DmhError::Numeric("degenerate weight normalization".into()));
    }
    Ok(x.mapv(|v| v / sum))
}

// ---------------------------------------------------------------------------
// Complementation
// ---------------------------------------------------------------------------

/// How missing-modality rows are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComplementMode {
    /// Reconstruct from paired neighbors with the learned weights.
    LocalWeights,
    /// Zero vectors (ablation).
    Zero,
}

/// Fill in missing-modality feature rows: observed rows are copied
/// verbatim from `z1`/`z2`; a missing row becomes `Σ_j W_ij · z_j`
/// over its paired neighbors in the missing modality (or zero in
/// [`ComplementMode::Zero`]). Idempotent.
pub fn complement_features(
    z1: &Mat,
    z2: &Mat,
    split: &SemiPairedSplit,
    w: &Mat,
    neighbors: &Array2<usize>,
    mode: ComplementMode,
) -> Result<(Mat, Mat)> {
    let n = split.n();
    let flags = split.observed_flags();
    let k = neighbors.ncols();
    let fill = |z: &Mat, missing_in: usize, zbar: &mut Mat| -> Result<()> {
        for i in 0..n {
            let observed = if missing_in == 1 { flags[i].0 } else { flags[i].1 };
            if observed {
                zbar.row_mut(i).assign(&z.row(i));
            } else if mode == ComplementMode::LocalWeights {
                for jj in 0..k {
                    let nb = neighbors[[i, jj]];
                    if !(flags[nb].0 && flags[nb].1) {
                        return Err(DmhError::Data(format!(
                            "internal invariant violated: complemented row {i} references unpaired neighbor {nb}"
                        )));
                    }
                    let weight = w[[i, jj]];
                    let src = z.row(nb);
                    let mut dst = zbar.row_mut(i);
                    dst.iter_mut().zip(src.iter()).for_each(|(d, s)| *d += weight * s);
                }
            }
        }
        Ok(())
    };
    let mut zbar1 = Array2::zeros((n, z1.ncols()));
    let mut zbar2 = Array2::zeros((n, z2.ncols()));
    fill(z1, 1, &mut zbar1)?;
    fill(z2, 2, &mut zbar2)?;
    Ok((zbar1, zbar2))
}

// ---------------------------------------------------------------------------
// Projection update
// ---------------------------------------------------------------------------

/// Nearest matrix with orthonormal columns (polar factor `U Vᵀ` of the
/// thin SVD). A rank-deficient input is completed from the remaining
/// left singular vectors — which is exactly what the thin SVD's `U`
/// provides — and logged as a warning.
pub fn orthogonalize(m: &Mat) -> Result<Mat> {
    if m.nrows() < m.ncols() {
        return Err(DmhError::Config(format!(
            "cannot orthogonalize a {}x{} matrix: no orthonormal {}-frame exists in dimension {}",
            m.nrows(),
            m.ncols(),
            m.ncols(),
            m.nrows()
        )));
    }
    let (u, s, vt) = thin_svd(m)?;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if smax == 0.0 || smin <= smax * 1e-12 {
        log::warn!(
            "rank-deficient matrix in orthogonalization (smin={smin:.3e}, smax={smax:.3e}); null directions filled from the SVD basis"
        );
    }
    let q = u.dot(&vt);
    let defect = orthonormality_defect(&q);
    if defect > 1e-9 {
        return Err(DmhError::Numeric(format!(
            "orthogonalization failed (defect {defect:.3e})"
        )));
    }
    Ok(q)
}

/// Projection update: `M = (Z̄ᵀY)(YᵀY)⁻¹` followed by polar
/// orthogonalization. Returns the projection and its orthonormality
/// defect (always ≤ the [`ORTHO_TOL`] budget on success).
pub fn update_projection(zbar_v: &Mat, y: &Mat) -> Result<(Mat, f64)> {
    let d = y.ncols();
    let dz = zbar_v.ncols();
    if d > dz {
        return Err(DmhError::Config(format!(
            "embedding dimension d={d} exceeds feature dimension {dz}: no orthonormal frame exists"
        )));
    }
    if zbar_v.nrows() != y.nrows() {
        return Err(DmhError::shape(
            format!("{} rows", y.nrows()),
            format!("{} rows", zbar_v.nrows()),
            "projection update inputs",
        ));
    }
    let mut gram = y.t().dot(y);
    let r = zbar_v.t().dot(y); // dz × d
    let solver = match SpdSolver::new(&gram) {
        Ok(s) => s,
        Err(_) => {
            // Singular Gram (e.g. n < d): regularize as documented.
            for i in 0..d {
                gram[[i, i]] += 1e-10;
            }
            SpdSolver::new(&gram)?
        }
    };
    // M = R G⁻¹, solved row by row against the symmetric G.
    let mut m = Array2::<f64>::zeros((dz, d));
    for (i, row) in r.outer_iter().enumerate() {
        let x = solver.solve_vec(&row.to_owned())?;
        m.row_mut(i).assign(&x);
    }
    let q = orthogonalize(&m)?;
    let defect = orthonormality_defect(&q);
    if defect > ORTHO_TOL {
        return Err(DmhError::Numeric(format!(
            "projection defect {defect:.3e} exceeds budget {ORTHO_TOL:.0e}"
        )));
    }
    Ok((q, defect))
}

// ---------------------------------------------------------------------------
// Embedding update
// ---------------------------------------------------------------------------

/// Per-row stationarity solve:
/// `y_i = (Σ_v QᵛᵀQᵛ + 2(λ+ηn)I)⁻¹ (Σ_v Qᵛᵀ z̄ᵢᵛ + 2λ Σ_j W_ij y_ij)`.
#[allow(clippy::too_many_arguments)]
pub fn update_embedding_row(
    zbar1_i: ArrayView1<f64>,
    zbar2_i: ArrayView1<f64>,
    q1: &Mat,
    q2: &Mat,
    w_i: ArrayView1<f64>,
    neighbor_y_rows: &Mat,
    lambda: f64,
    eta: f64,
    n: usize,
) -> Result<Vec1> {
    let d = q1.ncols();
    let mut system = q1.t().dot(q1) + &q2.t().dot(q2);
    let shift = 2.0 * (lambda + eta * n as f64);
    for i in 0..d {
        system[[i, i]] += shift;
    }
    let mut rhs = q1.t().dot(&zbar1_i) + &q2.t().dot(&zbar2_i);
    for (j, &wj) in w_i.iter().enumerate() {
        rhs.iter_mut()
            .zip(neighbor_y_rows.row(j).iter())
            .for_each(|(r, y)| *r += 2.0 * lambda * wj * y);
    }
    SpdSolver::new(&system)?.solve_vec(&rhs)
}

/// Weighted terms of the objective (already carrying their 1/2n, λ/n
/// and η factors).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CleObjectiveParts {
    /// `(1/2n) Σ_v Σ_i ‖z̄ᵢᵛ − Qᵛ yᵢ‖²`
    pub reconstruction: f64,
    /// `(λ/n) Σ_i ‖yᵢ − Σ_j W_ij y_ij‖²`
    pub local: f64,
    /// `η Σ_i ‖yᵢ‖²`
    pub regularization: f64,
}

impl CleObjectiveParts {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.local + self.regularization
    }
}

/// Term-by-term evaluation of the objective.
pub fn cle_objective_parts(state: &ManifoldState, params: &CleParams) -> CleObjectiveParts {
    let n = state.y.nrows();
    let mut recon = 0.0;
    for (zbar, q) in [(&state.zbar1, &state.q1), (&state.zbar2, &state.q2)] {
        let approx = state.y.dot(&q.t());
        recon += zbar
            .iter()
            .zip(approx.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    recon /= 2.0 * n as f64;

    let mut local = 0.0;
    for i in 0..n {
        let mut resid = state.y.row(i).to_owned();
        for (jj, &nb) in state.neighbors.row(i).iter().enumerate() {
            let wj = state.w[[i, jj]];
            resid
                .iter_mut()
                .zip(state.y.row(nb).iter())
                .for_each(|(r, y)| *r -= wj * y);
        }
        local += resid.iter().map(|v| v * v).sum::<f64>();
    }
    local *= params.lambda / n as f64;

    let regularization = params.eta * state.y.iter().map(|v| v * v).sum::<f64>();
    CleObjectiveParts { reconstruction: recon, local, regularization }
}

/// Objective of the current state (split is only consulted for row
/// alignment; complementation already lives in `Z̄`).
pub fn cle_objective(state: &ManifoldState, params: &CleParams, split: &SemiPairedSplit) -> Result<f64> {
    if state.y.nrows() != split.n() {
        return Err(DmhError::shape(
            format!("{} rows", split.n()),
            format!("{} rows", state.y.nrows()),
            "state/split alignment",
        ));
    }
    Ok(cle_objective_parts(state, params).total())
}

// ---------------------------------------------------------------------------
// Full solver
// ---------------------------------------------------------------------------

/// Map local paired-pool indices to global object indices.
fn globalize(table: &Array2<usize>, pool: &[usize]) -> Array2<usize> {
    table.mapv(|j| pool[j])
}

/// Select the full neighbor table (global indices, all paired).
fn select_all_neighbors(z1: &Mat, z2: &Mat, split: &SemiPairedSplit, k: usize) -> Result<Array2<usize>> {
    let n = split.n();
    let z1_paired = z1.select(Axis(0), &split.paired);
    let z2_paired = z2.select(Axis(0), &split.paired);
    let mut table = Array2::<usize>::zeros((n, k));

    let paired_nb = globalize(&select_paired_neighbors(&z1_paired, &z2_paired, k)?, &split.paired);
    for (local, &i) in split.paired.iter().enumerate() {
        table.row_mut(i).assign(&paired_nb.row(local));
    }
    if !split.only1.is_empty() {
        let z1_only = z1.select(Axis(0), &split.only1);
        let nb = globalize(&select_unpaired_neighbors(&z1_only, &z1_paired, k)?, &split.paired);
        for (local, &i) in split.only1.iter().enumerate() {
            table.row_mut(i).assign(&nb.row(local));
        }
    }
    if !split.only2.is_empty() {
        let z2_only = z2.select(Axis(0), &split.only2);
        let nb = globalize(&select_unpaired_neighbors(&z2_only, &z2_paired, k)?, &split.paired);
        for (local, &i) in split.only2.iter().enumerate() {
            table.row_mut(i).assign(&nb.row(local));
        }
    }
    Ok(table)
}

/// Solve weights for one group of rows, given the space their centers
/// and neighbors live in.
fn solve_weight_rows(
    rows: &[usize],
    centers: &Mat,
    neighbor_source: &Mat,
    neighbors: &Array2<usize>,
    w: &mut Mat,
) -> Result<()> {
    let k = neighbors.ncols();
    let solved: Vec<(usize, Vec1)> = rows
        .par_iter()
        .map(|&i| {
            let nb_rows = neighbor_source.select(Axis(0), neighbors.row(i).as_slice().unwrap());
            update_weights(centers.row(i), &nb_rows).map(|wr| (i, wr))
        })
        .collect::<Result<Vec<_>>>()?;
    for (i, wr) in solved {
        for j in 0..k {
            w[[i, j]] = wr[j];
        }
    }
    Ok(())
}

/// Run the alternating solver on row-aligned feature matrices.
/// Unobserved rows of `z1`/`z2` are ignored (conventionally zero).
/// Initialization: `Qᵛ` random orthonormal, `Y ~ N(0, 0.01)`, `W`
/// uniform `1/k`, missing `Z̄` rows zero. Deterministic given `seed`.
pub fn run_cle(
    z1: &Mat,
    z2: &Mat,
    split: &SemiPairedSplit,
    params: &CleParams,
    seed: u64,
) -> Result<CleResult> {
    run_cle_with_mode(z1, z2, split, params, seed, ComplementMode::LocalWeights)
}

/// [`run_cle`] with an explicit complementation mode (the zero mode is
/// the ablation hook).
pub fn run_cle_with_mode(
    z1: &Mat,
    z2: &Mat,
    split: &SemiPairedSplit,
    params: &CleParams,
    seed: u64,
    mode: ComplementMode,
) -> Result<CleResult> {
    run_cle_with_mode_from(z1, z2, split, params, seed, mode, None)
}

/// [`run_cle_with_mode`] continued from an existing embedding instead
/// of a fresh random initialization. Only `Y` carries over: the
/// projections, weights, and completions are implied by it and the
/// current features, and are re-derived on the first sweep (the
/// feature spaces may have changed shape between rounds). Alternated
/// training passes the previous round's embedding here so successive
/// rounds stay in one rotation frame and converge jointly.
pub fn run_cle_with_mode_from(
    z1: &Mat,
    z2: &Mat,
    split: &SemiPairedSplit,
    params: &CleParams,
    seed: u64,
    mode: ComplementMode,
    warm_y: Option<&Mat>,
) -> Result<CleResult> {
    params.validate()?;
    split.validate()?;
    let n = split.n();
    if z1.nrows() != n || z2.nrows() != n {
        return Err(DmhError::shape(
            format!("{n} rows"),
            format!("{}/{} rows", z1.nrows(), z2.nrows()),
            "features must be row-aligned with the split",
        ));
    }
    let (dz1, dz2) = (z1.ncols(), z2.ncols());
    if params.d > dz1.min(dz2) {
        return Err(DmhError::Config(format!(
            "embedding dimension d={} exceeds min feature dimension {}",
            params.d,
            dz1.min(dz2)
        )));
    }
    if split.n_m() <= params.k {
        return Err(DmhError::Config(format!(
            "paired pool n_m={} cannot supply k={} neighbors",
            split.n_m(),
            params.k
        )));
    }
    let flags = split.observed_flags();
    for (i, &(o1, o2)) in flags.iter().enumerate() {
        let z1_ok = !o1 || z1.row(i).iter().all(|v| v.is_finite());
        let z2_ok = !o2 || z2.row(i).iter().all(|v| v.is_finite());
        if !z1_ok || !z2_ok {
            return Err(DmhError::Numeric(format!("non-finite features at row {i}")));
        }
    }

    let neighbors = select_all_neighbors(z1, z2, split, params.k)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q1_raw = random_gaussian(&mut rng, dz1, params.d, 1.0);
    let q2_raw = random_gaussian(&mut rng, dz2, params.d, 1.0);
    let y = match warm_y {
        Some(prev) => {
            if prev.dim() != (n, params.d) {
                return Err(DmhError::shape(
                    format!("{n}x{} warm embedding", params.d),
                    format!("{}x{}", prev.nrows(), prev.ncols()),
                    "warm-start embedding must match the current problem size",
                ));
            }
            if prev.iter().any(|v| !v.is_finite()) {
                return Err(DmhError::Numeric("non-finite warm-start embedding".into()));
            }
            prev.clone()
        }
        None => random_gaussian(&mut rng, n, params.d, 0.01),
    };
    let q1 = orthogonalize(&q1_raw)?;
    let q2 = orthogonalize(&q2_raw)?;

    // Missing Z̄ rows start at zero (complementation enters on the
    // first sweep, once weights exist).
    let (zbar1, zbar2) = complement_features(z1, z2, split, &Array2::zeros((n, params.k)), &neighbors, ComplementMode::Zero)?;

    let mut state = ManifoldState {
        y,
        q1,
        q2,
        w: Array2::from_elem((n, params.k), 1.0 / params.k as f64),
        neighbors,
        zbar1,
        zbar2,
    };

    let mut max_defect: f64 = orthonormality_defect(&state.q1).max(orthonormality_defect(&state.q2));
    let mut trace = vec![cle_objective_parts(&state, params).total()];
    let mut sweeps = 0;

    for _sweep in 0..params.max_iters {
        // Projections.
        let (q1, d1) = update_projection(&state.zbar1, &state.y)?;
        let (q2, d2) = update_projection(&state.zbar2, &state.y)?;
        state.q1 = q1;
        state.q2 = q2;
        max_defect = max_defect.max(d1).max(d2);

        // Weights: paired rows in embedding space, single-modality rows
        // in their observed feature space (stable across sweeps, cheap
        // to recompute).
        solve_weight_rows(&split.paired, &state.y, &state.y, &state.neighbors, &mut state.w)?;
        solve_weight_rows(&split.only1, z1, z1, &state.neighbors, &mut state.w)?;
        solve_weight_rows(&split.only2, z2, z2, &state.neighbors, &mut state.w)?;

        // Complementation.
        let (zb1, zb2) = complement_features(z1, z2, split, &state.w, &state.neighbors, mode)?;
        state.zbar1 = zb1;
        state.zbar2 = zb2;

        // Embedding rows, Gauss–Seidel in index order. The system
        // matrix and the projection parts of the right-hand side are
        // fixed within the sweep; only the neighbor pull changes.
        let d = params.d;
        let mut system = state.q1.t().dot(&state.q1) + &state.q2.t().dot(&state.q2);
        let shift = 2.0 * (params.lambda + params.eta * n as f64);
        for i in 0..d {
            system[[i, i]] += shift;
        }
        let solver = SpdSolver::new(&system)?;
        let base_rhs = state.zbar1.dot(&state.q1) + &state.zbar2.dot(&state.q2);
        for i in 0..n {
            let mut rhs = base_rhs.row(i).to_owned();
            for (jj, &nb) in state.neighbors.row(i).iter().enumerate() {
                let c = 2.0 * params.lambda * state.w[[i, jj]];
                rhs.iter_mut().zip(state.y.row(nb).iter()).for_each(|(r, y)| *r += c * y);
            }
            let yi = solver.solve_vec(&rhs)?;
            state.y.row_mut(i).assign(&yi);
        }

        sweeps += 1;
        let obj = cle_objective_parts(&state, params).total();
        let prev = *trace.last().unwrap();
        trace.push(obj);
        let rel = (prev - obj) / prev.abs().max(f64::MIN_POSITIVE);
        // The first sweep replaces zero-initialized missing rows of Z̄
        // with data-scale reconstructions, which raises the objective
        // by construction; the monotonicity diagnostic starts after
        // that.
        if sweeps > 1 && rel < -MONOTONE_SLACK {
            let msg = format!(
                "objective increased by {:.3e} (relative) on sweep {sweeps}",
                -rel
            );
            if params.strict {
                return Err(DmhError::Numeric(msg));
            }
            log::warn!("{msg}");
        }
        if rel.abs() < params.tol {
            break;
        }
    }

    Ok(CleResult { state, objective_trace: trace, sweeps, max_ortho_defect: max_defect })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_semi_paired, SyntheticConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn rng_mat(n: usize, d: usize, seed: u64, scale: f64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_gaussian(&mut rng, n, d, scale)
    }

    // --- neighbor selection ---

    #[test]
    fn identical_modalities_reduce_to_plain_knn() {
        let z = rng_mat(20, 4, 1, 1.0);
        let both = select_paired_neighbors(&z, &z, 3).unwrap();
        // Plain kNN oracle via the unpaired selector against the same
        // pool requires excluding self; do it by brute force.
        for i in 0..20 {
            let mut order: Vec<(f64, usize)> = (0..20)
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = z
                        .row(i)
                        .iter()
                        .zip(z.row(j).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d, j)
                })
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = order[..3].iter().map(|&(_, j)| j).collect();
            let mut got: Vec<usize> = both.row(i).to_vec();
            let mut want = expect.clone();
            got.sort_unstable();
            want.sort_unstable();
            assert_eq!(got, want, "row {i}");
        }
    }

    #[test]
    fn forced_geometry_selects_the_middle_point() {
        // Three collinear points; middle nearest to both ends in both
        // modalities.
        let z1 = array![[0.0], [1.0], [2.0]];
        let z2 = array![[0.0], [10.0], [20.0]];
        let nb = select_paired_neighbors(&z1, &z2, 1).unwrap();
        assert_eq!(nb[[0, 0]], 1);
        assert_eq!(nb[[2, 0]], 1);
    }

    #[test]
    fn neighbors_stay_within_well_separated_clusters() {
        let mut z1 = rng_mat(30, 3, 2, 0.1);
        let mut z2 = rng_mat(30, 3, 3, 0.1);
        for i in 15..30 {
            for j in 0..3 {
                z1[[i, j]] += 100.0;
                z2[[i, j]] += 100.0;
            }
        }
        let nb = select_paired_neighbors(&z1, &z2, 4).unwrap();
        for i in 0..30 {
            for &j in nb.row(i) {
                assert_eq!(i < 15, j < 15, "neighbor crossed the cluster gap");
            }
        }
    }

    #[test]
    fn disjoint_knn_lists_grow_until_intersection() {
        // Modality 2 reverses the order of modality 1 along a line, so
        // small candidate lists have empty intersections for middle
        // points.
        let n = 12;
        let z1 = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        let z2 = Array2::from_shape_fn((n, 1), |(i, _)| ((i * 5) % n) as f64);
        let nb = select_paired_neighbors(&z1, &z2, 2).unwrap();
        for i in 0..n {
            assert_eq!(nb.row(i).len(), 2);
            for &j in nb.row(i) {
                assert_ne!(j, i);
            }
        }
    }

    #[test]
    fn unpaired_selection_matches_brute_force() {
        let unpaired = rng_mat(50, 4, 4, 1.0);
        let paired = rng_mat(23, 4, 5, 1.0);
        let nb = select_unpaired_neighbors(&unpaired, &paired, 5).unwrap();
        for i in 0..50 {
            let mut order: Vec<(f64, usize)> = (0..23)
                .map(|j| {
                    let d: f64 = unpaired
                        .row(i)
                        .iter()
                        .zip(paired.row(j).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d, j)
                })
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = order[..5].iter().map(|&(_, j)| j).collect();
            assert_eq!(nb.row(i).to_vec(), expect, "row {i}");
        }
    }

    #[test]
    fn unpaired_duplicate_point_is_its_own_first_neighbor() {
        let paired = rng_mat(8, 3, 6, 1.0);
        let unpaired = paired.select(Axis(0), &[4]);
        let nb = select_unpaired_neighbors(&unpaired, &paired, 3).unwrap();
        assert_eq!(nb[[0, 0]], 4);
        // k = n_m returns everyone sorted by distance.
        let all = select_unpaired_neighbors(&unpaired, &paired, 8).unwrap();
        assert_eq!(all.row(0).len(), 8);
        assert_eq!(all[[0, 0]], 4);
    }

    #[test]
    fn neighbor_selection_rejects_small_pools() {
        let z = rng_mat(3, 2, 7, 1.0);
        assert!(select_paired_neighbors(&z, &z, 3).is_err());
        assert!(select_unpaired_neighbors(&z, &rng_mat(2, 2, 8, 1.0), 3).is_err());
    }

    // --- weights ---

    #[test]
    fn single_neighbor_weight_is_one() {
        let center = array![1.0, 2.0];
        let nb = array![[0.5, 0.5]];
        let w = update_weights(center.view(), &nb).unwrap();
        assert_eq!(w.len(), 1);
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn symmetric_neighbors_share_weight() {
        let center = array![0.0, 0.0];
        let nb = array![[1.0, 0.0], [0.0, 1.0]];
        let w = update_weights(center.view(), &nb).unwrap();
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn weights_sum_to_one_even_when_degenerate() {
        // Collinear duplicate neighbors → singular A → regularized.
        let center = array![0.0, 0.0];
        let nb = array![[1.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let w = update_weights(center.view(), &nb).unwrap();
        assert_abs_diff_eq!(w.sum(), 1.0, epsilon = 1e-12);
        // All neighbors equal the center → uniform fallback.
        let nb = array![[0.0, 0.0], [0.0, 0.0]];
        let w = update_weights(center.view(), &nb).unwrap();
        assert_eq!(w, array![0.5, 0.5]);
    }

    #[test]
    fn weights_reject_non_finite() {
        let center = array![f64::NAN, 0.0];
        let nb = array![[1.0, 0.0]];
        assert!(update_weights(center.view(), &nb).is_err());
    }

    #[test]
    fn weight_rows_sum_to_one_across_a_real_run() {
        let cfg = SyntheticConfig { n_total: 60, d1: 8, d2: 7, d_latent: 3, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let split = make_semi_paired(&ds, 0.6, 3, 1).unwrap();
        let z2 = split.shuffled_x2(&ds.x2).unwrap();
        let params = CleParams { d: 4, max_iters: 5, ..Default::default() };
        let r = run_cle(&ds.x1, &z2, &split, &params, 11).unwrap();
        for i in 0..split.n() {
            assert_abs_diff_eq!(r.state.w.row(i).sum(), 1.0, epsilon = 1e-10);
        }
    }

    // --- complementation ---

    #[test]
    fn one_hot_weight_copies_the_neighbor_row() {
        let cfg = SyntheticConfig { n_total: 12, d1: 4, d2: 4, d_latent: 2, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let split = make_semi_paired(&ds, 0.5, 2, 2).unwrap();
        let z2 = split.shuffled_x2(&ds.x2).unwrap();
        let k = 2;
        let neighbors = select_all_neighbors(&ds.x1, &z2, &split, k).unwrap();
        let mut w = Array2::<f64>::zeros((split.n(), k));
        for i in 0..split.n() {
            w[[i, 0]] = 1.0;
        }
        let (zb1, zb2) = complement_features(&ds.x1, &z2, &split, &w, &neighbors, ComplementMode::LocalWeights).unwrap();
        for &i in &split.only2 {
            assert_eq!(zb1.row(i), ds.x1.row(neighbors[[i, 0]]));
        }
        for &i in &split.only1 {
            assert_eq!(zb2.row(i), z2.row(neighbors[[i, 0]]));
        }
        // Observed rows are copied verbatim.
        for &i in &split.paired {
            assert_eq!(zb1.row(i), ds.x1.row(i));
            assert_eq!(zb2.row(i), z2.row(i));
        }
    }

    #[test]
    fn fully_paired_complementation_is_identity() {
        let cfg = SyntheticConfig { n_total: 10, d1: 3, d2: 3, d_latent: 2, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let split = make_semi_paired(&ds, 1.0, 2, 2).unwrap();
        let neighbors = select_all_neighbors(&ds.x1, &ds.x2, &split, 2).unwrap();
        let w = Array2::from_elem((10, 2), 0.5);
        let (zb1, zb2) = complement_features(&ds.x1, &ds.x2, &split, &w, &neighbors, ComplementMode::LocalWeights).unwrap();
        assert_eq!(zb1, ds.x1);
        assert_eq!(zb2, ds.x2);
    }

    #[test]
    fn complementation_is_idempotent() {
        let cfg = SyntheticConfig { n_total: 20, d1: 5, d2: 6, d_latent: 2, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let split = make_semi_paired(&ds, 0.5, 2, 3).unwrap();
        let z2 = split.shuffled_x2(&ds.x2).unwrap();
        let neighbors = select_all_neighbors(&ds.x1, &z2, &split, 2).unwrap();
        let mut w = Array2::from_elem((20, 2), 0.5);
        w[[3, 0]] = 0.25;
        w[[3, 1]] = 0.75;
        let (a1, a2) = complement_features(&ds.x1, &z2, &split, &w, &neighbors, ComplementMode::LocalWeights).unwrap();
        let (b1, b2) = complement_features(&a1, &a2, &split, &w, &neighbors, ComplementMode::LocalWeights).unwrap();
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
    }

    #[test]
    fn zero_mode_zeroes_missing_rows() {
        let cfg = SyntheticConfig { n_total: 14, d1: 3, d2: 3, d_latent: 2, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let split = make_semi_paired(&ds, 0.5, 2, 4).unwrap();
        let z2 = split.shuffled_x2(&ds.x2).unwrap();
        let neighbors = select_all_neighbors(&ds.x1, &z2, &split, 2).unwrap();
        let w = Array2::from_elem((14, 2), 0.5);
        let (zb1, _) = complement_features(&ds.x1, &z2, &split, &w, &neighbors, ComplementMode::Zero).unwrap();
        for &i in &split.only2 {
            assert!(zb1.row(i).iter().all(|&v| v == 0.0));
        }
    }

    // --- projections ---

    #[test]
    fn orthogonalize_fixed_points_and_scaling() {
        let q = orthogonalize(&rng_mat(8, 3, 9, 1.0)).unwrap();
        let q2 = orthogonalize(&q).unwrap();
        assert!(crate::linalg::fro_norm(&(&q2 - &q)) < 1e-12);
        let eye = Array2::<f64>::eye(4);
        let scaled = &eye * 2.0;
        let q3 = orthogonalize(&scaled).unwrap();
        assert!(crate::linalg::fro_norm(&(&q3 - &eye)) < 1e-12);
    }

    #[test]
    fn orthogonalize_handles_rank_deficiency() {
        let mut m = Array2::<f64>::zeros((6, 3));
        for i in 0..6 {
            m[[i, 0]] = i as f64 + 1.0;
            m[[i, 1]] = 2.0 * (i as f64 + 1.0); // collinear with column 0
            m[[i, 2]] = if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let q = orthogonalize(&m).unwrap();
        assert!(orthonormality_defect(&q) < 1e-9);
    }

    #[test]
    fn projection_recovers_planted_orthonormal_map() {
        let q_star = orthogonalize(&rng_mat(10, 4, 12, 1.0)).unwrap();
        let y = rng_mat(40, 4, 13, 1.0);
        let zbar = y.dot(&q_star.t());
        let (q, defect) = update_projection(&zbar, &y).unwrap();
        assert!(defect <= ORTHO_TOL);
        assert!(crate::linalg::fro_norm(&(&q - &q_star)) < 1e-6);
    }

    #[test]
    fn projection_rejects_d_above_feature_dim() {
        let y = rng_mat(10, 5, 14, 1.0);
        let zbar = rng_mat(10, 3, 15, 1.0);
        assert!(matches!(update_projection(&zbar, &y), Err(DmhError::Config(_))));
    }

    #[test]
    fn identity_embedding_projects_the_features() {
        // Y = I → Gram = I → M = Z̄ᵀ, then orthogonalized.
        let n = 4;
        let y = Array2::<f64>::eye(n);
        let zbar = rng_mat(n, 4, 16, 1.0);
        let (q, _) = update_projection(&zbar, &y).unwrap();
        let direct = orthogonalize(&zbar.t().to_owned().dot(&Array2::eye(n))).unwrap();
        assert!(crate::linalg::fro_norm(&(&q - &direct)) < 1e-10);
    }

    // --- embedding rows ---

    #[test]
    fn embedding_row_collapses_to_projection_average() {
        // λ=0, η=0, orthonormal projections → y = ½(Q1ᵀz̄¹ + Q2ᵀz̄²).
        let q1 = orthogonalize(&rng_mat(6, 3, 17, 1.0)).unwrap();
        let q2 = orthogonalize(&rng_mat(5, 3, 18, 1.0)).unwrap();
        let z1 = rng_mat(1, 6, 19, 1.0);
        let z2 = rng_mat(1, 5, 20, 1.0);
        let w = array![0.5, 0.5];
        let ny = rng_mat(2, 3, 21, 1.0);
        let y = update_embedding_row(z1.row(0), z2.row(0), &q1, &q2, w.view(), &ny, 0.0, 0.0, 10).unwrap();
        let expect = (q1.t().dot(&z1.row(0)) + q2.t().dot(&z2.row(0))) / 2.0;
        for i in 0..3 {
            assert_abs_diff_eq!(y[i], expect[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_inputs_give_zero_row() {
        let q1 = orthogonalize(&rng_mat(6, 3, 22, 1.0)).unwrap();
        let q2 = orthogonalize(&rng_mat(6, 3, 23, 1.0)).unwrap();
        let z = Array2::<f64>::zeros((1, 6));
        let ny = Array2::<f64>::zeros((2, 3));
        let w = array![0.3, 0.7];
        let y = update_embedding_row(z.row(0), z.row(0), &q1, &q2, w.view(), &ny, 0.5, 0.1, 7).unwrap();
        assert!(y.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn embedding_row_zeroes_the_per_row_gradient() {
        // Central finite differences of the per-row objective at the
        // returned point.
        let n = 9;
        let q1 = orthogonalize(&rng_mat(7, 3, 24, 1.0)).unwrap();
        let q2 = orthogonalize(&rng_mat(6, 3, 25, 1.0)).unwrap();
        let z1 = rng_mat(1, 7, 26, 1.0);
        let z2 = rng_mat(1, 6, 27, 1.0);
        let ny = rng_mat(3, 3, 28, 1.0);
        let w = array![0.2, 0.5, 0.3];
        let (lambda, eta) = (0.3, 0.05);
        let y = update_embedding_row(z1.row(0), z2.row(0), &q1, &q2, w.view(), &ny, lambda, eta, n).unwrap();

        let loss = |yv: &Vec1| -> f64 {
            let r1 = &z1.row(0).to_owned() - &q1.dot(yv);
            let r2 = &z2.row(0).to_owned() - &q2.dot(yv);
            let mut local = yv.clone();
            for (j, &wj) in w.iter().enumerate() {
                local.iter_mut().zip(ny.row(j).iter()).for_each(|(l, y)| *l -= wj * y);
            }
            (r1.iter().map(|v| v * v).sum::<f64>() + r2.iter().map(|v| v * v).sum::<f64>())
                / (2.0 * n as f64)
                + lambda / n as f64 * local.iter().map(|v| v * v).sum::<f64>()
                + eta * yv.iter().map(|v| v * v).sum::<f64>()
        };
        let h = 1e-6;
        let mut grad_norm: f64 = 0.0;
        for i in 0..3 {
            let mut p = y.clone();
            p[i] += h;
            let mut m = y.clone();
            m[i] -= h;
            grad_norm = grad_norm.max(((loss(&p) - loss(&m)) / (2.0 * h)).abs());
        }
        assert!(grad_norm < 1e-9, "fd gradient at solution: {grad_norm}");
    }

    // --- objective and full runs ---

    #[test]
    fn objective_is_gauge_invariant_under_rotation() {
        let cfg = SyntheticConfig { n_total: 30, d1: 6, d2: 5, d_latent: 3, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let split = make_semi_paired(&ds, 0.6, 2, 5).unwrap();
        let z2 = split.shuffled_x2(&ds.x2).unwrap();
        let params = CleParams { d: 3, k: 2, max_iters: 3, ..Default::default() };
        let r = run_cle(&ds.x1, &z2, &split, &params, 6).unwrap();
        let before = cle_objective(&r.state, &params, &split).unwrap();
        let rot = orthogonalize(&rng_mat(3, 3, 30, 1.0)).unwrap();
        let mut rotated = r.state.clone();
        rotated.y = rotated.y.dot(&rot);
        rotated.q1 = rotated.q1.dot(&rot);
        rotated.q2 = rotated.q2.dot(&rot);
        let after = cle_objective(&rotated, &params, &split).unwrap();
        assert_abs_diff_eq!(before, after, epsilon = 1e-9 * before.abs().max(1.0));
    }

    #[test]
    fn unit_norm_embedding_counts_eta_per_row() {
        // η term only: Y with unit-norm rows gives η·n.
        let n = 7;
        let params = CleParams { lambda: 0.0, eta: 0.3, k: 1, d: 2, ..Default::default() };
        let mut y = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            y[[i, 0]] = 1.0;
        }
        let state = ManifoldState {
            y,
            q1: Array2::eye(2),
            q2: Array2::eye(2),
            w: Array2::from_elem((n, 1), 1.0),
            neighbors: Array2::zeros((n, 1)),
            zbar1: Array2::zeros((n, 2)),
            zbar2: Array2::zeros((n, 2)),
        };
        let parts = cle_objective_parts(&state, &params);
        assert_abs_diff_eq!(parts.regularization, 0.3 * n as f64, epsilon = 1e-12);
    }

    #[test]
    fn tolerance_infinity_runs_one_sweep() {
        let cfg = SyntheticConfig { n_total: 20, d1: 4, d2: 4, d_latent: 2, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let split = make_semi_paired(&ds, 1.0, 2, 1).unwrap();
        let params = CleParams { d: 2, k: 2, tol: f64::INFINITY, ..Default::default() };
        let r = run_cle(&ds.x1, &ds.x2, &split, &params, 1).unwrap();
        assert_eq!(r.sweeps, 1);
    }

    #[test]
    fn model_class_data_reaches_zero_reconstruction() {
        // Z̄ᵛ = Y* Qᵛ*ᵀ exactly; with λ=η=0 the alternation lands on a
        // zero-reconstruction fixed point.
        let (n, dz, d) = (40, 8, 3);
        let y_star = rng_mat(n, d, 31, 1.0);
        let q1_star = orthogonalize(&rng_mat(dz, d, 32, 1.0)).unwrap();
        let q2_star = orthogonalize(&rng_mat(dz, d, 33, 1.0)).unwrap();
        let z1 = y_star.dot(&q1_star.t());
        let z2 = y_star.dot(&q2_star.t());
        let ds = crate::data::MultimodalDataset::new(z1.clone(), z2.clone(), None).unwrap();
        let split = make_semi_paired(&ds, 1.0, 2, 0).unwrap();
        let params = CleParams {
            lambda: 0.0,
            eta: 0.0,
            k: 2,
            d,
            max_iters: 50,
            tol: 1e-16,
            strict: false,
        };
        let r = run_cle(&z1, &z2, &split, &params, 34).unwrap();
        let parts = cle_objective_parts(&r.state, &params);
        assert!(
            parts.reconstruction < 1e-6,
            "reconstruction stayed at {}",
            parts.reconstruction
        );
        assert!(r.max_ortho_defect <= ORTHO_TOL);
    }

    #[test]
    fn objective_stabilizes_and_improves_on_random_data() {
        // The projection step projects the unconstrained least-squares
        // solution onto the orthonormal frames, which is not an exact
        // constrained minimizer — so per-sweep monotonicity is not
        // guaranteed. What must hold: the trace stabilizes, and the
        // solver ends well below where it started.
        let cfg = SyntheticConfig { n_total: 50, d1: 8, d2: 7, d_latent: 3, noise_sigma: 0.2, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let split = make_semi_paired(&ds, 0.5, 3, 8).unwrap();
        let z2 = split.shuffled_x2(&ds.x2).unwrap();
        let params = CleParams { d: 4, max_iters: 30, tol: 0.0, ..Default::default() };
        let r = run_cle(&ds.x1, &z2, &split, &params, 9).unwrap();
        assert_eq!(r.sweeps, 30);
        let t = &r.objective_trace;
        assert!(t.iter().all(|v| v.is_finite()));
        assert!(r.final_objective() < t[0], "no net improvement");
        let last = t[t.len() - 1];
        let prev = t[t.len() - 2];
        assert!(
            ((prev - last) / prev.abs()).abs() < 1e-4,
            "trace did not stabilize: {prev} -> {last}"
        );
    }

    #[test]
    fn strict_mode_reports_objective_increases() {
        // Same instance as above: the projection approximation is known
        // to raise the objective on some sweeps; strict mode must turn
        // that warning into an error.
        let cfg = SyntheticConfig { n_total: 50, d1: 8, d2: 7, d_latent: 3, noise_sigma: 0.2, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let split = make_semi_paired(&ds, 0.5, 3, 8).unwrap();
        let z2 = split.shuffled_x2(&ds.x2).unwrap();
        let params = CleParams { d: 4, max_iters: 30, tol: 0.0, strict: true, ..Default::default() };
        match run_cle(&ds.x1, &z2, &split, &params, 9) {
            Err(DmhError::Numeric(msg)) => assert!(msg.contains("increased"), "unexpected message: {msg}"),
            other => panic!("expected strict-mode diagnostic, got {other:?}"),
        }
    }

    #[test]
    fn run_is_deterministic_given_seed() {
        let cfg = SyntheticConfig { n_total: 30, d1: 5, d2: 5, d_latent: 2, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let split = make_semi_paired(&ds, 0.7, 2, 3).unwrap();
        let z2 = split.shuffled_x2(&ds.x2).unwrap();
        let params = CleParams { d: 3, k: 2, max_iters: 6, ..Default::default() };
        let a = run_cle(&ds.x1, &z2, &split, &params, 42).unwrap();
        let b = run_cle(&ds.x1, &z2, &split, &params, 42).unwrap();
        assert_eq!(a.state.y, b.state.y);
        assert_eq!(a.objective_trace, b.objective_trace);
    }

    #[test]
    fn run_rejects_oversized_embedding_dim() {
        let cfg = SyntheticConfig { n_total: 20, d1: 4, d2: 4, d_latent: 2, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let split = make_semi_paired(&ds, 1.0, 2, 1).unwrap();
        let params = CleParams { d: 5, k: 2, ..Default::default() };
        assert!(matches!(
            run_cle(&ds.x1, &ds.x2, &split, &params, 1),
            Err(DmhError::Config(_))
        ));
    }
}
