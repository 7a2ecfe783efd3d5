//! Global binary embedding: turn modality-invariant features `Y` into
//! c-bit codes.
//!
//! The target similarity distribution comes from inner products of `Y`
//! rows (negative products clamped at a tiny ε before normalization);
//! the code-space distribution puts a Student-t kernel `(1 + D)⁻¹` on
//! the relaxed Hamming distance `D = ¼‖ĥ_i − ĥ_j‖²`. The loss is the
//! KL divergence between the two plus a quantization penalty
//! `γ Σ ‖ĥ − sign(ĥ)‖²`, minimized by full-batch gradient descent with
//! a monotonicity guard: any step that would increase the loss halves
//! the working learning rate (up to 20 times, then the solver stops).
//!
//! Per-row initialization is keyed by the row *content* (hashed
//! together with the seed), so permuting the rows of `Y` permutes the
//! returned codes the same way.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DmhError, Result};
use crate::linalg::{random_gaussian, sign_pm1};
use crate::Mat;

/// Clamp for non-positive inner products in the target distribution.
pub const INNER_EPS: f64 = 1e-12;

/// Maximum learning-rate halvings before the solver gives up on
/// decreasing the loss further.
const MAX_HALVINGS: usize = 20;

/// A pairwise similarity distribution: zero diagonal, nonnegative,
/// off-diagonal entries summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityDistribution {
    pub s: Mat,
}

impl SimilarityDistribution {
    /// Check the distribution invariants (nonnegativity, zero diagonal,
    /// total mass 1 within 1e-9).
    pub fn validate(&self) -> Result<()> {
        let (r, c) = self.s.dim();
        if r != c {
            return Err(DmhError::shape("square", format!("{r}x{c}"), "similarity distribution"));
        }
        let mut total = 0.0;
        for i in 0..r {
            for j in 0..c {
                let v = self.s[[i, j]];
                if i == j && v != 0.0 {
                    return Err(DmhError::Numeric("similarity diagonal must be zero".into()));
                }
                if v < 0.0 || !v.is_finite() {
                    return Err(DmhError::Numeric(format!("invalid similarity entry {v}")));
                }
                total += v;
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(DmhError::Numeric(format!("similarity mass {total} != 1")));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.s.nrows()
    }
}

/// Relaxed and binarized codes.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrices {
    /// n × c relaxed (real-valued) codes.
    pub hhat: Mat,
    /// n × c codes in {−1, +1}, `h = sign(hhat)` with `sign(0) = −1`.
    pub h: Mat,
    /// Bit length.
    pub c: usize,
}

impl CodeMatrices {
    pub fn from_relaxed(hhat: Mat) -> Self {
        let h = binarize(&hhat);
        let c = hhat.ncols();
        CodeMatrices { hhat, h, c }
    }
}

/// Solver parameters for the binary embedding.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GbeParams {
    /// Quantization weight γ.
    pub gamma: f64,
    /// Base learning rate λ_h for full-batch descent.
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop when the relative loss decrease falls below this.
    pub tol: f64,
    pub seed: u64,
    /// Optional stochastic mode: each iteration updates a uniformly
    /// drawn block of this many rows using the similarity
    /// distributions restricted to the block. Approximate (no
    /// monotonicity guard, loss trace holds block losses) but able to
    /// leave the near-uniform kernel plateau that traps monotone
    /// full-batch descent, so the standard training configuration
    /// turns it on. Off by default here.
    pub row_subsample: Option<usize>,
}

impl Default for GbeParams {
    fn default() -> Self {
        GbeParams {
            gamma: 0.01,
            learning_rate: 15.0,
            max_iters: 150,
            tol: 1e-5,
            seed: 0,
            row_subsample: None,
        }
    }
}

impl GbeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(DmhError::Config("gamma must be finite and nonnegative".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(DmhError::Config("learning_rate must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(DmhError::Config("max_iters must be positive".into()));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(DmhError::Config("tol must be nonnegative".into()));
        }
        if let Some(m) = self.row_subsample {
            if m < 2 {
                return Err(DmhError::Config("row_subsample must be at least 2".into()));
            }
        }
        Ok(())
    }
}

/// Elementwise sign with `sign(0) = −1`.
pub fn binarize(hhat: &Mat) -> Mat {
    hhat.mapv(sign_pm1)
}

/// Target distribution from embedding inner products:
/// `S_ij = max(y_iᵀy_j, ε) / Σ_{p≠q} max(y_pᵀy_q, ε)`.
///
/// Errors when every off-diagonal inner product is ≤ 0 — the clamp
/// would fabricate a uniform distribution out of no signal, so the
/// caller must inspect `Y` instead.
pub fn similarity_from_embedding(y: &Mat) -> Result<SimilarityDistribution> {
    let n = y.nrows();
    if n < 2 {
        return Err(DmhError::Config(format!("similarity needs n >= 2 rows, got {n}")));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(DmhError::Numeric("non-finite values in embedding".into()));
    }
    let mut s = y.dot(&y.t());
    let mut any_positive = false;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                s[[i, j]] = 0.0;
            } else {
                let v = s[[i, j]];
                if v > 0.0 {
                    any_positive = true;
                }
                let clamped = v.max(INNER_EPS);
                s[[i, j]] = clamped;
                total += clamped;
            }
        }
    }
    if !any_positive {
        return Err(DmhError::Numeric(
            "degenerate similarity: every off-diagonal inner product is <= 0".into(),
        ));
    }
    s.mapv_inplace(|v| v / total);
    Ok(SimilarityDistribution { s })
}

/// Gram matrix and its diagonal (squared row norms).
fn gram(hhat: &Mat) -> (Mat, Vec<f64>) {
    let g = hhat.dot(&hhat.t());
    let sq = g.diag().to_vec();
    (g, sq)
}

/// Student-t kernel value for rows `i, j` given the Gram data:
/// `(1 + ¼‖ĥ_i − ĥ_j‖²)⁻¹`.
#[inline]
fn kernel(g_ij: f64, sq_i: f64, sq_j: f64) -> f64 {
    let d = 0.25 * (sq_i + sq_j - 2.0 * g_ij).max(0.0);
    1.0 / (1.0 + d)
}

/// Code-space distribution under the Student-t kernel on relaxed
/// Hamming distance.
pub fn similarity_from_codes(hhat: &Mat) -> Result<SimilarityDistribution> {
    let n = hhat.nrows();
    if n < 2 {
        return Err(DmhError::Config(format!("similarity needs n >= 2 rows, got {n}")));
    }
    let (g, sq) = gram(hhat);
    let mut s = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let k = kernel(g[[i, j]], sq[i], sq[j]);
                s[[i, j]] = k;
                total += k;
            }
        }
    }
    s.mapv_inplace(|v| v / total);
    Ok(SimilarityDistribution { s })
}

/// `Σ_i ‖ĥ_i − sign(ĥ_i)‖²`.
pub fn quantization_gap(hhat: &Mat) -> f64 {
    hhat.iter()
        .map(|&v| {
            let d = v - sign_pm1(v);
            d * d
        })
        .sum()
}

/// Precomputed pieces of the target distribution that stay fixed
/// across descent iterations.
struct TargetTerms {
    /// `P + Pᵀ` (zero diagonal).
    p_sym: Mat,
    /// `Σ_{i≠j} P_ij ln P_ij` with `0·ln 0 = 0`.
    p_logp: f64,
}

impl TargetTerms {
    fn new(s_y: &SimilarityDistribution) -> Self {
        let p = &s_y.s;
        let p_sym = p + &p.t();
        let p_logp = p
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| v * v.ln())
            .sum();
        TargetTerms { p_sym, p_logp }
    }
}

/// Loss given the Gram data of the current `Ĥ`. Uses the identity
/// `KL = Σ p ln p − Σ p ln K + ln Z` (valid because `Σ p = 1`), with
/// the `Σ p ln K` term folded over the upper triangle of the symmetric
/// kernel.
fn loss_from_gram(t: &TargetTerms, g: &Mat, sq: &[f64], hhat: &Mat, gamma: f64) -> f64 {
    let n = g.nrows();
    let mut z = 0.0;
    let mut p_logk = 0.0;
    for i in 0..n {
        let gr = g.row(i);
        let gr = gr.as_slice().expect("standard layout");
        let pr = t.p_sym.row(i);
        let pr = pr.as_slice().expect("standard layout");
        for j in (i + 1)..n {
            let d = 0.25 * (sq[i] + sq[j] - 2.0 * gr[j]).max(0.0);
            let k = 1.0 / (1.0 + d);
            z += 2.0 * k;
            // ln K = −ln(1+D); p_sym folds both (i,j) and (j,i).
            p_logk -= pr[j] * (1.0 + d).ln();
        }
    }
    let kl = t.p_logp - p_logk + z.ln();
    kl + gamma * quantization_gap(hhat)
}

/// Gradient given the Gram data of the current `Ĥ`:
/// `½ (diag(C·1) − C) Ĥ + 2γ(Ĥ − sign Ĥ)` with
/// `C_ij = (P_ij + P_ji − Q_ij − Q_ji) K_ij` and `Q = K / Z`.
fn grad_from_gram(t: &TargetTerms, g: &Mat, sq: &[f64], hhat: &Mat, gamma: f64) -> Mat {
    let n = g.nrows();
    let mut k = Array2::<f64>::zeros((n, n));
    let mut z = 0.0;
    for i in 0..n {
        let gr = g.row(i);
        let gr = gr.as_slice().expect("standard layout");
        for j in (i + 1)..n {
            let v = kernel(gr[j], sq[i], sq[j]);
            k[[i, j]] = v;
            k[[j, i]] = v;
            z += 2.0 * v;
        }
    }
    // C = p_sym ∘ K − 2K²/Z, reusing the kernel buffer.
    let mut row_sums = vec![0.0; n];
    for i in 0..n {
        let mut krow = k.row_mut(i);
        let krow = krow.as_slice_mut().expect("standard layout");
        let pr = t.p_sym.row(i);
        let pr = pr.as_slice().expect("standard layout");
        let mut acc = 0.0;
        for j in 0..n {
            if j != i {
                let kv = krow[j];
                let cv = pr[j] * kv - 2.0 * kv * kv / z;
                krow[j] = cv;
                acc += cv;
            }
        }
        row_sums[i] = acc;
    }
    let mut grad = k.dot(hhat); // now C·Ĥ
    for (i, mut row) in grad.outer_iter_mut().enumerate() {
        let h_row = hhat.row(i);
        for (j, gv) in row.iter_mut().enumerate() {
            let h = h_row[j];
            *gv = 0.5 * (row_sums[i] * h - *gv) + 2.0 * gamma * (h - sign_pm1(h));
        }
    }
    grad
}

/// KL divergence between the target distribution and the code-space
/// distribution of `Ĥ`, plus the γ-weighted quantization gap.
pub fn gbe_loss(s_y: &SimilarityDistribution, hhat: &Mat, gamma: f64) -> f64 {
    let t = TargetTerms::new(s_y);
    let (g, sq) = gram(hhat);
    loss_from_gram(&t, &g, &sq, hhat, gamma)
}

/// Exact gradient of [`gbe_loss`] with respect to `Ĥ`, treating
/// `sign(ĥ)` as a constant target (the quantization term is
/// differentiated piecewise away from zero).
pub fn gbe_gradient(s_y: &SimilarityDistribution, hhat: &Mat, gamma: f64) -> Mat {
    let t = TargetTerms::new(s_y);
    let (g, sq) = gram(hhat);
    grad_from_gram(&t, &g, &sq, hhat, gamma)
}

/// Result of a binary-embedding run.
#[derive(Debug, Clone)]
pub struct GbeResult {
    pub codes: CodeMatrices,
    /// Loss after initialization and after every accepted step.
    pub loss_trace: Vec<f64>,
    /// Accepted descent steps.
    pub iters: usize,
}

impl GbeResult {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace never empty")
    }
}

/// FNV-1a hash of a row's bit pattern, mixed into the seed for
/// content-keyed per-row initialization.
fn row_content_hash(row: ndarray::ArrayView1<f64>) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &v in row.iter() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

fn init_relaxed(y: &Mat, c: usize, seed: u64) -> Mat {
    let n = y.nrows();
    let mut hhat = Array2::<f64>::zeros((n, c));
    for (i, yrow) in y.outer_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(row_content_hash(yrow));
        let row = random_gaussian(&mut rng, 1, c, 0.1);
        hhat.row_mut(i).assign(&row.row(0));
    }
    hhat
}

/// Learn c-bit codes for the rows of `Y` by gradient descent on
/// [`gbe_loss`]. Initialization is `N(0, 0.1)` per entry, keyed by
/// `(seed, row content)`. Deterministic given the seed.
pub fn run_gbe(y: &Mat, params: &GbeParams, c: usize) -> Result<GbeResult> {
    run_gbe_from(y, params, c, None)
}

/// [`run_gbe`] continued from an existing relaxed code matrix instead
/// of a fresh random initialization. The divergence objective is
/// invariant under bit permutations and sign flips, so alternated
/// training passes the previous round's Ĥ here to keep successive
/// rounds in the same symmetry coset.
pub fn run_gbe_from(y: &Mat, params: &GbeParams, c: usize, init: Option<&Mat>) -> Result<GbeResult> {
    params.validate()?;
    if c == 0 {
        return Err(DmhError::Config("code length c must be positive".into()));
    }
    if let Some(h0) = init {
        if h0.dim() != (y.nrows(), c) {
            return Err(DmhError::shape(
                format!("{}x{}", y.nrows(), c),
                format!("{}x{}", h0.nrows(), h0.ncols()),
                "warm-start code matrix",
            ));
        }
        if !h0.iter().all(|v| v.is_finite()) {
            return Err(DmhError::Numeric("non-finite warm-start code matrix".into()));
        }
    }
    if let Some(m) = params.row_subsample {
        if m < y.nrows() {
            return run_gbe_subsampled(y, params, c, m, init);
        }
    }
    let s_y = similarity_from_embedding(y)?;
    let t = TargetTerms::new(&s_y);
    let mut hhat = match init {
        Some(h0) => h0.clone(),
        None => init_relaxed(y, c, params.seed),
    };
    let (mut g, mut sq) = gram(&hhat);
    let mut loss = loss_from_gram(&t, &g, &sq, &hhat, params.gamma);
    if !loss.is_finite() {
        return Err(DmhError::Numeric(format!("non-finite loss at initialization: {loss}")));
    }
    let mut trace = vec![loss];
    let mut lr = params.learning_rate;
    let mut iters = 0;

    'outer: for iter in 1..=params.max_iters {
        let grad = grad_from_gram(&t, &g, &sq, &hhat, params.gamma);
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(DmhError::Numeric(format!("non-finite gradient at iteration {iter}")));
        }
        let mut halvings = 0;
        let (cand, g_cand, sq_cand, loss_cand) = loop {
            let cand = &hhat - &(lr * &grad);
            let (gc, sqc) = gram(&cand);
            let lc = loss_from_gram(&t, &gc, &sqc, &cand, params.gamma);
            if lc <= loss {
                break (cand, gc, sqc, lc);
            }
            if halvings == MAX_HALVINGS {
                // The loss cannot be decreased along the gradient at
                // representable step sizes; keep the current iterate.
                break 'outer;
            }
            halvings += 1;
            lr *= 0.5;
        };
        hhat = cand;
        g = g_cand;
        sq = sq_cand;
        iters = iter;
        let rel = (loss - loss_cand) / loss.abs().max(f64::MIN_POSITIVE);
        loss = loss_cand;
        trace.push(loss);
        if rel < params.tol {
            break;
        }
    }

    Ok(GbeResult {
        codes: CodeMatrices::from_relaxed(hhat),
        loss_trace: trace,
        iters,
    })
}

/// Stochastic variant: each iteration draws a uniform block of rows
/// and applies one descent step of the block-restricted objective.
fn run_gbe_subsampled(
    y: &Mat,
    params: &GbeParams,
    c: usize,
    m: usize,
    init: Option<&Mat>,
) -> Result<GbeResult> {
    use rand::seq::SliceRandom;
    let n = y.nrows();
    let mut hhat = match init {
        Some(h0) => h0.clone(),
        None => init_relaxed(y, c, params.seed),
    };
    let mut trace = Vec::with_capacity(params.max_iters);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x9e3779b97f4a7c15);
    let mut order: Vec<usize> = (0..n).collect();
    for iter in 1..=params.max_iters {
        order.shuffle(&mut rng);
        let block: Vec<usize> = {
            let mut b = order[..m].to_vec();
            b.sort_unstable();
            b
        };
        let y_block = y.select(ndarray::Axis(0), &block);
        let h_block = hhat.select(ndarray::Axis(0), &block);
        let s_y = similarity_from_embedding(&y_block)?;
        let t = TargetTerms::new(&s_y);
        let (g, sq) = gram(&h_block);
        let grad = grad_from_gram(&t, &g, &sq, &h_block, params.gamma);
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(DmhError::Numeric(format!("non-finite gradient at iteration {iter}")));
        }
        trace.push(loss_from_gram(&t, &g, &sq, &h_block, params.gamma));
        for (bi, &row) in block.iter().enumerate() {
            for j in 0..c {
                hhat[[row, j]] -= params.learning_rate * grad[[bi, j]];
            }
        }
    }
    Ok(GbeResult {
        codes: CodeMatrices::from_relaxed(hhat),
        loss_trace: trace,
        iters: params.max_iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct double-loop evaluation of the loss, independent of the
    /// fused production path.
    fn loss_oracle(s_y: &SimilarityDistribution, hhat: &Mat, gamma: f64) -> f64 {
        let s_h = similarity_from_codes(hhat).unwrap();
        let n = hhat.nrows();
        let mut kl = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j && s_y.s[[i, j]] > 0.0 {
                    kl += s_y.s[[i, j]] * (s_y.s[[i, j]] / s_h.s[[i, j]]).ln();
                }
            }
        }
        let mut quant = 0.0;
        for &v in hhat.iter() {
            let d = v - sign_pm1(v);
            quant += d * d;
        }
        kl + gamma * quant
    }

    fn random_mat(n: usize, c: usize, seed: u64, scale: f64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_gaussian(&mut rng, n, c, scale)
    }

    #[test]
    fn embedding_similarity_matches_hand_cases() {
        // n=2: normalization forces 0.5 each.
        let y = array![[1.0, 0.0], [0.6, 0.2]];
        let s = similarity_from_embedding(&y).unwrap();
        assert_abs_diff_eq!(s.s[[0, 1]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.s[[1, 0]], 0.5, epsilon = 1e-15);
        // Identical unit rows → uniform 1/(n(n−1)).
        let y = Array2::from_shape_fn((4, 3), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let s = similarity_from_embedding(&y).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 0.0 } else { 1.0 / 12.0 };
                assert_abs_diff_eq!(s.s[[i, j]], expect, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn embedding_similarity_rejects_all_nonpositive() {
        let y = array![[1.0, 0.0], [-1.0, 0.0]];
        assert!(matches!(
            similarity_from_embedding(&y),
            Err(DmhError::Numeric(_))
        ));
    }

    #[test]
    fn embedding_similarity_matches_double_loop_oracle() {
        let y = random_mat(9, 4, 3, 1.0);
        let s = similarity_from_embedding(&y).unwrap();
        s.validate().unwrap();
        // Independent evaluation.
        let mut total = 0.0;
        for i in 0..9 {
            for j in 0..9 {
                if i != j {
                    total += y.row(i).dot(&y.row(j)).max(INNER_EPS);
                }
            }
        }
        for i in 0..9 {
            for j in 0..9 {
                if i != j {
                    let expect = y.row(i).dot(&y.row(j)).max(INNER_EPS) / total;
                    assert_abs_diff_eq!(s.s[[i, j]], expect, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn code_similarity_hand_case() {
        // Rows 0, (2,0), (0,2): D = 1, 1, 2 → kernels 1/2, 1/2, 1/3.
        let h = array![[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]];
        let s = similarity_from_codes(&h).unwrap();
        s.validate().unwrap();
        let z = 2.0 * (0.5 + 0.5 + 1.0 / 3.0);
        assert_abs_diff_eq!(s.s[[0, 1]], 0.5 / z, epsilon = 1e-15);
        assert_abs_diff_eq!(s.s[[0, 2]], 0.5 / z, epsilon = 1e-15);
        assert_abs_diff_eq!(s.s[[1, 2]], (1.0 / 3.0) / z, epsilon = 1e-15);
        // All rows equal → uniform.
        let h = Array2::<f64>::ones((3, 2));
        let s = similarity_from_codes(&h).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { 1.0 / 6.0 };
                assert_abs_diff_eq!(s.s[[i, j]], expect, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn loss_matches_independent_oracle() {
        for seed in 0..5 {
            let y = random_mat(8, 3, seed, 1.0);
            let s_y = similarity_from_embedding(&y).unwrap();
            let hhat = random_mat(8, 4, seed + 100, 0.8);
            for gamma in [0.0, 0.01, 1.0] {
                let fused = gbe_loss(&s_y, &hhat, gamma);
                let oracle = loss_oracle(&s_y, &hhat, gamma);
                assert_abs_diff_eq!(fused, oracle, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn loss_is_zero_at_matched_distribution_with_sign_entries() {
        // ±1 rows at equal pairwise distances: any two distinct rows of
        // a set where all pairwise Hamming distances are equal give a
        // uniform code distribution; a uniform target then matches.
        let hhat = array![[1.0, 1.0, -1.0, -1.0], [1.0, -1.0, 1.0, -1.0], [-1.0, 1.0, 1.0, -1.0]];
        // All pairwise distances are 2 → uniform S^H.
        let s_h = similarity_from_codes(&hhat).unwrap();
        let loss = gbe_loss(&s_h, &hhat, 10.0);
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_term_is_nonnegative() {
        for seed in 0..10 {
            let y = random_mat(7, 3, seed, 1.0);
            let s_y = similarity_from_embedding(&y).unwrap();
            let hhat = random_mat(7, 5, seed + 50, 0.5);
            assert!(gbe_loss(&s_y, &hhat, 0.0) >= -1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_small() {
        // Development-scale spot check; the acceptance suite runs the
        // full 20-instance sweep.
        let y = random_mat(6, 3, 9, 1.0);
        let s_y = similarity_from_embedding(&y).unwrap();
        let mut hhat = random_mat(6, 3, 10, 0.8);
        // Keep entries away from the sign boundary so the quantization
        // term is smooth around the evaluation point.
        hhat.mapv_inplace(|v| if v.abs() < 0.05 { 0.05 * sign_pm1(v) } else { v });
        let gamma = 0.01;
        let grad = gbe_gradient(&s_y, &hhat, gamma);
        let h = 1e-5;
        for i in 0..6 {
            for j in 0..3 {
                let mut plus = hhat.clone();
                plus[[i, j]] += h;
                let mut minus = hhat.clone();
                minus[[i, j]] -= h;
                let fd = (gbe_loss(&s_y, &plus, gamma) - gbe_loss(&s_y, &minus, gamma)) / (2.0 * h);
                let denom = grad[[i, j]].abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((grad[[i, j]] - fd) / denom).abs() < 1e-5,
                    "entry ({i},{j}): analytic {} vs fd {fd}",
                    grad[[i, j]]
                );
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_global_minimum() {
        let hhat = array![[1.0, 1.0, -1.0, -1.0], [1.0, -1.0, 1.0, -1.0], [-1.0, 1.0, 1.0, -1.0]];
        let s_h = similarity_from_codes(&hhat).unwrap();
        let grad = gbe_gradient(&s_h, &hhat, 0.7);
        for &v in grad.iter() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_point_gradient_is_quantization_only() {
        let y = array![[1.0, 0.2], [0.8, 0.4]];
        let s_y = similarity_from_embedding(&y).unwrap();
        let hhat = array![[0.4, -0.3], [0.9, 0.2]];
        let gamma = 0.3;
        let grad = gbe_gradient(&s_y, &hhat, gamma);
        for i in 0..2 {
            for j in 0..2 {
                let expect = 2.0 * gamma * (hhat[[i, j]] - sign_pm1(hhat[[i, j]]));
                assert_abs_diff_eq!(grad[[i, j]], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn binarize_uses_negative_sign_at_zero() {
        let h = array![[-0.1, 0.0, 0.2]];
        assert_eq!(binarize(&h), array![[-1.0, -1.0, 1.0]]);
    }

    #[test]
    fn run_gbe_is_monotone_and_deterministic() {
        let y = random_mat(20, 4, 5, 1.0);
        let params = GbeParams { max_iters: 60, ..GbeParams::default() };
        let a = run_gbe(&y, &params, 8).unwrap();
        for w in a.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
        let b = run_gbe(&y, &params, 8).unwrap();
        assert_eq!(a.codes.hhat, b.codes.hhat);
        assert_eq!(a.codes.h, b.codes.h);
    }

    #[test]
    fn run_gbe_single_step_with_infinite_tol() {
        let y = random_mat(10, 3, 6, 1.0);
        let params = GbeParams { tol: f64::INFINITY, max_iters: 50, ..GbeParams::default() };
        let r = run_gbe(&y, &params, 4).unwrap();
        assert_eq!(r.iters, 1);
        assert_eq!(r.loss_trace.len(), 2);
    }

    #[test]
    fn large_gamma_drives_entries_to_signs() {
        let y = random_mat(15, 4, 7, 1.0);
        let params = GbeParams {
            gamma: 10.0,
            learning_rate: 0.05,
            max_iters: 400,
            tol: 0.0,
            ..GbeParams::default()
        };
        let r = run_gbe(&y, &params, 6).unwrap();
        for &v in r.codes.hhat.iter() {
            assert!((v.abs() - 1.0).abs() < 0.05, "entry {v} not near ±1");
        }
    }

    #[test]
    fn separated_clusters_get_separated_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut y = Array2::<f64>::zeros((16, 4));
        for i in 0..16 {
            let center = if i < 8 { [4.0, 4.0, 0.0, 0.0] } else { [0.0, 0.0, 4.0, 4.0] };
            for j in 0..4 {
                y[[i, j]] = center[j] + 0.2 * random_gaussian(&mut rng, 1, 1, 1.0)[[0, 0]];
            }
        }
        let params = GbeParams { max_iters: 200, learning_rate: 1.0, ..GbeParams::default() };
        let r = run_gbe(&y, &params, 16).unwrap();
        let codes = crate::codes::CodeSet::from_signs(&r.codes.h).unwrap();
        let mut intra = Vec::new();
        let mut inter = Vec::new();
        for i in 0..16 {
            for j in (i + 1)..16 {
                let d = codes.hamming(i, &codes, j) as f64;
                if (i < 8) == (j < 8) {
                    intra.push(d);
                } else {
                    inter.push(d);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&intra) < mean(&inter),
            "intra {} !< inter {}",
            mean(&intra),
            mean(&inter)
        );
    }

    #[test]
    fn permuting_rows_permutes_codes() {
        let y = random_mat(12, 3, 11, 1.0);
        let perm: Vec<usize> = vec![7, 2, 9, 0, 4, 11, 1, 8, 3, 10, 6, 5];
        let y_perm = y.select(ndarray::Axis(0), &perm);
        let params = GbeParams { max_iters: 40, ..GbeParams::default() };
        let a = run_gbe(&y, &params, 6).unwrap();
        let b = run_gbe(&y_perm, &params, 6).unwrap();
        for (bi, &orig) in perm.iter().enumerate() {
            for j in 0..6 {
                assert_abs_diff_eq!(
                    b.codes.hhat[[bi, j]],
                    a.codes.hhat[[orig, j]],
                    epsilon = 1e-9
                );
                assert_eq!(b.codes.h[[bi, j]], a.codes.h[[orig, j]]);
            }
        }
    }

    #[test]
    fn subsampled_mode_produces_finite_codes() {
        let y = random_mat(30, 4, 12, 1.0);
        let params = GbeParams {
            row_subsample: Some(10),
            learning_rate: 1.0,
            max_iters: 25,
            ..GbeParams::default()
        };
        let r = run_gbe(&y, &params, 8).unwrap();
        assert!(r.codes.hhat.iter().all(|v| v.is_finite()));
        assert_eq!(r.codes.h.dim(), (30, 8));
        // Determinism holds in the stochastic mode too.
        let r2 = run_gbe(&y, &params, 8).unwrap();
        assert_eq!(r.codes.hhat, r2.codes.hhat);
    }

    #[test]
    fn rejects_invalid_params() {
        let y = random_mat(5, 2, 1, 1.0);
        let bad = GbeParams { learning_rate: 0.0, ..GbeParams::default() };
        assert!(run_gbe(&y, &bad, 4).is_err());
        let bad = GbeParams { gamma: -1.0, ..GbeParams::default() };
        assert!(run_gbe(&y, &bad, 4).is_err());
        assert!(run_gbe(&y, &GbeParams::default(), 0).is_err());
    }
}
