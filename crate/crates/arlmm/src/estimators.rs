//! Fixed-effects estimation: the dual estimator through the exact n×n kernel
//! XΦXᵀ, the SRHT-fast estimator through the approximate kernel, and the
//! intercept from the GLS ratio. β̂ always comes back in the full original
//! dimension p — never the reduced sketch dimension.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{MarginalVariance, PriorPhi};
use crate::sketch::{KernelApprox, Sketch};

/// Which estimation route produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    Primal,
    Dual,
    Fast,
}

/// A fixed-effects fit: the full-p coefficient vector and the intercept.
#[derive(Debug, Clone)]
pub struct FixedEffectsEstimate {
    pub beta: DVector<f64>,
    pub intercept: f64,
    pub method: FitMethod,
    /// Sketch seed when the fast route was used.
    pub sketch_seed: Option<u64>,
}

/// Wall-clock seconds per fit phase.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseTimings {
    /// Sketch construction plus the row transforms building A.
    pub transform_s: f64,
    /// The kernel Gram product AAᵀ (or the exact XΦXᵀ).
    pub kernel_s: f64,
    /// Variance-component work: spectral setup and AVC/EM estimation.
    pub variance_s: f64,
    /// EM iterations (zero for non-iterative routes).
    pub em_s: f64,
    /// The p-dimensional coefficient lift.
    pub lift_s: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.transform_s + self.kernel_s + self.variance_s + self.em_s + self.lift_s
    }
}

/// Degeneracies encountered during a fit, surfaced rather than hidden.
#[derive(Debug, Clone, Copy, Default)]
pub struct FitFlags {
    /// The s_ε rule exceeded p′ and the sample count was clamped.
    pub sketch_clamped: bool,
    /// The EM σ² update was floored away from a nonpositive value.
    pub sigma2_floored: bool,
    /// AVC produced a negative σ̂² (reported as-is in `vc`).
    pub sigma2_negative: bool,
    /// AVC produced an indefinite Λ̂ (reported as-is in `vc`).
    pub lambda_indefinite: bool,
    /// V̂ was repaired (σ² floor / PSD projection) before factorization.
    pub v_repaired: bool,
}

/// A complete fit record: coefficients, variance components, diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub estimate: FixedEffectsEstimate,
    pub vc: crate::model::VarianceComponents,
    /// The running intercept of the variance-estimation stage (EM state ĉ,
    /// or the mean response for the AVC route); `estimate.intercept` is the
    /// final GLS ratio.
    pub c_hat_state: f64,
    pub converged: bool,
    pub iterations: usize,
    pub nll_trace: Vec<f64>,
    pub timings: PhaseTimings,
    pub seed: u64,
    pub sample_count: usize,
    pub flags: FitFlags,
}

impl FitResult {
    /// Final NLL value (last entry of the trace).
    pub fn nll(&self) -> f64 {
        *self.nll_trace.last().unwrap_or(&f64::NAN)
    }
}

/// ĉ = (1ᵀV⁻¹y − 1ᵀV⁻¹Xβ̂)/(1ᵀV⁻¹1), evaluated with V-solves.
pub fn estimate_intercept(
    mv: &MarginalVariance,
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    y: &DVector<f64>,
) -> f64 {
    intercept_from_prediction(mv, &(x * beta), y)
}

/// Same ratio with Xβ̂ already evaluated (kernel-domain callers).
pub fn intercept_from_prediction(
    mv: &MarginalVariance,
    x_beta: &DVector<f64>,
    y: &DVector<f64>,
) -> f64 {
    let n = mv.n();
    let ones = DVector::repeat(n, 1.0);
    let v_inv_one = mv.solve(&ones);
    (v_inv_one.dot(y) - v_inv_one.dot(x_beta)) / v_inv_one.sum()
}

/// V⁻¹L as a dense n×n operator: V⁻¹ − vvᵀ/(1ᵀv) with v = V⁻¹1.
fn v_inv_l_dense(mv: &MarginalVariance) -> DMatrix<f64> {
    let n = mv.n();
    let ones = DVector::repeat(n, 1.0);
    let v = mv.solve(&ones);
    let denom = v.sum();
    let mut out = mv.inverse_dense();
    out.gemm(-1.0 / denom, &v, &v.transpose(), 1.0);
    out
}

/// Core kernel-ridge solve shared by the dual and fast routes: with
/// N = V⁻¹L, computes t = (I + K·N)⁻¹y and returns u = N·t together with the
/// fitted kernel prediction K·u.
fn kernel_ridge_solve(
    mv: &MarginalVariance,
    kernel: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = mv.n();
    let n_mat = v_inv_l_dense(mv);
    let mut system = kernel * &n_mat;
    for i in 0..n {
        system[(i, i)] += 1.0;
    }
    let lu = system.clone().lu();
    let t = lu.solve(y).ok_or_else(|| {
        let svd = system.singular_values();
        let cond = svd.max() / svd.min().max(f64::MIN_POSITIVE);
        Error::Numerical(format!(
            "kernel ridge system (I + K·V⁻¹L) is singular; condition estimate {cond:.3e}"
        ))
    })?;
    let u = &n_mat * &t;
    let fitted = kernel * &u;
    Ok((u, fitted))
}

/// Dual estimator β̂ = ΦXᵀV⁻¹L(XΦXᵀV⁻¹L + I)⁻¹y through the exact kernel,
/// O(n²p); no p×p matrix is ever formed. The intercept follows from the GLS
/// ratio on the fitted values.
pub fn dual_beta(
    x: &DMatrix<f64>,
    phi: &PriorPhi,
    mv: &MarginalVariance,
    y: &DVector<f64>,
) -> Result<FixedEffectsEstimate> {
    check_dims(x, phi, mv, y)?;
    let kernel = exact_kernel(x, phi);
    let (u, fitted) = kernel_ridge_solve(mv, &kernel, y)?;
    let beta = phi.apply(&x.tr_mul(&u));
    let intercept = intercept_from_prediction(mv, &fitted, y);
    Ok(FixedEffectsEstimate { beta, intercept, method: FitMethod::Dual, sketch_seed: None })
}

/// Zero-centering dual variant β̂ = ΦXᵀ(V + XΦXᵀ)⁻¹(y − c·1) for a fixed
/// intercept c (c = 0 recovers the classic ridge dual form).
pub fn dual_beta_fixed_intercept(
    x: &DMatrix<f64>,
    phi: &PriorPhi,
    mv: &MarginalVariance,
    y: &DVector<f64>,
    c: f64,
) -> Result<FixedEffectsEstimate> {
    check_dims(x, phi, mv, y)?;
    let n = mv.n();
    let mut m = exact_kernel(x, phi) + mv.to_dense();
    // Symmetrize against accumulation noise before factoring.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Numerical("V + XΦXᵀ is not positive definite".into()))?;
    let r = y - DVector::repeat(n, c);
    let u = chol.solve(&r);
    let beta = phi.apply(&x.tr_mul(&u));
    Ok(FixedEffectsEstimate { beta, intercept: c, method: FitMethod::Dual, sketch_seed: None })
}

/// SRHT-fast estimator β̂ = √ΦΠᵀAᵀV̂⁻¹L(I + AAᵀV̂⁻¹L)⁻¹y. The n-dimensional
/// solve costs O(max{n²s, n³}); the final lift back to all p coordinates is a
/// single inverse-order Walsh pass, O(p′ log p′).
pub fn fast_beta(
    ka: &KernelApprox,
    sk: &Sketch,
    phi: &PriorPhi,
    mv: &MarginalVariance,
    y: &DVector<f64>,
) -> Result<FixedEffectsEstimate> {
    if ka.s() != sk.s() || ka.sketch_seed() != sk.seed() {
        return Err(Error::Usage(
            "kernel approximation was built with a different sketch".into(),
        ));
    }
    if phi.len() != sk.p() {
        return Err(Error::Usage(format!(
            "prior has length {}, sketch expects {}",
            phi.len(),
            sk.p()
        )));
    }
    if mv.n() != ka.n() || y.len() != ka.n() {
        return Err(Error::Usage("marginal variance, kernel, and response disagree on n".into()));
    }
    let (u, fitted) = kernel_ridge_solve(mv, ka.k_hat(), y)?;
    let w = ka.at_mul(&u);
    let beta = sk.lift(&w, phi)?;
    let intercept = intercept_from_prediction(mv, &fitted, y);
    Ok(FixedEffectsEstimate {
        beta,
        intercept,
        method: FitMethod::Fast,
        sketch_seed: Some(sk.seed()),
    })
}

/// XΦXᵀ through a scaled Gram product (the estimator path; the independent
/// entrywise oracle lives in the oracle module).
pub(crate) fn exact_kernel(x: &DMatrix<f64>, phi: &PriorPhi) -> DMatrix<f64> {
    let mut scaled = x.clone();
    let sqrt_phi = phi.sqrt_diag();
    for j in 0..x.ncols() {
        let mut col = scaled.column_mut(j);
        col *= sqrt_phi[j];
    }
    let mut k = &scaled * scaled.transpose();
    for i in 0..k.nrows() {
        for j in 0..i {
            let v = 0.5 * (k[(i, j)] + k[(j, i)]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn check_dims(
    x: &DMatrix<f64>,
    phi: &PriorPhi,
    mv: &MarginalVariance,
    y: &DVector<f64>,
) -> Result<()> {
    if phi.len() != x.ncols() {
        return Err(Error::Data(format!(
            "prior length {} does not match p = {}",
            phi.len(),
            x.ncols()
        )));
    }
    if mv.n() != x.nrows() || y.len() != x.nrows() {
        return Err(Error::Data("X, y, and V disagree on the sample count".into()));
    }
    Ok(())
}
