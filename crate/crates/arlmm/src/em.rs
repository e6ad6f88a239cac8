//! Fast EM for multi-group ℓ2-regularized LMMs operating in the kernel
//! domain: posterior moments of the latent effects, E-step expectations,
//! M-step updates, and convergence control.
//!
//! `em_posteriors`/`em_step` are the direct dense reference implementation.
//! `em_fit` runs the same updates through a one-time spectral decomposition
//! of the (fixed) kernel plus a Woodbury identity over the q random-effect
//! coordinates, so each iteration costs O(q²·min(n,s) + q³ + n²) instead of
//! refactoring the n×n posterior covariance M̂ = K + ZΛZᵀ + σ²I.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::{fast_beta, FitFlags, FitResult, PhaseTimings};
use crate::model::{
    build_marginal_variance, LambdaKind, MixedModelData, PriorPhi, RandomDesign,
    VarianceComponents,
};
use crate::sketch::{KernelApprox, Sketch};

/// EM driver configuration.
#[derive(Debug, Clone)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Relative parameter-change tolerance; 0 disables early stopping.
    pub tol: f64,
    /// Sketch approximation parameter for the kernel build.
    pub epsilon: f64,
    pub seed: u64,
    /// Rank bound fed to the s_ε rule; defaults to n (unknown rank).
    pub rank_bound: Option<usize>,
    /// Explicit sample-count override (benchmarks and tests).
    pub sample_count: Option<usize>,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 500,
            tol: 1e-6,
            epsilon: 0.5,
            seed: 0,
            rank_bound: None,
            sample_count: None,
        }
    }
}

/// Posterior state at one parameter iterate (Ĥ, σ̂², ĉ): latent-effect
/// moments, the M̂ solve cache, and the NLL trace so far.
#[derive(Debug, Clone)]
pub struct EmState {
    pub h: DMatrix<f64>,
    pub sigma2: f64,
    pub c_hat: f64,
    /// Posterior means γ̂, stacked per group.
    pub gamma_hat: DVector<f64>,
    /// Posterior covariances Σ̂_{γ(i)}, one d×d block per group.
    pub gamma_cov_blocks: Vec<DMatrix<f64>>,
    pub nll_trace: Vec<f64>,
    pub iteration: usize,
    pub sigma2_floored: bool,
    m_inv_r: DVector<f64>,
    tr_m_inv: f64,
    kernel_fit: DVector<f64>,
}

impl EmState {
    /// K·M̂⁻¹(y−ĉ1): the kernel-domain prediction Xβ̂ implied by the state.
    pub fn kernel_prediction(&self) -> &DVector<f64> {
        &self.kernel_fit
    }

    /// M̂⁻¹(y−ĉ1).
    pub fn m_inv_residual(&self) -> &DVector<f64> {
        &self.m_inv_r
    }

    pub fn nll(&self) -> f64 {
        *self.nll_trace.last().unwrap()
    }
}

/// Dense posterior computation at parameters (vc, ĉ): factors
/// M̂ = K + ZΛZᵀ + σ²I directly. Reference path; desk scale.
pub fn em_posteriors(
    data: &MixedModelData,
    vc: &VarianceComponents,
    c_hat: f64,
    kernel: &DMatrix<f64>,
) -> Result<EmState> {
    let h = match &vc.kind {
        LambdaKind::Blocked { h } => h.clone(),
        _ => {
            return Err(Error::Usage(
                "EM requires the blocked variance-component kind".into(),
            ))
        }
    };
    let z = data.z();
    let n = data.n();
    if kernel.nrows() != n || kernel.ncols() != n {
        return Err(Error::Data("kernel must be n×n".into()));
    }
    let mut m_mat = kernel.clone();
    for (i, b) in z.blocks().iter().enumerate() {
        let r = z.row_range(i);
        let vi = b * &h * b.transpose();
        let mut view = m_mat.view_mut((r.start, r.start), (r.len(), r.len()));
        view += vi;
    }
    for i in 0..n {
        m_mat[(i, i)] += vc.sigma2;
    }
    let chol = m_mat.clone().cholesky().ok_or_else(|| {
        Error::Numerical("posterior covariance M̂ is not positive definite".into())
    })?;
    let m_inv = chol.inverse();
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();

    let r = data.y() - DVector::repeat(n, c_hat);
    let m_inv_r = &m_inv * &r;
    let zt_m_inv_r = z.apply_transpose(&m_inv_r);
    let gamma_hat = vc.lambda_apply(&zt_m_inv_r);

    let mut gamma_cov_blocks = Vec::with_capacity(z.m());
    for (i, b) in z.blocks().iter().enumerate() {
        let rr = z.row_range(i);
        let m_inv_ii = m_inv.view((rr.start, rr.start), (rr.len(), rr.len()));
        let j_ii = b.tr_mul(&(m_inv_ii * b));
        let cov = &h - &h * j_ii * &h;
        gamma_cov_blocks.push(0.5 * (&cov + cov.transpose()));
    }

    let nll = 0.5 * (logdet + r.dot(&m_inv_r));
    let kernel_fit = kernel * &m_inv_r;
    Ok(EmState {
        h,
        sigma2: vc.sigma2,
        c_hat,
        gamma_hat,
        gamma_cov_blocks,
        nll_trace: vec![nll],
        iteration: 0,
        sigma2_floored: false,
        m_inv_r,
        tr_m_inv: m_inv.trace(),
        kernel_fit,
    })
}

/// Ĥ ← (1/m)·Σᵢ(γ̂⁽ⁱ⁾γ̂⁽ⁱ⁾ᵀ + Σ̂_{γ(i)}).
pub fn m_step_h(gamma_hat: &DVector<f64>, cov_blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let m = cov_blocks.len();
    let d = cov_blocks[0].nrows();
    let mut h = DMatrix::zeros(d, d);
    for (i, cov) in cov_blocks.iter().enumerate() {
        let gi = gamma_hat.rows(i * d, d);
        h += gi * gi.transpose() + cov;
    }
    h /= m as f64;
    0.5 * (&h + h.transpose())
}

struct MStep {
    h: DMatrix<f64>,
    sigma2: f64,
    c_hat: f64,
    floored: bool,
}

/// Shared M-step arithmetic from the E-step quantities at the old iterate:
/// Ĥ from the posterior moments, σ̂² ← σ̂² + (êᵀê − σ̂⁴·tr M̂⁻¹)/n with the
/// trace-consistent residual second moment, and ĉ from the residual mean.
fn m_step(
    y: &DVector<f64>,
    z: &RandomDesign,
    gamma_hat: &DVector<f64>,
    cov_blocks: &[DMatrix<f64>],
    kernel_fit: &DVector<f64>,
    tr_m_inv: f64,
    sigma2_old: f64,
    c_old: f64,
) -> MStep {
    let n = y.len() as f64;
    let z_gamma = z.apply(gamma_hat);
    // ê = y − Xβ̂ − Zγ̂ − ĉ1, with Xβ̂ evaluated in the kernel domain.
    let e_hat = y - kernel_fit - &z_gamma - DVector::repeat(y.len(), c_old);
    let ee = e_hat.norm_squared();

    let h = m_step_h(gamma_hat, cov_blocks);
    let mut sigma2 = sigma2_old + (ee - sigma2_old * sigma2_old * tr_m_inv) / n;
    let mut floored = false;
    if sigma2 <= 0.0 {
        sigma2 = 1e-10 * population_variance(y).max(f64::MIN_POSITIVE);
        floored = true;
    }
    let c_hat = c_old + e_hat.mean();
    MStep { h, sigma2, c_hat, floored }
}

/// One EM step from a posterior state: M-step updates followed by fresh
/// posteriors at the new parameters. Dense reference path.
pub fn em_step(state: &EmState, data: &MixedModelData, kernel: &DMatrix<f64>) -> Result<EmState> {
    let step = m_step(
        data.y(),
        data.z(),
        &state.gamma_hat,
        &state.gamma_cov_blocks,
        &state.kernel_fit,
        state.tr_m_inv,
        state.sigma2,
        state.c_hat,
    );
    let vc = VarianceComponents::blocked(step.h, step.sigma2)?;
    let mut next = em_posteriors(data, &vc, step.c_hat, kernel)?;
    next.iteration = state.iteration + 1;
    next.sigma2_floored = state.sigma2_floored || step.floored;
    let mut trace = state.nll_trace.clone();
    trace.push(next.nll_trace[0]);
    next.nll_trace = trace;
    Ok(next)
}

/// One-time spectral cache of the kernel: K = UΔUᵀ with U ∈ ℝ^{n×k},
/// k = min(n, s), plus the projections of Z needed by the Woodbury solves.
struct SpectralKernel {
    u: DMatrix<f64>,
    delta: DVector<f64>,
    /// UᵀZ, k×q.
    b: DMatrix<f64>,
    /// Per-block ZᵀZ.
    gram: Vec<DMatrix<f64>>,
    n: usize,
    k: usize,
}

impl SpectralKernel {
    fn new(ka: &KernelApprox, z: &RandomDesign) -> Self {
        let n = ka.n();
        let s = ka.s();
        let (u, delta) = if s < n {
            // K = AAᵀ with A = QR: K = Q(RRᵀ)Qᵀ, eigen of the s×s core.
            let a = ka.a_t().transpose();
            let qr = a.qr();
            let q = qr.q();
            let r = qr.r();
            let core = &r * r.transpose();
            let eig = core.symmetric_eigen();
            (&q * eig.eigenvectors, eig.eigenvalues)
        } else {
            let eig = ka.k_hat().clone().symmetric_eigen();
            (eig.eigenvectors, eig.eigenvalues)
        };
        let delta = delta.map(|v| v.max(0.0));
        let k = delta.len();
        let d = z.d();
        let mut b = DMatrix::zeros(k, z.q());
        for (i, blk) in z.blocks().iter().enumerate() {
            let rows = z.row_range(i);
            let ui = u.rows(rows.start, rows.len());
            b.view_mut((0, i * d), (k, d)).copy_from(&ui.tr_mul(blk));
        }
        SpectralKernel { u, delta, b, gram: z.gram_blocks(), n, k }
    }

    /// C⁻¹v for C = K + σ²I, through the eigen cache; g holds the spectral
    /// correction 1/(δ+σ²) − 1/σ².
    fn c_inv_apply(&self, v: &DVector<f64>, sigma2: f64, g: &DVector<f64>) -> DVector<f64> {
        let ut_v = self.u.tr_mul(v);
        let scaled = ut_v.component_mul(g);
        v / sigma2 + &self.u * scaled
    }

    /// K·v.
    fn k_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let ut_v = self.u.tr_mul(v);
        &self.u * ut_v.component_mul(&self.delta)
    }
}

struct SpectralStats {
    gamma_hat: DVector<f64>,
    cov_blocks: Vec<DMatrix<f64>>,
    kernel_fit: DVector<f64>,
    tr_m_inv: f64,
    nll: f64,
}

/// Posterior statistics at (h, σ², ĉ) through the spectral cache: the same
/// quantities `em_posteriors` computes densely, via
/// M̂⁻¹ = C⁻¹ − C⁻¹ZΛ(I + ZᵀC⁻¹ZΛ)⁻¹ZᵀC⁻¹ with C = K + σ²I.
fn spectral_stats(
    spk: &SpectralKernel,
    z: &RandomDesign,
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    sigma2: f64,
    c_hat: f64,
) -> Result<SpectralStats> {
    let n = spk.n;
    let k = spk.k;
    let q = z.q();
    let d = z.d();
    let m = z.m();

    let g = spk.delta.map(|dl| 1.0 / (dl + sigma2) - 1.0 / sigma2);
    // C⁻² = σ⁻⁴I + U·(2g/σ² + g²)·Uᵀ on the same eigenbasis.
    let g2 = g.map(|gj| 2.0 * gj / sigma2 + gj * gj);

    // T = ZᵀC⁻¹Z and T2 = ZᵀC⁻²Z (q×q).
    let weighted = |w: &DVector<f64>| -> DMatrix<f64> {
        let mut bw = spk.b.clone();
        for j in 0..k {
            let mut row = bw.row_mut(j);
            row *= w[j];
        }
        spk.b.tr_mul(&bw)
    };
    let mut t_mat = weighted(&g);
    let mut t2_mat = weighted(&g2);
    for (i, gr) in spk.gram.iter().enumerate() {
        let mut v1 = t_mat.view_mut((i * d, i * d), (d, d));
        v1 += gr / sigma2;
        let mut v2 = t2_mat.view_mut((i * d, i * d), (d, d));
        v2 += gr / (sigma2 * sigma2);
    }

    // TΛ with Λ = blockdiag(H,…,H): scale T's column blocks by H.
    let mut t_lambda = DMatrix::zeros(q, q);
    for i in 0..m {
        let cols = t_mat.columns(i * d, d).clone_owned();
        t_lambda.view_mut((0, i * d), (q, d)).copy_from(&(cols * h));
    }
    let mut w_mat = t_lambda.clone();
    for i in 0..q {
        w_mat[(i, i)] += 1.0;
    }
    let lu = w_mat.lu();
    if !lu.is_invertible() {
        return Err(Error::Numerical(
            "posterior covariance M̂ is not positive definite (singular I + TΛ)".into(),
        ));
    }

    let r = y - DVector::repeat(n, c_hat);
    let c_inv_r = spk.c_inv_apply(&r, sigma2, &g);
    let zc = z.apply_transpose(&c_inv_r);

    // M̂⁻¹r through the Λ-inverse-free Woodbury form.
    let t1 = lu.solve(&zc).unwrap();
    let t2v = blocked_h_apply(h, &t1, m);
    let t3 = z.apply(&t2v);
    let w_vec = &c_inv_r - spk.c_inv_apply(&t3, sigma2, &g);

    // ZᵀM̂⁻¹Z = T − TΛ·(I + TΛ)⁻¹T.
    let w_inv_t = lu.solve(&t_mat).unwrap();
    let j_mat = &t_mat - &t_lambda * &w_inv_t;

    let gamma_hat = blocked_h_apply(h, &z.apply_transpose(&w_vec), m);
    let mut cov_blocks = Vec::with_capacity(m);
    for i in 0..m {
        let j_ii = j_mat.view((i * d, i * d), (d, d));
        let cov = h - h * j_ii * h;
        cov_blocks.push(0.5 * (&cov + cov.transpose()));
    }

    // tr M̂⁻¹ = tr C⁻¹ − tr(Λ·(I + TΛ)⁻¹·ZᵀC⁻²Z).
    let tr_c_inv =
        (n - k) as f64 / sigma2 + spk.delta.iter().map(|dl| 1.0 / (dl + sigma2)).sum::<f64>();
    let y_mat = lu.solve(&t2_mat).unwrap();
    let mut tr_corr = 0.0;
    for i in 0..m {
        let y_ii = y_mat.view((i * d, i * d), (d, d));
        for a in 0..d {
            for b in 0..d {
                tr_corr += h[(a, b)] * y_ii[(b, a)];
            }
        }
    }
    let tr_m_inv = tr_c_inv - tr_corr;

    // log det M̂ = log det C + log det(I + TΛ); the latter is positive, so the
    // sum of log|u_ii| over the LU pivots evaluates it without overflow.
    let logdet_c =
        (n - k) as f64 * sigma2.ln() + spk.delta.iter().map(|dl| (dl + sigma2).ln()).sum::<f64>();
    let logdet_w: f64 = lu.u().diagonal().iter().map(|v| v.abs().ln()).sum();
    let nll = 0.5 * (logdet_c + logdet_w + r.dot(&w_vec));

    let kernel_fit = spk.k_apply(&w_vec);
    Ok(SpectralStats { gamma_hat, cov_blocks, kernel_fit, tr_m_inv, nll })
}

fn blocked_h_apply(h: &DMatrix<f64>, v: &DVector<f64>, m: usize) -> DVector<f64> {
    let d = h.nrows();
    let mut out = DVector::zeros(v.len());
    for i in 0..m {
        out.rows_mut(i * d, d).copy_from(&(h * v.rows(i * d, d)));
    }
    out
}

fn population_variance(y: &DVector<f64>) -> f64 {
    let mean = y.mean();
    y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.len() as f64
}

/// Full EM fit: builds the sketched kernel once (X is no longer needed after
/// the projection), initializes σ̂²₀ = var(y)/2, Ĥ₀ = (var(y)/2d)·I,
/// ĉ₀ = mean(y), iterates until the relative parameter change
/// max(|Δσ²|/σ², ‖ΔH‖_F/‖H‖_F) drops below `tol` or `max_iter` is reached,
/// then lifts β̂ to all p coordinates through the Πᵀ adjoint path.
pub fn em_fit(data: &MixedModelData, phi: &PriorPhi, cfg: &EmConfig) -> Result<FitResult> {
    let (sk, ka, timings) = build_kernel(data, phi, cfg)?;
    em_fit_with_kernel(data, phi, cfg, &sk, &ka, timings)
}

/// Sketch + transform + Gram, individually timed.
pub(crate) fn build_kernel(
    data: &MixedModelData,
    phi: &PriorPhi,
    cfg: &EmConfig,
) -> Result<(Sketch, KernelApprox, PhaseTimings)> {
    let mut timings = PhaseTimings::default();
    let t0 = std::time::Instant::now();
    let sk = match cfg.sample_count {
        Some(s) => Sketch::with_sample_count(data.p(), s, cfg.seed)?,
        None => Sketch::build(
            data.p(),
            cfg.rank_bound.unwrap_or(data.n()),
            cfg.epsilon,
            cfg.seed,
        )?,
    };
    let a_t = crate::sketch::transform_rows(data.x(), phi, &sk)?;
    timings.transform_s = t0.elapsed().as_secs_f64();

    let t1 = std::time::Instant::now();
    let ka = crate::sketch::kernel_from_transformed(a_t, sk.seed());
    timings.kernel_s = t1.elapsed().as_secs_f64();
    Ok((sk, ka, timings))
}

/// EM fit over an already-built kernel (benchmark entry point).
pub(crate) fn em_fit_with_kernel(
    data: &MixedModelData,
    phi: &PriorPhi,
    cfg: &EmConfig,
    sk: &Sketch,
    ka: &KernelApprox,
    mut timings: PhaseTimings,
) -> Result<FitResult> {
    let z = data.z();
    let y = data.y();
    let d = data.d();

    let t2 = std::time::Instant::now();
    let spk = SpectralKernel::new(ka, z);
    timings.variance_s = t2.elapsed().as_secs_f64();

    let var_y = population_variance(y);
    let mut h = DMatrix::identity(d, d) * (var_y / (2.0 * d as f64)).max(1e-12);
    let mut sigma2 = (var_y / 2.0).max(1e-12);
    let mut c_hat = y.mean();

    let t3 = std::time::Instant::now();
    let mut stats = spectral_stats(&spk, z, y, &h, sigma2, c_hat)?;
    let mut nll_trace = vec![stats.nll];
    let mut converged = false;
    let mut iterations = 0;
    let mut sigma2_floored = false;

    for it in 1..=cfg.max_iter {
        let step = m_step(
            y,
            z,
            &stats.gamma_hat,
            &stats.cov_blocks,
            &stats.kernel_fit,
            stats.tr_m_inv,
            sigma2,
            c_hat,
        );
        sigma2_floored |= step.floored;
        let rel_change = {
            let dh = (&step.h - &h).norm();
            let hs = h.norm();
            let dh_rel = if hs > 0.0 { dh / hs } else { dh };
            let ds_rel = (step.sigma2 - sigma2).abs() / sigma2.abs().max(f64::MIN_POSITIVE);
            dh_rel.max(ds_rel)
        };
        h = step.h;
        sigma2 = step.sigma2;
        c_hat = step.c_hat;
        stats = spectral_stats(&spk, z, y, &h, sigma2, c_hat)?;
        nll_trace.push(stats.nll);
        iterations = it;
        if cfg.tol > 0.0 && rel_change < cfg.tol {
            converged = true;
            break;
        }
    }
    timings.em_s = t3.elapsed().as_secs_f64();

    // EM keeps H PSD by construction and σ² floored positive, so V̂ factors.
    let vc = VarianceComponents::blocked(h, sigma2)?;
    let t4 = std::time::Instant::now();
    let mv = build_marginal_variance(&vc, z)?;
    let estimate = fast_beta(ka, sk, phi, &mv, y)?;
    timings.lift_s = t4.elapsed().as_secs_f64();

    Ok(FitResult {
        estimate,
        vc,
        c_hat_state: c_hat,
        converged,
        iterations,
        nll_trace,
        timings,
        seed: cfg.seed,
        sample_count: sk.s(),
        flags: FitFlags {
            sketch_clamped: sk.clamp_warning(),
            sigma2_floored,
            ..FitFlags::default()
        },
    })
}
