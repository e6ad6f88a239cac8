//! Approximate variance components: the moment-matching target
//! S = (y−ĉ1)(y−ĉ1)ᵀ − K, the general closed-form AVCs, and the θ·D
//! parameterized AVCs. Either the exact or the sketched kernel can stand in
//! for K. Estimates are unbiased, so Λ̂ may be indefinite and σ̂² negative;
//! both conditions are surfaced through flags rather than clipped here.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{RandomDesign, VarianceComponents};

/// Which kernel went into S.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelTag {
    Exact,
    Sketched,
}

/// S = (y−ĉ1)(y−ĉ1)ᵀ − K, the rank-one-minus-kernel matrix of the REML proxy
/// stationarity condition.
#[derive(Debug, Clone)]
pub struct SMatrix {
    s_mat: DMatrix<f64>,
    kernel_tag: KernelTag,
    c_hat: f64,
}

impl SMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.s_mat
    }

    pub fn kernel_tag(&self) -> KernelTag {
        self.kernel_tag
    }

    pub fn c_hat(&self) -> f64 {
        self.c_hat
    }

    pub fn n(&self) -> usize {
        self.s_mat.nrows()
    }
}

/// Builds S from the response, the centering value ĉ (conventionally the mean
/// response), and a symmetric PSD kernel.
pub fn build_s_matrix(
    y: &DVector<f64>,
    c_hat: f64,
    kernel: &DMatrix<f64>,
    tag: KernelTag,
) -> SMatrix {
    assert_eq!(kernel.nrows(), y.len());
    assert_eq!(kernel.ncols(), y.len());
    let r = y - DVector::repeat(y.len(), c_hat);
    let s_mat = &r * r.transpose() - kernel;
    SMatrix { s_mat, kernel_tag: tag, c_hat }
}

/// An AVC result: the components plus the surfaced degeneracy flags.
#[derive(Debug, Clone)]
pub struct AvcEstimate {
    pub vc: VarianceComponents,
    pub sigma2_negative: bool,
    pub lambda_indefinite: bool,
}

/// General closed-form AVCs:
///   σ̂² = tr[S(I − ZZ†)]/(n − q),
///   Λ̂  = Z†SZ†ᵀ − σ̂²(ZᵀZ)⁻¹,
/// with Z† applied through per-block QR factorizations. For m > 1 the q×q Λ̂
/// is reduced to a single d×d H by averaging its m diagonal blocks, the
/// projection of the unconstrained solution onto the block-constant feasible
/// set; for m = 1 this is exactly the unconstrained solution.
pub fn avc_general(s: &SMatrix, z: &RandomDesign) -> Result<AvcEstimate> {
    let n = z.n();
    let q = z.q();
    let d = z.d();
    if s.n() != n {
        return Err(Error::Data("S and Z have incompatible dimensions".into()));
    }
    if q >= n {
        return Err(Error::Data(format!(
            "general AVCs need q < n, got q = {q}, n = {n}"
        )));
    }
    z.require_full_column_rank()?;

    // Per-block thin QR: Z_i = Q_i R_i, Z_i† = R_i⁻¹Q_iᵀ.
    let mut sigma_num = s.matrix().trace();
    let mut block_lambdas: Vec<DMatrix<f64>> = Vec::with_capacity(z.m());
    let mut gram_invs: Vec<DMatrix<f64>> = Vec::with_capacity(z.m());
    for (i, b) in z.blocks().iter().enumerate() {
        let qr = b.clone().qr();
        let q_thin = qr.q();
        let r_mat = qr.r();
        let range = z.row_range(i);
        let s_ii = s.matrix().view((range.start, range.start), (range.len(), range.len()));
        // tr(Q_iᵀ S_ii Q_i) accumulates tr(S·P).
        let sq = s_ii * &q_thin;
        sigma_num -= q_thin.dot(&sq);

        // Z_i† S_ii Z_i†ᵀ = R⁻¹ (Qᵀ S_ii Q) R⁻ᵀ.
        let qsq = q_thin.tr_mul(&sq);
        let tmp = r_mat
            .clone()
            .lu()
            .solve(&qsq)
            .ok_or_else(|| Error::Numerical(format!("singular R factor in group {i}")))?;
        let core = r_mat
            .clone()
            .lu()
            .solve(&tmp.transpose())
            .ok_or_else(|| Error::Numerical(format!("singular R factor in group {i}")))?;
        block_lambdas.push(core.transpose());

        // (Z_iᵀZ_i)⁻¹ = R⁻¹R⁻ᵀ.
        let r_inv = r_mat
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical(format!("singular R factor in group {i}")))?;
        gram_invs.push(&r_inv * r_inv.transpose());
    }
    let sigma2 = sigma_num / (n - q) as f64;

    let mut h = DMatrix::zeros(d, d);
    for (bl, gi) in block_lambdas.iter().zip(&gram_invs) {
        h += bl - gi * sigma2;
    }
    h /= z.m() as f64;
    h = 0.5 * (&h + h.transpose());

    let lambda_indefinite = h.clone().symmetric_eigen().eigenvalues.min() < 0.0;
    Ok(AvcEstimate {
        vc: VarianceComponents::blocked(h, sigma2)?,
        sigma2_negative: sigma2 < 0.0,
        lambda_indefinite,
    })
}

/// Parameterized AVCs for Λ = θ·D with G = ZDZᵀ. The pair (θ̂, σ̂²) solves the
/// two stationarity conditions of the Frobenius objective exactly:
///   θ·tr(G²) + σ²·tr(G) = tr(GS),
///   θ·tr(G)  + σ²·n     = tr(S),
/// equivalently σ̂² = [tr(S) − tr(GS)·tr(G)/tr(G²)]/(n − α) with
/// α = tr(G)²/tr(G²), and θ̂ = tr(G(S − σ̂²I))/tr(G²).
pub fn avc_parameterized(
    s: &SMatrix,
    z: &RandomDesign,
    d_matrix: &DMatrix<f64>,
) -> Result<AvcEstimate> {
    let n = z.n();
    let q = z.q();
    if s.n() != n {
        return Err(Error::Data("S and Z have incompatible dimensions".into()));
    }
    if d_matrix.nrows() != q || d_matrix.ncols() != q {
        return Err(Error::Data(format!(
            "reference matrix D must be q×q = {q}×{q}"
        )));
    }
    let zd = z.to_dense();
    let g = &zd * d_matrix * zd.transpose();

    let tr_g = g.trace();
    let tr_g2 = g.norm_squared(); // G symmetric: tr(G²) = ‖G‖_F²
    let tr_s = s.matrix().trace();
    let tr_gs = g.dot(s.matrix());
    if tr_g2 <= 0.0 {
        return Err(Error::Numerical("G = ZDZᵀ is zero; θ is unidentifiable".into()));
    }
    // n·tr(G²) − tr(G)² = 0 exactly when G ∝ I (Cauchy–Schwarz equality case),
    // where σ² and θ cannot be separated.
    let denom = (n as f64) * tr_g2 - tr_g * tr_g;
    if denom <= 1e-12 * (n as f64) * tr_g2 {
        return Err(Error::Numerical(
            "degenerate parameterization: G is proportional to the identity, \
             σ² and θ are unidentifiable"
                .into(),
        ));
    }
    let sigma2 = (tr_s * tr_g2 - tr_gs * tr_g) / denom;
    let theta = (tr_gs - sigma2 * tr_g) / tr_g2;

    Ok(AvcEstimate {
        vc: VarianceComponents::parameterized(theta, d_matrix.clone(), sigma2)?,
        sigma2_negative: sigma2 < 0.0,
        lambda_indefinite: theta < 0.0,
    })
}

/// Configuration for the non-iterative AVC fit pipeline.
#[derive(Debug, Clone)]
pub struct AvcFitConfig {
    pub epsilon: f64,
    pub seed: u64,
    /// Reference matrix for the θ·D parameterization; `None` uses the general
    /// closed forms.
    pub d_matrix: Option<DMatrix<f64>>,
    /// Skip the sketch and work with the exact kernel XΦXᵀ (the `exact`
    /// method: dual estimation through the full Gram matrix at O(n²p)).
    pub exact_kernel: bool,
    pub rank_bound: Option<usize>,
    pub sample_count: Option<usize>,
}

impl Default for AvcFitConfig {
    fn default() -> Self {
        AvcFitConfig {
            epsilon: 0.5,
            seed: 0,
            d_matrix: None,
            exact_kernel: false,
            rank_bound: None,
            sample_count: None,
        }
    }
}

/// PSD-floors the AVC output so V̂ factors: σ² is floored at 1e-8·‖S‖₂ and an
/// indefinite Λ̂ is projected onto the PSD cone. The estimates in the fit
/// record stay unmodified; only the V̂ used for the β solve is repaired.
fn repair_components(
    est: &AvcEstimate,
    s_scale: f64,
) -> (crate::model::VarianceComponents, bool) {
    let floor = 1e-8 * s_scale;
    let mut repaired = false;
    let sigma2 = if est.vc.sigma2 < floor {
        repaired = true;
        floor
    } else {
        est.vc.sigma2
    };
    let kind = match &est.vc.kind {
        crate::model::LambdaKind::Blocked { h } => {
            if est.lambda_indefinite {
                repaired = true;
                let eig = h.clone().symmetric_eigen();
                let mut rebuilt = DMatrix::zeros(h.nrows(), h.ncols());
                for (i, &lam) in eig.eigenvalues.iter().enumerate() {
                    if lam > 0.0 {
                        let v = eig.eigenvectors.column(i);
                        rebuilt += v * v.transpose() * lam;
                    }
                }
                crate::model::LambdaKind::Blocked { h: 0.5 * (&rebuilt + rebuilt.transpose()) }
            } else {
                est.vc.kind.clone()
            }
        }
        crate::model::LambdaKind::Parameterized { theta, d_matrix } => {
            if *theta < 0.0 {
                repaired = true;
                crate::model::LambdaKind::Parameterized { theta: 0.0, d_matrix: d_matrix.clone() }
            } else {
                est.vc.kind.clone()
            }
        }
    };
    (crate::model::VarianceComponents { kind, sigma2 }, repaired)
}

/// Non-iterative fit: kernel (sketched or exact) → S → closed-form AVCs →
/// repaired V̂ → fixed-effects estimate (fast lift or exact dual).
pub fn avc_fit(
    data: &crate::model::MixedModelData,
    phi: &crate::model::PriorPhi,
    cfg: &AvcFitConfig,
) -> Result<crate::estimators::FitResult> {
    use crate::estimators::{dual_beta, fast_beta, FitFlags, FitResult, PhaseTimings};

    let y = data.y();
    let mut timings = PhaseTimings::default();

    // Kernel stage.
    let (kernel_owned, sketch_parts) = if cfg.exact_kernel {
        let t0 = std::time::Instant::now();
        let k = crate::estimators::exact_kernel(data.x(), phi);
        timings.kernel_s = t0.elapsed().as_secs_f64();
        (k, None)
    } else {
        let em_like = crate::em::EmConfig {
            epsilon: cfg.epsilon,
            seed: cfg.seed,
            rank_bound: cfg.rank_bound,
            sample_count: cfg.sample_count,
            ..crate::em::EmConfig::default()
        };
        let (sk, ka, t) = crate::em::build_kernel(data, phi, &em_like)?;
        timings.transform_s = t.transform_s;
        timings.kernel_s = t.kernel_s;
        (ka.k_hat().clone(), Some((sk, ka)))
    };

    // Variance components from the moment-matching S matrix.
    let t1 = std::time::Instant::now();
    let c_hat = y.mean();
    let tag = if cfg.exact_kernel { KernelTag::Exact } else { KernelTag::Sketched };
    let s = build_s_matrix(y, c_hat, &kernel_owned, tag);
    let est = match &cfg.d_matrix {
        Some(d_mat) => avc_parameterized(&s, data.z(), d_mat)?,
        None => avc_general(&s, data.z())?,
    };
    let s_scale = s.matrix().clone().symmetric_eigen().eigenvalues.amax();
    let (vc_repaired, v_repaired) = repair_components(&est, s_scale);
    let mv = crate::model::build_marginal_variance(&vc_repaired, data.z())?;
    timings.variance_s = t1.elapsed().as_secs_f64();

    // Fixed effects.
    let t2 = std::time::Instant::now();
    let (estimate, sample_count) = match &sketch_parts {
        Some((sk, ka)) => (fast_beta(ka, sk, phi, &mv, y)?, sk.s()),
        None => (dual_beta(data.x(), phi, &mv, y)?, 0),
    };
    timings.lift_s = t2.elapsed().as_secs_f64();

    // REML-proxy NLL at the repaired components, M̂ = K + V̂.
    let m_mat = &kernel_owned + mv.to_dense();
    let nll = match crate::oracle::reml_criterion(&m_mat, y, c_hat) {
        Ok(lp) => -lp,
        Err(_) => f64::NAN,
    };

    Ok(FitResult {
        estimate,
        vc: est.vc,
        c_hat_state: c_hat,
        converged: true,
        iterations: 0,
        nll_trace: vec![nll],
        timings,
        seed: cfg.seed,
        sample_count,
        flags: FitFlags {
            sketch_clamped: sketch_parts.as_ref().map_or(false, |(sk, _)| sk.clamp_warning()),
            sigma2_floored: false,
            sigma2_negative: est.sigma2_negative,
            lambda_indefinite: est.lambda_indefinite,
            v_repaired,
        },
    })
}
