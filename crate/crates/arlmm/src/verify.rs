//! Empirical verification of the method's probabilistic guarantees: the
//! kernel-approximation sandwich, the fixed-effects norm-error bound, the AVC
//! approximation-error bounds, and the leverage-flattening property of the
//! randomized Hadamard rotation. The theorems are probabilistic over the
//! sketch draw, so acceptance is statistical: the empirical failure rate must
//! stay within the stated rate plus two binomial standard errors. A single
//! violated trial is never treated as an implementation failure.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::avc::{avc_general, build_s_matrix, KernelTag};
use crate::error::{Error, Result};
use crate::estimators::{dual_beta, fast_beta};
use crate::model::{build_marginal_variance, LambdaKind, PriorPhi, RandomDesign, VarianceComponents};
use crate::oracle::naive_kernel;
use crate::sketch::{fwht_in_place, sample_size, transform_covariates, Sketch};

/// Harness knobs shared by the theorem checks.
#[derive(Debug, Clone)]
pub struct CheckConfig {
    pub trials: usize,
    pub epsilon: f64,
    pub seed: u64,
    /// Explicit sample count. `None` follows the s_ε rule, which clamps to p′
    /// at desk scale (the sketch is then a full orthogonal transform and the
    /// bounds hold exactly); an override exercises the sub-sampled regime.
    pub sample_count: Option<usize>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { trials: 200, epsilon: 0.5, seed: 0, sample_count: None }
    }
}

/// One trial's observations against the bound values it was tested with.
#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub observed: Vec<f64>,
    pub bounds: Vec<f64>,
    pub failed: bool,
}

/// Outcome of one statistical bound check.
#[derive(Debug, Clone, Serialize)]
pub struct BoundCheck {
    pub theorem: String,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub epsilon: f64,
    pub trials: usize,
    pub seed: u64,
    pub sample_count: usize,
    pub clamped: bool,
    pub failures: usize,
    pub empirical_rate: f64,
    pub allowed_rate: f64,
    pub slack: f64,
    pub pass: bool,
    pub per_trial: Vec<TrialRecord>,
}

impl BoundCheck {
    fn finish(
        theorem: &str,
        n: usize,
        p: usize,
        q: usize,
        cfg: &CheckConfig,
        sample_count: usize,
        clamped: bool,
        allowed_rate: f64,
        per_trial: Vec<TrialRecord>,
    ) -> Self {
        let failures = per_trial.iter().filter(|t| t.failed).count();
        let trials = per_trial.len();
        let empirical_rate = failures as f64 / trials.max(1) as f64;
        let slack = 2.0 * (allowed_rate * (1.0 - allowed_rate) / trials.max(1) as f64).sqrt();
        let pass = empirical_rate <= allowed_rate + slack;
        BoundCheck {
            theorem: theorem.to_string(),
            n,
            p,
            q,
            epsilon: cfg.epsilon,
            trials,
            seed: cfg.seed,
            sample_count,
            clamped,
            failures,
            empirical_rate,
            allowed_rate,
            slack,
            pass,
            per_trial,
        }
    }
}

fn trial_seed(base: u64, t: usize) -> u64 {
    base ^ (t as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn instance_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xbead);
    rng
}

fn resolve_sample(p: usize, n: usize, cfg: &CheckConfig) -> Result<(usize, bool)> {
    let p_padded = p.next_power_of_two();
    match cfg.sample_count {
        Some(s) => {
            if s < 1 || s > p_padded {
                return Err(Error::Usage(format!(
                    "sample-count override must lie in [1, {p_padded}]"
                )));
            }
            Ok((s, false))
        }
        None => {
            let ss = sample_size(n, p_padded, cfg.epsilon)?;
            Ok((ss.s, ss.clamped))
        }
    }
}

/// The two-sided sandwich interval [1−ε, 1+√(2/3)·ε].
pub fn sandwich_interval(epsilon: f64) -> (f64, f64) {
    (1.0 - epsilon, 1.0 + (2.0f64 / 3.0).sqrt() * epsilon)
}

/// Kernel-approximation sandwich: per trial, draws a fresh sketch, forms the
/// generalized eigenvalues of (K̂, K) restricted to the column space of X√Φ,
/// and fails the trial iff any eigenvalue leaves the sandwich interval.
/// Allowed failure rate 3/n.
pub fn check_theorem2(n: usize, p: usize, cfg: &CheckConfig) -> Result<BoundCheck> {
    let mut rng = instance_rng(cfg.seed);
    let x = gaussian_matrix(&mut rng, n, p);
    let phi = PriorPhi::scalar(1.0, p)?;
    let exact = naive_kernel(&x, &phi);
    if exact.amax() == 0.0 {
        return Err(Error::Data("rank-zero covariates: the sandwich is vacuous".into()));
    }

    // Range restriction: eigenvectors of the exact kernel above the rank cut.
    let eig = exact.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.max();
    let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 1e-10 * lam_max).collect();
    let r = keep.len();
    let mut basis = DMatrix::zeros(n, r);
    let mut inv_sqrt = DVector::zeros(r);
    for (j, &i) in keep.iter().enumerate() {
        basis.set_column(j, &eig.eigenvectors.column(i));
        inv_sqrt[j] = 1.0 / eig.eigenvalues[i].sqrt();
    }

    let (s, clamped) = resolve_sample(p, n, cfg)?;
    let (lo, hi) = sandwich_interval(cfg.epsilon);
    let fp_slack = 1e-9;

    let mut per_trial = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let sk = Sketch::with_sample_count(p, s, trial_seed(cfg.seed, t))?;
        let ka = transform_covariates(&x, &phi, &sk)?;
        // D^{-1/2}·Qᵀ·K̂·Q·D^{-1/2} is symmetric with the generalized spectrum.
        let projected = basis.tr_mul(ka.k_hat()) * &basis;
        let mut scaled = projected;
        for i in 0..r {
            for j in 0..r {
                scaled[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        let gen_eigs = scaled.symmetric_eigen().eigenvalues;
        let min = gen_eigs.min();
        let max = gen_eigs.max();
        let failed = min < lo - fp_slack || max > hi + fp_slack;
        let deviation = (1.0 - min).max(max - 1.0).max(0.0);
        per_trial.push(TrialRecord {
            observed: vec![deviation, min, max],
            bounds: vec![cfg.epsilon, lo, hi],
            failed,
        });
    }
    Ok(BoundCheck::finish(
        "theorem2", n, p, 0, cfg, s, clamped, 3.0 / n as f64, per_trial,
    ))
}

/// A small positive-definite blocked V̂ shared by the β checks.
fn shared_v(n: usize, rng: &mut ChaCha8Rng) -> Result<crate::model::MarginalVariance> {
    let d = 2;
    let z = RandomDesign::single(DMatrix::from_fn(n, d, |_, _| rng.random::<f64>()))?;
    let vc = VarianceComponents::blocked(DMatrix::identity(d, d), 1.0)?;
    build_marginal_variance(&vc, &z)
}

/// Fixed-effects norm-error bound: per trial computes the fast estimator with
/// a fresh sketch against the exact dual estimator under the same V̂, and
/// fails the trial iff the relative error exceeds the tight bound. The loose
/// bound is recorded alongside and must dominate the tight one.
pub fn check_theorem1(n: usize, p: usize, cfg: &CheckConfig) -> Result<BoundCheck> {
    let mut rng = instance_rng(cfg.seed);
    let x = gaussian_matrix(&mut rng, n, p);
    let phi = PriorPhi::scalar(1.0, p)?;
    let mv = shared_v(n, &mut rng)?;
    let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));

    let exact = dual_beta(&x, &phi, &mv, &y)?;
    let beta_norm = exact.beta.norm();
    if beta_norm == 0.0 {
        return Err(Error::Data("exact β̂ is zero; relative error undefined".into()));
    }

    // Γ = Φ⁻¹ + XᵀV̂⁻¹X and the smallest eigenvalue of the data term, both at
    // desk scale through dense symmetric eigendecompositions.
    let v_inv_x = mv.solve_matrix(&x);
    let mut xvx = x.tr_mul(&v_inv_x);
    for i in 0..p {
        for j in 0..i {
            let v = 0.5 * (xvx[(i, j)] + xvx[(j, i)]);
            xvx[(i, j)] = v;
            xvx[(j, i)] = v;
        }
    }
    let xvx_eigs = xvx.clone().symmetric_eigen().eigenvalues;
    let lam_min_xvx = xvx_eigs.min().max(0.0);
    let mut gamma = xvx;
    for i in 0..p {
        gamma[(i, i)] += 1.0; // Φ = I
    }
    let gamma_eigs = gamma.symmetric_eigen().eigenvalues;
    let kappa_gamma = gamma_eigs.max() / gamma_eigs.min();

    let eps = cfg.epsilon;
    let sqrt23 = (2.0f64 / 3.0).sqrt();
    // ‖Φ⁻¹‖₂ = ‖Φ‖₂ = κ(Φ) = 1 for Φ = I.
    let tight = eps / (1.0 - eps) * kappa_gamma / (1.0 / (1.0 + sqrt23 * eps) + lam_min_xvx);
    let loose = eps * (1.0 + sqrt23 * eps) / (1.0 - eps) * kappa_gamma;
    if loose < tight {
        return Err(Error::Numerical(format!(
            "loose bound {loose:.6e} fell below tight bound {tight:.6e}"
        )));
    }

    let (s, clamped) = resolve_sample(p, n, cfg)?;
    let mut per_trial = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let sk = Sketch::with_sample_count(p, s, trial_seed(cfg.seed, t))?;
        let ka = transform_covariates(&x, &phi, &sk)?;
        let fast = fast_beta(&ka, &sk, &phi, &mv, &y)?;
        let err = (&fast.beta - &exact.beta).norm() / beta_norm;
        per_trial.push(TrialRecord {
            observed: vec![err],
            bounds: vec![tight, loose],
            failed: err > tight,
        });
    }
    Ok(BoundCheck::finish(
        "theorem1", n, p, 0, cfg, s, clamped, 3.0 / n as f64, per_trial,
    ))
}

/// AVC approximation errors: per trial compares sketched against exact AVCs;
/// the trial fails iff either the σ² bound ε·⦀K⦀_{n−q}/(n−q) or the Λ bound
/// (ε/σ_min(Z)²)(‖K‖₂ + ⦀K⦀_{n−q}/(n−q)) is violated (they hold jointly).
pub fn check_theorem3(n: usize, q: usize, p: usize, cfg: &CheckConfig) -> Result<BoundCheck> {
    if q >= n {
        return Err(Error::Data("theorem 3 needs q < n".into()));
    }
    let mut rng = instance_rng(cfg.seed);
    let x = gaussian_matrix(&mut rng, n, p);
    let phi = PriorPhi::scalar(1.0, p)?;
    let z = RandomDesign::single(DMatrix::from_fn(n, q, |_, _| rng.random::<f64>()))?;
    let y = DVector::from_fn(n, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
    let c_hat = y.mean();

    let exact = naive_kernel(&x, &phi);
    let s_exact = build_s_matrix(&y, c_hat, &exact, KernelTag::Exact);
    let est_exact = avc_general(&s_exact, &z)?;
    let h_exact = match &est_exact.vc.kind {
        LambdaKind::Blocked { h } => h.clone(),
        _ => unreachable!(),
    };

    // Bound ingredients from the exact kernel's spectrum and Z's singular values.
    let kernel_eigs = exact.clone().symmetric_eigen().eigenvalues;
    let mut sorted: Vec<f64> = kernel_eigs.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let spectral = sorted[0].max(0.0);
    let ky_fan: f64 = sorted.iter().take(n - q).map(|v| v.max(0.0)).sum();
    let ky_fan_frac = ky_fan / (n - q) as f64;
    if ky_fan_frac > spectral + 1e-9 * spectral {
        return Err(Error::Numerical(
            "Ky Fan fraction exceeded the spectral norm".into(),
        ));
    }
    let sigma_min_z = z.to_dense().singular_values().min();
    let eps = cfg.epsilon;
    let bound_sigma = eps * ky_fan_frac;
    let bound_lambda = eps / (sigma_min_z * sigma_min_z) * (spectral + ky_fan_frac);

    let (s, clamped) = resolve_sample(p, n, cfg)?;
    let mut per_trial = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let sk = Sketch::with_sample_count(p, s, trial_seed(cfg.seed, t))?;
        let ka = transform_covariates(&x, &phi, &sk)?;
        let s_sk = build_s_matrix(&y, c_hat, ka.k_hat(), KernelTag::Sketched);
        let est_sk = avc_general(&s_sk, &z)?;
        let h_sk = match &est_sk.vc.kind {
            LambdaKind::Blocked { h } => h.clone(),
            _ => unreachable!(),
        };
        let err_sigma = (est_sk.vc.sigma2 - est_exact.vc.sigma2).abs();
        let diff = &h_sk - &h_exact;
        let err_lambda = diff
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        let failed = err_sigma > bound_sigma + 1e-12 || err_lambda > bound_lambda + 1e-12;
        per_trial.push(TrialRecord {
            observed: vec![err_sigma, err_lambda],
            bounds: vec![bound_sigma, bound_lambda],
            failed,
        });
    }
    Ok(BoundCheck::finish(
        "theorem3", n, p, q, cfg, s, clamped, 3.0 / n as f64, per_trial,
    ))
}

/// Leverage flattening of the randomized Hadamard rotation Θ = W·D/√p′: for
/// an orthonormal p′×k V, the rotated rows satisfy
/// max_j ‖e_jᵀΘV‖ ≤ √(k/p′) + √(8·ln(p′/δ)/p′) with probability ≥ 1−δ.
pub fn check_srht_row_norms(
    p_padded: usize,
    k: usize,
    delta: f64,
    cfg: &CheckConfig,
) -> Result<BoundCheck> {
    if !p_padded.is_power_of_two() {
        return Err(Error::Usage("p′ must be a power of two".into()));
    }
    if k > p_padded {
        return Err(Error::Usage("k must not exceed p′".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Usage("delta must lie in (0,1)".into()));
    }
    let pf = p_padded as f64;
    let bound = (k as f64 / pf).sqrt() + (8.0 * (pf / delta).ln() / pf).sqrt();

    let mut per_trial = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed, t));
        // Orthonormal V from a Gaussian draw.
        let g = gaussian_matrix(&mut rng, p_padded, k);
        let v = g.qr().q();
        let signs: Vec<f64> =
            (0..p_padded).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let mut rotated = DMatrix::zeros(p_padded, k);
        let scale = 1.0 / pf.sqrt();
        let mut buf = vec![0.0; p_padded];
        for c in 0..k {
            for j in 0..p_padded {
                buf[j] = v[(j, c)] * signs[j];
            }
            fwht_in_place(&mut buf)?;
            for j in 0..p_padded {
                rotated[(j, c)] = buf[j] * scale;
            }
        }
        let max_row_norm = (0..p_padded)
            .map(|j| rotated.row(j).norm())
            .fold(0.0f64, f64::max);
        per_trial.push(TrialRecord {
            observed: vec![max_row_norm],
            bounds: vec![bound],
            failed: max_row_norm >= bound,
        });
    }
    Ok(BoundCheck::finish(
        "lemma1",
        p_padded,
        p_padded,
        k,
        cfg,
        p_padded,
        false,
        delta,
        per_trial,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theorem2_full_sketch_is_exact() {
        // s = p′ → ΠᵀΠ = I: every generalized eigenvalue is 1, zero failures.
        let cfg = CheckConfig { trials: 10, epsilon: 0.5, seed: 1, sample_count: Some(64) };
        let check = check_theorem2(6, 64, &cfg).unwrap();
        assert_eq!(check.failures, 0);
        assert!(check.pass);
        for t in &check.per_trial {
            assert!(t.observed[0] <= 1e-9, "deviation {}", t.observed[0]);
        }
    }

    #[test]
    fn theorem2_spec_rule_clamps_at_desk_scale() {
        let cfg = CheckConfig { trials: 5, epsilon: 0.5, seed: 2, sample_count: None };
        let check = check_theorem2(8, 64, &cfg).unwrap();
        assert!(check.clamped);
        assert_eq!(check.sample_count, 64);
        assert_eq!(check.failures, 0);
    }

    #[test]
    fn theorem2_deviation_grows_with_epsilon_scale() {
        // Fewer samples (larger ε at fixed s ∝ 1/ε²) → larger spectral
        // deviation on the same seeds, in at least 80% of paired trials.
        let n = 10;
        let p = 256;
        let s_fine = ((9.0 / (0.3f64 * 0.3)).ceil() as usize).min(256); // ε = 0.3
        let s_coarse = ((9.0 / (0.9f64 * 0.9)).ceil() as usize).min(256); // ε = 0.9
        let base = CheckConfig { trials: 50, epsilon: 0.3, seed: 7, sample_count: Some(s_fine) };
        let fine = check_theorem2(n, p, &base).unwrap();
        let coarse = check_theorem2(
            n,
            p,
            &CheckConfig { epsilon: 0.9, sample_count: Some(s_coarse), ..base },
        )
        .unwrap();
        let mut coarser_worse = 0;
        for (a, b) in fine.per_trial.iter().zip(&coarse.per_trial) {
            if b.observed[0] >= a.observed[0] {
                coarser_worse += 1;
            }
        }
        assert!(
            coarser_worse * 10 >= fine.per_trial.len() * 8,
            "coarse sketch deviated more in only {coarser_worse}/{} trials",
            fine.per_trial.len()
        );
    }

    #[test]
    fn theorem1_full_sketch_error_vanishes() {
        let cfg = CheckConfig { trials: 5, epsilon: 0.5, seed: 3, sample_count: Some(128) };
        let check = check_theorem1(10, 128, &cfg).unwrap();
        assert_eq!(check.failures, 0);
        for t in &check.per_trial {
            assert!(t.observed[0] <= 1e-8, "error {}", t.observed[0]);
            // Loose bound dominates tight bound on every trial.
            assert!(t.bounds[1] >= t.bounds[0]);
        }
    }

    #[test]
    fn theorem3_rejects_excess_q() {
        assert!(check_theorem3(4, 4, 8, &CheckConfig::default()).is_err());
    }

    #[test]
    fn theorem3_zero_covariates_have_zero_error() {
        // X = 0: exact and sketched kernels both vanish, so the sketched AVCs
        // equal the exact ones and both error bounds hold with zero slack.
        let n = 8;
        let p = 16;
        let x = DMatrix::zeros(n, p);
        let phi = PriorPhi::scalar(1.0, p).unwrap();
        let mut rng = instance_rng(77);
        let z = RandomDesign::single(DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>())).unwrap();
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = y.mean();
        let exact = build_s_matrix(&y, c, &naive_kernel(&x, &phi), KernelTag::Exact);
        let sk = Sketch::with_sample_count(p, 4, 3).unwrap();
        let ka = transform_covariates(&x, &phi, &sk).unwrap();
        let sketched = build_s_matrix(&y, c, ka.k_hat(), KernelTag::Sketched);
        let a = avc_general(&exact, &z).unwrap();
        let b = avc_general(&sketched, &z).unwrap();
        assert!((a.vc.sigma2 - b.vc.sigma2).abs() <= 1e-14);
        match (&a.vc.kind, &b.vc.kind) {
            (LambdaKind::Blocked { h: ha }, LambdaKind::Blocked { h: hb }) => {
                assert!((ha - hb).amax() <= 1e-14);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn theorem3_sub_sampled_errors_are_bounded_statistically() {
        let cfg = CheckConfig { trials: 60, epsilon: 0.5, seed: 5, sample_count: Some(128) };
        let check = check_theorem3(12, 3, 256, &cfg).unwrap();
        // Sub-s_ε sampling voids the guarantee, so only sanity-check the
        // structure: observations and bounds are finite and positive.
        for t in &check.per_trial {
            assert!(t.observed.iter().all(|v| v.is_finite()));
            assert!(t.bounds.iter().all(|v| v.is_finite() && *v > 0.0));
        }
        // With the s_ε rule (clamped to p′) the errors are exactly zero.
        let clamped = check_theorem3(
            12,
            3,
            256,
            &CheckConfig { trials: 5, epsilon: 0.5, seed: 5, sample_count: None },
        )
        .unwrap();
        assert!(clamped.clamped);
        assert_eq!(clamped.failures, 0);
        for t in &clamped.per_trial {
            assert!(t.observed[0] <= 1e-10);
        }
    }

    #[test]
    fn lemma1_flattens_spiky_basis() {
        // V = e₁: post-rotation coordinates are ±1/√p′, far below the bound.
        let p = 256;
        let cfg = CheckConfig { trials: 50, epsilon: 0.5, seed: 9, sample_count: None };
        let check = check_srht_row_norms(p, 1, 0.1, &cfg).unwrap();
        assert!(check.pass, "exceedance rate {}", check.empirical_rate);
        let check4 = check_srht_row_norms(p, 4, 0.1, &cfg).unwrap();
        assert!(check4.pass);
    }

    #[test]
    fn lemma1_negative_control_identity_rotation() {
        // Without the rotation, a spiky basis violates the bound outright:
        // e₁'s max coordinate is 1 > √(1/p′) + √(8·ln(p′/δ)/p′).
        let p = 256f64;
        let bound = (1.0 / p).sqrt() + (8.0 * (p / 0.1f64).ln() / p).sqrt();
        assert!(1.0 > bound, "negative control bound {bound}");
    }
}
