//! Exact, small-scale reference computations used as ground truth by the test
//! suite and the verification harness. These deliberately use direct dense
//! linear algebra, structurally independent of the fast paths they check, and
//! carry guards that keep instances at desk scale.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{centering_projector_apply, MarginalVariance, PriorPhi, RandomDesign};
use crate::avc::SMatrix;

/// One oracle-vs-implementation comparison, serializable as a report line.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub inputs: String,
    pub reference: f64,
    pub value: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn compare(name: &str, inputs: &str, reference: f64, value: f64, tolerance: f64) -> Self {
        let abs_err = (reference - value).abs();
        let rel_err = if reference != 0.0 { abs_err / reference.abs() } else { abs_err };
        OracleReport {
            name: name.to_string(),
            inputs: inputs.to_string(),
            reference,
            value,
            abs_err,
            rel_err,
            tolerance,
            pass: abs_err <= tolerance || rel_err <= tolerance,
        }
    }
}

/// Direct dense solve of the primal normal equations. With `c_hat = None` the
/// intercept is profiled out through the centering projector L; with
/// `Some(c)` the response is shifted by c and L is the identity.
pub fn primal_beta_exact(
    x: &DMatrix<f64>,
    phi: &PriorPhi,
    mv: &MarginalVariance,
    y: &DVector<f64>,
    c_hat: Option<f64>,
) -> Result<DVector<f64>> {
    let p = x.ncols();
    if p > 2000 {
        return Err(Error::Usage(format!(
            "primal oracle is guarded to p ≤ 2000, got {p}"
        )));
    }
    if phi.len() != p || y.len() != x.nrows() || mv.n() != x.nrows() {
        return Err(Error::Data("primal oracle dimension mismatch".into()));
    }
    let (ly, lx) = match c_hat {
        None => {
            let ly = centering_projector_apply(mv, y);
            let mut lx = DMatrix::zeros(x.nrows(), p);
            for j in 0..p {
                let col = x.column(j).clone_owned();
                lx.set_column(j, &centering_projector_apply(mv, &col));
            }
            (ly, lx)
        }
        Some(c) => (y - DVector::repeat(y.len(), c), x.clone()),
    };
    let v_inv_lx = mv.solve_matrix(&lx);
    let mut gram = x.tr_mul(&v_inv_lx); // XᵀV⁻¹LX, p×p
    for j in 0..p {
        gram[(j, j)] += 1.0 / phi.diag()[j];
    }
    let rhs = x.tr_mul(&mv.solve(&ly));
    gram.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("primal normal equations are singular".into()))
}

/// Exact kernel XΦXᵀ by explicit entry accumulation.
pub fn naive_kernel(x: &DMatrix<f64>, phi: &PriorPhi) -> DMatrix<f64> {
    let n = x.nrows();
    let p = x.ncols();
    assert_eq!(phi.len(), p);
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = 0.0;
            for l in 0..p {
                acc += x[(i, l)] * phi.diag()[l] * x[(j, l)];
            }
            k[(i, j)] = acc;
            k[(j, i)] = acc;
        }
    }
    k
}

/// The REML proxy value −½·log det M − ½·(y−ĉ1)ᵀM⁻¹(y−ĉ1) for a positive
/// definite M. Its negation serves as the NLL objective in EM monotonicity
/// checks.
pub fn reml_criterion(m_matrix: &DMatrix<f64>, y: &DVector<f64>, c_hat: f64) -> Result<f64> {
    if m_matrix.nrows() != m_matrix.ncols() || m_matrix.nrows() != y.len() {
        return Err(Error::Data("reml criterion dimension mismatch".into()));
    }
    let chol = m_matrix
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("M is not positive definite".into()))?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let r = y - DVector::repeat(y.len(), c_hat);
    let quad = r.dot(&chol.solve(&r));
    Ok(-0.5 * logdet - 0.5 * quad)
}

/// Parameterization of the Frobenius fit oracle.
pub enum FroParam<'a> {
    /// Fully general symmetric q×q Λ.
    General,
    /// Λ = blockdiag(H, …, H) with a shared symmetric d×d H.
    Blocked,
    /// Λ = θ·D for the given symmetric PSD D.
    Theta(&'a DMatrix<f64>),
}

/// Result of the Frobenius fit oracle.
#[derive(Debug, Clone)]
pub enum FroFit {
    General { lambda: DMatrix<f64>, sigma2: f64 },
    Blocked { h: DMatrix<f64>, sigma2: f64 },
    Theta { theta: f64, sigma2: f64 },
}

impl FroFit {
    pub fn sigma2(&self) -> f64 {
        match self {
            FroFit::General { sigma2, .. }
            | FroFit::Blocked { sigma2, .. }
            | FroFit::Theta { sigma2, .. } => *sigma2,
        }
    }
}

/// Solves min_{Λ,σ²} ‖ZΛZᵀ − S + σ²I‖_F² exactly as a linear least-squares
/// problem in the vectorized unknowns, via dense normal equations over a
/// symmetric basis. Ground truth for both closed-form AVC paths.
pub fn frobenius_fit_oracle(
    s: &SMatrix,
    z: &RandomDesign,
    parameterization: FroParam<'_>,
) -> Result<FroFit> {
    let n = z.n();
    if n > 50 {
        return Err(Error::Usage(format!(
            "frobenius oracle is guarded to n ≤ 50, got {n}"
        )));
    }
    if s.matrix().nrows() != n {
        return Err(Error::Data("S and Z have incompatible dimensions".into()));
    }
    let zd = z.to_dense();
    let q = z.q();
    let d = z.d();
    let m = z.m();

    // Symmetric basis matrices for the Λ part, then one identity for σ².
    let mut bases: Vec<DMatrix<f64>> = Vec::new();
    match parameterization {
        FroParam::General => {
            if q > 12 {
                return Err(Error::Usage(format!(
                    "general Frobenius oracle is guarded to q ≤ 12, got {q}"
                )));
            }
            for i in 0..q {
                for j in i..q {
                    let mut e = DMatrix::zeros(q, q);
                    e[(i, j)] = 1.0;
                    e[(j, i)] = 1.0;
                    bases.push(&zd * e * zd.transpose());
                }
            }
        }
        FroParam::Blocked => {
            if d > 12 {
                return Err(Error::Usage(format!(
                    "blocked Frobenius oracle is guarded to d ≤ 12, got {d}"
                )));
            }
            for i in 0..d {
                for j in i..d {
                    let mut e = DMatrix::zeros(q, q);
                    for g in 0..m {
                        e[(g * d + i, g * d + j)] = 1.0;
                        e[(g * d + j, g * d + i)] = 1.0;
                    }
                    bases.push(&zd * e * zd.transpose());
                }
            }
        }
        FroParam::Theta(d_matrix) => {
            if d_matrix.nrows() != q || d_matrix.ncols() != q {
                return Err(Error::Data("reference matrix D must be q×q".into()));
            }
            bases.push(&zd * d_matrix * zd.transpose());
        }
    }
    bases.push(DMatrix::identity(n, n)); // σ² term

    let u = bases.len();
    let mut gram = DMatrix::zeros(u, u);
    let mut rhs = DVector::zeros(u);
    for a in 0..u {
        for b in a..u {
            let inner = bases[a].dot(&bases[b]);
            gram[(a, b)] = inner;
            gram[(b, a)] = inner;
        }
        rhs[a] = bases[a].dot(s.matrix());
    }
    let sol = gram.lu().solve(&rhs).ok_or_else(|| {
        Error::Numerical("degenerate parameterization: singular normal equations".into())
    })?;
    let sigma2 = sol[u - 1];

    match parameterization {
        FroParam::General => {
            let mut lambda = DMatrix::zeros(q, q);
            let mut idx = 0;
            for i in 0..q {
                for j in i..q {
                    lambda[(i, j)] = sol[idx];
                    lambda[(j, i)] = sol[idx];
                    idx += 1;
                }
            }
            Ok(FroFit::General { lambda, sigma2 })
        }
        FroParam::Blocked => {
            let mut h = DMatrix::zeros(d, d);
            let mut idx = 0;
            for i in 0..d {
                for j in i..d {
                    h[(i, j)] = sol[idx];
                    h[(j, i)] = sol[idx];
                    idx += 1;
                }
            }
            Ok(FroFit::Blocked { h, sigma2 })
        }
        FroParam::Theta(_) => Ok(FroFit::Theta { theta: sol[0], sigma2 }),
    }
}

/// The Frobenius objective ‖ZΛZᵀ − S + σ²I‖_F² for a dense Λ.
pub fn frobenius_objective(s: &SMatrix, z: &RandomDesign, lambda: &DMatrix<f64>, sigma2: f64) -> f64 {
    let zd = z.to_dense();
    let mut resid = &zd * lambda * zd.transpose() - s.matrix();
    for i in 0..resid.nrows() {
        resid[(i, i)] += sigma2;
    }
    resid.norm_squared()
}

/// Dense Walsh matrix from the recursive definition W_{2k} = [[W_k, W_k],
/// [W_k, −W_k]], W₁ = 1. Guarded to p′ ≤ 1024.
pub fn dense_walsh(p_padded: usize) -> Result<DMatrix<f64>> {
    if !p_padded.is_power_of_two() {
        return Err(Error::Usage("walsh dimension must be a power of two".into()));
    }
    if p_padded > 1024 {
        return Err(Error::Usage(format!(
            "dense walsh oracle is guarded to p′ ≤ 1024, got {p_padded}"
        )));
    }
    let mut w = DMatrix::from_element(1, 1, 1.0);
    let mut k = 1;
    while k < p_padded {
        let mut next = DMatrix::zeros(2 * k, 2 * k);
        next.view_mut((0, 0), (k, k)).copy_from(&w);
        next.view_mut((0, k), (k, k)).copy_from(&w);
        next.view_mut((k, 0), (k, k)).copy_from(&w);
        next.view_mut((k, k), (k, k)).copy_from(&(-&w));
        w = next;
        k *= 2;
    }
    Ok(w)
}

/// Materializes Π densely (s×p′) from the Walsh-entry identity
/// W[i,j] = (−1)^popcount(i & j), independent of the recursive construction.
/// Guarded to p′ ≤ 4096.
pub fn dense_srht(sk: &crate::sketch::Sketch) -> Result<DMatrix<f64>> {
    let pp = sk.p_padded();
    if pp > 4096 {
        return Err(Error::Usage(format!(
            "dense SRHT oracle is guarded to p′ ≤ 4096, got {pp}"
        )));
    }
    let s = sk.s();
    let mut pi = DMatrix::zeros(s, pp);
    for (t, &row) in sk.rows().iter().enumerate() {
        for j in 0..pp {
            let sign = if (row & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            pi[(t, j)] = sign * sk.signs()[j] * sk.scale();
        }
    }
    Ok(pi)
}

/// Runs a battery of oracle-vs-implementation cross-checks at desk scale and
/// reports one record per comparison. Reference values never flow through the
/// fast paths they judge.
pub fn oracle_battery(seed: u64) -> Result<Vec<OracleReport>> {
    use crate::avc::{avc_general, build_s_matrix, KernelTag};
    use crate::estimators::{dual_beta, estimate_intercept};
    use crate::model::{build_marginal_variance, LambdaKind, VarianceComponents};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    // FWHT against the dense recursive Walsh construction.
    {
        let n = 64;
        let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let w = dense_walsh(n)?;
        let expect = &w * DVector::from_vec(v.clone());
        let mut got = v;
        crate::sketch::fwht_in_place(&mut got)?;
        let err = got
            .iter()
            .zip(expect.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max)
            / expect.amax().max(1.0);
        reports.push(OracleReport::compare("fwht_vs_dense_walsh", "p'=64", 0.0, err, 1e-12));
    }

    // SRHT row orthogonality Π·Πᵀ = (p′/s)·I.
    {
        let sk = crate::sketch::Sketch::with_sample_count(64, 16, seed)?;
        let pi = dense_srht(&sk)?;
        let gram = &pi * pi.transpose();
        let scale = 64.0 / 16.0;
        let mut err = 0.0f64;
        for i in 0..16 {
            for j in 0..16 {
                let expect = if i == j { scale } else { 0.0 };
                err = err.max((gram[(i, j)] - expect).abs());
            }
        }
        reports.push(OracleReport::compare("srht_orthogonality", "p'=64 s=16", 0.0, err, 1e-12));
    }

    // Primal (dense normal equations) vs dual (kernel solve).
    {
        let n = 20;
        let p = 50;
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let phi = PriorPhi::scalar(1.0, p)?;
        let z = RandomDesign::single(DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>()))?;
        let vc = VarianceComponents::blocked(DMatrix::identity(2, 2), 1.0)?;
        let mv = build_marginal_variance(&vc, &z)?;
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let primal = primal_beta_exact(&x, &phi, &mv, &y, None)?;
        let dual = dual_beta(&x, &phi, &mv, &y)?;
        let err = (&dual.beta - &primal).norm() / primal.norm();
        reports.push(OracleReport::compare("dual_vs_primal", "n=20 p=50", 0.0, err, 1e-8));

        // Intercept ratio against a dense-inverse evaluation.
        let v_inv = mv.inverse_dense();
        let ones = DVector::repeat(n, 1.0);
        let c_expect = (ones.dot(&(&v_inv * &y)) - ones.dot(&(&v_inv * (&x * &primal))))
            / ones.dot(&(&v_inv * &ones));
        let c_got = estimate_intercept(&mv, &x, &primal, &y);
        reports.push(OracleReport::compare("intercept_vs_dense", "n=20", c_expect, c_got, 1e-10));
    }

    // General AVCs against the Frobenius least-squares oracle.
    {
        let n = 20;
        let z = RandomDesign::single(DMatrix::from_fn(n, 3, |_, _| rng.random::<f64>()))?;
        let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sym = 0.5 * (&a + a.transpose());
        let s = build_s_matrix(&DVector::zeros(n), 0.0, &(-sym), KernelTag::Exact);
        let est = avc_general(&s, &z)?;
        let fit = frobenius_fit_oracle(&s, &z, FroParam::General)?;
        let (h, sigma2) = match (&est.vc.kind, fit) {
            (LambdaKind::Blocked { h }, FroFit::General { lambda, sigma2 }) => {
                ((h - &lambda).amax(), sigma2)
            }
            _ => unreachable!(),
        };
        reports.push(OracleReport::compare("avc_lambda_vs_frobenius", "n=20 q=3", 0.0, h, 1e-6));
        reports.push(OracleReport::compare(
            "avc_sigma2_vs_frobenius",
            "n=20 q=3",
            sigma2,
            est.vc.sigma2,
            1e-6,
        ));
    }

    // REML criterion against determinant + dense inverse.
    {
        let n = 10;
        let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let m = &g * g.transpose() + DMatrix::identity(n, n);
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r = &y - DVector::repeat(n, 0.2);
        let expect = -0.5 * m.determinant().ln()
            - 0.5 * r.dot(&(m.clone().try_inverse().unwrap() * &r));
        let got = reml_criterion(&m, &y, 0.2)?;
        reports.push(OracleReport::compare("reml_vs_dense", "n=10", expect, got, 1e-10));
    }

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avc::{build_s_matrix, KernelTag};
    use crate::model::{build_marginal_variance, VarianceComponents};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn identity_mv(n: usize) -> MarginalVariance {
        let z = RandomDesign::single(DMatrix::from_element(n, 1, 1.0)).unwrap();
        let vc = VarianceComponents::blocked(DMatrix::zeros(1, 1), 1.0).unwrap();
        build_marginal_variance(&vc, &z).unwrap()
    }

    #[test]
    fn naive_kernel_trivials() {
        let x = DMatrix::identity(3, 3);
        let phi = PriorPhi::scalar(1.0, 3).unwrap();
        assert_relative_eq!(naive_kernel(&x, &phi), DMatrix::identity(3, 3), epsilon = 1e-15);
        let phi_small = PriorPhi::scalar(1e-300, 3).unwrap();
        assert!(naive_kernel(&x, &phi_small).amax() <= 1e-299);
    }

    #[test]
    fn naive_kernel_matches_outer_product_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(8, 32, |_, _| rng.sample::<f64, _>(StandardNormal));
        let phi = PriorPhi::from_diag(DVector::from_fn(32, |i, _| 0.1 + i as f64 * 0.03)).unwrap();
        // Alternate accumulation order: sum of rank-one column outer products.
        let mut k = DMatrix::zeros(8, 8);
        for l in 0..32 {
            let col = x.column(l).clone_owned();
            k += &col * col.transpose() * phi.diag()[l];
        }
        let got = naive_kernel(&x, &phi);
        assert_relative_eq!(got, k, max_relative = 1e-13);
    }

    #[test]
    fn reml_criterion_trivials() {
        let m = DMatrix::identity(4, 4);
        let y = DVector::repeat(4, 3.0);
        assert_relative_eq!(reml_criterion(&m, &y, 3.0).unwrap(), 0.0, epsilon = 1e-15);

        // M = 2I, n = 2, y − ĉ1 = (1, 0) → −½·2·ln2 − ¼.
        let m = DMatrix::identity(2, 2) * 2.0;
        let y = DVector::from_vec(vec![1.0, 0.0]);
        assert_relative_eq!(
            reml_criterion(&m, &y, 0.0).unwrap(),
            -2.0f64.ln() - 0.25,
            epsilon = 1e-14
        );
    }

    #[test]
    fn reml_criterion_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = DMatrix::from_fn(10, 10, |_, _| rng.sample::<f64, _>(StandardNormal));
        let m = &g * g.transpose() + DMatrix::identity(10, 10);
        let y = DVector::from_fn(10, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = 0.3;
        let r = &y - DVector::repeat(10, c);
        let expect = -0.5 * m.determinant().ln()
            - 0.5 * r.dot(&(m.clone().try_inverse().unwrap() * &r));
        assert_relative_eq!(reml_criterion(&m, &y, c).unwrap(), expect, max_relative = 1e-10);
    }

    #[test]
    fn reml_criterion_rejects_indefinite() {
        let m = -DMatrix::identity(3, 3);
        assert!(reml_criterion(&m, &DVector::zeros(3), 0.0).is_err());
    }

    #[test]
    fn primal_oracle_ols_limit() {
        // Φ → ∞, V = I, L = centering → β̂ → OLS on centered data.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 30;
        let p = 4;
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let beta_true = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let y = &x * &beta_true
            + DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)).scale(0.01)
            + DVector::repeat(n, 5.0);
        let mv = identity_mv(n);
        let phi = PriorPhi::scalar(1e8, p).unwrap();
        let beta = primal_beta_exact(&x, &phi, &mv, &y, None).unwrap();
        // Centered OLS.
        let xc = {
            let mut xc = x.clone();
            for j in 0..p {
                let mean = x.column(j).mean();
                for i in 0..n {
                    xc[(i, j)] -= mean;
                }
            }
            xc
        };
        let yc = &y - DVector::repeat(n, y.mean());
        let ols = (xc.tr_mul(&xc)).lu().solve(&xc.tr_mul(&yc)).unwrap();
        assert_relative_eq!(beta, ols, max_relative = 1e-6);
    }

    #[test]
    fn primal_oracle_scalar_closed_form() {
        // p = 1, fixed c: β̂ = (xᵀV⁻¹x + 1/φ)⁻¹ xᵀV⁻¹(y − c1).
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![2.0, 4.1, 5.9]);
        let mv = identity_mv(3);
        let phi = PriorPhi::scalar(2.0, 1).unwrap();
        let c = 0.5;
        let beta = primal_beta_exact(&x, &phi, &mv, &y, Some(c)).unwrap();
        let xs = [1.0, 2.0, 3.0];
        let num: f64 = xs.iter().zip([2.0, 4.1, 5.9]).map(|(a, b)| a * (b - c)).sum();
        let den: f64 = xs.iter().map(|a| a * a).sum::<f64>() + 0.5;
        assert_relative_eq!(beta[0], num / den, epsilon = 1e-12);
    }

    #[test]
    fn primal_oracle_guard() {
        let x = DMatrix::zeros(2, 2001);
        let phi = PriorPhi::scalar(1.0, 2001).unwrap();
        let mv = identity_mv(2);
        assert!(primal_beta_exact(&x, &phi, &mv, &DVector::zeros(2), None).is_err());
    }

    #[test]
    fn frobenius_oracle_identity_s() {
        // S = I → Λ = 0, σ² = 1.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = RandomDesign::single(DMatrix::from_fn(10, 2, |_, _| rng.random::<f64>())).unwrap();
        let s = build_s_matrix_raw(DMatrix::identity(10, 10));
        let fit = frobenius_fit_oracle(&s, &z, FroParam::General).unwrap();
        match fit {
            FroFit::General { lambda, sigma2 } => {
                assert!(lambda.amax() <= 1e-10);
                assert_relative_eq!(sigma2, 1.0, epsilon = 1e-10);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn frobenius_oracle_realizable_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z = RandomDesign::new(vec![
            DMatrix::from_fn(8, 2, |_, _| rng.random::<f64>()),
            DMatrix::from_fn(9, 2, |_, _| rng.random::<f64>()),
        ])
        .unwrap();
        let h0 = DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 0.8]);
        let sigma0 = 0.7;
        let zd = z.to_dense();
        let mut lambda0 = DMatrix::zeros(4, 4);
        lambda0.view_mut((0, 0), (2, 2)).copy_from(&h0);
        lambda0.view_mut((2, 2), (2, 2)).copy_from(&h0);
        let mut s_mat = &zd * &lambda0 * zd.transpose();
        for i in 0..17 {
            s_mat[(i, i)] += sigma0;
        }
        let s = build_s_matrix_raw(s_mat);
        let fit = frobenius_fit_oracle(&s, &z, FroParam::Blocked).unwrap();
        match fit {
            FroFit::Blocked { h, sigma2 } => {
                assert_relative_eq!(h, h0, epsilon = 1e-8);
                assert_relative_eq!(sigma2, sigma0, epsilon = 1e-8);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn dense_walsh_small_cases() {
        let w2 = dense_walsh(2).unwrap();
        assert_eq!(w2, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]));
        assert!(dense_walsh(3).is_err());
        assert!(dense_walsh(2048).is_err());
    }

    #[test]
    fn dense_srht_w2_rows() {
        // p′=2, s=2: rows of W₂D/√2 in sampled order.
        let sk = crate::sketch::Sketch::with_sample_count(2, 2, 5).unwrap();
        let pi = dense_srht(&sk).unwrap();
        let scale = 1.0 / 2.0f64.sqrt();
        for (t, &row) in sk.rows().iter().enumerate() {
            for j in 0..2 {
                let w = if row == 1 && j == 1 { -1.0 } else { 1.0 };
                assert_relative_eq!(pi[(t, j)], w * sk.signs()[j] * scale, epsilon = 1e-15);
            }
        }
        // Π·Πᵀ = (p′/s)·I.
        let gram = &pi * pi.transpose();
        assert_relative_eq!(gram, DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn dense_srht_matches_forward_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = 24;
        let sk = crate::sketch::Sketch::with_sample_count(p, 12, 3).unwrap();
        let pi = dense_srht(&sk).unwrap();
        let phi = PriorPhi::scalar(1.0, p).unwrap();
        let v = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut padded = DVector::zeros(sk.p_padded());
        padded.rows_mut(0, p).copy_from(&v);
        let expect = &pi * padded;
        let got = sk.forward(&v, &phi).unwrap();
        assert_relative_eq!(got, expect, max_relative = 1e-12);
    }

    fn build_s_matrix_raw(mat: DMatrix<f64>) -> SMatrix {
        // Test-only S with an arbitrary symmetric matrix: encode S = r rᵀ − K
        // with r = 0 and K = −mat.
        build_s_matrix(
            &DVector::zeros(mat.nrows()),
            0.0,
            &(-mat),
            KernelTag::Exact,
        )
    }
}
