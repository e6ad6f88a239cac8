//! Core data types for the ℓ2-regularized LMM: observed data with its
//! group-blocked random-effects design, the diagonal fixed-effects prior,
//! variance components, and the factorized marginal variance V = ZΛZᵀ + σ²I.
//!
//! Λ is never materialized as a dense q×q matrix; every product with Λ goes
//! through the m-block structure (blocked kind) or the θ·D parameterization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative symmetry tolerance for accepting user-supplied covariance blocks.
const SYMMETRY_RTOL: f64 = 1e-8;

/// Block-diagonal random-effects design: m groups, block i of size nᵢ×d.
#[derive(Debug, Clone)]
pub struct RandomDesign {
    blocks: Vec<DMatrix<f64>>,
    /// Row offset of each block, plus a trailing entry equal to n.
    offsets: Vec<usize>,
}

impl RandomDesign {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Data("random design needs at least one group".into()));
        }
        let d = blocks[0].ncols();
        if d == 0 {
            return Err(Error::Data("random-effects blocks must have d ≥ 1 columns".into()));
        }
        let mut offsets = Vec::with_capacity(blocks.len() + 1);
        let mut n = 0usize;
        for (i, b) in blocks.iter().enumerate() {
            if b.ncols() != d {
                return Err(Error::Data(format!(
                    "group {i} has {} random-effect columns, expected {d}",
                    b.ncols()
                )));
            }
            if b.nrows() == 0 {
                return Err(Error::Data(format!("group {i} has no observations")));
            }
            offsets.push(n);
            n += b.nrows();
        }
        offsets.push(n);
        Ok(Self { blocks, offsets })
    }

    /// Single-group design (m = 1).
    pub fn single(z: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![z])
    }

    pub fn n(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    pub fn d(&self) -> usize {
        self.blocks[0].ncols()
    }

    pub fn q(&self) -> usize {
        self.m() * self.d()
    }

    pub fn block(&self, i: usize) -> &DMatrix<f64> {
        &self.blocks[i]
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    /// Row range of group i within stacked n-vectors.
    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.nrows()).collect()
    }

    /// Z·g for a stacked q-vector g.
    pub fn apply(&self, g: &DVector<f64>) -> DVector<f64> {
        assert_eq!(g.len(), self.q());
        let d = self.d();
        let mut out = DVector::zeros(self.n());
        for (i, b) in self.blocks.iter().enumerate() {
            let gi = g.rows(i * d, d);
            let mut oi = out.rows_mut(self.offsets[i], b.nrows());
            oi.copy_from(&(b * gi));
        }
        out
    }

    /// Zᵀ·v for an n-vector v.
    pub fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.n());
        let d = self.d();
        let mut out = DVector::zeros(self.q());
        for (i, b) in self.blocks.iter().enumerate() {
            let vi = v.rows(self.offsets[i], b.nrows());
            out.rows_mut(i * d, d).copy_from(&b.tr_mul(&vi));
        }
        out
    }

    /// Per-block Gram matrices ZᵢᵀZᵢ.
    pub fn gram_blocks(&self) -> Vec<DMatrix<f64>> {
        self.blocks.iter().map(|b| b.tr_mul(b)).collect()
    }

    /// Materialize Z densely (n×q). Desk-scale oracles and tests only.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.d();
        let mut z = DMatrix::zeros(self.n(), self.q());
        for (i, b) in self.blocks.iter().enumerate() {
            z.view_mut((self.offsets[i], i * d), (b.nrows(), d)).copy_from(b);
        }
        z
    }

    /// Errors with the offending group index if any block is column-rank deficient.
    pub fn require_full_column_rank(&self) -> Result<()> {
        let d = self.d();
        for (i, b) in self.blocks.iter().enumerate() {
            if b.nrows() < d {
                return Err(Error::Data(format!(
                    "group {i} has fewer rows ({}) than random-effect columns ({d})",
                    b.nrows()
                )));
            }
            let eps = 1e-10 * b.amax().max(1.0);
            if b.rank(eps) < d {
                return Err(Error::Data(format!(
                    "random-effects design is column-rank deficient in group {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Observed LMM data: covariates X (n×p), grouped random design Z, response y.
#[derive(Debug, Clone)]
pub struct MixedModelData {
    x: DMatrix<f64>,
    z: RandomDesign,
    y: DVector<f64>,
}

impl MixedModelData {
    pub fn new(x: DMatrix<f64>, z_blocks: Vec<DMatrix<f64>>, y: DVector<f64>) -> Result<Self> {
        let z = RandomDesign::new(z_blocks)?;
        if x.nrows() != z.n() {
            return Err(Error::Data(format!(
                "group sizes sum to {} but X has {} rows",
                z.n(),
                x.nrows()
            )));
        }
        if y.len() != x.nrows() {
            return Err(Error::Data(format!(
                "y has length {} but X has {} rows",
                y.len(),
                x.nrows()
            )));
        }
        Ok(Self { x, z, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &RandomDesign {
        &self.z
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.z.m()
    }

    pub fn d(&self) -> usize {
        self.z.d()
    }

    pub fn q(&self) -> usize {
        self.z.q()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.z.group_sizes()
    }
}

/// Diagonal fixed-effects prior covariance Φ with strictly positive entries.
#[derive(Debug, Clone)]
pub struct PriorPhi {
    diag: DVector<f64>,
}

impl PriorPhi {
    pub fn from_diag(diag: DVector<f64>) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::Data("prior diagonal must be non-empty".into()));
        }
        if diag.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Data(
                "prior diagonal must be strictly positive and finite".into(),
            ));
        }
        Ok(Self { diag })
    }

    /// Φ = τ·I of dimension p.
    pub fn scalar(tau: f64, p: usize) -> Result<Self> {
        Self::from_diag(DVector::repeat(p, tau))
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn diag(&self) -> &DVector<f64> {
        &self.diag
    }

    pub fn sqrt_diag(&self) -> DVector<f64> {
        self.diag.map(f64::sqrt)
    }

    /// Φ·v.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        v.component_mul(&self.diag)
    }
}

/// How Λ is represented.
#[derive(Debug, Clone)]
pub enum LambdaKind {
    /// Λ = blockdiag(H, …, H) with a shared symmetric d×d H.
    Blocked { h: DMatrix<f64> },
    /// Λ = θ·D for a fixed symmetric PSD reference matrix D (q×q).
    Parameterized { theta: f64, d_matrix: DMatrix<f64> },
}

/// Variance components (Λ, σ²). Indefinite Λ and negative σ² are allowed as
/// AVC outputs; simulation and likelihood evaluation require PSD Λ and σ² > 0.
#[derive(Debug, Clone)]
pub struct VarianceComponents {
    pub kind: LambdaKind,
    pub sigma2: f64,
}

fn check_symmetric(name: &str, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Data(format!("{name} must be square")));
    }
    let scale = a.amax();
    let mut max_asym = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..i {
            max_asym = max_asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if max_asym > SYMMETRY_RTOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Data(format!(
            "{name} is not symmetric: max|A−Aᵀ| = {max_asym:.3e} exceeds {SYMMETRY_RTOL:.0e}·max|A|"
        )));
    }
    Ok(0.5 * (a + a.transpose()))
}

impl VarianceComponents {
    /// Blocked kind. `h` is symmetry-checked and symmetrized; it may be indefinite.
    pub fn blocked(h: DMatrix<f64>, sigma2: f64) -> Result<Self> {
        let h = check_symmetric("H", &h)?;
        Ok(Self { kind: LambdaKind::Blocked { h }, sigma2 })
    }

    /// Parameterized kind Λ = θ·D.
    pub fn parameterized(theta: f64, d_matrix: DMatrix<f64>, sigma2: f64) -> Result<Self> {
        let d_matrix = check_symmetric("D", &d_matrix)?;
        Ok(Self { kind: LambdaKind::Parameterized { theta, d_matrix }, sigma2 })
    }

    /// Λ·g for a stacked q-vector g (block structure, no q×q materialization).
    pub fn lambda_apply(&self, g: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            LambdaKind::Blocked { h } => {
                let d = h.nrows();
                assert_eq!(g.len() % d, 0, "q-vector incompatible with block size");
                let m = g.len() / d;
                let mut out = DVector::zeros(g.len());
                for i in 0..m {
                    out.rows_mut(i * d, d).copy_from(&(h * g.rows(i * d, d)));
                }
                out
            }
            LambdaKind::Parameterized { theta, d_matrix } => {
                assert_eq!(g.len(), d_matrix.nrows());
                (d_matrix * g) * *theta
            }
        }
    }
}

#[derive(Debug)]
enum VFactor {
    /// Per-group Cholesky factors of the diagonal blocks of V.
    Blocks(Vec<Cholesky<f64, Dyn>>),
    /// Single dense Cholesky of V.
    Dense(Cholesky<f64, Dyn>),
}

/// Factorized marginal variance V = ZΛZᵀ + σ²I supporting solves and logdet.
/// Immutable after construction; safe to share across concurrent readers.
#[derive(Debug)]
pub struct MarginalVariance {
    components: VarianceComponents,
    z: RandomDesign,
    factor: VFactor,
}

fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone().symmetric_eigen().eigenvalues.min()
}

/// Builds V = ZΛZᵀ + σ²I and factors it. Blocked Λ yields a block-diagonal V
/// factored per group; the parameterized kind factors one dense matrix.
pub fn build_marginal_variance(
    vc: &VarianceComponents,
    z: &RandomDesign,
) -> Result<MarginalVariance> {
    let factor = match &vc.kind {
        LambdaKind::Blocked { h } => {
            if h.nrows() != z.d() {
                return Err(Error::Data(format!(
                    "H is {}×{} but the design has d = {}",
                    h.nrows(),
                    h.ncols(),
                    z.d()
                )));
            }
            let mut factors = Vec::with_capacity(z.m());
            for (i, b) in z.blocks().iter().enumerate() {
                let mut vi = b * h * b.transpose();
                for k in 0..vi.nrows() {
                    vi[(k, k)] += vc.sigma2;
                }
                match Cholesky::new(vi.clone()) {
                    Some(c) => factors.push(c),
                    None => {
                        return Err(Error::Numerical(format!(
                            "marginal variance is not positive definite in group {i}: \
                             minimum eigenvalue {:.6e} ≤ 0",
                            min_eigenvalue(&vi)
                        )))
                    }
                }
            }
            VFactor::Blocks(factors)
        }
        LambdaKind::Parameterized { theta, d_matrix } => {
            if d_matrix.nrows() != z.q() {
                return Err(Error::Data(format!(
                    "D is {}×{} but the design has q = {}",
                    d_matrix.nrows(),
                    d_matrix.ncols(),
                    z.q()
                )));
            }
            let zd = z.to_dense();
            let mut v = &zd * d_matrix * zd.transpose() * *theta;
            for k in 0..v.nrows() {
                v[(k, k)] += vc.sigma2;
            }
            match Cholesky::new(v.clone()) {
                Some(c) => VFactor::Dense(c),
                None => {
                    return Err(Error::Numerical(format!(
                        "marginal variance is not positive definite: \
                         minimum eigenvalue {:.6e} ≤ 0",
                        min_eigenvalue(&v)
                    )))
                }
            }
        }
    };
    Ok(MarginalVariance { components: vc.clone(), z: z.clone(), factor })
}

impl MarginalVariance {
    pub fn n(&self) -> usize {
        self.z.n()
    }

    pub fn components(&self) -> &VarianceComponents {
        &self.components
    }

    pub fn z(&self) -> &RandomDesign {
        &self.z
    }

    /// V⁻¹·rhs through the cached factorization.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        assert_eq!(rhs.len(), self.n());
        match &self.factor {
            VFactor::Dense(c) => c.solve(rhs),
            VFactor::Blocks(factors) => {
                let mut out = DVector::zeros(self.n());
                for (i, c) in factors.iter().enumerate() {
                    let r = self.z.row_range(i);
                    let sub = rhs.rows(r.start, r.len());
                    out.rows_mut(r.start, r.len()).copy_from(&c.solve(&sub.clone_owned()));
                }
                out
            }
        }
    }

    /// V⁻¹·RHS for a matrix right-hand side.
    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(rhs.nrows(), self.n());
        match &self.factor {
            VFactor::Dense(c) => c.solve(rhs),
            VFactor::Blocks(factors) => {
                let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
                for (i, c) in factors.iter().enumerate() {
                    let r = self.z.row_range(i);
                    let sub = rhs.rows(r.start, r.len()).clone_owned();
                    out.rows_mut(r.start, r.len()).copy_from(&c.solve(&sub));
                }
                out
            }
        }
    }

    /// Dense V⁻¹ (n×n), assembled from the factorization.
    pub fn inverse_dense(&self) -> DMatrix<f64> {
        match &self.factor {
            VFactor::Dense(c) => c.inverse(),
            VFactor::Blocks(factors) => {
                let mut out = DMatrix::zeros(self.n(), self.n());
                for (i, c) in factors.iter().enumerate() {
                    let r = self.z.row_range(i);
                    out.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&c.inverse());
                }
                out
            }
        }
    }

    /// log det V.
    pub fn logdet(&self) -> f64 {
        let ld = |c: &Cholesky<f64, Dyn>| 2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        match &self.factor {
            VFactor::Dense(c) => ld(c),
            VFactor::Blocks(factors) => factors.iter().map(ld).sum(),
        }
    }

    /// V·w without materializing V.
    pub fn apply(&self, w: &DVector<f64>) -> DVector<f64> {
        let zw = self.z.apply_transpose(w);
        let lzw = self.components.lambda_apply(&zw);
        self.z.apply(&lzw) + w * self.components.sigma2
    }

    /// Dense V (tests and desk-scale dual solves).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut v = DMatrix::zeros(n, n);
        match &self.components.kind {
            LambdaKind::Blocked { h } => {
                for (i, b) in self.z.blocks().iter().enumerate() {
                    let r = self.z.row_range(i);
                    v.view_mut((r.start, r.start), (r.len(), r.len()))
                        .copy_from(&(b * h * b.transpose()));
                }
            }
            LambdaKind::Parameterized { theta, d_matrix } => {
                let zd = self.z.to_dense();
                v.copy_from(&(&zd * d_matrix * zd.transpose() * *theta));
            }
        }
        for k in 0..n {
            v[(k, k)] += self.components.sigma2;
        }
        v
    }
}

/// L·rhs with L = I − 1·1ᵀV⁻¹/(1ᵀV⁻¹1), using V-solves only; L is never
/// materialized as an n×n matrix.
pub fn centering_projector_apply(mv: &MarginalVariance, rhs: &DVector<f64>) -> DVector<f64> {
    let n = mv.n();
    let ones = DVector::repeat(n, 1.0);
    let v_inv_one = mv.solve(&ones);
    let denom = v_inv_one.sum();
    rhs - &ones * (v_inv_one.dot(rhs) / denom)
}
