//! Subsampled randomized Hadamard transform: in-place fast Walsh–Hadamard
//! butterflies, the s_ε sampling rule, sketch construction, and the
//! approximate kernel ÂÂᵀ of the prior-scaled covariates.
//!
//! The Walsh matrix W_{p′} (recursive definition with W₁ = 1) is never formed
//! explicitly; rows of X are processed one at a time through a reusable
//! length-p′ buffer. Logarithms in the s_ε rule are natural logs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::PriorPhi;

/// RNG stream ids so the sign and row draws are independent per seed.
const SIGN_STREAM: u64 = 1;
const ROW_STREAM: u64 = 2;

/// In-place Walsh–Hadamard transform v ← W_{p′}·v (unnormalized butterflies,
/// O(p′ log p′)). The length must be a power of two.
pub fn fwht_in_place(v: &mut [f64]) -> Result<()> {
    let n = v.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Usage(format!(
            "fwht length must be a power of two, got {n}"
        )));
    }
    let mut h = 1;
    while h < n {
        let mut i = 0;
        while i < n {
            for j in i..i + h {
                let a = v[j];
                let b = v[j + h];
                v[j] = a + b;
                v[j + h] = a - b;
            }
            i += 2 * h;
        }
        h <<= 1;
    }
    Ok(())
}

/// Result of the s_ε rule: the sample count, clamped to [1, p′], and whether
/// the formula demanded more rows than p′ has.
#[derive(Debug, Clone, Copy)]
pub struct SampleSize {
    pub s: usize,
    pub clamped: bool,
}

/// s_ε := 6·[√r + √(8·ln(r·p′))]²·ln(r)/ε², rounded up and clamped to
/// [1, p_padded]. The clamp flag is set only when the formula exceeds p′.
pub fn sample_size(rank_bound: usize, p_padded: usize, epsilon: f64) -> Result<SampleSize> {
    if rank_bound < 1 || p_padded < 1 {
        return Err(Error::Usage(
            "rank bound and padded dimension must be ≥ 1".into(),
        ));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Usage(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    let r = rank_bound as f64;
    let pp = p_padded as f64;
    let raw = 6.0 * (r.sqrt() + (8.0 * (r * pp).ln()).sqrt()).powi(2) * r.ln()
        / (epsilon * epsilon);
    let ceil = raw.ceil();
    if ceil > pp {
        Ok(SampleSize { s: p_padded, clamped: true })
    } else {
        Ok(SampleSize { s: (ceil as usize).max(1), clamped: false })
    }
}

/// An SRHT Π = subsample(W_{p′}·D)/√s: Rademacher sign diagonal D, a set of s
/// distinct sampled Walsh rows, and the 1/√s scale. Deterministic in the seed;
/// immutable and shareable once built.
#[derive(Debug, Clone)]
pub struct Sketch {
    p: usize,
    p_padded: usize,
    signs: Vec<f64>,
    rows: Vec<usize>,
    scale: f64,
    seed: u64,
    clamp_warning: bool,
}

impl Sketch {
    /// Sketch with the sample count given by the s_ε rule.
    pub fn build(p: usize, rank_bound: usize, epsilon: f64, seed: u64) -> Result<Self> {
        if p < 1 {
            return Err(Error::Usage("p must be ≥ 1".into()));
        }
        let p_padded = p.next_power_of_two();
        let ss = sample_size(rank_bound, p_padded, epsilon)?;
        Ok(Self::assemble(p, p_padded, ss.s, ss.clamped, seed))
    }

    /// Sketch with an explicit sample count (tests, oracles, and qualitative
    /// sweeps below the s_ε scale).
    pub fn with_sample_count(p: usize, s: usize, seed: u64) -> Result<Self> {
        if p < 1 {
            return Err(Error::Usage("p must be ≥ 1".into()));
        }
        let p_padded = p.next_power_of_two();
        if s < 1 || s > p_padded {
            return Err(Error::Usage(format!(
                "sample count must lie in [1, {p_padded}], got {s}"
            )));
        }
        Ok(Self::assemble(p, p_padded, s, false, seed))
    }

    fn assemble(p: usize, p_padded: usize, s: usize, clamp_warning: bool, seed: u64) -> Self {
        let mut sign_rng = ChaCha8Rng::seed_from_u64(seed);
        sign_rng.set_stream(SIGN_STREAM);
        let signs: Vec<f64> =
            (0..p_padded).map(|_| if sign_rng.random::<bool>() { 1.0 } else { -1.0 }).collect();

        // Partial Fisher–Yates over [0, p′): exactly uniform without replacement.
        let mut row_rng = ChaCha8Rng::seed_from_u64(seed);
        row_rng.set_stream(ROW_STREAM);
        let mut pool: Vec<usize> = (0..p_padded).collect();
        for t in 0..s {
            let j = row_rng.random_range(t..p_padded);
            pool.swap(t, j);
        }
        pool.truncate(s);

        Sketch {
            p,
            p_padded,
            signs,
            rows: pool,
            scale: 1.0 / (s as f64).sqrt(),
            seed,
            clamp_warning,
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn p_padded(&self) -> usize {
        self.p_padded
    }

    pub fn s(&self) -> usize {
        self.rows.len()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn clamp_warning(&self) -> bool {
        self.clamp_warning
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    /// Π(√Φ ⊙ v) for one p-vector v, writing the s transformed entries into
    /// `out` through the reusable padded buffer `buf`.
    fn forward_into(&self, v: &[f64], sqrt_phi: &[f64], buf: &mut [f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.p);
        debug_assert_eq!(buf.len(), self.p_padded);
        debug_assert_eq!(out.len(), self.s());
        for j in 0..self.p {
            buf[j] = v[j] * sqrt_phi[j] * self.signs[j];
        }
        buf[self.p..].fill(0.0);
        fwht_in_place(buf).expect("padded length is a power of two");
        for (t, &row) in self.rows.iter().enumerate() {
            out[t] = buf[row] * self.scale;
        }
    }

    /// Π(√Φ ⊙ v) as an owned s-vector.
    pub fn forward(&self, v: &DVector<f64>, phi: &PriorPhi) -> Result<DVector<f64>> {
        if v.len() != self.p || phi.len() != self.p {
            return Err(Error::Usage(format!(
                "forward transform expects length {} input, got v: {}, phi: {}",
                self.p,
                v.len(),
                phi.len()
            )));
        }
        let sqrt_phi = phi.sqrt_diag();
        let mut buf = vec![0.0; self.p_padded];
        let mut out = vec![0.0; self.s()];
        self.forward_into(v.as_slice(), sqrt_phi.as_slice(), &mut buf, &mut out);
        Ok(DVector::from_vec(out))
    }

    /// √Φ·Πᵀ·w: scatter w into the sampled row positions, apply the (symmetric)
    /// Walsh transform once, then the sign diagonal, the 1/√s scale, and √Φ,
    /// truncating to the original p coordinates. O(p′ log p′).
    pub fn lift(&self, w: &DVector<f64>, phi: &PriorPhi) -> Result<DVector<f64>> {
        if w.len() != self.s() || phi.len() != self.p {
            return Err(Error::Usage(format!(
                "lift expects w of length {} and phi of length {}, got {} and {}",
                self.s(),
                self.p,
                w.len(),
                phi.len()
            )));
        }
        let mut buf = vec![0.0; self.p_padded];
        for (t, &row) in self.rows.iter().enumerate() {
            buf[row] = w[t];
        }
        fwht_in_place(&mut buf).expect("padded length is a power of two");
        let sqrt_phi = phi.sqrt_diag();
        let mut out = DVector::zeros(self.p);
        for j in 0..self.p {
            out[j] = buf[j] * self.signs[j] * self.scale * sqrt_phi[j];
        }
        Ok(out)
    }
}

/// Transformed covariates A = X√Φ·Πᵀ (stored transposed, s×n, so rows of A are
/// contiguous columns) together with the approximate kernel K̂ = AAᵀ.
#[derive(Debug, Clone)]
pub struct KernelApprox {
    a_t: DMatrix<f64>,
    k_hat: DMatrix<f64>,
    sketch_seed: u64,
}

impl KernelApprox {
    /// Aᵀ as stored: s×n, column i holding the transform of row i of X.
    pub fn a_t(&self) -> &DMatrix<f64> {
        &self.a_t
    }

    /// K̂ = AAᵀ (n×n, symmetric PSD).
    pub fn k_hat(&self) -> &DMatrix<f64> {
        &self.k_hat
    }

    pub fn n(&self) -> usize {
        self.a_t.ncols()
    }

    pub fn s(&self) -> usize {
        self.a_t.nrows()
    }

    pub fn sketch_seed(&self) -> u64 {
        self.sketch_seed
    }

    /// Aᵀu for an n-vector u.
    pub fn at_mul(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.a_t * u
    }

    /// A·w for an s-vector w.
    pub fn a_mul(&self, w: &DVector<f64>) -> DVector<f64> {
        self.a_t.tr_mul(w)
    }
}

/// Applies the sketch to every row of X: each row is scaled by √Φ, zero-padded
/// to p′, sign-flipped, Walsh-transformed, subsampled, and scaled by 1/√s.
/// Rows are independent, so the row loop parallelizes without changing
/// results. Returns the s×n transposed storage (column i = row i of A).
pub fn transform_rows(x: &DMatrix<f64>, phi: &PriorPhi, sk: &Sketch) -> Result<DMatrix<f64>> {
    if x.ncols() != sk.p() {
        return Err(Error::Usage(format!(
            "sketch was built for p = {}, but X has {} columns",
            sk.p(),
            x.ncols()
        )));
    }
    if phi.len() != sk.p() {
        return Err(Error::Usage(format!(
            "prior has length {}, expected {}",
            phi.len(),
            sk.p()
        )));
    }
    let n = x.nrows();
    let s = sk.s();
    let sqrt_phi = phi.sqrt_diag();
    let sqrt_phi = sqrt_phi.as_slice();

    let mut data = vec![0.0f64; s * n];
    data.par_chunks_mut(s).enumerate().for_each(|(i, col)| {
        let mut buf = vec![0.0; sk.p_padded()];
        let mut row = vec![0.0; sk.p()];
        for j in 0..sk.p() {
            row[j] = x[(i, j)];
        }
        sk.forward_into(&row, sqrt_phi, &mut buf, col);
    });
    Ok(DMatrix::from_vec(s, n, data))
}

/// Wraps transformed rows into a kernel approximation with K̂ = AAᵀ.
pub fn kernel_from_transformed(a_t: DMatrix<f64>, sketch_seed: u64) -> KernelApprox {
    let n = a_t.ncols();
    // Materializing the transpose routes the Gram product through the blocked
    // GEMM kernel, which is far faster than entrywise dot products at large s.
    let mut k_hat = a_t.transpose() * &a_t;
    // Symmetrize away accumulation-order noise from the Gram product.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (k_hat[(i, j)] + k_hat[(j, i)]);
            k_hat[(i, j)] = v;
            k_hat[(j, i)] = v;
        }
    }
    KernelApprox { a_t, k_hat, sketch_seed }
}

/// Row transforms followed by the kernel Gram product K̂ = AAᵀ.
pub fn transform_covariates(
    x: &DMatrix<f64>,
    phi: &PriorPhi,
    sk: &Sketch,
) -> Result<KernelApprox> {
    let a_t = transform_rows(x, phi, sk)?;
    Ok(kernel_from_transformed(a_t, sk.seed()))
}
