//! Synthetic LMM data generation: X_ij ~ N(0,1), Z_ij ~ U(0,1),
//! γ⁽ᵏ⁾ ~ N(0, KᵀK) with K_ij ~ N(0,1), β ~ N(0, I), σ² ~ U(0, d),
//! intercept c ~ N(0,1), group fractions from a flat Dirichlet, and
//! y = Xβ + Zγ + c1 + e with e ~ N(0, σ²I). Every component draws from its
//! own seeded stream, so outputs are bitwise reproducible.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::model::MixedModelData;

/// Preset problem sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Low,
    Mod,
    High,
}

/// Simulation configuration (n, p, d, m, sparsity, seed).
#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub m: usize,
    /// Number of nonzero entries of β_true; 0 keeps β dense.
    pub s_nonzero: usize,
    pub seed: u64,
}

impl SimConfig {
    /// Preset regimes: LOW = (100, 1000, 5, 3, 10), MOD = (200, 10⁴, 5, 3, 10),
    /// HIGH = (10⁴, 10⁶, 10, 100, 100).
    pub fn preset(regime: Regime, seed: u64) -> Self {
        match regime {
            Regime::Low => SimConfig { n: 100, p: 1000, d: 5, m: 3, s_nonzero: 10, seed },
            Regime::Mod => SimConfig { n: 200, p: 10_000, d: 5, m: 3, s_nonzero: 10, seed },
            Regime::High => SimConfig {
                n: 10_000,
                p: 1_000_000,
                d: 10,
                m: 100,
                s_nonzero: 100,
                seed,
            },
        }
    }
}

/// Ground-truth parameters behind a simulated dataset.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub beta: DVector<f64>,
    pub c: f64,
    /// H = KᵀK, the shared random-effects covariance.
    pub h: DMatrix<f64>,
    pub sigma2: f64,
    /// γ stacked per group (q = m·d).
    pub gamma: DVector<f64>,
    pub group_sizes: Vec<usize>,
    /// Indices of the nonzero entries of β (empty in dense mode).
    pub support: Vec<usize>,
}

// Stream ids per component; X rows get 16 + row so any row is regenerable
// without drawing through its predecessors.
const STREAM_Z: u64 = 1;
const STREAM_K: u64 = 2;
const STREAM_GAMMA: u64 = 3;
const STREAM_BETA: u64 = 4;
const STREAM_SIGMA: u64 = 5;
const STREAM_C: u64 = 6;
const STREAM_NOISE: u64 = 7;
const STREAM_DIRICHLET: u64 = 8;
const STREAM_SUPPORT: u64 = 9;
const STREAM_X_BASE: u64 = 16;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One row of X, drawn from the row's own stream.
pub fn x_row(seed: u64, row: usize, p: usize, out: &mut [f64]) {
    assert_eq!(out.len(), p);
    let mut rng = stream_rng(seed, STREAM_X_BASE + row as u64);
    for v in out.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
}

/// Group sizes from flat-Dirichlet fractions by largest-remainder rounding,
/// then repaired so every group keeps at least d+1 rows (full column rank).
fn group_sizes(n: usize, m: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let floor = d + 1;
    if n < m * floor {
        return Err(Error::Data(format!(
            "infeasible split: n = {n} cannot cover {m} groups of at least {floor} rows"
        )));
    }
    // Dirichlet(1,…,1) = normalized Exp(1) draws.
    let draws: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let raw: Vec<f64> = draws.iter().map(|v| v / total * n as f64).collect();

    let mut sizes: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let mut remainder = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &g in order.iter().cycle().take(remainder * 1) {
        if remainder == 0 {
            break;
        }
        sizes[g] += 1;
        remainder -= 1;
    }
    // Raise undersized groups to the floor, taking rows from the largest.
    loop {
        let deficit: Option<usize> = (0..m).find(|&g| sizes[g] < floor);
        match deficit {
            None => break,
            Some(g) => {
                let donor = (0..m)
                    .filter(|&h| sizes[h] > floor)
                    .max_by_key(|&h| sizes[h])
                    .ok_or_else(|| Error::Data("cannot satisfy group-size floor".into()))?;
                sizes[donor] -= 1;
                sizes[g] += 1;
            }
        }
    }
    debug_assert_eq!(sizes.iter().sum::<usize>(), n);
    Ok(sizes)
}

/// Materialization guard: n·p entries of f64.
const MAX_DENSE_ENTRIES: usize = 300_000_000;

/// Draws a dataset and its ground truth per the synthetic recipe.
pub fn simulate(cfg: &SimConfig) -> Result<(MixedModelData, SimTruth)> {
    let SimConfig { n, p, d, m, s_nonzero, seed } = *cfg;
    if n == 0 || p == 0 || d == 0 || m == 0 {
        return Err(Error::Data("n, p, d, m must all be ≥ 1".into()));
    }
    if s_nonzero > p {
        return Err(Error::Data(format!("sparsity {s_nonzero} exceeds p = {p}")));
    }
    if n.checked_mul(p).map_or(true, |e| e > MAX_DENSE_ENTRIES) {
        return Err(Error::Data(format!(
            "n·p = {n}·{p} exceeds the dense materialization guard"
        )));
    }

    let sizes = group_sizes(n, m, d, &mut stream_rng(seed, STREAM_DIRICHLET))?;

    let mut beta = {
        let mut rng = stream_rng(seed, STREAM_BETA);
        DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng))
    };
    let mut support: Vec<usize> = Vec::new();
    if s_nonzero > 0 {
        // Uniform support without replacement via partial Fisher–Yates.
        let mut rng = stream_rng(seed, STREAM_SUPPORT);
        let mut pool: Vec<usize> = (0..p).collect();
        for t in 0..s_nonzero {
            let j = rng.random_range(t..p);
            pool.swap(t, j);
        }
        support = pool[..s_nonzero].to_vec();
        support.sort_unstable();
        let keep: std::collections::HashSet<usize> = support.iter().copied().collect();
        for j in 0..p {
            if !keep.contains(&j) {
                beta[j] = 0.0;
            }
        }
    }

    let k_mat = {
        let mut rng = stream_rng(seed, STREAM_K);
        DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng))
    };
    let h = k_mat.tr_mul(&k_mat);

    let gamma = {
        // γ⁽ᵏ⁾ = Kᵀg with g ~ N(0, I) has covariance KᵀK.
        let mut rng = stream_rng(seed, STREAM_GAMMA);
        let mut gamma = DVector::zeros(m * d);
        for g in 0..m {
            let white = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            gamma.rows_mut(g * d, d).copy_from(&(k_mat.tr_mul(&white)));
        }
        gamma
    };

    let sigma2 = stream_rng(seed, STREAM_SIGMA).random::<f64>() * d as f64;
    let c: f64 = StandardNormal.sample(&mut stream_rng(seed, STREAM_C));

    let z_blocks: Vec<DMatrix<f64>> = {
        let mut rng = stream_rng(seed, STREAM_Z);
        sizes
            .iter()
            .map(|&rows| DMatrix::from_fn(rows, d, |_, _| rng.random::<f64>()))
            .collect()
    };

    let mut x = DMatrix::zeros(n, p);
    {
        let mut row = vec![0.0; p];
        for i in 0..n {
            x_row(seed, i, p, &mut row);
            for j in 0..p {
                x[(i, j)] = row[j];
            }
        }
    }

    let mut y = &x * &beta + DVector::repeat(n, c);
    {
        let mut rng = stream_rng(seed, STREAM_NOISE);
        let sd = sigma2.sqrt();
        for v in y.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += e * sd;
        }
    }
    // Zγ, blockwise.
    let mut offset = 0;
    for (g, blk) in z_blocks.iter().enumerate() {
        let zg = blk * gamma.rows(g * d, d);
        let mut span = y.rows_mut(offset, blk.nrows());
        span += zg;
        offset += blk.nrows();
    }

    let data = MixedModelData::new(x, z_blocks, y)?;
    let truth = SimTruth { beta, c, h, sigma2, gamma, group_sizes: sizes, support };
    Ok((data, truth))
}
