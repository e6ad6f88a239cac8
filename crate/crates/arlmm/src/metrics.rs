//! Evaluation metrics (coefficient correlation, standard-LMM NLL, signal
//! recovery, AUC) and the wall-clock scaling benchmark over an (n, p, ε)
//! grid.

use nalgebra::DVector;
#[cfg(test)]
use nalgebra::DMatrix;
use serde::Serialize;

use crate::datagen::{simulate, SimConfig};
use crate::em::{build_kernel, em_fit_with_kernel, EmConfig};
use crate::error::{Error, Result};
use crate::model::{build_marginal_variance, MixedModelData, PriorPhi, VarianceComponents};

/// Pearson correlation between two coefficient vectors.
pub fn beta_correlation(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Data(format!(
            "correlation needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Data("correlation needs at least two entries".into()));
    }
    let ma = a.mean();
    let mb = b.mean();
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..a.len() {
        let da = a[i] - ma;
        let db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Data("correlation undefined for zero-variance input".into()));
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

/// −log density of y under the standard LMM at (β, c, Λ, σ²):
/// ½·log det(2πV) + ½·rᵀV⁻¹r with r = y − Xβ − c1.
pub fn standard_lmm_nll(
    data: &MixedModelData,
    vc: &VarianceComponents,
    beta: &DVector<f64>,
    c: f64,
) -> Result<f64> {
    if beta.len() != data.p() {
        return Err(Error::Data("β has the wrong length".into()));
    }
    let mv = build_marginal_variance(vc, data.z())?;
    let r = data.y() - data.x() * beta - DVector::repeat(data.n(), c);
    let quad = r.dot(&mv.solve(&r));
    let n = data.n() as f64;
    Ok(0.5 * (n * (2.0 * std::f64::consts::PI).ln() + mv.logdet()) + 0.5 * quad)
}

/// Fraction of the true support captured by the k largest-magnitude entries
/// of β̂; ties broken toward the lower index.
pub fn signal_recovery(beta_hat: &DVector<f64>, true_support: &[usize], k: usize) -> Result<f64> {
    let p = beta_hat.len();
    if k > p {
        return Err(Error::Usage(format!("k = {k} exceeds p = {p}")));
    }
    if true_support.is_empty() {
        return Err(Error::Usage("true support is empty".into()));
    }
    if true_support.iter().any(|&j| j >= p) {
        return Err(Error::Data("support index out of range".into()));
    }
    if k == 0 {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        beta_hat[b]
            .abs()
            .partial_cmp(&beta_hat[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let top: std::collections::HashSet<usize> = order[..k].iter().copied().collect();
    let hits = true_support.iter().filter(|j| top.contains(j)).count();
    Ok(hits as f64 / true_support.len() as f64)
}

/// Area under the ROC curve by the Mann–Whitney rank statistic with midrank
/// tie handling. Labels are ±1.
pub fn auc(scores: &DVector<f64>, labels: &[i8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l > 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Midranks over tied score runs.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] > 0 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Evaluation summary for one fit.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub correlation: f64,
    pub nll: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub signal_recovery: Option<f64>,
}

/// Scaling benchmark configuration: n fixed, p swept, one simulated dataset
/// per cell, `reps` timed fits with a fixed EM iteration count.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub n: usize,
    pub p_list: Vec<usize>,
    pub epsilon: f64,
    pub reps: usize,
    pub seed: u64,
    pub d: usize,
    pub m: usize,
    /// Rank bound for the s_ε rule (fixes the sample count across the sweep).
    pub rank_bound: usize,
    /// Fixed EM iteration count so cells are comparable.
    pub em_iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n: 512,
            p_list: vec![1 << 16, 1 << 17],
            epsilon: 0.5,
            reps: 5,
            seed: 0,
            d: 5,
            m: 3,
            rank_bound: 128,
            em_iters: 20,
        }
    }
}

/// One timed fit.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub p: usize,
    pub epsilon: f64,
    pub rep: usize,
    pub sample_count: usize,
    pub transform_s: f64,
    pub kernel_s: f64,
    pub variance_s: f64,
    pub em_s: f64,
    pub lift_s: f64,
    pub total_s: f64,
}

/// Runs the grid: per p, simulate once, then time `reps` full fits. Fits run
/// sequentially to avoid timing interference.
pub fn bench_fit(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.reps == 0 {
        return Err(Error::Usage("reps must be ≥ 1".into()));
    }
    let mut rows = Vec::new();
    for &p in &cfg.p_list {
        let sim = SimConfig {
            n: cfg.n,
            p,
            d: cfg.d,
            m: cfg.m,
            s_nonzero: 0,
            seed: cfg.seed ^ (p as u64).wrapping_mul(0x9e3779b97f4a7c15),
        };
        let (data, _truth) = simulate(&sim)?;
        let phi = PriorPhi::scalar(1.0, p)?;
        let em_cfg = EmConfig {
            max_iter: cfg.em_iters,
            tol: 0.0,
            epsilon: cfg.epsilon,
            seed: cfg.seed,
            rank_bound: Some(cfg.rank_bound),
            sample_count: None,
        };
        for rep in 0..cfg.reps {
            let (sk, ka, timings) = build_kernel(&data, &phi, &em_cfg)?;
            let fit = em_fit_with_kernel(&data, &phi, &em_cfg, &sk, &ka, timings)?;
            rows.push(BenchRow {
                n: cfg.n,
                p,
                epsilon: cfg.epsilon,
                rep,
                sample_count: fit.sample_count,
                transform_s: fit.timings.transform_s,
                kernel_s: fit.timings.kernel_s,
                variance_s: fit.timings.variance_s,
                em_s: fit.timings.em_s,
                lift_s: fit.timings.lift_s,
                total_s: fit.timings.total(),
            });
        }
    }
    Ok(rows)
}

/// Median of a sample (by value).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
