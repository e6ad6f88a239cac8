//! arlmm: simulate, fit, verify, bench, and evaluate ℓ2-regularized linear
//! mixed models with SRHT-sketched kernel estimators.
//!
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure,
//! 4 acceptance/verification failure.

mod io;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use arlmm::avc::{avc_fit, AvcFitConfig};
use arlmm::datagen::{simulate, Regime, SimConfig};
use arlmm::em::{em_fit, EmConfig};
use arlmm::estimators::FitResult;
use arlmm::metrics::{
    beta_correlation, bench_fit, signal_recovery, standard_lmm_nll, BenchConfig, EvalReport,
};
use arlmm::model::{LambdaKind, PriorPhi, VarianceComponents};
use arlmm::oracle::oracle_battery;
use arlmm::verify::{
    check_srht_row_norms, check_theorem1, check_theorem2, check_theorem3, CheckConfig,
};

use io::{
    file_digest, load_dataset, matrix_to_rows, read_matrix, rows_to_matrix, write_matrix_bin,
    write_matrix_csv, ConfigEcho, DatasetPaths, FlagsRecord, ResultRecord, TimingsRecord,
    TruthRecord, VcRecord,
};

#[derive(Parser)]
#[command(name = "arlmm", version, about = "Approximate-ridge LMM solver")]
struct Cli {
    /// Worker threads (also settable via ARLMM_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw a synthetic dataset and write it to a directory.
    Simulate(SimulateArgs),
    /// Fit fixed effects and variance components.
    Fit(FitArgs),
    /// Run the empirical bound checks or the oracle battery.
    Verify(VerifyArgs),
    /// Wall-clock scaling benchmark over a (n, p, ε) grid.
    Bench(BenchArgs),
    /// Evaluate a result file against simulated ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Preset regime (low, mod, high); overrides the size flags.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    p: usize,
    #[arg(long, default_value_t = 5)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    m: usize,
    /// Nonzeros in β_true (0 = dense).
    #[arg(long, default_value_t = 0)]
    sparsity: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// File format: bin or csv.
    #[arg(long, default_value = "bin")]
    format: String,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset directory produced by `simulate` (or following its layout).
    #[arg(long)]
    data: PathBuf,
    /// Estimation method: avc, em, or exact.
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    /// Scalar prior Φ = τ·I.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Per-column prior diagonal (p×1 matrix file); overrides --tau.
    #[arg(long)]
    phi_file: Option<PathBuf>,
    /// Reference matrix D (q×q) for the parameterized AVC path.
    #[arg(long)]
    d_matrix: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    /// Rank bound for the s_ε rule (defaults to n).
    #[arg(long)]
    rank_bound: Option<usize>,
    /// Explicit sketch sample count (overrides the s_ε rule).
    #[arg(long)]
    sample_count: Option<usize>,
    /// Result file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Which statement to check: 1, 2, 3, or lemma1.
    #[arg(long)]
    theorem: Option<String>,
    /// Run the exact-oracle cross-check battery instead.
    #[arg(long, default_value_t = false)]
    oracles: bool,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Explicit sample count (the s_ε rule clamps to p′ at desk scale).
    #[arg(long)]
    sample_count: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    /// Lemma-1 subspace width.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Lemma-1 failure probability.
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Report file (JSON lines); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Comma-separated p values.
    #[arg(long, default_value = "65536,131072")]
    p_list: String,
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    em_iters: usize,
    #[arg(long, default_value_t = 128)]
    rank_bound: usize,
    #[arg(long, default_value_t = 5)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    m: usize,
    /// Timing table (CSV).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory with truth.json.
    #[arg(long)]
    data: PathBuf,
    /// Result file from `fit`.
    #[arg(long)]
    result: PathBuf,
    /// Top-k cutoff for signal recovery (default 2·|support|).
    #[arg(long)]
    k: Option<usize>,
    /// Evaluation report (JSON); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

const EXIT_USAGE: i32 = 1;
const EXIT_DATA: i32 = 2;
const EXIT_NUMERICAL: i32 = 3;
const EXIT_ACCEPTANCE: i32 = 4;

fn exit_code_for(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<arlmm::Error>() {
        Some(arlmm::Error::Usage(_)) => EXIT_USAGE,
        Some(arlmm::Error::Data(_)) => EXIT_DATA,
        Some(arlmm::Error::Numerical(_)) => EXIT_NUMERICAL,
        None => EXIT_DATA,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit code 0.
            if e.use_stderr() {
                let _ = e.print();
                std::process::exit(EXIT_USAGE);
            }
            let _ = e.print();
            std::process::exit(0);
        }
    };
    let threads = cli
        .threads
        .or_else(|| std::env::var("ARLMM_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(t) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global();
    }
    match run(cli.cmd) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code_for(&err));
        }
    }
}

fn run(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Fit(args) => cmd_fit(args),
        Cmd::Verify(args) => cmd_verify(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Eval(args) => cmd_eval(args),
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32> {
    let cfg = match args.preset.as_deref() {
        Some("low") => SimConfig::preset(Regime::Low, args.seed),
        Some("mod") => SimConfig::preset(Regime::Mod, args.seed),
        Some("high") => SimConfig::preset(Regime::High, args.seed),
        Some(other) => bail!(arlmm::Error::Usage(format!("unknown preset '{other}'"))),
        None => SimConfig {
            n: args.n,
            p: args.p,
            d: args.d,
            m: args.m,
            s_nonzero: args.sparsity,
            seed: args.seed,
        },
    };
    let ext = match args.format.as_str() {
        "bin" => "mat",
        "csv" => "csv",
        other => bail!(arlmm::Error::Usage(format!("unknown format '{other}'"))),
    };
    let (data, truth) = simulate(&cfg)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let paths = DatasetPaths::in_dir(&args.out, ext, data.m());

    let write = |path: &Path, m: &DMatrix<f64>| -> Result<()> {
        match ext {
            "mat" => write_matrix_bin(path, m),
            _ => write_matrix_csv(path, m),
        }
    };
    write(&paths.x, data.x())?;
    write(&paths.y, &DMatrix::from_column_slice(data.n(), 1, data.y().as_slice()))?;
    for (i, p) in paths.z_blocks.iter().enumerate() {
        write(p, data.z().block(i))?;
    }
    let record = TruthRecord {
        beta: truth.beta.as_slice().to_vec(),
        c: truth.c,
        h: matrix_to_rows(&truth.h),
        sigma2: truth.sigma2,
        gamma: truth.gamma.as_slice().to_vec(),
        group_sizes: truth.group_sizes.clone(),
        support: truth.support.clone(),
        seed: cfg.seed,
    };
    fs::write(&paths.truth, serde_json::to_string_pretty(&record)?)?;

    println!(
        "simulated n={} p={} d={} m={} sparsity={} seed={}",
        cfg.n, cfg.p, cfg.d, cfg.m, cfg.s_nonzero, cfg.seed
    );
    for path in std::iter::once(&paths.x)
        .chain(std::iter::once(&paths.y))
        .chain(paths.z_blocks.iter())
    {
        println!("  {}  fnv1a={:016x}", path.display(), file_digest(path)?);
    }
    Ok(0)
}

fn load_phi(args: &FitArgs, p: usize) -> Result<PriorPhi> {
    match &args.phi_file {
        Some(path) => {
            let m = read_matrix(path)?;
            if m.ncols() != 1 || m.nrows() != p {
                bail!(arlmm::Error::Data(format!(
                    "{}: prior diagonal must be {p}×1",
                    path.display()
                )));
            }
            Ok(PriorPhi::from_diag(DVector::from_column_slice(m.column(0).as_slice()))?)
        }
        None => {
            if !(args.tau > 0.0) {
                bail!(arlmm::Error::Usage(format!("--tau must be > 0, got {}", args.tau)));
            }
            Ok(PriorPhi::scalar(args.tau, p)?)
        }
    }
}

fn cmd_fit(args: FitArgs) -> Result<i32> {
    if !(args.epsilon > 0.0 && args.epsilon < 1.0) {
        bail!(arlmm::Error::Usage(format!(
            "--epsilon must lie in (0,1), got {}",
            args.epsilon
        )));
    }
    let data = load_dataset(&args.data)?;
    let phi = load_phi(&args, data.p())?;
    let d_matrix = match &args.d_matrix {
        Some(path) => Some(read_matrix(path)?),
        None => None,
    };

    let fit: FitResult = match args.method.as_str() {
        "em" => {
            if d_matrix.is_some() {
                bail!(arlmm::Error::Usage(
                    "--d-matrix applies to the avc/exact methods only".into()
                ));
            }
            em_fit(
                &data,
                &phi,
                &EmConfig {
                    max_iter: args.max_iter,
                    tol: args.tol,
                    epsilon: args.epsilon,
                    seed: args.seed,
                    rank_bound: args.rank_bound,
                    sample_count: args.sample_count,
                },
            )?
        }
        "avc" | "exact" => avc_fit(
            &data,
            &phi,
            &AvcFitConfig {
                epsilon: args.epsilon,
                seed: args.seed,
                d_matrix,
                exact_kernel: args.method == "exact",
                rank_bound: args.rank_bound,
                sample_count: args.sample_count,
            },
        )?,
        other => bail!(arlmm::Error::Usage(format!(
            "unknown method '{other}' (expected avc, em, or exact)"
        ))),
    };

    let record = result_record(&args, &fit);
    fs::write(&args.out, serde_json::to_string_pretty(&record)?)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "fit method={} converged={} iterations={} nll={:.6} sigma2={:.6e} elapsed={:.3}s",
        args.method,
        fit.converged,
        fit.iterations,
        fit.nll(),
        fit.vc.sigma2,
        fit.timings.total()
    );
    Ok(0)
}

fn result_record(args: &FitArgs, fit: &FitResult) -> ResultRecord {
    let vc = match &fit.vc.kind {
        LambdaKind::Blocked { h } => VcRecord {
            kind: "blocked".into(),
            h: Some(matrix_to_rows(h)),
            theta: None,
            sigma2: fit.vc.sigma2,
        },
        LambdaKind::Parameterized { theta, .. } => VcRecord {
            kind: "parameterized".into(),
            h: None,
            theta: Some(*theta),
            sigma2: fit.vc.sigma2,
        },
    };
    ResultRecord {
        config: ConfigEcho {
            method: args.method.clone(),
            data_dir: args.data.display().to_string(),
            epsilon: args.epsilon,
            tau: args.phi_file.is_none().then_some(args.tau),
            phi_file: args.phi_file.as_ref().map(|p| p.display().to_string()),
            d_matrix_file: args.d_matrix.as_ref().map(|p| p.display().to_string()),
            seed: args.seed,
            tol: args.tol,
            max_iter: args.max_iter,
            rank_bound: args.rank_bound,
            sample_count: args.sample_count,
        },
        beta: fit.estimate.beta.as_slice().to_vec(),
        intercept: fit.estimate.intercept,
        c_hat_state: fit.c_hat_state,
        vc,
        converged: fit.converged,
        iterations: fit.iterations,
        nll: fit.nll(),
        nll_trace: fit.nll_trace.clone(),
        flags: FlagsRecord {
            sketch_clamped: fit.flags.sketch_clamped,
            sigma2_floored: fit.flags.sigma2_floored,
            sigma2_negative: fit.flags.sigma2_negative,
            lambda_indefinite: fit.flags.lambda_indefinite,
            v_repaired: fit.flags.v_repaired,
        },
        timings: TimingsRecord {
            transform_s: fit.timings.transform_s,
            kernel_s: fit.timings.kernel_s,
            variance_s: fit.timings.variance_s,
            em_s: fit.timings.em_s,
            lift_s: fit.timings.lift_s,
            total_s: fit.timings.total(),
        },
        seed: fit.seed,
        sample_count: fit.sample_count,
    }
}

fn cmd_verify(args: VerifyArgs) -> Result<i32> {
    let mut lines: Vec<String> = Vec::new();
    let mut all_pass = true;

    if args.oracles {
        for report in oracle_battery(args.seed)? {
            all_pass &= report.pass;
            lines.push(serde_json::to_string(&report)?);
        }
    } else {
        let cfg = CheckConfig {
            trials: args.trials,
            epsilon: args.epsilon,
            seed: args.seed,
            sample_count: args.sample_count,
        };
        let check = match args.theorem.as_deref() {
            Some("1") => check_theorem1(args.n.unwrap_or(10), args.p.unwrap_or(128), &cfg)?,
            Some("2") => check_theorem2(args.n.unwrap_or(10), args.p.unwrap_or(256), &cfg)?,
            Some("3") => check_theorem3(
                args.n.unwrap_or(12),
                args.q.unwrap_or(3),
                args.p.unwrap_or(256),
                &cfg,
            )?,
            Some("lemma1") => {
                check_srht_row_norms(args.p.unwrap_or(256), args.k, args.delta, &cfg)?
            }
            Some(other) => bail!(arlmm::Error::Usage(format!(
                "unknown theorem '{other}' (expected 1, 2, 3, or lemma1)"
            ))),
            None => bail!(arlmm::Error::Usage(
                "verify needs --theorem {1,2,3,lemma1} or --oracles".into()
            )),
        };
        all_pass &= check.pass;
        eprintln!(
            "{}: failures {}/{} (allowed rate {:.4} + slack {:.4}) sample_count={}{} → {}",
            check.theorem,
            check.failures,
            check.trials,
            check.allowed_rate,
            check.slack,
            check.sample_count,
            if check.clamped { " [clamped to p']" } else { "" },
            if check.pass { "pass" } else { "FAIL" }
        );
        lines.push(serde_json::to_string(&check)?);
    }

    let body = lines.join("\n") + "\n";
    match &args.out {
        Some(path) => fs::write(path, body)?,
        None => print!("{body}"),
    }
    Ok(if all_pass { 0 } else { EXIT_ACCEPTANCE })
}

fn cmd_bench(args: BenchArgs) -> Result<i32> {
    let p_list: Vec<usize> = args
        .p_list
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| anyhow::anyhow!(arlmm::Error::Usage(format!("bad p value '{tok}'"))))
        })
        .collect::<Result<_>>()?;
    let cfg = BenchConfig {
        n: args.n,
        p_list,
        epsilon: args.epsilon,
        reps: args.reps,
        seed: args.seed,
        d: args.d,
        m: args.m,
        rank_bound: args.rank_bound,
        em_iters: args.em_iters,
    };
    let rows = bench_fit(&cfg)?;
    let mut file = fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    writeln!(
        file,
        "n,p,epsilon,rep,sample_count,transform_s,kernel_s,variance_s,em_s,lift_s,total_s"
    )?;
    for r in &rows {
        writeln!(
            file,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.n,
            r.p,
            r.epsilon,
            r.rep,
            r.sample_count,
            r.transform_s,
            r.kernel_s,
            r.variance_s,
            r.em_s,
            r.lift_s,
            r.total_s
        )?;
    }
    println!("wrote {} timing rows to {}", rows.len(), args.out.display());
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let data = load_dataset(&args.data)?;
    let truth_path = args.data.join("truth.json");
    let truth: TruthRecord = serde_json::from_str(
        &fs::read_to_string(&truth_path)
            .with_context(|| format!("reading {}", truth_path.display()))?,
    )?;
    let record: ResultRecord = serde_json::from_str(
        &fs::read_to_string(&args.result)
            .with_context(|| format!("reading {}", args.result.display()))?,
    )?;

    let beta_hat = DVector::from_vec(record.beta.clone());
    let beta_true = DVector::from_vec(truth.beta.clone());
    let correlation = beta_correlation(&beta_hat, &beta_true)?;

    let vc = match record.vc.kind.as_str() {
        "blocked" => {
            let h = rows_to_matrix(record.vc.h.as_ref().context("missing H in result")?)?;
            VarianceComponents::blocked(h, record.vc.sigma2)?
        }
        other => bail!(arlmm::Error::Data(format!(
            "eval supports blocked variance components, got '{other}'"
        ))),
    };
    let nll = standard_lmm_nll(&data, &vc, &beta_hat, record.intercept)?;

    let recovery = if truth.support.is_empty() {
        None
    } else {
        let k = args.k.unwrap_or(2 * truth.support.len());
        Some(signal_recovery(&beta_hat, &truth.support, k)?)
    };

    let report = EvalReport { correlation, nll, auc: None, signal_recovery: recovery };
    let body = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => fs::write(path, body)?,
        None => println!("{body}"),
    }
    Ok(0)
}
