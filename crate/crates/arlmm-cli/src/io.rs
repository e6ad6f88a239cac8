//! File formats: the ARLMM1 binary matrix container (f64, row-major,
//! little-endian) with a CSV fallback, dataset directories, and the JSON
//! result/truth records.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 6] = b"ARLMM1";
const DTYPE_F64: u8 = 1;
const LAYOUT_ROW_MAJOR: u8 = 1;

/// Writes a matrix in the binary container: magic, dtype, layout, rows, cols,
/// then rows·cols little-endian f64 values in row-major order.
pub fn write_matrix_bin(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&[DTYPE_F64, LAYOUT_ROW_MAJOR])?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes a matrix as CSV (no header).
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:?}", m[(i, j)])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn read_matrix_csv<R: BufRead>(reader: R, path: &Path) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut cols = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            trimmed.split(',').map(|tok| tok.trim().parse::<f64>()).collect();
        match parsed {
            Ok(vals) => {
                if rows.is_empty() {
                    cols = vals.len();
                } else if vals.len() != cols {
                    bail!(
                        "{}:{}: expected {} columns, found {}",
                        path.display(),
                        lineno + 1,
                        cols,
                        vals.len()
                    );
                }
                rows.push(vals);
            }
            Err(_) if lineno == 0 => continue, // optional header row
            Err(e) => bail!("{}:{}: {e}", path.display(), lineno + 1),
        }
    }
    if rows.is_empty() {
        bail!("{}: no numeric rows", path.display());
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), cols, &flat))
}

/// Reads a matrix, auto-detecting the binary container by its magic and
/// falling back to CSV otherwise.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = BufReader::new(file);
    let head = reader.fill_buf()?;
    if head.len() >= MAGIC.len() && &head[..MAGIC.len()] == MAGIC {
        reader.consume(MAGIC.len());
        let mut meta = [0u8; 2];
        reader.read_exact(&mut meta)?;
        if meta[0] != DTYPE_F64 || meta[1] != LAYOUT_ROW_MAJOR {
            bail!("{}: unsupported dtype/layout tags {:?}", path.display(), meta);
        }
        let mut dim = [0u8; 8];
        reader.read_exact(&mut dim)?;
        let rows = u64::from_le_bytes(dim) as usize;
        reader.read_exact(&mut dim)?;
        let cols = u64::from_le_bytes(dim) as usize;
        let mut payload = vec![0u8; rows * cols * 8];
        reader.read_exact(&mut payload).with_context(|| {
            format!("{}: truncated payload (expected {}×{} f64)", path.display(), rows, cols)
        })?;
        let mut trailing = [0u8; 1];
        if reader.read(&mut trailing)? != 0 {
            bail!("{}: trailing bytes after payload", path.display());
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(DMatrix::from_row_slice(rows, cols, &values))
    } else {
        read_matrix_csv(reader, path)
    }
}

/// Ground-truth record written by `simulate`.
#[derive(Debug, Serialize, Deserialize)]
pub struct TruthRecord {
    pub beta: Vec<f64>,
    pub c: f64,
    pub h: Vec<Vec<f64>>,
    pub sigma2: f64,
    pub gamma: Vec<f64>,
    pub group_sizes: Vec<usize>,
    pub support: Vec<usize>,
    pub seed: u64,
}

/// Echo of the fit configuration inside a result record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub method: String,
    pub data_dir: String,
    pub epsilon: f64,
    pub tau: Option<f64>,
    pub phi_file: Option<String>,
    pub d_matrix_file: Option<String>,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub rank_bound: Option<usize>,
    pub sample_count: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VcRecord {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FlagsRecord {
    pub sketch_clamped: bool,
    pub sigma2_floored: bool,
    pub sigma2_negative: bool,
    pub lambda_indefinite: bool,
    pub v_repaired: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TimingsRecord {
    pub transform_s: f64,
    pub kernel_s: f64,
    pub variance_s: f64,
    pub em_s: f64,
    pub lift_s: f64,
    pub total_s: f64,
}

/// Complete fit record; re-running from the echoed config and seed
/// reproduces β̂ bitwise.
#[derive(Debug, Serialize, Deserialize)]
pub struct ResultRecord {
    pub config: ConfigEcho,
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub c_hat_state: f64,
    pub vc: VcRecord,
    pub converged: bool,
    pub iterations: usize,
    pub nll: f64,
    pub nll_trace: Vec<f64>,
    pub flags: FlagsRecord,
    pub timings: TimingsRecord,
    pub seed: u64,
    pub sample_count: usize,
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        bail!("empty matrix record");
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        bail!("ragged matrix record");
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), cols, &flat))
}

/// Dataset directory layout: x, y, and one z block per group.
pub struct DatasetPaths {
    pub x: PathBuf,
    pub y: PathBuf,
    pub z_blocks: Vec<PathBuf>,
    pub truth: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path, ext: &str, m: usize) -> Self {
        DatasetPaths {
            x: dir.join(format!("x.{ext}")),
            y: dir.join(format!("y.{ext}")),
            z_blocks: (0..m).map(|i| dir.join(format!("z_{i:03}.{ext}"))).collect(),
            truth: dir.join("truth.json"),
        }
    }

    /// Discovers a dataset in a directory, accepting either extension.
    pub fn discover(dir: &Path) -> Result<Self> {
        let pick = |stem: &str| -> Result<PathBuf> {
            for ext in ["mat", "csv"] {
                let p = dir.join(format!("{stem}.{ext}"));
                if p.exists() {
                    return Ok(p);
                }
            }
            bail!("{}: no {stem}.mat or {stem}.csv", dir.display())
        };
        let x = pick("x")?;
        let y = pick("y")?;
        let mut z_blocks = Vec::new();
        loop {
            let idx = z_blocks.len();
            let mut found = None;
            for ext in ["mat", "csv"] {
                let p = dir.join(format!("z_{idx:03}.{ext}"));
                if p.exists() {
                    found = Some(p);
                    break;
                }
            }
            match found {
                Some(p) => z_blocks.push(p),
                None => break,
            }
        }
        if z_blocks.is_empty() {
            bail!("{}: no z_000 block file", dir.display());
        }
        Ok(DatasetPaths { x, y, z_blocks, truth: dir.join("truth.json") })
    }
}

/// Loads a dataset directory into model types.
pub fn load_dataset(dir: &Path) -> Result<arlmm::model::MixedModelData> {
    let paths = DatasetPaths::discover(dir)?;
    let x = read_matrix(&paths.x)?;
    let y_mat = read_matrix(&paths.y)?;
    if y_mat.ncols() != 1 {
        bail!("{}: response must be a single column", paths.y.display());
    }
    let y = DVector::from_column_slice(y_mat.column(0).as_slice());
    let z_blocks: Result<Vec<DMatrix<f64>>> = paths.z_blocks.iter().map(|p| read_matrix(p)).collect();
    arlmm::model::MixedModelData::new(x, z_blocks?, y)
        .map_err(|e| anyhow::anyhow!("{}: {e}", dir.display()))
}

/// FNV-1a digest of a file, for the simulate output summary.
pub fn file_digest(path: &Path) -> Result<u64> {
    let mut f = File::open(path)?;
    let mut buf = [0u8; 8192];
    let mut hash: u64 = 0xcbf29ce484222325;
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        for &b in &buf[..k] {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    Ok(hash)
}
