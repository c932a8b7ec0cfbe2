//! Synthetic sequence generators and square-matrix ingestion.
//!
//! Two sequence tasks: a regression task where two flagged positions must
//! be summed, and a four-class task on the ordered pair of two signal
//! symbols hidden in noise. Matrix ingestion covers MatrixMarket
//! (coordinate and array), dense CSV, PGM images (P2 and P5), and
//! covariance matrices of CSV row data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfError};
use crate::matrix::DenseMatrix;

/// One regression sequence: per-position `(a, b)` pairs with exactly two
/// `b = 1` flags, and target `y = 0.5 + (a_t1 + a_t2) / 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct AddingInstance {
    pub pairs: Vec<(f64, u8)>,
    pub target: f64,
}

/// Target implied by the flag positions of `pairs`.
pub fn adding_target(pairs: &[(f64, u8)]) -> f64 {
    let sum: f64 = pairs.iter().filter(|(_, b)| *b == 1).map(|(a, _)| a).sum();
    0.5 + sum / 4.0
}

/// Token alphabet for the ordering task: a, b, c, d are noise; X and Y are
/// the signals.
pub const ORDER_VOCAB: usize = 6;
pub const TOKEN_X: u8 = 4;
pub const TOKEN_Y: u8 = 5;

/// One classification sequence: noise tokens with two signal tokens at
/// distinct positions. Label 0..3 encodes the ordered signal pair
/// (X,X), (X,Y), (Y,X), (Y,Y).
#[derive(Debug, Clone, PartialEq)]
pub struct OrderInstance {
    pub tokens: Vec<u8>,
    pub label: u8,
}

fn two_distinct_positions(n: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let t1 = rng.gen_range(0..n);
    let mut t2 = rng.gen_range(0..n - 1);
    if t2 >= t1 {
        t2 += 1;
    }
    (t1, t2)
}

/// Deterministic per seed: `a ~ U(-1, 1)`, flag positions uniform distinct.
pub fn gen_adding(n: usize, count: usize, seed: u64) -> Result<Vec<AddingInstance>> {
    if n < 2 {
        return Err(SfError::InvalidDimension("sequences need at least 2 positions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pairs: Vec<(f64, u8)> =
            (0..n).map(|_| (rng.gen_range(-1.0..1.0), 0)).collect();
        let (t1, t2) = two_distinct_positions(n, &mut rng);
        pairs[t1].1 = 1;
        pairs[t2].1 = 1;
        let target = adding_target(&pairs);
        out.push(AddingInstance { pairs, target });
    }
    Ok(out)
}

/// Deterministic per seed: noise uniform over {a,b,c,d}, signals uniform
/// over {X,Y}^2 at uniform distinct positions.
pub fn gen_temporal_order(n: usize, count: usize, seed: u64) -> Result<Vec<OrderInstance>> {
    if n < 2 {
        return Err(SfError::InvalidDimension("sequences need at least 2 positions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut tokens: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4u8)).collect();
        let (t1, t2) = two_distinct_positions(n, &mut rng);
        let s1 = if rng.gen_bool(0.5) { TOKEN_Y } else { TOKEN_X };
        let s2 = if rng.gen_bool(0.5) { TOKEN_Y } else { TOKEN_X };
        tokens[t1] = s1;
        tokens[t2] = s2;
        let (first, second) = if t1 < t2 { (s1, s2) } else { (s2, s1) };
        let label = 2 * u8::from(first == TOKEN_Y) + u8::from(second == TOKEN_Y);
        out.push(OrderInstance { tokens, label });
    }
    Ok(out)
}

/// Where a square matrix comes from and how to post-process it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixSource {
    pub kind: MatrixKind,
    pub path: PathBuf,
    pub post: PostTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    MatrixMarket,
    DenseCsv,
    PgmImage,
    CovarianceOfCsv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PostTransform {
    #[default]
    None,
    GradientMagnitude,
}

/// Load a square f64 matrix from `src`, applying the optional transform.
pub fn load_matrix(src: &MatrixSource) -> Result<DenseMatrix> {
    let m = match src.kind {
        MatrixKind::MatrixMarket => parse_matrix_market(&fs::read_to_string(&src.path)?)?,
        MatrixKind::DenseCsv => parse_dense_csv(&fs::read_to_string(&src.path)?)?,
        MatrixKind::PgmImage => parse_pgm(&fs::read(&src.path)?)?,
        MatrixKind::CovarianceOfCsv => {
            covariance_of_rows(&parse_dense_csv_rect(&fs::read_to_string(&src.path)?)?)
        }
    };
    if m.rows() != m.cols() {
        return Err(SfError::InvalidInput(format!(
            "matrix from {} is {}x{}, not square",
            src.path.display(),
            m.rows(),
            m.cols()
        )));
    }
    Ok(match src.post {
        PostTransform::None => m,
        PostTransform::GradientMagnitude => gradient_magnitude(&m),
    })
}

/// Per-pixel gradient magnitude sqrt(gx^2 + gy^2): central differences in
/// the interior, one-sided at the borders.
pub fn gradient_magnitude(img: &DenseMatrix) -> DenseMatrix {
    let (rows, cols) = (img.rows(), img.cols());
    let mut out = DenseMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let gx = if cols == 1 {
                0.0
            } else if c == 0 {
                img.get(r, 1) - img.get(r, 0)
            } else if c == cols - 1 {
                img.get(r, c) - img.get(r, c - 1)
            } else {
                (img.get(r, c + 1) - img.get(r, c - 1)) / 2.0
            };
            let gy = if rows == 1 {
                0.0
            } else if r == 0 {
                img.get(1, c) - img.get(0, c)
            } else if r == rows - 1 {
                img.get(r, c) - img.get(r - 1, c)
            } else {
                (img.get(r + 1, c) - img.get(r - 1, c)) / 2.0
            };
            out.set(r, c, (gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Mean-centered covariance of the rows of `data`, normalized by the row
/// count (not n-1).
pub fn covariance_of_rows(data: &DenseMatrix) -> DenseMatrix {
    let (n, d) = (data.rows(), data.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(data.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DenseMatrix::zeros(d, d);
    for r in 0..n {
        let row = data.row(r);
        for i in 0..d {
            let xi = row[i] - mean[i];
            for j in 0..d {
                let v = cov.get(i, j) + xi * (row[j] - mean[j]);
                cov.set(i, j, v);
            }
        }
    }
    cov.scale(1.0 / n as f64);
    cov
}

fn parse_dense_csv_rect(text: &str) -> Result<DenseMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| {
            SfError::Parse(format!("csv line {}: {e}", lineno + 1))
        })?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(SfError::Parse(format!(
                    "csv line {}: expected {} fields, got {}",
                    lineno + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(SfError::Parse("empty csv".into()));
    }
    let cols = rows[0].len();
    let n = rows.len();
    DenseMatrix::from_vec(n, cols, rows.into_iter().flatten().collect())
}

fn parse_dense_csv(text: &str) -> Result<DenseMatrix> {
    parse_dense_csv_rect(text)
}

/// MatrixMarket reader: coordinate and array formats, real/integer/pattern
/// fields, general and symmetric storage. Indices in the file are 1-based.
pub fn parse_matrix_market(text: &str) -> Result<DenseMatrix> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| SfError::Parse("empty MatrixMarket file".into()))?;
    let hdr: Vec<String> = header.split_whitespace().map(|s| s.to_lowercase()).collect();
    if hdr.len() < 5 || hdr[0] != "%%matrixmarket" || hdr[1] != "matrix" {
        return Err(SfError::Parse("not a MatrixMarket matrix header".into()));
    }
    let (format, field, symmetry) = (hdr[2].as_str(), hdr[3].as_str(), hdr[4].as_str());
    if !matches!(field, "real" | "integer" | "pattern") {
        return Err(SfError::Parse(format!("unsupported field type {field}")));
    }
    if !matches!(symmetry, "general" | "symmetric") {
        return Err(SfError::Parse(format!("unsupported symmetry {symmetry}")));
    }
    let mut data = lines.filter(|l| !l.trim_start().starts_with('%') && !l.trim().is_empty());
    let size_line = data
        .next()
        .ok_or_else(|| SfError::Parse("missing size line".into()))?;
    let dims: Vec<usize> = size_line
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| SfError::Parse(format!("size line: {e}"))))
        .collect::<Result<_>>()?;
    match format {
        "coordinate" => {
            if dims.len() != 3 {
                return Err(SfError::Parse("coordinate size line needs rows cols nnz".into()));
            }
            let (rows, cols, nnz) = (dims[0], dims[1], dims[2]);
            let mut m = DenseMatrix::zeros(rows, cols);
            let mut seen = 0;
            for line in data {
                let mut toks = line.split_whitespace();
                let i: usize = toks
                    .next()
                    .ok_or_else(|| SfError::Parse("short entry line".into()))?
                    .parse()
                    .map_err(|e| SfError::Parse(format!("row index: {e}")))?;
                let j: usize = toks
                    .next()
                    .ok_or_else(|| SfError::Parse("short entry line".into()))?
                    .parse()
                    .map_err(|e| SfError::Parse(format!("col index: {e}")))?;
                let v: f64 = match field {
                    "pattern" => 1.0,
                    _ => toks
                        .next()
                        .ok_or_else(|| SfError::Parse("missing value".into()))?
                        .parse()
                        .map_err(|e| SfError::Parse(format!("value: {e}")))?,
                };
                if i < 1 || i > rows || j < 1 || j > cols {
                    return Err(SfError::Parse(format!("entry ({i}, {j}) out of bounds")));
                }
                m.set(i - 1, j - 1, v);
                if symmetry == "symmetric" {
                    m.set(j - 1, i - 1, v);
                }
                seen += 1;
            }
            if seen != nnz {
                return Err(SfError::Parse(format!("expected {nnz} entries, found {seen}")));
            }
            Ok(m)
        }
        "array" => {
            if dims.len() != 2 {
                return Err(SfError::Parse("array size line needs rows cols".into()));
            }
            let (rows, cols) = (dims[0], dims[1]);
            let values: Vec<f64> = data
                .flat_map(|l| l.split_whitespace())
                .map(|t| t.parse::<f64>().map_err(|e| SfError::Parse(format!("value: {e}"))))
                .collect::<Result<_>>()?;
            let expected = if symmetry == "symmetric" {
                rows * (rows + 1) / 2
            } else {
                rows * cols
            };
            if values.len() != expected {
                return Err(SfError::Parse(format!(
                    "expected {expected} array values, found {}",
                    values.len()
                )));
            }
            let mut m = DenseMatrix::zeros(rows, cols);
            let mut it = values.into_iter();
            if symmetry == "symmetric" {
                // column-major lower triangle
                for j in 0..cols {
                    for i in j..rows {
                        let v = it.next().unwrap();
                        m.set(i, j, v);
                        m.set(j, i, v);
                    }
                }
            } else {
                for j in 0..cols {
                    for i in 0..rows {
                        m.set(i, j, it.next().unwrap());
                    }
                }
            }
            Ok(m)
        }
        other => Err(SfError::Parse(format!("unsupported format {other}"))),
    }
}

/// PGM reader: P2 (ASCII) and P5 (binary, maxval <= 255). Intensities are
/// kept as stored, in [0, 255].
pub fn parse_pgm(bytes: &[u8]) -> Result<DenseMatrix> {
    let magic = bytes.get(..2).ok_or_else(|| SfError::Parse("truncated PGM".into()))?;
    match magic {
        b"P2" => {
            let text = std::str::from_utf8(bytes)
                .map_err(|_| SfError::Parse("P2 file is not valid text".into()))?;
            let mut toks = text
                .lines()
                .flat_map(|l| l.split('#').next().unwrap_or("").split_whitespace())
                .skip(1); // magic
            let mut next_num = |what: &str| -> Result<usize> {
                toks.next()
                    .ok_or_else(|| SfError::Parse(format!("missing {what}")))?
                    .parse()
                    .map_err(|e| SfError::Parse(format!("{what}: {e}")))
            };
            let width = next_num("width")?;
            let height = next_num("height")?;
            let _maxval = next_num("maxval")?;
            let mut data = Vec::with_capacity(width * height);
            for _ in 0..width * height {
                data.push(next_num("pixel")? as f64);
            }
            DenseMatrix::from_vec(height, width, data)
        }
        b"P5" => {
            // header: three whitespace-separated numbers after the magic,
            // with # comments, then a single whitespace byte before raster
            let mut pos = 2;
            let mut nums = Vec::new();
            while nums.len() < 3 {
                while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#')
                {
                    if bytes[pos] == b'#' {
                        while pos < bytes.len() && bytes[pos] != b'\n' {
                            pos += 1;
                        }
                    } else {
                        pos += 1;
                    }
                }
                let start = pos;
                while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                    pos += 1;
                }
                if start == pos {
                    return Err(SfError::Parse("malformed P5 header".into()));
                }
                let num: usize = std::str::from_utf8(&bytes[start..pos])
                    .unwrap()
                    .parse()
                    .map_err(|e| SfError::Parse(format!("P5 header: {e}")))?;
                nums.push(num);
            }
            let (width, height, maxval) = (nums[0], nums[1], nums[2]);
            if maxval > 255 {
                return Err(SfError::Parse(format!("P5 maxval {maxval} > 255 unsupported")));
            }
            pos += 1; // single whitespace after maxval
            let raster = bytes
                .get(pos..pos + width * height)
                .ok_or_else(|| SfError::Parse("P5 raster shorter than header claims".into()))?;
            DenseMatrix::from_vec(height, width, raster.iter().map(|&b| b as f64).collect())
        }
        _ => Err(SfError::Parse("not a P2/P5 PGM file".into())),
    }
}

/// Dataset CSV: one row per instance, `a_1,b_1,...,a_N,b_N,y`.
pub fn write_adding_csv(path: &Path, data: &[AddingInstance]) -> Result<()> {
    let mut out = String::new();
    for inst in data {
        let mut first = true;
        for (a, b) in &inst.pairs {
            if !first {
                out.push(',');
            }
            first = false;
            write!(out, "{a},{b}").unwrap();
        }
        writeln!(out, ",{}", inst.target).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_adding_csv(path: &Path) -> Result<Vec<AddingInstance>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 || fields.len() % 2 == 0 {
            return Err(SfError::Parse(format!(
                "adding csv line {}: expected 2N+1 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let n = (fields.len() - 1) / 2;
        let mut pairs = Vec::with_capacity(n);
        for k in 0..n {
            let a: f64 = fields[2 * k]
                .trim()
                .parse()
                .map_err(|e| SfError::Parse(format!("line {}: {e}", lineno + 1)))?;
            let b: u8 = fields[2 * k + 1]
                .trim()
                .parse()
                .map_err(|e| SfError::Parse(format!("line {}: {e}", lineno + 1)))?;
            pairs.push((a, b));
        }
        let target: f64 = fields[fields.len() - 1]
            .trim()
            .parse()
            .map_err(|e| SfError::Parse(format!("line {}: {e}", lineno + 1)))?;
        out.push(AddingInstance { pairs, target });
    }
    Ok(out)
}

/// Dataset CSV: one row per instance, N token indices then the label.
pub fn write_order_csv(path: &Path, data: &[OrderInstance]) -> Result<()> {
    let mut out = String::new();
    for inst in data {
        for t in &inst.tokens {
            write!(out, "{t},").unwrap();
        }
        writeln!(out, "{}", inst.label).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_order_csv(path: &Path) -> Result<Vec<OrderInstance>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: std::result::Result<Vec<u8>, _> =
            line.split(',').map(|t| t.trim().parse::<u8>()).collect();
        let mut fields =
            fields.map_err(|e| SfError::Parse(format!("order csv line {}: {e}", lineno + 1)))?;
        if fields.len() < 3 {
            return Err(SfError::Parse(format!("order csv line {} too short", lineno + 1)));
        }
        let label = fields.pop().unwrap();
        out.push(OrderInstance { tokens: fields, label });
    }
    Ok(out)
}
