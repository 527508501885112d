//! Token matrices: in-memory representation, file formats, per-column
//! normalization and seeded synthetic data.
//!
//! Two on-disk formats are supported:
//!
//! * **CSV**: no header row, one token per line, `d` comma-separated decimal
//!   values per line.
//! * **OTP1**: the 4 magic bytes `OTP1`, then `m` and `d` as unsigned 64-bit
//!   little-endian integers, then `m * d` IEEE-754 `f32` little-endian values
//!   in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OTP1_MAGIC: &[u8; 4] = b"OTP1";
const OTP1_HEADER_LEN: usize = 4 + 8 + 8;

/// Default guard below which a column is treated as degenerate.
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// An `m x d` matrix of finite feature vectors, one token per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    /// Builds a matrix from row-major data, rejecting empty shapes and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix);
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Ragged {
                    row: i,
                    found: row.len(),
                    expected: cols,
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Row-major view of all entries.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// The submatrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> TokenMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        TokenMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    /// Returns a copy with rows reordered so that output row `i` is input row
    /// `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> TokenMatrix {
        self.select_rows(perm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    Csv,
    Otp1,
}

impl MatrixFormat {
    /// Guesses the format from a file extension; anything other than
    /// `.otp1`/`.bin` is read as CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("otp1") || ext.eq_ignore_ascii_case("bin") => {
                MatrixFormat::Otp1
            }
            _ => MatrixFormat::Csv,
        }
    }
}

pub fn load_matrix(path: &Path, format: MatrixFormat) -> Result<TokenMatrix> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    match format {
        MatrixFormat::Csv => parse_csv(&fs::read_to_string(path).map_err(io_err)?),
        MatrixFormat::Otp1 => decode_otp1(&fs::read(path).map_err(io_err)?),
    }
}

pub fn save_matrix(path: &Path, matrix: &TokenMatrix, format: MatrixFormat) -> Result<()> {
    let bytes = match format {
        MatrixFormat::Csv => to_csv(matrix).into_bytes(),
        MatrixFormat::Otp1 => encode_otp1(matrix),
    };
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&bytes).map_err(io_err)
}

/// Parses headerless CSV. Blank lines are skipped; reported row numbers count
/// data rows only.
pub fn parse_csv(text: &str) -> Result<TokenMatrix> {
    let mut data = Vec::new();
    let mut cols = 0;
    let mut rows = 0;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let start = data.len();
        for (col, field) in line.split(',').enumerate() {
            let field = field.trim();
            let value: f64 = field.parse().map_err(|_| Error::Parse {
                row: rows,
                col,
                msg: format!("cannot parse `{field}` as a number"),
            })?;
            if !value.is_finite() {
                return Err(Error::NonFinite { row: rows, col });
            }
            data.push(value);
        }
        let found = data.len() - start;
        if rows == 0 {
            cols = found;
        } else if found != cols {
            return Err(Error::Ragged {
                row: rows,
                found,
                expected: cols,
            });
        }
        rows += 1;
    }
    TokenMatrix::new(rows, cols, data)
}

/// Formats each value with the shortest representation that parses back to
/// the same `f64`.
pub fn to_csv(matrix: &TokenMatrix) -> String {
    let mut out = String::new();
    for row in matrix.iter_rows() {
        let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn decode_otp1(bytes: &[u8]) -> Result<TokenMatrix> {
    if bytes.len() < OTP1_HEADER_LEN {
        return Err(Error::BadHeader(format!(
            "file is {} bytes, shorter than the {OTP1_HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != OTP1_MAGIC {
        return Err(Error::BadHeader("missing OTP1 magic".into()));
    }
    let m = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let d = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if m == 0 || d == 0 {
        return Err(Error::EmptyMatrix);
    }
    let expected = m
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::BadHeader(format!("shape {m}x{d} is too large")))?;
    let payload = &bytes[OTP1_HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::BadHeader(format!(
            "shape {m}x{d} needs {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let (m, d) = (m as usize, d as usize);
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    TokenMatrix::new(m, d, data)
}

/// Encodes as OTP1. Values are narrowed to `f32`.
pub fn encode_otp1(matrix: &TokenMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(OTP1_HEADER_LEN + 4 * matrix.data.len());
    out.extend_from_slice(OTP1_MAGIC);
    out.extend_from_slice(&(matrix.rows as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.cols as u64).to_le_bytes());
    for &x in &matrix.data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

/// Per-column scaling applied by [`normalize_unit_variance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    /// Column `j` of the output is column `j` of the input divided by
    /// `scales[j]`. Always positive.
    pub scales: Vec<f64>,
    pub epsilon: f64,
    /// Column means subtracted before scaling, when centering was requested.
    pub means: Option<Vec<f64>>,
}

impl NormalizationSpec {
    pub fn apply(&self, matrix: &TokenMatrix) -> Result<TokenMatrix> {
        if matrix.cols != self.scales.len() {
            return Err(Error::DimensionMismatch(format!(
                "spec has {} columns, matrix has {}",
                self.scales.len(),
                matrix.cols
            )));
        }
        let mut data = matrix.data.clone();
        for row in data.chunks_exact_mut(matrix.cols) {
            for (j, x) in row.iter_mut().enumerate() {
                if let Some(means) = &self.means {
                    *x -= means[j];
                }
                *x /= self.scales[j];
            }
        }
        TokenMatrix::new(matrix.rows, matrix.cols, data)
    }
}

/// Scales every column to unit second moment, `(1/m) sum_i V[i,j]^2 = 1`.
///
/// No mean-centering is performed. Columns whose root-mean-square is at most
/// `epsilon` are divided by `epsilon`, so all-zero columns pass through.
pub fn normalize_unit_variance(matrix: &TokenMatrix, epsilon: f64) -> (TokenMatrix, NormalizationSpec) {
    normalize(matrix, epsilon, false)
}

/// [`normalize_unit_variance`] with optional column centering first.
pub fn normalize(matrix: &TokenMatrix, epsilon: f64, center: bool) -> (TokenMatrix, NormalizationSpec) {
    let m = matrix.rows as f64;
    let means = center.then(|| {
        let mut means = vec![0.0; matrix.cols];
        for row in matrix.iter_rows() {
            for (acc, x) in means.iter_mut().zip(row) {
                *acc += x;
            }
        }
        means.iter_mut().for_each(|s| *s /= m);
        means
    });
    let mut sq = vec![0.0; matrix.cols];
    for row in matrix.iter_rows() {
        for (j, x) in row.iter().enumerate() {
            let x = match &means {
                Some(mu) => x - mu[j],
                None => *x,
            };
            sq[j] += x * x;
        }
    }
    let scales = sq.iter().map(|s| (s / m).sqrt().max(epsilon)).collect();
    let spec = NormalizationSpec {
        scales,
        epsilon,
        means,
    };
    let out = spec
        .apply(matrix)
        .expect("scaling a finite matrix by positive factors stays finite");
    (out, spec)
}

/// An `m x d` matrix of i.i.d. standard normal entries.
///
/// The generator is ChaCha8 seeded through `SeedableRng::seed_from_u64`, and
/// entries are drawn in row-major order, so a given `(m, d, seed)` always
/// yields the same matrix.
pub fn synth_gaussian(m: usize, d: usize, seed: u64) -> TokenMatrix {
    assert!(m >= 1 && d >= 1, "synthetic matrix needs m >= 1 and d >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..m * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    TokenMatrix { rows: m, cols: d, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col_mean_sq(v: &TokenMatrix, j: usize) -> f64 {
        v.iter_rows().map(|r| r[j] * r[j]).sum::<f64>() / v.rows() as f64
    }

    #[test]
    fn csv_transcription() {
        let v = parse_csv("1,2\n3,4").unwrap();
        assert_eq!((v.rows(), v.cols()), (2, 2));
        assert_eq!(v.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn csv_nan_names_the_cell() {
        let err = parse_csv("1,2\n3,nan\n").unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 1, col: 1 }), "{err}");
        assert!(err.to_string().contains("row 1, column 1"));
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(parse_csv("1,2\n3\n"), Err(Error::Ragged { row: 1, found: 1, expected: 2 })));
        assert!(matches!(parse_csv("1,x\n"), Err(Error::Parse { row: 0, col: 1, .. })));
        assert!(matches!(parse_csv(""), Err(Error::EmptyMatrix)));
        assert!(matches!(parse_csv("1,inf"), Err(Error::NonFinite { row: 0, col: 1 })));
    }

    #[test]
    fn otp1_payload_is_bit_identical() {
        let payload: [f32; 6] = [1.5, -2.25, 0.1, 3.0e-7, 1e20, -0.0];
        let mut bytes = b"OTP1".to_vec();
        bytes.extend_from_slice(&3u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        for x in payload {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let v = decode_otp1(&bytes).unwrap();
        assert_eq!((v.rows(), v.cols()), (3, 2));
        for (a, b) in v.data().iter().zip(payload) {
            assert_eq!((*a as f32).to_bits(), b.to_bits());
        }
        assert_eq!(encode_otp1(&v), bytes);
    }

    #[test]
    fn otp1_header_errors() {
        assert!(matches!(decode_otp1(b"OTP"), Err(Error::BadHeader(_))));
        let mut bytes = b"XXXX".to_vec();
        bytes.extend_from_slice(&[0; 16]);
        assert!(matches!(decode_otp1(&bytes), Err(Error::BadHeader(_))));
        let mut bytes = b"OTP1".to_vec();
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&[0; 12]);
        assert!(matches!(decode_otp1(&bytes), Err(Error::BadHeader(_))));
        let mut bytes = b"OTP1".to_vec();
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_otp1(&bytes), Err(Error::NonFinite { row: 0, col: 0 })));
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let v = synth_gaussian(7, 3, 11);
        let csv = dir.path().join("v.csv");
        save_matrix(&csv, &v, MatrixFormat::Csv).unwrap();
        assert_eq!(load_matrix(&csv, MatrixFormat::Csv).unwrap(), v);

        let bin = dir.path().join("v.otp1");
        save_matrix(&bin, &v, MatrixFormat::Otp1).unwrap();
        let back = load_matrix(&bin, MatrixFormat::Otp1).unwrap();
        save_matrix(&bin, &back, MatrixFormat::Otp1).unwrap();
        assert_eq!(load_matrix(&bin, MatrixFormat::Otp1).unwrap(), back);
        assert_eq!(MatrixFormat::from_path(&bin), MatrixFormat::Otp1);
        assert_eq!(MatrixFormat::from_path(&csv), MatrixFormat::Csv);
    }

    #[test]
    fn constant_column_scales_to_one() {
        let v = TokenMatrix::from_rows(&[vec![2.0], vec![2.0]]).unwrap();
        let (out, spec) = normalize_unit_variance(&v, DEFAULT_EPSILON);
        assert_eq!(out.data(), &[1.0, 1.0]);
        assert_eq!(spec.scales, vec![2.0]);
    }

    #[test]
    fn unit_rms_input_is_unchanged() {
        let v = TokenMatrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let (out, spec) = normalize_unit_variance(&v, DEFAULT_EPSILON);
        assert_eq!(out, v);
        assert_eq!(spec.scales, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_column_passes_through() {
        let v = TokenMatrix::from_rows(&[vec![0.0, 3.0], vec![0.0, 4.0]]).unwrap();
        let (out, _) = normalize_unit_variance(&v, 1e-12);
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(1, 0), 0.0);
        assert!((col_mean_sq(&out, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn centering_flag() {
        let v = TokenMatrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let (out, spec) = normalize(&v, DEFAULT_EPSILON, true);
        assert_eq!(spec.means, Some(vec![2.0]));
        assert_eq!(out.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn synth_golden_values() {
        // Frozen output for (m=5, d=3, seed=0); a change here changes every
        // seeded experiment.
        let expected: [u64; 15] = [
            0x3fe666142e2cf064, 0xbfc2709c9662ac37, 0x3fd3627d2303f5db,
            0xbff5fe02497aaca1, 0x3ff33499755f2e83, 0x3fbc5c2abc5187d4,
            0x3ff5b9f013a92b3d, 0x3fefc5f7bcb7562a, 0x3ff11f795314ff45,
            0xc00079c544720912, 0x3ff83b9b084188d2, 0x3fed5b6df62cc9e3,
            0x3fb003f721e95138, 0xbfcf7ed1c496eb73, 0x3ff407f60e0b588a,
        ];
        let v = synth_gaussian(5, 3, 0);
        let bits: Vec<u64> = v.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, expected);
    }

    #[test]
    fn synth_is_deterministic() {
        assert_eq!(synth_gaussian(20, 10, 7), synth_gaussian(20, 10, 7));
        assert_ne!(synth_gaussian(20, 10, 7), synth_gaussian(20, 10, 8));
    }

    #[test]
    fn synth_moments() {
        // Per column, the sample mean has sd 1/sqrt(1000) ~ 0.0316 and the
        // sample variance has sd sqrt(2/999) ~ 0.0447. Across 256 columns a
        // (0.9, 1.1) variance window is only 2.2 sd wide, so it holds for the
        // pooled statistics and for the bulk of columns; the per-column hard
        // bounds are 5.5 sd (family-wise failure probability below 1e-5).
        let (m, d) = (1000, 256);
        let v = synth_gaussian(m, d, 1);
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for j in 0..d {
            let mean = v.iter_rows().map(|r| r[j]).sum::<f64>() / m as f64;
            let var = v.iter_rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            assert!(mean.abs() < 5.5 * 0.0316, "column {j} mean {mean}");
            assert!((var - 1.0).abs() < 5.5 * 0.0447, "column {j} var {var}");
            means.push(mean);
            vars.push(var);
        }
        let pooled_mean = means.iter().sum::<f64>() / d as f64;
        let pooled_var = vars.iter().sum::<f64>() / d as f64;
        assert!(pooled_mean.abs() < 0.1);
        assert!(pooled_var > 0.9 && pooled_var < 1.1);
        let in_window = vars.iter().filter(|v| **v > 0.9 && **v < 1.1).count();
        assert!(in_window as f64 / d as f64 > 0.9, "{in_window} of {d} columns");
        assert!(means.iter().filter(|x| x.abs() < 0.1).count() as f64 / d as f64 > 0.99);
    }
}
