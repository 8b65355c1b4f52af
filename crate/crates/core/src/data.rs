//! Client datasets: synthetic generation, file ingestion and partitioning.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::rng::{Stream, PARTITION_STREAM, PLANTED_STREAM};

/// One client's local data `(A_i, b_i)` and aggregation weight `w_i = d_i / d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub features: DenseMatrix,
    pub targets: DenseVector,
    pub weight: f64,
}

impl ClientDataset {
    /// Number of local samples `d_i`.
    pub fn samples(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// An ordered collection of clients sharing one feature dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Federation {
    clients: Vec<ClientDataset>,
    n: usize,
    d: usize,
}

impl Federation {
    /// Assembles clients from `(A_i, b_i)` pairs, assigning ids in order and
    /// weights proportional to sample counts.
    pub fn from_parts(parts: Vec<(DenseMatrix, DenseVector)>) -> Result<Self> {
        let n = parts.first().map_or(0, |(a, _)| a.cols());
        let mut d = 0usize;
        for (a, b) in &parts {
            if a.cols() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: a.cols(),
                });
            }
            if b.len() != a.rows() {
                return Err(Error::DimensionMismatch {
                    expected: a.rows(),
                    found: b.len(),
                });
            }
            if a.rows() == 0 {
                return Err(Error::InvalidRange { lo: 0, hi: 0 });
            }
            d += a.rows();
        }
        let clients = parts
            .into_iter()
            .enumerate()
            .map(|(client_id, (features, targets))| ClientDataset {
                client_id,
                weight: features.rows() as f64 / d as f64,
                features,
                targets,
            })
            .collect();
        Ok(Self { clients, n, d })
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    /// Feature dimension `n`.
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Total sample count `d`.
    pub fn samples(&self) -> usize {
        self.d
    }

    /// Client count `m`.
    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    /// All client data stacked into one `(A, b)`, in client order.
    pub fn pooled(&self) -> (DenseMatrix, DenseVector) {
        let mut data = Vec::with_capacity(self.d * self.n);
        let mut targets = Vec::with_capacity(self.d);
        for c in &self.clients {
            data.extend_from_slice(c.features.as_slice());
            targets.extend_from_slice(&c.targets);
        }
        (
            DenseMatrix::from_row_major(self.d, self.n, data).expect("consistent shapes"),
            DenseVector::from_vec(targets),
        )
    }
}

/// Entry distribution of one synthetic client group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryLaw {
    StandardNormal,
    StudentT5,
    Uniform5,
}

impl EntryLaw {
    fn sample(self, s: &mut Stream) -> f64 {
        match self {
            EntryLaw::StandardNormal => s.normal(),
            EntryLaw::StudentT5 => s.student_t(5),
            EntryLaw::Uniform5 => s.uniform_range(-5.0, 5.0),
        }
    }

    /// Group law for client `id` of `m`: the first third normal, the second
    /// Student-t(5), the last uniform on [-5, 5].
    pub fn for_client(id: usize, m: usize) -> Self {
        match 3 * id / m {
            0 => EntryLaw::StandardNormal,
            1 => EntryLaw::StudentT5,
            _ => EntryLaw::Uniform5,
        }
    }
}

/// Synthetic linear-regression federation in three equal distribution groups.
///
/// Client `i` draws `d_i` uniformly from `[lo, hi]` and then its entries of
/// `(A_i, b_i)`, all from stream `(seed, i)`.
pub fn generate_regression(
    m: usize,
    n: usize,
    d_range: (usize, usize),
    seed: u64,
) -> Result<Federation> {
    let (lo, hi) = d_range;
    if m == 0 || !m.is_multiple_of(3) {
        return Err(Error::InvalidGroups { m });
    }
    if lo < 1 || lo > hi {
        return Err(Error::InvalidRange { lo, hi });
    }
    if n == 0 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: 0,
        });
    }
    let parts = (0..m)
        .map(|id| {
            let mut s = Stream::new(seed, id as u64);
            let law = EntryLaw::for_client(id, m);
            let rows = s.uniform_int(lo, hi);
            let a: Vec<f64> = (0..rows * n).map(|_| law.sample(&mut s)).collect();
            let b: DenseVector = (0..rows).map(|_| law.sample(&mut s)).collect();
            (DenseMatrix::from_row_major(rows, n, a).expect("sized"), b)
        })
        .collect();
    Federation::from_parts(parts)
}

/// Synthetic binary classification data from a planted logistic model.
///
/// Features are standard normal; a planted `x` is standard normal and each
/// label is 1 with probability `sigmoid(<a_j, x>)`.
pub fn generate_classification(d: usize, n: usize, seed: u64) -> (DenseMatrix, DenseVector) {
    let mut planted = Stream::new(seed, PLANTED_STREAM);
    let x: Vec<f64> = (0..n).map(|_| planted.normal()).collect();
    let mut s = Stream::new(seed, 0);
    let mut a = Vec::with_capacity(d * n);
    let mut b = Vec::with_capacity(d);
    for _ in 0..d {
        let row: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let t: f64 = row.iter().zip(&x).map(|(r, xj)| r * xj).sum();
        let p = 1.0 / (1.0 + (-t).exp());
        b.push(if s.uniform() < p { 1.0 } else { 0.0 });
        a.extend(row);
    }
    (
        DenseMatrix::from_row_major(d, n, a).expect("sized"),
        DenseVector::from_vec(b),
    )
}

/// Row indices per client: a seeded shuffle of `0..d` cut into `m` slices,
/// the first `m - 1` of length `floor(d / m)` and the last taking the rest.
pub fn partition_indices(d: usize, m: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if m == 0 || m > d {
        return Err(Error::TooManyClients {
            clients: m,
            samples: d,
        });
    }
    let mut order: Vec<usize> = (0..d).collect();
    Stream::new(seed, PARTITION_STREAM).shuffle(&mut order);
    let base = d / m;
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let start = i * base;
        let end = if i + 1 == m { d } else { start + base };
        out.push(order[start..end].to_vec());
    }
    Ok(out)
}

/// Splits a pooled dataset across `m` clients.
pub fn partition(a: &DenseMatrix, b: &DenseVector, m: usize, seed: u64) -> Result<Federation> {
    b.check_len(a.rows())?;
    let parts = partition_indices(a.rows(), m, seed)?
        .into_iter()
        .map(|idx| {
            let targets: DenseVector = idx.iter().map(|&i| b[i]).collect();
            (a.select_rows(&idx), targets)
        })
        .collect();
    Federation::from_parts(parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Libsvm,
    Csv,
}

/// Reads `(A, b)` with raw labels. `n_features` fixes the column count for
/// LIBSVM input; otherwise the largest index seen is used.
pub fn load_dataset(
    path: &Path,
    format: FileFormat,
    n_features: Option<usize>,
) -> Result<(DenseMatrix, DenseVector)> {
    let text = std::fs::read_to_string(path)?;
    match format {
        FileFormat::Libsvm => parse_libsvm(&text, n_features),
        FileFormat::Csv => parse_csv(&text),
    }
}

/// Reads a binary classification dataset and maps labels onto `{0, 1}`.
///
/// Labels already in `{0, 1}` are kept; a `{-1, +1}` file is mapped with
/// `-1 -> 0`. Anything else is a [`Error::LabelDomain`].
pub fn load_classification(
    path: &Path,
    format: FileFormat,
    n_features: Option<usize>,
) -> Result<(DenseMatrix, DenseVector)> {
    let (a, b) = load_dataset(path, format, n_features)?;
    Ok((a, coerce_binary_labels(b)?))
}

pub fn coerce_binary_labels(b: DenseVector) -> Result<DenseVector> {
    if b.iter().all(|&v| v == 0.0 || v == 1.0) {
        return Ok(b);
    }
    if b.iter().all(|&v| v == -1.0 || v == 1.0) {
        return Ok(b.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect());
    }
    let mut bad: Vec<f64> = b
        .iter()
        .copied()
        .filter(|&v| v != 0.0 && v != 1.0)
        .collect();
    bad.sort_by(f64::total_cmp);
    bad.dedup();
    Err(Error::LabelDomain { values: bad })
}

fn parse_number(token: &str, line: usize) -> Result<f64> {
    let v: f64 = token.trim().parse().map_err(|_| Error::ParseError {
        line,
        message: format!("invalid number `{}`", token.trim()),
    })?;
    if !v.is_finite() {
        return Err(Error::ParseError {
            line,
            message: format!("non-finite value `{}`", token.trim()),
        });
    }
    Ok(v)
}

fn parse_libsvm(text: &str, n_features: Option<usize>) -> Result<(DenseMatrix, DenseVector)> {
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut max_index = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label = parse_number(tokens.next().expect("non-empty line"), line_no)?;
        let mut entries = Vec::new();
        for tok in tokens {
            let (idx, val) = tok.split_once(':').ok_or_else(|| Error::ParseError {
                line: line_no,
                message: format!("expected `index:value`, found `{tok}`"),
            })?;
            let idx: usize = idx.parse().map_err(|_| Error::ParseError {
                line: line_no,
                message: format!("invalid feature index `{idx}`"),
            })?;
            if idx == 0 {
                return Err(Error::ParseError {
                    line: line_no,
                    message: "feature indices are 1-based".into(),
                });
            }
            if let Some(n) = n_features {
                if idx > n {
                    return Err(Error::ParseError {
                        line: line_no,
                        message: format!("feature index {idx} exceeds n = {n}"),
                    });
                }
            }
            max_index = max_index.max(idx);
            entries.push((idx - 1, parse_number(val, line_no)?));
        }
        rows.push(entries);
        labels.push(label);
    }
    let n = n_features.unwrap_or(max_index);
    let mut a = DenseMatrix::zeros(rows.len(), n);
    for (i, entries) in rows.iter().enumerate() {
        for &(j, v) in entries {
            a.set(i, j, v);
        }
    }
    Ok((a, DenseVector::from_vec(labels)))
}

fn parse_csv(text: &str) -> Result<(DenseMatrix, DenseVector)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut cols: Option<usize> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if rows.is_empty() && labels.is_empty() && fields[0].trim().parse::<f64>().is_err() {
            // header row
            continue;
        }
        let values = fields
            .iter()
            .map(|f| parse_number(f, line_no))
            .collect::<Result<Vec<f64>>>()?;
        match cols {
            None => cols = Some(values.len()),
            Some(c) if c != values.len() => {
                return Err(Error::ParseError {
                    line: line_no,
                    message: format!("expected {c} fields, found {}", values.len()),
                })
            }
            _ => {}
        }
        labels.push(values[0]);
        rows.push(values[1..].to_vec());
    }
    Ok((
        DenseMatrix::from_rows(&rows)?,
        DenseVector::from_vec(labels),
    ))
}

/// Writes `(A, b)` in the same label-first CSV layout [`load_dataset`] reads.
pub fn write_csv(path: &Path, a: &DenseMatrix, b: &DenseVector) -> Result<()> {
    let mut out = String::new();
    for i in 0..a.rows() {
        write!(out, "{}", fmt_f64(b[i])).expect("string write");
        for v in a.row(i) {
            write!(out, ",{}", fmt_f64(*v)).expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes `(A, b)` in LIBSVM format, omitting zero entries.
pub fn write_libsvm(path: &Path, a: &DenseMatrix, b: &DenseVector) -> Result<()> {
    let mut out = String::new();
    for i in 0..a.rows() {
        write!(out, "{}", fmt_f64(b[i])).expect("string write");
        for (j, v) in a.row(i).iter().enumerate() {
            if *v != 0.0 {
                write!(out, " {}:{}", j + 1, fmt_f64(*v)).expect("string write");
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// 17 significant digits: round-trips every finite `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
