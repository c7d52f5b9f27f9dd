//! Numeric containers shared by every stage of the pipeline, plus the EMB1
//! tensor format and the plain-text label format.
//!
//! EMB1 layout (all integers little-endian):
//!
//! ```text
//! 0..4      b"EMB1"
//! 4..8      u32 header length H
//! 8..8+H    UTF-8 JSON {"n":..,"d":..,"dtype":"f32"|"f64","order":"row"}
//! 8+H..     n*d values, row-major
//! ```
//!
//! Everything is converted to `f64` on load; rows are divided by their L2
//! norm so that inner products are cosine similarities.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StataError};

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";

/// On-disk float width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Emb1Header {
    n: usize,
    d: usize,
    dtype: String,
    order: String,
}

/// Raw EMB1 payload, kept at its stored width.
#[derive(Debug, Clone, PartialEq)]
pub enum Emb1Payload {
    F32(Array2<f32>),
    F64(Array2<f64>),
}

impl Emb1Payload {
    pub fn dim(&self) -> (usize, usize) {
        match self {
            Emb1Payload::F32(a) => a.dim(),
            Emb1Payload::F64(a) => a.dim(),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Emb1Payload::F32(_) => Dtype::F32,
            Emb1Payload::F64(_) => Dtype::F64,
        }
    }

    pub fn to_f64(&self) -> Array2<f64> {
        match self {
            Emb1Payload::F32(a) => a.mapv(f64::from),
            Emb1Payload::F64(a) => a.clone(),
        }
    }
}

pub fn read_emb1<R: Read>(mut reader: R) -> Result<Emb1Payload> {
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|_| StataError::Format("file shorter than the 8-byte preamble".into()))?;
    if &magic != EMB1_MAGIC {
        return Err(StataError::Format(format!("bad magic {magic:?}")));
    }
    let mut len = [0u8; 4];
    reader
        .read_exact(&mut len)
        .map_err(|_| StataError::Format("file shorter than the 8-byte preamble".into()))?;
    let header_len = u32::from_le_bytes(len) as usize;
    let mut header_bytes = vec![0u8; header_len];
    reader
        .read_exact(&mut header_bytes)
        .map_err(|_| StataError::Format(format!("truncated header, expected {header_len} bytes")))?;
    let header: Emb1Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| StataError::Format(format!("header is not valid JSON: {e}")))?;

    let dtype = match header.dtype.as_str() {
        "f32" => Dtype::F32,
        "f64" => Dtype::F64,
        other => return Err(StataError::Dtype(other.to_string())),
    };
    if header.order != "row" {
        return Err(StataError::Format(format!("unsupported order {:?}", header.order)));
    }
    if header.n == 0 || header.d == 0 {
        return Err(StataError::Format(format!("empty shape n={} d={}", header.n, header.d)));
    }
    let count = header
        .n
        .checked_mul(header.d)
        .ok_or_else(|| StataError::Format("n*d overflows".into()))?;
    let expected = count * dtype.width();

    let mut body = Vec::with_capacity(expected);
    reader.read_to_end(&mut body)?;
    if body.len() != expected {
        return Err(StataError::Format(format!(
            "payload has {} bytes, header implies {expected}",
            body.len()
        )));
    }
    let shape = (header.n, header.d);
    let payload = match dtype {
        Dtype::F32 => {
            let values = body
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Emb1Payload::F32(Array2::from_shape_vec(shape, values).expect("length checked"))
        }
        Dtype::F64 => {
            let values = body
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect();
            Emb1Payload::F64(Array2::from_shape_vec(shape, values).expect("length checked"))
        }
    };
    Ok(payload)
}

pub fn write_emb1<W: Write>(mut writer: W, payload: &Emb1Payload) -> Result<()> {
    let (n, d) = payload.dim();
    let header = Emb1Header {
        n,
        d,
        dtype: match payload.dtype() {
            Dtype::F32 => "f32".into(),
            Dtype::F64 => "f64".into(),
        },
        order: "row".into(),
    };
    let header = serde_json::to_vec(&header)?;
    writer.write_all(EMB1_MAGIC)?;
    writer.write_all(&(header.len() as u32).to_le_bytes())?;
    writer.write_all(&header)?;
    match payload {
        Emb1Payload::F32(a) => {
            for v in a.iter() {
                writer.write_all(&v.to_le_bytes())?;
            }
        }
        Emb1Payload::F64(a) => {
            for v in a.iter() {
                writer.write_all(&v.to_le_bytes())?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn read_emb1_file(path: impl AsRef<Path>) -> Result<Emb1Payload> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| StataError::File { path: path.into(), source })?;
    read_emb1(BufReader::new(file))
}

pub fn write_emb1_file(path: impl AsRef<Path>, payload: &Emb1Payload) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| StataError::File { path: path.into(), source })?;
    write_emb1(BufWriter::new(file), payload)
}

/// Checks finiteness and divides each row by its L2 norm.
fn normalized_rows(mut data: Array2<f64>) -> Result<Array2<f64>> {
    for (row, mut r) in data.axis_iter_mut(Axis(0)).enumerate() {
        if let Some(col) = r.iter().position(|v| !v.is_finite()) {
            return Err(StataError::NonFinite { row, col });
        }
        let norm = r.dot(&r).sqrt();
        if norm == 0.0 {
            return Err(StataError::ZeroNorm { row });
        }
        r.mapv_inplace(|v| v / norm);
    }
    Ok(data)
}

/// N×d query features with unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    data: Array2<f64>,
}

impl EmbeddingSet {
    /// Validates and row-normalizes `data`.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (n, d) = data.dim();
        if n == 0 || d == 0 {
            return Err(StataError::shape(format!("embedding set must be non-empty, got {n}x{d}")));
        }
        Ok(Self { data: normalized_rows(data)?.as_standard_layout().into_owned() })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(rows)?)
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    /// Rows at `indices`, in that order. Rows are already unit-norm so no
    /// renormalization happens. An empty selection yields `None`.
    pub fn select(&self, indices: &[usize]) -> Option<EmbeddingSet> {
        if indices.is_empty() {
            return None;
        }
        Some(Self { data: self.data.select(Axis(0), indices) })
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        let payload = match dtype {
            Dtype::F64 => Emb1Payload::F64(self.data.clone()),
            Dtype::F32 => Emb1Payload::F32(self.data.mapv(|v| v as f32)),
        };
        write_emb1_file(path, &payload)
    }
}

/// K×d class text embeddings with unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    inner: EmbeddingSet,
}

impl AnchorSet {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        Ok(Self { inner: EmbeddingSet::new(data)? })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(rows)?)
    }

    pub fn k(&self) -> usize {
        self.inner.n()
    }

    pub fn d(&self) -> usize {
        self.inner.d()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.inner.view()
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        self.inner.save(path, dtype)
    }

    /// Checks that `features` live in the same space.
    pub fn check_features(&self, features: &EmbeddingSet) -> Result<()> {
        if features.d() != self.d() {
            return Err(StataError::shape(format!(
                "features have d={} but anchors have d={}",
                features.d(),
                self.d()
            )));
        }
        Ok(())
    }
}

fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(StataError::shape("ragged rows"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), d), flat).map_err(|e| StataError::shape(e.to_string()))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    EmbeddingSet::new(read_emb1_file(path)?.to_f64())
}

pub fn load_anchors(path: impl AsRef<Path>) -> Result<AnchorSet> {
    AnchorSet::new(read_emb1_file(path)?.to_f64())
}

/// Ground-truth class indices, all below `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<usize>,
    k: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(StataError::Label { line: i + 1, msg: format!("class index {l} out of range for k={k}") });
        }
        Ok(Self { labels, k })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn select(&self, indices: &[usize]) -> LabelVector {
        LabelVector { labels: indices.iter().map(|&i| self.labels[i]).collect(), k: self.k }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|source| StataError::File { path: path.into(), source })?;
        let mut w = BufWriter::new(file);
        for l in &self.labels {
            writeln!(w, "{l}")?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn parse_labels(text: &str, k: usize) -> Result<LabelVector> {
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line).trim();
        let value: usize = line.parse().map_err(|_| StataError::Label {
            line: i + 1,
            msg: format!("not a non-negative integer: {line:?}"),
        })?;
        if value >= k {
            return Err(StataError::Label { line: i + 1, msg: format!("class index {value} out of range for k={k}") });
        }
        labels.push(value);
    }
    if labels.is_empty() {
        return Err(StataError::Label { line: 0, msg: "empty label file".into() });
    }
    Ok(LabelVector { labels, k })
}

pub fn load_labels(path: impl AsRef<Path>, k: usize) -> Result<LabelVector> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| StataError::File { path: path.into(), source })?;
    parse_labels(&text, k)
}

/// N×K row-stochastic soft assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    probs: Array2<f64>,
}

impl AssignmentMatrix {
    /// Tolerance on row sums accepted by [`AssignmentMatrix::new`].
    pub const SIMPLEX_TOL: f64 = 1e-9;

    /// Wraps `probs` after checking every row lies on the simplex.
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (i, row) in probs.axis_iter(Axis(0)).enumerate() {
            if let Some(k) = row.iter().position(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(StataError::Numerical(format!("assignment ({i}, {k}) = {} is not a probability", row[k])));
            }
            let s = row.sum();
            if (s - 1.0).abs() > Self::SIMPLEX_TOL {
                return Err(StataError::Numerical(format!("assignment row {i} sums to {s}")));
            }
        }
        Ok(Self { probs })
    }

    pub(crate) fn from_array_unchecked(probs: Array2<f64>) -> Self {
        Self { probs }
    }

    pub fn empty(k: usize) -> Self {
        Self { probs: Array2::zeros((0, k)) }
    }

    pub fn n(&self) -> usize {
        self.probs.nrows()
    }

    pub fn k(&self) -> usize {
        self.probs.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.probs.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.probs
    }

    /// Per-row argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs.axis_iter(Axis(0)).map(|r| argmax_row(r)).collect()
    }

    pub fn max_prob(&self) -> Array1<f64> {
        self.probs.map_axis(Axis(1), |r| r.fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
    }
}

pub(crate) fn argmax_row(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, &v) in row.iter().enumerate() {
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn encode(payload: &Emb1Payload) -> Vec<u8> {
        let mut buf = Vec::new();
        write_emb1(&mut buf, payload).unwrap();
        buf
    }

    #[test]
    fn axis_vectors_are_normalized() {
        let raw = Emb1Payload::F64(array![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
        let set = EmbeddingSet::new(read_emb1(encode(&raw).as_slice()).unwrap().to_f64()).unwrap();
        assert_eq!(set.view(), array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
    }

    #[test]
    fn header_bytes_are_canonical() {
        let buf = encode(&Emb1Payload::F32(array![[1.0f32, 2.0]]));
        let h = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        assert_eq!(&buf[..4], b"EMB1");
        assert_eq!(std::str::from_utf8(&buf[8..8 + h]).unwrap(), r#"{"n":1,"d":2,"dtype":"f32","order":"row"}"#);
        assert_eq!(buf.len(), 8 + h + 8);
        assert_eq!(&buf[8 + h..8 + h + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn nan_is_reported_with_position() {
        let raw = Emb1Payload::F64(array![[1.0, 0.0], [0.5, f64::NAN]]);
        let err = EmbeddingSet::new(read_emb1(encode(&raw).as_slice()).unwrap().to_f64()).unwrap_err();
        assert_eq!(err.to_string(), "non-finite value at (1, 1)");
    }

    #[test]
    fn zero_row_is_rejected() {
        let err = EmbeddingSet::new(array![[1.0, 0.0], [0.0, 0.0]]).unwrap_err();
        assert!(matches!(err, StataError::ZeroNorm { row: 1 }));
    }

    #[test]
    fn bad_dtype_and_truncation() {
        let mut buf = Vec::new();
        let header = br#"{"n":1,"d":1,"dtype":"f16","order":"row"}"#;
        buf.extend_from_slice(b"EMB1");
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header);
        buf.extend_from_slice(&[0, 0]);
        assert!(matches!(read_emb1(buf.as_slice()), Err(StataError::Dtype(_))));

        let mut good = encode(&Emb1Payload::F64(array![[1.0, 2.0]]));
        good.pop();
        assert!(matches!(read_emb1(good.as_slice()), Err(StataError::Format(_))));
        assert!(matches!(read_emb1(&b"EMB2\0\0\0\0"[..]), Err(StataError::Format(_))));
        assert!(matches!(read_emb1(&b"EMB1\x05\0\0\0{bad}"[..]), Err(StataError::Format(_))));
    }

    #[test]
    fn labels_parse_and_validate() {
        assert_eq!(parse_labels("0\n2\n1\n", 3).unwrap().as_slice(), &[0, 2, 1]);
        assert!(matches!(parse_labels("3\n", 3), Err(StataError::Label { line: 1, .. })));
        assert!(matches!(parse_labels("0\nx\n", 3), Err(StataError::Label { line: 2, .. })));
        assert!(matches!(parse_labels("-1\n", 3), Err(StataError::Label { .. })));
        assert!(matches!(parse_labels("", 3), Err(StataError::Label { .. })));
        let many: String = (0..50_000).map(|i| format!("{}\n", i % 7)).collect();
        assert_eq!(parse_labels(&many, 7).unwrap().len(), 50_000);
    }

    #[test]
    fn argmax_ties_go_low() {
        let z = AssignmentMatrix::new(array![[0.5, 0.5], [0.2, 0.8]]).unwrap();
        assert_eq!(z.argmax(), vec![0, 1]);
        assert!(AssignmentMatrix::new(array![[0.5, 0.6]]).is_err());
        assert!(AssignmentMatrix::new(array![[1.5, -0.5]]).is_err());
    }
}
