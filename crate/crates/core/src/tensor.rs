//! Dense float-32 tensors and the on-disk AGTD/AGLB formats.
//!
//! AGTD: magic `AGTD` + u32 rank + u32 dims[rank] + f32 data, all little-endian.
//! AGLB: magic `AGLB` + u32 count + u32 labels[count] + u8 flags-present
//! (+ u8 flags[count] when present).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const TENSOR_MAGIC: &[u8; 4] = b"AGTD";
pub const LABEL_MAGIC: &[u8; 4] = b"AGLB";

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated payload: wanted {wanted} bytes, got {got}")]
    Truncated { wanted: usize, got: usize },
    #[error("shape/length mismatch: shape {shape:?} implies {expected} values, found {found}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("non-finite data at index {index}")]
    NonFiniteData { index: usize },
    #[error("label count mismatch: header says {header}, payload has {payload}")]
    CountMismatch { header: usize, payload: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: u32 },
    #[error("flag value {value} is not 0/1")]
    BadFlag { value: u8 },
}

/// Row-major dense tensor of f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteData { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of cases when the first axis indexes cases.
    pub fn num_cases(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Shape of a single case (all axes after the first).
    pub fn case_shape(&self) -> Vec<usize> {
        self.shape.iter().skip(1).copied().collect()
    }

    /// Borrow the flat data of case `i` along the first axis.
    pub fn case(&self, i: usize) -> &[f32] {
        let stride: usize = self.shape.iter().skip(1).product();
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut cursor = ByteCursor::new(bytes);
        cursor.expect_magic(TENSOR_MAGIC)?;
        let rank = cursor.read_u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cursor.read_u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(cursor.read_f32()?);
        }
        cursor.expect_end()?;
        Tensor::new(shape, data)
    }
}

/// Inputs plus ground-truth labels, with optional per-case fault flags.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Tensor,
    pub labels: Vec<u32>,
    pub flags: Option<Vec<u8>>,
}

impl LabeledDataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<u32>,
        flags: Option<Vec<u8>>,
    ) -> Result<Self, TensorError> {
        let n = inputs.num_cases();
        if labels.len() != n {
            return Err(TensorError::CountMismatch {
                header: n,
                payload: labels.len(),
            });
        }
        if let Some(flags) = &flags {
            if flags.len() != n {
                return Err(TensorError::CountMismatch {
                    header: n,
                    payload: flags.len(),
                });
            }
            if let Some(&bad) = flags.iter().find(|&&f| f > 1) {
                return Err(TensorError::BadFlag { value: bad });
            }
        }
        Ok(Self {
            inputs,
            labels,
            flags,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate_labels(&self, num_classes: u32) -> Result<(), TensorError> {
        for &label in &self.labels {
            if label >= num_classes {
                return Err(TensorError::LabelOutOfRange { label, num_classes });
            }
        }
        Ok(())
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Truncated {
                wanted: self.pos + n,
                got: self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<(), TensorError> {
        let found = self.take(4)?;
        if found != magic {
            return Err(TensorError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32, TensorError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn read_f32(&mut self) -> Result<f32, TensorError> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn read_u8(&mut self) -> Result<u8, TensorError> {
        Ok(self.take(1)?[0])
    }

    fn expect_end(&mut self) -> Result<(), TensorError> {
        if self.pos != self.bytes.len() {
            // Trailing bytes mean the header undercounted the payload.
            return Err(TensorError::CountMismatch {
                header: self.pos,
                payload: self.bytes.len(),
            });
        }
        Ok(())
    }
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<(), TensorError> {
    if let Some(index) = t.data.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFiniteData { index });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&t.to_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    Tensor::from_bytes(&bytes)
}

pub fn labels_to_bytes(labels: &[u32], flags: Option<&[u8]>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for &l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    match flags {
        Some(flags) => {
            out.push(1);
            out.extend_from_slice(flags);
        }
        None => out.push(0),
    }
    out
}

pub fn labels_from_bytes(bytes: &[u8]) -> Result<(Vec<u32>, Option<Vec<u8>>), TensorError> {
    let mut cursor = ByteCursor::new(bytes);
    cursor.expect_magic(LABEL_MAGIC)?;
    let count = cursor.read_u32()? as usize;
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(cursor.read_u32()?);
    }
    let flags = match cursor.read_u8()? {
        0 => None,
        _ => {
            let mut flags = Vec::with_capacity(count);
            for _ in 0..count {
                let f = cursor.read_u8()?;
                if f > 1 {
                    return Err(TensorError::BadFlag { value: f });
                }
                flags.push(f);
            }
            Some(flags)
        }
    };
    cursor.expect_end()?;
    Ok((labels, flags))
}

pub fn write_labels(
    labels: &[u32],
    flags: Option<&[u8]>,
    path: impl AsRef<Path>,
) -> Result<(), TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&labels_to_bytes(labels, flags))?;
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<(Vec<u32>, Option<Vec<u8>>), TensorError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    labels_from_bytes(&bytes)
}

/// `index,score` CSV. Values are printed with the shortest round-trip decimal.
pub fn write_scores_csv(scores: &[f64], path: impl AsRef<Path>) -> Result<(), TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "index,score")?;
    for (i, s) in scores.iter().enumerate() {
        writeln!(w, "{i},{s}")?;
    }
    w.flush()?;
    Ok(())
}

/// `index,f0,f1,…` CSV for an [n, d] feature matrix stored row-major.
pub fn write_features_csv(
    features: &[Vec<f64>],
    path: impl AsRef<Path>,
) -> Result<(), TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = features.first().map_or(0, Vec::len);
    let header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    writeln!(w, "index,{}", header.join(","))?;
    for (i, row) in features.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{i},{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<f64>, TensorError> {
    let mut text = String::new();
    BufReader::new(File::open(path)?).read_to_string(&mut text)?;
    let mut scores = Vec::new();
    for line in text.lines().skip(1) {
        let mut parts = line.splitn(2, ',');
        let _idx = parts.next();
        let value = parts
            .next()
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| {
                TensorError::Io(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("malformed score line: {line}"),
                ))
            })?;
        scores.push(value);
    }
    Ok(scores)
}
