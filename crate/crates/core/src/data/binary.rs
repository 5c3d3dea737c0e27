//! Little-endian binary containers for features (CIMF), labels (CIML) and
//! trained models (CIMM).
//!
//! ```text
//! CIMF: "CIMF" u32 version u32 rows u32 cols  f64[rows*cols]  (row-major)
//! CIML: "CIML" u32 version u32 count u32 classes  u32[count]
//! CIMM: "CIMM" u32 version u32 M u32 l
//!       V1 Q1 V2 Q2 (M x M each)  W1 W2 W3 (l x M each)  c (3)
//!       alpha1 alpha2 sigma1 sigma2 delta1 delta2 theta1 theta2
//!       mu eta lr_w lr_vq p tol
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{CimdlError, Result};
use crate::model::{FeatureBatch, FusionModel, Hyperparameters, ProjectionPair, HP_RECORD_LEN};

pub const FEATURE_MAGIC: &[u8; 4] = b"CIMF";
pub const LABEL_MAGIC: &[u8; 4] = b"CIML";
pub const MODEL_MAGIC: &[u8; 4] = b"CIMM";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Reader { buf, pos: 0, path }
    }

    fn err(&self, offset: usize, message: impl Into<String>) -> CimdlError {
        CimdlError::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.err(
                self.buf.len(),
                format!(
                    "truncated {what}: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ),
            )),
        }
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(self.err(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        let at = self.pos;
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(self.err(
                at,
                format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64_matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
        let start = self.pos;
        let count = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(8).map(|_| c))
            .ok_or_else(|| self.err(start, format!("{what} dimensions {rows}x{cols} overflow")))?;
        let bytes = self.take(count * 8, what)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length matches"))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(
                self.pos,
                format!("{} unexpected trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| CimdlError::invalid(format!("{what} {v} exceeds u32 range")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_matrix(out: &mut Vec<u8>, m: &Array2<f64>) {
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CimdlError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CimdlError::io(path, e))
}

pub fn encode_features(x: &FeatureBatch) -> Result<Vec<u8>> {
    let a = x.as_array();
    let mut out = Vec::with_capacity(16 + a.len() * 8);
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, dim_u32(a.nrows(), "row count")?);
    put_u32(&mut out, dim_u32(a.ncols(), "column count")?);
    put_matrix(&mut out, a);
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureBatch> {
    let mut r = Reader::new(bytes, path);
    r.magic(FEATURE_MAGIC)?;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(r.err(8, format!("empty matrix {rows}x{cols}")));
    }
    let data_start = r.pos;
    let data = r.f64_matrix(rows, cols, "feature data")?;
    r.finish()?;
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(r.err(data_start + i * 8, "non-finite feature value"));
    }
    FeatureBatch::new(data)
}

pub fn write_features(path: impl AsRef<Path>, x: &FeatureBatch) -> Result<()> {
    write_file(path.as_ref(), &encode_features(x)?)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureBatch> {
    let path = path.as_ref();
    decode_features(&read_file(path)?, path)
}

pub fn encode_labels(labels: &[usize], num_classes: usize) -> Result<Vec<u8>> {
    super::check_labels(labels, num_classes)?;
    let mut out = Vec::with_capacity(16 + labels.len() * 4);
    out.extend_from_slice(LABEL_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, dim_u32(labels.len(), "label count")?);
    put_u32(&mut out, dim_u32(num_classes, "class count")?);
    for &k in labels {
        put_u32(&mut out, k as u32);
    }
    Ok(out)
}

/// Decodes labels and checks them against `expected_classes` when given.
/// Returns the indices and the class count stored in the file.
pub fn decode_labels(
    bytes: &[u8],
    path: &Path,
    expected_classes: Option<usize>,
) -> Result<(Vec<usize>, usize)> {
    let mut r = Reader::new(bytes, path);
    r.magic(LABEL_MAGIC)?;
    let count = r.u32("label count")? as usize;
    let classes_at = r.pos;
    let stored = r.u32("class count")? as usize;
    if let Some(l) = expected_classes {
        if l != stored {
            return Err(r.err(
                classes_at,
                format!("file declares {stored} classes, expected {l}"),
            ));
        }
    }
    let start = r.pos;
    let body = r.take(count.saturating_mul(4), "label data")?;
    r.finish()?;
    let mut labels = Vec::with_capacity(count);
    for (i, c) in body.chunks_exact(4).enumerate() {
        let k = u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize;
        if k >= stored {
            return Err(CimdlError::invalid(format!(
                "{}: label record {i} (byte {}) has class {k}, but only {stored} classes exist",
                path.display(),
                start + 4 * i
            )));
        }
        labels.push(k);
    }
    Ok((labels, stored))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize], num_classes: usize) -> Result<()> {
    write_file(path.as_ref(), &encode_labels(labels, num_classes)?)
}

/// Reads a label file; `num_classes` pins the expected class count.
pub fn read_labels(
    path: impl AsRef<Path>,
    num_classes: Option<usize>,
) -> Result<(Vec<usize>, usize)> {
    let path = path.as_ref();
    decode_labels(&read_file(path)?, path, num_classes)
}

/// A model as persisted: the learned state plus the floating-point
/// hyperparameters it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub model: FusionModel,
    pub hp_record: [f64; HP_RECORD_LEN],
}

impl SavedModel {
    pub fn new(model: FusionModel, hp: &Hyperparameters) -> Self {
        SavedModel {
            model,
            hp_record: hp.to_record(),
        }
    }

    /// Stored values layered over `base` for the integer/enum controls.
    pub fn hyperparameters(&self, base: &Hyperparameters) -> Hyperparameters {
        Hyperparameters::from_record(&self.hp_record, base)
    }
}

pub fn encode_model(saved: &SavedModel) -> Result<Vec<u8>> {
    let model = &saved.model;
    model.check()?;
    let (m, l) = (model.dim(), model.classes());
    let mut out = Vec::with_capacity(16 + 8 * (4 * m * m + 3 * l * m + 3 + HP_RECORD_LEN));
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, dim_u32(m, "dimension")?);
    put_u32(&mut out, dim_u32(l, "class count")?);
    for pair in &model.pairs {
        put_matrix(&mut out, &pair.v);
        put_matrix(&mut out, &pair.q);
    }
    for w in &model.w {
        put_matrix(&mut out, w);
    }
    for v in model.c.iter().chain(saved.hp_record.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<SavedModel> {
    let mut r = Reader::new(bytes, path);
    r.magic(MODEL_MAGIC)?;
    let m = r.u32("dimension")? as usize;
    let l = r.u32("class count")? as usize;
    let mut mats = Vec::with_capacity(4);
    for what in ["V1", "Q1", "V2", "Q2"] {
        mats.push(r.f64_matrix(m, m, what)?);
    }
    let mut ws = Vec::with_capacity(3);
    for what in ["W1", "W2", "W3"] {
        ws.push(r.f64_matrix(l, m, what)?);
    }
    let c_at = r.pos;
    let c = r.f64_matrix(1, 3, "block weights")?;
    let hp = r.f64_matrix(1, HP_RECORD_LEN, "hyperparameters")?;
    r.finish()?;

    let mut mats = mats.into_iter();
    let mut next = || mats.next().expect("four matrices");
    let p1 = ProjectionPair {
        v: next(),
        q: next(),
    };
    let p2 = ProjectionPair {
        v: next(),
        q: next(),
    };
    let [w1, w2, w3]: [Array2<f64>; 3] = ws.try_into().expect("three blocks");
    let c = [c[[0, 0]], c[[0, 1]], c[[0, 2]]];
    let model = FusionModel::new([p1, p2], [w1, w2, w3], c).map_err(|e| CimdlError::Format {
        path: PathBuf::from(path),
        offset: c_at as u64,
        message: format!("stored model is invalid: {e}"),
    })?;
    let hp_record: [f64; HP_RECORD_LEN] = hp
        .into_raw_vec_and_offset()
        .0
        .try_into()
        .expect("14 values");
    Ok(SavedModel { model, hp_record })
}

pub fn save_model(path: impl AsRef<Path>, saved: &SavedModel) -> Result<()> {
    write_file(path.as_ref(), &encode_model(saved)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SavedModel> {
    let path = path.as_ref();
    decode_model(&read_file(path)?, path)
}
