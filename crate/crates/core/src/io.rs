//! Binary checkpoints and matrix exports (CSV and plain PGM).
//!
//! Checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "DSKDCKPT"
//! version    u32      1
//! header_len u32      length of the header in bytes
//! header     UTF-8    "key=value" lines (model dimensions, kind)
//! count      u32      number of tensors
//! per tensor: rank u32, rank × u64 dims, product(dims) × f64 values
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::cma::Projectors;
use crate::lm::{LmError, ModelConfig, ModelState};
use crate::nn::Linear;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DSKDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Lm(#[from] LmError),
}

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Header entries plus an ordered list of tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(Vec<usize>, Vec<f64>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| IoError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(header, "{k}={v}");
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (shape, data) in &self.tensors {
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, IoError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(IoError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(IoError::Corrupt(format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let htext = std::str::from_utf8(r.take(hlen)?).map_err(|e| IoError::Corrupt(format!("header is not UTF-8: {e}")))?;
        let mut header = BTreeMap::new();
        for line in htext.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| IoError::Corrupt(format!("header line '{line}'")))?;
            header.insert(k.to_owned(), v.to_owned());
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 3 {
                return Err(IoError::Corrupt(format!("tensor rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|&n| n <= bytes.len() / 8).ok_or_else(|| IoError::Corrupt(format!("tensor shape {shape:?}")))?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((shape, data));
        }
        if r.pos != bytes.len() {
            return Err(IoError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        fs::write(path, self.encode()).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Checkpoint::decode(&fs::read(path).map_err(|e| io_err(path, e))?)
    }

    fn get<N: std::str::FromStr>(&self, key: &str) -> Result<N, IoError> {
        self.header
            .get(key)
            .ok_or_else(|| IoError::Header(format!("missing '{key}'")))?
            .parse()
            .map_err(|_| IoError::Header(format!("bad value for '{key}'")))
    }

    fn with_params(header: BTreeMap<String, String>, params: &[Tensor<f64>]) -> Self {
        Checkpoint {
            header,
            tensors: params.iter().map(|p| (p.shape().to_vec(), p.to_vec())).collect(),
        }
    }

    fn param_tensors(&self, trainable: bool) -> Result<Vec<Tensor<f64>>, IoError> {
        self.tensors
            .iter()
            .map(|(s, d)| {
                let t = if trainable {
                    Tensor::param(d.clone(), s)
                } else {
                    Tensor::new(d.clone(), s)
                };
                t.map_err(|e| IoError::Corrupt(e.to_string()))
            })
            .collect()
    }

    pub fn from_model(model: &ModelState<f64>) -> Self {
        let c = &model.config;
        let mut h = BTreeMap::new();
        h.insert("kind".into(), "model".into());
        h.insert("vocab_size".into(), c.vocab_size.to_string());
        h.insert("hidden_dim".into(), c.hidden_dim.to_string());
        h.insert("num_layers".into(), c.num_layers.to_string());
        h.insert("num_heads".into(), c.num_heads.to_string());
        h.insert("max_seq".into(), c.max_seq.to_string());
        h.insert("seed".into(), c.seed.to_string());
        Self::with_params(h, &model.params())
    }

    pub fn to_model(&self, frozen: bool) -> Result<ModelState<f64>, IoError> {
        self.expect_kind("model")?;
        let config = ModelConfig {
            vocab_size: self.get("vocab_size")?,
            hidden_dim: self.get("hidden_dim")?,
            num_layers: self.get("num_layers")?,
            num_heads: self.get("num_heads")?,
            max_seq: self.get("max_seq")?,
            seed: self.get("seed")?,
        };
        let mut model = ModelState::new(config, frozen)?;
        model.assign(&self.param_tensors(!frozen)?)?;
        Ok(model)
    }

    pub fn from_projectors(p: &Projectors<f64>) -> Self {
        let mut h = BTreeMap::new();
        h.insert("kind".into(), "projectors".into());
        h.insert("student_dim".into(), p.student_dim().to_string());
        h.insert("teacher_dim".into(), p.teacher_dim().to_string());
        Self::with_params(h, &p.params())
    }

    pub fn to_projectors(&self) -> Result<Projectors<f64>, IoError> {
        self.expect_kind("projectors")?;
        let (ds, dt): (usize, usize) = (self.get("student_dim")?, self.get("teacher_dim")?);
        let expected = [
            vec![2 * ds, 2 * dt],
            vec![1, 2 * dt],
            vec![ds, dt],
            vec![1, dt],
            vec![dt, ds],
            vec![1, ds],
        ];
        if self.tensors.len() != 6 || self.tensors.iter().zip(&expected).any(|((s, _), e)| s != e) {
            return Err(IoError::Corrupt("projector tensors do not match the header".into()));
        }
        let t = self.param_tensors(true)?;
        let lin = |i: usize| Linear {
            weight: t[i].clone(),
            bias: t[i + 1].clone(),
        };
        Ok(Projectors {
            query: lin(0),
            s2t: lin(2),
            t2s: lin(4),
        })
    }

    fn expect_kind(&self, kind: &str) -> Result<(), IoError> {
        match self.header.get("kind") {
            Some(k) if k == kind => Ok(()),
            other => Err(IoError::Header(format!("expected kind '{kind}', found {other:?}"))),
        }
    }
}

/// Row-major matrix as CSV, one row per line.
pub fn matrix_csv(rows: usize, cols: usize, data: &[f64]) -> String {
    let mut s = String::new();
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Plain (P2) PGM with 255 gray levels, scaled linearly from the matrix
/// minimum (black) to its maximum (white); a constant matrix is all black.
pub fn matrix_pgm(rows: usize, cols: usize, data: &[f64]) -> String {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut s = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols]
            .iter()
            .map(|&v| {
                let g = if span > 0.0 { ((v - lo) / span * 255.0).round() } else { 0.0 };
                (g as u32).to_string()
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip() {
        let cfg = ModelConfig {
            vocab_size: 12,
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            max_seq: 16,
            seed: 3,
        };
        let m = ModelState::<f64>::new(cfg, false).unwrap();
        let bytes = Checkpoint::from_model(&m).encode();
        let back = Checkpoint::decode(&bytes).unwrap().to_model(false).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.config, m.config);
    }

    #[test]
    fn projector_round_trip() {
        let p = Projectors::<f64>::new(4, 6, 9);
        let back = Checkpoint::decode(&Checkpoint::from_projectors(&p).encode()).unwrap().to_projectors().unwrap();
        for (a, b) in p.params().iter().zip(back.params()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        assert!(Checkpoint::decode(b"nope").is_err());
        let p = Projectors::<f64>::new(2, 2, 1);
        let mut bytes = Checkpoint::from_projectors(&p).encode();
        bytes.pop();
        assert!(Checkpoint::decode(&bytes).is_err());
        let wrong = Checkpoint::from_projectors(&p);
        assert!(wrong.to_model(false).is_err());
    }

    #[test]
    fn pgm_scaling() {
        let pgm = matrix_pgm(1, 3, &[0.0, 0.5, 1.0]);
        assert_eq!(pgm, "P2\n3 1\n255\n0 128 255\n");
        assert_eq!(matrix_pgm(1, 2, &[2.0, 2.0]), "P2\n2 1\n255\n0 0\n");
        assert_eq!(matrix_csv(2, 1, &[1.0, 0.25]), "1\n0.25\n");
    }
}
