//! On-disk formats.
//!
//! * Clip tensors: `MDCLIP01`, then `T H W C` as little-endian `u32`, `fs` as
//!   `f64`, then `T*H*W*C` little-endian `f32` samples in `[T, H, W, C]` order.
//! * Checkpoints: `MDCK0001`, a `u32`-prefixed UTF-8 header of `key = value`
//!   model settings, a `u32` parameter count, then per parameter a
//!   `u32`-prefixed name, `u32` rank, `u64` dims and `f64` values.
//! * PPG, fiducial, loss and plot series: CSV with a header row.
//! * Manifest and reports: JSON.
//!
//! Every file is written to a temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use multideriv_core::model::{build_model, Model};
use multideriv_core::render::Frames;
use multideriv_core::signal::{Fiducials, PpgSignal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

const CLIP_MAGIC: &[u8; 8] = b"MDCLIP01";
const CKPT_MAGIC: &[u8; 8] = b"MDCK0001";

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| HarnessError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| HarnessError::io(path, e))?;
    tmp.persist(path).map_err(|e| HarnessError::io(path, e.error))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HarnessError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| HarnessError::format(path, e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| HarnessError::format(path, e.to_string()))
}

/// Serialise rows with a header through the csv writer.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::format(path, e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let bytes = read(path)?;
    csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .collect::<std::result::Result<Vec<R>, _>>()
        .map_err(|e| HarnessError::format(path, e.to_string()))
}

pub fn encode_clip(f: &Frames, fs: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + f.data.len() * 4);
    out.extend_from_slice(CLIP_MAGIC);
    for d in f.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&fs.to_le_bytes());
    for &v in &f.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_clip(path: &Path, b: &[u8]) -> Result<(Frames, f64)> {
    let err = |d: &str| HarnessError::format(path, d);
    if b.len() < 32 || &b[..8] != CLIP_MAGIC {
        return Err(err("not a clip tensor file"));
    }
    let u = |i: usize| u32::from_le_bytes(b[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (t, h, w, c) = (u(0), u(1), u(2), u(3));
    let fs = f64::from_le_bytes(b[24..32].try_into().unwrap());
    let n = t * h * w * c;
    if b.len() != 32 + 4 * n {
        return Err(err("payload length does not match header"));
    }
    let data = b[32..]
        .chunks_exact(4)
        .map(|q| f32::from_le_bytes(q.try_into().unwrap()) as f64)
        .collect();
    let frames = Frames::from_vec(t, h, w, c, data).ok_or_else(|| err("invalid dimensions"))?;
    Ok((frames, fs))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PpgRow {
    pub index: usize,
    pub time_s: f64,
    pub ppg: f64,
}

pub fn write_ppg(path: &Path, p: &PpgSignal) -> Result<()> {
    let rows: Vec<PpgRow> = p
        .samples
        .iter()
        .enumerate()
        .map(|(i, &v)| PpgRow {
            index: i,
            time_s: i as f64 / p.fs,
            ppg: v,
        })
        .collect();
    write_csv(path, &rows)
}

pub fn read_ppg(path: &Path, fs: f64) -> Result<PpgSignal> {
    let rows: Vec<PpgRow> = read_csv(path)?;
    if rows.iter().enumerate().any(|(i, r)| r.index != i) {
        return Err(HarnessError::format(path, "rows out of order"));
    }
    PpgSignal::new(rows.into_iter().map(|r| r.ppg).collect(), fs)
        .map_err(|e| HarnessError::format(path, e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FiducialRow {
    pub beat: usize,
    pub diastolic_idx: usize,
    pub notch_idx: usize,
    pub lvet_ms: f64,
}

pub fn write_fiducials(path: &Path, f: &Fiducials) -> Result<()> {
    let rows: Vec<FiducialRow> = (0..f.diastolic_idx.len())
        .map(|i| FiducialRow {
            beat: i,
            diastolic_idx: f.diastolic_idx[i],
            notch_idx: f.notch_idx[i],
            lvet_ms: f.lvet_ms[i],
        })
        .collect();
    write_csv(path, &rows)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Model settings needed to rebuild the architecture.
fn model_header(cfg: &RunConfig) -> String {
    cfg.to_text()
        .lines()
        .filter(|l| l.starts_with("model.") || l.starts_with("window.t "))
        .map(|l| format!("{l}\n"))
        .collect()
}

pub fn encode_checkpoint(cfg: &RunConfig, m: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    let header = model_header(cfg);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(m.params.len() as u32).to_le_bytes());
    for (name, p) in m.names.iter().zip(&m.params) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| HarnessError::format(self.path, "truncated checkpoint"))?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }
    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| HarnessError::format(self.path, "header is not UTF-8"))
    }
}

/// Rebuild a model from checkpoint bytes. `base` supplies everything the
/// header does not carry; the returned config has the header applied.
pub fn decode_checkpoint(path: &Path, b: &[u8], base: &RunConfig) -> Result<(RunConfig, Model)> {
    if b.len() < 8 || &b[..8] != CKPT_MAGIC {
        return Err(HarnessError::format(path, "not a checkpoint file"));
    }
    let mut c = Cursor { b, at: 8, path };
    let mut cfg = base.clone();
    cfg.apply_text(c.str()?)?;
    let mut model = build_model(&cfg.model, cfg.input_size, cfg.window.t, 0)?;
    let n = c.u32()?;
    if n != model.params.len() {
        return Err(HarnessError::format(path, "parameter count does not match the architecture"));
    }
    for i in 0..n {
        let name = c.str()?;
        if name != model.names[i] {
            return Err(HarnessError::format(path, format!("unexpected parameter {name:?}")));
        }
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        if shape != model.params[i].shape {
            return Err(HarnessError::format(path, format!("shape mismatch for {name}")));
        }
        let bytes = c.take(8 * model.params[i].len())?;
        for (d, q) in model.params[i].data.iter_mut().zip(bytes.chunks_exact(8)) {
            *d = f64::from_le_bytes(q.try_into().unwrap());
        }
    }
    if c.at != b.len() {
        return Err(HarnessError::format(path, "trailing bytes after parameters"));
    }
    Ok((cfg, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_tensor_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let data: Vec<f64> = (0..2 * 3 * 4 * 3).map(|i| (i as f64 * 0.1).sin()).collect();
        let f = Frames::from_vec(2, 3, 4, 3, data.clone()).unwrap();
        write_atomic(&p, &encode_clip(&f, 30.0)).unwrap();
        let (g, fs) = decode_clip(&p, &read(&p).unwrap()).unwrap();
        assert_eq!(fs, 30.0);
        assert_eq!(g.dims(), [2, 3, 4, 3]);
        for (a, b) in g.data.iter().zip(&data) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let mut bad = read(&p).unwrap();
        bad.pop();
        assert!(decode_clip(&p, &bad).is_err());
    }

    #[test]
    fn ppg_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let s = PpgSignal::new(vec![0.0, 0.25, 1.0 / 3.0, 1.0], 30.0).unwrap();
        write_ppg(&p, &s).unwrap();
        assert_eq!(read_ppg(&p, 30.0).unwrap().samples, s.samples);
    }

    #[test]
    fn checkpoint_round_trip_and_rejection() {
        let mut cfg = RunConfig::default();
        cfg.model.filters = (2, 3);
        cfg.model.gru_units = 2;
        cfg.input_size = 8;
        cfg.window.t = 5;
        let m = build_model(&cfg.model, 8, 5, 9).unwrap();
        let bytes = encode_checkpoint(&cfg, &m);
        let (back_cfg, back) = decode_checkpoint(Path::new("x"), &bytes, &RunConfig::default()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back_cfg.model, cfg.model);
        assert!(decode_checkpoint(Path::new("x"), &bytes[..bytes.len() - 1], &RunConfig::default()).is_err());
        assert!(decode_checkpoint(Path::new("x"), b"garbage!", &RunConfig::default()).is_err());
    }
}
