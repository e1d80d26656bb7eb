//! Flat `section.key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Ranges and pairs are written
//! `lo, hi`; booleans `true`/`false`. Later assignments win, so command
//! line overrides are simply applied after the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use multideriv_core::eval::EvalConfig;
use multideriv_core::model::{Arch, LossKind, ModelConfig};
use multideriv_core::preprocess::WindowConfig;
use multideriv_core::render::{Range, SamplerRanges};
use multideriv_core::seed;
use multideriv_core::train::TrainConfig;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Dataset directory read by train/eval/ablate; `<out>/data` when unset.
    pub dir: Option<PathBuf>,
    pub clips: usize,
    /// Rendered frame side in pixels.
    pub size: usize,
    pub fps: f64,
    pub duration_s: f64,
    pub ranges: SamplerRanges,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            clips: 120,
            size: 36,
            fps: 30.0,
            duration_s: 6.0,
            ranges: SamplerRanges::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub test_fraction: f64,
    pub window: WindowConfig,
    pub model: ModelConfig,
    /// Frame side fed to the model; clips are centre-cropped and
    /// block-averaged down to it.
    pub input_size: usize,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sd_input_rows: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            test_fraction: 0.2,
            window: WindowConfig::default(),
            model: ModelConfig::default(),
            input_size: 36,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sd_input_rows: false,
        }
    }
}

/// Sub-seed tags so every stage draws from its own stream.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const INIT: u64 = 4;
}

fn bad(key: &str, value: &str) -> HarnessError {
    HarnessError::Config(format!("invalid value {value:?} for {key}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, v)),
    }
}

fn pair<T: std::str::FromStr>(key: &str, v: &str) -> Result<(T, T)> {
    let (a, b) = v.split_once(',').ok_or_else(|| bad(key, v))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

fn range(key: &str, v: &str) -> Result<Range> {
    let (lo, hi) = pair::<f64>(key, v)?;
    Ok(Range::new(lo, hi))
}

impl RunConfig {
    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn stage_seed(&self, stream: u64) -> u64 {
        seed::derive(self.seed, stream)
    }

    /// Training configuration with its seed derived from the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(stream::TRAIN),
            ..self.train
        }
    }

    /// Windowing used at evaluation: back-to-back windows.
    pub fn eval_window(&self) -> WindowConfig {
        WindowConfig {
            stride: self.window.t,
            ..self.window
        }
    }

    pub fn ranges_mut(&mut self, name: &str) -> Option<&mut Range> {
        let r = &mut self.data.ranges;
        Some(match name {
            "hr_bpm" => &mut r.hr_bpm,
            "hr_jitter" => &mut r.hr_jitter,
            "systolic_width" => &mut r.systolic_width,
            "dicrotic_amp" => &mut r.dicrotic_amp,
            "dicrotic_center" => &mut r.dicrotic_center,
            "illumination" => &mut r.illumination,
            "stationary_strength" => &mut r.stationary_strength,
            "pulsatile_strength" => &mut r.pulsatile_strength,
            "skin_tint" => &mut r.skin_tint,
            "noise_sigma" => &mut r.noise_sigma,
            "specular_amp" => &mut r.specular_amp,
            "specular_freq" => &mut r.specular_freq,
            "motion_amp" => &mut r.motion_amp,
            "motion_freq" => &mut r.motion_freq,
            "skin_fraction" => &mut r.skin_fraction,
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "data.dir" => self.data.dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.clips" => self.data.clips = num(key, v)?,
            "data.size" => self.data.size = num(key, v)?,
            "data.fps" => self.data.fps = num(key, v)?,
            "data.duration_s" => self.data.duration_s = num(key, v)?,
            "split.test_fraction" => self.test_fraction = num(key, v)?,
            "window.t" => self.window.t = num(key, v)?,
            "window.stride" => self.window.stride = num(key, v)?,
            "window.epsilon" => self.window.epsilon = num(key, v)?,
            "window.standardize_frames" => self.window.standardize_frames = flag(key, v)?,
            "window.standardize_targets" => self.window.standardize_targets = flag(key, v)?,
            "model.arch" => {
                self.model.arch = match v {
                    "attention" => Arch::Attention,
                    "plain" => Arch::Plain,
                    _ => return Err(bad(key, v)),
                }
            }
            "model.fd_input" => self.model.use_fd_input = flag(key, v)?,
            "model.sd_input" => self.model.use_sd_input = flag(key, v)?,
            "model.fd_target" => self.model.use_fd_target = flag(key, v)?,
            "model.sd_target" => self.model.use_sd_target = flag(key, v)?,
            "model.loss" => {
                self.model.loss_kind = match v {
                    "mse" => LossKind::Mse,
                    "mae" => LossKind::Mae,
                    _ => return Err(bad(key, v)),
                }
            }
            "model.target_weights" => self.model.target_weights = pair(key, v)?,
            "model.filters" => self.model.filters = pair(key, v)?,
            "model.gru_units" => self.model.gru_units = num(key, v)?,
            "model.dropout" => self.model.dropout = num(key, v)?,
            "model.input_size" => self.input_size = num(key, v)?,
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "eval.band_hz" => self.eval.hr_band_hz = pair(key, v)?,
            "eval.lvet_window_s" => self.eval.lvet_window_s = num(key, v)?,
            "eval.anchor_distance" => self.eval.fiducial.anchor_distance = num(key, v)?,
            "eval.anchor_prominence" => self.eval.fiducial.anchor_prominence = num(key, v)?,
            "eval.notch_gap" => self.eval.fiducial.notch_gap = num(key, v)?,
            "eval.notch_prominence" => self.eval.fiducial.notch_prominence = num(key, v)?,
            "ablate.sd_input_rows" => self.sd_input_rows = flag(key, v)?,
            _ => {
                let r = key
                    .strip_prefix("data.")
                    .and_then(|name| self.ranges_mut(name))
                    .ok_or_else(|| HarnessError::Config(format!("unknown key {key:?}")))?;
                *r = range(key, v)?;
            }
        }
        Ok(())
    }

    /// Apply `key = value` lines.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every key with its current value, in a form `apply_text` reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let b = |x: bool| x.to_string();
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        kv(
            "data.dir",
            self.data.dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("data.clips", self.data.clips.to_string());
        kv("data.size", self.data.size.to_string());
        kv("data.fps", format!("{:?}", self.data.fps));
        kv("data.duration_s", format!("{:?}", self.data.duration_s));
        let mut copy = self.clone();
        for name in RANGE_KEYS {
            let r = *copy.ranges_mut(name).unwrap();
            kv(&format!("data.{name}"), format!("{:?}, {:?}", r.lo, r.hi));
        }
        kv("split.test_fraction", format!("{:?}", self.test_fraction));
        kv("window.t", self.window.t.to_string());
        kv("window.stride", self.window.stride.to_string());
        kv("window.epsilon", format!("{:?}", self.window.epsilon));
        kv("window.standardize_frames", b(self.window.standardize_frames));
        kv("window.standardize_targets", b(self.window.standardize_targets));
        let m = &self.model;
        kv("model.arch", arch_name(m.arch).into());
        kv("model.fd_input", b(m.use_fd_input));
        kv("model.sd_input", b(m.use_sd_input));
        kv("model.fd_target", b(m.use_fd_target));
        kv("model.sd_target", b(m.use_sd_target));
        kv(
            "model.loss",
            match m.loss_kind {
                LossKind::Mse => "mse",
                LossKind::Mae => "mae",
            }
            .into(),
        );
        kv("model.target_weights", format!("{:?}, {:?}", m.target_weights.0, m.target_weights.1));
        kv("model.filters", format!("{}, {}", m.filters.0, m.filters.1));
        kv("model.gru_units", m.gru_units.to_string());
        kv("model.dropout", format!("{:?}", m.dropout));
        kv("model.input_size", self.input_size.to_string());
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.lr", format!("{:?}", self.train.lr));
        let e = &self.eval;
        kv("eval.band_hz", format!("{:?}, {:?}", e.hr_band_hz.0, e.hr_band_hz.1));
        kv("eval.lvet_window_s", format!("{:?}", e.lvet_window_s));
        kv("eval.anchor_distance", format!("{:?}", e.fiducial.anchor_distance));
        kv("eval.anchor_prominence", format!("{:?}", e.fiducial.anchor_prominence));
        kv("eval.notch_gap", format!("{:?}", e.fiducial.notch_gap));
        kv("eval.notch_prominence", format!("{:?}", e.fiducial.notch_prominence));
        kv("ablate.sd_input_rows", b(self.sd_input_rows));
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(HarnessError::Config(m.into()));
        if self.data.clips == 0 {
            return fail("data.clips must be at least 1");
        }
        if !(self.data.fps > 0.0 && self.data.duration_s > 0.0) {
            return fail("data.fps and data.duration_s must be positive");
        }
        if self.input_size == 0 || self.input_size > self.data.size {
            return fail("model.input_size must be in 1..=data.size");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return fail("split.test_fraction must be in [0, 1)");
        }
        self.data.ranges.validate()?;
        let cfg_err = |e: &dyn std::fmt::Display| HarnessError::Config(e.to_string());
        self.model.validate().map_err(|e| cfg_err(&e))?;
        self.train.validate().map_err(|e| cfg_err(&e))?;
        Ok(())
    }
}

pub const RANGE_KEYS: [&str; 15] = [
    "hr_bpm",
    "hr_jitter",
    "systolic_width",
    "dicrotic_amp",
    "dicrotic_center",
    "illumination",
    "stationary_strength",
    "pulsatile_strength",
    "skin_tint",
    "noise_sigma",
    "specular_amp",
    "specular_freq",
    "motion_amp",
    "motion_freq",
    "skin_fraction",
];

pub fn arch_name(a: Arch) -> &'static str {
    match a {
        Arch::Attention => "attention",
        Arch::Plain => "plain",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# comment\nseed = 17\ndata.hr_bpm = 55, 90  # trailing\nmodel.arch = plain\nmodel.filters = 4, 8\n\
             train.lr = 0.0005\nablate.sd_input_rows = true\ndata.dir = /tmp/x\n",
        )
        .unwrap();
        assert_eq!(c.seed, 17);
        assert_eq!(c.data.ranges.hr_bpm, Range::new(55.0, 90.0));
        assert_eq!(c.model.arch, Arch::Plain);
        assert_eq!(c.model.filters, (4, 8));
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        let mut d = RunConfig::default();
        d.apply_text(&RunConfig::default().to_text()).unwrap();
        assert_eq!(d, RunConfig::default());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = RunConfig::default();
        assert!(c.set("model.colour", "red").is_err());
        assert!(c.set("train.epochs", "eight").is_err());
        assert!(c.set("data.hr_bpm", "60").is_err());
        assert!(c.apply_text("no equals sign").is_err());
        c.set("train.epochs", "0").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        let c = RunConfig::default();
        let s: Vec<u64> = [stream::DATA, stream::SPLIT, stream::TRAIN, stream::INIT]
            .iter()
            .map(|&t| c.stage_seed(t))
            .collect();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert_ne!(s[i], s[j]);
            }
        }
    }
}
