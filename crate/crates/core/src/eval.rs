//! Clip-level evaluation: HR and LVET from predicted waveforms.
//!
//! A clip is cut into back-to-back windows (stride equal to the window
//! length) and the per-window outputs are concatenated. Window targets are
//! standardised independently and the SD series has an undefined first
//! sample in every window; that slot is filled from its neighbours the
//! same way for truth and prediction, so the two go through an identical
//! pipeline.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use thiserror::Error;

use crate::metrics::{
    bland_altman, detect_fiducials, estimate_hr_of_difference, lvet_series, mae_summary, BlandAltman, FiducialConfig, LvetWindow,
    MaeSummary, MetricsError, HR_BAND_HZ,
};
use crate::model::{Mode, Model, ModelError};
use crate::preprocess::ClipWindows;
use crate::signal::mean_std;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("evaluation windows must not overlap: stride {stride} != length {t}")]
    StrideMismatch { stride: usize, t: usize },
    #[error("clip {0} yields no windows")]
    EmptyClip(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub hr_band_hz: (f64, f64),
    pub lvet_window_s: f64,
    pub fiducial: FiducialConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            hr_band_hz: HR_BAND_HZ,
            lvet_window_s: 10.0,
            fiducial: FiducialConfig::default(),
        }
    }
}

/// Where predicted waveforms come from.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    Model(&'a Model),
    /// The targets themselves, for both heads.
    Truth,
}

/// Stitched waveforms of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSignals {
    pub t: usize,
    pub fs: f64,
    pub fd_true: Vec<f64>,
    pub sd_true: Vec<f64>,
    pub fd_pred: Option<Vec<f64>>,
    pub sd_pred: Option<Vec<f64>>,
}

/// Fill the first sample of every length-`t` SD window: the clip's first
/// window copies sample 1, later ones average the previous window's last
/// sample with their own sample 1.
pub fn repair_sd_pads(sd: &mut [f64], t: usize) {
    if t < 2 {
        return;
    }
    for s in (0..sd.len()).step_by(t) {
        if s + 1 >= sd.len() {
            break;
        }
        sd[s] = if s == 0 { sd[1] } else { 0.5 * (sd[s - 1] + sd[s + 1]) };
    }
}

/// Difference an FD series window by window, as the windowing step does
/// for targets: pad 0 at each window start, then standardise the rest.
pub fn sd_from_fd(fd: &[f64], t: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(fd.len());
    for w in fd.chunks(t) {
        let start = out.len();
        out.push(0.0);
        out.extend(w.windows(2).map(|p| p[1] - p[0]));
        let tail = &mut out[start + 1..];
        let (m, s) = mean_std(tail);
        let inv = if s > 1e-12 { 1.0 / s } else { 0.0 };
        tail.iter_mut().for_each(|v| *v = (*v - m) * inv);
    }
    out
}

pub fn stitch_clip(src: Source, cw: &ClipWindows) -> Result<ClipSignals, EvalError> {
    let t = cw.config.t;
    if cw.config.stride != t {
        return Err(EvalError::StrideMismatch {
            stride: cw.config.stride,
            t,
        });
    }
    let n = cw.len();
    let mut s = ClipSignals {
        t,
        fs: cw.fs,
        fd_true: Vec::with_capacity(n * t),
        sd_true: Vec::with_capacity(n * t),
        fd_pred: None,
        sd_pred: None,
    };
    let (mut fd_p, mut sd_p) = (Vec::new(), Vec::new());
    let (mut has_fd, mut has_sd) = (true, true);
    for ex in cw.iter() {
        let (fd, sd) = match src {
            Source::Truth => (Some(ex.fd_target.clone()), Some(ex.sd_target.clone())),
            Source::Model(m) => {
                let p = m.forward(&ex, Mode::Eval, 0)?;
                (p.fd, p.sd)
            }
        };
        has_fd &= fd.is_some();
        has_sd &= sd.is_some();
        fd_p.extend(fd.unwrap_or_default());
        sd_p.extend(sd.unwrap_or_default());
        s.fd_true.extend(&ex.fd_target);
        s.sd_true.extend(&ex.sd_target);
    }
    repair_sd_pads(&mut s.sd_true, t);
    if has_sd {
        repair_sd_pads(&mut sd_p, t);
        s.sd_pred = Some(sd_p);
    }
    if has_fd {
        s.fd_pred = Some(fd_p);
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipEval {
    pub clip: usize,
    pub hr_true: Option<f64>,
    pub hr_pred: Option<f64>,
    pub lvet_true: Vec<LvetWindow>,
    pub lvet_pred: Vec<LvetWindow>,
    /// Metric failures on this clip; the other clips are unaffected.
    pub failures: Vec<String>,
}

impl ClipEval {
    /// `(pred, truth)` LVET pairs for windows present on both sides.
    pub fn lvet_pairs(&self) -> Vec<(f64, f64)> {
        self.lvet_pred
            .iter()
            .filter_map(|p| {
                self.lvet_true
                    .iter()
                    .find(|t| t.index == p.index)
                    .map(|t| (p.mean_ms, t.mean_ms))
            })
            .collect()
    }
}

fn lvet_of(sd: &[f64], fs: f64, cfg: &EvalConfig) -> Result<Vec<LvetWindow>, MetricsError> {
    let fid = detect_fiducials(sd, fs, None, &cfg.fiducial)?;
    lvet_series(&fid, fs, cfg.lvet_window_s)
}

/// HR from the FD prediction when there is one, else from the SD
/// prediction. LVET from the SD prediction when there is one, else from
/// the differenced FD prediction.
pub fn evaluate_signals(clip: usize, s: &ClipSignals, cfg: &EvalConfig) -> ClipEval {
    let mut failures = Vec::new();
    let mut note = |what: &str, r: Result<f64, MetricsError>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            failures.push(format!("{what}: {e}"));
            None
        }
    };
    let hr_true = note("hr_true", estimate_hr_of_difference(&s.fd_true, s.fs, cfg.hr_band_hz, 1));
    let hr_src = match (&s.fd_pred, &s.sd_pred) {
        (Some(fd), _) => Some((fd, 1)),
        (None, Some(sd)) => Some((sd, 2)),
        (None, None) => None,
    };
    let hr_pred = hr_src.and_then(|(x, order)| note("hr_pred", estimate_hr_of_difference(x, s.fs, cfg.hr_band_hz, order)));

    let sd_pred = match (&s.sd_pred, &s.fd_pred) {
        (Some(sd), _) => Some(sd.clone()),
        (None, Some(fd)) => {
            let mut sd = sd_from_fd(fd, s.t);
            repair_sd_pads(&mut sd, s.t);
            Some(sd)
        }
        (None, None) => None,
    };
    let mut lv = |what: &str, sd: &[f64]| match lvet_of(sd, s.fs, cfg) {
        Ok(v) => v,
        Err(e) => {
            failures.push(format!("{what}: {e}"));
            Vec::new()
        }
    };
    let lvet_true = lv("lvet_true", &s.sd_true);
    let lvet_pred = sd_pred.map(|sd| lv("lvet_pred", &sd)).unwrap_or_default();
    ClipEval {
        clip,
        hr_true,
        hr_pred,
        lvet_true,
        lvet_pred,
        failures,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub clips: Vec<ClipEval>,
    pub hr_mae: Option<MaeSummary>,
    pub lvet_mae: Option<MaeSummary>,
    pub hr_bland_altman: Option<BlandAltman>,
    pub lvet_bland_altman: Option<BlandAltman>,
    /// Clips with at least one metric failure.
    pub failed_clips: usize,
}

impl EvalReport {
    pub fn from_clips(clips: Vec<ClipEval>) -> Self {
        let (mut hp, mut ht, mut lp, mut lt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for c in &clips {
            if let (Some(p), Some(t)) = (c.hr_pred, c.hr_true) {
                hp.push(p);
                ht.push(t);
            }
            for (p, t) in c.lvet_pairs() {
                lp.push(p);
                lt.push(t);
            }
        }
        let mae = |p: &[f64], t: &[f64]| (!p.is_empty()).then(|| mae_summary(p, t).ok()).flatten();
        let ba = |p: &[f64], t: &[f64]| (p.len() >= 2).then(|| bland_altman(p, t).ok()).flatten();
        Self {
            hr_mae: mae(&hp, &ht),
            lvet_mae: mae(&lp, &lt),
            hr_bland_altman: ba(&hp, &ht),
            lvet_bland_altman: ba(&lp, &lt),
            failed_clips: clips.iter().filter(|c| !c.failures.is_empty()).count(),
            clips,
        }
    }
}

/// Evaluate every clip. Shape and configuration problems abort; metric
/// failures are recorded per clip.
pub fn evaluate(src: Source, clips: &[ClipWindows], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let mut out = Vec::with_capacity(clips.len());
    for (i, cw) in clips.iter().enumerate() {
        if cw.is_empty() {
            return Err(EvalError::EmptyClip(i));
        }
        let s = stitch_clip(src, cw)?;
        out.push(evaluate_signals(i, &s, cfg));
    }
    Ok(EvalReport::from_clips(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Arch, ModelConfig};
    use crate::preprocess::WindowConfig;
    use crate::render::{render_sampled, sample_clip_params, Frames, SamplerRanges};
    use crate::signal::PpgSignal;

    fn eval_clips(n: usize, hw: usize, seed: u64) -> Vec<ClipWindows> {
        let ranges = SamplerRanges::default();
        let wc = WindowConfig {
            stride: 30,
            ..WindowConfig::default()
        };
        (0..n)
            .map(|i| {
                let p = sample_clip_params(&ranges, hw, hw, seed, i).unwrap();
                let c = render_sampled(p, hw, hw, 30.0, 6.0).unwrap();
                ClipWindows::from_clip(&c.clip, wc).unwrap()
            })
            .collect()
    }

    #[test]
    fn pad_repair() {
        let mut x = alloc::vec![0.0, 2.0, 3.0, 0.0, 5.0, 6.0, 0.0];
        repair_sd_pads(&mut x, 3);
        assert_eq!(x, alloc::vec![2.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0]);
    }

    #[test]
    fn sd_from_fd_matches_window_targets() {
        let cw = &eval_clips(1, 8, 3)[0];
        let s = stitch_clip(Source::Truth, cw).unwrap();
        let mut sd = sd_from_fd(&s.fd_true, s.t);
        repair_sd_pads(&mut sd, s.t);
        for (a, b) in sd.iter().zip(&s.sd_true) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn truth_against_truth_is_exact() {
        let clips = eval_clips(4, 8, 11);
        let r = evaluate(Source::Truth, &clips, &EvalConfig::default()).unwrap();
        assert_eq!(r.failed_clips, 0);
        let hr = r.hr_mae.unwrap();
        let lv = r.lvet_mae.unwrap();
        assert_eq!((hr.mean, hr.std, hr.n), (0.0, 0.0, 4));
        assert_eq!((lv.mean, lv.std), (0.0, 0.0));
        assert!(lv.n >= 4);
    }

    #[test]
    fn stitched_length_and_stride_check() {
        let clips = eval_clips(1, 8, 12);
        let s = stitch_clip(Source::Truth, &clips[0]).unwrap();
        assert_eq!(s.fd_true.len(), 150);
        let mut bad = clips[0].clone();
        bad.config.stride = 15;
        assert!(matches!(stitch_clip(Source::Truth, &bad), Err(EvalError::StrideMismatch { .. })));
    }

    #[test]
    fn model_heads_route_to_metrics() {
        let clips = eval_clips(2, 8, 13);
        let small = |c: ModelConfig| ModelConfig {
            filters: (2, 2),
            gru_units: 2,
            ..c
        };
        let fd = build_model(&small(ModelConfig::fd_optimized(Arch::Attention)), 8, 30, 1).unwrap();
        let s = stitch_clip(Source::Model(&fd), &clips[0]).unwrap();
        assert!(s.fd_pred.is_some() && s.sd_pred.is_none());
        let sd = build_model(&small(ModelConfig::sd_optimized(Arch::Plain)), 8, 30, 1).unwrap();
        let s = stitch_clip(Source::Model(&sd), &clips[0]).unwrap();
        assert!(s.fd_pred.is_none() && s.sd_pred.as_ref().unwrap().len() == 150);
        let r = evaluate(Source::Model(&sd), &clips, &EvalConfig::default()).unwrap();
        assert_eq!(r.clips.len(), 2);
    }

    #[test]
    fn degenerate_clip_does_not_spoil_others() {
        let mut clips = eval_clips(3, 8, 14);
        let n = clips[1].frames.t;
        let flat = PpgSignal::new(alloc::vec![0.5; n], 30.0).unwrap();
        clips[1] = ClipWindows::new(Frames::zeros(n, 8, 8, 3), &flat, clips[1].config).unwrap();
        let r = evaluate(Source::Truth, &clips, &EvalConfig::default()).unwrap();
        assert_eq!(r.failed_clips, 1);
        assert!(!r.clips[1].failures.is_empty());
        assert!(r.clips[0].failures.is_empty() && r.clips[2].failures.is_empty());
        assert_eq!(r.hr_mae.unwrap().n, 2);
        assert_eq!(r.lvet_mae.unwrap().mean, 0.0);
    }

    #[test]
    fn shape_mismatch_aborts() {
        let clips = eval_clips(1, 8, 15);
        let cfg = ModelConfig {
            filters: (2, 2),
            gru_units: 2,
            ..ModelConfig::fd_optimized(Arch::Plain)
        };
        let m = build_model(&cfg, 4, 30, 0).unwrap();
        assert!(matches!(
            evaluate(Source::Model(&m), &clips, &EvalConfig::default()),
            Err(EvalError::Model(ModelError::ShapeMismatch(_)))
        ));
    }
}
