//! Model inputs: cropping, difference frames, difference-of-difference
//! frames and the aligned derivative targets.
//!
//! A window starting at frame `s` consumes raw frames `s..=s+T`. Its FD
//! stream has `T` steps, `fd[i]` built from frames `s+i` and `s+i+1`. The SD
//! stream is `fd[i] - fd[i-1]` for `i >= 1` with a zero at index 0, so every
//! index lines up across raw, FD and SD inputs and both targets.

use alloc::vec::Vec;
use thiserror::Error;

use crate::render::{Frames, VideoClip};
use crate::signal::{mean_std, PpgSignal};

pub const CLAMP: f64 = 3.0;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PreprocessError {
    #[error("cannot upsample {from_h}x{from_w} to {to_h}x{to_w}")]
    UpsampleRequested {
        from_h: usize,
        from_w: usize,
        to_h: usize,
        to_w: usize,
    },
    #[error("need at least {needed} frames, got {got}")]
    SequenceTooShort { needed: usize, got: usize },
    #[error("clip has {got} frames, a window needs {needed}")]
    ClipTooShort { needed: usize, got: usize },
    #[error("invalid preprocessing parameter: {0}")]
    InvalidParameter(&'static str),
}

/// Centre-crop to a square, then block-mean down to `out_h x out_w`.
///
/// When the square side is not a multiple of the output size the crop is
/// tightened (still centred) to the largest multiple.
pub fn crop_downsample(clip: &VideoClip, out_h: usize, out_w: usize) -> Result<VideoClip, PreprocessError> {
    Ok(VideoClip {
        frames: crop_downsample_frames(&clip.frames, out_h, out_w)?,
        fs: clip.fs,
        source_ppg: clip.source_ppg.clone(),
    })
}

pub fn crop_downsample_frames(f: &Frames, out_h: usize, out_w: usize) -> Result<Frames, PreprocessError> {
    let side = f.h.min(f.w);
    if out_h == 0 || out_w == 0 || out_h > side || out_w > side {
        return Err(PreprocessError::UpsampleRequested {
            from_h: f.h,
            from_w: f.w,
            to_h: out_h,
            to_w: out_w,
        });
    }
    let (bh, bw) = (side / out_h, side / out_w);
    let y0 = (f.h - bh * out_h) / 2;
    let x0 = (f.w - bw * out_w) / 2;
    let scale = 1.0 / (bh * bw) as f64;
    let mut out = Frames::zeros(f.t, out_h, out_w, f.c);
    for t in 0..f.t {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let o = out.idx(t, oy, ox, 0);
                for dy in 0..bh {
                    let row = f.idx(t, y0 + oy * bh + dy, x0 + ox * bw, 0);
                    for dx in 0..bw {
                        for k in 0..f.c {
                            out.data[o + k] += f.data[row + dx * f.c + k];
                        }
                    }
                }
                for k in 0..f.c {
                    out.data[o + k] *= scale;
                }
            }
        }
    }
    Ok(out)
}

/// `(x(t+1) - x(t)) / (x(t+1) + x(t) + eps)` per element, before any scaling.
pub fn normalized_difference(f: &Frames, eps: f64) -> Result<Frames, PreprocessError> {
    if f.t < 2 {
        return Err(PreprocessError::SequenceTooShort { needed: 2, got: f.t });
    }
    if !(eps > 0.0) {
        return Err(PreprocessError::InvalidParameter("epsilon must be positive"));
    }
    let n = f.frame_len();
    let mut data = Vec::with_capacity((f.t - 1) * n);
    for t in 0..f.t - 1 {
        let a = f.frame(t);
        let b = f.frame(t + 1);
        data.extend(a.iter().zip(b).map(|(&a, &b)| (b - a) / (b + a + eps)));
    }
    Ok(Frames::from_vec(f.t - 1, f.h, f.w, f.c, data).unwrap())
}

/// Plain consecutive subtraction along time.
pub fn frame_difference(f: &Frames) -> Result<Frames, PreprocessError> {
    if f.t < 2 {
        return Err(PreprocessError::SequenceTooShort { needed: 2, got: f.t });
    }
    let n = f.frame_len();
    let data = f.data[n..].iter().zip(&f.data[..f.data.len() - n]).map(|(b, a)| b - a).collect();
    Ok(Frames::from_vec(f.t - 1, f.h, f.w, f.c, data).unwrap())
}

/// Population standard deviation of all elements; `None` when it is zero.
pub fn scale_of(x: &[f64]) -> Option<f64> {
    let (_, std) = mean_std(x);
    (std > 0.0 && std.is_finite()).then_some(std)
}

/// Divide by `scale` and clamp to `[-CLAMP, CLAMP]`.
pub fn scale_clamp(x: &mut [f64], scale: Option<f64>) {
    if let Some(s) = scale {
        for v in x.iter_mut() {
            *v = (*v / s).clamp(-CLAMP, CLAMP);
        }
    }
}

/// Difference frames standardised by their clip-level deviation and clamped.
/// An all-zero result (constant clip) is returned unscaled.
pub fn normalized_diff_frames(f: &Frames, eps: f64) -> Result<Frames, PreprocessError> {
    let mut d = normalized_difference(f, eps)?;
    let s = scale_of(&d.data);
    scale_clamp(&mut d.data, s);
    Ok(d)
}

/// Difference-of-difference frames, standardised by their own deviation and
/// clamped. One fewer step than `fd`.
pub fn diff_of_diff_frames(fd: &Frames) -> Result<Frames, PreprocessError> {
    let mut d = frame_difference(fd)?;
    let s = scale_of(&d.data);
    scale_clamp(&mut d.data, s);
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub t: usize,
    pub stride: usize,
    pub epsilon: f64,
    /// Scale FD/SD frames by their clip-level deviation and clamp at ±3.
    pub standardize_frames: bool,
    /// Standardise each window's targets to zero mean and unit deviation.
    pub standardize_targets: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            t: 30,
            stride: 15,
            epsilon: DEFAULT_EPSILON,
            standardize_frames: true,
            standardize_targets: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub raw_frames: Frames,
    pub fd_frames: Frames,
    pub sd_frames: Frames,
    pub fd_target: Vec<f64>,
    pub sd_target: Vec<f64>,
}

/// Clip-level state needed to cut windows on demand: the frames, the PPG
/// and the two clip-level scales. Avoids materialising every overlapping
/// window at once.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipWindows {
    pub frames: Frames,
    pub ppg: Vec<f64>,
    pub fs: f64,
    pub config: WindowConfig,
    fd_scale: Option<f64>,
    sd_scale: Option<f64>,
}

pub fn window_count(n_frames: usize, t: usize, stride: usize) -> usize {
    if n_frames < t + 1 || stride == 0 {
        0
    } else {
        (n_frames - t - 1) / stride + 1
    }
}

impl ClipWindows {
    pub fn new(frames: Frames, ppg: &PpgSignal, config: WindowConfig) -> Result<Self, PreprocessError> {
        if config.t < 2 {
            return Err(PreprocessError::InvalidParameter("window length must be at least 2"));
        }
        if config.stride == 0 {
            return Err(PreprocessError::InvalidParameter("stride must be at least 1"));
        }
        if !(config.epsilon > 0.0) {
            return Err(PreprocessError::InvalidParameter("epsilon must be positive"));
        }
        if ppg.len() != frames.t {
            return Err(PreprocessError::InvalidParameter("PPG length must match frame count"));
        }
        if frames.t < config.t + 1 {
            return Err(PreprocessError::ClipTooShort {
                needed: config.t + 1,
                got: frames.t,
            });
        }
        let (fd_scale, sd_scale) = if config.standardize_frames {
            let mut fd = normalized_difference(&frames, config.epsilon)?;
            let fs_ = scale_of(&fd.data);
            scale_clamp(&mut fd.data, fs_);
            let dd = frame_difference(&fd)?;
            (fs_, scale_of(&dd.data))
        } else {
            (None, None)
        };
        Ok(Self {
            frames,
            ppg: ppg.samples.clone(),
            fs: ppg.fs,
            config,
            fd_scale,
            sd_scale,
        })
    }

    pub fn from_clip(clip: &VideoClip, config: WindowConfig) -> Result<Self, PreprocessError> {
        Self::new(clip.frames.clone(), &clip.source_ppg, config)
    }

    pub fn len(&self) -> usize {
        window_count(self.frames.t, self.config.t, self.config.stride)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn start(&self, i: usize) -> usize {
        i * self.config.stride
    }

    /// Window `i`, identical to the `i`-th element of [`make_windows`].
    pub fn window(&self, i: usize) -> TrainingExample {
        let t = self.config.t;
        let s = self.start(i);
        let seg = self.frames.slice_time(s, s + t + 1);
        let mut fd = normalized_difference(&seg, self.config.epsilon).unwrap();
        scale_clamp(&mut fd.data, self.fd_scale);
        let n = fd.frame_len();
        let mut sd = Frames::zeros(t, fd.h, fd.w, fd.c);
        for j in 1..t {
            for e in 0..n {
                sd.data[j * n + e] = fd.data[j * n + e] - fd.data[(j - 1) * n + e];
            }
        }
        scale_clamp(&mut sd.data[n..], self.sd_scale);
        let raw = seg.slice_time(0, t);

        let p = &self.ppg[s..s + t + 1];
        let mut fd_target: Vec<f64> = p.windows(2).map(|w| w[1] - w[0]).collect();
        let mut sd_target = alloc::vec![0.0; t];
        for j in 1..t {
            sd_target[j] = fd_target[j] - fd_target[j - 1];
        }
        if self.config.standardize_targets {
            standardize_in_place(&mut fd_target);
            standardize_in_place(&mut sd_target[1..]);
        }
        TrainingExample {
            raw_frames: raw,
            fd_frames: fd,
            sd_frames: sd,
            fd_target,
            sd_target,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = TrainingExample> + '_ {
        (0..self.len()).map(|i| self.window(i))
    }
}

/// Zero mean, unit population deviation; a constant input becomes zeros.
fn standardize_in_place(x: &mut [f64]) {
    let (mean, std) = mean_std(x);
    let inv = if std > 1e-12 { 1.0 / std } else { 0.0 };
    for v in x.iter_mut() {
        *v = (*v - mean) * inv;
    }
}

pub fn make_windows(clip: &VideoClip, config: WindowConfig) -> Result<Vec<TrainingExample>, PreprocessError> {
    let cw = ClipWindows::from_clip(clip, config)?;
    Ok(cw.iter().collect())
}
