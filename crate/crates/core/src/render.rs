//! Synthetic pulse videos under the dichromatic reflection model.
//!
//! A rectangular skin patch on a flat background is lit by a constant
//! illuminant. For skin pixels and channel `k`:
//!
//! ```text
//! C_k(t) = I * (v_s(t) + u_d[k] * d0 + u_p[k] * p(t)) + v_n(t)
//! ```
//!
//! Background pixels drop the pulsatile term and use their own colour vector.
//! With zero noise, no specular term and no motion, the second temporal
//! difference of a skin pixel is exactly `I * u_p[k]` times the second
//! difference of `p`.

use alloc::vec::Vec;
use core::f64::consts::PI;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::seed;
use crate::signal::{synth_ppg, BeatTemplateParams, PpgSignal, SignalError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RenderError {
    #[error("skin region does not fit inside a {height}x{width} frame")]
    RegionOutOfBounds { height: usize, width: usize },
    #[error("frame size must be at least 4x4")]
    FrameTooSmall,
    #[error("pulse signal must be amplitude-normalised")]
    UnnormalizedSignal,
    #[error("invalid rendering parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("invalid sampling range for {0}")]
    InvalidRange(&'static str),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// Dense `T x H x W x C` frame stack, row-major with channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Frames {
    pub fn zeros(t: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            t,
            h,
            w,
            c,
            data: alloc::vec![0.0; t * h * w * c],
        }
    }

    pub fn from_vec(t: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == t * h * w * c).then_some(Self { t, h, w, c, data })
    }

    #[inline]
    pub fn idx(&self, t: usize, y: usize, x: usize, k: usize) -> usize {
        ((t * self.h + y) * self.w + x) * self.c + k
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize, k: usize) -> f64 {
        self.data[self.idx(t, y, x, k)]
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Frames `start..end` as a new stack.
    pub fn slice_time(&self, start: usize, end: usize) -> Self {
        let n = self.frame_len();
        Self {
            t: end - start,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.t, self.h, self.w, self.c]
    }
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    fn fits(&self, h: usize, w: usize) -> bool {
        self.height > 0 && self.width > 0 && self.top + self.height <= h && self.left + self.width <= w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrmParams {
    /// Constant illuminant intensity `I`.
    pub illumination: f64,
    /// Unit colour vector of skin tissue, `u_d`.
    pub skin_color: [f64; 3],
    /// Stationary reflection strength `d0`.
    pub stationary_strength: f64,
    /// Pulsatile strength per channel, `u_p`.
    pub pulsatile_color: [f64; 3],
    /// Unit colour vector of the background.
    pub background_color: [f64; 3],
    /// Standard deviation of per-pixel Gaussian sensor noise.
    pub noise_sigma: f64,
    pub specular_amp: f64,
    pub specular_freq: f64,
    /// Horizontal sinusoidal translation of the skin patch, in pixels.
    pub motion_amp: f64,
    pub motion_freq: f64,
    pub skin_region: Rect,
}

impl DrmParams {
    /// Noise-free, static defaults for a frame of the given size with the
    /// skin patch covering the central half.
    pub fn still(height: usize, width: usize) -> Self {
        Self {
            illumination: 1.0,
            skin_color: unit([0.75, 0.55, 0.45]),
            stationary_strength: 0.55,
            pulsatile_color: [0.012, 0.028, 0.019],
            background_color: unit([0.4, 0.45, 0.5]),
            noise_sigma: 0.0,
            specular_amp: 0.0,
            specular_freq: 0.0,
            motion_amp: 0.0,
            motion_freq: 0.0,
            skin_region: Rect {
                top: height / 4,
                left: width / 4,
                height: height / 2,
                width: width / 2,
            },
        }
    }

    fn validate(&self, h: usize, w: usize) -> Result<(), RenderError> {
        if !self.skin_region.fits(h, w) {
            return Err(RenderError::RegionOutOfBounds { height: h, width: w });
        }
        if !(self.illumination > 0.0) {
            return Err(RenderError::InvalidParameter("illumination must be positive"));
        }
        if (norm(self.skin_color) - 1.0).abs() > 1e-9 {
            return Err(RenderError::InvalidParameter("skin colour must be a unit vector"));
        }
        if !(self.noise_sigma >= 0.0 && self.specular_amp >= 0.0 && self.motion_amp >= 0.0) {
            return Err(RenderError::InvalidParameter(
                "noise, specular and motion amplitudes must be non-negative",
            ));
        }
        Ok(())
    }
}

fn norm(v: [f64; 3]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

pub fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Frames,
    pub fs: f64,
    pub source_ppg: PpgSignal,
}

/// Render diagnostics. Clamping breaks the second-difference identity, so
/// callers that rely on it should check [`RenderReport::saturation_warning`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderReport {
    pub clipped_skin_fraction: f64,
}

impl RenderReport {
    pub fn saturation_warning(&self) -> bool {
        self.clipped_skin_fraction > 0.01
    }
}

/// Fraction of pixel `(y, x)` covered by the skin patch shifted by `dx`
/// pixels, via bilinear resampling of the static mask.
fn coverage(region: &Rect, y: usize, x: usize, dx: f64) -> f64 {
    let inside = |yy: isize, xx: isize| -> f64 {
        let (t, l) = (region.top as isize, region.left as isize);
        let (b, r) = (t + region.height as isize, l + region.width as isize);
        if yy >= t && yy < b && xx >= l && xx < r {
            1.0
        } else {
            0.0
        }
    };
    if dx == 0.0 {
        return inside(y as isize, x as isize);
    }
    let sx = x as f64 - dx;
    let x0 = libm::floor(sx);
    let frac = sx - x0;
    let x0 = x0 as isize;
    (1.0 - frac) * inside(y as isize, x0) + frac * inside(y as isize, x0 + 1)
}

pub fn render_clip(
    ppg: &PpgSignal,
    params: &DrmParams,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<(VideoClip, RenderReport), RenderError> {
    if height < 4 || width < 4 {
        return Err(RenderError::FrameTooSmall);
    }
    if !ppg.normalized {
        return Err(RenderError::UnnormalizedSignal);
    }
    params.validate(height, width)?;
    let t_len = ppg.len();
    let mut frames = Frames::zeros(t_len, height, width, 3);
    let mut rng = seed::rng(seed);
    let i0 = params.illumination;
    let d0 = params.stationary_strength;
    let mut skin_px = 0usize;
    let mut clipped = 0usize;
    for t in 0..t_len {
        let time = t as f64 / ppg.fs;
        let p = ppg.samples[t];
        let spec = if params.specular_amp > 0.0 {
            params.specular_amp * 0.5 * (1.0 + libm::sin(2.0 * PI * params.specular_freq * time))
        } else {
            0.0
        };
        let dx = if params.motion_amp > 0.0 {
            params.motion_amp * libm::sin(2.0 * PI * params.motion_freq * time)
        } else {
            0.0
        };
        for y in 0..height {
            for x in 0..width {
                let cov = coverage(&params.skin_region, y, x, dx);
                let is_skin = cov > 0.5;
                for k in 0..3 {
                    let skin =
                        i0 * (spec + params.skin_color[k] * d0 + params.pulsatile_color[k] * p);
                    let bg = i0 * (spec + params.background_color[k] * d0);
                    let mut v = if cov == 1.0 {
                        skin
                    } else if cov == 0.0 {
                        bg
                    } else {
                        cov * skin + (1.0 - cov) * bg
                    };
                    if params.noise_sigma > 0.0 {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        v += params.noise_sigma * n;
                    }
                    let c = v.clamp(0.0, 1.0);
                    if is_skin {
                        skin_px += 1;
                        if c != v {
                            clipped += 1;
                        }
                    }
                    let i = frames.idx(t, y, x, k);
                    frames.data[i] = c;
                }
            }
        }
    }
    let report = RenderReport {
        clipped_skin_fraction: if skin_px == 0 {
            0.0
        } else {
            clipped as f64 / skin_px as f64
        },
    };
    Ok((
        VideoClip {
            frames,
            fs: ppg.fs,
            source_ppg: ppg.clone(),
        },
        report,
    ))
}

/// Closed interval to sample from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn check(&self, name: &'static str) -> Result<(), RenderError> {
        if self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi {
            Ok(())
        } else {
            Err(RenderError::InvalidRange(name))
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }
}

/// Parameter intervals for [`make_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerRanges {
    pub hr_bpm: Range,
    pub hr_jitter: Range,
    pub systolic_width: Range,
    pub dicrotic_amp: Range,
    pub dicrotic_center: Range,
    pub illumination: Range,
    pub stationary_strength: Range,
    /// Scale applied to the default pulsatile colour direction.
    pub pulsatile_strength: Range,
    /// Per-channel perturbation of the skin colour before renormalising.
    pub skin_tint: Range,
    pub noise_sigma: Range,
    pub specular_amp: Range,
    pub specular_freq: Range,
    pub motion_amp: Range,
    pub motion_freq: Range,
    /// Skin patch side as a fraction of the frame side.
    pub skin_fraction: Range,
}

impl Default for SamplerRanges {
    fn default() -> Self {
        Self {
            hr_bpm: Range::new(50.0, 120.0),
            hr_jitter: Range::new(0.0, 0.05),
            systolic_width: Range::new(0.09, 0.11),
            dicrotic_amp: Range::new(0.25, 0.35),
            dicrotic_center: Range::new(0.46, 0.54),
            illumination: Range::new(0.8, 1.0),
            stationary_strength: Range::new(0.45, 0.6),
            pulsatile_strength: Range::new(0.6, 1.2),
            skin_tint: Range::new(-0.05, 0.05),
            noise_sigma: Range::new(0.002, 0.006),
            specular_amp: Range::new(0.0, 0.02),
            specular_freq: Range::new(0.1, 0.4),
            motion_amp: Range::new(0.0, 1.0),
            motion_freq: Range::new(0.1, 0.5),
            skin_fraction: Range::new(0.4, 0.7),
        }
    }
}

impl SamplerRanges {
    pub fn validate(&self) -> Result<(), RenderError> {
        let all = [
            (self.hr_bpm, "hr_bpm"),
            (self.hr_jitter, "hr_jitter"),
            (self.systolic_width, "systolic_width"),
            (self.dicrotic_amp, "dicrotic_amp"),
            (self.dicrotic_center, "dicrotic_center"),
            (self.illumination, "illumination"),
            (self.stationary_strength, "stationary_strength"),
            (self.pulsatile_strength, "pulsatile_strength"),
            (self.skin_tint, "skin_tint"),
            (self.noise_sigma, "noise_sigma"),
            (self.specular_amp, "specular_amp"),
            (self.specular_freq, "specular_freq"),
            (self.motion_amp, "motion_amp"),
            (self.motion_freq, "motion_freq"),
            (self.skin_fraction, "skin_fraction"),
        ];
        for (r, name) in all {
            r.check(name)?;
        }
        if self.skin_fraction.lo <= 0.0 || self.skin_fraction.hi > 1.0 {
            return Err(RenderError::InvalidRange("skin_fraction"));
        }
        if self.hr_bpm.lo < 30.0 || self.hr_bpm.hi > 240.0 {
            return Err(RenderError::InvalidRange("hr_bpm"));
        }
        if self.noise_sigma.lo < 0.0 || self.specular_amp.lo < 0.0 || self.motion_amp.lo < 0.0 {
            return Err(RenderError::InvalidRange("noise/specular/motion"));
        }
        Ok(())
    }
}

/// Everything drawn for one clip, kept for the dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipParams {
    pub index: usize,
    pub seed: u64,
    pub hr_bpm: f64,
    pub hr_jitter: f64,
    pub template: BeatTemplateParams,
    pub drm: DrmParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledClip {
    pub params: ClipParams,
    pub clip: VideoClip,
    pub report: RenderReport,
}

const MAX_TEMPLATE_DRAWS: usize = 64;

/// Draw the parameters of clip `index`; depends only on `(seed, index)`.
pub fn sample_clip_params(
    ranges: &SamplerRanges,
    height: usize,
    width: usize,
    seed: u64,
    index: usize,
) -> Result<ClipParams, RenderError> {
    ranges.validate()?;
    let clip_seed = seed::derive(seed, index as u64);
    let mut rng = seed::rng(clip_seed);
    let hr_bpm = ranges.hr_bpm.sample(&mut rng);
    let hr_jitter = ranges.hr_jitter.sample(&mut rng);
    let mut template = None;
    for _ in 0..MAX_TEMPLATE_DRAWS {
        let sw = ranges.systolic_width.sample(&mut rng);
        let t = BeatTemplateParams {
            systolic_width: sw,
            systolic_center: sw + 0.06,
            dicrotic_amp: ranges.dicrotic_amp.sample(&mut rng),
            dicrotic_center: ranges.dicrotic_center.sample(&mut rng),
            ..BeatTemplateParams::default()
        };
        if t.validate().is_ok() {
            template = Some(t);
            break;
        }
    }
    let template = template.ok_or(RenderError::InvalidRange("beat template"))?;

    let base = DrmParams::still(height, width);
    let tint = [
        ranges.skin_tint.sample(&mut rng),
        ranges.skin_tint.sample(&mut rng),
        ranges.skin_tint.sample(&mut rng),
    ];
    let skin_color = unit([
        base.skin_color[0] + tint[0],
        base.skin_color[1] + tint[1],
        base.skin_color[2] + tint[2],
    ]);
    let strength = ranges.pulsatile_strength.sample(&mut rng);
    let frac = ranges.skin_fraction.sample(&mut rng);
    let rh = ((height as f64 * frac) as usize).clamp(1, height);
    let rw = ((width as f64 * frac) as usize).clamp(1, width);
    let top = rng.gen_range(0..=height - rh);
    let left = rng.gen_range(0..=width - rw);
    let drm = DrmParams {
        illumination: ranges.illumination.sample(&mut rng),
        skin_color,
        stationary_strength: ranges.stationary_strength.sample(&mut rng),
        pulsatile_color: base.pulsatile_color.map(|c| c * strength),
        background_color: base.background_color,
        noise_sigma: ranges.noise_sigma.sample(&mut rng),
        specular_amp: ranges.specular_amp.sample(&mut rng),
        specular_freq: ranges.specular_freq.sample(&mut rng),
        motion_amp: ranges.motion_amp.sample(&mut rng),
        motion_freq: ranges.motion_freq.sample(&mut rng),
        skin_region: Rect {
            top,
            left,
            height: rh,
            width: rw,
        },
    };
    Ok(ClipParams {
        index,
        seed: clip_seed,
        hr_bpm,
        hr_jitter,
        template,
        drm,
    })
}

/// Render clip `params.index` from its drawn parameters.
pub fn render_sampled(
    params: ClipParams,
    height: usize,
    width: usize,
    fs: f64,
    duration_s: f64,
) -> Result<SampledClip, RenderError> {
    let ppg = synth_ppg(
        &params.template,
        params.hr_bpm,
        fs,
        duration_s,
        seed::derive(params.seed, 1),
        params.hr_jitter,
    )?;
    let (clip, report) = render_clip(&ppg, &params.drm, height, width, seed::derive(params.seed, 2))?;
    Ok(SampledClip {
        params,
        clip,
        report,
    })
}

/// Generate `n_clips` independent clips. Clip `i` depends only on
/// `(seed, i)`, so any evaluation order gives the same dataset.
pub fn make_dataset(
    n_clips: usize,
    ranges: &SamplerRanges,
    height: usize,
    width: usize,
    fs: f64,
    duration_s: f64,
    seed: u64,
) -> Result<Vec<SampledClip>, RenderError> {
    if n_clips == 0 {
        return Err(RenderError::InvalidParameter("n_clips must be at least 1"));
    }
    ranges.validate()?;
    (0..n_clips)
        .map(|i| {
            let params = sample_clip_params(ranges, height, width, seed, i)?;
            render_sampled(params, height, width, fs, duration_s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::second_difference;
    use alloc::vec;

    fn flat_ppg(values: Vec<f64>, fs: f64) -> PpgSignal {
        let mut p = PpgSignal::new(values, fs).unwrap();
        p.normalized = true;
        p
    }

    #[test]
    fn skin_pixel_follows_reflection_model() {
        let ppg = flat_ppg(vec![0.2, 0.2, 0.2, 0.0, 1.0], 30.0);
        let mut params = DrmParams::still(8, 8);
        params.skin_color = [1.0, 0.0, 0.0];
        params.stationary_strength = 0.5;
        params.pulsatile_color = [0.1, 0.1, 0.1];
        let (clip, report) = render_clip(&ppg, &params, 8, 8, 0).unwrap();
        assert!((clip.frames.at(0, 4, 4, 0) - 0.52).abs() < 1e-12);
        assert!(!report.saturation_warning());
        assert_eq!(clip.frames.frame(0), clip.frames.frame(1));
    }

    #[test]
    fn second_difference_identity() {
        let ppg = synth_ppg(&BeatTemplateParams::default(), 75.0, 30.0, 4.0, 3, 0.02).unwrap();
        let mut params = DrmParams::still(12, 12);
        params.illumination = 0.9;
        let (clip, report) = render_clip(&ppg, &params, 12, 12, 1).unwrap();
        assert_eq!(report.clipped_skin_fraction, 0.0);
        let sd_p = second_difference(&ppg.samples).unwrap();
        let f = &clip.frames;
        for t in 1..f.t - 1 {
            for k in 0..3 {
                let y = 6;
                let x = 6;
                let lhs = f.at(t + 1, y, x, k) - 2.0 * f.at(t, y, x, k) + f.at(t - 1, y, x, k);
                let rhs = params.illumination * params.pulsatile_color[k] * sd_p[t - 1];
                assert!((lhs - rhs).abs() <= 1e-10);
            }
        }
        // Background pixels are constant over time without noise.
        for t in 1..f.t {
            assert_eq!(f.at(t, 0, 0, 1), f.at(0, 0, 0, 1));
        }
    }

    #[test]
    fn noise_increases_background_roughness() {
        let ppg = synth_ppg(&BeatTemplateParams::default(), 60.0, 30.0, 2.0, 0, 0.0).unwrap();
        let mut last = -1.0;
        for sigma in [0.0, 0.01, 0.02, 0.04] {
            let mut params = DrmParams::still(8, 8);
            params.noise_sigma = sigma;
            let (clip, _) = render_clip(&ppg, &params, 8, 8, 5).unwrap();
            let f = &clip.frames;
            let mut acc = 0.0;
            let mut n = 0.0;
            for t in 1..f.t - 1 {
                for k in 0..3 {
                    let v = f.at(t + 1, 0, 0, k) - 2.0 * f.at(t, 0, 0, k) + f.at(t - 1, 0, 0, k);
                    acc += v * v;
                    n += 1.0;
                }
            }
            let msd = acc / n;
            assert!(msd > last);
            last = msd;
        }
    }

    #[test]
    fn errors() {
        let ppg = flat_ppg(vec![0.0, 1.0, 0.5], 30.0);
        let mut params = DrmParams::still(8, 8);
        params.skin_region.top = 6;
        assert!(matches!(
            render_clip(&ppg, &params, 8, 8, 0),
            Err(RenderError::RegionOutOfBounds { .. })
        ));
        assert_eq!(
            render_clip(&ppg, &DrmParams::still(3, 3), 3, 3, 0).unwrap_err(),
            RenderError::FrameTooSmall
        );
        let mut raw = ppg.clone();
        raw.normalized = false;
        assert_eq!(
            render_clip(&raw, &DrmParams::still(8, 8), 8, 8, 0).unwrap_err(),
            RenderError::UnnormalizedSignal
        );
    }

    #[test]
    fn saturation_is_flagged() {
        let ppg = flat_ppg(vec![0.0, 1.0, 0.5], 30.0);
        let mut params = DrmParams::still(8, 8);
        params.illumination = 3.0;
        let (clip, report) = render_clip(&ppg, &params, 8, 8, 0).unwrap();
        assert!(report.saturation_warning());
        assert!(clip.frames.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn motion_moves_the_patch() {
        let ppg = flat_ppg(vec![0.5; 16], 30.0);
        let mut params = DrmParams::still(16, 16);
        params.motion_amp = 2.0;
        params.motion_freq = 1.0;
        let (clip, _) = render_clip(&ppg, &params, 16, 16, 0).unwrap();
        assert_ne!(clip.frames.frame(0), clip.frames.frame(4));
    }

    #[test]
    fn dataset_contract() {
        let ranges = SamplerRanges::default();
        let ds = make_dataset(4, &ranges, 8, 8, 30.0, 2.0, 11).unwrap();
        assert_eq!(ds.len(), 4);
        for s in &ds {
            assert_eq!(s.clip.frames.t, 60);
            assert_eq!(s.clip.source_ppg.len(), 60);
            assert_eq!(s.clip.source_ppg.fs, s.clip.fs);
        }
        let again = make_dataset(4, &ranges, 8, 8, 30.0, 2.0, 11).unwrap();
        assert_eq!(ds, again);
        // Clip i is independent of how many clips are generated.
        let longer = make_dataset(5, &ranges, 8, 8, 30.0, 2.0, 11).unwrap();
        assert_eq!(ds[..], longer[..4]);
    }

    #[test]
    fn sampled_heart_rates_respect_range() {
        let ranges = SamplerRanges {
            hr_bpm: Range::new(50.0, 120.0),
            ..SamplerRanges::default()
        };
        for i in 0..100 {
            let p = sample_clip_params(&ranges, 36, 36, 99, i).unwrap();
            assert!(ranges.hr_bpm.contains(p.hr_bpm));
            assert!(p.drm.skin_region.fits(36, 36));
        }
        let bad = SamplerRanges {
            hr_bpm: Range::new(120.0, 50.0),
            ..SamplerRanges::default()
        };
        assert_eq!(
            make_dataset(1, &bad, 8, 8, 30.0, 1.0, 0).unwrap_err(),
            RenderError::InvalidRange("hr_bpm")
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn skin_second_difference_is_scaled_ppg(
                hr in 50.0f64..120.0,
                illum in 0.5f64..1.0,
                pc in prop::array::uniform3(0.0f64..0.05),
                seed in 0u64..1000,
            ) {
                let ppg = synth_ppg(&BeatTemplateParams::default(), hr, 30.0, 3.0, seed, 0.0).unwrap();
                let mut params = DrmParams::still(8, 8);
                params.illumination = illum;
                params.pulsatile_color = pc;
                let (clip, report) = render_clip(&ppg, &params, 8, 8, seed).unwrap();
                prop_assume!(report.clipped_skin_fraction == 0.0);
                let sd_p = second_difference(&ppg.samples).unwrap();
                let f = &clip.frames;
                let r = params.skin_region;
                for y in r.top..r.top + r.height {
                    for x in r.left..r.left + r.width {
                        for k in 0..3 {
                            for t in 1..f.t - 1 {
                                let lhs = f.at(t + 1, y, x, k) - 2.0 * f.at(t, y, x, k) + f.at(t - 1, y, x, k);
                                prop_assert!((lhs - illum * pc[k] * sd_p[t - 1]).abs() <= 1e-10);
                            }
                        }
                    }
                }
                for t in 1..f.t {
                    prop_assert_eq!(f.at(t, 0, 0, 1), f.at(0, 0, 0, 1));
                }
            }

            #[test]
            fn more_noise_is_rougher_background(lo in 0.0f64..0.03, step in 1e-4f64..0.03, seed in 0u64..1000) {
                let ppg = synth_ppg(&BeatTemplateParams::default(), 70.0, 30.0, 2.0, 0, 0.0).unwrap();
                let msd = |sigma: f64| {
                    let mut params = DrmParams::still(8, 8);
                    params.noise_sigma = sigma;
                    let (clip, _) = render_clip(&ppg, &params, 8, 8, seed).unwrap();
                    let f = &clip.frames;
                    let mut acc = 0.0;
                    for t in 1..f.t - 1 {
                        for (y, x) in [(0, 0), (0, 7), (7, 0), (7, 7)] {
                            for k in 0..3 {
                                let v = f.at(t + 1, y, x, k) - 2.0 * f.at(t, y, x, k) + f.at(t - 1, y, x, k);
                                acc += v * v;
                            }
                        }
                    }
                    acc
                };
                prop_assert!(msd(lo + step) > msd(lo));
            }
        }
    }
}
