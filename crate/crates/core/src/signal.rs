//! Pulse waveforms and their discrete derivatives.
//!
//! The generator builds each beat from two one-sided pulses (systolic and
//! dicrotic wave) over a constant baseline. Each pulse starts with a slope
//! discontinuity, so the diastolic point and the dicrotic notch are sharp
//! minima that sit on the same sample as the corresponding second-difference
//! maximum. Ground-truth fiducials are found by scanning the rendered clean
//! waveform, never by the detector in [`crate::metrics`].

use alloc::vec::Vec;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SignalError {
    #[error("sequence too short: need at least {needed} samples, got {got}")]
    SequenceTooShort { needed: usize, got: usize },
    #[error("invalid beat template: {0}")]
    InvalidTemplate(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("input is constant (standard deviation below 1e-12)")]
    ConstantInput,
    #[error("invalid fiducials: {0}")]
    InvalidFiducials(&'static str),
}

/// Per-beat fiducial points, as sample indices into the owning signal.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Fiducials {
    pub diastolic_idx: Vec<usize>,
    pub notch_idx: Vec<usize>,
    pub lvet_ms: Vec<f64>,
}

impl Fiducials {
    /// Pair diastolic points with notches and derive the LVET of each beat.
    pub fn from_indices(
        diastolic_idx: Vec<usize>,
        notch_idx: Vec<usize>,
        fs: f64,
    ) -> Result<Self, SignalError> {
        if diastolic_idx.len() != notch_idx.len() {
            return Err(SignalError::InvalidFiducials("unpaired indices"));
        }
        let lvet_ms = diastolic_idx
            .iter()
            .zip(&notch_idx)
            .map(|(&d, &n)| lvet_ms(d, n, fs))
            .collect();
        let fid = Self {
            diastolic_idx,
            notch_idx,
            lvet_ms,
        };
        fid.validate()?;
        Ok(fid)
    }

    pub fn len(&self) -> usize {
        self.diastolic_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diastolic_idx.is_empty()
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.notch_idx.len() != self.diastolic_idx.len()
            || self.lvet_ms.len() != self.diastolic_idx.len()
        {
            return Err(SignalError::InvalidFiducials("length mismatch"));
        }
        let increasing = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&self.diastolic_idx) || !increasing(&self.notch_idx) {
            return Err(SignalError::InvalidFiducials("indices not strictly increasing"));
        }
        if self
            .diastolic_idx
            .iter()
            .zip(&self.notch_idx)
            .any(|(d, n)| n <= d)
        {
            return Err(SignalError::InvalidFiducials("notch not after diastolic point"));
        }
        Ok(())
    }
}

/// Interval between two sample indices in milliseconds.
pub fn lvet_ms(diastolic: usize, notch: usize, fs: f64) -> f64 {
    (notch as f64 - diastolic as f64) / fs * 1000.0
}

/// A uniformly sampled pulse waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct PpgSignal {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub fiducials: Option<Fiducials>,
    /// Set when `samples` spans exactly [0, 1].
    pub normalized: bool,
}

impl PpgSignal {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self, SignalError> {
        if samples.len() < 2 {
            return Err(SignalError::SequenceTooShort {
                needed: 2,
                got: samples.len(),
            });
        }
        if !(fs > 0.0) || !fs.is_finite() {
            return Err(SignalError::InvalidParameter("sampling rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(SignalError::InvalidParameter("samples must be finite"));
        }
        Ok(Self {
            samples,
            fs,
            fiducials: None,
            normalized: false,
        })
    }

    /// Resample irregularly timed readings onto a uniform grid at `fs` by
    /// linear interpolation. Times must be strictly increasing.
    pub fn from_timed(times: &[f64], values: &[f64], fs: f64) -> Result<Self, SignalError> {
        if times.len() != values.len() {
            return Err(SignalError::InvalidParameter("time and value columns differ in length"));
        }
        if times.len() < 2 {
            return Err(SignalError::SequenceTooShort {
                needed: 2,
                got: times.len(),
            });
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SignalError::InvalidParameter("time column must be strictly increasing"));
        }
        if !(fs > 0.0) {
            return Err(SignalError::InvalidParameter("sampling rate must be positive"));
        }
        let t0 = times[0];
        let span = times[times.len() - 1] - t0;
        let n = libm::floor(span * fs + 1e-9) as usize + 1;
        let mut out = Vec::with_capacity(n);
        let mut j = 0;
        for i in 0..n {
            let t = t0 + i as f64 / fs;
            while j + 2 < times.len() && times[j + 1] < t {
                j += 1;
            }
            let (ta, tb) = (times[j], times[j + 1]);
            let frac = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
            out.push(values[j] + frac * (values[j + 1] - values[j]));
        }
        Self::new(out, fs)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    /// Rescale to span [0, 1]. Fails on a constant signal.
    pub fn normalize(&mut self) -> Result<(), SignalError> {
        let (lo, hi) = min_max(&self.samples);
        if hi - lo < 1e-12 {
            return Err(SignalError::ConstantInput);
        }
        let scale = 1.0 / (hi - lo);
        for v in &mut self.samples {
            *v = (*v - lo) * scale;
        }
        self.normalized = true;
        Ok(())
    }
}

pub(crate) fn min_max(x: &[f64]) -> (f64, f64) {
    x.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// `out[t] = p[t + 1] - p[t]`; one sample shorter than the input.
pub fn first_difference(p: &[f64]) -> Result<Vec<f64>, SignalError> {
    if p.len() < 2 {
        return Err(SignalError::SequenceTooShort {
            needed: 2,
            got: p.len(),
        });
    }
    Ok(p.windows(2).map(|w| w[1] - w[0]).collect())
}

/// First difference applied twice; two samples shorter than the input.
pub fn second_difference(p: &[f64]) -> Result<Vec<f64>, SignalError> {
    if p.len() < 3 {
        return Err(SignalError::SequenceTooShort {
            needed: 3,
            got: p.len(),
        });
    }
    first_difference(&first_difference(p)?)
}

/// Second difference re-indexed so that `out[i]` is centred on sample `i`.
/// The two end samples, where no centred value exists, are zero.
pub fn centered_second_difference(p: &[f64]) -> Result<Vec<f64>, SignalError> {
    let sd = second_difference(p)?;
    let mut out = Vec::with_capacity(p.len());
    out.push(0.0);
    out.extend_from_slice(&sd);
    out.push(0.0);
    Ok(out)
}

/// Zero-mean, unit (population) standard deviation.
pub fn standardize(x: &[f64]) -> Result<Vec<f64>, SignalError> {
    if x.len() < 2 {
        return Err(SignalError::SequenceTooShort {
            needed: 2,
            got: x.len(),
        });
    }
    let (mean, std) = mean_std(x);
    if std < 1e-12 {
        return Err(SignalError::ConstantInput);
    }
    Ok(x.iter().map(|v| (v - mean) / std).collect())
}

/// Mean and population standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Shape of one beat; centres and widths are fractions of the beat period.
///
/// Each wave is a one-sided pulse `(x/w) exp(1 - x/w)` for `x > 0` that
/// starts at `center - width` and peaks (value 1) at `center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeatTemplateParams {
    pub systolic_amp: f64,
    pub systolic_center: f64,
    pub systolic_width: f64,
    pub dicrotic_amp: f64,
    pub dicrotic_center: f64,
    pub dicrotic_width: f64,
    pub baseline: f64,
}

impl Default for BeatTemplateParams {
    fn default() -> Self {
        Self {
            systolic_amp: 1.0,
            systolic_center: 0.16,
            systolic_width: 0.10,
            dicrotic_amp: 0.30,
            dicrotic_center: 0.50,
            dicrotic_width: 0.10,
            baseline: 0.0,
        }
    }
}

/// One-sided pulse with unit peak at `x = width`.
fn pulse(x: f64, width: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        let u = x / width;
        u * libm::exp(1.0 - u)
    }
}

fn pulse_slope(x: f64, width: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        let u = x / width;
        (1.0 - u) / width * libm::exp(1.0 - u)
    }
}

impl BeatTemplateParams {
    pub fn systolic_onset(&self) -> f64 {
        self.systolic_center - self.systolic_width
    }

    pub fn dicrotic_onset(&self) -> f64 {
        self.dicrotic_center - self.dicrotic_width
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        let finite = [
            self.systolic_amp,
            self.systolic_center,
            self.systolic_width,
            self.dicrotic_amp,
            self.dicrotic_center,
            self.dicrotic_width,
            self.baseline,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(SignalError::InvalidTemplate("non-finite parameter"));
        }
        if !(0.0 < self.systolic_center
            && self.systolic_center < self.dicrotic_center
            && self.dicrotic_center < 1.0)
        {
            return Err(SignalError::InvalidTemplate(
                "centres must satisfy 0 < systolic < dicrotic < 1",
            ));
        }
        if !(self.systolic_width > 0.0 && self.dicrotic_width > 0.0) {
            return Err(SignalError::InvalidTemplate("widths must be positive"));
        }
        if !(0.0 < self.dicrotic_amp && self.dicrotic_amp < self.systolic_amp) {
            return Err(SignalError::InvalidTemplate(
                "amplitudes must satisfy 0 < dicrotic < systolic",
            ));
        }
        if self.systolic_onset() < 0.0 {
            return Err(SignalError::InvalidTemplate("systolic wave starts before the beat"));
        }
        if self.dicrotic_onset() <= self.systolic_center {
            return Err(SignalError::InvalidTemplate(
                "dicrotic wave must start after the systolic peak",
            ));
        }
        // A notch exists only if the dicrotic upstroke beats the systolic decay.
        let decay = pulse_slope(
            self.dicrotic_onset() - self.systolic_onset(),
            self.systolic_width,
        );
        let rise = self.dicrotic_amp * core::f64::consts::E / self.dicrotic_width;
        if rise + self.systolic_amp * decay <= 0.0 {
            return Err(SignalError::InvalidTemplate(
                "dicrotic wave too weak to form a notch",
            ));
        }
        Ok(())
    }

    /// Template value at time `t` (seconds) for a beat starting at `start`
    /// with period `period`.
    fn eval(&self, t: f64, start: f64, period: f64) -> f64 {
        self.systolic_amp
            * pulse(
                t - start - self.systolic_onset() * period,
                self.systolic_width * period,
            )
            + self.dicrotic_amp
                * pulse(
                    t - start - self.dicrotic_onset() * period,
                    self.dicrotic_width * period,
                )
    }
}

/// Pulse tails are dropped beyond this many widths past onset (< 1e-20).
const TAIL_WIDTHS: f64 = 60.0;
const LEAD_BEATS: usize = 3;

/// Render a synthetic, amplitude-normalised pulse waveform with ground-truth
/// fiducials. Beat 0 starts at t = 0; each beat period is drawn uniformly
/// within `±hr_jitter` of `60 / hr_bpm`.
pub fn synth_ppg(
    template: &BeatTemplateParams,
    hr_bpm: f64,
    fs: f64,
    duration_s: f64,
    seed: u64,
    hr_jitter: f64,
) -> Result<PpgSignal, SignalError> {
    template.validate()?;
    if !(30.0..=240.0).contains(&hr_bpm) {
        return Err(SignalError::InvalidParameter("heart rate must lie in [30, 240] BPM"));
    }
    if !(fs >= 20.0) || !fs.is_finite() {
        return Err(SignalError::InvalidParameter("sampling rate must be at least 20 Hz"));
    }
    if !(duration_s * fs >= 3.0) {
        return Err(SignalError::InvalidParameter("duration too short for 3 samples"));
    }
    if !(0.0..0.5).contains(&hr_jitter) {
        return Err(SignalError::InvalidParameter("jitter must lie in [0, 0.5)"));
    }
    let n = libm::round(duration_s * fs) as usize;
    let base_period = 60.0 / hr_bpm;
    let mut rng = crate::seed::rng(seed);
    let mut draw = || {
        if hr_jitter > 0.0 {
            base_period * (1.0 + hr_jitter * rng.gen_range(-1.0..=1.0))
        } else {
            base_period
        }
    };

    // Beats before t = 0 only contribute decaying tails.
    let mut lead: Vec<(f64, f64)> = Vec::with_capacity(LEAD_BEATS);
    let mut start = 0.0;
    for _ in 0..LEAD_BEATS {
        let period = draw();
        start -= period;
        lead.push((start, period));
    }
    lead.reverse();
    let mut beats = lead;
    let first_real = beats.len();
    let end = n as f64 / fs;
    let mut start = 0.0;
    while start < end {
        let period = draw();
        beats.push((start, period));
        start += period;
    }

    let mut samples = alloc::vec![template.baseline; n];
    let widest = template.systolic_width.max(template.dicrotic_width);
    for &(start, period) in &beats {
        let reach = start + (template.dicrotic_onset() + TAIL_WIDTHS * widest) * period;
        let lo = libm::ceil(start * fs).max(0.0) as usize;
        let hi = (libm::ceil(reach * fs).max(0.0) as usize).min(n);
        for (i, s) in samples.iter_mut().enumerate().take(hi).skip(lo) {
            *s += template.eval(i as f64 / fs, start, period);
        }
    }

    let mut sig = PpgSignal::new(samples, fs)?;
    sig.normalize()?;

    let mut diastolic = Vec::new();
    let mut notch = Vec::new();
    for k in first_real..beats.len() {
        let (start, period) = beats[k];
        let (prev_start, prev_period) = beats[k - 1];
        let a = libm::ceil((prev_start + template.dicrotic_center * prev_period) * fs).max(0.0);
        let b = libm::floor((start + template.systolic_center * period) * fs);
        let c = libm::floor((start + template.dicrotic_center * period) * fs);
        if b < a || c >= (n - 1) as f64 {
            continue;
        }
        let (a, b, c) = (a as usize, b as usize, c as usize);
        let d = argmin_range(&sig.samples, a, b);
        let m = argmin_range(&sig.samples, b, c);
        // Minima on a search boundary are truncated by the record edges.
        if d == 0 || d == a && a > 0 || d == b || m == b || m == c {
            continue;
        }
        diastolic.push(d);
        notch.push(m);
    }
    sig.fiducials = Some(Fiducials::from_indices(diastolic, notch, fs)?);
    Ok(sig)
}

/// First index of the minimum of `x[lo..=hi]`.
pub(crate) fn argmin_range(x: &[f64], lo: usize, hi: usize) -> usize {
    let mut best = lo;
    for i in lo..=hi {
        if x[i] < x[best] {
            best = i;
        }
    }
    best
}
