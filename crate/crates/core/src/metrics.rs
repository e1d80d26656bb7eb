//! Heart rate, fiducial detection, LVET and agreement statistics.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use thiserror::Error;

use crate::signal::{mean_std, Fiducials};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("signal too short: need {needed} samples, got {got}")]
    SignalTooShort { needed: usize, got: usize },
    #[error("no spectral power in the heart-rate band")]
    NoPowerInBand,
    #[error("no beats found")]
    NoBeatsFound,
    #[error("no paired beats")]
    NoPairedBeats,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

type Result<T> = core::result::Result<T, MetricsError>;

pub const HR_BAND_HZ: (f64, f64) = (0.75, 4.0);

/// One-sided periodogram with density scaling and a rectangular window,
/// after removing the mean. Returns `(freqs, psd)` with `freqs[k] = k*fs/N`
/// for `k = 0..=N/2`.
pub fn periodogram(x: &[f64], fs: f64) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let half = n / 2;
    let mut freqs = Vec::with_capacity(half + 1);
    let mut psd = Vec::with_capacity(half + 1);
    for k in 0..=half {
        let (mut re, mut im) = (0.0, 0.0);
        for (j, v) in x.iter().enumerate() {
            // Reduce k*j mod n first so the angle stays accurate.
            let ang = -2.0 * PI * ((k * j) % n) as f64 / n as f64;
            re += (v - mean) * libm::cos(ang);
            im += (v - mean) * libm::sin(ang);
        }
        let mut p = (re * re + im * im) / (fs * n as f64);
        if k != 0 && !(n % 2 == 0 && k == half) {
            p *= 2.0;
        }
        freqs.push(k as f64 * fs / n as f64);
        psd.push(p);
    }
    (freqs, psd)
}

/// Dominant frequency in `band` (Hz), in beats per minute.
pub fn estimate_hr_band(x: &[f64], fs: f64, band: (f64, f64)) -> Result<f64> {
    estimate_hr_of_difference(x, fs, band, 0)
}

/// HR of the pulse whose `order`-th backward difference is `x`.
///
/// Differencing scales power at frequency f by `4 sin^2(pi f / fs)` per
/// order, which pushes the periodogram peak of p' or p'' onto harmonics.
/// Each bin is divided by that gain before the argmax, so the decision is
/// made on the spectrum of the pulse itself.
pub fn estimate_hr_of_difference(x: &[f64], fs: f64, band: (f64, f64), order: u32) -> Result<f64> {
    if !(fs > 8.0) {
        return Err(MetricsError::InvalidArgument("sampling rate must exceed 8 Hz"));
    }
    let needed = libm::ceil(4.0 * fs) as usize;
    if x.len() < needed {
        return Err(MetricsError::SignalTooShort {
            needed,
            got: x.len(),
        });
    }
    let (freqs, psd) = periodogram(x, fs);
    let mut best: Option<(usize, f64)> = None;
    let mut total = 0.0;
    for (k, (&f, &p)) in freqs.iter().zip(&psd).enumerate() {
        if f < band.0 || f > band.1 {
            continue;
        }
        total += p;
        let gain = 4.0 * libm::pow(libm::sin(PI * f / fs), 2.0);
        let p = p / libm::pow(gain, order as f64);
        if best.map_or(true, |(_, bp)| p > bp) {
            best = Some((k, p));
        }
    }
    match best {
        Some((k, _)) if total >= 1e-12 => Ok(60.0 * freqs[k]),
        _ => Err(MetricsError::NoPowerInBand),
    }
}

pub fn estimate_hr(x: &[f64], fs: f64) -> Result<f64> {
    estimate_hr_band(x, fs, HR_BAND_HZ)
}

/// Width of one periodogram bin in BPM.
pub fn bin_width_bpm(n: usize, fs: f64) -> f64 {
    60.0 * fs / n as f64
}

/// Local maxima; a flat top reports its middle sample (left of centre for
/// even widths). Endpoints are never peaks.
pub fn local_maxima(x: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let n = x.len();
    let mut i = 1;
    while i + 1 < n {
        if x[i - 1] < x[i] {
            let mut ahead = i + 1;
            while ahead + 1 < n && x[ahead] == x[i] {
                ahead += 1;
            }
            if x[ahead] < x[i] {
                out.push((i + ahead - 1) / 2);
                i = ahead;
            }
        }
        i += 1;
    }
    out
}

/// Drop peaks closer than `distance` samples to a taller kept peak, visiting
/// peaks from tallest down (ties resolved toward the later peak).
pub fn select_by_distance(x: &[f64], peaks: &[usize], distance: usize) -> Vec<usize> {
    let mut keep = vec![true; peaks.len()];
    let mut order: Vec<usize> = (0..peaks.len()).collect();
    // Stable sort on height keeps index order among ties; visit reversed.
    order.sort_by(|&a, &b| x[peaks[a]].partial_cmp(&x[peaks[b]]).unwrap());
    for &i in order.iter().rev() {
        if !keep[i] {
            continue;
        }
        let mut j = i;
        while j > 0 && peaks[i] - peaks[j - 1] < distance {
            j -= 1;
            keep[j] = false;
        }
        let mut j = i + 1;
        while j < peaks.len() && peaks[j] - peaks[i] < distance {
            keep[j] = false;
            j += 1;
        }
    }
    peaks.iter().zip(keep).filter(|(_, k)| *k).map(|(&p, _)| p).collect()
}

/// Topographic prominence of each peak over the whole signal.
///
/// Each side is scanned until a strictly higher sample. A side that runs off
/// the end of the signal instead does not bound the base unless both do, so
/// a beat cut by the signal edge is judged by its complete side.
pub fn prominences(x: &[f64], peaks: &[usize]) -> Vec<f64> {
    peaks
        .iter()
        .map(|&p| {
            let h = x[p];
            let (mut left_min, mut left_closed) = (h, false);
            let mut i = p;
            while i > 0 {
                i -= 1;
                if x[i] > h {
                    left_closed = true;
                    break;
                }
                left_min = left_min.min(x[i]);
            }
            let (mut right_min, mut right_closed) = (h, false);
            let mut i = p;
            while i + 1 < x.len() {
                i += 1;
                if x[i] > h {
                    right_closed = true;
                    break;
                }
                right_min = right_min.min(x[i]);
            }
            let base = match (left_closed, right_closed) {
                (true, false) => left_min,
                (false, true) => right_min,
                _ => left_min.max(right_min),
            };
            h - base
        })
        .collect()
}

/// Knobs for [`detect_fiducials`]. Fractions of the beat period unless noted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiducialConfig {
    /// Minimum spacing between beat anchors.
    pub anchor_distance: f64,
    /// Anchor prominence as a fraction of the largest anchor prominence.
    pub anchor_prominence: f64,
    /// Minimum gap between a diastolic point and its notch.
    pub notch_gap: f64,
    /// Notch prominence as a fraction of its anchor's prominence.
    pub notch_prominence: f64,
}

impl Default for FiducialConfig {
    fn default() -> Self {
        Self {
            anchor_distance: 0.5,
            anchor_prominence: 0.3,
            notch_gap: 0.08,
            notch_prominence: 0.1,
        }
    }
}

/// Running sum of the mean-removed signal, which undoes one difference
/// without introducing a ramp.
fn cumsum_centered(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let mut acc = 0.0;
    x.iter()
        .map(|v| {
            acc += v - mean;
            acc
        })
        .collect()
}

/// Diastolic points and dicrotic notches from a second-derivative signal
/// whose sample `i` is centred on time `i`.
///
/// Without a hint the beat rate is estimated from `sd` summed twice back to
/// a pulse-like waveform, since the second derivative's own spectrum usually
/// peaks at a harmonic.
pub fn detect_fiducials(sd: &[f64], fs: f64, hr_hint_bpm: Option<f64>, cfg: &FiducialConfig) -> Result<Fiducials> {
    if sd.len() < 3 {
        return Err(MetricsError::SignalTooShort { needed: 3, got: sd.len() });
    }
    let (_, std) = mean_std(sd);
    if !(std > 1e-12) {
        return Err(MetricsError::NoBeatsFound);
    }
    let hr = match hr_hint_bpm {
        Some(h) if h > 0.0 => h,
        Some(_) => return Err(MetricsError::InvalidArgument("heart-rate hint must be positive")),
        None => {
            let v = cumsum_centered(sd);
            estimate_hr(&cumsum_centered(&v), fs).map_err(|_| MetricsError::NoBeatsFound)?
        }
    };
    let period = fs * 60.0 / hr;
    if (sd.len() as f64) < period {
        return Err(MetricsError::SignalTooShort {
            needed: libm::ceil(period) as usize,
            got: sd.len(),
        });
    }
    let all = local_maxima(sd);
    let all_prom = prominences(sd, &all);
    let distance = (cfg.anchor_distance * period).max(1.0) as usize;
    let cand = select_by_distance(sd, &all, distance);
    let cand_prom = prominences(sd, &cand);
    let max_prom = cand_prom.iter().cloned().fold(0.0, f64::max);
    if max_prom <= 0.0 {
        return Err(MetricsError::NoBeatsFound);
    }
    let anchors: Vec<(usize, f64)> = cand
        .iter()
        .zip(&cand_prom)
        .filter(|(_, &p)| p >= cfg.anchor_prominence * max_prom)
        .map(|(&i, &p)| (i, p))
        .collect();
    let mut dia = Vec::new();
    let mut notch = Vec::new();
    for (k, &(d, prom)) in anchors.iter().enumerate() {
        let next = anchors.get(k + 1).map_or(sd.len(), |a| a.0);
        let gap = d as f64 + cfg.notch_gap * period;
        let found = all.iter().zip(&all_prom).find(|(&q, &qp)| {
            q > d && q as f64 >= gap && q < next && sd[q] > 0.0 && qp >= cfg.notch_prominence * prom
        });
        if let Some((&q, _)) = found {
            dia.push(d);
            notch.push(q);
        }
    }
    if dia.is_empty() {
        return Err(MetricsError::NoBeatsFound);
    }
    Fiducials::from_indices(dia, notch, fs).map_err(|_| MetricsError::NoBeatsFound)
}

/// Mean LVET of the beats whose diastolic point falls in one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LvetWindow {
    pub index: usize,
    pub start_s: f64,
    pub mean_ms: f64,
    pub beats: usize,
}

/// Per-beat LVET averaged within consecutive non-overlapping windows of
/// `window_s` seconds; windows without beats are omitted.
pub fn lvet_series(fid: &Fiducials, fs: f64, window_s: f64) -> Result<Vec<LvetWindow>> {
    if fid.is_empty() {
        return Err(MetricsError::NoPairedBeats);
    }
    if !(window_s > 0.0 && fs > 0.0) {
        return Err(MetricsError::InvalidArgument("window and sampling rate must be positive"));
    }
    let mut out: Vec<LvetWindow> = Vec::new();
    for (&d, &l) in fid.diastolic_idx.iter().zip(&fid.lvet_ms) {
        let w = libm::floor(d as f64 / fs / window_s) as usize;
        match out.last_mut() {
            Some(last) if last.index == w => {
                last.mean_ms += l;
                last.beats += 1;
            }
            _ => out.push(LvetWindow {
                index: w,
                start_s: w as f64 * window_s,
                mean_ms: l,
                beats: 1,
            }),
        }
    }
    for w in &mut out {
        w.mean_ms /= w.beats as f64;
    }
    Ok(out)
}

/// Mean and population standard deviation of absolute errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mae_summary(pred: &[f64], truth: &[f64]) -> Result<MaeSummary> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::InvalidArgument("no values"));
    }
    let errs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    let (mean, std) = mean_std(&errs);
    Ok(MaeSummary {
        mean,
        std,
        n: errs.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlandAltman {
    pub mean_diff: f64,
    pub std_diff: f64,
    pub lower_limit: f64,
    pub upper_limit: f64,
    /// `(truth, pred - truth)` pairs.
    pub points: Vec<(f64, f64)>,
}

pub fn bland_altman(pred: &[f64], truth: &[f64]) -> Result<BlandAltman> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(MetricsError::InvalidArgument("need at least two pairs"));
    }
    let d: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let (mean, std) = mean_std(&d);
    Ok(BlandAltman {
        mean_diff: mean,
        std_diff: std,
        lower_limit: mean - 1.96 * std,
        upper_limit: mean + 1.96 * std,
        points: truth.iter().cloned().zip(d).collect(),
    })
}
