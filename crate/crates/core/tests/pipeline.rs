//! Render -> preprocess -> train -> evaluate through the public API only.

use multideriv_core::eval::{evaluate, EvalConfig, Source};
use multideriv_core::metrics::{bin_width_bpm, estimate_hr};
use multideriv_core::model::{build_model, Arch, ModelConfig};
use multideriv_core::preprocess::{crop_downsample, ClipWindows, WindowConfig};
use multideriv_core::render::{make_dataset, SamplerRanges};
use multideriv_core::train::{train, TrainConfig, WindowedDataset};

fn windows(stride: usize) -> Vec<ClipWindows> {
    let data = make_dataset(4, &SamplerRanges::default(), 16, 16, 30.0, 6.0, 11).unwrap();
    data.iter()
        .map(|s| {
            let small = crop_downsample(&s.clip, 8, 8).unwrap();
            ClipWindows::from_clip(&small, WindowConfig { stride, ..Default::default() }).unwrap()
        })
        .collect()
}

#[test]
fn truth_scores_zero_and_hr_matches_the_pulse() {
    let data = make_dataset(4, &SamplerRanges::default(), 16, 16, 30.0, 6.0, 11).unwrap();
    let eval = windows(30);
    let r = evaluate(Source::Truth, &eval, &EvalConfig::default()).unwrap();
    assert_eq!(r.hr_mae.unwrap().mean, 0.0);
    assert_eq!(r.lvet_mae.unwrap().mean, 0.0);
    assert_eq!(r.failed_clips, 0);
    // HR read off the stitched, standardized p' windows agrees with the
    // plain estimate on the PPG itself over the same span.
    let bin = bin_width_bpm(150, 30.0);
    for (c, s) in r.clips.iter().zip(&data) {
        let direct = estimate_hr(&s.clip.source_ppg.samples[..150], 30.0).unwrap();
        let hr = c.hr_true.unwrap();
        assert!((hr - direct).abs() <= bin, "{hr} vs {direct}");
    }
}

#[test]
fn trained_model_reports_are_finite_and_reproducible() {
    let cfg = ModelConfig {
        filters: (2, 2),
        gru_units: 3,
        ..ModelConfig::sd_optimized(Arch::Attention)
    };
    let run = || {
        let model = build_model(&cfg, 8, 30, 3).unwrap();
        let ds = WindowedDataset::new(windows(15));
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            lr: 3e-3,
            seed: 5,
        };
        let out = train(model, &ds, &tc).unwrap();
        assert_eq!(out.history.len(), 2);
        evaluate(Source::Model(&out.model), &windows(30), &EvalConfig::default()).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.clips.len(), 4);
    for s in [a.hr_mae, a.lvet_mae].into_iter().flatten() {
        assert!(s.mean.is_finite() && s.mean >= 0.0 && s.std >= 0.0);
    }
    if let Some(ba) = a.hr_bland_altman {
        assert!(ba.lower_limit <= ba.mean_diff && ba.mean_diff <= ba.upper_limit);
    }
}
