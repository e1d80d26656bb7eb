//! Subcommand implementations. Each `cmd_*` wraps an in-memory stage with
//! file IO so the stages can also be driven directly (tests, benchmarks).

use std::path::{Path, PathBuf};

use multideriv_core::eval::{evaluate, EvalReport, Source};
use multideriv_core::metrics::{BlandAltman, LvetWindow, MaeSummary};
use multideriv_core::model::{ablation_configs, build_model, Arch, Model, ModelConfig};
use multideriv_core::preprocess::{crop_downsample, ClipWindows};
use multideriv_core::render::{make_dataset, SampledClip, VideoClip};
use multideriv_core::seed;
use multideriv_core::train::{train_with, TrainOutcome, WindowedDataset};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{arch_name, stream, RunConfig};
use crate::error::{HarnessError, Result};
use crate::formats::{self, LossRow};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Template {
    pub systolic_amp: f64,
    pub systolic_center: f64,
    pub systolic_width: f64,
    pub dicrotic_amp: f64,
    pub dicrotic_center: f64,
    pub dicrotic_width: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Optics {
    pub illumination: f64,
    pub skin_color: [f64; 3],
    pub stationary_strength: f64,
    pub pulsatile_color: [f64; 3],
    pub background_color: [f64; 3],
    pub noise_sigma: f64,
    pub specular_amp: f64,
    pub specular_freq: f64,
    pub motion_amp: f64,
    pub motion_freq: f64,
    /// `[top, left, height, width]`.
    pub skin_region: [usize; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestClip {
    pub id: String,
    pub index: usize,
    pub seed: u64,
    pub tensor: String,
    pub ppg: String,
    pub fiducials: String,
    pub hr_bpm: f64,
    pub hr_jitter: f64,
    pub template: Template,
    pub optics: Optics,
    pub clipped_skin_fraction: f64,
    pub saturation_warning: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub fps: f64,
    pub duration_s: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub clips: Vec<ManifestClip>,
}

fn manifest_clip(s: &SampledClip) -> ManifestClip {
    let p = &s.params;
    let t = &p.template;
    let d = &p.drm;
    let id = format!("clip_{:05}", p.index);
    ManifestClip {
        tensor: format!("{id}.bin"),
        ppg: format!("{id}_ppg.csv"),
        fiducials: format!("{id}_fiducials.csv"),
        id,
        index: p.index,
        seed: p.seed,
        hr_bpm: p.hr_bpm,
        hr_jitter: p.hr_jitter,
        template: Template {
            systolic_amp: t.systolic_amp,
            systolic_center: t.systolic_center,
            systolic_width: t.systolic_width,
            dicrotic_amp: t.dicrotic_amp,
            dicrotic_center: t.dicrotic_center,
            dicrotic_width: t.dicrotic_width,
            baseline: t.baseline,
        },
        optics: Optics {
            illumination: d.illumination,
            skin_color: d.skin_color,
            stationary_strength: d.stationary_strength,
            pulsatile_color: d.pulsatile_color,
            background_color: d.background_color,
            noise_sigma: d.noise_sigma,
            specular_amp: d.specular_amp,
            specular_freq: d.specular_freq,
            motion_amp: d.motion_amp,
            motion_freq: d.motion_freq,
            skin_region: [d.skin_region.top, d.skin_region.left, d.skin_region.height, d.skin_region.width],
        },
        clipped_skin_fraction: s.report.clipped_skin_fraction,
        saturation_warning: s.report.saturation_warning(),
    }
}

/// Render the configured dataset in memory.
pub fn generate(cfg: &RunConfig) -> Result<Vec<SampledClip>> {
    cfg.validate()?;
    let d = &cfg.data;
    Ok(make_dataset(
        d.clips,
        &d.ranges,
        d.size,
        d.size,
        d.fps,
        d.duration_s,
        cfg.stage_seed(stream::DATA),
    )?)
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Manifest> {
    let clips = generate(cfg)?;
    let dir = cfg.data_dir();
    let dims = clips[0].clip.frames.dims();
    let mut entries = Vec::with_capacity(clips.len());
    for s in &clips {
        let e = manifest_clip(s);
        formats::write_atomic(&dir.join(&e.tensor), &formats::encode_clip(&s.clip.frames, s.clip.fs))?;
        formats::write_ppg(&dir.join(&e.ppg), &s.clip.source_ppg)?;
        let fid = s.clip.source_ppg.fiducials.clone().unwrap_or_default();
        formats::write_fiducials(&dir.join(&e.fiducials), &fid)?;
        entries.push(e);
    }
    let manifest = Manifest {
        seed: cfg.seed,
        fps: cfg.data.fps,
        duration_s: cfg.data.duration_s,
        frames: dims[0],
        height: dims[1],
        width: dims[2],
        channels: dims[3],
        clips: entries,
    };
    formats::write_json(&dir.join("manifest.json"), &manifest)?;
    formats::write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<VideoClip>)> {
    let manifest: Manifest = formats::read_json(&dir.join("manifest.json"))?;
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for e in &manifest.clips {
        let path = dir.join(&e.tensor);
        let (frames, fs) = formats::decode_clip(&path, &formats::read(&path)?)?;
        let ppg = formats::read_ppg(&dir.join(&e.ppg), fs)?;
        if ppg.len() != frames.t {
            return Err(HarnessError::format(&path, "PPG length differs from frame count"));
        }
        clips.push(VideoClip {
            frames,
            fs,
            source_ppg: ppg,
        });
    }
    Ok((manifest, clips))
}

/// Seeded clip-level split; both halves come back sorted.
pub fn split_indices(n: usize, test_fraction: f64, seed_: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed_));
    let n_test = ((n as f64 * test_fraction).round() as usize).min(n.saturating_sub(1));
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// Clips resized to the model input and split into (train, test).
pub fn prepare(cfg: &RunConfig, clips: &[VideoClip]) -> Result<(Vec<VideoClip>, Vec<VideoClip>)> {
    let resized = clips
        .iter()
        .map(|c| {
            if c.frames.h == cfg.input_size && c.frames.w == cfg.input_size {
                Ok(c.clone())
            } else {
                crop_downsample(c, cfg.input_size, cfg.input_size)
            }
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (tr, te) = split_indices(resized.len(), cfg.test_fraction, cfg.stage_seed(stream::SPLIT));
    Ok((
        tr.iter().map(|&i| resized[i].clone()).collect(),
        te.iter().map(|&i| resized[i].clone()).collect(),
    ))
}

pub fn train_model(
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    clips: &[VideoClip],
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let windows = clips
        .iter()
        .map(|c| ClipWindows::from_clip(c, cfg.window))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let data = WindowedDataset::new(windows);
    let model = build_model(model_cfg, cfg.input_size, cfg.window.t, cfg.stage_seed(stream::INIT))?;
    Ok(train_with(model, &data, &cfg.train_config(), on_epoch)?)
}

pub fn eval_windows(cfg: &RunConfig, clips: &[VideoClip]) -> Result<Vec<ClipWindows>> {
    Ok(clips
        .iter()
        .map(|c| ClipWindows::from_clip(c, cfg.eval_window()))
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

pub fn evaluate_clips(cfg: &RunConfig, src: Source, clips: &[VideoClip]) -> Result<EvalReport> {
    Ok(evaluate(src, &eval_windows(cfg, clips)?, &cfg.eval)?)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl From<MaeSummary> for Summary {
    fn from(m: MaeSummary) -> Self {
        Self {
            mean: m.mean,
            std: m.std,
            n: m.n,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Agreement {
    pub mean_diff: f64,
    pub std_diff: f64,
    pub lower_limit: f64,
    pub upper_limit: f64,
    /// `(truth, pred - truth)`.
    pub points: Vec<(f64, f64)>,
}

impl From<BlandAltman> for Agreement {
    fn from(b: BlandAltman) -> Self {
        Self {
            mean_diff: b.mean_diff,
            std_diff: b.std_diff,
            lower_limit: b.lower_limit,
            upper_limit: b.upper_limit,
            points: b.points,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LvetEntry {
    pub window: usize,
    pub start_s: f64,
    pub mean_ms: f64,
    pub beats: usize,
}

impl From<&LvetWindow> for LvetEntry {
    fn from(w: &LvetWindow) -> Self {
        Self {
            window: w.index,
            start_s: w.start_s,
            mean_ms: w.mean_ms,
            beats: w.beats,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClipResult {
    pub clip: String,
    pub hr_true: Option<f64>,
    pub hr_pred: Option<f64>,
    pub lvet_true: Vec<LvetEntry>,
    pub lvet_pred: Vec<LvetEntry>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Report {
    pub source: String,
    pub n_clips: usize,
    pub failed_clips: usize,
    pub hr_mae_bpm: Option<Summary>,
    pub lvet_mae_ms: Option<Summary>,
    pub hr_bland_altman: Option<Agreement>,
    pub lvet_bland_altman: Option<Agreement>,
    pub clips: Vec<ClipResult>,
}

impl Report {
    pub fn new(source: &str, r: &EvalReport, clip_ids: &[String]) -> Self {
        Self {
            source: source.into(),
            n_clips: r.clips.len(),
            failed_clips: r.failed_clips,
            hr_mae_bpm: r.hr_mae.map(Into::into),
            lvet_mae_ms: r.lvet_mae.map(Into::into),
            hr_bland_altman: r.hr_bland_altman.clone().map(Into::into),
            lvet_bland_altman: r.lvet_bland_altman.clone().map(Into::into),
            clips: r
                .clips
                .iter()
                .map(|c| ClipResult {
                    clip: clip_ids.get(c.clip).cloned().unwrap_or_else(|| c.clip.to_string()),
                    hr_true: c.hr_true,
                    hr_pred: c.hr_pred,
                    lvet_true: c.lvet_true.iter().map(Into::into).collect(),
                    lvet_pred: c.lvet_pred.iter().map(Into::into).collect(),
                    failures: c.failures.clone(),
                })
                .collect(),
        }
    }
}

fn clip_ids(manifest: &Manifest, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| manifest.clips[i].id.clone()).collect()
}

fn load_split(cfg: &RunConfig) -> Result<(Manifest, Vec<VideoClip>, Vec<VideoClip>, Vec<usize>, Vec<usize>)> {
    cfg.validate()?;
    let (manifest, clips) = load_dataset(&cfg.data_dir())?;
    let (train, test) = prepare(cfg, &clips)?;
    let (tr, te) = split_indices(clips.len(), cfg.test_fraction, cfg.stage_seed(stream::SPLIT));
    Ok((manifest, train, test, tr, te))
}

pub struct TrainArtifacts {
    pub outcome: TrainOutcome,
    pub dir: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<TrainArtifacts> {
    let (_, train, _, _, _) = load_split(cfg)?;
    let outcome = train_model(cfg, &cfg.model, &train, &mut |e, l| log(&format!("epoch {e} mean_loss {l:.6}")))?;
    let dir = cfg.out.join("train");
    formats::write_atomic(&dir.join("checkpoint_final.mdck"), &formats::encode_checkpoint(cfg, &outcome.model))?;
    formats::write_atomic(&dir.join("checkpoint_best.mdck"), &formats::encode_checkpoint(cfg, &outcome.best))?;
    let rows: Vec<LossRow> = outcome
        .history
        .iter()
        .enumerate()
        .map(|(epoch, &mean_loss)| LossRow { epoch, mean_loss })
        .collect();
    formats::write_csv(&dir.join("loss.csv"), &rows)?;
    formats::write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
    Ok(TrainArtifacts { outcome, dir })
}

/// What `cmd_eval` scores: a checkpoint, or the targets themselves.
pub enum EvalSource<'a> {
    Checkpoint(&'a Path),
    Truth,
}

pub fn cmd_eval(cfg: &RunConfig, src: EvalSource) -> Result<Report> {
    let (manifest, _, test, _, te) = load_split(cfg)?;
    let (name, model) = match src {
        EvalSource::Truth => ("truth".to_string(), None),
        EvalSource::Checkpoint(p) => {
            let (_, m) = formats::decode_checkpoint(p, &formats::read(p)?, cfg)?;
            (p.display().to_string(), Some(m))
        }
    };
    let source = model.as_ref().map_or(Source::Truth, Source::Model);
    let r = evaluate_clips(cfg, source, &test)?;
    let report = Report::new(&name, &r, &clip_ids(&manifest, &te));
    let dir = cfg.out.join("eval");
    formats::write_json(&dir.join("report.json"), &report)?;
    write_plot_data(&dir, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PointRow {
    pub truth: f64,
    pub diff: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LvetSeriesRow {
    pub clip: String,
    pub window: usize,
    pub start_s: f64,
    pub lvet_true_ms: Option<f64>,
    pub lvet_pred_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HrRow {
    pub clip: String,
    pub hr_true_bpm: Option<f64>,
    pub hr_pred_bpm: Option<f64>,
}

/// Bland-Altman points, per-clip HR and LVET window series as CSV.
pub fn write_plot_data(dir: &Path, r: &Report) -> Result<()> {
    let points = |a: &Option<Agreement>| -> Vec<PointRow> {
        a.iter()
            .flat_map(|a| a.points.iter().map(|&(truth, diff)| PointRow { truth, diff }))
            .collect()
    };
    formats::write_csv(&dir.join("bland_altman_hr.csv"), &points(&r.hr_bland_altman))?;
    formats::write_csv(&dir.join("bland_altman_lvet.csv"), &points(&r.lvet_bland_altman))?;
    let hr: Vec<HrRow> = r
        .clips
        .iter()
        .map(|c| HrRow {
            clip: c.clip.clone(),
            hr_true_bpm: c.hr_true,
            hr_pred_bpm: c.hr_pred,
        })
        .collect();
    formats::write_csv(&dir.join("hr.csv"), &hr)?;
    let mut series = Vec::new();
    for c in &r.clips {
        let mut windows: Vec<usize> = c.lvet_true.iter().chain(&c.lvet_pred).map(|w| w.window).collect();
        windows.sort_unstable();
        windows.dedup();
        for w in windows {
            let t = c.lvet_true.iter().find(|x| x.window == w);
            let p = c.lvet_pred.iter().find(|x| x.window == w);
            series.push(LvetSeriesRow {
                clip: c.clip.clone(),
                window: w,
                start_s: t.or(p).map_or(0.0, |x| x.start_s),
                lvet_true_ms: t.map(|x| x.mean_ms),
                lvet_pred_ms: p.map(|x| x.mean_ms),
            });
        }
    }
    formats::write_csv(&dir.join("lvet_series.csv"), &series)
}

pub fn cmd_export_plots(report: &Path, out: &Path) -> Result<()> {
    let r: Report = formats::read_json(report)?;
    write_plot_data(out, &r)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AblationRow {
    pub arch: String,
    pub fd_input: bool,
    pub sd_input: bool,
    pub fd_target: bool,
    pub sd_target: bool,
    pub role: String,
    pub hr_mae_mean: Option<f64>,
    pub hr_mae_std: Option<f64>,
    pub lvet_mae_mean: Option<f64>,
    pub lvet_mae_std: Option<f64>,
    pub failed_clips: Option<usize>,
    pub failure: String,
}

pub fn role(m: &ModelConfig) -> &'static str {
    if m.is_fd_optimized() {
        "FD-Optimized"
    } else if m.is_sd_optimized() {
        "SD-Optimized"
    } else {
        ""
    }
}

pub fn cell_name(m: &ModelConfig) -> String {
    let io = |fd: bool, sd: bool| match (fd, sd) {
        (true, true) => "fdsd",
        (true, false) => "fd",
        (false, true) => "sd",
        (false, false) => "none",
    };
    format!(
        "{}_in-{}_out-{}",
        arch_name(m.arch),
        io(m.use_fd_input, m.use_sd_input),
        io(m.use_fd_target, m.use_sd_target)
    )
}

/// One trained and evaluated configuration.
pub fn run_cell(cfg: &RunConfig, m: &ModelConfig, train: &[VideoClip], test: &[VideoClip]) -> Result<(Model, EvalReport)> {
    let out = train_model(cfg, m, train, &mut |_, _| {})?;
    let r = evaluate_clips(cfg, Source::Model(&out.model), test)?;
    Ok((out.model, r))
}

/// Train and score every cell of the grid on one shared split. A failing
/// cell is recorded and the remaining cells still run.
pub fn ablate(
    cfg: &RunConfig,
    train: &[VideoClip],
    test: &[VideoClip],
    log: &mut dyn FnMut(&str),
) -> Vec<(ModelConfig, Result<EvalReport>)> {
    ablation_configs(&cfg.model, cfg.sd_input_rows)
        .into_iter()
        .map(|m| {
            log(&format!("cell {}", cell_name(&m)));
            let r = run_cell(cfg, &m, train, test).map(|(_, r)| r);
            (m, r)
        })
        .collect()
}

pub fn ablation_rows(cells: &[(ModelConfig, Result<EvalReport>)]) -> Vec<AblationRow> {
    cells
        .iter()
        .map(|(m, r)| {
            let ok = r.as_ref().ok();
            AblationRow {
                arch: arch_name(m.arch).into(),
                fd_input: m.use_fd_input,
                sd_input: m.use_sd_input,
                fd_target: m.use_fd_target,
                sd_target: m.use_sd_target,
                role: role(m).into(),
                hr_mae_mean: ok.and_then(|r| r.hr_mae).map(|s| s.mean),
                hr_mae_std: ok.and_then(|r| r.hr_mae).map(|s| s.std),
                lvet_mae_mean: ok.and_then(|r| r.lvet_mae).map(|s| s.mean),
                lvet_mae_std: ok.and_then(|r| r.lvet_mae).map(|s| s.std),
                failed_clips: ok.map(|r| r.failed_clips),
                failure: r.as_ref().err().map(|e| e.to_string()).unwrap_or_default(),
            }
        })
        .collect()
}

pub fn cmd_ablate(cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<Vec<AblationRow>> {
    let (manifest, train, test, _, te) = load_split(cfg)?;
    let cells = ablate(cfg, &train, &test, log);
    let dir = cfg.out.join("ablate");
    let ids = clip_ids(&manifest, &te);
    for (m, r) in &cells {
        if let Ok(r) = r {
            formats::write_json(&dir.join(format!("{}.json", cell_name(m))), &Report::new(&cell_name(m), r, &ids))?;
        }
    }
    let rows = ablation_rows(&cells);
    formats::write_csv(&dir.join("ablation.csv"), &rows)?;
    Ok(rows)
}

/// The two configurations the trade-off compares, as `(FD-opt, SD-opt)`.
pub fn optimized_pair(base: &ModelConfig, arch: Arch) -> (ModelConfig, ModelConfig) {
    let with = |c: ModelConfig| ModelConfig {
        arch,
        use_fd_input: c.use_fd_input,
        use_sd_input: c.use_sd_input,
        use_fd_target: c.use_fd_target,
        use_sd_target: c.use_sd_target,
        ..*base
    };
    (with(ModelConfig::fd_optimized(arch)), with(ModelConfig::sd_optimized(arch)))
}
