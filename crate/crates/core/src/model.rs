//! The attention and plain conv + bidirectional GRU architectures.
//!
//! Each enabled derivative input gets its own branch:
//!
//! ```text
//! conv(w1) tanh, conv(w1) tanh, [x mask1], avgpool 2, dropout,
//! conv(w2) tanh, conv(w2) tanh, [x mask2], global pool, dropout  -> [T, w2]
//! ```
//!
//! The attention stack runs the same four convolutions over the raw frames
//! and emits a sigmoid mask after each conv pair, one mask per time step.
//! Both mask stages are shared by every branch. Branch features are
//! concatenated per step and each enabled target has its own head: a
//! bidirectional tanh GRU followed by a one-unit linear GRU.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Activation, AutodiffError, Graph, GruWeights, Tensor, Var};
use crate::preprocess::TrainingExample;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("no input branch enabled")]
    NoInputEnabled,
    #[error("no target enabled")]
    NoTargetEnabled,
    #[error("prediction for an enabled target is missing")]
    MissingTarget,
    #[error("example shape does not match the model: {0}")]
    ShapeMismatch(&'static str),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = core::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Attention,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Mae,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub use_fd_input: bool,
    pub use_sd_input: bool,
    pub use_fd_target: bool,
    pub use_sd_target: bool,
    pub loss_kind: LossKind,
    /// `(w_fd, w_sd)`.
    pub target_weights: (f64, f64),
    /// Filters of the first and second conv pair.
    pub filters: (usize, usize),
    /// Units per direction of the bidirectional layer.
    pub gru_units: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Attention,
            use_fd_input: true,
            use_sd_input: false,
            use_fd_target: true,
            use_sd_target: false,
            loss_kind: LossKind::Mse,
            target_weights: (1.0, 1.0),
            filters: (16, 32),
            gru_units: 32,
            dropout: 0.25,
        }
    }
}

impl ModelConfig {
    pub fn with_io(arch: Arch, fd_in: bool, sd_in: bool, fd_out: bool, sd_out: bool) -> Self {
        Self {
            arch,
            use_fd_input: fd_in,
            use_sd_input: sd_in,
            use_fd_target: fd_out,
            use_sd_target: sd_out,
            ..Self::default()
        }
    }

    /// FD frames in, FD target out.
    pub fn fd_optimized(arch: Arch) -> Self {
        Self::with_io(arch, true, false, true, false)
    }

    /// FD and SD frames in, SD target out.
    pub fn sd_optimized(arch: Arch) -> Self {
        Self::with_io(arch, true, true, false, true)
    }

    pub fn is_fd_optimized(&self) -> bool {
        (self.use_fd_input, self.use_sd_input, self.use_fd_target, self.use_sd_target) == (true, false, true, false)
    }

    pub fn is_sd_optimized(&self) -> bool {
        (self.use_fd_input, self.use_sd_input, self.use_fd_target, self.use_sd_target) == (true, true, false, true)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_fd_input && !self.use_sd_input {
            return Err(ModelError::NoInputEnabled);
        }
        if !self.use_fd_target && !self.use_sd_target {
            return Err(ModelError::NoTargetEnabled);
        }
        if self.filters.0 == 0 || self.filters.1 == 0 || self.gru_units == 0 {
            return Err(ModelError::InvalidConfig("layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig("dropout must be in [0, 1)"));
        }
        let (a, b) = self.target_weights;
        if !(a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0) {
            return Err(ModelError::InvalidConfig("target weights must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn n_branches(&self) -> usize {
        self.use_fd_input as usize + self.use_sd_input as usize
    }

    pub fn n_heads(&self) -> usize {
        self.use_fd_target as usize + self.use_sd_target as usize
    }
}

/// The input/target grid of the ablation: six rows per architecture in
/// table order, then three SD-input-only rows for the attention arch when
/// `sd_input_rows` is set.
pub fn ablation_configs(base: &ModelConfig, sd_input_rows: bool) -> Vec<ModelConfig> {
    const ROWS: [(bool, bool, bool, bool); 6] = [
        (true, false, true, false),
        (true, false, true, true),
        (true, false, false, true),
        (true, true, true, false),
        (true, true, true, true),
        (true, true, false, true),
    ];
    const SD_ONLY: [(bool, bool, bool, bool); 3] = [
        (false, true, true, false),
        (false, true, true, true),
        (false, true, false, true),
    ];
    let mk = |arch, r: (bool, bool, bool, bool)| ModelConfig {
        arch,
        use_fd_input: r.0,
        use_sd_input: r.1,
        use_fd_target: r.2,
        use_sd_target: r.3,
        ..*base
    };
    let mut out = Vec::new();
    for arch in [Arch::Plain, Arch::Attention] {
        out.extend(ROWS.iter().map(|&r| mk(arch, r)));
    }
    if sd_input_rows {
        out.extend(SD_ONLY.iter().map(|&r| mk(Arch::Attention, r)));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Stack {
    c: [Conv; 4],
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Attention {
    stack: Stack,
    mask: [Conv; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Gru {
    w: usize,
    u: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Head {
    fwd: Gru,
    bwd: Gru,
    out: Gru,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub input_hw: usize,
    pub t: usize,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    fd_branch: Option<Stack>,
    sd_branch: Option<Stack>,
    attention: Option<Attention>,
    fd_head: Option<Head>,
    sd_head: Option<Head>,
}

/// How attention masks are produced in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskMode {
    Learned,
    /// Mask logits replaced by zeros, so every mask value is 0.5.
    ZeroLogits,
    /// Every mask value forced to 1.
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Predictions {
    pub fd: Option<Vec<f64>>,
    pub sd: Option<Vec<f64>>,
}

/// Graph handles from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub params: Vec<Var>,
    pub fd: Option<Var>,
    pub sd: Option<Var>,
    /// Attention masks, first stage then second.
    pub masks: Vec<Var>,
    /// Branch feature maps right after each mask multiply.
    pub masked: Vec<Var>,
}

struct Builder {
    names: Vec<String>,
    params: Vec<Tensor>,
    seed: u64,
}

impl Builder {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let n: usize = shape.iter().product();
        let limit = libm::sqrt(3.0 / fan_in as f64);
        let mut rng = seed::rng(seed::derive(self.seed, self.params.len() as u64));
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        self.push(name, shape, data)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.push(name, shape, vec![0.0; shape.iter().product()])
    }

    fn push(&mut self, name: String, shape: &[usize], data: Vec<f64>) -> usize {
        self.names.push(name);
        self.params.push(Tensor::param(shape, data).unwrap());
        self.params.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize) -> Conv {
        Conv {
            w: self.uniform(format!("{prefix}.w"), &[3, 3, 3, cin, cout], 27 * cin),
            b: self.zeros(format!("{prefix}.b"), &[cout]),
        }
    }

    fn stack(&mut self, prefix: &str, cin: usize, f: (usize, usize)) -> Stack {
        Stack {
            c: [
                self.conv(&format!("{prefix}.conv1"), cin, f.0),
                self.conv(&format!("{prefix}.conv2"), f.0, f.0),
                self.conv(&format!("{prefix}.conv3"), f.0, f.1),
                self.conv(&format!("{prefix}.conv4"), f.1, f.1),
            ],
        }
    }

    fn gru(&mut self, prefix: &str, fin: usize, units: usize) -> Gru {
        Gru {
            w: self.uniform(format!("{prefix}.w"), &[fin, 3 * units], fin),
            u: self.uniform(format!("{prefix}.u"), &[units, 3 * units], units),
            b: self.zeros(format!("{prefix}.b"), &[3 * units]),
        }
    }

    fn head(&mut self, prefix: &str, fin: usize, units: usize) -> Head {
        Head {
            fwd: self.gru(&format!("{prefix}.bigru_fwd"), fin, units),
            bwd: self.gru(&format!("{prefix}.bigru_bwd"), fin, units),
            out: self.gru(&format!("{prefix}.gru_out"), 2 * units, 1),
        }
    }
}

pub fn build_model(cfg: &ModelConfig, input_hw: usize, t: usize, seed: u64) -> Result<Model> {
    cfg.validate()?;
    if input_hw < 2 || input_hw % 2 != 0 {
        return Err(ModelError::InvalidConfig("input size must be even"));
    }
    if t == 0 {
        return Err(ModelError::InvalidConfig("window length must be positive"));
    }
    let mut b = Builder {
        names: Vec::new(),
        params: Vec::new(),
        seed,
    };
    let f = cfg.filters;
    let attention = (cfg.arch == Arch::Attention).then(|| Attention {
        stack: b.stack("attn", 3, f),
        mask: [b.conv("attn.mask1", f.0, 1), b.conv("attn.mask2", f.1, 1)],
    });
    let fd_branch = cfg.use_fd_input.then(|| b.stack("fd", 3, f));
    let sd_branch = cfg.use_sd_input.then(|| b.stack("sd", 3, f));
    let feat = cfg.n_branches() * f.1;
    let fd_head = cfg.use_fd_target.then(|| b.head("head_fd", feat, cfg.gru_units));
    let sd_head = cfg.use_sd_target.then(|| b.head("head_sd", feat, cfg.gru_units));
    Ok(Model {
        cfg: *cfg,
        input_hw,
        t,
        names: b.names,
        params: b.params,
        fd_branch,
        sd_branch,
        attention,
        fd_head,
        sd_head,
    })
}

/// Dropout site ids, so every site draws an independent stream.
const SITE_ATTN: u64 = 0;
const SITE_FD: u64 = 2;
const SITE_SD: u64 = 4;

impl Model {
    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn n_branches(&self) -> usize {
        self.fd_branch.is_some() as usize + self.sd_branch.is_some() as usize
    }

    pub fn has_attention(&self) -> bool {
        self.attention.is_some()
    }

    pub fn n_heads(&self) -> usize {
        self.fd_head.is_some() as usize + self.sd_head.is_some() as usize
    }

    /// Width of the concatenated per-step feature vector.
    pub fn feature_width(&self) -> usize {
        self.n_branches() * self.cfg.filters.1
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn check_example(&self, ex: &TrainingExample) -> Result<()> {
        let want = [self.t, self.input_hw, self.input_hw, 3];
        for f in [&ex.raw_frames, &ex.fd_frames, &ex.sd_frames] {
            if f.dims() != want {
                return Err(ModelError::ShapeMismatch("frames must be [T, H, W, 3] at the build size"));
            }
        }
        if ex.fd_target.len() != self.t || ex.sd_target.len() != self.t {
            return Err(ModelError::ShapeMismatch("targets must have length T"));
        }
        Ok(())
    }

    fn conv_tanh(&self, g: &mut Graph, p: &[Var], x: Var, c: Conv) -> Result<Var> {
        let y = g.conv3d(x, p[c.w], p[c.b])?;
        Ok(g.tanh(y)?)
    }

    /// Build the forward pass into `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        ex: &TrainingExample,
        mode: Mode,
        seed: u64,
        mask_mode: MaskMode,
    ) -> Result<ForwardVars> {
        self.check_example(ex)?;
        let train = mode == Mode::Train;
        let rate = self.cfg.dropout;
        let p: Vec<Var> = self.params.iter().map(|t| g.leaf(t)).collect::<core::result::Result<_, _>>()?;
        let dims = [self.t, self.input_hw, self.input_hw, 3];
        let frames = |g: &mut Graph, f: &crate::render::Frames| g.constant(&dims, f.data.clone());

        let mut masks = Vec::new();
        if let Some(a) = self.attention {
            let x = frames(g, &ex.raw_frames)?;
            let h = self.conv_tanh(g, &p, x, a.stack.c[0])?;
            let h = self.conv_tanh(g, &p, h, a.stack.c[1])?;
            masks.push(self.mask(g, &p, h, a.mask[0], mask_mode)?);
            let h = g.avg_pool(h, 2)?;
            let h = g.dropout(h, rate, train, seed::derive(seed, SITE_ATTN))?;
            let h = self.conv_tanh(g, &p, h, a.stack.c[2])?;
            let h = self.conv_tanh(g, &p, h, a.stack.c[3])?;
            masks.push(self.mask(g, &p, h, a.mask[1], mask_mode)?);
        }

        let mut feats = Vec::new();
        let mut masked = Vec::new();
        let branches = [
            (self.fd_branch, &ex.fd_frames, SITE_FD),
            (self.sd_branch, &ex.sd_frames, SITE_SD),
        ];
        for (stack, input, site) in branches {
            let Some(s) = stack else { continue };
            let x = frames(g, input)?;
            let mut h = self.conv_tanh(g, &p, x, s.c[0])?;
            h = self.conv_tanh(g, &p, h, s.c[1])?;
            if let Some(&m) = masks.first() {
                h = g.mask_mul(h, m)?;
                masked.push(h);
            }
            h = g.avg_pool(h, 2)?;
            h = g.dropout(h, rate, train, seed::derive(seed, site))?;
            h = self.conv_tanh(g, &p, h, s.c[2])?;
            h = self.conv_tanh(g, &p, h, s.c[3])?;
            if let Some(&m) = masks.get(1) {
                h = g.mask_mul(h, m)?;
                masked.push(h);
            }
            h = g.global_pool(h)?;
            h = g.dropout(h, rate, train, seed::derive(seed, site + 1))?;
            feats.push(h);
        }
        let feat = if feats.len() == 1 { feats[0] } else { g.concat_cols(&feats)? };

        let run_head = |g: &mut Graph, head: Option<Head>| -> Result<Option<Var>> {
            let Some(h) = head else { return Ok(None) };
            let gw = |q: Gru| GruWeights {
                w: p[q.w],
                u: p[q.u],
                b: p[q.b],
            };
            let z = g.bigru(feat, gw(h.fwd), gw(h.bwd), Activation::Tanh)?;
            let y = g.gru(z, gw(h.out), Activation::Linear, false)?;
            Ok(Some(g.reshape(y, &[self.t])?))
        };
        let fd = run_head(g, self.fd_head)?;
        let sd = run_head(g, self.sd_head)?;
        Ok(ForwardVars {
            params: p,
            fd,
            sd,
            masks,
            masked,
        })
    }

    fn mask(&self, g: &mut Graph, p: &[Var], h: Var, c: Conv, mode: MaskMode) -> Result<Var> {
        let s = g.shape(h).to_vec();
        let n = s[0] * s[1] * s[2];
        let shape = [s[0], s[1], s[2], 1];
        Ok(match mode {
            MaskMode::Learned => {
                let logits = g.conv3d(h, p[c.w], p[c.b])?;
                g.sigmoid(logits)?
            }
            MaskMode::ZeroLogits => {
                let logits = g.constant(&shape, vec![0.0; n])?;
                g.sigmoid(logits)?
            }
            MaskMode::Ones => g.constant(&shape, vec![1.0; n])?,
        })
    }

    pub fn forward(&self, ex: &TrainingExample, mode: Mode, seed: u64) -> Result<Predictions> {
        let mut g = Graph::new();
        let v = self.forward_graph(&mut g, ex, mode, seed, MaskMode::Learned)?;
        Ok(Predictions {
            fd: v.fd.map(|x| g.value(x).to_vec()),
            sd: v.sd.map(|x| g.value(x).to_vec()),
        })
    }

    /// Loss of one example and its gradient for every parameter, in
    /// `self.params` order.
    pub fn loss_and_grads(&self, ex: &TrainingExample, mode: Mode, seed: u64) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let v = self.forward_graph(&mut g, ex, mode, seed, MaskMode::Learned)?;
        let loss = graph_loss(&mut g, v.fd, v.sd, ex, &self.cfg)?;
        let value = g.value(loss)[0];
        let grads = g.backward(loss)?;
        let out = v
            .params
            .iter()
            .zip(&self.params)
            .map(|(&pv, t)| grads.get(pv).map_or_else(|| vec![0.0; t.len()], |s| s.to_vec()))
            .collect();
        Ok((value, out))
    }
}

/// Weighted sum of the per-target losses, recorded in `g`.
pub fn graph_loss(g: &mut Graph, fd: Option<Var>, sd: Option<Var>, ex: &TrainingExample, cfg: &ModelConfig) -> Result<Var> {
    let mut total: Option<Var> = None;
    let parts = [
        (cfg.use_fd_target, fd, &ex.fd_target, cfg.target_weights.0),
        (cfg.use_sd_target, sd, &ex.sd_target, cfg.target_weights.1),
    ];
    for (enabled, pred, target, w) in parts {
        if !enabled {
            continue;
        }
        let pred = pred.ok_or(ModelError::MissingTarget)?;
        let t = g.constant(&[target.len()], target.clone())?;
        let l = match cfg.loss_kind {
            LossKind::Mse => g.mse(pred, t)?,
            LossKind::Mae => g.mae(pred, t)?,
        };
        let l = g.scale(l, w)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    total.ok_or(ModelError::NoTargetEnabled)
}

pub fn compute_loss(pred: &Predictions, ex: &TrainingExample, cfg: &ModelConfig) -> Result<f64> {
    let mut g = Graph::new();
    let mut leaf = |v: &Option<Vec<f64>>| -> Result<Option<Var>> {
        match v {
            Some(x) => Ok(Some(g.constant(&[x.len()], x.clone())?)),
            None => Ok(None),
        }
    };
    let fd = leaf(&pred.fd)?;
    let sd = leaf(&pred.sd)?;
    for (enabled, p, t) in [
        (cfg.use_fd_target, &pred.fd, &ex.fd_target),
        (cfg.use_sd_target, &pred.sd, &ex.sd_target),
    ] {
        if enabled && p.as_ref().is_some_and(|p| p.len() != t.len()) {
            return Err(ModelError::ShapeMismatch("prediction length differs from target"));
        }
    }
    let l = graph_loss(&mut g, fd, sd, ex, cfg)?;
    Ok(g.value(l)[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::Frames;

    fn example(hw: usize, t: usize, seed: u64) -> TrainingExample {
        let mut rng = seed::rng(seed);
        let mut fr = || {
            Frames::from_vec(t, hw, hw, 3, (0..t * hw * hw * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let raw = fr();
        let fd = fr();
        let sd = fr();
        let mut rng = seed::rng(seed + 1);
        TrainingExample {
            raw_frames: raw,
            fd_frames: fd,
            sd_frames: sd,
            fd_target: (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            sd_target: (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn tiny(arch: Arch, io: (bool, bool, bool, bool)) -> ModelConfig {
        ModelConfig {
            filters: (2, 2),
            gru_units: 2,
            ..ModelConfig::with_io(arch, io.0, io.1, io.2, io.3)
        }
    }

    #[test]
    fn structure_follows_config() {
        let m = build_model(&ModelConfig::fd_optimized(Arch::Attention), 36, 30, 1).unwrap();
        assert_eq!((m.n_branches(), m.has_attention(), m.n_heads()), (1, true, 1));
        let full = ModelConfig::with_io(Arch::Attention, true, true, true, true);
        let m = build_model(&full, 36, 30, 1).unwrap();
        assert_eq!((m.n_branches(), m.has_attention(), m.n_heads()), (2, true, 2));
        assert_eq!(m.feature_width(), 64);
        let i = m.param_index("head_fd.bigru_fwd.w").unwrap();
        assert_eq!(m.params[i].shape, vec![64, 96]);
        let i = m.param_index("fd.conv1.w").unwrap();
        assert_eq!(m.params[i].shape, vec![3, 3, 3, 3, 16]);
        let i = m.param_index("sd.conv4.w").unwrap();
        assert_eq!(m.params[i].shape, vec![3, 3, 3, 32, 32]);
        let plain = build_model(&ModelConfig::fd_optimized(Arch::Plain), 36, 30, 1).unwrap();
        assert!(!plain.has_attention());
        assert!(plain.names.iter().all(|n| !n.starts_with("attn")));
    }

    #[test]
    fn config_errors() {
        let none_in = ModelConfig::with_io(Arch::Plain, false, false, true, false);
        assert_eq!(build_model(&none_in, 8, 4, 0).unwrap_err(), ModelError::NoInputEnabled);
        let none_out = ModelConfig::with_io(Arch::Plain, true, false, false, false);
        assert_eq!(build_model(&none_out, 8, 4, 0).unwrap_err(), ModelError::NoTargetEnabled);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::sd_optimized(Arch::Attention);
        let a = build_model(&cfg, 36, 30, 5).unwrap();
        let b = build_model(&cfg, 36, 30, 5).unwrap();
        let c = build_model(&cfg, 36, 30, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        for (name, p) in a.names.iter().zip(&a.params) {
            if name.ends_with(".b") {
                assert!(p.data.iter().all(|&v| v == 0.0));
            }
        }
        let i = a.param_index("fd.conv2.w").unwrap();
        let lim = (3.0f64 / (27.0 * 16.0)).sqrt();
        assert!(a.params[i].data.iter().all(|v| v.abs() <= lim));
    }

    #[test]
    fn ablation_grid() {
        let base = ModelConfig::default();
        let rows = ablation_configs(&base, false);
        assert_eq!(rows.len(), 12);
        assert_eq!(rows.iter().filter(|c| c.arch == Arch::Attention).count(), 6);
        assert!(rows[6].is_fd_optimized() && rows[11].is_sd_optimized());
        let all = ablation_configs(&base, true);
        assert_eq!(all.len(), 15);
        assert!(all[12..].iter().all(|c| !c.use_fd_input && c.use_sd_input && c.arch == Arch::Attention));
        for c in &all {
            c.validate().unwrap();
        }
    }

    #[test]
    fn output_lengths_and_eval_determinism() {
        let cfg = ModelConfig {
            filters: (4, 4),
            gru_units: 4,
            ..ModelConfig::with_io(Arch::Attention, true, true, true, true)
        };
        let m = build_model(&cfg, 8, 30, 2).unwrap();
        let ex = example(8, 30, 3);
        let a = m.forward(&ex, Mode::Eval, 1).unwrap();
        let b = m.forward(&ex, Mode::Eval, 2).unwrap();
        assert_eq!(a.fd.as_ref().unwrap().len(), 30);
        assert_eq!(a.sd.as_ref().unwrap().len(), 30);
        assert_eq!(a, b);
        let t1 = m.forward(&ex, Mode::Train, 1).unwrap();
        let t2 = m.forward(&ex, Mode::Train, 1).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, a);
    }

    #[test]
    fn masks_in_open_unit_interval() {
        let m = build_model(&tiny(Arch::Attention, (true, true, false, true)), 8, 4, 4).unwrap();
        let ex = example(8, 4, 5);
        let mut g = Graph::new();
        let v = m.forward_graph(&mut g, &ex, Mode::Eval, 0, MaskMode::Learned).unwrap();
        assert_eq!(v.masks.len(), 2);
        assert_eq!(g.shape(v.masks[0]), &[4, 8, 8, 1]);
        assert_eq!(g.shape(v.masks[1]), &[4, 4, 4, 1]);
        for &mk in &v.masks {
            assert!(g.value(mk).iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn zero_logits_halve_masked_activations() {
        let m = build_model(&tiny(Arch::Attention, (true, true, true, false)), 8, 4, 6).unwrap();
        let ex = example(8, 4, 7);
        let mut g = Graph::new();
        let half = m.forward_graph(&mut g, &ex, Mode::Eval, 0, MaskMode::ZeroLogits).unwrap();
        let one = m.forward_graph(&mut g, &ex, Mode::Eval, 0, MaskMode::Ones).unwrap();
        // First mask stage sees identical features in both passes.
        for b in [0, 2] {
            let (h, o) = (g.value(half.masked[b]), g.value(one.masked[b]));
            assert!(h.iter().zip(o).all(|(h, o)| *h == 0.5 * o));
        }
    }

    #[test]
    fn disabled_branch_input_is_ignored() {
        let m = build_model(&tiny(Arch::Attention, (true, false, true, false)), 8, 4, 8).unwrap();
        let ex = example(8, 4, 9);
        let mut other = ex.clone();
        other.sd_frames.data.iter_mut().for_each(|v| *v = -*v * 3.0);
        assert_eq!(m.forward(&ex, Mode::Eval, 0).unwrap(), m.forward(&other, Mode::Eval, 0).unwrap());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = build_model(&tiny(Arch::Plain, (true, false, true, false)), 8, 4, 8).unwrap();
        let ex = example(6, 4, 9);
        assert!(matches!(m.forward(&ex, Mode::Eval, 0), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn loss_examples() {
        let mut ex = example(2, 3, 1);
        ex.sd_target = vec![1.0, 0.0, 0.0];
        let cfg = ModelConfig::with_io(Arch::Plain, true, true, false, true);
        let exact = Predictions {
            fd: None,
            sd: Some(ex.sd_target.clone()),
        };
        assert_eq!(compute_loss(&exact, &ex, &cfg).unwrap(), 0.0);
        let zero = Predictions {
            fd: None,
            sd: Some(vec![0.0; 3]),
        };
        assert!((compute_loss(&zero, &ex, &cfg).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            compute_loss(&Predictions::default(), &ex, &cfg).unwrap_err(),
            ModelError::MissingTarget
        );

        let both = ModelConfig::with_io(Arch::Plain, true, true, true, true);
        let p = Predictions {
            fd: Some(vec![0.3, -0.1, 0.2]),
            sd: Some(vec![0.0, 0.5, -0.5]),
        };
        let fd_only = ModelConfig::with_io(Arch::Plain, true, true, true, false);
        let sd_only = ModelConfig::with_io(Arch::Plain, true, true, false, true);
        let sum = compute_loss(&p, &ex, &fd_only).unwrap() + compute_loss(&p, &ex, &sd_only).unwrap();
        assert!((compute_loss(&p, &ex, &both).unwrap() - sum).abs() < 1e-15);
        for kind in [LossKind::Mse, LossKind::Mae] {
            let c = ModelConfig { loss_kind: kind, ..both };
            assert!(compute_loss(&p, &ex, &c).unwrap() > 0.0);
        }
    }

    #[test]
    fn end_to_end_gradient_check() {
        let cfg = ModelConfig {
            dropout: 0.25,
            ..tiny(Arch::Attention, (true, true, true, true))
        };
        let mut m = build_model(&cfg, 8, 4, 10).unwrap();
        let ex = example(8, 4, 11);
        let (_, grads) = m.loss_and_grads(&ex, Mode::Train, 3).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..m.params.len() {
            // Every element of small tensors, a strided sample of larger ones.
            let n = m.params[i].len();
            let step = (n / 12).max(1);
            for j in (0..n).step_by(step) {
                let orig = m.params[i].data[j];
                m.params[i].data[j] = orig + h;
                let lp = m.loss_and_grads(&ex, Mode::Train, 3).unwrap().0;
                m.params[i].data[j] = orig - h;
                let lm = m.loss_and_grads(&ex, Mode::Train, 3).unwrap().0;
                m.params[i].data[j] = orig;
                let num = (lp - lm) / (2.0 * h);
                let a = grads[i][j];
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-3, "{worst}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn loss_is_zero_exactly_at_the_targets(
                fd in prop::collection::vec(-3.0f64..3.0, 4),
                sd in prop::collection::vec(-3.0f64..3.0, 4),
                at in 0usize..8,
                bump in prop_oneof![-1.0f64..-1e-6, 1e-6f64..1.0],
                mae in any::<bool>(),
            ) {
                let mut ex = example(2, 4, 0);
                ex.fd_target = fd.clone();
                ex.sd_target = sd.clone();
                let cfg = ModelConfig {
                    loss_kind: if mae { LossKind::Mae } else { LossKind::Mse },
                    ..ModelConfig::with_io(Arch::Plain, true, true, true, true)
                };
                let exact = Predictions { fd: Some(fd.clone()), sd: Some(sd.clone()) };
                prop_assert_eq!(compute_loss(&exact, &ex, &cfg).unwrap(), 0.0);
                let mut off = exact.clone();
                if at < 4 {
                    off.fd.as_mut().unwrap()[at] += bump;
                } else {
                    off.sd.as_mut().unwrap()[at - 4] += bump;
                }
                prop_assert!(compute_loss(&off, &ex, &cfg).unwrap() > 0.0);
            }

            #[test]
            fn masks_stay_in_open_unit_interval(seed in 0u64..500, scale in 0.1f64..3.0) {
                let m = build_model(&tiny(Arch::Attention, (true, false, true, false)), 4, 3, seed).unwrap();
                let mut ex = example(4, 3, seed + 7);
                ex.raw_frames.data.iter_mut().for_each(|v| *v *= scale);
                let mut g = Graph::new();
                let v = m.forward_graph(&mut g, &ex, Mode::Train, seed, MaskMode::Learned).unwrap();
                for &mk in &v.masks {
                    prop_assert!(g.value(mk).iter().all(|&x| x > 0.0 && x < 1.0));
                }
            }
        }
    }
}
