//! Simultaneous mutual learning of the segmentation network `M_s` and the
//! distance-regression network `M_d`.
//!
//! Each iteration both networks run on every crop of the batch. `M_s` then
//! descends `L_seg` on the labeled crops plus `λ(t) · L_con` on all crops,
//! with `M_d`'s output held fixed; `M_d` descends its supervised loss plus
//! the same consistency term with `M_s`'s output held fixed.

mod inference;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{augment, random_crop, DatasetSplit, LabeledCase};
use crate::error::{DtmlError, Result};
use crate::grid::{Mask, Shape3, Volume};
use crate::losses::{
    consistency_slices, mask_loss_slices, mse_slices, seg_loss_slices, LossGrad, RampUpSchedule,
};
use crate::nn::{build_backbone, ArchDescriptor, Backbone, ForwardCache, Head, NetworkParams, Tensor};
use crate::sdm::{compute_sdm, normalize_sdm, TransformConfig, DEFAULT_K};

pub use inference::{
    evaluate_cases, evaluate_mask, sliding_window_predict, window_coverage, window_starts,
    InferenceSettings, Prediction,
};

/// Supervised objective of `M_d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedMode {
    /// MSE against the normalized signed distance map.
    Dis,
    /// Soft Dice between the soft mask of the prediction and the label.
    Mask,
    DisPlusMask,
}

impl SupervisedMode {
    pub const ALL: [SupervisedMode; 3] = [Self::Dis, Self::Mask, Self::DisPlusMask];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dis => "dis",
            Self::Mask => "mask",
            Self::DisPlusMask => "dis_plus_mask",
        }
    }

    fn uses_dis(self) -> bool {
        matches!(self, Self::Dis | Self::DisPlusMask)
    }

    fn uses_mask(self) -> bool {
        matches!(self, Self::Mask | Self::DisPlusMask)
    }
}

/// Which networks are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Both networks with the cross-task consistency.
    Dtml,
    /// `M_s` alone on labeled data.
    MsOnly,
    /// `M_d` alone on labeled data.
    MdOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Self::MsOnly, Self::MdOnly, Self::Dtml];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dtml => "dtml",
            Self::MsOnly => "ms_only",
            Self::MdOnly => "md_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    fn trains_seg(self) -> bool {
        self != Self::MdOnly
    }

    fn trains_dis(self) -> bool {
        self != Self::MsOnly
    }

    /// Head scored at test time.
    pub fn eval_head(self) -> Head {
        match self {
            Self::MdOnly => Head::Dis,
            _ => Head::Seg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iterations: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub crop_shape: Shape3,
    /// Largest consistency weight.
    pub max_weight: f64,
    /// Ramp length; `None` means `total_iterations`.
    pub ramp_length: Option<usize>,
    pub ramp_exponent_squared: bool,
    pub supervised_mode_md: SupervisedMode,
    pub variant: Variant,
    pub k: f64,
    pub descriptor: ArchDescriptor,
    /// Master seed; initialization and batch sampling derive from it.
    pub seed: u64,
    /// Checkpoint interval in iterations, 0 for none.
    pub checkpoint_every: usize,
    /// Interval of best-checkpoint selection on the labeled set, 0 for none.
    pub eval_every: usize,
    /// Sliding-window stride for selection and evaluation.
    pub eval_stride: Shape3,
    pub threshold: f64,
    /// Threads preparing crops, 0 for the calling thread only. Results do not
    /// depend on it.
    pub num_workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iterations: 2000,
            base_lr: 0.01,
            lr_decay_factor: 0.1,
            lr_decay_every: 800,
            momentum: 0.9,
            weight_decay: 1e-4,
            labeled_per_batch: 2,
            unlabeled_per_batch: 2,
            crop_shape: [32, 32, 32],
            max_weight: 0.1,
            ramp_length: None,
            ramp_exponent_squared: false,
            supervised_mode_md: SupervisedMode::Mask,
            variant: Variant::Dtml,
            k: DEFAULT_K,
            descriptor: ArchDescriptor::default(),
            seed: 1337,
            checkpoint_every: 0,
            eval_every: 200,
            eval_stride: [16, 16, 16],
            threshold: 0.5,
            num_workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DtmlError::InvalidConfig(msg));
        if self.labeled_per_batch == 0 {
            return bad("labeled_per_batch must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!("lr_decay_factor must lie in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        if !(self.max_weight >= 0.0 && self.max_weight.is_finite()) {
            return bad(format!("max_weight must be non-negative, got {}", self.max_weight));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if self.eval_stride.iter().zip(&self.crop_shape).any(|(&s, &c)| s == 0 || s > c) {
            return bad(format!(
                "eval_stride {:?} must be positive and at most crop_shape {:?}",
                self.eval_stride, self.crop_shape
            ));
        }
        TransformConfig::new(self.k)?;
        self.descriptor.validate()?;
        self.descriptor.check_input(self.crop_shape)?;
        Ok(())
    }

    pub fn schedule(&self) -> RampUpSchedule {
        let max_weight = if self.variant == Variant::Dtml {
            self.max_weight
        } else {
            0.0
        };
        RampUpSchedule {
            max_weight,
            ramp_length: self.ramp_length.unwrap_or(self.total_iterations),
            exponent_squared: self.ramp_exponent_squared,
        }
    }

    /// Step schedule: `base_lr · factor^⌊t / every⌋`.
    pub fn lr_at(&self, t: usize) -> f64 {
        self.base_lr * self.lr_decay_factor.powi((t / self.lr_decay_every) as i32)
    }

    pub fn transform(&self) -> TransformConfig {
        TransformConfig { k: self.k }
    }

    pub fn inference(&self) -> InferenceSettings {
        InferenceSettings {
            crop: self.crop_shape,
            stride: self.eval_stride,
            threshold: self.threshold,
            transform: self.transform(),
        }
    }

    /// Initialization seeds of `M_s` and `M_d`.
    pub fn network_seeds(&self) -> (u64, u64) {
        let mut r = stream(self.seed, Purpose::Init, 0);
        (r.gen(), r.gen())
    }
}

#[derive(Clone, Copy)]
enum Purpose {
    Init = 1,
    Labeled = 2,
    Unlabeled = 3,
}

/// Independent random stream for one purpose and index.
fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((purpose as u64) << 56) | index);
    r
}

const LOG_COLUMNS: [&str; 7] = [
    "iteration",
    "lr",
    "lambda_con",
    "l_seg",
    "l_md_supervised",
    "l_con_s",
    "l_con_d",
];

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub lambda_con: f64,
    pub l_seg: f64,
    pub l_md_supervised: f64,
    pub l_con_s: f64,
    pub l_con_d: f64,
}

/// Labeled crop with its targets.
#[derive(Debug, Clone)]
pub struct LabeledCrop {
    pub volume: Volume,
    pub mask: Mask,
    /// Normalized signed distances of `mask`; `±1` everywhere when the crop
    /// holds a single class.
    pub sdm: Vec<f64>,
}

impl LabeledCrop {
    pub fn new(volume: Volume, mask: Mask) -> Result<Self> {
        let sdm = if mask.is_degenerate() {
            let v = if mask.count() == 0 { 1.0 } else { -1.0 };
            vec![v; mask.data().len()]
        } else {
            normalize_sdm(&compute_sdm(&mask)?)?.into_data()
        };
        Ok(Self { volume, mask, sdm })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub labeled: Vec<LabeledCrop>,
    pub unlabeled: Vec<Volume>,
}

/// Parameters, momenta and the iteration counter. Batch sampling is a pure
/// function of the seed and the iteration, so no generator state is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params_s: NetworkParams,
    pub params_d: NetworkParams,
    pub momentum_s: Vec<Vec<f64>>,
    pub momentum_d: Vec<Vec<f64>>,
    pub iteration: usize,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let (seed_s, seed_d) = cfg.network_seeds();
        let params_s = build_backbone(cfg.descriptor, seed_s)?;
        let params_d = build_backbone(cfg.descriptor, seed_d)?;
        Ok(Self {
            momentum_s: params_s.zeros_like(),
            momentum_d: params_d.zeros_like(),
            params_s,
            params_d,
            iteration: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            seg: self.params_s.clone(),
            dis: self.params_d.clone(),
            iteration: self.iteration,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self {
            momentum_s: ckpt.seg.zeros_like(),
            momentum_d: ckpt.dis.zeros_like(),
            params_s: ckpt.seg,
            params_d: ckpt.dis,
            iteration: ckpt.iteration,
        }
    }
}

/// Standardized volumes ready for cropping.
pub struct TrainingData {
    labeled: Vec<(Volume, Mask)>,
    unlabeled: Vec<Volume>,
}

impl TrainingData {
    pub fn new(split: &DatasetSplit) -> Result<Self> {
        split.validate()?;
        if split.labeled.is_empty() {
            return Err(DtmlError::EmptyPartition("no labeled volumes".into()));
        }
        Ok(Self {
            labeled: split
                .labeled
                .iter()
                .map(|c| (c.volume.standardized(), c.mask.clone()))
                .collect(),
            unlabeled: split.unlabeled.iter().map(|c| c.volume.standardized()).collect(),
        })
    }

    /// The batch of iteration `t`. Every crop draws from its own stream, so
    /// the result is the same for any number of workers.
    pub fn batch(&self, cfg: &TrainConfig, t: usize, with_unlabeled: bool) -> Result<Batch> {
        let per = 64u64;
        let labeled_crop = |slot: usize| -> Result<LabeledCrop> {
            let mut r = stream(cfg.seed, Purpose::Labeled, t as u64 * per + slot as u64);
            let (v, m) = &self.labeled[r.gen_range(0..self.labeled.len())];
            let (cv, cm) = random_crop(v, Some(m), cfg.crop_shape, &mut r)?;
            let (av, am) = augment(&cv, cm.as_ref(), &mut r);
            LabeledCrop::new(av, am.expect("mask cropped alongside"))
        };
        let n_unlabeled = if with_unlabeled && !self.unlabeled.is_empty() {
            cfg.unlabeled_per_batch
        } else {
            0
        };
        let unlabeled_crop = |slot: usize| -> Result<Volume> {
            let mut r = stream(cfg.seed, Purpose::Unlabeled, t as u64 * per + slot as u64);
            let v = &self.unlabeled[r.gen_range(0..self.unlabeled.len())];
            let (cv, _) = random_crop(v, None, cfg.crop_shape, &mut r)?;
            Ok(augment(&cv, None, &mut r).0)
        };
        let (labeled, unlabeled) = if cfg.num_workers > 0 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.num_workers)
                .build()
                .map_err(|e| DtmlError::InvalidConfig(format!("worker pool: {e}")))?;
            pool.install(|| {
                (
                    (0..cfg.labeled_per_batch)
                        .into_par_iter()
                        .map(labeled_crop)
                        .collect::<Result<Vec<_>>>(),
                    (0..n_unlabeled)
                        .into_par_iter()
                        .map(unlabeled_crop)
                        .collect::<Result<Vec<_>>>(),
                )
            })
        } else {
            (
                (0..cfg.labeled_per_batch).map(labeled_crop).collect(),
                (0..n_unlabeled).map(unlabeled_crop).collect(),
            )
        };
        Ok(Batch {
            labeled: labeled?,
            unlabeled: unlabeled?,
        })
    }
}

struct Pass {
    out: Vec<f64>,
    cache: ForwardCache,
}

fn run(backbone: &Backbone, params: &NetworkParams, x: &Volume, head: Head) -> Pass {
    let (logits, cache) =
        backbone.forward(params, Tensor::from_channel(x.shape(), x.data().to_vec()));
    Pass {
        out: logits.data.into_iter().map(|v| head.activate(v)).collect(),
        cache,
    }
}

fn add_scaled(acc: &mut [f64], g: &[f64], s: f64) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
}

fn backprop(
    backbone: &Backbone,
    params: &NetworkParams,
    passes: &[Pass],
    douts: &[Vec<f64>],
    inputs: &[&Volume],
    head: Head,
) -> Vec<Vec<f64>> {
    let mut grads = params.zeros_like();
    for ((pass, dout), x) in passes.iter().zip(douts).zip(inputs) {
        let dlogits = Tensor::from_channel(
            x.shape(),
            dout.iter()
                .zip(&pass.out)
                .map(|(g, &o)| g * head.derivative(o))
                .collect(),
        );
        backbone.backward(params, &pass.cache, &dlogits, &mut grads);
    }
    grads
}

fn all_finite(grads: &[Vec<f64>]) -> bool {
    grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
}

/// `v ← μ v + (g + wd · θ)`, `θ ← θ − lr · v`.
fn sgd(params: &mut NetworkParams, momentum: &mut [Vec<f64>], grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
    for ((t, v), g) in params.tensors.iter_mut().zip(momentum).zip(grads) {
        for ((p, m), &d) in t.data.iter_mut().zip(v.iter_mut()).zip(g) {
            *m = cfg.momentum * *m + d + cfg.weight_decay * *p;
            *p -= lr * *m;
        }
    }
}

fn diverged(t: usize, reason: impl Into<String>) -> DtmlError {
    DtmlError::FatalDivergence {
        iteration: t,
        reason: reason.into(),
    }
}

/// One simultaneous update of both networks. The state is left untouched
/// when the step fails.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    backbone: &Backbone,
) -> Result<LogRow> {
    let t = state.iteration;
    let variant = cfg.variant;
    let lambda = cfg.schedule().weight(t);
    let lr = cfg.lr_at(t);
    let k = cfg.k;
    let coupled = lambda > 0.0 && variant == Variant::Dtml;
    let n_lab = batch.labeled.len();
    if n_lab == 0 {
        return Err(DtmlError::InvalidConfig("batch has no labeled crops".into()));
    }
    let mut inputs: Vec<&Volume> = batch.labeled.iter().map(|c| &c.volume).collect();
    if coupled {
        inputs.extend(batch.unlabeled.iter());
    }
    let n_all = inputs.len() as f64;

    let seg: Vec<Pass> = if variant.trains_seg() {
        inputs.iter().map(|x| run(backbone, &state.params_s, x, Head::Seg)).collect()
    } else {
        Vec::new()
    };
    let dis: Vec<Pass> = if variant.trains_dis() {
        inputs.iter().map(|x| run(backbone, &state.params_d, x, Head::Dis)).collect()
    } else {
        Vec::new()
    };

    let mut row = LogRow {
        iteration: t,
        lr,
        lambda_con: lambda,
        l_seg: 0.0,
        l_md_supervised: 0.0,
        l_con_s: 0.0,
        l_con_d: 0.0,
    };
    let mut dseg: Vec<Vec<f64>> = seg.iter().map(|p| vec![0.0; p.out.len()]).collect();
    let mut ddis: Vec<Vec<f64>> = dis.iter().map(|p| vec![0.0; p.out.len()]).collect();

    for (i, crop) in batch.labeled.iter().enumerate() {
        let target = crop.mask.to_f64();
        if variant.trains_seg() {
            let LossGrad { value, grad } = seg_loss_slices(&seg[i].out, &target);
            row.l_seg += value / n_lab as f64;
            add_scaled(&mut dseg[i], &grad, 1.0 / n_lab as f64);
        }
        if variant.trains_dis() {
            let z = &dis[i].out;
            if cfg.supervised_mode_md.uses_dis() {
                let LossGrad { value, grad } = mse_slices(z, &crop.sdm);
                row.l_md_supervised += value / n_lab as f64;
                add_scaled(&mut ddis[i], &grad, 1.0 / n_lab as f64);
            }
            if cfg.supervised_mode_md.uses_mask() {
                let LossGrad { value, grad } = mask_loss_slices(z, &target, k);
                row.l_md_supervised += value / n_lab as f64;
                add_scaled(&mut ddis[i], &grad, 1.0 / n_lab as f64);
            }
        }
    }
    if coupled {
        // Each network sees the other's output as a constant target.
        for i in 0..inputs.len() {
            let (value, dp, dz) = consistency_slices(&seg[i].out, &dis[i].out, k);
            row.l_con_s += value / n_all;
            row.l_con_d += value / n_all;
            add_scaled(&mut dseg[i], &dp, lambda / n_all);
            add_scaled(&mut ddis[i], &dz, lambda / n_all);
        }
    }
    if ![row.l_seg, row.l_md_supervised, row.l_con_s, row.l_con_d]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(diverged(t, "non-finite loss"));
    }

    let grads_s = variant
        .trains_seg()
        .then(|| backprop(backbone, &state.params_s, &seg, &dseg, &inputs, Head::Seg));
    let grads_d = variant
        .trains_dis()
        .then(|| backprop(backbone, &state.params_d, &dis, &ddis, &inputs, Head::Dis));
    if grads_s.iter().chain(&grads_d).any(|g| !all_finite(g)) {
        return Err(diverged(t, "non-finite gradient"));
    }

    let mut next_s = state.params_s.clone();
    let mut next_d = state.params_d.clone();
    let mut mom_s = state.momentum_s.clone();
    let mut mom_d = state.momentum_d.clone();
    if let Some(g) = &grads_s {
        sgd(&mut next_s, &mut mom_s, g, lr, cfg);
    }
    if let Some(g) = &grads_d {
        sgd(&mut next_d, &mut mom_d, g, lr, cfg);
    }
    if !next_s.is_finite() || !next_d.is_finite() {
        return Err(diverged(t, "non-finite parameter"));
    }
    state.params_s = next_s;
    state.params_d = next_d;
    state.momentum_s = mom_s;
    state.momentum_d = mom_d;
    state.iteration += 1;
    Ok(row)
}

/// Mean Dice of the evaluated head on `cases`.
pub fn mean_dice(params: &NetworkParams, head: Head, cases: &[LabeledCase], cfg: &TrainConfig) -> Result<f64> {
    let reports = evaluate_cases(params, head, cases, &cfg.inference())?;
    Ok(reports.iter().map(|r| r.dice).sum::<f64>() / reports.len().max(1) as f64)
}

/// Best checkpoint found by labeled-set selection.
#[derive(Debug, Clone)]
pub struct Selected {
    pub iteration: usize,
    pub labeled_dice: f64,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub best: Option<Selected>,
}

impl TrainOutcome {
    /// The best checkpoint when selection ran, else the final state.
    pub fn chosen(&self) -> Checkpoint {
        match &self.best {
            Some(b) => b.checkpoint.clone(),
            None => self.state.checkpoint(),
        }
    }
}

/// Writes the loss log as CSV.
pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(LOG_COLUMNS).map_err(|e| csv_err(path, e))?;
    for row in log {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| DtmlError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> DtmlError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DtmlError::io(path, io),
        other => DtmlError::format(path, format!("{other:?}")),
    }
}

/// Output locations of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn final_ckpt(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
    pub fn last_good(&self) -> PathBuf {
        self.dir.join("last_good.ckpt")
    }
    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("loss_log.csv")
    }
}

/// Runs `cfg.total_iterations` steps from a fresh state.
pub fn train(split: &DatasetSplit, cfg: &TrainConfig, out: Option<&TrainOutputs>) -> Result<TrainOutcome> {
    train_from(TrainState::init(cfg)?, split, cfg, out)
}

/// Continues training `state` up to `cfg.total_iterations`. On divergence the
/// last state that completed a step is written to `last_good.ckpt`.
pub fn train_from(
    mut state: TrainState,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    out: Option<&TrainOutputs>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = TrainingData::new(split)?;
    let backbone = Backbone::new(cfg.descriptor)?;
    let schedule = cfg.schedule();
    let head = cfg.variant.eval_head();
    let eval_params = |s: &TrainState| -> NetworkParams {
        match head {
            Head::Seg => s.params_s.clone(),
            Head::Dis => s.params_d.clone(),
        }
    };
    let mut log = Vec::with_capacity(cfg.total_iterations.saturating_sub(state.iteration));
    let mut best: Option<Selected> = None;
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir).map_err(|e| DtmlError::io(&o.dir, e))?;
    }
    while state.iteration < cfg.total_iterations {
        let t = state.iteration;
        let coupled = cfg.variant == Variant::Dtml && schedule.weight(t) > 0.0;
        let batch = data.batch(cfg, t, coupled)?;
        let row = match train_step(&mut state, &batch, cfg, &backbone) {
            Ok(row) => row,
            Err(e) => {
                if let Some(o) = out {
                    state.checkpoint().save(&o.last_good())?;
                    write_log(&o.loss_log(), &log)?;
                }
                return Err(e);
            }
        };
        log.push(row);
        let done = state.iteration;
        if done % 50 == 0 || done == cfg.total_iterations {
            log::info!(
                "iter {done}: lr {:.2e} λ {:.4} seg {:.4} md {:.4} con {:.5}",
                row.lr,
                row.lambda_con,
                row.l_seg,
                row.l_md_supervised,
                row.l_con_s
            );
        }
        if let Some(o) = out {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                state.checkpoint().save(&o.last())?;
            }
        }
        if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.total_iterations) {
            let dice = mean_dice(&eval_params(&state), head, &split.labeled, cfg)?;
            log::info!("iter {done}: labeled Dice {dice:.4}");
            if best.as_ref().map_or(true, |b| dice > b.labeled_dice) {
                best = Some(Selected {
                    iteration: done,
                    labeled_dice: dice,
                    checkpoint: state.checkpoint(),
                });
                if let Some(o) = out {
                    state.checkpoint().save(&o.best())?;
                }
            }
        }
    }
    if let Some(o) = out {
        state.checkpoint().save(&o.final_ckpt())?;
        write_log(&o.loss_log(), &log)?;
    }
    Ok(TrainOutcome { state, log, best })
}
