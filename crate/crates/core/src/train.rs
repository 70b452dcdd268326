//! Pretraining with density selection, then frozen-teacher distillation.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::align::{fca_loss, EmbeddingNet, GeraConfig, GeraPass, ProposalFeatures};
use crate::beams::{apply_variant, default_variants, label_beams, validate_variants, BeamVariantSpec, PointCloud};
use crate::detector::{
    assign_targets, bev_featurize, make_proposals, surrogate_det_loss, GridSpec, ModelConfig, ProposalConfig, RoiSamples,
    RoiTarget, ToyModel,
};
use crate::error::{Error, Result};
use crate::geometry::{Box3D, IouCriterion};
use crate::metrics::{density_sweep_report, SweepRow};
use crate::select::{select_among, SelectionState, DEFAULT_IOU_THRESHOLD};
use crate::synth::{derive_seed, LabeledFrame, VariantSet};

const PROPOSAL_STREAM: u64 = 0x5052_4f50;
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const EMBED_STREAM: u64 = 0x454d_4244;
const EVAL_STREAM: u64 = 0x4556_414c;

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Weight of the feature content term.
    pub alpha: f64,
    /// Weight of the relationship term.
    pub beta: f64,
    pub gera: GeraConfig,
    pub iou_threshold: f64,
    pub variants: Vec<BeamVariantSpec>,
    pub source_beams: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient norm cap; zero disables clipping.
    pub clip_norm: f64,
    pub pretrain_epochs: usize,
    pub distill_epochs: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub grid: GridSpec,
    pub proposals: ProposalConfig,
    pub embed_hidden: usize,
    pub embed_dim: usize,
}

/// The unmodified cloud followed by `{32, 32*, 16, 16*}`.
pub fn training_variants() -> Vec<BeamVariantSpec> {
    let mut v = vec![BeamVariantSpec::new("64", 1, 1)];
    v.extend(default_variants());
    v
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gera: GeraConfig::default(),
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            variants: training_variants(),
            source_beams: 64,
            learning_rate: 0.002,
            momentum: 0.9,
            clip_norm: 1.0,
            pretrain_epochs: 10,
            distill_epochs: 10,
            seed: 0,
            model: ModelConfig::default(),
            grid: GridSpec::default(),
            proposals: ProposalConfig::default(),
            embed_hidden: 32,
            embed_dim: 16,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("loss weights must be finite and non-negative (alpha {}, beta {})", self.alpha, self.beta));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive and finite", self.learning_rate));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return bad(format!("clip norm {} must be finite and non-negative", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return bad(format!("IoU threshold {} outside [0, 1]", self.iou_threshold));
        }
        if self.embed_hidden == 0 || self.embed_dim == 0 {
            return bad("embedding sizes must be positive".into());
        }
        validate_variants(&self.variants)
    }

    pub fn embedding(&self) -> EmbeddingNet {
        EmbeddingNet::seeded(
            self.model.proposal_len(),
            self.embed_hidden,
            self.embed_dim,
            derive_seed(self.seed, EMBED_STREAM),
        )
    }
}

/// Heavy-ball gradient descent: `v <- mu v + g`, `p <- p - lr v`.
#[derive(Debug, Clone, PartialEq)]
///
/// Gradients whose L2 norm exceeds `clip_norm` are rescaled to that norm
/// first (`clip_norm = 0` leaves them alone).
pub struct Momentum {
    pub lr: f64,
    pub mu: f64,
    pub clip_norm: f64,
    pub velocity: Vec<f64>,
}

impl Momentum {
    pub fn new(lr: f64, mu: f64, clip_norm: f64, len: usize) -> Self {
        Self { lr, mu, clip_norm, velocity: vec![0.0; len] }
    }

    pub fn for_config(cfg: &DistillConfig, len: usize) -> Self {
        Self::new(cfg.learning_rate, cfg.momentum, cfg.clip_norm, len)
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.mu * *v + scale * g;
            *p -= self.lr * *v;
        }
    }
}

/// A training frame with its density variants built once, in spec order.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub cloud: PointCloud,
    pub boxes: Vec<Box3D>,
    pub variants: Vec<PointCloud>,
}

/// Builds variants from stored beam labels, or from k-means labels when a
/// frame carries none.
pub fn prepare_frames(frames: &[LabeledFrame], cfg: &DistillConfig) -> Result<Vec<PreparedFrame>> {
    frames
        .par_iter()
        .map(|f| {
            let labels = match &f.beam_labels {
                Some(l) => l.clone(),
                None => label_beams(&f.cloud, cfg.source_beams)?.labels,
            };
            let variants = cfg
                .variants
                .iter()
                .map(|v| apply_variant(&f.cloud, &labels, v).map(|(c, _)| c))
                .collect::<Result<_>>()?;
            Ok(PreparedFrame { cloud: f.cloud.clone(), boxes: f.boxes.clone(), variants })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l_det: f64,
    pub l_fca: f64,
    pub l_gera: f64,
    pub l_overall: f64,
    pub selected_variant: String,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, SHUFFLE_STREAM), epoch as u64)));
    order
}

fn step_rois(frame: &PreparedFrame, cfg: &DistillConfig, stream: u64, step: usize) -> Vec<Box3D> {
    let seed = derive_seed(derive_seed(cfg.seed, stream), step as u64);
    make_proposals(&frame.boxes, &cfg.grid, &cfg.model, &cfg.proposals, seed)
}

/// Surrogate detection loss on one cloud and its parameter gradient.
pub fn det_loss_and_grad(
    model: &ToyModel,
    cloud: &PointCloud,
    rois: &[Box3D],
    targets: &[RoiTarget],
    grid: &GridSpec,
) -> Result<(f64, Vec<f64>)> {
    let pass = model.forward(cloud, rois, grid)?;
    let loss = surrogate_det_loss(&pass.outputs, targets)?;
    Ok((loss.total, model.backward(&pass, &loss.grads, None)))
}

fn select_variant(
    model: &ToyModel,
    frame: &PreparedFrame,
    rois: &[Box3D],
    cfg: &DistillConfig,
    state: &mut SelectionState,
) -> Result<usize> {
    let sel = select_among(
        &frame.variants,
        &cfg.variants,
        &frame.boxes,
        |c| model.detect(c, rois, &cfg.grid),
        IouCriterion::Bev,
        state,
    )?;
    Ok(sel.index)
}

#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub model: ToyModel,
    pub history: Vec<StepRecord>,
    pub selection: SelectionState,
}

/// Trains from the seeded model, replacing every frame by the density
/// variant the current model is least confident on.
pub fn pretrain(frames: &[PreparedFrame], cfg: &DistillConfig) -> Result<PretrainRun> {
    train_detector(frames, cfg, cfg.pretrain_epochs, true)
}

/// Baseline trained on the original clouds only.
pub fn train_source_only(frames: &[PreparedFrame], cfg: &DistillConfig, epochs: usize) -> Result<PretrainRun> {
    train_detector(frames, cfg, epochs, false)
}

fn train_detector(frames: &[PreparedFrame], cfg: &DistillConfig, epochs: usize, augment: bool) -> Result<PretrainRun> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut model = ToyModel::seeded(cfg.model, cfg.seed);
    let mut opt = Momentum::for_config(cfg, model.params.len());
    let mut selection = SelectionState::for_variants(&cfg.variants, cfg.iou_threshold)?;
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..epochs {
        for &fi in &epoch_order(frames.len(), cfg.seed, epoch) {
            let frame = &frames[fi];
            let rois = step_rois(frame, cfg, PROPOSAL_STREAM, step);
            if rois.is_empty() {
                continue;
            }
            let (cloud, name) = if augment {
                let k = select_variant(&model, frame, &rois, cfg, &mut selection)?;
                (&frame.variants[k], cfg.variants[k].name.clone())
            } else {
                (&frame.cloud, format!("{}", cfg.source_beams))
            };
            let targets = assign_targets(&rois, &frame.boxes, cfg.proposals.positive_iou);
            let (loss, grad) = det_loss_and_grad(&model, cloud, &rois, &targets, &cfg.grid)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
            opt.step(&mut model.params, &grad);
            history.push(StepRecord {
                step,
                l_det: loss,
                l_fca: 0.0,
                l_gera: 0.0,
                l_overall: loss,
                selected_variant: name,
            });
            step += 1;
        }
    }
    Ok(PretrainRun { model, history, selection })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillLosses {
    pub l_det: f64,
    pub l_fca: f64,
    pub l_gera: f64,
    pub l_overall: f64,
    /// Gradient of the overall loss w.r.t. the student parameters.
    pub grad: Vec<f64>,
}

/// `L_det + alpha L_FCA + beta L_GERA` for one frame. The teacher sees the
/// original cloud, the student the augmented one; both share `rois`.
#[allow(clippy::too_many_arguments)]
pub fn distill_losses(
    teacher: &ToyModel,
    student: &ToyModel,
    embed: &EmbeddingNet,
    original: &PointCloud,
    augmented: &PointCloud,
    rois: &[Box3D],
    targets: &[RoiTarget],
    cfg: &DistillConfig,
) -> Result<DistillLosses> {
    let t_pass = teacher.forward(original, rois, &cfg.grid)?;
    let bev = bev_featurize(augmented, &cfg.grid)?;
    let samples = student.sample_rois(&bev, rois)?;
    distill_objective(&t_pass.features, student, embed, samples, rois, targets, cfg)
}

/// The overall loss from already-sampled student inputs and fixed teacher
/// features.
pub fn distill_objective(
    teacher_features: &ProposalFeatures,
    student: &ToyModel,
    embed: &EmbeddingNet,
    samples: RoiSamples,
    rois: &[Box3D],
    targets: &[RoiTarget],
    cfg: &DistillConfig,
) -> Result<DistillLosses> {
    let s_pass = student.forward_samples(samples, rois);
    let det = surrogate_det_loss(&s_pass.outputs, targets)?;
    let fca = fca_loss(teacher_features, &s_pass.features)?;
    let mut gera = GeraPass::new();
    let l_gera = gera.forward(embed, teacher_features, &s_pass.features, &cfg.gera)?;
    let gg = gera.backward(embed, 1.0)?;
    let feature_grad: Vec<f64> =
        fca.grad.iter().zip(&gg.features).map(|(f, g)| cfg.alpha * f + cfg.beta * g).collect();
    let grad = student.backward(&s_pass, &det.grads, Some(&feature_grad));
    Ok(DistillLosses {
        l_det: det.total,
        l_fca: fca.loss,
        l_gera,
        l_overall: det.total + cfg.alpha * fca.loss + cfg.beta * l_gera,
        grad,
    })
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: ToyModel,
    pub teacher: ToyModel,
    pub teacher_checksum: [u8; 32],
    pub embed: EmbeddingNet,
    pub selection: SelectionState,
    pub optimizer: Momentum,
    pub step: usize,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    /// Student starts as a copy of the frozen teacher.
    pub fn new(teacher: ToyModel, cfg: &DistillConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            student: teacher.clone(),
            teacher_checksum: teacher.checksum(),
            optimizer: Momentum::for_config(cfg, teacher.params.len()),
            teacher,
            embed: cfg.embedding(),
            selection: SelectionState::for_variants(&cfg.variants, cfg.iou_threshold)?,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn teacher_intact(&self) -> bool {
        self.teacher.checksum() == self.teacher_checksum
    }
}

/// One distillation step on `frame`; only the student moves.
pub fn distill_step(state: &mut TrainState, frame: &PreparedFrame, cfg: &DistillConfig) -> Result<StepRecord> {
    let step = state.step;
    let rois = step_rois(frame, cfg, PROPOSAL_STREAM ^ 1, step);
    if rois.is_empty() {
        return Err(Error::EmptyScene);
    }
    let k = select_variant(&state.student, frame, &rois, cfg, &mut state.selection)?;
    let targets = assign_targets(&rois, &frame.boxes, cfg.proposals.positive_iou);
    let l = distill_losses(
        &state.teacher,
        &state.student,
        &state.embed,
        &frame.cloud,
        &frame.variants[k],
        &rois,
        &targets,
        cfg,
    )?;
    if !l.l_overall.is_finite() || l.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss { step });
    }
    state.optimizer.step(&mut state.student.params, &l.grad);
    let rec = StepRecord {
        step,
        l_det: l.l_det,
        l_fca: l.l_fca,
        l_gera: l.l_gera,
        l_overall: l.l_overall,
        selected_variant: cfg.variants[k].name.clone(),
    };
    state.history.push(rec.clone());
    state.step += 1;
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone)]
pub struct DistillRun {
    pub state: TrainState,
    pub epochs: Vec<EpochReport>,
}

/// Distills for `cfg.distill_epochs` epochs, evaluating the student on
/// `eval_sets` after each epoch when given.
pub fn run_distillation(
    teacher: ToyModel,
    frames: &[PreparedFrame],
    eval_sets: Option<&[VariantSet]>,
    cfg: &DistillConfig,
) -> Result<DistillRun> {
    if frames.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut state = TrainState::new(teacher, cfg)?;
    let mut epochs = Vec::new();
    for epoch in 0..cfg.distill_epochs {
        for &fi in &epoch_order(frames.len(), cfg.seed ^ 1, epoch) {
            if frames[fi].boxes.is_empty() {
                continue;
            }
            distill_step(&mut state, &frames[fi], cfg)?;
        }
        if let Some(sets) = eval_sets {
            let rows = density_sweep_report(&state.student, sets, &cfg.grid, &cfg.proposals, eval_seed(cfg))?;
            epochs.push(EpochReport { epoch, rows });
        }
    }
    Ok(DistillRun { state, epochs })
}

pub fn eval_seed(cfg: &DistillConfig) -> u64 {
    derive_seed(cfg.seed, EVAL_STREAM)
}

pub fn history_csv(history: &[StepRecord]) -> String {
    let mut s = String::from("step,L_det,L_FCA,L_GERA,L_overall,selected_variant\n");
    for r in history {
        writeln!(s, "{},{},{},{},{},{}", r.step, r.l_det, r.l_fca, r.l_gera, r.l_overall, r.selected_variant).unwrap();
    }
    s
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[StepRecord]) -> Result<()> {
    std::fs::write(path, history_csv(history))?;
    Ok(())
}

pub fn epoch_csv(epochs: &[EpochReport]) -> String {
    let mut s = String::from("epoch,variant_name,ap_bev,ap_3d,num_gt,num_pred\n");
    for e in epochs {
        for r in &e.rows {
            writeln!(s, "{},{},{:.6},{:.6},{},{}", e.epoch, r.variant_name, r.ap_bev, r.ap_3d, r.num_gt, r.num_pred)
                .unwrap();
        }
    }
    s
}
