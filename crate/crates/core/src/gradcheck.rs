//! Central finite-difference checks of every analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{fca_loss, EmbeddingNet, GeraConfig, GeraPass, ProposalFeatures};
use crate::detector::{
    surrogate_det_loss, ModelConfig, RoiSamples, RoiTarget, ToyModel, BEV_CHANNELS, RESIDUAL_DIM, SMOOTH_L1_BETA,
};
use crate::error::Result;
use crate::geometry::Box3D;
use crate::synth::derive_seed;
use crate::train::{distill_objective, DistillConfig};

pub const STEP: f64 = 1e-3;
/// Denominator floor for the relative error, so entries that are zero in
/// both gradients compare by absolute error.
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
const KNEE_MARGIN: f64 = 0.03;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between `analytic` and the five-point central
/// difference of `f` around `x`.
pub fn max_relative_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let mut at = |t: f64| {
            probe[k] = x[k] + t * STEP;
            f(&probe)
        };
        let numeric = (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * STEP);
        probe[k] = x[k];
        worst = worst.max(relative_error(analytic[k], numeric));
    }
    worst
}

/// One random problem: a model, an embedding net, teacher features and
/// student lattice samples for `n` ROIs.
#[derive(Debug, Clone)]
pub struct GradProblem {
    pub model: ToyModel,
    pub embed: EmbeddingNet,
    pub teacher: ProposalFeatures,
    pub student: ProposalFeatures,
    pub samples: RoiSamples,
    pub rois: Vec<Box3D>,
    pub targets: Vec<RoiTarget>,
    pub cfg: DistillConfig,
}

impl GradProblem {
    pub fn random(seed: u64, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model_cfg = ModelConfig { m: 8, h: 4, w: 4, roi_context: 1.5 };
        let mut model = ToyModel::seeded(model_cfg, derive_seed(seed, 1));
        for p in &mut model.params {
            *p += rng.random_range(-0.2..0.2);
        }
        let d = model_cfg.proposal_len();
        let cfg = DistillConfig {
            alpha: rng.random_range(0.1..2.0),
            beta: rng.random_range(0.1..2.0),
            gera: GeraConfig::default(),
            model: model_cfg,
            embed_hidden: 12,
            embed_dim: 6,
            ..DistillConfig::default()
        };
        let embed = EmbeddingNet::seeded(d, cfg.embed_hidden, cfg.embed_dim, derive_seed(seed, 2));
        let rois: Vec<Box3D> = (0..n)
            .map(|_| {
                Box3D::new(
                    [rng.random_range(5.0..40.0), rng.random_range(-15.0..15.0), rng.random_range(-1.2..-0.6)],
                    [rng.random_range(3.5..5.0), rng.random_range(1.5..2.1), rng.random_range(1.3..1.8)],
                    rng.random_range(-3.1..3.1),
                )
            })
            .collect();
        let sites = (0..n * model_cfg.h * model_cfg.w)
            .map(|_| {
                let mut s = [0.0; BEV_CHANNELS];
                s[0] = rng.random_range(0.0..3.0);
                s[1] = rng.random_range(-1.8..0.0);
                s[2] = s[1] + rng.random_range(0.0..0.5);
                s[3] = rng.random_range(0.0..1.0);
                s
            })
            .collect();
        let samples = RoiSamples { n, sites };
        let student = model.features_from_samples(&samples, &rois);
        let mut teacher = student.clone();
        for v in &mut teacher.data {
            *v = rng.random_range(-0.95..0.95);
        }
        // regression errors stay clear of the smooth-L1 knee at |x| = beta
        let outputs = model.head(&student);
        let targets = outputs
            .iter()
            .enumerate()
            .map(|(i, out)| {
                if rng.random_bool(0.6) {
                    let mut r = [0.0; RESIDUAL_DIM];
                    for (k, v) in r.iter_mut().enumerate() {
                        let gap = if rng.random_bool(0.5) {
                            rng.random_range(0.0..SMOOTH_L1_BETA - KNEE_MARGIN)
                        } else {
                            rng.random_range(SMOOTH_L1_BETA + KNEE_MARGIN..0.6)
                        };
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        *v = out.residual[k] - sign * gap;
                    }
                    RoiTarget { gt_index: Some(i), residual: Some(r) }
                } else {
                    RoiTarget { gt_index: None, residual: None }
                }
            })
            .collect();
        Self { model, embed, teacher, student, samples, rois, targets, cfg }
    }

    fn with_student(&self, data: &[f64]) -> ProposalFeatures {
        ProposalFeatures { data: data.to_vec(), ..self.student.clone() }
    }

    fn with_params(&self, params: &[f64]) -> ToyModel {
        ToyModel { cfg: self.model.cfg, params: params.to_vec() }
    }

    pub fn check_fca(&self) -> Result<f64> {
        let lg = fca_loss(&self.teacher, &self.student)?;
        let f = |x: &[f64]| fca_loss(&self.teacher, &self.with_student(x)).map(|l| l.loss).unwrap_or(f64::NAN);
        Ok(max_relative_error(f, &self.student.data, &lg.grad))
    }

    pub fn check_gera(&self) -> Result<f64> {
        let mut pass = GeraPass::new();
        pass.forward(&self.embed, &self.teacher, &self.student, &self.cfg.gera)?;
        let g = pass.backward(&self.embed, 1.0)?;
        let f = |x: &[f64]| {
            GeraPass::new().forward(&self.embed, &self.teacher, &self.with_student(x), &self.cfg.gera).unwrap_or(f64::NAN)
        };
        Ok(max_relative_error(f, &self.student.data, &g.features))
    }

    pub fn check_det(&self) -> Result<f64> {
        let pass = self.model.forward_samples(self.samples.clone(), &self.rois);
        let loss = surrogate_det_loss(&pass.outputs, &self.targets)?;
        let grad = self.model.backward(&pass, &loss.grads, None);
        let f = |p: &[f64]| {
            let pass = self.with_params(p).forward_samples(self.samples.clone(), &self.rois);
            surrogate_det_loss(&pass.outputs, &self.targets).map(|l| l.total).unwrap_or(f64::NAN)
        };
        Ok(max_relative_error(f, &self.model.params, &grad))
    }

    pub fn check_overall(&self) -> Result<f64> {
        let objective = |m: &ToyModel| {
            distill_objective(&self.teacher, m, &self.embed, self.samples.clone(), &self.rois, &self.targets, &self.cfg)
        };
        let l = objective(&self.model)?;
        let f = |p: &[f64]| objective(&self.with_params(p)).map(|l| l.l_overall).unwrap_or(f64::NAN);
        Ok(max_relative_error(f, &self.model.params, &l.grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SuiteReport {
    pub configs: usize,
    pub fca: f64,
    pub gera: f64,
    pub det: f64,
    pub overall: f64,
}

impl SuiteReport {
    pub fn worst(&self) -> f64 {
        self.fca.max(self.gera).max(self.det).max(self.overall)
    }

    pub fn passed(&self) -> bool {
        self.worst() < TOLERANCE
    }
}

/// Runs `configs` random problems with `N_r` cycling through 1..=6 and
/// reports the worst relative error per loss.
pub fn run_suite(seed: u64, configs: usize) -> Result<SuiteReport> {
    let mut rep = SuiteReport { configs, ..SuiteReport::default() };
    for c in 0..configs {
        let p = GradProblem::random(derive_seed(seed, c as u64), 1 + c % 6);
        rep.fca = rep.fca.max(p.check_fca()?);
        rep.gera = rep.gera.max(p.check_gera()?);
        rep.det = rep.det.max(p.check_det()?);
        rep.overall = rep.overall.max(p.check_overall()?);
    }
    Ok(rep)
}
