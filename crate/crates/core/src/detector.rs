//! A deliberately small two-stage BEV detector.
//!
//! The point cloud is rasterized into a bird's-eye-view grid of per-cell
//! statistics. Each region of interest is resampled onto an `H x W` lattice in
//! its own frame (nearest cell), every lattice site goes through one shared
//! `tanh(W x + b)` layer, and two linear heads read the flattened block: a
//! 7-dof box residual w.r.t. the ROI and a confidence logit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::align::ProposalFeatures;
use crate::beams::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{bev_iou, normalize_angle, Box3D, Detection};

/// Normalized count, mean z, max z, mean intensity.
pub const BEV_CHANNELS: usize = 4;
/// Box residual: local dx, dy, dz, log l, log w, log h, dyaw.
pub const RESIDUAL_DIM: usize = 7;
pub const SMOOTH_L1_BETA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell: f64,
    /// Multiplier applied to the raw point count of a cell.
    pub count_scale: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { x_min: 0.0, x_max: 70.4, y_min: -40.0, y_max: 40.0, cell: 0.2, count_scale: 1.0 }
    }
}

impl GridSpec {
    pub fn dims(&self) -> Result<(usize, usize)> {
        let cells = |lo: f64, hi: f64| -> Option<usize> {
            let n = (hi - lo) / self.cell;
            let r = n.round();
            (self.cell > 0.0 && r >= 1.0 && (n - r).abs() < 1e-9).then_some(r as usize)
        };
        match (cells(self.x_min, self.x_max), cells(self.y_min, self.y_max)) {
            (Some(nx), Some(ny)) => Ok((nx, ny)),
            _ => Err(Error::EmptyGridSpec),
        }
    }

    /// Cell containing `(x, y)`, if inside the extent.
    pub fn cell_of(&self, x: f64, y: f64, nx: usize, ny: usize) -> Option<(usize, usize)> {
        let fx = ((x - self.x_min) / self.cell).floor();
        let fy = ((y - self.y_min) / self.cell).floor();
        if fx < 0.0 || fy < 0.0 || fx >= nx as f64 || fy >= ny as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub spec: GridSpec,
    pub nx: usize,
    pub ny: usize,
    /// `[iy][ix][channel]`.
    pub data: Vec<f64>,
}

impl BevGrid {
    pub fn cell(&self, ix: usize, iy: usize) -> &[f64] {
        let k = (iy * self.nx + ix) * BEV_CHANNELS;
        &self.data[k..k + BEV_CHANNELS]
    }
}

/// Per-cell statistics. Points outside the extent are ignored. Sums are
/// taken in a canonical per-cell order so the result does not depend on the
/// order of the input points.
pub fn bev_featurize(cloud: &PointCloud, spec: &GridSpec) -> Result<BevGrid> {
    let (nx, ny) = spec.dims()?;
    let mut entries: Vec<(usize, f64, f64)> = cloud
        .points
        .iter()
        .filter_map(|p| spec.cell_of(p.x, p.y, nx, ny).map(|(ix, iy)| (iy * nx + ix, p.z, p.intensity)))
        .collect();
    entries.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.total_cmp(&b.2)));

    let mut data = vec![0.0; nx * ny * BEV_CHANNELS];
    let mut start = 0;
    while start < entries.len() {
        let cell = entries[start].0;
        let mut end = start;
        let (mut sz, mut si, mut zmax) = (0.0, 0.0, f64::NEG_INFINITY);
        while end < entries.len() && entries[end].0 == cell {
            sz += entries[end].1;
            si += entries[end].2;
            zmax = zmax.max(entries[end].1);
            end += 1;
        }
        let count = (end - start) as f64;
        let out = &mut data[cell * BEV_CHANNELS..(cell + 1) * BEV_CHANNELS];
        out[0] = count * spec.count_scale;
        out[1] = sz / count;
        out[2] = zmax;
        out[3] = si / count;
        start = end;
    }
    Ok(BevGrid { spec: *spec, nx, ny, data })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Feature width `M`.
    pub m: usize,
    /// Lattice rows along the ROI length.
    pub h: usize,
    /// Lattice columns along the ROI width.
    pub w: usize,
    /// Footprint scale applied to the ROI before resampling.
    pub roi_context: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { m: 8, h: 16, w: 8, roi_context: 1.5 }
    }
}

impl ModelConfig {
    pub fn proposal_len(&self) -> usize {
        self.h * self.w * self.m
    }

    pub fn param_count(&self) -> usize {
        let d = self.proposal_len();
        self.m * BEV_CHANNELS + self.m + RESIDUAL_DIM * d + RESIDUAL_DIM + d + 1
    }

    pub fn describe(&self) -> String {
        format!(
            "toy-bev-v1 c={} m={} h={} w={} ctx={:?}",
            BEV_CHANNELS, self.m, self.h, self.w, self.roi_context
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    bf: usize,
    wr: usize,
    br: usize,
    wc: usize,
    bc: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub cfg: ModelConfig,
    pub params: Vec<f64>,
}

/// Raw BEV channels at each lattice site, `N_r x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSamples {
    pub n: usize,
    pub sites: Vec<[f64; BEV_CHANNELS]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    pub residual: [f64; RESIDUAL_DIM],
    pub logit: f64,
}

impl HeadOutput {
    pub fn confidence(&self) -> f64 {
        sigmoid(self.logit)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub samples: RoiSamples,
    pub features: ProposalFeatures,
    pub outputs: Vec<HeadOutput>,
}

impl ToyModel {
    pub fn zeros(cfg: ModelConfig) -> Self {
        Self { cfg, params: vec![0.0; cfg.param_count()] }
    }

    pub fn seeded(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeros(cfg);
        let l = model.layout();
        let p = &mut model.params;
        p[..l.bf].iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        p[l.bf..l.wr].iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        p[l.wr..l.br].iter_mut().for_each(|v| *v = rng.random_range(-0.01..0.01));
        p[l.wc..l.bc].iter_mut().for_each(|v| *v = rng.random_range(-0.01..0.01));
        model
    }

    fn layout(&self) -> Layout {
        let m = self.cfg.m;
        let d = self.cfg.proposal_len();
        let bf = m * BEV_CHANNELS;
        let wr = bf + m;
        let br = wr + RESIDUAL_DIM * d;
        let wc = br + RESIDUAL_DIM;
        let bc = wc + d;
        Layout { bf, wr, br, wc, bc }
    }

    /// Resamples each ROI's footprint (scaled by the context factor) onto the
    /// lattice, reading the nearest grid cell.
    pub fn sample_rois(&self, grid: &BevGrid, rois: &[Box3D]) -> Result<RoiSamples> {
        let (h, w, ctx) = (self.cfg.h, self.cfg.w, self.cfg.roi_context);
        let mut sites = Vec::with_capacity(rois.len() * h * w);
        for (i, roi) in rois.iter().enumerate() {
            let (s, c) = roi.yaw.sin_cos();
            for a in 0..h {
                let u = ((a as f64 + 0.5) / h as f64 - 0.5) * roi.length() * ctx;
                for b in 0..w {
                    let v = ((b as f64 + 0.5) / w as f64 - 0.5) * roi.width() * ctx;
                    let x = roi.center[0] + c * u - s * v;
                    let y = roi.center[1] + s * u + c * v;
                    let (ix, iy) = grid.spec.cell_of(x, y, grid.nx, grid.ny).ok_or(Error::RoiOutOfExtent(i))?;
                    let mut site = [0.0; BEV_CHANNELS];
                    site.copy_from_slice(grid.cell(ix, iy));
                    sites.push(site);
                }
            }
        }
        Ok(RoiSamples { n: rois.len(), sites })
    }

    /// Shared per-site feature layer.
    pub fn features_from_samples(&self, samples: &RoiSamples, rois: &[Box3D]) -> ProposalFeatures {
        let m = self.cfg.m;
        let p = &self.params;
        let bf = self.layout().bf;
        let mut f = ProposalFeatures::zeros(samples.n, self.cfg.h, self.cfg.w, m, rois.to_vec());
        for (s, x) in samples.sites.iter().enumerate() {
            for k in 0..m {
                let row = &p[k * BEV_CHANNELS..(k + 1) * BEV_CHANNELS];
                let pre = p[bf + k] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                f.data[s * m + k] = pre.tanh();
            }
        }
        f
    }

    pub fn roi_features(&self, grid: &BevGrid, rois: &[Box3D]) -> Result<(ProposalFeatures, RoiSamples)> {
        let samples = self.sample_rois(grid, rois)?;
        Ok((self.features_from_samples(&samples, rois), samples))
    }

    pub fn head(&self, features: &ProposalFeatures) -> Vec<HeadOutput> {
        let l = self.layout();
        let d = self.cfg.proposal_len();
        let p = &self.params;
        (0..features.n)
            .map(|i| {
                let z = features.proposal(i);
                let mut residual = [0.0; RESIDUAL_DIM];
                for (o, r) in residual.iter_mut().enumerate() {
                    let row = &p[l.wr + o * d..l.wr + (o + 1) * d];
                    *r = p[l.br + o] + row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
                }
                let logit = p[l.bc] + p[l.wc..l.bc].iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
                HeadOutput { residual, logit }
            })
            .collect()
    }

    pub fn forward_samples(&self, samples: RoiSamples, rois: &[Box3D]) -> ForwardPass {
        let features = self.features_from_samples(&samples, rois);
        let outputs = self.head(&features);
        ForwardPass { samples, features, outputs }
    }

    pub fn forward(&self, cloud: &PointCloud, rois: &[Box3D], grid: &GridSpec) -> Result<ForwardPass> {
        let bev = bev_featurize(cloud, grid)?;
        let samples = self.sample_rois(&bev, rois)?;
        Ok(self.forward_samples(samples, rois))
    }

    /// Back-propagates head gradients (and optionally an extra gradient on
    /// the proposal features) into a fresh parameter gradient.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        head_grads: &[HeadOutput],
        feature_grad: Option<&[f64]>,
    ) -> Vec<f64> {
        let l = self.layout();
        let d = self.cfg.proposal_len();
        let m = self.cfg.m;
        let p = &self.params;
        let mut g = vec![0.0; p.len()];
        let mut dz = match feature_grad {
            Some(fg) => fg.to_vec(),
            None => vec![0.0; pass.features.data.len()],
        };
        for (i, hg) in head_grads.iter().enumerate() {
            let z = pass.features.proposal(i);
            let dzi = &mut dz[i * d..(i + 1) * d];
            for o in 0..RESIDUAL_DIM {
                let go = hg.residual[o];
                if go == 0.0 {
                    continue;
                }
                g[l.br + o] += go;
                let row = l.wr + o * d;
                for k in 0..d {
                    g[row + k] += go * z[k];
                    dzi[k] += go * p[row + k];
                }
            }
            if hg.logit != 0.0 {
                g[l.bc] += hg.logit;
                for k in 0..d {
                    g[l.wc + k] += hg.logit * z[k];
                    dzi[k] += hg.logit * p[l.wc + k];
                }
            }
        }
        for (s, x) in pass.samples.sites.iter().enumerate() {
            for k in 0..m {
                let f = pass.features.data[s * m + k];
                let delta = dz[s * m + k] * (1.0 - f * f);
                if delta == 0.0 {
                    continue;
                }
                g[l.bf + k] += delta;
                for (c, xc) in x.iter().enumerate() {
                    g[k * BEV_CHANNELS + c] += delta * xc;
                }
            }
        }
        g
    }

    pub fn detect(&self, cloud: &PointCloud, rois: &[Box3D], grid: &GridSpec) -> Result<Vec<Detection>> {
        let pass = self.forward(cloud, rois, grid)?;
        Ok(rois.iter().zip(&pass.outputs).map(|(r, o)| decode(r, o)).collect())
    }

    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint { config_hash: config_hash(&self.cfg.describe()), params: self.params.clone() }
    }

    pub fn from_checkpoint(cfg: ModelConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config_hash != config_hash(&cfg.describe()) {
            return Err(Error::Checkpoint(format!("config hash does not match `{}`", cfg.describe())));
        }
        if ckpt.params.len() != cfg.param_count() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                cfg.param_count(),
                ckpt.params.len()
            )));
        }
        Ok(Self { cfg, params: ckpt.params.clone() })
    }
}

/// Residual of `gt` relative to `roi`, with the planar offset in the ROI frame.
pub fn encode_residual(roi: &Box3D, gt: &Box3D) -> [f64; RESIDUAL_DIM] {
    let [u, v, dz] = roi.to_local(gt.center[0], gt.center[1], gt.center[2]);
    [
        u,
        v,
        dz,
        (gt.size[0] / roi.size[0]).ln(),
        (gt.size[1] / roi.size[1]).ln(),
        (gt.size[2] / roi.size[2]).ln(),
        normalize_angle(gt.yaw - roi.yaw),
    ]
}

pub fn decode_box(roi: &Box3D, r: &[f64; RESIDUAL_DIM]) -> Box3D {
    let (s, c) = roi.yaw.sin_cos();
    let size = [
        roi.size[0] * r[3].clamp(-5.0, 5.0).exp(),
        roi.size[1] * r[4].clamp(-5.0, 5.0).exp(),
        roi.size[2] * r[5].clamp(-5.0, 5.0).exp(),
    ];
    Box3D::new(
        [roi.center[0] + c * r[0] - s * r[1], roi.center[1] + s * r[0] + c * r[1], roi.center[2] + r[2]],
        size,
        roi.yaw + r[6],
    )
}

pub fn decode(roi: &Box3D, out: &HeadOutput) -> Detection {
    Detection { bbox: decode_box(roi, &out.residual), confidence: out.confidence() }
}

/// Training target for one ROI: the residual to its assigned ground truth,
/// or `None` for background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiTarget {
    pub gt_index: Option<usize>,
    pub residual: Option<[f64; RESIDUAL_DIM]>,
}

/// Assigns each ROI to the ground truth of highest BEV IoU when that IoU
/// reaches `positive_iou`.
pub fn assign_targets(rois: &[Box3D], gts: &[Box3D], positive_iou: f64) -> Vec<RoiTarget> {
    rois.iter()
        .map(|roi| {
            let best = gts
                .iter()
                .enumerate()
                .map(|(i, g)| (i, bev_iou(roi, g)))
                .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                    Some((_, b)) if b >= v => acc,
                    _ => Some((i, v)),
                });
            match best {
                Some((i, iou)) if iou >= positive_iou && iou > 0.0 => {
                    RoiTarget { gt_index: Some(i), residual: Some(encode_residual(roi, &gts[i])) }
                }
                _ => RoiTarget { gt_index: None, residual: None },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetLoss {
    pub total: f64,
    pub regression: f64,
    pub confidence: f64,
    /// d total / d head outputs, one per ROI.
    pub grads: Vec<HeadOutput>,
}

fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Stand-in detection loss: smooth-L1 on residuals of positive ROIs
/// (averaged over positives) plus binary cross-entropy on every confidence
/// (averaged over ROIs).
pub fn surrogate_det_loss(outputs: &[HeadOutput], targets: &[RoiTarget]) -> Result<DetLoss> {
    if outputs.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!("{} outputs for {} targets", outputs.len(), targets.len())));
    }
    let n = outputs.len();
    let positives = targets.iter().filter(|t| t.residual.is_some()).count();
    let mut grads = vec![HeadOutput { residual: [0.0; RESIDUAL_DIM], logit: 0.0 }; n];
    let (mut regression, mut confidence) = (0.0, 0.0);
    for ((out, t), g) in outputs.iter().zip(targets).zip(grads.iter_mut()) {
        if let Some(res) = t.residual {
            for k in 0..RESIDUAL_DIM {
                let (v, dv) = smooth_l1(out.residual[k] - res[k], SMOOTH_L1_BETA);
                regression += v / positives as f64;
                g.residual[k] = dv / positives as f64;
            }
        }
        let y = if t.residual.is_some() { 1.0 } else { 0.0 };
        confidence += (softplus(out.logit) - y * out.logit) / n as f64;
        g.logit = (sigmoid(out.logit) - y) / n as f64;
    }
    Ok(DetLoss { total: regression + confidence, regression, confidence, grads })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    pub center_jitter: f64,
    pub yaw_jitter: f64,
    /// Background ROIs added per frame.
    pub distractors: usize,
    pub distractor_size: [f64; 3],
    pub distractor_z: f64,
    pub positive_iou: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            center_jitter: 0.3,
            yaw_jitter: 0.1,
            distractors: 4,
            distractor_size: [4.2, 1.8, 1.6],
            distractor_z: -0.93,
            positive_iou: 0.25,
        }
    }
}

/// Jittered ground-truth ROIs (center within `+-center_jitter` m in x and y,
/// yaw within `+-yaw_jitter`) followed by background ROIs placed away from
/// every ground truth. All ROIs keep their resampling lattice inside the grid.
pub fn make_proposals(
    gts: &[Box3D],
    grid: &GridSpec,
    model: &ModelConfig,
    cfg: &ProposalConfig,
    seed: u64,
) -> Vec<Box3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rois: Vec<Box3D> = gts
        .iter()
        .map(|g| {
            let jx = cfg.center_jitter * rng.random_range(-1.0..=1.0);
            let jy = cfg.center_jitter * rng.random_range(-1.0..=1.0);
            let jr = cfg.yaw_jitter * rng.random_range(-1.0..=1.0);
            Box3D::new([g.center[0] + jx, g.center[1] + jy, g.center[2]], g.size, g.yaw + jr)
        })
        .collect();
    let [l, w, _] = cfg.distractor_size;
    let margin = 0.5 * l.hypot(w) * model.roi_context + grid.cell;
    if grid.x_max - grid.x_min <= 2.0 * margin || grid.y_max - grid.y_min <= 2.0 * margin {
        return rois;
    }
    for _ in 0..cfg.distractors {
        for _attempt in 0..50 {
            let cand = Box3D::new(
                [
                    rng.random_range(grid.x_min + margin..grid.x_max - margin),
                    rng.random_range(grid.y_min + margin..grid.y_max - margin),
                    cfg.distractor_z,
                ],
                cfg.distractor_size,
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            if gts.iter().all(|g| bev_iou(&cand, g) == 0.0) {
                rois.push(cand);
                break;
            }
        }
    }
    rois
}

/// First 8 bytes of SHA-256 over a model description string.
pub fn config_hash(description: &str) -> [u8; 8] {
    let digest = Sha256::digest(description.as_bytes());
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSF1";

/// On-disk parameter vector: `LSF1`, 8-byte config hash, little-endian u64
/// parameter count, then little-endian f64 parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 8],
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing LSF1 header".into()));
        }
        let mut config_hash = [0u8; 8];
        config_hash.copy_from_slice(&bytes[4..12]);
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() != count.saturating_mul(8) {
            return Err(Error::Checkpoint(format!("header says {count} parameters, body has {} bytes", body.len())));
        }
        let params = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { config_hash, params })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
