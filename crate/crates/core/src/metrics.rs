//! Average precision over 40 recall positions and the closed-gap ratio.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::detector::{make_proposals, GridSpec, ProposalConfig, ToyModel};
use crate::error::{Error, Result};
use crate::geometry::{bev_iou, iou_3d, Box3D, Detection, IouCriterion};
use crate::synth::{derive_seed, LabeledFrame, VariantSet};

pub const AP_IOU_THRESHOLD: f64 = 0.7;
pub const RECALL_POSITIONS: usize = 40;

/// Predictions and ground truth of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameDetections {
    pub preds: Vec<Detection>,
    pub gts: Vec<Box3D>,
}

fn iou(a: &Box3D, b: &Box3D, criterion: IouCriterion) -> f64 {
    match criterion {
        IouCriterion::Bev => bev_iou(a, b),
        IouCriterion::ThreeD => iou_3d(a, b),
    }
}

/// All predictions as `(frame, index)`, highest confidence first; ties go to
/// the earlier frame, then the earlier index.
pub fn ranked_predictions(frames: &[FrameDetections]) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fd)| (0..fd.preds.len()).map(move |i| (f, i)))
        .collect();
    order.sort_by(|a, b| {
        let ca = frames[a.0].preds[a.1].confidence;
        let cb = frames[b.0].preds[b.1].confidence;
        cb.total_cmp(&ca).then(a.cmp(b))
    });
    order
}

/// True-positive flags in ranked order. Each prediction takes the unused
/// ground truth of its frame with the highest IoU, provided the IoU exceeds
/// `iou_th`.
pub fn greedy_assign(frames: &[FrameDetections], iou_th: f64, criterion: IouCriterion) -> Vec<bool> {
    let order = ranked_predictions(frames);
    let mut used: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gts.len()]).collect();
    order
        .iter()
        .map(|&(f, i)| {
            let pred = &frames[f].preds[i].bbox;
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in frames[f].gts.iter().enumerate() {
                if used[f][g] {
                    continue;
                }
                let v = iou(pred, gt, criterion);
                if v > iou_th && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    used[f][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Interpolated precision at recall `i/40` for `i = 1..=40`: the best
/// precision over all ranks whose recall reaches that level.
pub fn sampled_precisions(frames: &[FrameDetections], iou_th: f64, criterion: IouCriterion) -> [f64; RECALL_POSITIONS] {
    let num_gt: usize = frames.iter().map(|f| f.gts.len()).sum();
    let mut out = [0.0; RECALL_POSITIONS];
    if num_gt == 0 {
        return out;
    }
    let flags = greedy_assign(frames, iou_th, criterion);
    let mut tps = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for hit in &flags {
        tp += usize::from(*hit);
        tps.push(tp);
    }
    let mut suffix_max = vec![0.0f64; tps.len()];
    let mut run = 0.0f64;
    for k in (0..tps.len()).rev() {
        run = run.max(tps[k] as f64 / (k + 1) as f64);
        suffix_max[k] = run;
    }
    let mut k = 0;
    for level in 1..=RECALL_POSITIONS {
        while k < tps.len() && tps[k] * RECALL_POSITIONS < level * num_gt {
            k += 1;
        }
        if k == tps.len() {
            break;
        }
        out[level - 1] = suffix_max[k];
    }
    out
}

/// AP@R40 as a percentage; zero when there is no ground truth.
pub fn average_precision_r40(frames: &[FrameDetections], iou_th: f64, criterion: IouCriterion) -> f64 {
    let p = sampled_precisions(frames, iou_th, criterion);
    100.0 * p.iter().sum::<f64>() / RECALL_POSITIONS as f64
}

/// Share of the source-to-oracle gap recovered by a model, in percent.
pub fn closed_gap(ap_model: f64, ap_source_only: f64, ap_oracle: f64) -> Result<f64> {
    let denom = ap_oracle - ap_source_only;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::DegenerateGap(denom));
    }
    Ok((ap_model - ap_source_only) / denom * 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub ap_bev: f64,
    pub ap_3d: f64,
    pub num_gt: usize,
    pub num_pred: usize,
    pub frames: Vec<FrameDetections>,
}

/// Runs the model on every frame with GT-derived proposals (seeded by frame
/// index) and scores BEV and 3D AP at IoU 0.7.
pub fn evaluate(
    model: &ToyModel,
    frames: &[LabeledFrame],
    grid: &GridSpec,
    proposals: &ProposalConfig,
    seed: u64,
) -> Result<EvalResult> {
    let dets: Vec<FrameDetections> = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let rois = make_proposals(&f.boxes, grid, &model.cfg, proposals, derive_seed(seed, i as u64));
            let preds = if rois.is_empty() { Vec::new() } else { model.detect(&f.cloud, &rois, grid)? };
            Ok(FrameDetections { preds, gts: f.boxes.clone() })
        })
        .collect::<Result<_>>()?;
    Ok(EvalResult {
        ap_bev: average_precision_r40(&dets, AP_IOU_THRESHOLD, IouCriterion::Bev),
        ap_3d: average_precision_r40(&dets, AP_IOU_THRESHOLD, IouCriterion::ThreeD),
        num_gt: dets.iter().map(|d| d.gts.len()).sum(),
        num_pred: dets.iter().map(|d| d.preds.len()).sum(),
        frames: dets,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub variant_name: String,
    pub ap_bev: f64,
    pub ap_3d: f64,
    pub num_gt: usize,
    pub num_pred: usize,
}

pub fn density_sweep_report(
    model: &ToyModel,
    variants: &[VariantSet],
    grid: &GridSpec,
    proposals: &ProposalConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    variants
        .iter()
        .map(|v| {
            let r = evaluate(model, &v.frames, grid, proposals, seed)?;
            Ok(SweepRow {
                variant_name: v.name.clone(),
                ap_bev: r.ap_bev,
                ap_3d: r.ap_3d,
                num_gt: r.num_gt,
                num_pred: r.num_pred,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("variant_name,ap_bev,ap_3d,num_gt,num_pred\n");
    for r in rows {
        writeln!(s, "{},{:.6},{:.6},{},{}", r.variant_name, r.ap_bev, r.ap_3d, r.num_gt, r.num_pred).unwrap();
    }
    s
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    std::fs::write(path, sweep_csv(rows))?;
    Ok(())
}
