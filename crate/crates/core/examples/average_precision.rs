//! KITTI-style AP@R40 at IoU 0.7 and the closed-gap summary.

use lsf::geometry::{Box3D, Detection, IouCriterion};
use lsf::metrics::{average_precision_r40, closed_gap, sampled_precisions, FrameDetections, AP_IOU_THRESHOLD};

fn main() -> lsf::Result<()> {
    let gt = |x: f64| Box3D::new([x, 0.0, -0.9], [4.0, 1.8, 1.5], 0.0);
    let det = |x: f64, c: f64| Detection { bbox: gt(x), confidence: c };
    let frames = vec![
        FrameDetections { gts: vec![gt(10.0), gt(20.0)], preds: vec![det(10.1, 0.9), det(35.0, 0.8), det(20.0, 0.6)] },
        FrameDetections { gts: vec![gt(15.0)], preds: vec![det(15.9, 0.7), det(15.0, 0.3)] },
    ];
    for crit in [IouCriterion::Bev, IouCriterion::ThreeD] {
        let ap = average_precision_r40(&frames, AP_IOU_THRESHOLD, crit);
        let p = sampled_precisions(&frames, AP_IOU_THRESHOLD, crit);
        println!("{crit:?}: AP {ap:.2}, precision at recall 1/3 {:.3}, at 1.0 {:.3}", p[12], p[39]);
    }

    for (model, source, oracle) in [(39.45, 32.91, 51.88), (22.30, 17.24, 34.87)] {
        println!("AP {model} between {source} and {oracle}: closed gap {:.2}%", closed_gap(model, source, oracle)?);
    }
    Ok(())
}
