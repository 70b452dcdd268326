//! Rotated-box overlap in bird's-eye view and in 3D, and greedy matching.

use lsf::geometry::{bev_iou, iou_3d, match_predictions, Box3D, Detection, IouCriterion};

fn main() {
    let car = Box3D::new([10.0, 2.0, -0.9], [4.2, 1.8, 1.6], 0.0);
    for (label, other) in [
        ("identical", car),
        ("shifted 1 m", Box3D::new([11.0, 2.0, -0.9], car.size, 0.0)),
        ("yawed 45 deg", Box3D::new(car.center, car.size, std::f64::consts::FRAC_PI_4)),
        ("raised 0.8 m", Box3D::new([10.0, 2.0, -0.1], car.size, 0.0)),
        ("disjoint", Box3D::new([30.0, 2.0, -0.9], car.size, 0.0)),
    ] {
        println!("{label:>13}: bev {:.4}  3d {:.4}", bev_iou(&car, &other), iou_3d(&car, &other));
    }

    let gts = [car, Box3D::new([20.0, -3.0, -0.9], [3.9, 1.7, 1.5], 0.3)];
    let preds = [
        Detection { bbox: Box3D::new([10.2, 2.1, -0.9], car.size, 0.05), confidence: 0.9 },
        Detection { bbox: Box3D::new([19.5, -3.2, -0.9], [3.9, 1.7, 1.5], 0.4), confidence: 0.7 },
        Detection { bbox: Box3D::new([10.0, 2.0, -0.9], car.size, 0.0), confidence: 0.4 },
    ];
    for m in match_predictions(&preds, &gts, IouCriterion::Bev) {
        println!("pred {} -> gt {} (iou {:.3}, conf {})", m.pred_index, m.gt_index, m.iou, m.prediction.confidence);
    }
}
