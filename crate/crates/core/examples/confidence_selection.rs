//! Pick, per frame, the density variant a detector is least sure about.
//!
//! The stand-in detector returns every ground-truth box with a confidence
//! that grows with the number of points inside it, so sparser variants
//! score lower. Counts keep repeated picks of one variant in check.

use lsf::beams::default_variants;
use lsf::geometry::{Box3D, Detection};
use lsf::select::{select_augmentation, SelectionState, DEFAULT_IOU_THRESHOLD};
use lsf::synth::{generate_scene, SceneSpec};

fn main() -> lsf::Result<()> {
    let specs = default_variants();
    let mut state = SelectionState::for_variants(&specs, DEFAULT_IOU_THRESHOLD)?;
    for seed in 0..12 {
        let frame = generate_scene(&SceneSpec { seed, ..SceneSpec::default() })?;
        let gts: Vec<Box3D> = frame.boxes.clone();
        let detector = |cloud: &lsf::beams::PointCloud| {
            Ok(gts
                .iter()
                .map(|b| {
                    let n = cloud.points.iter().filter(|p| b.contains(p, 0.05)).count();
                    Detection { bbox: *b, confidence: 1.0 - (-(n as f64) / 60.0).exp() }
                })
                .collect())
        };
        let sel = select_augmentation(&frame.cloud, 64, &gts, detector, &specs, &mut state)?;
        let scores: Vec<String> =
            sel.confidences.iter().map(|c| format!("{}={:.3}", c.variant_name, c.score)).collect();
        println!("frame {seed:2}: {}  -> {}", scores.join(" "), sel.chosen().variant_name);
    }
    let counts: Vec<String> = state.counts.iter().map(|(n, c)| format!("{n}:{c}")).collect();
    println!("counts {}", counts.join(" "));
    Ok(())
}
