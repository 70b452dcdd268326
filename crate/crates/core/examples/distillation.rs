//! Pretrain a teacher on selected density variants, then distill a student
//! with FCA and GERA, reporting losses and per-epoch validation AP.
//!
//! `cargo run --release --example distillation -- [seed] [frames] [epochs]`

use lsf::beams::default_variants;
use lsf::synth::{generate_benchmark, SceneSpec};
use lsf::train::{prepare_frames, pretrain, run_distillation, DistillConfig};

fn main() -> lsf::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let frames = args.next().and_then(|s| s.parse().ok()).unwrap_or(60);
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let bench = generate_benchmark(&SceneSpec { seed, ..SceneSpec::default() }, frames, 0.8, &default_variants())?;
    let cfg = DistillConfig { seed, pretrain_epochs: epochs, distill_epochs: epochs, ..DistillConfig::default() };
    let train = prepare_frames(&bench.train, &cfg)?;

    let teacher = pretrain(&train, &cfg)?;
    let picks: Vec<String> = teacher.selection.counts.iter().map(|(n, c)| format!("{n}:{c}")).collect();
    println!("teacher: {} steps, variant picks {}", teacher.history.len(), picks.join(" "));

    let run = run_distillation(teacher.model, &train, Some(&bench.val_variants), &cfg)?;
    let stride = (run.state.history.len() / 8).max(1);
    for r in run.state.history.iter().step_by(stride) {
        println!(
            "step {:4} {:>4}: det {:.4} fca {:.4} gera {:.4} total {:.4}",
            r.step, r.selected_variant, r.l_det, r.l_fca, r.l_gera, r.l_overall
        );
    }
    for e in &run.epochs {
        let cols: Vec<String> = e.rows.iter().map(|r| format!("{}={:.1}", r.variant_name, r.ap_3d)).collect();
        println!("epoch {} 3D AP: {}", e.epoch, cols.join(" "));
    }
    println!("teacher unchanged: {}", run.state.teacher_intact());
    Ok(())
}
