//! Source-only baseline versus the distilled student across beam densities.
//!
//! `cargo run --release --example density_sweep -- [seed] [frames] [out_dir]`
//! writes one CSV per model when `out_dir` is given.

use lsf::beams::default_variants;
use lsf::metrics::{density_sweep_report, write_sweep_csv};
use lsf::synth::{generate_benchmark, SceneSpec};
use lsf::train::{eval_seed, prepare_frames, pretrain, run_distillation, train_source_only, DistillConfig};

fn main() -> lsf::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let frames = args.next().and_then(|s| s.parse().ok()).unwrap_or(250);
    let out_dir = args.next();
    let bench = generate_benchmark(&SceneSpec { seed, ..SceneSpec::default() }, frames, 0.8, &default_variants())?;
    let cfg = DistillConfig { seed, ..DistillConfig::default() };
    let train = prepare_frames(&bench.train, &cfg)?;

    let baseline = train_source_only(&train, &cfg, cfg.pretrain_epochs + cfg.distill_epochs)?.model;
    let teacher = pretrain(&train, &cfg)?.model;
    let student = run_distillation(teacher.clone(), &train, None, &cfg)?.state.student;

    println!("{:>8} {}", "", bench.val_variants.iter().map(|v| format!("{:>11}", v.name)).collect::<String>());
    for (name, model) in [("baseline", &baseline), ("teacher", &teacher), ("student", &student)] {
        let rows = density_sweep_report(model, &bench.val_variants, &cfg.grid, &cfg.proposals, eval_seed(&cfg))?;
        let cols: String = rows.iter().map(|r| format!(" {:>5.1}/{:>5.1}", r.ap_bev, r.ap_3d)).collect();
        println!("{name:>8}{cols}");
        if let Some(dir) = &out_dir {
            write_sweep_csv(std::path::Path::new(dir).join(format!("sweep_{name}.csv")), &rows)?;
        }
    }
    println!("(BEV / 3D AP@R40 at IoU 0.7)");
    Ok(())
}
