//! Simulate one LiDAR frame and write it as `.bin` points plus CSV labels.
//!
//! `cargo run --release --example synthetic_scene -- [seed] [out_dir]`

use std::path::PathBuf;

use lsf::io::{write_bin, write_labels, LabelRow};
use lsf::synth::{generate_scene, SceneSpec, Surface};

fn main() -> lsf::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| std::env::temp_dir().display().to_string()));
    let frame = generate_scene(&SceneSpec { seed, range_noise_sigma: 0.02, ..SceneSpec::default() })?;

    let mut hits = vec![0usize; frame.boxes.len()];
    let (mut ground, mut backdrop) = (0, 0);
    for s in &frame.surfaces {
        match s {
            Surface::Object(i) => hits[*i] += 1,
            Surface::Ground => ground += 1,
            Surface::Backdrop => backdrop += 1,
        }
    }
    println!("{} points: {ground} ground, {backdrop} backdrop", frame.cloud.len());
    for (b, h) in frame.boxes.iter().zip(&hits) {
        println!("  box at ({:5.1}, {:5.1}) yaw {:+.2}: {h} returns", b.center[0], b.center[1], b.yaw);
    }

    let bin = out.join(format!("{seed:06}.bin"));
    let csv = out.join(format!("{seed:06}.csv"));
    write_bin(&bin, &frame.cloud)?;
    let rows: Vec<LabelRow> = frame.boxes.iter().copied().map(LabelRow::from).collect();
    write_labels(&csv, &rows)?;
    println!("wrote {} and {}", bin.display(), csv.display());
    Ok(())
}
