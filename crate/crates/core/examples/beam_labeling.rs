//! Recover beam indices from zenith angles and derive sparser clouds.
//!
//! `cargo run --release --example beam_labeling -- [seed] [jitter_deg]`

use lsf::beams::{default_variants, label_beams, make_variants_with_labels};
use lsf::synth::{generate_scene, SceneSpec};

fn main() -> lsf::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let jitter = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let frame = generate_scene(&SceneSpec { seed, zenith_jitter_deg: jitter, ..SceneSpec::default() })?;
    let labeling = label_beams(&frame.cloud, 64)?;
    let agree = labeling.labels.iter().zip(&frame.beam_labels).filter(|(a, b)| a == b).count();
    println!(
        "{} points, {} beams, {:.3}% labels agree with the simulator",
        frame.cloud.len(),
        labeling.beam_count(),
        100.0 * agree as f64 / frame.cloud.len() as f64
    );
    let top = labeling.centroids.first().unwrap().to_degrees();
    let bottom = labeling.centroids.last().unwrap().to_degrees();
    println!("zenith centroids from {top:.2} to {bottom:.2} deg");

    let specs = default_variants();
    for (spec, cloud) in specs.iter().zip(make_variants_with_labels(&frame.cloud, &labeling.labels, &specs)?) {
        println!("{:>4}: {} points", spec.name, cloud.len());
    }
    Ok(())
}
