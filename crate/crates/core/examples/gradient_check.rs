//! Analytic gradients of every loss against finite differences.
//!
//! `cargo run --release --example gradient_check -- [seed] [configs]`

use lsf::gradcheck::{run_suite, TOLERANCE};

fn main() -> lsf::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);
    let configs = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let r = run_suite(seed, configs)?;
    println!("{} random problems, worst relative error (tolerance {TOLERANCE:e})", r.configs);
    for (name, v) in [("FCA", r.fca), ("GERA", r.gera), ("detection", r.det), ("overall", r.overall)] {
        println!("  {name:>9}: {v:.2e}");
    }
    println!("{}", if r.passed() { "ok" } else { "FAILED" });
    Ok(())
}
