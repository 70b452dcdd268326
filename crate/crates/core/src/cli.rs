//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::beams::{downsample_beams, downsample_labeling, label_beams, subsample_points_per_beam, BeamVariantSpec};
use crate::config::RunConfig;
use crate::detector::{Checkpoint, ToyModel};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, TOLERANCE};
use crate::io::{read_bin, read_labels, write_bin, write_labels, LabelRow};
use crate::metrics::{density_sweep_report, evaluate, sweep_csv};
use crate::select::SelectionState;
use crate::synth::{generate_benchmark, Benchmark, LabeledFrame, VariantSet};
use crate::train::{
    epoch_csv, eval_seed, history_csv, prepare_frames, pretrain, run_distillation, train_source_only, PreparedFrame,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lsf", version, about = "Sparsity-invariant LiDAR detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into <output_dir>/scenes.
    GenScenes {
        #[arg(long)]
        config: PathBuf,
    },
    /// Cluster a cloud into beams and write one label per point.
    LabelBeams {
        #[arg(long, default_value_t = 64)]
        beams: usize,
        input: PathBuf,
        output: PathBuf,
    },
    /// Reduce a cloud to fewer beams (and optionally half the points per beam).
    Downsample {
        #[arg(long)]
        beams: usize,
        #[arg(long, default_value_t = 64)]
        source_beams: usize,
        #[arg(long)]
        halve_points: bool,
        input: PathBuf,
        output: PathBuf,
    },
    /// Run one selection round per training frame and log the choices.
    Select {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pretrain the teacher with density selection (or the source-only baseline).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        source_only: bool,
    },
    /// Distill a student from the pretrained teacher.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// AP@R40 of a checkpoint on the full-density validation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// AP of a checkpoint across every validation density.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        configs: usize,
    },
}

fn is_usage(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::MissingKey(_) | Error::Invalid(_))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage(&e) {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("LSF_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| format!("LSF_THREADS=`{v}` is not a thread count"))?;
    if n == 0 {
        return Err("LSF_THREADS must be at least 1".into());
    }
    // a second call in the same process (tests) keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenScenes { config } => gen_scenes(&load(&config)?),
        Command::LabelBeams { beams, input, output } => {
            let cloud = read_bin(&input)?;
            let lab = label_beams(&cloud, beams)?;
            let mut s = String::new();
            for l in &lab.labels {
                writeln!(s, "{l}").unwrap();
            }
            fs::write(&output, s)?;
            println!("{} points in {} beams", cloud.len(), lab.beam_count());
            Ok(EXIT_OK)
        }
        Command::Downsample { beams, source_beams, halve_points, input, output } => {
            let spec = BeamVariantSpec::for_beams(source_beams, beams, halve_points)?;
            let cloud = read_bin(&input)?;
            let lab = label_beams(&cloud, source_beams)?;
            let reduced = downsample_beams(&cloud, &lab, spec.beam_keep_stride)?;
            let reduced_lab = downsample_labeling(&lab, spec.beam_keep_stride)?;
            let out = subsample_points_per_beam(&reduced, &reduced_lab, spec.point_keep_stride)?;
            write_bin(&output, &out)?;
            println!("{} -> {} points ({})", cloud.len(), out.len(), spec.name);
            Ok(EXIT_OK)
        }
        Command::Select { config, checkpoint } => select_cmd(&load(&config)?, checkpoint.as_deref()),
        Command::Pretrain { config, source_only } => pretrain_cmd(&load(&config)?, source_only),
        Command::Distill { config, teacher } => distill_cmd(&load(&config)?, teacher.as_deref()),
        Command::Eval { config, checkpoint } => eval_cmd(&load(&config)?, &checkpoint, false),
        Command::Sweep { config, checkpoint } => eval_cmd(&load(&config)?, &checkpoint, true),
        Command::Gradcheck { seed, configs } => {
            let rep = run_suite(seed, configs)?;
            println!("configs   {}", rep.configs);
            println!("L_FCA     max rel err {:.3e}", rep.fca);
            println!("L_GERA    max rel err {:.3e}", rep.gera);
            println!("L_det     max rel err {:.3e}", rep.det);
            println!("L_overall max rel err {:.3e}", rep.overall);
            println!("tolerance {TOLERANCE:.0e}: {}", if rep.passed() { "pass" } else { "FAIL" });
            Ok(if rep.passed() { EXIT_OK } else { EXIT_RUNTIME })
        }
    }
}

/// Reads the config and prepares its output directory with a copy of it.
fn load(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::from_path(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
        other => other,
    })?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.ini"), &cfg.text)?;
    Ok(cfg)
}

fn dir_name(variant: &str) -> String {
    variant.replace('*', "s")
}

fn write_frames(dir: &Path, frames: &[LabeledFrame]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        write_bin(dir.join(format!("{i:06}.bin")), &f.cloud)?;
        let rows: Vec<LabelRow> = f.boxes.iter().map(|b| LabelRow::from(*b)).collect();
        write_labels(dir.join(format!("{i:06}.csv")), &rows)?;
    }
    Ok(())
}

fn read_frames(dir: &Path) -> Result<Vec<LabeledFrame>> {
    let mut bins: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    bins.sort();
    bins.iter()
        .map(|b| {
            let boxes = read_labels(b.with_extension("csv"))?.into_iter().map(|r| r.bbox).collect();
            Ok(LabeledFrame { cloud: read_bin(b)?, boxes, beam_labels: None })
        })
        .collect()
}

/// The simulator benchmark, or frames read from `data.dir/{train,val}`
/// (validation variants are then built from k-means beam labels).
pub fn load_benchmark(cfg: &RunConfig) -> Result<Benchmark> {
    let Some(dir) = &cfg.data_dir else {
        return generate_benchmark(&cfg.scene, cfg.frames, cfg.train_fraction, &cfg.eval_variants);
    };
    let train = read_frames(&dir.join("train"))?;
    let val = read_frames(&dir.join("val"))?;
    let vcfg = crate::train::DistillConfig { variants: cfg.eval_variants.clone(), ..cfg.distill.clone() };
    let prepared = prepare_frames(&val, &vcfg)?;
    let mut val_variants = vec![VariantSet { name: cfg.distill.source_beams.to_string(), frames: val.clone() }];
    for (k, v) in cfg.eval_variants.iter().enumerate() {
        let frames = prepared
            .iter()
            .map(|p| LabeledFrame { cloud: p.variants[k].clone(), boxes: p.boxes.clone(), beam_labels: None })
            .collect();
        val_variants.push(VariantSet { name: v.name.clone(), frames });
    }
    Ok(Benchmark { train, val, val_variants })
}

fn gen_scenes(cfg: &RunConfig) -> Result<i32> {
    let b = generate_benchmark(&cfg.scene, cfg.frames, cfg.train_fraction, &cfg.eval_variants)?;
    let root = cfg.output_dir.join("scenes");
    write_frames(&root.join("train"), &b.train)?;
    write_frames(&root.join("val"), &b.val)?;
    for v in b.val_variants.iter().skip(1) {
        write_frames(&root.join(format!("val_{}", dir_name(&v.name))), &v.frames)?;
    }
    println!("{} train / {} val frames in {}", b.train.len(), b.val.len(), root.display());
    Ok(EXIT_OK)
}

fn train_frames(cfg: &RunConfig) -> Result<(Benchmark, Vec<PreparedFrame>)> {
    let b = load_benchmark(cfg)?;
    let frames = prepare_frames(&b.train, &cfg.distill)?;
    Ok((b, frames))
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<ToyModel> {
    ToyModel::from_checkpoint(cfg.distill.model, &Checkpoint::read(path)?)
}

fn select_cmd(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<i32> {
    let (_, frames) = train_frames(cfg)?;
    let model = match checkpoint {
        Some(p) => load_model(cfg, p)?,
        None => ToyModel::seeded(cfg.distill.model, cfg.seed),
    };
    let d = &cfg.distill;
    let mut state = SelectionState::for_variants(&d.variants, d.iou_threshold)?;
    let mut s = String::from("frame,selected_variant");
    for v in &d.variants {
        write!(s, ",S_{}", v.name).unwrap();
    }
    s.push('\n');
    for (i, f) in frames.iter().enumerate() {
        let rois = crate::detector::make_proposals(
            &f.boxes,
            &d.grid,
            &d.model,
            &d.proposals,
            crate::synth::derive_seed(cfg.seed, i as u64),
        );
        let sel = crate::select::select_among(
            &f.variants,
            &d.variants,
            &f.boxes,
            |c| model.detect(c, &rois, &d.grid),
            crate::geometry::IouCriterion::Bev,
            &mut state,
        )?;
        write!(s, "{i},{}", sel.chosen().variant_name).unwrap();
        for c in &sel.confidences {
            write!(s, ",{}", c.score).unwrap();
        }
        s.push('\n');
    }
    fs::write(cfg.output_dir.join("selection.csv"), s)?;
    for (name, c) in &state.counts {
        println!("{name:>6} {c}");
    }
    Ok(EXIT_OK)
}

fn pretrain_cmd(cfg: &RunConfig, source_only: bool) -> Result<i32> {
    let (_, frames) = train_frames(cfg)?;
    let d = &cfg.distill;
    let (run, stem) = if source_only {
        (train_source_only(&frames, d, d.pretrain_epochs + d.distill_epochs)?, "baseline")
    } else {
        (pretrain(&frames, d)?, "teacher")
    };
    run.model.to_checkpoint().write(cfg.output_dir.join(format!("{stem}.ckpt")))?;
    fs::write(cfg.output_dir.join(format!("{stem}_log.csv")), history_csv(&run.history))?;
    println!("{} steps, {stem}.ckpt written", run.history.len());
    Ok(EXIT_OK)
}

fn distill_cmd(cfg: &RunConfig, teacher: Option<&Path>) -> Result<i32> {
    let (bench, frames) = train_frames(cfg)?;
    let default_path = cfg.output_dir.join("teacher.ckpt");
    let teacher = match teacher {
        Some(p) => load_model(cfg, p)?,
        None if default_path.exists() => load_model(cfg, &default_path)?,
        None => {
            let run = pretrain(&frames, &cfg.distill)?;
            run.model.to_checkpoint().write(&default_path)?;
            fs::write(cfg.output_dir.join("teacher_log.csv"), history_csv(&run.history))?;
            run.model
        }
    };
    let run = run_distillation(teacher, &frames, Some(&bench.val_variants), &cfg.distill)?;
    run.state.student.to_checkpoint().write(cfg.output_dir.join("student.ckpt"))?;
    fs::write(cfg.output_dir.join("distill_log.csv"), history_csv(&run.state.history))?;
    fs::write(cfg.output_dir.join("epoch_metrics.csv"), epoch_csv(&run.epochs))?;
    println!("{} steps, student.ckpt written", run.state.history.len());
    Ok(EXIT_OK)
}

fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, sweep: bool) -> Result<i32> {
    let bench = load_benchmark(cfg)?;
    let model = load_model(cfg, checkpoint)?;
    let d = &cfg.distill;
    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    if sweep {
        let rows = density_sweep_report(&model, &bench.val_variants, &d.grid, &d.proposals, eval_seed(d))?;
        let csv = sweep_csv(&rows);
        fs::write(cfg.output_dir.join(format!("sweep_{stem}.csv")), &csv)?;
        print!("{csv}");
    } else {
        let r = evaluate(&model, &bench.val, &d.grid, &d.proposals, eval_seed(d))?;
        let row = crate::metrics::SweepRow {
            variant_name: bench.val_variants[0].name.clone(),
            ap_bev: r.ap_bev,
            ap_3d: r.ap_3d,
            num_gt: r.num_gt,
            num_pred: r.num_pred,
        };
        let csv = sweep_csv(&[row]);
        fs::write(cfg.output_dir.join(format!("eval_{stem}.csv")), &csv)?;
        print!("{csv}");
    }
    Ok(EXIT_OK)
}
