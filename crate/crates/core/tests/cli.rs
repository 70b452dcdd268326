use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lsf::beams::PointCloud;
use lsf::geometry::to_spherical;
use lsf::io::{read_bin, write_bin};
use lsf::synth::{generate_scene, SceneSpec};

fn lsf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsf")).args(args).output().expect("binary runs")
}

fn distinct_zeniths(cloud: &PointCloud) -> usize {
    let mut z: Vec<i64> = cloud.points.iter().map(|p| (to_spherical(p).unwrap().zenith * 1e4).round() as i64).collect();
    z.sort_unstable();
    z.dedup();
    z.len()
}

fn tiny_config(dir: &Path, out: &Path) -> std::path::PathBuf {
    let cfg = dir.join("run.ini");
    fs::write(
        &cfg,
        format!(
            "[run]\nseed = 5\noutput_dir = {}\n\n[scene]\nazimuth_step_deg = 0.8\n\n[data]\nframes = 6\ntrain_fraction = 0.5\n\n\
             [model]\nh = 4\nw = 4\nm = 4\n\n[train]\npretrain_epochs = 1\ndistill_epochs = 1\nembed_hidden = 8\nembed_dim = 4\n",
            out.display()
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn downsample_halves_the_beams() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.bin");
    let output = dir.path().join("out.bin");
    let frame = generate_scene(&SceneSpec { seed: 3, azimuth_step_deg: 0.5, ..SceneSpec::default() }).unwrap();
    write_bin(&input, &frame.cloud).unwrap();
    assert_eq!(distinct_zeniths(&read_bin(&input).unwrap()), 64);

    let o = lsf(&["downsample", "--beams", "32", input.to_str().unwrap(), output.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = read_bin(&output).unwrap();
    assert_eq!(distinct_zeniths(&out), 32);
    assert!(lsf::beams::label_beams(&out, 32).is_ok());

    let labels = dir.path().join("labels.txt");
    let o = lsf(&["label-beams", "--beams", "32", output.to_str().unwrap(), labels.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&labels).unwrap().lines().count(), out.len());
}

#[test]
fn gradcheck_passes_and_reports() {
    let o = lsf(&["gradcheck", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for name in ["L_FCA", "L_GERA", "L_det", "L_overall"] {
        assert!(text.contains(name), "{text}");
    }
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(lsf(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(lsf(&["downsample", "in.bin"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.ini");
    fs::write(&cfg, "[run]\nseed = 1\n").unwrap();
    let o = lsf(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("run.output_dir"));

    fs::write(&cfg, "[run]\nseed = 1\noutput_dir = x\nwat = 3\n").unwrap();
    assert_eq!(lsf(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", "x.ckpt"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, [0u8; 17]).unwrap();
    let o = lsf(&["label-beams", bad.to_str().unwrap(), dir.path().join("l.txt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pipeline_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let mut snapshots = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let cfg = tiny_config(dir.path(), &out);
        let cfg = cfg.to_str().unwrap();
        for args in [
            vec!["gen-scenes", "--config", cfg],
            vec!["pretrain", "--config", cfg],
            vec!["pretrain", "--config", cfg, "--source-only"],
            vec!["distill", "--config", cfg],
            vec!["select", "--config", cfg],
        ] {
            let o = lsf(&args);
            assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        }
        let ckpt = out.join("student.ckpt");
        let o = lsf(&["sweep", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap()]);
        assert!(o.status.success());
        let o = lsf(&["eval", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap()]);
        assert!(o.status.success());
        let names = [
            "config.ini",
            "teacher.ckpt",
            "teacher_log.csv",
            "baseline.ckpt",
            "student.ckpt",
            "distill_log.csv",
            "epoch_metrics.csv",
            "selection.csv",
            "sweep_student.csv",
            "eval_student.csv",
            "scenes/train/000000.bin",
            "scenes/val_16s/000000.csv",
        ];
        snapshots.push(names.iter().map(|n| fs::read(out.join(n)).unwrap()).collect::<Vec<_>>());
    }
    // config copies differ only in the output path
    assert_eq!(snapshots[0][1..], snapshots[1][1..]);
    let sweep = String::from_utf8(snapshots[0][8].clone()).unwrap();
    assert!(sweep.starts_with("variant_name,ap_bev,ap_3d,num_gt,num_pred\n64,"));
    assert_eq!(sweep.lines().count(), 6);
    let log = String::from_utf8(snapshots[0][5].clone()).unwrap();
    assert!(log.starts_with("step,L_det,L_FCA,L_GERA,L_overall,selected_variant\n"));
}
