//! Plain-text run configuration.
//!
//! ```text
//! [run]
//! seed = 7
//! output_dir = runs/a
//!
//! [train]
//! alpha = 1.0
//! ```
//!
//! Keys are addressed as `section.key`. Unknown keys are rejected and only
//! `run.seed` and `run.output_dir` are required.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::align::GeraConfig;
use crate::beams::{default_variants, BeamVariantSpec};
use crate::detector::{GridSpec, ModelConfig, ProposalConfig};
use crate::error::{Error, Result};
use crate::synth::SceneSpec;
use crate::train::DistillConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scene: SceneSpec,
    /// Synthetic frame count.
    pub frames: usize,
    pub train_fraction: f64,
    /// Directory of `<id>.bin` clouds with `<id>.csv` labels, used instead
    /// of the simulator when set.
    pub data_dir: Option<PathBuf>,
    pub distill: DistillConfig,
    pub eval_variants: Vec<BeamVariantSpec>,
    /// Source text, copied into the output directory.
    pub text: String,
}

struct Entries {
    map: BTreeMap<String, (String, usize)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", i + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
            if map.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(Self { map })
    }

    fn take_raw(&mut self, key: &str) -> Option<(String, usize)> {
        self.map.remove(key)
    }

    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.take_raw(key) {
            None => Ok(default),
            Some((v, line)) => {
                v.parse().map_err(|e| Error::Config(format!("line {line}: `{key}` = `{v}`: {e}")))
            }
        }
    }

    fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let (v, line) = self.take_raw(key).ok_or_else(|| Error::MissingKey(key.to_string()))?;
        v.parse().map_err(|e| Error::Config(format!("line {line}: `{key}` = `{v}`: {e}")))
    }

    fn take_variants(&mut self, key: &str, default: Vec<BeamVariantSpec>) -> Result<Vec<BeamVariantSpec>> {
        match self.take_raw(key) {
            None => Ok(default),
            Some((v, line)) => parse_variants(&v).map_err(|e| Error::Config(format!("line {line}: `{key}`: {e}"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.map.into_iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::Config(format!("line {line}: unknown key `{k}`"))),
        }
    }
}

/// `name:beam_stride:point_stride` items separated by commas.
pub fn parse_variants(s: &str) -> std::result::Result<Vec<BeamVariantSpec>, String> {
    s.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            if parts.len() != 3 {
                return Err(format!("`{item}` is not name:beam_stride:point_stride"));
            }
            let stride = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("`{item}`: {e}"));
            Ok(BeamVariantSpec::new(parts[0].trim(), stride(parts[1])?, stride(parts[2])?))
        })
        .collect()
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl RunConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut e = Entries::parse(text)?;
        let seed: u64 = e.require("run.seed")?;
        let output_dir: PathBuf = e.require("run.output_dir")?;

        let d = SceneSpec::default();
        let backdrop = match e.take_raw("scene.backdrop_radius") {
            None => d.backdrop_radius,
            Some((v, _)) if v == "none" => None,
            Some((v, line)) => Some(
                v.parse::<f64>().map_err(|err| Error::Config(format!("line {line}: `scene.backdrop_radius`: {err}")))?,
            ),
        };
        let scene = SceneSpec {
            seed,
            beams: e.take("scene.beams", d.beams)?,
            fov_min_deg: e.take("scene.fov_min_deg", d.fov_min_deg)?,
            fov_max_deg: e.take("scene.fov_max_deg", d.fov_max_deg)?,
            azimuth_min_deg: e.take("scene.azimuth_min_deg", d.azimuth_min_deg)?,
            azimuth_max_deg: e.take("scene.azimuth_max_deg", d.azimuth_max_deg)?,
            azimuth_step_deg: e.take("scene.azimuth_step_deg", d.azimuth_step_deg)?,
            ground_z: e.take("scene.ground_z", d.ground_z)?,
            max_range: e.take("scene.max_range", d.max_range)?,
            backdrop_radius: backdrop,
            objects_min: e.take("scene.objects_min", d.objects_min)?,
            objects_max: e.take("scene.objects_max", d.objects_max)?,
            x_range: (e.take("scene.x_min", d.x_range.0)?, e.take("scene.x_max", d.x_range.1)?),
            y_max: e.take("scene.y_max", d.y_max)?,
            zenith_jitter_deg: e.take("scene.zenith_jitter_deg", d.zenith_jitter_deg)?,
            range_noise_sigma: e.take("scene.range_noise_sigma", d.range_noise_sigma)?,
            min_box_points: e.take("scene.min_box_points", d.min_box_points)?,
            ..d
        };
        scene.validate().map_err(|err| Error::Config(err.to_string()))?;

        let frames = e.take("data.frames", 250usize)?;
        let train_fraction = e.take("data.train_fraction", 0.8f64)?;
        let data_dir = e.take_raw("data.dir").map(|(v, _)| PathBuf::from(v));
        check((0.0..=1.0).contains(&train_fraction), || format!("data.train_fraction {train_fraction} outside [0, 1]"))?;

        let t = DistillConfig::default();
        let g = GridSpec::default();
        let grid = GridSpec {
            x_min: e.take("grid.x_min", g.x_min)?,
            x_max: e.take("grid.x_max", g.x_max)?,
            y_min: e.take("grid.y_min", g.y_min)?,
            y_max: e.take("grid.y_max", g.y_max)?,
            cell: e.take("grid.cell", g.cell)?,
            count_scale: e.take("grid.count_scale", g.count_scale)?,
        };
        grid.dims().map_err(|err| Error::Config(err.to_string()))?;
        let m = ModelConfig::default();
        let model = ModelConfig {
            m: e.take("model.m", m.m)?,
            h: e.take("model.h", m.h)?,
            w: e.take("model.w", m.w)?,
            roi_context: e.take("model.roi_context", m.roi_context)?,
        };
        check(model.m > 0 && model.h > 0 && model.w > 0, || "model.m, model.h and model.w must be positive".into())?;
        check(model.roi_context > 0.0, || "model.roi_context must be positive".into())?;
        let p = ProposalConfig::default();
        let proposals = ProposalConfig {
            center_jitter: e.take("proposals.center_jitter", p.center_jitter)?,
            yaw_jitter: e.take("proposals.yaw_jitter", p.yaw_jitter)?,
            distractors: e.take("proposals.distractors", p.distractors)?,
            positive_iou: e.take("proposals.positive_iou", p.positive_iou)?,
            ..p
        };
        let gd = GeraConfig::default();
        let gera = GeraConfig {
            lambda: e.take("train.lambda", gd.lambda)?,
            eps: e.take("train.eps", gd.eps)?,
            eps_kl: e.take("train.eps_kl", gd.eps_kl)?,
        };
        check(gera.eps > 0.0, || "train.eps must be positive".into())?;
        check(gera.eps_kl > 0.0 && gera.eps_kl < 0.5, || "train.eps_kl must lie in (0, 0.5)".into())?;
        let distill = DistillConfig {
            alpha: e.take("train.alpha", t.alpha)?,
            beta: e.take("train.beta", t.beta)?,
            gera,
            iou_threshold: e.take("train.iou_threshold", t.iou_threshold)?,
            variants: e.take_variants("train.variants", t.variants.clone())?,
            source_beams: e.take("train.source_beams", scene.beams)?,
            learning_rate: e.take("train.learning_rate", t.learning_rate)?,
            momentum: e.take("train.momentum", t.momentum)?,
            clip_norm: e.take("train.clip_norm", t.clip_norm)?,
            pretrain_epochs: e.take("train.pretrain_epochs", t.pretrain_epochs)?,
            distill_epochs: e.take("train.distill_epochs", t.distill_epochs)?,
            seed,
            model,
            grid,
            proposals,
            embed_hidden: e.take("train.embed_hidden", t.embed_hidden)?,
            embed_dim: e.take("train.embed_dim", t.embed_dim)?,
        };
        distill.validate().map_err(|err| Error::Config(err.to_string()))?;
        let eval_variants = e.take_variants("eval.variants", default_variants())?;
        e.finish()?;
        Ok(Self {
            seed,
            output_dir,
            scene,
            frames,
            train_fraction,
            data_dir,
            distill,
            eval_variants,
            text: text.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "[run]\nseed = 7\noutput_dir = out\n";

    #[test]
    fn minimal_config_takes_defaults() {
        let c = RunConfig::parse(MIN).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.output_dir, PathBuf::from("out"));
        assert_eq!(c.distill.alpha, 1.0);
        assert_eq!(c.distill.seed, 7);
        assert_eq!(c.scene.seed, 7);
        assert_eq!(c.eval_variants, default_variants());
    }

    #[test]
    fn missing_key_is_named() {
        let err = RunConfig::parse("[run]\nseed = 1\n").unwrap_err();
        assert!(matches!(&err, Error::MissingKey(k) if k == "run.output_dir"), "{err}");
        assert!(err.to_string().contains("run.output_dir"));
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse(&format!("{MIN}[train]\nalpah = 2\n")).unwrap_err();
        assert!(err.to_string().contains("train.alpah"), "{err}");
    }

    #[test]
    fn values_are_parsed_and_validated() {
        let c = RunConfig::parse(&format!(
            "{MIN}[train]\nalpha = 0.5 # comment\nvariants = 32:2:1, 16*:4:2\n[scene]\nbackdrop_radius = none\n"
        ))
        .unwrap();
        assert_eq!(c.distill.alpha, 0.5);
        assert_eq!(c.distill.variants.len(), 2);
        assert_eq!(c.distill.variants[1], BeamVariantSpec::new("16*", 4, 2));
        assert_eq!(c.scene.backdrop_radius, None);
        assert!(RunConfig::parse(&format!("{MIN}[train]\nbeta = -1\n")).is_err());
        assert!(RunConfig::parse(&format!("{MIN}[train]\nmomentum = fast\n")).is_err());
        assert!(RunConfig::parse(&format!("{MIN}[scene]\nbeams = 0\n")).is_err());
        assert!(RunConfig::parse(&format!("{MIN}[run]\nseed = 2\n")).is_err());
        assert!(RunConfig::parse("[run\nseed = 1\n").is_err());
    }
}
