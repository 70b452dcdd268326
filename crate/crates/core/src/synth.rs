//! Deterministic synthetic LiDAR scenes.
//!
//! A spinning sensor at the origin fires one ray per (beam, azimuth) pair.
//! Each ray returns the nearest hit among the ground plane, the labeled
//! object boxes and an optional cylindrical backdrop. Everything is driven
//! by the scene seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::beams::{apply_variant, BeamVariantSpec, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{bev_iou, Box3D, Point};

pub const GROUND_INTENSITY: f64 = 0.2;
pub const OBJECT_INTENSITY: f64 = 0.6;
pub const BACKDROP_INTENSITY: f64 = 0.4;

/// Mixes a base seed with a stream index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub beams: usize,
    /// Vertical field of view, degrees, `fov_min < fov_max`.
    pub fov_min_deg: f64,
    pub fov_max_deg: f64,
    pub azimuth_min_deg: f64,
    pub azimuth_max_deg: f64,
    pub azimuth_step_deg: f64,
    /// Ground plane height in the sensor frame.
    pub ground_z: f64,
    pub max_range: f64,
    /// Horizontal radius of the backdrop cylinder, if any.
    pub backdrop_radius: Option<f64>,
    pub objects_min: usize,
    pub objects_max: usize,
    pub length: (f64, f64),
    pub width: (f64, f64),
    pub height: (f64, f64),
    pub x_range: (f64, f64),
    /// Bound on |y| for object centers.
    pub y_max: f64,
    /// Uniform per-ray zenith jitter, degrees.
    pub zenith_jitter_deg: f64,
    /// Gaussian range noise, meters.
    pub range_noise_sigma: f64,
    /// Benchmark frames drop labels of boxes with fewer returns than this.
    pub min_box_points: usize,
    /// When non-empty, these boxes replace the random objects.
    pub fixed_boxes: Vec<Box3D>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            beams: 64,
            fov_min_deg: -17.6,
            fov_max_deg: 2.4,
            azimuth_min_deg: -40.0,
            azimuth_max_deg: 40.0,
            azimuth_step_deg: 0.2,
            ground_z: -1.73,
            max_range: 80.0,
            backdrop_radius: Some(75.0),
            objects_min: 4,
            objects_max: 10,
            length: (3.6, 4.8),
            width: (1.6, 2.0),
            height: (1.4, 1.7),
            x_range: (6.0, 65.0),
            y_max: 34.0,
            zenith_jitter_deg: 0.0,
            range_noise_sigma: 0.0,
            min_box_points: 5,
            fixed_boxes: Vec::new(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.beams == 0 {
            return bad("beam count must be at least 1");
        }
        if !(self.fov_min_deg < self.fov_max_deg) || self.fov_min_deg <= -90.0 || self.fov_max_deg >= 90.0 {
            return bad("vertical field of view must be ordered and inside (-90, 90)");
        }
        if !(self.azimuth_step_deg > 0.0) {
            return bad("azimuth step must be positive");
        }
        if self.objects_min > self.objects_max {
            return bad("objects_min exceeds objects_max");
        }
        for (lo, hi) in [self.length, self.width, self.height, self.x_range] {
            if !(lo <= hi) {
                return bad("size and position ranges must be ordered");
            }
        }
        if self.length.0 <= 0.0 || self.width.0 <= 0.0 || self.height.0 <= 0.0 {
            return bad("object sizes must be positive");
        }
        if let Some(r) = self.backdrop_radius {
            if !(r > 0.0 && r < self.max_range) {
                return bad("backdrop radius must be positive and below max range");
            }
        }
        if self.range_noise_sigma < 0.0 || self.zenith_jitter_deg < 0.0 {
            return bad("noise levels must be non-negative");
        }
        Ok(())
    }

    /// Beam zeniths in radians, beam 0 at the top of the field of view.
    pub fn beam_zeniths(&self) -> Vec<f64> {
        if self.beams == 1 {
            return vec![(0.5 * (self.fov_min_deg + self.fov_max_deg)).to_radians()];
        }
        let step = (self.fov_max_deg - self.fov_min_deg) / (self.beams - 1) as f64;
        (0..self.beams).map(|b| (self.fov_max_deg - b as f64 * step).to_radians()).collect()
    }

    /// Ray azimuths in radians.
    pub fn azimuths(&self) -> Vec<f64> {
        let span = self.azimuth_max_deg - self.azimuth_min_deg;
        if span < 0.0 {
            return Vec::new();
        }
        let n = (span / self.azimuth_step_deg + 1e-9).floor() as usize + 1;
        (0..n).map(|j| (self.azimuth_min_deg + j as f64 * self.azimuth_step_deg).to_radians()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Ground,
    Object(usize),
    Backdrop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub cloud: PointCloud,
    pub boxes: Vec<Box3D>,
    /// Generating beam per point.
    pub beam_labels: Vec<usize>,
    pub surfaces: Vec<Surface>,
}

/// Ray parameter where `origin + t * dir` enters `bbox`, if it does.
pub fn ray_box_hit(origin: [f64; 3], dir: [f64; 3], bbox: &Box3D) -> Option<f64> {
    let o = bbox.to_local(origin[0], origin[1], origin[2]);
    let (s, c) = bbox.yaw.sin_cos();
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for k in 0..3 {
        let half = 0.5 * bbox.size[k];
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half {
                return None;
            }
            continue;
        }
        let t1 = (-half - o[k]) / d[k];
        let t2 = (half - o[k]) / d[k];
        t_near = t_near.max(t1.min(t2));
        t_far = t_far.min(t1.max(t2));
    }
    (t_near <= t_far && t_near > 1e-9).then_some(t_near)
}

fn sample_boxes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Box3D> {
    if !spec.fixed_boxes.is_empty() {
        return spec.fixed_boxes.clone();
    }
    let count = rng.random_range(spec.objects_min..=spec.objects_max);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(count);
    let az_lo = spec.azimuth_min_deg.to_radians();
    let az_hi = spec.azimuth_max_deg.to_radians();
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..hi) };
    for _ in 0..count {
        for _attempt in 0..100 {
            let l = uniform(rng, spec.length);
            let w = uniform(rng, spec.width);
            let h = uniform(rng, spec.height);
            let x = uniform(rng, spec.x_range);
            let y = uniform(rng, (-spec.y_max, spec.y_max));
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let az = y.atan2(x);
            if az < az_lo + 0.05 || az > az_hi - 0.05 {
                continue;
            }
            let cand = Box3D::new([x, y, spec.ground_z + 0.5 * h], [l, w, h], yaw);
            let grown = |b: &Box3D| Box3D::new(b.center, [b.size[0] + 1.0, b.size[1] + 1.0, b.size[2]], b.yaw);
            if boxes.iter().all(|b| bev_iou(&grown(b), &grown(&cand)) == 0.0) {
                boxes.push(cand);
                break;
            }
        }
    }
    boxes
}

/// Casts every ray of the scene described by `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneFrame> {
    spec.validate()?;
    let zeniths = spec.beam_zeniths();
    let azimuths = spec.azimuths();
    if azimuths.is_empty() {
        return Err(Error::EmptyScene);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let boxes = sample_boxes(spec, &mut rng);
    let noise = (spec.range_noise_sigma > 0.0).then(|| Normal::new(0.0, spec.range_noise_sigma).unwrap());
    let jitter = spec.zenith_jitter_deg.to_radians();

    let mut points = Vec::new();
    let mut beam_labels = Vec::new();
    let mut surfaces = Vec::new();
    for (b, th0) in zeniths.iter().enumerate() {
        for phi in &azimuths {
            let th = if jitter > 0.0 { th0 + rng.random_range(-jitter..=jitter) } else { *th0 };
            let (st, ct) = th.sin_cos();
            let (sp, cp) = phi.sin_cos();
            let dir = [ct * cp, ct * sp, st];
            let mut best: Option<(f64, Surface)> = None;
            let mut consider = |t: f64, s: Surface| {
                if t > 0.0 && t <= spec.max_range && best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, s));
                }
            };
            if dir[2] < 0.0 {
                consider(spec.ground_z / dir[2], Surface::Ground);
            }
            for (i, bx) in boxes.iter().enumerate() {
                if let Some(t) = ray_box_hit([0.0; 3], dir, bx) {
                    consider(t, Surface::Object(i));
                }
            }
            if let Some(r) = spec.backdrop_radius {
                consider(r / ct, Surface::Backdrop);
            }
            let Some((mut t, surface)) = best else { continue };
            if let Some(n) = &noise {
                t = (t + n.sample(&mut rng)).max(0.0);
            }
            let intensity = match surface {
                Surface::Ground => GROUND_INTENSITY,
                Surface::Object(_) => OBJECT_INTENSITY,
                Surface::Backdrop => BACKDROP_INTENSITY,
            };
            points.push(Point::new(t * dir[0], t * dir[1], t * dir[2], intensity));
            beam_labels.push(b);
            surfaces.push(surface);
        }
    }
    Ok(SceneFrame { cloud: PointCloud::new(points, format!("scene-{}", spec.seed)), boxes, beam_labels, surfaces })
}

/// A cloud with its ground-truth boxes and, when known, generating beams.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub cloud: PointCloud,
    pub boxes: Vec<Box3D>,
    pub beam_labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSet {
    pub name: String,
    pub frames: Vec<LabeledFrame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: Vec<LabeledFrame>,
    pub val: Vec<LabeledFrame>,
    /// Full-density validation first, then one set per variant spec.
    pub val_variants: Vec<VariantSet>,
}

fn benchmark_frame(spec: &SceneSpec, index: usize) -> Result<LabeledFrame> {
    let frame_spec = SceneSpec { seed: derive_seed(spec.seed, index as u64), ..spec.clone() };
    let scene = generate_scene(&frame_spec)?;
    let mut hits = vec![0usize; scene.boxes.len()];
    for s in &scene.surfaces {
        if let Surface::Object(i) = s {
            hits[*i] += 1;
        }
    }
    let boxes = scene
        .boxes
        .iter()
        .zip(&hits)
        .filter(|(_, h)| **h >= spec.min_box_points)
        .map(|(b, _)| *b)
        .collect();
    let mut cloud = scene.cloud;
    cloud.frame_id = format!("{index:06}");
    Ok(LabeledFrame { cloud, boxes, beam_labels: Some(scene.beam_labels) })
}

/// Generates `frames` scenes, splits the first `train_fraction` into the
/// training set and derives every validation variant from the generator's
/// beam labels.
pub fn generate_benchmark(
    spec: &SceneSpec,
    frames: usize,
    train_fraction: f64,
    variants: &[BeamVariantSpec],
) -> Result<Benchmark> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Invalid(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let all: Vec<LabeledFrame> = (0..frames).into_par_iter().map(|i| benchmark_frame(spec, i)).collect::<Result<_>>()?;
    let n_train = ((frames as f64) * train_fraction).round() as usize;
    let mut train = all;
    let val = train.split_off(n_train.min(frames));

    let mut val_variants = vec![VariantSet { name: spec.beams.to_string(), frames: val.clone() }];
    for v in variants {
        let frames = val
            .iter()
            .map(|f| {
                let labels = f.beam_labels.as_deref().expect("generated frames carry beam labels");
                let (cloud, labels) = apply_variant(&f.cloud, labels, v)?;
                Ok(LabeledFrame { cloud, boxes: f.boxes.clone(), beam_labels: Some(labels) })
            })
            .collect::<Result<_>>()?;
        val_variants.push(VariantSet { name: v.name.clone(), frames });
    }
    Ok(Benchmark { train, val, val_variants })
}
