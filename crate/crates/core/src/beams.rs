//! Beam labeling and density reduction.
//!
//! Labels come from a 1-D k-means over per-point zenith angles. Beam 0 is
//! always the topmost beam. Density variants drop whole beams (keeping every
//! `stride`-th beam counted from the top) and then thin the points inside each
//! surviving beam by azimuth rank.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::geometry::{to_spherical, Point};

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub frame_id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, frame_id: impl Into<String>) -> Self {
        Self { points, frame_id: frame_id.into() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn filtered(&self, keep: &[bool], suffix: &str) -> PointCloud {
        let points = self
            .points
            .iter()
            .zip(keep)
            .filter_map(|(p, k)| k.then_some(*p))
            .collect();
        let frame_id = if suffix.is_empty() {
            self.frame_id.clone()
        } else {
            format!("{}@{}", self.frame_id, suffix)
        };
        PointCloud { points, frame_id }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamLabeling {
    /// Beam index per point.
    pub labels: Vec<usize>,
    /// Zenith centroid per beam, radians, strictly decreasing.
    pub centroids: Vec<f64>,
}

impl BeamLabeling {
    pub fn beam_count(&self) -> usize {
        self.centroids.len()
    }

    fn check(&self, cloud: &PointCloud) -> Result<()> {
        check_labels(&self.labels, cloud)
    }
}

fn check_labels(labels: &[usize], cloud: &PointCloud) -> Result<()> {
    if labels.len() != cloud.len() {
        return Err(Error::InconsistentLabeling { labels: labels.len(), points: cloud.len() });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BeamVariantSpec {
    pub name: String,
    pub beam_keep_stride: usize,
    pub point_keep_stride: usize,
}

impl BeamVariantSpec {
    pub fn new(name: impl Into<String>, beam_keep_stride: usize, point_keep_stride: usize) -> Self {
        Self { name: name.into(), beam_keep_stride, point_keep_stride }
    }

    /// Variant for `target_beams` out of `source_beams`; `halve_points` gives the starred form.
    pub fn for_beams(source_beams: usize, target_beams: usize, halve_points: bool) -> Result<Self> {
        if target_beams == 0 || !source_beams.is_multiple_of(target_beams) {
            return Err(Error::Invalid(format!(
                "{target_beams} beams is not an integer fraction of {source_beams}"
            )));
        }
        let name = if halve_points { format!("{target_beams}*") } else { target_beams.to_string() };
        Ok(Self::new(name, source_beams / target_beams, if halve_points { 2 } else { 1 }))
    }
}

/// `{32, 32*, 16, 16*}` relative to a 64-beam source.
pub fn default_variants() -> Vec<BeamVariantSpec> {
    vec![
        BeamVariantSpec::new("32", 2, 1),
        BeamVariantSpec::new("32*", 2, 2),
        BeamVariantSpec::new("16", 4, 1),
        BeamVariantSpec::new("16*", 4, 2),
    ]
}

pub fn validate_variants(specs: &[BeamVariantSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::NoVariants);
    }
    let mut seen = HashSet::new();
    for s in specs {
        if s.beam_keep_stride == 0 || s.point_keep_stride == 0 {
            return Err(Error::Invalid(format!("variant `{}` has a zero stride", s.name)));
        }
        if !seen.insert(s.name.as_str()) {
            return Err(Error::Invalid(format!("duplicate variant name `{}`", s.name)));
        }
    }
    Ok(())
}

fn zeniths(cloud: &PointCloud) -> Result<Vec<f64>> {
    cloud.points.iter().map(|p| to_spherical(p).map(|s| s.zenith)).collect()
}

// Nearest centroid for ascending centroids; midpoint ties go to the lower one.
fn nearest(ascending: &[f64], z: f64) -> usize {
    let idx = ascending.partition_point(|c| *c < z);
    if idx == 0 {
        0
    } else if idx == ascending.len() || z - ascending[idx - 1] <= ascending[idx] - z {
        idx - 1
    } else {
        idx
    }
}

/// Assigns beam labels with a 1-D k-means over zenith angles.
pub fn label_beams(cloud: &PointCloud, k: usize) -> Result<BeamLabeling> {
    if k == 0 {
        return Err(Error::Invalid("beam count must be at least 1".into()));
    }
    let z = zeniths(cloud)?;
    let mut sorted = z.clone();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::InsufficientZeniths { k, found: distinct.len() });
    }

    let n = sorted.len();
    let mut centroids: Vec<f64> = (0..k)
        .map(|i| {
            let q = (i as f64 + 0.5) / k as f64;
            sorted[((q * n as f64) as usize).min(n - 1)]
        })
        .collect();

    let mut labels = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        for (l, v) in labels.iter_mut().zip(&z) {
            *l = nearest(&centroids, *v);
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (l, v) in labels.iter().zip(&z) {
            sums[*l] += v;
            counts[*l] += 1;
        }
        let mut max_move: f64 = 0.0;
        for c in 0..k {
            if counts[c] > 0 {
                let next = sums[c] / counts[c] as f64;
                max_move = max_move.max((next - centroids[c]).abs());
                centroids[c] = next;
            }
        }
        // keep the ordering invariant that `nearest` relies on
        centroids.sort_by(f64::total_cmp);
        if max_move < KMEANS_TOL {
            break;
        }
    }

    for (l, v) in labels.iter_mut().zip(&z) {
        *l = nearest(&centroids, *v);
    }
    let mut counts = vec![0usize; k];
    for l in &labels {
        counts[*l] += 1;
    }
    if let Some(empty) = counts.iter().position(|c| *c == 0) {
        return Err(Error::EmptyCluster(k - 1 - empty));
    }

    for l in labels.iter_mut() {
        *l = k - 1 - *l;
    }
    centroids.reverse();
    Ok(BeamLabeling { labels, centroids })
}

fn beam_mask(labels: &[usize], stride: usize) -> Vec<bool> {
    labels.iter().map(|l| l % stride == 0).collect()
}

fn point_mask(cloud: &PointCloud, labels: &[usize], stride: usize) -> Vec<bool> {
    let beams = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut per_beam: Vec<Vec<(f64, usize)>> = vec![Vec::new(); beams];
    for (i, (p, l)) in cloud.points.iter().zip(labels).enumerate() {
        per_beam[*l].push((p.y.atan2(p.x), i));
    }
    let mut keep = vec![false; cloud.len()];
    for beam in per_beam.iter_mut() {
        beam.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (rank, (_, i)) in beam.iter().enumerate() {
            keep[*i] = rank % stride == 0;
        }
    }
    keep
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::Invalid("stride must be at least 1".into()));
    }
    Ok(())
}

/// Keeps the points whose beam index is a multiple of `stride`.
pub fn downsample_beams(cloud: &PointCloud, labeling: &BeamLabeling, stride: usize) -> Result<PointCloud> {
    check_stride(stride)?;
    labeling.check(cloud)?;
    Ok(cloud.filtered(&beam_mask(&labeling.labels, stride), ""))
}

/// Labeling of the cloud returned by [`downsample_beams`], with surviving
/// beams renumbered `0..` from the top.
pub fn downsample_labeling(labeling: &BeamLabeling, stride: usize) -> Result<BeamLabeling> {
    check_stride(stride)?;
    Ok(BeamLabeling {
        labels: labeling.labels.iter().filter(|l| *l % stride == 0).map(|l| l / stride).collect(),
        centroids: labeling.centroids.iter().step_by(stride).copied().collect(),
    })
}

/// Within each beam, sorts points by azimuth and keeps every `stride`-th one
/// starting from rank 0.
pub fn subsample_points_per_beam(
    cloud: &PointCloud,
    labeling: &BeamLabeling,
    stride: usize,
) -> Result<PointCloud> {
    check_stride(stride)?;
    labeling.check(cloud)?;
    Ok(cloud.filtered(&point_mask(cloud, &labeling.labels, stride), ""))
}

/// Applies one variant given per-point beam labels. Returns the reduced
/// cloud and the labels of the surviving points.
pub fn apply_variant(
    cloud: &PointCloud,
    labels: &[usize],
    spec: &BeamVariantSpec,
) -> Result<(PointCloud, Vec<usize>)> {
    check_labels(labels, cloud)?;
    check_stride(spec.beam_keep_stride)?;
    check_stride(spec.point_keep_stride)?;
    let keep = beam_mask(labels, spec.beam_keep_stride);
    let thinned = cloud.filtered(&keep, &spec.name);
    let thinned_labels: Vec<usize> =
        labels.iter().zip(&keep).filter_map(|(l, k)| k.then_some(*l)).collect();
    let keep = point_mask(&thinned, &thinned_labels, spec.point_keep_stride);
    let out = thinned.filtered(&keep, "");
    let out_labels = thinned_labels.iter().zip(&keep).filter_map(|(l, k)| k.then_some(*l)).collect();
    Ok((out, out_labels))
}

/// Variants from known beam labels (no clustering).
pub fn make_variants_with_labels(
    cloud: &PointCloud,
    labels: &[usize],
    specs: &[BeamVariantSpec],
) -> Result<Vec<PointCloud>> {
    validate_variants(specs)?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    specs.iter().map(|s| apply_variant(cloud, labels, s).map(|(c, _)| c)).collect()
}

/// Labels the cloud once with `source_beams` clusters and produces one
/// reduced cloud per spec, in spec order.
pub fn make_beam_variants(
    cloud: &PointCloud,
    source_beams: usize,
    specs: &[BeamVariantSpec],
) -> Result<Vec<PointCloud>> {
    validate_variants(specs)?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let labeling = label_beams(cloud, source_beams)?;
    make_variants_with_labels(cloud, &labeling.labels, specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // points on rings at the given zeniths, `per_beam` azimuths each
    fn ring_cloud(zeniths_deg: &[f64], per_beam: usize) -> (PointCloud, Vec<usize>) {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (b, zd) in zeniths_deg.iter().enumerate() {
            let th = zd.to_radians();
            for j in 0..per_beam {
                let phi = -1.0 + 2.0 * j as f64 / per_beam as f64;
                let r = 10.0 + (j % 7) as f64;
                pts.push(Point::new(r * th.cos() * phi.cos(), r * th.cos() * phi.sin(), r * th.sin(), 0.5));
                labels.push(b);
            }
        }
        (PointCloud::new(pts, "ring"), labels)
    }

    #[test]
    fn single_beam_labels_everything_zero() {
        let (cloud, _) = ring_cloud(&[1.0, -3.0, -7.0], 20);
        let lab = label_beams(&cloud, 1).unwrap();
        assert!(lab.labels.iter().all(|l| *l == 0));
        assert_eq!(lab.centroids.len(), 1);
    }

    #[test]
    fn too_few_distinct_zeniths() {
        let pts = (0..12).map(|i| Point::new(10.0, 0.0, (i % 3) as f64, 0.0)).collect();
        let cloud = PointCloud::new(pts, "three");
        assert!(matches!(
            label_beams(&cloud, 4),
            Err(Error::InsufficientZeniths { k: 4, found: 3 })
        ));
    }

    #[test]
    fn recovers_known_rings_in_top_down_order() {
        let z: Vec<f64> = (0..8).map(|b| 2.0 - 2.5 * b as f64).collect();
        let (cloud, truth) = ring_cloud(&z, 50);
        let lab = label_beams(&cloud, 8).unwrap();
        assert_eq!(lab.labels, truth);
        assert!(lab.centroids.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn stride_one_is_identity() {
        let (cloud, truth) = ring_cloud(&[0.0, -2.0, -4.0, -6.0], 30);
        let lab = BeamLabeling { labels: truth, centroids: vec![0.0, -2.0, -4.0, -6.0] };
        assert_eq!(downsample_beams(&cloud, &lab, 1).unwrap().points, cloud.points);
        assert_eq!(subsample_points_per_beam(&cloud, &lab, 1).unwrap().points, cloud.points);
    }

    #[test]
    fn inconsistent_labeling_rejected() {
        let (cloud, mut truth) = ring_cloud(&[0.0, -2.0], 10);
        truth.pop();
        let lab = BeamLabeling { labels: truth, centroids: vec![0.0, -2.0] };
        assert!(matches!(
            downsample_beams(&cloud, &lab, 2),
            Err(Error::InconsistentLabeling { .. })
        ));
    }

    #[test]
    fn halving_a_beam_doubles_angular_gaps() {
        let n = 2000;
        let pts: Vec<Point> = (0..n)
            .map(|j| {
                let phi = -0.5 + j as f64 * 1e-3;
                Point::new(20.0 * phi.cos(), 20.0 * phi.sin(), -1.0, 0.1)
            })
            .collect();
        let cloud = PointCloud::new(pts, "beam");
        let lab = BeamLabeling { labels: vec![0; n], centroids: vec![-0.05] };
        let out = subsample_points_per_beam(&cloud, &lab, 2).unwrap();
        assert_eq!(out.len(), 1000);
        let mut az: Vec<f64> = out.points.iter().map(|p| p.y.atan2(p.x)).collect();
        az.sort_by(f64::total_cmp);
        for w in az.windows(2) {
            assert!((w[1] - w[0] - 2e-3).abs() < 1e-9);
        }
    }

    #[test]
    fn oversized_stride_keeps_rank_zero_per_beam() {
        let (cloud, truth) = ring_cloud(&[0.0, -2.0, -4.0], 9);
        let lab = BeamLabeling { labels: truth, centroids: vec![0.0, -2.0, -4.0] };
        let out = subsample_points_per_beam(&cloud, &lab, 100).unwrap();
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn variants_validate_input() {
        let (cloud, _) = ring_cloud(&[0.0, -2.0], 10);
        assert!(matches!(
            make_beam_variants(&PointCloud::default(), 2, &default_variants()),
            Err(Error::EmptyCloud)
        ));
        assert!(matches!(make_beam_variants(&cloud, 2, &[]), Err(Error::NoVariants)));
        let out = make_beam_variants(&cloud, 2, &[BeamVariantSpec::new("full", 1, 1)]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].points, cloud.points);
    }

    #[test]
    fn named_variant_constructor() {
        let v = BeamVariantSpec::for_beams(64, 16, true).unwrap();
        assert_eq!(v, BeamVariantSpec::new("16*", 4, 2));
        assert!(BeamVariantSpec::for_beams(64, 24, false).is_err());
    }

    proptest! {
        #[test]
        fn reductions_are_monotone_subsets(
            beams in 1usize..10, per_beam in 1usize..40,
            s1 in 1usize..5, s2 in 1usize..5,
        ) {
            let z: Vec<f64> = (0..beams).map(|b| 2.0 - 1.5 * b as f64).collect();
            let (cloud, labels) = ring_cloud(&z, per_beam);
            let spec = BeamVariantSpec::new("v", s1, s2);
            let (out, out_labels) = apply_variant(&cloud, &labels, &spec).unwrap();
            prop_assert_eq!(out.len(), out_labels.len());
            // every output point appears in the input, in input order
            let mut cursor = 0;
            for p in &out.points {
                while cloud.points[cursor] != *p { cursor += 1; }
                cursor += 1;
            }
            let bigger = BeamVariantSpec::new("w", s1 + 1, s2 + 1);
            let (coarser, _) = apply_variant(&cloud, &labels, &bigger).unwrap();
            prop_assert!(coarser.len() <= out.len());
            let (again, _) = apply_variant(&cloud, &labels, &spec).unwrap();
            prop_assert_eq!(again.points, out.points);
        }

        #[test]
        fn beam_strides_compose(beams in 1usize..20, per_beam in 1usize..5) {
            let z: Vec<f64> = (0..beams).map(|b| 2.0 - 1.0 * b as f64).collect();
            let (cloud, labels) = ring_cloud(&z, per_beam);
            let lab = BeamLabeling { labels: labels.clone(), centroids: z.iter().map(|d| d.to_radians()).collect() };
            let once = downsample_beams(&cloud, &lab, 2).unwrap();
            let lab2 = downsample_labeling(&lab, 2).unwrap();
            let twice = downsample_beams(&once, &lab2, 2).unwrap();
            let four = downsample_beams(&cloud, &lab, 4).unwrap();
            prop_assert_eq!(twice.points, four.points);
        }
    }
}
