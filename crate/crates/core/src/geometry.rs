//! Points, oriented boxes, rotated-box IoU and prediction matching.
//!
//! Boxes live in the sensor frame: `x` forward, `y` left, `z` up. Yaw is the
//! heading of the box length axis measured counter-clockwise from `x`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Tolerance used by the polygon clipper when deciding which side of an edge
/// a vertex lies on.
pub const CLIP_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalPoint {
    pub range: f64,
    /// Elevation above the sensor's horizontal plane, in (-pi/2, pi/2).
    pub zenith: f64,
    /// Horizontal angle from `x` towards `y`, in (-pi, pi].
    pub azimuth: f64,
}

/// Cartesian to spherical conversion used for beam labeling.
///
/// The zenith is `atan(z / hypot(x, y))`; the azimuth uses `atan2(y, x)`.
pub fn to_spherical(p: &Point) -> Result<SphericalPoint> {
    let horizontal = p.x.hypot(p.y);
    if horizontal == 0.0 {
        return Err(Error::DegenerateAxis { x: p.x, y: p.y, z: p.z });
    }
    let mut azimuth = p.y.atan2(p.x);
    if azimuth == -PI {
        azimuth = PI;
    }
    Ok(SphericalPoint {
        range: (p.x * p.x + p.y * p.y + p.z * p.z).sqrt(),
        zenith: (p.z / horizontal).atan(),
        azimuth,
    })
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid can round up to exactly 2*pi
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Oriented 3D box: center `c`, size `(l, w, h)` and yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    /// Builds a box, normalizing the yaw. Panics on non-positive sizes.
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Self {
        assert!(
            size.iter().all(|s| *s > 0.0 && s.is_finite()),
            "box sizes must be positive and finite, got {size:?}"
        );
        Self { center, size, yaw: normalize_angle(yaw) }
    }

    pub fn try_new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        if !size.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::Invalid(format!("box sizes must be positive, got {size:?}")));
        }
        if !center.iter().all(|c| c.is_finite()) || !yaw.is_finite() {
            return Err(Error::Invalid("box center and yaw must be finite".into()));
        }
        Ok(Self { center, size, yaw: normalize_angle(yaw) })
    }

    pub fn length(&self) -> f64 {
        self.size[0]
    }

    pub fn width(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn z_min(&self) -> f64 {
        self.center[2] - 0.5 * self.size[2]
    }

    pub fn z_max(&self) -> f64 {
        self.center[2] + 0.5 * self.size[2]
    }

    /// Footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.size[0];
        let hw = 0.5 * self.size[1];
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])
    }

    /// Expresses a world point in the box frame.
    pub fn to_local(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, z - self.center[2]]
    }

    /// Containment test with every half-extent inflated by `margin`.
    pub fn contains(&self, p: &Point, margin: f64) -> bool {
        let [u, v, w] = self.to_local(p.x, p.y, p.z);
        u.abs() <= 0.5 * self.size[0] + margin
            && v.abs() <= 0.5 * self.size[1] + margin
            && w.abs() <= 0.5 * self.size[2] + margin
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedObject {
    pub pred_index: usize,
    pub prediction: Detection,
    pub gt_index: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IouCriterion {
    #[default]
    Bev,
    ThreeD,
}

impl IouCriterion {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            IouCriterion::Bev => bev_iou(a, b),
            IouCriterion::ThreeD => iou_3d(a, b),
        }
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc.abs()
}

fn segment_line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let denom = dp - dq;
    if denom.abs() < CLIP_EPS {
        return p;
    }
    let t = dp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Intersection of two convex counter-clockwise polygons (Sutherland-Hodgman).
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= -CLIP_EPS;
            let prev_in = cross(a, b, prev) >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Area of the overlap of the two footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let ca = a.bev_corners();
    let cb = b.bev_corners();
    // cheap reject on circumscribed circles
    let ra = 0.5 * a.size[0].hypot(a.size[1]);
    let rb = 0.5 * b.size[0].hypot(b.size[1]);
    let d = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
    if d > ra + rb {
        return 0.0;
    }
    polygon_area(&clip_convex(&ca, &cb)).min(a.bev_area()).min(b.bev_area())
}

/// Bird's-eye-view IoU of two yaw-rotated footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU: footprint overlap times vertical overlap over the union of volumes.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        return 1.0;
    }
    let dz = (a.z_max().min(b.z_max()) - a.z_min().max(b.z_min())).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Associates every prediction with the ground-truth box of maximum IoU.
///
/// Several predictions may map to the same ground truth. Predictions that
/// overlap nothing are dropped; ties go to the lowest ground-truth index.
pub fn match_predictions(
    preds: &[Detection],
    gts: &[Box3D],
    criterion: IouCriterion,
) -> Vec<MatchedObject> {
    let mut out = Vec::new();
    for (pred_index, pred) in preds.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            let iou = criterion.iou(&pred.bbox, gt);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gt_index, iou)) = best {
            if iou > 0.0 {
                out.push(MatchedObject { pred_index, prediction: *pred, gt_index, iou });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(cx: f64, cy: f64, yaw: f64) -> Box3D {
        Box3D::new([cx, cy, 0.5], [1.0, 1.0, 1.0], yaw)
    }

    #[test]
    fn spherical_axis_and_symmetry_cases() {
        let s = to_spherical(&Point::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!((s.zenith, s.azimuth, s.range), (0.0, 0.0, 1.0));

        let s = to_spherical(&Point::new(0.0, 1.0, 1.0, 0.0)).unwrap();
        assert!((s.zenith - PI / 4.0).abs() < 1e-15);
        assert!((s.azimuth - PI / 2.0).abs() < 1e-15);
        assert!((s.range - 2f64.sqrt()).abs() < 1e-15);

        assert!(matches!(
            to_spherical(&Point::new(0.0, 0.0, 5.0, 0.0)),
            Err(Error::DegenerateAxis { .. })
        ));
    }

    #[test]
    fn azimuth_is_in_half_open_range() {
        let s = to_spherical(&Point::new(-1.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(s.azimuth, PI);
        let s = to_spherical(&Point::new(-1.0, -0.0, 0.0, 0.0)).unwrap();
        assert_eq!(s.azimuth, PI);
    }

    #[test]
    fn yaw_is_normalized() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        let b = Box3D::new([0.0; 3], [1.0; 3], 7.0);
        assert!(b.yaw > -PI && b.yaw <= PI);
    }

    #[test]
    fn bev_iou_fixed_cases() {
        let a = unit(0.0, 0.0, 0.0);
        assert_eq!(bev_iou(&a, &a), 1.0);
        let b = unit(0.5, 0.0, 0.0);
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(bev_iou(&a, &unit(5.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn iou_3d_fixed_cases() {
        let a = Box3D::new([0.0, 0.0, 0.0], [2.0, 1.0, 1.0], 0.3);
        assert_eq!(iou_3d(&a, &a), 1.0);
        let mut b = a;
        b.center[2] = 1.5;
        assert_eq!(iou_3d(&a, &b), 0.0);
        let mut c = a;
        c.center[2] = 0.5;
        assert!((iou_3d(&a, &c) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn matching_cases() {
        let gt = Box3D::new([3.0, 1.0, 0.0], [4.0, 2.0, 1.5], 0.2);
        let m = match_predictions(
            &[Detection { bbox: gt, confidence: 0.7 }],
            &[gt],
            IouCriterion::Bev,
        );
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].gt_index, 0);
        assert_eq!(m[0].iou, 1.0);
        assert!(match_predictions(&[], &[gt], IouCriterion::Bev).is_empty());
        let far = Detection { bbox: Box3D::new([50.0, 0.0, 0.0], [1.0; 3], 0.0), confidence: 0.5 };
        assert!(match_predictions(&[far], &[gt], IouCriterion::ThreeD).is_empty());
    }

    #[test]
    fn matching_tie_goes_to_lowest_gt_index() {
        let gt = Box3D::new([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0);
        let pred = Detection { bbox: Box3D::new([0.5, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0), confidence: 0.9 };
        let m = match_predictions(&[pred], &[gt, gt], IouCriterion::Bev);
        assert_eq!(m[0].gt_index, 0);
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (
            -5.0..5.0f64,
            -5.0..5.0f64,
            -1.0..1.0f64,
            0.2..4.0f64,
            0.2..3.0f64,
            0.2..2.0f64,
            -PI..PI,
        )
            .prop_map(|(x, y, z, l, w, h, r)| Box3D::new([x, y, z], [l, w, h], r))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = bev_iou(&a, &b);
            let ba = bev_iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            let ab3 = iou_3d(&a, &b);
            prop_assert!((ab3 - iou_3d(&b, &a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab3));
            prop_assert!(ab3 <= ab + 1e-12);
        }

        #[test]
        fn iou_rigid_transform_invariant(
            a in arb_box(), b in arb_box(),
            tx in -20.0..20.0f64, ty in -20.0..20.0f64, tz in -3.0..3.0f64, rot in -PI..PI,
        ) {
            let (s, c) = rot.sin_cos();
            let move_box = |bx: &Box3D| {
                let [x, y, z] = bx.center;
                Box3D::new([c * x - s * y + tx, s * x + c * y + ty, z + tz], bx.size, bx.yaw + rot)
            };
            let (ma, mb) = (move_box(&a), move_box(&b));
            prop_assert!((bev_iou(&a, &b) - bev_iou(&ma, &mb)).abs() < 1e-9);
            prop_assert!((iou_3d(&a, &b) - iou_3d(&ma, &mb)).abs() < 1e-9);
        }

        #[test]
        fn matching_is_order_invariant(
            boxes in proptest::collection::vec(arb_box(), 1..5),
            preds in proptest::collection::vec((arb_box(), 0.0..1.0f64), 0..6),
        ) {
            let dets: Vec<Detection> = preds.iter().map(|(b, c)| Detection { bbox: *b, confidence: *c }).collect();
            let forward = match_predictions(&dets, &boxes, IouCriterion::Bev);
            let mut rev = dets.clone();
            rev.reverse();
            let backward = match_predictions(&rev, &boxes, IouCriterion::Bev);
            prop_assert_eq!(forward.len(), backward.len());
            for m in &forward {
                let r = backward.iter().find(|r| r.pred_index == dets.len() - 1 - m.pred_index).unwrap();
                prop_assert_eq!(r.gt_index, m.gt_index);
                prop_assert_eq!(r.iou, m.iou);
            }
        }
    }
}
