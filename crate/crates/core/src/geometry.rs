//! Numeric geometry: IoU, rigid transforms, pinhole projection, and lifting
//! 2D boxes into partial 3D boxes against a LiDAR sweep.
//!
//! Everything is a pure function over the generic scalar `S`; the pipeline
//! uses the `f64` aliases from the crate root.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Box2, Cloud};

/// Intersection over union of two half-open pixel boxes. Zero when disjoint.
pub fn iou<S>(a: &Box2<S>, b: &Box2<S>) -> S
where
    S: Float + Serialize + for<'a> Deserialize<'a>,
{
    let ix = a.x2().min(b.x2()) - a.x1().max(b.x1());
    let iy = a.y2().min(b.y2()) - a.y1().max(b.y1());
    if ix <= S::zero() || iy <= S::zero() {
        return S::zero();
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Applies a rigid transform (rotation + translation rows of a 4x4 matrix)
/// to each point: `p -> R p + t`.
pub fn apply_rigid_transform<S: Float>(points: &[[S; 3]], t: &[[S; 4]; 4]) -> Vec<[S; 3]> {
    points
        .iter()
        .map(|p| {
            let mut out = [S::zero(); 3];
            for (i, row) in t.iter().take(3).enumerate() {
                out[i] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2] + row[3];
            }
            out
        })
        .collect()
}

/// Pinhole projection of camera-frame points. Points at or behind
/// `depth_min` are `None`; indices are preserved so callers can map results
/// back to source points.
pub fn project_points<S: Float>(
    intrinsic: &[[S; 3]; 3],
    points_cam: &[[S; 3]],
    depth_min: S,
) -> Vec<Option<(S, S, S)>> {
    let fx = intrinsic[0][0];
    let fy = intrinsic[1][1];
    let cx = intrinsic[0][2];
    let cy = intrinsic[1][2];
    points_cam
        .iter()
        .map(|p| {
            let z = p[2];
            if z <= depth_min {
                return None;
            }
            Some((fx * p[0] / z + cx, fy * p[1] / z + cy, z))
        })
        .collect()
}

/// Componentwise arithmetic mean.
pub fn centroid<S: Float>(points: &[[S; 3]]) -> Result<[S; 3], GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyPoints);
    }
    let n = S::from(points.len()).unwrap();
    let mut sum = [S::zero(); 3];
    for p in points {
        for i in 0..3 {
            sum[i] = sum[i] + p[i];
        }
    }
    Ok([sum[0] / n, sum[1] / n, sum[2] / n])
}

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("centroid of empty point set")]
    EmptyPoints,
}

/// Frustum-lift policy. Depth-quantile trimming only kicks in once enough
/// points survive; below that every surviving point counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiftPolicy<S> {
    /// Points closer than this (meters in the camera frame) are discarded;
    /// filters ego-vehicle returns.
    pub depth_min: S,
    /// Minimum surviving in-box points; below this the lift reports
    /// insufficient points and the record stays 2D-only.
    pub min_points: usize,
    /// Keep points whose depth rank falls in `[lo, hi)` quantiles.
    pub trim_quantiles: (S, S),
    /// Quantile trimming applies only when at least this many points survive.
    pub trim_min_points: usize,
}

impl<S: Float> Default for LiftPolicy<S> {
    fn default() -> Self {
        Self {
            depth_min: S::from(0.5).unwrap(),
            min_points: 5,
            trim_quantiles: (S::from(0.1).unwrap(), S::from(0.9).unwrap()),
            trim_min_points: 20,
        }
    }
}

/// Axis-aligned partial 3D box in the cloud frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartialBox3<S> {
    pub centroid: [S; 3],
    pub extents: [S; 3],
    pub point_count: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum LiftError {
    #[error("insufficient points in frustum: found {found}, need {needed}")]
    InsufficientPoints { found: usize, needed: usize },
}

/// Lifts a 2D box to a partial 3D box: transforms the cloud into the camera
/// frame, projects, keeps points landing inside the (half-open) box beyond
/// `depth_min`, trims depth tails per policy, and reports centroid plus
/// axis-aligned extents in the original cloud frame.
pub fn lift_box_to_3d<S>(
    bbox: &Box2<S>,
    cloud: &Cloud<S>,
    calib: &crate::scene::Calibration<S>,
    policy: &LiftPolicy<S>,
) -> Result<PartialBox3<S>, LiftError>
where
    S: Float + Serialize + for<'a> Deserialize<'a>,
{
    let cloud_xyz: Vec<[S; 3]> = cloud.xyz().collect();
    let cam = apply_rigid_transform(&cloud_xyz, calib.extrinsic());
    let projected = project_points(calib.intrinsic(), &cam, policy.depth_min);

    // (original cloud-frame point, camera depth) for every in-box survivor
    let mut survivors: Vec<([S; 3], S)> = Vec::new();
    for (idx, proj) in projected.iter().enumerate() {
        if let Some((u, v, depth)) = proj {
            if bbox.contains(*u, *v) {
                survivors.push((cloud_xyz[idx], *depth));
            }
        }
    }

    if survivors.len() < policy.min_points {
        return Err(LiftError::InsufficientPoints {
            found: survivors.len(),
            needed: policy.min_points,
        });
    }

    let kept: Vec<[S; 3]> = if survivors.len() >= policy.trim_min_points {
        trim_by_depth(&mut survivors, policy.trim_quantiles)
    } else {
        survivors.iter().map(|(p, _)| *p).collect()
    };

    let c = centroid(&kept).expect("kept set is non-empty");
    let mut lo = kept[0];
    let mut hi = kept[0];
    for p in &kept {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    Ok(PartialBox3 {
        centroid: c,
        extents: [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
        point_count: kept.len(),
    })
}

/// Sorts by depth and keeps ranks in `[floor(lo*n), ceil(hi*n))`.
fn trim_by_depth<S: Float>(survivors: &mut [([S; 3], S)], quantiles: (S, S)) -> Vec<[S; 3]> {
    survivors.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite depths"));
    let n = S::from(survivors.len()).unwrap();
    let lo = (quantiles.0 * n).floor().to_usize().unwrap();
    let hi = (quantiles.1 * n).ceil().to_usize().unwrap();
    survivors[lo..hi].iter().map(|(p, _)| *p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Calibration;
    use crate::{BBox2D, PointCloud};

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox2D {
        Box2::new(x1, y1, x2, y2).unwrap()
    }

    /// Brute-force IoU by counting lattice pixels under the half-open rule.
    fn iou_pixel_count(a: &BBox2D, b: &BBox2D, extent: i64) -> f64 {
        let mut inter = 0u64;
        let mut union = 0u64;
        for x in 0..extent {
            for y in 0..extent {
                let (fx, fy) = (x as f64, y as f64);
                let ia = a.contains(fx, fy);
                let ib = b.contains(fx, fy);
                if ia && ib {
                    inter += 1;
                }
                if ia || ib {
                    union += 1;
                }
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_identity() {
        let a = bx(3.0, 4.0, 10.0, 12.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint() {
        assert_eq!(iou(&bx(0.0, 0.0, 10.0, 10.0), &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
    }

    #[test]
    fn iou_one_third_overlap() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(5.0, 0.0, 15.0, 10.0);
        let expected = iou_pixel_count(&a, &b, 16);
        assert_eq!(iou(&a, &b), expected);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_symmetric() {
        let a = bx(0.0, 0.0, 7.0, 9.0);
        let b = bx(3.0, 2.0, 12.0, 20.0);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn rigid_identity() {
        let mut t = [[0.0; 4]; 4];
        for i in 0..4 {
            t[i][i] = 1.0;
        }
        let pts = [[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        assert_eq!(apply_rigid_transform(&pts, &t), pts.to_vec());
    }

    #[test]
    fn rigid_translation() {
        let mut t = [[0.0; 4]; 4];
        for i in 0..4 {
            t[i][i] = 1.0;
        }
        t[0][3] = 1.0;
        t[1][3] = 2.0;
        t[2][3] = 3.0;
        assert_eq!(apply_rigid_transform(&[[0.0, 0.0, 0.0]], &t), vec![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn rigid_rotation_90_about_z() {
        let t = [
            [0.0, -1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let out = apply_rigid_transform(&[[1.0, 0.0, 0.0]], &t);
        assert!((out[0][0] - 0.0).abs() < 1e-9);
        assert!((out[0][1] - 1.0).abs() < 1e-9);
        assert!((out[0][2] - 0.0).abs() < 1e-9);
    }

    fn intr(fx: f64, fy: f64, cx: f64, cy: f64) -> [[f64; 3]; 3] {
        [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]
    }

    #[test]
    fn projection_principal_axis() {
        let k = intr(1000.0, 1000.0, 800.0, 450.0);
        let out = project_points(&k, &[[0.0, 0.0, 10.0]], 0.0);
        assert_eq!(out, vec![Some((800.0, 450.0, 10.0))]);
    }

    #[test]
    fn projection_offset_point() {
        let k = intr(1000.0, 1000.0, 800.0, 450.0);
        let out = project_points(&k, &[[1.0, 0.0, 10.0]], 0.0);
        assert_eq!(out, vec![Some((900.0, 450.0, 10.0))]);
    }

    #[test]
    fn projection_behind_camera_is_invalid_and_index_preserving() {
        let k = intr(1000.0, 1000.0, 800.0, 450.0);
        let out = project_points(&k, &[[0.0, 0.0, -5.0], [0.0, 0.0, 10.0]], 0.0);
        assert_eq!(out[0], None);
        assert!(out[1].is_some());
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(centroid(&[[0.0, 0.0, 0.0], [2.0, 2.0, 2.0]]).unwrap(), [1.0, 1.0, 1.0]);
        assert_eq!(centroid(&[[4.0, 5.0, 6.0]]).unwrap(), [4.0, 5.0, 6.0]);
        let c = centroid(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        for v in c {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(centroid::<f64>(&[]), Err(GeometryError::EmptyPoints));
    }

    fn identity_calib() -> Calibration<f64> {
        let mut ext = [[0.0; 4]; 4];
        for i in 0..4 {
            ext[i][i] = 1.0;
        }
        Calibration::new(intr(1000.0, 1000.0, 800.0, 450.0), ext).unwrap()
    }

    #[test]
    fn lift_cluster_centroid() {
        // 4 points projecting inside the box at z=5 in a unit cluster,
        // 6 far outside.
        let calib = identity_calib();
        let bbox = bx(700.0, 350.0, 900.0, 550.0);
        let mut points: Vec<[f64; 4]> = vec![
            [0.1, 0.1, 5.0, 1.0],
            [-0.1, 0.1, 5.0, 1.0],
            [0.1, -0.1, 5.0, 1.0],
            [-0.1, -0.1, 5.0, 1.0],
        ];
        for i in 0..6 {
            points.push([10.0 + i as f64, 10.0, 5.0, 1.0]);
        }
        let cloud = PointCloud { points };
        let policy = LiftPolicy { min_points: 4, ..LiftPolicy::default() };
        let out = lift_box_to_3d(&bbox, &cloud, &calib, &policy).unwrap();
        assert_eq!(out.point_count, 4);
        for i in 0..3 {
            // cluster mean is (0, 0, 5)
            let expected = [0.0, 0.0, 5.0][i];
            assert!((out.centroid[i] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn lift_empty_cloud() {
        let calib = identity_calib();
        let bbox = bx(0.0, 0.0, 1600.0, 900.0);
        let err = lift_box_to_3d(&bbox, &PointCloud::default(), &calib, &LiftPolicy::default());
        assert_eq!(err, Err(LiftError::InsufficientPoints { found: 0, needed: 5 }));
    }

    #[test]
    fn lift_all_behind_camera() {
        let calib = identity_calib();
        let bbox = bx(0.0, 0.0, 1600.0, 900.0);
        let cloud = PointCloud {
            points: (0..10).map(|i| [0.0, 0.0, -1.0 - i as f64, 0.0]).collect(),
        };
        let err = lift_box_to_3d(&bbox, &cloud, &calib, &LiftPolicy::default());
        assert_eq!(err, Err(LiftError::InsufficientPoints { found: 0, needed: 5 }));
    }

    #[test]
    fn lift_trims_depth_tails() {
        // 18 points at z=10, one near outlier, one far outlier: with 20
        // survivors the [10%, 90%) trim drops exactly the two tails.
        let calib = identity_calib();
        let bbox = bx(790.0, 440.0, 810.0, 460.0);
        let mut points: Vec<[f64; 4]> = (0..18).map(|_| [0.0, 0.0, 10.0, 1.0]).collect();
        points.push([0.0, 0.0, 1.0, 1.0]);
        points.push([0.0, 0.0, 100.0, 1.0]);
        let cloud = PointCloud { points };
        let out = lift_box_to_3d(&bbox, &cloud, &calib, &LiftPolicy::default()).unwrap();
        assert_eq!(out.point_count, 16);
        assert!((out.centroid[2] - 10.0).abs() < 1e-12);
        assert!(out.extents[2].abs() < 1e-12);
    }

    #[test]
    fn extents_box_contains_centroid() {
        let calib = identity_calib();
        let bbox = bx(600.0, 300.0, 1000.0, 600.0);
        let cloud = PointCloud {
            points: (0..30)
                .map(|i| {
                    let f = i as f64 / 30.0;
                    [f - 0.5, f * 0.3, 5.0 + f * 3.0, 1.0]
                })
                .collect(),
        };
        let out = lift_box_to_3d(&bbox, &cloud, &calib, &LiftPolicy::default()).unwrap();
        // centroid must lie within the axis-aligned extents box
        for i in 0..3 {
            assert!(out.extents[i] >= 0.0);
        }
    }

    #[test]
    fn rigid_preserves_pairwise_distance() {
        let t = [
            [0.36, 0.48, -0.8, 1.0],
            [-0.8, 0.6, 0.0, -2.0],
            [0.48, 0.64, 0.6, 3.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let pts = [[1.0, 2.0, 3.0], [-4.0, 0.5, 2.0]];
        let out = apply_rigid_transform(&pts, &t);
        let d = |a: &[f64; 3], b: &[f64; 3]| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        };
        let before = d(&pts[0], &pts[1]);
        let after = d(&out[0], &out[1]);
        assert!((before - after).abs() / before < 1e-9);
    }
}
