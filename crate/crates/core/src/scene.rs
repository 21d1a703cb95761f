//! Domain types shared by every pipeline stage.
//!
//! Coordinate conventions live here and nowhere else:
//! - 2D boxes are axis-aligned, in absolute pixels, half-open: a point `p` is
//!   inside iff `x1 <= p.x < x2` and `y1 <= p.y < y2`. Areas are therefore
//!   exact pixel counts for integer-coordinate boxes.
//! - A record's `[x, y]` is the box center in absolute pixels, rounded
//!   half-up.
//! - Extrinsic calibration maps the point-cloud frame into the camera frame;
//!   loaders invert when source data stores the opposite direction.

use std::path::PathBuf;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Integer pixel coordinates, e.g. a record's `[x, y]` location.
pub type PixelPoint = (i64, i64);

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("degenerate box: x2 must exceed x1 and y2 must exceed y1, got [{0}, {1}, {2}, {3}]")]
    DegenerateBox(f64, f64, f64, f64),
    #[error("box coordinates must be finite and >= 0, got [{0}, {1}, {2}, {3}]")]
    BadBoxCoordinates(f64, f64, f64, f64),
    #[error("camera focal lengths must be positive, got fx={0}, fy={1}")]
    BadFocalLength(f64, f64),
    #[error("extrinsic rotation is not orthonormal with determinant +1 (max deviation {0:.3e})")]
    BadRotation(f64),
}

/// Axis-aligned 2D box in pixels, half-open on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[S; 4]", into = "[S; 4]")]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: for<'a> Deserialize<'a>"))]
pub struct Box2<S: Float + Serialize + for<'a> Deserialize<'a>> {
    x1: S,
    y1: S,
    x2: S,
    y2: S,
}

impl<S: Float + Serialize + for<'a> Deserialize<'a>> Box2<S> {
    pub fn new(x1: S, y1: S, x2: S, y2: S) -> Result<Self, SceneError> {
        let as_f64 = |v: S| v.to_f64().unwrap_or(f64::NAN);
        let all = [x1, y1, x2, y2];
        if all.iter().any(|v| !v.is_finite() || *v < S::zero()) {
            return Err(SceneError::BadBoxCoordinates(
                as_f64(x1),
                as_f64(y1),
                as_f64(x2),
                as_f64(y2),
            ));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(SceneError::DegenerateBox(
                as_f64(x1),
                as_f64(y1),
                as_f64(x2),
                as_f64(y2),
            ));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> S {
        self.x1
    }
    pub fn y1(&self) -> S {
        self.y1
    }
    pub fn x2(&self) -> S {
        self.x2
    }
    pub fn y2(&self) -> S {
        self.y2
    }

    pub fn width(&self) -> S {
        self.x2 - self.x1
    }

    pub fn height(&self) -> S {
        self.y2 - self.y1
    }

    pub fn area(&self) -> S {
        self.width() * self.height()
    }

    /// Half-open membership test.
    pub fn contains(&self, x: S, y: S) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    /// Box center in integer pixels, each coordinate rounded half-up.
    pub fn center(&self) -> PixelPoint {
        let two = S::one() + S::one();
        let cx = round_half_up((self.x1 + self.x2) / two);
        let cy = round_half_up((self.y1 + self.y2) / two);
        (cx, cy)
    }

    /// Expands the box by `pad_x`/`pad_y` on every side, then clamps to
    /// `[0, width) x [0, height)` image bounds.
    pub fn expand_clamped(&self, pad_x: S, pad_y: S, width: S, height: S) -> Self {
        let x1 = (self.x1 - pad_x).max(S::zero());
        let y1 = (self.y1 - pad_y).max(S::zero());
        let x2 = (self.x2 + pad_x).min(width);
        let y2 = (self.y2 + pad_y).min(height);
        Self { x1, y1, x2, y2 }
    }

    /// Clips to image bounds; `None` when nothing remains.
    pub fn clip(&self, width: S, height: S) -> Option<Self> {
        let x1 = self.x1.max(S::zero());
        let y1 = self.y1.max(S::zero());
        let x2 = self.x2.min(width);
        let y2 = self.y2.min(height);
        if x2 > x1 && y2 > y1 {
            Some(Self { x1, y1, x2, y2 })
        } else {
            None
        }
    }
}

fn round_half_up<S: Float>(v: S) -> i64 {
    (v + S::from(0.5).unwrap()).floor().to_i64().unwrap()
}

/// Box center in integer pixels, rounded half-up.
pub fn bbox_center<S: Float + Serialize + for<'a> Deserialize<'a>>(b: &Box2<S>) -> PixelPoint {
    b.center()
}

impl<S: Float + Serialize + for<'a> Deserialize<'a>> TryFrom<[S; 4]> for Box2<S> {
    type Error = SceneError;
    fn try_from(v: [S; 4]) -> Result<Self, SceneError> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl<S: Float + Serialize + for<'a> Deserialize<'a>> From<Box2<S>> for [S; 4] {
    fn from(b: Box2<S>) -> [S; 4] {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// One candidate object from the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: crate::BBox2D,
}

impl Detection {
    pub fn new(label: &str, confidence: f64, bbox: crate::BBox2D) -> Result<Self, String> {
        if label.trim().is_empty() {
            return Err("detection label must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(format!("confidence {confidence} outside [0, 1]"));
        }
        Ok(Self {
            label: label.to_string(),
            confidence,
            bbox,
        })
    }
}

/// The unit of LLM reasoning: one candidate with ID, label, caption and
/// spatial location(s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: usize,
    pub name: String,
    pub caption: String,
    pub location2d: PixelPoint,
    /// Metric location in the point-cloud/ego frame; absent when no 3D cue
    /// is available for this candidate.
    pub location3d: Option<[f64; 3]>,
}

/// Camera intrinsics plus the rigid transform cloud frame -> camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: for<'a> Deserialize<'a>"))]
pub struct Calibration<S: Float + Serialize + for<'a> Deserialize<'a>> {
    intrinsic: [[S; 3]; 3],
    extrinsic: [[S; 4]; 4],
}

impl<S: Float + Serialize + for<'a> Deserialize<'a>> Calibration<S> {
    const ROTATION_TOL: f64 = 1e-6;

    pub fn new(intrinsic: [[S; 3]; 3], extrinsic: [[S; 4]; 4]) -> Result<Self, SceneError> {
        let fx = intrinsic[0][0];
        let fy = intrinsic[1][1];
        if fx <= S::zero() || fy <= S::zero() {
            return Err(SceneError::BadFocalLength(
                fx.to_f64().unwrap_or(f64::NAN),
                fy.to_f64().unwrap_or(f64::NAN),
            ));
        }
        let dev = rotation_deviation(&extrinsic);
        if dev > Self::ROTATION_TOL {
            return Err(SceneError::BadRotation(dev));
        }
        Ok(Self {
            intrinsic,
            extrinsic,
        })
    }

    pub fn intrinsic(&self) -> &[[S; 3]; 3] {
        &self.intrinsic
    }

    pub fn extrinsic(&self) -> &[[S; 4]; 4] {
        &self.extrinsic
    }

    pub fn fx(&self) -> S {
        self.intrinsic[0][0]
    }
    pub fn fy(&self) -> S {
        self.intrinsic[1][1]
    }
    pub fn cx(&self) -> S {
        self.intrinsic[0][2]
    }
    pub fn cy(&self) -> S {
        self.intrinsic[1][2]
    }
}

/// Max deviation of R^T R from identity plus |det - 1|, in f64.
fn rotation_deviation<S: Float>(t: &[[S; 4]; 4]) -> f64 {
    let r: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..3).map(|j| t[i][j].to_f64().unwrap_or(f64::NAN)).collect())
        .collect();
    let mut dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let expected = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((dot - expected).abs());
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    dev.max((det - 1.0).abs())
}

/// LiDAR sweep: (x, y, z, intensity) per point, meters / unitless.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cloud<S> {
    pub points: Vec<[S; 4]>,
}

impl<S: Float> Cloud<S> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn xyz(&self) -> impl Iterator<Item = [S; 3]> + '_ {
        self.points.iter().map(|p| [p[0], p[1], p[2]])
    }
}

/// Ground-truth 3D box as ingested from annotations (axis-aligned in the
/// cloud frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gt3DBox {
    pub label: String,
    pub centroid: [f64; 3],
    pub extents: [f64; 3],
}

/// One evaluation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub image_path: PathBuf,
    /// (width, height) in pixels.
    pub image_size: (u32, u32),
    pub expression: String,
    pub gt_box: crate::BBox2D,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<crate::Calibration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_boxes_3d: Option<Vec<Gt3DBox>>,
}

/// Checks every scene invariant and returns all violations, not just the
/// first. Violations are data; nothing here throws.
pub fn validate_scene(scene: &Scene) -> Vec<String> {
    let mut violations = Vec::new();
    if scene.scene_id.trim().is_empty() {
        violations.push("empty scene_id".to_string());
    }
    if scene.expression.trim().is_empty() {
        violations.push("empty expression".to_string());
    }
    let (w, h) = scene.image_size;
    if w == 0 || h == 0 {
        violations.push(format!("degenerate image size {w}x{h}"));
    }
    let b = &scene.gt_box;
    if b.x2() > f64::from(w) || b.y2() > f64::from(h) {
        violations.push(format!(
            "gt_box [{}, {}, {}, {}] exceeds image bounds {w}x{h}",
            b.x1(),
            b.y1(),
            b.x2(),
            b.y2()
        ));
    }
    violations
}

/// Why a sample failed to produce (or defend) a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    NoId,
    OutOfRange,
    NoDetections,
    BackendFatal,
}

impl std::fmt::Display for FailureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FailureMode::NoId => "no_id",
            FailureMode::OutOfRange => "out_of_range",
            FailureMode::NoDetections => "no_detections",
            FailureMode::BackendFatal => "backend_fatal",
        };
        f.write_str(s)
    }
}

/// One backend interaction as recorded in a sample's trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: String,
    pub input_digest: String,
    pub response: String,
    pub wall_ms: u64,
}

/// Full outcome for one sample, including the interaction trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub scene_id: String,
    pub chosen_id: Option<usize>,
    pub predicted_box: Option<crate::BBox2D>,
    pub iou: f64,
    pub hit_at_05: bool,
    pub fallback_used: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_mode: Option<FailureMode>,
    pub trace: Vec<TraceEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::BBox2D;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox2D {
        Box2::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn center_symmetric_box() {
        assert_eq!(bx(0.0, 0.0, 10.0, 10.0).center(), (5, 5));
    }

    #[test]
    fn center_rounds_half_up() {
        // midpoint 0.5 rounds up to 1
        assert_eq!(bx(0.0, 0.0, 1.0, 1.0).center(), (1, 1));
    }

    #[test]
    fn center_midpoint() {
        assert_eq!(bx(100.0, 200.0, 300.0, 400.0).center(), (200, 300));
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(matches!(
            Box2::new(5.0, 0.0, 5.0, 10.0),
            Err(SceneError::DegenerateBox(..))
        ));
        assert!(matches!(
            Box2::new(5.0, 0.0, 4.0, 10.0),
            Err(SceneError::DegenerateBox(..))
        ));
    }

    #[test]
    fn negative_and_nonfinite_rejected() {
        assert!(matches!(
            Box2::new(-1.0, 0.0, 5.0, 10.0),
            Err(SceneError::BadBoxCoordinates(..))
        ));
        assert!(matches!(
            Box2::new(0.0, 0.0, f64::NAN, 10.0),
            Err(SceneError::BadBoxCoordinates(..))
        ));
    }

    #[test]
    fn half_open_membership() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert!(b.contains(0.0, 0.0));
        assert!(b.contains(9.99, 9.99));
        assert!(!b.contains(10.0, 5.0));
        assert!(!b.contains(5.0, 10.0));
    }

    #[test]
    fn center_inside_box_for_two_px_or_larger() {
        // a 1-px box can round its center onto the open edge; from 2 px up
        // the half-up-rounded center always lands inside
        for (x1, y1, x2, y2) in [(0.0, 0.0, 2.0, 2.0), (3.0, 7.0, 5.0, 9.0), (0.0, 0.0, 255.0, 13.0)] {
            let b = bx(x1, y1, x2, y2);
            let (cx, cy) = b.center();
            assert!(b.contains(cx as f64, cy as f64), "{b:?} center {cx},{cy}");
        }
    }

    #[test]
    fn detection_invariants() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert!(Detection::new("", 0.5, b).is_err());
        assert!(Detection::new("car", 1.5, b).is_err());
        assert!(Detection::new("car", 1.0, b).is_ok());
    }

    #[test]
    fn calibration_rejects_scaled_rotation() {
        let mut ext = [[0.0; 4]; 4];
        for i in 0..4 {
            ext[i][i] = 1.0;
        }
        let intr = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Calibration::new(intr, ext).is_ok());
        ext[0][0] = 2.0;
        assert!(matches!(
            Calibration::new(intr, ext),
            Err(SceneError::BadRotation(_))
        ));
    }

    #[test]
    fn calibration_rejects_nonpositive_focal() {
        let mut ext = [[0.0; 4]; 4];
        for i in 0..4 {
            ext[i][i] = 1.0;
        }
        let intr = [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(
            Calibration::new(intr, ext),
            Err(SceneError::BadFocalLength(..))
        ));
    }

    fn well_formed_scene() -> Scene {
        Scene {
            scene_id: "s0".into(),
            image_path: "img.png".into(),
            image_size: (1600, 900),
            expression: "the red car".into(),
            gt_box: bx(10.0, 10.0, 100.0, 100.0),
            cloud_path: None,
            calibration: None,
            gt_boxes_3d: None,
        }
    }

    #[test]
    fn validate_well_formed() {
        assert!(validate_scene(&well_formed_scene()).is_empty());
    }

    #[test]
    fn validate_reports_all_violations() {
        let mut s = well_formed_scene();
        s.expression = "  ".into();
        s.gt_box = bx(10.0, 10.0, 2000.0, 100.0);
        let v = validate_scene(&s);
        assert_eq!(v.len(), 2);
        assert!(v.iter().any(|m| m.contains("empty expression")));
        assert!(v.iter().any(|m| m.contains("exceeds image bounds")));
    }

    #[test]
    fn box_serde_is_four_tuple() {
        let b = bx(1.0, 2.0, 3.0, 4.0);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[1.0,2.0,3.0,4.0]");
        let back: BBox2D = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<BBox2D>("[3.0,2.0,1.0,4.0]").is_err());
    }
}
