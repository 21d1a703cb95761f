//! Dataset ingestion: annotation files, LiDAR point clouds, calibration and
//! precomputed detections, plus the deterministic synthetic generator in
//! [`synth`].
//!
//! The annotation JSON here is this repo's own interchange format (see
//! docs/talk2car_conversion.md for the field mapping from Talk2Car); paths
//! inside annotation and config files are resolved relative to the file that
//! names them.

pub mod synth;

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Detection, Gt3DBox, Scene};
use crate::{BBox2D, Calibration, PointCloud};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path} line {line}: {message}")]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),
    #[error("point cloud {path}: size {size} bytes is not a multiple of the {record} byte record")]
    BadCloudSize {
        path: PathBuf,
        size: u64,
        record: usize,
    },
    #[error("calibration {path}: {message}")]
    Calibration { path: PathBuf, message: String },
}

fn read_to_string(path: &Path) -> Result<String, DatasetError> {
    std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Annotations

/// Raw annotation entry as stored on disk. `command` is the referring
/// expression, matching Talk2Car's field name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub scene_id: String,
    pub image: PathBuf,
    pub image_size: (u32, u32),
    pub command: String,
    pub gt_box: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_boxes_3d: Option<Vec<Gt3DBox>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub version: u32,
    pub scenes: Vec<AnnotationEntry>,
}

/// Result of loading an annotation file: valid scenes plus a record of every
/// skipped entry. Bad entries never abort the load; missing referenced files
/// do, eagerly.
#[derive(Debug)]
pub struct AnnotationLoad {
    pub scenes: Vec<Scene>,
    pub skipped: Vec<(usize, String)>,
}

pub fn load_annotations(path: &Path) -> Result<AnnotationLoad, DatasetError> {
    let text = read_to_string(path)?;
    let file: AnnotationFile =
        serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut scenes = Vec::new();
    let mut skipped = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    for (index, entry) in file.scenes.into_iter().enumerate() {
        if !seen_ids.insert(entry.scene_id.clone()) {
            skipped.push((index, format!("duplicate scene_id {}", entry.scene_id)));
            continue;
        }
        let gt_box = match BBox2D::new(
            entry.gt_box[0],
            entry.gt_box[1],
            entry.gt_box[2],
            entry.gt_box[3],
        ) {
            Ok(b) => b,
            Err(e) => {
                skipped.push((index, format!("degenerate box: {e}")));
                continue;
            }
        };
        let image_path = base.join(&entry.image);
        if !image_path.exists() {
            return Err(DatasetError::MissingFile(image_path));
        }
        let cloud_path = match &entry.cloud {
            Some(c) => {
                let p = base.join(c);
                if !p.exists() {
                    return Err(DatasetError::MissingFile(p));
                }
                Some(p)
            }
            None => None,
        };
        let calibration = match &entry.calibration {
            Some(c) => {
                let p = base.join(c);
                if !p.exists() {
                    return Err(DatasetError::MissingFile(p));
                }
                Some(load_calibration(&p)?)
            }
            None => None,
        };
        let scene = Scene {
            scene_id: entry.scene_id,
            image_path,
            image_size: entry.image_size,
            expression: entry.command,
            gt_box,
            cloud_path,
            calibration,
            gt_boxes_3d: entry.gt_boxes_3d,
        };
        let violations = crate::scene::validate_scene(&scene);
        if violations.is_empty() {
            scenes.push(scene);
        } else {
            skipped.push((index, violations.join("; ")));
        }
    }
    for (index, reason) in &skipped {
        eprintln!("warning: skipping annotation entry {index}: {reason}");
    }
    Ok(AnnotationLoad { scenes, skipped })
}

// ---------------------------------------------------------------------------
// Point clouds

/// Bytes per binary point record: 5 little-endian f32 values
/// (x, y, z, intensity, ring) — the nuScenes sweep layout.
pub const CLOUD_RECORD_BYTES: usize = 20;

/// Loads a point cloud. `.csv` files are parsed as `x,y,z,intensity` with a
/// header; anything else is treated as the binary layout. Non-finite points
/// are dropped; the count of dropped points is returned alongside the cloud.
pub fn load_pointcloud(path: &Path) -> Result<(PointCloud, usize), DatasetError> {
    if path.extension().is_some_and(|e| e == "csv") {
        load_pointcloud_csv(path)
    } else {
        load_pointcloud_binary(path)
    }
}

fn load_pointcloud_binary(path: &Path) -> Result<(PointCloud, usize), DatasetError> {
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() % CLOUD_RECORD_BYTES != 0 {
        return Err(DatasetError::BadCloudSize {
            path: path.to_path_buf(),
            size: bytes.len() as u64,
            record: CLOUD_RECORD_BYTES,
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / CLOUD_RECORD_BYTES);
    let mut dropped = 0usize;
    for record in bytes.chunks_exact(CLOUD_RECORD_BYTES) {
        let mut values = [0f32; 4];
        for (i, v) in values.iter_mut().enumerate() {
            *v = f32::from_le_bytes(record[i * 4..i * 4 + 4].try_into().unwrap());
        }
        if values.iter().all(|v| v.is_finite()) {
            points.push([
                f64::from(values[0]),
                f64::from(values[1]),
                f64::from(values[2]),
                f64::from(values[3]),
            ]);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        eprintln!(
            "warning: dropped {dropped} non-finite point(s) from {}",
            path.display()
        );
    }
    Ok((PointCloud { points }, dropped))
}

fn load_pointcloud_csv(path: &Path) -> Result<(PointCloud, usize), DatasetError> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "x,y,z,intensity" => {}
        _ => {
            return Err(DatasetError::Parse {
                path: path.to_path_buf(),
                message: "expected CSV header x,y,z,intensity".into(),
            })
        }
    }
    let mut points = Vec::new();
    let mut dropped = 0usize;
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DatasetError::Line {
                path: path.to_path_buf(),
                line: line_no + 1,
                message: e.to_string(),
            })?;
        if values.len() != 4 {
            return Err(DatasetError::Line {
                path: path.to_path_buf(),
                line: line_no + 1,
                message: format!("expected 4 values, got {}", values.len()),
            });
        }
        if values.iter().all(|v| v.is_finite()) {
            points.push([values[0], values[1], values[2], values[3]]);
        } else {
            dropped += 1;
        }
    }
    Ok((PointCloud { points }, dropped))
}

/// Writes the binary layout with ring set to 0.
pub fn write_pointcloud(path: &Path, cloud: &PointCloud) -> Result<(), DatasetError> {
    let mut bytes = Vec::with_capacity(cloud.points.len() * CLOUD_RECORD_BYTES);
    for p in &cloud.points {
        for v in p {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        bytes.extend_from_slice(&0f32.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Calibration

#[derive(Debug, Deserialize, Serialize)]
pub struct CalibrationFile {
    /// 9 numbers, row-major 3x3.
    pub intrinsic: Vec<f64>,
    /// 16 numbers, row-major 4x4.
    pub extrinsic: Vec<f64>,
    /// Which way the stored extrinsic maps; internally everything is
    /// cloud -> camera, so `camera_to_cloud` files are inverted on load.
    pub direction: CalibrationDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationDirection {
    CloudToCamera,
    CameraToCloud,
}

pub fn load_calibration(path: &Path) -> Result<Calibration, DatasetError> {
    let text = read_to_string(path)?;
    let file: CalibrationFile = serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if file.intrinsic.len() != 9 || file.extrinsic.len() != 16 {
        return Err(DatasetError::Calibration {
            path: path.to_path_buf(),
            message: format!(
                "expected 9 intrinsic and 16 extrinsic numbers, got {} and {}",
                file.intrinsic.len(),
                file.extrinsic.len()
            ),
        });
    }
    let mut intrinsic = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            intrinsic[i][j] = file.intrinsic[i * 3 + j];
        }
    }
    let mut extrinsic = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            extrinsic[i][j] = file.extrinsic[i * 4 + j];
        }
    }
    if file.direction == CalibrationDirection::CameraToCloud {
        extrinsic = invert_rigid(&extrinsic);
    }
    Calibration::new(intrinsic, extrinsic).map_err(|e| DatasetError::Calibration {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Inverse of a rigid 4x4: `R' = R^T`, `t' = -R^T t`.
pub fn invert_rigid(t: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = t[j][i];
        }
    }
    for i in 0..3 {
        out[i][3] = -(t[0][i] * t[0][3] + t[1][i] * t[1][3] + t[2][i] * t[2][3]);
    }
    out[3][3] = 1.0;
    out
}

// ---------------------------------------------------------------------------
// Precomputed detections

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectionLine {
    pub scene_id: String,
    pub label: String,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

/// JSON-lines, one detection per line, grouped by scene. Duplicate lines are
/// kept; any malformed line fails the load with its line number.
pub fn load_detections(path: &Path) -> Result<HashMap<String, Vec<Detection>>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut map: HashMap<String, Vec<Detection>> = HashMap::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DetectionLine =
            serde_json::from_str(&line).map_err(|e| DatasetError::Line {
                path: path.to_path_buf(),
                line: line_no + 1,
                message: e.to_string(),
            })?;
        let bbox = BBox2D::new(parsed.bbox[0], parsed.bbox[1], parsed.bbox[2], parsed.bbox[3])
            .map_err(|e| DatasetError::Line {
                path: path.to_path_buf(),
                line: line_no + 1,
                message: e.to_string(),
            })?;
        let detection =
            Detection::new(&parsed.label, parsed.confidence, bbox).map_err(|message| {
                DatasetError::Line {
                    path: path.to_path_buf(),
                    line: line_no + 1,
                    message,
                }
            })?;
        map.entry(parsed.scene_id).or_default().push(detection);
    }
    Ok(map)
}
