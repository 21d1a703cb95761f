//! Open-vocabulary detection backends: a live HTTP service or a file of
//! precomputed per-scene detections.
//!
//! Raw backend output goes through [`filter_detections`] before anything
//! downstream sees it: confidence threshold, clipping to image bounds,
//! confidence-descending order, candidate cap.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use base64::Engine;

use super::{with_retries, BackendError, RetryPolicy};
use crate::scene::{Detection, Scene};

pub trait DetectBackend: Send + Sync {
    /// Unfiltered candidate detections for one scene.
    fn detect_raw(&self, scene: &Scene, categories: &[String])
        -> Result<Vec<Detection>, BackendError>;

    fn call_count(&self) -> u64;
}

/// Applies the detection post-contract: confidence >= `conf_min`, boxes
/// clipped to image bounds (dropped when nothing remains), sorted by
/// confidence descending (stable), truncated to `max_candidates`.
pub fn filter_detections(
    detections: Vec<Detection>,
    conf_min: f64,
    max_candidates: usize,
    image_size: (u32, u32),
) -> Vec<Detection> {
    let (w, h) = (f64::from(image_size.0), f64::from(image_size.1));
    let mut kept: Vec<Detection> = detections
        .into_iter()
        .filter(|d| d.confidence >= conf_min)
        .filter_map(|d| {
            d.bbox.clip(w, h).map(|bbox| Detection { bbox, ..d })
        })
        .collect();
    kept.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).expect("finite confidence"));
    kept.truncate(max_candidates);
    kept
}

/// Precomputed detections keyed by scene id. Categories are already baked
/// into the file, so the query categories are ignored.
pub struct FileDetections {
    by_scene: HashMap<String, Vec<Detection>>,
    calls: AtomicU64,
}

impl FileDetections {
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let by_scene = crate::dataset::load_detections(path)
            .map_err(|e| BackendError::Script(format!("detections file: {e}")))?;
        Ok(Self::from_map(by_scene))
    }

    pub fn from_map(by_scene: HashMap<String, Vec<Detection>>) -> Self {
        Self {
            by_scene,
            calls: AtomicU64::new(0),
        }
    }
}

impl DetectBackend for FileDetections {
    fn detect_raw(
        &self,
        scene: &Scene,
        _categories: &[String],
    ) -> Result<Vec<Detection>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.by_scene
            .get(&scene.scene_id)
            .cloned()
            .ok_or_else(|| {
                BackendError::Script(format!(
                    "no precomputed detections for scene {}",
                    scene.scene_id
                ))
            })
    }

    fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Detection service client: POST `{image: base64, categories: [string],
/// box_threshold: real}` -> `{detections: [{label, confidence, box}]}`.
pub struct HttpDetector {
    endpoint: String,
    auth_env: Option<String>,
    box_threshold: f64,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
    calls: AtomicU64,
}

impl HttpDetector {
    pub fn new(
        endpoint: impl Into<String>,
        auth_env: Option<String>,
        box_threshold: f64,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            auth_env,
            box_threshold,
            retry,
            client: reqwest::blocking::Client::new(),
            calls: AtomicU64::new(0),
        }
    }

    fn call_once(&self, body: &serde_json::Value) -> Result<Vec<Detection>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut builder = self.client.post(&self.endpoint).json(body);
        if let Some(var) = &self.auth_env {
            let token = std::env::var(var).map_err(|_| {
                BackendError::Auth(format!("environment variable {var} is not set"))
            })?;
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(|e| BackendError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| BackendError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(BackendError::Auth(format!("server returned {status}")));
        }
        if status.is_server_error() {
            return Err(BackendError::Transport {
                attempts: 1,
                message: format!("server returned {status}"),
            });
        }
        if !status.is_success() {
            return Err(BackendError::Malformed {
                message: format!("server returned {status}"),
                body: text,
            });
        }
        parse_detection_reply(&text)
    }
}

fn parse_detection_reply(body: &str) -> Result<Vec<Detection>, BackendError> {
    #[derive(serde::Deserialize)]
    struct Wire {
        detections: Vec<WireDet>,
    }
    #[derive(serde::Deserialize)]
    struct WireDet {
        label: String,
        confidence: f64,
        #[serde(rename = "box")]
        bbox: [f64; 4],
    }
    let wire: Wire = serde_json::from_str(body).map_err(|e| BackendError::Malformed {
        message: format!("detection reply: {e}"),
        body: body.to_string(),
    })?;
    wire.detections
        .into_iter()
        .map(|d| {
            let bbox = crate::BBox2D::new(d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]).map_err(
                |e| BackendError::Malformed {
                    message: format!("detection box: {e}"),
                    body: body.to_string(),
                },
            )?;
            Detection::new(&d.label, d.confidence, bbox).map_err(|e| BackendError::Malformed {
                message: e,
                body: body.to_string(),
            })
        })
        .collect()
}

impl DetectBackend for HttpDetector {
    fn detect_raw(
        &self,
        scene: &Scene,
        categories: &[String],
    ) -> Result<Vec<Detection>, BackendError> {
        if categories.is_empty() {
            return Err(BackendError::Malformed {
                message: "detect requires at least one category".into(),
                body: String::new(),
            });
        }
        let image_bytes = std::fs::read(&scene.image_path)?;
        let body = serde_json::json!({
            "image": base64::engine::general_purpose::STANDARD.encode(&image_bytes),
            "categories": categories,
            "box_threshold": self.box_threshold,
        });
        with_retries(&self.retry, || self.call_once(&body))
    }

    fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}
