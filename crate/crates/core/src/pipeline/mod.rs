//! Per-sample orchestration of stages A-D and the pipeline variants.
//!
//! Stage graph for the LLM-RG variants:
//! A. category extraction (LLM) — falls back to a fixed driving vocabulary
//!    when the reply does not parse;
//! B. open-vocabulary detection, filtered to the candidate cap;
//! C. crop + caption every candidate (VLM);
//! D. serialize records, build the grounding prompt, ask the LLM, map the
//!    chosen id back to its box. Parse failures retry with a terse reminder;
//!    after the retry budget the highest-confidence detection matching the
//!    first extracted category is chosen and the sample is flagged.
//!
//! The VLM baselines (`naive_vlm`, `crops_vlm`, `boxes_captions_vlm`) skip
//! reasoning stages per their definitions and never use fallback.
//!
//! Every backend interaction lands in the sample's trace; semantic failures
//! are encoded in the result, only infrastructure errors abort a sample.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    filter_detections, BackendDescriptor, BackendError, BackendKind, CachedChat, Captioner,
    ChatBackend, ChatMessage, ChatRequest, DetectBackend, DiskCache, FileDetections, HttpChat,
    HttpDetector, RetryPolicy, ScriptedChat,
};
use crate::dataset::DatasetError;
use crate::geometry::{iou, lift_box_to_3d};
use crate::prompting::{
    build_boxes_captions_prompt, build_category_prompt, build_crops_prompt,
    build_grounding_prompt, build_naive_vlm_prompt, default_exemplars, load_exemplars,
    parse_box_response, parse_category_response, parse_grounding_response, Exemplar,
    GroundingMode, ParseError,
};
use crate::scene::{Detection, FailureMode, GroundingResult, Gt3DBox, ObjectRecord, Scene,
    TraceEntry};
use crate::{BBox2D, LiftPolicy};

/// Stage-A fallback vocabulary: the nuScenes detection classes.
pub const FALLBACK_VOCABULARY: [&str; 9] = [
    "car",
    "truck",
    "bus",
    "pedestrian",
    "bicycle",
    "motorcycle",
    "trailer",
    "traffic cone",
    "barrier",
];

/// Terse reminder appended on each grounding parse retry.
pub const PARSE_RETRY_REMINDER: &str = "Reply with ANSWER: <id> only.";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("image: {0}")]
    Image(String),
    #[error("config: {0}")]
    Config(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    LlmRg,
    LlmRgLidar,
    LlmRgGt3d,
    NaiveVlm,
    CropsVlm,
    BoxesCaptionsVlm,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::LlmRg => "llm_rg",
            Variant::LlmRgLidar => "llm_rg_lidar",
            Variant::LlmRgGt3d => "llm_rg_gt3d",
            Variant::NaiveVlm => "naive_vlm",
            Variant::CropsVlm => "crops_vlm",
            Variant::BoxesCaptionsVlm => "boxes_captions_vlm",
        }
    }

    pub fn needs_caption(&self) -> bool {
        matches!(
            self,
            Variant::LlmRg | Variant::LlmRgLidar | Variant::LlmRgGt3d | Variant::BoxesCaptionsVlm
        )
    }

    pub fn needs_detect(&self) -> bool {
        !matches!(self, Variant::NaiveVlm)
    }

    pub fn needs_lidar(&self) -> bool {
        matches!(self, Variant::LlmRgLidar)
    }

    pub fn needs_gt3d(&self) -> bool {
        matches!(self, Variant::LlmRgGt3d)
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "llm_rg" => Ok(Variant::LlmRg),
            "llm_rg_lidar" => Ok(Variant::LlmRgLidar),
            "llm_rg_gt3d" => Ok(Variant::LlmRgGt3d),
            "naive_vlm" => Ok(Variant::NaiveVlm),
            "crops_vlm" => Ok(Variant::CropsVlm),
            "boxes_captions_vlm" => Ok(Variant::BoxesCaptionsVlm),
            other => Err(format!("unknown variant {other}")),
        }
    }
}

fn default_crop_padding() -> f64 {
    0.1
}
fn default_conf_min() -> f64 {
    0.3
}
fn default_max_candidates() -> usize {
    20
}
fn default_worker_count() -> usize {
    1
}
fn default_parse_retries() -> u32 {
    3
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub chat: BackendDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<BackendDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detect: Option<BackendDescriptor>,
    #[serde(default)]
    pub lift: LiftPolicy,
    #[serde(default = "default_crop_padding")]
    pub crop_padding: f64,
    #[serde(default = "default_conf_min")]
    pub conf_min: f64,
    #[serde(default = "default_max_candidates")]
    pub max_candidates: usize,
    #[serde(default = "default_worker_count")]
    pub worker_count: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_parse_retries")]
    pub parse_retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplars: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub chain_of_thought: bool,
}

impl PipelineConfig {
    /// Loads a config file and resolves its relative paths against the
    /// config's own directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("bad config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        if let Some(s) = config.chat.script.as_mut() {
            resolve(s);
        }
        if let Some(c) = config.caption.as_mut() {
            if let Some(s) = c.script.as_mut() {
                resolve(s);
            }
        }
        if let Some(d) = config.detect.as_mut() {
            if let Some(s) = d.script.as_mut() {
                resolve(s);
            }
        }
        if let Some(d) = config.cache_dir.as_mut() {
            resolve(d);
        }
        if let Some(e) = config.exemplars.as_mut() {
            resolve(e);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.chat.validate().map_err(PipelineError::Config)?;
        if self.variant.needs_caption() {
            let caption = self.caption.as_ref().ok_or_else(|| {
                PipelineError::Config(format!(
                    "variant {} requires a caption backend",
                    self.variant.as_str()
                ))
            })?;
            caption.validate().map_err(PipelineError::Config)?;
        }
        if self.variant.needs_detect() {
            let detect = self.detect.as_ref().ok_or_else(|| {
                PipelineError::Config(format!(
                    "variant {} requires a detect backend",
                    self.variant.as_str()
                ))
            })?;
            detect.validate().map_err(PipelineError::Config)?;
        }
        if !(0.0..=1.0).contains(&self.conf_min) {
            return Err(PipelineError::Config(format!(
                "conf_min {} outside [0, 1]",
                self.conf_min
            )));
        }
        if self.crop_padding < 0.0 {
            return Err(PipelineError::Config("crop_padding must be >= 0".into()));
        }
        if self.max_candidates == 0 || self.worker_count == 0 || self.parse_retries == 0 {
            return Err(PipelineError::Config(
                "max_candidates, worker_count and parse_retries must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Variant prerequisites are checked against the whole dataset up front,
    /// never mid-run.
    pub fn validate_scenes(&self, scenes: &[Scene]) -> Result<(), PipelineError> {
        for scene in scenes {
            if self.variant.needs_lidar()
                && (scene.cloud_path.is_none() || scene.calibration.is_none())
            {
                return Err(PipelineError::Config(format!(
                    "variant {} requires cloud + calibration, scene {} lacks them",
                    self.variant.as_str(),
                    scene.scene_id
                )));
            }
            if self.variant.needs_gt3d()
                && (scene.calibration.is_none() || scene.gt_boxes_3d.is_none())
            {
                return Err(PipelineError::Config(format!(
                    "variant {} requires calibration + GT 3D boxes, scene {} lacks them",
                    self.variant.as_str(),
                    scene.scene_id
                )));
            }
        }
        Ok(())
    }
}

/// Assembled backends plus shared config for a run.
pub struct Runtime {
    pub config: PipelineConfig,
    chat: Arc<dyn ChatBackend>,
    caption_chat: Option<Arc<dyn ChatBackend>>,
    caption_model: String,
    detect: Option<Arc<dyn DetectBackend>>,
    detect_is_live: bool,
    exemplars: Vec<Exemplar>,
}

fn build_chat(
    descriptor: &BackendDescriptor,
    kind: BackendKind,
    retry: RetryPolicy,
    cache: Option<&Arc<DiskCache>>,
) -> Result<Arc<dyn ChatBackend>, PipelineError> {
    let inner: Arc<dyn ChatBackend> = if let Some(script) = &descriptor.script {
        Arc::new(ScriptedChat::from_file(script, kind)?)
    } else {
        let endpoint = descriptor
            .endpoint
            .as_ref()
            .expect("descriptor validated: endpoint xor script");
        Arc::new(HttpChat::new(endpoint, descriptor.auth_env.clone(), retry))
    };
    Ok(match cache {
        Some(cache) => Arc::new(CachedChat::new(inner, cache.clone(), kind)),
        None => inner,
    })
}

impl Runtime {
    pub fn from_config(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let cache = match &config.cache_dir {
            Some(dir) => Some(Arc::new(DiskCache::new(dir.clone())?)),
            None => None,
        };
        let chat = build_chat(&config.chat, BackendKind::Chat, config.retry, cache.as_ref())?;
        let (caption_chat, caption_model) = match (&config.caption, config.variant.needs_caption())
        {
            (Some(descriptor), true) => (
                Some(build_chat(
                    descriptor,
                    BackendKind::Caption,
                    config.retry,
                    cache.as_ref(),
                )?),
                descriptor.model_name.clone(),
            ),
            _ => (None, String::new()),
        };
        let (detect, detect_is_live) = match (&config.detect, config.variant.needs_detect()) {
            (Some(descriptor), true) => {
                if let Some(script) = &descriptor.script {
                    (
                        Some(Arc::new(FileDetections::from_file(script)?) as Arc<dyn DetectBackend>),
                        false,
                    )
                } else {
                    let endpoint = descriptor
                        .endpoint
                        .as_ref()
                        .expect("descriptor validated: endpoint xor script");
                    (
                        Some(Arc::new(HttpDetector::new(
                            endpoint,
                            descriptor.auth_env.clone(),
                            config.conf_min,
                            config.retry,
                        )) as Arc<dyn DetectBackend>),
                        true,
                    )
                }
            }
            _ => (None, false),
        };
        let exemplars = match &config.exemplars {
            Some(path) => load_exemplars(path).map_err(PipelineError::Config)?,
            None => default_exemplars(),
        };
        Ok(Self {
            config,
            chat,
            caption_chat,
            caption_model,
            detect,
            detect_is_live,
            exemplars,
        })
    }

    /// Underlying model invocations (not cache hits): chat + caption, plus
    /// live detector calls. Local file-backed detections do not count.
    pub fn backend_calls(&self) -> u64 {
        let mut calls = self.chat.call_count();
        if let Some(c) = &self.caption_chat {
            calls += c.call_count();
        }
        if self.detect_is_live {
            if let Some(d) = &self.detect {
                calls += d.call_count();
            }
        }
        calls
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }
}

struct Tracer {
    entries: Vec<TraceEntry>,
}

impl Tracer {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    fn record(&mut self, stage: &str, input_digest: String, response: String, started: Instant) {
        self.entries.push(TraceEntry {
            stage: stage.to_string(),
            input_digest,
            response,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
}

fn chat_traced(
    backend: &Arc<dyn ChatBackend>,
    kind: BackendKind,
    stage: &str,
    request: &ChatRequest,
    tracer: &mut Tracer,
) -> Result<String, PipelineError> {
    let started = Instant::now();
    let response = backend.chat(request)?;
    tracer.record(stage, request.digest(kind), response.text.clone(), started);
    Ok(response.text)
}

/// Stage A. Returns the extracted categories, or the fixed driving-domain
/// vocabulary when the reply does not parse.
fn extract_categories(
    rt: &Runtime,
    scene: &Scene,
    tracer: &mut Tracer,
) -> Result<Vec<String>, PipelineError> {
    let request = build_category_prompt(&rt.config.chat.model_name, &scene.expression)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let text = chat_traced(&rt.chat, BackendKind::Chat, "category", &request, tracer)?;
    match parse_category_response(&text) {
        Ok(categories) => Ok(categories),
        Err(_) => Ok(FALLBACK_VOCABULARY.iter().map(|s| s.to_string()).collect()),
    }
}

/// Stage B: detect, then apply the filtering contract.
fn detect_candidates(
    rt: &Runtime,
    scene: &Scene,
    categories: &[String],
    tracer: &mut Tracer,
) -> Result<Vec<Detection>, PipelineError> {
    let detect = rt
        .detect
        .as_ref()
        .expect("variant validated to have a detector");
    let started = Instant::now();
    let raw = detect.detect_raw(scene, categories)?;
    let digest = crate::backends::sha256_hex(
        format!("detect:{}:{}", scene.scene_id, categories.join(",")).as_bytes(),
    );
    let response = serde_json::to_string(&raw).unwrap_or_default();
    tracer.record("detect", digest, response, started);
    Ok(filter_detections(
        raw,
        rt.config.conf_min,
        rt.config.max_candidates,
        scene.image_size,
    ))
}

/// Crops a detection region with fractional padding of the box dimensions
/// on each side, clamped to image bounds, and returns PNG bytes.
pub fn crop_region(
    image: &DynamicImage,
    bbox: &BBox2D,
    padding: f64,
) -> Result<Vec<u8>, PipelineError> {
    let (w, h) = (f64::from(image.width()), f64::from(image.height()));
    let padded = bbox.expand_clamped(padding * bbox.width(), padding * bbox.height(), w, h);
    let x1 = padded.x1().floor().max(0.0) as u32;
    let y1 = padded.y1().floor().max(0.0) as u32;
    let x2 = (padded.x2().ceil() as u32).min(image.width());
    let y2 = (padded.y2().ceil() as u32).min(image.height());
    if x2 <= x1 || y2 <= y1 {
        return Err(PipelineError::Image(format!(
            "crop collapsed to zero area for box [{}, {}, {}, {}]",
            bbox.x1(),
            bbox.y1(),
            bbox.x2(),
            bbox.y2()
        )));
    }
    let crop = image.crop_imm(x1, y1, x2 - x1, y2 - y1);
    encode_png(&crop)
}

pub fn encode_png(image: &DynamicImage) -> Result<Vec<u8>, PipelineError> {
    let mut bytes = Vec::new();
    image
        .write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .map_err(|e| PipelineError::Image(e.to_string()))?;
    Ok(bytes)
}

pub fn load_image(path: &Path) -> Result<DynamicImage, PipelineError> {
    image::open(path).map_err(|e| PipelineError::Image(format!("{}: {e}", path.display())))
}

/// Stage C: caption every candidate crop, 1:1 with detections.
fn caption_all(
    rt: &Runtime,
    image: &DynamicImage,
    detections: &[Detection],
    tracer: &mut Tracer,
) -> Result<Vec<String>, PipelineError> {
    let chat = rt
        .caption_chat
        .as_ref()
        .expect("variant validated to have a caption backend");
    let captioner = Captioner::new(chat.clone(), rt.caption_model.clone());
    let mut captions = Vec::with_capacity(detections.len());
    for detection in detections {
        let crop = crop_region(image, &detection.bbox, rt.config.crop_padding)?;
        let request = captioner.build_request(&crop, &detection.label)?;
        let started = Instant::now();
        let response = chat.chat(&request)?;
        let outcome = crate::backends::caption::normalize_caption(&response.text, &detection.label);
        let stage = if outcome.truncated {
            "caption:truncated"
        } else {
            "caption"
        };
        tracer.record(
            stage,
            request.digest(BackendKind::Caption),
            outcome.text.clone(),
            started,
        );
        captions.push(outcome.text);
    }
    Ok(captions)
}

/// Projects an axis-aligned GT 3D box into the image via its 8 corners.
/// `None` when any corner lands behind the camera or the footprint misses
/// the image.
pub fn project_gt3d_box(
    gt: &Gt3DBox,
    calib: &crate::Calibration,
    image_size: (u32, u32),
) -> Option<BBox2D> {
    let half = [gt.extents[0] / 2.0, gt.extents[1] / 2.0, gt.extents[2] / 2.0];
    let mut corners = Vec::with_capacity(8);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                corners.push([
                    gt.centroid[0] + sx * half[0],
                    gt.centroid[1] + sy * half[1],
                    gt.centroid[2] + sz * half[2],
                ]);
            }
        }
    }
    let cam = crate::geometry::apply_rigid_transform(&corners, calib.extrinsic());
    let projected = crate::geometry::project_points(calib.intrinsic(), &cam, 1e-3);
    let mut min_u = f64::INFINITY;
    let mut max_u = f64::NEG_INFINITY;
    let mut min_v = f64::INFINITY;
    let mut max_v = f64::NEG_INFINITY;
    for p in projected {
        let (u, v, _) = p?;
        min_u = min_u.min(u);
        max_u = max_u.max(u);
        min_v = min_v.min(v);
        max_v = max_v.max(v);
    }
    BBox2D::new(min_u.max(0.0), min_v.max(0.0), max_u, max_v)
        .ok()?
        .clip(f64::from(image_size.0), f64::from(image_size.1))
}

/// Assembles records with ids `0..n-1` in confidence-descending order.
/// 3D locations come from frustum lifting (lidar variant, omitted per-record
/// on insufficient points) or from the best 2D-IoU-matched projected GT box
/// (gt3d variant).
pub fn build_records(
    detections: &[Detection],
    captions: &[String],
    scene: &Scene,
    variant: Variant,
    lift: &LiftPolicy,
) -> Result<Vec<ObjectRecord>, PipelineError> {
    assert_eq!(
        detections.len(),
        captions.len(),
        "captions must align 1:1 with detections"
    );
    let lidar_context = if variant.needs_lidar() {
        let cloud_path = scene
            .cloud_path
            .as_ref()
            .ok_or_else(|| PipelineError::Config("lidar variant without cloud".into()))?;
        let calib = scene
            .calibration
            .as_ref()
            .ok_or_else(|| PipelineError::Config("lidar variant without calibration".into()))?;
        let (cloud, _) = crate::dataset::load_pointcloud(cloud_path)?;
        Some((cloud, calib))
    } else {
        None
    };
    let gt3d_projected: Option<Vec<(usize, BBox2D)>> = if variant.needs_gt3d() {
        let calib = scene
            .calibration
            .as_ref()
            .ok_or_else(|| PipelineError::Config("gt3d variant without calibration".into()))?;
        let boxes = scene
            .gt_boxes_3d
            .as_ref()
            .ok_or_else(|| PipelineError::Config("gt3d variant without GT 3D boxes".into()))?;
        Some(
            boxes
                .iter()
                .enumerate()
                .filter_map(|(i, gt)| {
                    project_gt3d_box(gt, calib, scene.image_size).map(|b| (i, b))
                })
                .collect(),
        )
    } else {
        None
    };

    let mut records = Vec::with_capacity(detections.len());
    for (id, (detection, caption)) in detections.iter().zip(captions).enumerate() {
        let location3d = if let Some((cloud, calib)) = &lidar_context {
            match lift_box_to_3d(&detection.bbox, cloud, calib, lift) {
                Ok(partial) => Some(partial.centroid),
                Err(_) => None, // insufficient points: record stays 2D-only
            }
        } else if let Some(projected) = &gt3d_projected {
            let best = projected
                .iter()
                .map(|(i, b)| (*i, iou(&detection.bbox, b)))
                .filter(|(_, v)| *v > 0.0)
                .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite iou"));
            best.map(|(i, _)| scene.gt_boxes_3d.as_ref().unwrap()[i].centroid)
        } else {
            None
        };
        records.push(ObjectRecord {
            id,
            name: detection.label.clone(),
            caption: caption.clone(),
            location2d: detection.bbox.center(),
            location3d,
        });
    }
    Ok(records)
}

fn failure_mode_of(err: &ParseError) -> FailureMode {
    match err {
        ParseError::IdOutOfRange { .. } => FailureMode::OutOfRange,
        _ => FailureMode::NoId,
    }
}

/// Stage D: grounding with parse retries, then the flagged fallback.
fn ground(
    rt: &Runtime,
    scene: &Scene,
    records: &[ObjectRecord],
    detections: &[Detection],
    categories: &[String],
    tracer: &mut Tracer,
) -> Result<(usize, bool, Option<FailureMode>), PipelineError> {
    let valid_ids: Vec<usize> = records.iter().map(|r| r.id).collect();
    let mode = GroundingMode {
        chain_of_thought: rt.config.chain_of_thought,
    };
    let mut request = build_grounding_prompt(
        &rt.config.chat.model_name,
        records,
        &scene.expression,
        rt.exemplars(),
        mode,
    )
    .map_err(PipelineError::Config)?;

    let mut last_error: Option<ParseError> = None;
    for attempt in 0..rt.config.parse_retries {
        let stage = if attempt == 0 {
            "ground".to_string()
        } else {
            format!("ground:retry{attempt}")
        };
        let text = chat_traced(&rt.chat, BackendKind::Chat, &stage, &request, tracer)?;
        match parse_grounding_response(&text, &valid_ids) {
            Ok(id) => return Ok((id, false, None)),
            Err(e) => {
                last_error = Some(e);
                request.messages.push(ChatMessage::assistant(text));
                request.messages.push(ChatMessage::user(PARSE_RETRY_REMINDER));
            }
        }
    }

    // flagged fallback: highest-confidence detection matching the first
    // extracted category, else highest-confidence overall
    let first_category = categories.first().map(|c| c.to_lowercase());
    let by_category = first_category.and_then(|c| {
        detections
            .iter()
            .position(|d| d.label.to_lowercase() == c)
    });
    let chosen = by_category.unwrap_or(0);
    Ok((
        chosen,
        true,
        Some(failure_mode_of(&last_error.expect("at least one attempt"))),
    ))
}

fn score_against_gt(
    scene: &Scene,
    chosen_id: Option<usize>,
    predicted_box: Option<BBox2D>,
    fallback_used: bool,
    failure_mode: Option<FailureMode>,
    tracer: Tracer,
) -> GroundingResult {
    let iou_value = predicted_box
        .as_ref()
        .map(|b| iou(b, &scene.gt_box))
        .unwrap_or(0.0);
    GroundingResult {
        scene_id: scene.scene_id.clone(),
        chosen_id,
        predicted_box,
        iou: iou_value,
        hit_at_05: iou_value >= 0.5,
        fallback_used,
        failure_mode,
        trace: tracer.entries,
    }
}

/// Runs one sample through its variant's stage graph. Semantic failures are
/// encoded in the result; only infrastructure errors return `Err`.
pub fn run_sample(scene: &Scene, rt: &Runtime) -> Result<GroundingResult, PipelineError> {
    match rt.config.variant {
        Variant::LlmRg | Variant::LlmRgLidar | Variant::LlmRgGt3d => run_llm_rg(scene, rt),
        Variant::NaiveVlm | Variant::CropsVlm | Variant::BoxesCaptionsVlm => {
            run_variant_baseline(scene, rt)
        }
    }
}

fn run_llm_rg(scene: &Scene, rt: &Runtime) -> Result<GroundingResult, PipelineError> {
    let mut tracer = Tracer::new();
    let categories = extract_categories(rt, scene, &mut tracer)?;
    let detections = detect_candidates(rt, scene, &categories, &mut tracer)?;
    if detections.is_empty() {
        return Ok(score_against_gt(
            scene,
            None,
            None,
            false,
            Some(FailureMode::NoDetections),
            tracer,
        ));
    }
    let image = load_image(&scene.image_path)?;
    let captions = caption_all(rt, &image, &detections, &mut tracer)?;
    let records = build_records(
        &detections,
        &captions,
        scene,
        rt.config.variant,
        &rt.config.lift,
    )?;
    let (chosen, fallback_used, failure_mode) =
        ground(rt, scene, &records, &detections, &categories, &mut tracer)?;
    let predicted = detections[chosen].bbox;
    Ok(score_against_gt(
        scene,
        Some(chosen),
        Some(predicted),
        fallback_used,
        failure_mode,
        tracer,
    ))
}

/// The three VLM baselines. None of them uses fallback: an unparseable
/// reply is simply a miss.
pub fn run_variant_baseline(scene: &Scene, rt: &Runtime) -> Result<GroundingResult, PipelineError> {
    let mut tracer = Tracer::new();
    match rt.config.variant {
        Variant::NaiveVlm => {
            let image_bytes = std::fs::read(&scene.image_path)?;
            let request =
                build_naive_vlm_prompt(&rt.config.chat.model_name, &image_bytes, &scene.expression);
            let text = chat_traced(&rt.chat, BackendKind::Chat, "naive_vlm", &request, &mut tracer)?;
            match parse_box_response(&text) {
                Ok(b) => Ok(score_against_gt(scene, None, Some(b), false, None, tracer)),
                Err(_) => Ok(score_against_gt(
                    scene,
                    None,
                    None,
                    false,
                    Some(FailureMode::NoId),
                    tracer,
                )),
            }
        }
        Variant::CropsVlm => {
            let detections =
                detect_candidates(rt, scene, &baseline_categories(scene), &mut tracer)?;
            if detections.is_empty() {
                return Ok(score_against_gt(
                    scene,
                    None,
                    None,
                    false,
                    Some(FailureMode::NoDetections),
                    tracer,
                ));
            }
            let image = load_image(&scene.image_path)?;
            let crops: Vec<(usize, Vec<u8>)> = detections
                .iter()
                .enumerate()
                .map(|(id, d)| {
                    crop_region(&image, &d.bbox, rt.config.crop_padding).map(|c| (id, c))
                })
                .collect::<Result<_, _>>()?;
            let request =
                build_crops_prompt(&rt.config.chat.model_name, &crops, &scene.expression);
            let text = chat_traced(&rt.chat, BackendKind::Chat, "crops_vlm", &request, &mut tracer)?;
            let valid_ids: Vec<usize> = (0..detections.len()).collect();
            match parse_grounding_response(&text, &valid_ids) {
                Ok(id) => Ok(score_against_gt(
                    scene,
                    Some(id),
                    Some(detections[id].bbox),
                    false,
                    None,
                    tracer,
                )),
                Err(e) => Ok(score_against_gt(
                    scene,
                    None,
                    None,
                    false,
                    Some(failure_mode_of(&e)),
                    tracer,
                )),
            }
        }
        Variant::BoxesCaptionsVlm => {
            let detections =
                detect_candidates(rt, scene, &baseline_categories(scene), &mut tracer)?;
            if detections.is_empty() {
                return Ok(score_against_gt(
                    scene,
                    None,
                    None,
                    false,
                    Some(FailureMode::NoDetections),
                    tracer,
                ));
            }
            let image = load_image(&scene.image_path)?;
            let captions = caption_all(rt, &image, &detections, &mut tracer)?;
            let mut annotated = image.to_rgb8();
            for d in &detections {
                draw_box_outline(&mut annotated, &d.bbox, [255, 255, 0], 3);
            }
            let annotated_png = encode_png(&DynamicImage::ImageRgb8(annotated))?;
            let caption_lines: Vec<String> = detections
                .iter()
                .zip(&captions)
                .enumerate()
                .map(|(id, (d, c))| {
                    format!(
                        "[{id}] {c} with box [{}, {}, {}, {}]",
                        d.bbox.x1(),
                        d.bbox.y1(),
                        d.bbox.x2(),
                        d.bbox.y2()
                    )
                })
                .collect();
            let request = build_boxes_captions_prompt(
                &rt.config.chat.model_name,
                &annotated_png,
                &caption_lines,
                &scene.expression,
            );
            let text = chat_traced(
                &rt.chat,
                BackendKind::Chat,
                "boxes_captions_vlm",
                &request,
                &mut tracer,
            )?;
            let valid_ids: Vec<usize> = (0..detections.len()).collect();
            match parse_grounding_response(&text, &valid_ids) {
                Ok(id) => Ok(score_against_gt(
                    scene,
                    Some(id),
                    Some(detections[id].bbox),
                    false,
                    None,
                    tracer,
                )),
                Err(e) => Ok(score_against_gt(
                    scene,
                    None,
                    None,
                    false,
                    Some(failure_mode_of(&e)),
                    tracer,
                )),
            }
        }
        _ => unreachable!("run_variant_baseline called with a non-baseline variant"),
    }
}

/// Baselines skip category extraction; file-backed detectors ignore the
/// category list anyway and live ones get the fixed vocabulary.
fn baseline_categories(_scene: &Scene) -> Vec<String> {
    FALLBACK_VOCABULARY.iter().map(|s| s.to_string()).collect()
}

/// Draws a rectangle outline (inward thickness), clamped to the image.
pub fn draw_box_outline(image: &mut RgbImage, bbox: &BBox2D, color: [u8; 3], thickness: u32) {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let x1 = bbox.x1().floor() as i64;
    let y1 = bbox.y1().floor() as i64;
    let x2 = (bbox.x2().ceil() as i64).min(w);
    let y2 = (bbox.y2().ceil() as i64).min(h);
    let t = thickness as i64;
    for y in y1.max(0)..y2.max(0) {
        for x in x1.max(0)..x2.max(0) {
            let on_border = x < x1 + t || x >= x2 - t || y < y1 + t || y >= y2 - t;
            if on_border && x >= 0 && y >= 0 && x < w && y < h {
                image.put_pixel(x as u32, y as u32, image::Rgb(color));
            }
        }
    }
}

/// Overlay convention: ground truth red, prediction green.
pub fn render_overlay(
    image_path: &Path,
    gt: &BBox2D,
    predicted: Option<&BBox2D>,
) -> Result<RgbImage, PipelineError> {
    let mut image = load_image(image_path)?.to_rgb8();
    draw_box_outline(&mut image, gt, [255, 0, 0], 3);
    if let Some(p) = predicted {
        draw_box_outline(&mut image, p, [0, 255, 0], 3);
    }
    Ok(image)
}

/// Outcome of running a scene list: results in input order plus the number
/// of samples that hit infrastructure-fatal errors.
pub struct RunOutcome {
    pub results: Vec<GroundingResult>,
    pub fatal_count: usize,
}

/// Processes scenes with a bounded worker pool. Results come back in input
/// order regardless of worker count; a fatal sample becomes a
/// `backend_fatal` row and the run continues.
pub fn run_scenes(scenes: &[Scene], rt: &Runtime) -> RunOutcome {
    let workers = rt.config.worker_count.max(1).min(scenes.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<GroundingResult, PipelineError>>>> =
        scenes.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= scenes.len() {
                    break;
                }
                let outcome = run_sample(&scenes[index], rt);
                *slots[index].lock().expect("slot lock") = Some(outcome);
            });
        }
    });
    let mut results = Vec::with_capacity(scenes.len());
    let mut fatal_count = 0usize;
    for (scene, slot) in scenes.iter().zip(slots) {
        let outcome = slot.into_inner().expect("slot lock").expect("slot filled");
        match outcome {
            Ok(result) => results.push(result),
            Err(e) => {
                fatal_count += 1;
                results.push(GroundingResult {
                    scene_id: scene.scene_id.clone(),
                    chosen_id: None,
                    predicted_box: None,
                    iou: 0.0,
                    hit_at_05: false,
                    fallback_used: false,
                    failure_mode: Some(FailureMode::BackendFatal),
                    trace: vec![TraceEntry {
                        stage: "fatal".into(),
                        input_digest: String::new(),
                        response: e.to_string(),
                        wall_ms: 0,
                    }],
                });
            }
        }
    }
    RunOutcome {
        results,
        fatal_count,
    }
}
