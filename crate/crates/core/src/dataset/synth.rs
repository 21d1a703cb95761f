//! Deterministic synthetic scene generator for offline end-to-end runs.
//!
//! Emits a complete self-contained dataset tree: flat-color rectangle scenes
//! as PNGs, annotations, precomputed detections, optional LiDAR clouds plus
//! calibration, scripted chat/caption backends, and ready-to-run configs.
//!
//! The scripted backends are keyed by exact request digests. To guarantee a
//! later pipeline run hits every entry, the generator does not guess what
//! requests will look like — it reloads the tree it just wrote through the
//! normal dataset loaders and replays the pipeline's own prompt and crop
//! builders to compute each digest. The known-correct answer for every scene
//! is baked into the grounding responses, so pipeline accuracy on this data
//! measures plumbing, not model quality.
//!
//! With `three_d` enabled, every scene contains two nested same-color
//! same-category rectangles at different LiDAR depths and an expression
//! asking for the nearer one. The scripted 2D reply falls back to confidence
//! (usually wrong by construction); the scripted 3D reply uses the record
//! depths (always right). Comparing `llm_rg` with `llm_rg_lidar` on such a
//! tree isolates the value of the 3D cue.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendDescriptor, BackendError, BackendKind, Captioner, ChatBackend,
    ChatRequest, ChatResponse, RetryPolicy};
use crate::pipeline::{build_records, crop_region, load_image, PipelineConfig, PipelineError,
    Variant};
use crate::prompting::{build_category_prompt, build_grounding_prompt, default_exemplars,
    GroundingMode};
use crate::scene::Detection;
use crate::{BBox2D, LiftPolicy};

pub const IMAGE_WIDTH: u32 = 1600;
pub const IMAGE_HEIGHT: u32 = 900;
const BACKGROUND: [u8; 3] = [120, 120, 120];

const CATEGORIES: [&str; 5] = ["car", "truck", "bus", "pedestrian", "bicycle"];

const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [200, 30, 30]),
    ("blue", [30, 30, 200]),
    ("green", [30, 160, 30]),
    ("white", [230, 230, 230]),
    ("black", [25, 25, 25]),
    ("yellow", [220, 200, 40]),
];

/// Knobs for one generated tree. Identical specs produce byte-identical
/// trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub scene_count: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Hardest distractor level to include; scenes cycle through
    /// 0 (unique category), 1 (same category, different color),
    /// 2 (same category and color, disambiguated spatially).
    pub distractor_level: u8,
    /// Emit LiDAR clouds + calibration and build depth-disambiguation
    /// scenes.
    pub three_d: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            scene_count: 20,
            objects_min: 3,
            objects_max: 6,
            distractor_level: 2,
            three_d: false,
        }
    }
}

/// What a `generate` call produced.
#[derive(Debug)]
pub struct SynthSummary {
    pub out_dir: PathBuf,
    pub scene_count: usize,
    pub annotations: PathBuf,
    pub config_paths: Vec<PathBuf>,
}

struct ObjSpec {
    category: &'static str,
    color_name: &'static str,
    color: [u8; 3],
    bbox: BBox2D,
    confidence: f64,
}

struct SceneSpec {
    scene_id: String,
    expression: String,
    objects: Vec<ObjSpec>,
    /// Index into `objects` of the referred object.
    target: usize,
    /// 3D scenes: index of the far (wrong under 2D reasoning) object.
    far: Option<usize>,
}

fn rect_overlaps(a: &BBox2D, b: &BBox2D) -> bool {
    a.x1() < b.x2() && b.x1() < a.x2() && a.y1() < b.y2() && b.y1() < a.y2()
}

/// Captions depend only on what is visible in the crop. Identical crops from
/// different scenes share one digest in the scripted caption backend, so the
/// caption must be a pure function of crop content — never of scene context
/// like position.
fn caption_for(obj: &ObjSpec) -> String {
    format!("a {} {}", obj.color_name, obj.category)
}

/// Places `count` mutually disjoint boxes; gives up gracefully by returning
/// fewer when the canvas gets crowded.
fn place_boxes(rng: &mut ChaCha8Rng, count: usize) -> Vec<BBox2D> {
    let mut boxes: Vec<BBox2D> = Vec::new();
    for _ in 0..count {
        let mut placed = false;
        for _attempt in 0..200 {
            let w = f64::from(rng.gen_range(90u32..240));
            let h = f64::from(rng.gen_range(70u32..200));
            let x1 = f64::from(rng.gen_range(10u32..(IMAGE_WIDTH - 250)));
            let y1 = f64::from(rng.gen_range(10u32..(IMAGE_HEIGHT - 210)));
            let candidate = BBox2D::new(x1, y1, x1 + w, y1 + h).expect("positive extent");
            if boxes.iter().all(|b| !rect_overlaps(b, &candidate)) {
                boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            break;
        }
    }
    boxes
}

/// Distinct confidences in [0.5, 0.95], assigned in a shuffled order so the
/// detector's ranking does not trivially mirror placement order.
fn assign_confidences(rng: &mut ChaCha8Rng, objects: &mut [ObjSpec]) {
    let n = objects.len();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    for (rank, &index) in order.iter().enumerate() {
        objects[index].confidence = 0.95 - 0.02 * rank as f64;
    }
}

fn build_2d_scene(rng: &mut ChaCha8Rng, scene_id: String, level: u8) -> SceneSpec {
    let count = rng.gen_range(3usize..=5);
    let boxes = place_boxes(rng, count.max(2));
    let n = boxes.len();
    let target = rng.gen_range(0..n);
    let target_category = CATEGORIES[rng.gen_range(0..CATEGORIES.len())];
    let target_color = COLORS[rng.gen_range(0..COLORS.len())];
    // distractor (if the level calls for one) sits at a fixed non-target slot
    let distractor = (n > 1 && level > 0).then(|| (target + 1) % n);

    let mut objects: Vec<ObjSpec> = Vec::with_capacity(n);
    for (i, bbox) in boxes.into_iter().enumerate() {
        let (category, color) = if i == target {
            (target_category, target_color)
        } else if Some(i) == distractor {
            match level {
                1 => {
                    // same category, visibly different color
                    let mut c = COLORS[rng.gen_range(0..COLORS.len())];
                    while c.0 == target_color.0 {
                        c = COLORS[rng.gen_range(0..COLORS.len())];
                    }
                    (target_category, c)
                }
                _ => (target_category, target_color),
            }
        } else {
            // unrelated category keeps level-0 scenes unambiguous
            let mut cat = CATEGORIES[rng.gen_range(0..CATEGORIES.len())];
            while cat == target_category {
                cat = CATEGORIES[rng.gen_range(0..CATEGORIES.len())];
            }
            (cat, COLORS[rng.gen_range(0..COLORS.len())])
        };
        objects.push(ObjSpec {
            category,
            color_name: color.0,
            color: color.1,
            bbox,
            confidence: 0.0,
        });
    }
    assign_confidences(rng, &mut objects);

    let expression = match level {
        0 => format!("go to the {} {}", target_color.0, target_category),
        1 => format!("stop next to the {} {}", target_color.0, target_category),
        _ => {
            // two identical-looking candidates: the side names the target
            let d = distractor.expect("level 2 has a distractor");
            let tx = (objects[target].bbox.x1() + objects[target].bbox.x2()) / 2.0;
            let dx = (objects[d].bbox.x1() + objects[d].bbox.x2()) / 2.0;
            let side = if tx < dx { "left" } else { "right" };
            format!(
                "park by the {} {} on the {side}",
                target_color.0, target_category
            )
        }
    };

    SceneSpec {
        scene_id,
        expression,
        objects,
        target,
        far: None,
    }
}

/// Depth-disambiguation scene: a near object and a far object nested inside
/// it, same category and color, same center. Only depth separates them.
fn build_3d_scene(rng: &mut ChaCha8Rng, scene_id: String, scene_index: usize) -> SceneSpec {
    let category = CATEGORIES[rng.gen_range(0..CATEGORIES.len())];
    let color = COLORS[rng.gen_range(0..COLORS.len())];
    let near_w = 400.0;
    let near_h = 250.0;
    let x1 = f64::from(rng.gen_range(50u32..(IMAGE_WIDTH - 460)));
    let y1 = f64::from(rng.gen_range(50u32..(IMAGE_HEIGHT - 310)));
    let near = BBox2D::new(x1, y1, x1 + near_w, y1 + near_h).expect("positive extent");
    // far object scaled by 8/25 (the depth ratio), sharing the center:
    // picking it instead of the near one scores IoU = 0.32^2 ~ 0.10
    let far_w = near_w * 8.0 / 25.0;
    let far_h = near_h * 8.0 / 25.0;
    let cx = x1 + near_w / 2.0;
    let cy = y1 + near_h / 2.0;
    let far = BBox2D::new(
        cx - far_w / 2.0,
        cy - far_h / 2.0,
        cx + far_w / 2.0,
        cy + far_h / 2.0,
    )
    .expect("positive extent");

    // 4 of 5 scenes rank the far object first, so confidence-based 2D
    // tie-breaking picks the wrong box most of the time
    let far_higher = scene_index % 5 != 0;
    let (near_conf, far_conf) = if far_higher { (0.85, 0.92) } else { (0.92, 0.85) };

    let objects = vec![
        ObjSpec {
            category,
            color_name: color.0,
            color: color.1,
            bbox: near,
            confidence: near_conf,
        },
        ObjSpec {
            category,
            color_name: color.0,
            color: color.1,
            bbox: far,
            confidence: far_conf,
        },
    ];
    SceneSpec {
        scene_id,
        expression: format!("go to the nearest {} {}", color.0, category),
        objects,
        target: 0,
        far: Some(1),
    }
}

fn render_scene(spec: &SceneSpec) -> RgbImage {
    let mut img = RgbImage::from_pixel(IMAGE_WIDTH, IMAGE_HEIGHT, Rgb(BACKGROUND));
    // 3D scenes nest the far (listed second) object inside the near one, so
    // draw in reverse to keep the inner rectangle visible
    for obj in spec.objects.iter().rev() {
        let x1 = obj.bbox.x1() as u32;
        let y1 = obj.bbox.y1() as u32;
        let x2 = obj.bbox.x2() as u32;
        let y2 = obj.bbox.y2() as u32;
        for y in y1..y2.min(IMAGE_HEIGHT) {
            for x in x1..x2.min(IMAGE_WIDTH) {
                img.put_pixel(x, y, Rgb(obj.color));
            }
        }
        // darker border so nested same-color rectangles stay separable
        let border = Rgb([
            obj.color[0] / 2,
            obj.color[1] / 2,
            obj.color[2] / 2,
        ]);
        for x in x1..x2.min(IMAGE_WIDTH) {
            img.put_pixel(x, y1, border);
            img.put_pixel(x, y2 - 1, border);
        }
        for y in y1..y2.min(IMAGE_HEIGHT) {
            img.put_pixel(x1, y, border);
            img.put_pixel(x2 - 1, y, border);
        }
    }
    img
}

const NEAR_DEPTH: f64 = 8.0;
const FAR_DEPTH: f64 = 25.0;
const FX: f64 = 1000.0;
const FY: f64 = 1000.0;
const CX: f64 = 800.0;
const CY: f64 = 450.0;

fn pixel_to_point(u: f64, v: f64, depth: f64) -> [f64; 4] {
    [(u - CX) * depth / FX, (v - CY) * depth / FY, depth, 1.0]
}

/// LiDAR sweep for a depth-disambiguation scene (identity extrinsic, so the
/// cloud frame is the camera frame):
/// - 12 points at the near depth, projecting inside the near box but in the
///   band left of the far box;
/// - 12 points at the far depth, projecting inside the far box (and hence
///   also inside the near box).
/// The near box therefore collects 24 survivors; quantile trimming keeps 10
/// of each depth, putting its record depth between the two and below the far
/// record's.
fn cloud_for_3d_scene(spec: &SceneSpec) -> crate::PointCloud {
    let near = &spec.objects[0].bbox;
    let far = &spec.objects[spec.far.expect("3d scene")].bbox;
    let mut points = Vec::with_capacity(24);
    let band_lo = near.x1() + 4.0;
    let band_hi = far.x1() - 4.0;
    for k in 0..12 {
        let f = (k as f64 + 0.5) / 12.0;
        let u = band_lo + f * (band_hi - band_lo);
        let v = near.y1() + 4.0 + f * (near.height() - 8.0);
        points.push(pixel_to_point(u, v, NEAR_DEPTH));
    }
    for k in 0..12 {
        let f = (k as f64 + 0.5) / 12.0;
        let u = far.x1() + 4.0 + f * (far.width() - 8.0);
        let v = far.y1() + 4.0 + f * (far.height() - 8.0);
        points.push(pixel_to_point(u, v, FAR_DEPTH));
    }
    crate::PointCloud { points }
}

fn calibration_json() -> serde_json::Value {
    serde_json::json!({
        "intrinsic": [FX, 0.0, CX, 0.0, FY, CY, 0.0, 0.0, 1.0],
        "extrinsic": [
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0
        ],
        "direction": "cloud_to_camera",
    })
}

/// Chat backend stub for building caption requests without ever sending
/// them.
struct NeverChat;

impl ChatBackend for NeverChat {
    fn chat(&self, _request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        Err(BackendError::Script(
            "generator-internal backend must never be called".into(),
        ))
    }

    fn call_count(&self) -> u64 {
        0
    }
}

#[derive(Serialize)]
struct ScriptEntryOut {
    digest: String,
    response: String,
}

fn scripted_config(variant: Variant, chat: &str, detect: &str, cache: &str) -> PipelineConfig {
    PipelineConfig {
        variant,
        chat: BackendDescriptor::scripted(BackendKind::Chat, chat),
        caption: Some(BackendDescriptor::scripted(
            BackendKind::Caption,
            "scripts/captions.json",
        )),
        detect: Some(BackendDescriptor::scripted(BackendKind::Detect, detect)),
        lift: LiftPolicy::default(),
        crop_padding: 0.1,
        conf_min: 0.3,
        max_candidates: 20,
        worker_count: 1,
        retry: RetryPolicy::default(),
        parse_retries: 3,
        cache_dir: Some(PathBuf::from(cache)),
        exemplars: None,
        chain_of_thought: true,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Generates the full tree under `out_dir` and returns what was written.
pub fn generate(spec: &SyntheticSpec, out_dir: &Path) -> Result<SynthSummary, PipelineError> {
    if spec.scene_count == 0 || spec.objects_min == 0 || spec.objects_max < spec.objects_min {
        return Err(PipelineError::Config(
            "scene_count and objects_min must be >= 1, objects_max >= objects_min".into(),
        ));
    }
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("scripts"))?;
    if spec.three_d {
        std::fs::create_dir_all(out_dir.join("clouds"))?;
    }

    // -- phase 1: decide every scene and write images / clouds / annotations
    let mut scene_specs = Vec::with_capacity(spec.scene_count);
    for index in 0..spec.scene_count {
        // one independent stream per scene: scenes are stable under changes
        // to scene_count
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let scene_id = format!("scene_{index:04}");
        let scene = if spec.three_d {
            build_3d_scene(&mut rng, scene_id, index)
        } else {
            let level = (index as u8) % (spec.distractor_level + 1);
            build_2d_scene(&mut rng, scene_id, level)
        };
        scene_specs.push(scene);
    }

    if spec.three_d {
        write_json(&out_dir.join("calib.json"), &calibration_json())?;
    }

    let mut annotation_scenes = Vec::with_capacity(scene_specs.len());
    let mut detection_lines = String::new();
    for scene in &scene_specs {
        let image_rel = format!("images/{}.png", scene.scene_id);
        render_scene(scene)
            .save(out_dir.join(&image_rel))
            .map_err(|e| PipelineError::Image(e.to_string()))?;
        let cloud_rel = if spec.three_d {
            let rel = format!("clouds/{}.bin", scene.scene_id);
            super::write_pointcloud(&out_dir.join(&rel), &cloud_for_3d_scene(scene))?;
            Some(PathBuf::from(rel))
        } else {
            None
        };
        let gt = &scene.objects[scene.target].bbox;
        annotation_scenes.push(super::AnnotationEntry {
            scene_id: scene.scene_id.clone(),
            image: PathBuf::from(image_rel),
            image_size: (IMAGE_WIDTH, IMAGE_HEIGHT),
            command: scene.expression.clone(),
            gt_box: [gt.x1(), gt.y1(), gt.x2(), gt.y2()],
            cloud: cloud_rel,
            calibration: spec.three_d.then(|| PathBuf::from("calib.json")),
            gt_boxes_3d: None,
        });
        for obj in &scene.objects {
            let line = serde_json::json!({
                "scene_id": scene.scene_id,
                "label": obj.category,
                "confidence": obj.confidence,
                "box": [obj.bbox.x1(), obj.bbox.y1(), obj.bbox.x2(), obj.bbox.y2()],
            });
            detection_lines.push_str(&line.to_string());
            detection_lines.push('\n');
        }
    }
    let annotations_path = out_dir.join("annotations.json");
    write_json(
        &annotations_path,
        &super::AnnotationFile {
            version: 1,
            scenes: annotation_scenes,
        },
    )?;
    std::fs::write(out_dir.join("detections.jsonl"), detection_lines)?;

    // -- phase 2: reload through the normal loaders and replay the pipeline's
    // request builders to script every backend reply by digest
    let loaded = super::load_annotations(&annotations_path)?;
    assert!(
        loaded.skipped.is_empty(),
        "generated annotations must all validate"
    );
    let detections_by_scene = super::load_detections(&out_dir.join("detections.jsonl"))?;

    let mut variants = vec![Variant::LlmRg];
    if spec.three_d {
        variants.push(Variant::LlmRgLidar);
    }
    let base_config = scripted_config(
        Variant::LlmRg,
        "scripts/chat.json",
        "detections.jsonl",
        "cache",
    );
    let exemplars = default_exemplars();
    let captioner = Captioner::new(std::sync::Arc::new(NeverChat), "scripted");
    let mut chat_entries: Vec<ScriptEntryOut> = Vec::new();
    let mut caption_entries: Vec<ScriptEntryOut> = Vec::new();

    for (scene, spec_scene) in loaded.scenes.iter().zip(&scene_specs) {
        // stage A: category extraction
        let target_category = spec_scene.objects[spec_scene.target].category;
        let category_request = build_category_prompt("scripted", &scene.expression)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        chat_entries.push(ScriptEntryOut {
            digest: category_request.digest(BackendKind::Chat),
            response: format!("[\"{target_category}\"]"),
        });

        // stage B replayed exactly as the pipeline will run it
        let raw = detections_by_scene
            .get(&scene.scene_id)
            .cloned()
            .unwrap_or_default();
        let filtered = crate::backends::filter_detections(
            raw,
            base_config.conf_min,
            base_config.max_candidates,
            scene.image_size,
        );

        // stage C: caption requests over the identical crop bytes
        let image = load_image(&scene.image_path)?;
        let mut captions = Vec::with_capacity(filtered.len());
        for detection in &filtered {
            let obj = spec_scene
                .objects
                .iter()
                .find(|o| o.bbox == detection.bbox)
                .expect("detection corresponds to a generated object");
            let caption = caption_for(obj);
            let crop = crop_region(&image, &detection.bbox, base_config.crop_padding)?;
            let request = captioner.build_request(&crop, &detection.label)?;
            caption_entries.push(ScriptEntryOut {
                digest: request.digest(BackendKind::Caption),
                response: caption.clone(),
            });
            captions.push(caption);
        }

        // stage D, once per variant (records differ when depth is attached)
        let answer_for =
            |filtered: &[Detection]| -> usize {
                let target_box = &spec_scene.objects[spec_scene.target].bbox;
                filtered
                    .iter()
                    .position(|d| d.bbox == *target_box)
                    .expect("target survives filtering")
            };
        for &variant in &variants {
            let records =
                build_records(&filtered, &captions, scene, variant, &base_config.lift)?;
            let request = build_grounding_prompt(
                "scripted",
                &records,
                &scene.expression,
                &exemplars,
                GroundingMode {
                    chain_of_thought: base_config.chain_of_thought,
                },
            )
            .map_err(PipelineError::Config)?;
            let response = match (variant, spec_scene.far) {
                (Variant::LlmRgLidar, Some(_)) => {
                    // depth-aware reply: pick the candidate with the
                    // smallest attached depth
                    let nearest = records
                        .iter()
                        .filter_map(|r| r.location3d.map(|l| (r.id, l[2])))
                        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite depth"))
                        .expect("3d scene records carry depth")
                        .0;
                    format!(
                        "Both candidates match the description, so depth decides. \
                         Object {nearest} has the smallest z, making it the nearest one.\n\
                         ANSWER: {nearest}"
                    )
                }
                (_, Some(_)) => {
                    // depth-blind reply: identical 2D records, fall back to
                    // the detector's top-ranked candidate
                    "Both candidates have the same category, color and center, \
                     and nothing in 2D separates them. I will take the most \
                     confident detection.\nANSWER: 0"
                        .to_string()
                }
                _ => {
                    let answer = answer_for(&filtered);
                    format!(
                        "The expression asks for {}. Record {answer} is {}, which matches.\n\
                         ANSWER: {answer}",
                        scene.expression, records[answer].caption
                    )
                }
            };
            chat_entries.push(ScriptEntryOut {
                digest: request.digest(BackendKind::Chat),
                response,
            });
        }
    }

    write_json(&out_dir.join("scripts/chat.json"), &chat_entries)?;
    write_json(&out_dir.join("scripts/captions.json"), &caption_entries)?;

    // -- phase 3: ready-to-run configs
    let mut config_paths = Vec::new();
    let config_path = out_dir.join("config.json");
    write_json(&config_path, &base_config)?;
    config_paths.push(config_path);
    if spec.three_d {
        let lidar = scripted_config(
            Variant::LlmRgLidar,
            "scripts/chat.json",
            "detections.jsonl",
            "cache_lidar",
        );
        let path = out_dir.join("config_llm_rg_lidar.json");
        write_json(&path, &lidar)?;
        config_paths.push(path);
    }

    Ok(SynthSummary {
        out_dir: out_dir.to_path_buf(),
        scene_count: loaded.scenes.len(),
        annotations: annotations_path,
        config_paths,
    })
}
