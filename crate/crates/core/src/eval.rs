//! Scoring and report emission.
//!
//! The JSON report is the normative artifact; CSV and markdown are renderings
//! of the same numbers. The report deliberately carries no timestamps or
//! latencies, so re-running an identical configuration yields byte-identical
//! report files; per-sample latency lives in the CSV and the results stream
//! instead.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scene::GroundingResult;

/// IoU thresholds reported for every run; hits are inclusive (`iou >= t`).
pub const THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAccuracy {
    pub threshold: f64,
    pub hits: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scene_id: String,
    pub chosen_id: Option<usize>,
    pub iou: f64,
    pub hit_05: bool,
    pub fallback_used: bool,
    pub failure_mode: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub variant: String,
    pub total: usize,
    pub accuracy: Vec<ThresholdAccuracy>,
    /// Accuracy at IoU 0.5 over non-fallback samples only; `None` when every
    /// sample used fallback.
    pub strict_accuracy_at_05: Option<f64>,
    pub fallback_rate: f64,
    pub failure_modes: BTreeMap<String, usize>,
    pub rows: Vec<ReportRow>,
}

/// Whether `result` counts as a hit at `threshold` (inclusive).
pub fn is_hit(result: &GroundingResult, threshold: f64) -> bool {
    result.iou >= threshold
}

/// Aggregates per-sample results into a report. Rows come out sorted by
/// scene id so output order never depends on worker scheduling.
pub fn aggregate(results: &[GroundingResult], variant: &str) -> Report {
    let total = results.len();
    let accuracy = THRESHOLDS
        .iter()
        .map(|&threshold| {
            let hits = results.iter().filter(|r| is_hit(r, threshold)).count();
            ThresholdAccuracy {
                threshold,
                hits,
                accuracy: ratio(hits, total),
            }
        })
        .collect();

    let strict: Vec<&GroundingResult> = results.iter().filter(|r| !r.fallback_used).collect();
    let strict_accuracy_at_05 = if strict.is_empty() {
        None
    } else {
        let hits = strict.iter().filter(|r| is_hit(r, 0.5)).count();
        Some(ratio(hits, strict.len()))
    };

    let fallback_count = results.iter().filter(|r| r.fallback_used).count();
    let mut failure_modes: BTreeMap<String, usize> = BTreeMap::new();
    for r in results {
        if let Some(mode) = &r.failure_mode {
            *failure_modes.entry(mode.to_string()).or_insert(0) += 1;
        }
    }

    let mut rows: Vec<ReportRow> = results
        .iter()
        .map(|r| ReportRow {
            scene_id: r.scene_id.clone(),
            chosen_id: r.chosen_id,
            iou: r.iou,
            hit_05: r.hit_at_05,
            fallback_used: r.fallback_used,
            failure_mode: r.failure_mode.map(|m| m.to_string()),
        })
        .collect();
    rows.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));

    Report {
        variant: variant.to_string(),
        total,
        accuracy,
        strict_accuracy_at_05,
        fallback_rate: ratio(fallback_count, total),
        failure_modes,
        rows,
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn to_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Total backend wall time attributed to one sample.
pub fn result_latency_ms(result: &GroundingResult) -> u64 {
    result.trace.iter().map(|t| t.wall_ms).sum()
}

/// Fixed-column CSV, one row per sample in scene-id order.
pub fn to_csv(results: &[GroundingResult], variant: &str) -> String {
    let mut sorted: Vec<&GroundingResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    let mut out =
        String::from("scene_id,variant,chosen_id,iou,hit_05,fallback_used,failure_mode,latency_ms\n");
    for r in sorted {
        let chosen = r.chosen_id.map(|c| c.to_string()).unwrap_or_default();
        let mode = r.failure_mode.map(|m| m.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.scene_id,
            variant,
            chosen,
            r.iou,
            r.hit_at_05,
            r.fallback_used,
            mode,
            result_latency_ms(r)
        ));
    }
    out
}

fn percent(v: f64) -> String {
    format!("{:.2}%", v * 100.0)
}

pub fn to_markdown(report: &Report) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# Grounding report: {}\n\nSamples: {}\n\n",
        report.variant, report.total
    ));
    out.push_str("| Metric | Value |\n|---|---|\n");
    for acc in &report.accuracy {
        out.push_str(&format!(
            "| Acc@{} | {} |\n",
            acc.threshold,
            percent(acc.accuracy)
        ));
    }
    out.push_str(&format!(
        "| Acc@0.5 (fallback excluded) | {} |\n",
        report
            .strict_accuracy_at_05
            .map(percent)
            .unwrap_or_else(|| "n/a".to_string())
    ));
    out.push_str(&format!(
        "| Fallback rate | {} |\n",
        percent(report.fallback_rate)
    ));
    if !report.failure_modes.is_empty() {
        out.push_str("\n## Failure modes\n\n| Mode | Count |\n|---|---|\n");
        for (mode, count) in &report.failure_modes {
            out.push_str(&format!("| {mode} | {count} |\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Box2, FailureMode, TraceEntry};

    fn result(scene_id: &str, iou: f64, fallback: bool) -> GroundingResult {
        GroundingResult {
            scene_id: scene_id.into(),
            chosen_id: Some(0),
            predicted_box: Some(Box2::new(0.0, 0.0, 10.0, 10.0).unwrap()),
            iou,
            hit_at_05: iou >= 0.5,
            fallback_used: fallback,
            failure_mode: fallback.then_some(FailureMode::NoId),
            trace: vec![TraceEntry {
                stage: "ground".into(),
                input_digest: "d".into(),
                response: "ANSWER: 0".into(),
                wall_ms: 7,
            }],
        }
    }

    #[test]
    fn threshold_hits_are_inclusive() {
        let r = result("a", 0.5, false);
        assert!(is_hit(&r, 0.5));
        assert!(is_hit(&r, 0.25));
        assert!(!is_hit(&r, 0.75));
        // exactly at 0.5 counts as a hit
        assert!(r.hit_at_05);
    }

    #[test]
    fn aggregate_counts_and_strict_accuracy() {
        // 3 hits at 0.5, one of them via fallback; 1 miss
        let results = vec![
            result("a", 0.9, false),
            result("b", 0.6, false),
            result("c", 0.55, true),
            result("d", 0.1, false),
        ];
        let report = aggregate(&results, "llm_rg");
        assert_eq!(report.total, 4);
        let at = |t: f64| {
            report
                .accuracy
                .iter()
                .find(|a| a.threshold == t)
                .unwrap()
                .accuracy
        };
        assert_eq!(at(0.5), 0.75);
        assert_eq!(at(0.25), 0.75);
        assert_eq!(at(0.75), 0.25);
        // strict excludes the fallback sample: 2 hits of 3
        assert!((report.strict_accuracy_at_05.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.fallback_rate, 0.25);
        assert_eq!(report.failure_modes.get("no_id"), Some(&1));
    }

    #[test]
    fn rows_sorted_by_scene_id() {
        let results = vec![result("b", 0.6, false), result("a", 0.9, false)];
        let report = aggregate(&results, "llm_rg");
        assert_eq!(report.rows[0].scene_id, "a");
        assert_eq!(report.rows[1].scene_id, "b");
        let csv = to_csv(&results, "llm_rg");
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[1].starts_with("a,"));
        assert!(lines[2].starts_with("b,"));
    }

    #[test]
    fn empty_run_aggregates_to_zeros() {
        let report = aggregate(&[], "llm_rg");
        assert_eq!(report.total, 0);
        assert_eq!(report.accuracy[0].accuracy, 0.0);
        assert_eq!(report.strict_accuracy_at_05, None);
    }

    #[test]
    fn json_round_trip() {
        let results = vec![result("a", 0.9, false), result("b", 0.2, true)];
        let report = aggregate(&results, "llm_rg");
        let json = to_json(&report);
        let back: Report = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn csv_has_fixed_columns_and_latency() {
        let csv = to_csv(&[result("a", 0.9, false)], "llm_rg");
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "scene_id,variant,chosen_id,iou,hit_05,fallback_used,failure_mode,latency_ms"
        );
        assert_eq!(lines[1], "a,llm_rg,0,0.9,true,false,,7");
    }

    #[test]
    fn markdown_renders_two_decimal_percentages() {
        let results = vec![
            result("a", 0.9, false),
            result("b", 0.6, false),
            result("c", 0.1, false),
        ];
        let md = to_markdown(&aggregate(&results, "llm_rg"));
        assert!(md.contains("| Acc@0.5 | 66.67% |"), "{md}");
    }

    #[test]
    fn report_json_has_no_latency_fields() {
        let json = to_json(&aggregate(&[result("a", 0.9, false)], "llm_rg"));
        assert!(!json.contains("latency"));
        assert!(!json.contains("wall_ms"));
        assert!(!json.contains("timestamp"));
    }
}
