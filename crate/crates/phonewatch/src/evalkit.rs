//! Evaluation files, AP report tables and the FPS benchmark.
//!
//! Ground truth is JSON lines of `{"image", "label", "box"}`; predictions
//! add `"score"`. Every number in JSON output has 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use phonewatch_core::detect::ClassLabel;
use phonewatch_core::eval::{
    evaluate_at, mean_average_precision, EvalError, EvalReport, GroundTruthSet, ScoredDetection,
};
use phonewatch_core::geometry::BBox;
use serde::{Deserialize, Serialize};

use crate::frames::FrameSource;
use crate::numfmt;
use crate::pipeline::{OnFrameError, Pipeline, PipelineMode, StageMeans};

pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.5, 0.1];

#[derive(Debug, thiserror::Error)]
pub enum EvalFileError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GtLine {
    image: String,
    label: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredLine {
    image: String,
    label: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
}

fn lines<'a, T: for<'de> Deserialize<'de>>(
    text: &'a str,
    origin: &'a Path,
) -> impl Iterator<Item = Result<(usize, T), EvalFileError>> + 'a {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(move |(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| EvalFileError::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
        })
}

fn schema(origin: &Path, line: usize, message: String) -> EvalFileError {
    EvalFileError::Schema {
        path: origin.to_path_buf(),
        line,
        message,
    }
}

pub fn parse_ground_truth(text: &str, origin: &Path) -> Result<GroundTruthSet, EvalFileError> {
    let mut gt = GroundTruthSet::new();
    for item in lines::<GtLine>(text, origin) {
        let (line, g) = item?;
        if g.label.is_empty() {
            return Err(schema(origin, line, "empty label".into()));
        }
        let bbox = BBox::try_from(g.bbox).map_err(|e| schema(origin, line, e.to_string()))?;
        gt.push(&g.image, ClassLabel::new(&g.label), bbox);
    }
    Ok(gt)
}

/// Predictions must use classes present in `gt`.
pub fn parse_predictions(
    text: &str,
    origin: &Path,
    gt: &GroundTruthSet,
) -> Result<Vec<ScoredDetection>, EvalFileError> {
    let mut out = Vec::new();
    for item in lines::<PredLine>(text, origin) {
        let (line, p) = item?;
        let label = ClassLabel::new(&p.label);
        if !gt.classes().contains(&label) {
            return Err(schema(
                origin,
                line,
                format!("class `{}` does not occur in the ground truth", p.label),
            ));
        }
        if !(0.0..=1.0).contains(&p.score) {
            return Err(schema(origin, line, format!("score {} outside [0, 1]", p.score)));
        }
        let bbox = BBox::try_from(p.bbox).map_err(|e| schema(origin, line, e.to_string()))?;
        out.push(ScoredDetection {
            image: p.image,
            label,
            bbox,
            score: p.score,
        });
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String, EvalFileError> {
    fs::read_to_string(path).map_err(|source| EvalFileError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a ground-truth/prediction file pair.
pub fn load_pair(gt: &Path, pred: &Path) -> Result<(GroundTruthSet, Vec<ScoredDetection>), EvalFileError> {
    let g = parse_ground_truth(&read(gt)?, gt)?;
    let p = parse_predictions(&read(pred)?, pred, &g)?;
    Ok((g, p))
}

/// One report per (class, threshold), classes in order, thresholds in the
/// order given.
pub fn evaluate(
    predictions: &[ScoredDetection],
    gt: &GroundTruthSet,
    thresholds: &[f64],
) -> Result<Vec<EvalReport>, EvalError> {
    let mut per_threshold = thresholds
        .iter()
        .map(|&t| evaluate_at(predictions, gt, t))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    for class in gt.classes() {
        for reports in &mut per_threshold {
            if let Some(i) = reports.iter().position(|r| &r.class == class) {
                out.push(reports.remove(i));
            }
        }
    }
    Ok(out)
}

/// Reports on full images and, optionally, on driver-side crops, laid out
/// as columns `AP50 | AP10 | AP50 cropped | AP10 cropped`.
#[derive(Debug, Clone)]
pub struct ReportTable {
    pub thresholds: Vec<f64>,
    pub full: Vec<EvalReport>,
    pub cropped: Option<Vec<EvalReport>>,
}

fn column_name(t: f64) -> String {
    let pct = t * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("AP{}", pct.round() as i64)
    } else {
        format!("AP@{t}")
    }
}

impl ReportTable {
    fn sets(&self) -> Vec<(&'static str, &[EvalReport])> {
        let mut sets = vec![("full", self.full.as_slice())];
        if let Some(c) = &self.cropped {
            sets.push(("cropped", c.as_slice()));
        }
        sets
    }

    fn classes(&self) -> Vec<ClassLabel> {
        let mut classes: Vec<ClassLabel> = Vec::new();
        for (_, reports) in self.sets() {
            for r in reports {
                if !classes.contains(&r.class) {
                    classes.push(r.class.clone());
                }
            }
        }
        classes
    }

    fn find<'a>(reports: &'a [EvalReport], class: &ClassLabel, t: f64) -> Option<&'a EvalReport> {
        reports.iter().find(|r| &r.class == class && r.iou_threshold == t)
    }

    pub fn map(&self, reports: &[EvalReport], t: f64) -> Option<f64> {
        let at: Vec<&EvalReport> = reports.iter().filter(|r| r.iou_threshold == t).collect();
        mean_average_precision(&at)
    }

    /// AP as percentages with two decimals; `-` where not evaluated.
    pub fn render(&self) -> String {
        let mut header = vec!["Class".to_string()];
        for (name, _) in self.sets() {
            for &t in &self.thresholds {
                header.push(match name {
                    "full" => column_name(t),
                    _ => format!("{} cropped", column_name(t)),
                });
            }
        }
        let mut rows = Vec::new();
        let classes = self.classes();
        for class in &classes {
            let mut row = vec![class.to_string()];
            for (_, reports) in self.sets() {
                for &t in &self.thresholds {
                    row.push(Self::find(reports, class, t).map_or("-".into(), |r| format!("{:.2}", r.ap * 100.0)));
                }
            }
            rows.push(row);
        }
        if classes.len() > 1 {
            let mut row = vec!["mAP".to_string()];
            for (_, reports) in self.sets() {
                for &t in &self.thresholds {
                    row.push(self.map(reports, t).map_or("-".into(), |m| format!("{:.2}", m * 100.0)));
                }
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let fmt_row = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, w))| if i == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect::<Vec<_>>()
                .join(" | ")
        };
        let mut out = String::new();
        writeln!(out, "{}", fmt_row(&header)).unwrap();
        writeln!(
            out,
            "{}",
            widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-")
        )
        .unwrap();
        for r in rows {
            writeln!(out, "{}", fmt_row(&r)).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut reports = Vec::new();
        let mut maps = Vec::new();
        for (set, rs) in self.sets() {
            reports.extend(rs.iter().map(|r| ReportJson::new(set, r)));
            for &t in &self.thresholds {
                if rs.iter().map(|r| &r.class).collect::<std::collections::BTreeSet<_>>().len() > 1 {
                    if let Some(m) = self.map(rs, t) {
                        maps.push(MapJson {
                            set,
                            iou_threshold: t,
                            map: m,
                        });
                    }
                }
            }
        }
        serde_json::to_string_pretty(&TableJson {
            thresholds: self.thresholds.clone(),
            reports,
            map: maps,
        })
        .expect("report serializes")
    }
}

#[derive(Serialize)]
struct TableJson<'a> {
    #[serde(serialize_with = "serialize_vec")]
    thresholds: Vec<f64>,
    reports: Vec<ReportJson<'a>>,
    map: Vec<MapJson>,
}

fn serialize_vec<S: serde::Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        seq.serialize_element(&G17(*x))?;
    }
    seq.end()
}

struct G17(f64);

impl Serialize for G17 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        numfmt::serialize(&self.0, s)
    }
}

#[derive(Serialize)]
struct MapJson {
    set: &'static str,
    #[serde(serialize_with = "numfmt::serialize")]
    iou_threshold: f64,
    #[serde(serialize_with = "numfmt::serialize")]
    map: f64,
}

#[derive(Serialize)]
struct PointJson {
    #[serde(serialize_with = "numfmt::serialize")]
    recall: f64,
    #[serde(serialize_with = "numfmt::serialize")]
    precision: f64,
    tp: usize,
    fp: usize,
    #[serde(serialize_with = "numfmt::serialize")]
    score_at: f64,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    set: &'static str,
    class: &'a str,
    #[serde(serialize_with = "numfmt::serialize")]
    iou_threshold: f64,
    #[serde(serialize_with = "numfmt::serialize")]
    ap: f64,
    counts: phonewatch_core::eval::Counts,
    pr_curve: Vec<PointJson>,
}

impl<'a> ReportJson<'a> {
    fn new(set: &'static str, r: &'a EvalReport) -> Self {
        ReportJson {
            set,
            class: r.class.as_str(),
            iou_threshold: r.iou_threshold,
            ap: r.ap,
            counts: r.counts,
            pr_curve: r
                .pr_curve
                .iter()
                .map(|p| PointJson {
                    recall: p.recall,
                    precision: p.precision,
                    tp: p.tp,
                    fp: p.fp,
                    score_at: p.score_at,
                })
                .collect(),
        }
    }
}

/// Pipeline configurations compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Detection,
    Tracking,
    TwoStep,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Detection, Variant::Tracking, Variant::TwoStep];

    pub fn describe(&self) -> &'static str {
        match self {
            Variant::Detection => "detection only",
            Variant::Tracking => "with tracking",
            Variant::TwoStep => "with tracking & two-step",
        }
    }

    pub fn mode(&self) -> PipelineMode {
        match self {
            Variant::Detection | Variant::Tracking => PipelineMode::SingleStep,
            Variant::TwoStep => PipelineMode::TwoStep,
        }
    }

    pub fn tracking(&self) -> bool {
        !matches!(self, Variant::Detection)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchmarkOptions {
    /// Leave frame decoding out of the timed wall clock.
    pub exclude_decode: bool,
    /// Runs per variant; the fastest is reported.
    pub repeats: usize,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            exclude_decode: false,
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub variant: Variant,
    pub frames: u64,
    /// Timed seconds; excludes decoding when `exclude_decode` is set.
    #[serde(serialize_with = "numfmt::serialize")]
    pub wall_seconds: f64,
    /// `frames / wall_seconds`.
    #[serde(serialize_with = "numfmt::serialize")]
    pub mean_fps: f64,
    #[serde(serialize_with = "numfmt::serialize")]
    pub decode_seconds: f64,
    pub stage_means_us: StageMeansJson,
    pub exclude_decode: bool,
    pub repeats: usize,
    /// False when a frame error aborted the run; the numbers are partial.
    pub valid: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageMeansJson {
    #[serde(serialize_with = "numfmt::serialize")]
    pub decode: f64,
    #[serde(serialize_with = "numfmt::serialize")]
    pub detect1: f64,
    #[serde(serialize_with = "numfmt::serialize")]
    pub crop: f64,
    #[serde(serialize_with = "numfmt::serialize")]
    pub detect2: f64,
    #[serde(serialize_with = "numfmt::serialize")]
    pub track: f64,
}

impl From<StageMeans> for StageMeansJson {
    fn from(m: StageMeans) -> Self {
        Self {
            decode: m.decode_us,
            detect1: m.detect1_us,
            crop: m.crop_us,
            detect2: m.detect2_us,
            track: m.track_us,
        }
    }
}

/// Runs `variant` over a fresh pipeline and source per repeat. Frame errors
/// abort the run and mark the result invalid.
pub fn benchmark<E>(
    variant: Variant,
    options: BenchmarkOptions,
    mut pipeline: impl FnMut(Variant) -> Result<Pipeline, E>,
    mut source: impl FnMut() -> Result<Box<dyn FrameSource>, E>,
) -> Result<BenchmarkResult, E> {
    let mut best: Option<BenchmarkResult> = None;
    for _ in 0..options.repeats.max(1) {
        let mut p = pipeline(variant)?;
        let s = source()?;
        let summary = p.run_stream(s, &mut [], OnFrameError::Abort);
        let timed = if options.exclude_decode {
            summary.wall.saturating_sub(summary.decode)
        } else {
            summary.wall
        };
        let wall_seconds = timed.as_secs_f64();
        let result = BenchmarkResult {
            variant,
            frames: summary.frames,
            wall_seconds,
            mean_fps: if wall_seconds > 0.0 {
                summary.frames as f64 / wall_seconds
            } else {
                0.0
            },
            decode_seconds: summary.decode.as_secs_f64(),
            stage_means_us: summary.stage_means.into(),
            exclude_decode: options.exclude_decode,
            repeats: options.repeats.max(1),
            valid: summary.aborted.is_none(),
            error: summary.aborted,
        };
        if !result.valid {
            return Ok(result);
        }
        if best.as_ref().is_none_or(|b| result.wall_seconds < b.wall_seconds) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one repeat"))
}

pub fn render_benchmarks(results: &[BenchmarkResult]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<26} | {:>6} | {:>9} | {:>8} | {:>10} | {:>8} | {:>10} | {:>8}",
        "Variant", "Frames", "Seconds", "Mean FPS", "detect1 us", "crop us", "detect2 us", "track us"
    )
    .unwrap();
    writeln!(out, "{}", "-".repeat(26 + 6 + 9 + 8 + 10 + 8 + 10 + 8 + 7 * 3)).unwrap();
    for r in results {
        let m = &r.stage_means_us;
        writeln!(
            out,
            "{:<26} | {:>6} | {:>9.3} | {:>8.2} | {:>10.1} | {:>8.1} | {:>10.1} | {:>8.1}{}",
            r.variant.describe(),
            r.frames,
            r.wall_seconds,
            r.mean_fps,
            m.detect1,
            m.crop,
            m.detect2,
            m.track,
            if r.valid { "" } else { "  (INVALID: aborted)" }
        )
        .unwrap();
    }
    out
}

#[derive(Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub results: Vec<BenchmarkResult>,
}

pub fn benchmarks_json(results: &[BenchmarkResult]) -> String {
    serde_json::to_string_pretty(&BenchmarkReport {
        results: results.to_vec(),
    })
    .expect("benchmark serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    const GT: &str = r#"{"image": "a", "label": "phone", "box": [0, 0, 10, 10]}
{"image": "b", "label": "phone", "box": [0, 0, 10, 10]}
"#;

    #[test]
    fn golden_report_through_files() {
        let gt = parse_ground_truth(GT, Path::new("gt.jsonl")).unwrap();
        let pred = r#"{"image": "a", "label": "phone", "box": [0, 0, 10, 10], "score": 0.9}
{"image": "a", "label": "phone", "box": [50, 50, 60, 60], "score": 0.8}
{"image": "b", "label": "phone", "box": [0, 0, 10, 10], "score": 0.7}
"#;
        let p = parse_predictions(pred, Path::new("p.jsonl"), &gt).unwrap();
        let reports = evaluate(&p, &gt, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(reports.len(), 2);
        let golden = (6.0 + 5.0 * (2.0 / 3.0)) / 11.0;
        assert!((reports[0].ap - golden).abs() < 1e-12);
        assert_eq!(reports[0].iou_threshold, 0.5);
        assert_eq!(reports[1].iou_threshold, 0.1);

        let table = ReportTable {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            full: reports.clone(),
            cropped: Some(reports),
        };
        let text = table.render();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header.split('|').map(str::trim).collect::<Vec<_>>(),
            ["Class", "AP50", "AP10", "AP50 cropped", "AP10 cropped"]
        );
        assert!(text.contains("84.85"));
        let json: serde_json::Value = serde_json::from_str(&table.to_json()).unwrap();
        assert_eq!(json["reports"][0]["ap"].as_f64().unwrap(), golden);
        assert!(table.to_json().contains("0.8484848484848484"));
    }

    #[test]
    fn parse_errors_carry_lines() {
        let err = parse_ground_truth("{\"image\": \"a\"}\n", Path::new("g")).unwrap_err();
        assert!(matches!(err, EvalFileError::Parse { line: 1, .. }));
        let gt = parse_ground_truth(GT, Path::new("g")).unwrap();
        let bad_class = "\n{\"image\": \"a\", \"label\": \"cat\", \"box\": [0,0,1,1], \"score\": 0.5}";
        assert!(matches!(
            parse_predictions(bad_class, Path::new("p"), &gt),
            Err(EvalFileError::Schema { line: 2, .. })
        ));
        let bad_box = "{\"image\": \"a\", \"label\": \"phone\", \"box\": [5,0,1,1], \"score\": 0.5}";
        assert!(matches!(
            parse_predictions(bad_box, Path::new("p"), &gt),
            Err(EvalFileError::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn empty_predictions_score_zero() {
        let gt = parse_ground_truth(GT, Path::new("g")).unwrap();
        let reports = evaluate(&[], &gt, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(reports.len(), 2);
        assert!(reports.iter().all(|r| r.ap == 0.0 && r.counts.fn_ == 2));
    }

    #[test]
    fn map_row_for_several_classes() {
        let gt_text = format!("{GT}{{\"image\": \"a\", \"label\": \"licence_plate\", \"box\": [20, 20, 30, 25]}}\n");
        let gt = parse_ground_truth(&gt_text, Path::new("g")).unwrap();
        let pred = "{\"image\": \"a\", \"label\": \"licence_plate\", \"box\": [20, 20, 30, 25], \"score\": 0.9}";
        let p = parse_predictions(pred, Path::new("p"), &gt).unwrap();
        let table = ReportTable {
            thresholds: vec![0.5],
            full: evaluate(&p, &gt, &[0.5]).unwrap(),
            cropped: None,
        };
        let text = table.render();
        assert!(text.lines().last().unwrap().starts_with("mAP"), "{text}");
        assert!(text.contains("50.00"));
    }

    #[test]
    fn odd_thresholds_get_readable_columns() {
        assert_eq!(column_name(0.5), "AP50");
        assert_eq!(column_name(0.75), "AP75");
        assert_eq!(column_name(0.333), "AP@0.333");
    }
}
