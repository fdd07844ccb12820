//! Adapters from raw annotation sources to [`ScreenRecord`]s.
//!
//! Every source is a directory of screenshots (`.png`, `.jpg`, `.jpeg`). Next
//! to each image `<stem>.png` sits an annotation file `<stem>.json` and an
//! optional OCR sidecar `<stem>.ocr.json`:
//!
//! ```text
//! <stem>.ocr.json   {"lines": [{"bbox": [x1, y1, x2, y2], "text": "...", "confidence": 0.93}]}
//! ```
//!
//! Annotation layouts per source kind:
//!
//! * `apple_human`: `{"platform": "iPhone" | "iPad" | "AppleTV",
//!   "widgets": [{"label": "Button", "bbox": [..], "state": "selected"?}]}`.
//!   Human annotations carry no text; text comes from the screen-wide OCR
//!   sidecar.
//! * `web_html`: `{"url": "..."?, "root": node}` where a node is
//!   `{"tag": "a", "bbox": [..]?, "text": "..."?, "state": ..?, "children": [node]}`.
//!   Every node with a `bbox` becomes a widget, in pre-order. OCR lines are
//!   attached to enclosing pictures only.
//! * `android_rico`: a RICO semantic-annotation tree, nodes
//!   `{"class": "...", "componentLabel": "Text"?, "bounds": [..], "text": ..?, "children": [..]}`.
//!   Nodes with a `componentLabel` become widgets, in pre-order; the rest are
//!   layout scaffolding and are only counted. OCR lines attach to pictures.
//!
//! Ingest never alters coordinates and never filters by label or bounds.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curate::{LabelMap, MappedLabel};
use crate::eval::iou;
use crate::schema::{BBox, Platform, Provenance, ScreenRecord, UnifiedLabel, UnknownVariant, Widget, WidgetState};

pub const DEFAULT_OCR_THRESHOLD: f64 = 0.5;
/// Source label given to widgets created from screen-wide OCR lines.
pub const OCR_SOURCE_LABEL: &str = "ocr_text";
pub const OCR_SUFFIX: &str = ".ocr.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawSourceKind {
    AppleHuman,
    WebHtml,
    AndroidRico,
}

impl RawSourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RawSourceKind::AppleHuman => "apple_human",
            RawSourceKind::WebHtml => "web_html",
            RawSourceKind::AndroidRico => "android_rico",
        }
    }

    pub fn for_platform(platform: Platform) -> Self {
        match platform {
            Platform::IPhone | Platform::IPad | Platform::AppleTV => RawSourceKind::AppleHuman,
            Platform::Web => RawSourceKind::WebHtml,
            Platform::Android => RawSourceKind::AndroidRico,
        }
    }

    pub fn provenance(self) -> Provenance {
        match self {
            RawSourceKind::AppleHuman => Provenance::Human,
            RawSourceKind::WebHtml => Provenance::HtmlParsed,
            RawSourceKind::AndroidRico => Provenance::Converted,
        }
    }

    pub fn ocr_scope(self) -> OcrScope {
        match self {
            RawSourceKind::AppleHuman => OcrScope::ScreenWide,
            RawSourceKind::WebHtml | RawSourceKind::AndroidRico => OcrScope::PictureOnly,
        }
    }
}

impl fmt::Display for RawSourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RawSourceKind {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [RawSourceKind::AppleHuman, RawSourceKind::WebHtml, RawSourceKind::AndroidRico]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownVariant { kind: "source kind", value: s.to_string() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcrLine {
    pub bbox: BBox,
    pub text: String,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OcrScope {
    /// Lines become standalone Text widgets.
    ScreenWide,
    /// Lines attach their text to the Picture widget containing their center.
    PictureOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcrMergeStats {
    pub merged: u64,
    pub below_threshold: u64,
    pub duplicates: u64,
    /// Picture-only lines whose center falls in no Picture widget.
    pub unplaced: u64,
    /// Lines whose target already holds the same text (or a Picture that
    /// already carries text).
    pub already_present: u64,
    /// Screen-wide lines with IoU >= 0.5 against a pre-existing widget.
    pub overlaps_existing: u64,
}

impl OcrMergeStats {
    fn add(&mut self, o: &OcrMergeStats) {
        self.merged += o.merged;
        self.below_threshold += o.below_threshold;
        self.duplicates += o.duplicates;
        self.unplaced += o.unplaced;
        self.already_present += o.already_present;
        self.overlaps_existing += o.overlaps_existing;
    }
}

/// Drops lines whose box and text repeat an earlier line.
pub fn dedup_lines(lines: &[OcrLine]) -> (Vec<OcrLine>, u64) {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(lines.len());
    for l in lines {
        if seen.insert((l.bbox, l.text.clone())) {
            out.push(l.clone());
        }
    }
    let dups = (lines.len() - out.len()) as u64;
    (out, dups)
}

/// Merges OCR lines into a record. Lines below `threshold` are discarded;
/// existing widgets are never modified except that picture-only merging
/// fills in the text of Picture widgets that have none.
pub fn merge_ocr(
    record: &ScreenRecord,
    lines: &[OcrLine],
    threshold: f64,
    scope: OcrScope,
) -> (ScreenRecord, OcrMergeStats) {
    let (lines, duplicates) = dedup_lines(lines);
    let mut stats = OcrMergeStats { duplicates, ..OcrMergeStats::default() };
    let mut out = record.clone();
    let accepted: Vec<&OcrLine> = lines
        .iter()
        .filter(|l| {
            let ok = l.confidence >= threshold;
            stats.below_threshold += u64::from(!ok);
            ok
        })
        .collect();

    match scope {
        OcrScope::ScreenWide => {
            let original = record.widgets.len();
            for line in accepted {
                let present = out.widgets.iter().any(|w| {
                    w.source_label == OCR_SOURCE_LABEL && w.bbox == line.bbox && w.text.as_deref() == Some(&line.text)
                });
                if present {
                    stats.already_present += 1;
                    continue;
                }
                if record.widgets[..original]
                    .iter()
                    .any(|w| w.source_label != OCR_SOURCE_LABEL && iou(&w.bbox, &line.bbox) >= 0.5)
                {
                    stats.overlaps_existing += 1;
                }
                let mut w = Widget::new(line.bbox, OCR_SOURCE_LABEL).with_label(UnifiedLabel::Text).with_text(&line.text);
                w.ocr_confidence = Some(line.confidence);
                out.widgets.push(w);
                stats.merged += 1;
            }
            if stats.merged > 0 {
                out.provenance = Provenance::OcrMerged;
            }
        }
        OcrScope::PictureOnly => {
            // Collect lines per picture first so each picture gets one text.
            let mut per_widget: Vec<Vec<&OcrLine>> = vec![Vec::new(); out.widgets.len()];
            for line in accepted {
                let target = out
                    .widgets
                    .iter()
                    .position(|w| w.label == Some(UnifiedLabel::Picture) && w.bbox.contains_center_of(&line.bbox));
                match target {
                    Some(i) => per_widget[i].push(line),
                    None => stats.unplaced += 1,
                }
            }
            for (w, attached) in out.widgets.iter_mut().zip(per_widget) {
                if attached.is_empty() {
                    continue;
                }
                if w.text.is_some() {
                    stats.already_present += attached.len() as u64;
                    continue;
                }
                let text = attached.iter().map(|l| l.text.as_str()).collect::<Vec<_>>().join(" ");
                let conf = attached.iter().map(|l| l.confidence).fold(f64::INFINITY, f64::min);
                w.text = Some(text);
                w.ocr_confidence = Some(conf);
                stats.merged += attached.len() as u64;
            }
        }
    }
    (out, stats)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestIssue {
    pub image: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub kind: Option<RawSourceKind>,
    pub images: u64,
    pub records: u64,
    /// Images without an annotation file.
    pub skipped: Vec<IngestIssue>,
    /// Images whose header or annotation could not be read.
    pub errors: Vec<IngestIssue>,
    pub widgets: u64,
    /// Source nodes without a box or without a semantic label.
    pub unlabeled_nodes: u64,
    /// Source widgets whose box is empty or inverted; not representable.
    pub degenerate_boxes: u64,
    pub ocr: OcrMergeStats,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot list {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug)]
pub struct IngestOutput {
    pub records: Vec<ScreenRecord>,
    pub report: IngestReport,
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub ocr_threshold: f64,
    /// Used to recognize pictures for picture-only OCR and to attach
    /// provisional labels. Curation relabels from scratch.
    pub label_map: LabelMap,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { ocr_threshold: DEFAULT_OCR_THRESHOLD, label_map: LabelMap::defaults() }
    }
}

// Raw layouts.

#[derive(Deserialize)]
struct AppleAnnotation {
    platform: Platform,
    #[serde(default)]
    widgets: Vec<AppleWidget>,
}

#[derive(Deserialize)]
struct AppleWidget {
    label: String,
    bbox: BBox,
    #[serde(default)]
    state: Option<WidgetState>,
}

#[derive(Deserialize)]
struct WebAnnotation {
    root: HtmlNode,
}

#[derive(Deserialize)]
struct HtmlNode {
    tag: String,
    #[serde(default)]
    bbox: Option<BBox>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    state: Option<WidgetState>,
    #[serde(default)]
    children: Vec<HtmlNode>,
}

#[derive(Deserialize)]
struct RicoNode {
    #[serde(default, rename = "componentLabel")]
    component_label: Option<String>,
    #[serde(default)]
    bounds: Option<BBox>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    state: Option<WidgetState>,
    #[serde(default)]
    children: Vec<RicoNode>,
}

#[derive(Deserialize)]
struct OcrSidecar {
    #[serde(default)]
    lines: Vec<OcrLine>,
}

struct Parsed {
    platform: Platform,
    widgets: Vec<Widget>,
    unlabeled: u64,
    degenerate: u64,
}

fn push_widget(out: &mut Parsed, bbox: BBox, label: String, text: Option<String>, state: Option<WidgetState>) {
    if !bbox.is_proper() {
        out.degenerate += 1;
        return;
    }
    let mut w = Widget::new(bbox, label);
    w.text = text;
    w.state = state;
    out.widgets.push(w);
}

fn walk_html(node: HtmlNode, out: &mut Parsed) {
    match node.bbox {
        Some(b) => push_widget(out, b, node.tag, node.text, node.state),
        None => out.unlabeled += 1,
    }
    for child in node.children {
        walk_html(child, out);
    }
}

fn walk_rico(node: RicoNode, out: &mut Parsed) {
    match (node.component_label, node.bounds) {
        (Some(label), Some(b)) => push_widget(out, b, label, node.text, node.state),
        _ => out.unlabeled += 1,
    }
    for child in node.children {
        walk_rico(child, out);
    }
}

fn parse_annotation(kind: RawSourceKind, text: &str) -> Result<Parsed, serde_json::Error> {
    match kind {
        RawSourceKind::AppleHuman => {
            let a: AppleAnnotation = serde_json::from_str(text)?;
            let mut out = Parsed { platform: a.platform, widgets: Vec::new(), unlabeled: 0, degenerate: 0 };
            for w in a.widgets {
                push_widget(&mut out, w.bbox, w.label, None, w.state);
            }
            Ok(out)
        }
        RawSourceKind::WebHtml => {
            let a: WebAnnotation = serde_json::from_str(text)?;
            let mut out = Parsed { platform: Platform::Web, widgets: Vec::new(), unlabeled: 0, degenerate: 0 };
            walk_html(a.root, &mut out);
            Ok(out)
        }
        RawSourceKind::AndroidRico => {
            let root: RicoNode = serde_json::from_str(text)?;
            let mut out = Parsed { platform: Platform::Android, widgets: Vec::new(), unlabeled: 0, degenerate: 0 };
            walk_rico(root, &mut out);
            Ok(out)
        }
    }
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Images under `root` in sorted path order.
pub fn list_images(root: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let io = |source| IngestError::Io { path: root.display().to_string(), source };
    let mut images = Vec::new();
    for entry in fs::read_dir(root).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.is_file() && is_image(&p) {
            images.push(p);
        }
    }
    images.sort();
    Ok(images)
}

enum Outcome {
    Record(Box<ScreenRecord>, Parsed, OcrMergeStats),
    Skipped(IngestIssue),
    Failed(IngestIssue),
}

fn ingest_one(kind: RawSourceKind, image: &Path, opts: &IngestOptions) -> Outcome {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    let dir = image.parent().unwrap_or(Path::new("."));
    let issue = |reason: String| IngestIssue { image: image.display().to_string(), reason };

    let ann_path = dir.join(format!("{stem}.json"));
    let ann = match fs::read_to_string(&ann_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Outcome::Skipped(issue(format!("no annotation file {}", ann_path.display())))
        }
        Err(e) => return Outcome::Failed(issue(format!("reading {}: {e}", ann_path.display()))),
    };
    let (width, height) = match image::image_dimensions(image) {
        Ok(d) => d,
        Err(e) => return Outcome::Failed(issue(format!("unreadable image header: {e}"))),
    };
    let mut parsed = match parse_annotation(kind, &ann) {
        Ok(p) => p,
        Err(e) => return Outcome::Failed(issue(format!("bad {kind} annotation: {e}"))),
    };
    let ocr_path = dir.join(format!("{stem}{OCR_SUFFIX}"));
    let lines = match fs::read_to_string(&ocr_path) {
        Ok(t) => match serde_json::from_str::<OcrSidecar>(&t) {
            Ok(s) => s.lines,
            Err(e) => return Outcome::Failed(issue(format!("bad OCR sidecar: {e}"))),
        },
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Outcome::Failed(issue(format!("reading {}: {e}", ocr_path.display()))),
    };

    let widgets = std::mem::take(&mut parsed.widgets)
        .into_iter()
        .map(|mut w| {
            if let Some(MappedLabel::Unified(l)) = opts.label_map.get(parsed.platform, &w.source_label) {
                w.label = Some(l);
            }
            w
        })
        .collect();
    let record = ScreenRecord {
        id: stem,
        platform: parsed.platform,
        image_path: image.display().to_string(),
        width,
        height,
        widgets,
        provenance: kind.provenance(),
    };
    let (record, stats) = merge_ocr(&record, &lines, opts.ocr_threshold, kind.ocr_scope());
    Outcome::Record(Box::new(record), parsed, stats)
}

/// Converts every image under `root` into a record. Output order follows
/// sorted image paths; per-image failures are reported, not fatal.
pub fn ingest_source(kind: RawSourceKind, root: &Path, opts: &IngestOptions) -> Result<IngestOutput, IngestError> {
    let images = list_images(root)?;
    let outcomes: Vec<Outcome> = images.par_iter().map(|p| ingest_one(kind, p, opts)).collect();
    let mut report = IngestReport { kind: Some(kind), images: images.len() as u64, ..IngestReport::default() };
    let mut records = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Record(r, parsed, stats) => {
                report.widgets += r.widgets.len() as u64;
                report.unlabeled_nodes += parsed.unlabeled;
                report.degenerate_boxes += parsed.degenerate;
                report.ocr.add(&stats);
                records.push(*r);
            }
            Outcome::Skipped(i) => report.skipped.push(i),
            Outcome::Failed(i) => report.errors.push(i),
        }
    }
    report.records = records.len() as u64;
    for i in report.skipped.iter().chain(&report.errors) {
        tracing::warn!(image = %i.image, reason = %i.reason, "image not ingested");
    }
    Ok(IngestOutput { records, report })
}
