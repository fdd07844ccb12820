//! Canonical data model and the line-delimited manifest format.
//!
//! A manifest is a JSONL file. The first line is a header object
//! (`"kind": "header"`), every following line is either a screen record
//! (`"kind": "record"`) or a task sample (`"kind": "sample"`). Objects are
//! written with sorted keys, UTF-8, LF line endings, so a parsed manifest
//! re-serializes byte-identically.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA_VERSION: &str = "uiforge/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Platform {
    #[serde(rename = "iPhone")]
    IPhone,
    Android,
    #[serde(rename = "iPad")]
    IPad,
    Web,
    AppleTV,
}

impl Platform {
    pub const ALL: [Platform; 5] = [
        Platform::IPhone,
        Platform::Android,
        Platform::IPad,
        Platform::Web,
        Platform::AppleTV,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Platform::IPhone => "iPhone",
            Platform::Android => "Android",
            Platform::IPad => "iPad",
            Platform::Web => "Web",
            Platform::AppleTV => "AppleTV",
        }
    }
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Platform {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Platform::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| UnknownVariant { kind: "platform", value: s.to_string() })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown {kind} `{value}`")]
pub struct UnknownVariant {
    pub kind: &'static str,
    pub value: String,
}

/// Axis-aligned box in original-image pixels, `[x_min, y_min, x_max, y_max]`.
///
/// Boxes are half-open on the max side: a box `[0, 0, w, h]` covers the full
/// `w × h` frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BBox {
    pub x_min: i64,
    pub y_min: i64,
    pub x_max: i64,
    pub y_max: i64,
}

impl BBox {
    pub const fn new(x_min: i64, y_min: i64, x_max: i64, y_max: i64) -> Self {
        BBox { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> i64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> i64 {
        self.y_max - self.y_min
    }

    /// Zero for degenerate or inverted boxes.
    pub fn area(&self) -> i64 {
        self.width().max(0) * self.height().max(0)
    }

    pub fn is_proper(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x_min >= 0
            && self.y_min >= 0
            && self.x_max <= i64::from(width)
            && self.y_max <= i64::from(height)
    }

    /// Center in doubled coordinates so it stays integral.
    pub fn center2(&self) -> (i64, i64) {
        (self.x_min + self.x_max, self.y_min + self.y_max)
    }

    /// True if the center of `other` lies inside `self` (half-open).
    pub fn contains_center_of(&self, other: &BBox) -> bool {
        let (cx2, cy2) = other.center2();
        2 * self.x_min <= cx2 && cx2 < 2 * self.x_max && 2 * self.y_min <= cy2 && cy2 < 2 * self.y_max
    }

    pub fn intersect(&self, other: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.max(other.x_min),
            y_min: self.y_min.max(other.y_min),
            x_max: self.x_max.min(other.x_max),
            y_max: self.y_max.min(other.y_max),
        }
    }

    /// The coordinate literal used in prompts and answers: `[x1, y1, x2, y2]`.
    pub fn literal(&self) -> String {
        format!("[{}, {}, {}, {}]", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.literal())
    }
}

impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.x_min, self.y_min, self.x_max, self.y_max].serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x_min, y_min, x_max, y_max] = <[i64; 4]>::deserialize(d)?;
        Ok(BBox { x_min, y_min, x_max, y_max })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UnifiedLabel {
    Checkbox,
    Button,
    Container,
    Dialog,
    Icon,
    PageControl,
    Picture,
    SegmentedControl,
    Slider,
    TabBar,
    Text,
    TextField,
    Toggle,
}

impl UnifiedLabel {
    pub const ALL: [UnifiedLabel; 13] = [
        UnifiedLabel::Checkbox,
        UnifiedLabel::Button,
        UnifiedLabel::Container,
        UnifiedLabel::Dialog,
        UnifiedLabel::Icon,
        UnifiedLabel::PageControl,
        UnifiedLabel::Picture,
        UnifiedLabel::SegmentedControl,
        UnifiedLabel::Slider,
        UnifiedLabel::TabBar,
        UnifiedLabel::Text,
        UnifiedLabel::TextField,
        UnifiedLabel::Toggle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            UnifiedLabel::Checkbox => "Checkbox",
            UnifiedLabel::Button => "Button",
            UnifiedLabel::Container => "Container",
            UnifiedLabel::Dialog => "Dialog",
            UnifiedLabel::Icon => "Icon",
            UnifiedLabel::PageControl => "PageControl",
            UnifiedLabel::Picture => "Picture",
            UnifiedLabel::SegmentedControl => "SegmentedControl",
            UnifiedLabel::Slider => "Slider",
            UnifiedLabel::TabBar => "TabBar",
            UnifiedLabel::Text => "Text",
            UnifiedLabel::TextField => "TextField",
            UnifiedLabel::Toggle => "Toggle",
        }
    }

    /// Position in the enumeration, used for palette assignment.
    pub fn index(self) -> usize {
        UnifiedLabel::ALL.iter().position(|l| *l == self).unwrap_or(0)
    }
}

impl fmt::Display for UnifiedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UnifiedLabel {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        UnifiedLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| UnknownVariant { kind: "label", value: s.to_string() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidgetState {
    Enabled,
    Disabled,
    Selected,
    Hovered,
    Checked,
    Unchecked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Widget {
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// `None` until label unification has run (or when the source label
    /// has no unified counterpart yet).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<UnifiedLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub source_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<WidgetState>,
}

impl Widget {
    pub fn new(bbox: BBox, source_label: impl Into<String>) -> Self {
        Widget {
            bbox,
            label: None,
            text: None,
            source_label: source_label.into(),
            ocr_confidence: None,
            state: None,
        }
    }

    pub fn with_label(mut self, label: UnifiedLabel) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Human,
    HtmlParsed,
    OcrMerged,
    Converted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenRecord {
    pub id: String,
    pub platform: Platform,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub widgets: Vec<Widget>,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Ocr,
    WidgetClassify,
    Tapperability,
    WidgetListing,
    FindText,
    FindWidget,
    ComprehensiveDescription,
    PerceptionQa,
    InteractionQa,
}

impl TaskKind {
    pub const ALL: [TaskKind; 9] = [
        TaskKind::Ocr,
        TaskKind::WidgetClassify,
        TaskKind::Tapperability,
        TaskKind::WidgetListing,
        TaskKind::FindText,
        TaskKind::FindWidget,
        TaskKind::ComprehensiveDescription,
        TaskKind::PerceptionQa,
        TaskKind::InteractionQa,
    ];

    pub const ADVANCED: [TaskKind; 3] =
        [TaskKind::ComprehensiveDescription, TaskKind::PerceptionQa, TaskKind::InteractionQa];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Ocr => "ocr",
            TaskKind::WidgetClassify => "widget_classify",
            TaskKind::Tapperability => "tapperability",
            TaskKind::WidgetListing => "widget_listing",
            TaskKind::FindText => "find_text",
            TaskKind::FindWidget => "find_widget",
            TaskKind::ComprehensiveDescription => "comprehensive_description",
            TaskKind::PerceptionQa => "perception_qa",
            TaskKind::InteractionQa => "interaction_qa",
        }
    }

    pub fn is_referring(self) -> bool {
        matches!(self, TaskKind::Ocr | TaskKind::WidgetClassify | TaskKind::Tapperability)
    }

    pub fn is_grounding(self) -> bool {
        matches!(self, TaskKind::WidgetListing | TaskKind::FindText | TaskKind::FindWidget)
    }

    pub fn is_advanced(self) -> bool {
        TaskKind::ADVANCED.contains(&self)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| UnknownVariant { kind: "task", value: s.to_string() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Turn { role: Role::User, text: text.into() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Turn { role: Role::Assistant, text: text.into() }
    }
}

/// Points at a coordinate literal inside one turn. `span` is a byte range.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedBox {
    pub turn: usize,
    pub span: [usize; 2],
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub id: String,
    pub screen_id: String,
    pub platform: Platform,
    pub task: TaskKind,
    pub turns: Vec<Turn>,
    pub grounded_boxes: Vec<GroundedBox>,
}

impl TaskSample {
    /// Boxes grounded in assistant turns, in order.
    pub fn answer_boxes(&self) -> Vec<BBox> {
        self.grounded_boxes
            .iter()
            .filter(|g| self.turns.get(g.turn).map(|t| t.role) == Some(Role::Assistant))
            .map(|g| g.bbox)
            .collect()
    }

    /// Boxes grounded in user turns, in order.
    pub fn question_boxes(&self) -> Vec<BBox> {
        self.grounded_boxes
            .iter()
            .filter(|g| self.turns.get(g.turn).map(|t| t.role) == Some(Role::User))
            .map(|g| g.bbox)
            .collect()
    }

    pub fn joined(&self, role: Role) -> String {
        self.turns
            .iter()
            .filter(|t| t.role == role)
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Ingested, not yet curated: boxes may leave the frame, labels may be unset.
    Raw,
    Curated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema: String,
    pub stage: Stage,
    /// Number of records plus samples per platform.
    pub platform_counts: BTreeMap<Platform, u64>,
    pub loss_weights: BTreeMap<Platform, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Record(ScreenRecord),
    Sample(TaskSample),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub entries: Vec<Entry>,
}

pub fn default_loss_weights() -> BTreeMap<Platform, f64> {
    Platform::ALL.into_iter().map(|p| (p, 1.0)).collect()
}

impl DatasetManifest {
    pub fn new(stage: Stage, loss_weights: BTreeMap<Platform, f64>) -> Self {
        DatasetManifest {
            header: ManifestHeader {
                schema: SCHEMA_VERSION.to_string(),
                stage,
                platform_counts: BTreeMap::new(),
                loss_weights,
            },
            entries: Vec::new(),
        }
    }

    pub fn from_records(stage: Stage, records: Vec<ScreenRecord>) -> Self {
        let mut m = DatasetManifest::new(stage, default_loss_weights());
        m.entries = records.into_iter().map(Entry::Record).collect();
        m.recount();
        m
    }

    pub fn from_samples(loss_weights: BTreeMap<Platform, f64>, samples: Vec<TaskSample>) -> Self {
        let mut m = DatasetManifest::new(Stage::Curated, loss_weights);
        m.entries = samples.into_iter().map(Entry::Sample).collect();
        m.recount();
        m
    }

    /// Recomputes `platform_counts` from the entries.
    pub fn recount(&mut self) {
        self.header.platform_counts = count_platforms(&self.entries);
    }

    pub fn records(&self) -> impl Iterator<Item = &ScreenRecord> {
        self.entries.iter().filter_map(|e| match e {
            Entry::Record(r) => Some(r),
            Entry::Sample(_) => None,
        })
    }

    pub fn samples(&self) -> impl Iterator<Item = &TaskSample> {
        self.entries.iter().filter_map(|e| match e {
            Entry::Sample(s) => Some(s),
            Entry::Record(_) => None,
        })
    }

    pub fn into_records(self) -> Vec<ScreenRecord> {
        self.entries
            .into_iter()
            .filter_map(|e| match e {
                Entry::Record(r) => Some(r),
                Entry::Sample(_) => None,
            })
            .collect()
    }

    pub fn into_samples(self) -> Vec<TaskSample> {
        self.entries
            .into_iter()
            .filter_map(|e| match e {
                Entry::Sample(s) => Some(s),
                Entry::Record(_) => None,
            })
            .collect()
    }

    /// All invariant violations, in entry order.
    pub fn validate(&self) -> Vec<ManifestIssue> {
        let mut issues = validate_header(&self.header, 1);
        let mut ids = HashSet::new();
        for (i, entry) in self.entries.iter().enumerate() {
            let line = i + 2;
            let (id, mut found) = match entry {
                Entry::Record(r) => (r.id.as_str(), validate_record(r, self.header.stage)),
                Entry::Sample(s) => (s.id.as_str(), validate_sample(s)),
            };
            if !ids.insert(id.to_string()) {
                found.push(("id".into(), "duplicate id within manifest".into()));
            }
            issues.extend(found.into_iter().map(|(field, message)| ManifestIssue {
                line,
                record_id: Some(id.to_string()),
                kind: IssueKind::Validation { field, message },
            }));
        }
        let counts = count_platforms(&self.entries);
        if counts != self.header.platform_counts {
            issues.push(ManifestIssue {
                line: 1,
                record_id: None,
                kind: IssueKind::Validation {
                    field: "platform_counts".into(),
                    message: format!("header says {:?}, content has {:?}", self.header.platform_counts, counts),
                },
            });
        }
        issues
    }
}

fn count_platforms(entries: &[Entry]) -> BTreeMap<Platform, u64> {
    let mut counts = BTreeMap::new();
    for e in entries {
        let p = match e {
            Entry::Record(r) => r.platform,
            Entry::Sample(s) => s.platform,
        };
        *counts.entry(p).or_insert(0) += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IssueKind {
    Parse(String),
    Schema(String),
    Validation { field: String, message: String },
}

/// One problem found while reading or validating a manifest. Lines are 1-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestIssue {
    pub line: usize,
    pub record_id: Option<String>,
    pub kind: IssueKind,
}

impl fmt::Display for ManifestIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}", self.line)?;
        if let Some(id) = &self.record_id {
            write!(f, " (id {id})")?;
        }
        match &self.kind {
            IssueKind::Parse(m) => write!(f, ": parse error: {m}"),
            IssueKind::Schema(m) => write!(f, ": schema error: {m}"),
            IssueKind::Validation { field, message } => write!(f, ": invalid {field}: {message}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} is invalid:\n{}", render_issues(.issues))]
    Invalid { path: String, issues: Vec<ManifestIssue> },
}

fn render_issues(issues: &[ManifestIssue]) -> String {
    issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n")
}

fn validate_header(h: &ManifestHeader, line: usize) -> Vec<ManifestIssue> {
    let mut out = Vec::new();
    let mut push = |field: &str, message: String| {
        out.push(ManifestIssue {
            line,
            record_id: None,
            kind: IssueKind::Validation { field: field.into(), message },
        })
    };
    if h.schema != SCHEMA_VERSION {
        push("schema", format!("expected `{SCHEMA_VERSION}`, found `{}`", h.schema));
    }
    for (p, w) in &h.loss_weights {
        if !(w.is_finite() && *w > 0.0) {
            push("loss_weights", format!("weight for {p} must be > 0, found {w}"));
        }
    }
    out
}

/// Field-level invariant violations of a screen record.
pub fn validate_record(r: &ScreenRecord, stage: Stage) -> Vec<(String, String)> {
    let mut out = Vec::new();
    if r.id.is_empty() {
        out.push(("id".into(), "must be nonempty".into()));
    }
    if r.width == 0 || r.height == 0 {
        out.push(("width/height".into(), format!("must be positive, found {}x{}", r.width, r.height)));
    }
    if stage == Stage::Curated && r.widgets.is_empty() {
        out.push(("widgets".into(), "curated records need at least one widget".into()));
    }
    for (i, w) in r.widgets.iter().enumerate() {
        let b = w.bbox;
        if !b.is_proper() {
            out.push((
                format!("widgets[{i}].box"),
                format!("Box invariant x_min < x_max and y_min < y_max violated by {b}"),
            ));
        } else if stage == Stage::Curated && !b.within(r.width, r.height) {
            out.push((
                format!("widgets[{i}].box"),
                format!("Box {b} leaves the {}x{} frame", r.width, r.height),
            ));
        }
        if let Some(c) = w.ocr_confidence {
            if !(0.0..=1.0).contains(&c) {
                out.push((format!("widgets[{i}].ocr_confidence"), format!("{c} outside [0,1]")));
            }
            if w.text.is_none() {
                out.push((format!("widgets[{i}].ocr_confidence"), "present without OCR text".into()));
            }
        }
        if stage == Stage::Curated {
            match w.label {
                None => out.push((format!("widgets[{i}].label"), "missing unified label".into())),
                Some(UnifiedLabel::Text) if w.text.is_none() => {
                    out.push((format!("widgets[{i}].text"), "Text widget without text".into()))
                }
                _ => {}
            }
        }
    }
    out
}

/// Field-level invariant violations of a task sample.
pub fn validate_sample(s: &TaskSample) -> Vec<(String, String)> {
    let mut out = Vec::new();
    if s.id.is_empty() {
        out.push(("id".into(), "must be nonempty".into()));
    }
    if s.turns.is_empty() {
        out.push(("turns".into(), "must contain at least one turn".into()));
    }
    for (i, t) in s.turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if t.role != expected {
            out.push((format!("turns[{i}].role"), "roles must alternate starting with user".into()));
        }
    }
    for (i, g) in s.grounded_boxes.iter().enumerate() {
        let Some(turn) = s.turns.get(g.turn) else {
            out.push((format!("grounded_boxes[{i}].turn"), format!("turn {} does not exist", g.turn)));
            continue;
        };
        let [a, b] = g.span;
        match turn.text.get(a..b) {
            Some(slice) if slice == g.bbox.literal() => {}
            _ => out.push((
                format!("grounded_boxes[{i}].span"),
                format!("span {a}..{b} of turn {} is not the literal {}", g.turn, g.bbox.literal()),
            )),
        }
    }
    out
}

// Canonical serialization: serde_json's default map is ordered by key, so
// going through `Value` sorts every object.
fn canonical_line<T: Serialize>(kind: &str, value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("manifest types serialize");
    if let Value::Object(map) = &mut v {
        map.insert("kind".into(), Value::String(kind.into()));
    }
    serde_json::to_string(&v).expect("value serializes")
}

/// Canonical byte serialization of a manifest.
pub fn to_canonical_string(m: &DatasetManifest) -> String {
    let mut out = String::new();
    out.push_str(&canonical_line("header", &m.header));
    out.push('\n');
    for e in &m.entries {
        let line = match e {
            Entry::Record(r) => canonical_line("record", r),
            Entry::Sample(s) => canonical_line("sample", s),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Result of a lenient parse: everything that could be read plus every issue.
#[derive(Debug)]
pub struct ParsedManifest {
    pub manifest: DatasetManifest,
    pub issues: Vec<ManifestIssue>,
}

pub fn parse_manifest(text: &str) -> ParsedManifest {
    let mut issues = Vec::new();
    let mut header: Option<ManifestHeader> = None;
    let mut entries = Vec::new();

    for (idx, raw) in text.split('\n').enumerate() {
        let line = idx + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = match serde_json::from_str(raw) {
            Ok(v) => v,
            Err(e) => {
                issues.push(ManifestIssue { line, record_id: None, kind: IssueKind::Parse(e.to_string()) });
                continue;
            }
        };
        let Value::Object(mut map) = value else {
            issues.push(ManifestIssue {
                line,
                record_id: None,
                kind: IssueKind::Schema("line is not a JSON object".into()),
            });
            continue;
        };
        let kind = map.remove("kind");
        let id = map.get("id").and_then(Value::as_str).map(str::to_string);
        let obj = Value::Object(map);
        let schema_issue = |msg: String| ManifestIssue { line, record_id: id.clone(), kind: IssueKind::Schema(msg) };
        match kind.as_ref().and_then(Value::as_str) {
            Some("header") => {
                if header.is_some() {
                    issues.push(schema_issue("duplicate header".into()));
                } else if line != 1 && !entries.is_empty() {
                    issues.push(schema_issue("header must be the first line".into()));
                } else {
                    match serde_json::from_value(obj) {
                        Ok(h) => header = Some(h),
                        Err(e) => issues.push(schema_issue(format!("bad header: {e}"))),
                    }
                }
            }
            Some("record") => match serde_json::from_value(obj) {
                Ok(r) => entries.push((line, Entry::Record(r))),
                Err(e) => issues.push(schema_issue(format!("bad record: {e}"))),
            },
            Some("sample") => match serde_json::from_value(obj) {
                Ok(s) => entries.push((line, Entry::Sample(s))),
                Err(e) => issues.push(schema_issue(format!("bad sample: {e}"))),
            },
            Some(other) => issues.push(schema_issue(format!("unknown kind `{other}`"))),
            None => issues.push(schema_issue("missing `kind`".into())),
        }
    }

    let header_missing = header.is_none();
    if header_missing {
        issues.push(ManifestIssue {
            line: 1,
            record_id: None,
            kind: IssueKind::Schema("missing header line".into()),
        });
    }
    let header = header.unwrap_or_else(|| DatasetManifest::new(Stage::Raw, BTreeMap::new()).header);

    // Re-number validation issues with real file lines.
    let lines: Vec<usize> = entries.iter().map(|(l, _)| *l).collect();
    let manifest = DatasetManifest { header, entries: entries.into_iter().map(|(_, e)| e).collect() };
    for mut issue in manifest.validate() {
        if header_missing && issue.line == 1 {
            continue;
        }
        if issue.line >= 2 {
            issue.line = lines[issue.line - 2];
        }
        issues.push(issue);
    }
    issues.sort_by_key(|i| i.line);
    ParsedManifest { manifest, issues }
}

/// Reads a manifest leniently, returning content and collected issues.
pub fn read_manifest_lenient(path: &Path) -> Result<ParsedManifest, ManifestError> {
    let text = fs::read_to_string(path)
        .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
    Ok(parse_manifest(&text))
}

/// Reads a manifest, failing if any line is malformed or any invariant fails.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let parsed = read_manifest_lenient(path)?;
    if parsed.issues.is_empty() {
        Ok(parsed.manifest)
    } else {
        Err(ManifestError::Invalid { path: path.display().to_string(), issues: parsed.issues })
    }
}

/// Writes a validating manifest in canonical form.
pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<(), ManifestError> {
    let issues = m.validate();
    if !issues.is_empty() {
        return Err(ManifestError::Invalid { path: path.display().to_string(), issues });
    }
    let io_err = |source| ManifestError::Io { path: path.display().to_string(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(to_canonical_string(m).as_bytes()).map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, widgets: Vec<Widget>) -> ScreenRecord {
        ScreenRecord {
            id: id.into(),
            platform: Platform::Web,
            image_path: format!("{id}.png"),
            width: 100,
            height: 100,
            widgets,
            provenance: Provenance::HtmlParsed,
        }
    }

    #[test]
    fn empty_file_reports_missing_header() {
        let parsed = parse_manifest("");
        assert!(parsed.manifest.entries.is_empty());
        assert_eq!(parsed.issues.len(), 1);
        assert!(matches!(&parsed.issues[0].kind, IssueKind::Schema(m) if m.contains("header")));
    }

    #[test]
    fn degenerate_box_names_the_box_invariant() {
        let mut m = DatasetManifest::from_records(
            Stage::Raw,
            vec![record("r1", vec![Widget::new(BBox::new(10, 0, 10, 5), "a")])],
        );
        m.recount();
        let text = to_canonical_string(&m);
        let parsed = parse_manifest(&text);
        assert_eq!(parsed.issues.len(), 1);
        let issue = &parsed.issues[0];
        assert_eq!(issue.line, 2);
        assert_eq!(issue.record_id.as_deref(), Some("r1"));
        match &issue.kind {
            IssueKind::Validation { field, message } => {
                assert_eq!(field, "widgets[0].box");
                assert!(message.contains("Box invariant"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line_number() {
        let m = DatasetManifest::from_records(Stage::Raw, vec![]);
        let text = format!("{}{{not json\n", to_canonical_string(&m));
        let parsed = parse_manifest(&text);
        assert_eq!(parsed.issues.len(), 1);
        assert_eq!(parsed.issues[0].line, 2);
        assert!(matches!(parsed.issues[0].kind, IssueKind::Parse(_)));
    }

    #[test]
    fn zero_loss_weight_fails_write() {
        let mut m = DatasetManifest::from_records(Stage::Raw, vec![]);
        m.header.loss_weights.insert(Platform::IPad, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let err = write_manifest(&m, &dir.path().join("m.jsonl")).unwrap_err();
        assert!(err.to_string().contains("loss_weights"), "{err}");
    }

    #[test]
    fn insertion_order_is_kept() {
        let m = DatasetManifest::from_records(
            Stage::Raw,
            vec![record("B", vec![]), record("A", vec![])],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&m, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        let ids: Vec<_> = back.records().map(|r| r.id.clone()).collect();
        assert_eq!(ids, ["B", "A"]);
        let first = fs::read(&path).unwrap();
        write_manifest(&back, &path).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }

    #[test]
    fn keys_are_sorted() {
        let m = DatasetManifest::from_records(
            Stage::Raw,
            vec![record("x", vec![Widget::new(BBox::new(0, 0, 1, 1), "a").with_text("hi")])],
        );
        let text = to_canonical_string(&m);
        let line = text.lines().nth(1).unwrap();
        assert!(line.starts_with(r#"{"height":100,"id":"x","image_path":"x.png","kind":"record","platform":"Web""#), "{line}");
        assert!(line.contains(r#"{"box":[0,0,1,1],"source_label":"a","text":"hi"}"#), "{line}");
    }

    #[test]
    fn curated_stage_enforces_bounds_and_labels() {
        let r = record("c", vec![Widget::new(BBox::new(-1, 0, 10, 10), "a")]);
        let issues = validate_record(&r, Stage::Curated);
        let fields: Vec<_> = issues.iter().map(|(f, _)| f.as_str()).collect();
        assert_eq!(fields, ["widgets[0].box", "widgets[0].label"]);
        assert!(validate_record(&r, Stage::Raw).is_empty());
    }

    #[test]
    fn sample_span_must_point_at_literal() {
        let b = BBox::new(1, 2, 3, 4);
        let text = format!("at {}", b.literal());
        let mut s = TaskSample {
            id: "s".into(),
            screen_id: "r".into(),
            platform: Platform::IPhone,
            task: TaskKind::FindText,
            turns: vec![Turn::user("where?"), Turn::assistant(text.clone())],
            grounded_boxes: vec![GroundedBox { turn: 1, span: [3, text.len()], bbox: b }],
        };
        assert!(validate_sample(&s).is_empty());
        s.grounded_boxes[0].span = [2, text.len()];
        assert_eq!(validate_sample(&s).len(), 1);
        s.turns.swap(0, 1);
        assert!(validate_sample(&s).len() >= 2);
    }

    #[test]
    fn center_containment_is_half_open() {
        let pic = BBox::new(0, 0, 10, 10);
        assert!(pic.contains_center_of(&BBox::new(0, 0, 2, 2)));
        assert!(!pic.contains_center_of(&BBox::new(9, 9, 11, 11)));
        assert!(pic.contains_center_of(&BBox::new(8, 8, 11, 11)));
    }
}
