//! Task generation from curated screens.
//!
//! Elementary tasks come from fixed templates over ground-truth widgets.
//! Advanced tasks are written by a chat model that only ever sees widget
//! markers (`[Box k]`, or `[Box k, Box j]` for several); markers in the
//! response are replaced by the ground-truth coordinate literal of each tag.
//! A single tag becomes `[x1, y1, x2, y2]`, a list becomes
//! `[[x1, y1, x2, y2], [..]]`.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::llm::{ChatRequest, ImageRef, LlmClient, LlmError};
use crate::schema::{BBox, GroundedBox, Platform, Role, ScreenRecord, TaskKind, TaskSample, Turn, UnifiedLabel};
use crate::som::SomIndex;

pub const DEFAULT_PER_TASK_CAP: usize = 5;
pub const DEFAULT_LISTING_CAP: usize = 40;
pub const TAPPABLE: &str = "tappable";
pub const NOT_TAPPABLE: &str = "not tappable";

const COMPREHENSIVE_ASSET: &str = include_str!("../data/prompts/comprehensive_description.txt");
const PERCEPTION_ASSET: &str = include_str!("../data/prompts/perception_qa.txt");
const INTERACTION_ASSET: &str = include_str!("../data/prompts/interaction_qa.txt");
pub(crate) const SCORING_ASSET: &str = include_str!("../data/prompts/scoring.txt");

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BalancePolicy {
    pub advanced_tasks_per_record: BTreeMap<Platform, u32>,
    pub loss_weight: BTreeMap<Platform, f64>,
}

impl Default for BalancePolicy {
    fn default() -> Self {
        let advanced_tasks_per_record = Platform::ALL
            .iter()
            .map(|&p| (p, if matches!(p, Platform::IPad | Platform::AppleTV) { 3 } else { 1 }))
            .collect();
        BalancePolicy { advanced_tasks_per_record, loss_weight: crate::schema::default_loss_weights() }
    }
}

impl BalancePolicy {
    pub fn tasks_for(&self, platform: Platform) -> u32 {
        self.advanced_tasks_per_record.get(&platform).copied().unwrap_or(1).min(3)
    }

    /// Parses overrides such as `iPad=3,Web=2`.
    pub fn apply_overrides(&mut self, spec: &str) -> Result<(), String> {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (p, n) = part.split_once('=').ok_or_else(|| format!("expected platform=count, got {part:?}"))?;
            let platform: Platform = p.trim().parse().map_err(|e| format!("{e}"))?;
            let n: u32 = n.trim().parse().map_err(|_| format!("bad count in {part:?}"))?;
            if !(1..=3).contains(&n) {
                return Err(format!("advanced tasks per record must be 1..=3, got {n}"));
            }
            self.advanced_tasks_per_record.insert(platform, n);
        }
        Ok(())
    }

    /// Advanced kinds for the `position`-th record of its platform. Single
    /// kinds rotate round-robin, offset by the seed.
    pub fn kinds_for(&self, platform: Platform, position: usize, seed: u64) -> Vec<TaskKind> {
        let n = self.tasks_for(platform) as usize;
        let start = (position as u64).wrapping_add(seed) % 3;
        (0..n).map(|j| TaskKind::ADVANCED[(start as usize + j) % 3]).collect()
    }
}

/// Which unified labels are tappable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TappabilityTable(BTreeMap<UnifiedLabel, bool>);

impl Default for TappabilityTable {
    fn default() -> Self {
        use UnifiedLabel::*;
        Self::with_not_tappable(&[Text, Picture, Container, Dialog, PageControl, TabBar])
    }
}

impl TappabilityTable {
    pub fn with_not_tappable(labels: &[UnifiedLabel]) -> Self {
        TappabilityTable(UnifiedLabel::ALL.iter().map(|&l| (l, !labels.contains(&l))).collect())
    }

    pub fn is_tappable(&self, label: UnifiedLabel) -> bool {
        self.0.get(&label).copied().unwrap_or(true)
    }

    pub fn answer(&self, label: UnifiedLabel) -> &'static str {
        if self.is_tappable(label) {
            TAPPABLE
        } else {
            NOT_TAPPABLE
        }
    }
}

#[derive(Clone, Debug)]
pub struct ElementaryOptions {
    pub seed: u64,
    pub per_task_cap: usize,
    pub listing_cap: usize,
    pub tappability: TappabilityTable,
}

impl Default for ElementaryOptions {
    fn default() -> Self {
        ElementaryOptions {
            seed: 0,
            per_task_cap: DEFAULT_PER_TASK_CAP,
            listing_cap: DEFAULT_LISTING_CAP,
            tappability: TappabilityTable::default(),
        }
    }
}

/// Accumulates turn text while recording where box literals land.
#[derive(Debug, Default)]
struct TurnText {
    text: String,
    boxes: Vec<([usize; 2], BBox)>,
}

impl TurnText {
    fn push(&mut self, s: &str) -> &mut Self {
        self.text.push_str(s);
        self
    }

    fn push_box(&mut self, b: &BBox) -> &mut Self {
        let start = self.text.len();
        self.text.push_str(&b.literal());
        self.boxes.push(([start, self.text.len()], *b));
        self
    }
}

struct SampleBuilder {
    turns: Vec<Turn>,
    grounded: Vec<GroundedBox>,
}

impl SampleBuilder {
    fn new() -> Self {
        SampleBuilder { turns: Vec::new(), grounded: Vec::new() }
    }

    fn turn(mut self, role: Role, t: TurnText) -> Self {
        let idx = self.turns.len();
        self.grounded.extend(t.boxes.into_iter().map(|(span, bbox)| GroundedBox { turn: idx, span, bbox }));
        self.turns.push(Turn { role, text: t.text });
        self
    }

    fn finish(self, record: &ScreenRecord, task: TaskKind, n: usize) -> TaskSample {
        TaskSample {
            id: format!("{}:{}:{n}", record.id, task.as_str()),
            screen_id: record.id.clone(),
            platform: record.platform,
            task,
            turns: self.turns,
            grounded_boxes: self.grounded,
        }
    }
}

fn plain(s: impl Into<String>) -> TurnText {
    TurnText { text: s.into(), boxes: Vec::new() }
}

fn record_rng(record: &ScreenRecord, task: TaskKind, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(record.id.as_bytes());
    h.update(task.as_str().as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Up to `cap` of `candidates`, chosen at random and returned in their
/// original order.
fn pick(candidates: Vec<usize>, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if candidates.len() <= cap {
        return candidates;
    }
    let mut chosen: Vec<usize> = sample(rng, candidates.len(), cap).into_iter().collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| candidates[i]).collect()
}

fn text_of(record: &ScreenRecord, i: usize) -> Option<&str> {
    record.widgets[i].text.as_deref().filter(|t| !t.trim().is_empty())
}

pub fn gen_ocr(record: &ScreenRecord, opts: &ElementaryOptions) -> Vec<TaskSample> {
    let candidates = (0..record.widgets.len())
        .filter(|&i| record.widgets[i].label == Some(UnifiedLabel::Text) && text_of(record, i).is_some())
        .collect();
    let mut rng = record_rng(record, TaskKind::Ocr, opts.seed);
    pick(candidates, opts.per_task_cap, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(n, i)| {
            let w = &record.widgets[i];
            let mut q = TurnText::default();
            q.push("What is the text in the region ").push_box(&w.bbox).push("?");
            SampleBuilder::new()
                .turn(Role::User, q)
                .turn(Role::Assistant, plain(text_of(record, i).unwrap_or_default()))
                .finish(record, TaskKind::Ocr, n)
        })
        .collect()
}

pub fn gen_widget_classify(record: &ScreenRecord, opts: &ElementaryOptions) -> Vec<TaskSample> {
    let candidates = (0..record.widgets.len()).filter(|&i| record.widgets[i].label.is_some()).collect();
    let mut rng = record_rng(record, TaskKind::WidgetClassify, opts.seed);
    pick(candidates, opts.per_task_cap, &mut rng)
        .into_iter()
        .enumerate()
        .filter_map(|(n, i)| {
            let w = &record.widgets[i];
            let label = w.label?;
            let mut q = TurnText::default();
            q.push("What type of widget is in the region ").push_box(&w.bbox).push("?");
            Some(
                SampleBuilder::new()
                    .turn(Role::User, q)
                    .turn(Role::Assistant, plain(label.as_str()))
                    .finish(record, TaskKind::WidgetClassify, n),
            )
        })
        .collect()
}

pub fn gen_tapperability(record: &ScreenRecord, opts: &ElementaryOptions) -> Vec<TaskSample> {
    if record.platform == Platform::AppleTV {
        tracing::debug!(screen = %record.id, "no tapperability samples for AppleTV screens");
        return Vec::new();
    }
    let candidates = (0..record.widgets.len()).filter(|&i| record.widgets[i].label.is_some()).collect();
    let mut rng = record_rng(record, TaskKind::Tapperability, opts.seed);
    pick(candidates, opts.per_task_cap, &mut rng)
        .into_iter()
        .enumerate()
        .filter_map(|(n, i)| {
            let w = &record.widgets[i];
            let label = w.label?;
            let mut q = TurnText::default();
            q.push("Is the widget in the region ").push_box(&w.bbox).push(" tappable?");
            Some(
                SampleBuilder::new()
                    .turn(Role::User, q)
                    .turn(Role::Assistant, plain(opts.tappability.answer(label)))
                    .finish(record, TaskKind::Tapperability, n),
            )
        })
        .collect()
}

/// One listing line per widget: `Label "text" [x1, y1, x2, y2]`, text only
/// when present.
pub fn gen_widget_listing(record: &ScreenRecord, cap: usize) -> Option<TaskSample> {
    if record.widgets.is_empty() || cap == 0 {
        return None;
    }
    let mut a = TurnText::default();
    for (k, w) in record.widgets.iter().take(cap).enumerate() {
        if k > 0 {
            a.push("\n");
        }
        a.push(w.label.map_or("Widget", UnifiedLabel::as_str)).push(" ");
        if let Some(t) = w.text.as_deref().filter(|t| !t.trim().is_empty()) {
            a.push(&format!("{:?} ", t));
        }
        a.push_box(&w.bbox);
    }
    Some(
        SampleBuilder::new()
            .turn(Role::User, plain("List all the widgets on the screen."))
            .turn(Role::Assistant, a)
            .finish(record, TaskKind::WidgetListing, 0),
    )
}

fn unique_indices<K: std::hash::Hash + Eq>(keys: Vec<Option<K>>) -> Vec<usize> {
    let mut counts: HashMap<&K, usize> = HashMap::new();
    for k in keys.iter().flatten() {
        *counts.entry(k).or_default() += 1;
    }
    keys.iter()
        .enumerate()
        .filter_map(|(i, k)| k.as_ref().filter(|k| counts[k] == 1).map(|_| i))
        .collect()
}

pub fn gen_find_text(record: &ScreenRecord, opts: &ElementaryOptions) -> Vec<TaskSample> {
    // Uniqueness is judged over every widget's text, not only Text widgets.
    let keys: Vec<Option<&str>> = (0..record.widgets.len()).map(|i| text_of(record, i)).collect();
    let candidates = unique_indices(keys)
        .into_iter()
        .filter(|&i| record.widgets[i].label == Some(UnifiedLabel::Text))
        .collect();
    let mut rng = record_rng(record, TaskKind::FindText, opts.seed);
    pick(candidates, opts.per_task_cap, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(n, i)| {
            let w = &record.widgets[i];
            let mut a = TurnText::default();
            a.push_box(&w.bbox);
            SampleBuilder::new()
                .turn(Role::User, plain(format!("Where is the text {:?}?", text_of(record, i).unwrap_or_default())))
                .turn(Role::Assistant, a)
                .finish(record, TaskKind::FindText, n)
        })
        .collect()
}

/// `Button "Login"`, or just `Button` for widgets without text.
pub fn widget_description(record: &ScreenRecord, i: usize) -> Option<String> {
    let label = record.widgets[i].label?;
    Some(match text_of(record, i) {
        Some(t) => format!("{} {:?}", label.as_str(), t),
        None => label.as_str().to_string(),
    })
}

pub fn gen_find_widget(record: &ScreenRecord, opts: &ElementaryOptions) -> Vec<TaskSample> {
    let keys: Vec<Option<String>> = (0..record.widgets.len()).map(|i| widget_description(record, i)).collect();
    let candidates = unique_indices(keys.clone());
    let mut rng = record_rng(record, TaskKind::FindWidget, opts.seed);
    pick(candidates, opts.per_task_cap, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(n, i)| {
            let w = &record.widgets[i];
            let desc = keys[i].as_deref().unwrap_or_default();
            let mut a = TurnText::default();
            a.push_box(&w.bbox);
            SampleBuilder::new()
                .turn(Role::User, plain(format!("Find the {desc}.")))
                .turn(Role::Assistant, a)
                .finish(record, TaskKind::FindWidget, n)
        })
        .collect()
}

/// All six elementary tasks for one record, in task order.
pub fn gen_elementary_record(record: &ScreenRecord, opts: &ElementaryOptions) -> Vec<TaskSample> {
    let mut out = gen_ocr(record, opts);
    out.extend(gen_widget_classify(record, opts));
    out.extend(gen_tapperability(record, opts));
    out.extend(gen_widget_listing(record, opts.listing_cap));
    out.extend(gen_find_text(record, opts));
    out.extend(gen_find_widget(record, opts));
    out
}

/// Elementary tasks for every record, in record order.
pub fn gen_elementary(records: &[ScreenRecord], opts: &ElementaryOptions) -> Vec<TaskSample> {
    records.par_iter().map(|r| gen_elementary_record(r, opts)).collect::<Vec<_>>().into_iter().flatten().collect()
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("prompt asset {name}: {message}")]
    Malformed { name: String, message: String },
    #[error("prompt {name}: slot {{{slot}}} left unfilled")]
    Unfilled { name: String, slot: String },
}

/// A versioned prompt asset with `[system]`, `[user]`, and optional
/// `[requirements]` and `[question]` sections.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub version: u32,
    pub system: String,
    pub user: String,
    pub requirements: String,
    /// Fixed user question for single-turn kinds.
    pub question: Option<String>,
}

fn slot_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("valid regex"))
}

impl PromptTemplate {
    pub fn parse(name: &str, text: &str) -> Result<Self, TemplateError> {
        let bad = |message: String| TemplateError::Malformed { name: name.into(), message };
        let mut lines = text.lines();
        let version = lines
            .next()
            .and_then(|l| l.strip_prefix("version:"))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad("first line must be `version: N`".into()))?;
        let mut sections: BTreeMap<String, Vec<&str>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for line in lines {
            if let Some(sec) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if !sec.contains(' ') && !sec.is_empty() {
                    current = Some(sec.to_string());
                    sections.entry(sec.to_string()).or_default();
                    continue;
                }
            }
            match &current {
                Some(sec) => sections.get_mut(sec).expect("section exists").push(line),
                None if line.trim().is_empty() => {}
                None => return Err(bad(format!("text before first section: {line:?}"))),
            }
        }
        let mut take = |k: &str| sections.remove(k).map(|v| v.join("\n").trim().to_string());
        let system = take("system").ok_or_else(|| bad("missing [system]".into()))?;
        let user = take("user").ok_or_else(|| bad("missing [user]".into()))?;
        let requirements = take("requirements").unwrap_or_default();
        let question = take("question");
        if let Some(extra) = sections.keys().next() {
            return Err(bad(format!("unknown section [{extra}]")));
        }
        Ok(PromptTemplate { name: name.into(), version, system, user, requirements, question })
    }

    pub fn builtin(kind: TaskKind) -> Option<Self> {
        let asset = match kind {
            TaskKind::ComprehensiveDescription => COMPREHENSIVE_ASSET,
            TaskKind::PerceptionQa => PERCEPTION_ASSET,
            TaskKind::InteractionQa => INTERACTION_ASSET,
            _ => return None,
        };
        Some(Self::parse(kind.as_str(), asset).expect("builtin prompt assets parse"))
    }

    /// Fills `{slot}`s in the user text. `{requirements}` is filled from the
    /// asset's own block. Every slot must be filled.
    pub fn render(&self, slots: &[(&str, &str)]) -> Result<(String, String), TemplateError> {
        let mut values: BTreeMap<&str, &str> = slots.iter().copied().collect();
        values.entry("requirements").or_insert(&self.requirements);
        let mut missing = None;
        let user = slot_re().replace_all(&self.user, |c: &regex::Captures| match values.get(&c[1]) {
            Some(v) => v.to_string(),
            None => {
                missing.get_or_insert_with(|| c[1].to_string());
                c[0].to_string()
            }
        });
        if let Some(slot) = missing {
            return Err(TemplateError::Unfilled { name: self.name.clone(), slot });
        }
        Ok((self.system.clone(), user.into_owned()))
    }
}

#[derive(Clone, Debug)]
pub struct PromptSet(BTreeMap<TaskKind, PromptTemplate>);

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet(TaskKind::ADVANCED.iter().map(|&k| (k, PromptTemplate::builtin(k).expect("advanced kind"))).collect())
    }
}

impl PromptSet {
    pub fn get(&self, kind: TaskKind) -> Option<&PromptTemplate> {
        self.0.get(&kind)
    }

    pub fn insert(&mut self, kind: TaskKind, t: PromptTemplate) {
        self.0.insert(kind, t);
    }
}

/// Widget list shown to the model. Tags follow the SoM index; the plain
/// screenshot variant also carries coordinates since no marks are drawn.
pub fn widget_lines(record: &ScreenRecord, index: &SomIndex, with_boxes: bool) -> String {
    index
        .tags
        .iter()
        .enumerate()
        .map(|(tag, &wi)| {
            let w = &record.widgets[wi];
            let mut line = format!("[Box {tag}] {}", w.label.map_or("Widget", UnifiedLabel::as_str));
            if let Some(t) = w.text.as_deref().filter(|t| !t.trim().is_empty()) {
                line.push_str(&format!(" {t:?}"));
            }
            if with_boxes {
                line.push_str(" at ");
                line.push_str(&w.bbox.literal());
            }
            line
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Chat request for one advanced sample. The perception and interaction
/// kinds get the SoM raster; the description kind gets the plain screenshot.
pub fn build_advanced_request(
    record: &ScreenRecord,
    kind: TaskKind,
    screenshot_png: &[u8],
    som_png: &[u8],
    index: &SomIndex,
    prompts: &PromptSet,
) -> Result<ChatRequest, TemplateError> {
    let template = prompts.get(kind).ok_or_else(|| TemplateError::Malformed {
        name: kind.as_str().into(),
        message: "no prompt for this task kind".into(),
    })?;
    let plain_shot = kind == TaskKind::ComprehensiveDescription;
    let widgets = widget_lines(record, index, plain_shot);
    let (system, user) = template.render(&[("platform", record.platform.as_str()), ("widgets", &widgets)])?;
    let mut req = ChatRequest::new(system, user);
    let (name, png) = if plain_shot { ("screenshot", screenshot_png) } else { ("som", som_png) };
    req.images.push(ImageRef { name: name.into(), png: png.to_vec() });
    Ok(req)
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[Box\s*(\d+)((?:\s*,\s*Box\s*\d+)*)\]").expect("valid regex"))
}

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+").expect("valid regex"))
}

/// Replaces every marker in `text` with ground-truth literals. Any `[Box`
/// that does not form a well-formed marker, and any unknown tag, rejects.
pub fn substitute_markers(text: &str, record: &ScreenRecord, index: &SomIndex) -> Result<TurnTextOut, String> {
    let mut out = TurnText::default();
    let mut last = 0;
    for m in marker_re().find_iter(text) {
        let between = &text[last..m.start()];
        if between.contains("[Box") {
            return Err(format!("malformed marker near {:?}", excerpt(between)));
        }
        out.push(between);
        let mut boxes = Vec::new();
        for t in tag_re().find_iter(m.as_str()) {
            let tag: usize = t.as_str().parse().map_err(|_| format!("tag {} out of range", t.as_str()))?;
            let wi = index.widget_for(tag).ok_or_else(|| format!("unknown tag {tag}"))?;
            let w = record.widgets.get(wi).ok_or_else(|| format!("tag {tag} points past the widget list"))?;
            boxes.push(w.bbox);
        }
        if let [b] = boxes[..] {
            out.push_box(&b);
        } else {
            out.push("[");
            for (k, b) in boxes.iter().enumerate() {
                if k > 0 {
                    out.push(", ");
                }
                out.push_box(b);
            }
            out.push("]");
        }
        last = m.end();
    }
    let rest = &text[last..];
    if rest.contains("[Box") {
        return Err(format!("malformed marker near {:?}", excerpt(rest)));
    }
    out.push(rest);
    Ok(TurnTextOut(out))
}

/// Turn text with its grounded literals, produced by marker substitution.
#[derive(Debug)]
pub struct TurnTextOut(TurnText);

impl TurnTextOut {
    pub fn text(&self) -> &str {
        &self.0.text
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.0.boxes.iter().map(|(_, b)| *b).collect()
    }
}

fn excerpt(s: &str) -> String {
    let start = s.find("[Box").unwrap_or(0);
    s[start..].chars().take(24).collect()
}

/// Splits `Q:` / `A:` lines into alternating turns. Lines without a prefix
/// continue the current turn.
pub fn parse_qa(response: &str) -> Result<Vec<(Role, String)>, String> {
    let mut turns: Vec<(Role, String)> = Vec::new();
    for line in response.lines() {
        let trimmed = line.trim();
        let (role, body) = if let Some(b) = trimmed.strip_prefix("Q:") {
            (Some(Role::User), b)
        } else if let Some(b) = trimmed.strip_prefix("A:") {
            (Some(Role::Assistant), b)
        } else {
            (None, trimmed)
        };
        match (role, turns.last_mut()) {
            (Some(r), _) => turns.push((r, body.trim().to_string())),
            (None, Some((_, text))) if !body.is_empty() => {
                text.push('\n');
                text.push_str(body);
            }
            (None, None) if !body.is_empty() => return Err("text before the first Q: line".into()),
            _ => {}
        }
    }
    if turns.is_empty() {
        return Err("no Q:/A: rounds in response".into());
    }
    for (i, (role, text)) in turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if *role != expected {
            return Err(format!("round structure broken at turn {i}"));
        }
        if text.is_empty() {
            return Err(format!("turn {i} is empty"));
        }
    }
    if turns.len() % 2 != 0 {
        return Err("last question has no answer".into());
    }
    Ok(turns)
}

#[derive(Debug, thiserror::Error)]
pub enum AdvancedError {
    #[error(transparent)]
    Client(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("image for screen {screen}: {message}")]
    Image { screen: String, message: String },
}

/// Why a model response did not become a sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub screen_id: String,
    pub task: TaskKind,
    pub reason: String,
}

/// Turns a model response into a sample, or a rejection reason.
pub fn sample_from_response(
    record: &ScreenRecord,
    kind: TaskKind,
    response: &str,
    index: &SomIndex,
    prompts: &PromptSet,
    n: usize,
) -> Result<TaskSample, String> {
    let raw_turns = if kind == TaskKind::ComprehensiveDescription {
        let question = prompts
            .get(kind)
            .and_then(|t| t.question.clone())
            .unwrap_or_else(|| "Describe this screen in detail.".into());
        let body = response.trim();
        if body.is_empty() {
            return Err("empty response".into());
        }
        vec![(Role::User, question), (Role::Assistant, body.to_string())]
    } else {
        parse_qa(response)?
    };
    let mut b = SampleBuilder::new();
    for (role, text) in raw_turns {
        b = b.turn(role, substitute_markers(&text, record, index)?.0);
    }
    Ok(b.finish(record, kind, n))
}

/// One advanced job: a record, its kind, and the images the prompt needs.
pub struct AdvancedJob<'a> {
    pub record: &'a ScreenRecord,
    pub kind: TaskKind,
    pub screenshot_png: Vec<u8>,
    pub som_png: Vec<u8>,
    pub index: SomIndex,
}

pub fn gen_advanced(
    job: &AdvancedJob<'_>,
    client: &LlmClient,
    prompts: &PromptSet,
) -> Result<Result<TaskSample, Rejection>, AdvancedError> {
    let req = build_advanced_request(job.record, job.kind, &job.screenshot_png, &job.som_png, &job.index, prompts)?;
    let response = client.chat(&req)?;
    Ok(sample_from_response(job.record, job.kind, &response, &job.index, prompts, 0).map_err(|reason| Rejection {
        screen_id: job.record.id.clone(),
        task: job.kind,
        reason,
    }))
}

/// Pairs each record with its advanced kinds under `policy`. The position
/// used for round-robin is the record's rank among its platform's records.
pub fn assign_advanced(records: &[ScreenRecord], policy: &BalancePolicy, seed: u64) -> Vec<(usize, TaskKind)> {
    let mut seen: BTreeMap<Platform, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let pos = seen.entry(r.platform).or_default();
        out.extend(policy.kinds_for(r.platform, *pos, seed).into_iter().map(|k| (i, k)));
        *pos += 1;
    }
    out
}

#[derive(Debug, Default, Serialize)]
pub struct AdvancedReport {
    pub requested: usize,
    pub generated: usize,
    pub rejected: Vec<Rejection>,
    pub per_platform: BTreeMap<Platform, usize>,
}

/// Runs every job in parallel; results come back in job order. The first
/// client or template error aborts the batch.
pub fn gen_advanced_batch(
    jobs: &[AdvancedJob<'_>],
    client: &LlmClient,
    prompts: &PromptSet,
) -> Result<(Vec<TaskSample>, AdvancedReport), AdvancedError> {
    let results: Vec<_> = jobs.par_iter().map(|j| gen_advanced(j, client, prompts)).collect();
    let mut report = AdvancedReport { requested: jobs.len(), ..Default::default() };
    let mut samples = Vec::new();
    for r in results {
        match r? {
            Ok(s) => {
                *report.per_platform.entry(s.platform).or_default() += 1;
                samples.push(s);
            }
            Err(rej) => report.rejected.push(rej),
        }
    }
    report.generated = samples.len();
    Ok((samples, report))
}
