//! Per-sample scoring for elementary, advanced and next-action tasks.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use image::RgbImage;
use num_bigint::BigInt;
use num_rational::BigRational;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::matching::{iou, multi_iou};
use super::report::ScoreSheet;
use crate::llm::{ChatRequest, ImageRef, LlmClient, LlmError};
use crate::schema::{BBox, Role, ScreenRecord, TaskKind, TaskSample};
use crate::som::{encode_png, load_rgb, render_red_box, SomError};
use crate::taskgen::{PromptTemplate, SCORING_ASSET};

/// IoU needed for a grounding answer to count as correct.
pub const GROUNDING_THRESHOLD: (i64, i64) = (1, 2);
pub const RED_BOX_STROKE: u32 = 3;
/// Coordinates beyond this magnitude are not treated as box literals.
const MAX_COORD: i64 = 1 << 31;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub id: String,
    pub answer: String,
    pub boxes: Vec<BBox>,
}

impl Prediction {
    pub fn new(id: impl Into<String>, answer: impl Into<String>) -> Self {
        let answer = answer.into();
        Prediction { id: id.into(), boxes: extract_boxes(&answer), answer }
    }
}

fn literal_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\[\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*\]").expect("valid regex")
    })
}

/// Every `[x1, y1, x2, y2]` literal in `text`, left to right. Literals
/// nested in a list (`[[..], [..]]`) are found individually.
pub fn extract_boxes(text: &str) -> Vec<BBox> {
    literal_re()
        .captures_iter(text)
        .filter_map(|c| {
            let v: Vec<i64> = (1..=4).filter_map(|i| c[i].parse().ok()).collect();
            (v.len() == 4 && v.iter().all(|x| x.abs() <= MAX_COORD)).then(|| BBox::new(v[0], v[1], v[2], v[3]))
        })
        .collect()
}

fn literal_list_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let lit = r"\[\s*-?\d+\s*,\s*-?\d+\s*,\s*-?\d+\s*,\s*-?\d+\s*\]";
        Regex::new(&format!(r"\[\s*{lit}(?:\s*,\s*{lit})*\s*\]|{lit}")).expect("valid regex")
    })
}

/// `text` with every box literal and box list removed, normalized.
pub fn strip_boxes(text: &str) -> String {
    normalize(&literal_list_re().replace_all(text, " "))
}

/// Case-folded, whitespace-collapsed text.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Exact check of `iou(a, b) >= num/den`.
pub fn iou_at_least(a: &BBox, b: &BBox, (num, den): (i64, i64)) -> bool {
    let inter = i128::from(a.intersect(b).area());
    let union = i128::from(a.area()) + i128::from(b.area()) - inter;
    union > 0 && inter * i128::from(den) >= i128::from(num) * union
}

pub fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap_or_else(|| BigRational::from_integer(BigInt::from(0)))
}

fn one() -> BigRational {
    BigRational::from_integer(BigInt::from(1))
}

fn zero() -> BigRational {
    BigRational::from_integer(BigInt::from(0))
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("sample {id} refers to unknown screen {screen}")]
    UnknownScreen { id: String, screen: String },
    #[error(transparent)]
    Image(#[from] SomError),
    #[error(transparent)]
    Client(#[from] LlmError),
}

/// Reads line-delimited JSON, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Predictions keyed by sample id; a repeated id keeps its first answer.
#[derive(Clone, Debug, Default)]
pub struct PredictionSet {
    by_id: HashMap<String, Prediction>,
    pub duplicates: usize,
}

impl PredictionSet {
    pub fn from_lines(lines: Vec<PredictionLine>) -> Self {
        let mut set = PredictionSet::default();
        for l in lines {
            if set.by_id.contains_key(&l.id) {
                set.duplicates += 1;
                continue;
            }
            set.by_id.insert(l.id.clone(), Prediction::new(l.id, l.answer));
        }
        set
    }

    pub fn get(&self, id: &str) -> Option<&Prediction> {
        self.by_id.get(id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Ids not present in `known`.
    pub fn unmatched<'a>(&'a self, known: &'a std::collections::HashSet<&str>) -> usize {
        self.by_id.keys().filter(|k| !known.contains(k.as_str())).count()
    }
}

/// Reference answer of a sample as a model would ideally produce it.
pub fn self_prediction(sample: &TaskSample) -> PredictionLine {
    PredictionLine { id: sample.id.clone(), answer: sample.joined(Role::Assistant) }
}

/// Score of one elementary sample in `[0, 1]`.
pub fn score_elementary_one(sample: &TaskSample, pred: &Prediction) -> BigRational {
    let gt = sample.joined(Role::Assistant);
    let hit = |b: bool| if b { one() } else { zero() };
    match sample.task {
        TaskKind::Ocr | TaskKind::WidgetClassify | TaskKind::Tapperability => hit(normalize(&pred.answer) == normalize(&gt)),
        TaskKind::FindText | TaskKind::FindWidget => {
            let target = sample.answer_boxes();
            match (pred.boxes.first(), target.first()) {
                (Some(p), Some(t)) => hit(iou_at_least(p, t, GROUNDING_THRESHOLD)),
                _ => zero(),
            }
        }
        TaskKind::WidgetListing => rational(multi_iou(&pred.boxes, &sample.answer_boxes())),
        _ => zero(),
    }
}

/// Scores every elementary sample. Samples without a prediction score 0
/// and are counted as missing.
pub fn score_elementary(samples: &[TaskSample], preds: &PredictionSet) -> ScoreSheet {
    let scored: Vec<_> = samples
        .par_iter()
        .filter(|s| !s.task.is_advanced())
        .map(|s| (s.task, s.platform, preds.get(&s.id).map(|p| score_elementary_one(s, p))))
        .collect();
    let mut sheet = ScoreSheet::default();
    for (task, platform, score) in scored {
        match score {
            Some(v) => sheet.push(task, platform, v),
            None => {
                sheet.missing_predictions += 1;
                sheet.push(task, platform, zero());
            }
        }
    }
    sheet
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvancedScore {
    /// `None` when no parseable score came back after one retry.
    pub score: Option<u32>,
    pub multi_iou: f64,
}

fn score_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)score\s*[:=]\s*(\d{1,3})\b").expect("valid regex"))
}

/// First `Score: N` with `N <= 100`.
pub fn parse_score(text: &str) -> Option<u32> {
    score_re().captures_iter(text).filter_map(|c| c[1].parse().ok()).find(|&n| n <= 100)
}

pub fn scoring_template() -> PromptTemplate {
    PromptTemplate::parse("scoring", SCORING_ASSET).expect("builtin scoring prompt parses")
}

/// Grading request: the screenshot with every referred box outlined in red,
/// plus question, reference and prediction.
pub fn build_scoring_request(
    sample: &TaskSample,
    pred: &Prediction,
    screenshot: &RgbImage,
    template: &PromptTemplate,
) -> Result<ChatRequest, EvalError> {
    let referred = sample.question_boxes();
    let mut img = screenshot.clone();
    for b in &referred {
        img = render_red_box(&img, b, RED_BOX_STROKE)?;
    }
    let focus = if referred.is_empty() {
        ""
    } else {
        "The widgets referred to in the question are outlined in red."
    };
    let question = sample.joined(Role::User);
    let reference = sample.joined(Role::Assistant);
    let (system, user) = template
        .render(&[("focus", focus), ("question", &question), ("reference", &reference), ("prediction", &pred.answer)])
        .map_err(|e| EvalError::Parse { path: template.name.clone(), line: 0, message: e.to_string() })?;
    let mut req = ChatRequest::new(system, user);
    req.images.push(ImageRef { name: "screenshot".into(), png: encode_png(&img) });
    Ok(req)
}

pub fn score_advanced(
    sample: &TaskSample,
    pred: &Prediction,
    screenshot: &RgbImage,
    client: &LlmClient,
    template: &PromptTemplate,
) -> Result<AdvancedScore, EvalError> {
    let req = build_scoring_request(sample, pred, screenshot, template)?;
    let mut score = parse_score(&client.chat(&req)?);
    if score.is_none() {
        let mut retry = req.clone();
        retry.user.push_str("\n\nStart your reply with \"Score: N\". (retry 1)");
        score = parse_score(&client.chat(&retry)?);
    }
    Ok(AdvancedScore { score, multi_iou: multi_iou(&pred.boxes, &sample.answer_boxes()) })
}

/// Scores every advanced sample against its screen's image. Missing
/// predictions score 0 on both metrics.
pub fn score_advanced_batch(
    samples: &[TaskSample],
    preds: &PredictionSet,
    screens: &BTreeMap<String, ScreenRecord>,
    client: &LlmClient,
) -> Result<ScoreSheet, EvalError> {
    let template = scoring_template();
    let advanced: Vec<&TaskSample> = samples.iter().filter(|s| s.task.is_advanced()).collect();
    let results: Vec<Result<Option<AdvancedScore>, EvalError>> = advanced
        .par_iter()
        .map(|s| {
            let Some(pred) = preds.get(&s.id) else { return Ok(None) };
            let rec = screens
                .get(&s.screen_id)
                .ok_or_else(|| EvalError::UnknownScreen { id: s.id.clone(), screen: s.screen_id.clone() })?;
            let img = load_rgb(Path::new(&rec.image_path))?;
            score_advanced(s, pred, &img, client, &template).map(Some)
        })
        .collect();
    let mut sheet = ScoreSheet::default();
    for (s, r) in advanced.iter().zip(results) {
        match r? {
            Some(a) => {
                match a.score {
                    Some(n) => sheet.push(s.task, s.platform, BigRational::from_integer(BigInt::from(n))),
                    None => sheet.invalid_scores += 1,
                }
                sheet.push_multi_iou(s.task, s.platform, rational(a.multi_iou));
            }
            None => {
                sheet.missing_predictions += 1;
                sheet.push(s.task, s.platform, zero());
                sheet.push_multi_iou(s.task, s.platform, zero());
            }
        }
    }
    Ok(sheet)
}

/// A next-action sample: reference action text and its target box.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuideSample {
    pub id: String,
    pub action: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Text similarity in `[0, 1]`.
pub trait TextSimilarity: Sync {
    fn score(&self, prediction: &str, reference: &str) -> f64;
}

/// 1 when the normalized texts are equal, else 0.
pub struct ExactMatch;

impl TextSimilarity for ExactMatch {
    fn score(&self, prediction: &str, reference: &str) -> f64 {
        if normalize(prediction) == normalize(reference) {
            1.0
        } else {
            0.0
        }
    }
}

/// Harmonic mean of token precision and recall over normalized tokens.
pub struct TokenF1;

impl TextSimilarity for TokenF1 {
    fn score(&self, prediction: &str, reference: &str) -> f64 {
        let (p, r) = (normalize(prediction), normalize(reference));
        let (pt, rt): (Vec<&str>, Vec<&str>) = (p.split(' ').filter(|t| !t.is_empty()).collect(), r.split(' ').filter(|t| !t.is_empty()).collect());
        if pt.is_empty() && rt.is_empty() {
            return 1.0;
        }
        let mut counts: HashMap<&str, i64> = HashMap::new();
        for t in &rt {
            *counts.entry(t).or_default() += 1;
        }
        let mut overlap = 0usize;
        for t in &pt {
            if let Some(c) = counts.get_mut(t) {
                if *c > 0 {
                    *c -= 1;
                    overlap += 1;
                }
            }
        }
        if overlap == 0 {
            return 0.0;
        }
        let precision = overlap as f64 / pt.len() as f64;
        let recall = overlap as f64 / rt.len() as f64;
        2.0 * precision * recall / (precision + recall)
    }
}

/// Similarity of the prediction's text (box literals removed) to the
/// reference action, and IoU of its first box with the target.
pub fn score_guide(samples: &[GuideSample], preds: &PredictionSet, similarity: &dyn TextSimilarity) -> ScoreSheet {
    let mut sheet = ScoreSheet::default();
    for s in samples {
        match preds.get(&s.id) {
            Some(p) => {
                let sim = similarity.score(&strip_boxes(&p.answer), &s.action).clamp(0.0, 1.0);
                let overlap = p.boxes.first().map_or(0.0, |b| iou(b, &s.bbox));
                sheet.guide_similarity.push(rational(sim));
                sheet.guide_iou.push(rational(overlap));
            }
            None => {
                sheet.missing_predictions += 1;
                sheet.guide_similarity.push(zero());
                sheet.guide_iou.push(zero());
            }
        }
    }
    sheet
}

/// The answer a perfect next-action model would give.
pub fn guide_self_prediction(s: &GuideSample) -> PredictionLine {
    PredictionLine { id: s.id.clone(), answer: format!("{} {}", s.action, s.bbox.literal()) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockTable;
    use crate::schema::{GroundedBox, Platform, Turn};
    use image::Rgb;

    fn sample(task: TaskKind, q: &str, a: &str) -> TaskSample {
        let mut grounded = Vec::new();
        for (turn, text) in [(0usize, q), (1, a)] {
            for m in literal_re().find_iter(text) {
                grounded.push(GroundedBox {
                    turn,
                    span: [m.start(), m.end()],
                    bbox: extract_boxes(m.as_str())[0],
                });
            }
        }
        TaskSample {
            id: format!("{}-x", task.as_str()),
            screen_id: "s".into(),
            platform: Platform::IPhone,
            task,
            turns: vec![Turn::user(q), Turn::assistant(a)],
            grounded_boxes: grounded,
        }
    }

    #[test]
    fn literal_grammar() {
        assert_eq!(
            extract_boxes("tap [1, 2, 3, 4] then [[5,6,7,8], [ -1 , 0 , 2 , 3 ]]"),
            [BBox::new(1, 2, 3, 4), BBox::new(5, 6, 7, 8), BBox::new(-1, 0, 2, 3)]
        );
        assert!(extract_boxes("[1, 2, 3]").is_empty());
        assert!(extract_boxes("[99999999999, 0, 1, 1]").is_empty());
        assert_eq!(strip_boxes("Tap [[1, 2, 3, 4], [5, 6, 7, 8]] now [0,0,1,1]"), "tap now");
    }

    #[test]
    fn normalization_for_ocr() {
        let s = sample(TaskKind::Ocr, "What is the text in [0, 0, 5, 5]?", "Sign  In");
        assert_eq!(score_elementary_one(&s, &Prediction::new("x", " sign in ")), one());
        assert_eq!(score_elementary_one(&s, &Prediction::new("x", "sign-in")), zero());
    }

    #[test]
    fn grounding_threshold_is_exact() {
        let s = sample(TaskKind::FindText, "Where?", "[0, 0, 100, 10]");
        // IoU 1/3.
        assert_eq!(score_elementary_one(&s, &Prediction::new("x", "[50, 0, 150, 10]")), zero());
        // Exactly 0.5.
        assert_eq!(score_elementary_one(&s, &Prediction::new("x", "[0, 0, 50, 10]")), one());
        // IoU 0.49.
        let s = sample(TaskKind::FindWidget, "Find", "[0, 0, 100, 1]");
        assert_eq!(score_elementary_one(&s, &Prediction::new("x", "[0, 0, 49, 1]")), zero());
        assert_eq!(score_elementary_one(&s, &Prediction::new("x", "nowhere")), zero());
    }

    #[test]
    fn seven_of_ten() {
        let samples: Vec<TaskSample> = (0..10)
            .map(|i| {
                let mut s = sample(TaskKind::WidgetClassify, "What is [0, 0, 5, 5]?", "Button");
                s.id = format!("c{i}");
                s
            })
            .collect();
        let preds = PredictionSet::from_lines(
            (0..10).map(|i| PredictionLine { id: format!("c{i}"), answer: if i < 7 { "Button" } else { "Icon" }.into() }).collect(),
        );
        let report = score_elementary(&samples, &preds).report();
        assert_eq!(report.cell(TaskKind::WidgetClassify, Platform::IPhone).unwrap().value, 0.7);
    }

    #[test]
    fn advanced_parse_and_retry() {
        let s = sample(TaskKind::PerceptionQa, "What is [1, 1, 5, 5]?", "A button at [1, 1, 5, 5].");
        let img = RgbImage::from_pixel(10, 10, Rgb([255, 255, 255]));
        let t = scoring_template();
        let client = LlmClient::mock(MockTable::with_fallback("Score: 85\nclose"));
        let pred = Prediction::new("x", "no boxes here");
        let r = score_advanced(&s, &pred, &img, &client, &t).unwrap();
        assert_eq!(r, AdvancedScore { score: Some(85), multi_iou: 0.0 });

        let garbled = LlmClient::mock(MockTable::with_fallback("I cannot grade this"));
        assert_eq!(score_advanced(&s, &pred, &img, &garbled, &t).unwrap().score, None);

        // The retry has its own request hash.
        let req = build_scoring_request(&s, &pred, &img, &t).unwrap();
        let mut table = MockTable::default();
        table.insert(&req, "hmm");
        let mut retry = req.clone();
        retry.user.push_str("\n\nStart your reply with \"Score: N\". (retry 1)");
        table.insert(&retry, "Score: 40");
        assert_eq!(score_advanced(&s, &pred, &img, &LlmClient::mock(table), &t).unwrap().score, Some(40));
    }

    #[test]
    fn red_box_is_in_scoring_image() {
        let s = sample(TaskKind::PerceptionQa, "What is [2, 2, 8, 8]?", "x");
        let img = RgbImage::from_pixel(10, 10, Rgb([255, 255, 255]));
        let req = build_scoring_request(&s, &Prediction::new("x", "y"), &img, &scoring_template()).unwrap();
        let decoded = image::load_from_memory(&req.images[0].png).unwrap().to_rgb8();
        assert_eq!(*decoded.get_pixel(2, 2), crate::som::RED);
        assert!(req.user.contains("outlined in red"));
    }

    #[test]
    fn guide_means() {
        let samples: Vec<GuideSample> = (0..4)
            .map(|i| GuideSample { id: format!("g{i}"), action: "click search".into(), bbox: BBox::new(0, 0, 10, 10) })
            .collect();
        let preds = PredictionSet::from_lines(vec![
            PredictionLine { id: "g0".into(), answer: "click search [0, 0, 10, 10]".into() },
            PredictionLine { id: "g1".into(), answer: "click search [0, 0, 5, 10]".into() },
            PredictionLine { id: "g2".into(), answer: "type hello".into() },
        ]);
        let r = score_guide(&samples, &preds, &ExactMatch).report();
        assert_eq!(r.summary["guide_similarity"], 0.5);
        assert_eq!(r.summary["guide_iou"], 0.375);
        assert_eq!(r.missing_predictions, 1);
        let f1 = TokenF1.score("click the search box", "click search");
        assert!((f1 - 2.0 * 0.5 * 1.0 / 1.5).abs() < 1e-12);
    }
}
