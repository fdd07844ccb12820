//! Exact aggregation of per-sample scores into a platform × task report.
//!
//! Cell values are means over samples; category figures are unweighted
//! means over platforms of the per-platform mean over that category's
//! tasks. Everything is summed as rationals and rounded once at the end.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use serde::Serialize;

use crate::schema::{Platform, TaskKind};

pub const MULTI_IOU_NOTE: &str =
    "multi_iou = sum of IoU over a maximum-total-IoU one-to-one matching / max(|pred|, |gt|); unmatched boxes on either side score 0";

/// Column order of the breakdown table.
pub const TABLE_PLATFORMS: [Platform; 5] =
    [Platform::IPhone, Platform::IPad, Platform::AppleTV, Platform::Web, Platform::Android];

type Key = (TaskKind, Platform);

#[derive(Clone, Debug, Default)]
pub struct ScoreSheet {
    primary: BTreeMap<Key, Vec<BigRational>>,
    multi_iou: BTreeMap<Key, Vec<BigRational>>,
    pub guide_similarity: Vec<BigRational>,
    pub guide_iou: Vec<BigRational>,
    pub missing_predictions: usize,
    pub unmatched_predictions: usize,
    pub duplicate_predictions: usize,
    pub invalid_scores: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub metric: &'static str,
    pub value: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub note: &'static str,
    pub cells: BTreeMap<TaskKind, BTreeMap<Platform, Cell>>,
    pub advanced_multi_iou: BTreeMap<TaskKind, BTreeMap<Platform, Cell>>,
    pub summary: BTreeMap<&'static str, f64>,
    pub missing_predictions: usize,
    pub unmatched_predictions: usize,
    pub duplicate_predictions: usize,
    pub invalid_scores: usize,
    #[serde(skip)]
    pub table: String,
}

pub fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Ocr => "exact_match",
        TaskKind::WidgetClassify | TaskKind::Tapperability => "accuracy",
        TaskKind::FindText | TaskKind::FindWidget => "acc_at_iou_0.5",
        TaskKind::WidgetListing => "multi_iou",
        _ => "llm_score",
    }
}

fn mean(values: &[BigRational]) -> Option<BigRational> {
    if values.is_empty() {
        return None;
    }
    let sum = values.iter().fold(BigRational::zero(), |acc, v| acc + v);
    Some(sum / BigInt::from(values.len()))
}

/// `r` rounded half away from zero to `places` decimals, as a string.
pub fn fixed(r: &BigRational, places: u32) -> String {
    let scale = BigInt::from(10u32).pow(places);
    let scaled = r.abs() * &scale;
    let (q, rem) = scaled.numer().div_rem(scaled.denom());
    let n = if rem * 2u32 >= *scaled.denom() { q + 1u32 } else { q };
    let (int, frac) = n.div_rem(&scale);
    let sign = if r.is_negative() && !n.is_zero() { "-" } else { "" };
    if places == 0 {
        return format!("{sign}{int}");
    }
    format!("{sign}{int}.{:0>width$}", frac.to_string(), width = places as usize)
}

fn to_f64(r: &BigRational) -> f64 {
    fixed(r, 6).parse().expect("fixed decimal parses")
}

impl ScoreSheet {
    pub fn push(&mut self, task: TaskKind, platform: Platform, v: BigRational) {
        self.primary.entry((task, platform)).or_default().push(v);
    }

    pub fn push_multi_iou(&mut self, task: TaskKind, platform: Platform, v: BigRational) {
        self.multi_iou.entry((task, platform)).or_default().push(v);
    }

    pub fn merge(&mut self, other: ScoreSheet) {
        for (k, v) in other.primary {
            self.primary.entry(k).or_default().extend(v);
        }
        for (k, v) in other.multi_iou {
            self.multi_iou.entry(k).or_default().extend(v);
        }
        self.guide_similarity.extend(other.guide_similarity);
        self.guide_iou.extend(other.guide_iou);
        self.missing_predictions += other.missing_predictions;
        self.unmatched_predictions += other.unmatched_predictions;
        self.duplicate_predictions += other.duplicate_predictions;
        self.invalid_scores += other.invalid_scores;
    }

    fn cell_means(map: &BTreeMap<Key, Vec<BigRational>>) -> BTreeMap<Key, (BigRational, usize)> {
        map.iter().filter_map(|(k, v)| mean(v).map(|m| (*k, (m, v.len())))).collect()
    }

    /// Mean over platforms of each platform's mean over matching tasks.
    fn category(means: &BTreeMap<Key, (BigRational, usize)>, pick: impl Fn(TaskKind) -> bool) -> Option<BigRational> {
        let mut per_platform: BTreeMap<Platform, Vec<BigRational>> = BTreeMap::new();
        for ((task, platform), (m, _)) in means {
            if pick(*task) {
                per_platform.entry(*platform).or_default().push(m.clone());
            }
        }
        let platform_means: Vec<BigRational> = per_platform.values().filter_map(|v| mean(v)).collect();
        mean(&platform_means)
    }

    pub fn report(&self) -> EvalReport {
        let primary = Self::cell_means(&self.primary);
        let multi = Self::cell_means(&self.multi_iou);
        let to_cells = |means: &BTreeMap<Key, (BigRational, usize)>, metric: fn(TaskKind) -> &'static str| {
            let mut out: BTreeMap<TaskKind, BTreeMap<Platform, Cell>> = BTreeMap::new();
            for ((task, platform), (m, n)) in means {
                out.entry(*task)
                    .or_default()
                    .insert(*platform, Cell { metric: metric(*task), value: to_f64(m), samples: *n });
            }
            out
        };
        let mut summary_exact: Vec<(&'static str, BigRational)> = Vec::new();
        let cats: [(&'static str, &BTreeMap<Key, (BigRational, usize)>, fn(TaskKind) -> bool); 4] = [
            ("refer", &primary, TaskKind::is_referring),
            ("ground", &primary, TaskKind::is_grounding),
            ("advanced_score", &primary, TaskKind::is_advanced),
            ("advanced_multi_iou", &multi, TaskKind::is_advanced),
        ];
        for (name, means, pick) in cats {
            if let Some(v) = Self::category(means, pick) {
                summary_exact.push((name, v));
            }
        }
        if let Some(v) = mean(&self.guide_similarity) {
            summary_exact.push(("guide_similarity", v));
        }
        if let Some(v) = mean(&self.guide_iou) {
            summary_exact.push(("guide_iou", v));
        }
        let table = render_table(&primary, &multi, &summary_exact);
        EvalReport {
            note: MULTI_IOU_NOTE,
            cells: to_cells(&primary, metric_name),
            advanced_multi_iou: to_cells(&multi, |_| "multi_iou"),
            summary: summary_exact.iter().map(|(k, v)| (*k, to_f64(v))).collect(),
            missing_predictions: self.missing_predictions,
            unmatched_predictions: self.unmatched_predictions,
            duplicate_predictions: self.duplicate_predictions,
            invalid_scores: self.invalid_scores,
            table,
        }
    }
}

impl EvalReport {
    pub fn cell(&self, task: TaskKind, platform: Platform) -> Option<&Cell> {
        self.cells.get(&task)?.get(&platform)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn task_title(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Ocr => "OCR",
        TaskKind::WidgetClassify => "Widget Classify",
        TaskKind::Tapperability => "Tapperability",
        TaskKind::WidgetListing => "Widget Listing",
        TaskKind::FindText => "Find Text",
        TaskKind::FindWidget => "Find Widget",
        TaskKind::ComprehensiveDescription => "Comprehensive",
        TaskKind::PerceptionQa => "Perception",
        TaskKind::InteractionQa => "Interaction",
    }
}

fn type_title(task: TaskKind) -> &'static str {
    if task.is_referring() {
        "Refer"
    } else if task.is_grounding() {
        "Ground"
    } else {
        "Advanced"
    }
}

/// Percent for [0, 1] metrics; LLM scores are already on 0–100.
fn as_percent(task: TaskKind, v: &BigRational) -> BigRational {
    if task.is_advanced() {
        v.clone()
    } else {
        v * BigInt::from(100)
    }
}

fn render_table(
    primary: &BTreeMap<Key, (BigRational, usize)>,
    multi: &BTreeMap<Key, (BigRational, usize)>,
    summary: &[(&'static str, BigRational)],
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {MULTI_IOU_NOTE}");
    let _ = write!(s, "{:<10}{:<22}", "Type", "Task");
    for p in TABLE_PLATFORMS {
        let _ = write!(s, "{:>9}", p.as_str());
    }
    s.push('\n');
    let row = |s: &mut String, kind: &str, title: &str, values: Vec<Option<String>>| {
        let _ = write!(s, "{kind:<10}{title:<22}");
        for v in values {
            let _ = write!(s, "{:>9}", v.unwrap_or_else(|| "-".into()));
        }
        s.push('\n');
    };
    for task in TaskKind::ALL {
        let values =
            TABLE_PLATFORMS.iter().map(|p| primary.get(&(task, *p)).map(|(m, _)| fixed(&as_percent(task, m), 2))).collect();
        row(&mut s, type_title(task), task_title(task), values);
    }
    for task in TaskKind::ADVANCED {
        if TABLE_PLATFORMS.iter().any(|p| multi.contains_key(&(task, *p))) {
            let values = TABLE_PLATFORMS
                .iter()
                .map(|p| multi.get(&(task, *p)).map(|(m, _)| fixed(&(m * BigInt::from(100)), 2)))
                .collect();
            row(&mut s, "Multi-IoU", task_title(task), values);
        }
    }
    let _ = writeln!(s, "Summary (unweighted mean over platforms)");
    for (name, v) in summary {
        let shown = if *name == "advanced_score" { v.clone() } else { v * BigInt::from(100) };
        let _ = writeln!(s, "  {name:<22}{:>9}", fixed(&shown, 2));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn fixed_rounding() {
        assert_eq!(fixed(&r(1, 3), 6), "0.333333");
        assert_eq!(fixed(&r(2, 3), 6), "0.666667");
        assert_eq!(fixed(&r(1, 8), 2), "0.13");
        assert_eq!(fixed(&r(100, 1), 2), "100.00");
        assert_eq!(fixed(&r(-1, 8), 2), "-0.13");
        assert_eq!(fixed(&r(7, 10), 0), "1");
    }

    #[test]
    fn platform_means_are_unweighted() {
        let mut sheet = ScoreSheet::default();
        // iPhone: two OCR samples, mean 1/2. Web: one, mean 1.
        sheet.push(TaskKind::Ocr, Platform::IPhone, r(1, 1));
        sheet.push(TaskKind::Ocr, Platform::IPhone, r(0, 1));
        sheet.push(TaskKind::Ocr, Platform::Web, r(1, 1));
        // AppleTV has no tapperability; its refer mean uses OCR alone.
        sheet.push(TaskKind::Ocr, Platform::AppleTV, r(1, 1));
        sheet.push(TaskKind::Tapperability, Platform::Web, r(0, 1));
        let rep = sheet.report();
        // Platform means: iPhone 1/2, Web (1 + 0)/2, AppleTV 1 → 2/3.
        assert_eq!(rep.summary["refer"], 0.666667);
        assert_eq!(rep.cell(TaskKind::Ocr, Platform::IPhone).unwrap().samples, 2);
        assert!(rep.table.contains("Tapperability"));
        assert!(rep.table.lines().any(|l| l.starts_with("Refer") && l.contains("50.00") && l.contains("-")));
    }
}
