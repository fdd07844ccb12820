//! Filtering rules and source-label unification.
//!
//! The full pass runs clip → drop_empty → unify_labels → drop_empty →
//! ascii_filter. The second empty-screen sweep removes screens whose every
//! widget mapped to `Other`, which a curated manifest cannot hold.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use num_rational::BigRational;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::schema::{BBox, Platform, ScreenRecord, UnifiedLabel};

pub const DEFAULT_MAX_NON_ASCII_RATIO: f64 = 0.05;

const DEFAULT_MAPS: [(&str, &str); 4] = [
    ("ios.tsv", include_str!("../data/labelmaps/ios.tsv")),
    ("appletv.tsv", include_str!("../data/labelmaps/appletv.tsv")),
    ("web.tsv", include_str!("../data/labelmaps/web.tsv")),
    ("android.tsv", include_str!("../data/labelmaps/android.tsv")),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MappedLabel {
    Unified(UnifiedLabel),
    /// Drop the widget.
    Other,
}

impl fmt::Display for MappedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MappedLabel::Unified(l) => l.fmt(f),
            MappedLabel::Other => f.write_str("Other"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LabelMapError {
    #[error("{source_name}:{line}: expected `platform<TAB>source_label<TAB>unified_label`")]
    Malformed { source_name: String, line: usize },
    #[error("{source_name}:{line}: {message}")]
    BadValue { source_name: String, line: usize, message: String },
    #[error("{source_name}:{line}: ({platform}, {label}) already mapped to {existing}")]
    Conflict {
        source_name: String,
        line: usize,
        platform: Platform,
        label: String,
        existing: MappedLabel,
    },
    #[error("reading label maps from {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `(platform, source_label)` → unified label or `Other`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelMap {
    entries: BTreeMap<(Platform, String), MappedLabel>,
}

impl LabelMap {
    pub fn insert(&mut self, platform: Platform, source_label: impl Into<String>, mapped: MappedLabel) {
        self.entries.insert((platform, source_label.into()), mapped);
    }

    pub fn get(&self, platform: Platform, source_label: &str) -> Option<MappedLabel> {
        self.entries.get(&(platform, source_label.to_string())).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Platform, &str, MappedLabel)> {
        self.entries.iter().map(|((p, s), m)| (*p, s.as_str(), *m))
    }

    /// Parses one TSV label-map file. Blank lines and `#` comments are skipped.
    pub fn parse_into(&mut self, source_name: &str, text: &str) -> Result<(), LabelMapError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = raw.split('\t').collect();
            let [platform, label, unified] = cols[..] else {
                return Err(LabelMapError::Malformed { source_name: source_name.into(), line });
            };
            let bad = |message: String| LabelMapError::BadValue { source_name: source_name.into(), line, message };
            let platform: Platform = platform.parse().map_err(|e| bad(format!("{e}")))?;
            let mapped = if unified == "Other" {
                MappedLabel::Other
            } else {
                MappedLabel::Unified(unified.parse().map_err(|e| bad(format!("{e}")))?)
            };
            if let Some(existing) = self.get(platform, label) {
                if existing != mapped {
                    return Err(LabelMapError::Conflict {
                        source_name: source_name.into(),
                        line,
                        platform,
                        label: label.into(),
                        existing,
                    });
                }
            }
            self.insert(platform, label, mapped);
        }
        Ok(())
    }

    pub fn parse(source_name: &str, text: &str) -> Result<Self, LabelMapError> {
        let mut map = LabelMap::default();
        map.parse_into(source_name, text)?;
        Ok(map)
    }

    /// The maps shipped with the toolkit for every platform.
    pub fn defaults() -> Self {
        let mut map = LabelMap::default();
        for (name, text) in DEFAULT_MAPS {
            map.parse_into(name, text).expect("shipped label maps parse");
        }
        map
    }

    /// Loads a single `.tsv` file or every `.tsv` file in a directory (sorted by name).
    pub fn load(path: &Path) -> Result<Self, LabelMapError> {
        let io = |source| LabelMapError::Io { path: path.display().to_string(), source };
        let mut files = Vec::new();
        if path.is_dir() {
            for entry in fs::read_dir(path).map_err(io)? {
                let p = entry.map_err(io)?.path();
                if p.extension().is_some_and(|e| e == "tsv") {
                    files.push(p);
                }
            }
            files.sort();
        } else {
            files.push(path.to_path_buf());
        }
        let mut map = LabelMap::default();
        for f in files {
            let text = fs::read_to_string(&f)
                .map_err(|source| LabelMapError::Io { path: f.display().to_string(), source })?;
            map.parse_into(&f.display().to_string(), &text)?;
        }
        Ok(map)
    }

    /// Serializes in the TSV format, sorted by platform then label.
    pub fn to_tsv(&self) -> String {
        self.iter().map(|(p, s, m)| format!("{p}\t{s}\t{m}\n")).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CurateError {
    #[error("unmapped source labels: {}", render_pairs(.labels))]
    UnmappedLabels { labels: Vec<(Platform, String)> },
}

fn render_pairs(labels: &[(Platform, String)]) -> String {
    labels.iter().map(|(p, l)| format!("({p}, {l:?})")).collect::<Vec<_>>().join(", ")
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub screens_in: u64,
    pub screens_out: u64,
    pub boxes_clipped: u64,
    pub boxes_removed: u64,
    pub screens_removed_empty: u64,
    pub screens_removed_non_ascii: u64,
    pub widgets_dropped_other: u64,
    /// Widgets that unified to Text but carried no text.
    pub widgets_dropped_textless: u64,
    /// Where the non-ASCII filter sits relative to OCR merging.
    pub ascii_filter_position: String,
}

impl CurationReport {
    pub fn reconciles(&self) -> bool {
        self.screens_in == self.screens_out + self.screens_removed_empty + self.screens_removed_non_ascii
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClipStats {
    pub clipped: u64,
    pub removed: u64,
}

/// Intersects every box with the image frame. Boxes left with zero area are removed.
pub fn clip_boxes(record: &ScreenRecord) -> (ScreenRecord, ClipStats) {
    let frame = BBox::new(0, 0, i64::from(record.width), i64::from(record.height));
    let mut stats = ClipStats::default();
    let mut out = record.clone();
    out.widgets = record
        .widgets
        .iter()
        .filter_map(|w| {
            let clipped = w.bbox.intersect(&frame);
            if !clipped.is_proper() {
                stats.removed += 1;
                return None;
            }
            if clipped != w.bbox {
                stats.clipped += 1;
            }
            let mut w = w.clone();
            w.bbox = clipped;
            Some(w)
        })
        .collect();
    (out, stats)
}

/// Removes screens with no widgets, preserving survivor order.
pub fn drop_empty(records: Vec<ScreenRecord>) -> (Vec<ScreenRecord>, CurationReport) {
    let screens_in = records.len() as u64;
    let kept: Vec<_> = records.into_iter().filter(|r| !r.widgets.is_empty()).collect();
    let report = CurationReport {
        screens_in,
        screens_out: kept.len() as u64,
        screens_removed_empty: screens_in - kept.len() as u64,
        ..CurationReport::default()
    };
    (kept, report)
}

/// Fraction of non-ASCII characters (code point > 127) across all widget text.
/// `None` when the screen carries no text at all.
pub fn non_ascii_ratio(record: &ScreenRecord) -> Option<f64> {
    let (mut total, mut non_ascii) = (0usize, 0usize);
    for c in record.widgets.iter().filter_map(|w| w.text.as_deref()).flat_map(str::chars) {
        total += 1;
        if !c.is_ascii() {
            non_ascii += 1;
        }
    }
    (total > 0).then(|| non_ascii as f64 / total as f64)
}

/// Keep decision: a screen is dropped only when its non-ASCII share is
/// strictly greater than `max_ratio`.
pub fn ascii_filter(record: &ScreenRecord, max_ratio: f64) -> bool {
    let (mut total, mut non_ascii) = (0u64, 0u64);
    for c in record.widgets.iter().filter_map(|w| w.text.as_deref()).flat_map(str::chars) {
        total += 1;
        non_ascii += u64::from(!c.is_ascii());
    }
    if total == 0 {
        return true;
    }
    // non_ascii / total > max_ratio, compared exactly.
    let Some(limit) = BigRational::from_float(max_ratio) else {
        return true;
    };
    BigRational::from_integer(non_ascii.into()) <= limit * BigRational::from_integer(total.into())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UnifyStats {
    pub dropped_other: u64,
    pub dropped_textless: u64,
}

/// Source labels of `record` that `map` does not cover.
pub fn unmapped_labels(record: &ScreenRecord, map: &LabelMap) -> BTreeSet<(Platform, String)> {
    record
        .widgets
        .iter()
        .filter(|w| map.get(record.platform, &w.source_label).is_none())
        .map(|w| (record.platform, w.source_label.clone()))
        .collect()
}

/// Relabels every widget from its source label. `Other` widgets and Text
/// widgets without text are removed.
pub fn unify_labels(record: &ScreenRecord, map: &LabelMap) -> Result<(ScreenRecord, UnifyStats), CurateError> {
    let missing = unmapped_labels(record, map);
    if !missing.is_empty() {
        return Err(CurateError::UnmappedLabels { labels: missing.into_iter().collect() });
    }
    let mut stats = UnifyStats::default();
    let mut out = record.clone();
    out.widgets = record
        .widgets
        .iter()
        .filter_map(|w| match map.get(record.platform, &w.source_label) {
            Some(MappedLabel::Unified(UnifiedLabel::Text)) if w.text.is_none() => {
                stats.dropped_textless += 1;
                None
            }
            Some(MappedLabel::Unified(label)) => {
                let mut w = w.clone();
                w.label = Some(label);
                Some(w)
            }
            _ => {
                stats.dropped_other += 1;
                None
            }
        })
        .collect();
    Ok((out, stats))
}

#[derive(Clone, Copy, Debug)]
pub struct CurateOptions {
    pub max_non_ascii_ratio: f64,
}

impl Default for CurateOptions {
    fn default() -> Self {
        CurateOptions { max_non_ascii_ratio: DEFAULT_MAX_NON_ASCII_RATIO }
    }
}

/// Full curation pass. Fails before touching anything if any source label
/// is unmapped.
pub fn curate(
    records: Vec<ScreenRecord>,
    map: &LabelMap,
    opts: &CurateOptions,
) -> Result<(Vec<ScreenRecord>, CurationReport), CurateError> {
    let screens_in = records.len() as u64;

    let clipped: Vec<(ScreenRecord, ClipStats)> = records.par_iter().map(clip_boxes).collect();
    let mut report = CurationReport {
        screens_in,
        ascii_filter_position: "after_ocr_merge".into(),
        ..CurationReport::default()
    };
    for (_, s) in &clipped {
        report.boxes_clipped += s.clipped;
        report.boxes_removed += s.removed;
    }
    let (nonempty, r1) = drop_empty(clipped.into_iter().map(|(r, _)| r).collect());
    report.screens_removed_empty += r1.screens_removed_empty;

    let missing: BTreeSet<_> = nonempty.iter().flat_map(|r| unmapped_labels(r, map)).collect();
    if !missing.is_empty() {
        return Err(CurateError::UnmappedLabels { labels: missing.into_iter().collect() });
    }
    let unified = nonempty
        .par_iter()
        .map(|r| unify_labels(r, map))
        .collect::<Result<Vec<_>, _>>()?;
    for (_, s) in &unified {
        report.widgets_dropped_other += s.dropped_other;
        report.widgets_dropped_textless += s.dropped_textless;
    }
    let (labelled, r2) = drop_empty(unified.into_iter().map(|(r, _)| r).collect());
    report.screens_removed_empty += r2.screens_removed_empty;

    let keep: Vec<bool> = labelled.par_iter().map(|r| ascii_filter(r, opts.max_non_ascii_ratio)).collect();
    let out: Vec<ScreenRecord> = labelled.into_iter().zip(keep).filter_map(|(r, k)| k.then_some(r)).collect();
    report.screens_removed_non_ascii = r2.screens_out - out.len() as u64;
    report.screens_out = out.len() as u64;
    debug_assert!(report.reconciles());
    Ok((out, report))
}
