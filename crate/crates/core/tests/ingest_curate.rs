use std::fs;
use std::path::Path;

use image::RgbImage;
use serde_json::json;

use uiforge::curate::{curate, CurateOptions, LabelMap};
use uiforge::ingest::{ingest_source, IngestOptions, RawSourceKind};
use uiforge::schema::{BBox, Platform, Provenance, ScreenRecord, UnifiedLabel};

fn blank(dir: &Path, stem: &str, w: u32, h: u32) {
    RgbImage::new(w, h).save(dir.join(format!("{stem}.png"))).unwrap();
}

fn write_json(dir: &Path, name: &str, v: serde_json::Value) {
    fs::write(dir.join(name), serde_json::to_string(&v).unwrap()).unwrap();
}

fn labels(r: &ScreenRecord) -> Vec<(Option<UnifiedLabel>, BBox, Option<&str>)> {
    r.widgets.iter().map(|w| (w.label, w.bbox, w.text.as_deref())).collect()
}

#[test]
fn apple_screen_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    blank(d, "a", 100, 200);
    blank(d, "b", 10, 10); // no annotation
    write_json(
        d,
        "a.json",
        json!({"platform": "iPhone", "widgets": [
            {"label": "Button", "bbox": [10, 10, 50, 30]},
            {"label": "Text", "bbox": [0, 40, 100, 60]},
            {"label": "Picture", "bbox": [0, 100, 100, 150]},
            {"label": "Button", "bbox": [5, 5, 5, 9]},
            {"label": "Icon", "bbox": [90, 190, 120, 220]}
        ]}),
    );
    write_json(
        d,
        "a.ocr.json",
        json!({"lines": [
            {"bbox": [12, 12, 48, 28], "text": "Sign in", "confidence": 0.9},
            {"bbox": [12, 12, 48, 28], "text": "Sign in", "confidence": 0.9},
            {"bbox": [0, 160, 50, 170], "text": "faint", "confidence": 0.3},
            {"bbox": [0, 40, 100, 60], "text": "Welcome", "confidence": 0.5}
        ]}),
    );

    let out = ingest_source(RawSourceKind::AppleHuman, d, &IngestOptions::default()).unwrap();
    let rep = &out.report;
    assert_eq!((rep.images, rep.records, rep.skipped.len(), rep.errors.len()), (2, 1, 1, 0));
    assert_eq!(rep.degenerate_boxes, 1);
    assert_eq!((rep.ocr.merged, rep.ocr.duplicates, rep.ocr.below_threshold, rep.ocr.overlaps_existing), (2, 1, 1, 2));
    let rec = &out.records[0];
    assert_eq!((rec.id.as_str(), rec.platform, rec.width, rec.height), ("a", Platform::IPhone, 100, 200));
    assert_eq!(rec.provenance, Provenance::OcrMerged);
    assert_eq!(rec.widgets.len(), 6);
    assert_eq!(rec.widgets[4].text.as_deref(), Some("Sign in"));

    let (cur, crep) = curate(out.records, &LabelMap::defaults(), &CurateOptions::default()).unwrap();
    assert_eq!((crep.boxes_clipped, crep.boxes_removed, crep.widgets_dropped_other), (1, 0, 1));
    assert!(crep.reconciles());
    assert_eq!(
        labels(&cur[0]),
        vec![
            (Some(UnifiedLabel::Button), BBox::new(10, 10, 50, 30), None),
            (Some(UnifiedLabel::Picture), BBox::new(0, 100, 100, 150), None),
            (Some(UnifiedLabel::Icon), BBox::new(90, 190, 100, 200), None),
            (Some(UnifiedLabel::Text), BBox::new(12, 12, 48, 28), Some("Sign in")),
            (Some(UnifiedLabel::Text), BBox::new(0, 40, 100, 60), Some("Welcome")),
        ]
    );
}

#[test]
fn web_tree_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    blank(d, "page", 200, 100);
    write_json(
        d,
        "page.json",
        json!({"url": "https://example.test", "root": {"tag": "html", "bbox": [0, 0, 200, 100], "children": [
            {"tag": "body", "children": [
                {"tag": "p", "bbox": [0, 0, 50, 10], "text": "Hello"},
                {"tag": "img", "bbox": [0, 20, 80, 80]},
                {"tag": "a", "bbox": [100, 0, 150, 20], "text": "Go"},
                {"tag": "span", "bbox": [0, 90, 10, 100]}
            ]}
        ]}}),
    );
    write_json(
        d,
        "page.ocr.json",
        json!({"lines": [
            {"bbox": [10, 30, 40, 40], "text": "Logo", "confidence": 0.9},
            {"bbox": [150, 80, 190, 95], "text": "Loose", "confidence": 0.9}
        ]}),
    );
    let out = ingest_source(RawSourceKind::WebHtml, d, &IngestOptions::default()).unwrap();
    let rep = &out.report;
    assert_eq!((rep.records, rep.widgets, rep.unlabeled_nodes), (1, 5, 1));
    assert_eq!((rep.ocr.merged, rep.ocr.unplaced), (1, 1));
    assert_eq!(out.records[0].provenance, Provenance::HtmlParsed);
    assert_eq!(out.records[0].widgets[2].text.as_deref(), Some("Logo"));

    let (cur, crep) = curate(out.records, &LabelMap::defaults(), &CurateOptions::default()).unwrap();
    assert_eq!((crep.widgets_dropped_other, crep.widgets_dropped_textless), (1, 1));
    assert_eq!(
        labels(&cur[0]),
        vec![
            (Some(UnifiedLabel::Text), BBox::new(0, 0, 50, 10), Some("Hello")),
            (Some(UnifiedLabel::Picture), BBox::new(0, 20, 80, 80), Some("Logo")),
            (Some(UnifiedLabel::Button), BBox::new(100, 0, 150, 20), Some("Go")),
        ]
    );
}

#[test]
fn rico_tree_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    blank(d, "s1", 100, 100);
    blank(d, "s2", 100, 100);
    write_json(
        d,
        "s1.json",
        json!({"class": "DecorView", "bounds": [0, 0, 100, 100], "children": [
            {"class": "TextView", "componentLabel": "Text", "bounds": [0, 0, 100, 20], "text": "Title"},
            {"class": "ImageView", "componentLabel": "Image", "bounds": [0, 30, 100, 80]},
            {"class": "AdView", "componentLabel": "Advertisement", "bounds": [0, 90, 100, 100]},
            {"class": "Orphan", "componentLabel": "Icon"}
        ]}),
    );
    // Only an ad: nothing survives curation.
    write_json(
        d,
        "s2.json",
        json!({"class": "DecorView", "bounds": [0, 0, 100, 100], "children": [
            {"class": "AdView", "componentLabel": "Advertisement", "bounds": [0, 0, 100, 100]}
        ]}),
    );
    let out = ingest_source(RawSourceKind::AndroidRico, d, &IngestOptions::default()).unwrap();
    let rep = &out.report;
    assert_eq!((rep.records, rep.widgets, rep.unlabeled_nodes), (2, 4, 3));
    assert_eq!(out.records[0].provenance, Provenance::Converted);

    let (cur, crep) = curate(out.records, &LabelMap::defaults(), &CurateOptions::default()).unwrap();
    assert_eq!((crep.screens_in, crep.screens_out, crep.screens_removed_empty), (2, 1, 1));
    assert_eq!(crep.widgets_dropped_other, 2);
    assert_eq!(cur[0].widgets.len(), 2);
}

#[test]
fn bad_annotation_is_reported_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    blank(d, "ok", 10, 10);
    blank(d, "bad", 10, 10);
    write_json(d, "ok.json", json!({"platform": "iPad", "widgets": [{"label": "Button", "bbox": [0, 0, 5, 5]}]}));
    fs::write(d.join("bad.json"), "{not json").unwrap();
    let out = ingest_source(RawSourceKind::AppleHuman, d, &IngestOptions::default()).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.report.errors.len(), 1);
    assert!(out.report.errors[0].image.ends_with("bad.png"));
}
