//! Set-of-mark rendering: corner-style boxes colored by widget class with
//! numeric tags, plus the single red rectangle used when scoring.
//!
//! Tags are drawn with an embedded 5×7 digit font so renders are bit-exact
//! across machines.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::schema::{BBox, ScreenRecord, UnifiedLabel};

pub const RED: Rgb<u8> = Rgb([255, 0, 0]);

#[derive(Debug, thiserror::Error)]
pub enum SomError {
    #[error("image is {actual_w}x{actual_h} but the record says {expected_w}x{expected_h}")]
    DimensionMismatch { expected_w: u32, expected_h: u32, actual_w: u32, actual_h: u32 },
    #[error("box {bbox} is outside the {width}x{height} image")]
    OutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SomStyle {
    pub corner_len: u32,
    pub stroke: u32,
    pub class_palette: BTreeMap<UnifiedLabel, [u8; 3]>,
    /// Glyph height in pixels; rounded down to a multiple of 7.
    pub tag_font_size: u32,
}

impl Default for SomStyle {
    fn default() -> Self {
        SomStyle { corner_len: 16, stroke: 3, class_palette: default_palette(), tag_font_size: 14 }
    }
}

impl SomStyle {
    pub fn color(&self, label: Option<UnifiedLabel>) -> Rgb<u8> {
        label
            .and_then(|l| self.class_palette.get(&l))
            .map_or(Rgb([128, 128, 128]), |c| Rgb(*c))
    }

    pub fn palette_is_injective(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        UnifiedLabel::ALL
            .iter()
            .all(|l| self.class_palette.get(l).is_some_and(|c| seen.insert(*c)))
    }
}

/// Thirteen evenly spaced hues at full saturation, assigned in label order.
pub fn default_palette() -> BTreeMap<UnifiedLabel, [u8; 3]> {
    let n = UnifiedLabel::ALL.len() as f64;
    UnifiedLabel::ALL
        .iter()
        .enumerate()
        .map(|(i, l)| (*l, hsv_to_rgb(360.0 * i as f64 / n, 1.0, 0.95)))
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |t: f64| ((t + m) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

/// Tag number → index of the widget in the record.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SomIndex {
    pub tags: Vec<usize>,
}

impl SomIndex {
    pub fn widget_for(&self, tag: usize) -> Option<usize> {
        self.tags.get(tag).copied()
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SomTagEntry {
    pub tag: usize,
    pub widget: usize,
    pub label: Option<UnifiedLabel>,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Contents of the `<image>.som.json` sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SomSidecar {
    pub screen_id: String,
    pub tags: Vec<SomTagEntry>,
}

impl SomSidecar {
    pub fn new(record: &ScreenRecord, index: &SomIndex) -> Self {
        let tags = index
            .tags
            .iter()
            .enumerate()
            .map(|(tag, &widget)| SomTagEntry {
                tag,
                widget,
                label: record.widgets[widget].label,
                bbox: record.widgets[widget].bbox,
            })
            .collect();
        SomSidecar { screen_id: record.id.clone(), tags }
    }
}

const DIGITS: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
];

/// Fills the half-open rectangle `[x0, x1) × [y0, y1)`, clipped to the image.
fn fill(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let (w, h) = (i64::from(img.width()), i64::from(img.height()));
    for y in y0.max(0)..y1.min(h) {
        for x in x0.max(0)..x1.min(w) {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Pixel size of a rendered tag label.
pub fn tag_size(tag: usize, font_size: u32) -> (i64, i64) {
    let s = i64::from((font_size / 7).max(1));
    let n = tag.to_string().len() as i64;
    (2 * s + n * 5 * s + (n - 1) * s, 7 * s + 2 * s)
}

/// Top-left of the tag label: just above the box's top-left corner, or
/// inside the box when that would leave the image.
pub fn tag_rect(bbox: &BBox, tag: usize, font_size: u32, width: u32, height: u32) -> BBox {
    let (tw, th) = tag_size(tag, font_size);
    let (w, h) = (i64::from(width), i64::from(height));
    let (mut x, mut y) = (bbox.x_min, bbox.y_min - th);
    if y < 0 || x + tw > w {
        y = bbox.y_min;
    }
    x = x.min(w - tw).max(0);
    y = y.min(h - th).max(0);
    BBox::new(x, y, x + tw, y + th)
}

fn draw_tag(img: &mut RgbImage, rect: &BBox, tag: usize, font_size: u32, bg: Rgb<u8>) {
    let s = i64::from((font_size / 7).max(1));
    fill(img, rect.x_min, rect.y_min, rect.x_max, rect.y_max, bg);
    let luma = 299 * u32::from(bg[0]) + 587 * u32::from(bg[1]) + 114 * u32::from(bg[2]);
    let fg = if luma > 128_000 { Rgb([0, 0, 0]) } else { Rgb([255, 255, 255]) };
    let mut x = rect.x_min + s;
    for d in tag.to_string().bytes() {
        let glyph = &DIGITS[usize::from(d - b'0')];
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..5 {
                if bits & (0x10 >> col) != 0 {
                    let px = x + col * s;
                    let py = rect.y_min + s + row as i64 * s;
                    fill(img, px, py, px + s, py + s, fg);
                }
            }
        }
        x += 6 * s;
    }
}

/// Draws the four L-shaped corners of `bbox` inside the box.
fn draw_corners(img: &mut RgbImage, b: &BBox, corner_len: u32, stroke: u32, color: Rgb<u8>) {
    let half = (b.width().min(b.height()) / 2).max(1);
    let len = i64::from(corner_len).min(half).max(1);
    let t = i64::from(stroke).min(half).max(1);
    let (x0, y0, x1, y1) = (b.x_min, b.y_min, b.x_max, b.y_max);
    // top-left
    fill(img, x0, y0, x0 + len, y0 + t, color);
    fill(img, x0, y0, x0 + t, y0 + len, color);
    // top-right
    fill(img, x1 - len, y0, x1, y0 + t, color);
    fill(img, x1 - t, y0, x1, y0 + len, color);
    // bottom-left
    fill(img, x0, y1 - t, x0 + len, y1, color);
    fill(img, x0, y1 - len, x0 + t, y1, color);
    // bottom-right
    fill(img, x1 - len, y1 - t, x1, y1, color);
    fill(img, x1 - t, y1 - len, x1, y1, color);
}

/// Renders set-of-mark prompts for every widget, tags numbered from 0 in
/// widget order. Tags are drawn after all corners so they stay legible.
pub fn render_som(record: &ScreenRecord, image: &RgbImage, style: &SomStyle) -> Result<(RgbImage, SomIndex), SomError> {
    if image.dimensions() != (record.width, record.height) {
        return Err(SomError::DimensionMismatch {
            expected_w: record.width,
            expected_h: record.height,
            actual_w: image.width(),
            actual_h: image.height(),
        });
    }
    let mut out = image.clone();
    for w in &record.widgets {
        draw_corners(&mut out, &w.bbox, style.corner_len, style.stroke, style.color(w.label));
    }
    for (tag, w) in record.widgets.iter().enumerate() {
        let rect = tag_rect(&w.bbox, tag, style.tag_font_size, record.width, record.height);
        draw_tag(&mut out, &rect, tag, style.tag_font_size, style.color(w.label));
    }
    Ok((out, SomIndex { tags: (0..record.widgets.len()).collect() }))
}

/// Copy of `image` with a red rectangle outline of width `stroke` drawn
/// inside `bbox`.
pub fn render_red_box(image: &RgbImage, bbox: &BBox, stroke: u32) -> Result<RgbImage, SomError> {
    if !bbox.is_proper() || !bbox.within(image.width(), image.height()) {
        return Err(SomError::OutOfBounds { bbox: *bbox, width: image.width(), height: image.height() });
    }
    let mut out = image.clone();
    let t = i64::from(stroke.max(1));
    let (x0, y0, x1, y1) = (bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max);
    fill(&mut out, x0, y0, x1, y0 + t, RED);
    fill(&mut out, x0, y1 - t, x1, y1, RED);
    fill(&mut out, x0, y0, x0 + t, y1, RED);
    fill(&mut out, x1 - t, y0, x1, y1, RED);
    Ok(out)
}

/// SHA-256 over dimensions and raw RGB bytes.
pub fn raster_digest(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    hex::encode(h.finalize())
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, SomError> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|source| SomError::Image { path: path.display().to_string(), source })
}

/// PNG bytes of a raster.
pub fn encode_png(image: &RgbImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    image.write_to(&mut buf, image::ImageFormat::Png).expect("in-memory PNG encoding");
    buf.into_inner()
}

/// Writes `<out>.png` and its `<out>.png.som.json` sidecar.
pub fn write_som(out_png: &Path, raster: &RgbImage, sidecar: &SomSidecar) -> Result<(), SomError> {
    raster
        .save_with_format(out_png, image::ImageFormat::Png)
        .map_err(|source| SomError::Image { path: out_png.display().to_string(), source })?;
    let side = sidecar_path(out_png);
    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    std::fs::write(&side, json + "\n").map_err(|source| SomError::Io { path: side.display().to_string(), source })
}

pub fn sidecar_path(image: &Path) -> std::path::PathBuf {
    let mut name = image.file_name().unwrap_or_default().to_os_string();
    name.push(".som.json");
    image.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{Platform, Provenance, Widget};

    fn blank(w: u32, h: u32) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([250, 250, 250]))
    }

    fn record(widgets: Vec<Widget>) -> ScreenRecord {
        ScreenRecord {
            id: "s".into(),
            platform: Platform::IPad,
            image_path: "s.png".into(),
            width: 120,
            height: 80,
            widgets,
            provenance: Provenance::Human,
        }
    }

    #[test]
    fn zero_widgets_is_identity() {
        let img = blank(120, 80);
        let (out, index) = render_som(&record(vec![]), &img, &SomStyle::default()).unwrap();
        assert_eq!(out, img);
        assert!(index.is_empty());
    }

    #[test]
    fn same_class_same_color() {
        let r = record(vec![
            Widget::new(BBox::new(10, 30, 50, 60), "Button").with_label(UnifiedLabel::Button),
            Widget::new(BBox::new(60, 30, 110, 60), "Button").with_label(UnifiedLabel::Button),
        ]);
        let style = SomStyle::default();
        let (out, index) = render_som(&r, &blank(120, 80), &style).unwrap();
        assert_eq!(index.tags, [0, 1]);
        let c = style.color(Some(UnifiedLabel::Button));
        // Bottom-right corner pixels of both boxes.
        assert_eq!(*out.get_pixel(49, 59), c);
        assert_eq!(*out.get_pixel(109, 59), c);
    }

    #[test]
    fn dimension_mismatch() {
        let err = render_som(&record(vec![]), &blank(10, 10), &SomStyle::default()).unwrap_err();
        assert!(matches!(err, SomError::DimensionMismatch { .. }));
    }

    #[test]
    fn palette_injective() {
        assert!(SomStyle::default().palette_is_injective());
    }

    #[test]
    fn red_box_bands() {
        let img = blank(40, 40);
        let out = render_red_box(&img, &BBox::new(10, 10, 20, 20), 2).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                let inside = (10..20).contains(&x) && (10..20).contains(&y);
                let band = inside && (x < 12 || x >= 18 || y < 12 || y >= 18);
                let expected = if band { RED } else { *img.get_pixel(x, y) };
                assert_eq!(*out.get_pixel(x, y), expected, "({x},{y})");
            }
        }
        assert_eq!(out, render_red_box(&img, &BBox::new(10, 10, 20, 20), 2).unwrap());
    }

    #[test]
    fn red_box_full_frame_and_bounds() {
        let img = blank(30, 20);
        let out = render_red_box(&img, &BBox::new(0, 0, 30, 20), 1).unwrap();
        assert_eq!(*out.get_pixel(0, 0), RED);
        assert_eq!(*out.get_pixel(29, 19), RED);
        assert_eq!(*out.get_pixel(15, 10), *img.get_pixel(15, 10));
        assert!(render_red_box(&img, &BBox::new(0, 0, 31, 20), 1).is_err());
    }

    #[test]
    fn tag_falls_inside_at_top_edge() {
        let r = tag_rect(&BBox::new(5, 0, 50, 40), 3, 14, 100, 100);
        assert_eq!((r.x_min, r.y_min), (5, 0));
        let r = tag_rect(&BBox::new(5, 40, 50, 60), 3, 14, 100, 100);
        assert_eq!(r.y_max, 40);
    }
}
