//! Deterministic synthetic screens for tests and demos.
//!
//! Each screen is a flat-color mosaic of widget rectangles written in the
//! raw layout its platform's ingest adapter reads (see [`crate::ingest`]).
//! Resolutions cycle through each platform's native screen sizes.
//!
//! With `adversarial` set, every screen also gets one widget that sticks out
//! past the right edge and one that lies wholly outside the image, and every
//! third screen (index ≡ 1 mod 3) carries only non-ASCII text.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::ingest::{RawSourceKind, OCR_SUFFIX};
use crate::schema::{BBox, Platform};
use crate::som::encode_png;

pub fn resolutions(platform: Platform) -> &'static [(u32, u32)] {
    match platform {
        Platform::IPhone => &[(828, 1792), (1125, 2436), (1792, 828), (2436, 1125)],
        Platform::IPad => &[(2224, 1668), (1668, 2224), (1242, 2208)],
        Platform::AppleTV => &[(1920, 1080)],
        Platform::Web => &[(1280, 720), (1366, 768), (1536, 864), (1920, 1080), (2048, 2732), (1170, 2532)],
        Platform::Android => &[(540, 960), (1080, 1920), (1920, 1080), (960, 540)],
    }
}

const WORDS: [&str; 40] = [
    "Search", "Settings", "Profile", "Login", "Submit", "Cancel", "Home", "Library", "Music", "Photos",
    "Messages", "Share", "Download", "Continue", "Account", "Privacy", "Help", "Notifications", "Playlist",
    "Favorites", "Recent", "Store", "Wallet", "Weather", "Calendar", "Contacts", "Camera", "Maps", "News",
    "Podcasts", "Books", "Health", "Sign Out", "Edit", "Done", "Next", "Back", "Filter", "Sort", "Upgrade",
];

const NON_ASCII: [&str; 6] = ["設定を開く", "検索する", "プロフィール", "ログイン画面", "ダウンロード", "お気に入り"];

/// What a fixture cell becomes in the raw annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    /// Static text; for Apple sources it reaches the record through OCR.
    Text,
    /// A picture that gets a caption from OCR where the source supports it.
    Picture,
    /// A control that carries its own text in the source.
    Labeled,
    Plain,
}

/// Source labels each platform's fixtures draw from, with their roles.
fn vocabulary(platform: Platform) -> &'static [(&'static str, Role)] {
    match platform {
        Platform::IPhone | Platform::IPad => &[
            ("Text", Role::Text),
            ("Picture", Role::Picture),
            ("Button", Role::Plain),
            ("Icon", Role::Plain),
            ("TextField", Role::Plain),
            ("Toggle", Role::Plain),
            ("Checkbox", Role::Plain),
            ("Slider", Role::Plain),
            ("TabBar", Role::Plain),
            ("SegmentedControl", Role::Plain),
            ("PageControl", Role::Plain),
            ("Cell", Role::Plain),
            ("Alert", Role::Plain),
            ("StatusBar", Role::Plain),
        ],
        Platform::AppleTV => &[
            ("Text", Role::Text),
            ("Poster", Role::Picture),
            ("Button", Role::Plain),
            ("Icon", Role::Plain),
            ("Shelf", Role::Plain),
            ("TabBar", Role::Plain),
            ("SegmentedControl", Role::Plain),
            ("PageControl", Role::Plain),
            ("Toggle", Role::Plain),
            ("Focus", Role::Plain),
        ],
        Platform::Web => &[
            ("p", Role::Text),
            ("img", Role::Picture),
            ("a", Role::Labeled),
            ("button", Role::Labeled),
            ("span", Role::Text),
            ("h1", Role::Text),
            ("input", Role::Plain),
            ("checkbox", Role::Plain),
            ("svg", Role::Plain),
            ("nav", Role::Plain),
            ("li", Role::Plain),
            ("range", Role::Plain),
            ("div", Role::Plain),
        ],
        Platform::Android => &[
            ("Text", Role::Text),
            ("Image", Role::Picture),
            ("Text Button", Role::Labeled),
            ("Icon", Role::Plain),
            ("Input", Role::Plain),
            ("List Item", Role::Plain),
            ("Toolbar", Role::Plain),
            ("Bottom Navigation", Role::Plain),
            ("Checkbox", Role::Plain),
            ("On/Off Switch", Role::Plain),
            ("Slider", Role::Plain),
            ("Pager Indicator", Role::Plain),
            ("Advertisement", Role::Plain),
        ],
    }
}

fn label_color(label: &str) -> Rgb<u8> {
    let d = Sha256::digest(label.as_bytes());
    Rgb([64 + d[0] / 2, 64 + d[1] / 2, 64 + d[2] / 2])
}

fn background(platform: Platform) -> Rgb<u8> {
    match platform {
        Platform::IPhone => Rgb([242, 242, 247]),
        Platform::IPad => Rgb([236, 236, 240]),
        Platform::AppleTV => Rgb([28, 28, 30]),
        Platform::Web => Rgb([255, 255, 255]),
        Platform::Android => Rgb([250, 250, 250]),
    }
}

struct Cell {
    label: &'static str,
    role: Role,
    bbox: BBox,
    text: Option<String>,
}

struct Screen {
    width: u32,
    height: u32,
    cells: Vec<Cell>,
    /// Widgets placed partly or wholly outside the image.
    stray: Vec<BBox>,
    ocr: Vec<(BBox, String, f64)>,
}

fn screen_rng(platform: Platform, index: usize, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(platform.as_str().as_bytes());
    h.update((index as u64).to_le_bytes());
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&h.finalize());
    ChaCha8Rng::from_seed(bytes)
}

fn layout(platform: Platform, index: usize, seed: u64, adversarial: bool) -> Screen {
    let mut rng = screen_rng(platform, index, seed);
    let sizes = resolutions(platform);
    let (width, height) = sizes[(index + seed as usize) % sizes.len()];
    let (w, h) = (i64::from(width), i64::from(height));
    let margin = (w.min(h) / 40).max(8);
    let gap = margin / 2;
    let rows = rng.gen_range(4..=7);
    let row_h = (h - 2 * margin - (rows - 1) * gap) / rows;
    let vocab = vocabulary(platform);

    let mut words: Vec<&str> = WORDS.to_vec();
    words.shuffle(&mut rng);
    let non_ascii = adversarial && index % 3 == 1;
    let mut next_text = {
        let mut n = 0usize;
        move || {
            n += 1;
            if non_ascii {
                NON_ASCII[(n - 1) % NON_ASCII.len()].to_string()
            } else if n <= words.len() {
                words[n - 1].to_string()
            } else {
                format!("Item {n}")
            }
        }
    };

    let mut cells = Vec::new();
    for r in 0..rows {
        let cols = rng.gen_range(1..=3i64);
        let col_w = (w - 2 * margin - (cols - 1) * gap) / cols;
        for c in 0..cols {
            let x0 = margin + c * (col_w + gap);
            let y0 = margin + r * (row_h + gap);
            let inset_x = rng.gen_range(0..=col_w / 6);
            let inset_y = rng.gen_range(0..=row_h / 6);
            let bbox = BBox::new(x0 + inset_x, y0 + inset_y, x0 + col_w - inset_x, y0 + row_h - inset_y);
            // The first two cells are always text and picture so every
            // screen exercises OCR and captions.
            let (label, role) = match cells.len() {
                0 => vocab[0],
                1 => vocab[1],
                _ => vocab[rng.gen_range(0..vocab.len())],
            };
            let text = matches!(role, Role::Text | Role::Labeled).then(&mut next_text);
            cells.push(Cell { label, role, bbox, text });
        }
    }

    let apple = RawSourceKind::for_platform(platform) == RawSourceKind::AppleHuman;
    let mut ocr = Vec::new();
    for cell in &cells {
        match (cell.role, apple) {
            (Role::Text, true) => {
                let conf = rng.gen_range(80..=99) as f64 / 100.0;
                ocr.push((cell.bbox, cell.text.clone().unwrap_or_default(), conf));
            }
            (Role::Picture, false) => {
                let b = cell.bbox;
                let (cx, cy) = ((b.x_min + b.x_max) / 2, (b.y_min + b.y_max) / 2);
                let caption = BBox::new(cx - 20, cy - 6, cx + 20, cy + 6);
                ocr.push((caption, next_text(), 0.9));
            }
            _ => {}
        }
    }
    // One unreadable line that the confidence threshold must discard.
    if let Some(pic) = cells.iter().find(|c| c.role == Role::Picture) {
        let b = pic.bbox;
        ocr.push((BBox::new(b.x_min, b.y_min, b.x_min + 30, b.y_min + 10), "~~".into(), 0.2));
    }

    let stray = if adversarial {
        vec![BBox::new(w - 60, margin, w + 40, margin + 30), BBox::new(w + 10, h + 10, w + 50, h + 40)]
    } else {
        Vec::new()
    };
    Screen { width, height, cells, stray, ocr }
}

fn paint(platform: Platform, s: &Screen) -> RgbImage {
    let mut img = RgbImage::from_pixel(s.width, s.height, background(platform));
    for cell in &s.cells {
        let color = if cell.role == Role::Text { Rgb([60, 60, 67]) } else { label_color(cell.label) };
        let b = cell.bbox.intersect(&BBox::new(0, 0, i64::from(s.width), i64::from(s.height)));
        for y in b.y_min.max(0)..b.y_max {
            for x in b.x_min.max(0)..b.x_max {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
    img
}

fn stray_label(platform: Platform) -> &'static str {
    match platform {
        Platform::Web => "button",
        Platform::Android => "Icon",
        _ => "Button",
    }
}

fn annotation(platform: Platform, s: &Screen) -> Value {
    let full = [0, 0, i64::from(s.width), i64::from(s.height)];
    match RawSourceKind::for_platform(platform) {
        RawSourceKind::AppleHuman => {
            let mut widgets: Vec<Value> = s
                .cells
                .iter()
                .map(|c| json!({"label": c.label, "bbox": c.bbox}))
                .collect();
            widgets.extend(s.stray.iter().map(|b| json!({"label": stray_label(platform), "bbox": b})));
            json!({"platform": platform.as_str(), "widgets": widgets})
        }
        RawSourceKind::WebHtml => {
            let mut children: Vec<Value> = s
                .cells
                .iter()
                .map(|c| {
                    let mut n = json!({"tag": c.label, "bbox": c.bbox, "children": []});
                    if let Some(t) = &c.text {
                        n["text"] = json!(t);
                    }
                    n
                })
                .collect();
            children.extend(s.stray.iter().map(|b| json!({"tag": stray_label(platform), "bbox": b, "children": []})));
            json!({
                "url": "https://example.com/",
                "root": {"tag": "html", "bbox": full, "children": [{"tag": "body", "children": children}]},
            })
        }
        RawSourceKind::AndroidRico => {
            let mut children: Vec<Value> = s
                .cells
                .iter()
                .map(|c| {
                    let mut n = json!({"class": "android.view.View", "componentLabel": c.label, "bounds": c.bbox});
                    if let Some(t) = &c.text {
                        n["text"] = json!(t);
                    }
                    n
                })
                .collect();
            children.extend(s.stray.iter().map(|b| {
                json!({"class": "android.widget.ImageView", "componentLabel": stray_label(platform), "bounds": b})
            }));
            json!({"class": "com.android.internal.policy.PhoneWindow$DecorView", "bounds": full, "children": children})
        }
    }
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json serializes") + "\n"
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FixtureScreen {
    pub stem: String,
    pub width: u32,
    pub height: u32,
    pub widgets: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FixtureSummary {
    pub platform: Platform,
    pub kind: RawSourceKind,
    pub dir: PathBuf,
    pub screens: Vec<FixtureScreen>,
}

/// Writes `count` screens for `platform` into `dir` and returns what was
/// written. Output depends only on the arguments.
pub fn gen_fixture(
    platform: Platform,
    count: usize,
    seed: u64,
    adversarial: bool,
    dir: &Path,
) -> std::io::Result<FixtureSummary> {
    fs::create_dir_all(dir)?;
    let screens = (0..count)
        .into_par_iter()
        .map(|i| {
            let s = layout(platform, i, seed, adversarial);
            let stem = format!("{}_{i:04}", platform.as_str().to_lowercase());
            fs::write(dir.join(format!("{stem}.png")), encode_png(&paint(platform, &s)))?;
            fs::write(dir.join(format!("{stem}.json")), pretty(&annotation(platform, &s)))?;
            let lines: Vec<Value> =
                s.ocr.iter().map(|(b, t, c)| json!({"bbox": b, "text": t, "confidence": c})).collect();
            fs::write(dir.join(format!("{stem}{OCR_SUFFIX}")), pretty(&json!({"lines": lines})))?;
            Ok(FixtureScreen { stem, width: s.width, height: s.height, widgets: s.cells.len() + s.stray.len() })
        })
        .collect::<std::io::Result<Vec<_>>>()?;
    Ok(FixtureSummary { platform, kind: RawSourceKind::for_platform(platform), dir: dir.to_path_buf(), screens })
}

/// One subdirectory per platform, named after it, under `root`.
pub fn gen_corpus(root: &Path, count: usize, seed: u64, adversarial: bool) -> std::io::Result<Vec<FixtureSummary>> {
    Platform::ALL
        .iter()
        .map(|&p| gen_fixture(p, count, seed, adversarial, &root.join(p.as_str())))
        .collect()
}

/// Every source label the fixtures can emit, per platform.
pub fn fixture_labels(platform: Platform) -> Vec<&'static str> {
    let mut v: Vec<&str> = vocabulary(platform).iter().map(|(l, _)| *l).collect();
    v.push(stray_label(platform));
    if platform == Platform::Web {
        v.push("html");
    }
    v.sort_unstable();
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_iphone_screen_is_native_size() {
        let dir = tempfile::tempdir().unwrap();
        let s = gen_fixture(Platform::IPhone, 1, 0, false, dir.path()).unwrap();
        assert_eq!((s.screens[0].width, s.screens[0].height), (828, 1792));
        let png = dir.path().join("iphone_0000.png");
        assert_eq!(image::image_dimensions(&png).unwrap(), (828, 1792));
        assert!(dir.path().join("iphone_0000.json").exists());
    }

    #[test]
    fn deterministic_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        gen_fixture(Platform::AppleTV, 2, 0, false, a.path()).unwrap();
        gen_fixture(Platform::AppleTV, 2, 0, false, b.path()).unwrap();
        for name in ["appletv_0000.png", "appletv_0001.json", "appletv_0001.ocr.json"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn cells_stay_inside_and_apart() {
        for p in Platform::ALL {
            for i in 0..6 {
                let s = layout(p, i, 3, false);
                for (k, c) in s.cells.iter().enumerate() {
                    assert!(c.bbox.is_proper() && c.bbox.within(s.width, s.height));
                    for d in &s.cells[k + 1..] {
                        assert_eq!(c.bbox.intersect(&d.bbox).area(), 0);
                    }
                }
            }
        }
    }
}
