//! PNG rendering: frame grids, error curves, trajectory overlays and mask sheets.

use std::path::Path;

use compvid::tensor::Tensor;
use image::{imageops, Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::CliError;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

/// Distinct colors for entities and sampled trajectories.
pub const COLORS: [Rgb<u8>; 8] = [
    Rgb([228, 26, 28]),
    Rgb([55, 126, 184]),
    Rgb([77, 175, 74]),
    Rgb([152, 78, 163]),
    Rgb([255, 127, 0]),
    Rgb([166, 86, 40]),
    Rgb([247, 129, 191]),
    Rgb([0, 160, 160]),
];

pub fn save(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    img.save(path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A `(3, H, W)` tensor in `[0, 1]` as an image.
pub fn frame_image(frame: &Tensor<f32>) -> RgbImage {
    let (h, w) = (frame.dim(1), frame.dim(2));
    let d = frame.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
    })
}

/// A single-channel `(H, W)` slice in `[0, 1]` as a gray image.
pub fn gray_image(data: &[f32], h: usize, w: usize) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = to_u8(data[y as usize * w + x as usize]);
        Rgb([v, v, v])
    })
}

/// Tiles of equal size laid out row by row with a 2 pixel gutter.
pub fn grid(rows: &[Vec<RgbImage>]) -> RgbImage {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let (tw, th) = rows
        .iter()
        .flatten()
        .next()
        .map_or((1, 1), |t| (t.width(), t.height()));
    let gap = 2;
    let mut out = RgbImage::from_pixel(cols * (tw + gap) + gap, rows.len() as u32 * (th + gap) + gap, WHITE);
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            imageops::replace(
                &mut out,
                tile,
                (gap + c as u32 * (tw + gap)) as i64,
                (gap + r as u32 * (th + gap)) as i64,
            );
        }
    }
    out
}

pub fn upscale(img: &RgbImage, factor: u32) -> RgbImage {
    imageops::resize(img, img.width() * factor, img.height() * factor, imageops::FilterType::Nearest)
}

/// Center trajectories drawn over `background`. `paths[i][t]` is a normalized
/// point; consecutive points are joined and the last one is marked.
pub fn overlay(background: &RgbImage, paths: &[(Vec<[f64; 2]>, Rgb<u8>)], dot: i32) -> RgbImage {
    let mut img = background.clone();
    let (w, h) = (img.width() as f64, img.height() as f64);
    let px = |p: [f64; 2]| ((p[0] * w) as f32, (p[1] * h) as f32);
    for (path, color) in paths {
        for pair in path.windows(2) {
            draw_line_segment_mut(&mut img, px(pair[0]), px(pair[1]), *color);
        }
        if let Some(&last) = path.last() {
            let (x, y) = px(last);
            draw_filled_circle_mut(&mut img, (x as i32, y as i32), dot, *color);
        }
    }
    img
}

/// A line chart of `(x, y)` points with a light grid; no text, the file name carries the label.
pub fn line_chart(points: &[(f64, f64)], color: Rgb<u8>) -> RgbImage {
    let (w, h, m) = (640u32, 400u32, 40u32);
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    let finite: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let (x0, x1) = bounds(finite.iter().map(|p| p.0));
    let (mut y0, y1) = bounds(finite.iter().map(|p| p.1));
    y0 = y0.min(0.0);
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let map = |(x, y): (f64, f64)| {
        (
            (m as f64 + (x - x0) / span(x0, x1) * (w - 2 * m) as f64) as f32,
            (h as f64 - m as f64 - (y - y0) / span(y0, y1) * (h - 2 * m) as f64) as f32,
        )
    };
    for i in 0..=4 {
        let gy = (m + i * (h - 2 * m) / 4) as f32;
        draw_line_segment_mut(&mut img, (m as f32, gy), ((w - m) as f32, gy), GRID);
    }
    draw_hollow_rect_mut(&mut img, Rect::at(m as i32, m as i32).of_size(w - 2 * m, h - 2 * m), AXIS);
    for pair in finite.windows(2) {
        draw_line_segment_mut(&mut img, map(pair[0]), map(pair[1]), color);
    }
    if finite.len() == 1 {
        let (x, y) = map(finite[0]);
        draw_filled_circle_mut(&mut img, (x as i32, y as i32), 3, color);
    }
    img
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// A parsed CSV: header names and rows of raw fields.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| CliError::Runtime("CSV file is empty".into()))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let rows = lines
            .map(|l| l.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>())
            .collect::<Vec<_>>();
        if let Some(r) = rows.iter().position(|r| r.len() != header.len()) {
            return Err(CliError::Runtime(format!(
                "CSV row {} has {} fields, header has {}",
                r + 2,
                rows[r].len(),
                header.len()
            )));
        }
        Ok(Table { header, rows })
    }

    /// `(x, y)` pairs for column `col` against the first column, skipping
    /// rows whose fields are not numbers (summary rows, empty cells).
    pub fn series(&self, col: usize) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| Some((r[0].parse().ok()?, r[col].parse().ok()?)))
            .collect()
    }
}
