//! Minimal PNG chart rendering for analysis artifacts.

use crate::analysis::Histogram;
use crate::error::{Error, Result};
use image::{Rgb, RgbImage};
use std::path::Path;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 420;
const MARGIN: u32 = 48;

const SERIES_COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

fn blank() -> RgbImage {
    RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]))
}

fn draw_axes(img: &mut RgbImage) {
    let black = Rgb([20, 20, 20]);
    for x in MARGIN..WIDTH - MARGIN / 2 {
        img.put_pixel(x, HEIGHT - MARGIN, black);
    }
    for y in MARGIN / 2..=HEIGHT - MARGIN {
        img.put_pixel(MARGIN, y, black);
    }
}

/// 5x7 bitmap font for the minimal label set we render.
fn glyph(c: char) -> [u8; 7] {
    // Each byte is one row, low 5 bits used.
    match c {
        '0' => [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
        '1' => [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
        '3' => [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
        '4' => [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
        '5' => [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
        '6' => [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c],
        '-' => [0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00],
        _ => [0; 7],
    }
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str) {
    let black = Rgb([20, 20, 20]);
    let mut cx = x;
    for c in text.chars() {
        let rows = glyph(c);
        for (ry, row) in rows.iter().enumerate() {
            for bit in 0..5 {
                if row & (1 << (4 - bit)) != 0 {
                    let px = cx + bit;
                    let py = y + ry as u32;
                    if px < WIDTH && py < HEIGHT {
                        img.put_pixel(px, py, black);
                    }
                }
            }
        }
        cx += 6;
    }
}

/// Bar chart of a histogram; the title goes into the file name only, the
/// axes carry numeric min/max labels.
pub fn draw_histogram(hist: &Histogram, _title: &str, path: &Path) -> Result<()> {
    let mut img = blank();
    draw_axes(&mut img);
    let plot_w = WIDTH - MARGIN - MARGIN / 2;
    let plot_h = HEIGHT - MARGIN - MARGIN / 2;
    let max_count = hist.counts.iter().copied().max().unwrap_or(1).max(1);
    let bins = hist.counts.len().max(1);
    let bar_w = (plot_w as f64 / bins as f64).max(1.0);
    let color = Rgb([31, 119, 180]);
    for (i, &count) in hist.counts.iter().enumerate() {
        let bh = ((count as f64 / max_count as f64) * plot_h as f64).round() as u32;
        let x0 = MARGIN + 1 + (i as f64 * bar_w) as u32;
        let x1 = MARGIN + 1 + (((i + 1) as f64 * bar_w) as u32).min(plot_w);
        for x in x0..x1.max(x0 + 1) {
            for dy in 0..bh {
                let y = HEIGHT - MARGIN - 1 - dy;
                if x < WIDTH && y < HEIGHT {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    let lo = hist.edges.first().copied().unwrap_or(0.0);
    let hi = hist.edges.last().copied().unwrap_or(0.0);
    draw_text(&mut img, MARGIN, HEIGHT - MARGIN + 6, &format!("{lo:.2}"));
    draw_text(
        &mut img,
        WIDTH - MARGIN - 40,
        HEIGHT - MARGIN + 6,
        &format!("{hi:.2}"),
    );
    draw_text(&mut img, 4, MARGIN / 2, &format!("{max_count}"));
    img.save(path)
        .map_err(|e| Error::data(format!("failed to write {}: {e}", path.display())))
}

/// Sorted-eigenvalue line plot, one colored series per set.
pub fn draw_spectrum(series: &[(&str, &[f64])], path: &Path) -> Result<()> {
    let mut img = blank();
    draw_axes(&mut img);
    let plot_w = (WIDTH - MARGIN - MARGIN / 2) as f64;
    let plot_h = (HEIGHT - MARGIN - MARGIN / 2) as f64;
    let max_val = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0_f64, f64::max)
        .max(1e-12);
    let max_len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    for (si, (_, values)) in series.iter().enumerate() {
        let color = Rgb(SERIES_COLORS[si % SERIES_COLORS.len()]);
        let mut prev: Option<(u32, u32)> = None;
        for (i, &v) in values.iter().enumerate() {
            let x = MARGIN + 1 + ((i as f64 / (max_len - 1) as f64) * plot_w) as u32;
            let y = HEIGHT - MARGIN - 1 - ((v / max_val) * plot_h) as u32;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let px = (x as i32 + dx).clamp(0, WIDTH as i32 - 1) as u32;
                    let py = (y as i32 + dy).clamp(0, HEIGHT as i32 - 1) as u32;
                    img.put_pixel(px, py, color);
                }
            }
            if let Some((px, py)) = prev {
                let steps = (x.abs_diff(px)).max(y.abs_diff(py)).max(1);
                for s in 0..=steps {
                    let t = s as f64 / steps as f64;
                    let ix = (px as f64 + t * (x as f64 - px as f64)) as u32;
                    let iy = (py as f64 + t * (y as f64 - py as f64)) as u32;
                    if ix < WIDTH && iy < HEIGHT {
                        img.put_pixel(ix, iy, color);
                    }
                }
            }
            prev = Some((x, y));
        }
    }
    draw_text(&mut img, 4, MARGIN / 2, &format!("{max_val:.3}"));
    img.save(path)
        .map_err(|e| Error::data(format!("failed to write {}: {e}", path.display())))
}
