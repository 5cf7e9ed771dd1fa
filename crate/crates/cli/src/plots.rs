//! Minimal PNG figures. The CSVs next to them carry the actual numbers;
//! these are for a quick look.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const TRUE_BAR: Rgb<u8> = Rgb([170, 170, 170]);
const PRED_BAR: Rgb<u8> = Rgb([50, 110, 200]);

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: Rgb<u8>) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Paired bars per class: true level (grey) and mean prediction (blue).
pub fn level_bars(path: &Path, pairs: &[(f64, f64)]) -> Result<()> {
    let (bar, gap, pad, height) = (14u32, 10u32, 20u32, 220u32);
    let width = pad * 2 + pairs.len() as u32 * (2 * bar + gap);
    let mut img = RgbImage::from_pixel(width.max(2 * pad + 1), height + 2 * pad, WHITE);
    let max = pairs
        .iter()
        .flat_map(|&(a, b)| [a, b])
        .filter(|v| v.is_finite())
        .fold(1e-9, f64::max);
    let base = pad + height;
    for (i, &(t, p)) in pairs.iter().enumerate() {
        let x = pad + i as u32 * (2 * bar + gap);
        for (j, (v, c)) in [(t, TRUE_BAR), (p, PRED_BAR)].into_iter().enumerate() {
            let h = ((v.max(0.0) / max) * height as f64).round() as u32;
            let x0 = x + j as u32 * bar;
            fill(&mut img, x0, base - h.min(height), x0 + bar - 1, base, c);
        }
    }
    fill(&mut img, pad, base, width - pad, base + 1, AXIS);
    save(&img, path)
}

/// One small histogram panel per class, laid out in rows of five.
pub fn histogram_grid(path: &Path, hists: &[Vec<f64>]) -> Result<()> {
    let (cols, panel_w, panel_h, pad) = (5u32, 150u32, 90u32, 10u32);
    let rows = (hists.len() as u32).div_ceil(cols).max(1);
    let mut img = RgbImage::from_pixel(cols * (panel_w + pad) + pad, rows * (panel_h + pad) + pad, WHITE);
    for (i, h) in hists.iter().enumerate() {
        let (px, py) = (pad + (i as u32 % cols) * (panel_w + pad), pad + (i as u32 / cols) * (panel_h + pad));
        let max = h.iter().copied().fold(1e-12, f64::max);
        let bw = (panel_w / h.len().max(1) as u32).max(1);
        for (b, &v) in h.iter().enumerate() {
            let bh = ((v / max) * panel_h as f64).round() as u32;
            let x0 = px + b as u32 * bw;
            fill(&mut img, x0, py + panel_h - bh.min(panel_h), x0 + bw, py + panel_h, PRED_BAR);
        }
        fill(&mut img, px, py + panel_h, px + panel_w, py + panel_h + 1, AXIS);
        // zero-angle tick
        let mid = px + panel_w / 2;
        fill(&mut img, mid, py + panel_h, mid + 1, py + panel_h + 4, AXIS);
    }
    save(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figures_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let bars = dir.path().join("bars.png");
        level_bars(&bars, &[(30.0, 28.0), (90.0, f64::NAN)]).unwrap();
        let grid = dir.path().join("grid.png");
        histogram_grid(&grid, &[vec![0.0, 1.0, 2.0], vec![3.0; 36]]).unwrap();
        let img = image::open(&grid).unwrap();
        assert_eq!(img.width(), 5 * 160 + 10);
        assert!(image::open(&bars).is_ok());
    }
}
