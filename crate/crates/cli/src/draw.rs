//! Overlay drawing: polygon outlines and bitmap-font labels.

use image::{Rgb, RgbImage};
use textspotter::data::font::{ink, ADVANCE, GLYPH_H};
use textspotter::eval::Prediction;

const OUTLINE: Rgb<u8> = Rgb([40, 220, 60]);
const LABEL_FG: Rgb<u8> = Rgb([255, 230, 40]);
const LABEL_BG: Rgb<u8> = Rgb([0, 0, 0]);

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham line between pixel centers.
pub fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws `text` with its top-left corner at `(x, y)`, each glyph cell
/// `scale` pixels wide, on a filled background.
pub fn text(img: &mut RgbImage, x: i64, y: i64, s: &str, scale: i64) {
    let n = s.chars().count() as i64;
    for py in y - 1..y + GLYPH_H as i64 * scale + 1 {
        for px in x - 1..x + n * ADVANCE as i64 * scale {
            put(img, px, py, LABEL_BG);
        }
    }
    for (k, ch) in s.chars().enumerate() {
        let ox = x + k as i64 * ADVANCE as i64 * scale;
        for row in 0..GLYPH_H {
            for col in 0..ADVANCE {
                if !ink(ch, col, row) {
                    continue;
                }
                for sy in 0..scale {
                    for sx in 0..scale {
                        put(img, ox + col as i64 * scale + sx, y + row as i64 * scale + sy, LABEL_FG);
                    }
                }
            }
        }
    }
}

/// Outline plus a `transcript score` label above the polygon's first point.
pub fn prediction(img: &mut RgbImage, p: &Prediction) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let pts: Vec<(i64, i64)> = p
        .polygon
        .chunks_exact(2)
        .map(|c| ((c[0] * w).floor() as i64, (c[1] * h).floor() as i64))
        .collect();
    for k in 0..pts.len() {
        line(img, pts[k], pts[(k + 1) % pts.len()], OUTLINE);
    }
    if let Some(&(x, y)) = pts.first() {
        let scale = if img.height() >= 400 { 2 } else { 1 };
        let label = format!("{} {:.2}", p.transcript, p.score);
        text(img, x, y - (GLYPH_H as i64 + 2) * scale, &label, scale);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_hits_both_endpoints() {
        let mut img = RgbImage::new(10, 10);
        line(&mut img, (1, 8), (7, 2), OUTLINE);
        assert_eq!(*img.get_pixel(1, 8), OUTLINE);
        assert_eq!(*img.get_pixel(7, 2), OUTLINE);
        assert_eq!(img.pixels().filter(|p| **p == OUTLINE).count(), 7);
    }

    #[test]
    fn drawing_is_clipped_to_the_image() {
        let mut img = RgbImage::new(8, 8);
        let p = Prediction {
            polygon: [[-0.5, -0.5], [1.5, -0.5], [1.5, 1.5], [-0.5, 1.5]].repeat(4).concat(),
            score: 0.5,
            transcript: "ab".into(),
        };
        prediction(&mut img, &p);
    }
}
