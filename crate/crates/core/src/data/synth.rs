//! Synthetic scene-text images: random words drawn with the bitmap font
//! along straight or bent baselines over a textured background.

use image::{Rgb, Rgb32FImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::font::{ink, ADVANCE, GLYPH_H};
use super::{Charset, SpottingSample, TextInstance};
use crate::config::SynthConfig;
use crate::error::{Error, Result};
use crate::geometry::{CenterBox, Point, Polygon16};

/// Space around the glyphs covered by the polygon, in glyph cells.
const MARGIN: f64 = 0.6;
/// Largest baseline tilt of a word, in radians.
const MAX_TILT: f64 = 0.35;

/// Independent stream for sample `index` of a dataset seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A word laid along a quadratic Bézier center line. Word space is `(u, v)`:
/// `u` in glyph cells along the line, `v` in cells across it, `v = 0` at
/// the top of the glyphs.
#[derive(Debug, Clone, Copy)]
struct WordPath {
    p0: Point,
    p1: Point,
    p2: Point,
    /// Pixels per glyph cell.
    cell: f64,
    /// Word length in cells.
    length: f64,
}

impl WordPath {
    fn at(&self, u: f64, v: f64) -> Point {
        let t = u / self.length;
        let s = 1.0 - t;
        let c = [
            s * s * self.p0[0] + 2.0 * s * t * self.p1[0] + t * t * self.p2[0],
            s * s * self.p0[1] + 2.0 * s * t * self.p1[1] + t * t * self.p2[1],
        ];
        let d = [
            2.0 * s * (self.p1[0] - self.p0[0]) + 2.0 * t * (self.p2[0] - self.p1[0]),
            2.0 * s * (self.p1[1] - self.p0[1]) + 2.0 * t * (self.p2[1] - self.p1[1]),
        ];
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-12);
        let normal = [-d[1] / n, d[0] / n];
        let off = (v - GLYPH_H as f64 / 2.0) * self.cell;
        [c[0] + normal[0] * off, c[1] + normal[1] * off]
    }

    /// Eight points along the top edge left to right, then eight along the
    /// bottom edge right to left, in pixels.
    fn outline(&self) -> [Point; 16] {
        let mut pts = [[0.0; 2]; 16];
        let (u0, u1) = (-MARGIN, self.length + MARGIN);
        let (top, bottom) = (-MARGIN, GLYPH_H as f64 + MARGIN);
        for k in 0..8 {
            let u = u0 + (u1 - u0) * k as f64 / 7.0;
            pts[k] = self.at(u, top);
            pts[15 - k] = self.at(u, bottom);
        }
        pts
    }
}

/// A generated sample together with the pixels its text was drawn on.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub sample: SpottingSample,
    /// Row-major `width × height` mask of text pixels.
    pub text_mask: Vec<bool>,
}

fn background<R: Rng>(rng: &mut R, w: u32, h: u32) -> (Rgb32FImage, bool) {
    let dark = rng.random_bool(0.5);
    let lum = if dark { rng.random_range(0.05..0.35) } else { rng.random_range(0.65..0.95) };
    let base: [f64; 3] = std::array::from_fn(|_| (lum + rng.random_range(-0.05..0.05f64)).clamp(0.0, 1.0));
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.02..0.15),
                rng.random_range(0.02..0.15),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.06),
            )
        })
        .collect();
    let mut img = Rgb32FImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let tex: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            let px: [f32; 3] = std::array::from_fn(|c| {
                (base[c] + tex + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0) as f32
            });
            img.put_pixel(x, y, Rgb(px));
        }
    }
    (img, dark)
}

fn overlaps(a: &CenterBox, b: &CenterBox, pad: f64) -> bool {
    (a.cx - b.cx).abs() * 2.0 < a.w + b.w + 2.0 * pad && (a.cy - b.cy).abs() * 2.0 < a.h + b.h + 2.0 * pad
}

fn place<R: Rng>(rng: &mut R, cfg: &SynthConfig, n_chars: usize, taken: &[CenterBox]) -> Option<WordPath> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let font = rng.random_range(cfg.min_font_px..=cfg.max_font_px);
    let cell = font / GLYPH_H as f64;
    let length = (n_chars * ADVANCE - 1) as f64;
    let len_px = length * cell;
    let tilt = rng.random_range(-MAX_TILT..=MAX_TILT);
    let bend = if rng.random_bool(cfg.curved_prob.clamp(0.0, 1.0)) {
        rng.random_range(-cfg.max_bend..=cfg.max_bend) * len_px
    } else {
        0.0
    };
    let center = [rng.random_range(0.0..w), rng.random_range(0.0..h)];
    let dir = [tilt.cos(), tilt.sin()];
    let normal = [-dir[1], dir[0]];
    let half = len_px / 2.0;
    // The curve's midpoint deviates by half the control point's offset.
    let path = WordPath {
        p0: [center[0] - dir[0] * half, center[1] - dir[1] * half],
        p1: [center[0] + normal[0] * 2.0 * bend, center[1] + normal[1] * 2.0 * bend],
        p2: [center[0] + dir[0] * half, center[1] + dir[1] * half],
        cell,
        length,
    };
    let outline = path.outline();
    if outline.iter().any(|p| p[0] < 1.0 || p[1] < 1.0 || p[0] > w - 1.0 || p[1] > h - 1.0) {
        return None;
    }
    let bbox = CenterBox::enclosing(&outline);
    if taken.iter().any(|t| overlaps(t, &bbox, 2.0)) {
        return None;
    }
    Some(path)
}

fn draw(img: &mut Rgb32FImage, mask: &mut [bool], path: &WordPath, word: &str, color: [f32; 3]) {
    let (w, h) = img.dimensions();
    // Enough sub-steps that neighbouring splats are under half a pixel apart
    // even on the outside of a bend.
    let sub = (path.cell * 3.0).ceil() as usize + 1;
    for (k, c) in word.chars().enumerate() {
        for row in 0..GLYPH_H {
            for col in 0..ADVANCE {
                if !ink(c, col, row) {
                    continue;
                }
                for su in 0..sub {
                    for sv in 0..sub {
                        let u = (k * ADVANCE + col) as f64 + (su as f64 + 0.5) / sub as f64;
                        let v = row as f64 + (sv as f64 + 0.5) / sub as f64;
                        let p = path.at(u, v);
                        let (x, y) = (p[0].floor(), p[1].floor());
                        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                            continue;
                        }
                        img.put_pixel(x as u32, y as u32, Rgb(color));
                        mask[y as usize * w as usize + x as usize] = true;
                    }
                }
            }
        }
    }
}

/// Rounds every channel to a multiple of 1/255 so the image survives an
/// 8-bit round trip unchanged.
fn quantize(img: &mut Rgb32FImage) {
    for v in img.iter_mut() {
        *v = (*v * 255.0).round() / 255.0;
    }
}

/// Generates one sample, also returning the text pixel mask.
pub fn render_sample<R: Rng>(rng: &mut R, cfg: &SynthConfig, charset: &Charset) -> Result<Rendered> {
    if charset.is_empty() || cfg.min_chars == 0 || cfg.min_chars > cfg.max_chars {
        return Err(Error::Config("synth character range is empty".into()));
    }
    let (w, h) = (cfg.width as u32, cfg.height as u32);
    let (mut img, dark) = background(rng, w, h);
    let mut mask = vec![false; (w * h) as usize];
    let wanted = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let mut boxes: Vec<CenterBox> = Vec::new();
    let mut instances = Vec::new();
    for _ in 0..wanted {
        let n_chars = rng.random_range(cfg.min_chars..=cfg.max_chars);
        let word: String = (0..n_chars)
            .map(|_| charset.chars()[rng.random_range(0..charset.len())])
            .collect();
        let mut placed = None;
        for _ in 0..cfg.placement_retries.max(1) {
            if let Some(p) = place(rng, cfg, n_chars, &boxes) {
                placed = Some(p);
                break;
            }
        }
        let Some(path) = placed else { continue };
        let color: [f32; 3] = std::array::from_fn(|_| {
            if dark {
                rng.random_range(0.75..1.0)
            } else {
                rng.random_range(0.0..0.25)
            }
        });
        draw(&mut img, &mut mask, &path, &word, color);
        let outline = path.outline();
        boxes.push(CenterBox::enclosing(&outline));
        let norm: Vec<Point> = outline.iter().map(|p| [p[0] / w as f64, p[1] / h as f64]).collect();
        instances.push(TextInstance::new(Polygon16::from_points(&norm)?, word));
    }
    quantize(&mut img);
    Ok(Rendered {
        sample: SpottingSample { image: img, instances },
        text_mask: mask,
    })
}

pub fn generate_sample<R: Rng>(rng: &mut R, cfg: &SynthConfig, charset: &Charset) -> Result<SpottingSample> {
    Ok(render_sample(rng, cfg, charset)?.sample)
}

/// `count` samples, sample `i` drawn from [`sample_rng`]`(seed, i)`.
pub fn generate_dataset(seed: u64, count: usize, cfg: &SynthConfig, charset: &Charset) -> Result<Vec<SpottingSample>> {
    (0..count)
        .map(|i| generate_sample(&mut sample_rng(seed, i as u64), cfg, charset))
        .collect()
}
