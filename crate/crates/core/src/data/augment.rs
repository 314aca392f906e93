//! Training-time augmentation: random resize, text-preserving crop and
//! rotation with canvas expansion. Polygons are transformed exactly and the
//! boxes recomputed from them.

use image::imageops::{self, FilterType};
use image::{Rgb, Rgb32FImage};
use rand::Rng;

use super::{SpottingSample, TextInstance};
use crate::config::AugmentConfig;
use crate::error::Result;
use crate::geometry::{CenterBox, Point, Polygon16};

/// Smallest crop side as a fraction of the image side.
const MIN_CROP: f64 = 0.5;

/// Target size with the shorter side at `shorter`, shrunk further if the
/// longer side would exceed `max_long`.
pub fn target_size(w: u32, h: u32, shorter: usize, max_long: usize) -> (u32, u32) {
    let short = w.min(h) as f64;
    let long = w.max(h) as f64;
    let mut scale = shorter as f64 / short;
    if max_long > 0 && long * scale > max_long as f64 {
        scale = max_long as f64 / long;
    }
    (
        ((w as f64 * scale).round() as u32).max(1),
        ((h as f64 * scale).round() as u32).max(1),
    )
}

fn resize_image(image: &Rgb32FImage, w: u32, h: u32) -> Rgb32FImage {
    if image.dimensions() == (w, h) {
        return image.clone();
    }
    imageops::resize(image, w, h, FilterType::Triangle)
}

/// Resizes for inference. Coordinates are normalized, so annotations need
/// no change.
pub fn resize_for_inference(image: &Rgb32FImage, shorter: usize, max_long: usize) -> Rgb32FImage {
    let (w, h) = image.dimensions();
    let (tw, th) = target_size(w, h, shorter, max_long);
    resize_image(image, tw, th)
}

/// Applies `f` (pixel coordinates in, pixel coordinates out) to every
/// polygon and renormalizes by the new size.
fn map_instances(
    instances: &[TextInstance],
    (w, h): (u32, u32),
    (nw, nh): (u32, u32),
    f: impl Fn(Point) -> Point,
) -> Result<Vec<TextInstance>> {
    instances
        .iter()
        .map(|i| {
            let pts: Vec<Point> = i
                .polygon
                .points()
                .iter()
                .map(|p| {
                    let q = f([p[0] * w as f64, p[1] * h as f64]);
                    [q[0] / nw as f64, q[1] / nh as f64]
                })
                .collect();
            Ok(TextInstance::new(Polygon16::from_points(&pts)?, i.transcript.clone()))
        })
        .collect()
}

/// Crops to a random window that contains every instance. Returns `None`
/// when no window was found within `retries` tries.
pub fn crop_keeping_text<R: Rng>(sample: &SpottingSample, rng: &mut R, retries: usize) -> Result<Option<SpottingSample>> {
    let (w, h) = sample.image.dimensions();
    let hull: Vec<Point> = sample
        .instances
        .iter()
        .flat_map(|i| i.polygon.points().iter().map(|p| [p[0] * w as f64, p[1] * h as f64]))
        .collect();
    let text = if hull.is_empty() {
        None
    } else {
        Some(CenterBox::enclosing(&hull).to_corners())
    };
    for _ in 0..retries {
        let cw = rng.random_range(((w as f64 * MIN_CROP).ceil() as u32).max(1)..=w);
        let ch = rng.random_range(((h as f64 * MIN_CROP).ceil() as u32).max(1)..=h);
        let x0 = rng.random_range(0..=w - cw);
        let y0 = rng.random_range(0..=h - ch);
        if let Some(t) = text {
            let fits = t.x0 >= x0 as f64 && t.y0 >= y0 as f64 && t.x1 <= (x0 + cw) as f64 && t.y1 <= (y0 + ch) as f64;
            if !fits {
                continue;
            }
        }
        let image = imageops::crop_imm(&sample.image, x0, y0, cw, ch).to_image();
        let instances = map_instances(&sample.instances, (w, h), (cw, ch), |p| [p[0] - x0 as f64, p[1] - y0 as f64])?;
        return Ok(Some(SpottingSample { image, instances }));
    }
    Ok(None)
}

/// Bilinear sample at continuous pixel coordinates (pixel `i` spans `[i, i+1)`),
/// zero outside the image.
fn bilinear(img: &Rgb32FImage, x: f64, y: f64) -> [f32; 3] {
    let (w, h) = img.dimensions();
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (ax, ay) = (fx - x0, fy - y0);
    let mut out = [0.0f64; 3];
    for (dx, wx) in [(0.0, 1.0 - ax), (1.0, ax)] {
        for (dy, wy) in [(0.0, 1.0 - ay), (1.0, ay)] {
            let (xi, yi) = (x0 + dx, y0 + dy);
            if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
                continue;
            }
            let p = img.get_pixel(xi as u32, yi as u32);
            for c in 0..3 {
                out[c] += wx * wy * p[c] as f64;
            }
        }
    }
    out.map(|v| v as f32)
}

/// Rotates by `degrees` (clockwise on screen) about the image center,
/// growing the canvas so nothing is cut off.
pub fn rotate(sample: &SpottingSample, degrees: f64) -> Result<SpottingSample> {
    let (w, h) = sample.image.dimensions();
    let (s, c) = degrees.to_radians().sin_cos();
    // Shave rounding noise so right angles give exact sizes.
    let side = |v: f64| ((v - 1e-9).ceil() as u32).max(1);
    let nw = side(w as f64 * c.abs() + h as f64 * s.abs());
    let nh = side(w as f64 * s.abs() + h as f64 * c.abs());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (ncx, ncy) = (nw as f64 / 2.0, nh as f64 / 2.0);
    let forward = |p: Point| -> Point {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        [ncx + c * dx - s * dy, ncy + s * dx + c * dy]
    };
    let mut image = Rgb32FImage::new(nw, nh);
    for y in 0..nh {
        for x in 0..nw {
            let (dx, dy) = (x as f64 + 0.5 - ncx, y as f64 + 0.5 - ncy);
            let src = [cx + c * dx + s * dy, cy - s * dx + c * dy];
            image.put_pixel(x, y, Rgb(bilinear(&sample.image, src[0], src[1])));
        }
    }
    let instances = map_instances(&sample.instances, (w, h), (nw, nh), forward)?;
    Ok(SpottingSample { image, instances })
}

/// Random resize, crop and rotation per `cfg`. Transcripts are untouched and
/// every instance survives.
pub fn augment<R: Rng>(sample: &SpottingSample, cfg: &AugmentConfig, rng: &mut R) -> Result<SpottingSample> {
    if !cfg.enabled {
        return Ok(sample.clone());
    }
    let mut out = sample.clone();
    let sides = cfg.shorter_sides();
    if !sides.is_empty() {
        let shorter = sides[rng.random_range(0..sides.len())];
        let (w, h) = target_size(out.width(), out.height(), shorter, cfg.max_long_side());
        out.image = resize_image(&out.image, w, h);
    }
    if cfg.crop {
        if let Some(c) = crop_keeping_text(&out, rng, cfg.crop_retries)? {
            out = c;
        }
    }
    if cfg.max_rotation_deg > 0.0 {
        let deg = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        out = rotate(&out, deg)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DEFAULT_CHARSET;
    use crate::data::{generate_sample, sample_rng, Charset};
    use crate::config::SynthConfig;
    use proptest::prelude::*;

    fn sample(seed: u64) -> SpottingSample {
        let cs = Charset::new(DEFAULT_CHARSET).unwrap();
        generate_sample(&mut sample_rng(seed, 0), &SynthConfig::default(), &cs).unwrap()
    }

    #[test]
    fn identity_config_changes_nothing() {
        let s = sample(0);
        let cfg = AugmentConfig {
            shorter_min: 256,
            shorter_max: 256,
            scale: 1.0,
            max_long: 10_000,
            crop: false,
            max_rotation_deg: 0.0,
            ..AugmentConfig::default()
        };
        let out = augment(&s, &cfg, &mut sample_rng(0, 1)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn rotation_matches_the_rotation_matrix() {
        let s = sample(1);
        let (w, h) = (s.width() as f64, s.height() as f64);
        for deg in [-45.0, -10.0, 0.0, 30.0, 45.0] {
            let r = rotate(&s, deg).unwrap();
            let (nw, nh) = (r.width() as f64, r.height() as f64);
            let t: f64 = f64::to_radians(deg);
            for (a, b) in s.instances.iter().zip(&r.instances) {
                for (p, q) in a.polygon.points().iter().zip(b.polygon.points()) {
                    let (dx, dy) = (p[0] * w - w / 2.0, p[1] * h - h / 2.0);
                    let x = nw / 2.0 + t.cos() * dx - t.sin() * dy;
                    let y = nh / 2.0 + t.sin() * dx + t.cos() * dy;
                    assert!((q[0] * nw - x).abs() < 1e-6 && (q[1] * nh - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rotation_moves_pixels_with_the_polygons() {
        // A single bright pixel lands where the point transform sends it.
        let mut img = Rgb32FImage::new(40, 20);
        img.put_pixel(30, 5, Rgb([1.0, 1.0, 1.0]));
        let s = SpottingSample { image: img, instances: vec![] };
        let r = rotate(&s, 90.0).unwrap();
        assert_eq!(r.image.dimensions(), (20, 40));
        // Pixel center (30.5, 5.5) goes to (10 + 4.5, 20 + 10.5) = (14.5, 30.5).
        assert!((r.image.get_pixel(14, 30)[0] - 1.0).abs() < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn augmentation_keeps_instances_and_box_consistency(seed in 0u64..1000) {
            let s = sample(seed % 7);
            let cfg = AugmentConfig { scale: 0.2, ..AugmentConfig::default() };
            let mut rng = sample_rng(seed, 9);
            let out = augment(&s, &cfg, &mut rng).unwrap();
            prop_assert_eq!(out.instances.len(), s.instances.len());
            let sides = cfg.shorter_sides();
            let before_rot = out.width().min(out.height());
            prop_assert!(before_rot > 0);
            for (a, b) in s.instances.iter().zip(&out.instances) {
                prop_assert_eq!(&a.transcript, &b.transcript);
                let hull = b.polygon.bounding_box();
                prop_assert!((hull.cx - b.bbox.cx).abs() < 1e-6 && (hull.w - b.bbox.w).abs() < 1e-6);
                prop_assert!(b.polygon.points().iter().flatten().all(|v| (-1e-9..=1.0 + 1e-9).contains(v)));
            }
            prop_assert!(!sides.is_empty());
        }

        #[test]
        fn resized_shorter_side_is_in_the_configured_set(seed in 0u64..1000) {
            let s = sample(seed % 5);
            let cfg = AugmentConfig { crop: false, max_rotation_deg: 0.0, scale: 0.3, ..AugmentConfig::default() };
            let out = augment(&s, &cfg, &mut sample_rng(seed, 2)).unwrap();
            prop_assert!(cfg.shorter_sides().contains(&(out.width().min(out.height()) as usize)));
        }
    }
}
