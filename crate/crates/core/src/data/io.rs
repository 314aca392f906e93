//! Dataset directories: PNG images plus one JSON-lines annotation file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{Rgb32FImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{SpottingSample, TextInstance};
use crate::error::{Error, Result};
use crate::geometry::Polygon16;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

/// One line of the annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    /// Image file name relative to the dataset directory.
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<AnnotationInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationInstance {
    /// 16 points as `[x0, y0, ...]`, normalized to the image.
    pub polygon: Vec<f64>,
    /// `[cx, cy, w, h]`, normalized.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub transcript: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ignore: bool,
}

impl AnnotationRecord {
    pub fn from_sample(image: impl Into<String>, s: &SpottingSample) -> Self {
        Self {
            image: image.into(),
            width: s.width(),
            height: s.height(),
            instances: s
                .instances
                .iter()
                .map(|i| AnnotationInstance {
                    polygon: i.polygon.to_flat(),
                    bbox: i.bbox.to_array(),
                    transcript: i.transcript.clone(),
                    ignore: false,
                })
                .collect(),
        }
    }

    pub fn text_instances(&self) -> Result<Vec<TextInstance>> {
        self.instances
            .iter()
            .map(|a| Ok(TextInstance::new(Polygon16::from_flat(&a.polygon)?, a.transcript.clone())))
            .collect()
    }
}

pub fn to_rgb8(image: &Rgb32FImage) -> RgbImage {
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let p = image.get_pixel(x, y);
        image::Rgb(p.0.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn save_png(image: &Rgb32FImage, path: &Path) -> Result<()> {
    to_rgb8(image).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Rgb32FImage> {
    Ok(image::open(path)?.to_rgb32f())
}

pub fn image_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Writes `samples` as `000000.png, 000001.png, ...` and the annotation file.
pub fn write_dataset(dir: &Path, samples: &[SpottingSample]) -> Result<Vec<AnnotationRecord>> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(samples.len());
    let mut w = BufWriter::new(File::create(dir.join(ANNOTATIONS_FILE))?);
    for (i, s) in samples.iter().enumerate() {
        let name = image_name(i);
        save_png(&s.image, &dir.join(&name))?;
        let rec = AnnotationRecord::from_sample(name, s);
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
        records.push(rec);
    }
    w.flush()?;
    Ok(records)
}

pub fn read_annotations(dir: &Path) -> Result<Vec<AnnotationRecord>> {
    let path = dir.join(ANNOTATIONS_FILE);
    let file = File::open(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Every annotated sample of a dataset directory, in file order.
pub fn read_dataset(dir: &Path) -> Result<Vec<(AnnotationRecord, SpottingSample)>> {
    read_annotations(dir)?
        .into_iter()
        .map(|rec| {
            let image = load_image(&dir.join(&rec.image))?;
            if image.dimensions() != (rec.width, rec.height) {
                return Err(Error::Dataset(format!(
                    "{}: image is {}x{}, annotation says {}x{}",
                    rec.image,
                    image.width(),
                    image.height(),
                    rec.width,
                    rec.height
                )));
            }
            let instances = rec.text_instances()?;
            Ok((rec, SpottingSample { image, instances }))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{SynthConfig, DEFAULT_CHARSET};
    use crate::data::{generate_dataset, Charset};

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cs = Charset::new(DEFAULT_CHARSET).unwrap();
        let samples = generate_dataset(4, 3, &SynthConfig::default(), &cs).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for ((_, b), a) in back.iter().zip(&samples) {
            assert_eq!(a, b);
        }
    }
}
