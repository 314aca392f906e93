use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::Serialize;
use textspotter::checkpoint::{self, Checkpoint};
use textspotter::config::Config;
use textspotter::data::{self, Charset, SpottingSample};
use textspotter::eval::{self, GroundTruth, ImagePredictions, Lexicon, Prediction};
use textspotter::model::TextSpotter;
use textspotter::train;

use crate::draw;
use crate::manifest::{now_ms, RunManifest};
use crate::Common;

pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

/// A failure reported as one JSON line on stderr.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub error: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl fmt::Display) -> Self {
        Self {
            error: kind,
            message: message.to_string().replace('\n', " "),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.error {
            "usage" | "config" | "output_exists" => 2,
            "checkpoint" => 3,
            "dataset" | "io" | "image" | "json" => 4,
            _ => 1,
        }
    }

    pub fn report(&self) -> ExitCode {
        eprintln!("{}", serde_json::to_string(self).expect("error serializes"));
        ExitCode::from(self.exit_code())
    }
}

impl From<textspotter::Error> for CliError {
    fn from(e: textspotter::Error) -> Self {
        use textspotter::Error as E;
        let kind = match &e {
            E::Config(_) => "config",
            E::Checkpoint(_) => "checkpoint",
            E::Dataset(_) | E::OutOfCharset(_) | E::TranscriptTooLong { .. } | E::PointCount { .. } => "dataset",
            E::EmptyLexicon => "lexicon",
            E::Io(_) => "io",
            E::Image(_) => "image",
            E::Json(_) => "json",
            E::NonFinite(_) | E::NonFiniteLoss(_) => "non_finite",
            _ => "internal",
        };
        Self::new(kind, e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// The configuration file (or `base`, or the defaults) with `--set` and
/// `--seed` applied, validated.
fn resolve_config(common: &Common, base: Option<&Config>) -> Result<Config> {
    let text = match (&common.config, base) {
        (Some(p), _) => std::fs::read_to_string(p).map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))?,
        (None, Some(c)) => c.to_toml_string(),
        (None, None) => Config::default().to_toml_string(),
    };
    let mut cfg = Config::from_toml_with_overrides(&text, &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

/// Resolves and creates the output directory, refusing a non-empty one
/// unless `--overwrite` was given.
fn output_dir(common: &Common, command: &str) -> Result<PathBuf> {
    let dir = match (&common.out, &common.out_root) {
        (Some(d), _) => d.clone(),
        (None, Some(root)) => root.join(command),
        (None, None) => return Err(CliError::new("usage", "no output directory: pass --out or set TEXTSPOTTER_OUT")),
    };
    if dir.is_file() {
        return Err(CliError::new("output_exists", format!("{} is a file", dir.display())));
    }
    if dir.is_dir() && std::fs::read_dir(&dir)?.next().is_some() && !common.overwrite {
        return Err(CliError::new(
            "output_exists",
            format!("{} is not empty; pass --overwrite to write into it", dir.display()),
        ));
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Checkpoint model under the resolved configuration. Without `--config`
/// the checkpoint's own configuration is the base.
fn load_model(common: &Common, path: &Path) -> Result<(TextSpotter, Config)> {
    let ck: Checkpoint = checkpoint::read(path)?;
    let cfg = resolve_config(common, Some(&ck.config))?;
    let model = ck.into_model(&cfg.model)?;
    Ok((model, cfg))
}

pub fn generate(common: &Common, count: usize) -> Result<()> {
    let started = now_ms();
    let cfg = resolve_config(common, None)?;
    let out = output_dir(common, "generate")?;
    let manifest = RunManifest::new("generate", common.config.as_deref(), &cfg, &out, started);
    let charset = Charset::new(&cfg.model.charset)?;
    let samples = data::generate_dataset(cfg.train.seed, count, &cfg.synth, &charset)?;
    let records = data::write_dataset(&out, &samples)?;
    let mut artifacts = vec![data::ANNOTATIONS_FILE.to_string()];
    artifacts.extend(records.into_iter().map(|r| r.image));
    manifest.write(artifacts)?;
    Ok(())
}

pub fn train(common: &Common, data_dir: &Path) -> Result<()> {
    let started = now_ms();
    let cfg = resolve_config(common, None)?;
    let samples: Vec<SpottingSample> = data::read_dataset(data_dir)?.into_iter().map(|(_, s)| s).collect();
    let out = output_dir(common, "train")?;
    let manifest = RunManifest::new("train", common.config.as_deref(), &cfg, &out, started);
    let every = cfg.train.log_every.max(1);
    train::fit(&cfg, &samples, Some(&out), |r| {
        if r.iteration % every == 0 {
            log::info!("iteration {} loss {:.4} lr {:.2e}", r.iteration, r.loss.total, r.lr);
        }
    })?;
    let artifacts = [train::FINAL_CHECKPOINT, train::BEST_CHECKPOINT, train::METRICS_LOG]
        .into_iter()
        .filter(|f| out.join(f).exists())
        .map(String::from)
        .collect();
    manifest.write(artifacts)?;
    Ok(())
}

pub fn eval(
    common: &Common,
    data_dir: &Path,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    lexicon: Option<&Path>,
) -> Result<()> {
    let started = now_ms();
    let dataset = data::read_dataset(data_dir)?;
    let gts: Vec<Vec<GroundTruth>> = dataset
        .iter()
        .map(|(rec, _)| GroundTruth::from_annotations(&rec.instances))
        .collect();
    let lexicon = match lexicon {
        Some(p) => Some(Lexicon::parse(&std::fs::read_to_string(p)?)?),
        None => None,
    };
    let mut artifacts = vec![REPORT_FILE.to_string()];
    let (cfg, preds, out) = match (checkpoint, predictions) {
        (Some(ck), _) => {
            let (model, cfg) = load_model(common, ck)?;
            let out = output_dir(common, "eval")?;
            let mut records = Vec::with_capacity(dataset.len());
            for (rec, sample) in &dataset {
                records.push(ImagePredictions {
                    image: rec.image.clone(),
                    instances: train::infer(&model, sample, &cfg)?,
                });
            }
            eval::write_predictions(&out.join(PREDICTIONS_FILE), &records)?;
            artifacts.push(PREDICTIONS_FILE.to_string());
            (cfg, records.into_iter().map(|r| r.instances).collect::<Vec<_>>(), out)
        }
        (None, Some(p)) => {
            let cfg = resolve_config(common, None)?;
            let mut by_image: HashMap<String, Vec<Prediction>> = HashMap::new();
            for r in eval::read_predictions(p)? {
                if by_image.insert(r.image.clone(), r.instances).is_some() {
                    return Err(CliError::new("dataset", format!("{}: image {} listed twice", p.display(), r.image)));
                }
            }
            let preds = dataset
                .iter()
                .map(|(rec, _)| by_image.remove(&rec.image).unwrap_or_default())
                .collect();
            if let Some(extra) = by_image.keys().min() {
                return Err(CliError::new("dataset", format!("{}: image {extra} is not in the dataset", p.display())));
            }
            (cfg, preds, output_dir(common, "eval")?)
        }
        (None, None) => return Err(CliError::new("usage", "pass --checkpoint or --predictions")),
    };
    let manifest = RunManifest::new("eval", common.config.as_deref(), &cfg, &out, started);
    let report = eval::evaluate(&preds, &gts, lexicon.as_ref(), cfg.eval.iou_threshold)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::new("json", e))?;
    std::fs::write(out.join(REPORT_FILE), json + "\n")?;
    manifest.write(artifacts)?;
    Ok(())
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| CliError::new("io", format!("{}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn infer(common: &Common, checkpoint: &Path, input: &Path) -> Result<()> {
    let started = now_ms();
    let (model, cfg) = load_model(common, checkpoint)?;
    let files = png_inputs(input)?;
    let out = output_dir(common, "infer")?;
    let manifest = RunManifest::new("infer", common.config.as_deref(), &cfg, &out, started);
    let mut records = Vec::with_capacity(files.len());
    for f in &files {
        let sample = SpottingSample {
            image: data::load_image(f)?,
            instances: Vec::new(),
        };
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        records.push(ImagePredictions {
            image: name,
            instances: train::infer(&model, &sample, &cfg)?,
        });
    }
    eval::write_predictions(&out.join(PREDICTIONS_FILE), &records)?;
    manifest.write(vec![PREDICTIONS_FILE.to_string()])?;
    Ok(())
}

pub fn visualize(common: &Common, predictions: &Path, images: &Path) -> Result<()> {
    let started = now_ms();
    let cfg = resolve_config(common, None)?;
    let records = eval::read_predictions(predictions)?;
    let out = output_dir(common, "visualize")?;
    let manifest = RunManifest::new("visualize", common.config.as_deref(), &cfg, &out, started);
    let mut artifacts = Vec::with_capacity(records.len());
    for r in &records {
        let name = Path::new(&r.image)
            .file_name()
            .ok_or_else(|| CliError::new("dataset", format!("bad image name {:?}", r.image)))?;
        let mut img = image::open(images.join(&r.image))
            .map_err(|e| CliError::new("image", format!("{}: {e}", images.join(&r.image).display())))?
            .to_rgb8();
        for p in &r.instances {
            if p.polygon.len() < 4 || p.polygon.len() % 2 != 0 {
                return Err(CliError::new("dataset", format!("{}: malformed polygon", r.image)));
            }
            draw::prediction(&mut img, p);
        }
        img.save_with_format(out.join(name), image::ImageFormat::Png)
            .map_err(|e| CliError::new("image", e))?;
        artifacts.push(name.to_string_lossy().into_owned());
    }
    manifest.write(artifacts)?;
    Ok(())
}
