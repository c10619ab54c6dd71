use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{PreprocessConfig, SplitConfig};
use crate::detect::{DegradationSpec, DetectorThresholds};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, MseNormalization};
use crate::model::{NetworkConfig, Variant};

/// Where stage-2 bounding-box priors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorSource {
    /// Ground-truth boxes.
    Oracle,
    /// A detections JSON Lines file produced by an external detector.
    DetectorFile,
    /// No prior (baseline U-Net).
    None,
}

impl FromStr for PriorSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(PriorSource::Oracle),
            "detector-file" => Ok(PriorSource::DetectorFile),
            "none" => Ok(PriorSource::None),
            other => Err(Error::Config(format!(
                "unknown prior source {other:?} (expected oracle, detector-file or none)"
            ))),
        }
    }
}

impl std::fmt::Display for PriorSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PriorSource::Oracle => "oracle",
            PriorSource::DetectorFile => "detector-file",
            PriorSource::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    /// Adam second-moment decay.
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
    pub prior_source: PriorSource,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Random horizontal and vertical flips, each with probability 1/2.
    pub augment_flips: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            beta1: 0.99,
            beta2: 0.999,
            batch_size: 2,
            epochs: 60,
            plateau_patience: 5,
            plateau_factor: 0.5,
            seed: 0,
            prior_source: PriorSource::DetectorFile,
            grad_clip: 5.0,
            augment_flips: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return fail(format!("plateau_factor must be in (0, 1), got {}", self.plateau_factor));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return fail(format!("grad_clip must be finite and >= 0, got {}", self.grad_clip));
        }
        self.loss.validate()
    }
}

/// Everything a training run needs, read from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub split: SplitConfig,
    pub thresholds: DetectorThresholds,
    pub degradation: DegradationSpec,
    /// Detections file for `prior_source = detector-file`.
    pub detections: Option<PathBuf>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

/// `HxW` or a single side length.
fn parse_resolution(key: &str, value: &str) -> Result<(usize, usize)> {
    match value.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(key, h.trim())?, parse(key, w.trim())?)),
        None => {
            let s = parse(key, value)?;
            Ok((s, s))
        }
    }
}

fn parse_mse(key: &str, value: &str) -> Result<MseNormalization> {
    match value {
        "mean" | "mean-over-pixels" => Ok(MseNormalization::MeanOverPixels),
        "sum" => Ok(MseNormalization::Sum),
        _ => Err(Error::Config(format!("bad value {value:?} for {key} (mean or sum)"))),
    }
}

impl RunConfig {
    /// Desk-scale defaults: 128x128 input, 8 base filters.
    pub fn small() -> Self {
        RunConfig {
            network: NetworkConfig::small(),
            preprocess: PreprocessConfig {
                target_resolution: (128, 128),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "variant" => self.network.variant = v.parse()?,
            "depth" => self.network.depth = parse(key, v)?,
            "base_filters" => self.network.base_filters = parse(key, v)?,
            "bb_levels" => self.network.bb_levels = parse(key, v)?,
            "input_channels" => self.network.input_channels = parse(key, v)?,
            "bbox_channels" => self.network.bbox_channels = parse(key, v)?,
            "output_channels" => self.network.output_channels = parse(key, v)?,
            "drop_rate" => self.network.drop_rate = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "beta1" => self.train.beta1 = parse(key, v)?,
            "beta2" => self.train.beta2 = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "plateau_patience" => self.train.plateau_patience = parse(key, v)?,
            "plateau_factor" => self.train.plateau_factor = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "prior_source" => self.train.prior_source = v.parse()?,
            "grad_clip" => self.train.grad_clip = parse(key, v)?,
            "augment_flips" => self.train.augment_flips = parse_bool(key, v)?,
            "loss_lambda" => self.train.loss.lambda = parse(key, v)?,
            "loss_smoothing" => self.train.loss.smoothing = parse(key, v)?,
            "loss_mse" => self.train.loss.mse_normalization = parse_mse(key, v)?,
            "clip_limit" => self.preprocess.clip_limit = parse(key, v)?,
            "tile_rows" => self.preprocess.tile_grid.0 = parse(key, v)?,
            "tile_cols" => self.preprocess.tile_grid.1 = parse(key, v)?,
            "bins" => self.preprocess.bins = parse(key, v)?,
            "resolution" => self.preprocess.target_resolution = parse_resolution(key, v)?,
            "clahe" => self.preprocess.apply_clahe = parse_bool(key, v)?,
            "test_fraction" => self.split.test_fraction = parse(key, v)?,
            "val_fraction" => self.split.val_fraction = parse(key, v)?,
            "confidence_threshold" => self.thresholds.confidence = parse(key, v)?,
            "iou_threshold" => self.thresholds.iou = parse(key, v)?,
            "degrade_drop_rate" => self.degradation.drop_rate = parse(key, v)?,
            "degrade_jitter_px" => self.degradation.jitter_px = parse(key, v)?,
            "degrade_false_positive_rate" => self.degradation.false_positive_rate = parse(key, v)?,
            "degrade_seed" => self.degradation.seed = parse(key, v)?,
            "detections" => self.detections = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self` without validating the
    /// result. Blank lines and lines starting with `#` are ignored.
    pub fn parse_onto(mut self, text: &str) -> Result<Self> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(self)
    }

    /// Parses onto the defaults and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = Self::parse_onto(Self::default(), text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file onto the defaults, leaving validation to the
    /// caller so command-line overrides can be applied first.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_onto(Self::default(), &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.preprocess.validate()?;
        self.thresholds.validate()?;
        self.degradation.validate()?;
        let (h, w) = self.preprocess.target_resolution;
        self.network.check_resolution(h, w)?;
        if !(0.0..1.0).contains(&self.split.test_fraction) || !(0.0..1.0).contains(&self.split.val_fraction) {
            return Err(Error::Config("split fractions must be in [0, 1)".into()));
        }
        if self.train.prior_source == PriorSource::DetectorFile && self.network.is_gated() && self.detections.is_none()
        {
            return Err(Error::Config("prior_source = detector-file needs a detections path".into()));
        }
        if self.train.prior_source == PriorSource::None && self.network.is_gated() {
            return Err(Error::Config("a gated network needs a prior source other than none".into()));
        }
        Ok(())
    }

    /// Baseline runs carry no prior; everything else keeps its source.
    pub fn effective_prior(&self) -> PriorSource {
        if self.network.variant == Variant::UNet {
            PriorSource::None
        } else {
            self.train.prior_source
        }
    }

    /// Serializes every key in a fixed order; `parse(to_text())` is the
    /// identity.
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let t = &self.train;
        let p = &self.preprocess;
        let mse = match t.loss.mse_normalization {
            MseNormalization::MeanOverPixels => "mean",
            MseNormalization::Sum => "sum",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("variant", n.variant.to_string());
        kv("depth", n.depth.to_string());
        kv("base_filters", n.base_filters.to_string());
        kv("bb_levels", n.bb_levels.to_string());
        kv("input_channels", n.input_channels.to_string());
        kv("bbox_channels", n.bbox_channels.to_string());
        kv("output_channels", n.output_channels.to_string());
        kv("drop_rate", n.drop_rate.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("plateau_patience", t.plateau_patience.to_string());
        kv("plateau_factor", t.plateau_factor.to_string());
        kv("seed", t.seed.to_string());
        kv("prior_source", t.prior_source.to_string());
        kv("grad_clip", t.grad_clip.to_string());
        kv("augment_flips", t.augment_flips.to_string());
        kv("loss_lambda", t.loss.lambda.to_string());
        kv("loss_smoothing", t.loss.smoothing.to_string());
        kv("loss_mse", mse.to_string());
        kv("clip_limit", p.clip_limit.to_string());
        kv("tile_rows", p.tile_grid.0.to_string());
        kv("tile_cols", p.tile_grid.1.to_string());
        kv("bins", p.bins.to_string());
        kv("resolution", format!("{}x{}", p.target_resolution.0, p.target_resolution.1));
        kv("clahe", p.apply_clahe.to_string());
        kv("test_fraction", self.split.test_fraction.to_string());
        kv("val_fraction", self.split.val_fraction.to_string());
        kv("confidence_threshold", self.thresholds.confidence.to_string());
        kv("iou_threshold", self.thresholds.iou.to_string());
        kv("degrade_drop_rate", self.degradation.drop_rate.to_string());
        kv("degrade_jitter_px", self.degradation.jitter_px.to_string());
        kv("degrade_false_positive_rate", self.degradation.false_positive_rate.to_string());
        kv("degrade_seed", self.degradation.seed.to_string());
        if let Some(d) = &self.detections {
            kv("detections", d.display().to_string());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_stage2_settings() {
        let t = TrainConfig::default();
        assert_eq!(t.learning_rate, 0.0003);
        assert_eq!(t.beta1, 0.99);
        assert_eq!(t.batch_size, 2);
        assert_eq!(t.epochs, 60);
        assert_eq!(t.plateau_patience, 5);
        assert_eq!(t.plateau_factor, 0.5);
        assert_eq!(t.loss.lambda, 0.1);
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::small();
        c.network.variant = Variant::UNet;
        c.train.prior_source = PriorSource::None;
        c.train.seed = 42;
        c.train.loss.mse_normalization = MseNormalization::Sum;
        c.preprocess.target_resolution = (128, 256);
        c.degradation.drop_rate = 0.25;
        c.detections = Some(PathBuf::from("det.jsonl"));
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_and_partial_files() {
        let c = RunConfig::parse_onto(
            RunConfig::small(),
            "# desk run\n\nvariant = oralbbnet\nprior_source = oracle\nepochs=3\n",
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.network.base_filters, 8);
        assert_eq!(c.train.prior_source, PriorSource::Oracle);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(RunConfig::parse("nonsense = 1").is_err());
        assert!(RunConfig::parse("epochs = many").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("prior_source = oracle\nplateau_factor = 1.5").is_err());
        // default source reads a detections file, which must be named
        assert!(RunConfig::parse("epochs = 2").is_err());
        assert!(RunConfig::parse("prior_source = none").is_err());
        assert!(RunConfig::parse("prior_source = oracle\nresolution = 100").is_err());
    }
}
