//! Run configuration as `key = value` text.
//!
//! Every key has a default, unknown keys are rejected, and `#` starts a
//! comment. List values are comma separated.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gaf::{GafConfig, GatingVariant};
use crate::losses::LossWeights;
use crate::nets::SkipUNetConfig;
use crate::optim::AdamConfig;
use crate::synthdata::SynthConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub gating: GatingVariant,
    pub gating_hidden: usize,
    pub loss: LossWeights,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Warm-up length in epochs.
    pub tau: usize,
    pub seed: u64,
    pub warp_depth: usize,
    pub warp_width: usize,
    pub seg_depth: usize,
    pub seg_width: usize,
    pub fusion_depth: usize,
    pub fusion_width: usize,
    /// Let the fusion loss reach the segmentation net through `M_exp`.
    pub joint_seg_grad: bool,
    pub train_samples: usize,
    pub held_out_samples: usize,
    pub amplitude: f64,
    pub sigma: f64,
    /// Dataset directory; empty means generate in memory from `seed`.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            height: 64,
            width: 48,
            k: 3,
            gating: GatingVariant::ConvGru,
            gating_hidden: 8,
            loss: LossWeights::default(),
            lr: 1e-4,
            batch_size: 4,
            epochs: 30,
            tau: 5,
            seed: 7,
            warp_depth: 4,
            warp_width: 16,
            seg_depth: 3,
            seg_width: 8,
            fusion_depth: 3,
            fusion_width: 16,
            joint_seg_grad: true,
            train_samples: 200,
            held_out_samples: 32,
            amplitude: 4.0,
            sigma: 7.0,
            data_dir: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// `(key, description)` for every accepted key.
pub const KEYS: &[(&str, &str)] = &[
    ("resolution", "image size as HxW"),
    ("k", "index of the finest flow candidate (K + 1 candidates)"),
    ("gating", "flow aggregation: convgru, convlstm, residual or single"),
    ("gating.hidden", "hidden channels of the recurrent gate"),
    ("loss.beta1", "warp weight: masked L1"),
    ("loss.beta2", "warp weight: perceptual"),
    ("loss.beta3", "warp weight: mask L1"),
    ("loss.beta4", "warp weight: flow total variation"),
    ("loss.lambda1", "fusion weight: L1"),
    ("loss.lambda2", "fusion weight: perceptual"),
    ("loss.lambda3", "fusion weight: edge"),
    ("loss.lambda4", "fusion weight: reconstruction"),
    ("loss.alpha1", "stage weight: warp"),
    ("loss.alpha2", "stage weight: segmentation"),
    ("loss.alpha3", "stage weight: fusion"),
    ("loss.class_weights", "segmentation cross-entropy weights, 7 classes"),
    ("lr", "Adam learning rate"),
    ("batch_size", "samples per optimizer step"),
    ("epochs", "total training epochs"),
    ("tau", "warm-up epochs before joint training"),
    ("seed", "seed for data, initialization and shuffling"),
    ("warp_net.depth", "warp net encoder stages"),
    ("warp_net.base_width", "warp net channels at full resolution"),
    ("seg_net.depth", "segmentation net encoder stages"),
    ("seg_net.base_width", "segmentation net channels at full resolution"),
    ("fusion_net.depth", "fusion net encoder stages"),
    ("fusion_net.base_width", "fusion net channels at full resolution"),
    ("joint.seg_grad", "fusion loss trains the segmentation net (true/false)"),
    ("data.train", "generated training samples"),
    ("data.held_out", "generated held-out samples"),
    ("data.amplitude", "maximum synthetic joint displacement, design pixels"),
    ("data.sigma", "synthetic deformation width, design pixels"),
    ("data.dir", "dataset directory; empty generates data from the seed"),
    ("out.dir", "output directory for checkpoints and metrics"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let items: Vec<f64> = value
        .split(',')
        .map(|s| parse(key, s.trim()))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|v: Vec<f64>| Error::Config(format!("{key}: expected {N} values, got {}", v.len())))
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Splits `loss.beta2` into `("beta", 1)`.
fn weight_key(key: &str) -> Option<(&str, usize)> {
    let rest = key.strip_prefix("loss.")?;
    let (name, index) = rest.split_at(rest.find(|c: char| c.is_ascii_digit())?);
    if !matches!(name, "beta" | "lambda" | "alpha") {
        return None;
    }
    Some((name, index.parse::<usize>().ok()?.checked_sub(1)?))
}

/// Parses `HxW`.
pub fn parse_resolution(value: &str) -> Result<(usize, usize)> {
    let (h, w) = value
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("resolution must be HxW, got {value:?}")))?;
    Ok((parse("resolution", h.trim())?, parse("resolution", w.trim())?))
}

impl Config {
    /// The weight vector and index named by `loss.beta1` … `loss.alpha3`.
    fn weights_mut(&mut self, key: &str) -> Option<&mut f64> {
        let (name, i) = weight_key(key)?;
        let weights: &mut [f64] = match name {
            "beta" => &mut self.loss.beta,
            "lambda" => &mut self.loss.lambda,
            _ => &mut self.loss.alpha,
        };
        weights.get_mut(i)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        if let Some(slot) = self.weights_mut(key) {
            *slot = parse(key, v)?;
            return Ok(());
        }
        match key {
            "resolution" => (self.height, self.width) = parse_resolution(v)?,
            "k" => self.k = parse(key, v)?,
            "gating" => self.gating = v.parse()?,
            "gating.hidden" => self.gating_hidden = parse(key, v)?,
            "loss.class_weights" => self.loss.class_weights = parse_list(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "warp_net.depth" => self.warp_depth = parse(key, v)?,
            "warp_net.base_width" => self.warp_width = parse(key, v)?,
            "seg_net.depth" => self.seg_depth = parse(key, v)?,
            "seg_net.base_width" => self.seg_width = parse(key, v)?,
            "fusion_net.depth" => self.fusion_depth = parse(key, v)?,
            "fusion_net.base_width" => self.fusion_width = parse(key, v)?,
            "joint.seg_grad" => self.joint_seg_grad = parse(key, v)?,
            "data.train" => self.train_samples = parse(key, v)?,
            "data.held_out" => self.held_out_samples = parse(key, v)?,
            "data.amplitude" => self.amplitude = parse(key, v)?,
            "data.sigma" => self.sigma = parse(key, v)?,
            "data.dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out.dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some((name, i)) = weight_key(key) {
            let weights: &[f64] = match name {
                "beta" => &self.loss.beta,
                "lambda" => &self.loss.lambda,
                _ => &self.loss.alpha,
            };
            return weights.get(i).map(f64::to_string);
        }
        Some(match key {
            "resolution" => format!("{}x{}", self.height, self.width),
            "k" => self.k.to_string(),
            "gating" => self.gating.to_string(),
            "gating.hidden" => self.gating_hidden.to_string(),
            "loss.class_weights" => join(&self.loss.class_weights),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "tau" => self.tau.to_string(),
            "seed" => self.seed.to_string(),
            "warp_net.depth" => self.warp_depth.to_string(),
            "warp_net.base_width" => self.warp_width.to_string(),
            "seg_net.depth" => self.seg_depth.to_string(),
            "seg_net.base_width" => self.seg_width.to_string(),
            "fusion_net.depth" => self.fusion_depth.to_string(),
            "fusion_net.base_width" => self.fusion_width.to_string(),
            "joint.seg_grad" => self.joint_seg_grad.to_string(),
            "data.train" => self.train_samples.to_string(),
            "data.held_out" => self.held_out_samples.to_string(),
            "data.amplitude" => self.amplitude.to_string(),
            "data.sigma" => self.sigma.to_string(),
            "data.dir" => self
                .data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "out.dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// All keys with their current values, parseable by [`Config::parse_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// One line per key: name, default value and description.
    pub fn describe_keys() -> String {
        let d = Self::default();
        let mut out = String::new();
        for (key, help) in KEYS {
            let _ = writeln!(out, "  {key:<20} {help} [default: {}]", d.get(key).unwrap_or_default());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.synth().validate()?;
        self.loss.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.warp_depth < self.k + 1 {
            return Err(Error::Config(format!(
                "K = {} needs warp_net.depth ≥ {}, got {}",
                self.k,
                self.k + 1,
                self.warp_depth
            )));
        }
        if self.gating == GatingVariant::Residual && self.k < 1 {
            return Err(Error::Config("residual gating needs K ≥ 1".into()));
        }
        for net in [self.warp_net(), self.seg_net(), self.fusion_net()] {
            net.validate()?;
            net.check_extents(self.height, self.width)?;
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            height: self.height,
            width: self.width,
            amplitude: self.amplitude,
            sigma: self.sigma,
        }
    }

    pub fn gaf(&self) -> GafConfig {
        GafConfig {
            k: self.k,
            variant: self.gating,
            hidden: self.gating_hidden,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn warp_net(&self) -> SkipUNetConfig {
        SkipUNetConfig {
            in_channels: crate::pipeline::WARP_IN_CHANNELS,
            out_channels: 0,
            depth: self.warp_depth,
            base_width: self.warp_width,
            emit_decoder_features: true,
        }
    }

    pub fn seg_net(&self) -> SkipUNetConfig {
        SkipUNetConfig {
            in_channels: crate::pipeline::SEG_IN_CHANNELS,
            out_channels: crate::sample::CLOTHING_CLASSES,
            depth: self.seg_depth,
            base_width: self.seg_width,
            emit_decoder_features: false,
        }
    }

    pub fn fusion_net(&self) -> SkipUNetConfig {
        SkipUNetConfig {
            in_channels: crate::pipeline::FUSION_IN_CHANNELS,
            out_channels: crate::pipeline::FUSION_OUT_CHANNELS,
            depth: self.fusion_depth,
            base_width: self.fusion_width,
            emit_decoder_features: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let d = Config::default();
        d.validate().unwrap();
        assert_eq!(Config::parse_text(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn every_key_is_readable_and_documented() {
        let d = Config::default();
        for (key, _) in KEYS {
            let v = d.get(key).unwrap();
            let mut c = d.clone();
            c.set(key, &v).unwrap();
            assert_eq!(c, d, "{key}");
        }
        assert_eq!(Config::describe_keys().lines().count(), KEYS.len());
    }

    #[test]
    fn overrides_and_comments() {
        let c = Config::parse_text("# run\nresolution = 48x32\nk=2 # two\ngating = residual\nloss.alpha2 = 0.5\nloss.alpha3=2\n")
            .unwrap();
        assert_eq!((c.height, c.width, c.k), (48, 32, 2));
        assert_eq!(c.gating, GatingVariant::Residual);
        assert_eq!(c.loss.alpha, [1.0, 0.5, 2.0]);
    }

    #[test]
    fn bad_input_is_rejected() {
        for text in [
            "colour = red",
            "k",
            "lr = fast",
            "loss.beta = 1,2",
            "loss.beta5 = 1",
            "loss.alpha0 = 1",
            "loss.class_weights = 1,2",
            "resolution = 60x48",
            "k = 5",
            "gating = gru",
            "data.amplitude = 50",
        ] {
            assert!(matches!(Config::parse_text(text), Err(Error::Config(_))), "{text}");
        }
    }
}
