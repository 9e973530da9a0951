//! Skip-UNet backbone shared by the warp, segmentation and fusion stages.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

const MAX_WIDTH: usize = 128;
const NORM_EPS: f64 = 1e-5;
const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkipUNetConfig {
    pub in_channels: usize,
    /// Channels of the final 1×1 projection; 0 returns the last decoder
    /// feature map unprojected.
    pub out_channels: usize,
    /// Number of stride-2 encoder stages.
    pub depth: usize,
    pub base_width: usize,
    pub emit_decoder_features: bool,
}

impl SkipUNetConfig {
    /// Channel width at each resolution level, full resolution first.
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.depth)
            .map(|i| (self.base_width << i).min(MAX_WIDTH.max(self.base_width)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("unet depth must be ≥ 2, got {}", self.depth)));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("unet channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn check_extents(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "input {h}×{w} is not divisible by 2^{} = {f}",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct UNetOutput {
    pub output: Var,
    /// Decoder stage outputs from coarsest to finest (empty unless requested).
    pub decoder_features: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct SkipUNet {
    pub config: SkipUNetConfig,
    stem: ParamId,
    down: Vec<ParamId>,
    /// `up[i]` produces the decoder map at level `i` (resolution H/2^i).
    up: Vec<ParamId>,
    head: Option<(ParamId, ParamId)>,
}

impl SkipUNet {
    pub fn new<T: Scalar>(
        prefix: &str,
        config: SkipUNetConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.widths();
        let stem = store.conv_weight(format!("{prefix}.stem.weight"), c[0], config.in_channels, 3, rng);
        let down = (1..=config.depth)
            .map(|i| store.conv_weight(format!("{prefix}.down{i}.weight"), c[i], c[i - 1], 3, rng))
            .collect();
        let up = (0..config.depth)
            .map(|i| {
                store.conv_weight(format!("{prefix}.up{i}.weight"), c[i], c[i + 1] + c[i], 3, rng)
            })
            .collect();
        let head = (config.out_channels > 0).then(|| {
            let w = store.conv_weight(format!("{prefix}.out.weight"), config.out_channels, c[0], 1, rng);
            let b = store.zeros(format!("{prefix}.out.bias"), &[config.out_channels]);
            (w, b)
        });
        Ok(Self {
            config,
            stem,
            down,
            up,
            head,
        })
    }

    fn block<T: Scalar>(
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        weight: ParamId,
        stride: usize,
        leaky: bool,
    ) -> Result<Var> {
        let w = tape.param(store, weight);
        let y = tape.conv2d(x, w, None, stride, 1)?;
        let y = tape.instance_norm(y, T::lit(NORM_EPS))?;
        Ok(if leaky {
            tape.leaky_relu(y, T::lit(LEAK))
        } else {
            tape.relu(y)
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: Var,
    ) -> Result<UNetOutput> {
        let (c, h, w) = tape.value(input).dims3()?;
        if c != self.config.in_channels {
            return Err(Error::dim(
                "unet_forward",
                format!("input channels: expected {}, got {c}", self.config.in_channels),
            ));
        }
        self.config.check_extents(h, w)?;
        let mut skips = vec![Self::block(tape, store, input, self.stem, 1, true)?];
        for &wd in &self.down {
            let prev = *skips.last().unwrap();
            skips.push(Self::block(tape, store, prev, wd, 2, true)?);
        }
        let mut x = skips.pop().unwrap();
        let mut features = Vec::new();
        for level in (0..self.config.depth).rev() {
            let skip = skips[level];
            let (_, sh, sw) = tape.value(skip).dims3()?;
            let upx = tape.upsample_bilinear(x, sh, sw, false)?;
            let cat = tape.concat_channels(&[upx, skip])?;
            x = Self::block(tape, store, cat, self.up[level], 1, false)?;
            if self.config.emit_decoder_features {
                features.push(x);
            }
        }
        let output = match self.head {
            Some((wt, b)) => {
                let wv = tape.param(store, wt);
                let bv = tape.param(store, b);
                tape.conv2d(x, wv, Some(bv), 1, 0)?
            }
            None => x,
        };
        Ok(UNetOutput {
            output,
            decoder_features: features,
        })
    }
}
