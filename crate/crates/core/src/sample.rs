//! One try-on training example and its channel contract.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp::FlowField;

pub const CLOTHING_CLASSES: usize = 7;
pub const BODY_PART_CLASSES: usize = 11;
pub const POSE_CHANNELS: usize = 18;
pub const HEAD_CHANNELS: usize = 3;
/// Silhouette, pose heatmaps, head region, body-part one-hot.
pub const PRIOR_CHANNELS: usize = 1 + POSE_CHANNELS + HEAD_CHANNELS + BODY_PART_CLASSES;
pub const UV_CHANNELS: usize = 2;
/// Clothing-segmentation class covered by the garment.
pub const GARMENT_CLASS: usize = 1;

/// Offsets of the prior groups inside the prior tensor.
pub mod prior {
    pub const SILHOUETTE: usize = 0;
    pub const POSE: usize = 1;
    pub const HEAD: usize = 19;
    pub const BODY_PARTS: usize = 22;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TryOnSample {
    /// Flat garment image `3×H×W`.
    pub garment: Tensor<f32>,
    pub garment_mask: Tensor<f32>,
    /// Model wearing the garment `3×H×W`.
    pub model: Tensor<f32>,
    /// Garment region on the model `1×H×W`.
    pub model_garment_mask: Tensor<f32>,
    pub priors: Tensor<f32>,
    /// One-hot clothing segmentation `7×H×W`.
    pub clothing_seg: Tensor<f32>,
    /// One-hot body-part segmentation `11×H×W`.
    pub body_parts: Tensor<f32>,
    pub uv: Tensor<f32>,
    /// Backward flow from the model layout to the flat garment, zero off the garment.
    pub gt_flow: Option<FlowField<f32>>,
}

fn expect(name: &str, t: &Tensor<f32>, c: usize, h: usize, w: usize) -> Result<()> {
    if t.shape() != [c, h, w] {
        return Err(Error::dim(
            "try_on_sample",
            format!("{name}: expected {c}×{h}×{w}, got {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn in_unit_range(name: &str, t: &Tensor<f32>) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::contract("try_on_sample", format!("{name} value {v} outside [0, 1]")));
    }
    Ok(())
}

fn one_hot(name: &str, t: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = t.dims3()?;
    let plane = h * w;
    for p in 0..plane {
        let mut ones = 0;
        for ch in 0..c {
            let v = t.data()[ch * plane + p];
            if v == 1.0 {
                ones += 1;
            } else if v != 0.0 {
                return Err(Error::contract(
                    "try_on_sample",
                    format!("{name} is not one-hot at pixel {p}: {v}"),
                ));
            }
        }
        if ones != 1 {
            return Err(Error::contract(
                "try_on_sample",
                format!("{name} has {ones} active classes at pixel {p}"),
            ));
        }
    }
    Ok(())
}

impl TryOnSample {
    pub fn height(&self) -> usize {
        self.model.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.model.shape()[2]
    }

    /// Checks channel counts, value ranges and one-hot encodings.
    pub fn validate(&self) -> Result<()> {
        let (_, h, w) = self.model.dims3()?;
        expect("garment", &self.garment, 3, h, w)?;
        expect("garment_mask", &self.garment_mask, 1, h, w)?;
        expect("model", &self.model, 3, h, w)?;
        expect("model_garment_mask", &self.model_garment_mask, 1, h, w)?;
        expect("priors", &self.priors, PRIOR_CHANNELS, h, w)?;
        expect("clothing_seg", &self.clothing_seg, CLOTHING_CLASSES, h, w)?;
        expect("body_parts", &self.body_parts, BODY_PART_CLASSES, h, w)?;
        expect("uv", &self.uv, UV_CHANNELS, h, w)?;
        if let Some(f) = &self.gt_flow {
            expect("gt_flow", f.tensor(), 2, h, w)?;
        }
        for (name, t) in [
            ("garment", &self.garment),
            ("garment_mask", &self.garment_mask),
            ("model", &self.model),
            ("model_garment_mask", &self.model_garment_mask),
            ("priors", &self.priors),
            ("uv", &self.uv),
        ] {
            in_unit_range(name, t)?;
        }
        one_hot("clothing_seg", &self.clothing_seg)?;
        one_hot("body_parts", &self.body_parts)?;
        Ok(())
    }
}

/// One-hot encoding of class labels as `classes×H×W`.
pub fn one_hot_from_labels(labels: &[u8], classes: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    if labels.len() != h * w {
        return Err(Error::dim("one_hot", format!("{} labels for {h}×{w}", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::contract("one_hot", format!("label {l} ≥ {classes} classes")));
    }
    let plane = h * w;
    Ok(Tensor::from_fn(&[classes, h, w], |i| {
        (labels[i % plane] as usize == i / plane) as u8 as f32
    }))
}
