//! Image-quality and segmentation metrics, evaluated in 64-bit.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_pair<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    a.dims3()
}

fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of one `h × w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, &kv)| kv * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, &kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over channels and valid window positions,
/// using an 11×11 Gaussian window (σ = 1.5). Images smaller than the window
/// use the largest odd window that fits.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (c, h, w) = check_pair("ssim", a, b)?;
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian(size, SSIM_SIGMA);
    let plane = h * w;
    let (mut total, mut count) = (0.0, 0usize);
    for ch in 0..c {
        let x: Vec<f64> = a.channel(ch).iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = b.channel(ch).iter().map(|v| v.as_f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        debug_assert_eq!(x.len(), plane);
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            let num = (2.0 * ux * uy + C1) * (2.0 * cov + C2);
            let den = (ux * ux + uy * uy + C1) * (vx + vy + C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair("mse", a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2))
        .sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(1 / MSE)` for images in `[0, 1]`; `+∞` when the images are equal.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    })
}

fn argmax_per_pixel<T: Scalar>(t: &Tensor<T>) -> Result<Vec<usize>> {
    let (c, h, w) = t.dims3()?;
    let plane = h * w;
    Ok((0..plane)
        .map(|p| {
            (0..c)
                .max_by(|&i, &j| {
                    let (a, b) = (t.data()[i * plane + p], t.data()[j * plane + p]);
                    a.partial_cmp(&b).unwrap_or(std::cmp::Ordering::Equal).then(j.cmp(&i))
                })
                .unwrap_or(0)
        })
        .collect())
}

/// Fraction of pixels whose arg-max class matches the target's.
pub fn pixel_accuracy<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_pair("pixel_accuracy", pred, target)?;
    let (p, t) = (argmax_per_pixel(pred)?, argmax_per_pixel(target)?);
    let hits = p.iter().zip(&t).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / p.len() as f64)
}

/// Class label maps (arg-max) for a probability or one-hot tensor.
pub fn labels<T: Scalar>(t: &Tensor<T>) -> Result<Vec<usize>> {
    argmax_per_pixel(t)
}

/// Accuracy of always predicting the most frequent class over `targets`.
pub fn majority_baseline<T: Scalar>(targets: &[&Tensor<T>]) -> Result<f64> {
    let mut counts = Vec::new();
    let mut total = 0usize;
    for t in targets {
        for l in argmax_per_pixel(t)? {
            if l >= counts.len() {
                counts.resize(l + 1, 0usize);
            }
            counts[l] += 1;
            total += 1;
        }
    }
    let best = counts.into_iter().max().unwrap_or(0);
    Ok(if total == 0 { 0.0 } else { best as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: f64) -> Tensor<f64> {
        Tensor::from_fn(&[3, 16, 12], |i| (i as f64 * seed).sin() * 0.5 + 0.5)
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a = img(0.7);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let (a, b) = (img(0.7), img(1.3));
        let s = ssim(&a, &b).unwrap();
        assert_eq!(s, ssim(&b, &a).unwrap());
        assert!((-1.0..1.0).contains(&s));
    }

    #[test]
    fn ssim_window_is_normalized_gaussian() {
        let g = gaussian(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
        assert!(g[5] > g[4]);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        // Constant images have zero variance, leaving the luminance term
        // (2ab + C1) / (a² + b² + C1).
        let a = Tensor::full(&[1, 12, 12], 0.2);
        let b = Tensor::full(&[1, 12, 12], 0.6);
        let want = (2.0 * 0.2 * 0.6 + C1) / (0.04 + 0.36 + C1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::full(&[3, 4, 4], 0.5);
        let b = Tensor::full(&[3, 4, 4], 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn accuracy_and_majority() {
        let target = Tensor::new(vec![2, 1, 4], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let pred = Tensor::new(vec![2, 1, 4], vec![0.9, 0.2, 0.6, 0.4, 0.1, 0.8, 0.4, 0.6]).unwrap();
        assert_eq!(pixel_accuracy(&pred, &target).unwrap(), 0.75);
        assert_eq!(majority_baseline(&[&target]).unwrap(), 0.75);
        assert_eq!(labels(&target).unwrap(), vec![0, 0, 0, 1]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = Tensor::<f64>::zeros(&[3, 4, 4]);
        let b = Tensor::<f64>::zeros(&[3, 4, 5]);
        assert!(ssim(&a, &b).is_err());
        assert!(psnr(&a, &b).is_err());
    }
}
