//! Bilinear resampling: resize, pooling and flow-driven grid sampling.

use super::tape::{Backward, GradSink, NodeId, Nodes, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Interpolation taps `(lo, hi, frac)` for each output coordinate along one axis.
pub(crate) fn axis_taps<T: Scalar>(
    in_len: usize,
    out_len: usize,
    align_corners: bool,
) -> Vec<(usize, usize, T)> {
    let last = (in_len - 1) as f64;
    (0..out_len)
        .map(|d| {
            let src = if align_corners {
                if out_len == 1 {
                    0.0
                } else {
                    d as f64 * last / (out_len - 1) as f64
                }
            } else {
                ((d as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, last)
            };
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, T::lit(src - lo as f64))
        })
        .collect()
}

struct Upsample<T> {
    inputs: [NodeId; 1],
    in_hw: (usize, usize),
    ys: Vec<(usize, usize, T)>,
    xs: Vec<(usize, usize, T)>,
    channels: usize,
}

impl<T: Scalar> Backward<T> for Upsample<T> {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, _: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>) {
        let (h, w) = self.in_hw;
        let (oh, ow) = (self.ys.len(), self.xs.len());
        let buf = sink.buf(self.inputs[0]);
        for c in 0..self.channels {
            let src = &mut buf[c * h * w..(c + 1) * h * w];
            let g = &grad[c * oh * ow..(c + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in self.ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.xs.iter().enumerate() {
                    let gv = g[oy * ow + ox];
                    let top = gv * (T::one() - fy);
                    let bot = gv * fy;
                    src[y0 * w + x0] = src[y0 * w + x0] + top * (T::one() - fx);
                    src[y0 * w + x1] = src[y0 * w + x1] + top * fx;
                    src[y1 * w + x0] = src[y1 * w + x0] + bot * (T::one() - fx);
                    src[y1 * w + x1] = src[y1 * w + x1] + bot * fx;
                }
            }
        }
    }
}

struct AvgPool {
    inputs: [NodeId; 1],
    factor: usize,
    dims: (usize, usize, usize),
}

impl<T: Scalar> Backward<T> for AvgPool {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, _: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>) {
        let (c, h, w) = self.dims;
        let k = self.factor;
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / T::lit((k * k) as f64);
        let buf = sink.buf(self.inputs[0]);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let g = grad[(ch * oh + y / k) * ow + x / k];
                    let i = (ch * h + y) * w + x;
                    buf[i] = buf[i] + g * inv;
                }
            }
        }
    }
}

/// Bilinear sample of channel planes at `(sx, sy)`, both already clamped.
#[derive(Clone, Copy)]
struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    /// Whether the unclamped coordinate lay strictly inside the image.
    inside_x: bool,
    inside_y: bool,
}

#[inline]
fn tap<T: Scalar>(sx: T, sy: T, h: usize, w: usize) -> Tap<T> {
    let (max_x, max_y) = (T::lit((w - 1) as f64), T::lit((h - 1) as f64));
    let inside_x = sx > T::zero() && sx < max_x;
    let inside_y = sy > T::zero() && sy < max_y;
    let cx = sx.max(T::zero()).min(max_x);
    let cy = sy.max(T::zero()).min(max_y);
    let x0 = cx.floor().to_usize().unwrap_or(0).min(w - 1);
    let y0 = cy.floor().to_usize().unwrap_or(0).min(h - 1);
    Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: cx - T::lit(x0 as f64),
        fy: cy - T::lit(y0 as f64),
        inside_x,
        inside_y,
    }
}

/// Backward warp: `out(c, y, x) = image(c, y + v, x + u)` with border clamping.
pub(crate) fn warp_forward<T: Scalar>(image: &[T], flow: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); c * plane];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let t = tap(
                T::lit(x as f64) + flow[i],
                T::lit(y as f64) + flow[plane + i],
                h,
                w,
            );
            for ch in 0..c {
                let img = &image[ch * plane..(ch + 1) * plane];
                let top = img[t.y0 * w + t.x0] * (T::one() - t.fx) + img[t.y0 * w + t.x1] * t.fx;
                let bot = img[t.y1 * w + t.x0] * (T::one() - t.fx) + img[t.y1 * w + t.x1] * t.fx;
                out[ch * plane + i] = top * (T::one() - t.fy) + bot * t.fy;
            }
        }
    }
    out
}

struct Warp {
    inputs: [NodeId; 2],
    dims: (usize, usize, usize),
}

impl<T: Scalar> Backward<T> for Warp {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, nodes: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>) {
        let (c, h, w) = self.dims;
        let plane = h * w;
        let [img_id, flow_id] = self.inputs;
        let image = nodes.value(img_id).data();
        let flow = nodes.value(flow_id).data();
        let want_img = sink.wants(img_id);
        let want_flow = sink.wants(flow_id);
        let mut d_flow = if want_flow {
            vec![T::zero(); 2 * plane]
        } else {
            Vec::new()
        };
        let mut d_img = if want_img {
            vec![T::zero(); c * plane]
        } else {
            Vec::new()
        };
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let t = tap(
                    T::lit(x as f64) + flow[i],
                    T::lit(y as f64) + flow[plane + i],
                    h,
                    w,
                );
                let (mut du, mut dv) = (T::zero(), T::zero());
                for ch in 0..c {
                    let g = grad[ch * plane + i];
                    let off = ch * plane;
                    if want_img {
                        let d = &mut d_img[off..off + plane];
                        d[t.y0 * w + t.x0] = d[t.y0 * w + t.x0] + g * (T::one() - t.fx) * (T::one() - t.fy);
                        d[t.y0 * w + t.x1] = d[t.y0 * w + t.x1] + g * t.fx * (T::one() - t.fy);
                        d[t.y1 * w + t.x0] = d[t.y1 * w + t.x0] + g * (T::one() - t.fx) * t.fy;
                        d[t.y1 * w + t.x1] = d[t.y1 * w + t.x1] + g * t.fx * t.fy;
                    }
                    if want_flow {
                        let img = &image[off..off + plane];
                        let (a, b) = (img[t.y0 * w + t.x0], img[t.y0 * w + t.x1]);
                        let (cc, d) = (img[t.y1 * w + t.x0], img[t.y1 * w + t.x1]);
                        if t.inside_x {
                            du = du + g * ((b - a) * (T::one() - t.fy) + (d - cc) * t.fy);
                        }
                        if t.inside_y {
                            dv = dv + g * ((cc - a) * (T::one() - t.fx) + (d - b) * t.fx);
                        }
                    }
                }
                if want_flow {
                    d_flow[i] = du;
                    d_flow[plane + i] = dv;
                }
            }
        }
        if want_img {
            sink.add(img_id, &d_img);
        }
        if want_flow {
            sink.add(flow_id, &d_flow);
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Bilinear resize of a `C×H×W` tensor.
    pub fn upsample_bilinear(
        &mut self,
        x: Var,
        out_h: usize,
        out_w: usize,
        align_corners: bool,
    ) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim(
                "upsample_bilinear",
                format!("target height/width {out_h}×{out_w} must be ≥ 1"),
            ));
        }
        let ys = axis_taps::<T>(h, out_h, align_corners);
        let xs = axis_taps::<T>(w, out_w, align_corners);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            let p = &src[ch * h * w..(ch + 1) * h * w];
            let o = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = p[y0 * w + x0] * (T::one() - fx) + p[y0 * w + x1] * fx;
                    let bot = p[y1 * w + x0] * (T::one() - fx) + p[y1 * w + x1] * fx;
                    o[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::new(vec![c, out_h, out_w], out)?;
        Ok(self.push_op(
            value,
            Box::new(Upsample {
                inputs: [x.0],
                in_hw: (h, w),
                ys,
                xs,
                channels: c,
            }),
        ))
    }

    /// Non-overlapping `factor × factor` average pooling.
    pub fn avg_pool2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::dim(
                "avg_pool2d",
                format!("height/width {h}×{w} not divisible by factor {factor}"),
            ));
        }
        let (oh, ow) = (h / factor, w / factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        let inv = T::one() / T::lit((factor * factor) as f64);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let o = (ch * oh + y / factor) * ow + x / factor;
                    out[o] = out[o] + src[(ch * h + y) * w + x] * inv;
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push_op(
            value,
            Box::new(AvgPool {
                inputs: [x.0],
                factor,
                dims: (c, h, w),
            }),
        ))
    }

    /// Samples `image` at `(x + u, y + v)` for each pixel, clamping to the border.
    /// `flow` is `2×H×W` with channel 0 horizontal and channel 1 vertical.
    pub fn warp_with_flow(&mut self, image: Var, flow: Var) -> Result<Var> {
        let (c, h, w) = self.value(image).dims3()?;
        let (fc, fh, fw) = self.value(flow).dims3()?;
        if fc != 2 {
            return Err(Error::dim(
                "warp_with_flow",
                format!("flow channel axis must be 2, got {fc}"),
            ));
        }
        if (fh, fw) != (h, w) {
            return Err(Error::dim(
                "warp_with_flow",
                format!("height/width: image {h}×{w}, flow {fh}×{fw}"),
            ));
        }
        let out = warp_forward(self.value(image).data(), self.value(flow).data(), c, h, w);
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push_op(
            value,
            Box::new(Warp {
                inputs: [image.0, flow.0],
                dims: (c, h, w),
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_upsamples_to_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 1], 5.0));
        let y = tape.upsample_bilinear(x, 2, 2, false).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0; 4]);
    }

    #[test]
    fn align_corners_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 2.0]).unwrap());
        let y = tape.upsample_bilinear(x, 1, 4, true).unwrap();
        let expect = [0.0, 2.0 / 3.0, 4.0 / 3.0, 2.0];
        for (a, b) in tape.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn upsample_then_pool_keeps_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 3, 2], -1.25));
        let up = tape.upsample_bilinear(x, 6, 4, false).unwrap();
        let back = tape.avg_pool2d(up, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn warp_rejects_extent_mismatch() {
        let mut tape = Tape::<f32>::new();
        let img = tape.constant(Tensor::zeros(&[3, 4, 4]));
        let flow = tape.constant(Tensor::zeros(&[2, 4, 5]));
        assert!(matches!(
            tape.warp_with_flow(img, flow),
            Err(Error::Dimension { .. })
        ));
    }
}
