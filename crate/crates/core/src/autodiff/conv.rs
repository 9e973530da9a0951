//! 2-D cross-correlation via im2col + GEMM.

use super::tape::{Backward, GradSink, NodeId, Nodes, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k_h * self.k_w
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Pointwise convolutions read the input buffer directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(g: &Geometry, input: &[T]) -> Vec<T> {
    let p = g.cols();
    let mut cols = vec![T::zero(); g.rows() * p];
    for c in 0..g.c {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(g: &Geometry, cols: &[T], out: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2d<T> {
    inputs: Vec<NodeId>,
    geom: Geometry,
    out_ch: usize,
    /// im2col buffer, kept only when the weight needs a gradient.
    cols: Vec<T>,
}

impl<T: Scalar> Backward<T> for Conv2d<T> {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, nodes: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>) {
        let g = &self.geom;
        let (input, weight) = (self.inputs[0], self.inputs[1]);
        let (o, r, p) = (self.out_ch, g.rows(), g.cols());
        if let Some(&bias) = self.inputs.get(2) {
            if sink.wants(bias) {
                let buf = sink.buf(bias);
                for (oc, b) in buf.iter_mut().enumerate() {
                    *b = *b + grad[oc * p..(oc + 1) * p].iter().copied().sum();
                }
            }
        }
        if sink.wants(weight) {
            let cols: &[T] = if g.is_pointwise() {
                nodes.value(input).data()
            } else {
                &self.cols
            };
            let buf = sink.buf(weight);
            T::gemm(
                o,
                p,
                r,
                T::one(),
                grad,
                (p as isize, 1),
                cols,
                (1, p as isize),
                T::one(),
                buf,
                (r as isize, 1),
            );
        }
        if sink.wants(input) {
            let w = nodes.value(weight).data();
            if g.is_pointwise() {
                let buf = sink.buf(input);
                T::gemm(
                    r,
                    o,
                    p,
                    T::one(),
                    w,
                    (1, r as isize),
                    grad,
                    (p as isize, 1),
                    T::one(),
                    buf,
                    (p as isize, 1),
                );
            } else {
                let mut dcols = vec![T::zero(); r * p];
                T::gemm(
                    r,
                    o,
                    p,
                    T::one(),
                    w,
                    (1, r as isize),
                    grad,
                    (p as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (p as isize, 1),
                );
                col2im(g, &dcols, sink.buf(input));
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of a `C×H×W` input with an `O×C×Kh×Kw` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let ws = self.shape(weight).to_vec();
        let [o, wc, k_h, k_w] = ws[..] else {
            return Err(Error::dim(
                "conv2d",
                format!("weight must be rank 4 (out, in, kh, kw), got {ws:?}"),
            ));
        };
        if wc != c {
            return Err(Error::dim(
                "conv2d",
                format!("input channels: input has {c}, weight expects {wc}"),
            ));
        }
        if k_h % 2 == 0 || k_w % 2 == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("kernel height/width must be odd, got {k_h}×{k_w}"),
            ));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be ≥ 1"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias length {:?} vs output channels {o}", self.shape(b)),
                ));
            }
        }
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < k_h || span_w < k_w {
            return Err(Error::dim(
                "conv2d",
                format!("height/width {h}×{w} with padding {padding} smaller than kernel {k_h}×{k_w}"),
            ));
        }
        let geom = Geometry {
            c,
            h,
            w,
            k_h,
            k_w,
            stride,
            pad: padding,
            out_h: (span_h - k_h) / stride + 1,
            out_w: (span_w - k_w) / stride + 1,
        };
        let (r, p) = (geom.rows(), geom.cols());
        let cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            im2col(&geom, self.value(input).data())
        };
        let mut out = vec![T::zero(); o * p];
        if let Some(b) = bias {
            for (oc, &bv) in self.value(b).data().iter().enumerate() {
                out[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v = bv);
            }
        }
        {
            let b_mat: &[T] = if geom.is_pointwise() {
                self.value(input).data()
            } else {
                &cols
            };
            T::gemm(
                o,
                r,
                p,
                T::one(),
                self.value(weight).data(),
                (r as isize, 1),
                b_mat,
                (p as isize, 1),
                T::one(),
                &mut out,
                (p as isize, 1),
            );
        }
        let value = Tensor::new(vec![o, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![input.0, weight.0];
        inputs.extend(bias.map(|b| b.0));
        let keep_cols = self.needs_grad(weight) && !geom.is_pointwise();
        Ok(self.push_op(
            value,
            Box::new(Conv2d {
                inputs,
                geom,
                out_ch: o,
                cols: if keep_cols { cols } else { Vec::new() },
            }),
        ))
    }
}
