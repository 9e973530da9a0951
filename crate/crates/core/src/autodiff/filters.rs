//! Instance normalization and fixed spatial filters.

use super::tape::{Backward, GradSink, NodeId, Nodes, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct InstanceNorm<T> {
    inputs: [NodeId; 1],
    out: Vec<T>,
    inv_std: Vec<T>,
    plane: usize,
}

impl<T: Scalar> Backward<T> for InstanceNorm<T> {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, _: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>) {
        let p = self.plane;
        let n = T::lit(p as f64);
        let buf = sink.buf(self.inputs[0]);
        for (c, &s) in self.inv_std.iter().enumerate() {
            let r = c * p..(c + 1) * p;
            let (g, y) = (&grad[r.clone()], &self.out[r.clone()]);
            let mean_g = g.iter().copied().sum::<T>() / n;
            let mean_gy = g.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / n;
            for ((b, &gi), &yi) in buf[r].iter_mut().zip(g).zip(y) {
                *b = *b + s * (gi - mean_g - yi * mean_gy);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Horizontal (width).
    X,
    /// Vertical (height).
    Y,
}

struct Diff {
    inputs: [NodeId; 1],
    axis: Axis,
    dims: (usize, usize, usize),
}

impl<T: Scalar> Backward<T> for Diff {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, _: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>) {
        let (c, h, w) = self.dims;
        let buf = sink.buf(self.inputs[0]);
        match self.axis {
            Axis::X => {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w - 1 {
                            let g = grad[(ch * h + y) * (w - 1) + x];
                            let i = (ch * h + y) * w + x;
                            buf[i + 1] = buf[i + 1] + g;
                            buf[i] = buf[i] - g;
                        }
                    }
                }
            }
            Axis::Y => {
                for ch in 0..c {
                    for y in 0..h - 1 {
                        for x in 0..w {
                            let g = grad[(ch * (h - 1) + y) * w + x];
                            let i = (ch * h + y) * w + x;
                            buf[i + w] = buf[i + w] + g;
                            buf[i] = buf[i] - g;
                        }
                    }
                }
            }
        }
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Reflection index for one pixel of padding (`-1 → 1`, `n → n - 2`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * n - 2 - i as usize
    } else {
        i as usize
    }
}

fn sobel_kernel(axis: Axis) -> &'static [[f64; 3]; 3] {
    match axis {
        Axis::X => &SOBEL_X,
        Axis::Y => &SOBEL_Y,
    }
}

struct Sobel {
    inputs: [NodeId; 1],
    axis: Axis,
    dims: (usize, usize, usize),
}

impl<T: Scalar> Backward<T> for Sobel {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, _: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>) {
        let (c, h, w) = self.dims;
        let k = sobel_kernel(self.axis);
        let buf = sink.buf(self.inputs[0]);
        for ch in 0..c {
            let off = ch * h * w;
            for y in 0..h {
                for x in 0..w {
                    let g = grad[off + y * w + x];
                    for (ki, row) in k.iter().enumerate() {
                        let sy = reflect(y as isize + ki as isize - 1, h);
                        for (kj, &kv) in row.iter().enumerate() {
                            if kv == 0.0 {
                                continue;
                            }
                            let sx = reflect(x as isize + kj as isize - 1, w);
                            let i = off + sy * w + sx;
                            buf[i] = buf[i] + g * T::lit(kv);
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Per-channel normalization over the spatial axes (no affine part).
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let p = h * w;
        let n = T::lit(p as f64);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let r = ch * p..(ch + 1) * p;
            let mean = src[r.clone()].iter().copied().sum::<T>() / n;
            let var = src[r.clone()]
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / n;
            let s = T::one() / (var + eps).sqrt();
            inv_std.push(s);
            for (o, &v) in out[r.clone()].iter_mut().zip(&src[r]) {
                *o = (v - mean) * s;
            }
        }
        let saved = if self.needs_grad(x) { out.clone() } else { Vec::new() };
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push_op(
            value,
            Box::new(InstanceNorm {
                inputs: [x.0],
                out: saved,
                inv_std,
                plane: p,
            }),
        ))
    }

    /// Forward differences along one spatial axis; the output is one
    /// pixel shorter on that axis.
    pub fn spatial_diff(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let value = match axis {
            Axis::X => {
                if w < 2 {
                    return Err(Error::dim("spatial_diff", "width must be ≥ 2"));
                }
                let mut out = Vec::with_capacity(c * h * (w - 1));
                for row in src.chunks(w) {
                    out.extend(row.windows(2).map(|p| p[1] - p[0]));
                }
                Tensor::new(vec![c, h, w - 1], out)?
            }
            Axis::Y => {
                if h < 2 {
                    return Err(Error::dim("spatial_diff", "height must be ≥ 2"));
                }
                let mut out = Vec::with_capacity(c * (h - 1) * w);
                for plane in src.chunks(h * w) {
                    for y in 0..h - 1 {
                        out.extend((0..w).map(|x| plane[(y + 1) * w + x] - plane[y * w + x]));
                    }
                }
                Tensor::new(vec![c, h - 1, w], out)?
            }
        };
        Ok(self.push_op(
            value,
            Box::new(Diff {
                inputs: [x.0],
                axis,
                dims: (c, h, w),
            }),
        ))
    }

    /// 3×3 Sobel response per channel with one pixel of reflection padding.
    pub fn sobel(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if h < 2 || w < 2 {
            return Err(Error::dim(
                "sobel",
                format!("reflection padding needs height/width ≥ 2, got {h}×{w}"),
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let two = T::lit(2.0);
        // Separable form: [1, 2, 1] smoothing across the axis, central
        // difference along it. Both halves round identically, so constant
        // regions give exactly zero.
        for ch in 0..c {
            let p = &src[ch * h * w..(ch + 1) * h * w];
            let at = |y: isize, x: isize| p[reflect(y, h) * w + reflect(x, w)];
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let v = match axis {
                        Axis::X => {
                            let s = |xx| at(y - 1, xx) + two * at(y, xx) + at(y + 1, xx);
                            s(x + 1) - s(x - 1)
                        }
                        Axis::Y => {
                            let s = |yy| at(yy, x - 1) + two * at(yy, x) + at(yy, x + 1);
                            s(y + 1) - s(y - 1)
                        }
                    };
                    out[ch * h * w + y as usize * w + x as usize] = v;
                }
            }
        }
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push_op(
            value,
            Box::new(Sobel {
                inputs: [x.0],
                axis,
                dims: (c, h, w),
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_norm_zero_mean_unit_variance() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 3], |i| (i * i % 7) as f64));
        let y = tape.instance_norm(x, 0.0).unwrap();
        for ch in tape.value(y).data().chunks(9) {
            let m: f64 = ch.iter().sum::<f64>() / 9.0;
            let v: f64 = ch.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 9.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reflection_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
    }

    #[test]
    fn sobel_of_horizontal_ramp() {
        // Unit-slope ramp: interior rows see (x+1)-(x-1) = 2, weighted 1+2+1.
        // Reflected borders see equal neighbours on both sides.
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 3, 4], |i| (i % 4) as f64));
        let gx = tape.sobel(x, Axis::X).unwrap();
        let gy = tape.sobel(x, Axis::Y).unwrap();
        let out = tape.value(gx).data();
        for row in out.chunks(4) {
            assert_eq!(row, &[0.0, 8.0, 8.0, 0.0]);
        }
        assert!(tape.value(gy).data().iter().all(|&v| v == 0.0));
    }
}
