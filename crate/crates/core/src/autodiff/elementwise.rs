//! Pointwise, channel and reduction operations.

use super::tape::{Backward, GradSink, NodeId, Nodes, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Unary op whose adjoint is `grad ⊙ deriv` with `deriv` saved at forward time.
struct Pointwise<T> {
    inputs: [NodeId; 1],
    deriv: Vec<T>,
}

impl<T: Scalar> Backward<T> for Pointwise<T> {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, _: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>) {
        let buf = sink.buf(self.inputs[0]);
        for ((b, &g), &d) in buf.iter_mut().zip(grad).zip(&self.deriv) {
            *b = *b + g * d;
        }
    }
}

enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct Binary {
    inputs: [NodeId; 2],
    kind: BinaryKind,
}

impl<T: Scalar> Backward<T> for Binary {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, nodes: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>) {
        let [a, b] = self.inputs;
        match self.kind {
            BinaryKind::Add => {
                sink.add(a, grad);
                sink.add(b, grad);
            }
            BinaryKind::Sub => {
                sink.add(a, grad);
                if sink.wants(b) {
                    let buf = sink.buf(b);
                    buf.iter_mut().zip(grad).for_each(|(x, &g)| *x = *x - g);
                }
            }
            BinaryKind::Mul => {
                if sink.wants(a) {
                    let other = nodes.value(b).data();
                    let buf = sink.buf(a);
                    for ((x, &g), &o) in buf.iter_mut().zip(grad).zip(other) {
                        *x = *x + g * o;
                    }
                }
                if sink.wants(b) {
                    let other = nodes.value(a).data();
                    let buf = sink.buf(b);
                    for ((x, &g), &o) in buf.iter_mut().zip(grad).zip(other) {
                        *x = *x + g * o;
                    }
                }
            }
        }
    }
}

struct Affine<T> {
    inputs: [NodeId; 1],
    scale: T,
}

impl<T: Scalar> Backward<T> for Affine<T> {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, _: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>) {
        let buf = sink.buf(self.inputs[0]);
        buf.iter_mut()
            .zip(grad)
            .for_each(|(b, &g)| *b = *b + g * self.scale);
    }
}

struct ScaleChannels<T> {
    inputs: [NodeId; 1],
    scales: Vec<T>,
    plane: usize,
}

impl<T: Scalar> Backward<T> for ScaleChannels<T> {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, _: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>) {
        let buf = sink.buf(self.inputs[0]);
        for (c, &s) in self.scales.iter().enumerate() {
            let r = c * self.plane..(c + 1) * self.plane;
            buf[r.clone()]
                .iter_mut()
                .zip(&grad[r])
                .for_each(|(b, &g)| *b = *b + g * s);
        }
    }
}

struct BroadcastChannels {
    inputs: [NodeId; 1],
    channels: usize,
    plane: usize,
}

impl<T: Scalar> Backward<T> for BroadcastChannels {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, _: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>) {
        let buf = sink.buf(self.inputs[0]);
        for c in 0..self.channels {
            let g = &grad[c * self.plane..(c + 1) * self.plane];
            buf.iter_mut().zip(g).for_each(|(b, &g)| *b = *b + g);
        }
    }
}

struct Concat {
    inputs: Vec<NodeId>,
    lens: Vec<usize>,
}

impl<T: Scalar> Backward<T> for Concat {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, _: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>) {
        let mut offset = 0;
        for (&id, &len) in self.inputs.iter().zip(&self.lens) {
            sink.add(id, &grad[offset..offset + len]);
            offset += len;
        }
    }
}

struct SliceChannels {
    inputs: [NodeId; 1],
    offset: usize,
}

impl<T: Scalar> Backward<T> for SliceChannels {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, _: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>) {
        let buf = sink.buf(self.inputs[0]);
        buf[self.offset..self.offset + grad.len()]
            .iter_mut()
            .zip(grad)
            .for_each(|(b, &g)| *b = *b + g);
    }
}

struct Softmax<T> {
    inputs: [NodeId; 1],
    out: Vec<T>,
    channels: usize,
    plane: usize,
}

impl<T: Scalar> Backward<T> for Softmax<T> {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, _: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>) {
        let buf = sink.buf(self.inputs[0]);
        let p = self.plane;
        for i in 0..p {
            let dot = (0..self.channels)
                .map(|c| grad[c * p + i] * self.out[c * p + i])
                .fold(T::zero(), |a, b| a + b);
            for c in 0..self.channels {
                let k = c * p + i;
                buf[k] = buf[k] + self.out[k] * (grad[k] - dot);
            }
        }
    }
}

struct Reduce<T> {
    inputs: [NodeId; 1],
    scale: T,
}

impl<T: Scalar> Backward<T> for Reduce<T> {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, _: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>) {
        let g = grad[0] * self.scale;
        sink.buf(self.inputs[0]).iter_mut().for_each(|b| *b = *b + g);
    }
}

#[inline]
pub(crate) fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("shapes {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let f: fn(T, T) -> T = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
        };
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_op(
            value,
            Box::new(Binary {
                inputs: [a.0, b.0],
                kind,
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, BinaryKind::Mul)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push_op(
            value,
            Box::new(Affine {
                inputs: [x.0],
                scale,
            }),
        )
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    fn pointwise(&mut self, x: Var, f: impl Fn(T) -> (T, T)) -> Var {
        let input = self.value(x);
        let want = self.needs_grad(x);
        let mut out = Vec::with_capacity(input.len());
        let mut deriv = Vec::with_capacity(if want { input.len() } else { 0 });
        for &v in input.data() {
            let (y, d) = f(v);
            out.push(y);
            if want {
                deriv.push(d);
            }
        }
        let value = Tensor::new(input.shape().to_vec(), out).expect("same shape");
        self.push_op(
            value,
            Box::new(Pointwise {
                inputs: [x.0],
                deriv,
            }),
        )
    }

    /// Rectifier with `relu'(0) = 0`.
    pub fn relu(&mut self, x: Var) -> Var {
        self.pointwise(x, |v| {
            if v > T::zero() {
                (v, T::one())
            } else {
                (T::zero(), T::zero())
            }
        })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.pointwise(x, |v| {
            if v > T::zero() {
                (v, T::one())
            } else {
                (slope * v, slope)
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.pointwise(x, |v| {
            let s = stable_sigmoid(v);
            (s, s * (T::one() - s))
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.pointwise(x, |v| {
            let t = v.tanh();
            (t, T::one() - t * t)
        })
    }

    /// Absolute value with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.pointwise(x, |v| {
            let d = if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            (v.abs(), d)
        })
    }

    /// `ln(max(x, floor))`; no gradient where the floor is active.
    pub fn ln_floor(&mut self, x: Var, floor: T) -> Var {
        self.pointwise(x, |v| {
            if v > floor {
                (v.ln(), T::one() / v)
            } else {
                (floor.ln(), T::zero())
            }
        })
    }

    /// Huber-style smooth L1 with threshold `delta`.
    pub fn smooth_l1(&mut self, x: Var, delta: T) -> Var {
        let half = T::lit(0.5);
        self.pointwise(x, |v| {
            let a = v.abs();
            if a < delta {
                (half * v * v / delta, v / delta)
            } else {
                (a - half * delta, v.signum())
            }
        })
    }

    /// Multiplies channel `c` of a `C×H×W` tensor by `scales[c]`.
    pub fn scale_channels(&mut self, x: Var, scales: &[T]) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if scales.len() != c {
            return Err(Error::dim(
                "scale_channels",
                format!("{} scales for {c} channels", scales.len()),
            ));
        }
        let plane = h * w;
        let mut value = self.take_value(x);
        for (ch, &s) in scales.iter().enumerate() {
            value.data_mut()[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = *v * s);
        }
        Ok(self.push_op(
            value,
            Box::new(ScaleChannels {
                inputs: [x.0],
                scales: scales.to_vec(),
                plane,
            }),
        ))
    }

    /// Repeats a `1×H×W` tensor to `channels×H×W`.
    pub fn broadcast_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if c != 1 {
            return Err(Error::dim(
                "broadcast_channels",
                format!("channel axis must be 1, got {c}"),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(channels * h * w);
        for _ in 0..channels {
            data.extend_from_slice(src);
        }
        let value = Tensor::new(vec![channels, h, w], data)?;
        Ok(self.push_op(
            value,
            Box::new(BroadcastChannels {
                inputs: [x.0],
                channels,
                plane: h * w,
            }),
        ))
    }

    /// Concatenates `C×H×W` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_channels(&values)?;
        let lens = values.iter().map(|t| t.len()).collect();
        Ok(self.push_op(
            value,
            Box::new(Concat {
                inputs: parts.iter().map(|v| v.0).collect(),
                lens,
            }),
        ))
    }

    /// Channels `start..start+len` of a `C×H×W` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let value = src.channels(start, len)?;
        let (_, h, w) = src.dims3()?;
        Ok(self.push_op(
            value,
            Box::new(SliceChannels {
                inputs: [x.0],
                offset: start * h * w,
            }),
        ))
    }

    /// Per-pixel softmax across the channel axis.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (c, h, w) = src.dims3()?;
        let p = h * w;
        let d = src.data();
        let mut out = vec![T::zero(); d.len()];
        for i in 0..p {
            let m = (0..c).map(|ch| d[ch * p + i]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for ch in 0..c {
                let e = (d[ch * p + i] - m).exp();
                out[ch * p + i] = e;
                total = total + e;
            }
            for ch in 0..c {
                out[ch * p + i] = out[ch * p + i] / total;
            }
        }
        let saved = if self.needs_grad(x) { out.clone() } else { Vec::new() };
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push_op(
            value,
            Box::new(Softmax {
                inputs: [x.0],
                out: saved,
                channels: c,
                plane: p,
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_op(
            Tensor::scalar(s),
            Box::new(Reduce {
                inputs: [x.0],
                scale: T::one(),
            }),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let s = self.value(x).sum() / n;
        self.push_op(
            Tensor::scalar(s),
            Box::new(Reduce {
                inputs: [x.0],
                scale: T::one() / n,
            }),
        )
    }

    /// Sum of scalars, optionally weighted.
    pub fn weighted_sum(&mut self, terms: &[(T, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::dim(
                    "weighted_sum",
                    format!("term shape {:?} is not scalar", self.shape(v)),
                ));
            }
            let scaled = self.scale(v, w);
            acc = Some(match acc {
                Some(a) => self.add(a, scaled)?,
                None => scaled,
            });
        }
        Ok(acc.unwrap_or_else(|| self.constant(Tensor::scalar(T::zero()))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_on_zero_pixel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[7, 1, 1]));
        let y = tape.softmax_channels(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1]));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(stable_sigmoid(-1000.0f64), 0.0);
        assert_eq!(stable_sigmoid(1000.0f64), 1.0);
        assert!(stable_sigmoid(-50.0f32) > 0.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_twice_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.3, -1.2]).unwrap(), true);
        let t = tape.tanh(x);
        let sq = tape.mul(t, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let once = tape.grad(x).unwrap().clone();
        tape.backward(s).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract { .. })));
    }

    #[test]
    fn off_path_leaf_grad_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2], 1.5), true);
        let unused = tape.leaf(Tensor::full(&[3], 2.0), true);
        let _ = tape.relu(unused);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn adjoints_replay_in_reverse_order() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2], 0.5), true);
        let a = tape.sigmoid(x);
        let b = tape.mul(a, x).unwrap();
        let c = tape.tanh(b);
        let s = tape.mean(c);
        let report = tape.backward(s).unwrap();
        assert_eq!(report.visited, vec![s.id(), c.id(), b.id(), a.id()]);
    }

    #[test]
    fn clear_frees_everything() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[4]), true);
        let _ = tape.relu(x);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1, 2, 3]));
        assert!(matches!(
            tape.concat_channels(&[a, b]),
            Err(Error::Dimension { .. })
        ));
    }
}
