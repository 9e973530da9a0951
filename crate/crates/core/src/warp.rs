//! Appearance-flow warping, flow resizing and a thin-plate-spline baseline.
//!
//! Flows are backward maps in pixel units: output pixel `(x, y)` samples the
//! source at `(x + u, y + v)`, clamped to the image border.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{warp_forward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-pixel displacement map `2×H×W`: channel 0 is `u` (horizontal),
/// channel 1 is `v` (vertical).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T>(Tensor<T>);

impl<T: Scalar> FlowField<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let (c, _, _) = t.dims3()?;
        if c != 2 {
            return Err(Error::dim(
                "flow_field",
                format!("channel axis must be 2, got {c}"),
            ));
        }
        if !t.all_finite() {
            return Err(Error::Numerical("flow field contains NaN or Inf".into()));
        }
        Ok(Self(t))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Tensor::zeros(&[2, h, w]))
    }

    pub fn constant(h: usize, w: usize, u: T, v: T) -> Self {
        let plane = h * w;
        Self(Tensor::from_fn(&[2, h, w], |i| if i < plane { u } else { v }))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn u(&self) -> &[T] {
        self.0.channel(0)
    }

    pub fn v(&self) -> &[T] {
        self.0.channel(1)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    /// Zeroes the displacement wherever `mask` is below one half.
    pub fn masked(&self, mask: &[T]) -> Self {
        let plane = self.height() * self.width();
        let half = T::lit(0.5);
        Self(Tensor::from_fn(&[2, self.height(), self.width()], |i| {
            if mask[i % plane] >= half {
                self.0.data()[i]
            } else {
                T::zero()
            }
        }))
    }
}

/// Non-differentiable convenience wrapper around the grid sampler.
pub fn warp_with_flow<T: Scalar>(image: &Tensor<T>, flow: &FlowField<T>) -> Result<Tensor<T>> {
    let (c, h, w) = image.dims3()?;
    if (flow.height(), flow.width()) != (h, w) {
        return Err(Error::dim(
            "warp_with_flow",
            format!(
                "height/width: image {h}×{w}, flow {}×{}",
                flow.height(),
                flow.width()
            ),
        ));
    }
    let out = warp_forward(image.data(), flow.tensor().data(), c, h, w);
    Tensor::new(vec![c, h, w], out)
}

/// Bilinear resize of a flow on the tape, rescaling displacements so they stay
/// in target-resolution pixels.
pub fn resize_flow_var<T: Scalar>(
    tape: &mut Tape<T>,
    flow: Var,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let (c, h, w) = tape.value(flow).dims3()?;
    if c != 2 {
        return Err(Error::dim(
            "resize_flow",
            format!("channel axis must be 2, got {c}"),
        ));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(flow);
    }
    let up = tape.upsample_bilinear(flow, out_h, out_w, false)?;
    let scales = [
        T::lit(out_w as f64 / w as f64),
        T::lit(out_h as f64 / h as f64),
    ];
    tape.scale_channels(up, &scales)
}

pub fn resize_flow<T: Scalar>(flow: &FlowField<T>, out_h: usize, out_w: usize) -> Result<FlowField<T>> {
    let mut tape = Tape::inference();
    let v = tape.constant(flow.tensor().clone());
    let r = resize_flow_var(&mut tape, v, out_h, out_w)?;
    FlowField::new(tape.take_value(r))
}

/// Mean Euclidean distance between displacement vectors.
pub fn endpoint_error<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<f64> {
    masked_endpoint_error(pred, gt, None)
}

/// Endpoint error averaged over pixels where `mask ≥ 0.5` (all pixels when
/// `mask` is `None`). Returns 0 for an empty mask.
pub fn masked_endpoint_error<T: Scalar>(
    pred: &FlowField<T>,
    gt: &FlowField<T>,
    mask: Option<&[T]>,
) -> Result<f64> {
    if pred.tensor().shape() != gt.tensor().shape() {
        return Err(Error::dim(
            "endpoint_error",
            format!("{:?} vs {:?}", pred.tensor().shape(), gt.tensor().shape()),
        ));
    }
    let (pu, pv, gu, gv) = (pred.u(), pred.v(), gt.u(), gt.v());
    let (mut total, mut count) = (0.0f64, 0usize);
    for i in 0..pu.len() {
        if mask.is_some_and(|m| m[i].as_f64() < 0.5) {
            continue;
        }
        let du = (pu[i] - gu[i]).as_f64();
        let dv = (pv[i] - gv[i]).as_f64();
        total += du.hypot(dv);
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Thin-plate spline mapping output-image points to source-image points.
#[derive(Clone, Debug)]
pub struct ThinPlateSpline {
    centers: Vec<(f64, f64)>,
    /// Radial weights for the x and y targets.
    weights: [Vec<f64>; 2],
    /// Affine coefficients `(a0, ax, ay)` for x and y.
    affine: [[f64; 3]; 2],
}

#[inline]
fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

impl ThinPlateSpline {
    /// Fits the spline sending each `from[i]` exactly to `to[i]`.
    pub fn fit(from: &[(f64, f64)], to: &[(f64, f64)]) -> Result<Self> {
        let n = from.len();
        if n != to.len() {
            return Err(Error::contract(
                "tps",
                format!("{n} source points vs {} target points", to.len()),
            ));
        }
        if n < 3 {
            return Err(Error::contract("tps", "at least 3 control points required"));
        }
        if collinear(from) {
            return Err(Error::Solver("control points are collinear".into()));
        }
        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let (dx, dy) = (from[i].0 - from[j].0, from[i].1 - from[j].1);
                a[(i, j)] = tps_kernel(dx * dx + dy * dy);
            }
            let row = [1.0, from[i].0, from[i].1];
            for (k, &v) in row.iter().enumerate() {
                a[(i, n + k)] = v;
                a[(n + k, i)] = v;
            }
        }
        let lu = a.lu();
        let mut weights = [Vec::new(), Vec::new()];
        let mut affine = [[0.0; 3]; 2];
        for axis in 0..2 {
            let mut b = DVector::<f64>::zeros(m);
            for i in 0..n {
                b[i] = if axis == 0 { to[i].0 } else { to[i].1 };
            }
            let sol = lu
                .solve(&b)
                .filter(|s| s.iter().all(|v| v.is_finite()))
                .ok_or_else(|| Error::Solver("singular thin-plate system".into()))?;
            weights[axis] = sol.rows(0, n).iter().copied().collect();
            affine[axis] = [sol[n], sol[n + 1], sol[n + 2]];
        }
        Ok(Self {
            centers: from.to_vec(),
            weights,
            affine,
        })
    }

    pub fn eval(&self, x: f64, y: f64) -> (f64, f64) {
        let mut out = [0.0; 2];
        for (axis, o) in out.iter_mut().enumerate() {
            let [a0, ax, ay] = self.affine[axis];
            let mut v = a0 + ax * x + ay * y;
            for (c, w) in self.centers.iter().zip(&self.weights[axis]) {
                let (dx, dy) = (x - c.0, y - c.1);
                v += w * tps_kernel(dx * dx + dy * dy);
            }
            *o = v;
        }
        (out[0], out[1])
    }

    /// Dense backward flow `T(p) - p` on an `h × w` grid.
    pub fn to_flow<T: Scalar>(&self, h: usize, w: usize) -> FlowField<T> {
        let plane = h * w;
        let mut data = vec![T::zero(); 2 * plane];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.eval(x as f64, y as f64);
                data[y * w + x] = T::lit(sx - x as f64);
                data[plane + y * w + x] = T::lit(sy - y as f64);
            }
        }
        FlowField(Tensor::new(vec![2, h, w], data).expect("flow shape"))
    }
}

fn collinear(points: &[(f64, f64)]) -> bool {
    let scale = points
        .iter()
        .fold(1.0f64, |m, p| m.max(p.0.abs()).max(p.1.abs()));
    let tol = 1e-9 * scale * scale;
    let p0 = points[0];
    for (i, a) in points.iter().enumerate().skip(1) {
        for b in &points[i + 1..] {
            let cross = (a.0 - p0.0) * (b.1 - p0.1) - (a.1 - p0.1) * (b.0 - p0.0);
            if cross.abs() > tol {
                return false;
            }
        }
    }
    true
}

/// Warps `image` so that content at `src_points` lands on `dst_points`.
pub fn tps_warp<T: Scalar>(
    image: &Tensor<T>,
    src_points: &[(f64, f64)],
    dst_points: &[(f64, f64)],
) -> Result<Tensor<T>> {
    let (_, h, w) = image.dims3()?;
    let tps = ThinPlateSpline::fit(dst_points, src_points)?;
    warp_with_flow(image, &tps.to_flow(h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn columns(h: usize, cols: &[f64]) -> Tensor<f64> {
        let w = cols.len();
        Tensor::from_fn(&[1, h, w], |i| cols[i % w])
    }

    #[test]
    fn zero_flow_is_exact_identity() {
        let img = Tensor::from_fn(&[3, 5, 4], |i| (i as f64 * 0.37).sin());
        let out = warp_with_flow(&img, &FlowField::zeros(5, 4)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn unit_shift_clamps_at_border() {
        let img = columns(2, &[10.0, 20.0, 30.0]);
        let out = warp_with_flow(&img, &FlowField::constant(2, 3, 1.0, 0.0)).unwrap();
        assert_eq!(out.data(), &[20.0, 30.0, 30.0, 20.0, 30.0, 30.0]);
    }

    #[test]
    fn half_pixel_shift_averages() {
        let img = columns(1, &[0.0, 2.0]);
        let out = warp_with_flow(&img, &FlowField::constant(1, 2, 0.5, 0.0)).unwrap();
        assert_eq!(out.data()[0], 1.0);
    }

    #[test]
    fn resize_scales_displacements() {
        let f = FlowField::constant(8, 6, 1.0f64, 0.0);
        let r = resize_flow(&f, 16, 12).unwrap();
        assert!(r.u().iter().all(|&u| u == 2.0));
        assert!(r.v().iter().all(|&v| v == 0.0));
        let same = resize_flow(&f, 8, 6).unwrap();
        assert_eq!(same, f);
    }

    #[test]
    fn endpoint_error_cases() {
        let a = FlowField::constant(3, 2, 1.0f64, -1.0);
        assert_eq!(endpoint_error(&a, &a).unwrap(), 0.0);
        let b = FlowField::constant(3, 2, 4.0f64, 3.0);
        assert_eq!(endpoint_error(&b, &a).unwrap(), 5.0);
    }

    #[test]
    fn tps_identity_and_translation() {
        let pts = [(1.0, 1.0), (6.0, 1.0), (1.0, 5.0), (6.0, 5.0), (3.0, 3.0)];
        let img = Tensor::from_fn(&[1, 7, 9], |i| (i % 9) as f64 + 10.0 * (i / 9) as f64);
        let same = tps_warp(&img, &pts, &pts).unwrap();
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let moved: Vec<_> = pts.iter().map(|p| (p.0 + 3.0, p.1)).collect();
        let out = tps_warp(&img, &pts, &moved).unwrap();
        for y in 0..7 {
            for x in 3..9 {
                let got = out.data()[y * 9 + x];
                assert!((got - img.data()[y * 9 + x - 3]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tps_rejects_collinear_points() {
        let pts = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)];
        assert!(matches!(
            ThinPlateSpline::fit(&pts, &pts),
            Err(Error::Solver(_))
        ));
    }

    #[test]
    fn tps_rejects_length_mismatch() {
        let a = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)];
        assert!(ThinPlateSpline::fit(&a, &a[..2]).is_err());
    }
}
