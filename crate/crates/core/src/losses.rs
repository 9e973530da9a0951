//! Training objectives for the warp, segmentation and fusion stages.

use rand::Rng;

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

pub const CLOTHING_CLASSES: usize = 7;
pub const LOG_FLOOR: f64 = 1e-8;
pub const SMOOTH_L1_DELTA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Warp terms: masked L1, perceptual, mask L1, total variation.
    pub beta: [f64; 4],
    /// Fusion terms: L1, perceptual, edge, reconstruction.
    pub lambda: [f64; 4],
    /// Stage mixing: warp, segmentation, fusion.
    pub alpha: [f64; 3],
    pub class_weights: [f64; CLOTHING_CLASSES],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: [1.0, 0.25, 1.0, 0.1],
            lambda: [1.0, 0.25, 0.5, 0.5],
            alpha: [1.0, 1.0, 1.0],
            class_weights: [3.0, 1.0, 1.0, 1.0, 3.0, 1.0, 1.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .beta
            .iter()
            .chain(&self.lambda)
            .chain(&self.alpha)
            .chain(&self.class_weights);
        for &v in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weights must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

/// Expands a `1×H×W` mask to the channel count of `like`.
fn broadcast_mask<T: Scalar>(tape: &mut Tape<T>, mask: Var, like: Var) -> Result<Var> {
    let c = tape.value(like).dims3()?.0;
    let (mc, _, _) = tape.value(mask).dims3()?;
    if mc == c {
        return Ok(mask);
    }
    tape.broadcast_channels(mask, c)
}

/// Mean absolute difference of elementwise products.
pub fn l1<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, "l1", pred, target)?;
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Mean of `|pred⊙mask_p − target⊙mask_t|`; single-channel masks are
/// broadcast over image channels.
pub fn masked_l1<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    mask_p: Var,
    mask_t: Var,
) -> Result<Var> {
    same_shape(tape, "masked_l1", pred, target)?;
    let (pm, tm) = masked_pair(tape, pred, target, mask_p, mask_t)?;
    l1(tape, pm, tm)
}

fn masked_pair<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    mask_p: Var,
    mask_t: Var,
) -> Result<(Var, Var)> {
    let mp = broadcast_mask(tape, mask_p, pred)?;
    let mt = broadcast_mask(tape, mask_t, target)?;
    Ok((tape.mul(pred, mp)?, tape.mul(target, mt)?))
}

/// Fixed random convolutional feature extractor standing in for a pretrained
/// perceptual network. Its weights are stored frozen under `perceptual.*`.
#[derive(Clone, Debug)]
pub struct Perceptual {
    layers: Vec<ParamId>,
}

impl Perceptual {
    pub const WIDTHS: [usize; 3] = [8, 16, 16];

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let mut in_ch = 3;
        let layers = Self::WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &out_ch)| {
                let id = store.conv_weight(format!("perceptual.l{i}.weight"), out_ch, in_ch, 3, rng);
                store.get_mut(id).trainable = false;
                in_ch = out_ch;
                id
            })
            .collect();
        Self { layers }
    }

    fn features<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for &id in &self.layers {
            let w = tape.param(store, id);
            let y = tape.conv2d(h, w, None, 2, 1)?;
            h = tape.leaky_relu(y, T::lit(0.2));
            out.push(h);
        }
        Ok(out)
    }

    /// Sum over layers of the mean absolute feature difference.
    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pred: Var,
        target: Var,
    ) -> Result<Var> {
        same_shape(tape, "perceptual_loss", pred, target)?;
        let (c, _, _) = tape.value(pred).dims3()?;
        if c != 3 {
            return Err(Error::dim("perceptual_loss", format!("channels must be 3, got {c}")));
        }
        let fp = self.features(tape, store, pred)?;
        let ft = self.features(tape, store, target)?;
        let mut terms = Vec::with_capacity(fp.len());
        for (a, b) in fp.into_iter().zip(ft) {
            terms.push((T::one(), l1(tape, a, b)?));
        }
        tape.weighted_sum(&terms)
    }
}

/// Mean absolute forward difference along x plus the same along y. An axis
/// of extent 1 contributes nothing.
pub fn tv_loss<T: Scalar>(tape: &mut Tape<T>, flow: Var) -> Result<Var> {
    let (_, h, w) = tape.value(flow).dims3()?;
    let mut terms = Vec::with_capacity(2);
    for (axis, extent) in [(Axis::X, w), (Axis::Y, h)] {
        if extent >= 2 {
            let d = tape.spatial_diff(flow, axis)?;
            let a = tape.abs(d);
            terms.push((T::one(), tape.mean(a)));
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(crate::Tensor::scalar(T::zero())));
    }
    tape.weighted_sum(&terms)
}

/// One warped image, its warped mask and the flow that produced them.
#[derive(Clone, Copy, Debug)]
pub struct WarpTriple {
    pub image: Var,
    pub mask: Var,
    pub flow: Var,
}

/// `β1‖I⊙M − I_m⊙M_gt‖₁ + β2·perceptual + β3‖M − M_gt‖₁ + β4·TV(f)`.
pub fn warp_term<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    perceptual: &Perceptual,
    triple: WarpTriple,
    model_image: Var,
    garment_mask: Var,
    beta: &[f64; 4],
) -> Result<Var> {
    let (pm, tm) = masked_pair(tape, triple.image, model_image, triple.mask, garment_mask)?;
    let photo = l1(tape, pm, tm)?;
    let perc = perceptual.loss(tape, store, pm, tm)?;
    let mask = l1(tape, triple.mask, garment_mask)?;
    let tv = tv_loss(tape, triple.flow)?;
    tape.weighted_sum(&[
        (T::lit(beta[0]), photo),
        (T::lit(beta[1]), perc),
        (T::lit(beta[2]), mask),
        (T::lit(beta[3]), tv),
    ])
}

/// Aggregate term plus one term per candidate level; `levels` must hold
/// exactly `k + 1` triples.
#[allow(clippy::too_many_arguments)]
pub fn warp_stage_loss<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    perceptual: &Perceptual,
    aggregate: WarpTriple,
    levels: &[WarpTriple],
    k: usize,
    model_image: Var,
    garment_mask: Var,
    beta: &[f64; 4],
) -> Result<Var> {
    if levels.len() != k + 1 {
        return Err(Error::contract(
            "warp_stage_loss",
            format!("expected {} level triples, got {}", k + 1, levels.len()),
        ));
    }
    let mut terms = Vec::with_capacity(k + 2);
    for &t in std::iter::once(&aggregate).chain(levels) {
        let term = warp_term(tape, store, perceptual, t, model_image, garment_mask, beta)?;
        terms.push((T::one(), term));
    }
    tape.weighted_sum(&terms)
}

/// `−(1/n) Σ_pixels Σ_i w_i·target_i·ln(max(pred_i, 1e-8))`. The target must
/// sum to one at every pixel.
pub fn weighted_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    pred_probs: Var,
    target: Var,
    weights: &[f64],
) -> Result<Var> {
    same_shape(tape, "weighted_cross_entropy", pred_probs, target)?;
    let (c, h, w) = tape.value(target).dims3()?;
    if weights.len() != c {
        return Err(Error::dim(
            "weighted_cross_entropy",
            format!("class weights: {} entries for {c} channels", weights.len()),
        ));
    }
    let plane = h * w;
    let t = tape.value(target).data();
    for p in 0..plane {
        let s: f64 = (0..c).map(|ch| t[ch * plane + p].as_f64()).sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::contract(
                "weighted_cross_entropy",
                format!("target at pixel {p} sums to {s}, not 1"),
            ));
        }
    }
    let logp = tape.ln_floor(pred_probs, T::lit(LOG_FLOOR));
    let prod = tape.mul(target, logp)?;
    let ws: Vec<T> = weights.iter().map(|&v| T::lit(v)).collect();
    let weighted = tape.scale_channels(prod, &ws)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, T::lit(-1.0 / plane as f64)))
}

/// `M_out⊙I_wrp + (1 − M_out)⊙I_rp` with `M_out` broadcast over channels.
pub fn compose_tryon<T: Scalar>(
    tape: &mut Tape<T>,
    m_out: Var,
    i_wrp: Var,
    i_rp: Var,
) -> Result<Var> {
    same_shape(tape, "compose_tryon", i_wrp, i_rp)?;
    let (mc, mh, mw) = tape.value(m_out).dims3()?;
    let (_, h, w) = tape.value(i_wrp).dims3()?;
    if mc != 1 || (mh, mw) != (h, w) {
        return Err(Error::dim(
            "compose_tryon",
            format!("mask must be 1×{h}×{w}, got {mc}×{mh}×{mw}"),
        ));
    }
    if let Some(v) = tape
        .value(m_out)
        .data()
        .iter()
        .find(|&&v| !(v >= T::zero() && v <= T::one()))
    {
        return Err(Error::contract(
            "compose_tryon",
            format!("composition mask value {v} outside [0, 1]"),
        ));
    }
    let m = broadcast_mask(tape, m_out, i_wrp)?;
    let inv = tape.one_minus(m);
    let a = tape.mul(m, i_wrp)?;
    let b = tape.mul(inv, i_rp)?;
    tape.add(a, b)
}

/// Mean absolute Sobel response of `pred − target`, summed over both orientations.
pub fn edge_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, "edge_loss", pred, target)?;
    let d = tape.sub(pred, target)?;
    let mut terms = Vec::with_capacity(2);
    for axis in [Axis::X, Axis::Y] {
        let s = tape.sobel(d, axis)?;
        let a = tape.abs(s);
        terms.push((T::one(), tape.mean(a)));
    }
    tape.weighted_sum(&terms)
}

/// Unweighted cross-entropy on both categorical masks plus mean smooth-L1
/// on the UV map.
pub fn recon_loss<T: Scalar>(
    tape: &mut Tape<T>,
    m_exp_pred: Var,
    m_exp: Var,
    m_bp_pred: Var,
    m_bp_gt: Var,
    uv_pred: Var,
    uv: Var,
) -> Result<Var> {
    let expect = |tape: &Tape<T>, v: Var, c: usize, what: &str| -> Result<()> {
        let got = tape.value(v).dims3()?.0;
        if got != c {
            return Err(Error::dim(
                "recon_loss",
                format!("{what} channels: expected {c}, got {got}"),
            ));
        }
        Ok(())
    };
    expect(tape, m_exp_pred, CLOTHING_CLASSES, "M_exp_pred")?;
    expect(tape, m_bp_pred, 11, "M_bp_pred")?;
    expect(tape, uv_pred, 2, "I_uv_pred")?;
    let ce_exp = weighted_cross_entropy(tape, m_exp_pred, m_exp, &[1.0; CLOTHING_CLASSES])?;
    let ce_bp = weighted_cross_entropy(tape, m_bp_pred, m_bp_gt, &[1.0; 11])?;
    same_shape(tape, "recon_loss", uv_pred, uv)?;
    let d = tape.sub(uv_pred, uv)?;
    let s = tape.smooth_l1(d, T::lit(SMOOTH_L1_DELTA));
    let uv_term = tape.mean(s);
    tape.weighted_sum(&[(T::one(), ce_exp), (T::one(), ce_bp), (T::one(), uv_term)])
}

/// `λ1‖I_tryon − I_m‖₁ + λ2·perceptual + λ3·edge + λ4·recon`.
pub fn fusion_loss<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    perceptual: &Perceptual,
    tryon: Var,
    model_image: Var,
    recon: Var,
    lambda: &[f64; 4],
) -> Result<Var> {
    let photo = l1(tape, tryon, model_image)?;
    let perc = perceptual.loss(tape, store, tryon, model_image)?;
    let edge = edge_loss(tape, tryon, model_image)?;
    tape.weighted_sum(&[
        (T::lit(lambda[0]), photo),
        (T::lit(lambda[1]), perc),
        (T::lit(lambda[2]), edge),
        (T::lit(lambda[3]), recon),
    ])
}

/// `α1·L_wrp + α2·L_cs + α3·L_fus`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    warp: Var,
    seg: Var,
    fusion: Var,
    alpha: &[f64; 3],
) -> Result<Var> {
    tape.weighted_sum(&[
        (T::lit(alpha[0]), warp),
        (T::lit(alpha[1]), seg),
        (T::lit(alpha[2]), fusion),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(shape, f)
    }

    fn onehot(classes: usize, labels: &[usize]) -> Tensor<f64> {
        let n = labels.len();
        t(&[classes, 1, n], |i| (labels[i % n] == i / n) as u8 as f64)
    }

    #[test]
    fn default_class_weights() {
        let w = LossWeights::default();
        assert_eq!(w.class_weights[4], 3.0);
        assert_eq!(w.class_weights, [3.0, 1.0, 1.0, 1.0, 3.0, 1.0, 1.0]);
        w.validate().unwrap();
        let bad = LossWeights {
            alpha: [1.0, -1.0, 1.0],
            ..w
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn masked_l1_cases() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::full(&[3, 2, 2], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[3, 2, 2]));
        let m = tape.constant(Tensor::full(&[1, 2, 2], 1.0));
        let l = masked_l1(&mut tape, ones, zeros, m, m).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let l = masked_l1(&mut tape, ones, ones, m, m).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn masked_l1_matches_direct_sum() {
        let mut tape = Tape::<f64>::new();
        let p = t(&[3, 3, 4], |i| (i as f64 * 0.61).sin());
        let q = t(&[3, 3, 4], |i| (i as f64 * 0.37).cos());
        let mp = t(&[1, 3, 4], |i| (i % 3) as f64 / 2.0);
        let mq = t(&[1, 3, 4], |i| (i % 5) as f64 / 4.0);
        let mut want = 0.0;
        for i in 0..36 {
            want += (p.data()[i] * mp.data()[i % 12] - q.data()[i] * mq.data()[i % 12]).abs();
        }
        want /= 36.0;
        let vs: Vec<_> = [p, q, mp, mq].into_iter().map(|x| tape.constant(x)).collect();
        let l = masked_l1(&mut tape, vs[0], vs[1], vs[2], vs[3]).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn tv_cases() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 3.0]).unwrap());
        let l = tv_loss(&mut tape, f).unwrap();
        assert_eq!(tape.value(l).item(), 3.0);
        let c = tape.constant(Tensor::full(&[2, 4, 4], 2.5));
        let l = tv_loss(&mut tape, c).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn weighted_ce_cases() {
        let w = LossWeights::default().class_weights;
        let mut tape = Tape::<f64>::new();
        let target = tape.constant(onehot(7, &[0]));
        let uniform = tape.constant(Tensor::full(&[7, 1, 1], 1.0 / 7.0));
        let l = weighted_cross_entropy(&mut tape, uniform, target, &w).unwrap();
        assert!((tape.value(l).item() - 3.0 * 7f64.ln()).abs() < 1e-12);
        let l = weighted_cross_entropy(&mut tape, target, target, &w).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let bad = tape.constant(Tensor::full(&[7, 1, 1], 0.5));
        assert!(matches!(
            weighted_cross_entropy(&mut tape, uniform, bad, &w),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn compose_identities() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[3, 2, 3], |i| i as f64 / 17.0));
        let b = tape.constant(t(&[3, 2, 3], |i| 1.0 - i as f64 / 19.0));
        let one = tape.constant(Tensor::full(&[1, 2, 3], 1.0));
        let zero = tape.constant(Tensor::zeros(&[1, 2, 3]));
        let half = tape.constant(Tensor::full(&[1, 2, 3], 0.5));
        let r = compose_tryon(&mut tape, one, a, b).unwrap();
        assert_eq!(tape.value(r), tape.value(a));
        let r = compose_tryon(&mut tape, zero, a, b).unwrap();
        assert_eq!(tape.value(r), tape.value(b));
        let z3 = tape.constant(Tensor::zeros(&[3, 2, 3]));
        let o3 = tape.constant(Tensor::full(&[3, 2, 3], 1.0));
        let r = compose_tryon(&mut tape, half, z3, o3).unwrap();
        assert!(tape.value(r).data().iter().all(|&v| v == 0.5));
        let over = tape.constant(Tensor::full(&[1, 2, 3], 1.5));
        assert!(matches!(
            compose_tryon(&mut tape, over, a, b),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn edge_loss_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3, 4, 5], |i| (i as f64).sqrt()));
        let l = edge_loss(&mut tape, x, x).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let c1 = tape.constant(Tensor::full(&[3, 4, 5], 0.2));
        let c2 = tape.constant(Tensor::full(&[3, 4, 5], 0.9));
        let l = edge_loss(&mut tape, c1, c2).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        // Unit ramp along x on a 3×4 plane against a flat image: Sobel-x rows
        // are [0, 8, 8, 0], Sobel-y is zero, so the mean is 16·3 / 12 = 4.
        let ramp = tape.constant(t(&[1, 3, 4], |i| (i % 4) as f64));
        let flat = tape.constant(Tensor::zeros(&[1, 3, 4]));
        let l = edge_loss(&mut tape, ramp, flat).unwrap();
        assert_eq!(tape.value(l).item(), 4.0);
    }

    #[test]
    fn recon_uv_half_error() {
        let mut tape = Tape::<f64>::new();
        let exp = tape.constant(onehot(7, &[1, 2, 0, 6]));
        let bp = tape.constant(onehot(11, &[3, 10, 0, 4]));
        let uv = tape.constant(Tensor::full(&[2, 1, 4], 0.25));
        let uvp = tape.constant(Tensor::full(&[2, 1, 4], 0.75));
        let l = recon_loss(&mut tape, exp, exp, bp, bp, uvp, uv).unwrap();
        assert_eq!(tape.value(l).item(), 0.125);
        let l = recon_loss(&mut tape, exp, exp, bp, bp, uv, uv).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(matches!(
            recon_loss(&mut tape, bp, exp, bp, bp, uv, uv),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn perceptual_properties() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Perceptual::new(&mut store, &mut rng);
        assert!(store.iter().all(|(_, q)| !q.trainable));
        let base = t(&[3, 16, 16], |i| ((i * 7) % 13) as f64 / 13.0);
        let noise = t(&[3, 16, 16], |i| ((i as f64) * 12.9898).sin());
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(base.clone());
        let l = p.loss(&mut tape, &store, a, a).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let mut last = 0.0;
        for amp in [0.05, 0.1, 0.2] {
            let noisy = tape.constant(t(&[3, 16, 16], |i| base.data()[i] + amp * noise.data()[i]));
            let ab = p.loss(&mut tape, &store, a, noisy).unwrap();
            let ba = p.loss(&mut tape, &store, noisy, a).unwrap();
            assert_eq!(tape.value(ab).item(), tape.value(ba).item());
            assert!(tape.value(ab).item() > last);
            last = tape.value(ab).item();
        }
    }

    #[test]
    fn total_loss_linearity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(1.5));
        let b = tape.constant(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(4.0));
        let only_warp = total_loss(&mut tape, a, b, c, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(tape.value(only_warp).item(), 1.5);
        let one = total_loss(&mut tape, a, b, c, &[1.0, 0.5, 0.25]).unwrap();
        let two = total_loss(&mut tape, a, b, c, &[2.0, 1.0, 0.5]).unwrap();
        assert_eq!(tape.value(two).item(), 2.0 * tape.value(one).item());
        let z = tape.constant(Tensor::scalar(0.0));
        let zero = total_loss(&mut tape, z, z, z, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);
    }

    #[test]
    fn warp_stage_loss_level_count_and_recomposition() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let perc = Perceptual::new(&mut store, &mut rng);
        let beta = LossWeights::default().beta;
        let mut tape = Tape::<f64>::new();
        let mk = |tape: &mut Tape<f64>, s: f64| WarpTriple {
            image: tape.constant(t(&[3, 8, 8], |i| ((i as f64 + s) * 0.3).sin().abs())),
            mask: tape.constant(t(&[1, 8, 8], |i| (i as f64 * s) % 1.0)),
            flow: tape.constant(t(&[2, 8, 8], |i| (i as f64 * s * 0.01).cos())),
        };
        let agg = mk(&mut tape, 0.5);
        let levels = [mk(&mut tape, 1.5), mk(&mut tape, 2.5)];
        let im = tape.constant(t(&[3, 8, 8], |i| (i as f64 * 0.11).cos().abs()));
        let gm = tape.constant(t(&[1, 8, 8], |i| (i % 2) as f64));
        let total = warp_stage_loss(&mut tape, &store, &perc, agg, &levels, 1, im, gm, &beta).unwrap();
        let mut want = 0.0;
        for tr in [agg, levels[0], levels[1]] {
            let term = warp_term(&mut tape, &store, &perc, tr, im, gm, &beta).unwrap();
            want += tape.value(term).item();
        }
        assert!((tape.value(total).item() - want).abs() < 1e-12);
        assert!(matches!(
            warp_stage_loss(&mut tape, &store, &perc, agg, &levels, 2, im, gm, &beta),
            Err(Error::Contract { .. })
        ));
        // Perfect warps with zero flow give zero loss.
        let zero_flow = tape.constant(Tensor::zeros(&[2, 8, 8]));
        let perfect = WarpTriple {
            image: im,
            mask: gm,
            flow: zero_flow,
        };
        let l = warp_stage_loss(&mut tape, &store, &perc, perfect, &[perfect], 0, im, gm, &beta).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }
}
