//! Central finite-difference checks of tape gradients in 64-bit precision.
//!
//! The checked function may return any shape; it is reduced to a scalar by a
//! fixed random projection so every output element contributes. Numerical
//! derivatives use the five-point stencil. Coordinates where the stencil
//! crosses a kink of a piecewise-linear op are detected and skipped, up to a
//! small budget.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::gaf::{Gaf, GafConfig, GatingCellState, GatingVariant};
use crate::losses::{self, Perceptual, WarpTriple};
use crate::nets::{SkipUNet, SkipUNetConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::warp::resize_flow_var;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckSettings {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked fully.
    pub max_coords: usize,
    /// Disagreement between the `h` and `2h` central differences above which
    /// a coordinate is taken to straddle a kink (ReLU, absolute value).
    pub kink_threshold: f64,
    /// Largest fraction of coordinates that may be skipped as kinks.
    pub max_kink_fraction: f64,
    pub seed: u64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-5,
            floor: 1e-6,
            max_coords: 24,
            kink_threshold: 1e-5,
            max_kink_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    /// Coordinates skipped because the finite-difference stencil crossed a kink.
    pub kinks: usize,
    pub passed: bool,
}

type Func<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + 'a;

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn projected(
    f: &Func<'_>,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    proj: &mut Option<Tensor<f64>>,
    seed: u64,
    grad: bool,
) -> Result<(f64, Tape<f64>, Vec<Var>)> {
    let mut tape = if grad { Tape::new() } else { Tape::inference() };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, store, &vars)?;
    let shape = tape.shape(out).to_vec();
    let r = proj.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0))
    });
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    let loss = tape.sum(prod);
    let value = tape.value(loss).item();
    if grad {
        tape.backward(loss)?;
    }
    Ok((value, tape, vars))
}

enum Slot {
    Input(usize),
    Param(ParamId),
}

/// Compares analytic and numerical gradients of `f` with respect to sampled
/// coordinates of every input and every trainable parameter in `store`.
pub fn check(
    name: &str,
    settings: &CheckSettings,
    inputs: &[Tensor<f64>],
    store: &ParamStore<f64>,
    f: &Func<'_>,
) -> Result<OpCheck> {
    let mut proj = None;
    let (_, tape, vars) = projected(f, store, inputs, &mut proj, settings.seed, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut coords: Vec<(Slot, usize, f64)> = Vec::new();
    let mut pick = |len: usize| -> Vec<usize> {
        if len <= settings.max_coords {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, settings.max_coords).into_vec();
            v.sort_unstable();
            v
        }
    };
    for (i, &v) in vars.iter().enumerate() {
        let g = tape
            .grad(v)
            .ok_or_else(|| Error::contract("gradcheck", "input gradient missing"))?;
        for j in pick(g.len()) {
            coords.push((Slot::Input(i), j, g.data()[j]));
        }
    }
    let param_grads: Vec<(ParamId, Tensor<f64>)> = tape
        .param_grads()
        .into_iter()
        .filter(|(id, _)| store.get(*id).trainable)
        .map(|(id, g)| (id, g.clone()))
        .collect();
    for (id, g) in &param_grads {
        for j in pick(g.len()) {
            coords.push((Slot::Param(*id), j, g.data()[j]));
        }
    }
    let h = settings.step;
    let mut worst = 0.0f64;
    let mut kinks = 0;
    let mut ins = inputs.to_vec();
    let mut st = store.clone();
    for (slot, j, analytic) in &coords {
        let mut eval = |delta: f64| -> Result<f64> {
            let base = match slot {
                Slot::Input(i) => ins[*i].data()[*j],
                Slot::Param(id) => st.get(*id).value.data()[*j],
            };
            let set = |ins: &mut Vec<Tensor<f64>>, st: &mut ParamStore<f64>, v: f64| match slot {
                Slot::Input(i) => ins[*i].data_mut()[*j] = v,
                Slot::Param(id) => st.get_mut(*id).value.data_mut()[*j] = v,
            };
            set(&mut ins, &mut st, base + delta);
            let r = projected(f, &st, &ins, &mut proj, settings.seed, false);
            set(&mut ins, &mut st, base);
            Ok(r?.0)
        };
        let near = eval(h)? - eval(-h)?;
        let far = eval(2.0 * h)? - eval(-2.0 * h)?;
        if rel_error(near / 2.0, far / 4.0, settings.floor * h) > settings.kink_threshold {
            kinks += 1;
            continue;
        }
        let numeric = (8.0 * near - far) / (12.0 * h);
        worst = worst.max(rel_error(*analytic, numeric, settings.floor));
    }
    let kinks_ok = kinks as f64 <= settings.max_kink_fraction * coords.len() as f64;
    Ok(OpCheck {
        name: name.to_string(),
        max_rel_error: worst,
        coords: coords.len(),
        kinks,
        passed: worst < settings.tolerance && kinks_ok,
    })
}

/// Values uniform in `[lo, hi)` kept at least `margin` away from `kink`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kink: f64, margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.gen_range(lo..hi);
        if (v - kink).abs() >= margin {
            break v;
        }
    })
}

/// Flow whose sample positions stay clear of integer grid coordinates, where
/// bilinear interpolation has kinks.
fn smooth_flow(rng: &mut ChaCha8Rng, h: usize, w: usize, max: f64) -> Tensor<f64> {
    Tensor::from_fn(&[2, h, w], |_| loop {
        let v: f64 = rng.gen_range(-max..max);
        let frac = v - v.round();
        if frac.abs() > 0.05 {
            break v;
        }
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Probability vectors over channels, strictly inside the simplex.
fn simplex(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let raw = uniform(rng, &[c, h, w], 0.2, 1.0);
    let plane = h * w;
    Tensor::from_fn(&[c, h, w], |i| {
        let p = i % plane;
        let s: f64 = (0..c).map(|ch| raw.data()[ch * plane + p]).sum();
        raw.data()[i] / s
    })
}

fn one_hot(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let labels: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..c)).collect();
    Tensor::from_fn(&[c, h, w], |i| (labels[i % (h * w)] == i / (h * w)) as u8 as f64)
}

const REDRAWS: usize = 3;

type Case = (&'static str, Box<dyn Fn(&CheckSettings) -> Result<OpCheck>>);

fn case(
    name: &'static str,
    build: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, ParamStore<f64>, Box<Func<'static>>) + 'static,
) -> Case {
    (
        name,
        Box::new(move |s: &CheckSettings| {
            let salt = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ salt);
            // A draw where one shared unit sits on a kink flags most
            // coordinates at once; such points are redrawn.
            let mut result = None;
            for _ in 0..REDRAWS {
                let (inputs, store, f) = build(&mut rng);
                let r = check(name, s, &inputs, &store, f.as_ref())?;
                let degenerate = !r.passed && r.max_rel_error < s.tolerance;
                result = Some(r);
                if !degenerate {
                    break;
                }
            }
            Ok(result.expect("at least one draw"))
        }),
    )
}

fn no_params() -> ParamStore<f64> {
    ParamStore::new()
}

/// Every differentiable operation, loss, gating cell and a full Skip-UNet,
/// on tensors with extents ≤ 8.
pub fn suite() -> Vec<Case> {
    let mut cases: Vec<Case> = vec![
        case("conv2d stride 1 pad 1", |r| {
            let x = uniform(r, &[2, 6, 5], -1.0, 1.0);
            let w = uniform(r, &[3, 2, 3, 3], -0.5, 0.5);
            let b = uniform(r, &[3], -0.5, 0.5);
            (vec![x, w, b], no_params(), Box::new(|t, _, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)))
        }),
        case("conv2d stride 2 no bias", |r| {
            let x = uniform(r, &[2, 8, 6], -1.0, 1.0);
            let w = uniform(r, &[2, 2, 3, 3], -0.5, 0.5);
            (vec![x, w], no_params(), Box::new(|t, _, v| t.conv2d(v[0], v[1], None, 2, 1)))
        }),
        case("conv2d 1x1 pad 0", |r| {
            let x = uniform(r, &[3, 4, 4], -1.0, 1.0);
            let w = uniform(r, &[2, 3, 1, 1], -0.5, 0.5);
            let b = uniform(r, &[2], -0.5, 0.5);
            (vec![x, w, b], no_params(), Box::new(|t, _, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0)))
        }),
        case("upsample bilinear", |r| {
            let x = uniform(r, &[2, 3, 4], -1.0, 1.0);
            (vec![x], no_params(), Box::new(|t, _, v| t.upsample_bilinear(v[0], 6, 8, false)))
        }),
        case("upsample bilinear align corners", |r| {
            let x = uniform(r, &[2, 3, 4], -1.0, 1.0);
            (vec![x], no_params(), Box::new(|t, _, v| t.upsample_bilinear(v[0], 5, 7, true)))
        }),
        case("avg_pool2d", |r| {
            let x = uniform(r, &[2, 4, 6], -1.0, 1.0);
            (vec![x], no_params(), Box::new(|t, _, v| t.avg_pool2d(v[0], 2)))
        }),
        case("warp_with_flow", |r| {
            let img = uniform(r, &[3, 6, 5], 0.0, 1.0);
            let flow = smooth_flow(r, 6, 5, 2.5);
            (vec![img, flow], no_params(), Box::new(|t, _, v| t.warp_with_flow(v[0], v[1])))
        }),
        case("resize_flow", |r| {
            let f = uniform(r, &[2, 3, 4], -1.0, 1.0);
            (vec![f], no_params(), Box::new(|t, _, v| resize_flow_var(t, v[0], 6, 8)))
        }),
        case("add sub mul", |r| {
            let a = uniform(r, &[2, 3, 3], -1.0, 1.0);
            let b = uniform(r, &[2, 3, 3], -1.0, 1.0);
            (
                vec![a, b],
                no_params(),
                Box::new(|t, _, v| {
                    let s = t.add(v[0], v[1])?;
                    let d = t.sub(v[0], v[1])?;
                    t.mul(s, d)
                }),
            )
        }),
        case("affine scale one_minus", |r| {
            let a = uniform(r, &[2, 3, 3], -1.0, 1.0);
            (
                vec![a],
                no_params(),
                Box::new(|t, _, v| {
                    let x = t.affine(v[0], 1.5, -0.25);
                    let y = t.scale(x, -0.7);
                    Ok(t.one_minus(y))
                }),
            )
        }),
        case("relu", |r| {
            let a = away_from(r, &[2, 4, 4], -1.0, 1.0, 0.0, 0.01);
            (vec![a], no_params(), Box::new(|t, _, v| Ok(t.relu(v[0]))))
        }),
        case("leaky_relu", |r| {
            let a = away_from(r, &[2, 4, 4], -1.0, 1.0, 0.0, 0.01);
            (vec![a], no_params(), Box::new(|t, _, v| Ok(t.leaky_relu(v[0], 0.2))))
        }),
        case("sigmoid", |r| {
            let a = uniform(r, &[2, 4, 4], -4.0, 4.0);
            (vec![a], no_params(), Box::new(|t, _, v| Ok(t.sigmoid(v[0]))))
        }),
        case("tanh", |r| {
            let a = uniform(r, &[2, 4, 4], -3.0, 3.0);
            (vec![a], no_params(), Box::new(|t, _, v| Ok(t.tanh(v[0]))))
        }),
        case("abs", |r| {
            let a = away_from(r, &[2, 4, 4], -1.0, 1.0, 0.0, 0.01);
            (vec![a], no_params(), Box::new(|t, _, v| Ok(t.abs(v[0]))))
        }),
        case("ln_floor", |r| {
            let a = uniform(r, &[2, 4, 4], 0.05, 2.0);
            (vec![a], no_params(), Box::new(|t, _, v| Ok(t.ln_floor(v[0], 1e-8))))
        }),
        case("smooth_l1", |r| {
            let a = Tensor::from_fn(&[2, 4, 4], |_| loop {
                let v: f64 = r.gen_range(-2.5..2.5);
                if (v.abs() - 1.0).abs() > 0.01 {
                    break v;
                }
            });
            (vec![a], no_params(), Box::new(|t, _, v| Ok(t.smooth_l1(v[0], 1.0))))
        }),
        case("scale_channels broadcast_channels", |r| {
            let a = uniform(r, &[2, 3, 3], -1.0, 1.0);
            let m = uniform(r, &[1, 3, 3], 0.0, 1.0);
            (
                vec![a, m],
                no_params(),
                Box::new(|t, _, v| {
                    let s = t.scale_channels(v[0], &[0.5, -2.0])?;
                    let b = t.broadcast_channels(v[1], 2)?;
                    t.mul(s, b)
                }),
            )
        }),
        case("concat slice", |r| {
            let a = uniform(r, &[2, 3, 3], -1.0, 1.0);
            let b = uniform(r, &[3, 3, 3], -1.0, 1.0);
            (
                vec![a, b],
                no_params(),
                Box::new(|t, _, v| {
                    let c = t.concat_channels(&[v[0], v[1]])?;
                    t.slice_channels(c, 1, 3)
                }),
            )
        }),
        case("softmax_channels", |r| {
            let a = uniform(r, &[4, 3, 3], -2.0, 2.0);
            (vec![a], no_params(), Box::new(|t, _, v| t.softmax_channels(v[0])))
        }),
        case("sum mean weighted_sum", |r| {
            let a = uniform(r, &[2, 3, 3], -1.0, 1.0);
            (
                vec![a],
                no_params(),
                Box::new(|t, _, v| {
                    let s = t.sum(v[0]);
                    let sq = t.mul(v[0], v[0])?;
                    let m = t.mean(sq);
                    t.weighted_sum(&[(0.3, s), (-1.2, m)])
                }),
            )
        }),
        case("instance_norm", |r| {
            let a = uniform(r, &[2, 4, 5], -1.0, 1.0);
            (vec![a], no_params(), Box::new(|t, _, v| t.instance_norm(v[0], 1e-5)))
        }),
        case("spatial_diff", |r| {
            let a = uniform(r, &[2, 4, 5], -1.0, 1.0);
            (
                vec![a],
                no_params(),
                Box::new(|t, _, v| {
                    let dx = t.spatial_diff(v[0], Axis::X)?;
                    let dy = t.spatial_diff(v[0], Axis::Y)?;
                    let (qx, qy) = (t.mul(dx, dx)?, t.mul(dy, dy)?);
                    let (sx, sy) = (t.sum(qx), t.sum(qy));
                    t.weighted_sum(&[(1.0, sx), (-0.6, sy)])
                }),
            )
        }),
        case("sobel", |r| {
            let a = uniform(r, &[2, 5, 4], -1.0, 1.0);
            (
                vec![a],
                no_params(),
                Box::new(|t, _, v| {
                    let x = t.sobel(v[0], Axis::X)?;
                    let y = t.sobel(v[0], Axis::Y)?;
                    t.concat_channels(&[x, y])
                }),
            )
        }),
        case("l1 loss", |r| {
            let a = uniform(r, &[3, 4, 4], 0.0, 1.0);
            let b = uniform(r, &[3, 4, 4], 0.0, 1.0);
            (vec![a, b], no_params(), Box::new(|t, _, v| losses::l1(t, v[0], v[1])))
        }),
        case("masked l1 loss", |r| {
            let a = uniform(r, &[3, 4, 4], 0.0, 1.0);
            let b = uniform(r, &[3, 4, 4], 0.0, 1.0);
            let m = uniform(r, &[1, 4, 4], 0.0, 1.0);
            let n = uniform(r, &[1, 4, 4], 0.0, 1.0);
            (vec![a, b, m, n], no_params(), Box::new(|t, _, v| losses::masked_l1(t, v[0], v[1], v[2], v[3])))
        }),
        case("perceptual loss", |r| {
            let a = uniform(r, &[3, 8, 8], 0.0, 1.0);
            let b = uniform(r, &[3, 8, 8], 0.0, 1.0);
            let mut store = ParamStore::new();
            let p = Perceptual::new(&mut store, r);
            (vec![a, b], store, Box::new(move |t, s, v| p.loss(t, s, v[0], v[1])))
        }),
        case("tv loss", |r| {
            let f = uniform(r, &[2, 5, 4], -2.0, 2.0);
            (vec![f], no_params(), Box::new(|t, _, v| losses::tv_loss(t, v[0])))
        }),
        case("warp stage loss", |r| {
            let garment = uniform(r, &[3, 8, 8], 0.0, 1.0);
            let gmask = uniform(r, &[1, 8, 8], 0.0, 1.0);
            let model = uniform(r, &[3, 8, 8], 0.0, 1.0);
            let mmask = uniform(r, &[1, 8, 8], 0.0, 1.0);
            let f0 = smooth_flow(r, 8, 8, 2.0);
            let f1 = smooth_flow(r, 8, 8, 2.0);
            let mut store = ParamStore::new();
            let p = Perceptual::new(&mut store, r);
            (
                vec![garment, gmask, model, mmask, f0, f1],
                store,
                Box::new(move |t, s, v| {
                    let triple = |t: &mut Tape<f64>, f: Var| -> Result<WarpTriple> {
                        Ok(WarpTriple {
                            image: t.warp_with_flow(v[0], f)?,
                            mask: t.warp_with_flow(v[1], f)?,
                            flow: f,
                        })
                    };
                    let agg = triple(t, v[4])?;
                    let lv = [triple(t, v[4])?, triple(t, v[5])?];
                    losses::warp_stage_loss(t, s, &p, agg, &lv, 1, v[2], v[3], &[1.0, 0.25, 1.0, 0.1])
                }),
            )
        }),
        case("weighted cross-entropy", |r| {
            let p = simplex(r, 7, 3, 4);
            let y = one_hot(r, 7, 3, 4);
            (
                vec![p],
                no_params(),
                Box::new(move |t, _, v| {
                    let yv = t.constant(y.clone());
                    losses::weighted_cross_entropy(t, v[0], yv, &[3.0, 1.0, 1.0, 1.0, 3.0, 1.0, 1.0])
                }),
            )
        }),
        case("compose_tryon", |r| {
            let m = uniform(r, &[1, 4, 4], 0.0, 1.0);
            let a = uniform(r, &[3, 4, 4], 0.0, 1.0);
            let b = uniform(r, &[3, 4, 4], 0.0, 1.0);
            (vec![m, a, b], no_params(), Box::new(|t, _, v| losses::compose_tryon(t, v[0], v[1], v[2])))
        }),
        case("edge loss", |r| {
            let a = uniform(r, &[3, 5, 5], 0.0, 1.0);
            let b = uniform(r, &[3, 5, 5], 0.0, 1.0);
            (vec![a, b], no_params(), Box::new(|t, _, v| losses::edge_loss(t, v[0], v[1])))
        }),
        case("fusion loss", |r| {
            let tryon = uniform(r, &[3, 8, 8], 0.0, 1.0);
            let model = uniform(r, &[3, 8, 8], 0.0, 1.0);
            let exp_pred = simplex(r, 7, 8, 8);
            let bp_pred = simplex(r, 11, 8, 8);
            let uv_pred = uniform(r, &[2, 8, 8], 0.0, 1.0);
            let exp = simplex(r, 7, 8, 8);
            let bp = one_hot(r, 11, 8, 8);
            let uv = Tensor::from_fn(&[2, 8, 8], |i| {
                // Keep |uv_pred − uv| clear of the smooth-L1 knee.
                (uv_pred.data()[i] + 0.3).min(1.0) - 0.05
            });
            let mut store = ParamStore::new();
            let p = Perceptual::new(&mut store, r);
            (
                vec![tryon, exp_pred, bp_pred, uv_pred],
                store,
                Box::new(move |t, s, v| {
                    let model = t.constant(model.clone());
                    let exp = t.constant(exp.clone());
                    let bp = t.constant(bp.clone());
                    let uv = t.constant(uv.clone());
                    let rec = losses::recon_loss(t, v[1], exp, v[2], bp, v[3], uv)?;
                    losses::fusion_loss(t, s, &p, v[0], model, rec, &[1.0, 0.25, 0.5, 0.5])
                }),
            )
        }),
    ];
    cases.push(case("ConvGRU step", |r| {
        let mut store = ParamStore::new();
        let cfg = GafConfig {
            k: 1,
            variant: GatingVariant::ConvGru,
            hidden: 3,
        };
        let gaf = Gaf::new("g", cfg, &[2, 2], &mut store, r).expect("valid gaf");
        let h = uniform(r, &[3, 4, 4], -0.8, 0.8);
        let x = uniform(r, &[2, 4, 4], -1.0, 1.0);
        (
            vec![h, x],
            store,
            Box::new(move |t, s, v| {
                let st = GatingCellState { hidden: v[0], cell: None };
                Ok(gaf.convgru_step(t, s, st, v[1])?.hidden)
            }),
        )
    }));
    for variant in GatingVariant::ALL {
        let name: &'static str = match variant {
            GatingVariant::ConvGru => "GAF convgru aggregate",
            GatingVariant::ConvLstm => "GAF convlstm aggregate",
            GatingVariant::Residual => "GAF residual aggregate",
            GatingVariant::FinestOnly => "GAF single aggregate",
        };
        cases.push(case(name, move |r| {
            let mut store = ParamStore::new();
            let cfg = GafConfig {
                k: 2,
                variant,
                hidden: 3,
            };
            let gaf = Gaf::new("g", cfg, &[3, 3, 3], &mut store, r).expect("valid gaf");
            let feats = vec![
                uniform(r, &[3, 2, 2], -1.0, 1.0),
                uniform(r, &[3, 4, 4], -1.0, 1.0),
                uniform(r, &[3, 8, 8], -1.0, 1.0),
            ];
            (
                feats,
                store,
                Box::new(move |t, s, v| {
                    let pyr = gaf.predict_candidates(t, s, v, 8, 8)?;
                    gaf.aggregate(t, s, &pyr)
                }),
            )
        }));
    }
    cases.push(case("Skip-UNet", |r| {
        let mut store = ParamStore::new();
        let cfg = SkipUNetConfig {
            in_channels: 2,
            out_channels: 2,
            depth: 2,
            base_width: 3,
            emit_decoder_features: false,
        };
        let net = SkipUNet::new("u", cfg, &mut store, r).expect("valid unet");
        let x = uniform(r, &[2, 8, 8], -1.0, 1.0);
        (vec![x], store, Box::new(move |t, s, v| Ok(net.forward(t, s, v[0])?.output)))
    }));
    cases
}

/// Runs the whole suite and reports every case, failing or not.
pub fn run_suite(settings: &CheckSettings, mut log: impl FnMut(&OpCheck)) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (_, run) in suite() {
        let r = run(settings)?;
        log(&r);
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // sigmoid(x)·x via a deliberately broken path: detach drops one term.
        let f: Box<Func<'static>> = Box::new(|t, _, v| {
            let s = t.sigmoid(v[0]);
            let d = t.detach(s);
            t.mul(d, v[0])
        });
        let x = Tensor::from_fn(&[1, 2, 2], |i| i as f64 * 0.3 - 0.4);
        let r = check("broken", &CheckSettings::default(), &[x], &ParamStore::new(), f.as_ref()).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn kinks_are_skipped_but_bounded() {
        let f: Box<Func<'static>> = Box::new(|t, _, v| Ok(t.relu(v[0])));
        let settings = CheckSettings {
            max_kink_fraction: 0.25,
            ..CheckSettings::default()
        };
        let one = Tensor::from_fn(&[1, 2, 2], |i| [0.5, -0.3, 0.7, 5e-5][i]);
        let r = check("relu", &settings, &[one], &ParamStore::new(), f.as_ref()).unwrap();
        assert_eq!(r.kinks, 1);
        assert!(r.passed);
        let many = Tensor::from_fn(&[1, 2, 2], |i| [5e-5, -3e-5, 0.7, 1e-5][i]);
        let r = check("relu", &settings, &[many], &ParamStore::new(), f.as_ref()).unwrap();
        assert_eq!(r.kinks, 3);
        assert!(!r.passed);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(0.0, 0.0, 1e-8), 0.0);
        assert_eq!(rel_error(2.0, 1.0, 1e-8), 0.5);
        assert!((rel_error(0.0, 1e-10, 1e-6) - 1e-4).abs() < 1e-15);
    }
}
