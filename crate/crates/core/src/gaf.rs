//! Gated appearance flow: per-level candidate flows from decoder features and
//! their per-pixel aggregation by a recurrent gate.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::warp::resize_flow_var;

/// Candidate heads start close to zero flow.
const HEAD_GAIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GatingVariant {
    ConvGru,
    ConvLstm,
    /// Residual sum over the last two candidates with a sigmoid gate.
    Residual,
    /// No aggregation: the finest candidate is the output flow.
    FinestOnly,
}

impl GatingVariant {
    pub const ALL: [GatingVariant; 4] = [
        GatingVariant::ConvGru,
        GatingVariant::ConvLstm,
        GatingVariant::Residual,
        GatingVariant::FinestOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GatingVariant::ConvGru => "convgru",
            GatingVariant::ConvLstm => "convlstm",
            GatingVariant::Residual => "residual",
            GatingVariant::FinestOnly => "single",
        }
    }
}

impl fmt::Display for GatingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GatingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown gating variant {s:?}; expected convgru, convlstm, residual or single"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GafConfig {
    /// Candidates are indexed `0..=k`.
    pub k: usize,
    pub variant: GatingVariant,
    pub hidden: usize,
}

impl Default for GafConfig {
    fn default() -> Self {
        Self {
            k: 3,
            variant: GatingVariant::ConvGru,
            hidden: 8,
        }
    }
}

/// Candidate flows `f_0..f_K`, coarse to fine, at native and at output resolution.
#[derive(Clone, Debug)]
pub struct FlowPyramid {
    pub candidates: Vec<Var>,
    pub resized: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct GatingCellState {
    pub hidden: Var,
    /// ConvLSTM only.
    pub cell: Option<Var>,
}

type Conv = (ParamId, ParamId);

#[derive(Clone, Debug)]
enum Cell {
    Gru { z: Conv, r: Conv, h: Conv, proj: Conv },
    Lstm { gates: Conv, proj: Conv },
    Residual { gate: Conv },
    FinestOnly,
}

#[derive(Clone, Debug)]
pub struct Gaf {
    pub config: GafConfig,
    heads: Vec<Conv>,
    cell: Cell,
}

fn conv_params<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Conv {
    let w = store.conv_weight_scaled(format!("{name}.weight"), out_ch, in_ch, k, gain, rng);
    let b = store.zeros(format!("{name}.bias"), &[out_ch]);
    (w, b)
}

fn apply<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    (w, b): Conv,
    x: Var,
) -> Result<Var> {
    let wv = tape.param(store, w);
    let bv = tape.param(store, b);
    let pad = tape.shape(wv)[2] / 2;
    tape.conv2d(x, wv, Some(bv), 1, pad)
}

impl Gaf {
    /// `feature_channels` lists the channel counts of the last `K+1` decoder
    /// features, coarse to fine.
    pub fn new<T: Scalar>(
        prefix: &str,
        config: GafConfig,
        feature_channels: &[usize],
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if feature_channels.len() != config.k + 1 {
            return Err(Error::Config(format!(
                "K = {} needs {} decoder feature maps, got {}",
                config.k,
                config.k + 1,
                feature_channels.len()
            )));
        }
        if config.variant == GatingVariant::Residual && config.k < 1 {
            return Err(Error::Config("residual gating needs K ≥ 1".into()));
        }
        if config.hidden == 0 {
            return Err(Error::Config("gating hidden width must be positive".into()));
        }
        let heads = feature_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| conv_params(store, &format!("{prefix}.head{l}"), 2, c, 3, HEAD_GAIN, rng))
            .collect();
        let ch = config.hidden;
        let cell = match config.variant {
            GatingVariant::ConvGru => Cell::Gru {
                z: conv_params(store, &format!("{prefix}.gru.z"), ch, ch + 2, 3, 1.0, rng),
                r: conv_params(store, &format!("{prefix}.gru.r"), ch, ch + 2, 3, 1.0, rng),
                h: conv_params(store, &format!("{prefix}.gru.h"), ch, ch + 2, 3, 1.0, rng),
                proj: conv_params(store, &format!("{prefix}.gru.proj"), 2, ch, 1, 1.0, rng),
            },
            GatingVariant::ConvLstm => Cell::Lstm {
                gates: conv_params(store, &format!("{prefix}.lstm.gates"), 4 * ch, ch + 2, 3, 1.0, rng),
                proj: conv_params(store, &format!("{prefix}.lstm.proj"), 2, ch, 1, 1.0, rng),
            },
            GatingVariant::Residual => Cell::Residual {
                gate: conv_params(store, &format!("{prefix}.residual.gate"), 2, 4, 3, 1.0, rng),
            },
            GatingVariant::FinestOnly => Cell::FinestOnly,
        };
        Ok(Self {
            config,
            heads,
            cell,
        })
    }

    /// Runs the per-level heads on the last `K+1` decoder features and resizes
    /// every candidate to `out_h × out_w`.
    pub fn predict_candidates<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        decoder_features: &[Var],
        out_h: usize,
        out_w: usize,
    ) -> Result<FlowPyramid> {
        let n = self.config.k + 1;
        if decoder_features.len() < n {
            return Err(Error::Config(format!(
                "K = {} needs {n} decoder feature maps, network provides {}",
                self.config.k,
                decoder_features.len()
            )));
        }
        let feats = &decoder_features[decoder_features.len() - n..];
        for pair in feats.windows(2) {
            let (a, b) = (tape.shape(pair[0]), tape.shape(pair[1]));
            if b[1] != 2 * a[1] || b[2] != 2 * a[2] {
                return Err(Error::dim(
                    "predict_candidates",
                    format!("height/width must double per level: {:?} then {:?}", &a[1..], &b[1..]),
                ));
            }
        }
        let mut candidates = Vec::with_capacity(n);
        let mut resized = Vec::with_capacity(n);
        for (&f, &head) in feats.iter().zip(&self.heads) {
            let flow = apply(tape, store, head, f)?;
            candidates.push(flow);
            resized.push(resize_flow_var(tape, flow, out_h, out_w)?);
        }
        Ok(FlowPyramid {
            candidates,
            resized,
        })
    }

    pub fn initial_state<T: Scalar>(&self, tape: &mut Tape<T>, h: usize, w: usize) -> GatingCellState {
        let zeros = Tensor::zeros(&[self.config.hidden, h, w]);
        GatingCellState {
            hidden: tape.constant(zeros.clone()),
            cell: matches!(self.cell, Cell::Lstm { .. }).then(|| tape.constant(zeros)),
        }
    }

    /// One ConvGRU update `h' = (1 − z)⊙h + z⊙tanh(W_h[r⊙h; x])`.
    pub fn convgru_step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        state: GatingCellState,
        candidate: Var,
    ) -> Result<GatingCellState> {
        let Cell::Gru { z, r, h, .. } = self.cell else {
            return Err(Error::contract("convgru_step", "gating variant is not ConvGRU"));
        };
        let prev = state.hidden;
        let hx = tape.concat_channels(&[prev, candidate])?;
        let zp = apply(tape, store, z, hx)?;
        let zg = tape.sigmoid(zp);
        let rp = apply(tape, store, r, hx)?;
        let rg = tape.sigmoid(rp);
        let rh = tape.mul(rg, prev)?;
        let rhx = tape.concat_channels(&[rh, candidate])?;
        let hp = apply(tape, store, h, rhx)?;
        let cand = tape.tanh(hp);
        let keep = tape.one_minus(zg);
        let kept = tape.mul(keep, prev)?;
        let fresh = tape.mul(zg, cand)?;
        Ok(GatingCellState {
            hidden: tape.add(kept, fresh)?,
            cell: None,
        })
    }

    fn convlstm_step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        state: GatingCellState,
        candidate: Var,
        gates: Conv,
    ) -> Result<GatingCellState> {
        let ch = self.config.hidden;
        let c_prev = state
            .cell
            .ok_or_else(|| Error::contract("convlstm_step", "missing cell state"))?;
        let hx = tape.concat_channels(&[state.hidden, candidate])?;
        let pre = apply(tape, store, gates, hx)?;
        let gate = |tape: &mut Tape<T>, idx: usize| tape.slice_channels(pre, idx * ch, ch);
        let (ip, fp, op, gp) = (gate(tape, 0)?, gate(tape, 1)?, gate(tape, 2)?, gate(tape, 3)?);
        let (i, f, o) = (tape.sigmoid(ip), tape.sigmoid(fp), tape.sigmoid(op));
        let g = tape.tanh(gp);
        let fc = tape.mul(f, c_prev)?;
        let ig = tape.mul(i, g)?;
        let cell = tape.add(fc, ig)?;
        let tc = tape.tanh(cell);
        Ok(GatingCellState {
            hidden: tape.mul(o, tc)?,
            cell: Some(cell),
        })
    }

    /// Combines the resized candidates into a single `2×H×W` flow.
    pub fn aggregate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pyramid: &FlowPyramid,
    ) -> Result<Var> {
        let n = self.config.k + 1;
        if pyramid.resized.len() != n {
            return Err(Error::contract(
                "aggregate",
                format!("expected {n} candidates, got {}", pyramid.resized.len()),
            ));
        }
        let (_, h, w) = tape.value(pyramid.resized[0]).dims3()?;
        // Recurrent cells see flows in normalized image units, where a
        // tanh-bounded state spans the whole frame.
        let to_unit = [T::lit(2.0 / w as f64), T::lit(2.0 / h as f64)];
        let to_px = [T::lit(w as f64 / 2.0), T::lit(h as f64 / 2.0)];
        match self.cell {
            Cell::Gru { proj, .. } => {
                let mut state = self.initial_state(tape, h, w);
                for &c in &pyramid.resized {
                    let x = tape.scale_channels(c, &to_unit)?;
                    state = self.convgru_step(tape, store, state, x)?;
                }
                let f = apply(tape, store, proj, state.hidden)?;
                tape.scale_channels(f, &to_px)
            }
            Cell::Lstm { gates, proj } => {
                let mut state = self.initial_state(tape, h, w);
                for &c in &pyramid.resized {
                    let x = tape.scale_channels(c, &to_unit)?;
                    state = self.convlstm_step(tape, store, state, x, gates)?;
                }
                let f = apply(tape, store, proj, state.hidden)?;
                tape.scale_channels(f, &to_px)
            }
            Cell::Residual { gate } => {
                let coarse = pyramid.resized[n - 2];
                let fine = pyramid.resized[n - 1];
                let both = tape.concat_channels(&[coarse, fine])?;
                let gp = apply(tape, store, gate, both)?;
                let g = tape.sigmoid(gp);
                let gated = tape.mul(g, fine)?;
                tape.add(coarse, gated)
            }
            Cell::FinestOnly => Ok(pyramid.resized[n - 1]),
        }
    }
}
