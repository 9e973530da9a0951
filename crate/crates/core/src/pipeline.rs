//! The three stages wired end to end: warping, conditional segmentation and
//! texture fusion, with the warm-up-then-joint training schedule and
//! held-out evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::gaf::{FlowPyramid, Gaf, GatingVariant};
use crate::losses::{self, Perceptual, WarpTriple};
use crate::metrics;
use crate::nets::SkipUNet;
use crate::optim::Adam;
use crate::params::{ParamId, ParamStore};
use crate::sample::{
    BODY_PART_CLASSES, CLOTHING_CLASSES, GARMENT_CLASS, PRIOR_CHANNELS, UV_CHANNELS,
};
use crate::synthdata::{self, HELD_OUT_OFFSET};
use crate::tensor::{Scalar, Tensor};
use crate::warp::{masked_endpoint_error, FlowField};

pub use crate::sample::TryOnSample;

/// `I_p`, `M_p`, priors.
pub const WARP_IN_CHANNELS: usize = 3 + 1 + PRIOR_CHANNELS;
/// `I_p`, priors.
pub const SEG_IN_CHANNELS: usize = 3 + PRIOR_CHANNELS;
/// `I_wrp`, `M_exp`, `I_ttp`, `I_uv`, `M_bp`.
pub const FUSION_IN_CHANNELS: usize = 3 + CLOTHING_CLASSES + 3 + UV_CHANNELS + BODY_PART_CLASSES;
/// `I_rp`, `M_out`, `M_exp` reconstruction, `M_bp` reconstruction, `I_uv` reconstruction.
pub const FUSION_OUT_CHANNELS: usize = 3 + 1 + CLOTHING_CLASSES + BODY_PART_CLASSES + UV_CHANNELS;

/// A sample placed on a tape as constants.
#[derive(Clone, Copy, Debug)]
pub struct StageInputs {
    pub garment: Var,
    pub garment_mask: Var,
    pub model: Var,
    pub model_garment_mask: Var,
    pub priors: Var,
    pub clothing_seg: Var,
    pub body_parts: Var,
    pub uv: Var,
}

impl StageInputs {
    pub fn new<T: Scalar>(tape: &mut Tape<T>, sample: &TryOnSample) -> Result<Self> {
        sample.validate()?;
        let mut c = |t: &Tensor<f32>| tape.constant(t.cast());
        Ok(Self {
            garment: c(&sample.garment),
            garment_mask: c(&sample.garment_mask),
            model: c(&sample.model),
            model_garment_mask: c(&sample.model_garment_mask),
            priors: c(&sample.priors),
            clothing_seg: c(&sample.clothing_seg),
            body_parts: c(&sample.body_parts),
            uv: c(&sample.uv),
        })
    }
}

#[derive(Clone, Debug)]
pub struct WarpOutputs {
    pub pyramid: FlowPyramid,
    /// Aggregated flow `f_agg`.
    pub flow: Var,
    pub warped: Var,
    pub warped_mask: Var,
    /// Warped image, mask and flow for every candidate, coarse to fine.
    pub levels: Vec<WarpTriple>,
}

impl WarpOutputs {
    pub fn aggregate(&self) -> WarpTriple {
        WarpTriple {
            image: self.warped,
            mask: self.warped_mask,
            flow: self.flow,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutputs {
    pub i_ttp: Var,
    pub i_rp: Var,
    pub m_out: Var,
    pub m_exp_pred: Var,
    pub m_bp_pred: Var,
    pub uv_pred: Var,
    pub tryon: Var,
}

#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub warp: WarpOutputs,
    pub m_exp: Var,
    pub fusion: FusionOutputs,
}

/// Plain-tensor results of one inference pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub flow: FlowField<f32>,
    pub finest_flow: FlowField<f32>,
    pub warped: Tensor<f32>,
    pub warped_mask: Tensor<f32>,
    pub m_exp: Tensor<f32>,
    pub i_ttp: Tensor<f32>,
    pub i_rp: Tensor<f32>,
    pub m_out: Tensor<f32>,
    pub tryon: Tensor<f32>,
}

fn check_channels<T: Scalar>(tape: &Tape<T>, op: &'static str, v: Var, want: usize) -> Result<()> {
    let got = tape.value(v).dims3()?.0;
    if got != want {
        return Err(Error::dim(op, format!("expected {want} channels, got {got}")));
    }
    Ok(())
}

pub struct TryOnModel<T: Scalar = f32> {
    pub config: Config,
    pub store: ParamStore<T>,
    warp_net: SkipUNet,
    gaf: Gaf,
    seg_net: SkipUNet,
    fusion_net: SkipUNet,
    perceptual: Perceptual,
}

impl<T: Scalar> TryOnModel<T> {
    /// Builds every stage, initializing parameters from `config.seed`.
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let warp_net = SkipUNet::new("warp", config.warp_net(), &mut store, &mut rng)?;
        let widths = config.warp_net().widths();
        let feature_channels: Vec<usize> = (0..=config.k).rev().map(|l| widths[l]).collect();
        let gaf = Gaf::new("gaf", config.gaf(), &feature_channels, &mut store, &mut rng)?;
        let seg_net = SkipUNet::new("seg", config.seg_net(), &mut store, &mut rng)?;
        let fusion_net = SkipUNet::new("fusion", config.fusion_net(), &mut store, &mut rng)?;
        let perceptual = Perceptual::new(&mut store, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            warp_net,
            gaf,
            seg_net,
            fusion_net,
            perceptual,
        })
    }

    pub fn perceptual(&self) -> &Perceptual {
        &self.perceptual
    }

    /// Trainable parameter ids whose names start with any of `prefixes`.
    pub fn param_ids(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable && prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn warp_stage(&self, tape: &mut Tape<T>, inputs: &StageInputs) -> Result<WarpOutputs> {
        check_channels(tape, "warp_stage", inputs.garment, 3)?;
        check_channels(tape, "warp_stage", inputs.garment_mask, 1)?;
        check_channels(tape, "warp_stage", inputs.priors, PRIOR_CHANNELS)?;
        let (_, h, w) = tape.value(inputs.garment).dims3()?;
        let x = tape.concat_channels(&[inputs.garment, inputs.garment_mask, inputs.priors])?;
        let out = self.warp_net.forward(tape, &self.store, x)?;
        let pyramid = self
            .gaf
            .predict_candidates(tape, &self.store, &out.decoder_features, h, w)?;
        let flow = self.gaf.aggregate(tape, &self.store, &pyramid)?;
        let warped = tape.warp_with_flow(inputs.garment, flow)?;
        let warped_mask = tape.warp_with_flow(inputs.garment_mask, flow)?;
        let mut levels = Vec::with_capacity(pyramid.resized.len());
        for &f in &pyramid.resized {
            levels.push(WarpTriple {
                image: tape.warp_with_flow(inputs.garment, f)?,
                mask: tape.warp_with_flow(inputs.garment_mask, f)?,
                flow: f,
            });
        }
        Ok(WarpOutputs {
            pyramid,
            flow,
            warped,
            warped_mask,
            levels,
        })
    }

    /// Post-try-on clothing segmentation probabilities `M_exp`.
    pub fn segmentation(&self, tape: &mut Tape<T>, inputs: &StageInputs) -> Result<Var> {
        check_channels(tape, "segmentation", inputs.garment, 3)?;
        check_channels(tape, "segmentation", inputs.priors, PRIOR_CHANNELS)?;
        let x = tape.concat_channels(&[inputs.garment, inputs.priors])?;
        let logits = self.seg_net.forward(tape, &self.store, x)?.output;
        tape.softmax_channels(logits)
    }

    pub fn fusion_stage(
        &self,
        tape: &mut Tape<T>,
        inputs: &StageInputs,
        warped: Var,
        m_exp: Var,
    ) -> Result<FusionOutputs> {
        check_channels(tape, "fusion_stage", warped, 3)?;
        check_channels(tape, "fusion_stage", m_exp, CLOTHING_CLASSES)?;
        check_channels(tape, "fusion_stage", inputs.uv, UV_CHANNELS)?;
        check_channels(tape, "fusion_stage", inputs.body_parts, BODY_PART_CLASSES)?;
        let garment_prob = tape.slice_channels(m_exp, GARMENT_CLASS, 1)?;
        let keep = tape.one_minus(garment_prob);
        let keep3 = tape.broadcast_channels(keep, 3)?;
        let i_ttp = tape.mul(inputs.model, keep3)?;
        let x = tape.concat_channels(&[warped, m_exp, i_ttp, inputs.uv, inputs.body_parts])?;
        let y = self.fusion_net.forward(tape, &self.store, x)?.output;
        let mut at = 0;
        let mut take = |tape: &mut Tape<T>, n: usize| {
            let v = tape.slice_channels(y, at, n);
            at += n;
            v
        };
        let rp = take(tape, 3)?;
        let mo = take(tape, 1)?;
        let ep = take(tape, CLOTHING_CLASSES)?;
        let bp = take(tape, BODY_PART_CLASSES)?;
        let uvp = take(tape, UV_CHANNELS)?;
        let i_rp = tape.sigmoid(rp);
        let m_out = tape.sigmoid(mo);
        let m_exp_pred = tape.softmax_channels(ep)?;
        let m_bp_pred = tape.softmax_channels(bp)?;
        let uv_pred = tape.sigmoid(uvp);
        let tryon = losses::compose_tryon(tape, m_out, warped, i_rp)?;
        Ok(FusionOutputs {
            i_ttp,
            i_rp,
            m_out,
            m_exp_pred,
            m_bp_pred,
            uv_pred,
            tryon,
        })
    }

    /// All three stages. With `seg_grad` false the fusion stage sees a
    /// detached copy of `M_exp`.
    pub fn forward(&self, tape: &mut Tape<T>, inputs: &StageInputs, seg_grad: bool) -> Result<StageOutputs> {
        let warp = self.warp_stage(tape, inputs)?;
        let m_exp = self.segmentation(tape, inputs)?;
        let fused_exp = if seg_grad { m_exp } else { tape.detach(m_exp) };
        let fusion = self.fusion_stage(tape, inputs, warp.warped, fused_exp)?;
        Ok(StageOutputs { warp, m_exp, fusion })
    }

    pub fn warp_loss(&self, tape: &mut Tape<T>, inputs: &StageInputs, w: &WarpOutputs) -> Result<Var> {
        losses::warp_stage_loss(
            tape,
            &self.store,
            &self.perceptual,
            w.aggregate(),
            &w.levels,
            self.config.k,
            inputs.model,
            inputs.model_garment_mask,
            &self.config.loss.beta,
        )
    }

    pub fn seg_loss(&self, tape: &mut Tape<T>, inputs: &StageInputs, m_exp: Var) -> Result<Var> {
        losses::weighted_cross_entropy(tape, m_exp, inputs.clothing_seg, &self.config.loss.class_weights)
    }

    pub fn fusion_loss(&self, tape: &mut Tape<T>, inputs: &StageInputs, f: &FusionOutputs, m_exp: Var) -> Result<Var> {
        let target_exp = tape.detach(m_exp);
        let recon = losses::recon_loss(
            tape,
            f.m_exp_pred,
            target_exp,
            f.m_bp_pred,
            inputs.body_parts,
            f.uv_pred,
            inputs.uv,
        )?;
        losses::fusion_loss(
            tape,
            &self.store,
            &self.perceptual,
            f.tryon,
            inputs.model,
            recon,
            &self.config.loss.lambda,
        )
    }

    pub fn predict(&self, sample: &TryOnSample) -> Result<Prediction> {
        let mut tape = Tape::inference();
        let inputs = StageInputs::new(&mut tape, sample)?;
        let out = self.forward(&mut tape, &inputs, true)?;
        let get = |v: Var| tape.value(v).cast::<f32>();
        let finest = *out.warp.pyramid.resized.last().expect("at least one candidate");
        Ok(Prediction {
            flow: FlowField::new(get(out.warp.flow))?,
            finest_flow: FlowField::new(get(finest))?,
            warped: get(out.warp.warped),
            warped_mask: get(out.warp.warped_mask),
            m_exp: get(out.m_exp),
            i_ttp: get(out.fusion.i_ttp),
            i_rp: get(out.fusion.i_rp),
            m_out: get(out.fusion.m_out),
            tryon: get(out.fusion.tryon),
        })
    }

    /// Restores parameter values from a checkpoint file.
    pub fn load(config: &Config, path: &Path) -> Result<Self> {
        let mut model = Self::new(config)?;
        checkpoint::restore(&checkpoint::load(path)?, &mut model.store, None)?;
        Ok(model)
    }
}

/// Which losses drive an epoch and which parameters they update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Warp stage alone on its own loss.
    Warp,
    /// Warp and segmentation stages, each on its own loss.
    WarmUp,
    /// All stages on the weighted total.
    Joint,
}

impl Phase {
    fn prefixes(self) -> &'static [&'static str] {
        match self {
            Phase::Warp => &["warp.", "gaf."],
            Phase::WarmUp => &["warp.", "gaf.", "seg."],
            Phase::Joint => &["warp.", "gaf.", "seg.", "fusion."],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean per-sample loss terms over the epoch: total, warp, segmentation, fusion.
    pub loss: [f64; 4],
}

type SampleGrads = (f64, [f64; 3], Vec<(ParamId, Tensor<f32>)>);

pub struct Trainer {
    pub model: TryOnModel<f32>,
    pub adam: Adam<f32>,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(config: &Config) -> Result<Self> {
        Ok(Self {
            model: TryOnModel::new(config)?,
            adam: Adam::new(config.adam()),
            epochs_done: 0,
        })
    }

    fn sample_grads(&self, sample: &TryOnSample, phase: Phase, scale: f32) -> Result<SampleGrads> {
        let m = &self.model;
        let mut tape = Tape::new();
        let inputs = StageInputs::new(&mut tape, sample)?;
        let mut parts = [0.0; 3];
        let total = match phase {
            Phase::Warp => {
                let w = m.warp_stage(&mut tape, &inputs)?;
                let l = m.warp_loss(&mut tape, &inputs, &w)?;
                parts[0] = tape.value(l).item().as_f64();
                l
            }
            Phase::WarmUp => {
                let w = m.warp_stage(&mut tape, &inputs)?;
                let lw = m.warp_loss(&mut tape, &inputs, &w)?;
                let e = m.segmentation(&mut tape, &inputs)?;
                let ls = m.seg_loss(&mut tape, &inputs, e)?;
                parts[0] = tape.value(lw).item().as_f64();
                parts[1] = tape.value(ls).item().as_f64();
                tape.add(lw, ls)?
            }
            Phase::Joint => {
                let out = m.forward(&mut tape, &inputs, m.config.joint_seg_grad)?;
                let lw = m.warp_loss(&mut tape, &inputs, &out.warp)?;
                let ls = m.seg_loss(&mut tape, &inputs, out.m_exp)?;
                let lf = m.fusion_loss(&mut tape, &inputs, &out.fusion, out.m_exp)?;
                parts = [lw, ls, lf].map(|v| tape.value(v).item().as_f64());
                losses::total_loss(&mut tape, lw, ls, lf, &m.config.loss.alpha)?
            }
        };
        let value = tape.value(total).item().as_f64();
        let scaled = tape.scale(total, scale);
        if value.is_finite() {
            tape.backward(scaled)?;
        }
        let grads = tape
            .param_grads()
            .into_iter()
            .filter(|(id, _)| m.store.get(*id).trainable)
            .map(|(id, g)| (id, g.clone()))
            .collect();
        Ok((value, parts, grads))
    }

    /// One pass over `data` in a seeded shuffled order. Per-sample gradients
    /// are computed in parallel and summed in sample order.
    pub fn run_epoch(&mut self, data: &[TryOnSample], phase: Phase) -> Result<EpochReport> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let epoch = self.epochs_done + 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let ids = self.model.param_ids(phase.prefixes());
        let mut sums = [0.0f64; 4];
        for (b, batch) in order.chunks(self.model.config.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f32;
            let results: Vec<SampleGrads> = batch
                .par_iter()
                .map(|&i| self.sample_grads(&data[i], phase, scale))
                .collect::<Result<_>>()?;
            if let Some(pos) = results.iter().position(|r| !r.0.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss {} in epoch {epoch}, batch {b} (sample indices {batch:?}, offending sample {})",
                    results[pos].0, batch[pos]
                )));
            }
            self.model.store.zero_grad();
            for (value, parts, grads) in &results {
                sums[0] += value;
                for k in 0..3 {
                    sums[k + 1] += parts[k];
                }
                for (id, g) in grads {
                    self.model.store.accumulate_grad(*id, g.data());
                }
            }
            self.adam.step(&mut self.model.store, &ids)?;
        }
        self.epochs_done = epoch;
        let n = data.len() as f64;
        Ok(EpochReport {
            epoch,
            phase,
            loss: sums.map(|s| s / n),
        })
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&checkpoint::snapshot(&self.model.store, Some(&self.adam)))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &checkpoint::snapshot(&self.model.store, Some(&self.adam)))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// SSIM / PSNR of the warped garment against the worn garment, both
    /// restricted to the worn-garment region.
    pub warp_ssim: f64,
    pub warp_psnr: f64,
    pub tryon_ssim: f64,
    pub tryon_psnr: f64,
    /// Garment-region endpoint error of `f_agg`; NaN without ground truth.
    pub epe: f64,
    /// Endpoint error of the finest candidate alone.
    pub epe_finest: f64,
    pub seg_accuracy: f64,
}

fn masked(img: &Tensor<f32>, mask: &Tensor<f32>) -> Tensor<f32> {
    let plane = mask.len();
    Tensor::from_fn(img.shape(), |i| img.data()[i] * mask.data()[i % plane])
}

fn psnr_capped(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    // An exact match would average in +∞; 100 dB stands in for it.
    Ok(metrics::psnr(a, b)?.min(100.0))
}

/// Mean metrics over `data`, evaluated in parallel.
pub fn evaluate(model: &TryOnModel<f32>, data: &[TryOnSample]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let rows: Vec<[f64; 7]> = data
        .par_iter()
        .map(|s| -> Result<[f64; 7]> {
            let p = model.predict(s)?;
            let mask = &s.model_garment_mask;
            let (pw, tw) = (masked(&p.warped, mask), masked(&s.model, mask));
            let (epe, epe_finest) = match &s.gt_flow {
                Some(gt) => (
                    masked_endpoint_error(&p.flow, gt, Some(mask.data()))?,
                    masked_endpoint_error(&p.finest_flow, gt, Some(mask.data()))?,
                ),
                None => (f64::NAN, f64::NAN),
            };
            Ok([
                metrics::ssim(&pw, &tw)?,
                psnr_capped(&pw, &tw)?,
                metrics::ssim(&p.tryon, &s.model)?,
                psnr_capped(&p.tryon, &s.model)?,
                epe,
                epe_finest,
                metrics::pixel_accuracy(&p.m_exp, &s.clothing_seg)?,
            ])
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let mean = |k: usize| rows.iter().map(|r| r[k]).sum::<f64>() / n;
    Ok(EvalReport {
        warp_ssim: mean(0),
        warp_psnr: mean(1),
        tryon_ssim: mean(2),
        tryon_psnr: mean(3),
        epe: mean(4),
        epe_finest: mean(5),
        seg_accuracy: mean(6),
    })
}

pub const METRICS_HEADER: &str = "epoch,split,warp_ssim,warp_psnr,tryon_ssim,tryon_psnr,epe,seg_accuracy";

pub fn metrics_row(epoch: usize, split: &str, r: &EvalReport) -> String {
    format!(
        "{epoch},{split},{:.6},{:.4},{:.6},{:.4},{:.6},{:.6}",
        r.warp_ssim, r.warp_psnr, r.tryon_ssim, r.tryon_psnr, r.epe, r.seg_accuracy
    )
}

/// Training and held-out sets, loaded from `config.data_dir` or generated
/// from the seed. A loaded directory is split into its first `data.train`
/// samples and the rest.
pub fn load_data(config: &Config) -> Result<(Vec<TryOnSample>, Vec<TryOnSample>)> {
    match &config.data_dir {
        Some(dir) => {
            let mut all = synthdata::load_dataset(dir)?;
            if all.len() <= config.train_samples {
                return Err(Error::Config(format!(
                    "{} holds {} samples, need more than data.train = {}",
                    dir.display(),
                    all.len(),
                    config.train_samples
                )));
            }
            let held_out = all.split_off(config.train_samples);
            Ok((all, held_out))
        }
        None => {
            let synth = config.synth();
            let train = synthdata::generate(&synth, config.seed, 0, config.train_samples)?;
            let held_out =
                synthdata::generate(&synth, config.seed, HELD_OUT_OFFSET, config.held_out_samples)?;
            Ok((train, held_out))
        }
    }
}

pub fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:03}.zflw"))
}

pub const FINAL_CHECKPOINT: &str = "final.zflw";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub epochs: Vec<EpochReport>,
    /// Held-out metrics after each epoch; index 0 is the initialization.
    pub held_out: Vec<EvalReport>,
}

/// Runs `config.tau` warm-up epochs then joint epochs up to `config.epochs`.
/// With `out` set, writes a checkpoint per epoch (epoch 0 is the
/// initialization), `final.zflw` and `metrics.csv`.
pub fn train_schedule(
    config: &Config,
    train: &[TryOnSample],
    held_out: &[TryOnSample],
    out: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<(Trainer, RunOutcome)> {
    run_phases(config, train, held_out, out, &mut log, |epoch| {
        if epoch <= config.tau {
            Phase::WarmUp
        } else {
            Phase::Joint
        }
    })
}

/// Trains only the warp stage for `config.epochs` epochs.
pub fn train_warp_only(
    config: &Config,
    train: &[TryOnSample],
    held_out: &[TryOnSample],
    out: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<(Trainer, RunOutcome)> {
    run_phases(config, train, held_out, out, &mut log, |_| Phase::Warp)
}

fn run_phases(
    config: &Config,
    train: &[TryOnSample],
    held_out: &[TryOnSample],
    out: Option<&Path>,
    log: &mut dyn FnMut(&str),
    phase_of: impl Fn(usize) -> Phase,
) -> Result<(Trainer, RunOutcome)> {
    let mut trainer = Trainer::new(config)?;
    let mut csv = format!("{METRICS_HEADER}\n");
    let mut outcome = RunOutcome {
        epochs: Vec::new(),
        held_out: Vec::new(),
    };
    let record = |trainer: &Trainer, csv: &mut String, outcome: &mut RunOutcome, epoch: usize| -> Result<()> {
        let r = evaluate(&trainer.model, held_out)?;
        let _ = writeln!(csv, "{}", metrics_row(epoch, "held_out", &r));
        outcome.held_out.push(r);
        if let Some(dir) = out {
            trainer.save_checkpoint(&checkpoint_path(dir, epoch))?;
            let path = dir.join(METRICS_FILE);
            fs::write(&path, csv.as_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    };
    record(&trainer, &mut csv, &mut outcome, 0)?;
    for epoch in 1..=config.epochs {
        let report = trainer.run_epoch(train, phase_of(epoch))?;
        record(&trainer, &mut csv, &mut outcome, epoch)?;
        let r = outcome.held_out.last().expect("recorded");
        log(&format!(
            "epoch {epoch:3} {:?}: loss {:.5} | held-out warp SSIM {:.4} try-on SSIM {:.4} EPE {:.3}",
            report.phase, report.loss[0], r.warp_ssim, r.tryon_ssim, r.epe
        ));
        outcome.epochs.push(report);
    }
    if let Some(dir) = out {
        trainer.save_checkpoint(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok((trainer, outcome))
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: GatingVariant,
    pub report: EvalReport,
}

/// Trains the warp stage once per gating variant with otherwise identical
/// settings and reports held-out warp metrics.
pub fn ablate(
    config: &Config,
    variants: &[GatingVariant],
    train: &[TryOnSample],
    held_out: &[TryOnSample],
    mut log: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            let cfg = Config {
                gating: variant,
                ..config.clone()
            };
            log(&format!("training {variant}"));
            let (trainer, _) = train_warp_only(&cfg, train, held_out, None, &mut log)?;
            Ok(AblationRow {
                variant,
                report: evaluate(&trainer.model, held_out)?,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant   warp_ssim  warp_psnr  epe\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<9} {:>9.4} {:>10.3} {:>6.3}",
            r.variant.name(),
            r.report.warp_ssim,
            r.report.warp_psnr,
            r.report.epe
        );
    }
    out
}
