//! Test-time adaptation: for each test mixture, a few gradient steps on the
//! consistency objective alone (no ground truth), inference with the
//! adapted weights, then a reset to the trained weights before the next
//! pair.

use std::path::Path;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Tape, Tensor};
use crate::bsseval::{self, Metrics};
use crate::error::{Error, Result};
use crate::masks::SoftMask;
use crate::networks::{Mode, SeCoModel};
use crate::pipeline::{
    self, consistency_loss, predict_masks, stack_grids, stack_motion, ClipFeatures, ConsistencyBatch,
    SpectrogramConfig,
};
use crate::synthdata::{Dataset, TestPair};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OmOptimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OmConfig {
    /// Gradient steps per pair.
    pub iterations: usize,
    /// Step size; the same for every sub-network.
    pub beta: f64,
    /// Weight of the consistency objective.
    pub lambda: f64,
    pub optimizer: OmOptimizer,
    pub use_inter: bool,
    pub use_intra: bool,
}

impl Default for OmConfig {
    fn default() -> Self {
        OmConfig {
            iterations: 5,
            beta: 1e-4,
            lambda: 1.0,
            optimizer: OmOptimizer::Sgd,
            use_inter: true,
            use_intra: true,
        }
    }
}

impl OmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument("beta must be a nonnegative number".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument("lambda must be a nonnegative number".into()));
        }
        if !self.use_inter && !self.use_intra {
            return Err(Error::InvalidArgument("online matching needs a consistency term".into()));
        }
        Ok(())
    }
}

/// What adaptation may look at: the mixture, both motion streams and one
/// same-category template per source. Clean sources are deliberately not
/// part of it.
pub struct OmInput<'a> {
    /// `S x S` mixture magnitude on the network grid.
    pub mixture: &'a Array2<f64>,
    pub motion_p: &'a [f64],
    pub motion_q: &'a [f64],
    pub template_p: &'a Array2<f64>,
    pub template_q: &'a Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct Adapted {
    /// `(iterations, mask_p, mask_q)` for each requested step count.
    pub masks: Vec<(usize, SoftMask, SoftMask)>,
    /// Objective at each step count `0..=max(record_at)` (empty when only
    /// 0 is requested), truncated where adaptation diverged.
    pub losses: Vec<f64>,
    /// Adaptation produced a non-finite objective and was abandoned; masks
    /// from then on are the unadapted ones.
    pub diverged: bool,
}

fn eval_masks(model: &mut SeCoModel, mix: &Tensor, motion: &Tensor) -> Result<(SoftMask, SoftMask)> {
    let side = model.config().grid;
    let mut tape = Tape::new();
    let (net, mut cx) = model.ctx(&mut tape, Mode::Eval);
    let m = cx.tape.constant(mix.clone());
    let v = cx.tape.constant(motion.clone());
    let out = predict_masks(net, &mut cx, m, v)?;
    let grid = |t: &Tensor| SoftMask::new(Array2::from_shape_vec((side, side), t.data().to_vec()).expect("sized"));
    Ok((grid(cx.tape.value(out.mask_p))?, grid(cx.tape.value(out.mask_q))?))
}

/// Adapts on one pair and returns the masks after each step count in
/// `record_at` (0 = the trained model). The model's weights and statistics
/// are bitwise those of the trained model when this returns, whether it
/// succeeds or not.
pub fn adapt_pair(model: &mut SeCoModel, cfg: &OmConfig, input: &OmInput, record_at: &[usize]) -> Result<Adapted> {
    cfg.validate()?;
    let snapshot = model.snapshot();
    let result = adapt_inner(model, cfg, input, record_at);
    model.restore(&snapshot)?;
    result
}

/// One step on the consistency objective; returns the objective before the
/// step and leaves the weights untouched if it is not finite.
fn adapt_step(
    model: &mut SeCoModel,
    cfg: &OmConfig,
    mix: &Tensor,
    motion: &Tensor,
    templates: &(Tensor, Tensor),
    adam: Option<&mut Adam>,
    apply: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (net, mut cx) = model.ctx(&mut tape, Mode::Adapt);
    let m = cx.tape.constant(mix.clone());
    let v = cx.tape.constant(motion.clone());
    let pred = predict_masks(net, &mut cx, m, v)?;
    let terms = consistency_loss(
        net,
        &mut cx,
        ConsistencyBatch {
            mix: m,
            mask_p: pred.mask_p,
            mask_q: pred.mask_q,
            sources: None,
            templates: templates.clone(),
            visual: pred.visual,
        },
        0.0,
        cfg.use_inter,
        cfg.use_intra,
    )?;
    let loss = cx.tape.scale(terms.l_cs, cfg.lambda);
    let value = cx.tape.item(loss)?;
    if !apply || !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    match adam {
        Some(a) => a.step(&mut model.store, grads.params())?,
        None => model.store.sgd_step(grads.params(), cfg.beta)?,
    }
    Ok(value)
}

fn adapt_inner(model: &mut SeCoModel, cfg: &OmConfig, input: &OmInput, record_at: &[usize]) -> Result<Adapted> {
    let mc = model.config().clone();
    let mix = stack_grids([input.mixture])?;
    let motion = stack_motion([input.motion_p, input.motion_q], mc.motion_channels, mc.motion_frames)?;
    let templates = (stack_grids([input.template_p])?, stack_grids([input.template_q])?);
    let last = record_at.iter().copied().max().unwrap_or(0);
    let mut adam = match cfg.optimizer {
        OmOptimizer::Adam => Some(Adam::new(AdamConfig::uniform(cfg.beta))),
        OmOptimizer::Sgd => None,
    };
    let mut out = Adapted {
        masks: Vec::with_capacity(record_at.len()),
        losses: Vec::new(),
        diverged: false,
    };
    let unadapted = eval_masks(model, &mix, &motion)?;
    for t in 0..=last {
        if record_at.contains(&t) {
            let (p, q) = if t == 0 || out.diverged {
                unadapted.clone()
            } else {
                eval_masks(model, &mix, &motion)?
            };
            out.masks.push((t, p, q));
        }
        if out.diverged || last == 0 {
            continue;
        }
        // At the last count only the objective is evaluated.
        let step = adapt_step(model, cfg, &mix, &motion, &templates, adam.as_mut(), t < last);
        let value = match step {
            Ok(v) => v,
            // Weights moved by earlier steps can break the objective's own
            // preconditions (e.g. a dead embedding); that is divergence too.
            Err(e) if t > 0 => {
                warn!("online matching failed at step {t} ({e}); keeping the unadapted masks");
                out.diverged = true;
                continue;
            }
            Err(e) => return Err(e),
        };
        out.losses.push(value);
        if !value.is_finite() {
            warn!("online matching diverged at step {t}; keeping the unadapted masks");
            out.diverged = true;
            continue;
        }
        if model.store.ids().any(|id| !model.store.tensor(id).all_finite()) {
            warn!("online matching produced non-finite weights at step {t}; keeping the unadapted masks");
            out.diverged = true;
        }
    }
    // Requested in any order; report in that order.
    let order: Vec<usize> = record_at.to_vec();
    out.masks.sort_by_key(|(t, _, _)| order.iter().position(|x| x == t));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pair_id: usize,
    pub iterations: usize,
    pub sdr_p: f64,
    pub sir_p: f64,
    pub sar_p: f64,
    pub sdr_q: f64,
    pub sir_q: f64,
    pub sar_q: f64,
    /// Consistency objective after 0..=iterations steps, `;`-separated.
    pub l_cs_trajectory: String,
    pub diverged: bool,
}

impl SweepRow {
    pub fn mean(&self) -> Metrics {
        Metrics {
            sdr: 0.5 * (self.sdr_p + self.sdr_q),
            sir: 0.5 * (self.sir_p + self.sir_q),
            sar: 0.5 * (self.sar_p + self.sar_q),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub iterations: usize,
    pub pairs: usize,
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

/// Per-pair, per-step-count separation scores on the test set. With
/// `iterations == [0]` this is plain evaluation of the trained model.
pub fn iteration_sweep(
    model: &mut SeCoModel,
    cfg: &OmConfig,
    data: &Dataset,
    features: &[ClipFeatures],
    pairs: &[TestPair],
    spec: &SpectrogramConfig,
    iterations: &[usize],
    filter_len: usize,
) -> Result<Vec<SweepRow>> {
    let side = model.config().grid;
    let mut rows = Vec::with_capacity(pairs.len() * iterations.len());
    for tp in pairs {
        let c = tp.clips;
        for i in [c.p, c.q, c.template_p, c.template_q] {
            if data.manifest.is_train_clip(i) {
                return Err(Error::Dataset(format!("test pair {} uses training clip {i}", tp.pair_id)));
            }
        }
        let (wp, wq) = (&data.clips[c.p].waveform, &data.clips[c.q].waveform);
        let prepared = pipeline::prepare_mixture(wp, wq, spec, side)?;
        let input = OmInput {
            mixture: &prepared.grid.values,
            motion_p: &features[c.p].motion,
            motion_q: &features[c.q].motion,
            template_p: &features[c.template_p].grid,
            template_q: &features[c.template_q].grid,
        };
        let adapted = adapt_pair(model, cfg, &input, iterations)?;
        let refs = [wp.clone().resized(prepared.signal_len)?, wq.clone().resized(prepared.signal_len)?];
        for (t, mp, mq) in &adapted.masks {
            let est = [pipeline::reconstruct(&prepared, mp)?, pipeline::reconstruct(&prepared, mq)?];
            let r = bsseval::evaluate_pair(&est, &refs, false, filter_len)?;
            let (a, b) = (r.metrics[0], r.metrics[1]);
            rows.push(SweepRow {
                pair_id: tp.pair_id,
                iterations: *t,
                sdr_p: a.sdr,
                sir_p: a.sir,
                sar_p: a.sar,
                sdr_q: b.sdr,
                sir_q: b.sir,
                sar_q: b.sar,
                l_cs_trajectory: adapted.losses[..adapted.losses.len().min(t + 1)]
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
                diverged: adapted.diverged && *t > 0,
            });
        }
    }
    Ok(rows)
}

/// Mean scores per step count, in order of first appearance.
pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut order: Vec<usize> = Vec::new();
    for r in rows {
        if !order.contains(&r.iterations) {
            order.push(r.iterations);
        }
    }
    order
        .into_iter()
        .map(|t| {
            let sel: Vec<Metrics> = rows.iter().filter(|r| r.iterations == t).map(SweepRow::mean).collect();
            let n = sel.len() as f64;
            SweepSummary {
                iterations: t,
                pairs: sel.len(),
                sdr: sel.iter().map(|m| m.sdr).sum::<f64>() / n,
                sir: sel.iter().map(|m| m.sir).sum::<f64>() / n,
                sar: sel.iter().map(|m| m.sar).sum::<f64>() / n,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
