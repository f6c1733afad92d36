//! Glue between waveforms and the network: per-clip grid features,
//! mixture preparation, batched mask prediction and waveform
//! reconstruction from predicted masks.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dsp::{self, ComplexSpectrogram, MagnitudeSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::losses::{inter_modal_loss, intra_modal_loss, Pair};
use crate::masks::{self, BinaryMask, SoftMask};
use crate::networks::{Ctx, Mode, SeCoModel, SeCoNet};
use crate::synthdata::{Clip, Dataset, PairIndices};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrogramConfig {
    pub window_size: usize,
    pub hop: usize,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig {
            window_size: 256,
            hop: 128,
        }
    }
}

/// A clip's network-grid magnitude (`side x side`, log-frequency rows) and
/// its motion features in `[C_v, T_v]` layout.
#[derive(Clone, Debug)]
pub struct ClipFeatures {
    pub grid: Array2<f64>,
    pub motion: Vec<f64>,
}

fn grid_of(w: &Waveform, spec: &SpectrogramConfig, side: usize) -> Result<MagnitudeSpectrogram> {
    let s = dsp::stft(w, spec.window_size, spec.hop)?;
    dsp::to_network_grid(&s.magnitude(), side)
}

fn motion_layout(m: &Array2<f64>, channels: usize, frames: usize) -> Result<Vec<f64>> {
    if m.dim() != (frames, channels) {
        return Err(Error::shape(
            "motion features",
            format!("expected {frames} x {channels}, got {:?}", m.dim()),
        ));
    }
    Ok(m.t().iter().copied().collect())
}

pub fn clip_features(clip: &Clip, spec: &SpectrogramConfig, model: &SeCoNet) -> Result<ClipFeatures> {
    let cfg = model.config();
    Ok(ClipFeatures {
        grid: grid_of(&clip.waveform, spec, cfg.grid)?.values,
        motion: motion_layout(&clip.motion, cfg.motion_channels, cfg.motion_frames)?,
    })
}

pub fn dataset_features(ds: &Dataset, spec: &SpectrogramConfig, model: &SeCoNet) -> Result<Vec<ClipFeatures>> {
    ds.clips.iter().map(|c| clip_features(c, spec, model)).collect()
}

/// Everything derived from mixing two clips.
#[derive(Clone, Debug)]
pub struct PreparedMixture {
    pub mixture: ComplexSpectrogram,
    pub signal_len: usize,
    pub grid: MagnitudeSpectrogram,
}

pub fn prepare_mixture(a: &Waveform, b: &Waveform, spec: &SpectrogramConfig, side: usize) -> Result<PreparedMixture> {
    let m = dsp::mix(a, b)?;
    let mixture = dsp::stft(&m, spec.window_size, spec.hop)?;
    let grid = dsp::to_network_grid(&mixture.magnitude(), side)?;
    Ok(PreparedMixture {
        mixture,
        signal_len: m.len(),
        grid,
    })
}

/// Ground-truth masks of both sources on the network grid.
pub fn ground_truth_masks(
    mix_grid: &Array2<f64>,
    p: &ClipFeatures,
    q: &ClipFeatures,
) -> Result<(BinaryMask, BinaryMask)> {
    Ok((
        masks::dominance_mask(&p.grid, mix_grid)?,
        masks::dominance_mask(&q.grid, mix_grid)?,
    ))
}

/// Stacks `side x side` grids into a `[N, 1, side, side]` tensor.
pub fn stack_grids<'a>(grids: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut dims = None;
    for g in grids {
        if *dims.get_or_insert(g.dim()) != g.dim() {
            return Err(Error::shape("stack_grids", "grids differ in size"));
        }
        data.extend(g.iter().copied());
        n += 1;
    }
    let (h, w) = dims.ok_or_else(|| Error::shape("stack_grids", "no grids"))?;
    Tensor::new([n, 1, h, w], data)
}

/// Stacks `[C_v, T_v]` motion buffers into `[N, C_v, T_v]`.
pub fn stack_motion<'a>(
    motions: impl IntoIterator<Item = &'a [f64]>,
    channels: usize,
    frames: usize,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for m in motions {
        if m.len() != channels * frames {
            return Err(Error::shape("stack_motion", format!("{} values", m.len())));
        }
        data.extend_from_slice(m);
        n += 1;
    }
    Tensor::new([n, channels, frames], data)
}

/// Predicted masks for a batch of mixtures.
pub struct MaskOutput {
    /// `[N, 1, S, S]`.
    pub mask_p: Var,
    pub mask_q: Var,
    /// `[2N, vision_dim]`: all P rows, then all Q rows.
    pub visual: Var,
}

/// Audio U-Net on the mixtures, vision encoder on both motion streams,
/// fusion into one mask per source.
pub fn predict_masks(net: &SeCoNet, cx: &mut Ctx, mix: Var, motion_pq: Var) -> Result<MaskOutput> {
    let n = cx.tape.shape(mix)[0];
    if cx.tape.shape(motion_pq)[0] != 2 * n {
        return Err(Error::shape("predict_masks", "need one motion row per source"));
    }
    let audio = net.audio_forward(cx, mix)?;
    let visual = net.vision_forward(cx, motion_pq)?;
    let p_rows: Vec<usize> = (0..n).collect();
    let q_rows: Vec<usize> = (n..2 * n).collect();
    let vp = cx.tape.index_select(visual, &p_rows)?;
    let vq = cx.tape.index_select(visual, &q_rows)?;
    Ok(MaskOutput {
        mask_p: net.fuse(cx, audio, vp)?,
        mask_q: net.fuse(cx, audio, vq)?,
        visual,
    })
}

fn tensor_to_masks(t: &Tensor, side: usize) -> Result<Vec<SoftMask>> {
    t.data()
        .chunks(side * side)
        .map(|c| SoftMask::new(Array2::from_shape_vec((side, side), c.to_vec()).expect("sized")))
        .collect()
}

/// Eval-mode masks of the given pairs, on the network grid.
pub fn infer_masks(
    model: &mut SeCoModel,
    features: &[ClipFeatures],
    mixtures: &[&Array2<f64>],
    pairs: &[(usize, usize)],
) -> Result<Vec<(SoftMask, SoftMask)>> {
    let cfg = model.config().clone();
    let mut tape = Tape::new();
    let (net, mut cx) = model.ctx(&mut tape, Mode::Eval);
    let mix = cx.tape.constant(stack_grids(mixtures.iter().copied())?);
    let motion = stack_motion(
        pairs
            .iter()
            .map(|p| features[p.0].motion.as_slice())
            .chain(pairs.iter().map(|p| features[p.1].motion.as_slice())),
        cfg.motion_channels,
        cfg.motion_frames,
    )?;
    let motion = cx.tape.constant(motion);
    let out = predict_masks(net, &mut cx, mix, motion)?;
    let mp = tensor_to_masks(cx.tape.value(out.mask_p), cfg.grid)?;
    let mq = tensor_to_masks(cx.tape.value(out.mask_q), cfg.grid)?;
    Ok(mp.into_iter().zip(mq).collect())
}

/// Maps a grid mask back to the linear STFT grid, applies it to the
/// mixture (keeping the mixture phase) and inverts.
pub fn reconstruct(prepared: &PreparedMixture, mask: &SoftMask) -> Result<Waveform> {
    let grid = prepared.grid.with_values(mask.values().clone());
    let linear = dsp::from_network_grid(&grid)?;
    let clamped = SoftMask::new(linear.values.mapv(|v| v.clamp(0.0, 1.0)))?;
    let masked = masks::apply_mask(&prepared.mixture, &clamped)?;
    dsp::istft(&masked)?.resized(prepared.signal_len)
}

/// Mixture, ground-truth masks and source features of one pair.
pub struct PairInputs<'a> {
    pub mixture: PreparedMixture,
    pub p: &'a ClipFeatures,
    pub q: &'a ClipFeatures,
    pub template_p: &'a ClipFeatures,
    pub template_q: &'a ClipFeatures,
}

pub fn pair_inputs<'a>(
    ds: &Dataset,
    features: &'a [ClipFeatures],
    pair: &PairIndices,
    spec: &SpectrogramConfig,
    side: usize,
) -> Result<PairInputs<'a>> {
    let (a, b) = (&ds.clips[pair.p].waveform, &ds.clips[pair.q].waveform);
    Ok(PairInputs {
        mixture: prepare_mixture(a, b, spec, side)?,
        p: &features[pair.p],
        q: &features[pair.q],
        template_p: &features[pair.template_p],
        template_q: &features[pair.template_q],
    })
}

/// Inputs of the consistency objective for a batch of `N` pairs.
pub struct ConsistencyBatch {
    /// `[N, 1, S, S]` mixture magnitudes.
    pub mix: Var,
    pub mask_p: Var,
    pub mask_q: Var,
    /// Clean source magnitudes, `[N, 1, S, S]` each; only used by the
    /// ground-truth assisted inter-modal term.
    pub sources: Option<(Tensor, Tensor)>,
    /// Same-category template magnitudes, `[N, 1, S, S]` each.
    pub templates: (Tensor, Tensor),
    /// `[2N, vision_dim]`, P rows then Q rows.
    pub visual: Var,
}

pub struct ConsistencyTerms {
    pub inter: Option<Var>,
    pub intra: Option<Var>,
    pub l_cs: Var,
}

/// Embeds the separated magnitudes (mask times mixture), the optional clean
/// sources and the templates in one consistency-network batch, and builds
/// the enabled loss terms.
pub fn consistency_loss(
    net: &SeCoNet,
    cx: &mut Ctx,
    batch: ConsistencyBatch,
    gamma: f64,
    use_inter: bool,
    use_intra: bool,
) -> Result<ConsistencyTerms> {
    if !use_inter && !use_intra {
        return Err(Error::InvalidArgument("no consistency term enabled".into()));
    }
    let n = cx.tape.shape(batch.mix)[0];
    let pred_p = cx.tape.mul(batch.mask_p, batch.mix)?;
    let pred_q = cx.tape.mul(batch.mask_q, batch.mix)?;
    let mut inputs = vec![pred_p, pred_q];
    let sources = match (use_inter, batch.sources) {
        (true, Some((p, q))) => {
            inputs.push(cx.tape.constant(p));
            inputs.push(cx.tape.constant(q));
            true
        }
        _ => false,
    };
    if use_intra {
        let (p, q) = batch.templates;
        inputs.push(cx.tape.constant(p));
        inputs.push(cx.tape.constant(q));
    }
    let stacked = cx.tape.concat(&inputs, 0)?;
    let emb = net.consistency_embed(cx, stacked)?;
    // A collapsed network (all-zero or overflowing features) is a numerical
    // failure of training, not a caller error.
    let dim = net.config().embed_dim;
    if let Some(r) = cx
        .tape
        .value(emb)
        .data()
        .chunks(dim)
        .position(|row| row.iter().any(|v| !v.is_finite()) || row.iter().all(|&v| v == 0.0))
    {
        return Err(Error::NonFinite(format!("consistency embedding row {r} is zero or non-finite")));
    }
    let mut chunks = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let rows: Vec<usize> = (k * n..(k + 1) * n).collect();
        chunks.push(cx.tape.index_select(emb, &rows)?);
    }
    let pred = Pair {
        p: chunks[0],
        q: chunks[1],
    };
    let inter = if use_inter {
        let fv = net.visual_consistency_head(cx, batch.visual)?;
        let vp = cx.tape.index_select(fv, &(0..n).collect::<Vec<_>>())?;
        let vq = cx.tape.index_select(fv, &(n..2 * n).collect::<Vec<_>>())?;
        let gt = sources.then(|| Pair {
            p: chunks[2],
            q: chunks[3],
        });
        Some(inter_modal_loss(cx.tape, pred, gt, Pair { p: vp, q: vq }, gamma)?)
    } else {
        None
    };
    let intra = if use_intra {
        let k = chunks.len() - 2;
        let temp = Pair {
            p: chunks[k],
            q: chunks[k + 1],
        };
        Some(intra_modal_loss(cx.tape, pred, temp)?)
    } else {
        None
    };
    let l_cs = match (inter, intra) {
        (Some(a), Some(b)) => cx.tape.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!("checked above"),
    };
    Ok(ConsistencyTerms { inter, intra, l_cs })
}
