//! Mix-and-separate training with the mask loss and the weighted
//! consistency objective, Adam with per-sub-network learning rates,
//! CSV logging and resumable checkpoints.

use std::collections::HashMap;
use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Checkpoint, Moments, ParamGroup, Tape, Tensor};
use crate::autodiff::checkpoint::Entry;
use crate::error::{Error, Result};
use crate::losses::{gamma_schedule, total_loss, LossBreakdown};
use crate::networks::{ModelConfig, Mode, SeCoModel};
use crate::pipeline::{
    self, consistency_loss, predict_masks, stack_grids, stack_motion, ClipFeatures, ConsistencyBatch,
    SpectrogramConfig,
};
use crate::synthdata::{sample_training_pair, Dataset, PairIndices};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub audio: f64,
    pub vision: f64,
    pub fusion: f64,
    pub consistency: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            audio: 1e-3,
            vision: 1e-4,
            fusion: 1e-3,
            consistency: 1e-4,
        }
    }
}

impl LearningRates {
    pub fn get(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Audio => self.audio,
            ParamGroup::Vision => self.vision,
            ParamGroup::Fusion => self.fusion,
            ParamGroup::Consistency => self.consistency,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iters: u64,
    pub lambda: f64,
    pub use_inter: bool,
    pub use_intra: bool,
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// A log row is written after every `log_interval`-th step.
    pub log_interval: u64,
    /// Intermediate checkpoints every this many steps; 0 disables them.
    pub checkpoint_interval: u64,
    /// Evaluate the consistency terms even when they do not contribute
    /// to the objective (`lambda == 0`), so that they are logged.
    pub track_consistency: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            total_iters: 2000,
            lambda: 0.01,
            use_inter: true,
            use_intra: true,
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            log_interval: 10,
            checkpoint_interval: 0,
            track_consistency: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.total_iters == 0 {
            return bad("total_iters must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be a nonnegative number");
        }
        if self.log_interval == 0 {
            return bad("log_interval must be positive");
        }
        if [self.lr.audio, self.lr.vision, self.lr.fusion, self.lr.consistency]
            .iter()
            .any(|&v| !(v >= 0.0))
        {
            return bad("learning rates must be nonnegative");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            lr: ParamGroup::ALL.iter().map(|&g| (g, self.lr.get(g))).collect(),
        }
    }

    /// Whether the consistency network takes part in a step.
    pub fn consistency_active(&self) -> bool {
        (self.use_inter || self.use_intra) && (self.lambda > 0.0 || self.track_consistency)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: u64,
    pub l_mask: f64,
    pub l_inter: f64,
    pub l_intra: f64,
    pub l_cs: f64,
    pub l_total: f64,
    pub gamma: f64,
}

impl LogRow {
    pub fn new(iter: u64, b: &LossBreakdown) -> Self {
        LogRow {
            iter,
            l_mask: b.l_mask,
            l_inter: b.l_inter,
            l_intra: b.l_intra,
            l_cs: b.l_cs,
            l_total: b.l_total,
            gamma: b.gamma,
        }
    }
}

pub struct Trainer<'a> {
    pub model: SeCoModel,
    adam: Adam,
    config: TrainConfig,
    spec: SpectrogramConfig,
    data: &'a Dataset,
    features: Vec<ClipFeatures>,
    iter: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(model: SeCoModel, config: TrainConfig, spec: SpectrogramConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        data.manifest.validate()?;
        let features = pipeline::dataset_features(data, &spec, &model.net)?;
        Ok(Trainer {
            adam: Adam::new(config.adam()),
            model,
            config,
            spec,
            data,
            features,
            iter: 0,
        })
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn features(&self) -> &[ClipFeatures] {
        &self.features
    }

    /// The batch drawn at step `iter`; a function of the seed and the step
    /// only, so that resumed runs draw the same batches.
    pub fn batch_at(&self, iter: u64) -> Result<Vec<PairIndices>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iter);
        let _: u64 = rng.random();
        (0..self.config.batch_size)
            .map(|_| sample_training_pair(&self.data.manifest, &mut rng))
            .collect()
    }

    /// One optimizer step on the batch for the current iteration.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let batch = self.batch_at(self.iter)?;
        self.step_on(&batch)
    }

    /// Forward, loss assembly, backward and one Adam step on `batch`.
    pub fn step_on(&mut self, batch: &[PairIndices]) -> Result<LossBreakdown> {
        let m = &self.data.manifest;
        for pair in batch {
            for i in [pair.p, pair.q, pair.template_p, pair.template_q] {
                if !m.is_train_clip(i) {
                    return Err(Error::Dataset(format!(
                        "training batch contains clip {i} outside the training split"
                    )));
                }
            }
        }
        let cfg = self.model.config().clone();
        let side = cfg.grid;
        let inputs = batch
            .iter()
            .map(|p| pipeline::pair_inputs(self.data, &self.features, p, &self.spec, side))
            .collect::<Result<Vec<_>>>()?;
        let mix_t = stack_grids(inputs.iter().map(|i| &i.mixture.grid.values))?;
        let mut targets = Vec::with_capacity(2 * batch.len() * side * side);
        let mut gt_q = Vec::with_capacity(batch.len() * side * side);
        for i in &inputs {
            let (mp, mq) = pipeline::ground_truth_masks(&i.mixture.grid.values, i.p, i.q)?;
            targets.extend(mp.to_f64().iter().copied());
            gt_q.extend(mq.to_f64().iter().copied());
        }
        targets.extend(gt_q);
        let n = batch.len();
        let targets = Tensor::new([2 * n, 1, side, side], targets)?;
        let motion = stack_motion(
            inputs
                .iter()
                .map(|i| i.p.motion.as_slice())
                .chain(inputs.iter().map(|i| i.q.motion.as_slice())),
            cfg.motion_channels,
            cfg.motion_frames,
        )?;
        let gamma = gamma_schedule(self.iter);
        let lambda = self.config.lambda;
        let consistency = if self.config.consistency_active() {
            Some(ConsistencyBatchData {
                sources: (
                    stack_grids(inputs.iter().map(|i| &i.p.grid))?,
                    stack_grids(inputs.iter().map(|i| &i.q.grid))?,
                ),
                templates: (
                    stack_grids(inputs.iter().map(|i| &i.template_p.grid))?,
                    stack_grids(inputs.iter().map(|i| &i.template_q.grid))?,
                ),
            })
        } else {
            None
        };

        let mut tape = Tape::new();
        let (net, mut cx) = self.model.ctx(&mut tape, Mode::Train);
        let mix = cx.tape.constant(mix_t);
        let motion = cx.tape.constant(motion);
        let out = predict_masks(net, &mut cx, mix, motion)?;
        let masks = cx.tape.concat(&[out.mask_p, out.mask_q], 0)?;
        let l_mask = cx.tape.bce(masks, &targets)?;
        let (l_inter, l_intra, total) = match consistency {
            Some(data) => {
                let terms = consistency_loss(
                    net,
                    &mut cx,
                    ConsistencyBatch {
                        mix,
                        mask_p: out.mask_p,
                        mask_q: out.mask_q,
                        sources: Some(data.sources),
                        templates: data.templates,
                        visual: out.visual,
                    },
                    gamma,
                    self.config.use_inter,
                    self.config.use_intra,
                )?;
                let weighted = cx.tape.scale(terms.l_cs, lambda);
                let total = cx.tape.add(l_mask, weighted)?;
                let val = |v: Option<_>| v.map(|v| cx.tape.item(v)).transpose();
                (val(terms.inter)?.unwrap_or(0.0), val(terms.intra)?.unwrap_or(0.0), total)
            }
            None => (0.0, 0.0, l_mask),
        };
        let breakdown = total_loss(cx.tape.item(l_mask)?, l_inter, l_intra, lambda, gamma);
        let taped_total = cx.tape.item(total)?;
        if !taped_total.is_finite() || !breakdown.l_total.is_finite() {
            let clips: Vec<String> = batch
                .iter()
                .map(|p| {
                    let r = |i: usize| format!("c{}v{}", m.clips[i].category_id, m.clips[i].video_id);
                    format!("({}+{} | {},{})", r(p.p), r(p.q), r(p.template_p), r(p.template_q))
                })
                .collect();
            return Err(Error::NonFinite(format!(
                "loss at iteration {}: {breakdown:?}; batch {}",
                self.iter,
                clips.join(" ")
            )));
        }
        debug_assert_eq!(taped_total.to_bits(), breakdown.l_total.to_bits());
        let grads = tape.backward(total)?;
        self.adam.step(&mut self.model.store, grads.params())?;
        self.iter += 1;
        Ok(breakdown)
    }

    /// Runs until `total_iters`, calling `on_log` for every log row and
    /// `on_checkpoint` at the checkpoint interval.
    pub fn run(
        &mut self,
        mut on_log: impl FnMut(&LogRow) -> Result<()>,
        mut on_checkpoint: impl FnMut(&mut Self) -> Result<()>,
    ) -> Result<()> {
        while self.iter < self.config.total_iters {
            let t = self.iter;
            let b = self.train_step()?;
            if (t + 1) % self.config.log_interval == 0 {
                info!(
                    "iter {t}: l_mask {:.4} l_cs {:.4} l_total {:.4}",
                    b.l_mask, b.l_cs, b.l_total
                );
                on_log(&LogRow::new(t, &b))?;
            }
            let ci = self.config.checkpoint_interval;
            if ci > 0 && self.iter % ci == 0 && self.iter < self.config.total_iters {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    /// Rounds parameters and optimizer state to `f32` (what the file keeps)
    /// and captures them, so that a run resumed from the checkpoint
    /// continues exactly like the uninterrupted one.
    pub fn checkpoint(&mut self) -> Checkpoint {
        self.model.store.quantize_f32();
        let ids: Vec<_> = self.model.store.ids().collect();
        let mut ck = Checkpoint::from_store(&self.model.store);
        let mut steps = HashMap::new();
        for id in ids {
            if let Some(mo) = self.adam.moments(id) {
                let q = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
                let quantized = Moments {
                    step: mo.step,
                    m: q(&mo.m),
                    v: q(&mo.v),
                };
                let name = self.model.store.name(id).to_string();
                for (kind, data) in [("m", &quantized.m), ("v", &quantized.v)] {
                    ck.entries.push(Entry {
                        name: format!("adam.{kind}:{name}"),
                        shape: vec![data.len()],
                        data: data.iter().map(|&x| x as f32).collect(),
                    });
                }
                steps.insert(name, mo.step);
                self.adam.set_moments(id, quantized);
            }
        }
        ck.meta = serde_json::json!({
            "iter": self.iter,
            "adam_steps": steps,
            "model": self.model.config(),
            "train": self.config,
            "spectrogram": self.spec,
        });
        ck
    }

    /// Restores parameters, optimizer state and the iteration counter.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        let meta_model: ModelConfig = serde_json::from_value(ck.meta["model"].clone())?;
        if &meta_model != self.model.config() {
            return Err(Error::Checkpoint("model configuration differs from the checkpoint".into()));
        }
        let steps: HashMap<String, u64> = serde_json::from_value(ck.meta["adam_steps"].clone())?;
        let iter = ck.meta["iter"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing iteration counter".into()))?;
        ck.apply_to_store(&mut self.model.store)?;
        let ids: Vec<_> = self.model.store.ids().collect();
        let mut adam = Adam::new(self.config.adam());
        for id in ids {
            let name = self.model.store.name(id);
            if let Some(&step) = steps.get(name) {
                let get = |kind: &str| -> Result<Vec<f64>> {
                    let key = format!("adam.{kind}:{name}");
                    let e = ck.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
                    Ok(e.data.iter().map(|&x| x as f64).collect())
                };
                adam.set_moments(
                    id,
                    Moments {
                        step,
                        m: get("m")?,
                        v: get("v")?,
                    },
                );
            }
        }
        self.adam = adam;
        self.iter = iter;
        Ok(())
    }
}

struct ConsistencyBatchData {
    sources: (Tensor, Tensor),
    templates: (Tensor, Tensor),
}

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const NONFINITE_DUMP_FILE: &str = "nonfinite_batch.txt";

/// Trains into `out_dir`: CSV log, intermediate and final checkpoints. If
/// `out_dir` already holds a checkpoint, training resumes from it and the
/// log is continued.
pub fn train(
    model: SeCoModel,
    config: TrainConfig,
    spec: SpectrogramConfig,
    data: &Dataset,
    out_dir: &Path,
) -> Result<SeCoModel> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let log_path = out_dir.join(LOG_FILE);
    let mut trainer = Trainer::new(model, config, spec, data)?;
    let mut rows: Vec<LogRow> = Vec::new();
    if ckpt_path.exists() {
        trainer.resume(&Checkpoint::load(&ckpt_path)?)?;
        if log_path.exists() {
            let mut rdr = csv::Reader::from_path(&log_path).map_err(|e| Error::Format(e.to_string()))?;
            for r in rdr.deserialize() {
                let r: LogRow = r.map_err(|e| Error::Format(e.to_string()))?;
                if r.iter < trainer.iter() {
                    rows.push(r);
                }
            }
        }
        info!("resuming at iteration {}", trainer.iter());
    }
    let write_log = |rows: &[LogRow]| -> Result<()> {
        let mut w = csv::Writer::from_path(&log_path).map_err(|e| Error::Format(e.to_string()))?;
        for r in rows {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&log_path, e))
    };
    let rows = std::cell::RefCell::new(rows);
    let result = trainer.run(
        |row| {
            rows.borrow_mut().push(*row);
            Ok(())
        },
        |t| {
            write_log(&rows.borrow())?;
            t.checkpoint().save(&ckpt_path)
        },
    );
    if let Err(e) = result {
        if matches!(e, Error::NonFinite(_)) {
            let dump = out_dir.join(NONFINITE_DUMP_FILE);
            if let Err(io) = std::fs::write(&dump, e.to_string()) {
                warn!("could not write {}: {io}", dump.display());
            }
        }
        return Err(e);
    }
    write_log(&rows.borrow())?;
    trainer.checkpoint().save(&ckpt_path)?;
    Ok(trainer.model)
}

/// Loads a model saved by [`train`].
pub fn load_model(path: &Path) -> Result<(SeCoModel, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let cfg: ModelConfig = serde_json::from_value(ck.meta["model"].clone())
        .map_err(|e| Error::Checkpoint(format!("model configuration: {e}")))?;
    let mut model = SeCoModel::new(&cfg, 0)?;
    ck.apply_to_store(&mut model.store)?;
    Ok((model, ck))
}
