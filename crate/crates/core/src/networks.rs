//! The separation model: audio U-Net, temporal vision encoder, fusion head,
//! residual consistency embedder and the visual consistency head.
//!
//! Layer definitions hold only parameter handles; values live in a
//! [`ParamStore`] and are bound to a [`Tape`] on every forward pass through
//! a [`Ctx`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    BufferId, Conv2dOpts, ParamGroup, ParamId, ParamKind, ParamSnapshot, ParamStore, Tape, Tensor,
    Var,
};
use crate::error::{Error, Result};

/// How batch normalization and its affine parameters behave.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
    /// Running statistics, scale and shift held constant; all other
    /// parameters still receive gradients.
    Adapt,
}

pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore, mode: Mode) -> Self {
        Ctx { tape, store, mode }
    }

    fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square network input grid.
    pub grid: usize,
    /// Output channels of each U-Net downsampling layer.
    pub unet_channels: Vec<usize>,
    /// Channels of the audio feature map (`D_a`).
    pub audio_dim: usize,
    pub motion_channels: usize,
    pub motion_frames: usize,
    /// Output channels of each temporal convolution of the vision encoder.
    pub vision_channels: Vec<usize>,
    pub consistency_width: usize,
    pub residual_blocks: usize,
    /// Residual blocks that halve the spatial resolution.
    pub downsample_blocks: Vec<usize>,
    pub embed_dim: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: 64,
            unet_channels: vec![8, 16, 32, 64, 64],
            audio_dim: 64,
            motion_channels: 4,
            motion_frames: 24,
            vision_channels: vec![16, 32, 32],
            consistency_width: 16,
            residual_blocks: 10,
            downsample_blocks: vec![0, 5],
            embed_dim: 256,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.unet_channels.is_empty() || self.unet_channels.contains(&0) {
            return bad("unet_channels must be non-empty and positive".into());
        }
        let factor = 1usize << self.unet_channels.len();
        if self.grid == 0 || self.grid % factor != 0 {
            return bad(format!(
                "grid side {} is not divisible by {factor} (U-Net depth {})",
                self.grid,
                self.unet_channels.len()
            ));
        }
        if self.vision_channels.is_empty() || self.vision_channels.contains(&0) {
            return bad("vision_channels must be non-empty and positive".into());
        }
        if [
            self.audio_dim,
            self.motion_channels,
            self.motion_frames,
            self.consistency_width,
            self.residual_blocks,
            self.embed_dim,
        ]
        .contains(&0)
        {
            return bad("model dimensions must be positive".into());
        }
        if let Some(b) = self.downsample_blocks.iter().find(|&&b| b >= self.residual_blocks) {
            return bad(format!("downsample block {b} out of range"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_eps must be positive and bn_momentum in [0, 1]".into());
        }
        Ok(())
    }

    pub fn vision_dim(&self) -> usize {
        *self.vision_channels.last().expect("validated")
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    group: ParamGroup,
    prefix: String,
}

impl Builder<'_> {
    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    /// Uniform in `±sqrt(6 / fan_in)`.
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("sized");
        self.store.add(self.name(name), self.group, ParamKind::Weight, t)
    }

    fn bias(&mut self, name: &str, n: usize) -> ParamId {
        self.store
            .add(self.name(name), self.group, ParamKind::Bias, Tensor::zeros([n]))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, opts: Conv2dOpts, bias: bool) -> Conv2d {
        Conv2d {
            w: self.weight(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k),
            b: bias.then(|| self.bias(&format!("{name}.b"), cout)),
            opts,
        }
    }

    fn bn(&mut self, name: &str, c: usize, eps: f64, momentum: f64) -> BatchNorm {
        let gamma = self.store.add(
            self.name(&format!("{name}.gamma")),
            self.group,
            ParamKind::Norm,
            Tensor::full([c], 1.0),
        );
        let beta = self.store.add(
            self.name(&format!("{name}.beta")),
            self.group,
            ParamKind::Norm,
            Tensor::zeros([c]),
        );
        let running_mean = self.store.add_buffer(self.name(&format!("{name}.running_mean")), vec![0.0; c]);
        let running_var = self.store.add_buffer(self.name(&format!("{name}.running_var")), vec![1.0; c]);
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
            momentum,
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            w: self.weight(&format!("{name}.w"), &[din, dout], din),
            b: self.bias(&format!("{name}.b"), dout),
        }
    }
}

#[derive(Clone, Debug)]
struct Conv2d {
    w: ParamId,
    b: Option<ParamId>,
    opts: Conv2dOpts,
}

impl Conv2d {
    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(self.w);
        let b = self.b.map(|b| cx.param(b));
        cx.tape.conv2d(x, w, b, self.opts)
    }

    fn forward_transposed(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(self.w);
        let b = self.b.map(|b| cx.param(b));
        cx.tape.conv_transpose2d(x, w, b, self.opts)
    }

    fn forward_1d(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(self.w);
        let b = self.b.map(|b| cx.param(b));
        cx.tape.conv1d(x, w, b, self.opts.stride.1, self.opts.padding.1)
    }
}

#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        match cx.mode {
            Mode::Train => {
                let (g, b) = (cx.param(self.gamma), cx.param(self.beta));
                let (y, mean, var) = cx.tape.batch_norm_train(x, g, b, self.eps)?;
                let m = self.momentum;
                for (r, v) in cx.store.buffer_mut(self.running_mean).iter_mut().zip(&mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
                for (r, v) in cx.store.buffer_mut(self.running_var).iter_mut().zip(&var) {
                    *r = (1.0 - m) * *r + m * v;
                }
                Ok(y)
            }
            Mode::Eval | Mode::Adapt => {
                let (g, b) = if cx.mode == Mode::Eval {
                    (cx.param(self.gamma), cx.param(self.beta))
                } else {
                    (
                        cx.tape.frozen_param(cx.store, self.gamma),
                        cx.tape.frozen_param(cx.store, self.beta),
                    )
                };
                let rm = cx.store.buffer(self.running_mean).to_vec();
                let rv = cx.store.buffer(self.running_var).to_vec();
                cx.tape.batch_norm_eval(x, g, b, &rm, &rv, self.eps)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (cx.param(self.w), cx.param(self.b));
        let y = cx.tape.matmul(x, w)?;
        let shape = cx.tape.shape(y).to_vec();
        let b = cx.tape.reshape(b, &[1, shape[1]])?;
        let b = cx.tape.broadcast_to(b, &shape)?;
        cx.tape.add(y, b)
    }
}

#[derive(Clone, Debug)]
struct AudioNet {
    down: Vec<(Conv2d, Option<BatchNorm>)>,
    up: Vec<(Conv2d, Option<BatchNorm>)>,
}

#[derive(Clone, Debug)]
struct VisionNet {
    layers: Vec<(Conv2d, BatchNorm)>,
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl ResBlock {
    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.conv1.forward(cx, x)?;
        let h = self.bn1.forward(cx, h)?;
        let h = cx.tape.relu(h);
        let h = self.conv2.forward(cx, h)?;
        let h = self.bn2.forward(cx, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(cx, x)?;
                bn.forward(cx, s)?
            }
            None => x,
        };
        let y = cx.tape.add(h, skip)?;
        Ok(cx.tape.relu(y))
    }
}

#[derive(Clone, Debug)]
struct ConsistencyNet {
    stem: (Conv2d, BatchNorm),
    blocks: Vec<ResBlock>,
    head: Linear,
}

/// Layer layout of the model; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SeCoNet {
    config: ModelConfig,
    audio: AudioNet,
    vision: VisionNet,
    fusion: Linear,
    consistency: ConsistencyNet,
    visual_head: Linear,
}

/// Network layout plus its parameters.
#[derive(Clone, Debug)]
pub struct SeCoModel {
    pub net: SeCoNet,
    pub store: ParamStore,
}

impl SeCoModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            group: ParamGroup::Audio,
            prefix: "audio".into(),
        };
        let (eps, mom) = (config.bn_eps, config.bn_momentum);
        let k4 = Conv2dOpts::new(2, 1);

        let ch = &config.unet_channels;
        let depth = ch.len();
        let mut down = Vec::with_capacity(depth);
        for i in 0..depth {
            let cin = if i == 0 { 1 } else { ch[i - 1] };
            let conv = b.conv(&format!("down{i}"), cin, ch[i], 4, k4, true);
            let bn = (i > 0).then(|| b.bn(&format!("down{i}.bn"), ch[i], eps, mom));
            down.push((conv, bn));
        }
        // Up layer i consumes the output of up layer i + 1 concatenated with
        // the skip from down layer i (the innermost takes down[depth-1]).
        let mut up = Vec::with_capacity(depth);
        for i in 0..depth {
            let cin = if i == depth - 1 { ch[depth - 1] } else { 2 * ch[i] };
            let (cout, bn) = if i == 0 {
                (config.audio_dim, None)
            } else {
                (ch[i - 1], Some(b.bn(&format!("up{i}.bn"), ch[i - 1], eps, mom)))
            };
            let w = b.weight(&format!("up{i}.w"), &[cin, cout, 4, 4], cin * 4);
            let bias = b.bias(&format!("up{i}.b"), cout);
            up.push((
                Conv2d {
                    w,
                    b: Some(bias),
                    opts: k4,
                },
                bn,
            ));
        }
        let audio = AudioNet { down, up };

        b.group = ParamGroup::Vision;
        b.prefix = "vision".into();
        let mut layers = Vec::new();
        let mut cin = config.motion_channels;
        for (i, &cout) in config.vision_channels.iter().enumerate() {
            let w = b.weight(&format!("conv{i}.w"), &[cout, cin, 3], cin * 3);
            let bias = b.bias(&format!("conv{i}.b"), cout);
            let conv = Conv2d {
                w,
                b: Some(bias),
                opts: Conv2dOpts::new(1, 1),
            };
            layers.push((conv, b.bn(&format!("conv{i}.bn"), cout, eps, mom)));
            cin = cout;
        }
        let vision = VisionNet { layers };

        b.group = ParamGroup::Fusion;
        b.prefix = "fusion".into();
        let fusion = b.linear("proj", config.vision_dim(), config.audio_dim);

        b.group = ParamGroup::Consistency;
        b.prefix = "consistency".into();
        let w = config.consistency_width;
        let same = Conv2dOpts::new(1, 1);
        let stem = (b.conv("stem", 1, w, 3, same, false), b.bn("stem.bn", w, eps, mom));
        let blocks = (0..config.residual_blocks)
            .map(|i| {
                let down = config.downsample_blocks.contains(&i);
                let stride = if down { 2 } else { 1 };
                ResBlock {
                    conv1: b.conv(&format!("block{i}.conv1"), w, w, 3, Conv2dOpts::new(stride, 1), false),
                    bn1: b.bn(&format!("block{i}.bn1"), w, eps, mom),
                    conv2: b.conv(&format!("block{i}.conv2"), w, w, 3, same, false),
                    bn2: b.bn(&format!("block{i}.bn2"), w, eps, mom),
                    shortcut: down.then(|| {
                        (
                            b.conv(&format!("block{i}.skip"), w, w, 1, Conv2dOpts::new(2, 0), false),
                            b.bn(&format!("block{i}.skip.bn"), w, eps, mom),
                        )
                    }),
                }
            })
            .collect();
        let head = b.linear("head", w, config.embed_dim);
        let consistency = ConsistencyNet { stem, blocks, head };
        let visual_head = b.linear("visual_head", config.vision_dim(), config.embed_dim);

        Ok(SeCoModel {
            net: SeCoNet {
                config: config.clone(),
                audio,
                vision,
                fusion,
                consistency,
                visual_head,
            },
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        self.store.snapshot()
    }

    pub fn restore(&mut self, snap: &ParamSnapshot) -> Result<()> {
        self.store.restore(snap)
    }

    pub fn ctx<'a>(&'a mut self, tape: &'a mut Tape, mode: Mode) -> (&'a SeCoNet, Ctx<'a>) {
        (&self.net, Ctx::new(tape, &mut self.store, mode))
    }
}

impl SeCoNet {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_grid(&self, cx: &Ctx, x: Var, op: &'static str) -> Result<usize> {
        let s = cx.tape.shape(x);
        let side = self.config.grid;
        if s.len() != 4 || s[1] != 1 || s[2] != side || s[3] != side {
            return Err(Error::shape(
                op,
                format!("expected [N, 1, {side}, {side}], got {s:?}"),
            ));
        }
        Ok(s[0])
    }

    /// `[N, 1, S, S]` magnitudes → `[N, D_a, S, S]` features.
    pub fn audio_forward(&self, cx: &mut Ctx, spec: Var) -> Result<Var> {
        self.check_grid(cx, spec, "audio_forward")?;
        let mut h = cx.tape.log1p(spec);
        let mut skips = Vec::with_capacity(self.audio.down.len());
        for (conv, bn) in &self.audio.down {
            h = conv.forward(cx, h)?;
            if let Some(bn) = bn {
                h = bn.forward(cx, h)?;
            }
            h = cx.tape.relu(h);
            skips.push(h);
        }
        let depth = self.audio.up.len();
        for i in (0..depth).rev() {
            let (conv, bn) = &self.audio.up[i];
            if i < depth - 1 {
                h = cx.tape.concat(&[h, skips[i]], 1)?;
            }
            h = conv.forward_transposed(cx, h)?;
            if let Some(bn) = bn {
                h = bn.forward(cx, h)?;
                h = cx.tape.relu(h);
            }
        }
        Ok(h)
    }

    /// `[N, C_v, T_v]` motion features → `[N, vision_dim]`.
    pub fn vision_forward(&self, cx: &mut Ctx, motion: Var) -> Result<Var> {
        let s = cx.tape.shape(motion);
        let (c, t) = (self.config.motion_channels, self.config.motion_frames);
        if s.len() != 3 || s[1] != c || s[2] != t {
            return Err(Error::shape(
                "vision_forward",
                format!("expected [N, {c}, {t}], got {s:?}"),
            ));
        }
        let mut h = motion;
        for (conv, bn) in &self.vision.layers {
            h = conv.forward_1d(cx, h)?;
            h = bn.forward(cx, h)?;
            h = cx.tape.relu(h);
        }
        cx.tape.global_avg_pool(h)
    }

    /// Mask in `(0, 1)` of shape `[N, 1, S, S]` from `[N, D_a, S, S]` audio
    /// features and `[N, vision_dim]` visual features.
    pub fn fuse(&self, cx: &mut Ctx, audio_feat: Var, visual: Var) -> Result<Var> {
        let sa = cx.tape.shape(audio_feat).to_vec();
        let sv = cx.tape.shape(visual).to_vec();
        if sa.len() != 4
            || sa[1] != self.config.audio_dim
            || sv != [sa[0], self.config.vision_dim()]
        {
            return Err(Error::shape("fuse", format!("audio {sa:?}, visual {sv:?}")));
        }
        let g = self.fusion.forward(cx, visual)?;
        let g = cx.tape.sigmoid(g);
        let g = cx.tape.reshape(g, &[sa[0], sa[1], 1, 1])?;
        let g = cx.tape.broadcast_to(g, &sa)?;
        let weighted = cx.tape.mul(audio_feat, g)?;
        let logits = cx.tape.sum_axis(weighted, 1)?;
        Ok(cx.tape.sigmoid(logits))
    }

    /// `[N, 1, S, S]` magnitudes → `[N, embed_dim]` unit rows.
    pub fn consistency_embed(&self, cx: &mut Ctx, spec: Var) -> Result<Var> {
        self.check_grid(cx, spec, "consistency_embed")?;
        let net = &self.consistency;
        let h = cx.tape.log1p(spec);
        let h = net.stem.0.forward(cx, h)?;
        let h = net.stem.1.forward(cx, h)?;
        let mut h = cx.tape.relu(h);
        for block in &net.blocks {
            h = block.forward(cx, h)?;
        }
        let pooled = cx.tape.global_max_pool(h)?;
        let e = net.head.forward(cx, pooled)?;
        cx.tape.l2_normalize(e)
    }

    /// `[N, vision_dim]` → `[N, embed_dim]` unit rows.
    pub fn visual_consistency_head(&self, cx: &mut Ctx, visual: Var) -> Result<Var> {
        let sv = cx.tape.shape(visual);
        if sv.len() != 2 || sv[1] != self.config.vision_dim() {
            return Err(Error::shape("visual_consistency_head", format!("{sv:?}")));
        }
        let e = self.visual_head.forward(cx, visual)?;
        cx.tape.l2_normalize(e)
    }
}
