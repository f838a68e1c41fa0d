//! Residual blocks with trainable skip-connection weights.
//!
//! A block computes `y = relu(tfd + w * ipd)`: `tfd` is the main
//! conv-norm-relu-conv-norm path, `ipd` is the identity (or 1x1-projected)
//! input, and `w` is a scalar that is either a compile-time constant
//! ([`AdaSkipMode::Fixed`]) or a trainable parameter shared according to the
//! chosen mode. `Fixed(1.0)` is the classical residual network; the plain
//! baseline build (`plain_residual`) replaces the weighted combination with
//! ordinary addition and exists to prove the two are bit-identical.
//!
//! Skip weights default to an initial value of 0, so a freshly built model
//! starts by passing only the transformed path through each block and learns
//! how much input to mix back in.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{GradientMap, NodeId, Parameter, Tape};
use crate::error::{Error, Result};
use crate::nhwc;
use crate::rng::SplitMix64;
use crate::tensor::{self, BatchNormStats, Padding, Tensor};

/// How skip weights are allocated and shared across skip sites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AdaSkipMode {
    /// Constant weight, no trainable skip parameters. `Fixed(1.0)` is the
    /// traditional residual network; `Fixed(2.0)` is the fixed-double
    /// comparison arm.
    Fixed(f32),
    /// One trainable scalar shared by every skip site.
    Unified,
    /// Two trainable scalars: one for identity blocks, one for projection
    /// blocks.
    PerType,
    /// One trainable scalar per skip site.
    PerBlock,
}

impl AdaSkipMode {
    pub fn label(&self) -> String {
        match self {
            AdaSkipMode::Fixed(c) => format!("fixed:{c}"),
            AdaSkipMode::Unified => "unified".into(),
            AdaSkipMode::PerType => "per-type".into(),
            AdaSkipMode::PerBlock => "per-block".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockKind {
    /// Skip path is the unmodified input; requires matching shapes.
    Identity,
    /// Skip path is a strided 1x1 convolution plus batch norm.
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub fn identity(channels: usize) -> Self {
        Self {
            kind: BlockKind::Identity,
            in_channels: channels,
            out_channels: channels,
            stride: 1,
        }
    }

    pub fn projection(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            kind: BlockKind::Projection,
            in_channels,
            out_channels,
            stride,
        }
    }
}

/// Declarative model description; everything a build needs, including the
/// seed all layer initialization flows from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input `(channels, height, width)`.
    pub input_shape: (usize, usize, usize),
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub num_classes: usize,
    pub mode: AdaSkipMode,
    /// Initial value for every trainable skip weight.
    pub init_skip_weight: f32,
    pub seed: u64,
    /// Replace the weighted skip combination with plain addition. Baseline
    /// oracle for `Fixed(1.0)` equivalence; not reachable from the CLI.
    #[serde(default)]
    pub plain_residual: bool,
}

impl ModelConfig {
    /// The compact reference architecture: stem 3x3 conv to 16 channels,
    /// then three stages of projection+identity pairs at 16, 32 and 64
    /// channels (strides 1, 2, 2), global average pooling, and a dense
    /// classifier head. Six skip sites.
    pub fn mini(
        input_shape: (usize, usize, usize),
        num_classes: usize,
        mode: AdaSkipMode,
        seed: u64,
    ) -> Self {
        Self {
            input_shape,
            stem_channels: 16,
            blocks: vec![
                BlockSpec::projection(16, 16, 1),
                BlockSpec::identity(16),
                BlockSpec::projection(16, 32, 2),
                BlockSpec::identity(32),
                BlockSpec::projection(32, 64, 2),
                BlockSpec::identity(64),
            ],
            num_classes,
            mode,
            init_skip_weight: 0.0,
            seed,
            plain_residual: false,
        }
    }
}

/// How one site combines `tfd` and `ipd`.
#[derive(Debug, Clone, Copy)]
enum SkipBinding {
    /// Plain `tfd + ipd` (baseline build only).
    Plain,
    Fixed(f32),
    /// Index of the scalar weight in `Model::params`.
    Weight(usize),
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    weight: usize,
    stride: usize,
    padding: Padding,
}

#[derive(Debug, Clone, Copy)]
struct NormLayer {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Debug, Clone)]
struct Block {
    #[allow(dead_code)]
    kind: BlockKind,
    name: String,
    conv1: ConvLayer,
    bn1: NormLayer,
    conv2: ConvLayer,
    bn2: NormLayer,
    /// 1x1 conv + norm on the skip path (projection blocks).
    proj: Option<(ConvLayer, NormLayer)>,
    skip: SkipBinding,
}

/// One extracted skip weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipWeight {
    pub site: String,
    pub value: f32,
    pub trainable: bool,
}

/// Deferred running-statistics update from one training-mode forward pass.
pub struct BnUpdate {
    running_mean: usize,
    running_var: usize,
    stats: BatchNormStats,
}

/// Result of recording a forward pass on a tape.
pub struct ForwardPass {
    pub logits: NodeId,
    /// Batch statistics to fold into running statistics after the step.
    pub bn_updates: Vec<BnUpdate>,
}

/// A buildable, trainable residual network.
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Parameter>,
    stem_conv: ConvLayer,
    stem_bn: NormLayer,
    blocks: Vec<Block>,
    dense_weight: usize,
    dense_bias: usize,
}

/// Constructs a model from its config: stem conv3x3 + norm + relu, the
/// configured blocks, global average pooling, and a dense head. Layer
/// weights use He-uniform fan-in initialization drawn deterministically
/// from the config seed; skip weights start at `init_skip_weight`.
pub fn build_model(config: ModelConfig) -> Result<Model> {
    if config.num_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {}",
            config.num_classes
        )));
    }
    if !config.init_skip_weight.is_finite() {
        return Err(Error::Config("initial skip weight must be finite".into()));
    }
    if config.blocks.is_empty() {
        return Err(Error::Config("model needs at least one block".into()));
    }
    let mut in_ch = config.stem_channels;
    for (i, b) in config.blocks.iter().enumerate() {
        if b.in_channels != in_ch {
            return Err(Error::Config(format!(
                "block {} expects {} input channels but receives {}",
                i + 1,
                b.in_channels,
                in_ch
            )));
        }
        if b.kind == BlockKind::Identity && (b.in_channels != b.out_channels || b.stride != 1) {
            return Err(Error::Config(format!(
                "identity block {} must keep channels and stride 1",
                i + 1
            )));
        }
        if b.stride == 0 {
            return Err(Error::Config(format!("block {} has zero stride", i + 1)));
        }
        in_ch = b.out_channels;
    }

    let mut rng = SplitMix64::derive(config.seed, "init");
    let mut params: Vec<Parameter> = Vec::new();

    let mut he_conv = |params: &mut Vec<Parameter>, name: String, f: usize, c: usize, k: usize| {
        let fan_in = (c * k * k) as f32;
        let limit = (6.0 / fan_in).sqrt();
        let data: Vec<f32> = (0..f * c * k * k).map(|_| rng.uniform(-limit, limit)).collect();
        params.push(Parameter::new(name, Tensor::new(vec![f, c, k, k], data).unwrap()));
        params.len() - 1
    };
    let add_norm = |params: &mut Vec<Parameter>, prefix: &str, c: usize| -> NormLayer {
        params.push(Parameter::new(format!("{prefix}.gamma"), Tensor::filled(&[c], 1.0)));
        let gamma = params.len() - 1;
        params.push(Parameter::new(format!("{prefix}.beta"), Tensor::zeros(&[c])));
        let beta = params.len() - 1;
        params.push(Parameter::frozen(
            format!("{prefix}.running_mean"),
            Tensor::zeros(&[c]),
        ));
        let running_mean = params.len() - 1;
        params.push(Parameter::frozen(
            format!("{prefix}.running_var"),
            Tensor::filled(&[c], 1.0),
        ));
        let running_var = params.len() - 1;
        NormLayer {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    };

    let (c_in, _, _) = config.input_shape;
    let stem_conv = ConvLayer {
        weight: he_conv(&mut params, "stem.conv.weight".into(), config.stem_channels, c_in, 3),
        stride: 1,
        padding: Padding::Same,
    };
    let stem_bn = add_norm(&mut params, "stem.bn", config.stem_channels);

    // Trainable skip scalars, allocated per mode. Values are constants, not
    // RNG draws, so the layer-weight stream is identical across modes.
    let mut unified: Option<usize> = None;
    let mut per_type: BTreeMap<BlockKind, usize> = BTreeMap::new();

    let mut blocks = Vec::new();
    let mut stage = 0usize;
    let mut index_in_stage = 0usize;
    for spec in &config.blocks {
        if spec.kind == BlockKind::Projection {
            stage += 1;
            index_in_stage = 0;
        }
        index_in_stage += 1;
        let name = match spec.kind {
            BlockKind::Projection => format!("stage{stage}.proj"),
            BlockKind::Identity => format!("stage{stage}.id{index_in_stage}"),
        };
        let conv1 = ConvLayer {
            weight: he_conv(
                &mut params,
                format!("{name}.conv1.weight"),
                spec.out_channels,
                spec.in_channels,
                3,
            ),
            stride: spec.stride,
            padding: Padding::Same,
        };
        let bn1 = add_norm(&mut params, &format!("{name}.bn1"), spec.out_channels);
        let conv2 = ConvLayer {
            weight: he_conv(
                &mut params,
                format!("{name}.conv2.weight"),
                spec.out_channels,
                spec.out_channels,
                3,
            ),
            stride: 1,
            padding: Padding::Same,
        };
        let bn2 = add_norm(&mut params, &format!("{name}.bn2"), spec.out_channels);
        let proj = match spec.kind {
            BlockKind::Projection => {
                let conv = ConvLayer {
                    weight: he_conv(
                        &mut params,
                        format!("{name}.skip.conv.weight"),
                        spec.out_channels,
                        spec.in_channels,
                        1,
                    ),
                    stride: spec.stride,
                    padding: Padding::Valid,
                };
                let bn = add_norm(&mut params, &format!("{name}.skip.bn"), spec.out_channels);
                Some((conv, bn))
            }
            BlockKind::Identity => None,
        };
        let skip = if config.plain_residual {
            SkipBinding::Plain
        } else {
            match config.mode {
                AdaSkipMode::Fixed(c) => SkipBinding::Fixed(c),
                AdaSkipMode::Unified => {
                    let idx = *unified.get_or_insert_with(|| {
                        params.push(Parameter::new(
                            "skip.unified",
                            Tensor::scalar(config.init_skip_weight),
                        ));
                        params.len() - 1
                    });
                    SkipBinding::Weight(idx)
                }
                AdaSkipMode::PerType => {
                    let idx = *per_type.entry(spec.kind).or_insert_with(|| {
                        let label = match spec.kind {
                            BlockKind::Identity => "skip.identity",
                            BlockKind::Projection => "skip.projection",
                        };
                        params.push(Parameter::new(
                            label,
                            Tensor::scalar(config.init_skip_weight),
                        ));
                        params.len() - 1
                    });
                    SkipBinding::Weight(idx)
                }
                AdaSkipMode::PerBlock => {
                    params.push(Parameter::new(
                        format!("{name}.skip_weight"),
                        Tensor::scalar(config.init_skip_weight),
                    ));
                    SkipBinding::Weight(params.len() - 1)
                }
            }
        };
        blocks.push(Block {
            kind: spec.kind,
            name,
            conv1,
            bn1,
            conv2,
            bn2,
            proj,
            skip,
        });
    }

    let last_ch = config.blocks.last().unwrap().out_channels;
    let fan_in = last_ch as f32;
    let limit = (6.0 / fan_in).sqrt();
    let data: Vec<f32> = (0..last_ch * config.num_classes)
        .map(|_| rng.uniform(-limit, limit))
        .collect();
    params.push(Parameter::new(
        "head.dense.weight",
        Tensor::new(vec![last_ch, config.num_classes], data)?,
    ));
    let dense_weight = params.len() - 1;
    params.push(Parameter::new(
        "head.dense.bias",
        Tensor::zeros(&[config.num_classes]),
    ));
    let dense_bias = params.len() - 1;

    Ok(Model {
        config,
        params,
        stem_conv,
        stem_bn,
        blocks,
        dense_weight,
        dense_bias,
    })
}

// Leaf ids for trainable parameters, created lazily so each parameter is
// registered exactly once per tape.
struct Leaves<'p> {
    params: &'p [Parameter],
    ids: Vec<Option<NodeId>>,
}

impl<'p> Leaves<'p> {
    fn new(params: &'p [Parameter]) -> Self {
        Self {
            params,
            ids: vec![None; params.len()],
        }
    }

    fn get(&mut self, tape: &mut Tape, idx: usize) -> NodeId {
        *self.ids[idx].get_or_insert_with(|| tape.leaf(&self.params[idx]))
    }
}

impl Model {
    pub fn skip_site_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_forward(
        &self,
        params: &[Parameter],
        tape: &mut Tape,
        leaves: &mut Leaves,
        x: NodeId,
        bn: &NormLayer,
        relu: bool,
        training: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<NodeId> {
        let gamma = leaves.get(tape, bn.gamma);
        let beta = leaves.get(tape, bn.beta);
        if training {
            let (out, stats) = tape.batch_norm_nhwc_train(x, gamma, beta, relu)?;
            updates.push(BnUpdate {
                running_mean: bn.running_mean,
                running_var: bn.running_var,
                stats,
            });
            Ok(out)
        } else {
            tape.batch_norm_nhwc_eval(
                x,
                gamma,
                beta,
                &params[bn.running_mean].value,
                &params[bn.running_var].value,
                relu,
            )
        }
    }

    // relu(tfd + w*ipd) fused; the activation belongs to the site.
    fn skip_combine_relu(
        &self,
        tape: &mut Tape,
        leaves: &mut Leaves,
        tfd: NodeId,
        ipd: NodeId,
        binding: SkipBinding,
    ) -> Result<NodeId> {
        match binding {
            SkipBinding::Plain => tape.add_relu(tfd, ipd),
            SkipBinding::Fixed(c) => tape.ada_skip_fixed_relu(tfd, ipd, c),
            SkipBinding::Weight(idx) => {
                let w = leaves.get(tape, idx);
                tape.ada_skip_relu(tfd, ipd, w)
            }
        }
    }

    fn block_forward_inner(
        &self,
        params: &[Parameter],
        tape: &mut Tape,
        leaves: &mut Leaves,
        block: &Block,
        x: NodeId,
        training: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<NodeId> {
        let w1 = leaves.get(tape, block.conv1.weight);
        let mut main = tape.conv2d_nhwc(x, w1, block.conv1.stride, block.conv1.padding)?;
        main = self.norm_forward(params, tape, leaves, main, &block.bn1, true, training, updates)?;
        let w2 = leaves.get(tape, block.conv2.weight);
        main = tape.conv2d_nhwc(main, w2, block.conv2.stride, block.conv2.padding)?;
        let tfd = self.norm_forward(params, tape, leaves, main, &block.bn2, false, training, updates)?;
        let ipd = match &block.proj {
            Some((conv, bn)) => {
                let wp = leaves.get(tape, conv.weight);
                let projected = tape.conv2d_nhwc(x, wp, conv.stride, conv.padding)?;
                self.norm_forward(params, tape, leaves, projected, bn, false, training, updates)?
            }
            None => x,
        };
        self.skip_combine_relu(tape, leaves, tfd, ipd, block.skip)
    }

    /// Records one block's forward pass on the tape. `x` is `[N,H,W,C]`.
    /// Exposed so block behavior is testable in isolation.
    pub fn block_forward(
        &self,
        params: &[Parameter],
        tape: &mut Tape,
        block_index: usize,
        x: NodeId,
        training: bool,
    ) -> Result<(NodeId, Vec<BnUpdate>)> {
        let mut leaves = Leaves::new(params);
        let mut updates = Vec::new();
        let out = self.block_forward_inner(
            params,
            tape,
            &mut leaves,
            &self.blocks[block_index],
            x,
            training,
            &mut updates,
        )?;
        Ok((out, updates))
    }

    /// Records the full forward pass (stem, blocks, pooling, dense head) on
    /// the tape against an explicit parameter slice. `images` is `[N,C,H,W]`;
    /// activations run channels-last internally.
    pub fn forward_with(
        &self,
        params: &[Parameter],
        tape: &mut Tape,
        images: &Tensor,
        training: bool,
    ) -> Result<ForwardPass> {
        let mut leaves = Leaves::new(params);
        let mut updates = Vec::new();
        let x = tape.constant(nhwc::from_nchw(images)?);
        let ws = leaves.get(tape, self.stem_conv.weight);
        let mut h = tape.conv2d_nhwc(x, ws, self.stem_conv.stride, self.stem_conv.padding)?;
        h = self.norm_forward(params, tape, &mut leaves, h, &self.stem_bn, true, training, &mut updates)?;
        for block in &self.blocks {
            h = self.block_forward_inner(params, tape, &mut leaves, block, h, training, &mut updates)?;
        }
        let pooled = tape.global_avg_pool_nhwc(h)?;
        let wd = leaves.get(tape, self.dense_weight);
        let bd = leaves.get(tape, self.dense_bias);
        let logits = tape.matmul(pooled, wd)?;
        let logits = tape.add_row_bias(logits, bd)?;
        Ok(ForwardPass {
            logits,
            bn_updates: updates,
        })
    }

    pub fn forward(&self, tape: &mut Tape, images: &Tensor, training: bool) -> Result<ForwardPass> {
        self.forward_with(&self.params, tape, images, training)
    }

    /// Inference logits without recording a tape; uses running statistics.
    pub fn logits_no_grad(&self, images: &Tensor) -> Result<Tensor> {
        let p = &self.params;
        let mut h = nhwc::conv2d(
            &nhwc::from_nchw(images)?,
            &p[self.stem_conv.weight].value,
            self.stem_conv.stride,
            self.stem_conv.padding,
        )?;
        let eval_bn = |h: &Tensor, bn: &NormLayer, relu: bool| -> Result<Tensor> {
            nhwc::batch_norm_eval_act(
                h,
                &p[bn.gamma].value,
                &p[bn.beta].value,
                &p[bn.running_mean].value,
                &p[bn.running_var].value,
                relu,
            )
        };
        h = eval_bn(&h, &self.stem_bn, true)?;
        for block in &self.blocks {
            let mut main = nhwc::conv2d(
                &h,
                &p[block.conv1.weight].value,
                block.conv1.stride,
                block.conv1.padding,
            )?;
            main = eval_bn(&main, &block.bn1, true)?;
            main = nhwc::conv2d(
                &main,
                &p[block.conv2.weight].value,
                block.conv2.stride,
                block.conv2.padding,
            )?;
            let tfd = eval_bn(&main, &block.bn2, false)?;
            let ipd = match &block.proj {
                Some((conv, bn)) => {
                    let projected =
                        nhwc::conv2d(&h, &p[conv.weight].value, conv.stride, conv.padding)?;
                    eval_bn(&projected, bn, false)?
                }
                None => h.clone(),
            };
            h = match block.skip {
                SkipBinding::Plain => tensor::add_relu(&tfd, &ipd)?,
                SkipBinding::Fixed(c) => tensor::weighted_sum_relu(&tfd, &ipd, c)?,
                SkipBinding::Weight(idx) => {
                    tensor::weighted_sum_relu(&tfd, &ipd, p[idx].value.item())?
                }
            };
        }
        let pooled = nhwc::global_avg_pool(&h)?;
        let logits = tensor::matmul(&pooled, &p[self.dense_weight].value)?;
        tensor::add_row_bias(&logits, &p[self.dense_bias].value)
    }

    /// Folds batch statistics into running statistics with the standard
    /// momentum rule. Call once per training step.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate>) {
        let m = tensor::BATCH_NORM_MOMENTUM;
        for u in updates {
            let rm = self.params[u.running_mean].value.data_mut();
            for (r, b) in rm.iter_mut().zip(&u.stats.mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            let rv = self.params[u.running_var].value.data_mut();
            for (r, b) in rv.iter_mut().zip(&u.stats.var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }

    /// Writes gradients from a backward pass into the parameters, zeroing
    /// everything first. Every trainable parameter must be present.
    pub fn apply_gradients(&mut self, grads: &GradientMap) -> Result<()> {
        for p in self.params.iter_mut() {
            p.zero_grad();
            if !p.trainable {
                continue;
            }
            let g = grads
                .get(&p.name)
                .ok_or_else(|| Error::MissingGradient { name: p.name.clone() })?;
            p.grad = g.clone();
        }
        Ok(())
    }

    /// Final skip weights in architectural order: one entry per skip site.
    /// Fixed and plain sites report their effective constant, flagged
    /// non-trainable.
    pub fn extract_skip_weights(&self) -> Vec<SkipWeight> {
        self.blocks
            .iter()
            .map(|b| match b.skip {
                SkipBinding::Plain => SkipWeight {
                    site: b.name.clone(),
                    value: 1.0,
                    trainable: false,
                },
                SkipBinding::Fixed(c) => SkipWeight {
                    site: b.name.clone(),
                    value: c,
                    trainable: false,
                },
                SkipBinding::Weight(idx) => SkipWeight {
                    site: b.name.clone(),
                    value: self.params[idx].value.item(),
                    trainable: self.params[idx].trainable,
                },
            })
            .collect()
    }

    // -- checkpointing -------------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        let cfg = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(DTYPE_F32);
            out.push(u8::from(p.trainable));
            out.push(p.value.shape().len() as u8);
            for d in p.value.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Cursor { bytes: &bytes, pos: 0 };
        let magic = r.take(CKPT_MAGIC.len())?;
        if magic != CKPT_MAGIC {
            return Err(Error::Checkpoint("unrecognized magic/version".into()));
        }
        let cfg_len = r.u32()? as usize;
        let cfg: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| Error::Checkpoint(format!("config parse: {e}")))?;
        let mut model = build_model(cfg)?;
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match architecture ({})",
                count,
                model.params.len()
            )));
        }
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("unknown dtype tag {dtype}")));
            }
            let trainable = r.u8()? != 0;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let b = r.take(4)?;
                data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
            }
            let p = model
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
            if p.value.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}': shape {:?} does not match architecture {:?}",
                    shape,
                    p.value.shape()
                )));
            }
            if p.trainable != trainable {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}': trainable flag mismatch"
                )));
            }
            p.value = Tensor::new(shape, data)?;
            p.zero_grad();
        }
        Ok(model)
    }
}

const CKPT_MAGIC: &[u8] = b"ADARNET\x01";
const DTYPE_F32: u8 = 0;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn mini(mode: AdaSkipMode, seed: u64) -> Model {
        build_model(ModelConfig::mini((1, 28, 28), 10, mode, seed)).unwrap()
    }

    fn random_images(n: usize, shape: (usize, usize, usize), seed: u64) -> Tensor {
        let mut g = SplitMix64::derive(seed, "images");
        let len = n * shape.0 * shape.1 * shape.2;
        Tensor::new(
            vec![n, shape.0, shape.1, shape.2],
            (0..len).map(|_| g.next_f32()).collect(),
        )
        .unwrap()
    }

    fn onehot_cycle(n: usize, k: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, k]);
        for r in 0..n {
            t.data_mut()[r * k + r % k] = 1.0;
        }
        t
    }

    #[test]
    fn skip_parameter_counts_per_mode() {
        let count = |m: &Model| {
            m.params
                .iter()
                .filter(|p| p.name.contains("skip_weight") || p.name.starts_with("skip."))
                .count()
        };
        assert_eq!(count(&mini(AdaSkipMode::PerBlock, 1)), 6);
        assert_eq!(count(&mini(AdaSkipMode::PerType, 1)), 2);
        assert_eq!(count(&mini(AdaSkipMode::Unified, 1)), 1);
        assert_eq!(count(&mini(AdaSkipMode::Fixed(1.0), 1)), 0);
    }

    #[test]
    fn extract_reports_initial_values_in_order() {
        let m = mini(AdaSkipMode::PerBlock, 3);
        let w = m.extract_skip_weights();
        assert_eq!(w.len(), 6);
        assert!(w.iter().all(|s| s.value == 0.0 && s.trainable));
        let sites: Vec<&str> = w.iter().map(|s| s.site.as_str()).collect();
        assert_eq!(
            sites,
            ["stage1.proj", "stage1.id2", "stage2.proj", "stage2.id2", "stage3.proj", "stage3.id2"]
        );
    }

    #[test]
    fn extract_fixed_mode_flags_non_trainable() {
        let m = mini(AdaSkipMode::Fixed(2.0), 3);
        let w = m.extract_skip_weights();
        assert_eq!(w.len(), 6);
        assert!(w.iter().all(|s| s.value == 2.0 && !s.trainable));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::mini((1, 8, 8), 10, AdaSkipMode::Unified, 0);
        cfg.num_classes = 1;
        assert!(build_model(cfg).is_err());

        let mut cfg = ModelConfig::mini((1, 8, 8), 10, AdaSkipMode::Unified, 0);
        cfg.blocks[1] = BlockSpec::identity(32); // channel break
        assert!(build_model(cfg).is_err());

        let mut cfg = ModelConfig::mini((1, 8, 8), 10, AdaSkipMode::Unified, 0);
        cfg.blocks[1].stride = 2; // identity blocks cannot stride
        assert!(build_model(cfg).is_err());
    }

    // Fixed(1.0) must reproduce the plain-addition build bit for bit:
    // forward logits, loss, and every non-skip gradient.
    #[test]
    fn fixed_one_equals_plain_addition_bitwise() {
        let images = random_images(4, (1, 28, 28), 7);
        let onehot = onehot_cycle(4, 10);
        let fixed = mini(AdaSkipMode::Fixed(1.0), 11);
        let mut plain_cfg = ModelConfig::mini((1, 28, 28), 10, AdaSkipMode::Fixed(1.0), 11);
        plain_cfg.plain_residual = true;
        let plain = build_model(plain_cfg).unwrap();

        let run = |m: &Model| -> (Vec<f32>, f32, GradientMap) {
            let mut tape = Tape::new();
            let pass = m.forward(&mut tape, &images, true).unwrap();
            let loss = tape.softmax_cross_entropy(pass.logits, &onehot).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(pass.logits).data().to_vec(),
                tape.value(loss).item(),
                grads,
            )
        };
        let (logits_a, loss_a, grads_a) = run(&fixed);
        let (logits_b, loss_b, grads_b) = run(&plain);
        assert_eq!(logits_a, logits_b);
        assert_eq!(loss_a.to_bits(), loss_b.to_bits());
        assert_eq!(grads_a.len(), grads_b.len());
        for (name, ga) in &grads_a {
            let gb = &grads_b[name];
            assert_eq!(ga.data(), gb.data(), "gradient mismatch for {name}");
        }
    }

    // The sharing modes only differ in parameter bookkeeping: at equal skip
    // values their forward outputs are identical.
    #[test]
    fn modes_agree_at_equal_weights() {
        let images = random_images(3, (1, 28, 28), 5);
        let value = 0.37f32;
        let mut outputs = Vec::new();
        for mode in [AdaSkipMode::Unified, AdaSkipMode::PerType, AdaSkipMode::PerBlock] {
            let mut cfg = ModelConfig::mini((1, 28, 28), 10, mode, 99);
            cfg.init_skip_weight = value;
            let m = build_model(cfg).unwrap();
            outputs.push(m.logits_no_grad(&images).unwrap());
        }
        assert_eq!(outputs[0].data(), outputs[1].data());
        assert_eq!(outputs[0].data(), outputs[2].data());
        // and Fixed at the same constant agrees too
        let mut cfg = ModelConfig::mini((1, 28, 28), 10, AdaSkipMode::Fixed(value), 99);
        cfg.init_skip_weight = value;
        let fixed = build_model(cfg).unwrap();
        assert_eq!(outputs[0].data(), fixed.logits_no_grad(&images).unwrap().data());
    }

    // The shared weight's gradient equals the sum of the per-block
    // gradients at identical parameter values.
    #[test]
    fn unified_gradient_is_sum_of_per_block_gradients() {
        let images = random_images(4, (1, 28, 28), 13);
        let onehot = onehot_cycle(4, 10);
        let grads_for = |mode: AdaSkipMode| -> GradientMap {
            let mut cfg = ModelConfig::mini((1, 28, 28), 10, mode, 21);
            cfg.init_skip_weight = 0.25;
            let m = build_model(cfg).unwrap();
            let mut tape = Tape::new();
            let pass = m.forward(&mut tape, &images, true).unwrap();
            let loss = tape.softmax_cross_entropy(pass.logits, &onehot).unwrap();
            tape.backward(loss).unwrap()
        };
        let unified = grads_for(AdaSkipMode::Unified)["skip.unified"].item();
        let per_block = grads_for(AdaSkipMode::PerBlock);
        let sum: f32 = per_block
            .iter()
            .filter(|(n, _)| n.ends_with(".skip_weight"))
            .map(|(_, g)| g.item())
            .sum();
        let rel = (unified - sum).abs() / unified.abs().max(sum.abs()).max(1e-8);
        assert!(rel < 1e-5, "unified {unified} vs per-block sum {sum}");
    }

    #[test]
    fn identity_block_with_zero_convs_passes_relu_of_input() {
        // all conv weights zero, gamma=1, beta=0, w=1 -> output = relu(x)
        let mut cfg = ModelConfig::mini((1, 8, 8), 10, AdaSkipMode::Fixed(1.0), 2);
        cfg.init_skip_weight = 1.0;
        let mut m = build_model(cfg).unwrap();
        for p in m.params.iter_mut() {
            if p.name.contains("conv") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let x = {
            let mut g = SplitMix64::new(31);
            let data: Vec<f32> = (0..2 * 4 * 4 * 16).map(|_| g.uniform(-1.0, 1.0)).collect();
            Tensor::new(vec![2, 4, 4, 16], data).unwrap()
        };
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let (out, _) = m.block_forward(&m.params, &mut tape, 1, xid, true).unwrap();
        assert_eq!(tape.value(out).data(), tensor::relu(&x).data());
    }

    #[test]
    fn identity_block_with_zero_convs_and_zero_weight_is_zero() {
        let mut cfg = ModelConfig::mini((1, 8, 8), 10, AdaSkipMode::Unified, 2);
        cfg.init_skip_weight = 0.0;
        let mut m = build_model(cfg).unwrap();
        for p in m.params.iter_mut() {
            if p.name.contains("conv") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let x = Tensor::filled(&[1, 4, 4, 16], 0.7);
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let (out, _) = m.block_forward(&m.params, &mut tape, 1, xid, true).unwrap();
        assert!(tape.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projection_block_skip_path_dominates_when_main_is_zero() {
        // stride 1, in=out, skip conv = identity, main convs zero, w=1:
        // output = relu(bn(x))
        let mut cfg = ModelConfig::mini((1, 8, 8), 10, AdaSkipMode::Fixed(1.0), 2);
        cfg.init_skip_weight = 1.0;
        let mut m = build_model(cfg).unwrap();
        for p in m.params.iter_mut() {
            if p.name.starts_with("stage1.proj.conv") {
                p.value = Tensor::zeros(p.value.shape());
            }
            if p.name == "stage1.proj.skip.conv.weight" {
                // identity 1x1: out channel f reads in channel f
                let mut t = Tensor::zeros(p.value.shape());
                for f in 0..16 {
                    t.data_mut()[f * 16 + f] = 1.0;
                }
                p.value = t;
            }
        }
        let x = {
            let mut g = SplitMix64::new(41);
            let data: Vec<f32> = (0..2 * 4 * 4 * 16).map(|_| g.uniform(-1.0, 1.0)).collect();
            Tensor::new(vec![2, 4, 4, 16], data).unwrap()
        };
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let (out, _) = m.block_forward(&m.params, &mut tape, 0, xid, true).unwrap();
        let (bn_x, _) =
            nhwc::batch_norm_train(&x, &Tensor::filled(&[16], 1.0), &Tensor::zeros(&[16]))
                .unwrap();
        let want = tensor::relu(&bn_x);
        for (a, b) in tape.value(out).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_block_zero_everything_is_zero() {
        let mut cfg = ModelConfig::mini((1, 8, 8), 10, AdaSkipMode::Unified, 2);
        cfg.init_skip_weight = 0.0;
        let mut m = build_model(cfg).unwrap();
        for p in m.params.iter_mut() {
            if p.name.contains("conv") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let x = Tensor::filled(&[1, 4, 4, 16], 0.3);
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let (out, _) = m.block_forward(&m.params, &mut tape, 0, xid, true).unwrap();
        assert!(tape.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = mini(AdaSkipMode::PerBlock, 4);
        let images = random_images(3, (1, 28, 28), 9);
        let a = m.logits_no_grad(&images).unwrap();
        let b = m.logits_no_grad(&images).unwrap();
        assert_eq!(a.shape(), &[3, 10]);
        assert_eq!(a.data(), b.data());
        // same seed -> same model -> same logits
        let m2 = mini(AdaSkipMode::PerBlock, 4);
        assert_eq!(a.data(), m2.logits_no_grad(&images).unwrap().data());
        // different seed -> different logits
        let m3 = mini(AdaSkipMode::PerBlock, 5);
        assert_ne!(a.data(), m3.logits_no_grad(&images).unwrap().data());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("adaresnet-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let m = mini(AdaSkipMode::PerBlock, 17);
        m.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.config, m.config);
        assert_eq!(loaded.params.len(), m.params.len());
        for (a, b) in loaded.params.iter().zip(&m.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.value.data(), b.value.data());
        }
        let images = random_images(2, (1, 28, 28), 3);
        assert_eq!(
            loaded.logits_no_grad(&images).unwrap().data(),
            m.logits_no_grad(&images).unwrap().data()
        );
        // corruption is rejected
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        let bad = dir.join("bad.ckpt");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(Model::load(&bad), Err(Error::Checkpoint(_))));
        // truncation is rejected
        let short = dir.join("short.ckpt");
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&short, &full[..full.len() / 2]).unwrap();
        assert!(matches!(Model::load(&short), Err(Error::Checkpoint(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
