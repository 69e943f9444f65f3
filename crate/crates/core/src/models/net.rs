use std::ops::Range;

use rand::Rng;

use crate::autodiff::{BatchNormConfig, Graph, Phase, RunningStats, Var};
use crate::error::{Error, Result};
use crate::models::{frequency_groups, BranchLayer, ConvSpec, HeadLayer, ModelSpec, ShortcutKind};
use crate::params::{ParamId, ParamStore};
use crate::rng::{stream, Purpose, RandomStream};
use crate::shake::{residual_shake_block, BlockCoefficients, BlockOptions, FrameLayout, Granularity, ShakeMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct BnLayer {
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
enum BranchNode {
    Conv(ConvLayer),
    Bn(BnLayer),
    Relu,
}

#[derive(Debug, Clone)]
struct BlockLayers {
    branches: Vec<Vec<BranchNode>>,
    shortcut: Option<ConvLayer>,
    mode: ShakeMode,
    post_relu: bool,
}

#[derive(Debug, Clone)]
enum HeadNode {
    Flatten,
    GroupPool(Vec<Range<usize>>),
    TemporalMean,
    Dropout(f64),
    Linear { weight: ParamId, bias: Option<ParamId> },
    Relu,
}

/// Random streams consumed by a forward pass: one per residual block for
/// shake coefficients, one for dropout masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRngs {
    pub shake: Vec<RandomStream>,
    pub dropout: RandomStream,
}

impl ModelRngs {
    fn new(seed: u64, blocks: usize) -> Self {
        ModelRngs {
            shake: (0..blocks as u64)
                .map(|i| stream(seed, Purpose::Shake, i))
                .collect(),
            dropout: stream(seed, Purpose::Dropout, 0),
        }
    }
}

/// A built network: parameters, batch-norm running statistics, and the
/// random streams used in train phase.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    stats: Vec<RunningStats>,
    stat_names: Vec<String>,
    prelim: ConvLayer,
    prelim_bn: Option<BnLayer>,
    blocks: Vec<BlockLayers>,
    head: Vec<HeadNode>,
    bn_config: BatchNormConfig,
    granularity: Granularity,
    normalize_unshaken: bool,
    rngs: ModelRngs,
}

struct Builder<'a> {
    params: &'a mut ParamStore,
    stats: &'a mut Vec<RunningStats>,
    stat_names: &'a mut Vec<String>,
    rng: RandomStream,
}

impl Builder<'_> {
    fn uniform(&mut self, dims: &[usize], bound: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(dims, |_| rng.gen_range(-bound..bound))
    }

    fn conv(&mut self, name: &str, spec: &ConvSpec, in_ch: usize) -> ConvLayer {
        let bound = 1.0 / ((in_ch * spec.kh * spec.kw) as f64).sqrt();
        let w = self.uniform(&[spec.out_ch, in_ch, spec.kh, spec.kw], bound);
        let b = self.uniform(&[spec.out_ch], bound);
        ConvLayer {
            weight: self.params.add(format!("{name}.weight"), w),
            bias: self.params.add(format!("{name}.bias"), b),
        }
    }

    fn bn(&mut self, name: &str, ch: usize) -> BnLayer {
        let gamma = self.params.add(format!("{name}.gamma"), Tensor::ones(&[ch]));
        let beta = self.params.add(format!("{name}.beta"), Tensor::zeros(&[ch]));
        self.stats.push(RunningStats::new(ch));
        self.stat_names.push(name.to_string());
        BnLayer {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    fn linear(&mut self, name: &str, input: usize, out: usize, bias: bool) -> HeadNode {
        let bound = 1.0 / (input as f64).sqrt();
        let w = self.uniform(&[input, out], bound);
        let weight = self.params.add(format!("{name}.weight"), w);
        let bias = bias.then(|| {
            let b = self.uniform(&[out], bound);
            self.params.add(format!("{name}.bias"), b)
        });
        HeadNode::Linear { weight, bias }
    }
}

impl ModelSpec {
    /// Allocates and initializes parameters; `seed` fixes initialization and
    /// the model's train-phase random streams.
    pub fn build(&self, seed: u64) -> Model {
        let mut params = ParamStore::new();
        let mut stats = Vec::new();
        let mut stat_names = Vec::new();
        let mut b = Builder {
            params: &mut params,
            stats: &mut stats,
            stat_names: &mut stat_names,
            rng: stream(seed, Purpose::Init, 0),
        };

        let prelim = b.conv("prelim.conv", &self.prelim.conv, 1);
        let prelim_bn = self
            .prelim
            .batchnorm
            .then(|| b.bn("prelim.bn", self.prelim.conv.out_ch));

        let mut blocks = Vec::new();
        for stage in &self.stages {
            for (bi, block) in stage.blocks.iter().enumerate() {
                let prefix = format!("{}.{bi}", stage.name);
                let mut branches = Vec::with_capacity(block.branch_count);
                for br in 0..block.branch_count {
                    let mut ch = block.in_ch;
                    let mut nodes = Vec::new();
                    let (mut nconv, mut nbn) = (0, 0);
                    for layer in &block.branch.layers {
                        nodes.push(match layer {
                            BranchLayer::Conv(c) => {
                                let node = b.conv(&format!("{prefix}.branch{br}.conv{nconv}"), c, ch);
                                ch = c.out_ch;
                                nconv += 1;
                                BranchNode::Conv(node)
                            }
                            BranchLayer::BatchNorm => {
                                let node = b.bn(&format!("{prefix}.branch{br}.bn{nbn}"), ch);
                                nbn += 1;
                                BranchNode::Bn(node)
                            }
                            BranchLayer::Relu => BranchNode::Relu,
                        });
                    }
                    branches.push(nodes);
                }
                let shortcut = match block.shortcut {
                    ShortcutKind::Identity => None,
                    ShortcutKind::Projection => Some(b.conv(
                        &format!("{prefix}.shortcut"),
                        &ConvSpec::new(block.out_ch(), 1, 1),
                        block.in_ch,
                    )),
                };
                blocks.push(BlockLayers {
                    branches,
                    shortcut,
                    mode: block.shake_mode,
                    post_relu: block.post_relu,
                });
            }
        }

        let mut head = Vec::new();
        let mut nlin = 0;
        for (layer, input) in self.head_dims() {
            head.push(match layer {
                HeadLayer::Flatten => HeadNode::Flatten,
                HeadLayer::FrequencyGroupPool { groups } => {
                    HeadNode::GroupPool(frequency_groups(self.frame_dims.1, groups))
                }
                HeadLayer::TemporalMeanPool => HeadNode::TemporalMean,
                HeadLayer::Dropout(p) => HeadNode::Dropout(p),
                HeadLayer::Linear { out, bias } => {
                    let node = b.linear(&format!("head.linear{nlin}"), input, out, bias);
                    nlin += 1;
                    node
                }
                HeadLayer::Relu => HeadNode::Relu,
            });
        }

        let rngs = ModelRngs::new(seed, blocks.len());
        Model {
            spec: self.clone(),
            params,
            stats,
            stat_names,
            prelim,
            prelim_bn,
            blocks,
            head,
            bn_config: BatchNormConfig::default(),
            granularity: Granularity::default(),
            normalize_unshaken: false,
            rngs,
        }
    }
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub(crate) fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    pub(crate) fn running_stat_names(&self) -> &[String] {
        &self.stat_names
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn set_granularity(&mut self, granularity: Granularity) {
        self.granularity = granularity;
    }

    pub fn set_normalize_unshaken(&mut self, on: bool) {
        self.normalize_unshaken = on;
    }

    pub fn shake_mode(&self) -> ShakeMode {
        self.blocks.first().map_or(ShakeMode::None, |b| b.mode)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Restarts every train-phase random stream from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.rngs = ModelRngs::new(seed, self.blocks.len());
    }

    pub fn rngs(&self) -> &ModelRngs {
        &self.rngs
    }

    pub fn set_rngs(&mut self, rngs: ModelRngs) {
        self.rngs = rngs;
    }

    fn conv(&self, g: &mut Graph, x: Var, layer: ConvLayer) -> Result<Var> {
        let w = g.param(layer.weight, self.params.value(layer.weight).clone());
        let b = g.param(layer.bias, self.params.value(layer.bias).clone());
        g.conv2d(x, w, b)
    }

    fn bn(&mut self, g: &mut Graph, x: Var, layer: BnLayer, phase: Phase) -> Result<Var> {
        let gamma = g.param(layer.gamma, self.params.value(layer.gamma).clone());
        let beta = g.param(layer.beta, self.params.value(layer.beta).clone());
        g.batchnorm2d(x, gamma, beta, &mut self.stats[layer.stats], self.bn_config, phase)
    }

    /// Logits `[B, classes]` for a batch of spliced frames `[R, H, W]`
    /// (or `[R, 1, H, W]`) grouped into utterances by `layout`.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        frames: &Tensor,
        layout: &FrameLayout,
        phase: Phase,
    ) -> Result<Var> {
        let (h, w) = self.spec.frame_dims;
        let rows = frames.dims()[0];
        let ok = match frames.dims() {
            [_, fh, fw] | [_, 1, fh, fw] => (*fh, *fw) == (h, w),
            _ => false,
        };
        if !ok || rows != layout.rows() {
            return Err(Error::shape(
                "model forward",
                format!("[{}, {h}, {w}]", layout.rows()),
                format!("{:?}", frames.dims()),
            ));
        }
        let input = g.constant(frames.clone().reshape(&[rows, 1, h, w])?);

        let mut x = self.conv(g, input, self.prelim)?;
        if let Some(bn) = self.prelim_bn {
            x = self.bn(g, x, bn, phase)?;
        }
        if self.spec.prelim.relu {
            x = g.relu(x);
        }

        let options = BlockOptions {
            normalize_unshaken: self.normalize_unshaken,
            ..BlockOptions::default()
        };
        for bi in 0..self.blocks.len() {
            let block = self.blocks[bi].clone();
            let mut outs = Vec::with_capacity(block.branches.len());
            for nodes in &block.branches {
                let mut y = x;
                for node in nodes {
                    y = match *node {
                        BranchNode::Conv(c) => self.conv(g, y, c)?,
                        BranchNode::Bn(bn) => self.bn(g, y, bn, phase)?,
                        BranchNode::Relu => g.relu(y),
                    };
                }
                outs.push(y);
            }
            let shortcut = match block.shortcut {
                Some(c) => self.conv(g, x, c)?,
                None => x,
            };
            let coeffs = BlockCoefficients::sample(
                block.mode,
                self.granularity,
                layout,
                outs.len(),
                &mut self.rngs.shake[bi],
                phase,
            )?;
            x = residual_shake_block(g, shortcut, &outs, &coeffs, layout, phase, options)?;
            if block.post_relu {
                x = g.relu(x);
            }
        }

        for node in self.head.clone() {
            x = match node {
                HeadNode::Flatten => {
                    let d = g.dims(x).to_vec();
                    g.reshape(x, &[d[0], d[1..].iter().product()])?
                }
                HeadNode::GroupPool(groups) => g.group_mean(x, &groups)?,
                HeadNode::TemporalMean => g.segment_mean(x, layout.samples())?,
                HeadNode::Dropout(p) => g.dropout(x, p, phase, &mut self.rngs.dropout)?,
                HeadNode::Linear { weight, bias } => {
                    let w = g.param(weight, self.params.value(weight).clone());
                    let b = bias.map(|b| g.param(b, self.params.value(b).clone()));
                    g.linear(x, w, b)?
                }
                HeadNode::Relu => g.relu(x),
            };
        }
        Ok(x)
    }

    /// Eval-phase logits `[B, classes]`.
    pub fn logits(&mut self, frames: &Tensor, layout: &FrameLayout) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, frames, layout, Phase::Eval)?;
        Ok(g.value(out).clone())
    }

    /// Eval-phase argmax class per utterance; ties go to the lower index.
    pub fn predict(&mut self, frames: &Tensor, layout: &FrameLayout) -> Result<Vec<usize>> {
        let logits = self.logits(frames, layout)?;
        let k = logits.dims()[1];
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }

    /// Adds the parameter gradients held by `g` into the store.
    pub fn accumulate_grads(&mut self, g: &Graph) {
        for (id, grad) in g.param_grads() {
            self.params.accumulate_grad(id, grad);
        }
    }
}
