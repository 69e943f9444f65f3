//! Declarative architectures and their parameter accounting.
//!
//! A [`ModelSpec`] describes the network; [`ModelSpec::build`] turns it into a
//! trainable [`Model`]. Two builders cover the shallow single-block network
//! and the three-stage deep network.

mod checkpoint;
mod net;

use std::fmt::Write as _;

use crate::shake::ShakeMode;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{Model, ModelRngs};

pub const CLASS_COUNT: usize = 4;
/// Context rows of a spliced frame.
pub const FRAME_CONTEXT: usize = 16;
/// Spectral bins of a spliced frame.
pub const FRAME_BINS: usize = 257;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvSpec {
    pub const fn new(out_ch: usize, kh: usize, kw: usize) -> Self {
        ConvSpec { out_ch, kh, kw }
    }

    /// Weights plus one bias per filter.
    pub fn param_count(&self, in_ch: usize) -> usize {
        self.out_ch * in_ch * self.kh * self.kw + self.out_ch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchLayer {
    Conv(ConvSpec),
    BatchNorm,
    Relu,
}

/// Ordered layers of one residual branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchSpec {
    pub layers: Vec<BranchLayer>,
}

impl BranchSpec {
    /// Conv, BN, ReLU, Conv, BN.
    pub fn conv_bn_relu_conv_bn(first: ConvSpec, second: ConvSpec) -> Self {
        BranchSpec {
            layers: vec![
                BranchLayer::Conv(first),
                BranchLayer::BatchNorm,
                BranchLayer::Relu,
                BranchLayer::Conv(second),
                BranchLayer::BatchNorm,
            ],
        }
    }

    pub fn out_channels(&self, in_ch: usize) -> usize {
        self.layers.iter().fold(in_ch, |ch, l| match l {
            BranchLayer::Conv(c) => c.out_ch,
            _ => ch,
        })
    }

    pub fn param_count(&self, in_ch: usize) -> usize {
        let mut ch = in_ch;
        let mut total = 0;
        for layer in &self.layers {
            match layer {
                BranchLayer::Conv(c) => {
                    total += c.param_count(ch);
                    ch = c.out_ch;
                }
                BranchLayer::BatchNorm => total += 2 * ch,
                BranchLayer::Relu => {}
            }
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShortcutKind {
    Identity,
    /// 1x1 convolution with bias.
    Projection,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_ch: usize,
    pub branch_count: usize,
    pub branch: BranchSpec,
    pub shake_mode: ShakeMode,
    pub shortcut: ShortcutKind,
    /// ReLU after the shortcut add.
    pub post_relu: bool,
}

impl BlockSpec {
    /// A block whose shortcut projects exactly when the channel count changes.
    pub fn new(in_ch: usize, branch: BranchSpec, shake_mode: ShakeMode) -> Self {
        let shortcut = if branch.out_channels(in_ch) == in_ch {
            ShortcutKind::Identity
        } else {
            ShortcutKind::Projection
        };
        BlockSpec {
            in_ch,
            branch_count: 2,
            branch,
            shake_mode,
            shortcut,
            post_relu: true,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.branch.out_channels(self.in_ch)
    }

    pub fn shortcut_param_count(&self) -> usize {
        match self.shortcut {
            ShortcutKind::Identity => 0,
            ShortcutKind::Projection => self.in_ch * self.out_ch() + self.out_ch(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.branch_count * self.branch.param_count(self.in_ch) + self.shortcut_param_count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpec {
    pub name: String,
    pub blocks: Vec<BlockSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrelimSpec {
    pub conv: ConvSpec,
    pub batchnorm: bool,
    pub relu: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadLayer {
    /// `[R, C, H, W]` to `[R, C*H*W]`.
    Flatten,
    /// Mean over H and over `groups` contiguous spectral ranges:
    /// `[R, C, H, W]` to `[R, C*groups]`.
    FrequencyGroupPool { groups: usize },
    /// Mean over each utterance's frames: `[R, D]` to `[B, D]`.
    TemporalMeanPool,
    Dropout(f64),
    Linear { out: usize, bias: bool },
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    /// Spliced frame size (context rows, spectral bins).
    pub frame_dims: (usize, usize),
    pub prelim: PrelimSpec,
    pub stages: Vec<StageSpec>,
    pub head: Vec<HeadLayer>,
    pub class_count: usize,
}

const SHALLOW_PRELIM: ConvSpec = ConvSpec::new(4, 2, 16);

/// The single-block network: prelim conv + BN + ReLU, one two-branch block,
/// temporal mean pooling, and a three-layer classifier.
pub fn shallow_spec(mode: ShakeMode) -> ModelSpec {
    let branch = BranchSpec::conv_bn_relu_conv_bn(ConvSpec::new(4, 2, 64), ConvSpec::new(4, 4, 128));
    ModelSpec {
        name: "shallow".into(),
        frame_dims: (FRAME_CONTEXT, FRAME_BINS),
        prelim: PrelimSpec {
            conv: SHALLOW_PRELIM,
            batchnorm: true,
            relu: true,
        },
        stages: vec![StageSpec {
            name: "block".into(),
            blocks: vec![BlockSpec::new(4, branch, mode)],
        }],
        head: vec![
            HeadLayer::Flatten,
            HeadLayer::TemporalMeanPool,
            HeadLayer::Dropout(0.5),
            HeadLayer::Linear { out: 256, bias: true },
            HeadLayer::Relu,
            HeadLayer::Dropout(0.25),
            HeadLayer::Linear { out: 256, bias: true },
            HeadLayer::Relu,
            HeadLayer::Linear {
                out: CLASS_COUNT,
                bias: true,
            },
        ],
        class_count: CLASS_COUNT,
    }
}

/// The three-stage network: prelim conv, res-8 (3 blocks), res-16, res-32,
/// a spectral-group average, and a bias-free affine output layer.
pub fn deep_spec(mode: ShakeMode) -> ModelSpec {
    let stage = |name: &str, in_ch: usize, width: usize, blocks: usize| {
        let mut list = Vec::with_capacity(blocks);
        let mut ch = in_ch;
        for _ in 0..blocks {
            let branch = BranchSpec::conv_bn_relu_conv_bn(
                ConvSpec::new(width, 2, 16),
                ConvSpec::new(width, 2, 16),
            );
            list.push(BlockSpec::new(ch, branch, mode));
            ch = width;
        }
        StageSpec {
            name: name.into(),
            blocks: list,
        }
    };
    ModelSpec {
        name: "deep".into(),
        frame_dims: (FRAME_CONTEXT, FRAME_BINS),
        prelim: PrelimSpec {
            conv: SHALLOW_PRELIM,
            batchnorm: false,
            relu: true,
        },
        stages: vec![
            stage("res-8", 4, 8, 3),
            stage("res-16", 8, 16, 1),
            stage("res-32", 16, 32, 1),
        ],
        head: vec![
            HeadLayer::FrequencyGroupPool { groups: 8 },
            HeadLayer::TemporalMeanPool,
            HeadLayer::Linear {
                out: CLASS_COUNT,
                bias: false,
            },
        ],
        class_count: CLASS_COUNT,
    }
}

pub fn build_shallow(mode: ShakeMode) -> Model {
    shallow_spec(mode).build(0)
}

pub fn build_deep(mode: ShakeMode) -> Model {
    deep_spec(mode).build(0)
}

/// Contiguous near-equal split of `width` bins into `groups` ranges.
pub fn frequency_groups(width: usize, groups: usize) -> Vec<std::ops::Range<usize>> {
    (0..groups)
        .map(|g| g * width / groups..(g + 1) * width / groups)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterCounts {
    /// `(name, count)` in network order: prelim, stages, then head.
    pub per_stage: Vec<(String, usize)>,
    pub total: usize,
}

impl ParameterCounts {
    pub fn stage(&self, name: &str) -> Option<usize> {
        self.per_stage.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }
}

impl ModelSpec {
    pub fn prelim_param_count(&self) -> usize {
        let c = &self.prelim.conv;
        c.param_count(1) + if self.prelim.batchnorm { 2 * c.out_ch } else { 0 }
    }

    pub fn feature_channels(&self) -> usize {
        self.stages
            .iter()
            .flat_map(|s| &s.blocks)
            .last()
            .map_or(self.prelim.conv.out_ch, BlockSpec::out_ch)
    }

    /// Head layers with their resolved input widths.
    pub(crate) fn head_dims(&self) -> Vec<(HeadLayer, usize)> {
        let (h, w) = self.frame_dims;
        let ch = self.feature_channels();
        let mut width = ch * h * w;
        let mut out = Vec::with_capacity(self.head.len());
        for &layer in &self.head {
            out.push((layer, width));
            match layer {
                HeadLayer::Flatten => width = ch * h * w,
                HeadLayer::FrequencyGroupPool { groups } => width = ch * groups,
                HeadLayer::Linear { out, .. } => width = out,
                _ => {}
            }
        }
        out
    }

    pub fn head_param_count(&self) -> usize {
        self.head_dims()
            .iter()
            .map(|(layer, input)| match layer {
                HeadLayer::Linear { out, bias } => input * out + if *bias { *out } else { 0 },
                _ => 0,
            })
            .sum()
    }

    pub fn count_parameters(&self) -> ParameterCounts {
        let mut per_stage = vec![("prelim-conv".to_string(), self.prelim_param_count())];
        for s in &self.stages {
            per_stage.push((s.name.clone(), s.blocks.iter().map(BlockSpec::param_count).sum()));
        }
        let head_name = if self.head.iter().any(|l| matches!(l, HeadLayer::Dropout(_))) {
            "classifier"
        } else {
            "affine"
        };
        per_stage.push((head_name.to_string(), self.head_param_count()));
        let total = per_stage.iter().map(|(_, c)| c).sum();
        ParameterCounts { per_stage, total }
    }

    /// Text table of layers and parameter counts.
    pub fn summary(&self) -> String {
        let mut rows: Vec<(String, String, String)> = Vec::new();
        let conv_str = |c: &ConvSpec| format!("Conv2d({},{},{})", c.out_ch, c.kh, c.kw);
        let mut prelim = conv_str(&self.prelim.conv);
        if self.prelim.batchnorm {
            prelim.push_str(" + BatchNorm2d");
        }
        if self.prelim.relu {
            prelim.push_str(" + ReLU");
        }
        rows.push(("prelim-conv".into(), prelim, self.prelim_param_count().to_string()));
        for stage in &self.stages {
            let total: usize = stage.blocks.iter().map(BlockSpec::param_count).sum();
            let first = &stage.blocks[0];
            let branch: Vec<String> = first
                .branch
                .layers
                .iter()
                .map(|l| match l {
                    BranchLayer::Conv(c) => conv_str(c),
                    BranchLayer::BatchNorm => "BatchNorm2d".into(),
                    BranchLayer::Relu => "ReLU".into(),
                })
                .collect();
            let structure = format!(
                "[{}] x{} branches, shake={}, x{} blocks",
                branch.join(" + "),
                first.branch_count,
                first.shake_mode,
                stage.blocks.len()
            );
            rows.push((stage.name.clone(), structure, total.to_string()));
            rows.push((
                "  branch".into(),
                format!("in_ch={}", first.in_ch),
                first.branch.param_count(first.in_ch).to_string(),
            ));
        }
        let head: Vec<String> = self
            .head_dims()
            .iter()
            .map(|(l, input)| match l {
                HeadLayer::Flatten => "Flatten".into(),
                HeadLayer::FrequencyGroupPool { groups } => format!("Average({groups} groups)"),
                HeadLayer::TemporalMeanPool => "Mean-Pooling".into(),
                HeadLayer::Dropout(p) => format!("Dropout({p})"),
                HeadLayer::Linear { out, bias } => {
                    format!("Linear({input}x{out}{})", if *bias { "" } else { ", no bias" })
                }
                HeadLayer::Relu => "ReLU".into(),
            })
            .collect();
        rows.push(("head".into(), head.join(" + "), self.head_param_count().to_string()));
        rows.push(("total".into(), "-".into(), self.count_parameters().total.to_string()));

        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let w2 = rows.iter().map(|r| r.2.len()).max().unwrap_or(0);
        let mut out = format!("model {} ({} classes)\n", self.name, self.class_count);
        for (name, structure, count) in rows {
            let _ = writeln!(out, "{name:<w0$}  {count:>w2$}  {structure}");
        }
        out
    }
}
