//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep. Gradients are retained for
//! leaves only; interior gradients are dropped as soon as they have been
//! propagated.

mod conv;
mod norm;
mod ops;

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::Tensor;

pub use conv::{conv_output_padding, ConvParams};
pub use norm::{BatchNormConfig, BatchNormState, RunningStats};

/// Train or eval behaviour for phase-dependent layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SumAll(Var),
    SumN(Vec<Var>),
    Relu(Var),
    Reshape(Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    SegmentMean {
        input: Var,
        segments: Vec<Range<usize>>,
    },
    GroupMean {
        input: Var,
        groups: Vec<Range<usize>>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Shake {
        branches: Vec<Var>,
        backward_coeffs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            param: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is populated by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A trainable leaf tied to a parameter store entry.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradients of every parameter leaf reached by the last backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_ref()?)))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                op,
                format!("{:?}", self.dims(a)),
                format!("{:?}", self.dims(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::SumAll(a), rg)
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn sum_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Param("sum of zero tensors".into()))?;
        let mut out = self.value(first).clone();
        for &p in &parts[1..] {
            self.same_dims("sum_n", first, p)?;
            out.add_assign(self.value(p));
        }
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::SumN(parts.to_vec()), rg))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(dims)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).narrow(axis, start, len)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Narrow { input: a, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat(&values, axis)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Same-padded, stride-1 2-D convolution of `[B, C, H, W]` input.
    ///
    /// For even kernel extents the extra padding row/column goes on the
    /// high-index side.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = conv::forward(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Per-channel batch normalization of `[B, C, H, W]` input.
    ///
    /// Train phase normalizes with the batch statistics and folds them into
    /// `stats`; eval phase normalizes with `stats`.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        config: BatchNormConfig,
        phase: Phase,
    ) -> Result<Var> {
        let x = self.value(input);
        let (out, normalized, inv_std) = norm::forward(
            x,
            self.value(gamma),
            self.value(beta),
            stats,
            config,
            phase,
        )?;
        let rg = self.any_grad(&[input, gamma, beta]);
        let op = match phase {
            Phase::Train => Op::BatchNormTrain {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            Phase::Eval => Op::BatchNormEval {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        };
        Ok(self.push(out, op, rg))
    }

    /// `input[B, D] · weight[D, K] + bias[K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::linear_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; eval is identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        p: f64,
        phase: Phase,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout probability {p} not in [0, 1)")));
        }
        if phase == Phase::Eval || p == 0.0 {
            // Recorded as a unit mask so the graph shape is phase-independent.
            let n = self.value(input).numel();
            let out = self.value(input).clone();
            let rg = self.any_grad(&[input]);
            return Ok(self.push(
                out,
                Op::Dropout {
                    input,
                    mask: vec![1.0; n],
                },
                rg,
            ));
        }
        let keep = 1.0 / (1.0 - p);
        let x = self.value(input);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut out = x.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::Dropout { input, mask }, rg))
    }

    /// Mean over each row range of a `[R, ...]` tensor, giving `[S, ...]`.
    pub fn segment_mean(&mut self, input: Var, segments: &[Range<usize>]) -> Result<Var> {
        let out = ops::segment_mean_forward(self.value(input), segments)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            out,
            Op::SegmentMean {
                input,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// Temporal mean of a `[T, D]` sequence, giving `[D]`.
    pub fn mean_pool_time(&mut self, input: Var) -> Result<Var> {
        let dims = self.dims(input).to_vec();
        if dims.len() != 2 {
            return Err(Error::shape("mean_pool_time", "[T, D]", format!("{dims:?}")));
        }
        let pooled = self.segment_mean(input, &[0..dims[0]])?;
        self.reshape(pooled, &dims[1..])
    }

    /// Averages `[R, C, H, W]` over H and over each W range, giving
    /// `[R, C * groups]` laid out channel-major.
    pub fn group_mean(&mut self, input: Var, groups: &[Range<usize>]) -> Result<Var> {
        let out = ops::group_mean_forward(self.value(input), groups)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            out,
            Op::GroupMean {
                input,
                groups: groups.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy_forward(self.value(logits), labels)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row-wise convex combination of branch tensors with distinct forward
    /// and backward weights.
    ///
    /// Each coefficient slice holds `rows * N` values where `rows` is the
    /// leading dim of the branches: the forward value is
    /// `sum_n fwd[r, n] * B_n[r]` and branch `n` receives `bwd[r, n] * g[r]`.
    pub fn shake(&mut self, branches: &[Var], forward: &[f64], backward: &[f64]) -> Result<Var> {
        let out = ops::shake_forward(
            &branches.iter().map(|b| self.value(*b)).collect::<Vec<_>>(),
            forward,
        )?;
        if backward.len() != forward.len() {
            return Err(Error::shape("shake", forward.len(), backward.len()));
        }
        let rg = self.any_grad(branches);
        Ok(self.push(
            out,
            Op::Shake {
                branches: branches.to_vec(),
                backward_coeffs: backward.to_vec(),
            },
            rg,
        ))
    }

    fn accumulate(&mut self, v: Var, grad: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&grad),
            None => node.grad = Some(grad),
        }
    }

    /// Populates leaf gradients of the scalar `root`.
    ///
    /// Gradients from an earlier call are cleared first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got dims {:?}",
                self.dims(root)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::ones(self.dims(root)));

        for i in (0..=root.0).rev() {
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(&op, &g);
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn propagate(&mut self, op: &Op, g: &Tensor) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let ga = ops::hadamard(g, self.value(*b));
                let gb = ops::hadamard(g, self.value(*a));
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Scale(a, f) => {
                let ga = g.map(|v| v * f);
                self.accumulate(*a, ga);
            }
            Op::SumAll(a) => {
                let ga = Tensor::full(self.dims(*a), g.item());
                self.accumulate(*a, ga);
            }
            Op::SumN(parts) => {
                for &p in parts {
                    self.accumulate(p, g.clone());
                }
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                for (gv, &x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshape(self.dims(*a)).expect("reshape grad");
                self.accumulate(*a, ga);
            }
            Op::Narrow { input, axis, start } => {
                let ga = ops::narrow_backward(g, self.dims(*input), *axis, *start);
                self.accumulate(*input, ga);
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.dims(p)[*axis];
                    if self.requires_grad(p) {
                        let gp = g.narrow(*axis, offset, len).expect("concat grad");
                        self.accumulate(p, gp);
                    }
                    offset += len;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
            } => {
                let (gi, gw, gb) = conv::backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    self.requires_grad(*input),
                    self.requires_grad(*weight) || self.requires_grad(*bias),
                );
                if let Some(gi) = gi {
                    self.accumulate(*input, gi);
                }
                if let Some((gw, gb)) = gw.zip(gb) {
                    self.accumulate(*weight, gw);
                    self.accumulate(*bias, gb);
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (gi, gg, gbeta) =
                    norm::backward_train(g, normalized, inv_std, self.value(*gamma));
                self.accumulate(*input, gi);
                self.accumulate(*gamma, gg);
                self.accumulate(*beta, gbeta);
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (gi, gg, gbeta) =
                    norm::backward_eval(g, normalized, inv_std, self.value(*gamma));
                self.accumulate(*input, gi);
                self.accumulate(*gamma, gg);
                self.accumulate(*beta, gbeta);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (gi, gw, gb) = ops::linear_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    self.requires_grad(*input),
                );
                if let Some(gi) = gi {
                    self.accumulate(*input, gi);
                }
                self.accumulate(*weight, gw);
                if let Some(b) = bias {
                    self.accumulate(*b, gb);
                }
            }
            Op::Dropout { input, mask } => {
                let mut ga = g.clone();
                for (gv, m) in ga.data_mut().iter_mut().zip(mask) {
                    *gv *= m;
                }
                self.accumulate(*input, ga);
            }
            Op::SegmentMean { input, segments } => {
                let ga = ops::segment_mean_backward(g, self.dims(*input), segments);
                self.accumulate(*input, ga);
            }
            Op::GroupMean { input, groups } => {
                let ga = ops::group_mean_backward(g, self.dims(*input), groups);
                self.accumulate(*input, ga);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let ga = ops::cross_entropy_backward(probs, labels, g.item());
                self.accumulate(*logits, ga);
            }
            Op::Shake {
                branches,
                backward_coeffs,
            } => {
                let n = branches.len();
                for (k, &b) in branches.iter().enumerate() {
                    if self.requires_grad(b) {
                        let gb = ops::scale_rows(g, backward_coeffs, n, k);
                        self.accumulate(b, gb);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, -2.0, 0.5]));
        let a = g.scale(x, 3.0);
        let b = g.relu(x);
        let c = g.add(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 3.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[1], &[2.0]));
        let k = g.constant(t(&[1], &[5.0]));
        let y = g.mul(x, k).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 5.0);
        assert!(g.grad(k).is_none());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let uniform = g.variable(Tensor::zeros(&[1, 4]));
        let l = g.cross_entropy(uniform, &[2]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let dominant = g.variable(t(&[1, 3], &[50.0, 0.0, 0.0]));
        let l = g.cross_entropy(dominant, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-20);

        let bad = g.variable(Tensor::zeros(&[1, 4]));
        assert!(matches!(g.cross_entropy(bad, &[4]), Err(Error::Index { label: 4, classes: 4 })));
    }

    #[test]
    fn cross_entropy_matches_loop_oracle() {
        let logits: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.9).collect();
        let labels = [3, 0, 2];
        let mut expected = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &logits[r * 4..(r + 1) * 4];
            let mut z = 0.0;
            for v in row {
                z += v.exp();
            }
            expected -= (row[y].exp() / z).ln();
        }
        expected /= 3.0;
        let mut g = Graph::new();
        let x = g.variable(t(&[3, 4], &logits));
        let l = g.cross_entropy(x, &labels).unwrap();
        assert!((g.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn segment_mean_and_pooling() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2, 1], &[1.0, 3.0]));
        let m = g.mean_pool_time(x).unwrap();
        assert_eq!(g.value(m).data(), &[2.0]);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn dropout_expectation_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[100_000]));
        let mut rng = stream(5, Purpose::Dropout, 0);
        let y = g.dropout(x, 0.5, Phase::Train, &mut rng).unwrap();
        let mean = g.value(y).sum() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        let e = g.dropout(x, 0.5, Phase::Eval, &mut rng).unwrap();
        assert_eq!(g.value(e), g.value(x));
        assert!(g.dropout(x, 1.0, Phase::Train, &mut rng).is_err());
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::zeros(&[2]));
        let b = g.variable(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { op: "add", .. })));
    }
}
