//! Reverse-mode automatic differentiation over whole-tensor operations.
//!
//! A [`Tape`] records one computation as a flat list of nodes. Building an
//! op evaluates it immediately (values are eager); [`Tape::backward`]
//! walks the list in reverse from a scalar root, accumulating gradients
//! into per-node slots and scattering parameter gradients into a
//! [`Grads`] table indexed by [`ParamId`].
//!
//! Nodes reference their inputs by [`NodeId`] and learnable tensors by
//! `ParamId` into the [`ParamStore`] the tape was opened over; parameter
//! values are read through the store, never copied into the graph.
//! Whatever auxiliary state the backward pass needs (batch-norm moments,
//! max-pool winners, dropout masks) is captured inside the op at build
//! time, so a finished tape replays its backward pass deterministically.
//!
//! Training-mode batch norm also queues `(slot, batch statistic)` pairs;
//! the trainer folds them into the running estimates after the step, in
//! recording order, keeping the store immutable while graphs are alive.
//!
//! [`grad_check`] and [`grad_check_params`] verify analytic gradients
//! against central finite differences and report the worst relative error.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::conv;
use crate::error::{CoreError, Result};
use crate::math::{clamp, ln, maxr, sigmoid};
use crate::norm::{self, BnSaved};
use crate::params::{ParamId, ParamStore};
use crate::spectral::{self, PoolMode};
use crate::tensor::{Real, Shape, Tensor};

/// Clamp bounds applied to predictions inside the cross-entropy loss.
pub const BCE_CLAMP: Real = 1e-7;
/// Smoothing constant in the dice loss numerator and denominator.
pub const DICE_EPS: Real = 1.0;

/// Handle to one node of a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// The four batch-norm parameter slots of one normalisation layer.
#[derive(Clone, Copy, Debug)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
}

/// Loss reduction over elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Leaf,
    Param {
        id: ParamId,
    },
    Conv2d {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        f: usize,
        r: usize,
        stride: usize,
        pad: usize,
    },
    Depthwise {
        x: NodeId,
        w: ParamId,
        f: usize,
        stride: usize,
        pad: usize,
    },
    Tconv {
        x: NodeId,
        w: ParamId,
        b: ParamId,
        f: usize,
        out_d: usize,
        stride: usize,
    },
    BnTrain {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        saved: BnSaved,
    },
    BnInfer {
        x: NodeId,
        bn: BnIds,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        winners: Vec<u32>,
    },
    GlobalMax {
        x: NodeId,
        winners: Vec<u32>,
    },
    SpectralPool {
        x: NodeId,
    },
    SpectralLowpass {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: Real,
    },
    MulChannel {
        x: NodeId,
        gate: NodeId,
    },
    MulPixel {
        x: NodeId,
        gate: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Upsample2x {
        x: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Vec<Real>,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<Real>,
    },
    Bce {
        p: NodeId,
        target: Tensor,
        reduction: Reduction,
    },
    Dice {
        p: NodeId,
        target: Tensor,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Pending running-statistic update recorded by a training-mode batch norm.
pub struct BnUpdate {
    pub mean_slot: ParamId,
    pub mean: Vec<Real>,
    pub var_slot: ParamId,
    pub var: Vec<Real>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    node: Vec<Option<Vec<Real>>>,
    param: Vec<Option<Vec<Real>>>,
}

impl Grads {
    /// Gradient with respect to a node marked with `leaf_with_grad`
    /// (or any intermediate node on a differentiable path).
    pub fn node(&self, id: NodeId) -> Option<&[Real]> {
        self.node[id.index()].as_deref()
    }

    /// Gradient with respect to a trainable parameter; `None` means the
    /// parameter was not reached by the backward sweep (i.e. zero).
    pub fn param(&self, id: ParamId) -> Option<&[Real]> {
        self.param[id.index()].as_deref()
    }

    /// All parameters that received gradients, in id order.
    pub fn param_entries(&self) -> impl Iterator<Item = (ParamId, &[Real])> + '_ {
        self.param
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|s| (ParamId(i as u32), s)))
    }
}

/// One recorded computation over a parameter store.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    bn_updates: Vec<BnUpdate>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.index()].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shapes of every recorded node, in recording order.
    pub fn node_shapes(&self) -> impl Iterator<Item = &crate::tensor::Shape> + '_ {
        self.nodes.iter().map(|n| n.value.shape())
    }

    /// Take the batch-norm running-statistic updates recorded so far.
    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        core::mem::take(&mut self.bn_updates)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.index()].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Differentiable input; its gradient is retrievable from [`Grads`].
    pub fn leaf_with_grad(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// A parameter tensor viewed as a graph node; its gradient scatters
    /// into the parameter table like any op-referenced weight.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = self.store.get(id).clone();
        self.push(Op::Param { id }, value, true)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let wt = self.store.get(w);
        let dims = wt.shape().dims();
        if dims.len() != 4 || dims[0] != dims[1] {
            return Err(CoreError::shape(format!(
                "conv2d weights must be (f,f,d,r), got {}",
                wt.shape()
            )));
        }
        let (f, r) = (dims[0], dims[3]);
        let bias = b.map(|id| self.store.get(id).data());
        let value = conv::conv2d_fwd(self.value(x), wt.data(), bias, f, r, stride, pad)?;
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                f,
                r,
                stride,
                pad,
            },
            value,
            true,
        ))
    }

    pub fn depthwise(&mut self, x: NodeId, w: ParamId, stride: usize, pad: usize) -> Result<NodeId> {
        let wt = self.store.get(w);
        let dims = wt.shape().dims();
        if dims.len() != 3 || dims[0] != dims[1] {
            return Err(CoreError::shape(format!(
                "depthwise weights must be (f,f,d), got {}",
                wt.shape()
            )));
        }
        let f = dims[0];
        let value = conv::depthwise_fwd(self.value(x), wt.data(), f, stride, pad)?;
        Ok(self.push(Op::Depthwise { x, w, f, stride, pad }, value, true))
    }

    pub fn tconv(&mut self, x: NodeId, w: ParamId, b: ParamId, stride: usize) -> Result<NodeId> {
        let wt = self.store.get(w);
        let dims = wt.shape().dims();
        if dims.len() != 4 || dims[0] != dims[1] {
            return Err(CoreError::shape(format!(
                "transposed conv weights must be (f,f,out_d,in_d), got {}",
                wt.shape()
            )));
        }
        let (f, out_d) = (dims[0], dims[2]);
        let bias = self.store.get(b).data();
        let value = conv::tconv_fwd(self.value(x), wt.data(), bias, f, out_d, stride)?;
        Ok(self.push(
            Op::Tconv {
                x,
                w,
                b,
                f,
                out_d,
                stride,
            },
            value,
            true,
        ))
    }

    /// Batch normalisation; `train` selects batch statistics (and records
    /// a pending running-statistic update) versus running statistics.
    pub fn batch_norm(&mut self, x: NodeId, bn: BnIds, train: bool) -> Result<NodeId> {
        let gamma = self.store.get(bn.gamma).data();
        let beta = self.store.get(bn.beta).data();
        if train {
            let (value, saved) = norm::batch_norm_train_fwd(self.value(x), gamma, beta)?;
            self.bn_updates.push(BnUpdate {
                mean_slot: bn.run_mean,
                mean: saved.mean.clone(),
                var_slot: bn.run_var,
                var: saved.var.clone(),
            });
            Ok(self.push(
                Op::BnTrain {
                    x,
                    gamma: bn.gamma,
                    beta: bn.beta,
                    saved,
                },
                value,
                true,
            ))
        } else {
            let mean = self.store.get(bn.run_mean).data();
            let var = self.store.get(bn.run_var).data();
            let value = norm::batch_norm_infer_fwd(self.value(x), gamma, beta, mean, var)?;
            Ok(self.push(Op::BnInfer { x, bn }, value, true))
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::from_fn(self.value(x).shape().clone(), |i| {
            maxr(self.nodes[x.index()].value.data()[i], 0.0)
        });
        let needs = self.needs(x);
        self.push(Op::Relu { x }, value, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::from_fn(self.value(x).shape().clone(), |i| {
            sigmoid(self.nodes[x.index()].value.data()[i])
        });
        let needs = self.needs(x);
        self.push(Op::Sigmoid { x }, value, needs)
    }

    pub fn max_pool(&mut self, x: NodeId, window: usize, stride: usize, mode: PoolMode) -> Result<NodeId> {
        let out = spectral::max_pool_fwd(self.value(x), window, stride, mode)?;
        let needs = self.needs(x);
        Ok(self.push(
            Op::MaxPool {
                x,
                winners: out.winners,
            },
            out.output,
            needs,
        ))
    }

    pub fn global_max(&mut self, x: NodeId) -> Result<NodeId> {
        let out = spectral::global_max_fwd(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(
            Op::GlobalMax {
                x,
                winners: out.winners,
            },
            out.output,
            needs,
        ))
    }

    pub fn spectral_pool(&mut self, x: NodeId, out_w: usize, out_h: usize) -> Result<NodeId> {
        let value = spectral::spectral_pool_fwd(self.value(x), out_w, out_h)?;
        let needs = self.needs(x);
        Ok(self.push(Op::SpectralPool { x }, value, needs))
    }

    pub fn spectral_lowpass(&mut self, x: NodeId) -> Result<NodeId> {
        let value = spectral::spectral_lowpass_fwd(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(Op::SpectralLowpass { x }, value, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let value = Tensor::from_fn(self.value(a).shape().clone(), |i| {
            self.nodes[a.index()].value.data()[i] + self.nodes[b.index()].value.data()[i]
        });
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, value, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let value = Tensor::from_fn(self.value(a).shape().clone(), |i| {
            self.nodes[a.index()].value.data()[i] * self.nodes[b.index()].value.data()[i]
        });
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, value, needs))
    }

    pub fn scale(&mut self, x: NodeId, c: Real) -> NodeId {
        let value = Tensor::from_fn(self.value(x).shape().clone(), |i| {
            c * self.nodes[x.index()].value.data()[i]
        });
        let needs = self.needs(x);
        self.push(Op::Scale { x, c }, value, needs)
    }

    /// Multiply a `(w,h,d)` map by a `(1,1,d)` per-channel gate.
    pub fn mul_channel(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let (_, _, d) = self.value(x).shape().whd()?;
        let gdims = self.value(gate).shape().dims().to_vec();
        if gdims != [1, 1, d] {
            return Err(CoreError::shape(format!(
                "channel gate must be (1,1,{d}), got {}",
                self.value(gate).shape()
            )));
        }
        let (w, h, _) = self.value(x).shape().whd()?;
        let mut value = Tensor::zeros(Shape::d3(w, h, d));
        {
            let xv = self.value(x).data();
            let gv = self.value(gate).data();
            let ov = value.data_mut();
            for px in 0..w * h {
                for c in 0..d {
                    ov[px * d + c] = xv[px * d + c] * gv[c];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gate);
        Ok(self.push(Op::MulChannel { x, gate }, value, needs))
    }

    /// Multiply a `(w,h,d)` map by a `(w,h,1)` per-pixel gate.
    pub fn mul_pixel(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let (w, h, d) = self.value(x).shape().whd()?;
        let gdims = self.value(gate).shape().dims().to_vec();
        if gdims != [w, h, 1] {
            return Err(CoreError::shape(format!(
                "pixel gate must be ({w},{h},1), got {}",
                self.value(gate).shape()
            )));
        }
        let mut value = Tensor::zeros(Shape::d3(w, h, d));
        {
            let xv = self.value(x).data();
            let gv = self.value(gate).data();
            let ov = value.data_mut();
            for px in 0..w * h {
                let g = gv[px];
                for c in 0..d {
                    ov[px * d + c] = xv[px * d + c] * g;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gate);
        Ok(self.push(Op::MulPixel { x, gate }, value, needs))
    }

    /// Concatenate along the depth axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::shape("concat of zero tensors"));
        }
        let (w, h, _) = self.value(parts[0]).shape().whd()?;
        let mut total_d = 0;
        for p in parts {
            let (pw, ph, pd) = self.value(*p).shape().whd()?;
            if (pw, ph) != (w, h) {
                return Err(CoreError::shape(format!(
                    "concat spatial mismatch: ({w},{h}) vs ({pw},{ph})"
                )));
            }
            total_d += pd;
        }
        let mut value = Tensor::zeros(Shape::d3(w, h, total_d));
        {
            let ov = value.data_mut();
            let mut off = 0;
            for p in parts {
                let t = &self.nodes[p.index()].value;
                let (_, _, pd) = t.shape().whd()?;
                let tv = t.data();
                for px in 0..w * h {
                    ov[px * total_d + off..px * total_d + off + pd]
                        .copy_from_slice(&tv[px * pd..(px + 1) * pd]);
                }
                off += pd;
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            value,
            needs,
        ))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (w, h, d) = self.value(x).shape().whd()?;
        let mut value = Tensor::zeros(Shape::d3(2 * w, 2 * h, d));
        {
            let xv = self.value(x).data();
            let ov = value.data_mut();
            for ox in 0..2 * w {
                for oy in 0..2 * h {
                    let src = ((ox / 2) * h + oy / 2) * d;
                    let dst = (ox * 2 * h + oy) * d;
                    ov[dst..dst + d].copy_from_slice(&xv[src..src + d]);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::Upsample2x { x }, value, needs))
    }

    /// Inverted dropout: each element survives with probability `1-rate`
    /// and is scaled by `1/(1-rate)`, so the expectation matches the
    /// deterministic forward. `rate == 0` is the identity.
    pub fn dropout(&mut self, x: NodeId, rate: Real, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(CoreError::config(format!(
                "dropout rate {rate} must lie in [0,1)"
            )));
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let n = self.value(x).numel();
        let mask: Vec<Real> = (0..n)
            .map(|_| if rng.random::<Real>() < keep { scale } else { 0.0 })
            .collect();
        let value = Tensor::from_fn(self.value(x).shape().clone(), |i| {
            self.nodes[x.index()].value.data()[i] * mask[i]
        });
        let needs = self.needs(x);
        Ok(self.push(Op::Dropout { x, mask }, value, needs))
    }

    /// Scalar `sum_i w_i * x_i` against fixed weights.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<Real>) -> Result<NodeId> {
        if weights.len() != self.value(x).numel() {
            return Err(CoreError::shape(format!(
                "weighted_sum weights length {} does not match {} elements",
                weights.len(),
                self.value(x).numel()
            )));
        }
        let s: Real = self
            .value(x)
            .data()
            .iter()
            .zip(weights.iter())
            .map(|(a, b)| a * b)
            .sum();
        let needs = self.needs(x);
        Ok(self.push(Op::WeightedSum { x, weights }, Tensor::scalar(s), needs))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        self.weighted_sum(x, vec![1.0; n])
    }

    /// Binary cross-entropy of predictions against a constant target mask,
    /// with predictions clamped away from 0 and 1.
    pub fn bce(&mut self, p: NodeId, target: &Tensor, reduction: Reduction) -> Result<NodeId> {
        self.check_loss_operands(p, target, "bce")?;
        let pv = self.value(p).data();
        let tv = target.data();
        let mut total = 0.0;
        for (pi, yi) in pv.iter().zip(tv.iter()) {
            let pc = clamp(*pi, BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= yi * ln(pc) + (1.0 - yi) * ln(1.0 - pc);
        }
        if reduction == Reduction::Mean {
            total /= pv.len() as Real;
        }
        let needs = self.needs(p);
        Ok(self.push(
            Op::Bce {
                p,
                target: target.clone(),
                reduction,
            },
            Tensor::scalar(total),
            needs,
        ))
    }

    /// Smoothed dice loss `1 - (2 sum(p*y) + eps) / (sum y^2 + sum p^2 + eps)`.
    pub fn dice_loss(&mut self, p: NodeId, target: &Tensor) -> Result<NodeId> {
        self.check_loss_operands(p, target, "dice_loss")?;
        let pv = self.value(p).data();
        let tv = target.data();
        let mut inter = 0.0;
        let mut psq = 0.0;
        let mut ysq = 0.0;
        for (pi, yi) in pv.iter().zip(tv.iter()) {
            inter += pi * yi;
            psq += pi * pi;
            ysq += yi * yi;
        }
        let value = 1.0 - (2.0 * inter + DICE_EPS) / (ysq + psq + DICE_EPS);
        let needs = self.needs(p);
        Ok(self.push(
            Op::Dice {
                p,
                target: target.clone(),
            },
            Tensor::scalar(value),
            needs,
        ))
    }

    fn check_loss_operands(&self, p: NodeId, target: &Tensor, what: &str) -> Result<()> {
        if self.value(p).shape() != target.shape() {
            return Err(CoreError::shape(format!(
                "{what}: prediction shape {} does not match target shape {}",
                self.value(p).shape(),
                target.shape()
            )));
        }
        for v in target.data() {
            if *v != 0.0 && *v != 1.0 {
                return Err(CoreError::contract(format!(
                    "{what}: target value {v} is not binary"
                )));
            }
        }
        Ok(())
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(CoreError::shape(format!(
                "{what}: operand shapes {} and {} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar root. Fills node gradients for every
    /// differentiable node and parameter gradients for every trainable
    /// parameter reachable from the root; unreachable parameters stay
    /// `None` (zero).
    pub fn backward(&self, root: NodeId) -> Result<Grads> {
        if self.value(root).numel() != 1 {
            return Err(CoreError::contract(format!(
                "backward root must be scalar, got shape {}",
                self.value(root).shape()
            )));
        }
        let mut node_grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        let mut param_grads: Vec<Option<Vec<Real>>> = vec![None; self.store.len()];
        node_grads[root.index()] = Some(vec![1.0]);

        for i in (0..=root.index()).rev() {
            let g = match node_grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                // Value-only subgraph; nothing below it wants gradients.
                node_grads[i] = Some(g);
                continue;
            }
            self.backward_step(i, &g, &mut node_grads, &mut param_grads)?;
            node_grads[i] = Some(g);
        }
        Ok(Grads {
            node: node_grads,
            param: param_grads,
        })
    }

    fn backward_step(
        &self,
        i: usize,
        g: &[Real],
        node_grads: &mut [Option<Vec<Real>>],
        param_grads: &mut [Option<Vec<Real>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let gt = Tensor::new_unchecked(node.value.shape().clone(), g.to_vec());
        match &node.op {
            Op::Leaf => {}
            Op::Param { id } => self.accum_param(param_grads, *id, g.to_vec()),
            Op::Conv2d {
                x,
                w,
                b,
                f,
                r,
                stride,
                pad,
            } => {
                let xt = self.value(*x);
                let wt = self.store.get(*w);
                let (gx, gw, gb) = conv::conv2d_bwd(
                    xt,
                    wt.data(),
                    &gt,
                    *f,
                    *r,
                    *stride,
                    *pad,
                    self.needs(*x),
                )?;
                if let Some(gx) = gx {
                    accum_node(node_grads, *x, gx.into_data());
                }
                self.accum_param(param_grads, *w, gw);
                if let Some(b) = b {
                    self.accum_param(param_grads, *b, gb);
                }
            }
            Op::Depthwise { x, w, f, stride, pad } => {
                let xt = self.value(*x);
                let wt = self.store.get(*w);
                let (gx, gw) =
                    conv::depthwise_bwd(xt, wt.data(), &gt, *f, *stride, *pad, self.needs(*x))?;
                if let Some(gx) = gx {
                    accum_node(node_grads, *x, gx.into_data());
                }
                self.accum_param(param_grads, *w, gw);
            }
            Op::Tconv {
                x,
                w,
                b,
                f,
                out_d,
                stride,
            } => {
                let xt = self.value(*x);
                let wt = self.store.get(*w);
                let (gx, gw, gb) =
                    conv::tconv_bwd(xt, wt.data(), &gt, *f, *out_d, *stride, self.needs(*x))?;
                if let Some(gx) = gx {
                    accum_node(node_grads, *x, gx.into_data());
                }
                self.accum_param(param_grads, *w, gw);
                self.accum_param(param_grads, *b, gb);
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                saved,
            } => {
                let xt = self.value(*x);
                let gm = self.store.get(*gamma);
                let (gx, gg, gb) =
                    norm::batch_norm_train_bwd(xt, gm.data(), saved, &gt, self.needs(*x))?;
                if let Some(gx) = gx {
                    accum_node(node_grads, *x, gx.into_data());
                }
                self.accum_param(param_grads, *gamma, gg);
                self.accum_param(param_grads, *beta, gb);
            }
            Op::BnInfer { x, bn } => {
                let xt = self.value(*x);
                let (gx, gg, gb) = norm::batch_norm_infer_bwd(
                    xt,
                    self.store.get(bn.gamma).data(),
                    self.store.get(bn.run_mean).data(),
                    self.store.get(bn.run_var).data(),
                    &gt,
                    self.needs(*x),
                )?;
                if let Some(gx) = gx {
                    accum_node(node_grads, *x, gx.into_data());
                }
                self.accum_param(param_grads, bn.gamma, gg);
                self.accum_param(param_grads, bn.beta, gb);
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    let gx: Vec<Real> = g
                        .iter()
                        .zip(xv.iter())
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accum_node(node_grads, *x, gx);
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let yv = node.value.data();
                    let gx: Vec<Real> = g
                        .iter()
                        .zip(yv.iter())
                        .map(|(gi, yi)| gi * yi * (1.0 - yi))
                        .collect();
                    accum_node(node_grads, *x, gx);
                }
            }
            Op::MaxPool { x, winners } | Op::GlobalMax { x, winners } => {
                if self.needs(*x) {
                    let gx = spectral::max_pool_bwd(winners, g, self.value(*x).shape());
                    accum_node(node_grads, *x, gx.into_data());
                }
            }
            Op::SpectralPool { x } => {
                if self.needs(*x) {
                    let (w, h, _) = self.value(*x).shape().whd()?;
                    let gx = spectral::spectral_pool_bwd(&gt, w, h)?;
                    accum_node(node_grads, *x, gx.into_data());
                }
            }
            Op::SpectralLowpass { x } => {
                if self.needs(*x) {
                    let gx = spectral::spectral_lowpass_bwd(&gt)?;
                    accum_node(node_grads, *x, gx.into_data());
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accum_node(node_grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    accum_node(node_grads, *b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let ga: Vec<Real> = g.iter().zip(bv.iter()).map(|(gi, bi)| gi * bi).collect();
                    accum_node(node_grads, *a, ga);
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let gb: Vec<Real> = g.iter().zip(av.iter()).map(|(gi, ai)| gi * ai).collect();
                    accum_node(node_grads, *b, gb);
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let gx: Vec<Real> = g.iter().map(|gi| gi * c).collect();
                    accum_node(node_grads, *x, gx);
                }
            }
            Op::MulChannel { x, gate } => {
                let (w, h, d) = node.value.shape().whd()?;
                if self.needs(*x) {
                    let gv = self.value(*gate).data();
                    let mut gx = vec![0.0; w * h * d];
                    for px in 0..w * h {
                        for c in 0..d {
                            gx[px * d + c] = g[px * d + c] * gv[c];
                        }
                    }
                    accum_node(node_grads, *x, gx);
                }
                if self.needs(*gate) {
                    let xv = self.value(*x).data();
                    let mut gg = vec![0.0; d];
                    for px in 0..w * h {
                        for c in 0..d {
                            gg[c] += g[px * d + c] * xv[px * d + c];
                        }
                    }
                    accum_node(node_grads, *gate, gg);
                }
            }
            Op::MulPixel { x, gate } => {
                let (w, h, d) = node.value.shape().whd()?;
                if self.needs(*x) {
                    let gv = self.value(*gate).data();
                    let mut gx = vec![0.0; w * h * d];
                    for px in 0..w * h {
                        let gp = gv[px];
                        for c in 0..d {
                            gx[px * d + c] = g[px * d + c] * gp;
                        }
                    }
                    accum_node(node_grads, *x, gx);
                }
                if self.needs(*gate) {
                    let xv = self.value(*x).data();
                    let mut gg = vec![0.0; w * h];
                    for px in 0..w * h {
                        for c in 0..d {
                            gg[px] += g[px * d + c] * xv[px * d + c];
                        }
                    }
                    accum_node(node_grads, *gate, gg);
                }
            }
            Op::Concat { parts } => {
                let (w, h, total_d) = node.value.shape().whd()?;
                let mut off = 0;
                for p in parts {
                    let (_, _, pd) = self.value(*p).shape().whd()?;
                    if self.needs(*p) {
                        let mut gp = vec![0.0; w * h * pd];
                        for px in 0..w * h {
                            gp[px * pd..(px + 1) * pd].copy_from_slice(
                                &g[px * total_d + off..px * total_d + off + pd],
                            );
                        }
                        accum_node(node_grads, *p, gp);
                    }
                    off += pd;
                }
            }
            Op::Upsample2x { x } => {
                if self.needs(*x) {
                    let (w, h, d) = self.value(*x).shape().whd()?;
                    let mut gx = vec![0.0; w * h * d];
                    for ox in 0..2 * w {
                        for oy in 0..2 * h {
                            let src = (ox * 2 * h + oy) * d;
                            let dst = ((ox / 2) * h + oy / 2) * d;
                            for c in 0..d {
                                gx[dst + c] += g[src + c];
                            }
                        }
                    }
                    accum_node(node_grads, *x, gx);
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let gx: Vec<Real> = g.iter().zip(mask.iter()).map(|(gi, m)| gi * m).collect();
                    accum_node(node_grads, *x, gx);
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.needs(*x) {
                    let g0 = g[0];
                    let gx: Vec<Real> = weights.iter().map(|w| g0 * w).collect();
                    accum_node(node_grads, *x, gx);
                }
            }
            Op::Bce {
                p,
                target,
                reduction,
            } => {
                if self.needs(*p) {
                    let pv = self.value(*p).data();
                    let tv = target.data();
                    let scale = match reduction {
                        Reduction::Mean => g[0] / pv.len() as Real,
                        Reduction::Sum => g[0],
                    };
                    let gx: Vec<Real> = pv
                        .iter()
                        .zip(tv.iter())
                        .map(|(pi, yi)| {
                            if *pi <= BCE_CLAMP || *pi >= 1.0 - BCE_CLAMP {
                                0.0 // clamped region: locally constant
                            } else {
                                scale * (-yi / pi + (1.0 - yi) / (1.0 - pi))
                            }
                        })
                        .collect();
                    accum_node(node_grads, *p, gx);
                }
            }
            Op::Dice { p, target } => {
                if self.needs(*p) {
                    let pv = self.value(*p).data();
                    let tv = target.data();
                    let mut inter = 0.0;
                    let mut psq = 0.0;
                    let mut ysq = 0.0;
                    for (pi, yi) in pv.iter().zip(tv.iter()) {
                        inter += pi * yi;
                        psq += pi * pi;
                        ysq += yi * yi;
                    }
                    let num = 2.0 * inter + DICE_EPS;
                    let den = ysq + psq + DICE_EPS;
                    let g0 = g[0];
                    // d/dp_i [num/den] = (2 y_i den - num 2 p_i) / den^2.
                    let gx: Vec<Real> = tv
                        .iter()
                        .zip(pv.iter())
                        .map(|(yi, pi)| -g0 * 2.0 * (yi * den - num * pi) / (den * den))
                        .collect();
                    accum_node(node_grads, *p, gx);
                }
            }
        }
        Ok(())
    }

    fn accum_param(&self, param_grads: &mut [Option<Vec<Real>>], id: ParamId, g: Vec<Real>) {
        if !self.store.entry(id).trainable {
            return;
        }
        match &mut param_grads[id.index()] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g.iter()) {
                    *a += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn accum_node(node_grads: &mut [Option<Vec<Real>>], id: NodeId, g: Vec<Real>) {
    match &mut node_grads[id.index()] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g.iter()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Relative error between analytic and numeric derivatives:
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(a: Real, n: Real) -> Real {
    let denom = maxr(maxr(crate::math::abs(a), crate::math::abs(n)), 1e-8);
    crate::math::abs(a - n) / denom
}

/// Derivatives whose analytic and numeric values both fall below this
/// magnitude are treated as matching zeros. A central difference resolves
/// a derivative only down to the roundoff of the function value divided
/// by the step, about `1e-16 * |f| / eps ~ 1e-11`; a mathematically zero
/// gradient (for instance a convolution bias feeding straight into batch
/// normalisation, which cancels every per-channel shift) therefore shows
/// up as pure noise of that order and must not be scored as disagreement.
pub const GRAD_NOISE_FLOOR: Real = 1e-7;

fn both_below_noise(a: Real, n: Real) -> bool {
    crate::math::abs(a) < GRAD_NOISE_FLOOR && crate::math::abs(n) < GRAD_NOISE_FLOOR
}

/// When a coordinate's relative error exceeds this, the check retries at
/// a smaller step before scoring it. Deep compositions mix coordinates
/// whose curvature and kink-density scales differ by orders of
/// magnitude, so no single step sits inside every coordinate's smooth
/// quadratic window; a refined step converges to the analytic value
/// exactly when that value is correct, while a genuine disagreement does
/// not shrink with the step.
const REFINE_TRIGGER: Real = 1e-6;
/// Each refinement divides the step by this factor.
const REFINE_FACTOR: Real = 10.0;
/// Number of refinement retries per coordinate.
const REFINE_STEPS: usize = 3;

/// Verify the gradient of a scalar-valued graph with respect to its input
/// tensor by central finite differences. `build` is invoked once per
/// evaluation and must be deterministic (no fresh dropout masks).
/// Coordinates that disagree at the given step are retried at smaller
/// steps (see [`REFINE_TRIGGER`]) and keep their best agreement. Returns
/// the worst relative error over all input coordinates.
pub fn grad_check<F>(store: &ParamStore, build: F, x: &Tensor, eps: Real) -> Result<Real>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let analytic: Vec<Real> = {
        let mut tape = Tape::new(store);
        let xi = tape.leaf_with_grad(x.clone());
        let root = build(&mut tape, xi)?;
        let grads = tape.backward(root)?;
        match grads.node(xi) {
            Some(g) => g.to_vec(),
            None => vec![0.0; x.numel()],
        }
    };
    let eval = |xt: &Tensor| -> Result<Real> {
        let mut tape = Tape::new(store);
        let xi = tape.leaf_with_grad(xt.clone());
        let root = build(&mut tape, xi)?;
        Ok(tape.value(root).data()[0])
    };
    let mut worst = 0.0;
    let mut work = x.clone();
    for i in 0..x.numel() {
        let v = work.data()[i];
        let mut step = eps;
        let mut best: Option<Real> = None;
        for attempt in 0..=REFINE_STEPS {
            work.data_mut()[i] = v + step;
            let fp = eval(&work)?;
            work.data_mut()[i] = v - step;
            let fm = eval(&work)?;
            work.data_mut()[i] = v;
            let numeric = (fp - fm) / (2.0 * step);
            if both_below_noise(analytic[i], numeric) {
                best = None;
                break;
            }
            let err = relative_error(analytic[i], numeric);
            best = Some(best.map_or(err, |b| if err < b { err } else { b }));
            if best.unwrap_or(0.0) <= REFINE_TRIGGER || attempt == REFINE_STEPS {
                break;
            }
            step /= REFINE_FACTOR;
        }
        if let Some(err) = best {
            worst = maxr(worst, err);
        }
    }
    Ok(worst)
}

/// Like [`grad_check`] but differentiates with respect to stored
/// parameters. Checks every coordinate of each listed parameter, or a
/// deterministic random subset of `k` per parameter when `sample` is
/// `Some((k, seed))`. Returns the worst relative error.
pub fn grad_check_params<F>(
    store: &ParamStore,
    build: F,
    ids: &[ParamId],
    eps: Real,
    sample: Option<(usize, u64)>,
) -> Result<Real>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let root = build(&mut tape)?;
        tape.backward(root)?
    };
    let mut work = store.clone();
    let eval = |s: &ParamStore| -> Result<Real> {
        let mut tape = Tape::new(s);
        let root = build(&mut tape)?;
        Ok(tape.value(root).data()[0])
    };
    let mut worst = 0.0;
    for (pi, id) in ids.iter().enumerate() {
        let n = store.get(*id).numel();
        let coords: Vec<usize> = match sample {
            Some((k, seed)) if k < n => {
                let mut r = crate::rng::stream(seed, crate::rng::tag::CHECK, pi as u64);
                (0..k).map(|_| r.random_range(0..n)).collect()
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.param(*id);
        for i in coords {
            let a = analytic.map(|g| g[i]).unwrap_or(0.0);
            let v = work.get(*id).data()[i];
            let mut step = eps;
            let mut best: Option<Real> = None;
            for attempt in 0..=REFINE_STEPS {
                work.get_mut(*id).data_mut()[i] = v + step;
                let fp = eval(&work)?;
                work.get_mut(*id).data_mut()[i] = v - step;
                let fm = eval(&work)?;
                work.get_mut(*id).data_mut()[i] = v;
                let numeric = (fp - fm) / (2.0 * step);
                if both_below_noise(a, numeric) {
                    best = None;
                    break;
                }
                let err = relative_error(a, numeric);
                best = Some(best.map_or(err, |b| if err < b { err } else { b }));
                if best.unwrap_or(0.0) <= REFINE_TRIGGER || attempt == REFINE_STEPS {
                    break;
                }
                step /= REFINE_FACTOR;
            }
            if let Some(err) = best {
                worst = maxr(worst, err);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, rng::tag::CHECK, 3);
        Tensor::from_fn(shape, |_| r.random::<Real>() * 2.0 - 1.0)
    }

    #[test]
    fn backward_requires_scalar_root() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.leaf_with_grad(rand_tensor(Shape::d3(2, 2, 1), 1));
        let y = tape.relu(x);
        let err = match tape.backward(y) {
            Err(e) => e,
            Ok(_) => panic!("non-scalar root must be rejected"),
        };
        assert!(matches!(err, CoreError::Contract(_)));
    }

    #[test]
    fn unreached_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let unused = store
            .add("unused", Tensor::zeros(Shape::d1(3)), true)
            .unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.leaf_with_grad(rand_tensor(Shape::d3(2, 2, 1), 2));
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.param(unused).is_none());
        assert_eq!(grads.node(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_subgraphs_are_skipped() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.leaf(rand_tensor(Shape::d3(2, 2, 1), 3));
        let b = tape.leaf_with_grad(rand_tensor(Shape::d3(2, 2, 1), 4));
        let prod = tape.mul(a, b).unwrap();
        let s = tape.sum(prod).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.node(a).is_none());
        let ga = grads.node(b).unwrap();
        assert_eq!(ga, tape.value(a).data());
    }

    #[test]
    fn simple_chain_gradient_is_exact() {
        // d/dx sum(relu(2x)) = 2 where x > 0, else 0.
        let store = ParamStore::new();
        let build = |tape: &mut Tape, x: NodeId| -> Result<NodeId> {
            let s = tape.scale(x, 2.0);
            let r = tape.relu(s);
            tape.sum(r)
        };
        let x = rand_tensor(Shape::d3(3, 3, 2), 5);
        let err = grad_check(&store, build, &x, 1e-5).unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn dropout_retains_expectation_shape_and_masks_gradient() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.leaf_with_grad(Tensor::full(Shape::d3(20, 20, 1), 1.0));
        let mut r = rng::stream(9, rng::tag::DROPOUT, 0);
        let d = tape.dropout(x, 0.5, &mut r).unwrap();
        let kept: usize = tape.value(d).data().iter().filter(|v| **v != 0.0).count();
        // Survivors are scaled to 2.0.
        assert!(tape.value(d).data().iter().all(|v| *v == 0.0 || *v == 2.0));
        // About half survive.
        assert!(kept > 130 && kept < 270, "kept {kept}");
        let s = tape.sum(d).unwrap();
        let grads = tape.backward(s).unwrap();
        let gx = grads.node(x).unwrap();
        let nonzero = gx.iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, kept);
    }

    #[test]
    fn rate_zero_dropout_is_identity() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(rand_tensor(Shape::d3(4, 4, 2), 6));
        let mut r = rng::stream(9, rng::tag::DROPOUT, 0);
        let d = tape.dropout(x, 0.0, &mut r).unwrap();
        assert_eq!(d, x);
    }
}
