//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every tensor produced during a forward pass. Operations
//! execute eagerly, append a node describing their inputs, and return a
//! [`NodeId`] handle. [`Graph::backward`] walks the tape once in reverse,
//! propagating adjoints only through nodes that can reach a gradient target,
//! and adds the result into each target leaf's persistent accumulator, so
//! repeated backward calls sum their contributions.

use super::conv::{
    conv3d_backward, conv3d_forward, conv_transpose3d_backward, conv_transpose3d_forward,
    ConvDims,
};
use super::{Result, Scalar, Tensor, TensorError};

use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node in one specific [`Graph`]. Using it with any other
/// graph is reported as a detached-node error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv3d { x: NodeId, w: NodeId, b: NodeId, dims: ConvDims },
    ConvTranspose3d { x: NodeId, w: NodeId, b: NodeId, dims: ConvDims },
    LeakyRelu { x: NodeId, slope: T },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulScalar { x: NodeId, c: T },
    Sum { x: NodeId },
    RootAbsLoss { pred: NodeId, target: NodeId, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf. It becomes a gradient target iff it was
    /// marked with [`Tensor::with_grad`].
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.graph != self.id || id.index >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        Ok(id.index)
    }

    /// Value of a node. Panics on a handle from another graph; use the op
    /// constructors' errors to catch that earlier.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        assert_eq!(id.graph, self.id, "node handle from a different graph");
        &self.nodes[id.index].value
    }

    /// Accumulated gradient of a leaf after one or more backward passes.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        assert_eq!(id.graph, self.id, "node handle from a different graph");
        self.nodes[id.index].value.grad()
    }

    fn finite_checked(&mut self, op: &'static str, value: Tensor<T>) -> Result<Tensor<T>> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        Ok(value)
    }

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let dims = ConvDims::conv(
            self.nodes[xi].value.shape(),
            self.nodes[wi].value.shape(),
            stride,
            padding,
        )?;
        check_bias("conv3d", self.nodes[bi].value.shape(), dims.c_out)?;
        let out = conv3d_forward(
            self.nodes[xi].value.values(),
            self.nodes[wi].value.values(),
            self.nodes[bi].value.values(),
            &dims,
        );
        let value = self.finite_checked("conv3d", Tensor::new(dims.out_shape(), out)?)?;
        let needs = self.any_needs(&[x, w, b]);
        Ok(self.push(value, Op::Conv3d { x, w, b, dims }, needs))
    }

    pub fn conv_transpose3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<NodeId> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let dims = ConvDims::conv_transpose(
            self.nodes[xi].value.shape(),
            self.nodes[wi].value.shape(),
            stride,
            padding,
            output_padding,
        )?;
        check_bias("conv_transpose3d", self.nodes[bi].value.shape(), dims.c_out)?;
        let out = conv_transpose3d_forward(
            self.nodes[xi].value.values(),
            self.nodes[wi].value.values(),
            self.nodes[bi].value.values(),
            &dims,
        );
        let value = self.finite_checked("conv_transpose3d", Tensor::new(dims.out_shape(), out)?)?;
        let needs = self.any_needs(&[x, w, b]);
        Ok(self.push(value, Op::ConvTranspose3d { x, w, b, dims }, needs))
    }

    /// `max(x, slope * x)` elementwise; the derivative at zero takes the
    /// `slope` branch.
    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let xi = self.check(x)?;
        let s = T::from_f64(slope);
        let value = self.nodes[xi].value.map(|v| if v > T::zero() { v } else { s * v });
        let value = self.finite_checked("leaky_relu", value)?;
        let needs = self.nodes[xi].needs_grad;
        Ok(self.push(value, Op::LeakyRelu { x, slope: s }, needs))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(|v| T::one() / (T::one() + (-v).exp()));
        let value = self.finite_checked("sigmoid", value)?;
        let needs = self.nodes[xi].needs_grad;
        Ok(self.push(value, Op::Sigmoid { x }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ai].value.zip_map(&self.nodes[bi].value, |u, v| u + v)?;
        let value = self.finite_checked("add", value)?;
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ai].value.zip_map(&self.nodes[bi].value, |u, v| u * v)?;
        let value = self.finite_checked("mul", value)?;
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let xi = self.check(x)?;
        let cv = T::from_f64(c);
        let value = self.nodes[xi].value.map(|v| v * cv);
        let value = self.finite_checked("mul_scalar", value)?;
        let needs = self.nodes[xi].needs_grad;
        Ok(self.push(value, Op::MulScalar { x, c: cv }, needs))
    }

    /// Sum of all elements, producing a scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.check(x)?;
        let total: T = self.nodes[xi].value.values().iter().copied().sum();
        let value = self.finite_checked("sum", Tensor::scalar(total))?;
        let needs = self.nodes[xi].needs_grad;
        Ok(self.push(value, Op::Sum { x }, needs))
    }

    /// Smoothed square-root error `mean(sqrt(|pred - target| + eps) - sqrt(eps))`.
    ///
    /// The epsilon keeps the derivative bounded as residuals approach zero
    /// and the offset makes a perfect prediction score exactly zero.
    pub fn root_abs_loss(&mut self, pred: NodeId, target: NodeId, eps: f64) -> Result<NodeId> {
        let (pi, ti) = (self.check(pred)?, self.check(target)?);
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "root_abs_loss",
                details: format!("eps must be positive, got {eps}"),
            });
        }
        let e = T::from_f64(eps);
        let offset = e.sqrt();
        let diffs = self.nodes[pi]
            .value
            .zip_map(&self.nodes[ti].value, |p, t| ((p - t).abs() + e).sqrt() - offset)?;
        let n = T::from_f64(diffs.len() as f64);
        let mean = diffs.values().iter().copied().sum::<T>() / n;
        let value = self.finite_checked("root_abs_loss", Tensor::scalar(mean))?;
        let needs = self.any_needs(&[pred, target]);
        Ok(self.push(value, Op::RootAbsLoss { pred, target, eps: e }, needs))
    }

    fn any_needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.index].needs_grad)
    }

    /// Reverse pass from a scalar loss. Gradients are added into the
    /// persistent accumulators of leaves marked with [`Tensor::with_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let li = self.check(loss)?;
        if !self.nodes[li].value.is_scalar() {
            return Err(TensorError::NonScalarLoss(self.nodes[li].value.shape().to_vec()));
        }

        let mut adjoints: Vec<Option<Vec<T>>> = (0..=li).map(|_| None).collect();
        adjoints[li] = Some(vec![T::one()]);

        for idx in (0..=li).rev() {
            let Some(g) = adjoints[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {
                    self.nodes[idx].value.accumulate_grad(&g);
                }
                Op::Conv3d { x, w, b, dims } => {
                    let (x, w, b, dims) = (*x, *w, *b, *dims);
                    let need_gx = self.nodes[x.index].needs_grad;
                    let need_gw = self.nodes[w.index].needs_grad;
                    let grads = conv3d_backward(
                        self.nodes[x.index].value.values(),
                        self.nodes[w.index].value.values(),
                        &g,
                        &dims,
                        need_gx,
                        need_gw,
                    );
                    if let Some(gx) = grads.gx {
                        accumulate(&mut adjoints[x.index], gx);
                    }
                    if let Some(gw) = grads.gw {
                        accumulate(&mut adjoints[w.index], gw);
                    }
                    if self.nodes[b.index].needs_grad {
                        accumulate(&mut adjoints[b.index], grads.gb);
                    }
                }
                Op::ConvTranspose3d { x, w, b, dims } => {
                    let (x, w, b, dims) = (*x, *w, *b, *dims);
                    let need_gx = self.nodes[x.index].needs_grad;
                    let need_gw = self.nodes[w.index].needs_grad;
                    let grads = conv_transpose3d_backward(
                        self.nodes[x.index].value.values(),
                        self.nodes[w.index].value.values(),
                        &g,
                        &dims,
                        need_gx,
                        need_gw,
                    );
                    if let Some(gx) = grads.gx {
                        accumulate(&mut adjoints[x.index], gx);
                    }
                    if let Some(gw) = grads.gw {
                        accumulate(&mut adjoints[w.index], gw);
                    }
                    if self.nodes[b.index].needs_grad {
                        accumulate(&mut adjoints[b.index], grads.gb);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let (x, slope) = (*x, *slope);
                    if self.nodes[x.index].needs_grad {
                        let xs = self.nodes[x.index].value.values();
                        let gx = g
                            .iter()
                            .zip(xs)
                            .map(|(&gi, &xi)| if xi > T::zero() { gi } else { gi * slope })
                            .collect();
                        accumulate(&mut adjoints[x.index], gx);
                    }
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    if self.nodes[x.index].needs_grad {
                        let ys = self.nodes[idx].value.values();
                        let gx = g
                            .iter()
                            .zip(ys)
                            .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                            .collect();
                        accumulate(&mut adjoints[x.index], gx);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.index].needs_grad {
                        accumulate(&mut adjoints[a.index], g.clone());
                    }
                    if self.nodes[b.index].needs_grad {
                        accumulate(&mut adjoints[b.index], g);
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.index].needs_grad {
                        let bs = self.nodes[b.index].value.values();
                        let ga = g.iter().zip(bs).map(|(&gi, &bi)| gi * bi).collect();
                        accumulate(&mut adjoints[a.index], ga);
                    }
                    if self.nodes[b.index].needs_grad {
                        let as_ = self.nodes[a.index].value.values();
                        let gb = g.iter().zip(as_).map(|(&gi, &ai)| gi * ai).collect();
                        accumulate(&mut adjoints[b.index], gb);
                    }
                }
                Op::MulScalar { x, c } => {
                    let (x, c) = (*x, *c);
                    if self.nodes[x.index].needs_grad {
                        let gx = g.iter().map(|&gi| gi * c).collect();
                        accumulate(&mut adjoints[x.index], gx);
                    }
                }
                Op::Sum { x } => {
                    let x = *x;
                    if self.nodes[x.index].needs_grad {
                        let n = self.nodes[x.index].value.len();
                        accumulate(&mut adjoints[x.index], vec![g[0]; n]);
                    }
                }
                Op::RootAbsLoss { pred, target, eps } => {
                    let (pred, target, eps) = (*pred, *target, *eps);
                    let n = self.nodes[pred.index].value.len();
                    let scale = g[0] / T::from_f64(n as f64);
                    let half = T::from_f64(0.5);
                    let ps = self.nodes[pred.index].value.values();
                    let ts = self.nodes[target.index].value.values();
                    // d/dr of sqrt(|r| + eps) is sign(r) / (2 sqrt(|r| + eps)),
                    // with sign(0) taken as 0.
                    let dpred: Vec<T> = ps
                        .iter()
                        .zip(ts)
                        .map(|(&p, &t)| {
                            let r = p - t;
                            let sgn = if r > T::zero() {
                                T::one()
                            } else if r < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            scale * sgn * half / (r.abs() + eps).sqrt()
                        })
                        .collect();
                    if self.nodes[target.index].needs_grad {
                        let neg = dpred.iter().map(|&v| -v).collect();
                        accumulate(&mut adjoints[target.index], neg);
                    }
                    if self.nodes[pred.index].needs_grad {
                        accumulate(&mut adjoints[pred.index], dpred);
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_bias(op: &'static str, shape: &[usize], c_out: usize) -> Result<()> {
    if shape != [c_out] {
        return Err(TensorError::ShapeMismatch {
            op,
            details: format!("bias must be [{c_out}], got {shape:?}"),
        });
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        None => *slot = Some(delta),
    }
}
