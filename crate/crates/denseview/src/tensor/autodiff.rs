//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records primitive ops as they execute; [`Tape::backward`]
//! replays the records in exact reverse order, accumulating gradients
//! additively wherever a value fans out. Every [`Var`] carries its value, so
//! an inference-mode tape (recording disabled) keeps no intermediate state
//! and memory is bounded by live variables only.

use std::collections::BTreeMap;

use super::{ops, Tensor};
use crate::error::{Error, Result};

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Handle to a value in a computation. Tracked vars also reference a tape
/// node; untracked vars (constants, or anything built on a disabled tape)
/// carry only the value.
#[derive(Clone, Debug)]
pub struct Var {
    tensor: Tensor,
    node: Option<usize>,
}

impl Var {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

/// One recorded op with everything its backward pass needs.
enum Record {
    Leaf { name: Option<String> },
    Add,
    Mul { a: Tensor, b: Tensor },
    Matmul { a: Tensor, b: Tensor },
    Conv2d { input: Tensor, weight: Tensor, stride: usize, pad: usize },
    Transpose { perm: Vec<usize> },
    Reshape { from: Vec<usize> },
    Concat { axis: usize, extents: Vec<usize> },
    Slice { axis: usize, start: usize, from: Vec<usize> },
    Gather { axis: usize, indices: Vec<usize>, from: Vec<usize> },
    Softmax { axis: usize, out: Tensor },
    LayerNorm { axis: usize, y: Tensor, inv_std: Tensor },
    GroupNorm { groups: usize, y: Tensor, inv_std: Tensor },
    Silu { input: Tensor },
    SumAll { from: Vec<usize> },
    MeanAll { from: Vec<usize> },
    SumAxis { axis: usize, from: Vec<usize> },
    Broadcast { from: Vec<usize> },
    Scale { c: f64 },
}

struct Node {
    parents: Vec<usize>,
    record: Record,
}

/// Records ops for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Tape {
    /// A tape that records; use for training and gradient checks.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true }
    }

    /// A tape that never records; ops stream through and intermediates are
    /// freed as their `Var`s drop.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Untracked value: gradients never flow into it.
    pub fn constant(&self, t: Tensor) -> Var {
        Var { tensor: t, node: None }
    }

    /// Tracked leaf with a name; `backward` reports its gradient under
    /// that name.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        if !self.recording {
            return Var { tensor: t, node: None };
        }
        let id = self.push(Vec::new(), Record::Leaf { name: Some(name.into()) });
        Var { tensor: t, node: Some(id) }
    }

    /// Tracked anonymous leaf (useful for gradient checks on activations).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        if !self.recording {
            return Var { tensor: t, node: None };
        }
        let id = self.push(Vec::new(), Record::Leaf { name: None });
        Var { tensor: t, node: Some(id) }
    }

    fn push(&mut self, parents: Vec<usize>, record: Record) -> usize {
        self.nodes.push(Node { parents, record });
        self.nodes.len() - 1
    }

    /// Wraps a computed tensor in a `Var`, recording the op if any parent is
    /// tracked.
    fn emit(&mut self, parents: &[&Var], value: Tensor, record: Record) -> Var {
        if !self.recording || parents.iter().all(|p| p.node.is_none()) {
            return Var { tensor: value, node: None };
        }
        // Untracked parents become fresh anonymous leaves so indices exist.
        let ids: Vec<usize> = parents
            .iter()
            .map(|p| match p.node {
                Some(id) => id,
                None => self.push(Vec::new(), Record::Leaf { name: None }),
            })
            .collect();
        let id = self.push(ids, record);
        Var { tensor: value, node: Some(id) }
    }

    // -- primitive ops ------------------------------------------------------

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = ops::add(&a.tensor, &b.tensor)?;
        Ok(self.emit(&[a, b], v, Record::Add))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = ops::mul(&a.tensor, &b.tensor)?;
        Ok(self.emit(
            &[a, b],
            v,
            Record::Mul { a: a.tensor.clone(), b: b.tensor.clone() },
        ))
    }

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = ops::matmul(&a.tensor, &b.tensor)?;
        Ok(self.emit(
            &[a, b],
            v,
            Record::Matmul { a: a.tensor.clone(), b: b.tensor.clone() },
        ))
    }

    pub fn conv2d(&mut self, input: &Var, weight: &Var, stride: usize, pad: usize) -> Result<Var> {
        let v = ops::conv2d(&input.tensor, &weight.tensor, stride, pad)?;
        Ok(self.emit(
            &[input, weight],
            v,
            Record::Conv2d {
                input: input.tensor.clone(),
                weight: weight.tensor.clone(),
                stride,
                pad,
            },
        ))
    }

    pub fn transpose(&mut self, a: &Var, perm: &[usize]) -> Result<Var> {
        let v = ops::transpose(&a.tensor, perm)?;
        Ok(self.emit(&[a], v, Record::Transpose { perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let from = a.tensor.shape().to_vec();
        let v = ops::reshape(&a.tensor, shape)?;
        Ok(self.emit(&[a], v, Record::Reshape { from }))
    }

    pub fn concat(&mut self, parts: &[&Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &p.tensor).collect();
        let v = ops::concat(&tensors, axis)?;
        let extents = parts.iter().map(|p| p.tensor.shape()[axis]).collect();
        Ok(self.emit(parts, v, Record::Concat { axis, extents }))
    }

    pub fn split(&mut self, a: &Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        if axis >= a.tensor.rank() || total != a.tensor.shape()[axis] {
            return Err(Error::shape(format!(
                "split sizes {:?} along axis {} of {:?}",
                sizes,
                axis,
                a.tensor.shape()
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn slice(&mut self, a: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let from = a.tensor.shape().to_vec();
        let v = ops::slice(&a.tensor, axis, start, len)?;
        Ok(self.emit(&[a], v, Record::Slice { axis, start, from }))
    }

    pub fn gather(&mut self, a: &Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let from = a.tensor.shape().to_vec();
        let v = ops::gather(&a.tensor, axis, indices)?;
        Ok(self.emit(&[a], v, Record::Gather { axis, indices: indices.to_vec(), from }))
    }

    pub fn softmax(&mut self, a: &Var, axis: usize) -> Result<Var> {
        let v = ops::softmax(&a.tensor, axis)?;
        let out = v.clone();
        Ok(self.emit(&[a], v, Record::Softmax { axis, out }))
    }

    pub fn layernorm(&mut self, a: &Var, axis: usize, eps: f64) -> Result<Var> {
        let (y, inv_std) = ops::layernorm(&a.tensor, axis, eps)?;
        let saved = y.clone();
        Ok(self.emit(&[a], y, Record::LayerNorm { axis, y: saved, inv_std }))
    }

    pub fn groupnorm(&mut self, a: &Var, groups: usize, eps: f64) -> Result<Var> {
        let (y, inv_std) = ops::groupnorm(&a.tensor, groups, eps)?;
        let saved = y.clone();
        Ok(self.emit(&[a], y, Record::GroupNorm { groups, y: saved, inv_std }))
    }

    pub fn silu(&mut self, a: &Var) -> Result<Var> {
        let v = ops::silu(&a.tensor)?;
        Ok(self.emit(&[a], v, Record::Silu { input: a.tensor.clone() }))
    }

    pub fn sum(&mut self, a: &Var) -> Result<Var> {
        let from = a.tensor.shape().to_vec();
        let v = ops::sum_all(&a.tensor)?;
        Ok(self.emit(&[a], v, Record::SumAll { from }))
    }

    pub fn mean(&mut self, a: &Var) -> Result<Var> {
        let from = a.tensor.shape().to_vec();
        let v = ops::mean_all(&a.tensor)?;
        Ok(self.emit(&[a], v, Record::MeanAll { from }))
    }

    pub fn sum_axis(&mut self, a: &Var, axis: usize) -> Result<Var> {
        let from = a.tensor.shape().to_vec();
        let v = ops::sum_axis(&a.tensor, axis)?;
        Ok(self.emit(&[a], v, Record::SumAxis { axis, from }))
    }

    pub fn mean_axis(&mut self, a: &Var, axis: usize) -> Result<Var> {
        let extent = a.tensor.shape().get(axis).copied().unwrap_or(0).max(1);
        let s = self.sum_axis(a, axis)?;
        self.scale(&s, 1.0 / extent as f64)
    }

    pub fn broadcast(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let from = a.tensor.shape().to_vec();
        let v = ops::broadcast(&a.tensor, shape)?;
        Ok(self.emit(&[a], v, Record::Broadcast { from }))
    }

    pub fn scale(&mut self, a: &Var, c: f64) -> Result<Var> {
        let v = ops::scale(&a.tensor, c)?;
        Ok(self.emit(&[a], v, Record::Scale { c }))
    }

    // -- composed helpers ----------------------------------------------------

    /// `a - b` via scale(-1) + add.
    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, &nb)
    }

    /// Broadcasts `b` to `a`'s shape and adds. The usual bias pattern.
    pub fn add_broadcast(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let bb = self.broadcast(b, a.tensor.shape())?;
        self.add(a, &bb)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(&d, &d)?;
        self.mean(&sq)
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss. Returns gradients for every named
    /// parameter reachable from the loss, shaped like the parameter.
    pub fn backward(&mut self, loss: &Var) -> Result<GradMap> {
        let root = loss
            .node
            .ok_or_else(|| Error::Autodiff("backward on untracked value".into()))?;
        if loss.tensor.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.tensor.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::ones(loss.tensor.shape().to_vec()));

        for id in (0..=root).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let contribs: Vec<Tensor> = match &node.record {
                Record::Leaf { name } => {
                    if name.is_some() {
                        grads[id] = Some(grad); // restore for collection below
                    }
                    continue;
                }
                Record::Add => vec![grad.clone(), grad],
                Record::Mul { a, b } => vec![ops::mul(b, &grad)?, ops::mul(a, &grad)?],
                Record::Matmul { a, b } => {
                    let (da, db) = ops::matmul_backward(a, b, &grad)?;
                    vec![da, db]
                }
                Record::Conv2d { input, weight, stride, pad } => {
                    let (di, dw) = ops::conv2d_backward(input, weight, &grad, *stride, *pad);
                    vec![di, dw]
                }
                Record::Transpose { perm } => {
                    vec![ops::transpose(&grad, &ops::inverse_perm(perm))?]
                }
                Record::Reshape { from } => vec![ops::reshape(&grad, from)?],
                Record::Concat { axis, extents } => {
                    let mut parts = Vec::with_capacity(extents.len());
                    let mut start = 0;
                    for &len in extents {
                        parts.push(ops::slice(&grad, *axis, start, len)?);
                        start += len;
                    }
                    parts
                }
                Record::Slice { axis, start, from } => {
                    vec![ops::slice_backward(&grad, from, *axis, *start)]
                }
                Record::Gather { axis, indices, from } => {
                    vec![ops::gather_backward(&grad, from, *axis, indices)]
                }
                Record::Softmax { axis, out } => {
                    vec![ops::softmax_backward(out, &grad, *axis)]
                }
                Record::LayerNorm { axis, y, inv_std } => {
                    vec![ops::layernorm_backward(y, inv_std, &grad, *axis)]
                }
                Record::GroupNorm { groups, y, inv_std } => {
                    vec![ops::groupnorm_backward(y, inv_std, &grad, *groups)]
                }
                Record::Silu { input } => vec![ops::silu_backward(input, &grad)],
                Record::SumAll { from } => {
                    let g = grad.item()?;
                    vec![Tensor::full(from.clone(), g)]
                }
                Record::MeanAll { from } => {
                    let n: usize = from.iter().product();
                    let g = grad.item()? / n as f64;
                    vec![Tensor::full(from.clone(), g)]
                }
                Record::SumAxis { axis, from } => {
                    let mut keep = from.clone();
                    keep[*axis] = 1;
                    let g = ops::reshape(&grad, &keep)?;
                    vec![ops::broadcast(&g, from)?]
                }
                Record::Broadcast { from } => vec![ops::reduce_to_shape(&grad, from)],
                Record::Scale { c } => vec![ops::scale(&grad, *c)?],
            };
            let parents = self.nodes[id].parents.clone();
            debug_assert_eq!(parents.len(), contribs.len());
            for (pid, contrib) in parents.into_iter().zip(contribs) {
                match &mut grads[pid] {
                    Some(acc) => *acc = ops::add(acc, &contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut out = GradMap::new();
        for (id, node) in self.nodes.iter().enumerate().take(root + 1) {
            if let Record::Leaf { name: Some(name) } = &node.record {
                if let Some(g) = grads[id].take() {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Attributes for the string-dispatched op surface.
#[derive(Debug, Clone, Default)]
pub struct OpAttrs {
    pub axis: Option<usize>,
    pub stride: Option<usize>,
    pub pad: Option<usize>,
    pub shape: Option<Vec<usize>>,
    pub perm: Option<Vec<usize>>,
    pub indices: Option<Vec<usize>>,
    pub sizes: Option<Vec<usize>>,
    pub groups: Option<usize>,
    pub eps: Option<f64>,
    pub factor: Option<f64>,
}

/// Dispatches an op by name. The accepted set is closed; anything else is an
/// `UnsupportedOp` error. `split` is not dispatchable here because it returns
/// multiple tensors; use [`Tape::split`].
pub fn forward_op(tape: &mut Tape, name: &str, inputs: &[&Var], attrs: &OpAttrs) -> Result<Var> {
    let need = |n: usize| -> Result<()> {
        if inputs.len() != n {
            Err(Error::shape(format!("op `{}` takes {} inputs, got {}", name, n, inputs.len())))
        } else {
            Ok(())
        }
    };
    match name {
        "add" => {
            need(2)?;
            tape.add(inputs[0], inputs[1])
        }
        "mul" => {
            need(2)?;
            tape.mul(inputs[0], inputs[1])
        }
        "matmul" => {
            need(2)?;
            tape.matmul(inputs[0], inputs[1])
        }
        "conv2d" => {
            need(2)?;
            tape.conv2d(
                inputs[0],
                inputs[1],
                attrs.stride.unwrap_or(1),
                attrs.pad.unwrap_or(0),
            )
        }
        "transpose" => {
            need(1)?;
            let perm = attrs
                .perm
                .as_ref()
                .ok_or_else(|| Error::shape("transpose needs perm"))?;
            tape.transpose(inputs[0], perm)
        }
        "reshape" => {
            need(1)?;
            let shape = attrs
                .shape
                .as_ref()
                .ok_or_else(|| Error::shape("reshape needs shape"))?;
            tape.reshape(inputs[0], shape)
        }
        "concat" => {
            let axis = attrs.axis.unwrap_or(0);
            tape.concat(inputs, axis)
        }
        "softmax" => {
            need(1)?;
            tape.softmax(inputs[0], attrs.axis.unwrap_or(0))
        }
        "layernorm" => {
            need(1)?;
            tape.layernorm(inputs[0], attrs.axis.unwrap_or(0), attrs.eps.unwrap_or(1e-6))
        }
        "groupnorm" => {
            need(1)?;
            tape.groupnorm(inputs[0], attrs.groups.unwrap_or(1), attrs.eps.unwrap_or(1e-6))
        }
        "silu" => {
            need(1)?;
            tape.silu(inputs[0])
        }
        "mean" => {
            need(1)?;
            tape.mean(inputs[0])
        }
        "sum" => {
            need(1)?;
            match attrs.axis {
                Some(axis) => tape.sum_axis(inputs[0], axis),
                None => tape.sum(inputs[0]),
            }
        }
        "broadcast" => {
            need(1)?;
            let shape = attrs
                .shape
                .as_ref()
                .ok_or_else(|| Error::shape("broadcast needs shape"))?;
            tape.broadcast(inputs[0], shape)
        }
        "scale" => {
            need(1)?;
            tape.scale(inputs[0], attrs.factor.unwrap_or(1.0))
        }
        "gather" => {
            need(1)?;
            let indices = attrs
                .indices
                .as_ref()
                .ok_or_else(|| Error::shape("gather needs indices"))?;
            tape.gather(inputs[0], attrs.axis.unwrap_or(0), indices)
        }
        other => Err(Error::UnsupportedOp(other.to_string())),
    }
}
