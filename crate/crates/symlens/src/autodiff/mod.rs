//! Minimal reverse- and forward-mode differentiation over a fixed operator
//! vocabulary.
//!
//! An [`OpGraph`] is an acyclic, shape-validated list of primitive ops; all
//! derivatives are taken with respect to a flat [`ParamVector`]. The engine
//! exposes exactly what the rest of the toolkit needs: [`OpGraph::forward`],
//! loss gradients ([`grad_loss`]), Jacobian-vector products
//! ([`OpGraph::jvp_outputs`]) and vector-Jacobian products
//! ([`OpGraph::vjp_outputs`]).
//!
//! Evaluation is deterministic: reductions run in a fixed sequential order,
//! so identical (graph, params, input) triples produce identical bits.

pub mod ops;

use crate::error::Error;
use crate::loss::SmseWeights;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;
pub use ops::Op;

/// Flat parameter coordinates of a model; the space on which gradients, the
/// metric, and influence live.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T>(pub Vec<T>);

impl<T: Scalar> ParamVector<T> {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![T::zero(); len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &Self) -> T {
        crate::scalar::dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> T {
        crate::scalar::norm2(&self.0)
    }

    pub fn scaled(&self, alpha: T) -> Self {
        ParamVector(self.0.iter().map(|v| *v * alpha).collect())
    }

    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        crate::scalar::axpy(alpha, &other.0, &mut self.0);
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl<T> std::ops::Deref for ParamVector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> std::ops::DerefMut for ParamVector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub out_shape: Vec<usize>,
    /// Offset of this node's parameter segment in the flat vector.
    pub param_offset: usize,
    pub param_len: usize,
    /// Builder-requested zero init (output heads, position embeddings).
    pub zero_init: bool,
}

/// A validated, acyclic operator graph with a single input and output.
#[derive(Debug, Clone)]
pub struct OpGraph {
    nodes: Vec<Node>,
    input_shape: Vec<usize>,
    output: NodeId,
    param_len: usize,
}

impl OpGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output].out_shape
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    fn check_args<T: Scalar>(&self, params: &ParamVector<T>, input: &Tensor<T>) -> Result<()> {
        if params.len() != self.param_len {
            return Err(Error::shape(format!(
                "param vector length {} does not match graph parameter count {}",
                params.len(),
                self.param_len
            )));
        }
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::shape(format!(
                "input shape {:?} does not match graph input {:?}",
                input.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    fn forward_all<T: Scalar>(
        &self,
        params: &ParamVector<T>,
        input: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        self.check_args(params, input)?;
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Input => input.clone(),
                _ => {
                    let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &values[i]).collect();
                    let seg = &params[node.param_offset..node.param_offset + node.param_len];
                    node.op.forward(&ins, seg)
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Deterministic forward evaluation.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamVector<T>,
        input: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut values = self.forward_all(params, input)?;
        Ok(values.swap_remove(self.output))
    }

    /// J·tangent, where J is the output-vs-parameter Jacobian at
    /// `(params, input)`.
    pub fn jvp_outputs<T: Scalar>(
        &self,
        params: &ParamVector<T>,
        input: &Tensor<T>,
        tangent: &ParamVector<T>,
    ) -> Result<Tensor<T>> {
        if tangent.len() != self.param_len {
            return Err(Error::shape(format!(
                "tangent length {} does not match parameter count {}",
                tangent.len(),
                self.param_len
            )));
        }
        let values = self.forward_all(params, input)?;
        let mut tangents: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let t = match node.op {
                Op::Input => Tensor::zeros(&self.input_shape),
                _ => {
                    let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &values[i]).collect();
                    let tins: Vec<&Tensor<T>> =
                        node.inputs.iter().map(|&i| &tangents[i]).collect();
                    let seg = &params[node.param_offset..node.param_offset + node.param_len];
                    let tseg = &tangent[node.param_offset..node.param_offset + node.param_len];
                    node.op.jvp(&ins, seg, &tins, tseg, &values[id])
                }
            };
            tangents.push(t);
        }
        Ok(tangents.swap_remove(self.output))
    }

    /// Jᵀ·cotangent with respect to the parameters.
    pub fn vjp_outputs<T: Scalar>(
        &self,
        params: &ParamVector<T>,
        input: &Tensor<T>,
        cotangent: &Tensor<T>,
    ) -> Result<ParamVector<T>> {
        let values = self.forward_all(params, input)?;
        if cotangent.shape() != values[self.output].shape() {
            return Err(Error::shape(format!(
                "cotangent shape {:?} does not match output {:?}",
                cotangent.shape(),
                values[self.output].shape()
            )));
        }
        let mut grad = ParamVector::zeros(self.param_len);
        let mut cots: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        cots[self.output] = Some(cotangent.clone());
        for id in (0..self.nodes.len()).rev() {
            let cot = match cots[id].take() {
                Some(c) => c,
                None => continue,
            };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Input) {
                continue;
            }
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &values[i]).collect();
            let seg_grad = &mut grad.0[node.param_offset..node.param_offset + node.param_len];
            let seg = &params[node.param_offset..node.param_offset + node.param_len];
            let input_cots = node.op.vjp(&ins, seg, &values[id], &cot, seg_grad);
            for (&src, c) in node.inputs.iter().zip(input_cots) {
                match &mut cots[src] {
                    Some(existing) => {
                        for (a, b) in existing.data_mut().iter_mut().zip(c.data()) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(grad)
    }
}

/// Builds an [`OpGraph`] node by node, validating shapes at insertion.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    input_shape: Vec<usize>,
    param_len: usize,
}

impl GraphBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        let input = Node {
            op: Op::Input,
            inputs: vec![],
            out_shape: input_shape.to_vec(),
            param_offset: 0,
            param_len: 0,
            zero_init: false,
        };
        GraphBuilder {
            nodes: vec![input],
            input_shape: input_shape.to_vec(),
            param_len: 0,
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].out_shape
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, zero_init: bool) -> Result<NodeId> {
        for &i in &inputs {
            if i >= self.nodes.len() {
                return Err(Error::shape(format!("node reference {i} out of range")));
            }
        }
        let shapes: Vec<&[usize]> = inputs
            .iter()
            .map(|&i| self.nodes[i].out_shape.as_slice())
            .collect();
        let out_shape = op.infer_shape(&shapes)?;
        let param_len = op.param_len();
        let node = Node {
            op,
            inputs,
            out_shape,
            param_offset: self.param_len,
            param_len,
            zero_init,
        };
        self.param_len += param_len;
        self.nodes.push(node);
        Ok(self.nodes.len() - 1)
    }

    pub fn dense(&mut self, x: NodeId, out_dim: usize) -> Result<NodeId> {
        self.dense_opts(x, out_dim, false)
    }

    pub fn dense_opts(&mut self, x: NodeId, out_dim: usize, zero_init: bool) -> Result<NodeId> {
        let s = self.shape_of(x);
        let in_dim = *s
            .last()
            .ok_or_else(|| Error::shape("dense needs a non-scalar input"))?;
        self.push(Op::Dense { in_dim, out_dim }, vec![x], zero_init)
    }

    pub fn conv(&mut self, x: NodeId, out_ch: usize, kernel: usize) -> Result<NodeId> {
        self.conv_opts(x, out_ch, kernel, false)
    }

    pub fn conv_opts(
        &mut self,
        x: NodeId,
        out_ch: usize,
        kernel: usize,
        zero_init: bool,
    ) -> Result<NodeId> {
        let in_ch = self.shape_of(x)[0];
        self.push(
            Op::ConvPeriodic {
                in_ch,
                out_ch,
                kernel,
            },
            vec![x],
            zero_init,
        )
    }

    pub fn patch_embed(&mut self, x: NodeId, embed: usize, patch: usize) -> Result<NodeId> {
        let in_ch = self.shape_of(x)[0];
        self.push(
            Op::PatchEmbed {
                in_ch,
                embed,
                patch,
            },
            vec![x],
            false,
        )
    }

    pub fn patch_unembed(&mut self, x: NodeId, out_ch: usize, patch: usize) -> Result<NodeId> {
        self.push(Op::PatchUnembed { out_ch, patch }, vec![x], false)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh, vec![x], false)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::AvgPool2, vec![x], false)
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::UpsampleNearest2, vec![x], false)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SoftmaxRows, vec![x], false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b], false)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::ConcatChannels, vec![a, b], false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        self.push(Op::MatMul { transpose_b }, vec![a, b], false)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::ScaleConst { factor }, vec![x], false)
    }

    /// Learned additive tensor (position embeddings); zero-initialized.
    pub fn param_add(&mut self, x: NodeId) -> Result<NodeId> {
        let len = self.shape_of(x).iter().product();
        self.push(Op::ParamAdd { len }, vec![x], true)
    }

    pub fn finish(self, output: NodeId) -> Result<OpGraph> {
        if output >= self.nodes.len() {
            return Err(Error::shape(format!("output node {output} out of range")));
        }
        Ok(OpGraph {
            nodes: self.nodes,
            input_shape: self.input_shape,
            output,
            param_len: self.param_len,
        })
    }
}

/// Gradient of the mean SMSE over a batch of (input, target) transitions.
///
/// Fails with the offending example index if any per-example loss is
/// non-finite.
pub fn grad_loss<T: Scalar>(
    graph: &OpGraph,
    params: &ParamVector<T>,
    batch: &[(Tensor<T>, Tensor<T>)],
    loss: &SmseWeights<T>,
) -> Result<ParamVector<T>> {
    grad_loss_valued(graph, params, batch, loss).map(|(g, _)| g)
}

/// As [`grad_loss`], also returning the mean batch loss (already computed
/// for the finiteness check).
pub fn grad_loss_valued<T: Scalar>(
    graph: &OpGraph,
    params: &ParamVector<T>,
    batch: &[(Tensor<T>, Tensor<T>)],
    loss: &SmseWeights<T>,
) -> Result<(ParamVector<T>, T)> {
    if batch.is_empty() {
        return Err(Error::config("grad_loss needs a non-empty batch"));
    }
    let mut grad = ParamVector::zeros(graph.param_len());
    let mut total = T::zero();
    for (idx, (input, target)) in batch.iter().enumerate() {
        let pred = graph.forward(params, input)?;
        let value = loss.smse(&pred, target)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { example: Some(idx) });
        }
        total += value;
        let cot = loss.cotangent(&pred, target)?;
        let g = graph.vjp_outputs(params, input, &cot)?;
        grad.add_scaled(T::one(), &g);
    }
    let scale = T::one() / T::from_f64(batch.len() as f64);
    Ok((grad.scaled(scale), total * scale))
}

/// Gradient of the SMSE at a single transition (batch of one, no averaging).
pub fn grad_single<T: Scalar>(
    graph: &OpGraph,
    params: &ParamVector<T>,
    input: &Tensor<T>,
    target: &Tensor<T>,
    loss: &SmseWeights<T>,
) -> Result<ParamVector<T>> {
    let pred = graph.forward(params, input)?;
    let value = loss.smse(&pred, target)?;
    if !value.is_finite() {
        return Err(Error::NonFinite { example: None });
    }
    let cot = loss.cotangent(&pred, target)?;
    graph.vjp_outputs(params, input, &cot)
}

/// Mean SMSE of a graph over a batch.
pub fn batch_loss<T: Scalar>(
    graph: &OpGraph,
    params: &ParamVector<T>,
    batch: &[(Tensor<T>, Tensor<T>)],
    loss: &SmseWeights<T>,
) -> Result<T> {
    let mut acc = T::zero();
    for (idx, (input, target)) in batch.iter().enumerate() {
        let v = loss.smse(&graph.forward(params, input)?, target)?;
        if !v.is_finite() {
            return Err(Error::NonFinite { example: Some(idx) });
        }
        acc += v;
    }
    Ok(acc / T::from_f64(batch.len() as f64))
}
