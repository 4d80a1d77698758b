//! Network evaluation: an op graph compiled from a [`NetworkDef`], executed
//! in fixed topological order, with reverse-mode differentiation producing
//! gradients for every weight tensor and every recorded channel activation.
//!
//! The recorded activation of a weighted layer is its post-nonlinearity
//! value: the output of the ReLU immediately following it when present,
//! otherwise the layer's raw output.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::network::{ChannelId, LayerSpec, NetworkDef, TensorId, WeightStore};
use crate::ops;
use crate::tensor::{PassCounter, Tensor};

/// Index of a value (op input/output tensor) in the evaluation arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Conv2d { stride: usize, pad: usize },
    Dense,
    Relu,
    MaxPool { size: usize },
    SoftmaxXent,
}

/// One node of the evaluation graph. Nodes are stored in topological order
/// and evaluated front to back; `layer` is the index into the network's
/// layer list (the softmax head uses the layer count).
#[derive(Debug, Clone)]
pub struct OpNode {
    pub kind: OpKind,
    pub layer: usize,
    pub input: ValueId,
    pub output: ValueId,
    pub params: Option<(TensorId, TensorId)>,
}

/// A compiled, immutable evaluation plan. Cloning is cheap relative to
/// evaluation; distinct plans (or one shared plan) may be evaluated
/// concurrently because all evaluation state lives in the records.
#[derive(Debug, Clone)]
pub struct Plan {
    net: NetworkDef,
    ops: Vec<OpNode>,
    /// (layer index, value holding that layer's post-nonlinearity output,
    /// number of output channels) for every weighted layer.
    activation_values: Vec<(usize, ValueId, usize)>,
    num_values: usize,
}

impl Plan {
    pub fn new(net: &NetworkDef) -> Result<Self> {
        net.validate()?;
        let store = WeightStore::zeros(net)?;
        let shapes = net.layer_shapes()?;
        let mut ops = Vec::new();
        let mut activation_values: Vec<(usize, ValueId, usize)> = Vec::new();
        let mut next_value = 1usize; // value 0 is the batch input
        for (i, layer) in net.layers.iter().enumerate() {
            let input = ValueId(next_value - 1);
            let output = ValueId(next_value);
            next_value += 1;
            let (kind, params) = match *layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    let entry = store.entry_for_layer(i).expect("conv has params");
                    (OpKind::Conv2d { stride, pad }, Some((entry.weight, entry.bias)))
                }
                LayerSpec::Dense { .. } => {
                    let entry = store.entry_for_layer(i).expect("dense has params");
                    (OpKind::Dense, Some((entry.weight, entry.bias)))
                }
                LayerSpec::Relu => (OpKind::Relu, None),
                LayerSpec::MaxPool { size } => (OpKind::MaxPool { size }, None),
            };
            if params.is_some() {
                activation_values.push((i, output, shapes[i + 1].0));
            } else if matches!(kind, OpKind::Relu) {
                // A ReLU directly after a weighted layer defines that
                // layer's recorded activation.
                if let Some(last) = activation_values.last_mut() {
                    if last.0 + 1 == i {
                        last.1 = output;
                    }
                }
            }
            ops.push(OpNode {
                kind,
                layer: i,
                input,
                output,
                params,
            });
        }
        // Softmax cross-entropy head over the final dense output.
        ops.push(OpNode {
            kind: OpKind::SoftmaxXent,
            layer: net.layers.len(),
            input: ValueId(next_value - 1),
            output: ValueId(next_value),
            params: None,
        });
        Ok(Plan {
            net: net.clone(),
            ops,
            activation_values,
            num_values: next_value,
        })
    }

    pub fn net(&self) -> &NetworkDef {
        &self.net
    }

    pub fn ops(&self) -> &[OpNode] {
        &self.ops
    }
}

/// Everything forward produced: the loss, every intermediate value, and
/// the caches backward needs. Tied to the weight-store version it was
/// computed against.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    store_version: u64,
    loss: f64,
    values: Vec<Tensor>,
    pool_argmax: Vec<Option<Vec<usize>>>,
    probs: Vec<f64>,
    labels: Vec<usize>,
    activation_values: Vec<(usize, ValueId, usize)>,
    batch_n: usize,
}

impl ForwardRecord {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn batch_len(&self) -> usize {
        self.batch_n
    }

    /// Final-layer logits, [N, num_classes] (the softmax head's input).
    pub fn logits(&self) -> &Tensor {
        &self.values[self.values.len() - 2]
    }

    /// The post-nonlinearity activation elements of one channel, across
    /// all images of the batch and all spatial positions.
    pub fn channel_activation_elems(&self, c: ChannelId) -> Option<ChannelElems<'_>> {
        channel_elems(&self.activation_values, &self.values, c)
    }

    /// Copy one channel's post-nonlinearity activations into a tensor of
    /// shape [N, H, W] (or [N, 1, 1] for dense layers).
    pub fn channel_activations(&self, c: ChannelId) -> Option<Tensor> {
        channel_tensor(&self.activation_values, &self.values, c)
    }
}

/// Gradients of the batch loss with respect to every weight tensor and
/// every recorded channel activation.
#[derive(Debug, Clone)]
pub struct GradRecord {
    weight_grads: Vec<Tensor>,
    value_grads: Vec<Tensor>,
    activation_values: Vec<(usize, ValueId, usize)>,
}

impl GradRecord {
    pub fn weight_grad(&self, id: TensorId) -> &Tensor {
        &self.weight_grads[id.0]
    }

    pub fn weight_grads(&self) -> &[Tensor] {
        &self.weight_grads
    }

    /// dL/da elements for one channel's recorded activation.
    pub fn channel_grad_elems(&self, c: ChannelId) -> Option<ChannelElems<'_>> {
        channel_elems(&self.activation_values, &self.value_grads, c)
    }

    pub fn channel_grads(&self, c: ChannelId) -> Option<Tensor> {
        channel_tensor(&self.activation_values, &self.value_grads, c)
    }
}

/// Iterator over the per-image contiguous chunks of one channel.
pub struct ChannelElems<'a> {
    data: &'a [f32],
    per_image: usize,
    chunk_offset: usize,
    chunk_len: usize,
    batch_n: usize,
    image: usize,
    pos: usize,
}

impl<'a> Iterator for ChannelElems<'a> {
    type Item = f32;

    fn next(&mut self) -> Option<f32> {
        if self.image == self.batch_n {
            return None;
        }
        let v = self.data[self.image * self.per_image + self.chunk_offset + self.pos];
        self.pos += 1;
        if self.pos == self.chunk_len {
            self.pos = 0;
            self.image += 1;
        }
        Some(v)
    }
}

impl ChannelElems<'_> {
    pub fn total_len(&self) -> usize {
        self.batch_n * self.chunk_len
    }
}

fn channel_elems<'a>(
    activation_values: &[(usize, ValueId, usize)],
    values: &'a [Tensor],
    c: ChannelId,
) -> Option<ChannelElems<'a>> {
    let &(_, vid, channels) = activation_values.iter().find(|(l, _, _)| *l == c.layer)?;
    if c.channel >= channels {
        return None;
    }
    let t = &values[vid.0];
    let batch_n = t.shape()[0];
    let per_image: usize = t.shape()[1..].iter().product();
    let chunk_len = per_image / channels;
    Some(ChannelElems {
        data: t.data(),
        per_image,
        chunk_offset: c.channel * chunk_len,
        chunk_len,
        batch_n,
        image: 0,
        pos: 0,
    })
}

fn channel_tensor(
    activation_values: &[(usize, ValueId, usize)],
    values: &[Tensor],
    c: ChannelId,
) -> Option<Tensor> {
    let &(_, vid, channels) = activation_values.iter().find(|(l, _, _)| *l == c.layer)?;
    if c.channel >= channels {
        return None;
    }
    let t = &values[vid.0];
    let shape: Vec<usize> = match *t.shape() {
        [n, _, h, w] => vec![n, h, w],
        [n, _] => vec![n, 1, 1],
        _ => return None,
    };
    let elems: Vec<f32> = channel_elems(activation_values, values, c)?.collect();
    Some(Tensor::new(shape, elems).expect("chunked copy matches shape"))
}

/// Evaluate the network on one batch. Pure with respect to the weight
/// store; bumps `counter` by one whole-network pass.
pub fn forward(
    plan: &Plan,
    store: &WeightStore,
    batch: &Batch,
    counter: &PassCounter,
) -> Result<ForwardRecord> {
    let (c, h, w) = plan.net.input_shape;
    let shape_ok = matches!(*batch.images.shape(), [n, bc, bh, bw]
        if n == batch.labels.len() && bc == c && bh == h && bw == w);
    if !shape_ok {
        return Err(Error::shape_mismatch(
            "batch images",
            format!("[{}, {c}, {h}, {w}]", batch.labels.len()),
            batch.images.shape(),
        ));
    }
    for &label in &batch.labels {
        if label >= plan.net.num_classes {
            return Err(Error::InvalidLabel {
                label,
                num_classes: plan.net.num_classes,
            });
        }
    }
    counter.bump();

    let mut values: Vec<Tensor> = Vec::with_capacity(plan.num_values);
    values.push(batch.images.clone());
    let mut pool_argmax: Vec<Option<Vec<usize>>> = vec![None; plan.ops.len()];
    let mut loss = 0.0f64;
    let mut probs = Vec::new();
    for (op_idx, op) in plan.ops.iter().enumerate() {
        let input = &values[op.input.0];
        let out = match op.kind {
            OpKind::Conv2d { stride, pad } => {
                let (wid, bid) = op.params.expect("conv has params");
                ops::conv2d_forward(input, store.tensor(wid), store.tensor(bid), stride, pad)?
            }
            OpKind::Dense => {
                let (wid, bid) = op.params.expect("dense has params");
                ops::dense_forward(input, store.tensor(wid), store.tensor(bid))?
            }
            OpKind::Relu => ops::relu_forward(input),
            OpKind::MaxPool { size } => {
                let (out, argmax) = ops::maxpool_forward(input, size)?;
                pool_argmax[op_idx] = Some(argmax);
                out
            }
            OpKind::SoftmaxXent => {
                let (l, p) = ops::softmax_xent_forward(input, &batch.labels)?;
                loss = l;
                probs = p;
                // The scalar loss is carried separately; keep a 1-element
                // value so value ids stay aligned with the plan.
                Tensor::new(vec![1], vec![l as f32])?
            }
        };
        values.push(out);
    }
    Ok(ForwardRecord {
        store_version: store.version(),
        loss,
        values,
        pool_argmax,
        probs,
        labels: batch.labels.clone(),
        activation_values: plan.activation_values.clone(),
        batch_n: batch.labels.len(),
    })
}

/// Reverse-mode differentiation of the recorded batch loss. Rejects
/// records whose weight store has been mutated since forward.
pub fn backward(plan: &Plan, store: &WeightStore, record: &ForwardRecord) -> Result<GradRecord> {
    if store.version() != record.store_version {
        return Err(Error::StaleRecord);
    }
    let mut value_grads: Vec<Vec<f32>> = record
        .values
        .iter()
        .map(|t| vec![0.0f32; t.len()])
        .collect();
    let mut weight_grads: Vec<Vec<f32>> = store
        .tensors()
        .iter()
        .map(|t| vec![0.0f32; t.len()])
        .collect();

    for (op_idx, op) in plan.ops.iter().enumerate().rev() {
        match op.kind {
            OpKind::SoftmaxXent => {
                let k = plan.net.num_classes;
                value_grads[op.input.0] =
                    ops::softmax_xent_backward(&record.probs, &record.labels, k);
            }
            OpKind::Dense => {
                let (wid, bid) = op.params.expect("dense has params");
                let out_grad =
                    Tensor::new(record.values[op.output.0].shape().to_vec(), value_grads[op.output.0].clone())?;
                let (din, dw, db) = ops::dense_backward(
                    &record.values[op.input.0],
                    store.tensor(wid),
                    &out_grad,
                );
                value_grads[op.input.0] = din;
                weight_grads[wid.0] = dw;
                weight_grads[bid.0] = db;
            }
            OpKind::Conv2d { stride, pad } => {
                let (wid, bid) = op.params.expect("conv has params");
                let out_grad =
                    Tensor::new(record.values[op.output.0].shape().to_vec(), value_grads[op.output.0].clone())?;
                let (din, dw, db) = ops::conv2d_backward(
                    &record.values[op.input.0],
                    store.tensor(wid),
                    &out_grad,
                    stride,
                    pad,
                );
                value_grads[op.input.0] = din;
                weight_grads[wid.0] = dw;
                weight_grads[bid.0] = db;
            }
            OpKind::Relu => {
                let out_grad =
                    Tensor::new(record.values[op.output.0].shape().to_vec(), value_grads[op.output.0].clone())?;
                value_grads[op.input.0] =
                    ops::relu_backward(&record.values[op.input.0], &out_grad);
            }
            OpKind::MaxPool { .. } => {
                let argmax = record.pool_argmax[op_idx]
                    .as_ref()
                    .expect("pool cached argmax in forward");
                let out_grad =
                    Tensor::new(record.values[op.output.0].shape().to_vec(), value_grads[op.output.0].clone())?;
                value_grads[op.input.0] = ops::maxpool_backward(
                    record.values[op.input.0].len(),
                    argmax,
                    &out_grad,
                );
            }
        }
    }

    let weight_grads = weight_grads
        .into_iter()
        .zip(store.tensors())
        .map(|(g, t)| Tensor::new(t.shape().to_vec(), g).expect("same shape"))
        .collect();
    let value_grads = value_grads
        .into_iter()
        .zip(&record.values)
        .map(|(g, t)| Tensor::new(t.shape().to_vec(), g).expect("same shape"))
        .collect();
    Ok(GradRecord {
        weight_grads,
        value_grads,
        activation_values: record.activation_values.clone(),
    })
}

/// Mean loss over a sequence of batches (one forward pass per batch).
pub fn mean_loss(
    plan: &Plan,
    store: &WeightStore,
    batches: &[Batch],
    counter: &PassCounter,
) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Empty("batch list"));
    }
    let mut total = 0.0f64;
    for batch in batches {
        total += forward(plan, store, batch, counter)?.loss;
    }
    Ok(total / batches.len() as f64)
}
