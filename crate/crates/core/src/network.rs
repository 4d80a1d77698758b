//! Network definitions, channel enumeration, cross-layer channel parameter
//! sets, channel zeroing, weight accounting, and checkpoint I/O.
//!
//! Pruning a channel means zeroing every parameter whose removal would be
//! required to shrink the network into a dense smaller one: the channel's
//! own filter weights and bias, plus the input slice of the next weighted
//! layer that consumes it. Zeroing is persistent; the structural shrink is
//! only ever built as a test oracle.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One layer of a sequential network. The softmax cross-entropy head is
/// implicit: the final layer must be a `Dense` with `out == num_classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    /// Non-overlapping max pooling (stride equals window size).
    MaxPool { size: usize },
    Dense { out: usize },
}

/// A sequential network: ordered layer specs over a fixed input shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkDef {
    /// Input shape as (channels, height, width).
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkDef {
    /// Small two-conv network; 16 prunable channels on any input size.
    pub fn tiny(input_shape: (usize, usize, usize), num_classes: usize) -> Self {
        NetworkDef {
            input_shape,
            num_classes,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 6,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv {
                    out_channels: 10,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Dense { out: num_classes },
            ],
        }
    }

    /// Classic 6 + 16 filter stack with 5x5 kernels; 22 prunable channels.
    pub fn lenet(input_shape: (usize, usize, usize), num_classes: usize) -> Self {
        NetworkDef {
            input_shape,
            num_classes,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 6,
                    kernel: 5,
                    stride: 1,
                    pad: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 5,
                    stride: 1,
                    pad: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Dense { out: num_classes },
            ],
        }
    }

    /// Look up an architecture by its CLI name.
    pub fn by_name(
        name: &str,
        input_shape: (usize, usize, usize),
        num_classes: usize,
    ) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(input_shape, num_classes)),
            "lenet" => Ok(Self::lenet(input_shape, num_classes)),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (valid: tiny, lenet)"
            ))),
        }
    }

    /// Output shape (channels, height, width) after every layer, starting
    /// with the input shape at index 0. Errors on incompatible extents.
    pub fn layer_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = self.input_shape;
        shapes.push(cur);
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (_, h, w) = cur;
                    if h + 2 * pad < kernel || w + 2 * pad < kernel {
                        return Err(Error::shape_mismatch(
                            format!("conv layer {i}"),
                            format!("input at least {kernel}x{kernel} after padding"),
                            (h, w),
                        ));
                    }
                    if stride == 0 {
                        return Err(Error::Config(format!("conv layer {i}: stride must be >= 1")));
                    }
                    let oh = (h + 2 * pad - kernel) / stride + 1;
                    let ow = (w + 2 * pad - kernel) / stride + 1;
                    (out_channels, oh, ow)
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool { size } => {
                    let (c, h, w) = cur;
                    if size == 0 || h < size || w < size {
                        return Err(Error::shape_mismatch(
                            format!("maxpool layer {i}"),
                            format!("input at least {size}x{size}"),
                            (h, w),
                        ));
                    }
                    (c, h / size, w / size)
                }
                LayerSpec::Dense { out } => (out, 1, 1),
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Check the structural invariants: sequential shapes compatible, at
    /// least one conv layer, final layer a Dense classifier.
    pub fn validate(&self) -> Result<()> {
        if !self
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Conv { .. }))
        {
            return Err(Error::Config("network has no conv layer".into()));
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { out }) if *out == self.num_classes => {}
            other => {
                return Err(Error::Config(format!(
                    "final layer must be Dense with out == num_classes ({}), got {other:?}",
                    self.num_classes
                )))
            }
        }
        self.layer_shapes()?;
        Ok(())
    }
}

/// Identifies an output channel of a weighted layer.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ChannelId {
    pub layer: usize,
    pub channel: usize,
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.channel)
    }
}

/// Index of a tensor inside a [`WeightStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Conv,
    Dense,
}

/// Weight and bias tensor ids for one weighted layer.
#[derive(Debug, Clone, Copy)]
pub struct ParamEntry {
    pub layer: usize,
    pub kind: ParamKind,
    pub weight: TensorId,
    pub bias: TensorId,
}

/// A contiguous flat index range inside one store tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlice {
    pub tensor: TensorId,
    pub range: Range<usize>,
}

/// The full cross-layer parameter set whose zeroing removes a channel while
/// leaving a dense network: the channel's own filter weights and bias plus
/// the input-channel slice of the next weighted layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelParamSet {
    pub owner: ChannelId,
    pub slices: Vec<TensorSlice>,
}

impl ChannelParamSet {
    /// Total number of parameters covered by the slices.
    pub fn num_entries(&self) -> usize {
        self.slices.iter().map(|s| s.range.len()).sum()
    }

    /// True if the flat index of `tensor` falls inside any slice.
    pub fn contains(&self, tensor: TensorId, index: usize) -> bool {
        self.slices
            .iter()
            .any(|s| s.tensor == tensor && s.range.contains(&index))
    }
}

/// All parameter tensors of a network, in layer declaration order
/// (weight then bias per weighted layer). Cloning yields an independent
/// snapshot that sensitivity probes can mutate freely.
#[derive(Debug, Clone)]
pub struct WeightStore {
    tensors: Vec<Tensor>,
    entries: Vec<ParamEntry>,
    version: u64,
}

impl WeightStore {
    /// Zero-initialized parameters for `net`.
    pub fn zeros(net: &NetworkDef) -> Result<Self> {
        Self::build(net, |_, _| 0.0)
    }

    /// He-initialized weights (normal with std sqrt(2/fan_in)), zero biases.
    pub fn init(net: &NetworkDef, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(net, |fan_in, rng_needed| {
            if rng_needed {
                let std = (2.0 / fan_in as f64).sqrt();
                sample_normal(&mut rng) as f32 * std as f32
            } else {
                0.0
            }
        })
    }

    fn build(net: &NetworkDef, mut weight_value: impl FnMut(usize, bool) -> f32) -> Result<Self> {
        net.validate()?;
        let shapes = net.layer_shapes()?;
        let mut tensors = Vec::new();
        let mut entries = Vec::new();
        for (i, layer) in net.layers.iter().enumerate() {
            let (in_c, in_h, in_w) = shapes[i];
            match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_c * kernel * kernel;
                    let w: Vec<f32> = (0..out_channels * fan_in)
                        .map(|_| weight_value(fan_in, true))
                        .collect();
                    let weight =
                        Tensor::new(vec![out_channels, in_c, kernel, kernel], w)?;
                    let bias = Tensor::zeros(vec![out_channels]);
                    entries.push(ParamEntry {
                        layer: i,
                        kind: ParamKind::Conv,
                        weight: TensorId(tensors.len()),
                        bias: TensorId(tensors.len() + 1),
                    });
                    tensors.push(weight);
                    tensors.push(bias);
                }
                LayerSpec::Dense { out } => {
                    let fan_in = in_c * in_h * in_w;
                    let w: Vec<f32> = (0..out * fan_in)
                        .map(|_| weight_value(fan_in, true))
                        .collect();
                    let weight = Tensor::new(vec![out, fan_in], w)?;
                    let bias = Tensor::zeros(vec![out]);
                    entries.push(ParamEntry {
                        layer: i,
                        kind: ParamKind::Dense,
                        weight: TensorId(tensors.len()),
                        bias: TensorId(tensors.len() + 1),
                    });
                    tensors.push(weight);
                    tensors.push(bias);
                }
                LayerSpec::Relu | LayerSpec::MaxPool { .. } => {}
            }
        }
        Ok(WeightStore {
            tensors,
            entries,
            version: 0,
        })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Mutable tensor access; bumps the store version so stale forward
    /// records are rejected by backward.
    pub fn tensor_mut(&mut self, id: TensorId) -> &mut Tensor {
        self.version += 1;
        &mut self.tensors[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry_for_layer(&self, layer: usize) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Bit-level equality of all parameter values.
    pub fn bits_equal(&self, other: &WeightStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| {
                    a.data().len() == b.data().len()
                        && a.data()
                            .iter()
                            .zip(b.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; depends only on the rng stream, not on rand_distr internals.
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// All conv output channels across all layers, in (layer, channel) order.
pub fn enumerate_channels(net: &NetworkDef) -> Vec<ChannelId> {
    let mut out = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        if let LayerSpec::Conv { out_channels, .. } = *layer {
            for c in 0..out_channels {
                out.push(ChannelId {
                    layer: i,
                    channel: c,
                });
            }
        }
    }
    out
}

/// Build the cross-layer parameter set for channel `c`: its own filter
/// weights and bias, plus the input-channel slice of the next weighted
/// layer (looking through relu and pooling).
pub fn channel_param_set(
    net: &NetworkDef,
    store: &WeightStore,
    c: ChannelId,
) -> Result<ChannelParamSet> {
    let shapes = net.layer_shapes()?;
    let (out_channels, in_c, kernel) = match net.layers.get(c.layer) {
        Some(&LayerSpec::Conv {
            out_channels,
            kernel,
            ..
        }) => (out_channels, shapes[c.layer].0, kernel),
        _ => {
            return Err(Error::Config(format!(
                "channel {c} does not name a conv output channel"
            )))
        }
    };
    if c.channel >= out_channels {
        return Err(Error::Config(format!(
            "channel {c} out of range (layer has {out_channels} filters)"
        )));
    }
    let own = store
        .entry_for_layer(c.layer)
        .expect("validated conv layer has parameters");

    let filter_len = in_c * kernel * kernel;
    let mut slices = vec![
        TensorSlice {
            tensor: own.weight,
            range: c.channel * filter_len..(c.channel + 1) * filter_len,
        },
        TensorSlice {
            tensor: own.bias,
            range: c.channel..c.channel + 1,
        },
    ];

    // Input slice of the next weighted layer downstream.
    let mut consumer = None;
    for (j, layer) in net.layers.iter().enumerate().skip(c.layer + 1) {
        match layer {
            LayerSpec::Conv { .. } | LayerSpec::Dense { .. } => {
                consumer = Some(j);
                break;
            }
            LayerSpec::Relu | LayerSpec::MaxPool { .. } => {}
        }
    }
    let Some(j) = consumer else {
        return Err(Error::FinalLayerChannel {
            layer: c.layer,
            channel: c.channel,
        });
    };
    let entry = store
        .entry_for_layer(j)
        .expect("weighted layer has parameters");
    let (cons_in_c, cons_in_h, cons_in_w) = shapes[j];
    match net.layers[j] {
        LayerSpec::Conv {
            out_channels: f2,
            kernel: k2,
            ..
        } => {
            let per_in = k2 * k2;
            let per_filter = cons_in_c * per_in;
            for f in 0..f2 {
                slices.push(TensorSlice {
                    tensor: entry.weight,
                    range: f * per_filter + c.channel * per_in
                        ..f * per_filter + (c.channel + 1) * per_in,
                });
            }
        }
        LayerSpec::Dense { out } => {
            // Flatten is channel-major, so channel c occupies a contiguous
            // h*w block of every unit's weight row.
            let hw = cons_in_h * cons_in_w;
            let in_features = cons_in_c * hw;
            for u in 0..out {
                slices.push(TensorSlice {
                    tensor: entry.weight,
                    range: u * in_features + c.channel * hw
                        ..u * in_features + (c.channel + 1) * hw,
                });
            }
        }
        _ => unreachable!("consumer is a weighted layer"),
    }
    Ok(ChannelParamSet {
        owner: c,
        slices,
    })
}

/// Set every parameter in the set to exactly 0.0, leaving all other
/// entries bit-identical. Idempotent.
pub fn zero_channel(store: &mut WeightStore, pset: &ChannelParamSet) {
    for slice in &pset.slices {
        let data = store.tensor_mut(slice.tensor).data_mut();
        for v in &mut data[slice.range.clone()] {
            *v = 0.0;
        }
    }
}

/// True iff any parameter in the set is nonzero.
pub fn is_channel_nonzero(store: &WeightStore, pset: &ChannelParamSet) -> bool {
    pset.slices.iter().any(|slice| {
        store.tensor(slice.tensor).data()[slice.range.clone()]
            .iter()
            .any(|&v| v != 0.0)
    })
}

/// Weight accounting over convolution weight tensors only (biases and
/// dense layers excluded).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvWeightStats {
    pub total_conv_weights: usize,
    pub nonzero_conv_weights: usize,
    pub removed_pct: f64,
}

pub fn conv_weight_stats(store: &WeightStore) -> ConvWeightStats {
    let mut total = 0usize;
    let mut nonzero = 0usize;
    for entry in store.entries() {
        if entry.kind == ParamKind::Conv {
            let data = store.tensor(entry.weight).data();
            total += data.len();
            nonzero += data.iter().filter(|&&v| v != 0.0).count();
        }
    }
    let removed_pct = if total == 0 {
        0.0
    } else {
        100.0 * (1.0 - nonzero as f64 / total as f64)
    };
    ConvWeightStats {
        total_conv_weights: total,
        nonzero_conv_weights: nonzero,
        removed_pct,
    }
}

const CHECKPOINT_MAGIC: &str = "prunelab checkpoint v1";

/// Write a checkpoint: plain-text header (format version, layer specs,
/// tensor shapes) followed by little-endian f32 blobs in declaration order.
pub fn save_checkpoint(path: &Path, net: &NetworkDef, store: &WeightStore) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    let (c, h, w) = net.input_shape;
    writeln!(out, "input {c} {h} {w}")?;
    writeln!(out, "classes {}", net.num_classes)?;
    for layer in &net.layers {
        match *layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => writeln!(out, "layer conv {out_channels} {kernel} {stride} {pad}")?,
            LayerSpec::Relu => writeln!(out, "layer relu")?,
            LayerSpec::MaxPool { size } => writeln!(out, "layer maxpool {size}")?,
            LayerSpec::Dense { out: units } => writeln!(out, "layer dense {units}")?,
        }
    }
    for tensor in store.tensors() {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        writeln!(out, "tensor {}", dims.join(" "))?;
    }
    writeln!(out, "data")?;
    for tensor in store.tensors() {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`]; round-trips bit-exactly.
pub fn load_checkpoint(path: &Path) -> Result<(NetworkDef, WeightStore)> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let malformed = |detail: &str| Error::MalformedFile {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };

    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(malformed("missing checkpoint magic"));
    }

    let mut input_shape = None;
    let mut num_classes = None;
    let mut layers = Vec::new();
    let mut tensor_shapes: Vec<Vec<usize>> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(malformed("truncated header"));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["data"] => break,
            ["input", c, h, w] => {
                input_shape = Some((
                    parse_usize(c, path)?,
                    parse_usize(h, path)?,
                    parse_usize(w, path)?,
                ));
            }
            ["classes", k] => num_classes = Some(parse_usize(k, path)?),
            ["layer", "conv", oc, k, s, p] => layers.push(LayerSpec::Conv {
                out_channels: parse_usize(oc, path)?,
                kernel: parse_usize(k, path)?,
                stride: parse_usize(s, path)?,
                pad: parse_usize(p, path)?,
            }),
            ["layer", "relu"] => layers.push(LayerSpec::Relu),
            ["layer", "maxpool", s] => layers.push(LayerSpec::MaxPool {
                size: parse_usize(s, path)?,
            }),
            ["layer", "dense", u] => layers.push(LayerSpec::Dense {
                out: parse_usize(u, path)?,
            }),
            ["tensor", dims @ ..] if !dims.is_empty() => {
                let shape = dims
                    .iter()
                    .map(|d| parse_usize(d, path))
                    .collect::<Result<Vec<usize>>>()?;
                tensor_shapes.push(shape);
            }
            _ => return Err(malformed(&format!("unrecognized header line: {}", line.trim_end()))),
        }
    }

    let net = NetworkDef {
        input_shape: input_shape.ok_or_else(|| malformed("missing input line"))?,
        num_classes: num_classes.ok_or_else(|| malformed("missing classes line"))?,
        layers,
    };
    let mut store = WeightStore::zeros(&net)?;
    let declared: Vec<Vec<usize>> = store
        .tensors()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    if declared != tensor_shapes {
        return Err(malformed("tensor shapes do not match layer specs"));
    }
    for idx in 0..declared.len() {
        let tensor = store.tensor_mut(TensorId(idx));
        let mut bytes = vec![0u8; tensor.len() * 4];
        reader.read_exact(&mut bytes).map_err(|_| malformed("truncated tensor data"))?;
        for (i, v) in tensor.data_mut().iter_mut().enumerate() {
            *v = f32::from_le_bytes([
                bytes[4 * i],
                bytes[4 * i + 1],
                bytes[4 * i + 2],
                bytes[4 * i + 3],
            ]);
        }
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(malformed("trailing bytes after tensor data"));
    }
    Ok((net, store))
}

fn parse_usize(s: &str, path: &Path) -> Result<usize> {
    s.parse().map_err(|_| Error::MalformedFile {
        path: path.display().to_string(),
        detail: format!("expected integer, got `{s}`"),
    })
}
