//! Shared test support: an independent f64 reference implementation of the
//! forward pass (flat loops, no engine code), random small-net generators,
//! and a finite-difference gradient check.
//!
//! The reference path deliberately re-derives every shape and index on its
//! own so that it can serve as an oracle for the engine.

#![allow(dead_code)]

use prunelab_core::data::Batch;
use prunelab_core::network::{LayerSpec, NetworkDef, WeightStore};
use prunelab_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Naive f64 forward pass over a sequential net: returns the mean softmax
/// cross-entropy over the batch.
pub fn reference_loss(net: &NetworkDef, store: &WeightStore, batch: &Batch) -> f64 {
    let (c0, h0, w0) = net.input_shape;
    let n = batch.labels.len();
    let mut data: Vec<f64> = batch.images.data().iter().map(|&v| v as f64).collect();
    let mut shape = (c0, h0, w0);
    let mut entry_idx = 0usize;
    for layer in &net.layers {
        match *layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let (c, h, w) = shape;
                let entry = store.entries()[entry_idx];
                entry_idx += 1;
                let wgt = store.tensor(entry.weight).data();
                let bias = store.tensor(entry.bias).data();
                let oh = (h + 2 * pad - kernel) / stride + 1;
                let ow = (w + 2 * pad - kernel) / stride + 1;
                let mut out = vec![0.0f64; n * out_channels * oh * ow];
                for img in 0..n {
                    for f in 0..out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bias[f] as f64;
                                for ci in 0..c {
                                    for ky in 0..kernel {
                                        for kx in 0..kernel {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if iy < 0
                                                || ix < 0
                                                || iy >= h as isize
                                                || ix >= w as isize
                                            {
                                                continue;
                                            }
                                            let xv = data[((img * c + ci) * h
                                                + iy as usize)
                                                * w
                                                + ix as usize];
                                            let wv = wgt
                                                [((f * c + ci) * kernel + ky) * kernel + kx]
                                                as f64;
                                            acc += xv * wv;
                                        }
                                    }
                                }
                                out[((img * out_channels + f) * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
                data = out;
                shape = (out_channels, oh, ow);
            }
            LayerSpec::Relu => {
                for v in &mut data {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            LayerSpec::MaxPool { size } => {
                let (c, h, w) = shape;
                let oh = h / size;
                let ow = w / size;
                let mut out = vec![0.0f64; n * c * oh * ow];
                for img in 0..n {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                for ky in 0..size {
                                    for kx in 0..size {
                                        let v = data[((img * c + ci) * h + oy * size + ky) * w
                                            + ox * size
                                            + kx];
                                        if v > best {
                                            best = v;
                                        }
                                    }
                                }
                                out[((img * c + ci) * oh + oy) * ow + ox] = best;
                            }
                        }
                    }
                }
                data = out;
                shape = (c, oh, ow);
            }
            LayerSpec::Dense { out } => {
                let (c, h, w) = shape;
                let in_features = c * h * w;
                let entry = store.entries()[entry_idx];
                entry_idx += 1;
                let wgt = store.tensor(entry.weight).data();
                let bias = store.tensor(entry.bias).data();
                let mut next = vec![0.0f64; n * out];
                for img in 0..n {
                    for u in 0..out {
                        let mut acc = bias[u] as f64;
                        for i in 0..in_features {
                            acc += data[img * in_features + i]
                                * wgt[u * in_features + i] as f64;
                        }
                        next[img * out + u] = acc;
                    }
                }
                data = next;
                shape = (out, 1, 1);
            }
        }
    }

    // Mean softmax cross-entropy over the batch.
    let k = net.num_classes;
    let mut loss = 0.0f64;
    for (img, &label) in batch.labels.iter().enumerate() {
        let row = &data[img * k..(img + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - m).exp()).sum();
        loss += sum.ln() - (row[label] - m);
    }
    loss / n as f64
}

/// Central finite difference of the reference loss with respect to one
/// flat parameter index of one store tensor, using the actually-realized
/// f32 span as the denominator.
pub fn reference_fd(
    net: &NetworkDef,
    store: &WeightStore,
    batch: &Batch,
    tensor_idx: usize,
    flat_idx: usize,
    eps: f64,
) -> f64 {
    let mut plus = store.clone();
    let mut minus = store.clone();
    let original = store.tensors()[tensor_idx].data()[flat_idx];
    let p = (original as f64 + eps) as f32;
    let m = (original as f64 - eps) as f32;
    plus.tensor_mut(prunelab_core::network::TensorId(tensor_idx)).data_mut()[flat_idx] = p;
    minus.tensor_mut(prunelab_core::network::TensorId(tensor_idx)).data_mut()[flat_idx] = m;
    let lp = reference_loss(net, &plus, batch);
    let lm = reference_loss(net, &minus, batch);
    (lp - lm) / (p as f64 - m as f64)
}

/// Random small sequential net with at most `max_params` parameters.
pub fn random_net(rng: &mut ChaCha8Rng, max_params: usize) -> NetworkDef {
    loop {
        let in_c = rng.gen_range(1..=2usize);
        let hw = rng.gen_range(6..=9usize);
        let classes = rng.gen_range(2..=4usize);
        let mut layers = Vec::new();
        let conv_blocks = rng.gen_range(1..=2usize);
        let mut cur_hw = hw;
        for _ in 0..conv_blocks {
            let kernel = rng.gen_range(2..=3usize);
            if cur_hw < kernel {
                break;
            }
            let pad = rng.gen_range(0..=1usize);
            layers.push(LayerSpec::Conv {
                out_channels: rng.gen_range(2..=4usize),
                kernel,
                stride: 1,
                pad,
            });
            cur_hw = cur_hw + 2 * pad - kernel + 1;
            if rng.gen_bool(0.9) {
                layers.push(LayerSpec::Relu);
            }
            if cur_hw >= 4 && rng.gen_bool(0.5) {
                layers.push(LayerSpec::MaxPool { size: 2 });
                cur_hw /= 2;
            }
        }
        if rng.gen_bool(0.3) {
            layers.push(LayerSpec::Dense {
                out: rng.gen_range(3..=6usize),
            });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense { out: classes });
        let net = NetworkDef {
            input_shape: (in_c, hw, hw),
            num_classes: classes,
            layers,
        };
        if net.validate().is_err() {
            continue;
        }
        let store = WeightStore::zeros(&net).expect("validated");
        if store.num_params() <= max_params {
            return net;
        }
    }
}

/// He-initialized store with small random nonzero biases. Zero biases can
/// park ReLU pre-activations exactly on the kink, where central
/// differences measure a half-slope no gradient convention reproduces.
pub fn random_store(net: &NetworkDef, seed: u64, rng: &mut ChaCha8Rng) -> WeightStore {
    let mut store = WeightStore::init(net, seed).expect("valid net");
    for entry_idx in 0..store.entries().len() {
        let bias = store.entries()[entry_idx].bias;
        let data = store.tensor_mut(bias).data_mut();
        for v in data.iter_mut() {
            *v = rng.gen_range(0.01f32..0.1) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
    }
    store
}

/// Batch of positive pseudo-images in [0.05, 1.0] with uniform labels.
pub fn random_batch(net: &NetworkDef, n: usize, rng: &mut ChaCha8Rng) -> Batch {
    let (c, h, w) = net.input_shape;
    let images: Vec<f32> = (0..n * c * h * w)
        .map(|_| rng.gen_range(0.05f32..1.0))
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..net.num_classes)).collect();
    Batch {
        images: Tensor::new(vec![n, c, h, w], images).expect("consistent"),
        labels,
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent flat-loop reimplementation of the five saliency formulas.
///
/// Per channel, the activation and gradient elements of every batch are
/// concatenated into plain vectors and each score is computed in a single
/// explicit pass, sharing no aggregation code with the production path.
/// The weights entering the squared-weights score are read directly from
/// the conv tensor layout.
pub fn naive_metric_scores(
    net: &NetworkDef,
    store: &WeightStore,
    sample: &prunelab_core::data::ValidationSample,
    metric: prunelab_core::saliency::MetricKind,
) -> std::collections::BTreeMap<prunelab_core::network::ChannelId, f64> {
    use prunelab_core::graph::{backward, forward, Plan};
    use prunelab_core::saliency::MetricKind;
    use prunelab_core::tensor::PassCounter;
    use std::collections::BTreeMap;

    let plan = Plan::new(net).expect("valid net");
    let channels =
        prunelab_core::saliency::unpruned_channels(&plan, store).expect("channels exist");
    let counter = PassCounter::new();

    let mut acts: BTreeMap<_, Vec<f32>> = channels.iter().map(|&c| (c, Vec::new())).collect();
    let mut grads: BTreeMap<_, Vec<f32>> = channels.iter().map(|&c| (c, Vec::new())).collect();
    for batch in &sample.batches {
        let record = forward(&plan, store, batch, &counter).expect("forward");
        let grad = backward(&plan, store, &record).expect("backward");
        for &c in &channels {
            acts.get_mut(&c)
                .unwrap()
                .extend_from_slice(record.channel_activations(c).unwrap().data());
            grads
                .get_mut(&c)
                .unwrap()
                .extend_from_slice(grad.channel_grads(c).unwrap().data());
        }
    }

    let mut scores = BTreeMap::new();
    for &c in &channels {
        let a = &acts[&c];
        let g = &grads[&c];
        let score = match metric {
            MetricKind::MeanSqWeights => {
                // Own filter weights plus bias, straight from the layout.
                let entry = store
                    .entries()
                    .iter()
                    .find(|e| e.layer == c.layer)
                    .expect("conv entry");
                let w = store.tensor(entry.weight);
                let filter_len: usize = w.shape()[1..].iter().product();
                let mut sum = 0.0f64;
                let mut count = 0u64;
                for &v in &w.data()[c.channel * filter_len..(c.channel + 1) * filter_len] {
                    sum += v as f64 * v as f64;
                    count += 1;
                }
                let b = store.tensor(entry.bias).data()[c.channel];
                sum += b as f64 * b as f64;
                count += 1;
                sum / count as f64
            }
            MetricKind::MeanActivations => {
                let mut sum = 0.0f64;
                for &v in a {
                    sum += v as f64;
                }
                sum / a.len() as f64
            }
            MetricKind::AvgGradients => {
                let mut sum = 0.0f64;
                for &v in g {
                    sum += v as f64;
                }
                sum.abs() / g.len() as f64
            }
            MetricKind::Taylor1 => {
                let mut sum = 0.0f64;
                for i in 0..a.len() {
                    sum += a[i] as f64 * g[i] as f64;
                }
                sum.abs() / a.len() as f64
            }
            MetricKind::Fisher2 => {
                let mut sum = 0.0f64;
                for i in 0..a.len() {
                    sum += a[i] as f64 * g[i] as f64;
                }
                0.5 * sum * sum
            }
        };
        scores.insert(c, score);
    }
    scores
}
