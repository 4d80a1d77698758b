//! Engine-level integration tests: forward fidelity against the naive f64
//! reference, finite-difference gradient checks, evaluation purity, and
//! the structural-shrink equivalence of channel zeroing.

mod common;

use common::{random_batch, random_net, reference_fd, reference_loss, seeded_rng};
use prunelab_core::data::Batch;
use prunelab_core::graph::{backward, forward, Plan};
use prunelab_core::network::{
    channel_param_set, zero_channel, ChannelId, LayerSpec, NetworkDef, TensorId, WeightStore,
};
use prunelab_core::tensor::{PassCounter, Tensor};

fn pinned_two_layer_net() -> NetworkDef {
    NetworkDef {
        input_shape: (1, 6, 6),
        num_classes: 3,
        layers: vec![
            LayerSpec::Conv {
                out_channels: 3,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv {
                out_channels: 4,
                kernel: 3,
                stride: 1,
                pad: 0,
            },
            LayerSpec::Relu,
            LayerSpec::Dense { out: 3 },
        ],
    }
}

#[test]
fn forward_loss_matches_reference_to_1e6() {
    let net = pinned_two_layer_net();
    let store = WeightStore::init(&net, 41).unwrap();
    let mut rng = seeded_rng(42);
    let batch = random_batch(&net, 4, &mut rng);
    let plan = Plan::new(&net).unwrap();
    let counter = PassCounter::new();
    let record = forward(&plan, &store, &batch, &counter).unwrap();
    let reference = reference_loss(&net, &store, &batch);
    let rel = (record.loss() - reference).abs() / reference.abs();
    assert!(rel < 1e-6, "engine {} vs reference {reference}", record.loss());
}

#[test]
fn forward_is_pure_and_counts_passes() {
    let net = pinned_two_layer_net();
    let store = WeightStore::init(&net, 7).unwrap();
    let mut rng = seeded_rng(8);
    let batch = random_batch(&net, 3, &mut rng);
    let plan = Plan::new(&net).unwrap();
    let counter = PassCounter::new();
    let a = forward(&plan, &store, &batch, &counter).unwrap();
    let b = forward(&plan, &store, &batch, &counter).unwrap();
    assert_eq!(a.loss().to_bits(), b.loss().to_bits());
    assert_eq!(counter.count(), 2);
}

#[test]
fn backward_leaves_weights_unchanged_and_rejects_stale_records() {
    let net = pinned_two_layer_net();
    let mut store = WeightStore::init(&net, 7).unwrap();
    let mut rng = seeded_rng(8);
    let batch = random_batch(&net, 3, &mut rng);
    let plan = Plan::new(&net).unwrap();
    let counter = PassCounter::new();
    let record = forward(&plan, &store, &batch, &counter).unwrap();
    let snapshot = store.clone();
    backward(&plan, &store, &record).unwrap();
    assert!(store.bits_equal(&snapshot));

    // Mutate the store: the old record must be rejected.
    store.tensor_mut(TensorId(0)).data_mut()[0] += 1.0;
    assert!(matches!(
        backward(&plan, &store, &record),
        Err(prunelab_core::Error::StaleRecord)
    ));
}

#[test]
fn gradients_match_finite_differences_on_two_conv_net() {
    // Central differences with eps = 1e-3 against the f64 reference path;
    // every weight gradient within 1e-4 relative error.
    let net = pinned_two_layer_net();
    let store = WeightStore::init(&net, 1213).unwrap();
    let mut rng = seeded_rng(77);
    let batch = random_batch(&net, 2, &mut rng);
    let plan = Plan::new(&net).unwrap();
    let counter = PassCounter::new();
    let record = forward(&plan, &store, &batch, &counter).unwrap();
    let grads = backward(&plan, &store, &record).unwrap();

    let mut worst = 0.0f64;
    for (tensor_idx, tensor) in store.tensors().iter().enumerate() {
        for flat in 0..tensor.len() {
            let fd = reference_fd(&net, &store, &batch, tensor_idx, flat, 1e-3);
            let analytic = grads.weight_grads()[tensor_idx].data()[flat] as f64;
            let rel = (analytic - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(rel);
            assert!(
                rel < 1e-4,
                "tensor {tensor_idx} idx {flat}: analytic {analytic} fd {fd} rel {rel}"
            );
        }
    }
    println!("two-conv gradcheck worst relative error: {worst:.3e}");
}

#[test]
fn activation_gradient_of_unused_channel_is_zero() {
    // Zero out every downstream consumer slice of channel (0, 1): its
    // activation gradient must vanish identically.
    let net = pinned_two_layer_net();
    let mut store = WeightStore::init(&net, 5).unwrap();
    let c = ChannelId { layer: 0, channel: 1 };
    let pset = channel_param_set(&net, &store, c).unwrap();
    for slice in &pset.slices[2..] {
        let data = store.tensor_mut(slice.tensor).data_mut();
        for v in &mut data[slice.range.clone()] {
            *v = 0.0;
        }
    }
    let mut rng = seeded_rng(6);
    let batch = random_batch(&net, 2, &mut rng);
    let plan = Plan::new(&net).unwrap();
    let counter = PassCounter::new();
    let record = forward(&plan, &store, &batch, &counter).unwrap();
    let grads = backward(&plan, &store, &record).unwrap();
    let g = grads.channel_grads(c).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
    // A channel that still feeds the loss has nonzero gradient somewhere.
    let other = grads.channel_grads(ChannelId { layer: 0, channel: 0 }).unwrap();
    assert!(other.data().iter().any(|&v| v != 0.0));
}

/// Build a structurally smaller network with channel `c` removed, copying
/// all surviving weights, and return it with its store.
fn shrink_channel(
    net: &NetworkDef,
    store: &WeightStore,
    c: ChannelId,
) -> (NetworkDef, WeightStore) {
    let mut small = net.clone();
    let LayerSpec::Conv { out_channels, .. } = &mut small.layers[c.layer] else {
        panic!("only conv channels shrink");
    };
    *out_channels -= 1;
    let mut small_store = WeightStore::zeros(&small).unwrap();

    let shapes = net.layer_shapes().unwrap();
    for (entry_idx, entry) in store.entries().iter().enumerate() {
        let src_w = store.tensor(entry.weight).data();
        let src_b = store.tensor(entry.bias).data();
        let small_entry = small_store.entries()[entry_idx];
        if entry.layer == c.layer {
            // Drop filter c.
            let filter_len: usize = store.tensor(entry.weight).shape()[1..].iter().product();
            let mut w = Vec::with_capacity(src_w.len() - filter_len);
            let mut b = Vec::with_capacity(src_b.len() - 1);
            let out_ch = store.tensor(entry.weight).shape()[0];
            for f in 0..out_ch {
                if f == c.channel {
                    continue;
                }
                w.extend_from_slice(&src_w[f * filter_len..(f + 1) * filter_len]);
                b.push(src_b[f]);
            }
            small_store
                .tensor_mut(small_entry.weight)
                .data_mut()
                .copy_from_slice(&w);
            small_store
                .tensor_mut(small_entry.bias)
                .data_mut()
                .copy_from_slice(&b);
            continue;
        }
        // Is this entry the consumer of layer c?
        let consumer = net.layers[c.layer + 1..]
            .iter()
            .enumerate()
            .find(|(_, l)| matches!(l, LayerSpec::Conv { .. } | LayerSpec::Dense { .. }))
            .map(|(off, _)| c.layer + 1 + off);
        if Some(entry.layer) == consumer {
            let mut w = Vec::new();
            match net.layers[entry.layer] {
                LayerSpec::Conv {
                    out_channels: f2,
                    kernel: k2,
                    ..
                } => {
                    let in_c = shapes[entry.layer].0;
                    let per_in = k2 * k2;
                    for f in 0..f2 {
                        for ci in 0..in_c {
                            if ci == c.channel {
                                continue;
                            }
                            let start = (f * in_c + ci) * per_in;
                            w.extend_from_slice(&src_w[start..start + per_in]);
                        }
                    }
                }
                LayerSpec::Dense { out } => {
                    let (in_c, h, wd) = shapes[entry.layer];
                    let hw = h * wd;
                    let in_features = in_c * hw;
                    for u in 0..out {
                        for ci in 0..in_c {
                            if ci == c.channel {
                                continue;
                            }
                            let start = u * in_features + ci * hw;
                            w.extend_from_slice(&src_w[start..start + hw]);
                        }
                    }
                }
                _ => unreachable!(),
            }
            small_store
                .tensor_mut(small_entry.weight)
                .data_mut()
                .copy_from_slice(&w);
            small_store
                .tensor_mut(small_entry.bias)
                .data_mut()
                .copy_from_slice(src_b);
            continue;
        }
        // Untouched layer: copy verbatim.
        small_store
            .tensor_mut(small_entry.weight)
            .data_mut()
            .copy_from_slice(src_w);
        small_store
            .tensor_mut(small_entry.bias)
            .data_mut()
            .copy_from_slice(src_b);
    }
    (small, small_store)
}

#[test]
fn zeroing_a_dead_channel_leaves_loss_bit_identical() {
    // A channel whose downstream slices are already zero contributes
    // nothing, so zeroing its own weights must not move the loss at all.
    let net = pinned_two_layer_net();
    let mut store = WeightStore::init(&net, 5).unwrap();
    let c = ChannelId { layer: 0, channel: 2 };
    let pset = channel_param_set(&net, &store, c).unwrap();
    for slice in &pset.slices[2..] {
        let data = store.tensor_mut(slice.tensor).data_mut();
        for v in &mut data[slice.range.clone()] {
            *v = 0.0;
        }
    }
    let mut rng = seeded_rng(31);
    let batch = random_batch(&net, 3, &mut rng);
    let plan = Plan::new(&net).unwrap();
    let counter = PassCounter::new();
    let before = forward(&plan, &store, &batch, &counter).unwrap().loss();
    zero_channel(&mut store, &pset);
    let after = forward(&plan, &store, &batch, &counter).unwrap().loss();
    assert_eq!(before.to_bits(), after.to_bits());
}

#[test]
fn zeroing_equals_structural_deletion() {
    let net = pinned_two_layer_net();
    let mut rng = seeded_rng(17);
    let plan = Plan::new(&net).unwrap();
    let counter = PassCounter::new();
    for c in prunelab_core::network::enumerate_channels(&net) {
        let store = WeightStore::init(&net, 23 + c.layer as u64 * 10 + c.channel as u64).unwrap();
        let batch = random_batch(&net, 3, &mut rng);

        let mut zeroed = store.clone();
        let pset = channel_param_set(&net, &zeroed, c).unwrap();
        zero_channel(&mut zeroed, &pset);
        let record = forward(&plan, &zeroed, &batch, &counter).unwrap();
        let zeroed_logits = record.logits().clone();

        let (small, small_store) = shrink_channel(&net, &store, c);
        let small_plan = Plan::new(&small).unwrap();
        let small_record = forward(&small_plan, &small_store, &batch, &counter).unwrap();
        let small_logits = small_record.logits();

        assert_eq!(zeroed_logits.shape(), small_logits.shape());
        for (a, b) in zeroed_logits.data().iter().zip(small_logits.data()) {
            assert!(
                (a - b).abs() < 1e-5,
                "channel {c}: zeroed {a} vs shrunk {b}"
            );
        }
    }
}

#[test]
fn batch_shape_mismatch_is_rejected() {
    let net = pinned_two_layer_net();
    let store = WeightStore::init(&net, 7).unwrap();
    let plan = Plan::new(&net).unwrap();
    let counter = PassCounter::new();
    let batch = Batch {
        images: Tensor::zeros(vec![2, 1, 5, 5]),
        labels: vec![0, 1],
    };
    let err = forward(&plan, &store, &batch, &counter).unwrap_err();
    assert!(err.to_string().contains("[2, 1, 5, 5]"), "{err}");
}

// Exploratory margin probe for the randomized gradient check; kept
// ignored so a plain test run stays quiet. Run with:
// cargo test -p prunelab-core --test engine -- --ignored --nocapture
#[test]
#[ignore]
fn gradcheck_margin_probe() {
    let mut worst_overall = 0.0f64;
    let mut worst_fd = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = seeded_rng(1000 + seed);
        let net = random_net(&mut rng, 5000);
        let store = common::random_store(&net, 2000 + seed, &mut rng);
        let batch = random_batch(&net, 2, &mut rng);
        let plan = Plan::new(&net).unwrap();
        let counter = PassCounter::new();
        let record = forward(&plan, &store, &batch, &counter).unwrap();
        let grads = backward(&plan, &store, &record).unwrap();
        let mut worst = 0.0f64;
        let mut at = (0usize, 0usize, 0.0f64, 0.0f64);
        for (tensor_idx, tensor) in store.tensors().iter().enumerate() {
            for flat in 0..tensor.len() {
                let fd = reference_fd(&net, &store, &batch, tensor_idx, flat, 1e-5);
                let analytic = grads.weight_grads()[tensor_idx].data()[flat] as f64;
                let rel = (analytic - fd).abs() / (fd.abs() + 1e-8);
                if rel > worst {
                    worst = rel;
                    at = (tensor_idx, flat, analytic, fd);
                }
            }
        }
        println!(
            "net {seed}: params {} worst rel {worst:.3e} at tensor {} idx {} (analytic {:.6e}, fd {:.6e})",
            store.num_params(),
            at.0,
            at.1,
            at.2,
            at.3
        );
        if worst > worst_overall {
            worst_overall = worst;
            worst_fd = at.3;
        }
    }
    println!("overall worst: {worst_overall:.3e} (fd {worst_fd:.3e})");
}
