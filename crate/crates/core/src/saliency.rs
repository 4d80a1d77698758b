//! The five constituent saliency metrics, each mapping a channel to a
//! score where lower means "prune first".
//!
//! Per-channel element sums run over every activation element across all
//! spatial positions and all images of all validation batches before any
//! normalization or absolute value is applied; the normalizing count is
//! the element count of that aggregate. The weights entering the
//! mean-squared-weights score are the channel's own filter weights and
//! bias, not the downstream slices of its full parameter set.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ValidationSample;
use crate::error::{Error, Result};
use crate::graph::{self, Plan};
use crate::network::{channel_param_set, enumerate_channels, is_channel_nonzero, ChannelId, WeightStore};
use crate::tensor::PassCounter;

/// The constituent metrics, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    MeanSqWeights,
    MeanActivations,
    AvgGradients,
    Taylor1,
    Fisher2,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::MeanSqWeights,
        MetricKind::MeanActivations,
        MetricKind::AvgGradients,
        MetricKind::Taylor1,
        MetricKind::Fisher2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::MeanSqWeights => "mean-sq-weights",
            MetricKind::MeanActivations => "mean-activations",
            MetricKind::AvgGradients => "avg-gradients",
            MetricKind::Taylor1 => "taylor1",
            MetricKind::Fisher2 => "fisher2",
        }
    }

    /// Static metrics read only the weights; dynamic ones need forward
    /// (and possibly backward) passes over the validation sample.
    pub fn needs_forward(self) -> bool {
        self != MetricKind::MeanSqWeights
    }

    pub fn needs_backward(self) -> bool {
        matches!(
            self,
            MetricKind::AvgGradients | MetricKind::Taylor1 | MetricKind::Fisher2
        )
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown metric `{s}` (valid: mean-sq-weights, mean-activations, \
                     avg-gradients, taylor1, fisher2, composite)"
                ))
            })
    }
}

/// Per-channel scores of one metric over the currently unpruned channels.
#[derive(Debug, Clone)]
pub struct SaliencyVector {
    pub metric: MetricKind,
    pub scores: BTreeMap<ChannelId, f64>,
    /// Seed of the validation sample the scores were computed over.
    pub sample_seed: u64,
}

/// S = (1/n) * sum(w^2) over the channel's own weights and bias.
pub fn mean_sq_weights(weights: &[f32]) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    let sum: f64 = weights.iter().map(|&w| (w as f64) * (w as f64)).sum();
    sum / weights.len() as f64
}

/// S = (1/n) * sum(a).
pub fn mean_activations(acts: &[f32]) -> f64 {
    if acts.is_empty() {
        return 0.0;
    }
    let sum: f64 = acts.iter().map(|&a| a as f64).sum();
    sum / acts.len() as f64
}

/// S = (1/n) * |sum(dL/da)|.
pub fn avg_gradients(grads: &[f32]) -> f64 {
    if grads.is_empty() {
        return 0.0;
    }
    let sum: f64 = grads.iter().map(|&g| g as f64).sum();
    sum.abs() / grads.len() as f64
}

/// S = (1/n) * |sum(a * dL/da)|.
pub fn taylor_first(acts: &[f32], grads: &[f32]) -> f64 {
    assert_eq!(acts.len(), grads.len(), "activation/gradient length mismatch");
    if acts.is_empty() {
        return 0.0;
    }
    let sum: f64 = acts
        .iter()
        .zip(grads)
        .map(|(&a, &g)| a as f64 * g as f64)
        .sum();
    sum.abs() / acts.len() as f64
}

/// S = 1/2 * (sum(a * dL/da))^2; the grand-total sum is squared, not
/// per-example terms.
pub fn fisher_second(acts: &[f32], grads: &[f32]) -> f64 {
    assert_eq!(acts.len(), grads.len(), "activation/gradient length mismatch");
    let sum: f64 = acts
        .iter()
        .zip(grads)
        .map(|(&a, &g)| a as f64 * g as f64)
        .sum();
    0.5 * sum * sum
}

/// Running per-channel sums across validation batches.
#[derive(Debug, Clone, Copy, Default)]
struct ChannelStats {
    sum_a: f64,
    sum_g: f64,
    sum_ag: f64,
    count: u64,
}

impl ChannelStats {
    fn score(&self, metric: MetricKind) -> f64 {
        let n = self.count.max(1) as f64;
        match metric {
            MetricKind::MeanSqWeights => unreachable!("static metric"),
            MetricKind::MeanActivations => self.sum_a / n,
            MetricKind::AvgGradients => self.sum_g.abs() / n,
            MetricKind::Taylor1 => self.sum_ag.abs() / n,
            MetricKind::Fisher2 => 0.5 * self.sum_ag * self.sum_ag,
        }
    }
}

/// All five saliency vectors plus the mean validation loss, from one
/// shared forward/backward sweep over the sample.
#[derive(Debug, Clone)]
pub struct SaliencySweep {
    pub vectors: Vec<SaliencyVector>,
    /// Mean batch loss over the sample with the current weights; doubles
    /// as the base-loss term of sensitivity measurements.
    pub mean_loss: f64,
}

impl SaliencySweep {
    pub fn vector(&self, metric: MetricKind) -> &SaliencyVector {
        self.vectors
            .iter()
            .find(|v| v.metric == metric)
            .expect("sweep holds all metrics")
    }
}

/// Channels whose full parameter set is still nonzero, in (layer, channel)
/// order.
pub fn unpruned_channels(plan: &Plan, store: &WeightStore) -> Result<Vec<ChannelId>> {
    let mut out = Vec::new();
    for c in enumerate_channels(plan.net()) {
        let pset = channel_param_set(plan.net(), store, c)?;
        if is_channel_nonzero(store, &pset) {
            out.push(c);
        }
    }
    Ok(out)
}

/// Compute all five metrics over the unpruned channels using the fixed
/// validation sample: one forward and one backward pass per batch.
pub fn compute_all(
    plan: &Plan,
    store: &WeightStore,
    sample: &ValidationSample,
    counter: &PassCounter,
) -> Result<SaliencySweep> {
    let channels = unpruned_channels(plan, store)?;
    if channels.is_empty() {
        return Err(Error::Empty("unpruned channel set"));
    }
    let mut stats: BTreeMap<ChannelId, ChannelStats> =
        channels.iter().map(|&c| (c, ChannelStats::default())).collect();
    let mut loss_sum = 0.0f64;
    for batch in &sample.batches {
        let record = graph::forward(plan, store, batch, counter)?;
        loss_sum += record.loss();
        let grads = graph::backward(plan, store, &record)?;
        for (&c, st) in stats.iter_mut() {
            let acts = record
                .channel_activation_elems(c)
                .expect("enumerated channel has a recorded activation");
            let gs = grads
                .channel_grad_elems(c)
                .expect("enumerated channel has a recorded gradient");
            for (a, g) in acts.zip(gs) {
                let (a, g) = (a as f64, g as f64);
                st.sum_a += a;
                st.sum_g += g;
                st.sum_ag += a * g;
                st.count += 1;
            }
        }
    }
    let mean_loss = loss_sum / sample.batches.len() as f64;

    let mut vectors = Vec::with_capacity(MetricKind::ALL.len());
    for metric in MetricKind::ALL {
        let mut scores = BTreeMap::new();
        for &c in &channels {
            let score = if metric == MetricKind::MeanSqWeights {
                own_weights_score(plan, store, c)?
            } else {
                stats[&c].score(metric)
            };
            scores.insert(c, score);
        }
        vectors.push(SaliencyVector {
            metric,
            scores,
            sample_seed: sample.seed,
        });
    }
    Ok(SaliencySweep { vectors, mean_loss })
}

/// Compute a single metric, performing only the passes it needs: none for
/// the static weights metric, forward-only for mean activations, forward
/// plus backward for the gradient-based metrics.
pub fn compute(
    metric: MetricKind,
    plan: &Plan,
    store: &WeightStore,
    sample: &ValidationSample,
    counter: &PassCounter,
) -> Result<SaliencyVector> {
    let channels = unpruned_channels(plan, store)?;
    if channels.is_empty() {
        return Err(Error::Empty("unpruned channel set"));
    }
    let mut scores = BTreeMap::new();
    match metric {
        MetricKind::MeanSqWeights => {
            for &c in &channels {
                scores.insert(c, own_weights_score(plan, store, c)?);
            }
        }
        MetricKind::MeanActivations => {
            let mut stats: BTreeMap<ChannelId, ChannelStats> =
                channels.iter().map(|&c| (c, ChannelStats::default())).collect();
            for batch in &sample.batches {
                let record = graph::forward(plan, store, batch, counter)?;
                for (&c, st) in stats.iter_mut() {
                    for a in record.channel_activation_elems(c).expect("recorded") {
                        st.sum_a += a as f64;
                        st.count += 1;
                    }
                }
            }
            for &c in &channels {
                scores.insert(c, stats[&c].score(metric));
            }
        }
        _ => {
            let mut stats: BTreeMap<ChannelId, ChannelStats> =
                channels.iter().map(|&c| (c, ChannelStats::default())).collect();
            for batch in &sample.batches {
                let record = graph::forward(plan, store, batch, counter)?;
                let grads = graph::backward(plan, store, &record)?;
                for (&c, st) in stats.iter_mut() {
                    let acts = record.channel_activation_elems(c).expect("recorded");
                    let gs = grads.channel_grad_elems(c).expect("recorded");
                    for (a, g) in acts.zip(gs) {
                        let (a, g) = (a as f64, g as f64);
                        st.sum_a += a;
                        st.sum_g += g;
                        st.sum_ag += a * g;
                        st.count += 1;
                    }
                }
            }
            for &c in &channels {
                scores.insert(c, stats[&c].score(metric));
            }
        }
    }
    Ok(SaliencyVector {
        metric,
        scores,
        sample_seed: sample.seed,
    })
}

fn own_weights_score(plan: &Plan, store: &WeightStore, c: ChannelId) -> Result<f64> {
    let pset = channel_param_set(plan.net(), store, c)?;
    // Slices 0 and 1 are the channel's own filter weights and bias.
    let mut own: Vec<f32> = Vec::new();
    for slice in &pset.slices[..2] {
        own.extend_from_slice(&store.tensor(slice.tensor).data()[slice.range.clone()]);
    }
    Ok(mean_sq_weights(&own))
}

/// Stable ascending sort of the scored channels; ties resolve to the
/// lower (layer, channel). Already-pruned channels never appear because
/// the score map only covers unpruned channels.
pub fn rank_channels(sal: &SaliencyVector) -> Vec<ChannelId> {
    let mut order: Vec<(ChannelId, f64)> =
        sal.scores.iter().map(|(&c, &s)| (c, s)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1));
    order.into_iter().map(|(c, _)| c).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_names_round_trip() {
        for m in MetricKind::ALL {
            assert_eq!(m.name().parse::<MetricKind>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("bogus".parse::<MetricKind>().is_err());
    }

    #[test]
    fn mean_sq_weights_hand_examples() {
        assert_eq!(mean_sq_weights(&[0.0, 0.0]), 0.0);
        assert_eq!(mean_sq_weights(&[1.0, 2.0, 2.0]), 3.0);
        assert_eq!(mean_sq_weights(&[-3.0]), 9.0);
    }

    #[test]
    fn mean_activations_hand_examples() {
        assert_eq!(mean_activations(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(mean_activations(&[1.0, 2.0, 3.0, 6.0]), 3.0);
        let base = mean_activations(&[0.5, 1.5, 2.0]);
        let doubled = mean_activations(&[1.0, 3.0, 4.0]);
        assert_eq!(doubled, 2.0 * base);
    }

    #[test]
    fn avg_gradients_hand_examples() {
        assert_eq!(avg_gradients(&[1.0, -1.0]), 0.0);
        assert_eq!(avg_gradients(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(avg_gradients(&[-2.0, -2.0]), 2.0);
    }

    #[test]
    fn taylor_first_hand_examples() {
        assert_eq!(taylor_first(&[1.0, 1.0], &[1.0, -1.0]), 0.0);
        assert_eq!(taylor_first(&[2.0, 3.0], &[1.0, 1.0]), 2.5);
        assert_eq!(taylor_first(&[1.0], &[-4.0]), 4.0);
    }

    #[test]
    fn fisher_second_hand_examples() {
        assert_eq!(fisher_second(&[1.0, -1.0], &[1.0, 1.0]), 0.0);
        assert_eq!(fisher_second(&[1.0, 2.0], &[1.0, 1.0]), 4.5);
        assert_eq!(fisher_second(&[3.0], &[-1.0]), 4.5);
    }

    #[test]
    fn ranking_is_ascending_with_id_tie_break() {
        let mk = |layer, channel| ChannelId { layer, channel };
        let mut scores = BTreeMap::new();
        scores.insert(mk(0, 0), 0.5);
        scores.insert(mk(0, 1), 0.4);
        scores.insert(mk(0, 2), 0.9);
        scores.insert(mk(0, 3), 0.1);
        let sal = SaliencyVector {
            metric: MetricKind::MeanActivations,
            scores,
            sample_seed: 0,
        };
        assert_eq!(
            rank_channels(&sal),
            vec![mk(0, 3), mk(0, 1), mk(0, 0), mk(0, 2)]
        );

        // All tied: enumeration order.
        let mut tied = BTreeMap::new();
        for ch in 0..4 {
            tied.insert(mk(0, ch), 1.0);
        }
        let sal = SaliencyVector {
            metric: MetricKind::MeanActivations,
            scores: tied,
            sample_seed: 0,
        };
        assert_eq!(
            rank_channels(&sal),
            vec![mk(0, 0), mk(0, 1), mk(0, 2), mk(0, 3)]
        );
    }

    #[test]
    fn ranking_invariant_under_affine_transform() {
        let mk = |channel| ChannelId { layer: 0, channel };
        let raw = [0.7, 0.05, 3.0, 0.9, 0.2];
        let mut scores = BTreeMap::new();
        let mut mapped = BTreeMap::new();
        for (ch, &s) in raw.iter().enumerate() {
            scores.insert(mk(ch), s);
            mapped.insert(mk(ch), 2.0 * s + 7.0);
        }
        let a = SaliencyVector {
            metric: MetricKind::Taylor1,
            scores,
            sample_seed: 0,
        };
        let b = SaliencyVector {
            metric: MetricKind::Taylor1,
            scores: mapped,
            sample_seed: 0,
        };
        assert_eq!(rank_channels(&a), rank_channels(&b));
    }
}
