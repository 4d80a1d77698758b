//! The myopic oracle: round-robin candidate selection across constituent
//! rankings, direct sensitivity measurement, and selection of the channel
//! to prune.
//!
//! The oracle never consumes saliency values, only the channel orderings
//! they imply, so constituents of arbitrary scale compose cleanly. The
//! sensitivity of a candidate is the change in mean validation loss caused
//! by zeroing its full parameter set on a throwaway clone of the weights.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::data::ValidationSample;
use crate::error::{Error, Result};
use crate::graph::{self, Plan};
use crate::network::{zero_channel, ChannelId, ChannelParamSet, WeightStore};
use crate::saliency::MetricKind;
use crate::tensor::PassCounter;

#[derive(Debug, Clone)]
pub struct OracleConfig {
    /// How many channels the oracle measures per pruning step.
    pub k: usize,
    /// Constituent visiting order, fixed for a whole run.
    pub constituents: Vec<MetricKind>,
}

impl OracleConfig {
    /// All five constituents in table order; `k` defaults to the number of
    /// constituents elsewhere in the crate.
    pub fn with_k(k: usize) -> Self {
        OracleConfig {
            k,
            constituents: MetricKind::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("oracle k must be >= 1".into()));
        }
        if self.constituents.is_empty() {
            return Err(Error::Config("oracle needs at least one constituent".into()));
        }
        let unique: BTreeSet<_> = self.constituents.iter().collect();
        if unique.len() != self.constituents.len() {
            return Err(Error::Config("duplicate constituent metric".into()));
        }
        Ok(())
    }
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self::with_k(MetricKind::ALL.len())
    }
}

/// The channels nominated for sensitivity measurement in one step, with
/// the metric that nominated each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub channels: Vec<ChannelId>,
    pub provenance: BTreeMap<ChannelId, MetricKind>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }
}

/// Measured loss delta for one candidate channel.
#[derive(Debug, Clone, Serialize)]
pub struct SensitivityRecord {
    pub channel: ChannelId,
    /// Mean validation loss with the channel zeroed minus the base loss.
    pub delta_loss: f64,
    pub base_loss: f64,
}

/// Visit the constituents round-robin in config order; each visit
/// nominates the visitor's lowest-ranked channel not already selected.
/// Selection stops once `min(k, unpruned)` unique channels are gathered,
/// or when every ranking is exhausted.
pub fn select_candidates(
    rankings: &BTreeMap<MetricKind, Vec<ChannelId>>,
    cfg: &OracleConfig,
) -> Result<CandidateSet> {
    cfg.validate()?;
    if rankings.is_empty() || rankings.values().all(|r| r.is_empty()) {
        return Err(Error::Empty("constituent rankings"));
    }
    let mut universe: BTreeSet<ChannelId> = BTreeSet::new();
    for metric in &cfg.constituents {
        let ranking = rankings.get(metric).ok_or_else(|| {
            Error::Config(format!("no ranking supplied for constituent {metric}"))
        })?;
        universe.extend(ranking.iter().copied());
    }
    let target = cfg.k.min(universe.len());

    let mut channels = Vec::with_capacity(target);
    let mut provenance = BTreeMap::new();
    let mut taken: BTreeSet<ChannelId> = BTreeSet::new();
    let mut cursors: BTreeMap<MetricKind, usize> =
        cfg.constituents.iter().map(|&m| (m, 0usize)).collect();

    'gather: while channels.len() < target {
        let mut progressed = false;
        for &metric in &cfg.constituents {
            if channels.len() == target {
                break 'gather;
            }
            let ranking = &rankings[&metric];
            let cursor = cursors.get_mut(&metric).expect("cursor per constituent");
            while *cursor < ranking.len() && taken.contains(&ranking[*cursor]) {
                *cursor += 1;
            }
            if *cursor == ranking.len() {
                // Exhausted during duplicate skipping; this constituent
                // drops out of the rotation.
                continue;
            }
            let nominee = ranking[*cursor];
            *cursor += 1;
            taken.insert(nominee);
            channels.push(nominee);
            provenance.insert(nominee, metric);
            progressed = true;
        }
        if !progressed {
            break;
        }
    }
    Ok(CandidateSet {
        channels,
        provenance,
    })
}

/// Measure the sensitivity of one channel: zero its parameter set on a
/// clone of the weights, evaluate the mean loss over the sample (one
/// forward pass per batch), and subtract the shared base loss. The
/// canonical store is never touched.
pub fn sensitivity(
    plan: &Plan,
    store: &WeightStore,
    pset: &ChannelParamSet,
    sample: &ValidationSample,
    base_loss: f64,
    counter: &PassCounter,
) -> Result<SensitivityRecord> {
    let mut probe = store.clone();
    zero_channel(&mut probe, pset);
    let pruned_loss = graph::mean_loss(plan, &probe, &sample.batches, counter)?;
    Ok(SensitivityRecord {
        channel: pset.owner,
        delta_loss: pruned_loss - base_loss,
        base_loss,
    })
}

/// The candidate with the smallest measured loss delta; ties resolve to
/// the lower (layer, channel). Every candidate must have a record.
pub fn oracle_choose(
    candidates: &CandidateSet,
    records: &[SensitivityRecord],
) -> Result<ChannelId> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    let mut best: Option<(f64, ChannelId)> = None;
    for &c in &candidates.channels {
        let record = records
            .iter()
            .find(|r| r.channel == c)
            .ok_or(Error::MissingRecord {
                layer: c.layer,
                channel: c.channel,
            })?;
        let better = match best {
            None => true,
            Some((delta, ch)) => match record.delta_loss.total_cmp(&delta) {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Equal => c < ch,
                std::cmp::Ordering::Greater => false,
            },
        };
        if better {
            best = Some((record.delta_loss, c));
        }
    }
    Ok(best.expect("non-empty candidates").1)
}

/// Candidate-evaluation forward passes per pruning step: k * N_val. The
/// base-loss passes are accounted separately (N_val per step).
pub fn forward_pass_budget(cfg: &OracleConfig, n_val: usize) -> u64 {
    cfg.k as u64 * n_val as u64
}

/// One line of the per-step JSON-lines audit log.
#[derive(Debug, Clone, Serialize)]
pub struct AuditRecord {
    pub step: usize,
    pub base_loss: f64,
    pub candidates: Vec<AuditCandidate>,
    pub chosen: ChannelId,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditCandidate {
    pub layer: usize,
    pub channel: usize,
    pub nominated_by: MetricKind,
    pub delta_loss: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mk(channel: usize) -> ChannelId {
        ChannelId { layer: 0, channel }
    }

    fn rankings(lists: &[(MetricKind, &[usize])]) -> BTreeMap<MetricKind, Vec<ChannelId>> {
        lists
            .iter()
            .map(|&(m, chans)| (m, chans.iter().map(|&c| mk(c)).collect()))
            .collect()
    }

    #[test]
    fn round_robin_skips_duplicates() {
        let r = rankings(&[
            (MetricKind::MeanSqWeights, &[3, 0, 1, 2]),
            (MetricKind::MeanActivations, &[3, 1, 0, 2]),
            (MetricKind::AvgGradients, &[1, 2, 3, 0]),
        ]);
        let cfg = OracleConfig {
            k: 3,
            constituents: vec![
                MetricKind::MeanSqWeights,
                MetricKind::MeanActivations,
                MetricKind::AvgGradients,
            ],
        };
        let set = select_candidates(&r, &cfg).unwrap();
        assert_eq!(set.channels, vec![mk(3), mk(1), mk(2)]);
        assert_eq!(set.provenance[&mk(3)], MetricKind::MeanSqWeights);
        assert_eq!(set.provenance[&mk(1)], MetricKind::MeanActivations);
        assert_eq!(set.provenance[&mk(2)], MetricKind::AvgGradients);
    }

    #[test]
    fn k_of_one_takes_first_constituent_nominee() {
        let r = rankings(&[
            (MetricKind::Taylor1, &[2, 0, 1]),
            (MetricKind::Fisher2, &[0, 1, 2]),
        ]);
        let cfg = OracleConfig {
            k: 1,
            constituents: vec![MetricKind::Taylor1, MetricKind::Fisher2],
        };
        let set = select_candidates(&r, &cfg).unwrap();
        assert_eq!(set.channels, vec![mk(2)]);
        assert_eq!(set.provenance[&mk(2)], MetricKind::Taylor1);
    }

    #[test]
    fn identical_rankings_take_globally_lowest_k() {
        let r = rankings(&[
            (MetricKind::MeanSqWeights, &[4, 2, 0, 1, 3]),
            (MetricKind::MeanActivations, &[4, 2, 0, 1, 3]),
            (MetricKind::Taylor1, &[4, 2, 0, 1, 3]),
        ]);
        let cfg = OracleConfig {
            k: 3,
            constituents: vec![
                MetricKind::MeanSqWeights,
                MetricKind::MeanActivations,
                MetricKind::Taylor1,
            ],
        };
        let set = select_candidates(&r, &cfg).unwrap();
        assert_eq!(set.channels, vec![mk(4), mk(2), mk(0)]);
    }

    #[test]
    fn candidate_count_caps_at_unpruned_channels() {
        let r = rankings(&[(MetricKind::MeanSqWeights, &[1, 0])]);
        let cfg = OracleConfig {
            k: 10,
            constituents: vec![MetricKind::MeanSqWeights],
        };
        let set = select_candidates(&r, &cfg).unwrap();
        assert_eq!(set.channels, vec![mk(1), mk(0)]);
    }

    #[test]
    fn empty_rankings_are_rejected() {
        let r: BTreeMap<MetricKind, Vec<ChannelId>> = BTreeMap::new();
        assert!(select_candidates(&r, &OracleConfig::with_k(3)).is_err());
    }

    #[test]
    fn choose_takes_min_delta_with_id_tie_break() {
        let candidates = CandidateSet {
            channels: vec![mk(3), mk(1), mk(2)],
            provenance: [
                (mk(3), MetricKind::MeanSqWeights),
                (mk(1), MetricKind::MeanActivations),
                (mk(2), MetricKind::Taylor1),
            ]
            .into_iter()
            .collect(),
        };
        let rec = |channel: usize, delta: f64| SensitivityRecord {
            channel: mk(channel),
            delta_loss: delta,
            base_loss: 1.0,
        };
        let records = vec![rec(3, 0.02), rec(1, 0.00), rec(2, 0.10)];
        assert_eq!(oracle_choose(&candidates, &records).unwrap(), mk(1));

        let tied = vec![rec(3, 0.05), rec(1, 0.05), rec(2, 0.05)];
        assert_eq!(oracle_choose(&candidates, &tied).unwrap(), mk(1));

        let missing = vec![rec(3, 0.05), rec(1, 0.05)];
        assert!(matches!(
            oracle_choose(&candidates, &missing),
            Err(Error::MissingRecord { .. })
        ));
    }

    #[test]
    fn budget_is_k_times_batches() {
        assert_eq!(forward_pass_budget(&OracleConfig::with_k(8), 8), 64);
        assert_eq!(forward_pass_budget(&OracleConfig::with_k(1), 1), 1);
    }
}
