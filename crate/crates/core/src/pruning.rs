//! Iterative one-channel-at-a-time pruning with a test-accuracy stopping
//! rule, driven either by a single constituent metric or by the composite
//! oracle. No fine-tuning: the only weight mutation between steps is the
//! zeroing of the chosen channel's parameter set.

use std::collections::BTreeMap;
use std::io::Write;

use crate::data::{sample_validation, DatasetSplits, ValidationSample};
use crate::error::{Error, Result};
use crate::graph::{self, Plan};
use crate::network::{
    channel_param_set, conv_weight_stats, is_channel_nonzero, zero_channel, ChannelId,
    ChannelParamSet, NetworkDef, WeightStore,
};
use crate::oracle::{
    oracle_choose, select_candidates, sensitivity, AuditCandidate, AuditRecord, OracleConfig,
    SensitivityRecord,
};
use crate::saliency::{self, MetricKind};
use crate::tensor::PassCounter;
use crate::train::evaluate_top1;

/// What guides each pruning decision.
#[derive(Debug, Clone)]
pub enum SelectionRule {
    /// Global argmin of one metric's scores over the nonzero channels.
    Constituent(MetricKind),
    /// Full oracle pipeline: rank all constituents, gather k candidates
    /// round-robin, measure sensitivities, prune the least sensitive.
    Composite(OracleConfig),
}

impl SelectionRule {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionRule::Constituent(m) => m.name(),
            SelectionRule::Composite(_) => "composite",
        }
    }

    /// Oracle width, 0 for constituent rules (used in file names).
    pub fn k(&self) -> usize {
        match self {
            SelectionRule::Constituent(_) => 0,
            SelectionRule::Composite(cfg) => cfg.k,
        }
    }

    /// Parse a CLI metric name; `k` applies to `composite` only.
    pub fn parse(name: &str, k: usize) -> Result<Self> {
        if name == "composite" {
            Ok(SelectionRule::Composite(OracleConfig::with_k(k)))
        } else {
            Ok(SelectionRule::Constituent(name.parse()?))
        }
    }
}

#[derive(Debug, Clone)]
pub struct PruneConfig {
    pub rule: SelectionRule,
    /// Stop once test accuracy falls below the initial accuracy minus this.
    pub max_test_acc_drop: f64,
    /// Seed of the validation sample drawn for the run.
    pub seed: u64,
    pub val_images: usize,
    pub val_batch: usize,
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_test_acc_drop) {
            return Err(Error::Config(format!(
                "max_test_acc_drop must be in [0, 1], got {}",
                self.max_test_acc_drop
            )));
        }
        if let SelectionRule::Composite(cfg) = &self.rule {
            cfg.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub channel: ChannelId,
    pub winning_metric: MetricKind,
    pub conv_removed_pct: f64,
    pub test_top1: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Test accuracy fell below the configured threshold.
    Threshold,
    /// Every prunable channel was already zero.
    Exhausted,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Threshold => "threshold",
            StopReason::Exhausted => "exhausted",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PruneTrajectory {
    pub initial_test_acc: f64,
    pub steps: Vec<StepRecord>,
    pub stop_reason: StopReason,
}

/// Largest conv-weights-removed percentage among steps whose test accuracy
/// stayed within `drop` of the initial accuracy; 0 if the first step
/// already violates.
pub fn weights_removed_at_drop(traj: &PruneTrajectory, drop: f64) -> f64 {
    let floor = traj.initial_test_acc - drop;
    traj.steps
        .iter()
        .filter(|s| s.test_top1 >= floor)
        .map(|s| s.conv_removed_pct)
        .fold(0.0, f64::max)
}

/// The outcome of one pruning decision.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub channel: ChannelId,
    pub winning_metric: MetricKind,
    /// Mean validation loss after the channel was zeroed.
    pub val_loss: f64,
    pub audit: Option<AuditRecord>,
}

/// Stepwise pruning driver owning the canonical weight store. The pass
/// counter tallies every validation forward pass a step performs;
/// test-set evaluation happens outside the session.
pub struct PruneSession {
    plan: Plan,
    store: WeightStore,
    rule: SelectionRule,
    sample: ValidationSample,
    counter: PassCounter,
    next_step: usize,
}

impl PruneSession {
    pub fn new(
        net: &NetworkDef,
        store: WeightStore,
        rule: SelectionRule,
        sample: ValidationSample,
    ) -> Result<Self> {
        if let SelectionRule::Composite(cfg) = &rule {
            cfg.validate()?;
        }
        Ok(PruneSession {
            plan: Plan::new(net)?,
            store,
            rule,
            sample,
            counter: PassCounter::new(),
            next_step: 0,
        })
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn store(&self) -> &WeightStore {
        &self.store
    }

    pub fn sample(&self) -> &ValidationSample {
        &self.sample
    }

    pub fn pass_counter(&self) -> &PassCounter {
        &self.counter
    }

    /// Channels whose parameter sets are still nonzero, with those sets.
    pub fn unpruned(&self) -> Result<Vec<(ChannelId, ChannelParamSet)>> {
        let mut out = Vec::new();
        for c in crate::network::enumerate_channels(self.plan.net()) {
            let pset = channel_param_set(self.plan.net(), &self.store, c)?;
            if is_channel_nonzero(&self.store, &pset) {
                out.push((c, pset));
            }
        }
        Ok(out)
    }

    /// Choose and zero one channel. Returns `None` once every prunable
    /// channel is exhausted.
    pub fn prune_step(&mut self) -> Result<Option<StepOutcome>> {
        let unpruned = self.unpruned()?;
        if unpruned.is_empty() {
            return Ok(None);
        }
        let step = self.next_step;
        self.next_step += 1;

        let outcome = match self.rule.clone() {
            SelectionRule::Constituent(metric) => {
                let sal =
                    saliency::compute(metric, &self.plan, &self.store, &self.sample, &self.counter)?;
                // BTreeMap iteration is (layer, channel) order, so strict
                // less-than keeps the lowest id among ties.
                let (&winner, _) = sal
                    .scores
                    .iter()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .expect("nonempty scores");
                let pset = unpruned
                    .iter()
                    .find(|(c, _)| *c == winner)
                    .map(|(_, p)| p)
                    .expect("winner is unpruned");
                zero_channel(&mut self.store, pset);
                let val_loss =
                    graph::mean_loss(&self.plan, &self.store, &self.sample.batches, &self.counter)?;
                StepOutcome {
                    channel: winner,
                    winning_metric: metric,
                    val_loss,
                    audit: None,
                }
            }
            SelectionRule::Composite(cfg) => {
                let sweep =
                    saliency::compute_all(&self.plan, &self.store, &self.sample, &self.counter)?;
                let base_loss = sweep.mean_loss;
                let rankings: BTreeMap<MetricKind, Vec<ChannelId>> = cfg
                    .constituents
                    .iter()
                    .map(|&m| (m, saliency::rank_channels(sweep.vector(m))))
                    .collect();
                let candidates = select_candidates(&rankings, &cfg)?;
                let mut records: Vec<SensitivityRecord> =
                    Vec::with_capacity(candidates.channels.len());
                for &c in &candidates.channels {
                    let pset = unpruned
                        .iter()
                        .find(|(ch, _)| *ch == c)
                        .map(|(_, p)| p)
                        .expect("candidates come from unpruned rankings");
                    records.push(sensitivity(
                        &self.plan,
                        &self.store,
                        pset,
                        &self.sample,
                        base_loss,
                        &self.counter,
                    )?);
                }
                let winner = oracle_choose(&candidates, &records)?;
                let winner_record = records
                    .iter()
                    .find(|r| r.channel == winner)
                    .expect("chosen candidate has a record");
                let val_loss = winner_record.base_loss + winner_record.delta_loss;
                let winning_metric = candidates.provenance[&winner];
                let audit = AuditRecord {
                    step,
                    base_loss,
                    candidates: candidates
                        .channels
                        .iter()
                        .map(|&c| AuditCandidate {
                            layer: c.layer,
                            channel: c.channel,
                            nominated_by: candidates.provenance[&c],
                            delta_loss: records
                                .iter()
                                .find(|r| r.channel == c)
                                .expect("record per candidate")
                                .delta_loss,
                        })
                        .collect(),
                    chosen: winner,
                };
                let pset = unpruned
                    .iter()
                    .find(|(ch, _)| *ch == winner)
                    .map(|(_, p)| p)
                    .expect("winner is unpruned");
                zero_channel(&mut self.store, pset);
                StepOutcome {
                    channel: winner,
                    winning_metric,
                    val_loss,
                    audit: Some(audit),
                }
            }
        };
        Ok(Some(outcome))
    }
}

/// Run the full do-until loop: recompute saliencies on the current
/// weights, prune one channel, measure full-test-set top-1; stop when the
/// accuracy drop exceeds the threshold (that violating step is recorded)
/// or when channels run out. Writes one audit line per composite step to
/// `audit` when given.
pub fn run_pruning(
    net: &NetworkDef,
    store: WeightStore,
    cfg: &PruneConfig,
    splits: &DatasetSplits,
    mut audit: Option<&mut dyn Write>,
) -> Result<PruneTrajectory> {
    cfg.validate()?;
    let sample = sample_validation(splits, cfg.val_images, cfg.val_batch, cfg.seed)?;
    let mut session = PruneSession::new(net, store, cfg.rule.clone(), sample)?;
    let initial_test_acc = evaluate_top1(&session.plan, &session.store, &splits.test)?;
    let floor = initial_test_acc - cfg.max_test_acc_drop;

    let mut steps = Vec::new();
    let stop_reason = loop {
        let Some(outcome) = session.prune_step()? else {
            break StopReason::Exhausted;
        };
        let stats = conv_weight_stats(&session.store);
        let test_top1 = evaluate_top1(&session.plan, &session.store, &splits.test)?;
        if let (Some(sink), Some(record)) = (audit.as_deref_mut(), outcome.audit.as_ref()) {
            serde_json::to_writer(&mut *sink, record).map_err(std::io::Error::from)?;
            sink.write_all(b"\n")?;
        }
        steps.push(StepRecord {
            step: steps.len(),
            channel: outcome.channel,
            winning_metric: outcome.winning_metric,
            conv_removed_pct: stats.removed_pct,
            test_top1,
            val_loss: outcome.val_loss,
        });
        if test_top1 < floor {
            break StopReason::Threshold;
        }
    };
    Ok(PruneTrajectory {
        initial_test_acc,
        steps,
        stop_reason,
    })
}

/// Render a trajectory as CSV with `# key = value` metadata comments.
/// Field formatting is fixed at six decimal places so identical runs
/// produce byte-identical files.
pub fn trajectory_to_csv(traj: &PruneTrajectory, metadata: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in metadata {
        out.push_str(&format!("# {k} = {v}\n"));
    }
    out.push_str(&format!("# initial_test_acc = {:.6}\n", traj.initial_test_acc));
    out.push_str(&format!("# stop_reason = {}\n", traj.stop_reason.as_str()));
    out.push_str("step,layer,channel,winning_metric,conv_removed_pct,test_top1,val_loss\n");
    for s in &traj.steps {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6}\n",
            s.step,
            s.channel.layer,
            s.channel.channel,
            s.winning_metric.name(),
            s.conv_removed_pct,
            s.test_top1,
            s.val_loss
        ));
    }
    out
}

/// Parse a trajectory CSV back into the trajectory and its metadata.
pub fn trajectory_from_csv(text: &str) -> Result<(PruneTrajectory, BTreeMap<String, String>)> {
    let mut metadata = BTreeMap::new();
    let mut steps = Vec::new();
    let mut saw_header = false;
    let bad = |detail: &str| Error::MalformedFile {
        path: "<trajectory csv>".into(),
        detail: detail.to_string(),
    };
    for line in text.lines() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                metadata.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        if !saw_header {
            if line != "step,layer,channel,winning_metric,conv_removed_pct,test_top1,val_loss" {
                return Err(bad(&format!("unexpected header: {line}")));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(bad(&format!("expected 7 fields, got {}", fields.len())));
        }
        let parse_num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s}")));
        steps.push(StepRecord {
            step: fields[0].parse().map_err(|_| bad("bad step index"))?,
            channel: ChannelId {
                layer: fields[1].parse().map_err(|_| bad("bad layer"))?,
                channel: fields[2].parse().map_err(|_| bad("bad channel"))?,
            },
            winning_metric: fields[3].parse()?,
            conv_removed_pct: parse_num(fields[4])?,
            test_top1: parse_num(fields[5])?,
            val_loss: parse_num(fields[6])?,
        });
    }
    let initial_test_acc = metadata
        .get("initial_test_acc")
        .ok_or_else(|| bad("missing initial_test_acc metadata"))?
        .parse::<f64>()
        .map_err(|_| bad("bad initial_test_acc"))?;
    let stop_reason = match metadata.get("stop_reason").map(String::as_str) {
        Some("threshold") => StopReason::Threshold,
        Some("exhausted") => StopReason::Exhausted,
        other => return Err(bad(&format!("bad stop_reason {other:?}"))),
    };
    Ok((
        PruneTrajectory {
            initial_test_acc,
            steps,
            stop_reason,
        },
        metadata,
    ))
}
