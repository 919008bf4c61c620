//! Greedy structural pruning: repeatedly remove the least important filter,
//! optionally fine-tune, and stop once accuracy leaves the allowed band.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::compact::{compact, compacted_parameter_count, compression_ratio, CompressionRatio};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::importance::{car_scores, rank_filters, weight_importance, FilterScore, ImportanceIndex, WeightDirection};
use crate::network::{evaluate, EvalResult, FilterMask, FilterRef, Network};
use crate::trace::{PruneIteration, PruneTrace, StopReason};
use crate::train::{train, SgdConfig};

/// Relative accuracy band used when none is given.
pub const DEFAULT_RHO: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum StopRule {
    /// Keep pruning while accuracy >= rho * uncompressed accuracy.
    RelativeAccuracy(f64),
    /// Prune exactly this many filters from every target layer.
    FilterBudget(usize),
    /// Prune until no candidate is left.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub target_layers: Vec<usize>,
    pub stop: StopRule,
    pub finetune: Option<SgdConfig>,
    pub index: ImportanceIndex,
    pub rescore_every_iteration: bool,
    /// Physically remove committed filters before the next fine-tune.
    pub compact_between_iterations: bool,
    pub seed: u64,
}

impl PruneConfig {
    pub fn new(target_layers: Vec<usize>) -> Self {
        Self {
            target_layers,
            stop: StopRule::RelativeAccuracy(DEFAULT_RHO),
            finetune: None,
            index: ImportanceIndex::Car,
            rescore_every_iteration: true,
            compact_between_iterations: false,
            seed: 0,
        }
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        if self.target_layers.is_empty() {
            return Err(Error::InvalidArgument("no target layers".into()));
        }
        for &l in &self.target_layers {
            let filters = net.filter_count(l)?;
            if let StopRule::FilterBudget(b) = self.stop {
                if b >= filters {
                    return Err(Error::InvalidArgument(format!(
                        "budget {b} must be below the {filters} filters of layer {l}"
                    )));
                }
            }
        }
        if let StopRule::RelativeAccuracy(rho) = self.stop {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::InvalidArgument(format!("rho {rho} must be in (0, 1]")));
            }
        }
        if let Some(ft) = &self.finetune {
            if ft.batch_size == 0 || ft.learning_rate.is_nan() || ft.learning_rate < 0.0 {
                return Err(Error::InvalidArgument(
                    "fine-tune needs batch size > 0 and lr >= 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// The pruned network (committed filters masked, or removed when compacting
/// between iterations), the mask in that network's indexing, and the trace.
#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub network: Network,
    pub mask: FilterMask,
    pub trace: PruneTrace,
}

impl PruneOutcome {
    /// The structurally compressed network.
    pub fn compacted(&self) -> Result<Network> {
        compact(&self.network, &self.mask)
    }
}

/// Scores the candidate filters of `layers` under `mask`.
pub fn score_layers(
    net: &Network,
    eval: &LabeledDataset,
    layers: &[usize],
    mask: &FilterMask,
    index: ImportanceIndex,
) -> Result<Vec<FilterScore>> {
    let mut all = Vec::new();
    for &l in layers {
        let table = match index {
            ImportanceIndex::Car => car_scores(net, eval, l, mask)?,
            ImportanceIndex::WeightIncoming => weight_importance(net, l, WeightDirection::Incoming)?,
            ImportanceIndex::WeightOutgoing => weight_importance(net, l, WeightDirection::Outgoing)?,
        };
        all.extend(table.scores.into_iter().filter(|s| !mask.contains(&s.filter)));
    }
    Ok(all)
}

fn meets(result: &EvalResult, rho: f64, baseline: &EvalResult) -> bool {
    result.correct() as f64 >= rho * baseline.correct() as f64
}

fn finetune_seed(seed: u64, iteration: usize) -> u64 {
    seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Current-to-original filter index map per conv layer.
struct Origins(BTreeMap<usize, Vec<usize>>);

impl Origins {
    fn new(net: &Network) -> Self {
        Origins(
            net.conv_layers()
                .into_iter()
                .map(|l| (l, (0..net.filter_count(l).unwrap()).collect()))
                .collect(),
        )
    }

    fn original(&self, r: FilterRef) -> FilterRef {
        FilterRef::new(r.layer, self.0[&r.layer][r.filter])
    }

    fn current(&self, r: FilterRef) -> Option<FilterRef> {
        self.0[&r.layer]
            .iter()
            .position(|&o| o == r.filter)
            .map(|i| FilterRef::new(r.layer, i))
    }

    fn remove(&mut self, mask: &FilterMask) {
        for (&layer, ids) in self.0.iter_mut() {
            let gone = mask.filters_in(layer);
            let mut i = 0;
            ids.retain(|_| {
                let keep = !gone.contains(&i);
                i += 1;
                keep
            });
        }
    }
}

/// Greedy prune loop.
///
/// Each iteration scores every remaining candidate in the target layers,
/// tentatively masks the least important one (see [`rank_filters`]),
/// optionally fine-tunes with the masked filters frozen, and re-evaluates on
/// `eval`. Under [`StopRule::RelativeAccuracy`] a step whose accuracy falls
/// below `rho` times the uncompressed accuracy is reverted and the loop ends,
/// so the returned network always satisfies the band. A layer never loses its
/// last filter.
pub fn greedy_prune(
    net: &Network,
    train_data: &LabeledDataset,
    eval: &LabeledDataset,
    cfg: &PruneConfig,
) -> Result<PruneOutcome> {
    cfg.validate(net)?;
    let baseline = evaluate(net, eval, &FilterMask::new())?;
    let mut current = net.clone();
    let mut mask = FilterMask::new();
    let mut origins = Origins::new(net);
    let mut pruned_in: BTreeMap<usize, usize> = cfg.target_layers.iter().map(|&l| (l, 0)).collect();
    let mut accuracy = baseline.clone();
    let mut iterations = Vec::new();
    let mut queue: Option<Vec<FilterScore>> = None;

    let stop_reason = loop {
        let open: Vec<usize> = cfg
            .target_layers
            .iter()
            .copied()
            .filter(|l| match cfg.stop {
                StopRule::FilterBudget(b) => pruned_in[l] < b,
                _ => true,
            })
            .collect();
        if open.is_empty() {
            break StopReason::BudgetExhausted;
        }
        let remaining = |net: &Network, mask: &FilterMask, layer: usize| {
            net.filter_count(layer).unwrap() - mask.filters_in(layer).len()
        };

        let choice = if cfg.rescore_every_iteration {
            let eligible: Vec<usize> = open
                .iter()
                .copied()
                .filter(|&l| remaining(&current, &mask, l) > 1)
                .collect();
            let scores = score_layers(&current, eval, &eligible, &mask, cfg.index)?;
            rank_filters(&scores).into_iter().next()
        } else {
            if queue.is_none() {
                let scores = score_layers(&current, eval, &cfg.target_layers, &mask, cfg.index)?;
                queue = Some(
                    rank_filters(&scores)
                        .into_iter()
                        .map(|s| FilterScore {
                            filter: origins.original(s.filter),
                            ..s
                        })
                        .collect(),
                );
            }
            queue.as_ref().unwrap().iter().find_map(|s| {
                let cur = origins.current(s.filter)?;
                (open.contains(&cur.layer) && !mask.contains(&cur) && remaining(&current, &mask, cur.layer) > 1).then(
                    || FilterScore {
                        filter: cur,
                        ..s.clone()
                    },
                )
            })
        };
        let Some(choice) = choice else {
            break StopReason::NoCandidates;
        };

        let snapshot = cfg.finetune.as_ref().map(|_| current.clone());
        mask.insert(choice.filter);
        let after_prune = evaluate(&current, eval, &mask)?;
        let mut after_finetune = None;
        if let Some(ft) = &cfg.finetune {
            train(
                &mut current,
                train_data,
                ft,
                &mask,
                finetune_seed(cfg.seed, iterations.len() + 1),
            )?;
            after_finetune = Some(evaluate(&current, eval, &mask)?);
        }
        let decided = after_finetune.clone().unwrap_or_else(|| after_prune.clone());
        if let StopRule::RelativeAccuracy(rho) = cfg.stop {
            if !meets(&decided, rho, &baseline) {
                mask.remove(&choice.filter);
                if let Some(s) = snapshot {
                    current = s;
                }
                break StopReason::ThresholdReached;
            }
        }

        let pruned = origins.original(choice.filter);
        *pruned_in.get_mut(&pruned.layer).expect("target layer") += 1;
        let params_remaining = compacted_parameter_count(&current, &mask)?;
        iterations.push(PruneIteration {
            iteration: iterations.len() + 1,
            pruned,
            score: choice.score,
            accuracy_before: accuracy.overall_accuracy,
            accuracy_after_prune: after_prune.overall_accuracy,
            accuracy_after_finetune: after_finetune.as_ref().map(|e| e.overall_accuracy),
            params_remaining,
        });
        accuracy = decided;
        if cfg.compact_between_iterations {
            current = compact(&current, &mask)?;
            origins.remove(&mask);
            mask = FilterMask::new();
        }
    };

    Ok(PruneOutcome {
        network: current,
        mask,
        trace: PruneTrace {
            index: cfg.index,
            baseline_accuracy: baseline.overall_accuracy,
            baseline_correct: baseline.correct(),
            eval_samples: baseline.total(),
            params_initial: net.parameter_count(),
            iterations,
            stop_reason,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneSummary {
    pub layer: usize,
    pub filters_before: usize,
    pub filters_after: usize,
    /// Original indices, in pruning order.
    pub pruned: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub index: ImportanceIndex,
    pub stop_reason: StopReason,
    pub baseline_accuracy: f64,
    pub final_accuracy: f64,
    pub filters_pruned: usize,
    pub pruned_in_order: Vec<FilterRef>,
    /// Baseline followed by the committed accuracy of every iteration.
    pub accuracy_trajectory: Vec<f64>,
    pub layers: Vec<LayerPruneSummary>,
    pub compression: CompressionRatio,
}

/// Summarizes a trace against the original and compacted networks, checking
/// that the three agree.
pub fn prune_report(trace: &PruneTrace, before: &Network, after: &Network) -> Result<PruneReport> {
    trace.check_invariants()?;
    if before.parameter_count() != trace.params_initial {
        return Err(Error::InconsistentTrace(format!(
            "trace starts from {} parameters, network has {}",
            trace.params_initial,
            before.parameter_count()
        )));
    }
    if after.parameter_count() != trace.params_final() {
        return Err(Error::InconsistentTrace(format!(
            "trace ends at {} parameters, compacted network has {}",
            trace.params_final(),
            after.parameter_count()
        )));
    }
    let compression = compression_ratio(before, after)
        .map_err(|e| Error::InconsistentTrace(format!("networks are not comparable: {e}")))?;
    let mut layers = Vec::new();
    for lr in &compression.layers {
        let pruned: Vec<usize> = trace
            .pruned()
            .filter(|r| r.layer == lr.layer)
            .map(|r| r.filter)
            .collect();
        if lr.filters_before - pruned.len() != lr.filters_after {
            return Err(Error::InconsistentTrace(format!(
                "layer {}: {} filters minus {} pruned is not {}",
                lr.layer,
                lr.filters_before,
                pruned.len(),
                lr.filters_after
            )));
        }
        if pruned.iter().any(|&f| f >= lr.filters_before) {
            return Err(Error::InconsistentTrace(format!(
                "layer {} pruned index out of range",
                lr.layer
            )));
        }
        layers.push(LayerPruneSummary {
            layer: lr.layer,
            filters_before: lr.filters_before,
            filters_after: lr.filters_after,
            pruned,
        });
    }
    if let Some(r) = trace.pruned().find(|r| before.filter_count(r.layer).is_err()) {
        return Err(Error::InconsistentTrace(format!("pruned {r} is not a conv filter")));
    }
    let mut accuracy_trajectory = vec![trace.baseline_accuracy];
    accuracy_trajectory.extend(trace.iterations.iter().map(PruneIteration::accuracy));
    Ok(PruneReport {
        index: trace.index,
        stop_reason: trace.stop_reason,
        baseline_accuracy: trace.baseline_accuracy,
        final_accuracy: trace.final_accuracy(),
        filters_pruned: trace.iterations.len(),
        pruned_in_order: trace.pruned().collect(),
        accuracy_trajectory,
        layers,
        compression,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub index: ImportanceIndex,
    pub filters_pruned: usize,
    pub baseline_accuracy: f64,
    pub final_accuracy: f64,
    pub params_remaining: usize,
    pub parameter_ratio: f64,
    pub pruned_in_order: Vec<FilterRef>,
}

/// Side-by-side outcome of pruning the same network with several indexes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub target_layers: Vec<usize>,
    pub budget: usize,
    pub rows: Vec<BenchRow>,
    /// Indexes ordered by final accuracy, best first; ties keep input order.
    pub ranking: Vec<ImportanceIndex>,
}

/// Runs [`greedy_prune`] once per index with the same filter budget.
pub fn benchmark_indexes(
    net: &Network,
    train_data: &LabeledDataset,
    eval: &LabeledDataset,
    base: &PruneConfig,
    budget: usize,
    indexes: &[ImportanceIndex],
) -> Result<BenchReport> {
    let mut rows = Vec::with_capacity(indexes.len());
    for &index in indexes {
        let cfg = PruneConfig {
            index,
            stop: StopRule::FilterBudget(budget),
            ..base.clone()
        };
        let out = greedy_prune(net, train_data, eval, &cfg)?;
        let compacted = out.compacted()?;
        rows.push(BenchRow {
            index,
            filters_pruned: out.trace.iterations.len(),
            baseline_accuracy: out.trace.baseline_accuracy,
            final_accuracy: out.trace.final_accuracy(),
            params_remaining: compacted.parameter_count(),
            parameter_ratio: compression_ratio(net, &compacted)?.parameter_ratio,
            pruned_in_order: out.trace.pruned().collect(),
        });
    }
    let mut order: Vec<&BenchRow> = rows.iter().collect();
    order.sort_by(|a, b| b.final_accuracy.total_cmp(&a.final_accuracy));
    let ranking = order.iter().map(|r| r.index).collect();
    Ok(BenchReport {
        target_layers: base.target_layers.clone(),
        budget,
        rows,
        ranking,
    })
}
