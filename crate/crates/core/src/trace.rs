//! Pruning traces, stored as JSON lines: a header record, one record per
//! committed iteration, and a closing stop record.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceIndex;
use crate::network::FilterRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ThresholdReached,
    BudgetExhausted,
    NoCandidates,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::ThresholdReached => "threshold_reached",
            StopReason::BudgetExhausted => "budget_exhausted",
            StopReason::NoCandidates => "no_candidates",
        }
    }
}

/// One committed prune.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneIteration {
    pub iteration: usize,
    /// In the original (uncompacted) network's indexing.
    pub pruned: FilterRef,
    pub score: f64,
    pub accuracy_before: f64,
    pub accuracy_after_prune: f64,
    pub accuracy_after_finetune: Option<f64>,
    pub params_remaining: usize,
}

impl PruneIteration {
    /// Accuracy the commit decision was made on.
    pub fn accuracy(&self) -> f64 {
        self.accuracy_after_finetune.unwrap_or(self.accuracy_after_prune)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneTrace {
    pub index: ImportanceIndex,
    pub baseline_accuracy: f64,
    pub baseline_correct: u64,
    pub eval_samples: u64,
    pub params_initial: usize,
    pub iterations: Vec<PruneIteration>,
    pub stop_reason: StopReason,
}

impl PruneTrace {
    pub fn final_accuracy(&self) -> f64 {
        self.iterations
            .last()
            .map_or(self.baseline_accuracy, PruneIteration::accuracy)
    }

    pub fn params_final(&self) -> usize {
        self.iterations
            .last()
            .map_or(self.params_initial, |it| it.params_remaining)
    }

    pub fn pruned(&self) -> impl Iterator<Item = FilterRef> + '_ {
        self.iterations.iter().map(|it| it.pruned)
    }

    /// Checks the bookkeeping invariants: strictly decreasing parameter
    /// counts and no filter pruned twice.
    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        let mut params = self.params_initial;
        for it in &self.iterations {
            if it.params_remaining >= params {
                return Err(Error::InconsistentTrace(format!(
                    "iteration {}: params_remaining {} does not decrease from {params}",
                    it.iteration, it.params_remaining
                )));
            }
            params = it.params_remaining;
            if !seen.insert(it.pruned) {
                return Err(Error::InconsistentTrace(format!("filter {} pruned twice", it.pruned)));
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let mut emit = |rec: &Record| -> Result<()> {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))
        };
        emit(&Record::Header {
            index: self.index,
            baseline_accuracy: self.baseline_accuracy,
            baseline_correct: self.baseline_correct,
            eval_samples: self.eval_samples,
            params_initial: self.params_initial,
        })?;
        for it in &self.iterations {
            emit(&Record::Iteration(it.clone()))?;
        }
        emit(&Record::Stop {
            stop_reason: self.stop_reason,
        })
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<PruneTrace> {
        let bad = |m: &str| Error::InconsistentTrace(m.to_string());
        let mut header = None;
        let mut iterations = Vec::new();
        let mut stop = None;
        for line in input.lines() {
            let line = line.map_err(|e| Error::io("<trace>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            if stop.is_some() {
                return Err(bad("records after stop record"));
            }
            match serde_json::from_str::<Record>(&line)? {
                Record::Header {
                    index,
                    baseline_accuracy,
                    baseline_correct,
                    eval_samples,
                    params_initial,
                } if header.is_none() => {
                    header = Some((index, baseline_accuracy, baseline_correct, eval_samples, params_initial))
                }
                Record::Iteration(it) if header.is_some() => iterations.push(it),
                Record::Stop { stop_reason } if header.is_some() => stop = Some(stop_reason),
                _ => return Err(bad("records out of order")),
            }
        }
        let (index, baseline_accuracy, baseline_correct, eval_samples, params_initial) =
            header.ok_or_else(|| bad("missing header record"))?;
        Ok(PruneTrace {
            index,
            baseline_accuracy,
            baseline_correct,
            eval_samples,
            params_initial,
            iterations,
            stop_reason: stop.ok_or_else(|| bad("missing stop record"))?,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header {
        index: ImportanceIndex,
        baseline_accuracy: f64,
        baseline_correct: u64,
        eval_samples: u64,
        params_initial: usize,
    },
    Iteration(PruneIteration),
    Stop {
        stop_reason: StopReason,
    },
}
