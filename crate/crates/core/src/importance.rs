//! Filter importance: classification accuracy reduction (overall and per
//! class) and the mean-absolute-weight benchmark indexes.
//!
//! CAR of filter `i` in layer `L` is the accuracy of the network with the
//! already-applied mask minus its accuracy once `(L, i)` is masked too. All
//! counts are integers, so the per-class variant decomposes exactly:
//! `sum_c (n_c / N) * CAR^c(i, L) == CAR(i, L)`.

use std::cmp::Ordering;
use std::io::Write;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::{
    class_totals, map_chunks, tally, validated_dataset, zero_channels, FilterMask, FilterRef, Network,
};

/// Which importance index produced a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceIndex {
    Car,
    WeightIncoming,
    WeightOutgoing,
}

impl ImportanceIndex {
    pub fn name(self) -> &'static str {
        match self {
            ImportanceIndex::Car => "car",
            ImportanceIndex::WeightIncoming => "weight_incoming",
            ImportanceIndex::WeightOutgoing => "weight_outgoing",
        }
    }
}

/// Direction of the weight-magnitude benchmark index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightDirection {
    Incoming,
    Outgoing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterScore {
    pub filter: FilterRef,
    pub score: f64,
    /// Baseline correct count minus masked correct count; CAR tables only.
    pub delta_correct: Option<i64>,
}

/// Importance scores for the candidate filters of one conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarTable {
    pub layer: usize,
    pub index: ImportanceIndex,
    /// Accuracy under the already-applied mask (CAR tables only).
    pub baseline_accuracy: Option<f64>,
    pub baseline_correct: Option<u64>,
    pub sample_count: Option<u64>,
    /// Sorted by filter index.
    pub scores: Vec<FilterScore>,
}

impl CarTable {
    pub fn get(&self, filter: usize) -> Option<&FilterScore> {
        self.scores.iter().find(|s| s.filter.filter == filter)
    }
}

/// Per-class CAR for every candidate filter of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCarTable {
    pub layer: usize,
    pub class_names: Vec<String>,
    /// `n_c` for every class.
    pub class_totals: Vec<u64>,
    pub baseline_correct: Vec<u64>,
    pub rows: Vec<ClassCarRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassCarRow {
    pub filter: FilterRef,
    /// Correct counts per class with the filter masked.
    pub masked_correct: Vec<u64>,
    /// `CAR^c`, or `None` for classes with no samples.
    pub class_scores: Vec<Option<f64>>,
    /// Overall CAR from the same counts.
    pub score: f64,
    pub delta_correct: i64,
}

impl ClassCarTable {
    pub fn sample_count(&self) -> u64 {
        self.class_totals.iter().sum()
    }

    /// `n_c / N` per class.
    pub fn class_weights(&self) -> Vec<f64> {
        let n = self.sample_count() as f64;
        self.class_totals.iter().map(|&c| c as f64 / n).collect()
    }

    pub fn row(&self, filter: FilterRef) -> Result<&ClassCarRow> {
        self.rows
            .iter()
            .find(|r| r.filter == filter)
            .ok_or(Error::MissingFilter(filter))
    }

    /// `CAR^c` of one class as an exact fraction.
    pub fn class_score_exact(&self, row: &ClassCarRow, class: usize) -> Option<Ratio<i128>> {
        let n = self.class_totals[class] as i128;
        (n > 0).then(|| {
            Ratio::new(
                self.baseline_correct[class] as i128 - row.masked_correct[class] as i128,
                n,
            )
        })
    }

    /// `sum_c (n_c / N) * CAR^c` in exact rational arithmetic.
    pub fn weighted_class_sum_exact(&self, row: &ClassCarRow) -> Ratio<i128> {
        let n = self.sample_count() as i128;
        (0..self.class_totals.len())
            .filter_map(|c| {
                self.class_score_exact(row, c)
                    .map(|car_c| Ratio::new(self.class_totals[c] as i128, n) * car_c)
            })
            .sum()
    }

    /// Overall CAR of a row as an exact fraction.
    pub fn score_exact(&self, row: &ClassCarRow) -> Ratio<i128> {
        Ratio::new(row.delta_correct as i128, self.sample_count() as i128)
    }

    /// The overall CAR table implied by the same counts.
    pub fn to_car_table(&self) -> CarTable {
        let base: u64 = self.baseline_correct.iter().sum();
        let n = self.sample_count();
        CarTable {
            layer: self.layer,
            index: ImportanceIndex::Car,
            baseline_accuracy: Some(base as f64 / n as f64),
            baseline_correct: Some(base),
            sample_count: Some(n),
            scores: self
                .rows
                .iter()
                .map(|r| FilterScore {
                    filter: r.filter,
                    score: r.score,
                    delta_correct: Some(r.delta_correct),
                })
                .collect(),
        }
    }
}

/// Baseline and per-candidate per-class correct counts.
struct MaskedCounts {
    candidates: Vec<usize>,
    baseline: Vec<u64>,
    masked: Vec<Vec<u64>>,
    totals: Vec<u64>,
}

/// Runs the baseline once and every single-filter extension of `applied`.
///
/// The prefix up to and including the scored conv layer is shared; each
/// candidate only re-runs the layers after it with one more channel zeroed,
/// which is exactly the masked forward pass.
fn masked_counts(net: &Network, data: &LabeledDataset, layer: usize, applied: &FilterMask) -> Result<MaskedCounts> {
    let filters = net.filter_count(layer)?;
    applied.validate(net)?;
    validated_dataset(net, data)?;
    let candidates: Vec<usize> = (0..filters)
        .filter(|&i| !applied.contains(&FilterRef::new(layer, i)))
        .collect();
    let k = net.class_count();
    let tail = net.logits_range_from(layer + 1);

    let parts = map_chunks(data.len(), |r| {
        let labels = &data.labels()[r.clone()];
        let x = data.images().slice_batch(r.start, r.end);
        let response = net.run(x, 0..layer + 1, applied)?;
        let base_logits = net.run(response.clone(), tail.clone(), applied)?;
        let mut base = vec![0u64; k];
        tally(&base_logits, labels, &mut base);
        let mut masked = Vec::with_capacity(candidates.len());
        for &i in &candidates {
            let mut y = response.clone();
            zero_channels(&mut y, &[i]);
            let logits = net.run(y, tail.clone(), applied)?;
            let mut correct = vec![0u64; k];
            tally(&logits, labels, &mut correct);
            masked.push(correct);
        }
        Ok((base, masked))
    })?;

    let mut baseline = vec![0u64; k];
    let mut masked = vec![vec![0u64; k]; candidates.len()];
    for (b, m) in parts {
        add_into(&mut baseline, &b);
        for (acc, part) in masked.iter_mut().zip(&m) {
            add_into(acc, part);
        }
    }
    Ok(MaskedCounts {
        candidates,
        baseline,
        masked,
        totals: class_totals(data, k),
    })
}

fn add_into(acc: &mut [u64], part: &[u64]) {
    for (a, p) in acc.iter_mut().zip(part) {
        *a += p;
    }
}

/// CAR of every filter in `layer` that is not already in `applied`.
pub fn car_scores(net: &Network, data: &LabeledDataset, layer: usize, applied: &FilterMask) -> Result<CarTable> {
    Ok(car_class_scores(net, data, layer, applied)?.to_car_table())
}

/// Per-class CAR of every filter in `layer` that is not already in `applied`.
pub fn car_class_scores(
    net: &Network,
    data: &LabeledDataset,
    layer: usize,
    applied: &FilterMask,
) -> Result<ClassCarTable> {
    let counts = masked_counts(net, data, layer, applied)?;
    let n: u64 = counts.totals.iter().sum();
    let base_total: u64 = counts.baseline.iter().sum();
    let rows = counts
        .candidates
        .iter()
        .zip(&counts.masked)
        .map(|(&i, masked)| {
            let masked_total: u64 = masked.iter().sum();
            let class_scores = (0..counts.totals.len())
                .map(|c| match counts.totals[c] {
                    0 => None,
                    nc => Some(counts.baseline[c] as f64 / nc as f64 - masked[c] as f64 / nc as f64),
                })
                .collect();
            ClassCarRow {
                filter: FilterRef::new(layer, i),
                masked_correct: masked.clone(),
                class_scores,
                score: base_total as f64 / n as f64 - masked_total as f64 / n as f64,
                delta_correct: base_total as i64 - masked_total as i64,
            }
        })
        .collect();
    Ok(ClassCarTable {
        layer,
        class_names: data.class_names().to_vec(),
        class_totals: counts.totals,
        baseline_correct: counts.baseline,
        rows,
    })
}

/// Mean absolute weight into (the filter's own kernel) or out of (successor
/// weights reading its channel) every filter of `layer`.
pub fn weight_importance(net: &Network, layer: usize, direction: WeightDirection) -> Result<CarTable> {
    let filters = net.filter_count(layer)?;
    let params = net.layer_params(layer).expect("conv params");
    let slab = params.weight.len() / filters;
    let mean_abs = |vals: &mut dyn Iterator<Item = f32>| {
        let (sum, count) = vals.fold((0.0f64, 0usize), |(s, c), v| (s + v.abs() as f64, c + 1));
        sum / count as f64
    };
    let mut scores = Vec::with_capacity(filters);
    for i in 0..filters {
        let score = match direction {
            WeightDirection::Incoming => mean_abs(&mut params.weight.data()[i * slab..(i + 1) * slab].iter().copied()),
            WeightDirection::Outgoing => {
                let (next, idx) = net.consumer_weights(FilterRef::new(layer, i))?;
                let w = net.layer_params(next).expect("successor params").weight.data();
                mean_abs(&mut idx.iter().map(|&j| w[j]))
            }
        };
        scores.push(FilterScore {
            filter: FilterRef::new(layer, i),
            score,
            delta_correct: None,
        });
    }
    Ok(CarTable {
        layer,
        index: match direction {
            WeightDirection::Incoming => ImportanceIndex::WeightIncoming,
            WeightDirection::Outgoing => ImportanceIndex::WeightOutgoing,
        },
        baseline_accuracy: None,
        baseline_correct: None,
        sample_count: None,
        scores,
    })
}

/// Orders filters from least to most important.
///
/// Exact integer correct-count deltas are compared when both sides carry one,
/// otherwise the float scores. Ties fall back to layer, then filter index.
pub fn rank_filters(scores: &[FilterScore]) -> Vec<FilterScore> {
    let mut ranked = scores.to_vec();
    ranked.sort_by(compare_scores);
    ranked
}

pub(crate) fn compare_scores(a: &FilterScore, b: &FilterScore) -> Ordering {
    let by_score = match (a.delta_correct, b.delta_correct) {
        (Some(x), Some(y)) => x.cmp(&y),
        _ => a.score.total_cmp(&b.score),
    };
    by_score.then(a.filter.cmp(&b.filter))
}

/// Writes `layer,filter,score,delta_correct` rows.
pub fn write_car_table<W: Write>(table: &CarTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "filter", "index", "score", "delta_correct"])?;
    for s in &table.scores {
        w.write_record([
            s.filter.layer.to_string(),
            s.filter.filter.to_string(),
            table.index.name().to_string(),
            s.score.to_string(),
            s.delta_correct.map(|d| d.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<car table>", e))?;
    Ok(())
}

/// Writes one row per filter with the overall CAR and one `CAR^c` column per
/// class; classes without samples are left empty.
pub fn write_class_car_table<W: Write>(table: &ClassCarTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "layer".to_string(),
        "filter".to_string(),
        "score".to_string(),
        "delta_correct".to_string(),
    ];
    header.extend(table.class_names.iter().map(|n| format!("car_{n}")));
    w.write_record(&header)?;
    for row in &table.rows {
        let mut rec = vec![
            row.filter.layer.to_string(),
            row.filter.filter.to_string(),
            row.score.to_string(),
            row.delta_correct.to_string(),
        ];
        rec.extend(
            row.class_scores
                .iter()
                .map(|s| s.map(|v| v.to_string()).unwrap_or_default()),
        );
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<class car table>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs(layer: usize, filter: usize, score: f64) -> FilterScore {
        FilterScore {
            filter: FilterRef::new(layer, filter),
            score,
            delta_correct: None,
        }
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        let ranked = rank_filters(&[fs(0, 0, 0.02), fs(0, 1, -0.01), fs(0, 2, 0.02)]);
        let order: Vec<usize> = ranked.iter().map(|s| s.filter.filter).collect();
        assert_eq!(order, vec![1, 0, 2]);
        assert_eq!(rank_filters(&[fs(3, 4, 1.0)]).len(), 1);
    }

    #[test]
    fn ranking_prefers_integer_deltas() {
        let mut a = fs(0, 1, 0.1 + 0.2);
        let mut b = fs(0, 0, 0.3);
        a.delta_correct = Some(3);
        b.delta_correct = Some(3);
        let order: Vec<usize> = rank_filters(&[a, b]).iter().map(|s| s.filter.filter).collect();
        assert_eq!(order, vec![0, 1]);
    }
}
