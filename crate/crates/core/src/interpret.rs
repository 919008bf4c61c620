//! Interpretation reports: top-activating input patches per filter,
//! per-class accuracy comparison between two networks, and class-label
//! readings of filters from per-class CAR.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::importance::ClassCarTable;
use crate::network::{evaluate, map_chunks, FilterMask, FilterRef, LayerSpec, Network};
use crate::tensor::Tensor;

/// Default number of patches per filter.
pub const DEFAULT_TOP_K: usize = 9;
/// Default number of classes on each side of a class interpretation.
pub const DEFAULT_TOP_CLASSES: usize = 5;
/// Per-class accuracy band for [`per_class_compare`], in percentage points.
pub const CLASS_BAND_PERCENT: u64 = 3;

/// Input-pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchHit {
    pub image_id: usize,
    pub y: usize,
    pub x: usize,
    pub activation: f32,
    pub rect: PixelBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub filter: FilterRef,
    /// Highest activation first; ties by image, row, column.
    pub hits: Vec<PatchHit>,
}

/// Receptive field of one response-map position, composed through every layer
/// up to and including a conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    pub jump_h: usize,
    pub jump_w: usize,
    pub size_h: usize,
    pub size_w: usize,
    /// Top-left corner of position (0, 0); negative when it starts in padding.
    pub start_h: i64,
    pub start_w: i64,
}

impl ReceptiveField {
    pub fn of(net: &Network, layer: usize) -> Result<Self> {
        net.filter_count(layer)?;
        let mut rf = ReceptiveField {
            jump_h: 1,
            jump_w: 1,
            size_h: 1,
            size_w: 1,
            start_h: 0,
            start_w: 0,
        };
        for spec in &net.layers()[..=layer] {
            let (kh, kw, stride, pad) = match *spec {
                LayerSpec::Conv2d {
                    kernel_h,
                    kernel_w,
                    stride,
                    pad,
                    ..
                } => (kernel_h, kernel_w, stride, pad),
                LayerSpec::MaxPool2d { window, stride } => (window, window, stride, 0),
                _ => continue,
            };
            rf.size_h += (kh - 1) * rf.jump_h;
            rf.size_w += (kw - 1) * rf.jump_w;
            rf.start_h -= (pad * rf.jump_h) as i64;
            rf.start_w -= (pad * rf.jump_w) as i64;
            rf.jump_h *= stride;
            rf.jump_w *= stride;
        }
        Ok(rf)
    }

    /// Box for response position `(y, x)`, clipped to an `height x width` image.
    pub fn rect(&self, y: usize, x: usize, height: usize, width: usize) -> PixelBox {
        let clip = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
        let y0 = self.start_h + (y * self.jump_h) as i64;
        let x0 = self.start_w + (x * self.jump_w) as i64;
        PixelBox {
            y0: clip(y0, height),
            x0: clip(x0, width),
            y1: clip(y0 + self.size_h as i64, height),
            x1: clip(x0 + self.size_w as i64, width),
        }
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    activation: f32,
    image: usize,
    y: usize,
    x: usize,
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    // `+ 0.0` folds -0.0 into 0.0 so the two compare equal.
    (b.activation + 0.0)
        .total_cmp(&(a.activation + 0.0))
        .then(a.image.cmp(&b.image))
        .then(a.y.cmp(&b.y))
        .then(a.x.cmp(&b.x))
}

fn keep_top(mut v: Vec<Candidate>, k: usize) -> Vec<Candidate> {
    if v.len() > k {
        v.select_nth_unstable_by(k - 1, candidate_order);
        v.truncate(k);
    }
    v.sort_unstable_by(candidate_order);
    v
}

/// The `k` strongest pre-activation responses of every filter in `layer`
/// over all images and positions. Asking for more than exist returns all.
pub fn top_patches(net: &Network, data: &LabeledDataset, layer: usize, k: usize) -> Result<Vec<PatchRecord>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let filters = net.filter_count(layer)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rf = ReceptiveField::of(net, layer)?;
    let none = FilterMask::new();
    let parts = map_chunks(data.len(), |r| {
        let response = net.conv_response(&data.images().slice_batch(r.start, r.end), layer, &none)?;
        let [b, f, h, w] = *response.shape() else {
            unreachable!("conv output is rank 4")
        };
        let v = response.data();
        Ok((0..f)
            .map(|fi| {
                let mut cands = Vec::with_capacity(b * h * w);
                for bi in 0..b {
                    let plane = &v[(bi * f + fi) * h * w..][..h * w];
                    for (p, &a) in plane.iter().enumerate() {
                        cands.push(Candidate {
                            activation: a,
                            image: r.start + bi,
                            y: p / w,
                            x: p % w,
                        });
                    }
                }
                keep_top(cands, k)
            })
            .collect::<Vec<_>>())
    })?;

    let (img_h, img_w) = (data.image_shape()[1], data.image_shape()[2]);
    let mut merged: Vec<Vec<Candidate>> = vec![Vec::new(); filters];
    for part in parts {
        for (acc, top) in merged.iter_mut().zip(part) {
            acc.extend(top);
        }
    }
    Ok(merged
        .into_iter()
        .enumerate()
        .map(|(fi, cands)| PatchRecord {
            filter: FilterRef::new(layer, fi),
            hits: keep_top(cands, k)
                .into_iter()
                .map(|c| PatchHit {
                    image_id: c.image,
                    y: c.y,
                    x: c.x,
                    activation: c.activation,
                    rect: rf.rect(c.y, c.x, img_h, img_w),
                })
                .collect(),
        })
        .collect())
}

/// Pixels of one hit's box, `C x (y1-y0) x (x1-x0)`.
pub fn crop_patch(data: &LabeledDataset, hit: &PatchHit) -> Result<Tensor> {
    let [c, h, w] = *data.image_shape() else {
        unreachable!("dataset images are rank 4")
    };
    let img = &data.images().data()[hit.image_id * c * h * w..][..c * h * w];
    let r = hit.rect;
    let mut out = Vec::with_capacity(c * (r.y1 - r.y0) * (r.x1 - r.x0));
    for ch in 0..c {
        for y in r.y0..r.y1 {
            out.extend_from_slice(&img[(ch * h + y) * w + r.x0..(ch * h + y) * w + r.x1]);
        }
    }
    Tensor::new(vec![c, r.y1 - r.y0, r.x1 - r.x0], out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPair {
    pub class: usize,
    pub name: String,
    pub total: u64,
    pub correct_a: u64,
    pub correct_b: u64,
    pub accuracy_a: Option<f64>,
    pub accuracy_b: Option<f64>,
}

impl ClassPair {
    /// `acc_b >= acc_a - band`, decided on integer counts.
    pub fn within_band(&self, band_percent: u64) -> bool {
        100 * self.correct_b + band_percent * self.total >= 100 * self.correct_a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassComparison {
    pub pairs: Vec<ClassPair>,
    pub band_percent: u64,
    /// Classes with at least one sample.
    pub classes_considered: usize,
    pub classes_within_band: usize,
    /// Fraction of considered classes whose B accuracy is at most the band below A's.
    pub summary_fraction: f64,
    pub overall_a: f64,
    pub overall_b: f64,
}

/// Per-class accuracy of two networks on the same data.
pub fn per_class_compare(net_a: &Network, net_b: &Network, data: &LabeledDataset) -> Result<ClassComparison> {
    if net_a.class_count() != net_b.class_count() {
        return Err(Error::InvalidArgument(format!(
            "class counts differ: {} vs {}",
            net_a.class_count(),
            net_b.class_count()
        )));
    }
    let a = evaluate(net_a, data, &FilterMask::new())?;
    let b = evaluate(net_b, data, &FilterMask::new())?;
    let pairs: Vec<ClassPair> = (0..net_a.class_count())
        .map(|c| ClassPair {
            class: c,
            name: data.class_names().get(c).cloned().unwrap_or_else(|| c.to_string()),
            total: a.per_class_total[c],
            correct_a: a.per_class_correct[c],
            correct_b: b.per_class_correct[c],
            accuracy_a: a.class_accuracy(c),
            accuracy_b: b.class_accuracy(c),
        })
        .collect();
    let considered: Vec<&ClassPair> = pairs.iter().filter(|p| p.total > 0).collect();
    let within = considered.iter().filter(|p| p.within_band(CLASS_BAND_PERCENT)).count();
    Ok(ClassComparison {
        band_percent: CLASS_BAND_PERCENT,
        classes_considered: considered.len(),
        classes_within_band: within,
        summary_fraction: within as f64 / considered.len() as f64,
        overall_a: a.overall_accuracy,
        overall_b: b.overall_accuracy,
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedClass {
    pub class: usize,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInterpretation {
    pub filter: FilterRef,
    /// Highest `CAR^c` first.
    pub top_classes: Vec<RankedClass>,
    /// Lowest `CAR^c` first.
    pub bottom_classes: Vec<RankedClass>,
}

/// The `t` classes that depend most and least on a filter.
///
/// Classes are ordered by `CAR^c` descending, ties by class index. When fewer
/// than `2t` classes have samples, the top list takes the first half (rounded
/// up) and the bottom list the rest, so the two never overlap.
pub fn class_interpretation(table: &ClassCarTable, filter: FilterRef, t: usize) -> Result<ClassInterpretation> {
    if t == 0 {
        return Err(Error::InvalidArgument("T must be at least 1".into()));
    }
    let row = table.row(filter)?;
    let mut ranked: Vec<RankedClass> = row
        .class_scores
        .iter()
        .enumerate()
        .filter_map(|(c, s)| {
            s.map(|score| RankedClass {
                class: c,
                name: table.class_names[c].clone(),
                score,
            })
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class.cmp(&b.class)));
    let m = ranked.len();
    let top_len = t.min(m.div_ceil(2));
    let bottom_len = t.min(m - top_len);
    let mut bottom = ranked.split_off(m - bottom_len);
    bottom.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.class.cmp(&b.class)));
    ranked.truncate(top_len);
    Ok(ClassInterpretation {
        filter,
        top_classes: ranked,
        bottom_classes: bottom,
    })
}

fn flush<W: Write>(mut w: csv::Writer<W>, what: &str) -> Result<()> {
    w.flush().map_err(|e| Error::io(what, e))
}

/// One row per hit: `layer,filter,rank,image_id,y,x,activation,y0,x0,y1,x1`.
pub fn write_patches<W: Write>(records: &[PatchRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "layer",
        "filter",
        "rank",
        "image_id",
        "y",
        "x",
        "activation",
        "y0",
        "x0",
        "y1",
        "x1",
    ])?;
    for rec in records {
        for (rank, h) in rec.hits.iter().enumerate() {
            w.write_record([
                rec.filter.layer.to_string(),
                rec.filter.filter.to_string(),
                (rank + 1).to_string(),
                h.image_id.to_string(),
                h.y.to_string(),
                h.x.to_string(),
                h.activation.to_string(),
                h.rect.y0.to_string(),
                h.rect.x0.to_string(),
                h.rect.y1.to_string(),
                h.rect.x1.to_string(),
            ])?;
        }
    }
    flush(w, "<patches>")
}

pub fn write_class_comparison<W: Write>(cmp: &ClassComparison, out: W) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "class",
        "name",
        "total",
        "correct_a",
        "correct_b",
        "accuracy_a",
        "accuracy_b",
        "within_band",
    ])?;
    for p in &cmp.pairs {
        w.write_record([
            p.class.to_string(),
            p.name.clone(),
            p.total.to_string(),
            p.correct_a.to_string(),
            p.correct_b.to_string(),
            opt(p.accuracy_a),
            opt(p.accuracy_b),
            (p.total > 0 && p.within_band(cmp.band_percent)).to_string(),
        ])?;
    }
    flush(w, "<class comparison>")
}

/// Rows `layer,filter,side,rank,class,name,car_c`.
pub fn write_class_interpretations<W: Write>(items: &[ClassInterpretation], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "filter", "side", "rank", "class", "name", "car_c"])?;
    for it in items {
        for (side, list) in [("top", &it.top_classes), ("bottom", &it.bottom_classes)] {
            for (rank, c) in list.iter().enumerate() {
                w.write_record([
                    it.filter.layer.to_string(),
                    it.filter.filter.to_string(),
                    side.to_string(),
                    (rank + 1).to_string(),
                    c.class.to_string(),
                    c.name.clone(),
                    c.score.to_string(),
                ])?;
            }
        }
    }
    flush(w, "<class interpretations>")
}
