//! Triplet-level mean average precision.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{HoiSample, Split};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::scalar::Scalar;
use crate::types::{HoiTriplet, TripletClass};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Every class is scored over every image.
    #[default]
    Default,
    /// Each class is scored only over images whose annotations contain its object category.
    KnownObject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    /// Highest-scoring predictions kept per image.
    pub max_per_image: usize,
    pub num_verbs: usize,
    pub num_objects: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { iou_threshold: 0.5, max_per_image: 100, num_verbs: usize::MAX, num_objects: usize::MAX }
    }
}

/// True-positive flags for `preds` (in their given order). Predictions are
/// visited by descending score, ties in input order; each claims the
/// unmatched same-class ground truth with the largest min(IoU_h, IoU_o) at or
/// above `iou_threshold`.
pub fn match_predictions<T: Scalar>(preds: &[HoiTriplet<T>], gts: &[HoiTriplet<T>], iou_threshold: T) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap_or(std::cmp::Ordering::Equal));
    let mut taken = vec![false; gts.len()];
    let mut labels = vec![false; preds.len()];
    for i in order {
        let p = &preds[i];
        let mut best: Option<(usize, T)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class() != p.class() {
                continue;
            }
            let ov = iou(&p.human_box, &g.human_box).min(iou(&p.object_box, &g.object_box));
            if ov >= iou_threshold && best.is_none_or(|(_, b)| ov > b) {
                best = Some((j, ov));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            labels[i] = true;
        }
    }
    labels
}

/// All-point interpolated AP of a ranked TP/FP sequence. `None` when there
/// is neither ground truth nor a prediction.
pub fn average_precision(labels: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if labels.is_empty() { None } else { Some(0.0) };
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(labels.len());
    let mut precision = Vec::with_capacity(labels.len());
    for (k, &l) in labels.iter().enumerate() {
        tp += l as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: TripletClass,
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_pred: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionScores {
    pub full: Option<f64>,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
    pub unseen: Option<f64>,
    pub seen: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSizes {
    pub full: usize,
    pub rare: usize,
    pub non_rare: usize,
    pub unseen: usize,
    pub seen: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub per_class: Vec<ClassAp>,
    pub map: PartitionScores,
    /// Number of scored classes in each partition.
    pub sizes: PartitionSizes,
}

impl EvalReport {
    /// Human-readable summary.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "   -   ".to_string(), |x| format!("{:7.4}", x));
        let mut s = String::new();
        let _ = writeln!(s, "setting: {:?}", self.setting);
        let _ = writeln!(s, "{:<10} {:>7} {:>8}", "partition", "mAP", "classes");
        let rows = [
            ("full", self.map.full, self.sizes.full),
            ("rare", self.map.rare, self.sizes.rare),
            ("non_rare", self.map.non_rare, self.sizes.non_rare),
            ("unseen", self.map.unseen, self.sizes.unseen),
            ("seen", self.map.seen, self.sizes.seen),
        ];
        for (name, v, n) in rows {
            let _ = writeln!(s, "{:<10} {} {:>8}", name, fmt(v), n);
        }
        s
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Scores per-image predictions (aligned with `dataset`). The class universe
/// is the set of ground-truth classes of `dataset` plus `extra_classes`;
/// predictions of other classes are ignored. Rare/unseen membership comes
/// from `split`.
pub fn evaluate<T: Scalar>(
    preds: &[Vec<HoiTriplet<T>>],
    dataset: &[HoiSample<T>],
    split: &Split,
    setting: Setting,
    options: &EvalOptions,
    extra_classes: &BTreeSet<TripletClass>,
) -> Result<EvalReport> {
    if preds.len() != dataset.len() {
        return Err(Error::Shape(format!("{} prediction lists for {} images", preds.len(), dataset.len())));
    }
    for p in preds.iter().flatten() {
        if p.verb.0 >= options.num_verbs {
            return Err(Error::UnknownVerb(p.verb.to_string()));
        }
        if p.object_category.0 >= options.num_objects {
            return Err(Error::UnknownObject(format!("category {}", p.object_category.0)));
        }
    }
    let gts: Vec<Vec<HoiTriplet<T>>> = dataset.iter().map(|s| s.triplets()).collect();
    let capped: Vec<Vec<HoiTriplet<T>>> = preds
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
            p.truncate(options.max_per_image);
            p
        })
        .collect();
    let mut universe: BTreeSet<TripletClass> = gts.iter().flatten().map(|t| t.class()).collect();
    universe.extend(extra_classes.iter().copied());
    let threshold = T::of(options.iou_threshold);

    let per_class: Vec<ClassAp> = universe
        .par_iter()
        .map(|&class| {
            // (score, image, index within image, tp)
            let mut ranked: Vec<(T, usize, usize, bool)> = Vec::new();
            let mut n_gt = 0;
            for (img, (p, g)) in capped.iter().zip(&gts).enumerate() {
                if setting == Setting::KnownObject && !g.iter().any(|t| t.object_category == class.object) {
                    continue;
                }
                let p: Vec<HoiTriplet<T>> = p.iter().filter(|t| t.class() == class).cloned().collect();
                let g: Vec<HoiTriplet<T>> = g.iter().filter(|t| t.class() == class).cloned().collect();
                n_gt += g.len();
                let labels = match_predictions(&p, &g, threshold);
                ranked.extend(p.iter().zip(labels).enumerate().map(|(k, (t, l))| (t.score, img, k, l)));
            }
            ranked.sort_by(|a, b| {
                b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
            });
            let labels: Vec<bool> = ranked.iter().map(|r| r.3).collect();
            ClassAp { class, ap: average_precision(&labels, n_gt), n_gt, n_pred: labels.len() }
        })
        .collect();

    let scored = || per_class.iter().filter_map(|c| c.ap.map(|ap| (c.class, ap)));
    let part = |keep: &dyn Fn(&TripletClass) -> bool| {
        let members: Vec<f64> = scored().filter(|(c, _)| keep(c)).map(|(_, ap)| ap).collect();
        (mean(members.iter().copied()), members.len())
    };
    let zero_shot = split.mode.is_zero_shot();
    let (full, n_full) = part(&|_| true);
    let (rare, n_rare) = part(&|c| split.is_rare(c));
    let (non_rare, n_non_rare) = part(&|c| !split.is_rare(c));
    let (unseen, n_unseen) = part(&|c| zero_shot && split.is_unseen(c));
    let (seen, n_seen) = part(&|c| zero_shot && !split.is_unseen(c));
    Ok(EvalReport {
        setting,
        map: PartitionScores {
            full,
            rare,
            non_rare,
            unseen: if zero_shot { unseen } else { None },
            seen: if zero_shot { seen } else { None },
        },
        sizes: PartitionSizes { full: n_full, rare: n_rare, non_rare: n_non_rare, unseen: n_unseen, seen: n_seen },
        per_class,
    })
}

/// Ground truth re-emitted as predictions with unit score.
pub fn oracle_predictions<T: Scalar>(dataset: &[HoiSample<T>]) -> Vec<Vec<HoiTriplet<T>>> {
    dataset.iter().map(|s| s.triplets()).collect()
}
