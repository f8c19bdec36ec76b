//! Five-image, three-class evaluation fixture and a brute-force scorer that
//! shares no code with the evaluator.

#![allow(dead_code)]

use steerhoi::data::{Entity, HoiSample, Interaction};
use steerhoi::geometry::BoundingBox;
use steerhoi::types::{CategoryId, HoiTriplet, VerbId};

pub type B = [f64; 4];

/// (verb, object category) of the three classes.
pub const CLASSES: [(usize, usize); 3] = [(0, 1), (1, 1), (0, 2)];

pub struct Image {
    pub gts: Vec<(B, B, usize)>,
    pub preds: Vec<(B, B, usize, f64)>,
}

pub fn images() -> Vec<Image> {
    vec![
        Image {
            gts: vec![([10., 10., 30., 50.], [30., 30., 50., 50.], 0), ([10., 10., 30., 50.], [30., 30., 50., 50.], 1)],
            preds: vec![
                ([10., 10., 30., 50.], [30., 30., 50., 50.], 0, 0.9),
                ([10., 10., 30., 50.], [30., 30., 50., 50.], 1, 0.6),
                ([11., 11., 31., 51.], [31., 30., 51., 50.], 0, 0.8),
                ([10., 10., 30., 50.], [30., 30., 50., 50.], 2, 0.3),
            ],
        },
        Image {
            gts: vec![([50., 10., 70., 60.], [70., 40., 90., 60.], 2), ([5., 5., 25., 45.], [25., 25., 45., 45.], 0)],
            preds: vec![
                ([50., 10., 70., 60.], [70., 40., 90., 60.], 2, 0.85),
                ([20., 10., 40., 60.], [70., 40., 90., 60.], 2, 0.95),
                ([7., 6., 26., 47.], [26., 26., 46., 44.], 0, 0.4),
                ([5., 5., 25., 45.], [25., 25., 45., 45.], 1, 0.7),
            ],
        },
        Image {
            gts: vec![([0., 0., 20., 40.], [20., 20., 40., 40.], 1), ([60., 0., 80., 40.], [40., 20., 60., 40.], 1)],
            preds: vec![
                ([0., 0., 20., 40.], [20., 20., 40., 40.], 1, 0.5),
                ([60., 0., 80., 40.], [40., 20., 60., 40.], 1, 0.55),
                ([61., 1., 80., 41.], [41., 21., 60., 40.], 1, 0.45),
                ([0., 0., 20., 40.], [20., 20., 40., 40.], 0, 0.65),
            ],
        },
        Image {
            gts: vec![([10., 10., 30., 50.], [30., 10., 50., 30.], 2)],
            preds: vec![
                ([10., 10., 30., 50.], [30., 10., 50., 30.], 0, 0.99),
                ([10., 10., 30., 50.], [30., 10., 50., 30.], 2, 0.2),
            ],
        },
        Image {
            gts: vec![([40., 40., 60., 90.], [60., 60., 80., 80.], 0)],
            preds: vec![([40., 40., 60., 90.], [60., 60., 80., 80.], 2, 0.75)],
        },
    ]
}

fn bbox(b: B) -> BoundingBox<f64> {
    BoundingBox::from_f64(b).unwrap()
}

/// The fixture as dataset samples plus per-image predictions.
pub fn as_dataset() -> (Vec<HoiSample<f64>>, Vec<Vec<HoiTriplet<f64>>>) {
    let mut samples = Vec::new();
    let mut preds = Vec::new();
    for (i, img) in images().into_iter().enumerate() {
        let mut entities = Vec::new();
        let mut interactions = Vec::new();
        for (h, o, c) in &img.gts {
            let (verb, object) = CLASSES[*c];
            entities.push(Entity { bbox: bbox(*h), category: CategoryId::PERSON });
            entities.push(Entity { bbox: bbox(*o), category: CategoryId(object) });
            interactions.push(Interaction {
                human: entities.len() - 2,
                object: entities.len() - 1,
                verb: VerbId(verb),
            });
        }
        samples.push(HoiSample {
            image_id: format!("fixture_{i}"),
            width: 100.0,
            height: 100.0,
            entities,
            interactions,
            raster: None,
        });
        preds.push(
            img.preds
                .iter()
                .map(|(h, o, c, s)| {
                    let (verb, object) = CLASSES[*c];
                    HoiTriplet::new(bbox(*h), bbox(*o), CategoryId(object), VerbId(verb), *s).unwrap()
                })
                .collect(),
        );
    }
    (samples, preds)
}

fn area(b: B) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

fn overlap(a: B, b: B) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let i = w * h;
    i / (area(a) + area(b) - i)
}

/// Among all one-to-one matchings of `preds` (sorted by score) to `gts`, the
/// one whose TP sequence is lexicographically largest.
fn best_labels(preds: &[(B, B)], gts: &[(B, B)]) -> Vec<bool> {
    fn rec(
        k: usize,
        preds: &[(B, B)],
        gts: &[(B, B)],
        used: &mut Vec<bool>,
        cur: &mut Vec<bool>,
        best: &mut Option<Vec<bool>>,
    ) {
        if k == preds.len() {
            if best.as_ref().is_none_or(|b| &*cur > b) {
                *best = Some(cur.clone());
            }
            return;
        }
        for j in 0..gts.len() {
            let ok = overlap(preds[k].0, gts[j].0) >= 0.5 && overlap(preds[k].1, gts[j].1) >= 0.5;
            if !used[j] && ok {
                used[j] = true;
                cur.push(true);
                rec(k + 1, preds, gts, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
        cur.push(false);
        rec(k + 1, preds, gts, used, cur, best);
        cur.pop();
    }
    let mut best = None;
    rec(0, preds, gts, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);
    best.unwrap()
}

/// Per-class AP (None if the class has no GT and no predictions).
pub fn brute_force_ap(known_object: bool) -> Vec<Option<f64>> {
    let imgs = images();
    CLASSES
        .iter()
        .enumerate()
        .map(|(c, &(_, object))| {
            let mut scored: Vec<(f64, bool)> = Vec::new();
            let mut n_gt = 0;
            for img in &imgs {
                if known_object && !img.gts.iter().any(|g| CLASSES[g.2].1 == object) {
                    continue;
                }
                let gts: Vec<(B, B)> = img.gts.iter().filter(|g| g.2 == c).map(|g| (g.0, g.1)).collect();
                let mut ps: Vec<(B, B, f64)> = img.preds.iter().filter(|p| p.2 == c).map(|p| (p.0, p.1, p.3)).collect();
                ps.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
                let labels = best_labels(&ps.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), &gts);
                n_gt += gts.len();
                scored.extend(ps.iter().zip(labels).map(|(p, l)| (p.2, l)));
            }
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            if n_gt == 0 {
                return if scored.is_empty() { None } else { Some(0.0) };
            }
            // Each TP contributes 1/n_gt recall at the best precision from its rank on.
            let precision: Vec<f64> = scored
                .iter()
                .scan(0usize, |tp, (_, l)| {
                    *tp += *l as usize;
                    Some(*tp as f64)
                })
                .enumerate()
                .map(|(k, tp)| tp / (k + 1) as f64)
                .collect();
            let mut ap = 0.0;
            for (k, (_, l)) in scored.iter().enumerate() {
                if *l {
                    let envelope = precision[k..].iter().cloned().fold(0.0, f64::max);
                    ap += envelope / n_gt as f64;
                }
            }
            Some(ap)
        })
        .collect()
}
