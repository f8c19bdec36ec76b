//! Procedural scenes of coloured rectangles whose verbs follow from a
//! geometric rulebook.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::raster::Raster;
use crate::types::{CategoryId, TripletClass, VerbId};

use super::{Entity, HoiSample, Interaction};

pub fn default_synth_verbs() -> Vec<String> {
    ["sit on", "stand on", "ride", "hold", "carry", "push", "pull", "look at"].map(String::from).to_vec()
}

pub fn default_synth_objects() -> Vec<String> {
    ["person", "bench", "bicycle", "ball", "cup", "horse"].map(String::from).to_vec()
}

/// Spatial relation of an object box relative to a human box. Variants are
/// listed in the priority order used by [`relation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    /// Feet resting on the object's top edge.
    StandOn,
    /// Lower body sunk into the object's upper part.
    Seated,
    /// Small object at the side of the torso.
    Grip,
    /// Small object held in front of the torso.
    Hug,
    /// Low object adjacent on the right.
    PushSide,
    /// Low object adjacent on the left.
    PullSide,
    /// Separate object at eye level within a few body widths.
    Near,
    Other,
}

impl Relation {
    pub const ALL: [Relation; 8] = [
        Relation::StandOn,
        Relation::Seated,
        Relation::Grip,
        Relation::Hug,
        Relation::PushSide,
        Relation::PullSide,
        Relation::Near,
        Relation::Other,
    ];
}

fn overlap_1d(a1: f64, a2: f64, b1: f64, b2: f64) -> f64 {
    (a2.min(b2) - a1.max(b1)).max(0.0)
}

/// Classifies the object box `o` relative to the human box `h`
/// (`[x1, y1, x2, y2]`); the first matching relation wins.
pub fn relation(h: [f64; 4], o: [f64; 4]) -> Relation {
    let [hx1, hy1, hx2, hy2] = h;
    let [ox1, oy1, ox2, oy2] = o;
    let (hw, hh) = (hx2 - hx1, hy2 - hy1);
    let (ow, oh) = (ox2 - ox1, oy2 - oy1);
    let (hcx, hcy) = ((hx1 + hx2) / 2.0, (hy1 + hy2) / 2.0);
    let (ocx, ocy) = ((ox1 + ox2) / 2.0, (oy1 + oy2) / 2.0);
    let xov = overlap_1d(hx1, hx2, ox1, ox2);
    let inter = xov * overlap_1d(hy1, hy2, oy1, oy2);
    let hov = xov / hw.min(ow);
    let foot = hy2 - oy1;
    let small = ow * oh <= 0.5 * hw * hh;
    let dx = (ocx - hcx).abs();

    if hov >= 0.5 && foot.abs() <= 0.08 * hh && hy1 < oy1 {
        Relation::StandOn
    } else if hov >= 0.5 && foot > 0.08 * hh && foot <= 0.6 * hh && oy2 > hy2 && hy1 < oy1 {
        Relation::Seated
    } else if inter > 0.0
        && small
        && dx >= 0.25 * hw
        && dx <= 0.75 * hw
        && (hy1 + 0.35 * hh..=hy1 + 0.65 * hh).contains(&ocy)
    {
        Relation::Grip
    } else if inter > 0.0 && small && dx < 0.25 * hw && (hy1 + 0.25 * hh..=hy1 + 0.6 * hh).contains(&ocy) {
        Relation::Hug
    } else if ocx > hx2 && (-0.05 * hw..=0.3 * hw).contains(&(ox1 - hx2)) && ocy > hcy && ocy <= hy2 {
        Relation::PushSide
    } else if ocx < hx1 && (-0.05 * hw..=0.3 * hw).contains(&(hx1 - ox2)) && ocy > hcy && ocy <= hy2 {
        Relation::PullSide
    } else if inter == 0.0
        && {
            let gap = (ox1 - hx2).max(hx1 - ox2);
            gap > 0.3 * hw && gap <= 2.5 * hw
        }
        && (ocy - hcy).abs() <= 0.5 * hh
    {
        Relation::Near
    } else {
        Relation::Other
    }
}

/// Maps (relation, object category) to a verb or to an explicit
/// no-interaction; a missing entry is a gap.
#[derive(Clone, Debug, PartialEq)]
pub struct Rulebook {
    table: BTreeMap<(Relation, CategoryId), Option<VerbId>>,
}

impl Rulebook {
    pub fn empty() -> Self {
        Self { table: BTreeMap::new() }
    }

    /// The shipped book over [`default_synth_verbs`] and [`default_synth_objects`].
    pub fn standard() -> Self {
        use Relation::*;
        const SIT: usize = 0;
        const STAND: usize = 1;
        const RIDE: usize = 2;
        const HOLD: usize = 3;
        const CARRY: usize = 4;
        const PUSH: usize = 5;
        const PULL: usize = 6;
        const LOOK: usize = 7;
        // columns: bench, bicycle, ball, cup, horse
        let rows: [(Relation, [Option<usize>; 5]); 8] = [
            (StandOn, [Some(STAND), None, Some(STAND), None, Some(STAND)]),
            (Seated, [Some(SIT), Some(RIDE), Some(SIT), None, Some(RIDE)]),
            (Grip, [None, None, Some(HOLD), Some(HOLD), None]),
            (Hug, [None, None, Some(CARRY), Some(CARRY), None]),
            (PushSide, [Some(PUSH), Some(PUSH), Some(PUSH), Some(PUSH), None]),
            (PullSide, [Some(PULL), Some(PULL), None, None, Some(PULL)]),
            (Near, [Some(LOOK); 5]),
            (Other, [None; 5]),
        ];
        let mut book = Self::empty();
        for (rel, verbs) in rows {
            book.set(rel, CategoryId::PERSON, None);
            for (c, v) in verbs.into_iter().enumerate() {
                book.set(rel, CategoryId(c + 1), v.map(VerbId));
            }
        }
        book
    }

    pub fn set(&mut self, relation: Relation, category: CategoryId, verb: Option<VerbId>) {
        self.table.insert((relation, category), verb);
    }

    pub fn remove(&mut self, relation: Relation, category: CategoryId) {
        self.table.remove(&(relation, category));
    }

    pub fn lookup(&self, relation: Relation, category: CategoryId) -> Result<Option<VerbId>> {
        self.table
            .get(&(relation, category))
            .copied()
            .ok_or_else(|| Error::RulebookGap(format!("{relation:?} with category {}", category.0)))
    }

    /// Verb for the ordered pair (human box, object box of `category`).
    pub fn label(&self, h: [f64; 4], o: [f64; 4], category: CategoryId) -> Result<Option<VerbId>> {
        self.lookup(relation(h, o), category)
    }

    /// Relations that yield a verb for `category`.
    pub fn productive(&self, category: CategoryId) -> Vec<Relation> {
        Relation::ALL.into_iter().filter(|&r| matches!(self.lookup(r, category), Ok(Some(_)))).collect()
    }
}

impl Default for Rulebook {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_images: usize,
    pub seed: u64,
    pub image_px: f64,
    pub cells: usize,
    pub humans: (usize, usize),
    pub objects_per_human: (usize, usize),
    pub distractors: (usize, usize),
    /// Probability that a placed object is deliberately non-interacting.
    pub negative_rate: f64,
    /// Per-instance colour perturbation; never affects labels.
    pub appearance_jitter: f64,
    /// Classes never generated.
    pub holdout: Vec<TripletClass>,
    #[serde(skip)]
    pub rulebook: Rulebook,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 200,
            seed: 0,
            image_px: 96.0,
            cells: 24,
            humans: (1, 2),
            objects_per_human: (1, 2),
            distractors: (0, 1),
            negative_rate: 0.15,
            appearance_jitter: 0.08,
            holdout: Vec::new(),
            rulebook: Rulebook::standard(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(a, b): (usize, usize)| a <= b;
        if !(self.image_px > 0.0) || self.cells == 0 {
            return Err(Error::InvalidArgument("image size and raster cells must be positive".into()));
        }
        if self.humans.0 == 0
            || !range_ok(self.humans)
            || !range_ok(self.objects_per_human)
            || !range_ok(self.distractors)
        {
            return Err(Error::InvalidArgument("entity count ranges must be non-empty with at least one human".into()));
        }
        if !(0.0..=1.0).contains(&self.negative_rate) || !(self.appearance_jitter >= 0.0) {
            return Err(Error::InvalidArgument("negative_rate in [0,1], appearance_jitter >= 0".into()));
        }
        Ok(())
    }
}

const PERSON_SIZE: [(f64, f64); 2] = [(12.0, 20.0), (28.0, 40.0)];
/// (width range, height range) for bench, bicycle, ball, cup, horse.
const OBJECT_SIZE: [[(f64, f64); 2]; 5] = [
    [(24.0, 36.0), (12.0, 18.0)],
    [(20.0, 28.0), (14.0, 20.0)],
    [(6.0, 10.0), (6.0, 10.0)],
    [(5.0, 8.0), (6.0, 9.0)],
    [(28.0, 40.0), (20.0, 28.0)],
];
const PALETTE: [[f64; 3]; 6] = [
    [0.92, 0.76, 0.62],
    [0.55, 0.33, 0.18],
    [0.20, 0.42, 0.90],
    [0.95, 0.20, 0.20],
    [0.95, 0.92, 0.30],
    [0.62, 0.62, 0.66],
];
const TRIES: usize = 80;

fn object_size(rng: &mut ChaCha8Rng, category: CategoryId) -> (f64, f64) {
    let [(w0, w1), (h0, h1)] = OBJECT_SIZE[(category.0 - 1) % OBJECT_SIZE.len()];
    (rng.random_range(w0..=w1), rng.random_range(h0..=h1))
}

/// Proposes an object box that should realise `rel` relative to `h`.
fn propose(rng: &mut ChaCha8Rng, rel: Relation, h: [f64; 4], (ow, oh): (f64, f64), px: f64) -> [f64; 4] {
    let [hx1, hy1, hx2, hy2] = h;
    let (hw, hh) = (hx2 - hx1, hy2 - hy1);
    let hcx = (hx1 + hx2) / 2.0;
    let hcy = (hy1 + hy2) / 2.0;
    let centred = |cx: f64, cy: f64| [cx - ow / 2.0, cy - oh / 2.0, cx + ow / 2.0, cy + oh / 2.0];
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    match rel {
        Relation::StandOn => {
            let cx = hcx + rng.random_range(-0.2..=0.2) * ow.min(hw);
            let y1 = hy2 + rng.random_range(-0.05..=0.05) * hh;
            [cx - ow / 2.0, y1, cx + ow / 2.0, y1 + oh]
        }
        Relation::Seated => {
            let cx = hcx + rng.random_range(-0.2..=0.2) * ow.min(hw);
            let d = rng.random_range(0.12..=0.5) * hh;
            let y1 = hy2 - d.min(0.9 * oh);
            [cx - ow / 2.0, y1, cx + ow / 2.0, y1 + oh]
        }
        Relation::Grip => {
            centred(hcx + side * rng.random_range(0.3..=0.7) * hw, hy1 + rng.random_range(0.4..=0.6) * hh)
        }
        Relation::Hug => centred(hcx + rng.random_range(-0.2..=0.2) * hw, hy1 + rng.random_range(0.3..=0.55) * hh),
        Relation::PushSide => {
            let x1 = hx2 + rng.random_range(-0.03..=0.25) * hw;
            let cy = hcy + rng.random_range(0.1..=0.45) * hh;
            [x1, cy - oh / 2.0, x1 + ow, cy + oh / 2.0]
        }
        Relation::PullSide => {
            let x2 = hx1 - rng.random_range(-0.03..=0.25) * hw;
            let cy = hcy + rng.random_range(0.1..=0.45) * hh;
            [x2 - ow, cy - oh / 2.0, x2, cy + oh / 2.0]
        }
        Relation::Near => {
            let gap = rng.random_range(0.5..=2.0) * hw;
            let cy = hcy + rng.random_range(-0.3..=0.3) * hh;
            if side > 0.0 {
                [hx2 + gap, cy - oh / 2.0, hx2 + gap + ow, cy + oh / 2.0]
            } else {
                [hx1 - gap - ow, cy - oh / 2.0, hx1 - gap, cy + oh / 2.0]
            }
        }
        Relation::Other => {
            let x1 = rng.random_range(0.0..=(px - ow).max(0.0));
            let y1 = rng.random_range(0.0..=(px - oh).max(0.0));
            [x1, y1, x1 + ow, y1 + oh]
        }
    }
}

fn inside(b: [f64; 4], px: f64) -> bool {
    b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= px && b[3] <= px
}

fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inter = overlap_1d(a[0], a[2], b[0], b[2]) * overlap_1d(a[1], a[3], b[1], b[3]);
    let area = |x: [f64; 4]| (x[2] - x[0]) * (x[3] - x[1]);
    inter / (area(a) + area(b) - inter)
}

fn stream(seed: u64, index: usize, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 * 1024 + lane);
    rng
}

fn layout(config: &SynthConfig, index: usize, attempt: usize) -> Vec<(CategoryId, [f64; 4])> {
    let px = config.image_px;
    let mut rng = stream(config.seed, index, 1 + attempt as u64);
    let mut entities: Vec<(CategoryId, [f64; 4])> = Vec::new();
    let n_h = rng.random_range(config.humans.0..=config.humans.1);
    for _ in 0..n_h {
        for _ in 0..TRIES {
            let w = rng.random_range(PERSON_SIZE[0].0..=PERSON_SIZE[0].1);
            let hgt = rng.random_range(PERSON_SIZE[1].0..=PERSON_SIZE[1].1);
            let x1 = rng.random_range(2.0..=(px - w - 2.0).max(2.0));
            let y1 = rng.random_range(2.0..=(px - hgt - 2.0).max(2.0));
            let b = [x1, y1, x1 + w, y1 + hgt];
            if inside(b, px) && entities.iter().all(|(_, e)| box_iou(*e, b) < 0.1) {
                entities.push((CategoryId::PERSON, b));
                break;
            }
        }
    }
    let humans: Vec<[f64; 4]> = entities.iter().map(|e| e.1).collect();
    let n_cat = OBJECT_SIZE.len();
    for h in &humans {
        let n_o = rng.random_range(config.objects_per_human.0..=config.objects_per_human.1);
        for _ in 0..n_o {
            let category = CategoryId(rng.random_range(1..=n_cat));
            let productive = config.rulebook.productive(category);
            let rel = if productive.is_empty() || rng.random_bool(config.negative_rate) {
                Relation::Other
            } else {
                productive[rng.random_range(0..productive.len())]
            };
            for _ in 0..TRIES {
                let size = object_size(&mut rng, category);
                let b = propose(&mut rng, rel, *h, size, px);
                let clear = entities.iter().filter(|e| !e.0.is_person()).all(|(_, e)| box_iou(*e, b) < 0.2);
                if inside(b, px) && clear && relation(*h, b) == rel {
                    entities.push((category, b));
                    break;
                }
            }
        }
    }
    let n_d = rng.random_range(config.distractors.0..=config.distractors.1);
    for _ in 0..n_d.min(humans.len() * n_d) {
        let category = CategoryId(rng.random_range(1..=n_cat));
        let size = object_size(&mut rng, category);
        let b = propose(&mut rng, Relation::Other, humans[0], size, px);
        if inside(b, px) {
            entities.push((category, b));
        }
    }
    entities
}

fn render(config: &SynthConfig, index: usize, entities: &[Entity<f64>]) -> Result<Raster> {
    let cell_px = config.image_px / config.cells as f64;
    let mut raster = Raster::new(config.cells, config.cells, cell_px)?;
    let mut rng = stream(config.seed, index, 0);
    for r in 0..config.cells {
        for c in 0..config.cells {
            let base = 0.15 + rng.random_range(-0.05..=0.05);
            raster.set(r, c, [base, base, base + rng.random_range(-0.03..=0.03)]);
        }
    }
    // Objects first, largest first, then people on top.
    let mut order: Vec<usize> = (0..entities.len()).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&entities[a], &entities[b]);
        ea.category.is_person().cmp(&eb.category.is_person()).then(eb.bbox.area().total_cmp(&ea.bbox.area()))
    });
    for i in order {
        let e = &entities[i];
        let base = PALETTE[e.category.0 % PALETTE.len()];
        let j = config.appearance_jitter;
        let colour: [f64; 3] =
            std::array::from_fn(|k| (base[k] + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 }).clamp(0.0, 1.0));
        for r in 0..config.cells {
            for c in 0..config.cells {
                let (x, y) = raster.cell_center(r, c);
                if e.bbox.contains_point(x, y) {
                    raster.set(r, c, colour);
                }
            }
        }
    }
    Ok(raster)
}

/// Generates the `index`-th scene; each scene has its own random stream.
pub fn synth_sample(config: &SynthConfig, index: usize) -> Result<HoiSample<f64>> {
    config.validate()?;
    let mut attempt = 0;
    loop {
        let placed = layout(config, index, attempt);
        let entities = placed
            .iter()
            .map(|&(category, b)| Ok(Entity { bbox: BoundingBox::from_f64(b)?, category }))
            .collect::<Result<Vec<_>>>()?;
        let mut interactions = Vec::new();
        for (hi, h) in placed.iter().enumerate().filter(|(_, e)| e.0.is_person()) {
            for (oi, o) in placed.iter().enumerate() {
                if oi == hi {
                    continue;
                }
                if let Some(verb) = config.rulebook.label(h.1, o.1, o.0)? {
                    interactions.push(Interaction { human: hi, object: oi, verb });
                }
            }
        }
        let held = interactions
            .iter()
            .any(|it| config.holdout.contains(&TripletClass { verb: it.verb, object: placed[it.object].0 }));
        if held && attempt < TRIES {
            attempt += 1;
            continue;
        }
        if held {
            return Err(Error::InvalidArgument(format!("scene {index}: cannot avoid held-out classes")));
        }
        let raster = render(config, index, &entities)?;
        return Ok(HoiSample {
            image_id: format!("synth_{:05}", index),
            width: config.image_px,
            height: config.image_px,
            entities,
            interactions,
            raster: Some(raster),
        });
    }
}

/// Generates `config.n_images` scenes.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<HoiSample<f64>>> {
    config.validate()?;
    (0..config.n_images).map(|i| synth_sample(config, i)).collect()
}
