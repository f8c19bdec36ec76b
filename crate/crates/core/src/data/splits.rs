use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{CategoryId, TripletClass, VerbId};

use super::{class_counts, is_rare, HoiSample};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    #[default]
    Default,
    Rare,
    NonRare,
    RfUc,
    NfUc,
    Uo,
    Uv,
}

impl SplitMode {
    pub fn is_zero_shot(self) -> bool {
        matches!(self, Self::RfUc | Self::NfUc | Self::Uo | Self::Uv)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeldOut {
    pub classes: Vec<TripletClass>,
    pub objects: Vec<CategoryId>,
    pub verbs: Vec<VerbId>,
}

impl HeldOut {
    fn is_empty(&self) -> bool {
        self.classes.is_empty() && self.objects.is_empty() && self.verbs.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub held_out: HeldOut,
    /// For `rf_uc`/`nf_uc` without explicit classes: how many to hold out by frequency.
    pub num_unseen: usize,
}

/// Training subset plus class partitions for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub mode: SplitMode,
    /// Indices into the dataset.
    pub train: Vec<usize>,
    pub held_out: HeldOut,
    /// Classes seen in the dataset, partitioned.
    pub unseen: BTreeSet<TripletClass>,
    pub seen: BTreeSet<TripletClass>,
    /// Rare by training-set frequency.
    pub rare: BTreeSet<TripletClass>,
    pub non_rare: BTreeSet<TripletClass>,
}

impl Split {
    /// Whether `class` belongs to the held-out side; works for classes absent
    /// from the dataset too.
    pub fn is_unseen(&self, class: &TripletClass) -> bool {
        match self.mode {
            SplitMode::RfUc | SplitMode::NfUc => self.held_out.classes.contains(class),
            SplitMode::Uo => self.held_out.objects.contains(&class.object),
            SplitMode::Uv => self.held_out.verbs.contains(&class.verb),
            _ => false,
        }
    }

    pub fn is_rare(&self, class: &TripletClass) -> bool {
        !self.non_rare.contains(class)
    }
}

/// Resolves the held-out set and filters training images. An image is
/// dropped from training if it contains any held-out class (or, for `uo`,
/// any entity of a held-out category).
pub fn build_splits<T: Scalar>(
    dataset: &[HoiSample<T>],
    spec: &SplitSpec,
    num_verbs: usize,
    num_objects: usize,
) -> Result<Split> {
    let counts = class_counts(dataset);
    let universe: BTreeSet<TripletClass> = counts.keys().copied().collect();
    let mut held = spec.held_out.clone();
    let bad = |m: &str| Err(Error::InvalidSplit(format!("{:?}: {m}", spec.mode)));
    match spec.mode {
        SplitMode::Default | SplitMode::Rare | SplitMode::NonRare => {
            if !held.is_empty() || spec.num_unseen > 0 {
                return bad("mode takes no held-out set");
            }
        }
        SplitMode::RfUc | SplitMode::NfUc => {
            if !held.objects.is_empty() || !held.verbs.is_empty() {
                return bad("composition splits hold out triplet classes only");
            }
            if held.classes.is_empty() && spec.num_unseen > 0 {
                let mut ranked: Vec<(TripletClass, usize)> = counts.iter().map(|(c, n)| (*c, *n)).collect();
                if spec.mode == SplitMode::RfUc {
                    ranked.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
                } else {
                    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                }
                held.classes = ranked.into_iter().take(spec.num_unseen).map(|(c, _)| c).collect();
            }
            if !universe.is_empty() && universe.iter().all(|c| held.classes.contains(c)) {
                return bad("held-out classes cover every class");
            }
        }
        SplitMode::Uo => {
            if !held.classes.is_empty() || !held.verbs.is_empty() || spec.num_unseen > 0 {
                return bad("unseen-object split holds out object categories only");
            }
            if held.objects.iter().any(|o| o.is_person() || o.0 >= num_objects) {
                return bad("held-out objects must be non-person categories of the vocabulary");
            }
            if (1..num_objects).all(|o| held.objects.contains(&CategoryId(o))) {
                return bad("held-out objects cover every object category");
            }
        }
        SplitMode::Uv => {
            if !held.classes.is_empty() || !held.objects.is_empty() || spec.num_unseen > 0 {
                return bad("unseen-verb split holds out verbs only");
            }
            if held.verbs.iter().any(|v| v.0 >= num_verbs) {
                return bad("held-out verb outside the vocabulary");
            }
            if (0..num_verbs).all(|v| held.verbs.contains(&VerbId(v))) {
                return bad("held-out verbs cover the whole vocabulary");
            }
        }
    }
    let mut split = Split {
        mode: spec.mode,
        train: Vec::new(),
        held_out: held,
        unseen: BTreeSet::new(),
        seen: BTreeSet::new(),
        rare: BTreeSet::new(),
        non_rare: BTreeSet::new(),
    };
    for (i, s) in dataset.iter().enumerate() {
        let touches_class = s.classes().iter().any(|c| split.is_unseen(c));
        let touches_object =
            split.mode == SplitMode::Uo && s.entities.iter().any(|e| split.held_out.objects.contains(&e.category));
        if !touches_class && !touches_object {
            split.train.push(i);
        }
    }
    let train_samples: Vec<HoiSample<T>> = split.train.iter().map(|&i| dataset[i].clone()).collect();
    let train_counts = class_counts(&train_samples);
    for c in universe {
        if split.is_unseen(&c) {
            split.unseen.insert(c);
        } else {
            split.seen.insert(c);
        }
        if is_rare(train_counts.get(&c).copied().unwrap_or(0)) {
            split.rare.insert(c);
        } else {
            split.non_rare.insert(c);
        }
    }
    Ok(split)
}
