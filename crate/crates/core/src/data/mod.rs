//! Datasets: HICO-style annotation files, the synthetic scene generator,
//! the stand-in detector, and zero-shot split construction.

mod detector;
mod hico;
mod splits;
mod synth;

pub use detector::{Backbone, StandInDetector};
pub use hico::{load_hico, parse_hico, save_hico, write_hico};
pub use splits::{build_splits, HeldOut, Split, SplitMode, SplitSpec};
pub use synth::{
    default_synth_objects, default_synth_verbs, relation, synth_generate, synth_sample, Relation, Rulebook, SynthConfig,
};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::types::{CategoryId, HoiTriplet, TripletClass, VerbId};

/// Classes with fewer training instances than this are rare.
pub const RARE_THRESHOLD: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entity<T> {
    pub bbox: BoundingBox<T>,
    pub category: CategoryId,
}

/// Ground-truth interaction between two entities of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Interaction {
    pub human: usize,
    pub object: usize,
    pub verb: VerbId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HoiSample<T> {
    pub image_id: String,
    pub width: T,
    pub height: T,
    pub entities: Vec<Entity<T>>,
    pub interactions: Vec<Interaction>,
    pub raster: Option<Raster>,
}

impl<T: Scalar> HoiSample<T> {
    /// Checks indices, roles, and that every box lies inside the image.
    pub fn validate(&self, num_verbs: usize) -> Result<()> {
        let tol = T::of(1e-9) * self.width.max(self.height);
        for e in &self.entities {
            if !e.bbox.within(self.width + tol, self.height + tol) {
                return Err(Error::InvalidBox(format!("{:?} outside {}x{}", e.bbox.to_f64(), self.width, self.height)));
            }
        }
        for it in &self.interactions {
            let (h, o) = (self.entities.get(it.human), self.entities.get(it.object));
            match (h, o) {
                (Some(h), Some(_)) if h.category.is_person() && it.human != it.object => {}
                _ => return Err(Error::InvalidArgument(format!("interaction {it:?} has invalid entity roles"))),
            }
            if it.verb.0 >= num_verbs {
                return Err(Error::UnknownVerb(it.verb.to_string()));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Result<HoiSample<U>> {
        let entities = self
            .entities
            .iter()
            .map(|e| Ok(Entity { bbox: BoundingBox::from_f64(e.bbox.to_f64())?, category: e.category }))
            .collect::<Result<Vec<_>>>()?;
        Ok(HoiSample {
            image_id: self.image_id.clone(),
            width: U::of(self.width.as_f64()),
            height: U::of(self.height.as_f64()),
            entities,
            interactions: self.interactions.clone(),
            raster: self.raster.clone(),
        })
    }

    /// Ground-truth triplets with unit score.
    pub fn triplets(&self) -> Vec<HoiTriplet<T>> {
        self.interactions
            .iter()
            .map(|it| HoiTriplet {
                human_box: self.entities[it.human].bbox,
                object_box: self.entities[it.object].bbox,
                object_category: self.entities[it.object].category,
                verb: it.verb,
                score: T::one(),
            })
            .collect()
    }

    pub fn classes(&self) -> Vec<TripletClass> {
        self.interactions
            .iter()
            .map(|it| TripletClass { verb: it.verb, object: self.entities[it.object].category })
            .collect()
    }

    pub fn object_categories(&self) -> Vec<CategoryId> {
        let mut cats: Vec<CategoryId> = self.entities.iter().map(|e| e.category).collect();
        cats.sort();
        cats.dedup();
        cats
    }
}

/// Number of annotated instances per triplet class.
pub fn class_counts<T: Scalar>(samples: &[HoiSample<T>]) -> BTreeMap<TripletClass, usize> {
    let mut counts = BTreeMap::new();
    for s in samples {
        for c in s.classes() {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    counts
}

pub fn is_rare(count: usize) -> bool {
    count < RARE_THRESHOLD
}
