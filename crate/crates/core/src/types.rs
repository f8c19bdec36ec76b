//! Shared domain records: detections and interaction triplets.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::scalar::Scalar;

/// Object-class index; `0` is always the person class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CategoryId(pub usize);

impl CategoryId {
    pub const PERSON: CategoryId = CategoryId(0);

    pub fn is_person(self) -> bool {
        self == Self::PERSON
    }
}

/// Index into the canonical verb list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VerbId(pub usize);

impl fmt::Display for VerbId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "verb#{}", self.0)
    }
}

/// A localized entity as reported by the (frozen) detector.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityDetection<T> {
    pub bbox: BoundingBox<T>,
    pub category: CategoryId,
    pub confidence: T,
    pub instance_token: Vec<T>,
    pub appearance_token: Vec<T>,
}

impl<T: Scalar> EntityDetection<T> {
    pub fn new(
        bbox: BoundingBox<T>,
        category: CategoryId,
        confidence: T,
        instance_token: Vec<T>,
        appearance_token: Vec<T>,
    ) -> Result<Self> {
        if !(confidence >= T::zero() && confidence <= T::one()) {
            return Err(Error::InvalidArgument(format!("detection confidence {confidence} outside [0, 1]")));
        }
        Ok(Self { bbox, category, confidence, instance_token, appearance_token })
    }

    pub fn check_dims(&self, d_z: usize, d_a: usize) -> Result<()> {
        if self.instance_token.len() != d_z || self.appearance_token.len() != d_a {
            return Err(Error::Shape(format!(
                "detection tokens ({}, {}) do not match configured ({d_z}, {d_a})",
                self.instance_token.len(),
                self.appearance_token.len()
            )));
        }
        Ok(())
    }
}

/// `(verb, object category)` pair identifying an HOI class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripletClass {
    pub verb: VerbId,
    pub object: CategoryId,
}

/// A grounded `<human, verb, object>` statement with a confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct HoiTriplet<T> {
    pub human_box: BoundingBox<T>,
    pub object_box: BoundingBox<T>,
    pub object_category: CategoryId,
    pub verb: VerbId,
    pub score: T,
}

impl<T: Scalar> HoiTriplet<T> {
    pub fn new(
        human_box: BoundingBox<T>,
        object_box: BoundingBox<T>,
        object_category: CategoryId,
        verb: VerbId,
        score: T,
    ) -> Result<Self> {
        if !(score >= T::zero() && score <= T::one()) {
            return Err(Error::InvalidArgument(format!("triplet score {score} outside [0, 1]")));
        }
        Ok(Self { human_box, object_box, object_category, verb, score })
    }

    pub fn class(&self) -> TripletClass {
        TripletClass { verb: self.verb, object: self.object_category }
    }
}
