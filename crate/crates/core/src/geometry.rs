//! Boxes and the pairwise spatial encoding of a human-object pair.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Axis-aligned box in absolute pixel corners.
///
/// Construction enforces `0 <= x1 < x2`, `0 <= y1 < y2` and finiteness, so
/// every value of this type has positive area.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox<T> {
    x1: T,
    y1: T,
    x2: T,
    y2: T,
}

impl<T: Scalar> BoundingBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let all_finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !all_finite || x1 < T::zero() || y1 < T::zero() || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox(format!("({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Center-format input (`cx, cy, w, h`), converted to corners.
    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Result<Self> {
        let half = T::of(0.5);
        Self::new(cx - half * w, cy - half * h, cx + half * w, cy + half * h)
    }

    pub fn from_f64(c: [f64; 4]) -> Result<Self> {
        Self::new(T::of(c[0]), T::of(c[1]), T::of(c[2]), T::of(c[3]))
    }

    pub fn to_f64(&self) -> [f64; 4] {
        [self.x1.as_f64(), self.y1.as_f64(), self.x2.as_f64(), self.y2.as_f64()]
    }

    pub fn corners(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn x1(&self) -> T {
        self.x1
    }
    pub fn y1(&self) -> T {
        self.y1
    }
    pub fn x2(&self) -> T {
        self.x2
    }
    pub fn y2(&self) -> T {
        self.y2
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let half = T::of(0.5);
        (half * (self.x1 + self.x2), half * (self.y1 + self.y2))
    }

    pub fn diagonal(&self) -> T {
        self.width().hypot(self.height())
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= T::zero() || h <= T::zero() {
            T::zero()
        } else {
            w * h
        }
    }

    /// Smallest box enclosing both.
    pub fn enclosing(&self, other: &Self) -> Self {
        Self {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn scaled(&self, k: T) -> Result<Self> {
        Self::new(self.x1 * k, self.y1 * k, self.x2 * k, self.y2 * k)
    }

    pub fn contains_point(&self, x: T, y: T) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn within(&self, width: T, height: T) -> bool {
        self.x2 <= width && self.y2 <= height
    }

    /// Clips to `[0, width] x [0, height]`; `None` when nothing remains.
    pub fn clip(&self, width: T, height: T) -> Option<Self> {
        Self::new(self.x1.max(T::zero()), self.y1.max(T::zero()), self.x2.min(width), self.y2.min(height)).ok()
    }
}

/// Intersection over union; 0 for disjoint boxes, exactly 1 for a box with itself.
pub fn iou<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    if a == b {
        return T::one();
    }
    let inter = a.intersection_area(b);
    if inter == T::zero() {
        return T::zero();
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(T::one())
}

pub const GEOMETRY_DIM: usize = 8;

/// Fixed-length spatial description of a (human, object) box pair:
/// `[dcx, dcy, ln(w_o/w_h), ln(h_o/h_h), iou, inter/enclosing, area_h/img, area_o/img]`.
///
/// Center offsets are divided by the geometric mean of both box diagonals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometryVector<T> {
    pub values: [T; GEOMETRY_DIM],
}

impl<T: Scalar> GeometryVector<T> {
    pub fn center_offset(&self) -> (T, T) {
        (self.values[0], self.values[1])
    }

    pub fn log_size_ratio(&self) -> (T, T) {
        (self.values[2], self.values[3])
    }

    pub fn iou(&self) -> T {
        self.values[4]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }
}

pub fn geometric_encoding<T: Scalar>(
    human: &BoundingBox<T>,
    object: &BoundingBox<T>,
    image_w: T,
    image_h: T,
) -> Result<GeometryVector<T>> {
    if !(image_w > T::zero() && image_h > T::zero() && image_w.is_finite() && image_h.is_finite()) {
        return Err(Error::InvalidArgument(format!("image size {image_w}x{image_h}")));
    }
    let tol = T::of(1e-9) * image_w.max(image_h);
    if !human.within(image_w + tol, image_h + tol) || !object.within(image_w + tol, image_h + tol) {
        return Err(Error::InvalidBox("box extends beyond the image".into()));
    }
    let (hx, hy) = human.center();
    let (ox, oy) = object.center();
    let norm = (human.diagonal() * object.diagonal()).sqrt();
    let inter = human.intersection_area(object);
    let image_area = image_w * image_h;
    Ok(GeometryVector {
        values: [
            (ox - hx) / norm,
            (oy - hy) / norm,
            (object.width() / human.width()).ln(),
            (object.height() / human.height()).ln(),
            iou(human, object),
            inter / human.enclosing(object).area(),
            human.area() / image_area,
            object.area() / image_area,
        ],
    })
}
