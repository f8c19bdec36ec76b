//! Frozen stand-ins for the visual backbone and the query detector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::geometry::{iou, BoundingBox};
use crate::perception::{roi_pool, FeatureMap};
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::types::EntityDetection;

use super::HoiSample;

const HIDDEN: usize = 16;

/// Per-cell two-layer projection of raster colours into a feature map.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    w1: Mat<T>,
    b1: Mat<T>,
    w2: Mat<T>,
    b2: Mat<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = Mat::<f64>::randn(3, HIDDEN, 1.5, &mut rng).cast();
        let b1 = Mat::<f64>::randn(1, HIDDEN, 0.5, &mut rng).cast();
        let w2 = Mat::<f64>::randn(HIDDEN, channels, (1.0 / HIDDEN as f64).sqrt(), &mut rng).cast();
        let b2 = Mat::<f64>::randn(1, channels, 0.1, &mut rng).cast();
        Self { w1, b1, w2, b2 }
    }

    pub fn channels(&self) -> usize {
        self.w2.cols()
    }

    pub fn feature_map(&self, raster: &Raster) -> Result<FeatureMap<T>> {
        let x = raster.to_mat::<T>();
        let h = x.matmul(&self.w1).add_row(&self.b1).gelu();
        let data = h.matmul(&self.w2).add_row(&self.b2);
        FeatureMap::new(raster.cells_h(), raster.cells_w(), raster.cell_px(), data)
    }

    /// Graph version of [`Backbone::feature_map`] over a `cells x 3` pixel
    /// node; the weights enter as constants.
    pub fn feature_map_graph(&self, g: &mut Graph<'_, T>, pixels: Var) -> Var {
        let w1 = g.constant(self.w1.clone());
        let b1 = g.constant(self.b1.clone());
        let w2 = g.constant(self.w2.clone());
        let b2 = g.constant(self.b2.clone());
        let h = g.matmul(pixels, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let y = g.matmul(h, w2);
        g.add_row(y, b2)
    }

    fn digest(&self, hasher: &mut Sha256) {
        for m in [&self.w1, &self.b1, &self.w2, &self.b2] {
            for v in m.as_slice() {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
    }
}

/// Produces detections from ground-truth entities: boxes jittered by up to
/// `jitter` of their size, confidence equal to the IoU with the clean box,
/// instance tokens from a fixed tanh projection of (category, box,
/// confidence), and appearance tokens RoI-pooled from the backbone.
#[derive(Clone, Debug)]
pub struct StandInDetector<T> {
    backbone: Backbone<T>,
    token: Mat<T>,
    num_categories: usize,
    jitter: f64,
    pool: (usize, usize),
}

impl<T: Scalar> StandInDetector<T> {
    /// `d_a` must be a multiple of `pool.0 * pool.1`.
    pub fn new(num_categories: usize, d_z: usize, d_a: usize, pool: (usize, usize), jitter: f64, seed: u64) -> Self {
        let channels = d_a / (pool.0 * pool.1).max(1);
        let backbone = Backbone::new(channels, seed ^ 0x6261_636b);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746f_6b65);
        let inputs = num_categories + 5;
        let token = Mat::<f64>::randn(inputs, d_z, 1.5 / (inputs as f64).sqrt(), &mut rng).cast();
        Self { backbone, token, num_categories, jitter, pool }
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.backbone
    }

    pub fn d_z(&self) -> usize {
        self.token.cols()
    }

    pub fn pool(&self) -> (usize, usize) {
        self.pool
    }

    pub fn d_a(&self) -> usize {
        self.backbone.channels() * self.pool.0 * self.pool.1
    }

    /// Digest of every frozen weight.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.backbone.digest(&mut hasher);
        for v in self.token.as_slice() {
            hasher.update(v.as_f64().to_le_bytes());
        }
        format!("{:x}", hasher.finalize())
    }

    /// Raster of the sample, or flat silhouettes of its boxes when it has none.
    pub fn raster(&self, sample: &HoiSample<T>, cells: usize) -> Result<Raster> {
        if let Some(r) = &sample.raster {
            return Ok(r.clone());
        }
        let side = sample.width.max(sample.height).as_f64();
        let mut raster = Raster::new(cells, cells, side / cells as f64)?;
        for e in &sample.entities {
            let shade = 0.3 + 0.7 * (e.category.0 % 8) as f64 / 8.0;
            for r in 0..cells {
                for c in 0..cells {
                    let (x, y) = raster.cell_center(r, c);
                    if e.bbox.contains_point(T::of(x), T::of(y)) {
                        raster.set(r, c, [shade, 1.0 - shade, 0.5]);
                    }
                }
            }
        }
        Ok(raster)
    }

    fn instance_token(&self, sample: &HoiSample<T>, bbox: &BoundingBox<T>, category: usize, conf: T) -> Vec<T> {
        let mut x = vec![T::zero(); self.num_categories + 5];
        if category < self.num_categories {
            x[category] = T::one();
        }
        let [x1, y1, x2, y2] = bbox.corners();
        let n = self.num_categories;
        x[n] = x1 / sample.width;
        x[n + 1] = y1 / sample.height;
        x[n + 2] = x2 / sample.width;
        x[n + 3] = y2 / sample.height;
        x[n + 4] = conf;
        Mat::row_vector(x).matmul(&self.token).map(|v| v.tanh()).into_vec()
    }

    /// One detection per ground-truth entity, in entity order.
    pub fn detect<R: Rng + ?Sized>(&self, sample: &HoiSample<T>, rng: &mut R) -> Result<Vec<EntityDetection<T>>> {
        let raster = self.raster(sample, 24)?;
        self.detect_in(sample, &raster, rng)
    }

    /// As [`StandInDetector::detect`], pooling appearance from `raster`.
    pub fn detect_in<R: Rng + ?Sized>(
        &self,
        sample: &HoiSample<T>,
        raster: &Raster,
        rng: &mut R,
    ) -> Result<Vec<EntityDetection<T>>> {
        let map = self.backbone.feature_map(raster)?;
        sample
            .entities
            .iter()
            .map(|e| {
                let [x1, y1, x2, y2] = e.bbox.to_f64();
                let (w, h) = (x2 - x1, y2 - y1);
                let mut j = |v: f64, s: f64| {
                    v + if self.jitter > 0.0 { rng.random_range(-self.jitter..=self.jitter) * s } else { 0.0 }
                };
                let (jx1, jy1, jx2, jy2) = (j(x1, w), j(y1, h), j(x2, w), j(y2, h));
                let (sw, sh) = (sample.width.as_f64(), sample.height.as_f64());
                let clamp = |v: f64, hi: f64| v.clamp(0.0, hi);
                let (a1, b1) = (clamp(jx1.min(jx2), sw), clamp(jy1.min(jy2), sh));
                let (a2, b2) = (clamp(jx1.max(jx2), sw).max(a1 + 1e-3), clamp(jy1.max(jy2), sh).max(b1 + 1e-3));
                let bbox = BoundingBox::new(T::of(a1), T::of(b1), T::of(a2), T::of(b2))?;
                let conf = iou(&bbox, &e.bbox).max(T::zero()).min(T::one());
                let instance = self.instance_token(sample, &bbox, e.category.0, conf);
                let appearance = roi_pool(&map, &bbox, self.pool)?;
                EntityDetection::new(bbox, e.category, conf, instance, appearance)
            })
            .collect()
    }
}
