//! Where the frozen encoder looks, with and without a candidate's kernel.
//!
//! The unconditioned map is the scene encoder's patch self-attention,
//! averaged over query patches. The conditioned map is the magnitude of the
//! gradient of the candidate's decoded-sequence log-likelihood with respect
//! to each raster cell, flowing through every path from pixels to kernel.
//! Both are normalised to `[0, 1]` by their maximum.

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::generator::EOS;
use crate::geometry::BoundingBox;
use crate::model::{CandidatePrediction, HeadMode, HoiModel, Prepared};
use crate::objectives::loss_generative;
use crate::perception::{roi_pool_graph, roi_weights};
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Row-major `rows x cols` heatmap over raster cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub cell_px: f64,
    pub values: Vec<f64>,
}

impl Heatmap {
    fn normalized(rows: usize, cols: usize, cell_px: f64, mut values: Vec<f64>) -> Self {
        let max = values.iter().copied().fold(0.0f64, f64::max);
        if max > 0.0 {
            values.iter_mut().for_each(|v| *v /= max);
        }
        Self { rows, cols, cell_px, values }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// Fraction of the total mass on cells whose centre lies in any of `boxes`.
    pub fn mass_inside<T: Scalar>(&self, boxes: &[BoundingBox<T>]) -> f64 {
        let total: f64 = self.values.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (x, y) = ((c as f64 + 0.5) * self.cell_px, (r as f64 + 0.5) * self.cell_px);
                if boxes.iter().any(|b| b.contains_point(T::of(x), T::of(y))) {
                    inside += self.get(r, c);
                }
            }
        }
        inside / total
    }
}

/// Both maps for one selected candidate.
#[derive(Clone, Debug)]
pub struct CandidateAttention<T> {
    pub prediction: CandidatePrediction<T>,
    pub human_box: BoundingBox<T>,
    pub object_box: BoundingBox<T>,
    pub unconditioned: Heatmap,
    pub conditioned: Heatmap,
}

impl<T: Scalar> CandidateAttention<T> {
    /// `(conditioned, unconditioned)` mass inside the union of the two boxes.
    pub fn union_mass(&self) -> (f64, f64) {
        let boxes = [self.human_box, self.object_box];
        (self.conditioned.mass_inside(&boxes), self.unconditioned.mass_inside(&boxes))
    }
}

/// Encoder attention received by each cell, averaged over query patches.
pub fn unconditioned_map<T: Scalar>(attention: &Mat<T>, raster: &Raster) -> Result<Heatmap> {
    let (rows, cols) = (raster.cells_h(), raster.cells_w());
    let patches = attention.cols();
    let side = (patches as f64).sqrt().round() as usize;
    if side * side != patches || side == 0 || rows % side != 0 || cols % side != 0 {
        return Err(Error::Shape(format!("{patches} patches over a {rows}x{cols} raster")));
    }
    let received = attention.mean_rows();
    let (ph, pw) = (rows / side, cols / side);
    let mut values = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            values[r * cols + c] = received.get(0, (r / ph) * side + c / pw).as_f64();
        }
    }
    Ok(Heatmap::normalized(rows, cols, raster.cell_px(), values))
}

impl<T: Scalar> HoiModel<T> {
    /// Saliency of one candidate's decoded output (or, for the classifier
    /// head, its predicted verb) with respect to the raster cells.
    pub fn conditioned_map(&self, prep: &Prepared<T>, pred: &CandidatePrediction<T>) -> Result<Heatmap> {
        let raster = &prep.raster;
        let mut g = Graph::with_params(&self.store);
        let pixels = g.variable(raster.to_mat());
        let map = self.detector.backbone().feature_map_graph(&mut g, pixels);
        let mut pooled = Vec::with_capacity(prep.detections.len());
        for d in &prep.detections {
            let w = roi_weights(raster.cells_h(), raster.cells_w(), raster.cell_px(), &d.bbox, self.detector.pool())?;
            pooled.push(roi_pool_graph(&mut g, &w, map));
        }
        let appearance = g.vconcat(&pooled);
        let out = self.perception.forward_with(&mut g, &prep.inputs, appearance)?;
        let ctx = out.contextual.ok_or_else(|| Error::InvalidArgument("image has no candidates".into()))?;
        let v = g.row(ctx, pred.pair.order);
        let (patches, _) = self.generator.encode_scene_graph(&mut g, pixels)?;
        let fg = g.mean_rows(patches);
        let objective = match self.config.head {
            HeadMode::Generative => {
                let kernel = self.kernel_var(&mut g, v, fg)?;
                let target = if pred.tokens.is_empty() { vec![EOS] } else { pred.tokens.clone() };
                let mask = self.vocab.decoding_mask();
                loss_generative(&mut g, self.generator.as_ref(), Some(kernel), self.inquiry(), &target, &mask)?.loss
            }
            HeadMode::Classifier => {
                let verb =
                    pred.verb.ok_or_else(|| Error::InvalidArgument("classifier prediction without verb".into()))?;
                let logits = self.classifier_logits(&mut g, v, fg);
                let lp = g.log_softmax(logits);
                g.pick(lp, &[(0, verb.0)])
            }
        };
        let grads = g.backward(objective);
        let dx = grads.get_or_zeros(pixels, g.shape(pixels));
        let values: Vec<f64> =
            (0..dx.rows()).map(|r| dx.row(r).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()).collect();
        Ok(Heatmap::normalized(raster.cells_h(), raster.cells_w(), raster.cell_px(), values))
    }

    /// Maps for every selected candidate of the image, in selection order.
    pub fn attention_maps(&self, prep: &Prepared<T>) -> Result<Vec<CandidateAttention<T>>> {
        let unconditioned = unconditioned_map(&prep.scene.attention, &prep.raster)?;
        self.predict(prep)?
            .into_iter()
            .map(|p| {
                Ok(CandidateAttention {
                    human_box: prep.detections[p.pair.human_index].bbox,
                    object_box: prep.detections[p.pair.object_index].bbox,
                    unconditioned: unconditioned.clone(),
                    conditioned: self.conditioned_map(prep, &p)?,
                    prediction: p,
                })
            })
            .collect()
    }
}
