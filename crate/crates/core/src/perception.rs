//! Entity fusion, candidate-pair tokens, salience adjudication and
//! candidate selection.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, GEOMETRY_DIM};
use crate::nn::{EncoderLayer, LayerNorm, Linear, Mlp, ParamStore, Projection};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Mat;
use crate::types::{CategoryId, EntityDetection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionConfig {
    pub d_z: usize,
    pub d_a: usize,
    pub d_e: usize,
    pub d_g: usize,
    pub d_model: usize,
    pub sat_layers: usize,
    pub sat_heads: usize,
    pub alpha: f64,
    pub per_human_quota: usize,
    pub max_candidates: usize,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            d_z: 16,
            d_a: 32,
            d_e: 32,
            d_g: 16,
            d_model: 32,
            sat_layers: 1,
            sat_heads: 4,
            alpha: 0.6,
            per_human_quota: 3,
            max_candidates: 32,
        }
    }
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_z, self.d_a, self.d_e, self.d_g, self.d_model, self.sat_heads];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("perception dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.sat_heads) {
            return Err(Error::InvalidArgument("d_model must be divisible by sat_heads".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.per_human_quota == 0 || self.max_candidates == 0 {
            return Err(Error::InvalidArgument("quota and candidate cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// Backbone activations laid out as `(height * width) x channels`, row-major
/// over the spatial grid. `stride` is the pixel size of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub height: usize,
    pub width: usize,
    pub stride: f64,
    pub data: Mat<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(height: usize, width: usize, stride: f64, data: Mat<T>) -> Result<Self> {
        if data.rows() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!("feature map {height}x{width} with {} rows", data.rows())));
        }
        Ok(Self { height, width, stride, data })
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }
}

/// Sparse-free RoIAlign weights: row `b` holds the bilinear sampling weights
/// of output bin `b` over the `height * width` grid cells.
///
/// The box is given in pixels and clipped to the map extent. Each bin is
/// sampled on a `ceil(bin_h) x ceil(bin_w)` grid and averaged.
pub fn roi_weights<T: Scalar>(
    height: usize,
    width: usize,
    stride: f64,
    bbox: &BoundingBox<T>,
    out: (usize, usize),
) -> Result<Mat<T>> {
    let (oh, ow) = out;
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument("RoI output size must be positive".into()));
    }
    let [x1, y1, x2, y2] = bbox.to_f64();
    let (wf, hf) = (width as f64, height as f64);
    let (x1, x2) = ((x1 / stride).clamp(0.0, wf), (x2 / stride).clamp(0.0, wf));
    let (y1, y2) = ((y1 / stride).clamp(0.0, hf), (y2 / stride).clamp(0.0, hf));
    if x2 - x1 <= 1e-9 || y2 - y1 <= 1e-9 {
        return Err(Error::InvalidBox(format!("{:?} is empty after clipping to the feature map", bbox.to_f64())));
    }
    let bin_h = (y2 - y1) / oh as f64;
    let bin_w = (x2 - x1) / ow as f64;
    let ny = bin_h.ceil().max(1.0) as usize;
    let nx = bin_w.ceil().max(1.0) as usize;
    let per_sample = 1.0 / (ny * nx) as f64;
    let mut w = vec![0.0f64; oh * ow * height * width];
    for by in 0..oh {
        for bx in 0..ow {
            let row = (by * ow + bx) * height * width;
            for iy in 0..ny {
                let y = y1 + by as f64 * bin_h + (iy as f64 + 0.5) * bin_h / ny as f64;
                for ix in 0..nx {
                    let x = x1 + bx as f64 * bin_w + (ix as f64 + 0.5) * bin_w / nx as f64;
                    for (cell, wt) in bilinear_taps(y - 0.5, x - 0.5, height, width) {
                        w[row + cell] += wt * per_sample;
                    }
                }
            }
        }
    }
    Mat::from_f64(oh * ow, height * width, &w)
}

/// Up to four `(cell, weight)` taps for a sample at index-space `(y, x)`.
fn bilinear_taps(y: f64, x: f64, height: usize, width: usize) -> Vec<(usize, f64)> {
    let y = y.clamp(0.0, (height - 1) as f64);
    let x = x.clamp(0.0, (width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(height - 1), (x0 + 1).min(width - 1));
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let mut taps = Vec::with_capacity(4);
    for (yy, wy) in [(y0, 1.0 - ly), (y1, ly)] {
        for (xx, wx) in [(x0, 1.0 - lx), (x1, lx)] {
            let wt = wy * wx;
            if wt > 0.0 {
                taps.push((yy * width + xx, wt));
            }
        }
    }
    taps
}

/// RoI-pooled appearance token: bins in row-major order, channels innermost.
pub fn roi_pool<T: Scalar>(map: &FeatureMap<T>, bbox: &BoundingBox<T>, out: (usize, usize)) -> Result<Vec<T>> {
    let w = roi_weights(map.height, map.width, map.stride, bbox, out)?;
    Ok(w.matmul(&map.data).into_vec())
}

/// Graph version of [`roi_pool`], differentiable w.r.t. the feature map.
pub fn roi_pool_graph<T: Scalar>(g: &mut Graph<'_, T>, weights: &Mat<T>, map: Var) -> Var {
    let w = g.constant(weights.clone());
    let pooled = g.matmul(w, map);
    let (r, c) = g.shape(pooled);
    g.reshape(pooled, 1, r * c)
}

/// `f_x = MLP_fuse([phi_inst(z_x) || phi_app(a_x)])`.
#[derive(Clone, Debug)]
pub struct EntityFusion {
    pub inst: Projection,
    pub app: Projection,
    pub fuse: Mlp,
    pub d_z: usize,
    pub d_a: usize,
}

impl EntityFusion {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &PerceptionConfig, rng: &mut R) -> Self {
        Self {
            inst: Projection::new(store, "entity.phi_inst", cfg.d_z, cfg.d_e, rng),
            app: Projection::new(store, "entity.phi_app", cfg.d_a, cfg.d_e, rng),
            fuse: Mlp::new(store, "entity.fuse", 2 * cfg.d_e, cfg.d_e, cfg.d_e, rng),
            d_z: cfg.d_z,
            d_a: cfg.d_a,
        }
    }

    /// Row-batched fusion: `z: n x d_z`, `a: n x d_a` -> `n x d_e`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, z: Var, a: Var) -> Result<Var> {
        let (zn, zd) = g.shape(z);
        let (an, ad) = g.shape(a);
        if zd != self.d_z || ad != self.d_a || zn != an {
            return Err(Error::Shape(format!(
                "entity fusion expects n x {} and n x {}, got {zn}x{zd} and {an}x{ad}",
                self.d_z, self.d_a
            )));
        }
        let pz = self.inst.forward(g, z);
        let pa = self.app.forward(g, a);
        let cat = g.hconcat(&[pz, pa]);
        Ok(self.fuse.forward(g, cat))
    }
}

/// Builds `u_k = W [f_h || f_o || phi_g(G(b_h, b_o))] + b` for every pair.
#[derive(Clone, Debug)]
pub struct CandidateTokenizer {
    pub geometry: Projection,
    pub project: Linear,
    pub d_e: usize,
}

impl CandidateTokenizer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &PerceptionConfig, rng: &mut R) -> Self {
        Self {
            geometry: Projection::new(store, "candidate.phi_geo", GEOMETRY_DIM, cfg.d_g, rng),
            project: Linear::new(store, "candidate.proj", 2 * cfg.d_e + cfg.d_g, cfg.d_model, rng),
            d_e: cfg.d_e,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        entities: Var,
        pairs: &[(usize, usize)],
        geometry: &Mat<T>,
    ) -> Result<Var> {
        if geometry.rows() != pairs.len() || geometry.cols() != GEOMETRY_DIM {
            return Err(Error::Shape(format!("geometry {:?} for {} pairs", geometry.shape(), pairs.len())));
        }
        let hs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let os: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let fh = g.gather_rows(entities, &hs);
        let fo = g.gather_rows(entities, &os);
        let geo = g.constant(geometry.clone());
        let gk = self.geometry.forward(g, geo);
        self.token(g, fh, fo, gk)
    }

    /// Linear projection of already-built parts (`N x d_e`, `N x d_e`, `N x d_g`).
    pub fn token<T: Scalar>(&self, g: &mut Graph<'_, T>, fh: Var, fo: Var, gk: Var) -> Result<Var> {
        let expected = self.project.d_in;
        let got = g.shape(fh).1 + g.shape(fo).1 + g.shape(gk).1;
        if got != expected {
            return Err(Error::Shape(format!("candidate parts total {got} columns, expected {expected}")));
        }
        let cat = g.hconcat(&[fh, fo, gk]);
        Ok(self.project.forward(g, cat))
    }
}

/// Stack of pre-norm self-attention layers over the candidate set, with no
/// positional information so that the map is permutation-equivariant.
#[derive(Clone, Debug)]
pub struct SalienceTransformer {
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}

impl SalienceTransformer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &PerceptionConfig, rng: &mut R) -> Self {
        let layers = (0..cfg.sat_layers)
            .map(|i| EncoderLayer::new(store, &format!("sat.{i}"), cfg.d_model, cfg.sat_heads, rng))
            .collect();
        Self { layers, norm: LayerNorm::new(store, "sat.norm", cfg.d_model) }
    }

    /// `None` for an empty candidate set.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Option<Var> {
        if g.shape(tokens).0 == 0 {
            return None;
        }
        let mut x = tokens;
        for layer in &self.layers {
            x = layer.forward(g, x);
        }
        Some(self.norm.forward(g, x))
    }
}

/// Shared linear head producing salience logits `w_s^T u + b_s`.
#[derive(Clone, Debug)]
pub struct SalienceHead {
    pub linear: Linear,
}

impl SalienceHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, d_model: usize, rng: &mut R) -> Self {
        Self { linear: Linear::new(store, "salience", d_model, 1, rng) }
    }

    pub fn logits<T: Scalar>(&self, g: &mut Graph<'_, T>, contextual: Var) -> Var {
        self.linear.forward(g, contextual)
    }
}

/// `sigma(w . u + b)` on plain vectors.
pub fn salience_score<T: Scalar>(token: &[T], w: &[T], b: T) -> Result<T> {
    if token.len() != w.len() {
        return Err(Error::Shape(format!("token {} vs weight {}", token.len(), w.len())));
    }
    Ok(sigmoid(crate::tensor::dot(token, w) + b))
}

/// `r = alpha * s + (1 - alpha) * min(conf_h, conf_o)`.
pub fn orchestration_gate<T: Scalar>(salience: T, conf_h: T, conf_o: T, alpha: T) -> Result<T> {
    let unit = |v: T| v >= T::zero() && v <= T::one();
    if !unit(alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(unit(salience) && unit(conf_h) && unit(conf_o)) {
        return Err(Error::InvalidArgument("gate inputs must lie in [0, 1]".into()));
    }
    let r = alpha * salience + (T::one() - alpha) * conf_h.min(conf_o);
    Ok(r.max(T::zero()).min(T::one()))
}

/// One (human, entity) hypothesis after scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePair<T> {
    /// Construction order, used as the final tie-break.
    pub order: usize,
    pub human_index: usize,
    pub object_index: usize,
    pub salience: T,
    pub refined: T,
    pub selected: bool,
}

/// Every ordered (person, other detection) pair, excluding self-pairs.
pub fn enumerate_pairs<T: Scalar>(detections: &[EntityDetection<T>]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (h, dh) in detections.iter().enumerate() {
        if !dh.category.is_person() {
            continue;
        }
        for o in 0..detections.len() {
            if o != h {
                pairs.push((h, o));
            }
        }
    }
    pairs
}

fn rank<T: Scalar>(a: &CandidatePair<T>, b: &CandidatePair<T>) -> Ordering {
    b.refined
        .partial_cmp(&a.refined)
        .unwrap_or(Ordering::Equal)
        .then(a.object_index.cmp(&b.object_index))
        .then(a.order.cmp(&b.order))
}

/// Per-human quota plus coverage: each human keeps its best pair, the rest
/// of the budget is filled greedily by global refined score from pairs
/// within their human's top-`quota`. Returns selected indices into `pairs`
/// in global rank order and sets each pair's `selected` flag.
pub fn select_candidates<T: Scalar>(pairs: &mut [CandidatePair<T>], quota: usize, max_candidates: usize) -> Vec<usize> {
    pairs.iter_mut().for_each(|p| p.selected = false);
    let mut by_human: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        by_human.entry(p.human_index).or_default().push(i);
    }
    let mut reserved = Vec::new();
    let mut eligible = Vec::new();
    for idx in by_human.values_mut() {
        idx.sort_by(|&a, &b| rank(&pairs[a], &pairs[b]));
        idx.truncate(quota.max(1));
        reserved.push(idx[0]);
        eligible.extend_from_slice(&idx[1..]);
    }
    let order = |v: &mut Vec<usize>| v.sort_by(|&a, &b| rank(&pairs[a], &pairs[b]));
    order(&mut reserved);
    order(&mut eligible);
    let mut chosen: Vec<usize> = reserved.into_iter().take(max_candidates).collect();
    let room = max_candidates.saturating_sub(chosen.len());
    chosen.extend(eligible.into_iter().take(room));
    order(&mut chosen);
    for &i in &chosen {
        pairs[i].selected = true;
    }
    chosen
}

/// Per-image inputs to the perception stack.
#[derive(Clone, Debug)]
pub struct PerceptionInputs<T> {
    pub instance: Mat<T>,
    pub appearance: Mat<T>,
    pub confidences: Vec<T>,
    pub categories: Vec<CategoryId>,
    pub pairs: Vec<(usize, usize)>,
    pub geometry: Mat<T>,
}

#[derive(Clone, Debug)]
pub struct PerceptionOutput<T> {
    pub pairs: Vec<CandidatePair<T>>,
    /// `N x d_model` pre-adjudication tokens.
    pub tokens: Option<Var>,
    /// `N x d_model` adjudicated tokens.
    pub contextual: Option<Var>,
    /// `N x 1` salience logits.
    pub logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Perception {
    pub entity: EntityFusion,
    pub candidate: CandidateTokenizer,
    pub sat: SalienceTransformer,
    pub head: SalienceHead,
    pub config: PerceptionConfig,
}

impl Perception {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &PerceptionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            entity: EntityFusion::new(store, config, rng),
            candidate: CandidateTokenizer::new(store, config, rng),
            sat: SalienceTransformer::new(store, config, rng),
            head: SalienceHead::new(store, config.d_model, rng),
            config: config.clone(),
        })
    }

    /// Full forward with appearance supplied as a graph node (so callers
    /// can differentiate through the pooling path).
    pub fn forward_with<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        inputs: &PerceptionInputs<T>,
        appearance: Var,
    ) -> Result<PerceptionOutput<T>> {
        if inputs.pairs.is_empty() {
            return Ok(PerceptionOutput { pairs: Vec::new(), tokens: None, contextual: None, logits: None });
        }
        let z = g.constant(inputs.instance.clone());
        let f = self.entity.forward(g, z, appearance)?;
        let u = self.candidate.forward(g, f, &inputs.pairs, &inputs.geometry)?;
        let ctx = self.sat.forward(g, u).expect("non-empty candidate set");
        let logits = self.head.logits(g, ctx);
        let alpha = T::of(self.config.alpha);
        let mut pairs = Vec::with_capacity(inputs.pairs.len());
        for (k, &(h, o)) in inputs.pairs.iter().enumerate() {
            let s = sigmoid(g.value(logits)[(k, 0)]);
            let r = orchestration_gate(s, inputs.confidences[h], inputs.confidences[o], alpha)?;
            pairs.push(CandidatePair {
                order: k,
                human_index: h,
                object_index: o,
                salience: s,
                refined: r,
                selected: false,
            });
        }
        Ok(PerceptionOutput { pairs, tokens: Some(u), contextual: Some(ctx), logits: Some(logits) })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        inputs: &PerceptionInputs<T>,
    ) -> Result<PerceptionOutput<T>> {
        let a = g.constant(inputs.appearance.clone());
        self.forward_with(g, inputs, a)
    }

    pub fn select(&self, out: &mut PerceptionOutput<impl Scalar>) -> Vec<usize> {
        select_candidates(&mut out.pairs, self.config.per_human_quota, self.config.max_candidates)
    }
}
