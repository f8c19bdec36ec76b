//! The full detector: perception, steering conduit, and the frozen
//! generator, with per-sample losses, inference, and checkpoints.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{HoiSample, StandInDetector};
use crate::error::{Error, Result};
use crate::generator::{
    decode, DecodeMode, GenerationResult, Generator, SceneEncoding, ToyGenerator, ToyGeneratorConfig, VerbVocabulary,
    INQUIRY,
};
use crate::geometry::geometric_encoding;
use crate::nn::{Mlp, ParamId, ParamStore};
use crate::objectives::{
    first_step_verb_probs, hungarian, loss_generative, loss_logic, loss_nce, loss_salience, pair_cost, total_loss,
    verb_embeddings, ExclusionSet, LossComponents, LossWeights, NegativeBank, PairBoxes, COMPONENT_NAMES,
};
use crate::perception::{enumerate_pairs, CandidatePair, Perception, PerceptionConfig, PerceptionInputs};
use crate::raster::Raster;
use crate::scalar::{sigmoid, Scalar};
use crate::steering::{scene_token, SteeringConduit, SteeringConfig, SteeringDims};
use crate::tensor::{log_softmax, Mat};
use crate::types::{EntityDetection, HoiTriplet, VerbId};

/// What turns a candidate token into a verb.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Kernel-steered constrained decoding with the frozen generator.
    #[default]
    Generative,
    /// Baseline: an MLP over `[v_k || f_global]` with a softmax over verbs.
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Box jitter as a fraction of box size.
    pub jitter: f64,
    pub pool: (usize, usize),
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { jitter: 0.05, pool: (2, 2), seed: 17 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Seed of the learnable-parameter initialisation.
    pub seed: u64,
    pub perception: PerceptionConfig,
    pub steering: SteeringConfig,
    pub head: HeadMode,
    pub generator: ToyGeneratorConfig,
    pub detector: DetectorConfig,
    pub max_decode_len: usize,
    pub decode: DecodeMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            perception: PerceptionConfig::default(),
            steering: SteeringConfig::default(),
            head: HeadMode::Generative,
            generator: ToyGeneratorConfig::default(),
            detector: DetectorConfig::default(),
            max_decode_len: 4,
            decode: DecodeMode::Phrases,
        }
    }
}

/// Everything about one image that does not depend on learnable weights.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub image_id: String,
    pub detections: Vec<EntityDetection<T>>,
    pub inputs: PerceptionInputs<T>,
    pub raster: Raster,
    pub scene: SceneEncoding<T>,
    /// `1 x D_g` pooled scene token.
    pub f_global: Mat<T>,
    pub gt: Vec<(PairBoxes<T>, VerbId)>,
}

/// Loss values of one sample and the gradients of its weighted total.
#[derive(Clone, Debug)]
pub struct SampleLoss<T> {
    /// `(det, sal, gen, nce, logic)`.
    pub components: [f64; 5],
    pub total: f64,
    pub grads: Vec<(ParamId, Mat<T>)>,
}

/// One selected candidate at inference.
#[derive(Clone, Debug)]
pub struct CandidatePrediction<T> {
    pub pair: CandidatePair<T>,
    pub verb: Option<VerbId>,
    pub phrase: String,
    /// Decoded token ids (generative head only).
    pub tokens: Vec<usize>,
    /// Length-normalised log-likelihood (generative) or log-probability (classifier).
    pub verb_score: T,
    /// `r_k * sigmoid(verb_score)` (generative) or `r_k * p` (classifier).
    pub score: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
    pub generator_checksum: String,
    pub params: Vec<SavedParam>,
}

pub struct HoiModel<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub perception: Perception,
    pub conduit: Option<SteeringConduit>,
    pub classifier: Option<Mlp>,
    pub generator: Arc<dyn Generator<T>>,
    pub vocab: VerbVocabulary,
    pub detector: StandInDetector<T>,
    pub objects: Vec<String>,
    inquiry: Vec<usize>,
    verb_embeddings: Mat<T>,
}

impl<T: Scalar> std::fmt::Debug for HoiModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HoiModel")
            .field("config", &self.config)
            .field("verbs", &self.vocab.phrases())
            .field("objects", &self.objects)
            .field("parameters", &self.store.num_scalars())
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> HoiModel<T> {
    /// Builds the model around a toy generator whose tokenizer covers the
    /// verb phrases; `objects[0]` must be the person class.
    pub fn new(config: ModelConfig, verbs: &[String], objects: &[String]) -> Result<Self> {
        let words: Vec<&str> = verbs.iter().flat_map(|p| p.split_whitespace()).collect();
        let generator = Arc::new(ToyGenerator::<T>::new(config.generator.clone(), &words)?);
        Self::with_generator(config, verbs, objects, generator)
    }

    pub fn with_generator(
        config: ModelConfig,
        verbs: &[String],
        objects: &[String],
        generator: Arc<dyn Generator<T>>,
    ) -> Result<Self> {
        if objects.first().map(String::as_str) != Some("person") {
            return Err(Error::InvalidArgument("object vocabulary must start with \"person\"".into()));
        }
        config.perception.validate()?;
        let vocab = VerbVocabulary::new(verbs, generator.tokenizer(), None)?;
        let inquiry = generator.tokenizer().encode(INQUIRY)?;
        let verb_embeddings = verb_embeddings(generator.as_ref(), &vocab)?;
        let p = &config.perception;
        let detector = StandInDetector::new(
            objects.len(),
            p.d_z,
            p.d_a,
            config.detector.pool,
            config.detector.jitter,
            config.detector.seed,
        );
        if detector.d_a() != p.d_a {
            return Err(Error::InvalidArgument(format!(
                "d_a = {} is not a multiple of the {:?} pooling grid",
                p.d_a, config.detector.pool
            )));
        }
        let mut rng = crate::rng(config.seed);
        let mut store = ParamStore::new();
        let perception = Perception::new(&mut store, p, &mut rng)?;
        let dims = SteeringDims { d_model: p.d_model, d_scene: generator.scene_dim(), d: generator.hidden_size() };
        let (conduit, classifier) = match config.head {
            HeadMode::Generative => (Some(SteeringConduit::new(&mut store, &config.steering, dims, &mut rng)?), None),
            HeadMode::Classifier => {
                let d_in = dims.d_model + dims.d_scene;
                (None, Some(Mlp::new(&mut store, "classifier", d_in, dims.d, vocab.len(), &mut rng)))
            }
        };
        Ok(Self {
            config,
            store,
            perception,
            conduit,
            classifier,
            generator,
            vocab,
            detector,
            objects: objects.to_vec(),
            inquiry,
            verb_embeddings,
        })
    }

    pub fn inquiry(&self) -> &[usize] {
        &self.inquiry
    }

    pub fn verbs(&self) -> &[String] {
        self.vocab.phrases()
    }

    /// Digest of every frozen component (generator and detector stand-in).
    pub fn frozen_checksum(&self) -> String {
        format!("{}:{}", self.generator.checksum(), self.detector.checksum())
    }

    /// Runs the stand-in detector (seeded by `key`) and the frozen scene
    /// encoder.
    pub fn prepare(&self, sample: &HoiSample<T>, key: u64) -> Result<Prepared<T>> {
        let mut rng = crate::rng(self.config.detector.seed ^ key.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let raster = self.detector.raster(sample, self.config.generator.raster_cells)?;
        let detections = self.detector.detect_in(sample, &raster, &mut rng)?;
        let scene = self.generator.encode_scene(&raster)?;
        let f_global = Mat::row_vector(scene_token(&scene.patches)?);
        let pairs = enumerate_pairs(&detections);
        let mut geo = Vec::with_capacity(pairs.len());
        for &(h, o) in &pairs {
            let v = geometric_encoding(&detections[h].bbox, &detections[o].bbox, sample.width, sample.height)?;
            geo.push(v.as_slice().to_vec());
        }
        let geometry =
            if geo.is_empty() { Mat::zeros(0, crate::geometry::GEOMETRY_DIM) } else { Mat::from_rows(&geo)? };
        let rows = |f: &dyn Fn(&EntityDetection<T>) -> Vec<T>, width: usize| -> Result<Mat<T>> {
            if detections.is_empty() {
                return Ok(Mat::zeros(0, width));
            }
            Mat::from_rows(&detections.iter().map(f).collect::<Vec<_>>())
        };
        let inputs = PerceptionInputs {
            instance: rows(&|d| d.instance_token.clone(), self.config.perception.d_z)?,
            appearance: rows(&|d| d.appearance_token.clone(), self.config.perception.d_a)?,
            confidences: detections.iter().map(|d| d.confidence).collect(),
            categories: detections.iter().map(|d| d.category).collect(),
            pairs,
            geometry,
        };
        let gt = sample
            .interactions
            .iter()
            .map(|it| {
                let pb = PairBoxes {
                    human: sample.entities[it.human].bbox,
                    object: sample.entities[it.object].bbox,
                    category: sample.entities[it.object].category,
                };
                (pb, it.verb)
            })
            .collect();
        Ok(Prepared { image_id: sample.image_id.clone(), detections, inputs, raster, scene, f_global, gt })
    }

    fn candidate_boxes(&self, prep: &Prepared<T>, pairs: &[CandidatePair<T>]) -> Vec<PairBoxes<T>> {
        pairs
            .iter()
            .map(|p| PairBoxes {
                human: prep.detections[p.human_index].bbox,
                object: prep.detections[p.object_index].bbox,
                category: prep.detections[p.object_index].category,
            })
            .collect()
    }

    /// Kernel (generative head) for candidate token `v` (`1 x d_model`).
    pub fn kernel_var(&self, g: &mut Graph<'_, T>, v: Var, f_global: Var) -> Result<Var> {
        let conduit =
            self.conduit.as_ref().ok_or_else(|| Error::InvalidArgument("classifier head has no kernel".into()))?;
        Ok(conduit.kernel(g, v, f_global)?.kernel)
    }

    pub(crate) fn classifier_logits(&self, g: &mut Graph<'_, T>, v: Var, f_global: Var) -> Var {
        let mlp = self.classifier.as_ref().expect("classifier head");
        let x = g.hconcat(&[v, f_global]);
        mlp.forward(g, x)
    }

    /// Builds the weighted loss of one image in `g`; returns the total node
    /// and the component values. `None` when the image has no candidate.
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_, T>,
        prep: &Prepared<T>,
        weights: &LossWeights,
        exclusions: &ExclusionSet,
    ) -> Result<Option<(Var, [f64; 5])>> {
        let out = self.perception.forward(g, &prep.inputs)?;
        let (Some(ctx), Some(logits)) = (out.contextual, out.logits) else {
            return Ok(None);
        };
        let cands = self.candidate_boxes(prep, &out.pairs);
        let cost: Vec<Vec<f64>> =
            prep.gt.iter().map(|(gt, _)| cands.iter().map(|c| pair_cost(gt, c)).collect()).collect();
        let assignment = hungarian(&cost);
        let mut labels = vec![false; cands.len()];
        let mut positives = Vec::new();
        for (gi, c) in assignment.into_iter().enumerate() {
            if let Some(c) = c {
                labels[c] = true;
                positives.push((c, prep.gt[gi].1));
            }
        }
        let mut parts = LossComponents { sal: Some(loss_salience(g, logits, &labels)?), ..Default::default() };
        if !positives.is_empty() {
            let fg = g.constant(prep.f_global.clone());
            let (mut gen, mut nce, mut logic) = (Vec::new(), Vec::new(), Vec::new());
            let bank = NegativeBank::for_vocabulary(self.vocab.len());
            let mut neg_rng = crate::rng(0);
            for &(k, verb) in &positives {
                let v = g.row(ctx, k);
                match self.config.head {
                    HeadMode::Generative => {
                        let kernel = self.kernel_var(g, v, fg)?;
                        let target = self.vocab.target(verb)?;
                        let out = loss_generative(
                            g,
                            self.generator.as_ref(),
                            Some(kernel),
                            &self.inquiry,
                            &target,
                            self.vocab.mask(),
                        )?;
                        gen.push(out.loss);
                        if weights.lambda_nce > 0.0 && self.vocab.len() > 1 {
                            let negs = bank.negatives(verb, &mut neg_rng);
                            nce.push(loss_nce(g, kernel, verb, &negs, &self.verb_embeddings, T::of(weights.tau))?);
                        }
                        if weights.lambda_logic > 0.0 && !exclusions.is_empty() {
                            let mask = weights.logic_masked.then(|| self.vocab.mask());
                            let probs = first_step_verb_probs(g, out.first_logits, &self.vocab, mask);
                            logic.push(loss_logic(g, probs, exclusions)?);
                        }
                    }
                    HeadMode::Classifier => {
                        let logits = self.classifier_logits(g, v, fg);
                        let lp = g.log_softmax(logits);
                        let picked = g.pick(lp, &[(0, verb.0)]);
                        gen.push(g.scale(picked, -T::one()));
                    }
                }
            }
            let mut avg = |terms: Vec<Var>| -> Option<Var> {
                let n = terms.len();
                let s = g.add_all(&terms)?;
                Some(g.scale(s, T::one() / T::of(n as f64)))
            };
            parts.gen = avg(gen);
            parts.nce = avg(nce);
            parts.logic = avg(logic);
        }
        let total = total_loss(g, &parts, weights)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v).as_f64());
        let comps = [value(parts.det), value(parts.sal), value(parts.gen), value(parts.nce), value(parts.logic)];
        if let Some(i) = comps.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss(COMPONENT_NAMES[i]));
        }
        Ok(Some((total, comps)))
    }

    /// Loss and parameter gradients of one image.
    pub fn sample_loss(
        &self,
        prep: &Prepared<T>,
        weights: &LossWeights,
        exclusions: &ExclusionSet,
    ) -> Result<SampleLoss<T>> {
        let mut g = Graph::with_params(&self.store);
        match self.loss_graph(&mut g, prep, weights, exclusions)? {
            None => Ok(SampleLoss { components: [0.0; 5], total: 0.0, grads: Vec::new() }),
            Some((total, components)) => {
                let grads = g.backward(total).param_grads(&g);
                Ok(SampleLoss { components, total: g.scalar(total).as_f64(), grads })
            }
        }
    }

    /// Scores, selects, and labels candidates of one image.
    pub fn predict(&self, prep: &Prepared<T>) -> Result<Vec<CandidatePrediction<T>>> {
        let mut g = Graph::with_params(&self.store);
        let mut out = self.perception.forward(&mut g, &prep.inputs)?;
        let Some(ctx) = out.contextual else {
            return Ok(Vec::new());
        };
        let selected = self.perception.select(&mut out);
        let fg = g.constant(prep.f_global.clone());
        let mut preds = Vec::with_capacity(selected.len());
        for k in selected {
            let v = g.row(ctx, k);
            let pair = out.pairs[k].clone();
            let r = pair.refined;
            let pred = match self.config.head {
                HeadMode::Generative => {
                    let kernel = self.kernel_var(&mut g, v, fg)?;
                    let res = self.decode_kernel(g.value(kernel))?;
                    CandidatePrediction {
                        score: r * sigmoid(res.score),
                        verb: res.verb,
                        phrase: res.phrase,
                        tokens: res.tokens,
                        verb_score: res.score,
                        pair,
                    }
                }
                HeadMode::Classifier => {
                    let logits = self.classifier_logits(&mut g, v, fg);
                    let lp = log_softmax(g.value(logits).row(0));
                    let (best, &lpb) =
                        lp.iter().enumerate().fold((0, &lp[0]), |acc, (i, x)| if *x > *acc.1 { (i, x) } else { acc });
                    let verb = VerbId(best);
                    CandidatePrediction {
                        score: r * lpb.exp(),
                        verb: Some(verb),
                        phrase: self.vocab.phrase(verb)?.to_string(),
                        tokens: Vec::new(),
                        verb_score: lpb,
                        pair,
                    }
                }
            };
            preds.push(pred);
        }
        Ok(preds)
    }

    pub fn decode_kernel(&self, kernel: &Mat<T>) -> Result<GenerationResult<T>> {
        decode(
            kernel,
            &self.inquiry,
            &self.vocab,
            self.generator.as_ref(),
            self.config.max_decode_len,
            self.config.decode,
        )
    }

    /// Triplets of the selected candidates that decoded to a verb.
    pub fn triplets(&self, prep: &Prepared<T>, preds: &[CandidatePrediction<T>]) -> Result<Vec<HoiTriplet<T>>> {
        preds
            .iter()
            .filter_map(|p| p.verb.map(|v| (p, v)))
            .map(|(p, v)| {
                let h = &prep.detections[p.pair.human_index];
                let o = &prep.detections[p.pair.object_index];
                HoiTriplet::new(h.bbox, o.bbox, o.category, v, p.score.max(T::zero()).min(T::one()))
            })
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            verbs: self.vocab.phrases().to_vec(),
            objects: self.objects.clone(),
            generator_checksum: self.generator.checksum(),
            params: self
                .store
                .ids()
                .map(|id| {
                    let m = self.store.value(id);
                    SavedParam {
                        name: self.store.name(id).to_string(),
                        rows: m.rows(),
                        cols: m.cols(),
                        data: m.to_f64_vec(),
                    }
                })
                .collect(),
        }
    }

    /// Rebuilds a model from a checkpoint, checking it against the expected
    /// vocabularies.
    pub fn from_checkpoint(ck: &Checkpoint, verbs: &[String], objects: &[String]) -> Result<Self> {
        if ck.verbs != verbs {
            return Err(Error::CheckpointMismatch(format!("verb vocabulary {:?} vs configured {:?}", ck.verbs, verbs)));
        }
        if ck.objects != objects {
            return Err(Error::CheckpointMismatch(format!(
                "object vocabulary {:?} vs configured {:?}",
                ck.objects, objects
            )));
        }
        let mut model = Self::new(ck.config.clone(), verbs, objects)?;
        if model.generator.checksum() != ck.generator_checksum {
            return Err(Error::CheckpointMismatch("generator weights differ from the checkpoint's".into()));
        }
        model.load_params(&ck.params)?;
        Ok(model)
    }

    pub fn load_params(&mut self, params: &[SavedParam]) -> Result<()> {
        if params.len() != self.store.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} saved tensors, model has {}",
                params.len(),
                self.store.len()
            )));
        }
        for p in params {
            let id = self
                .store
                .find(&p.name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("unknown tensor {}", p.name)))?;
            let slot = self.store.value_mut(id);
            if slot.shape() != (p.rows, p.cols) {
                return Err(Error::CheckpointMismatch(format!("tensor {} has shape {}x{}", p.name, p.rows, p.cols)));
            }
            *slot = Mat::from_f64(p.rows, p.cols, &p.data)?;
        }
        Ok(())
    }
}
