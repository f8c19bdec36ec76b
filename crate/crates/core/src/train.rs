//! Mini-batch AdamW training of the learnable modules.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HoiModel, Prepared};
use crate::nn::ParamStore;
use crate::objectives::{ExclusionSet, LossWeights, COMPONENT_NAMES};
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warm-up steps before the cosine decay.
    pub warmup: usize,
    /// Global gradient-norm clip; off when `None`.
    pub clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            lr: 5e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 10,
            clip: Some(5.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch > 0
            && self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("training config {self:?}")))
        }
    }

    /// Learning rate at `step` (0-based): linear warm-up, then cosine to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: &TrainConfig) -> Self {
        let zeros: Vec<Mat<T>> = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                Mat::zeros(r, c)
            })
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
        }
    }

    /// Applies one update; `grads` is indexed by parameter id.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Mat<T>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.value_mut(id);
            let decay = T::of(1.0 - lr * self.weight_decay);
            for (((w, m), v), &g) in
                w.as_mut_slice().iter_mut().zip(m.as_mut_slice()).zip(v.as_mut_slice()).zip(g.as_slice())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = m.as_f64() / bc1;
                let vh = v.as_f64() / bc2;
                *w = *w * decay - T::of(lr * mh / (vh.sqrt() + self.eps));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    /// Mean weighted total over the batch.
    pub loss: f64,
    /// Mean of each raw component, in `det, sal, gen, nce, logic` order.
    pub components: [f64; 5],
}

impl StepLog {
    pub fn line(&self) -> String {
        let parts: Vec<String> =
            COMPONENT_NAMES.iter().zip(self.components).map(|(n, v)| format!("{n}={v:.4}")).collect();
        format!("step {:4} lr {:.2e} loss {:.4} [{}]", self.step, self.lr, self.loss, parts.join(" "))
    }
}

/// Mean loss, mean components, and per-parameter gradient sums.
type BatchResult<T> = (f64, [f64; 5], Vec<Option<Mat<T>>>);

/// Mean loss and gradient sum over a batch, computed in parallel and reduced
/// in batch order so results do not depend on the thread count.
fn batch_gradients<T: Scalar>(
    model: &HoiModel<T>,
    batch: &[&Prepared<T>],
    weights: &LossWeights,
    exclusions: &ExclusionSet,
) -> Result<BatchResult<T>> {
    let results: Vec<_> = batch.par_iter().map(|p| model.sample_loss(p, weights, exclusions)).collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut grads: Vec<Option<Mat<T>>> = vec![None; model.store.len()];
    let (mut loss, mut comps) = (0.0, [0.0; 5]);
    for r in results {
        loss += r.total / n;
        for (c, v) in comps.iter_mut().zip(r.components) {
            *c += v / n;
        }
        for (id, g) in r.grads {
            match &mut grads[id.index()] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
    }
    let inv = T::of(1.0 / n);
    for g in grads.iter_mut().flatten() {
        *g = g.scale(inv);
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss("total"));
    }
    Ok((loss, comps, grads))
}

fn clip_norm<T: Scalar>(grads: &mut [Option<Mat<T>>], max_norm: f64) {
    let norm = grads.iter().flatten().flat_map(|g| g.as_slice()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            *g = g.scale(k);
        }
    }
}

/// Trains `model` in place on `data`; `on_step` sees every log entry.
/// The generator and detector stand-in stay untouched.
pub fn train<T: Scalar>(
    model: &mut HoiModel<T>,
    data: &[Prepared<T>],
    weights: &LossWeights,
    exclusions: &ExclusionSet,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    config.validate()?;
    weights.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let frozen = model.frozen_checksum();
    let mut opt = AdamW::new(&model.store, config);
    let mut rng = crate::rng(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut logs = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch.min(data.len()) {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&data[order.pop().expect("refilled")]);
        }
        let (loss, components, mut grads) = batch_gradients(model, &batch, weights, exclusions)?;
        if let Some(c) = config.clip {
            clip_norm(&mut grads, c);
        }
        let lr = config.lr_at(step);
        opt.step(&mut model.store, &grads, lr);
        let log = StepLog { step, lr, loss, components };
        on_step(&log);
        logs.push(log);
    }
    assert_eq!(frozen, model.frozen_checksum(), "frozen components changed during training");
    Ok(logs)
}

/// Mean weighted loss and components over `data`, without updating.
pub fn dataset_loss<T: Scalar>(
    model: &HoiModel<T>,
    data: &[Prepared<T>],
    weights: &LossWeights,
    exclusions: &ExclusionSet,
) -> Result<(f64, [f64; 5])> {
    let results: Vec<(f64, [f64; 5])> = data
        .par_iter()
        .map(|p| {
            let mut g = crate::autograd::Graph::with_params(&model.store);
            Ok(match model.loss_graph(&mut g, p, weights, exclusions)? {
                Some((total, comps)) => (g.scalar(total).as_f64(), comps),
                None => (0.0, [0.0; 5]),
            })
        })
        .collect::<Result<_>>()?;
    let n = data.len().max(1) as f64;
    let mut comps = [0.0; 5];
    let mut loss = 0.0;
    for (l, c) in results {
        loss += l / n;
        for (a, b) in comps.iter_mut().zip(c) {
            *a += b / n;
        }
    }
    Ok((loss, comps))
}
