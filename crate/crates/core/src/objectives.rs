//! Training objective: salience, generative, contrastive and logic terms.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::generator::{Generator, VerbVocabulary};
use crate::geometry::{iou, BoundingBox};
use crate::scalar::Scalar;
use crate::steering::assemble_prefix_graph;
use crate::tensor::Mat;
use crate::types::{CategoryId, EntityDetection, VerbId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_det: f64,
    pub lambda_sal: f64,
    pub lambda_gen: f64,
    pub lambda_nce: f64,
    pub lambda_logic: f64,
    pub tau: f64,
    /// Logic loss reads the verb-masked first-step softmax when set.
    pub logic_masked: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_det: 0.0,
            lambda_sal: 1.0,
            lambda_gen: 1.0,
            lambda_nce: 0.5,
            lambda_logic: 0.1,
            tau: 0.07,
            logic_masked: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_det, self.lambda_sal, self.lambda_gen, self.lambda_nce, self.lambda_logic];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be finite and non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// Unordered pairs of mutually exclusive verbs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExclusionSet {
    pairs: Vec<(VerbId, VerbId)>,
}

impl ExclusionSet {
    pub fn new(pairs: &[(VerbId, VerbId)], num_verbs: usize) -> Result<Self> {
        let mut out: Vec<(VerbId, VerbId)> = Vec::with_capacity(pairs.len());
        for &(a, b) in pairs {
            if a == b {
                return Err(Error::InvalidArgument(format!("exclusion pair ({a}, {b}) repeats a verb")));
            }
            if a.0 >= num_verbs || b.0 >= num_verbs {
                return Err(Error::UnknownVerb(format!("exclusion pair ({a}, {b})")));
            }
            let p = (a.min(b), a.max(b));
            if !out.contains(&p) {
                out.push(p);
            }
        }
        Ok(Self { pairs: out })
    }

    /// One `verbA<TAB>verbB` line per pair, using canonical phrases.
    pub fn parse(text: &str, vocab: &VerbVocabulary) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| Error::MalformedRecord { index: i, message: "expected verbA<TAB>verbB".into() })?;
            let find = |p: &str| vocab.find(p.trim()).ok_or_else(|| Error::UnknownVerb(p.trim().to_string()));
            pairs.push((find(a)?, find(b)?));
        }
        Self::new(&pairs, vocab.len())
    }

    pub fn load(path: &Path, vocab: &VerbVocabulary) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, vocab)
    }

    pub fn pairs(&self) -> &[(VerbId, VerbId)] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn excludes(&self, a: VerbId, b: VerbId) -> bool {
        self.pairs.contains(&(a.min(b), a.max(b)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    /// Every other verb.
    All,
    /// A fixed number of uniformly drawn non-positive verbs.
    Sampled(usize),
}

/// Negative verbs per anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeBank {
    pub strategy: NegativeStrategy,
    pub num_verbs: usize,
}

impl NegativeBank {
    /// Exhaustive negatives up to 64 verbs, else 32 sampled.
    pub fn for_vocabulary(num_verbs: usize) -> Self {
        let strategy = if num_verbs <= 64 { NegativeStrategy::All } else { NegativeStrategy::Sampled(32) };
        Self { strategy, num_verbs }
    }

    pub fn negatives<R: Rng + ?Sized>(&self, anchor: VerbId, rng: &mut R) -> Vec<VerbId> {
        let others: Vec<VerbId> = (0..self.num_verbs).filter(|&v| v != anchor.0).map(VerbId).collect();
        match self.strategy {
            NegativeStrategy::Sampled(k) if k < others.len() => {
                let mut idx = sample(rng, others.len(), k).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| others[i]).collect()
            }
            _ => others,
        }
    }
}

/// Minimum-cost assignment of rows to columns (rectangular allowed).
/// Entries may be `+inf` to forbid an assignment; forbidden pairs are never
/// returned. Result: for each row, its column (if any).
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    if m == 0 {
        return vec![None; n];
    }
    let finite_max = cost.iter().flatten().filter(|c| c.is_finite()).fold(0.0f64, |a, &c| a.max(c.abs()));
    let big = (finite_max + 1.0) * (n.max(m) as f64 + 1.0) * 4.0;
    let transposed = n > m;
    let (rows, cols) = if transposed { (m, n) } else { (n, m) };
    let at = |i: usize, j: usize| {
        let c = if transposed { cost[j][i] } else { cost[i][j] };
        if c.is_finite() {
            c
        } else {
            big
        }
    };
    // potentials-based O(rows^2 cols) shortest augmenting path, 1-indexed
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for (j, &pj) in p.iter().enumerate().skip(1) {
        if pj != 0 {
            let (r, c) = if transposed { (j - 1, pj - 1) } else { (pj - 1, j - 1) };
            if cost[r][c].is_finite() {
                out[r] = Some(c);
            }
        }
    }
    out
}

/// A human-object box pair with the object's category.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairBoxes<T> {
    pub human: BoundingBox<T>,
    pub object: BoundingBox<T>,
    pub category: CategoryId,
}

/// `1 - min(IoU_h, IoU_o)`, infinite for a category mismatch.
pub fn pair_cost<T: Scalar>(a: &PairBoxes<T>, b: &PairBoxes<T>) -> f64 {
    if a.category != b.category {
        return f64::INFINITY;
    }
    1.0 - iou(&a.human, &b.human).min(iou(&a.object, &b.object)).as_f64()
}

/// Candidate labels from a one-to-one assignment of ground-truth pairs
/// (duplicates of the same box pair collapse) to candidates.
pub fn salience_labels<T: Scalar>(gts: &[PairBoxes<T>], candidates: &[PairBoxes<T>]) -> Vec<bool> {
    let mut labels = vec![false; candidates.len()];
    let cost: Vec<Vec<f64>> = gts.iter().map(|g| candidates.iter().map(|c| pair_cost(g, c)).collect()).collect();
    for c in hungarian(&cost).into_iter().flatten() {
        labels[c] = true;
    }
    labels
}

/// Mean binary cross-entropy of `N x 1` logits against labels.
pub fn loss_salience<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, labels: &[bool]) -> Result<Var> {
    let (n, c) = g.shape(logits);
    if c != 1 || n != labels.len() || n == 0 {
        return Err(Error::Shape(format!("salience logits {n}x{c} for {} labels", labels.len())));
    }
    let y = Mat::from_vec(n, 1, labels.iter().map(|&l| if l { T::one() } else { T::zero() }).collect())?;
    let one_minus = y.map(|v| T::one() - v);
    let pos = g.log_sigmoid(logits);
    let neg_logits = g.scale(logits, -T::one());
    let neg = g.log_sigmoid(neg_logits);
    let yv = g.constant(y);
    let nv = g.constant(one_minus);
    let a = g.mul(pos, yv);
    let b = g.mul(neg, nv);
    let ll = g.add(a, b);
    let m = g.mean(ll);
    Ok(g.scale(m, -T::one()))
}

/// Probability-space BCE, for inspection and tests.
pub fn bce<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<T> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    let tiny = T::of(1e-300f64.max(T::min_positive_value().as_f64()));
    let total: T = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| if y { -(s.max(tiny)).ln() } else { -((T::one() - s).max(tiny)).ln() })
        .sum();
    Ok(total / T::of(scores.len() as f64))
}

/// Row of 0 / -inf over the generator vocabulary.
fn additive_mask<T: Scalar>(mask: &[bool]) -> Mat<T> {
    Mat::row_vector(mask.iter().map(|&m| if m { T::zero() } else { T::neg_infinity() }).collect())
}

#[derive(Clone, Debug)]
pub struct GenerativeOutput {
    /// `-sum_t log p(y_t | y_<t, Q)` under the mask.
    pub loss: Var,
    /// Unmasked logits at the step predicting the first target token (`1 x V`).
    pub first_logits: Var,
}

/// Teacher-forced, mask-restricted cross-entropy of `target` after
/// `[kernel; E(inquiry)]`.
pub fn loss_generative<T: Scalar, G: Generator<T> + ?Sized>(
    g: &mut Graph<'_, T>,
    gen: &G,
    kernel: Option<Var>,
    inquiry: &[usize],
    target: &[usize],
    mask: &[bool],
) -> Result<GenerativeOutput> {
    if target.is_empty() {
        return Err(Error::InvalidArgument("empty target".into()));
    }
    if mask.len() != gen.vocab_size() {
        return Err(Error::Shape(format!("mask over {} tokens, vocabulary has {}", mask.len(), gen.vocab_size())));
    }
    for &t in target {
        if !mask.get(t).copied().unwrap_or(false) {
            let word = gen.tokenizer().word(t).unwrap_or("?").to_string();
            return Err(Error::TargetOutsideMask { token: t, word });
        }
    }
    let prefix = assemble_prefix_graph(g, kernel, inquiry, gen)?;
    let input = if target.len() > 1 {
        let tf = g.constant(gen.embed_text(&target[..target.len() - 1])?);
        g.vconcat(&[prefix, tf])
    } else {
        prefix
    };
    let logits = gen.forward(g, input)?;
    let p = g.shape(prefix).0;
    let steps = g.slice_rows(logits, p - 1, target.len());
    let first_logits = g.row(steps, 0);
    let m = g.constant(additive_mask(mask));
    let masked = g.add_row(steps, m);
    let lp = g.log_softmax(masked);
    let entries: Vec<(usize, usize)> = target.iter().enumerate().map(|(i, &t)| (i, t)).collect();
    let picked = g.pick(lp, &entries);
    let s = g.sum(picked);
    Ok(GenerativeOutput { loss: g.scale(s, -T::one()), first_logits })
}

/// Per-verb first-token probabilities (`1 x |V|`) from first-step logits.
pub fn first_step_verb_probs<T: Scalar>(
    g: &mut Graph<'_, T>,
    first_logits: Var,
    vocab: &VerbVocabulary,
    mask: Option<&[bool]>,
) -> Var {
    let logits = match mask {
        Some(m) => {
            let mv = g.constant(additive_mask(m));
            g.add(first_logits, mv)
        }
        None => first_logits,
    };
    let p = g.softmax(logits);
    let entries: Vec<(usize, usize)> = vocab.first_tokens().into_iter().map(|t| (0, t)).collect();
    g.pick(p, &entries)
}

/// Frozen verb embeddings: row `v` is the mean token embedding of phrase `v`.
pub fn verb_embeddings<T: Scalar, G: Generator<T> + ?Sized>(gen: &G, vocab: &VerbVocabulary) -> Result<Mat<T>> {
    let rows =
        vocab.ids().map(|v| crate::generator::phrase_embedding(gen, vocab.tokens(v)?)).collect::<Result<Vec<_>>>()?;
    Mat::from_rows(&rows)
}

/// InfoNCE between the mean kernel row and the positive verb embedding,
/// against `negatives`, on cosine similarities at temperature `tau`.
pub fn loss_nce<T: Scalar>(
    g: &mut Graph<'_, T>,
    kernel: Var,
    positive: VerbId,
    negatives: &[VerbId],
    verb_embeddings: &Mat<T>,
    tau: T,
) -> Result<Var> {
    if !(tau > T::zero()) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("at least one negative is required".into()));
    }
    let nv = verb_embeddings.rows();
    if let Some(bad) = std::iter::once(&positive).chain(negatives).find(|v| v.0 >= nv) {
        return Err(Error::UnknownVerb(bad.to_string()));
    }
    if negatives.contains(&positive) {
        return Err(Error::InvalidArgument("positive verb listed among its negatives".into()));
    }
    let eps = T::of(1e-12);
    let q = g.mean_rows(kernel);
    let q = g.l2_normalize(q, eps);
    let w = verb_embeddings.normalize_l2_rows(eps);
    let wt = g.constant(w.transpose());
    let sims = g.matmul(q, wt);
    let mut entries = vec![(0, positive.0)];
    entries.extend(negatives.iter().map(|v| (0, v.0)));
    let picked = g.pick(sims, &entries);
    let scaled = g.scale(picked, T::one() / tau);
    let lp = g.log_softmax(scaled);
    let first = g.pick(lp, &[(0, 0)]);
    Ok(g.scale(first, -T::one()))
}

/// InfoNCE on precomputed cosines (`cos[0]` is the positive).
pub fn info_nce_from_cosines<T: Scalar>(cos: &[T], tau: T) -> Result<T> {
    if !(tau > T::zero()) || cos.len() < 2 {
        return Err(Error::InvalidArgument("need tau > 0 and at least one negative".into()));
    }
    let z: Vec<T> = cos.iter().map(|&c| c / tau).collect();
    Ok(-crate::tensor::log_softmax(&z)[0])
}

/// `sum_{(v, v') in M} min(p(v), p(v'))` over a `1 x |V|` probability row.
pub fn loss_logic<T: Scalar>(g: &mut Graph<'_, T>, probs: Var, exclusions: &ExclusionSet) -> Result<Var> {
    let (_, nv) = g.shape(probs);
    let mut terms = Vec::with_capacity(exclusions.pairs().len());
    for &(a, b) in exclusions.pairs() {
        if a.0 >= nv || b.0 >= nv {
            return Err(Error::UnknownVerb(format!("exclusion pair ({a}, {b})")));
        }
        let pa = g.pick(probs, &[(0, a.0)]);
        let pb = g.pick(probs, &[(0, b.0)]);
        terms.push(g.min(pa, pb));
    }
    Ok(match g.add_all(&terms) {
        Some(s) => s,
        None => g.constant(Mat::zeros(1, 1)),
    })
}

/// Externally computed set-based detection loss.
pub trait DetectionLoss<T: Scalar>: Send + Sync {
    fn compute(&self, g: &mut Graph<'_, T>, detections: &[EntityDetection<T>]) -> Result<Option<Var>>;
}

/// The default hook for a frozen detector: contributes nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct FrozenDetector;

impl<T: Scalar> DetectionLoss<T> for FrozenDetector {
    fn compute(&self, _: &mut Graph<'_, T>, _: &[EntityDetection<T>]) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// Graph nodes of each loss term (absent terms count as zero).
#[derive(Clone, Debug, Default)]
pub struct LossComponents {
    pub det: Option<Var>,
    pub sal: Option<Var>,
    pub gen: Option<Var>,
    pub nce: Option<Var>,
    pub logic: Option<Var>,
}

pub const COMPONENT_NAMES: [&str; 5] = ["det", "sal", "gen", "nce", "logic"];

impl LossComponents {
    fn named(&self) -> [(&'static str, Option<Var>); 5] {
        [("det", self.det), ("sal", self.sal), ("gen", self.gen), ("nce", self.nce), ("logic", self.logic)]
    }
}

/// Weighted sum of the components; errors naming the first non-finite one.
pub fn total_loss<T: Scalar>(g: &mut Graph<'_, T>, parts: &LossComponents, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let lambdas = [w.lambda_det, w.lambda_sal, w.lambda_gen, w.lambda_nce, w.lambda_logic];
    let mut terms = Vec::new();
    for ((name, v), lambda) in parts.named().into_iter().zip(lambdas) {
        if let Some(v) = v {
            if !g.value(v).is_finite() {
                return Err(Error::NonFiniteLoss(name));
            }
            if lambda != 0.0 {
                terms.push(g.scale(v, T::of(lambda)));
            }
        }
    }
    Ok(match g.add_all(&terms) {
        Some(s) => s,
        None => g.constant(Mat::zeros(1, 1)),
    })
}

/// Scalar form of [`total_loss`] over `(det, sal, gen, nce, logic)` values.
pub fn total_loss_value(values: [f64; 5], w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let lambdas = [w.lambda_det, w.lambda_sal, w.lambda_gen, w.lambda_nce, w.lambda_logic];
    let mut s = 0.0;
    for ((v, l), name) in values.iter().zip(lambdas).zip(COMPONENT_NAMES) {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
        s += l * v;
    }
    Ok(s)
}

#[cfg(test)]
mod tests;
