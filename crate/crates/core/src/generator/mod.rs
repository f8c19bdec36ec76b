//! Frozen generator contract, a deterministic toy implementation,
//! constrained decoding and verb mapping.

mod tokenizer;
mod toy;
mod vocab;

pub use tokenizer::{Tokenizer, BOS, EOS, PAD};
pub use toy::{ToyGenerator, ToyGeneratorConfig};
pub use vocab::VerbVocabulary;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::steering::assemble_prefix;
use crate::tensor::{cosine, log_softmax, Mat};
use crate::types::VerbId;

/// Fixed inquiry appended after the visual kernel.
pub const INQUIRY: &str = "<bos> what is the person doing with the object ?";

/// Per-call key/value cache of an autoregressive decoder.
#[derive(Clone, Debug)]
pub struct DecodeState<T> {
    pub keys: Vec<Mat<T>>,
    pub values: Vec<Mat<T>>,
    /// Number of positions consumed so far.
    pub len: usize,
}

impl<T: Scalar> DecodeState<T> {
    pub fn new(layers: usize) -> Self {
        Self { keys: vec![Mat::zeros(0, 0); layers], values: vec![Mat::zeros(0, 0); layers], len: 0 }
    }
}

/// Frozen scene-encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneEncoding<T> {
    /// `P x D_g` last-layer patch features.
    pub patches: Mat<T>,
    /// `P x P` self-attention weights averaged over heads (row = query).
    pub attention: Mat<T>,
}

/// Behavioral contract of a frozen multimodal generator.
///
/// Implementations must never change their weights; `checksum` exposes a
/// digest so callers can verify that. Both the differentiable `forward`
/// and the cached `decode_step` must compute the same function.
pub trait Generator<T: Scalar>: Send + Sync {
    fn hidden_size(&self) -> usize;
    fn scene_dim(&self) -> usize;
    fn max_positions(&self) -> usize;
    fn tokenizer(&self) -> &Tokenizer;

    fn vocab_size(&self) -> usize {
        self.tokenizer().len()
    }

    /// `T x d` token embeddings.
    fn embed_text(&self, ids: &[usize]) -> Result<Mat<T>>;

    /// Next-token logits for every row of the `n x d` input embeddings,
    /// causally masked; the weights enter the graph as constants.
    fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var>;

    fn new_state(&self) -> DecodeState<T>;

    /// Appends `x` (rows of embeddings) to the cached sequence and returns
    /// the next-token logits after the last appended row.
    fn decode_step(&self, x: &Mat<T>, state: &mut DecodeState<T>) -> Result<Vec<T>>;

    /// Differentiable scene encoding of a `(cells) x 3` raster node:
    /// `(patch features, head-averaged attention)`.
    fn encode_scene_graph(&self, g: &mut Graph<'_, T>, pixels: Var) -> Result<(Var, Var)>;

    fn encode_scene(&self, image: &Raster) -> Result<SceneEncoding<T>>;

    fn checksum(&self) -> String;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Logits outside the verb mask (plus eos) are removed at every step.
    Constrained,
    /// As `Constrained`, and the greedy choice is further limited to
    /// continuations of verb phrases, so every output is a whole phrase
    /// followed by eos. Scores still use the token-masked distribution.
    #[default]
    Phrases,
    /// Plain greedy decoding over the full vocabulary.
    Open,
}

/// Tokens that may follow `prefix` while spelling out one of `phrases`;
/// eos is admitted once `prefix` is a complete phrase.
fn phrase_continuations(prefix: &[usize], phrases: &[&[usize]]) -> Vec<usize> {
    let mut next = BTreeSet::new();
    for p in phrases {
        if p.starts_with(prefix) {
            next.insert(p.get(prefix.len()).copied().unwrap_or(EOS));
        }
    }
    next.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult<T> {
    pub candidate: usize,
    pub tokens: Vec<usize>,
    pub phrase: String,
    /// `None` is the no-interaction sentinel.
    pub verb: Option<VerbId>,
    /// Mean per-token log-probability of the emitted sequence (including eos).
    pub score: T,
}

/// Sets logits outside `mask` to `-inf`.
pub fn apply_mask<T: Scalar>(logits: &mut [T], mask: &[bool]) -> Result<()> {
    if logits.len() != mask.len() {
        return Err(Error::Shape(format!("{} logits vs {} mask entries", logits.len(), mask.len())));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask);
    }
    for (l, &m) in logits.iter_mut().zip(mask) {
        if !m {
            *l = T::neg_infinity();
        }
    }
    Ok(())
}

/// Greedy decoding after `[kernel; E(inquiry)]`.
pub fn decode<T: Scalar, G: Generator<T> + ?Sized>(
    kernel: &Mat<T>,
    inquiry: &[usize],
    vocab: &VerbVocabulary,
    gen: &G,
    max_len: usize,
    mode: DecodeMode,
) -> Result<GenerationResult<T>> {
    decode_with_mask(kernel, inquiry, vocab, gen, max_len, mode, None)
}

/// As [`decode`] with an explicit constraint mask (must include the tokens
/// that may end the sequence).
pub fn decode_with_mask<T: Scalar, G: Generator<T> + ?Sized>(
    kernel: &Mat<T>,
    inquiry: &[usize],
    vocab: &VerbVocabulary,
    gen: &G,
    max_len: usize,
    mode: DecodeMode,
    mask: Option<&[bool]>,
) -> Result<GenerationResult<T>> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let owned;
    let mask = match (mode, mask) {
        (DecodeMode::Open, _) => None,
        (DecodeMode::Constrained | DecodeMode::Phrases, Some(m)) => Some(m),
        (DecodeMode::Constrained | DecodeMode::Phrases, None) => {
            owned = vocab.decoding_mask();
            Some(owned.as_slice())
        }
    };
    if let Some(m) = mask {
        if !m.iter().any(|&b| b) {
            return Err(Error::EmptyMask);
        }
    }
    // Phrases that fit in `max_len` tokens and survive the mask.
    let phrases: Vec<&[usize]> = match mode {
        DecodeMode::Phrases => {
            let ok = |t: usize| mask.is_none_or(|m| m.get(t).copied().unwrap_or(false));
            let fits: Vec<&[usize]> = vocab
                .ids()
                .map(|v| vocab.tokens(v))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|p| p.len() <= max_len && p.iter().all(|&t| ok(t)) && (p.len() == max_len || ok(EOS)))
                .collect();
            if fits.is_empty() {
                return Err(Error::EmptyMask);
            }
            fits
        }
        _ => Vec::new(),
    };
    let prefix = assemble_prefix(kernel, inquiry, gen)?;
    let mut state = gen.new_state();
    let mut logits = gen.decode_step(&prefix, &mut state)?;
    let mut tokens = Vec::new();
    let mut total = T::zero();
    for step in 0..max_len {
        if let Some(m) = mask {
            apply_mask(&mut logits, m)?;
        }
        let lp = log_softmax(&logits);
        let admitted: Box<dyn Iterator<Item = usize>> = match mode {
            DecodeMode::Phrases => Box::new(phrase_continuations(&tokens, &phrases).into_iter()),
            _ => Box::new(0..lp.len()),
        };
        let (tok, best) = admitted.fold((0, T::neg_infinity()), |acc, i| if lp[i] > acc.1 { (i, lp[i]) } else { acc });
        total += best;
        tokens.push(tok);
        if tok == EOS || step + 1 == max_len || state.len + 1 > gen.max_positions() {
            break;
        }
        logits = gen.decode_step(&gen.embed_text(&[tok])?, &mut state)?;
    }
    let n = tokens.len();
    let words: Vec<usize> = tokens.iter().copied().filter(|&t| t != EOS).collect();
    let phrase = gen.tokenizer().decode(&words)?;
    let verb = extract_main_verb(&phrase, vocab);
    Ok(GenerationResult { candidate: 0, tokens, phrase, verb, score: total / T::of(n as f64) })
}

/// Token-level constrained greedy decoding over the verb-focused vocabulary.
pub fn constrained_decode<T: Scalar, G: Generator<T> + ?Sized>(
    kernel: &Mat<T>,
    inquiry: &[usize],
    vocab: &VerbVocabulary,
    gen: &G,
    max_len: usize,
) -> Result<GenerationResult<T>> {
    decode(kernel, inquiry, vocab, gen, max_len, DecodeMode::Constrained)
}

/// Longest canonical phrase occurring as a contiguous word span; ties go to
/// the earliest start, then the lowest verb id.
pub fn extract_main_verb(phrase: &str, vocab: &VerbVocabulary) -> Option<VerbId> {
    let words: Vec<&str> = phrase.split_whitespace().collect();
    let mut best: Option<(usize, usize, VerbId)> = None;
    for v in vocab.ids() {
        let pw: Vec<&str> = vocab.phrases()[v.0].split_whitespace().collect();
        if pw.len() > words.len() {
            continue;
        }
        if let Some(start) = words.windows(pw.len()).position(|w| w == pw.as_slice()) {
            let better = match best {
                None => true,
                Some((len, s, _)) => pw.len() > len || (pw.len() == len && start < s),
            };
            if better {
                best = Some((pw.len(), start, v));
            }
        }
    }
    best.map(|b| b.2)
}

/// Mean of the frozen token embeddings of `ids`.
pub fn phrase_embedding<T: Scalar, G: Generator<T> + ?Sized>(gen: &G, ids: &[usize]) -> Result<Vec<T>> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty phrase".into()));
    }
    Ok(gen.embed_text(ids)?.mean_rows().into_vec())
}

/// Maps a free-form phrase to the canonical verb with the most similar
/// phrase embedding. Words unknown to the tokenizer are ignored.
pub fn open_vocab_map<T: Scalar, G: Generator<T> + ?Sized>(
    phrase: &str,
    vocab: &VerbVocabulary,
    gen: &G,
    synonym_filter: bool,
) -> Result<VerbId> {
    let words: Vec<&str> = phrase.split_whitespace().collect();
    let ids: Vec<usize> = words.iter().filter_map(|w| gen.tokenizer().id(w)).collect();
    if ids.is_empty() {
        return Err(Error::UnknownWord(phrase.to_string()));
    }
    let query = phrase_embedding(gen, &ids)?;
    let mut candidates: Vec<VerbId> = Vec::new();
    if synonym_filter {
        candidates = vocab.synonym_candidates(&words);
    }
    if candidates.is_empty() {
        candidates = vocab.ids().collect();
    }
    let mut best = (candidates[0], T::neg_infinity());
    for v in candidates {
        let sim = cosine(&query, &phrase_embedding(gen, vocab.tokens(v)?)?);
        if sim > best.1 {
            best = (v, sim);
        }
    }
    Ok(best.0)
}
