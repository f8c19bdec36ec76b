use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::VerbId;

use super::tokenizer::{Tokenizer, EOS};

/// Words treated as prepositions when deriving default decoding auxiliaries.
const PREPOSITIONS: &[&str] = &[
    "on", "at", "in", "with", "to", "from", "over", "under", "into", "onto", "off", "up", "down", "by", "of", "across",
    "through", "around", "behind", "beside", "near",
];

/// Canonical verb phrases, their token ids, the verb-focused token mask
/// and a phrase-to-verb synonym table.
#[derive(Clone, Debug, PartialEq)]
pub struct VerbVocabulary {
    phrases: Vec<String>,
    phrase_tokens: Vec<Vec<usize>>,
    auxiliaries: Vec<usize>,
    mask: Vec<bool>,
    synonyms: BTreeMap<String, VerbId>,
}

impl VerbVocabulary {
    /// `auxiliaries = None` admits the prepositions occurring in the phrases
    /// plus end-of-sequence.
    pub fn new<S: AsRef<str>>(phrases: &[S], tokenizer: &Tokenizer, auxiliaries: Option<&[&str]>) -> Result<Self> {
        if phrases.is_empty() {
            return Err(Error::InvalidArgument("verb vocabulary is empty".into()));
        }
        let mut phrase_tokens = Vec::with_capacity(phrases.len());
        let mut clean = Vec::with_capacity(phrases.len());
        for p in phrases {
            let p = p.as_ref().split_whitespace().collect::<Vec<_>>().join(" ");
            if p.is_empty() {
                return Err(Error::InvalidArgument("empty verb phrase".into()));
            }
            if clean.contains(&p) {
                return Err(Error::InvalidArgument(format!("duplicate verb phrase {p:?}")));
            }
            phrase_tokens.push(tokenizer.encode(&p)?);
            clean.push(p);
        }
        let aux_words: Vec<String> = match auxiliaries {
            Some(list) => list.iter().map(|s| s.to_string()).collect(),
            None => {
                let mut v: Vec<String> = clean
                    .iter()
                    .flat_map(|p| p.split_whitespace())
                    .filter(|w| PREPOSITIONS.contains(w))
                    .map(str::to_string)
                    .collect();
                v.sort();
                v.dedup();
                v.push("<eos>".into());
                v
            }
        };
        let auxiliaries = aux_words
            .iter()
            .map(|w| tokenizer.id(w).ok_or_else(|| Error::UnknownWord(w.clone())))
            .collect::<Result<Vec<_>>>()?;
        let mut mask = vec![false; tokenizer.len()];
        for &t in phrase_tokens.iter().flatten().chain(&auxiliaries) {
            mask[t] = true;
        }
        let synonyms = clean.iter().enumerate().map(|(i, p)| (p.clone(), VerbId(i))).collect();
        Ok(Self { phrases: clean, phrase_tokens, auxiliaries, mask, synonyms })
    }

    /// One canonical phrase per line; the verb id is the (0-based) line number.
    pub fn parse(text: &str, tokenizer: &Tokenizer, auxiliaries: Option<&[&str]>) -> Result<Self> {
        let phrases: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        Self::new(&phrases, tokenizer, auxiliaries)
    }

    pub fn load(path: &Path, tokenizer: &Tokenizer, auxiliaries: Option<&[&str]>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, tokenizer, auxiliaries)
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = VerbId> {
        (0..self.phrases.len()).map(VerbId)
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn phrase(&self, v: VerbId) -> Result<&str> {
        self.phrases.get(v.0).map(String::as_str).ok_or_else(|| Error::UnknownVerb(v.to_string()))
    }

    pub fn tokens(&self, v: VerbId) -> Result<&[usize]> {
        self.phrase_tokens.get(v.0).map(Vec::as_slice).ok_or_else(|| Error::UnknownVerb(v.to_string()))
    }

    pub fn find(&self, phrase: &str) -> Option<VerbId> {
        self.phrases.iter().position(|p| p == phrase).map(VerbId)
    }

    pub fn contains(&self, v: VerbId) -> bool {
        v.0 < self.phrases.len()
    }

    pub fn auxiliaries(&self) -> &[usize] {
        &self.auxiliaries
    }

    /// Boolean mask over the generator vocabulary.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn allows(&self, token: usize) -> bool {
        self.mask.get(token).copied().unwrap_or(false)
    }

    /// The mask plus end-of-sequence, as used while decoding.
    pub fn decoding_mask(&self) -> Vec<bool> {
        let mut m = self.mask.clone();
        m[EOS] = true;
        m
    }

    /// Teacher-forcing target for a verb: its tokens followed by `<eos>`.
    pub fn target(&self, v: VerbId) -> Result<Vec<usize>> {
        let mut t = self.tokens(v)?.to_vec();
        t.push(EOS);
        Ok(t)
    }

    /// Distinct first tokens of each verb phrase (used by the logic loss).
    pub fn first_tokens(&self) -> Vec<usize> {
        self.phrase_tokens.iter().map(|t| t[0]).collect()
    }

    pub fn synonyms(&self) -> &BTreeMap<String, VerbId> {
        &self.synonyms
    }

    pub fn add_synonym(&mut self, phrase: &str, verb: VerbId) -> Result<()> {
        if !self.contains(verb) {
            return Err(Error::UnknownVerb(verb.to_string()));
        }
        self.synonyms.insert(phrase.split_whitespace().collect::<Vec<_>>().join(" "), verb);
        Ok(())
    }

    /// Lines of `phrase<TAB>canonical verb phrase`; blank lines and `#` comments ignored.
    pub fn parse_synonyms(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (phrase, canon) = line
                .split_once('\t')
                .ok_or_else(|| Error::MalformedRecord { index: i, message: "expected phrase<TAB>verb".into() })?;
            let verb = self.find(canon.trim()).ok_or_else(|| Error::UnknownVerb(canon.trim().to_string()))?;
            self.add_synonym(phrase.trim(), verb)?;
        }
        Ok(())
    }

    /// Verbs whose synonym table lists any of `words` (as a whole-phrase key
    /// or as one of the key's words).
    pub fn synonym_candidates(&self, words: &[&str]) -> Vec<VerbId> {
        let mut out: Vec<VerbId> = self
            .synonyms
            .iter()
            .filter(|(k, _)| words.iter().any(|w| k.as_str() == *w || k.split_whitespace().any(|kw| kw == *w)))
            .map(|(_, v)| *v)
            .collect();
        out.sort();
        out.dedup();
        out
    }
}
