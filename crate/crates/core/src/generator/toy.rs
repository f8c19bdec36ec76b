use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{hash_mat, hex, LN_EPS};
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::tensor::{softmax_in_place, Mat};

use super::tokenizer::Tokenizer;
use super::{DecodeState, Generator, SceneEncoding};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyGeneratorConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub scene_dim: usize,
    pub scene_heads: usize,
    /// Raster side length in cells.
    pub raster_cells: usize,
    /// Patch side length in cells.
    pub patch_cells: usize,
}

impl Default for ToyGeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            vocab_size: 64,
            hidden: 32,
            layers: 2,
            heads: 4,
            max_positions: 64,
            scene_dim: 32,
            scene_heads: 4,
            raster_cells: 24,
            patch_cells: 3,
        }
    }
}

impl ToyGeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.hidden > 0
            && self.heads > 0
            && self.hidden.is_multiple_of(self.heads)
            && self.scene_heads > 0
            && self.scene_dim.is_multiple_of(self.scene_heads)
            && self.layers > 0
            && self.max_positions > 0
            && self.patch_cells > 0
            && self.raster_cells.is_multiple_of(self.patch_cells);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid toy generator config {self:?}")))
        }
    }

    pub fn num_patches(&self) -> usize {
        let side = self.raster_cells / self.patch_cells;
        side * side
    }
}

type W<T> = Arc<Mat<T>>;

#[derive(Clone, Debug)]
struct Norm<T> {
    gain: W<T>,
    bias: W<T>,
}

#[derive(Clone, Debug)]
struct Attn<T> {
    wq: W<T>,
    wk: W<T>,
    wv: W<T>,
    wo: W<T>,
    heads: usize,
}

#[derive(Clone, Debug)]
struct Block<T> {
    ln1: Norm<T>,
    attn: Attn<T>,
    ln2: Norm<T>,
    w1: W<T>,
    b1: W<T>,
    w2: W<T>,
    b2: W<T>,
}

#[derive(Clone, Debug)]
struct SceneEncoder<T> {
    patch: W<T>,
    pos: W<T>,
    ln: Norm<T>,
    attn: Attn<T>,
    ln_out: Norm<T>,
}

/// Small causal transformer decoder plus patch-attention scene encoder with
/// weights drawn once from a seed and never updated.
#[derive(Clone, Debug)]
pub struct ToyGenerator<T> {
    config: ToyGeneratorConfig,
    tokenizer: Tokenizer,
    embed: W<T>,
    pos: W<T>,
    blocks: Vec<Block<T>>,
    ln_f: Norm<T>,
    head: W<T>,
    scene: SceneEncoder<T>,
}

struct Init(ChaCha8Rng);

impl Init {
    fn mat<T: Scalar>(&mut self, r: usize, c: usize, std: f64) -> W<T> {
        Arc::new(Mat::<f64>::randn(r, c, std, &mut self.0).cast())
    }

    fn linear<T: Scalar>(&mut self, r: usize, c: usize) -> W<T> {
        self.mat(r, c, 1.0 / (r as f64).sqrt())
    }

    fn norm<T: Scalar>(&mut self, d: usize) -> Norm<T> {
        let gain = Mat::<f64>::randn(1, d, 0.1, &mut self.0).map(|v| v + 1.0).cast();
        Norm { gain: Arc::new(gain), bias: self.mat(1, d, 0.1) }
    }

    fn attn<T: Scalar>(&mut self, d: usize, heads: usize) -> Attn<T> {
        Attn { wq: self.linear(d, d), wk: self.linear(d, d), wv: self.linear(d, d), wo: self.linear(d, d), heads }
    }
}

impl<T: Scalar> ToyGenerator<T> {
    /// `extra_words` are added to the tokenizer (e.g. words of a custom verb
    /// vocabulary); the effective vocabulary is at least `config.vocab_size`.
    pub fn new(config: ToyGeneratorConfig, extra_words: &[&str]) -> Result<Self> {
        config.validate()?;
        let tokenizer = Tokenizer::new(extra_words, config.vocab_size);
        let mut init = Init(ChaCha8Rng::seed_from_u64(config.seed));
        let d = config.hidden;
        let v = tokenizer.len();
        let embed = init.mat(v, d, 1.0);
        let pos = init.mat(config.max_positions, d, 0.3);
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1: init.norm(d),
                attn: init.attn(d, config.heads),
                ln2: init.norm(d),
                w1: init.linear(d, 2 * d),
                b1: init.mat(1, 2 * d, 0.1),
                w2: init.linear(2 * d, d),
                b2: init.mat(1, d, 0.1),
            })
            .collect();
        let ln_f = init.norm(d);
        let head = init.linear(d, v);
        let pc = config.patch_cells;
        let ds = config.scene_dim;
        let scene = SceneEncoder {
            patch: init.linear(pc * pc * 3, ds),
            pos: init.mat(config.num_patches(), ds, 0.5),
            ln: init.norm(ds),
            attn: init.attn(ds, config.scene_heads),
            ln_out: init.norm(ds),
        };
        Ok(Self { config, tokenizer, embed, pos, blocks, ln_f, head, scene })
    }

    pub fn config(&self) -> &ToyGeneratorConfig {
        &self.config
    }

    fn weights(&self) -> Vec<(&'static str, &Mat<T>)> {
        let mut out: Vec<(&'static str, &Mat<T>)> = vec![("embed", &self.embed), ("pos", &self.pos)];
        for b in &self.blocks {
            out.extend([
                ("ln1.gain", &*b.ln1.gain),
                ("ln1.bias", &*b.ln1.bias),
                ("wq", &*b.attn.wq),
                ("wk", &*b.attn.wk),
                ("wv", &*b.attn.wv),
                ("wo", &*b.attn.wo),
                ("ln2.gain", &*b.ln2.gain),
                ("ln2.bias", &*b.ln2.bias),
                ("w1", &*b.w1),
                ("b1", &*b.b1),
                ("w2", &*b.w2),
                ("b2", &*b.b2),
            ]);
        }
        let s = &self.scene;
        out.extend([
            ("ln_f.gain", &*self.ln_f.gain),
            ("ln_f.bias", &*self.ln_f.bias),
            ("head", &*self.head),
            ("scene.patch", &*s.patch),
            ("scene.pos", &*s.pos),
            ("scene.ln.gain", &*s.ln.gain),
            ("scene.ln.bias", &*s.ln.bias),
            ("scene.wq", &*s.attn.wq),
            ("scene.wk", &*s.attn.wk),
            ("scene.wv", &*s.attn.wv),
            ("scene.wo", &*s.attn.wo),
            ("scene.ln_out.gain", &*s.ln_out.gain),
            ("scene.ln_out.bias", &*s.ln_out.bias),
        ]);
        out
    }
}

fn c<T: Scalar>(g: &mut Graph<'_, T>, w: &W<T>) -> Var {
    g.constant_arc(Arc::clone(w))
}

fn norm_graph<T: Scalar>(g: &mut Graph<'_, T>, n: &Norm<T>, x: Var) -> Var {
    let y = g.normalize(x, T::of(LN_EPS));
    let gain = c(g, &n.gain);
    let bias = c(g, &n.bias);
    let y = g.mul_row(y, gain);
    g.add_row(y, bias)
}

fn norm_eager<T: Scalar>(n: &Norm<T>, x: &Mat<T>) -> Mat<T> {
    let y = x.normalize_rows(T::of(LN_EPS));
    let mut out = y.clone();
    for r in 0..y.rows() {
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = *v * n.gain[(0, j)] + n.bias[(0, j)];
        }
    }
    out
}

/// Returns the output projection and the per-head attention weights.
fn attn_graph<T: Scalar>(g: &mut Graph<'_, T>, a: &Attn<T>, x: Var, causal: bool) -> (Var, Vec<Var>) {
    let (n, d) = g.shape(x);
    let wq = c(g, &a.wq);
    let wk = c(g, &a.wk);
    let wv = c(g, &a.wv);
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let dh = d / a.heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mask = causal.then(|| {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                m[(i, j)] = T::neg_infinity();
            }
        }
        g.constant(m)
    });
    let mut heads = Vec::with_capacity(a.heads);
    let mut weights = Vec::with_capacity(a.heads);
    for h in 0..a.heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let s = g.matmul(qh, kt);
        let mut s = g.scale(s, scale);
        if let Some(m) = mask {
            s = g.add(s, m);
        }
        let p = g.softmax(s);
        weights.push(p);
        heads.push(g.matmul(p, vh));
    }
    let cat = g.hconcat(&heads);
    let wo = c(g, &a.wo);
    (g.matmul(cat, wo), weights)
}

impl<T: Scalar> Generator<T> for ToyGenerator<T> {
    fn hidden_size(&self) -> usize {
        self.config.hidden
    }

    fn scene_dim(&self) -> usize {
        self.config.scene_dim
    }

    fn max_positions(&self) -> usize {
        self.config.max_positions
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn embed_text(&self, ids: &[usize]) -> Result<Mat<T>> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.tokenizer.len()) {
            return Err(Error::UnknownToken(bad));
        }
        Ok(self.embed.select_rows(ids))
    }

    fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (n, d) = g.shape(x);
        if d != self.config.hidden || n == 0 || n > self.config.max_positions {
            return Err(Error::Shape(format!("generator input {n}x{d}")));
        }
        let pos = g.constant(self.pos.select_rows(&(0..n).collect::<Vec<_>>()));
        let mut h = g.add(x, pos);
        for b in &self.blocks {
            let a_in = norm_graph(g, &b.ln1, h);
            let (a, _) = attn_graph(g, &b.attn, a_in, true);
            h = g.add(h, a);
            let f_in = norm_graph(g, &b.ln2, h);
            let w1 = c(g, &b.w1);
            let b1 = c(g, &b.b1);
            let w2 = c(g, &b.w2);
            let b2 = c(g, &b.b2);
            let f = g.matmul(f_in, w1);
            let f = g.add_row(f, b1);
            let f = g.gelu(f);
            let f = g.matmul(f, w2);
            let f = g.add_row(f, b2);
            h = g.add(h, f);
        }
        let h = norm_graph(g, &self.ln_f, h);
        let head = c(g, &self.head);
        Ok(g.matmul(h, head))
    }

    fn new_state(&self) -> DecodeState<T> {
        DecodeState::new(self.blocks.len())
    }

    fn decode_step(&self, x: &Mat<T>, state: &mut DecodeState<T>) -> Result<Vec<T>> {
        let d = self.config.hidden;
        if x.cols() != d || x.rows() == 0 {
            return Err(Error::Shape(format!("decode step input {:?}", x.shape())));
        }
        let start = state.len;
        let n = x.rows();
        if start + n > self.config.max_positions {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds {} positions",
                start + n,
                self.config.max_positions
            )));
        }
        let mut h = x.clone();
        for r in 0..n {
            for (v, p) in h.row_mut(r).iter_mut().zip(self.pos.row(start + r)) {
                *v += *p;
            }
        }
        for (li, b) in self.blocks.iter().enumerate() {
            let a_in = norm_eager(&b.ln1, &h);
            let q = a_in.matmul(&b.attn.wq);
            let k = a_in.matmul(&b.attn.wk);
            let v = a_in.matmul(&b.attn.wv);
            let (keys, values) = if state.keys[li].rows() == 0 {
                (k, v)
            } else {
                (Mat::vconcat(&[&state.keys[li], &k]), Mat::vconcat(&[&state.values[li], &v]))
            };
            let heads = b.attn.heads;
            let dh = d / heads;
            let scale = T::one() / T::of(dh as f64).sqrt();
            let mut cat = Mat::zeros(n, d);
            for r in 0..n {
                let visible = start + r + 1;
                for hd in 0..heads {
                    let cols = hd * dh..(hd + 1) * dh;
                    let qr = &q.row(r)[cols.clone()];
                    let mut scores: Vec<T> =
                        (0..visible).map(|j| crate::tensor::dot(qr, &keys.row(j)[cols.clone()]) * scale).collect();
                    softmax_in_place(&mut scores);
                    for (j, &p) in scores.iter().enumerate() {
                        let vr = &values.row(j)[cols.clone()];
                        for (o, &vv) in cat.row_mut(r)[cols.clone()].iter_mut().zip(vr) {
                            *o += p * vv;
                        }
                    }
                }
            }
            state.keys[li] = keys;
            state.values[li] = values;
            h.add_assign(&cat.matmul(&b.attn.wo));
            let f = norm_eager(&b.ln2, &h).matmul(&b.w1).add_row(&b.b1).gelu().matmul(&b.w2).add_row(&b.b2);
            h.add_assign(&f);
        }
        state.len += n;
        let last = Mat::row_vector(h.row(n - 1).to_vec());
        Ok(norm_eager(&self.ln_f, &last).matmul(&self.head).into_vec())
    }

    fn encode_scene_graph(&self, g: &mut Graph<'_, T>, pixels: Var) -> Result<(Var, Var)> {
        let cells = self.config.raster_cells;
        if g.shape(pixels) != (cells * cells, 3) {
            return Err(Error::Shape(format!("scene raster {:?}, expected {}x3", g.shape(pixels), cells * cells)));
        }
        let pc = self.config.patch_cells;
        let side = cells / pc;
        let mut parts = Vec::with_capacity(pc * pc);
        for dy in 0..pc {
            for dx in 0..pc {
                let idx: Vec<usize> = (0..side * side)
                    .map(|p| {
                        let (py, px) = (p / side, p % side);
                        (py * pc + dy) * cells + px * pc + dx
                    })
                    .collect();
                parts.push(g.gather_rows(pixels, &idx));
            }
        }
        let patches = g.hconcat(&parts);
        let s = &self.scene;
        let wp = c(g, &s.patch);
        let x = g.matmul(patches, wp);
        let pos = c(g, &s.pos);
        let x = g.add(x, pos);
        let h = norm_graph(g, &s.ln, x);
        let (a, weights) = attn_graph(g, &s.attn, h, false);
        let x = g.add(x, a);
        let feats = norm_graph(g, &s.ln_out, x);
        let sum = g.add_all(&weights).expect("at least one head");
        let attn = g.scale(sum, T::one() / T::of(weights.len() as f64));
        Ok((feats, attn))
    }

    fn encode_scene(&self, image: &Raster) -> Result<SceneEncoding<T>> {
        let mut g = Graph::new();
        let px = g.constant(image.to_mat());
        let (f, a) = self.encode_scene_graph(&mut g, px)?;
        Ok(SceneEncoding { patches: g.value(f).clone(), attention: g.value(a).clone() })
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for w in self.tokenizer.words() {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        for (name, m) in self.weights() {
            h.update(name.as_bytes());
            hash_mat(&mut h, m);
        }
        hex(&h.finalize())
    }
}
