//! Learnable building blocks over the autograd graph.

use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Mat<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Mat<T> {
        &self.values[id.0]
    }

    pub fn value_arc(&self, id: ParamId) -> Arc<Mat<T>> {
        Arc::clone(&self.values[id.0])
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            h.update(n.as_bytes());
            hash_mat(&mut h, v);
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hash_mat<T: Scalar>(h: &mut Sha256, m: &Mat<T>) {
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.update(v.as_f64().to_bits().to_le_bytes());
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fan-in scaled normal initialization.
pub fn init_weight<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Mat<T> {
    Mat::randn(fan_in, fan_out, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_weight(d_in, d_out, rng));
        let b = store.add(format!("{name}.b"), Mat::zeros(1, d_out));
        Self { w, b: Some(b), d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Mat::filled(1, d, T::one()));
        let bias = store.add(format!("{name}.bias"), Mat::zeros(1, d));
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let n = g.normalize(x, T::of(LN_EPS));
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// One hidden layer with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, d_hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), d_hidden, d_out, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Linear map followed by GELU.
#[derive(Clone, Debug)]
pub struct Projection {
    pub linear: Linear,
}

impl Projection {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self { linear: Linear::new(store, name, d_in, d_out, rng) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let y = self.linear.forward(g, x);
        g.gelu(y)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Output of an attention call, with per-head weights kept for inspection.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "hidden size {d} must be divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// `mask`, when given, is added to the `n_q x n_kv` score matrix of
    /// every head (use `-inf` to block a position).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, xq: Var, xkv: Var, mask: Option<Var>) -> AttentionOutput {
        let q = self.q.forward(g, xq);
        let k = self.k.forward(g, xkv);
        let v = self.v.forward(g, xkv);
        let d = self.q.d_out;
        let dh = d / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add(s, m);
            }
            let a = g.softmax(s);
            weights.push(a);
            outs.push(g.matmul(a, vh));
        }
        let cat = g.hconcat(&outs);
        AttentionOutput { out: self.o.forward(g, cat), weights }
    }
}

/// Pre-norm transformer encoder layer without positional information.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ffn: Mlp::new(store, &format!("{name}.ffn"), d, 2 * d, d, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, None).out;
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.add(x, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::fd::{check_in, check_param};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoder_layer_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let layer = EncoderLayer::new(&mut store, "enc", 8, 2, &mut rng);
        let x0 = Mat::randn(3, 8, 1.0, &mut rng);
        let probe = Mat::randn(3, 8, 1.0, &mut rng);
        let err = check_in(&store, &x0, |g, x| {
            let y = layer.forward(g, x);
            let p = g.constant(probe.clone());
            let m = g.mul(y, p);
            g.sum(m)
        });
        assert!(err < 1e-4, "relative error {err}");
        for name in ["enc.attn.q.w", "enc.ffn.fc1.w", "enc.ln1.gain"] {
            let id = store.find(name).unwrap();
            let err = check_param(&store, id, |g| {
                let x = g.constant(x0.clone());
                let y = layer.forward(g, x);
                let p = g.constant(probe.clone());
                let m = g.mul(y, p);
                g.sum(m)
            });
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn checksum_changes_with_any_value() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("a", Mat::zeros(2, 2));
        let before = store.checksum();
        assert_eq!(before, store.clone().checksum());
        store.value_mut(id)[(1, 1)] = 1e-300;
        assert_ne!(before, store.checksum());
    }
}
