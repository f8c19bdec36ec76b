//! Evidence fusion, visual-kernel formulation and prefix assembly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore, Projection};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// How the evidence vector becomes a generator prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// Learned slot queries cross-attending to the evidence vector.
    CrossAttention,
    /// An MLP mapping the evidence vector straight to `L x d`.
    NaiveMlp,
    /// No conduit: a single linear projection of the candidate token.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteeringConfig {
    pub kernel_length: usize,
    pub heads: usize,
    pub residual: bool,
    pub use_local: bool,
    pub use_global: bool,
    pub mode: KernelMode,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            kernel_length: 8,
            heads: 4,
            residual: true,
            use_local: true,
            use_global: true,
            mode: KernelMode::CrossAttention,
        }
    }
}

/// Dimensions the conduit connects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SteeringDims {
    /// Adjudicated candidate token width.
    pub d_model: usize,
    /// Scene-token width.
    pub d_scene: usize,
    /// Generator hidden size.
    pub d: usize,
}

/// Mean over patches.
pub fn scene_token<T: Scalar>(patches: &Mat<T>) -> Result<Vec<T>> {
    if patches.rows() == 0 {
        return Err(Error::InvalidArgument("scene encoding has no patches".into()));
    }
    Ok(patches.mean_rows().into_vec())
}

/// `[Q_k; E(text)]`.
pub fn assemble_prefix<T: Scalar, G: Generator<T> + ?Sized>(
    kernel: &Mat<T>,
    text: &[usize],
    gen: &G,
) -> Result<Mat<T>> {
    if text.is_empty() {
        return Err(Error::InvalidArgument("prefix text is empty".into()));
    }
    let e = gen.embed_text(text)?;
    if kernel.rows() == 0 {
        return Ok(e);
    }
    if kernel.cols() != e.cols() {
        return Err(Error::Shape(format!("kernel width {} vs embedding width {}", kernel.cols(), e.cols())));
    }
    Ok(Mat::vconcat(&[kernel, &e]))
}

/// Graph version of [`assemble_prefix`]; `kernel = None` means no prefix.
pub fn assemble_prefix_graph<T: Scalar, G: Generator<T> + ?Sized>(
    g: &mut Graph<'_, T>,
    kernel: Option<Var>,
    text: &[usize],
    gen: &G,
) -> Result<Var> {
    if text.is_empty() {
        return Err(Error::InvalidArgument("prefix text is empty".into()));
    }
    let e = g.constant(gen.embed_text(text)?);
    match kernel {
        Some(k) if g.shape(k).0 > 0 => {
            if g.shape(k).1 != g.shape(e).1 {
                return Err(Error::Shape("kernel width does not match embeddings".into()));
            }
            Ok(g.vconcat(&[k, e]))
        }
        _ => Ok(e),
    }
}

/// `Q = FFN(MHCA(Z, e))` with pre-norm and (optionally) residuals.
#[derive(Clone, Debug)]
pub struct KernelFormulator {
    pub slots: ParamId,
    pub ln_q: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_f: LayerNorm,
    pub ffn: Mlp,
    pub residual: bool,
    pub d: usize,
}

#[derive(Clone, Debug)]
pub struct KernelOutput {
    pub kernel: Var,
    /// Per-head `L x 1` attention weights over the evidence memory.
    pub weights: Vec<Var>,
}

impl KernelFormulator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        length: usize,
        d: usize,
        heads: usize,
        residual: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            slots: store.add("vkf.slots", Mat::randn(length, d, 1.0, rng)),
            ln_q: LayerNorm::new(store, "vkf.ln_q", d),
            attn: MultiHeadAttention::new(store, "vkf.attn", d, heads, rng),
            ln_f: LayerNorm::new(store, "vkf.ln_f", d),
            ffn: Mlp::new(store, "vkf.ffn", d, 2 * d, d, rng),
            residual,
            d,
        }
    }

    /// Attention-only branch output `MHCA(LN(Z), e)`.
    pub fn attend<T: Scalar>(&self, g: &mut Graph<'_, T>, evidence: Var) -> (Var, Var, Vec<Var>) {
        let z = g.param(self.slots);
        let h = self.ln_q.forward(g, z);
        let a = self.attn.forward(g, h, evidence, None);
        (z, a.out, a.weights)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, evidence: Var) -> Result<KernelOutput> {
        if g.shape(evidence) != (1, self.d) {
            return Err(Error::Shape(format!("evidence {:?}, expected 1x{}", g.shape(evidence), self.d)));
        }
        let (z, a, weights) = self.attend(g, evidence);
        let x = if self.residual { g.add(z, a) } else { a };
        let h = self.ln_f.forward(g, x);
        let f = self.ffn.forward(g, h);
        let kernel = if self.residual { g.add(x, f) } else { f };
        Ok(KernelOutput { kernel, weights })
    }
}

/// `e_k = MLP([phi_c(v_k) || phi_g(f_global)])` followed by the kernel stage.
#[derive(Clone, Debug)]
pub struct SteeringConduit {
    pub phi_c: Projection,
    pub phi_g: Projection,
    pub fuse: Mlp,
    pub formulator: Option<KernelFormulator>,
    pub naive: Option<Mlp>,
    pub direct: Option<Linear>,
    pub config: SteeringConfig,
    pub dims: SteeringDims,
}

impl SteeringConduit {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &SteeringConfig,
        dims: SteeringDims,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.d == 0
            || dims.d_model == 0
            || dims.d_scene == 0
            || config.heads == 0
            || !dims.d.is_multiple_of(config.heads)
        {
            return Err(Error::InvalidArgument(format!("steering dims {dims:?} with {} heads", config.heads)));
        }
        if config.kernel_length == 0 && config.mode != KernelMode::Direct {
            return Err(Error::InvalidArgument("kernel length must be at least 1".into()));
        }
        let d = dims.d;
        let phi_c = Projection::new(store, "csc.phi_c", dims.d_model, d, rng);
        let phi_g = Projection::new(store, "csc.phi_g", dims.d_scene, d, rng);
        let fuse = Mlp::new(store, "csc.fuse", 2 * d, d, d, rng);
        let (mut formulator, mut naive, mut direct) = (None, None, None);
        match config.mode {
            KernelMode::CrossAttention => {
                formulator =
                    Some(KernelFormulator::new(store, config.kernel_length, d, config.heads, config.residual, rng))
            }
            KernelMode::NaiveMlp => naive = Some(Mlp::new(store, "csc.naive", d, d, config.kernel_length * d, rng)),
            KernelMode::Direct => direct = Some(Linear::new(store, "csc.direct", dims.d_model, d, rng)),
        }
        Ok(Self { phi_c, phi_g, fuse, formulator, naive, direct, config: config.clone(), dims })
    }

    pub fn kernel_length(&self) -> usize {
        match self.config.mode {
            KernelMode::Direct => 1,
            _ => self.config.kernel_length,
        }
    }

    /// Row-batched evidence fusion: `v: n x d_model`, `f_global: 1 x D_g`.
    pub fn fuse_evidence<T: Scalar>(&self, g: &mut Graph<'_, T>, v: Var, f_global: Var) -> Result<Var> {
        let (n, dv) = g.shape(v);
        if dv != self.dims.d_model || g.shape(f_global) != (1, self.dims.d_scene) {
            return Err(Error::Shape(format!(
                "evidence inputs {n}x{dv} and {:?}, expected n x {} and 1 x {}",
                g.shape(f_global),
                self.dims.d_model,
                self.dims.d_scene
            )));
        }
        let d = self.dims.d;
        let local = if self.config.use_local { self.phi_c.forward(g, v) } else { g.constant(Mat::zeros(n, d)) };
        let global = if self.config.use_global {
            let pg = self.phi_g.forward(g, f_global);
            g.gather_rows(pg, &vec![0; n])
        } else {
            g.constant(Mat::zeros(n, d))
        };
        let cat = g.hconcat(&[local, global]);
        Ok(self.fuse.forward(g, cat))
    }

    /// Kernel for one candidate token `v: 1 x d_model`.
    pub fn kernel<T: Scalar>(&self, g: &mut Graph<'_, T>, v: Var, f_global: Var) -> Result<KernelOutput> {
        if g.shape(v).0 != 1 {
            return Err(Error::Shape("kernel expects a single candidate token".into()));
        }
        match self.config.mode {
            KernelMode::Direct => {
                let lin = self.direct.as_ref().expect("direct mode owns a projection");
                Ok(KernelOutput { kernel: lin.forward(g, v), weights: Vec::new() })
            }
            KernelMode::NaiveMlp => {
                let e = self.fuse_evidence(g, v, f_global)?;
                let mlp = self.naive.as_ref().expect("naive mode owns an MLP");
                let flat = mlp.forward(g, e);
                let kernel = g.reshape(flat, self.config.kernel_length, self.dims.d);
                Ok(KernelOutput { kernel, weights: Vec::new() })
            }
            KernelMode::CrossAttention => {
                let e = self.fuse_evidence(g, v, f_global)?;
                self.formulator.as_ref().expect("cross-attention mode owns a formulator").forward(g, e)
            }
        }
    }
}
