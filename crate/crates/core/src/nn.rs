//! Layer building blocks shared by the projector and the latent autoencoder.

use rand::Rng;

use crate::error::{LmdError, Result};
use crate::numerics::{Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        // xavier-uniform
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::uniform(vec![d_in, d_out], -limit, limit, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![d_out]));
        Linear { w, b }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(p[self.w], false)?.add_bias(p[self.b])
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (1.0 / (c_in * kernel * kernel) as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::randn(vec![c_out, c_in, kernel, kernel], std, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![c_out]));
        Conv { w, b, stride, pad }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv2d(p[self.w], self.stride, self.pad)?.add_channel_bias(p[self.b])
    }
}

/// Transposed convolution with kernel = stride, i.e. an exact `k×` upsampler.
#[derive(Debug, Clone)]
pub struct ConvUp {
    pub w: ParamId,
    pub b: ParamId,
    pub factor: usize,
}

impl ConvUp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        factor: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (1.0 / c_in as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::randn(vec![c_in, c_out, factor, factor], std, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![c_out]));
        ConvUp { w, b, factor }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv_transpose2d(p[self.w], self.factor, 0)?
            .add_channel_bias(p[self.b])
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.g"), Tensor::full(vec![d], 1.0)),
            bias: store.add(format!("{name}.b"), Tensor::zeros(vec![d])),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(p[self.gain], p[self.bias], LN_EPS)
    }
}

/// `x + conv(gelu(conv(gelu(x))))` at constant width.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv,
    conv2: Conv,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        let conv1 = Conv::new(store, &format!("{name}.conv1"), c, c, 3, 1, 1, rng);
        let conv2 = Conv::new(store, &format!("{name}.conv2"), c, c, 3, 1, 1, rng);
        // start close to identity
        store.get_mut(conv2.w).data_mut().iter_mut().for_each(|v| *v *= 0.1);
        ResBlock { conv1, conv2 }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.conv1.forward(p, x.gelu())?;
        let h = self.conv2.forward(p, h.gelu())?;
        x.add(h)
    }
}

/// Pre-norm transformer block: multi-head self-attention then a GELU MLP.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    width: usize,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(LmdError::NotMultiple {
                what: "transformer width",
                got: width,
                multiple: heads.max(1),
            });
        }
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            q: Linear::new(store, &format!("{name}.attn.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), width, width, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), width, width, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), width, width * mlp_ratio, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), width * mlp_ratio, width, rng),
            heads,
            width,
        })
    }

    /// `x: [B, n, width]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.width {
            return Err(LmdError::shape("transformer block", &shape, &[0, 0, self.width]));
        }
        let (b, n) = (shape[0], shape[1]);
        let h = self.ln1.forward(p, x)?;
        let attn = self.attention(p, h, b, n)?;
        let x = x.add(attn)?;
        let h = self.ln2.forward(p, x)?;
        let h = self.fc2.forward(p, self.fc1.forward(p, h)?.gelu())?;
        x.add(h)
    }

    fn attention<'g>(&self, p: &Bound<'g>, h: Var<'g>, b: usize, n: usize) -> Result<Var<'g>> {
        let dh = self.width / self.heads;
        let split = |lin: &Linear| -> Result<Var<'g>> {
            lin.forward(p, h)?
                .reshape(vec![b, n, self.heads, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(vec![b * self.heads, n, dh])
        };
        let (q, k, v) = (split(&self.q)?, split(&self.k)?, split(&self.v)?);
        let scores = q.bmm(k, false, true)?.scale(1.0 / (dh as f64).sqrt());
        let ctx = scores.softmax().bmm(v, false, false)?;
        let merged = ctx
            .reshape(vec![b, self.heads, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(vec![b, n, self.width])?;
        self.proj.forward(p, merged)
    }
}
