//! Latent space projector: a convolutional encoder/decoder pair around a
//! learnable codebook, trained with the VQ objective plus a patch
//! discriminator, then frozen.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack_nchw, unstack_nchw};
use crate::error::{LmdError, Result};
use crate::nn::{Conv, ConvUp, ResBlock};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

/// Probability clamp applied before every log in the adversarial losses.
pub const PROB_EPS: f64 = 1e-7;
/// Edge length of the image tile each discriminator logit judges.
pub const DISC_PATCH: usize = 8;
const GAMMA_MAX: f64 = 1e4;
const GAMMA_DENOM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaMode {
    /// Ratio of decoder-last-layer gradient norms, recomputed every step.
    Adaptive,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectorConfig {
    /// Spatial downsampling factor `f = H/h = W/w`; a power of two.
    pub scale_factor: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub beta: f64,
    pub gamma_mode: GammaMode,
    /// Convolution width of the encoder and decoder.
    pub channels: usize,
    pub disc_channels: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            scale_factor: 8,
            latent_dim: 4,
            codebook_size: 64,
            beta: 0.25,
            gamma_mode: GammaMode::Adaptive,
            channels: 16,
            disc_channels: 16,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.scale_factor;
        if f == 0 || !f.is_power_of_two() {
            return Err(LmdError::Config(format!(
                "scale_factor must be a power of two, got {f}"
            )));
        }
        if self.latent_dim == 0 || self.channels == 0 || self.disc_channels == 0 {
            return Err(LmdError::Config(
                "latent_dim and channel widths must be positive".into(),
            ));
        }
        if self.codebook_size < 2 {
            return Err(LmdError::Config(format!(
                "codebook_size must be >= 2, got {}",
                self.codebook_size
            )));
        }
        if self.beta.is_nan() || self.beta <= 0.0 {
            return Err(LmdError::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if let GammaMode::Fixed(g) = self.gamma_mode {
            if g.is_nan() || g < 0.0 {
                return Err(LmdError::Config(format!("fixed gamma must be >= 0, got {g}")));
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.scale_factor.trailing_zeros() as usize
    }

    /// Checks that an `H × W` image is accepted.
    pub fn check_image_dims(&self, height: usize, width: usize) -> Result<()> {
        for dim in [height, width] {
            if dim == 0 || dim % self.scale_factor != 0 {
                return Err(LmdError::NotMultiple {
                    what: "image side",
                    got: dim,
                    multiple: self.scale_factor,
                });
            }
        }
        Ok(())
    }
}

/// Encoder output `ẑ`, an `h × w × d` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    pub grid: Tensor,
    pub source_dims: (usize, usize),
}

impl LatentImage {
    pub fn new(grid: Tensor, source_dims: (usize, usize)) -> Result<Self> {
        if grid.rank() != 3 {
            return Err(LmdError::shape("latent image", grid.shape(), &[0, 0, 0]));
        }
        Ok(LatentImage { grid, source_dims })
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.grid.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `K × d`.
    pub entries: Tensor,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        if entries.rank() != 2 || entries.shape()[0] == 0 {
            return Err(LmdError::shape("codebook", entries.shape(), &[0, 0]));
        }
        if !entries.is_finite() {
            return Err(LmdError::NonFinite("codebook entries".into()));
        }
        Ok(Codebook { entries })
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.entries.data()[k * d..(k + 1) * d]
    }

    /// Index of the nearest entry to `v`; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.size() {
            let dist: f64 = self.entry(k).iter().zip(v).map(|(e, x)| (x - e) * (x - e)).sum();
            if dist < best.1 {
                best = (k, dist);
            }
        }
        best.0
    }

    /// Nearest index for every `d`-wide row of `rows`.
    pub fn nearest_rows(&self, rows: &[f64]) -> Vec<usize> {
        rows.chunks(self.dim()).map(|r| self.nearest(r)).collect()
    }
}

/// `z_q` with the codebook indices that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLatent {
    pub grid: Tensor,
    /// Row-major `h × w` codebook indices.
    pub indices: Vec<usize>,
    pub source_dims: (usize, usize),
}

/// Nearest-neighbour lookup of every latent cell.
pub fn quantize(z: &LatentImage, cb: &Codebook) -> Result<QuantizedLatent> {
    if z.dim() != cb.dim() {
        return Err(LmdError::shape("quantize", z.grid.shape(), cb.entries.shape()));
    }
    let indices = cb.nearest_rows(z.grid.data());
    let mut data = Vec::with_capacity(z.grid.numel());
    for &k in &indices {
        data.extend_from_slice(cb.entry(k));
    }
    Ok(QuantizedLatent {
        grid: Tensor::new(z.grid.shape().to_vec(), data)?,
        indices,
        source_dims: z.source_dims,
    })
}

/// Mean over positions of the squared L2 norm along the last axis.
fn mean_sq_norm(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() == 0 {
        return Err(LmdError::shape("vq_loss", a.shape(), b.shape()));
    }
    let c = *a.shape().last().unwrap();
    let positions = a.numel() / c;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / positions as f64)
}

/// `‖x − x̂‖² + ‖sg[ẑ] − z_q‖² + β‖sg[z_q] − ẑ‖²`, each norm taken per
/// position over the channel axis and averaged over positions.
pub fn vq_loss(x: &Tensor, x_hat: &Tensor, z_hat: &Tensor, z_q: &Tensor, beta: f64) -> Result<f64> {
    let rec = mean_sq_norm(x, x_hat)?;
    let quant = mean_sq_norm(z_hat, z_q)?;
    Ok(rec + quant + beta * quant)
}

/// Graph terms of the VQ objective.
pub struct VqTerms<'g> {
    pub reconstruction: Var<'g>,
    pub codebook: Var<'g>,
    pub commitment: Var<'g>,
    pub total: Var<'g>,
}

/// VQ objective on the tape.
///
/// `x`, `x_hat` are `[B, 3, H, W]`; `z_rows`, `zq_rows` are `[N, d]`.
/// The codebook term only reaches `zq_rows`, the commitment term only `z_rows`.
pub fn vq_loss_terms<'g>(
    x: Var<'g>,
    x_hat: Var<'g>,
    z_rows: Var<'g>,
    zq_rows: Var<'g>,
    beta: f64,
) -> Result<VqTerms<'g>> {
    let xs = x.shape();
    let pixels = (xs.iter().product::<usize>() / xs.get(1).copied().unwrap_or(1)) as f64;
    let n = z_rows.shape()[0] as f64;
    let reconstruction = x.sub(x_hat)?.square().sum().scale(1.0 / pixels);
    let codebook = z_rows.detach().sub(zq_rows)?.square().sum().scale(1.0 / n);
    let commitment = zq_rows.detach().sub(z_rows)?.square().sum().scale(beta / n);
    let total = reconstruction.add(codebook)?.add(commitment)?;
    Ok(VqTerms {
        reconstruction,
        codebook,
        commitment,
        total,
    })
}

/// `(discriminator loss, generator loss)` from patch probabilities.
///
/// Discriminator: `mean(−log D(x)) + mean(−log(1 − D(x̂)))`.
/// Generator: `mean(−log D(x̂))`.
pub fn adv_losses(p_real: &[f64], p_fake: &[f64]) -> (f64, f64) {
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&p| f(clamp(p))).sum::<f64>() / v.len() as f64;
    let d = mean(p_real, &|p| -p.ln()) + mean(p_fake, &|p| -(1.0 - p).ln());
    let g = mean(p_fake, &|p| -p.ln());
    (d, g)
}

fn clamped_prob<'g>(logits: Var<'g>) -> Var<'g> {
    logits.sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Discriminator objective from real and fake logits.
pub fn disc_loss_graph<'g>(real_logits: Var<'g>, fake_logits: Var<'g>) -> Var<'g> {
    let real = clamped_prob(real_logits).ln().mean().scale(-1.0);
    let fake = clamped_prob(fake_logits).affine(-1.0, 1.0).ln().mean().scale(-1.0);
    real.add(fake).expect("scalars")
}

/// Generator-side adversarial loss from logits on reconstructions.
pub fn gen_adv_loss_graph<'g>(fake_logits: Var<'g>) -> Var<'g> {
    clamped_prob(fake_logits).ln().mean().scale(-1.0)
}

/// `L_VQ + γ · L_ADV`.
pub fn total_loss(vq: f64, adv: f64, gamma: f64) -> f64 {
    vq + gamma * adv
}

/// `‖∇L_rec‖ / (‖∇L_adv‖ + 1e-6)` clamped to `[0, 1e4]`.
pub fn adaptive_gamma(rec_grad_norm: f64, adv_grad_norm: f64) -> f64 {
    (rec_grad_norm / (adv_grad_norm + GAMMA_DENOM_EPS)).clamp(0.0, GAMMA_MAX)
}

#[derive(Debug, Clone)]
struct Encoder {
    conv_in: Conv,
    stages: Vec<(Conv, ResBlock)>,
    conv_out: Conv,
}

#[derive(Debug, Clone)]
struct Decoder {
    conv_in: Conv,
    stages: Vec<(ResBlock, ConvUp)>,
    conv_out: Conv,
}

#[derive(Debug, Clone)]
struct Discriminator {
    layers: [Conv; 3],
}

/// Encoder, decoder, codebook and discriminator with their parameters.
#[derive(Debug, Clone)]
pub struct Projector {
    cfg: ProjectorConfig,
    generator: ParamStore,
    discriminator: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    disc: Discriminator,
    codebook: ParamId,
}

/// Tape handles of one generator forward pass.
pub struct GeneratorPass<'g> {
    pub z: Var<'g>,
    pub z_rows: Var<'g>,
    pub zq_rows: Var<'g>,
    pub indices: Vec<usize>,
    pub x_hat: Var<'g>,
}

impl Projector {
    pub fn new(cfg: ProjectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d) = (cfg.channels, cfg.latent_dim);
        let mut gen = ParamStore::new();

        let conv_in = Conv::new(&mut gen, "enc.conv_in", 3, c, 3, 1, 1, &mut rng);
        let stages = (0..cfg.stages())
            .map(|i| {
                let down = Conv::new(&mut gen, &format!("enc.down{i}"), c, c, 4, 2, 1, &mut rng);
                let res = ResBlock::new(&mut gen, &format!("enc.res{i}"), c, &mut rng);
                (down, res)
            })
            .collect();
        let conv_out = Conv::new(&mut gen, "enc.conv_out", c, d, 1, 1, 0, &mut rng);
        let encoder = Encoder {
            conv_in,
            stages,
            conv_out,
        };

        let conv_in = Conv::new(&mut gen, "dec.conv_in", d, c, 3, 1, 1, &mut rng);
        let stages = (0..cfg.stages())
            .map(|i| {
                let res = ResBlock::new(&mut gen, &format!("dec.res{i}"), c, &mut rng);
                let up = ConvUp::new(&mut gen, &format!("dec.up{i}"), c, c, 2, &mut rng);
                (res, up)
            })
            .collect();
        let conv_out = Conv::new(&mut gen, "dec.conv_out", c, 3, 3, 1, 1, &mut rng);
        let decoder = Decoder {
            conv_in,
            stages,
            conv_out,
        };

        let codebook = gen.add(
            "codebook",
            Tensor::uniform(vec![cfg.codebook_size, d], -0.5, 0.5, &mut rng),
        );

        let mut discriminator = ParamStore::new();
        let dc = cfg.disc_channels;
        let disc = Discriminator {
            layers: [
                Conv::new(&mut discriminator, "disc.0", 3, dc, 2, 2, 0, &mut rng),
                Conv::new(&mut discriminator, "disc.1", dc, 2 * dc, 2, 2, 0, &mut rng),
                Conv::new(&mut discriminator, "disc.2", 2 * dc, 1, 2, 2, 0, &mut rng),
            ],
        };

        Ok(Projector {
            cfg,
            generator: gen,
            discriminator,
            encoder,
            decoder,
            disc,
            codebook,
        })
    }

    pub fn config(&self) -> &ProjectorConfig {
        &self.cfg
    }

    /// Encoder, decoder and codebook parameters.
    pub fn generator_params(&self) -> &ParamStore {
        &self.generator
    }

    pub fn generator_params_mut(&mut self) -> &mut ParamStore {
        &mut self.generator
    }

    pub fn discriminator_params(&self) -> &ParamStore {
        &self.discriminator
    }

    pub fn discriminator_params_mut(&mut self) -> &mut ParamStore {
        &mut self.discriminator
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    /// Parameter id of the decoder's final convolution weight.
    pub fn decoder_last_layer(&self) -> ParamId {
        self.decoder.conv_out.w
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            entries: self.generator.get(self.codebook).clone(),
        }
    }

    /// Hash over the generator and discriminator parameters.
    pub fn content_hash(&self) -> String {
        format!(
            "{}{}",
            &self.generator.content_hash()[..32],
            &self.discriminator.content_hash()[..32]
        )
    }

    /// `[B, 3, H, W] → [B, d, H/f, W/f]`.
    pub fn encode_graph<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(LmdError::shape("encode", &s, &[0, 3, 0, 0]));
        }
        self.cfg.check_image_dims(s[2], s[3])?;
        let mut h = self.encoder.conv_in.forward(p, x)?;
        for (down, res) in &self.encoder.stages {
            h = down.forward(p, h)?;
            h = res.forward(p, h)?;
        }
        self.encoder.conv_out.forward(p, h.gelu())
    }

    /// `[B, d, h, w] → [B, 3, h·f, w·f]`, tanh-bounded.
    pub fn decode_graph<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Result<Var<'g>> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.cfg.latent_dim {
            return Err(LmdError::shape("decode", &s, &[0, self.cfg.latent_dim, 0, 0]));
        }
        let mut h = self.decoder.conv_in.forward(p, z)?;
        for (res, up) in &self.decoder.stages {
            h = res.forward(p, h)?;
            h = up.forward(p, h)?;
        }
        Ok(self.decoder.conv_out.forward(p, h.gelu())?.tanh())
    }

    /// Patch logits `[B, 1, H/8, W/8]`; each logit sees one 8×8 tile.
    pub fn discriminate_graph<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 4 || !s[2].is_multiple_of(DISC_PATCH) || !s[3].is_multiple_of(DISC_PATCH) {
            return Err(LmdError::NotMultiple {
                what: "discriminator input side",
                got: s.get(2).copied().unwrap_or(0),
                multiple: DISC_PATCH,
            });
        }
        let [l0, l1, l2] = &self.disc.layers;
        let h = l0.forward(p, x)?.gelu();
        let h = l1.forward(p, h)?.gelu();
        l2.forward(p, h)
    }

    /// Quantizes `[B, d, h, w]` on the tape.
    ///
    /// Returns `(z_rows, zq_rows, straight_through, indices)`; the
    /// straight-through map carries `z_q` forward and hands its gradient
    /// to `ẑ` unchanged.
    pub fn quantize_graph<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Result<(Var<'g>, Var<'g>, Var<'g>, Vec<usize>)> {
        let s = z.shape();
        let d = self.cfg.latent_dim;
        let z_rows = z.permute(&[0, 2, 3, 1])?.reshape(vec![s[0] * s[2] * s[3], d])?;
        let cb = self.codebook();
        let indices = cb.nearest_rows(z_rows.value().data());
        let zq_rows = p[self.codebook].gather_rows(Rc::new(indices.clone()))?;
        let st = straight_through(z_rows, zq_rows)?;
        let st = st.reshape(vec![s[0], s[2], s[3], d])?.permute(&[0, 3, 1, 2])?;
        Ok((z_rows, zq_rows, st, indices))
    }

    /// `x → ẑ → z_q → x̂` on the tape.
    pub fn generator_pass<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<GeneratorPass<'g>> {
        let z = self.encode_graph(p, x)?;
        let (z_rows, zq_rows, st, indices) = self.quantize_graph(p, z)?;
        let x_hat = self.decode_graph(p, st)?;
        Ok(GeneratorPass {
            z,
            z_rows,
            zq_rows,
            indices,
            x_hat,
        })
    }

    /// Encodes a batch of `H × W × 3` images.
    pub fn encode_batch(&self, images: &[&Tensor]) -> Result<Vec<LatentImage>> {
        let x = stack_nchw(images)?;
        let (hh, ww) = (x.shape()[2], x.shape()[3]);
        let g = Graph::new();
        let p = self.generator.bind(&g, false);
        let z = self.encode_graph(&p, g.constant(x))?;
        unstack_nchw(&z.value())?
            .into_iter()
            .map(|grid| LatentImage::new(grid, (hh, ww)))
            .collect()
    }

    pub fn encode(&self, image: &Tensor) -> Result<LatentImage> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    /// Decodes any `h × w × d` grid to an `H × W × 3` image.
    pub fn decode_grid(&self, grid: &Tensor) -> Result<Tensor> {
        let z = stack_nchw(&[grid])?;
        let g = Graph::new();
        let p = self.generator.bind(&g, false);
        let x = self.decode_graph(&p, g.constant(z))?;
        Ok(unstack_nchw(&x.value())?.remove(0))
    }

    pub fn decode(&self, zq: &QuantizedLatent) -> Result<Tensor> {
        self.decode_grid(&zq.grid)
    }

    /// `decode(quantize(encode(x)))`.
    pub fn round_trip(&self, image: &Tensor) -> Result<Tensor> {
        let z = self.encode(image)?;
        self.decode(&quantize(&z, &self.codebook())?)
    }
}

/// `z + sg[z_q − z]`: forward value `z_q`, gradient copied to `z`.
pub fn straight_through<'g>(z: Var<'g>, zq: Var<'g>) -> Result<Var<'g>> {
    z.add(zq.sub(z)?.detach())
}
