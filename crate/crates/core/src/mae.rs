//! Masked autoencoder over the latent grid: patch embedding, sin-cos spatial
//! positions, a visible-only encoder and a full-grid decoder.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LmdError, Result};
use crate::nn::{LayerNorm, Linear, TransformerBlock};
use crate::numerics::{concat_rows, Graph, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::projector::LatentImage;
use crate::schedule::MaskPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaeMode {
    /// 12 encoder + 8 decoder blocks.
    Discriminant,
    /// 8 encoder + 12 decoder blocks.
    Generative,
    /// Any block split; used for small-scale runs.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaeConfig {
    pub patch_size: usize,
    pub d_model: usize,
    pub d_decoder: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mode: MaeMode,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig::for_mode(MaeMode::Generative)
    }
}

impl MaeConfig {
    pub fn for_mode(mode: MaeMode) -> Self {
        let (encoder_blocks, decoder_blocks) = match mode {
            MaeMode::Discriminant => (12, 8),
            _ => (8, 12),
        };
        MaeConfig {
            patch_size: 2,
            d_model: 512,
            d_decoder: 1024,
            encoder_blocks,
            decoder_blocks,
            heads: 8,
            mlp_ratio: 4,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(LmdError::Config(m));
        if self.patch_size == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return fail("patch_size, heads and mlp_ratio must be positive".into());
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(4) {
            return Err(LmdError::NotMultiple {
                what: "d_model",
                got: self.d_model,
                multiple: 4,
            });
        }
        if self.d_decoder == 0 || !self.d_decoder.is_multiple_of(4) {
            return Err(LmdError::NotMultiple {
                what: "d_decoder",
                got: self.d_decoder,
                multiple: 4,
            });
        }
        for (what, width) in [("d_model", self.d_model), ("d_decoder", self.d_decoder)] {
            if width % self.heads != 0 {
                return Err(LmdError::NotMultiple {
                    what,
                    got: width,
                    multiple: self.heads,
                });
            }
        }
        let blocks = (self.encoder_blocks, self.decoder_blocks);
        match self.mode {
            MaeMode::Discriminant if blocks != (12, 8) => fail(format!(
                "discriminant mode needs 12 + 8 blocks, got {} + {}",
                blocks.0, blocks.1
            )),
            MaeMode::Generative if blocks != (8, 12) => fail(format!(
                "generative mode needs 8 + 12 blocks, got {} + {}",
                blocks.0, blocks.1
            )),
            MaeMode::Custom if blocks.0 == 0 || blocks.1 == 0 => {
                fail("custom mode needs at least one encoder and one decoder block".into())
            }
            _ => Ok(()),
        }
    }

    /// Patch grid `(h/p, w/p)` for an `h × w` latent.
    pub fn patch_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        for dim in [h, w] {
            if dim == 0 || dim % self.patch_size != 0 {
                return Err(LmdError::NotMultiple {
                    what: "latent grid",
                    got: dim,
                    multiple: self.patch_size,
                });
            }
        }
        Ok((h / self.patch_size, w / self.patch_size))
    }
}

/// Patch-grid coordinates of token `index` on a grid `grid_w` patches wide.
pub fn patch_coords(index: usize, grid_w: usize) -> (usize, usize) {
    (index / grid_w, index % grid_w)
}

fn sincos_into(pos: usize, out: &mut [f64], width: usize) {
    for j in 0..out.len() / 2 {
        let angle = pos as f64 / 10000f64.powf((4 * j) as f64 / width as f64);
        out[2 * j] = angle.sin();
        out[2 * j + 1] = angle.cos();
    }
}

/// Spatial position embedding of patch `(c_x, c_y)` at `width` channels.
pub fn spe(c_x: usize, c_y: usize, width: usize) -> Result<Vec<f64>> {
    if width == 0 || !width.is_multiple_of(4) {
        return Err(LmdError::NotMultiple {
            what: "embedding width",
            got: width,
            multiple: 4,
        });
    }
    let mut out = vec![0.0; width];
    let (x, y) = out.split_at_mut(width / 2);
    sincos_into(c_x, x, width);
    sincos_into(c_y, y, width);
    Ok(out)
}

/// `[gh·gw, width]` table of [`spe`] rows in row-major token order.
pub fn spe_table(grid: (usize, usize), width: usize) -> Result<Tensor> {
    let l = grid.0 * grid.1;
    let mut data = Vec::with_capacity(l * width);
    for i in 0..l {
        let (cx, cy) = patch_coords(i, grid.1);
        data.extend(spe(cx, cy, width)?);
    }
    Tensor::new(vec![l, width], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// `[l, d_model]`.
    pub tokens: Tensor,
    pub coords: Vec<(usize, usize)>,
    pub grid: (usize, usize),
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// `tokens[i] += sign · spe(coords[i])`.
pub fn add_positions(seq: &PatchSequence, sign: f64) -> Result<PatchSequence> {
    let width = seq.tokens.shape()[1];
    let mut tokens = seq.tokens.clone();
    for (row, &(cx, cy)) in tokens.data_mut().chunks_mut(width).zip(&seq.coords) {
        for (t, e) in row.iter_mut().zip(spe(cx, cy, width)?) {
            *t += sign * e;
        }
    }
    Ok(PatchSequence {
        tokens,
        coords: seq.coords.clone(),
        grid: seq.grid,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedLatent {
    /// `h × w × d`.
    pub grid: Tensor,
}

/// `[B, h, w, d] → [B, l, p·p·d]`.
pub fn patchify<'g>(z: Var<'g>, p: usize) -> Result<Var<'g>> {
    let s = z.shape();
    if s.len() != 4 || !s[1].is_multiple_of(p) || !s[2].is_multiple_of(p) {
        return Err(LmdError::shape("patchify", &s, &[0, p, p, 0]));
    }
    let (b, gh, gw, d) = (s[0], s[1] / p, s[2] / p, s[3]);
    z.reshape(vec![b, gh, p, gw, p, d])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(vec![b, gh * gw, p * p * d])
}

/// Inverse of [`patchify`].
pub fn unpatchify<'g>(x: Var<'g>, p: usize, grid: (usize, usize), d: usize) -> Result<Var<'g>> {
    let b = x.shape()[0];
    x.reshape(vec![b, grid.0, grid.1, p, p, d])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(vec![b, grid.0 * p, grid.1 * p, d])
}

fn check_plans(plans: &[MaskPlan], l: usize) -> Result<usize> {
    let first = plans
        .first()
        .ok_or_else(|| LmdError::InvalidArgument("no mask plans".into()))?;
    let visible = first.unmasked().len();
    for plan in plans {
        if plan.len() != l {
            return Err(LmdError::InvalidArgument(format!(
                "mask plan covers {} patches but the sequence has {l}",
                plan.len()
            )));
        }
        if plan.unmasked().len() != visible {
            return Err(LmdError::InvalidArgument(
                "mask plans in one batch must hide the same number of patches".into(),
            ));
        }
    }
    if visible == 0 {
        return Err(LmdError::InvalidArgument("every patch is masked".into()));
    }
    Ok(visible)
}

/// Rows of the flattened `[B·l, ·]` sequence that stay visible.
fn visible_rows(plans: &[MaskPlan], l: usize) -> Vec<usize> {
    plans
        .iter()
        .enumerate()
        .flat_map(|(b, plan)| plan.unmasked().iter().map(move |&i| b * l + i))
        .collect()
}

/// For every output slot, the row of `[encoded; mask_token]` that fills it.
fn scatter_rows(plans: &[MaskPlan], visible: usize) -> Vec<usize> {
    let mask_row = plans.len() * visible;
    let mut out = Vec::with_capacity(plans.len() * plans[0].len());
    for (b, plan) in plans.iter().enumerate() {
        let mut rank = 0;
        for i in 0..plan.len() {
            if plan.unmasked().get(rank) == Some(&i) {
                out.push(b * visible + rank);
                rank += 1;
            } else {
                out.push(mask_row);
            }
        }
    }
    out
}

/// `[B, h, w, d]` 0/1 weights selecting cells of masked patches.
pub fn masked_cell_weights(plans: &[MaskPlan], p: usize, grid: (usize, usize), d: usize) -> Tensor {
    let (h, w) = (grid.0 * p, grid.1 * p);
    let mut data = vec![0.0; plans.len() * h * w * d];
    for (b, plan) in plans.iter().enumerate() {
        for &i in plan.masked() {
            let (cx, cy) = patch_coords(i, grid.1);
            for r in cx * p..(cx + 1) * p {
                for c in cy * p..(cy + 1) * p {
                    let at = ((b * h + r) * w + c) * d;
                    data[at..at + d].fill(1.0);
                }
            }
        }
    }
    Tensor::new(vec![plans.len(), h, w, d], data).expect("sized")
}

/// Mean squared error over cells of masked patches; zero when nothing is
/// masked. `target` is held constant.
pub fn lir_loss_graph<'g>(rec: Var<'g>, target: &Tensor, plans: &[MaskPlan], p: usize) -> Result<Var<'g>> {
    let s = rec.shape();
    if s.as_slice() != target.shape() || s.len() != 4 || s[0] != plans.len() {
        return Err(LmdError::shape("lir_loss", &s, target.shape()));
    }
    let grid = (s[1] / p, s[2] / p);
    let weights = masked_cell_weights(plans, p, grid, s[3]);
    let count = weights.sum();
    let diff = rec.sub(rec.graph().constant(target.clone()))?;
    let masked = diff.mul_const(Rc::new(weights))?.square().sum();
    Ok(if count == 0.0 {
        masked.scale(0.0)
    } else {
        masked.scale(1.0 / count)
    })
}

/// Value-level [`lir_loss_graph`] for one latent.
pub fn lir_loss(z: &LatentImage, rec: &ReconstructedLatent, plan: &MaskPlan, p: usize) -> Result<f64> {
    if z.grid.shape() != rec.grid.shape() {
        return Err(LmdError::shape("lir_loss", z.grid.shape(), rec.grid.shape()));
    }
    let g = Graph::new();
    let mut shape = vec![1];
    shape.extend_from_slice(rec.grid.shape());
    let r = g.constant(rec.grid.reshape(shape.clone())?);
    let t = z.grid.reshape(shape)?;
    Ok(lir_loss_graph(r, &t, std::slice::from_ref(plan), p)?.item())
}

/// Stacks `h × w × d` grids into one `[B, h, w, d]` tensor.
pub fn stack_latents(grids: &[&Tensor]) -> Result<Tensor> {
    let first = grids
        .first()
        .ok_or_else(|| LmdError::InvalidArgument("empty latent batch".into()))?;
    let mut data = Vec::with_capacity(grids.len() * first.numel());
    for g in grids {
        if g.shape() != first.shape() {
            return Err(LmdError::shape("stack_latents", first.shape(), g.shape()));
        }
        data.extend_from_slice(g.data());
    }
    let mut shape = vec![grids.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

#[derive(Debug, Clone)]
pub struct LatentMae {
    cfg: MaeConfig,
    latent_dim: usize,
    params: ParamStore,
    embed: Linear,
    encoder: Vec<TransformerBlock>,
    enc_norm: LayerNorm,
    dec_embed: Linear,
    mask_token: ParamId,
    decoder: Vec<TransformerBlock>,
    dec_norm: LayerNorm,
    head: Linear,
}

impl LatentMae {
    pub fn new(cfg: MaeConfig, latent_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if latent_dim == 0 {
            return Err(LmdError::Config("latent_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let patch_dim = cfg.patch_size * cfg.patch_size * latent_dim;
        let (dm, dd) = (cfg.d_model, cfg.d_decoder);
        let embed = Linear::new(&mut params, "patch_embed", patch_dim, dm, &mut rng);
        let encoder = (0..cfg.encoder_blocks)
            .map(|i| TransformerBlock::new(&mut params, &format!("enc.{i}"), dm, cfg.heads, cfg.mlp_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = LayerNorm::new(&mut params, "enc.norm", dm);
        let dec_embed = Linear::new(&mut params, "dec.embed", dm, dd, &mut rng);
        let mask_token = params.add("mask_token", Tensor::randn(vec![1, dd], 0.02, &mut rng));
        let decoder = (0..cfg.decoder_blocks)
            .map(|i| TransformerBlock::new(&mut params, &format!("dec.{i}"), dd, cfg.heads, cfg.mlp_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNorm::new(&mut params, "dec.norm", dd);
        let head = Linear::new(&mut params, "head", dd, patch_dim, &mut rng);
        Ok(LatentMae {
            cfg,
            latent_dim,
            params,
            embed,
            encoder,
            enc_norm,
            dec_embed,
            mask_token,
            decoder,
            dec_norm,
            head,
        })
    }

    pub fn config(&self) -> &MaeConfig {
        &self.cfg
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn mask_token(&self) -> ParamId {
        self.mask_token
    }

    pub fn patch_embed_weights(&self) -> (ParamId, ParamId) {
        (self.embed.w, self.embed.b)
    }

    /// `[B, h, w, d] → [B, l, d_model]`, positions not yet added.
    pub fn embed_graph<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Result<Var<'g>> {
        let s = z.shape();
        if s.len() != 4 || s[3] != self.latent_dim {
            return Err(LmdError::shape("patch_embed", &s, &[0, 0, 0, self.latent_dim]));
        }
        self.cfg.patch_grid(s[1], s[2])?;
        self.embed.forward(p, patchify(z, self.cfg.patch_size)?)
    }

    /// Visible tokens of `x: [B, l, d_model]` (positions included) through
    /// the encoder blocks.
    pub fn encode_graph<'g>(&self, p: &Bound<'g>, x: Var<'g>, plans: &[MaskPlan]) -> Result<Var<'g>> {
        let s = x.shape();
        let (b, l, dm) = (s[0], s[1], s[2]);
        if plans.len() != b {
            return Err(LmdError::InvalidArgument(format!(
                "{} mask plans for batch of {b}",
                plans.len()
            )));
        }
        let visible = check_plans(plans, l)?;
        let mut h = x
            .reshape(vec![b * l, dm])?
            .gather_rows(Rc::new(visible_rows(plans, l)))?
            .reshape(vec![b, visible, dm])?;
        for block in &self.encoder {
            h = block.forward(p, h)?;
        }
        self.enc_norm.forward(p, h)
    }

    /// `encoded: [B, visible, d_model]` → reconstructed `[B, h, w, d]`.
    pub fn decode_graph<'g>(
        &self,
        p: &Bound<'g>,
        encoded: Var<'g>,
        plans: &[MaskPlan],
        grid: (usize, usize),
    ) -> Result<Var<'g>> {
        let s = encoded.shape();
        let l = grid.0 * grid.1;
        let visible = check_plans(plans, l)?;
        if s.len() != 3 || s[0] != plans.len() || s[1] != visible || s[2] != self.cfg.d_model {
            return Err(LmdError::shape("decode", &s, &[plans.len(), visible, self.cfg.d_model]));
        }
        let (b, dd) = (s[0], self.cfg.d_decoder);
        let h = self.dec_embed.forward(p, encoded)?.reshape(vec![b * visible, dd])?;
        let mut h = concat_rows(&[h, p[self.mask_token]])?
            .gather_rows(Rc::new(scatter_rows(plans, visible)))?
            .reshape(vec![b, l, dd])?
            .add_const(&spe_table(grid, dd)?.map(|v| -v))?;
        for block in &self.decoder {
            h = block.forward(p, h)?;
        }
        let out = self.head.forward(p, self.dec_norm.forward(p, h)?)?;
        unpatchify(out, self.cfg.patch_size, grid, self.latent_dim)
    }

    /// Full masked reconstruction of `z: [B, h, w, d]`.
    pub fn forward_graph<'g>(&self, p: &Bound<'g>, z: Var<'g>, plans: &[MaskPlan]) -> Result<Var<'g>> {
        let s = z.shape();
        let grid = self.cfg.patch_grid(*s.get(1).unwrap_or(&0), *s.get(2).unwrap_or(&0))?;
        let tokens = self.embed_graph(p, z)?.add_const(&spe_table(grid, self.cfg.d_model)?)?;
        let encoded = self.encode_graph(p, tokens, plans)?;
        self.decode_graph(p, encoded, plans, grid)
    }

    /// Masked-only reconstruction loss for a `[B, h, w, d]` batch.
    pub fn loss_graph<'g>(&self, g: &'g Graph, p: &Bound<'g>, z: &Tensor, plans: &[MaskPlan]) -> Result<Var<'g>> {
        let input = g.constant(z.clone());
        let rec = self.forward_graph(p, input, plans)?;
        lir_loss_graph(rec, z, plans, self.cfg.patch_size)
    }

    /// Mean-pooled encoder features of unmasked `[B, h, w, d]` latents.
    pub fn features_graph<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Result<Var<'g>> {
        let s = z.shape();
        let grid = self.cfg.patch_grid(*s.get(1).unwrap_or(&0), *s.get(2).unwrap_or(&0))?;
        let l = grid.0 * grid.1;
        let tokens = self.embed_graph(p, z)?.add_const(&spe_table(grid, self.cfg.d_model)?)?;
        let plans = vec![MaskPlan::none(l); s[0]];
        self.encode_graph(p, tokens, &plans)?.mean_tokens()
    }

    pub fn patch_embed(&self, z: &LatentImage) -> Result<PatchSequence> {
        let (h, w) = (z.height(), z.width());
        let grid = self.cfg.patch_grid(h, w)?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let input = g.constant(stack_latents(&[&z.grid])?);
        let tokens = self.embed_graph(&p, input)?.value();
        let l = grid.0 * grid.1;
        Ok(PatchSequence {
            tokens: tokens.reshape(vec![l, self.cfg.d_model])?,
            coords: (0..l).map(|i| patch_coords(i, grid.1)).collect(),
            grid,
        })
    }

    /// Visible tokens of `seq` (positions already added) through the encoder.
    pub fn encode_visible(&self, seq: &PatchSequence, plan: &MaskPlan) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let l = seq.len();
        let x = g.constant(seq.tokens.reshape(vec![1, l, self.cfg.d_model])?);
        let out = self.encode_graph(&p, x, std::slice::from_ref(plan))?.value();
        let visible = out.shape()[1];
        out.reshape(vec![visible, self.cfg.d_model])
    }

    pub fn decode_full(&self, encoded: &Tensor, plan: &MaskPlan, grid: (usize, usize)) -> Result<ReconstructedLatent> {
        if encoded.rank() != 2 {
            return Err(LmdError::shape("decode_full", encoded.shape(), &[0, self.cfg.d_model]));
        }
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let mut shape = vec![1];
        shape.extend_from_slice(encoded.shape());
        let x = g.constant(encoded.reshape(shape)?);
        let out = self.decode_graph(&p, x, std::slice::from_ref(plan), grid)?.value();
        let s = out.shape()[1..].to_vec();
        Ok(ReconstructedLatent { grid: out.reshape(s)? })
    }

    /// `patch_embed → +SPE → encode_visible → decode_full`.
    pub fn reconstruct(&self, z: &LatentImage, plan: &MaskPlan) -> Result<ReconstructedLatent> {
        let seq = add_positions(&self.patch_embed(z)?, 1.0)?;
        let encoded = self.encode_visible(&seq, plan)?;
        self.decode_full(&encoded, plan, seq.grid)
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }
}

/// Linear classifier over mean-pooled encoder features.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    params: ParamStore,
    linear: Linear,
    classes: usize,
}

impl ClassifierHead {
    pub fn new(d_model: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(LmdError::Config(format!("need at least 2 classes, got {classes}")));
        }
        let mut params = ParamStore::new();
        let linear = Linear::new(
            &mut params,
            "cls",
            d_model,
            classes,
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        Ok(ClassifierHead {
            params,
            linear,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, features: Var<'g>) -> Result<Var<'g>> {
        self.linear.forward(p, features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MaeConfig {
        MaeConfig {
            patch_size: 2,
            d_model: 8,
            d_decoder: 12,
            encoder_blocks: 1,
            decoder_blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            mode: MaeMode::Custom,
        }
    }

    #[test]
    fn preset_modes_validate() {
        MaeConfig::for_mode(MaeMode::Discriminant).validate().unwrap();
        MaeConfig::for_mode(MaeMode::Generative).validate().unwrap();
        let mut c = MaeConfig::for_mode(MaeMode::Generative);
        c.encoder_blocks = 9;
        assert!(c.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn token_counts() {
        let c = MaeConfig::default();
        assert_eq!(c.patch_grid(28, 28).unwrap(), (14, 14));
        let mut c4 = tiny();
        c4.patch_size = 4;
        assert_eq!(c4.patch_grid(4, 4).unwrap(), (1, 1));
        assert!(c.patch_grid(7, 8).is_err());
    }

    #[test]
    fn spe_at_origin_alternates() {
        let v = spe(0, 0, 16).unwrap();
        for (i, x) in v.iter().enumerate() {
            assert_eq!(*x, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(spe(1, 1, 6).is_err());
    }

    #[test]
    fn positions_cancel() {
        let seq = PatchSequence {
            tokens: Tensor::from_fn(vec![4, 8], |i| (i as f64 * 0.37).sin()),
            coords: (0..4).map(|i| patch_coords(i, 2)).collect(),
            grid: (2, 2),
        };
        let back = add_positions(&add_positions(&seq, 1.0).unwrap(), -1.0).unwrap();
        assert!(back.tokens.max_abs_diff(&seq.tokens) <= 1e-12);
        let zero = PatchSequence {
            tokens: Tensor::zeros(vec![4, 8]),
            ..seq
        };
        assert_eq!(add_positions(&zero, 1.0).unwrap().tokens, spe_table((2, 2), 8).unwrap());
    }

    #[test]
    fn single_masked_patch_constant_error() {
        let z = LatentImage::new(Tensor::zeros(vec![4, 4, 3]), (32, 32)).unwrap();
        let plan = MaskPlan::from_masked(4, &[2]).unwrap();
        let mut grid = Tensor::full(vec![4, 4, 3], 0.5);
        // unmasked cells are arbitrary
        grid.data_mut()[0] = 99.0;
        let rec = ReconstructedLatent { grid };
        assert!((lir_loss(&z, &rec, &plan, 2).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(lir_loss(&z, &rec, &MaskPlan::none(4), 2).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_keeps_grid_shape() {
        let mae = LatentMae::new(tiny(), 3, 1).unwrap();
        let z = LatentImage::new(Tensor::from_fn(vec![4, 6, 3], |i| (i as f64).cos()), (32, 48)).unwrap();
        let plan = MaskPlan::random(6, 0.5, 3).unwrap();
        let rec = mae.reconstruct(&z, &plan).unwrap();
        assert_eq!(rec.grid.shape(), &[4, 6, 3]);
        assert_eq!(rec, mae.reconstruct(&z, &plan).unwrap());
        let one_left = MaskPlan::from_masked(6, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(mae.reconstruct(&z, &one_left).unwrap().grid.shape(), &[4, 6, 3]);
        let all = MaskPlan::from_masked(6, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert!(mae.reconstruct(&z, &all).is_err());
    }

    #[test]
    fn encoder_sees_only_visible_tokens() {
        let mae = LatentMae::new(tiny(), 3, 1).unwrap();
        let z = LatentImage::new(Tensor::from_fn(vec![4, 4, 3], |i| (i as f64 * 0.1).sin()), (32, 32)).unwrap();
        let seq = add_positions(&mae.patch_embed(&z).unwrap(), 1.0).unwrap();
        let plan = MaskPlan::from_masked(4, &[1, 3]).unwrap();
        let enc = mae.encode_visible(&seq, &plan).unwrap();
        assert_eq!(enc.shape(), &[2, 8]);
        // changing a masked token leaves the encoding untouched
        let mut other = seq.clone();
        other.tokens.data_mut()[8] += 5.0;
        assert_eq!(enc, mae.encode_visible(&other, &plan).unwrap());
    }
}
