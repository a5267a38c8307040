//! Training loops: projector pre-training, scheduled masked latent training,
//! classifier fine-tuning, and masked reconstruction of whole images.

use std::path::PathBuf;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::RunConfig;
use crate::data::{hflip, stack_nchw};
use crate::error::{LmdError, Result};
use crate::mae::{stack_latents, ClassifierHead, LatentMae, MaeMode};
use crate::metrics::{IterationRecord, MetricsLog};
use crate::numerics::{Graph, Tensor};
use crate::optim::{lr_at, Optimizer};
use crate::projector::{
    adaptive_gamma, disc_loss_graph, gen_adv_loss_graph, quantize, vq_loss_terms, GammaMode, LatentImage, Projector,
};
use crate::schedule::MaskPlan;

/// Folds a list of integers into one well-mixed seed (splitmix64).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        acc = z ^ (z >> 31);
    }
    acc
}

pub fn steps_per_epoch(items: usize, batch_size: usize) -> u64 {
    items.div_ceil(batch_size.max(1)) as u64
}

/// Seeded epoch-wise shuffling over `0..n`.
#[derive(Debug, Clone)]
pub struct Batcher {
    seed: u64,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
}

impl Batcher {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(LmdError::InvalidArgument("dataset is empty".into()));
        }
        let mut b = Batcher {
            seed,
            epoch: 0,
            pos: 0,
            order: (0..n).collect(),
        };
        b.reshuffle();
        Ok(b)
    }

    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        self.order
            .shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, self.epoch])));
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.pos = 0;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where a diagnostic checkpoint goes if a loss turns non-finite.
    pub diagnostic_dir: Option<PathBuf>,
    /// Log progress every n steps (0 = quiet).
    pub progress_every: u64,
}

impl RunOptions {
    fn halt(&self, what: &str, step: u64, ck: impl FnOnce() -> Result<Checkpoint>) -> LmdError {
        if let Some(dir) = &self.diagnostic_dir {
            let path = dir.join("diagnostic.ckpt");
            match ck().and_then(|c| c.save(&path)) {
                Ok(()) => warn!("wrote diagnostic checkpoint {}", path.display()),
                Err(e) => warn!("could not write diagnostic checkpoint: {e}"),
            }
        }
        LmdError::NonFinite(format!("{what} at step {step}"))
    }

    fn progress(&self, stage: &str, step: u64, total: u64, loss: f64) {
        if self.progress_every > 0 && (step.is_multiple_of(self.progress_every) || step + 1 == total) {
            info!("{stage} step {step}/{total} loss {loss:.6}");
        }
    }
}

fn config_value(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn config_of(ck: &Checkpoint) -> Result<RunConfig> {
    serde_json::from_value(ck.config.clone()).map_err(|e| LmdError::Checkpoint {
        path: PathBuf::new(),
        reason: format!("embedded config: {e}"),
    })
}

fn elapsed(start: Instant) -> f64 {
    start.elapsed().as_secs_f64().max(1e-9)
}

fn maybe_flip(t: &Tensor, flip: bool, rng: &mut impl Rng) -> Result<Tensor> {
    if flip && rng.random_bool(0.5) {
        hflip(t)
    } else {
        Ok(t.clone())
    }
}

pub struct LspRun {
    pub projector: Projector,
    pub log: MetricsLog,
    pub checkpoint: Checkpoint,
}

fn lsp_checkpoint(proj: &Projector, cfg: &RunConfig, step: u64, opts: [&Optimizer; 2]) -> Checkpoint {
    let mut ck = Checkpoint::new(Stage::Lsp, step, config_value(cfg));
    ck.meta = json!({ "gen_opt_steps": opts[0].steps_taken(), "disc_opt_steps": opts[1].steps_taken() });
    ck.push_group("gen", proj.generator_params().to_entries());
    ck.push_group("disc", proj.discriminator_params().to_entries());
    ck.push_group("opt.gen", opts[0].state_entries());
    ck.push_group("opt.disc", opts[1].state_entries());
    ck
}

/// Rebuilds the projector stored in an LSP checkpoint.
pub fn load_projector(ck: &Checkpoint) -> Result<Projector> {
    if ck.stage != Stage::Lsp {
        return Err(LmdError::Checkpoint {
            path: PathBuf::new(),
            reason: format!("expected an lsp checkpoint, found {}", ck.stage),
        });
    }
    let cfg = config_of(ck)?;
    let mut proj = Projector::new(cfg.projector, 0)?;
    proj.generator_params_mut().load(&ck.group("gen"))?;
    proj.discriminator_params_mut().load(&ck.group("disc"))?;
    Ok(proj)
}

/// Alternating generator (VQ + γ·adversarial) and discriminator updates.
/// The adversarial term is off for the first `disc_warmup_frac` of steps.
pub fn pretrain_lsp(images: &[Tensor], cfg: &RunConfig, opts: &RunOptions) -> Result<LspRun> {
    let lsp = &cfg.lsp;
    let seed = cfg.train.seed;
    let mut proj = Projector::new(cfg.projector.clone(), seed)?;
    let mut gen_opt = Optimizer::new(lsp.optimizer, lsp.weight_decay, proj.generator_params().tensors());
    let mut disc_opt = Optimizer::new(lsp.optimizer, lsp.weight_decay, proj.discriminator_params().tensors());
    let warmup = (lsp.disc_warmup_frac * lsp.steps as f64).ceil() as u64;
    let gamma_mode = cfg.projector.gamma_mode;
    let adversarial = gamma_mode != GammaMode::Fixed(0.0);
    let mut batcher = Batcher::new(images.len(), mix_seed(&[seed, 1]))?;
    let mut log = MetricsLog::new(cfg.train.ema_window);

    for step in 0..lsp.steps {
        let start = Instant::now();
        let lr = lr_at(step, lsp.steps, lsp.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 2, step]));
        let batch = batcher
            .next_batch(lsp.batch_size)
            .into_iter()
            .map(|i| maybe_flip(&images[i], cfg.data.flip, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let x = stack_nchw(&batch.iter().collect::<Vec<_>>())?;
        let adv_on = adversarial && step >= warmup;

        let g = Graph::new();
        let gp = proj.generator_params().bind(&g, true);
        let dp = proj.discriminator_params().bind(&g, false);
        let xv = g.constant(x.clone());
        let pass = proj.generator_pass(&gp, xv)?;
        let vq = vq_loss_terms(xv, pass.x_hat, pass.z_rows, pass.zq_rows, cfg.projector.beta)?;
        let total = if adv_on {
            let adv = gen_adv_loss_graph(proj.discriminate_graph(&dp, pass.x_hat)?);
            let gamma = match gamma_mode {
                GammaMode::Fixed(v) => v,
                GammaMode::Adaptive => {
                    let last = gp[proj.decoder_last_layer()];
                    let rec = g.backward(vq.reconstruction)?.get_or_zeros(last).sq_norm().sqrt();
                    let adv_norm = g.backward(adv)?.get_or_zeros(last).sq_norm().sqrt();
                    adaptive_gamma(rec, adv_norm)
                }
            };
            vq.total.add(adv.scale(gamma))?
        } else {
            vq.total
        };
        let loss = total.item();
        if !loss.is_finite() {
            return Err(opts.halt("projector loss", step, || {
                Ok(lsp_checkpoint(&proj, cfg, step, [&gen_opt, &disc_opt]))
            }));
        }
        let grads = gp.grads(&g.backward(total)?);
        let x_hat = pass.x_hat.value();
        drop(g);
        gen_opt.step(proj.generator_params_mut().tensors_mut(), &grads, lr)?;

        if adv_on {
            let g = Graph::new();
            let dp = proj.discriminator_params().bind(&g, true);
            let real = proj.discriminate_graph(&dp, g.constant(x))?;
            let fake = proj.discriminate_graph(&dp, g.constant(x_hat.as_ref().clone()))?;
            let d_loss = disc_loss_graph(real, fake);
            if !d_loss.item().is_finite() {
                return Err(opts.halt("discriminator loss", step, || {
                    Ok(lsp_checkpoint(&proj, cfg, step, [&gen_opt, &disc_opt]))
                }));
            }
            let grads = dp.grads(&g.backward(d_loss)?);
            disc_opt.step(proj.discriminator_params_mut().tensors_mut(), &grads, lr)?;
        }
        log.push(IterationRecord::new(step, elapsed(start), loss))?;
        opts.progress("lsp", step, lsp.steps, loss);
    }
    let mut checkpoint = lsp_checkpoint(&proj, cfg, lsp.steps, [&gen_opt, &disc_opt]);
    checkpoint.frozen = true;
    Ok(LspRun {
        projector: proj,
        log,
        checkpoint,
    })
}

/// Pre-quantization latents of every image, plus their mirrored versions
/// when flipping is enabled.
#[derive(Debug, Clone)]
pub struct LatentCache {
    pub grids: Vec<Tensor>,
    pub flipped: Option<Vec<Tensor>>,
}

impl LatentCache {
    pub fn encode(proj: &Projector, images: &[Tensor], flip: bool) -> Result<Self> {
        let run = |imgs: &[Tensor]| -> Result<Vec<Tensor>> {
            let mut out = Vec::with_capacity(imgs.len());
            for chunk in imgs.chunks(16) {
                let refs: Vec<&Tensor> = chunk.iter().collect();
                out.extend(proj.encode_batch(&refs)?.into_iter().map(|z| z.grid));
            }
            Ok(out)
        };
        let grids = run(images)?;
        let flipped = if flip {
            Some(run(&images.iter().map(hflip).collect::<Result<Vec<_>>>()?)?)
        } else {
            None
        };
        Ok(LatentCache { grids, flipped })
    }

    pub fn from_grids(grids: Vec<Tensor>) -> Self {
        LatentCache { grids, flipped: None }
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    fn pick(&self, i: usize, rng: &mut impl Rng) -> &Tensor {
        match &self.flipped {
            Some(f) if rng.random_bool(0.5) => &f[i],
            _ => &self.grids[i],
        }
    }

    fn batch(&self, idx: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
        let refs: Vec<&Tensor> = idx.iter().map(|&i| self.pick(i, rng)).collect();
        stack_latents(&refs)
    }
}

pub struct LsmdRun {
    pub mae: LatentMae,
    pub log: MetricsLog,
    pub checkpoint: Checkpoint,
}

fn lsmd_checkpoint(mae: &LatentMae, cfg: &RunConfig, step: u64, opt: &Optimizer, lsp_hash: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(Stage::Lsmd, step, config_value(cfg));
    ck.meta = json!({ "opt_steps": opt.steps_taken(), "latent_dim": mae.latent_dim(), "lsp_hash": lsp_hash });
    ck.push_group("mae", mae.params().to_entries());
    ck.push_group("opt", opt.state_entries());
    ck
}

/// Rebuilds the latent autoencoder stored in an LSMD or fine-tune checkpoint.
pub fn load_mae(ck: &Checkpoint) -> Result<LatentMae> {
    if ck.stage == Stage::Lsp {
        return Err(LmdError::Checkpoint {
            path: PathBuf::new(),
            reason: "expected an lsmd checkpoint, found lsp".into(),
        });
    }
    let cfg = config_of(ck)?;
    let mut mae = LatentMae::new(cfg.mae, cfg.projector.latent_dim, 0)?;
    mae.params_mut().load(&ck.group("mae"))?;
    Ok(mae)
}

/// Scheduled masked training on the frozen projector's latents.
pub fn train_lmd(images: &[Tensor], lsp: &Projector, cfg: &RunConfig, opts: &RunOptions) -> Result<LsmdRun> {
    if lsp.config() != &cfg.projector {
        return Err(LmdError::Config(
            "projector section of the config differs from the one the checkpoint was trained with".into(),
        ));
    }
    let cache = LatentCache::encode(lsp, images, cfg.data.flip)?;
    train_lmd_latents(&cache, cfg, opts, &lsp.content_hash())
}

/// [`train_lmd`] on pre-encoded latents.
pub fn train_lmd_latents(cache: &LatentCache, cfg: &RunConfig, opts: &RunOptions, lsp_hash: &str) -> Result<LsmdRun> {
    let t = &cfg.train;
    let seed = t.seed;
    let first = cache
        .grids
        .first()
        .ok_or_else(|| LmdError::InvalidArgument("dataset is empty".into()))?;
    let (h, w, d) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    let grid = cfg.mae.patch_grid(h, w)?;
    let l = grid.0 * grid.1;
    let mut schedule = cfg.schedule;
    schedule.total_steps = t.total_steps;
    schedule.validate()?;
    let mut mae = LatentMae::new(cfg.mae.clone(), d, seed)?;
    let mut opt = Optimizer::new(t.optimizer, t.weight_decay, mae.params().tensors());
    let mut batcher = Batcher::new(cache.len(), mix_seed(&[seed, 1]))?;
    let mut log = MetricsLog::new(t.ema_window);

    for step in 0..t.total_steps {
        let start = Instant::now();
        let ratio = schedule.ratio_at(step)?;
        let idx = batcher.next_batch(t.batch_size);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 2, step]));
        let z = cache.batch(&idx, &mut rng)?;
        let plans = (0..idx.len() as u64)
            .map(|b| MaskPlan::random(l, ratio, mix_seed(&[seed, 3, step, b])))
            .collect::<Result<Vec<_>>>()?;
        let g = Graph::new();
        let p = mae.params().bind(&g, true);
        let loss = mae.loss_graph(&g, &p, &z, &plans)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(opts.halt("latent loss", step, || {
                Ok(lsmd_checkpoint(&mae, cfg, step, &opt, lsp_hash))
            }));
        }
        let grads = p.grads(&g.backward(loss)?);
        drop(g);
        opt.step(
            mae.params_mut().tensors_mut(),
            &grads,
            lr_at(step, t.total_steps, t.base_lr),
        )?;
        let mut rec = IterationRecord::new(step, elapsed(start), value);
        rec.ratio = Some(ratio);
        log.push(rec)?;
        opts.progress("lsmd", step, t.total_steps, value);
    }
    let checkpoint = lsmd_checkpoint(&mae, cfg, t.total_steps, &opt, lsp_hash);
    Ok(LsmdRun { mae, log, checkpoint })
}

pub struct FinetuneRun {
    pub log: MetricsLog,
    pub checkpoint: Checkpoint,
    pub final_top1: f64,
    pub final_topk: f64,
}

/// Fraction of rows whose label is the arg-max (top-1) and among the `k`
/// largest logits (ties counted against the label).
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> (f64, f64) {
    let c = logits.shape()[1];
    let (mut top1, mut topk) = (0usize, 0usize);
    for (row, &l) in logits.data().chunks(c).zip(labels) {
        let above = row.iter().filter(|&&v| v >= row[l]).count() - 1;
        top1 += (above == 0) as usize;
        topk += (above < k) as usize;
    }
    let n = labels.len().max(1) as f64;
    (top1 as f64 / n, topk as f64 / n)
}

/// Mean-pooled encoder features plus a linear head, trained end-to-end (or
/// head-only with `linear_probe`). `mae` is the pre-trained initialization;
/// `None` starts from random weights.
///
/// Records carry top-1/top-k measured before the step's update every
/// `eval_every` steps; the last record carries the accuracy after training.
#[allow(clippy::too_many_arguments)]
pub fn finetune_classifier(
    images: &[Tensor],
    labels: &[usize],
    classes: usize,
    lsp: &Projector,
    mae: Option<&LatentMae>,
    cfg: &RunConfig,
    opts: &RunOptions,
) -> Result<FinetuneRun> {
    if images.len() != labels.len() {
        return Err(LmdError::InvalidArgument(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(LmdError::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let ft = &cfg.finetune;
    let seed = cfg.train.seed;
    let cache = LatentCache::encode(lsp, images, cfg.data.flip)?;
    let mut mae = match mae {
        Some(m) => m.clone(),
        None => LatentMae::new(cfg.mae.clone(), lsp.config().latent_dim, mix_seed(&[seed, 5]))?,
    };
    if mae.config().mode == MaeMode::Generative {
        warn!("fine-tuning a generative-mode encoder; the discriminant split is the usual choice");
    }
    let n = images.len();
    let held = |i: usize| ft.holdout_every > 1 && i % ft.holdout_every == ft.holdout_every - 1;
    let train_idx: Vec<usize> = (0..n).filter(|&i| !held(i)).collect();
    let mut eval_idx: Vec<usize> = (0..n).filter(|&i| held(i)).collect();
    if eval_idx.is_empty() {
        eval_idx = train_idx.clone();
    }
    let mut head = ClassifierHead::new(mae.config().d_model, classes, mix_seed(&[seed, 4]))?;
    let mut mae_opt = Optimizer::new(cfg.train.optimizer, ft.weight_decay, mae.params().tensors());
    let mut head_opt = Optimizer::new(cfg.train.optimizer, ft.weight_decay, head.params().tensors());
    let mut batcher = Batcher::new(train_idx.len(), mix_seed(&[seed, 1]))?;
    let mut log = MetricsLog::new(cfg.train.ema_window);

    let evaluate = |mae: &LatentMae, head: &ClassifierHead| -> Result<(f64, f64)> {
        let mut logits = Vec::new();
        for chunk in eval_idx.chunks(32) {
            let g = Graph::new();
            let mp = mae.params().bind(&g, false);
            let hp = head.params().bind(&g, false);
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| &cache.grids[i]).collect();
            let z = g.constant(stack_latents(&refs)?);
            let out = head.forward(&hp, mae.features_graph(&mp, z)?)?;
            logits.extend_from_slice(out.value().data());
        }
        let lab: Vec<usize> = eval_idx.iter().map(|&i| labels[i]).collect();
        Ok(topk_accuracy(
            &Tensor::new(vec![lab.len(), classes], logits)?,
            &lab,
            ft.top_k,
        ))
    };

    for step in 0..ft.steps {
        let acc = if step % ft.eval_every == 0 {
            Some(evaluate(&mae, &head)?)
        } else {
            None
        };
        let start = Instant::now();
        let lr = lr_at(step, ft.steps, ft.lr);
        let idx: Vec<usize> = batcher
            .next_batch(ft.batch_size)
            .into_iter()
            .map(|i| train_idx[i])
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 2, step]));
        let z = cache.batch(&idx, &mut rng)?;
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let g = Graph::new();
        let mp = mae.params().bind(&g, !ft.linear_probe);
        let hp = head.params().bind(&g, true);
        let feats = mae.features_graph(&mp, g.constant(z))?;
        let loss = head
            .forward(&hp, feats)?
            .cross_entropy(std::rc::Rc::new(batch_labels))?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(opts.halt("classification loss", step, || {
                let mut ck = Checkpoint::new(Stage::Finetune, step, config_value(cfg));
                ck.push_group("mae", mae.params().to_entries());
                ck.push_group("head", head.params().to_entries());
                Ok(ck)
            }));
        }
        let grads = g.backward(loss)?;
        let (mg, hg) = (mp.grads(&grads), hp.grads(&grads));
        drop(g);
        if !ft.linear_probe {
            mae_opt.step(mae.params_mut().tensors_mut(), &mg, lr)?;
        }
        head_opt.step(head.params_mut().tensors_mut(), &hg, lr)?;
        let mut rec = IterationRecord::new(step, elapsed(start), value);
        if let Some((a1, ak)) = acc {
            rec.top1 = Some(a1);
            rec.top5 = Some(ak);
        }
        log.push(rec)?;
        opts.progress("finetune", step, ft.steps, value);
    }
    let (final_top1, final_topk) = evaluate(&mae, &head)?;
    if let Some(last) = log.records.last_mut() {
        last.top1 = Some(final_top1);
        last.top5 = Some(final_topk);
    }
    let mut checkpoint = Checkpoint::new(Stage::Finetune, ft.steps, config_value(cfg));
    checkpoint.meta = json!({ "classes": classes, "final_top1": final_top1, "final_topk": final_topk });
    checkpoint.push_group("mae", mae.params().to_entries());
    checkpoint.push_group("head", head.params().to_entries());
    checkpoint.push_group("opt.mae", mae_opt.state_entries());
    checkpoint.push_group("opt.head", head_opt.state_entries());
    Ok(FinetuneRun {
        log,
        checkpoint,
        final_top1,
        final_topk,
    })
}

/// `decode(quantize(LSMD(encode(x))))` with `ratio` of the patches masked.
pub fn reconstruct(image: &Tensor, lsp: &Projector, mae: &LatentMae, ratio: f64, seed: u64) -> Result<Tensor> {
    let z = lsp.encode(image)?;
    let grid = mae.config().patch_grid(z.height(), z.width())?;
    let plan = MaskPlan::random(grid.0 * grid.1, ratio, seed)?;
    let rec = mae.reconstruct(&z, &plan)?;
    let rec = LatentImage::new(rec.grid, z.source_dims)?;
    lsp.decode(&quantize(&rec, &lsp.codebook())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch() {
        let mut b = Batcher::new(10, 7).unwrap();
        let mut first: Vec<usize> = b.next_batch(4);
        first.extend(b.next_batch(6));
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(steps_per_epoch(64, 16), 4);
        assert_eq!(steps_per_epoch(64, 32), 2);
    }

    #[test]
    fn topk_counts_ties_against_label() {
        let logits = Tensor::new(vec![2, 3], vec![1.0, 3.0, 2.0, 0.5, 0.5, 0.1]).unwrap();
        let (t1, t2) = topk_accuracy(&logits, &[2, 0], 2);
        assert_eq!(t1, 0.0);
        assert_eq!(t2, 1.0);
    }

    #[test]
    fn seed_mixing_separates_streams() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[5, 0, 3]), mix_seed(&[5, 0, 3]));
    }
}
