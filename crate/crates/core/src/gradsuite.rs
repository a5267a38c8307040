//! Finite-difference checks over every differentiable primitive and every
//! model component, on tiny shapes.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::mae::{lir_loss_graph, unpatchify, ClassifierHead, LatentMae, MaeConfig, MaeMode};
use crate::nn::{Linear, TransformerBlock};
use crate::numerics::{concat_rows, grad_check, mse, GradCheckOptions, GradReport, Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::projector::{disc_loss_graph, gen_adv_loss_graph, vq_loss_terms, Projector, ProjectorConfig};
use crate::schedule::MaskPlan;

/// Options for [`run_suite`].
#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub check: GradCheckOptions,
    /// Coordinate cap per parameter tensor for the model-sized checks.
    pub model_coords: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            check: GradCheckOptions::default(),
            model_coords: 64,
            seed: 0,
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// `Σ out ⊙ w` for a fixed random `w`, so no gradient cancels by symmetry.
fn project<'g>(out: Var<'g>, w: &Tensor) -> Result<Var<'g>> {
    Ok(out.mul_const(Rc::new(w.clone()))?.sum())
}

fn weights_for(out_shape: Vec<usize>, seed: u64) -> Tensor {
    randn(&mut ChaCha8Rng::seed_from_u64(seed), out_shape, 1.0)
}

fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let data = idx
        .iter()
        .flat_map(|&i| t.data()[i * d..(i + 1) * d].iter().copied())
        .collect();
    Tensor::new(vec![idx.len(), d], data).expect("row selection")
}

fn bound<'g>(vars: &[Var<'g>], range: std::ops::Range<usize>) -> Bound<'g> {
    Bound::from_vars(vars[range].to_vec())
}

struct Suite {
    reports: Vec<GradReport>,
    rng: ChaCha8Rng,
    opts: SuiteOptions,
}

impl Suite {
    fn check<F>(&mut self, name: &str, params: Vec<Tensor>, f: F)
    where
        F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
    {
        self.reports.push(grad_check(name, f, &params, &self.opts.check));
    }

    fn check_model<F>(&mut self, name: &str, params: Vec<Tensor>, f: F)
    where
        F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
    {
        let opts = GradCheckOptions {
            max_coords_per_param: Some(self.opts.model_coords),
            ..self.opts.check.clone()
        };
        // move off the initialization, where some gradients are vanishingly small
        let params: Vec<Tensor> = params
            .iter()
            .map(|p| {
                let noise = randn(&mut self.rng, p.shape().to_vec(), 0.3);
                let data = p.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
                Tensor::new(p.shape().to_vec(), data).expect("same shape")
            })
            .collect();
        self.reports.push(grad_check(name, f, &params, &opts));
    }

    /// Checks a one-input map through a random projection of its output.
    fn unary<M>(&mut self, name: &str, x: Tensor, map: M)
    where
        M: for<'g> Fn(Var<'g>) -> Result<Var<'g>>,
    {
        let w = {
            let g = Graph::new();
            match map(g.constant(x.clone())) {
                Ok(out) => weights_for(out.shape(), self.rng.random()),
                Err(e) => {
                    self.reports.push(GradReport::merge(name, &[]));
                    self.reports.last_mut().unwrap().failure = Some(e.to_string());
                    return;
                }
            }
        };
        self.check(name, vec![x], |_, v| project(map(v[0])?, &w));
    }

    fn binary<M>(&mut self, name: &str, a: Tensor, b: Tensor, map: M)
    where
        M: for<'g> Fn(Var<'g>, Var<'g>) -> Result<Var<'g>>,
    {
        let w = {
            let g = Graph::new();
            match map(g.constant(a.clone()), g.constant(b.clone())) {
                Ok(out) => weights_for(out.shape(), self.rng.random()),
                Err(e) => {
                    self.reports.push(GradReport::merge(name, &[]));
                    self.reports.last_mut().unwrap().failure = Some(e.to_string());
                    return;
                }
            }
        };
        self.check(name, vec![a, b], |_, v| project(map(v[0], v[1])?, &w));
    }

    fn randn(&mut self, shape: Vec<usize>) -> Tensor {
        randn(&mut self.rng, shape, 1.0)
    }
}

/// Runs every check and returns one report per operation or component.
pub fn run_suite(opts: &SuiteOptions) -> Vec<GradReport> {
    let mut s = Suite {
        reports: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        opts: opts.clone(),
    };
    primitives(&mut s);
    projector_components(&mut s);
    mae_components(&mut s);
    s.reports
}

fn primitives(s: &mut Suite) {
    let (a, b) = (s.randn(vec![3, 4]), s.randn(vec![4, 5]));
    s.binary("matmul", a, b, |a, b| a.matmul(b, false));
    let (a, b) = (s.randn(vec![2, 3, 4]), s.randn(vec![5, 4]));
    s.binary("matmul.tb", a, b, |a, b| a.matmul(b, true));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = s.randn(if ta { vec![2, 4, 3] } else { vec![2, 3, 4] });
        let b = s.randn(if tb { vec![2, 5, 4] } else { vec![2, 4, 5] });
        s.binary(&format!("bmm.{}{}", ta as u8, tb as u8), a, b, move |a, b| {
            a.bmm(b, ta, tb)
        });
    }
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let (x, w) = (s.randn(vec![2, 2, 5, 5]), s.randn(vec![3, 2, 3, 3]));
        s.binary(&format!("conv2d.s{stride}p{pad}"), x, w, move |x, w| {
            x.conv2d(w, stride, pad)
        });
    }
    for (stride, pad) in [(2, 1), (1, 1)] {
        let (x, w) = (s.randn(vec![2, 3, 3, 3]), s.randn(vec![3, 2, 4, 4]));
        s.binary(&format!("conv_transpose2d.s{stride}p{pad}"), x, w, move |x, w| {
            x.conv_transpose2d(w, stride, pad)
        });
    }
    let (a, b) = (s.randn(vec![3, 4]), s.randn(vec![3, 4]));
    s.binary("add", a.clone(), b.clone(), |a, b| a.add(b));
    s.binary("sub", a.clone(), b.clone(), |a, b| a.sub(b));
    s.binary("mul", a.clone(), b.clone(), |a, b| a.mul(b));
    s.binary("mse", a.clone(), b, mse);
    s.unary("affine", a.clone(), |x| Ok(x.affine(-1.5, 0.25)));
    let c = s.randn(vec![4]);
    s.unary("add_const", a.clone(), move |x| x.add_const(&c));
    let c = Rc::new(s.randn(vec![4]));
    s.unary("mul_const", a.clone(), move |x| x.mul_const(c.clone()));
    let bias = s.randn(vec![4]);
    let x = s.randn(vec![2, 3, 4]);
    s.binary("add_bias", x, bias, |x, b| x.add_bias(b));
    let bias = s.randn(vec![3]);
    let x = s.randn(vec![2, 3, 2, 2]);
    s.binary("add_channel_bias", x, bias, |x, b| x.add_channel_bias(b));
    let (x, gain, bias) = (s.randn(vec![2, 3, 5]), s.randn(vec![5]), s.randn(vec![5]));
    let w = weights_for(vec![2, 3, 5], s.rng.random());
    s.check("layer_norm", vec![x, gain, bias], move |_, v| {
        project(v[0].layer_norm(v[1], v[2], 1e-5)?, &w)
    });
    let x = s.randn(vec![3, 5]);
    s.unary("softmax", x, |x| Ok(x.softmax()));
    let x = s.randn(vec![3, 5]);
    s.unary("gelu", x.map(|v| 2.0 * v), |x| Ok(x.gelu()));
    let x = s.randn(vec![3, 5]);
    s.unary("tanh", x, |x| Ok(x.tanh()));
    let x = s.randn(vec![3, 5]);
    s.unary("sigmoid", x, |x| Ok(x.sigmoid()));
    let x = s.randn(vec![3, 5]);
    s.unary("ln", x.map(|v| v.abs() + 0.5), |x| Ok(x.ln()));
    // keep every coordinate at least 0.1 away from the clamp edges
    let x = s
        .randn(vec![3, 5])
        .map(|v| if (v.abs() - 0.5).abs() < 0.1 { v + 0.25 } else { v });
    s.unary("clamp", x, |x| Ok(x.clamp(-0.5, 0.5)));
    let x = s.randn(vec![3, 5]);
    s.unary("sum", x, |x| Ok(x.sum().square()));
    let x = s.randn(vec![3, 5]);
    s.unary("mean", x, |x| Ok(x.mean().square()));
    let x = s.randn(vec![2, 3, 4]);
    s.unary("mean_tokens", x, |x| x.mean_tokens());
    let idx = Rc::new(vec![2, 0, 2, 1]);
    let x = s.randn(vec![3, 4]);
    s.unary("gather_rows", x, move |x| x.gather_rows(idx.clone()));
    let x = s.randn(vec![2, 3]);
    let y = s.randn(vec![1, 3]);
    s.binary("concat_rows", x, y, |a, b| concat_rows(&[a, b]));
    let x = s.randn(vec![2, 3, 4]);
    s.unary("permute", x, |x| x.permute(&[2, 0, 1]));
    let x = s.randn(vec![2, 3, 4]);
    s.unary("reshape", x, |x| x.reshape(vec![4, 6]));
    let labels = Rc::new(vec![1, 0, 3]);
    let x = s.randn(vec![3, 4]);
    s.unary("cross_entropy", x, move |x| x.cross_entropy(labels.clone()));
}

fn tiny_projector(seed: u64) -> Projector {
    let cfg = ProjectorConfig {
        scale_factor: 4,
        latent_dim: 3,
        codebook_size: 6,
        channels: 4,
        disc_channels: 4,
        ..Default::default()
    };
    Projector::new(cfg, seed).expect("valid tiny projector")
}

fn projector_components(s: &mut Suite) {
    let proj = tiny_projector(s.rng.random());
    let gen = proj.generator_params().tensors().to_vec();
    let ng = gen.len();
    let x = randn(&mut s.rng, vec![1, 3, 8, 8], 0.5);

    let w = weights_for(vec![1, 3, 2, 2], s.rng.random());
    let mut params = gen.clone();
    params.push(x.clone());
    let p = &proj;
    s.check_model("projector.encoder", params, |_, v| {
        project(p.encode_graph(&bound(v, 0..ng), v[ng])?, &w)
    });

    let z = s.randn(vec![1, 3, 2, 2]);
    let w = weights_for(vec![1, 3, 8, 8], s.rng.random());
    let mut params = gen.clone();
    params.push(z);
    s.check_model("projector.decoder", params, |_, v| {
        project(p.decode_graph(&bound(v, 0..ng), v[ng])?, &w)
    });

    // The stop-gradient in each VQ term is checked against a frozen copy of
    // its blocked argument: the term is then an ordinary function of the rest.
    let z_rows = s.randn(vec![5, 3]);
    let codebook = s.randn(vec![6, 3]);
    let cb = crate::projector::Codebook::new(codebook.clone()).expect("codebook");
    let idx = Rc::new(cb.nearest_rows(z_rows.data()));
    let (xa, xb) = (s.randn(vec![1, 3, 2, 2]), s.randn(vec![1, 3, 2, 2]));
    let frozen_zq = select_rows(&codebook, &idx);
    {
        let (z_rows, xa, xb, idx) = (z_rows.clone(), xa.clone(), xb.clone(), idx.clone());
        s.check("vq.codebook", vec![codebook.clone()], move |g, v| {
            let zq = v[0].gather_rows(idx.clone())?;
            Ok(vq_loss_terms(
                g.constant(xa.clone()),
                g.constant(xb.clone()),
                g.constant(z_rows.clone()),
                zq,
                0.25,
            )?
            .codebook)
        });
    }
    {
        let (xa, xb) = (xa.clone(), xb.clone());
        s.check("vq.commitment", vec![z_rows.clone()], move |g, v| {
            let zq = g.constant(frozen_zq.clone());
            Ok(vq_loss_terms(g.constant(xa.clone()), g.constant(xb.clone()), v[0], zq, 0.25)?.commitment)
        });
    }
    {
        let (z_rows, codebook, idx) = (z_rows.clone(), codebook.clone(), idx.clone());
        s.check("vq.reconstruction", vec![xa, xb], move |g, v| {
            let zq = g.constant(select_rows(&codebook, &idx));
            Ok(vq_loss_terms(v[0], v[1], g.constant(z_rows.clone()), zq, 0.25)?.reconstruction)
        });
    }

    let disc = proj.discriminator_params().tensors().to_vec();
    let nd = disc.len();
    let real = randn(&mut s.rng, vec![1, 3, 8, 8], 0.5);
    let fake = randn(&mut s.rng, vec![1, 3, 8, 8], 0.5);
    let mut params = disc.clone();
    params.extend([real, fake.clone()]);
    s.check_model("discriminator.loss", params, |_, v| {
        let dp = bound(v, 0..nd);
        let r = p.discriminate_graph(&dp, v[nd])?;
        let f = p.discriminate_graph(&dp, v[nd + 1])?;
        Ok(disc_loss_graph(r, f))
    });
    let mut params = disc;
    params.push(fake);
    s.check_model("adversarial.generator", params, |_, v| {
        Ok(gen_adv_loss_graph(p.discriminate_graph(&bound(v, 0..nd), v[nd])?))
    });
}

fn tiny_mae(seed: u64) -> LatentMae {
    let cfg = MaeConfig {
        patch_size: 2,
        d_model: 8,
        d_decoder: 8,
        encoder_blocks: 1,
        decoder_blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        mode: MaeMode::Custom,
    };
    LatentMae::new(cfg, 3, seed).expect("valid tiny mae")
}

fn mae_components(s: &mut Suite) {
    let mae = tiny_mae(s.rng.random());
    let m = &mae;
    let mp = mae.params().tensors().to_vec();
    let n = mp.len();
    let z = s.randn(vec![2, 4, 4, 3]);

    let w = weights_for(vec![2, 4, 8], s.rng.random());
    let mut params = mp.clone();
    params.push(z.clone());
    s.check_model("patch_embed", params, |_, v| {
        project(m.embed_graph(&bound(v, 0..n), v[n])?, &w)
    });

    let spe = crate::mae::spe_table((2, 2), 8).expect("spe");
    let neg = spe.map(|x| -x);
    let w = weights_for(vec![2, 4, 8], s.rng.random());
    let tokens = s.randn(vec![2, 4, 8]);
    {
        let w = w.clone();
        s.unary("spe.add", tokens.clone(), move |x| {
            x.add_const(&spe)?.mul_const(Rc::new(w.clone()))
        });
    }
    s.unary("spe.recall", tokens, move |x| {
        x.add_const(&neg)?.mul_const(Rc::new(w.clone()))
    });

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(s.rng.random());
    let block = TransformerBlock::new(&mut store, "blk", 8, 2, 2, &mut rng).expect("block");
    let nb = store.len();
    let mut params = store.tensors().to_vec();
    params.push(s.randn(vec![2, 3, 8]));
    let w = weights_for(vec![2, 3, 8], s.rng.random());
    s.check_model("transformer_block", params, |_, v| {
        project(block.forward(&bound(v, 0..nb), v[nb])?, &w)
    });

    let mut store = ParamStore::new();
    let head = Linear::new(&mut store, "head", 8, 12, &mut rng);
    let mut params = store.tensors().to_vec();
    params.push(s.randn(vec![2, 4, 8]));
    let w = weights_for(vec![2, 4, 4, 3], s.rng.random());
    s.check_model("prediction_head", params, |_, v| {
        let out = head.forward(&bound(v, 0..2), v[2])?;
        project(unpatchify(out, 2, (2, 2), 3)?, &w)
    });

    let plans: Vec<MaskPlan> = vec![
        MaskPlan::from_masked(4, &[1, 2]).expect("plan"),
        MaskPlan::from_masked(4, &[0, 3]).expect("plan"),
    ];
    let w = weights_for(vec![2, 4, 4, 3], s.rng.random());
    let mut params = mp.clone();
    params.push(z.clone());
    {
        let plans = plans.clone();
        s.check_model("mae.encoder_decoder", params, move |_, v| {
            project(m.forward_graph(&bound(v, 0..n), v[n], &plans)?, &w)
        });
    }

    {
        let (plans, z) = (plans.clone(), z.clone());
        s.check_model("lir_loss.end_to_end", mp, move |g, v| {
            m.loss_graph(g, &bound(v, 0..n), &z, &plans)
        });
    }
    let target = s.randn(vec![2, 4, 4, 3]);
    s.unary("lir_loss", z, move |rec| lir_loss_graph(rec, &target, &plans, 2));

    let head = ClassifierHead::new(8, 3, s.rng.random()).expect("head");
    let mut params = head.params().tensors().to_vec();
    params.push(s.randn(vec![4, 8]));
    let labels = Rc::new(vec![0, 2, 1, 2]);
    s.check_model("classifier_head", params, move |_, v| {
        head.forward(&bound(v, 0..2), v[2])?.cross_entropy(labels.clone())
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_is_covered() {
        let mut s = Suite {
            reports: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
            opts: SuiteOptions::default(),
        };
        primitives(&mut s);
        for name in crate::numerics::required_primitives() {
            assert!(
                s.reports
                    .iter()
                    .any(|r| r.op_name == *name || r.op_name.starts_with(&format!("{name}."))),
                "{name} unchecked"
            );
        }
        for r in &s.reports {
            assert!(r.passed, "{r:?}");
        }
    }
}
