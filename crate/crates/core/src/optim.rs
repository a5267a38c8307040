//! Adan (adaptive Nesterov momentum) and AdamW, plus the warm-up schedule.

use serde::{Deserialize, Serialize};

use crate::error::{LmdError, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adan,
    AdamW,
}

pub const ADAN_BETAS: (f64, f64, f64) = (0.98, 0.92, 0.99);
pub const ADAMW_BETAS: (f64, f64) = (0.9, 0.95);
const EPS: f64 = 1e-8;

/// Linear warm-up over the first 5% of steps, then `base_lr`.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    let warm = total_steps.div_ceil(20);
    if step < warm {
        base_lr * (step + 1) as f64 / warm as f64
    } else {
        base_lr
    }
}

/// Per-parameter optimizer state. Weight decay applies to tensors of rank
/// two or more.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    step: u64,
    /// Adan: `m, diff_avg, n, prev_grad`; AdamW: `m, v`.
    slots: Vec<Vec<Tensor>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, params: &[Tensor]) -> Self {
        let per = match kind {
            OptimizerKind::Adan => 4,
            OptimizerKind::AdamW => 2,
        };
        let slots = params
            .iter()
            .map(|p| (0..per).map(|_| Tensor::zeros(p.shape().to_vec())).collect())
            .collect();
        Optimizer {
            kind,
            weight_decay,
            step: 0,
            slots,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != params.len() {
            return Err(LmdError::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.slots.len(),
                params.len(),
                grads.len()
            )));
        }
        for (g, p) in grads.iter().zip(params.iter()) {
            if g.shape() != p.shape() {
                return Err(LmdError::shape("optimizer step", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(LmdError::NonFinite("gradient".into()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            let wd = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            match self.kind {
                OptimizerKind::Adan => adan_update(p, g, slot, t, lr, wd),
                OptimizerKind::AdamW => adamw_update(p, g, slot, t, lr, wd),
            }
        }
        Ok(())
    }

    /// State tensors named `"{i}.{slot}"`.
    pub fn state_entries(&self) -> Vec<(String, Tensor)> {
        self.slots
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().enumerate().map(move |(k, t)| (format!("{i}.{k}"), t.clone())))
            .collect()
    }

    pub fn load_state(&mut self, step: u64, entries: &[(String, Tensor)]) -> Result<()> {
        let expected = self.state_entries();
        if entries.len() != expected.len() {
            return Err(LmdError::InvalidArgument(format!(
                "optimizer state has {} tensors, expected {}",
                entries.len(),
                expected.len()
            )));
        }
        for ((name, t), (want, cur)) in entries.iter().zip(&expected) {
            if name != want || t.shape() != cur.shape() {
                return Err(LmdError::InvalidArgument(format!(
                    "optimizer state entry {name} does not match {want}"
                )));
            }
        }
        let per = self.slots.first().map_or(0, Vec::len);
        for (i, (_, t)) in entries.iter().enumerate() {
            self.slots[i / per][i % per] = t.clone();
        }
        self.step = step;
        Ok(())
    }
}

fn adan_update(p: &mut Tensor, g: &Tensor, slot: &mut [Tensor], t: i32, lr: f64, wd: f64) {
    let (b1, b2, b3) = ADAN_BETAS;
    let (bc1, bc2, bc3) = (1.0 - b1.powi(t), 1.0 - b2.powi(t), 1.0 - b3.powi(t));
    let [m, d, n, prev] = slot else { unreachable!() };
    let first = t == 1;
    let (p, g) = (p.data_mut(), g.data());
    let (m, d, n, prev) = (m.data_mut(), d.data_mut(), n.data_mut(), prev.data_mut());
    for i in 0..p.len() {
        let diff = if first { 0.0 } else { g[i] - prev[i] };
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        d[i] = b2 * d[i] + (1.0 - b2) * diff;
        let u = g[i] + b2 * diff;
        n[i] = b3 * n[i] + (1.0 - b3) * u * u;
        let denom = (n[i] / bc3).sqrt() + EPS;
        let step = (m[i] / bc1 + b2 * d[i] / bc2) / denom;
        p[i] = (p[i] - lr * step) / (1.0 + lr * wd);
        prev[i] = g[i];
    }
}

fn adamw_update(p: &mut Tensor, g: &Tensor, slot: &mut [Tensor], t: i32, lr: f64, wd: f64) {
    let (b1, b2) = ADAMW_BETAS;
    let (bc1, bc2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let [m, v] = slot else { unreachable!() };
    let (p, g) = (p.data_mut(), g.data());
    let (m, v) = (m.data_mut(), v.data_mut());
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        p[i] -= lr * wd * p[i];
        p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + EPS);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_constant() {
        assert_eq!(lr_at(0, 100, 1.0), 0.2);
        assert_eq!(lr_at(4, 100, 1.0), 1.0);
        assert_eq!(lr_at(99, 100, 1.0), 1.0);
        assert_eq!(lr_at(0, 1, 0.5), 0.5);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        for kind in [OptimizerKind::Adan, OptimizerKind::AdamW] {
            let start = vec![
                Tensor::from_fn(vec![3, 2], |i| i as f64 - 2.5),
                Tensor::full(vec![2], 0.3),
            ];
            let mut params = start.clone();
            let grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            let mut opt = Optimizer::new(kind, 0.0, &params);
            for _ in 0..5 {
                opt.step(&mut params, &grads, 1e-2).unwrap();
            }
            assert_eq!(params, start);
        }
    }

    #[test]
    fn descends_a_quadratic() {
        for kind in [OptimizerKind::Adan, OptimizerKind::AdamW] {
            let mut params = vec![Tensor::full(vec![4], 3.0)];
            let mut opt = Optimizer::new(kind, 0.0, &params);
            for _ in 0..500 {
                let grads = vec![params[0].map(|x| 2.0 * x)];
                opt.step(&mut params, &grads, 0.05).unwrap();
            }
            assert!(
                params[0].data().iter().all(|x| x.abs() < 0.1),
                "{kind:?}: {:?}",
                params[0]
            );
        }
    }

    #[test]
    fn first_adan_step_is_signed_lr() {
        // bias-corrected moments equal g and g², so the step is lr·sign(g)
        let mut params = vec![Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()];
        let mut opt = Optimizer::new(OptimizerKind::Adan, 0.0, &params);
        opt.step(&mut params, &[Tensor::new(vec![2], vec![4.0, -0.5]).unwrap()], 0.1)
            .unwrap();
        assert!((params[0].data()[0] - 0.9).abs() < 1e-8);
        assert!((params[0].data()[1] - 1.1).abs() < 1e-8);
    }

    #[test]
    fn state_round_trip() {
        let mut params = vec![Tensor::full(vec![2, 2], 1.0)];
        let mut opt = Optimizer::new(OptimizerKind::Adan, 0.05, &params);
        opt.step(&mut params, &[Tensor::full(vec![2, 2], 0.5)], 0.1).unwrap();
        let mut fresh = Optimizer::new(OptimizerKind::Adan, 0.05, &params);
        fresh.load_state(opt.steps_taken(), &opt.state_entries()).unwrap();
        assert_eq!(fresh, opt);
    }
}
