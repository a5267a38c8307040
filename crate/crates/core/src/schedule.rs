//! Mask-ratio schedules and per-step random mask plans.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LmdError, Result};

/// Plateau reached by the piecewise scheme after its first ramp.
pub const PIECEWISE_PLATEAU: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Uniform,
    Piecewise,
    Cosine,
    /// Constant ratio for every step (the no-schedule ablation).
    Fixed(f64),
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Uniform => write!(f, "uniform"),
            Scheme::Piecewise => write!(f, "piecewise"),
            Scheme::Cosine => write!(f, "cosine"),
            Scheme::Fixed(r) => write!(f, "fixed:{r}"),
        }
    }
}

impl FromStr for Scheme {
    type Err = LmdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Scheme::Uniform),
            "piecewise" => Ok(Scheme::Piecewise),
            "cosine" => Ok(Scheme::Cosine),
            other => {
                let ratio = other
                    .strip_prefix("fixed:")
                    .and_then(|r| r.parse::<f64>().ok())
                    .ok_or_else(|| {
                        LmdError::InvalidArgument(format!(
                            "unknown scheduler {other:?} (expected uniform, piecewise, cosine or fixed:R)"
                        ))
                    })?;
                if !(0.0..1.0).contains(&ratio) {
                    return Err(LmdError::InvalidArgument(format!(
                        "fixed mask ratio {ratio} outside [0, 1)"
                    )));
                }
                Ok(Scheme::Fixed(ratio))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub scheme: Scheme,
    pub r_min: f64,
    pub r_max: f64,
    pub total_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            scheme: Scheme::Cosine,
            r_min: 0.15,
            r_max: 0.75,
            total_steps: 1000,
        }
    }
}

impl ScheduleConfig {
    pub fn new(scheme: Scheme, total_steps: u64) -> Self {
        ScheduleConfig {
            scheme,
            total_steps,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.r_min && self.r_min <= self.r_max && self.r_max <= 1.0) {
            return Err(LmdError::Config(format!(
                "mask ratio bounds must satisfy 0 <= r_min <= r_max <= 1, got [{}, {}]",
                self.r_min, self.r_max
            )));
        }
        if self.total_steps == 0 {
            return Err(LmdError::Config("schedule total_steps must be >= 1".into()));
        }
        if let Scheme::Fixed(r) = self.scheme {
            if !(0.0..1.0).contains(&r) {
                return Err(LmdError::Config(format!("fixed mask ratio {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Mask ratio at global step `t ∈ [0, T]`.
    pub fn ratio_at(&self, t: u64) -> Result<f64> {
        let total = self.total_steps;
        if t > total {
            return Err(LmdError::InvalidArgument(format!(
                "step {t} outside schedule range [0, {total}]"
            )));
        }
        let (lo, hi) = (self.r_min, self.r_max);
        let lerp = |a: f64, b: f64, s: f64| -> f64 {
            if s <= 0.0 {
                a
            } else if s >= 1.0 {
                b
            } else {
                a + (b - a) * s
            }
        };
        let frac = t as f64 / total as f64;
        let raw = match self.scheme {
            Scheme::Fixed(r) => return Ok(r),
            Scheme::Uniform => lerp(lo, hi, frac),
            Scheme::Cosine => {
                if t == total {
                    hi
                } else {
                    lerp(lo, hi, (1.0 - (std::f64::consts::PI * frac).cos()) / 2.0)
                }
            }
            Scheme::Piecewise => {
                let plateau = PIECEWISE_PLATEAU.clamp(lo, hi);
                // integer comparisons keep the breakpoints exact
                let (t6, total) = (6 * t as u128, total as u128);
                if t6 < total {
                    lerp(lo, plateau, (6 * t) as f64 / total as f64)
                } else if t6 < 2 * total {
                    plateau
                } else if t6 < 4 * total {
                    lerp(plateau, hi, (3 * t as u128 - total) as f64 / total as f64)
                } else {
                    hi
                }
            }
        };
        Ok(raw.clamp(lo, hi))
    }

    /// `(step, ratio)` for every step in `[0, T]`.
    pub fn curve(&self) -> Vec<(u64, f64)> {
        (0..=self.total_steps)
            .map(|t| (t, self.ratio_at(t).expect("in range")))
            .collect()
    }
}

/// CSV rendering of a schedule curve, header `step,ratio`.
pub fn curve_csv(curve: &[(u64, f64)]) -> String {
    let mut out = String::from("step,ratio\n");
    for (t, r) in curve {
        out.push_str(&format!("{t},{r}\n"));
    }
    out
}

/// Partition of patch indices for one sample at one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    len: usize,
    masked: Vec<usize>,
    unmasked: Vec<usize>,
}

/// `round(ratio · l)`, halves away from zero.
pub fn masked_count(len: usize, ratio: f64) -> usize {
    (ratio * len as f64).round() as usize
}

impl MaskPlan {
    /// Uniformly random subset of `round(ratio·len)` masked indices.
    pub fn random(len: usize, ratio: f64, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(LmdError::InvalidArgument("mask length must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&ratio) {
            return Err(LmdError::InvalidArgument(format!("mask ratio {ratio} outside [0, 1]")));
        }
        let n_masked = masked_count(len, ratio).min(len);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut masked = order[..n_masked].to_vec();
        let mut unmasked = order[n_masked..].to_vec();
        masked.sort_unstable();
        unmasked.sort_unstable();
        Ok(MaskPlan { len, masked, unmasked })
    }

    /// Plan from an explicit masked set.
    pub fn from_masked(len: usize, masked: &[usize]) -> Result<Self> {
        let mut flag = vec![false; len];
        for &i in masked {
            if i >= len || flag[i] {
                return Err(LmdError::InvalidArgument(format!(
                    "masked index {i} repeated or out of range for length {len}"
                )));
            }
            flag[i] = true;
        }
        let masked = (0..len).filter(|&i| flag[i]).collect();
        let unmasked = (0..len).filter(|&i| !flag[i]).collect();
        Ok(MaskPlan { len, masked, unmasked })
    }

    pub fn none(len: usize) -> Self {
        MaskPlan {
            len,
            masked: vec![],
            unmasked: (0..len).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn unmasked(&self) -> &[usize] {
        &self.unmasked
    }

    pub fn ratio(&self) -> f64 {
        self.masked.len() as f64 / self.len as f64
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(scheme: Scheme, t: u64) -> ScheduleConfig {
        ScheduleConfig::new(scheme, t)
    }

    #[test]
    fn every_scheme_starts_at_r_min() {
        for s in [Scheme::Uniform, Scheme::Piecewise, Scheme::Cosine] {
            assert_eq!(cfg(s, 600).ratio_at(0).unwrap(), 0.15);
            assert_eq!(cfg(s, 600).ratio_at(600).unwrap(), 0.75);
        }
    }

    #[test]
    fn midpoints() {
        assert!((cfg(Scheme::Uniform, 1000).ratio_at(500).unwrap() - 0.45).abs() < 1e-15);
        assert!((cfg(Scheme::Cosine, 1000).ratio_at(500).unwrap() - 0.45).abs() < 1e-15);
        assert_eq!(cfg(Scheme::Piecewise, 600).ratio_at(100).unwrap(), 0.4);
        assert_eq!(cfg(Scheme::Piecewise, 600).ratio_at(200).unwrap(), 0.4);
        assert_eq!(cfg(Scheme::Piecewise, 600).ratio_at(400).unwrap(), 0.75);
    }

    #[test]
    fn cosine_quarter_points() {
        // oracle: 0.15 + 0.6 * (1 - cos(pi * k / 4)) / 2 evaluated by hand
        let expected = [0.15, 0.237_867_965_644_035_8, 0.45, 0.662_132_034_355_964_2, 0.75];
        for (k, e) in expected.iter().enumerate() {
            let r = cfg(Scheme::Cosine, 4).ratio_at(k as u64).unwrap();
            assert!((r - e).abs() < 1e-12, "step {k}: {r} vs {e}");
        }
    }

    #[test]
    fn out_of_range_step_rejected() {
        assert!(cfg(Scheme::Uniform, 10).ratio_at(11).is_err());
    }

    #[test]
    fn fixed_scheme_is_constant() {
        let c = cfg(Scheme::Fixed(0.75), 50);
        assert!(c.curve().iter().all(|&(_, r)| r == 0.75));
    }

    #[test]
    fn parse_scheme() {
        assert_eq!("cosine".parse::<Scheme>().unwrap(), Scheme::Cosine);
        assert_eq!("fixed:0.75".parse::<Scheme>().unwrap(), Scheme::Fixed(0.75));
        assert!("fixed:1.5".parse::<Scheme>().is_err());
        assert!("linear".parse::<Scheme>().is_err());
    }

    #[test]
    fn bad_bounds_rejected() {
        let mut c = cfg(Scheme::Uniform, 10);
        c.r_min = 0.8;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mask_counts() {
        assert_eq!(MaskPlan::random(196, 0.75, 1).unwrap().masked().len(), 147);
        let none = MaskPlan::random(10, 0.0, 3).unwrap();
        assert!(none.masked().is_empty());
        assert_eq!(none.unmasked(), (0..10).collect::<Vec<_>>().as_slice());
        // 0.5 * 5 = 2.5 rounds away from zero
        assert_eq!(masked_count(5, 0.5), 3);
    }

    #[test]
    fn mask_is_deterministic() {
        let a = MaskPlan::random(64, 0.4, 99).unwrap();
        let b = MaskPlan::random(64, 0.4, 99).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, MaskPlan::random(64, 0.4, 100).unwrap());
    }
}
