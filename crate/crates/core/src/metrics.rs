//! Training-efficiency metrics computed from per-iteration records.
//!
//! * MIT: mean wall time per iteration.
//! * MLT / MLI: wall time / iterations per loss-decrease event.
//! * MAT@k: wall time per percentage point of top-k accuracy gained.
//!
//! A loss-decrease event fires when the EMA-smoothed loss drops at least
//! `δ = 1%` of the initial smoothed loss below the level of the previous
//! event (initially the first smoothed value).

use std::io::Write as _;
use std::path::Path;

use crate::error::{LmdError, Result};

pub const DEFAULT_EMA_WINDOW: usize = 50;
pub const DEFAULT_DELTA_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub step: u64,
    /// Seconds spent on this iteration.
    pub wall_time: f64,
    pub loss: f64,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    /// Mask ratio in effect, when the run used one.
    pub ratio: Option<f64>,
}

impl IterationRecord {
    pub fn new(step: u64, wall_time: f64, loss: f64) -> Self {
        IterationRecord {
            step,
            wall_time,
            loss,
            top1: None,
            top5: None,
            ratio: None,
        }
    }
}

/// Streaming state behind every metric; feeding records in any chunking
/// yields the same state.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsAccumulator {
    alpha: f64,
    delta_fraction: f64,
    count: u64,
    total_time: f64,
    min_time: f64,
    max_time: f64,
    ema: f64,
    delta: f64,
    record_level: f64,
    events: u64,
    first_acc: [Option<f64>; 2],
    last_acc: [Option<f64>; 2],
}

impl MetricsAccumulator {
    pub fn new(ema_window: usize) -> Self {
        Self::with_delta(ema_window, DEFAULT_DELTA_FRACTION)
    }

    pub fn with_delta(ema_window: usize, delta_fraction: f64) -> Self {
        MetricsAccumulator {
            alpha: 2.0 / (ema_window.max(1) as f64 + 1.0),
            delta_fraction,
            count: 0,
            total_time: 0.0,
            min_time: f64::INFINITY,
            max_time: 0.0,
            ema: 0.0,
            delta: 0.0,
            record_level: 0.0,
            events: 0,
            first_acc: [None; 2],
            last_acc: [None; 2],
        }
    }

    pub fn push(&mut self, r: &IterationRecord) {
        self.total_time += r.wall_time;
        self.min_time = self.min_time.min(r.wall_time);
        self.max_time = self.max_time.max(r.wall_time);
        if self.count == 0 {
            self.ema = r.loss;
            self.delta = self.delta_fraction * r.loss.abs();
            self.record_level = r.loss;
        } else {
            self.ema += self.alpha * (r.loss - self.ema);
            if self.delta > 0.0 && self.ema <= self.record_level - self.delta {
                self.events += 1;
                self.record_level = self.ema;
            }
        }
        for (k, acc) in [r.top1, r.top5].into_iter().enumerate() {
            if let Some(a) = acc {
                self.first_acc[k].get_or_insert(a);
                self.last_acc[k] = Some(a);
            }
        }
        self.count += 1;
    }

    pub fn extend<'a>(&mut self, records: impl IntoIterator<Item = &'a IterationRecord>) {
        for r in records {
            self.push(r);
        }
    }

    pub fn iterations(&self) -> u64 {
        self.count
    }

    pub fn total_time(&self) -> f64 {
        self.total_time
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn smoothed_loss(&self) -> Option<f64> {
        (self.count > 0).then_some(self.ema)
    }

    pub fn mit(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(LmdError::Undefined("MIT"));
        }
        Ok((self.total_time / self.count as f64).clamp(self.min_time, self.max_time))
    }

    pub fn mlt(&self) -> Result<f64> {
        if self.events == 0 {
            return Err(LmdError::Undefined("MLT"));
        }
        Ok(self.total_time / self.events as f64)
    }

    pub fn mli(&self) -> Result<f64> {
        if self.events == 0 {
            return Err(LmdError::Undefined("MLI"));
        }
        Ok(self.count as f64 / self.events as f64)
    }

    /// Seconds per percentage point of top-`k` accuracy gained, `k ∈ {1, 5}`.
    pub fn mat(&self, k: usize) -> Result<f64> {
        let (slot, name) = match k {
            1 => (0, "MAT@1"),
            5 => (1, "MAT@5"),
            _ => return Err(LmdError::InvalidArgument(format!("MAT@{k}: k must be 1 or 5"))),
        };
        match (self.first_acc[slot], self.last_acc[slot]) {
            (Some(first), Some(last)) if last > first => Ok(self.total_time / (100.0 * (last - first))),
            _ => Err(LmdError::Undefined(name)),
        }
    }
}

/// Ordered iteration records of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<IterationRecord>,
    pub ema_window: usize,
}

impl Default for MetricsLog {
    fn default() -> Self {
        MetricsLog::new(DEFAULT_EMA_WINDOW)
    }
}

/// One row of the run summary.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub iterations: u64,
    pub events: u64,
    pub mit: Result<f64, &'static str>,
    pub mlt: Result<f64, &'static str>,
    pub mli: Result<f64, &'static str>,
    pub mat1: Result<f64, &'static str>,
    pub mat5: Result<f64, &'static str>,
    pub final_smoothed_loss: Option<f64>,
}

const CSV_HEADER: &str = "step,wall_time_s,loss,top1,top5,ratio";

impl MetricsLog {
    pub fn new(ema_window: usize) -> Self {
        MetricsLog {
            records: Vec::new(),
            ema_window,
        }
    }

    pub fn push(&mut self, r: IterationRecord) -> Result<()> {
        if r.wall_time.is_nan() || r.wall_time <= 0.0 {
            return Err(LmdError::InvalidArgument(format!(
                "step {}: wall time must be > 0, got {}",
                r.step, r.wall_time
            )));
        }
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return Err(LmdError::InvalidArgument(format!(
                    "steps must increase: {} after {}",
                    r.step, last.step
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn accumulator(&self) -> MetricsAccumulator {
        let mut acc = MetricsAccumulator::new(self.ema_window);
        acc.extend(&self.records);
        acc
    }

    fn nonempty(&self) -> Result<MetricsAccumulator> {
        if self.records.is_empty() {
            return Err(LmdError::InvalidArgument("metrics log is empty".into()));
        }
        Ok(self.accumulator())
    }

    pub fn mit(&self) -> Result<f64> {
        self.nonempty()?.mit()
    }

    pub fn loss_decrease_events(&self) -> Result<u64> {
        Ok(self.nonempty()?.events())
    }

    pub fn mlt(&self) -> Result<f64> {
        self.nonempty()?.mlt()
    }

    pub fn mli(&self) -> Result<f64> {
        self.nonempty()?.mli()
    }

    pub fn mat(&self, k: usize) -> Result<f64> {
        self.nonempty()?.mat(k)
    }

    /// EMA-smoothed loss series.
    pub fn smoothed(&self) -> Vec<f64> {
        let alpha = 2.0 / (self.ema_window.max(1) as f64 + 1.0);
        let mut out = Vec::with_capacity(self.records.len());
        let mut ema = 0.0;
        for (i, r) in self.records.iter().enumerate() {
            ema = if i == 0 { r.loss } else { ema + alpha * (r.loss - ema) };
            out.push(ema);
        }
        out
    }

    pub fn summary(&self) -> MetricsSummary {
        let acc = self.accumulator();
        let undefined = |e: LmdError| match e {
            LmdError::Undefined(name) => name,
            _ => "invalid",
        };
        MetricsSummary {
            iterations: acc.iterations(),
            events: acc.events(),
            mit: acc.mit().map_err(undefined),
            mlt: acc.mlt().map_err(undefined),
            mli: acc.mli().map_err(undefined),
            mat1: acc.mat(1).map_err(undefined),
            mat5: acc.mat(5).map_err(undefined),
            final_smoothed_loss: acc.smoothed_loss(),
        }
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step,
                r.wall_time,
                r.loss,
                opt(r.top1),
                opt(r.top5),
                opt(r.ratio)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| LmdError::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| LmdError::io(path, e))
    }

    pub fn read_csv(path: &Path, ema_window: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LmdError::io(path, e))?;
        Self::parse_csv(&text, ema_window).map_err(|(line, reason)| LmdError::Csv {
            path: path.to_path_buf(),
            line,
            reason,
        })
    }

    fn parse_csv(text: &str, ema_window: usize) -> std::result::Result<Self, (usize, String)> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, h)| h.trim()).unwrap_or("");
        // the ratio column is optional on input
        if header != CSV_HEADER && header != "step,wall_time_s,loss,top1,top5" {
            return Err((1, format!("unexpected header {header:?}")));
        }
        let mut log = MetricsLog::new(ema_window);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 5 {
                return Err((i + 1, "expected at least 5 columns".into()));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| (i + 1, e.to_string()));
            let opt = |s: Option<&&str>| -> std::result::Result<Option<f64>, (usize, String)> {
                match s.map(|v| v.trim()) {
                    None | Some("") => Ok(None),
                    Some(v) => v
                        .parse()
                        .map(Some)
                        .map_err(|e: std::num::ParseFloatError| (i + 1, e.to_string())),
                }
            };
            let record = IterationRecord {
                step: cols[0]
                    .trim()
                    .parse()
                    .map_err(|e: std::num::ParseIntError| (i + 1, e.to_string()))?,
                wall_time: num(cols[1])?,
                loss: num(cols[2])?,
                top1: opt(cols.get(3))?,
                top5: opt(cols.get(4))?,
                ratio: opt(cols.get(5))?,
            };
            log.push(record).map_err(|e| (i + 1, e.to_string()))?;
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_from(times: &[f64], losses: &[f64], window: usize) -> MetricsLog {
        let mut log = MetricsLog::new(window);
        for (i, (&t, &l)) in times.iter().zip(losses).enumerate() {
            log.push(IterationRecord::new(i as u64, t, l)).unwrap();
        }
        log
    }

    #[test]
    fn mit_examples() {
        assert_eq!(log_from(&[2., 2., 2.], &[1., 1., 1.], 1).mit().unwrap(), 2.0);
        assert_eq!(log_from(&[1., 3.], &[1., 1.], 1).mit().unwrap(), 2.0);
        assert!(MetricsLog::new(5).mit().is_err());
    }

    #[test]
    fn no_events_for_flat_or_rising_loss() {
        let rising: Vec<f64> = (0..100).map(|i| 1.0 + i as f64).collect();
        assert_eq!(log_from(&[1.0; 100], &rising, 5).loss_decrease_events().unwrap(), 0);
        assert_eq!(log_from(&[1.0; 100], &[3.0; 100], 5).loss_decrease_events().unwrap(), 0);
        assert!(matches!(
            log_from(&[1.0; 10], &[3.0; 10], 5).mlt(),
            Err(LmdError::Undefined("MLT"))
        ));
    }

    #[test]
    fn halving_series_counts_each_crossing() {
        let losses: Vec<f64> = (0..12).map(|i| 0.5f64.powi(i)).collect();
        // independent simulation of the counter: record level moves only on events
        let mut level = 1.0;
        let mut expected = 0;
        for &l in &losses[1..] {
            if l <= level - 0.01 {
                expected += 1;
                level = l;
            }
        }
        let log = log_from(&[1.0; 12], &losses, 1);
        assert_eq!(log.loss_decrease_events().unwrap(), expected);
        assert_eq!(expected, 7);
    }

    #[test]
    fn ratio_metrics() {
        let log = log_from(&[25.0; 4], &[1.0, 0.8, 0.6, 0.4], 1);
        assert_eq!(log.mlt().unwrap(), 100.0 / 3.0);
        assert_eq!(log.mli().unwrap(), 4.0 / 3.0);
    }

    #[test]
    fn mat_example() {
        let mut log = log_from(&[50.0, 50.0], &[1.0, 1.0], 1);
        log.records[0].top1 = Some(0.10);
        log.records[1].top1 = Some(0.60);
        assert!((log.mat(1).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(log.mat(5), Err(LmdError::Undefined("MAT@5"))));
        log.records[1].top1 = Some(0.10);
        assert!(log.mat(1).is_err());
    }

    #[test]
    fn push_validates() {
        let mut log = MetricsLog::new(5);
        assert!(log.push(IterationRecord::new(0, 0.0, 1.0)).is_err());
        log.push(IterationRecord::new(3, 1.0, 1.0)).unwrap();
        assert!(log.push(IterationRecord::new(3, 1.0, 1.0)).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut log = log_from(&[0.5, 0.25], &[2.0, 1.5], 7);
        log.records[1].top1 = Some(0.3);
        log.records[0].ratio = Some(0.15);
        let parsed = MetricsLog::parse_csv(&log.to_csv(), 7).unwrap();
        assert_eq!(parsed, log);
        assert!(MetricsLog::parse_csv("a,b\n", 7).is_err());
    }
}
