//! Per-step records, discrete events and the collapse detector.
//!
//! ## CSV
//!
//! One header row, then one row per learner step, columns in this order:
//!
//! ```text
//! step,wall_ms,train_reward,ess,ess_ratio,kl,grad_norm,lr_eff,baseline,masked_frac,staleness_max,staleness_mean,val_acc
//! ```
//!
//! Floats use the shortest representation that parses back to the same
//! `f64`. `val_acc` is empty on steps without an evaluation. `ess` and
//! `ess_ratio` are 0 when every sample of the batch was masked.
//!
//! ## JSONL
//!
//! One JSON object per line with at least `event` and `step`. Event kinds:
//! `skip_update` (`reason`), `snapshot_exchange` (`wave`, `token`, `from`,
//! `to`), `mask_storm` (`masked_frac`), `dropped` (`wave`, `count`, `reason`),
//! `warning` (`message`), `collapse` (`reason`).

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "step,wall_ms,train_reward,ess,ess_ratio,kl,grad_norm,lr_eff,baseline,masked_frac,staleness_max,staleness_mean,val_acc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub wall_ms: f64,
    pub train_reward: f64,
    pub ess: f64,
    pub ess_ratio: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub lr_eff: f64,
    pub baseline: f64,
    pub masked_frac: f64,
    pub staleness_max: u64,
    pub staleness_mean: f64,
    pub val_acc: Option<f64>,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},",
            self.step,
            self.wall_ms,
            self.train_reward,
            self.ess,
            self.ess_ratio,
            self.kl,
            self.grad_norm,
            self.lr_eff,
            self.baseline,
            self.masked_frac,
            self.staleness_max,
            self.staleness_mean
        )
        .expect("write to string");
        if let Some(v) = self.val_acc {
            write!(s, "{v}").expect("write to string");
        }
        s
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(Error::Data(format!("expected 13 columns, got {}", f.len())));
        }
        let num =
            |i: usize| -> Result<f64> { f[i].parse::<f64>().map_err(|e| Error::Data(format!("column {i}: {e}"))) };
        let int =
            |i: usize| -> Result<u64> { f[i].parse::<u64>().map_err(|e| Error::Data(format!("column {i}: {e}"))) };
        Ok(StepRecord {
            step: int(0)?,
            wall_ms: num(1)?,
            train_reward: num(2)?,
            ess: num(3)?,
            ess_ratio: num(4)?,
            kl: num(5)?,
            grad_norm: num(6)?,
            lr_eff: num(7)?,
            baseline: num(8)?,
            masked_frac: num(9)?,
            staleness_max: int(10)?,
            staleness_mean: num(11)?,
            val_acc: if f[12].is_empty() { None } else { Some(num(12)?) },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    SkipUpdate {
        step: u64,
        reason: String,
    },
    SnapshotExchange {
        step: u64,
        wave: u64,
        token: usize,
        from: u64,
        to: u64,
    },
    MaskStorm {
        step: u64,
        masked_frac: f64,
    },
    Dropped {
        step: u64,
        wave: u64,
        count: usize,
        reason: String,
    },
    Warning {
        step: u64,
        message: String,
    },
    Collapse {
        step: u64,
        reason: String,
    },
}

pub fn write_csv(path: &Path, rows: &[StepRecord]) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 120);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        _ => return Err(Error::Data(format!("{}: missing or unexpected header", path.display()))),
    }
    lines.filter(|l| !l.is_empty()).map(StepRecord::parse_csv_row).collect()
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for e in events {
        serde_json::to_writer(&mut w, e).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Thresholds of the collapse flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollapseCriteria {
    /// Accuracy counts as dropped below this fraction of its running max.
    pub acc_fraction: f64,
    /// Consecutive dropped evaluations needed.
    pub acc_patience: usize,
    /// KL spike multiple of the trailing median.
    pub kl_multiple: f64,
    pub kl_window: usize,
    /// Steps of history needed before a KL spike can be declared.
    pub kl_min_history: usize,
    /// KL values below this are never spikes.
    pub kl_floor: f64,
}

impl Default for CollapseCriteria {
    fn default() -> Self {
        CollapseCriteria {
            acc_fraction: 0.5,
            acc_patience: 20,
            kl_multiple: 10.0,
            kl_window: 100,
            kl_min_history: 100,
            kl_floor: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CollapseVerdict {
    pub collapsed: bool,
    /// Step at which the flag first trips.
    pub collapse_step: Option<u64>,
    pub first_kl_spike_step: Option<u64>,
    pub first_acc_collapse_step: Option<u64>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Steps whose KL exceeds `kl_multiple` times the median of the previous
/// `kl_window` steps.
pub fn kl_spikes(rows: &[StepRecord], c: &CollapseCriteria) -> Vec<u64> {
    let mut out = Vec::new();
    for i in 0..rows.len() {
        if i < c.kl_min_history.max(1) {
            continue;
        }
        let lo = i.saturating_sub(c.kl_window);
        let mut window: Vec<f64> = rows[lo..i].iter().map(|r| r.kl).collect();
        let med = median(&mut window);
        let kl = rows[i].kl;
        if kl > c.kl_floor && kl > c.kl_multiple * med {
            out.push(rows[i].step);
        }
    }
    out
}

pub fn detect_collapse(rows: &[StepRecord], c: &CollapseCriteria) -> CollapseVerdict {
    let first_kl = kl_spikes(rows, c).first().copied();
    let mut best = f64::NEG_INFINITY;
    let mut run = 0usize;
    let mut first_acc = None;
    for r in rows {
        let Some(acc) = r.val_acc else { continue };
        if best > 0.0 && acc < c.acc_fraction * best {
            run += 1;
            if run >= c.acc_patience && first_acc.is_none() {
                first_acc = Some(r.step);
            }
        } else {
            run = 0;
        }
        best = best.max(acc);
    }
    let collapse_step = match (first_kl, first_acc) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    CollapseVerdict {
        collapsed: collapse_step.is_some(),
        collapse_step,
        first_kl_spike_step: first_kl,
        first_acc_collapse_step: first_acc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, kl: f64, acc: Option<f64>) -> StepRecord {
        StepRecord {
            step,
            wall_ms: step as f64 * 1.5,
            train_reward: 0.25,
            ess: 3.0,
            ess_ratio: 0.75,
            kl,
            grad_norm: 0.1,
            lr_eff: 1e-2,
            baseline: 0.2,
            masked_frac: 0.0,
            staleness_max: 2,
            staleness_mean: 1.0 / 3.0,
            val_acc: acc,
        }
    }

    #[test]
    fn csv_round_trip() {
        for r in [row(3, 0.1 + 0.2, Some(0.7)), row(4, 1e-300, None)] {
            assert_eq!(StepRecord::parse_csv_row(&r.csv_row()).unwrap(), r);
        }
        assert_eq!(CSV_HEADER.split(',').count(), 13);
    }

    #[test]
    fn event_json_shape() {
        let e = Event::SkipUpdate {
            step: 4,
            reason: "all masked".into(),
        };
        assert_eq!(
            serde_json::to_string(&e).unwrap(),
            r#"{"event":"skip_update","step":4,"reason":"all masked"}"#
        );
    }

    #[test]
    fn kl_spike_trips_flag() {
        let mut rows: Vec<StepRecord> = (0..150).map(|i| row(i, 0.01, None)).collect();
        assert!(!detect_collapse(&rows, &CollapseCriteria::default()).collapsed);
        rows[40].kl = 0.2;
        assert!(!detect_collapse(&rows, &CollapseCriteria::default()).collapsed);
        rows[120].kl = 0.2;
        let v = detect_collapse(&rows, &CollapseCriteria::default());
        assert_eq!(v.first_kl_spike_step, Some(120));
        assert!(v.collapsed);
    }

    #[test]
    fn accuracy_drop_needs_patience() {
        let c = CollapseCriteria::default();
        let mut rows: Vec<StepRecord> = vec![row(0, 0.0, Some(0.8))];
        rows.extend((1..20).map(|i| row(i, 0.0, Some(0.3))));
        assert!(!detect_collapse(&rows, &c).collapsed);
        rows.push(row(20, 0.0, Some(0.3)));
        assert_eq!(detect_collapse(&rows, &c).first_acc_collapse_step, Some(20));
    }
}
