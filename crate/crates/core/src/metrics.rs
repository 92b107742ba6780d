//! Pixel-level segmentation metrics. A pixel is predicted positive when
//! its probability is strictly greater than the threshold.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::losses::{LabelImage, ProbabilityMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl core::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl core::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

fn check_pair(p: &ProbabilityMap, y: &LabelImage) -> Result<()> {
    if p.width() != y.width() || p.height() != y.height() {
        return Err(contract!(
            "prediction {}x{} vs labels {}x{}",
            p.width(),
            p.height(),
            y.width(),
            y.height()
        ));
    }
    Ok(())
}

pub fn confusion(p: &ProbabilityMap, y: &LabelImage, threshold: f64) -> Result<ConfusionCounts> {
    check_pair(p, y)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(contract!("threshold {} outside (0, 1)", threshold));
    }
    let mut c = ConfusionCounts::default();
    for (&pv, &yv) in p.values().iter().zip(y.values()) {
        match (pv > threshold, yv == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PointMetrics {
    pub acc: f64,
    pub pre: f64,
    pub rec: f64,
    pub fsc: f64,
    pub iou: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub specificity: f64,
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f_measure(pre: f64, rec: f64) -> f64 {
    if pre + rec == 0.0 {
        0.0
    } else {
        2.0 * pre * rec / (pre + rec)
    }
}

pub fn point_metrics(c: &ConfusionCounts) -> PointMetrics {
    let pre = ratio(c.tp, c.tp + c.fp, 0.0);
    let rec = ratio(c.tp, c.tp + c.fn_, 0.0);
    let specificity = ratio(c.tn, c.fp + c.tn, 1.0);
    PointMetrics {
        acc: ratio(c.tp + c.tn, c.total(), 0.0),
        pre,
        rec,
        fsc: f_measure(pre, rec),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, 1.0),
        fpr: 1.0 - specificity,
        fnr: ratio(c.fn_, c.tp + c.fn_, 0.0),
        specificity,
    }
}

/// 255 thresholds `i / 256`, `i = 255 … 1`, in decreasing order.
pub fn threshold_grid() -> Vec<f64> {
    (1..=255).rev().map(|i| i as f64 / 256.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveMetrics {
    pub max_f: f64,
    /// Threshold attaining `max_f` (the largest one on ties).
    pub best_threshold: f64,
    pub ap: f64,
    /// Ordered by strictly decreasing threshold.
    pub curve: Vec<PrPoint>,
}

/// Confusion counts at every threshold of a grid, accumulated over frames.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveAccumulator {
    thresholds: Vec<f64>,
    positives_at: Vec<u64>,
    true_positives_at: Vec<u64>,
    labelled_positive: u64,
    total: u64,
}

impl CurveAccumulator {
    pub fn new(thresholds: &[f64]) -> Result<Self> {
        if thresholds.len() < 2 {
            return Err(contract!("a curve needs at least 2 thresholds"));
        }
        let mut t = thresholds.to_vec();
        t.sort_by(|a, b| b.total_cmp(a));
        t.dedup();
        if t.len() < 2 {
            return Err(contract!("a curve needs at least 2 distinct thresholds"));
        }
        let n = t.len();
        Ok(Self {
            thresholds: t,
            positives_at: vec![0; n + 1],
            true_positives_at: vec![0; n + 1],
            labelled_positive: 0,
            total: 0,
        })
    }

    pub fn add(&mut self, p: &ProbabilityMap, y: &LabelImage) -> Result<()> {
        check_pair(p, y)?;
        for (&pv, &yv) in p.values().iter().zip(y.values()) {
            // Thresholds are decreasing, so `pv` is positive from this index on.
            let first = self.thresholds.partition_point(|&t| t >= pv);
            self.positives_at[first] += 1;
            if yv == 1 {
                self.true_positives_at[first] += 1;
                self.labelled_positive += 1;
            }
            self.total += 1;
        }
        Ok(())
    }

    pub fn counts(&self) -> Vec<ConfusionCounts> {
        let (mut pos, mut tp) = (0u64, 0u64);
        self.thresholds
            .iter()
            .enumerate()
            .map(|(i, _)| {
                pos += self.positives_at[i];
                tp += self.true_positives_at[i];
                let fp = pos - tp;
                let fn_ = self.labelled_positive - tp;
                ConfusionCounts {
                    tp,
                    fp,
                    fn_,
                    tn: self.total - tp - fp - fn_,
                }
            })
            .collect()
    }

    pub fn finish(&self) -> CurveMetrics {
        let curve: Vec<PrPoint> = self
            .thresholds
            .iter()
            .zip(self.counts())
            .map(|(&threshold, c)| {
                let m = point_metrics(&c);
                PrPoint {
                    threshold,
                    precision: m.pre,
                    recall: m.rec,
                    f: m.fsc,
                }
            })
            .collect();
        let mut best = curve[0];
        for pt in &curve[1..] {
            if pt.f > best.f {
                best = *pt;
            }
        }
        CurveMetrics {
            max_f: best.f,
            best_threshold: best.threshold,
            ap: interpolated_ap(&curve),
            curve,
        }
    }
}

/// 11-point interpolated average precision.
pub fn interpolated_ap(curve: &[PrPoint]) -> f64 {
    (0..=10)
        .map(|i| {
            let r = i as f64 / 10.0;
            curve
                .iter()
                .filter(|pt| pt.recall >= r - 1e-12)
                .map(|pt| pt.precision)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

pub fn curve_metrics(p: &ProbabilityMap, y: &LabelImage, thresholds: &[f64]) -> Result<CurveMetrics> {
    let mut acc = CurveAccumulator::new(thresholds)?;
    acc.add(p, y)?;
    Ok(acc.finish())
}
