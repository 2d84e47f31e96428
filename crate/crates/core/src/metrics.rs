//! Temporal IoU matching, interpolated average precision, mAP, and the
//! two-sample Student's t-test with pooled standard deviation.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// A temporal segment with inclusive frame bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: usize,
    #[serde(default = "unit_score")]
    pub score: f64,
}

fn unit_score() -> f64 {
    1.0
}

impl Segment {
    pub fn new(start: usize, end: usize, label: usize, score: f64) -> Self {
        Self {
            start,
            end,
            label,
            score,
        }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Segments cover `[start, end + 1)` on the real line.
pub fn temporal_iou(a: &Segment, b: &Segment) -> f64 {
    let (a0, a1) = (a.start as f64, a.end as f64 + 1.0);
    let (b0, b1) = (b.start as f64, b.end as f64 + 1.0);
    let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
    let union = (a1 - a0) + (b1 - b0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A scored prediction in a named video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video: String,
    #[serde(flatten)]
    pub segment: Segment,
}

/// A ground-truth instance in a named video (its score is ignored).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video: String,
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

impl GroundTruth {
    fn segment(&self) -> Segment {
        Segment::new(self.start, self.end, self.label, 1.0)
    }
}

/// Descending score; ties by earlier start, then lower video id.
pub fn rank_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.segment
            .score
            .total_cmp(&a.segment.score)
            .then(a.segment.start.cmp(&b.segment.start))
            .then(a.video.cmp(&b.video))
    });
}

/// Greedy one-to-one matching of ranked detections.
///
/// Each detection takes the still-unmatched ground truth of its class and
/// video with the highest IoU at or above `threshold` (ties to the earlier
/// ground truth in `gts`). Returns one correctness flag per detection.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], threshold: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (k, gt) in gts.iter().enumerate() {
                if used[k] || gt.video != d.video || gt.label != d.segment.label {
                    continue;
                }
                let iou = temporal_iou(&d.segment, &gt.segment());
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            match best {
                Some((k, _)) => {
                    used[k] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Mean of interpolated precision over every ranked prediction.
    #[default]
    Literal,
    /// Interpolated precision summed at true positives, divided by the ground-truth count.
    Standard,
}

impl ApMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ApMode::Literal => "literal",
            ApMode::Standard => "standard",
        }
    }
}

impl std::str::FromStr for ApMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(ApMode::Literal),
            "standard" => Ok(ApMode::Standard),
            other => Err(Error::Config(format!("unknown ap_mode `{other}`"))),
        }
    }
}

/// Interpolated precision `max_{i ≥ n} p_i` at every rank `n`.
pub fn interpolated_precision(flags: &[bool]) -> Vec<f64> {
    let mut hits = 0usize;
    let mut p: Vec<f64> = flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            hits += f as usize;
            hits as f64 / (i + 1) as f64
        })
        .collect();
    for i in (0..p.len().saturating_sub(1)).rev() {
        p[i] = p[i].max(p[i + 1]);
    }
    p
}

/// Average precision of a ranked correctness list; 0 for an empty list.
pub fn interpolated_ap(flags: &[bool], mode: ApMode, num_gt: usize) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    let interp = interpolated_precision(flags);
    match mode {
        ApMode::Literal => interp.iter().sum::<f64>() / flags.len() as f64,
        ApMode::Standard => {
            if num_gt == 0 {
                return 0.0;
            }
            let s: f64 = interp.iter().zip(flags).filter(|(_, &f)| f).map(|(p, _)| p).sum();
            s / num_gt as f64
        }
    }
}

pub fn mean_ap(per_class: &[f64]) -> f64 {
    if per_class.is_empty() {
        return 0.0;
    }
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

/// mAP over classes `1..=classes` at one IoU threshold.
pub fn evaluate_map(
    dets: &[Detection],
    gts: &[GroundTruth],
    classes: usize,
    threshold: f64,
    mode: ApMode,
) -> f64 {
    let aps: Vec<f64> = (1..=classes)
        .map(|c| {
            let mut cd: Vec<Detection> = dets.iter().filter(|d| d.segment.label == c).cloned().collect();
            rank_detections(&mut cd);
            let cg: Vec<GroundTruth> = gts.iter().filter(|g| g.label == c).cloned().collect();
            let flags = match_detections(&cd, &cg, threshold);
            interpolated_ap(&flags, mode, cg.len())
        })
        .collect();
    mean_ap(&aps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub ap_mode: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (1..=7).map(|i| i as f64 / 10.0).collect(),
            ap_mode: ApMode::Literal,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() || self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Config(format!(
                "IoU thresholds must lie in (0, 1]: {:?}",
                self.iou_thresholds
            )));
        }
        Ok(())
    }

    /// mAP per configured threshold, in configuration order.
    pub fn evaluate(&self, dets: &[Detection], gts: &[GroundTruth], classes: usize) -> BTreeMap<String, f64> {
        self.iou_thresholds
            .iter()
            .map(|&t| (format!("{t:.2}"), evaluate_map(dets, gts, classes, t, self.ap_mode)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestReport {
    pub mean1: f64,
    pub mean2: f64,
    pub n1: usize,
    pub n2: usize,
    pub pooled_sd: f64,
    pub t: f64,
    pub dof: usize,
    pub p: f64,
    /// Set when the pooled variance is zero but the means differ.
    pub degenerate_variance: bool,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-tailed Student's t-test with pooled standard deviation.
pub fn students_t(group1: &[f64], group2: &[f64]) -> Result<TTestReport> {
    let (n1, n2) = (group1.len(), group2.len());
    if n1 < 2 || n2 < 2 {
        return Err(Error::Contract(format!(
            "t-test needs at least two scores per group, got {n1} and {n2}"
        )));
    }
    let (m1, v1) = mean_var(group1);
    let (m2, v2) = mean_var(group2);
    let dof = n1 + n2 - 2;
    let pooled_var = ((n1 - 1) as f64 * v1 + (n2 - 1) as f64 * v2) / dof as f64;
    let pooled_sd = pooled_var.sqrt();
    let report = |t: f64, p: f64, degenerate: bool| TTestReport {
        mean1: m1,
        mean2: m2,
        n1,
        n2,
        pooled_sd,
        t,
        dof,
        p,
        degenerate_variance: degenerate,
    };
    if pooled_sd == 0.0 {
        return Ok(match m1.partial_cmp(&m2) {
            Some(Ordering::Equal) => report(0.0, 1.0, false),
            Some(Ordering::Greater) => report(f64::INFINITY, 0.0, true),
            _ => report(f64::NEG_INFINITY, 0.0, true),
        });
    }
    let t = (m1 - m2) / (pooled_sd * (1.0 / n1 as f64 + 1.0 / n2 as f64).sqrt());
    Ok(report(t, two_tailed_p(t, dof as f64), false))
}

/// `P(|T| ≥ |t|)` for Student's t with `dof` degrees of freedom.
pub fn two_tailed_p(t: f64, dof: f64) -> f64 {
    let x = dof / (dof + t * t);
    beta_reg(dof / 2.0, 0.5, x).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(video: &str, s: usize, e: usize, label: usize, score: f64) -> Detection {
        Detection {
            video: video.into(),
            segment: Segment::new(s, e, label, score),
        }
    }

    fn gt(video: &str, start: usize, end: usize, label: usize) -> GroundTruth {
        GroundTruth {
            video: video.into(),
            start,
            end,
            label,
        }
    }

    #[test]
    fn iou_cases() {
        let a = Segment::new(0, 9, 1, 1.0);
        assert_eq!(temporal_iou(&a, &a), 1.0);
        assert_eq!(temporal_iou(&a, &Segment::new(20, 25, 1, 1.0)), 0.0);
        assert!((temporal_iou(&a, &Segment::new(5, 14, 1, 1.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matching_rules() {
        let gts = [gt("v", 0, 9, 1)];
        assert_eq!(match_detections(&[det("v", 0, 9, 1, 0.9)], &gts, 0.5), vec![true]);
        let mut two = vec![det("v", 1, 9, 1, 0.4), det("v", 0, 9, 1, 0.9)];
        rank_detections(&mut two);
        assert_eq!(match_detections(&two, &gts, 0.5), vec![true, false]);
        assert_eq!(two[0].segment.score, 0.9);
        // IoU 0.3 only
        let low = det("v", 7, 9, 1, 0.9);
        assert!(temporal_iou(&low.segment, &gts[0].segment()) < 0.5);
        assert_eq!(match_detections(&[low], &gts, 0.5), vec![false]);
        // wrong class or video never matches
        assert_eq!(match_detections(&[det("v", 0, 9, 2, 0.9)], &gts, 0.5), vec![false]);
        assert_eq!(match_detections(&[det("w", 0, 9, 1, 0.9)], &gts, 0.5), vec![false]);
    }

    #[test]
    fn ap_cases() {
        let ap = interpolated_ap(&[true, false, true], ApMode::Literal, 2);
        assert!((ap - 7.0 / 9.0).abs() < 1e-15);
        assert_eq!(interpolated_ap(&[true; 5], ApMode::Literal, 5), 1.0);
        assert_eq!(interpolated_ap(&[false; 3], ApMode::Literal, 2), 0.0);
        assert_eq!(interpolated_ap(&[], ApMode::Literal, 2), 0.0);
        // standard: (1 + 2/3) / 2
        let ap = interpolated_ap(&[true, false, true], ApMode::Standard, 2);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(interpolated_ap(&[true], ApMode::Standard, 0), 0.0);
    }

    #[test]
    fn map_cases() {
        assert_eq!(mean_ap(&[1.0, 0.0]), 0.5);
        assert_eq!(mean_ap(&[0.25]), 0.25);
        assert!((mean_ap(&[7.0 / 9.0, 1.0, 0.0]) - 16.0 / 27.0).abs() < 1e-15);
    }

    #[test]
    fn class_without_predictions_scores_zero() {
        let gts = [gt("v", 0, 9, 1), gt("v", 20, 29, 2)];
        let dets = [det("v", 0, 9, 1, 0.8)];
        assert_eq!(evaluate_map(&dets, &gts, 2, 0.5, ApMode::Literal), 0.5);
    }

    #[test]
    fn ttest_cases() {
        let r = students_t(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert!((r.pooled_sd - 1.0).abs() < 1e-15);
        assert!((r.t + 1.0 / (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(r.dof, 4);
        let s = students_t(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.t, -r.t);
        assert!((s.p - r.p).abs() < 1e-15);

        let same = students_t(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!((same.t, same.p), (0.0, 1.0));

        let flat = students_t(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!((flat.t, flat.p, flat.degenerate_variance), (0.0, 1.0, false));
        let split = students_t(&[1.0, 1.0], &[2.0, 2.0]).unwrap();
        assert_eq!((split.p, split.degenerate_variance), (0.0, true));

        assert!(students_t(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn p_value_reference() {
        // t = 2.776445 is the 97.5% quantile for 4 dof
        assert!((two_tailed_p(2.776445105, 4.0) - 0.05).abs() < 1e-8);
        // t = 1 with 1 dof: Cauchy, p = 0.5
        assert!((two_tailed_p(1.0, 1.0) - 0.5).abs() < 1e-14);
        // tiny p-values stay representable
        let p = two_tailed_p(40.0, 10.0);
        assert!(p > 0.0 && p < 1e-11);
    }
}
