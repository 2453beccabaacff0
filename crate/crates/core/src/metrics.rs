//! Frame, segment and open-set metrics.
//!
//! Every function here works on fractions in `[0, 1]`; [`MetricReport`]
//! renders them as percentages.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{arg, Error, Result};

/// Fraction of unmasked frames where `pred == truth`.
pub fn frame_accuracy(pred: &[u32], truth: &[u32], mask: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return arg(format!(
            "length mismatch: pred {}, truth {}, mask {}",
            pred.len(),
            truth.len(),
            mask.len()
        ));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for ((p, t), &m) in pred.iter().zip(truth).zip(mask) {
        if m {
            total += 1;
            hits += usize::from(p == t);
        }
    }
    if total == 0 {
        return arg("no unmasked frames");
    }
    Ok(hits as f64 / total as f64)
}

/// A run of one label over frames `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub label: u32,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Maximal runs of equal labels.
pub fn to_segments(labels: &[u32]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &label) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.label == label => s.end = t + 1,
            _ => out.push(Segment {
                label,
                start: t,
                end: t + 1,
            }),
        }
    }
    out
}

pub fn flatten(segments: &[Segment]) -> Vec<u32> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.label, s.len()))
        .collect()
}

fn span(segments: &[Segment]) -> usize {
    segments.last().map_or(0, |s| s.end)
}

/// Segmental F1 at an IoU threshold of `k` percent.
///
/// Same-class (prediction, truth) pairs with IoU ≥ k/100 are matched one to
/// one in order of decreasing IoU. Among segmentations of a single stream,
/// eligible pairs have disjoint intersections, so ties are broken by the
/// start of the intersection, which keeps the matching symmetric in its two
/// arguments.
pub fn f1_at_k(pred: &[Segment], truth: &[Segment], k: u32) -> Result<f64> {
    if pred.is_empty() && truth.is_empty() {
        check_k(k)?;
        return Ok(1.0);
    }
    let tp = true_positives(pred, truth, k)?;
    Ok(f1_from_counts(tp, pred.len(), truth.len()))
}

fn check_k(k: u32) -> Result<()> {
    if k == 0 || k > 100 {
        return arg(format!("k = {k} must be in 1..=100"));
    }
    Ok(())
}

fn f1_from_counts(tp: usize, n_pred: usize, n_truth: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / n_pred as f64;
    let recall = tp as f64 / n_truth as f64;
    2.0 * precision * recall / (precision + recall)
}

fn true_positives(pred: &[Segment], truth: &[Segment], k: u32) -> Result<usize> {
    check_k(k)?;
    if span(pred) != span(truth) {
        return arg(format!("prediction covers {} frames, truth {}", span(pred), span(truth)));
    }
    let threshold = k as f64 / 100.0;
    let mut pairs = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            if p.label != t.label {
                continue;
            }
            let lo = p.start.max(t.start);
            let hi = p.end.min(t.end);
            if hi <= lo {
                continue;
            }
            let union = p.end.max(t.end) - p.start.min(t.start);
            let iou = (hi - lo) as f64 / union as f64;
            if iou >= threshold {
                pairs.push((iou, lo, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut pred_used = vec![false; pred.len()];
    let mut truth_used = vec![false; truth.len()];
    let mut tp = 0usize;
    for (_, _, i, j) in pairs {
        if !pred_used[i] && !truth_used[j] {
            pred_used[i] = true;
            truth_used[j] = true;
            tp += 1;
        }
    }
    Ok(tp)
}

/// F1@k accumulated over several sequences: true positives and segment
/// counts are summed before forming precision and recall.
pub fn f1_at_k_pooled(pairs: &[(Vec<Segment>, Vec<Segment>)], k: u32) -> Result<f64> {
    check_k(k)?;
    let (mut tp, mut n_pred, mut n_truth) = (0, 0, 0);
    for (pred, truth) in pairs {
        tp += true_positives(pred, truth, k)?;
        n_pred += pred.len();
        n_truth += truth.len();
    }
    if n_pred + n_truth == 0 {
        return Ok(1.0);
    }
    Ok(f1_from_counts(tp, n_pred, n_truth))
}

/// Probability that an ID score exceeds an OOD score, ties counting ½.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return arg("AUROC needs both ID and OOD scores");
    }
    if id_scores.iter().chain(ood_scores).any(|s| s.is_nan()) {
        return arg("AUROC scores contain NaN");
    }
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut id_rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j share their average
        let rank = (i + 1 + j) as f64 / 2.0;
        id_rank_sum += rank * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (n_id, n_ood) = (id_scores.len() as f64, ood_scores.len() as f64);
    Ok((id_rank_sum - n_id * (n_id + 1.0) / 2.0) / (n_id * n_ood))
}

/// Accuracy of mapped pseudo-labels on frames flagged novel whose ground
/// truth is novel.
pub fn acc_ood(mapped: &[u32], truth: &[u32]) -> Result<f64> {
    if mapped.len() != truth.len() {
        return arg("mapped and true label lists differ in length");
    }
    if mapped.is_empty() {
        return arg("no frames qualify for OOD accuracy");
    }
    let hits = mapped.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / mapped.len() as f64)
}

/// Harmonic mean of AUROC and OOD accuracy; zero if either is zero.
pub fn h_score(auroc: f64, acc_ood: f64) -> f64 {
    if auroc <= 0.0 || acc_ood <= 0.0 {
        return 0.0;
    }
    2.0 / (1.0 / auroc + 1.0 / acc_ood)
}

/// `1 − √(2·n_train / (n_test + n_target))`.
pub fn openness(n_train: usize, n_test: usize, n_target: usize) -> Result<f64> {
    if n_train == 0 || n_test == 0 || n_target == 0 {
        return arg("class counts must be positive");
    }
    if 2 * n_train > n_test + n_target {
        return arg(format!("2·{n_train} exceeds {n_test} + {n_target}"));
    }
    Ok(1.0 - (2.0 * n_train as f64 / (n_test + n_target) as f64).sqrt())
}

pub const F1_THRESHOLDS: [u32; 3] = [10, 25, 50];

/// Metrics of one evaluation scenario. Fields that do not apply to the
/// scenario are `None` and render as `n/a`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub scenario: String,
    pub acc_close: Option<f64>,
    pub acc_open: Option<f64>,
    pub acc_open_mapped: Option<f64>,
    pub f1: BTreeMap<u32, f64>,
    pub auroc: Option<f64>,
    pub acc_ood: Option<f64>,
    pub h_score: Option<f64>,
    pub openness: Option<f64>,
}

/// Report columns in serialization order.
pub const REPORT_KEYS: [&str; 10] = [
    "acc_close",
    "acc_open",
    "acc_open_mapped",
    "f1@10",
    "f1@25",
    "f1@50",
    "auroc",
    "acc_ood",
    "h_score",
    "openness",
];

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x))
}

fn parse_percent(text: &str, key: &str) -> Result<Option<f64>> {
    let text = text.trim();
    if text == "n/a" {
        return Ok(None);
    }
    let v: f64 = text
        .parse()
        .map_err(|_| Error::Config(format!("{key}: '{text}' is not a number")))?;
    if !(0.0..=100.0).contains(&v) {
        return Err(Error::Config(format!("{key}: {v} outside [0, 100]")));
    }
    Ok(Some(v / 100.0))
}

impl MetricReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        match key {
            "acc_close" => self.acc_close,
            "acc_open" => self.acc_open,
            "acc_open_mapped" => self.acc_open_mapped,
            "auroc" => self.auroc,
            "acc_ood" => self.acc_ood,
            "h_score" => self.h_score,
            "openness" => self.openness,
            _ => key
                .strip_prefix("f1@")
                .and_then(|k| k.parse().ok())
                .and_then(|k: u32| self.f1.get(&k).copied()),
        }
    }

    fn set(&mut self, key: &str, value: Option<f64>) {
        match key {
            "acc_close" => self.acc_close = value,
            "acc_open" => self.acc_open = value,
            "acc_open_mapped" => self.acc_open_mapped = value,
            "auroc" => self.auroc = value,
            "acc_ood" => self.acc_ood = value,
            "h_score" => self.h_score = value,
            "openness" => self.openness = value,
            _ => {
                if let (Some(k), Some(v)) = (key.strip_prefix("f1@").and_then(|k| k.parse().ok()), value) {
                    self.f1.insert(k, v);
                }
            }
        }
    }

    /// `key: value` lines, values as percentages with two decimals.
    pub fn to_text(&self) -> String {
        let mut out = format!("scenario: {}\n", self.scenario);
        for key in REPORT_KEYS {
            let _ = writeln!(out, "{key}: {}", percent(self.get(key)));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut report = Self::default();
        let mut seen = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("malformed report line '{line}'")))?;
            let key = key.trim();
            if key == "scenario" {
                report.scenario = value.trim().to_string();
                continue;
            }
            if !REPORT_KEYS.contains(&key) {
                return Err(Error::Config(format!("unknown report key '{key}'")));
            }
            report.set(key, parse_percent(value, key)?);
            seen.push(key.to_string());
        }
        if let Some(missing) = REPORT_KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
            return Err(Error::Config(format!("report is missing '{missing}'")));
        }
        Ok(report)
    }

    pub fn csv_header() -> String {
        format!("scenario,{}", REPORT_KEYS.join(","))
    }

    pub fn to_csv_row(&self) -> String {
        let values: Vec<String> = REPORT_KEYS.iter().map(|k| percent(self.get(k))).collect();
        format!("{},{}", self.scenario, values.join(","))
    }

    /// Parses a header plus rows as written by [`Self::csv_header`] and
    /// [`Self::to_csv_row`]. The first column is the row label whatever its
    /// header says, so comparison tables keyed by configuration parse too.
    pub fn from_csv(text: &str) -> Result<Vec<Self>> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::Config(e.to_string()))?.clone();
        if headers.is_empty() {
            return Err(Error::Config("CSV report has no header".into()));
        }
        if let Some(missing) = REPORT_KEYS.iter().find(|k| !headers.iter().any(|h| h == **k)) {
            return Err(Error::Config(format!("CSV report is missing column '{missing}'")));
        }
        let mut out = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Config(e.to_string()))?;
            let mut report = Self::default();
            for (i, (h, v)) in headers.iter().zip(record.iter()).enumerate() {
                if i == 0 {
                    report.scenario = v.to_string();
                } else if REPORT_KEYS.contains(&h) {
                    report.set(h, parse_percent(v, h)?);
                }
            }
            out.push(report);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(label: u32, start: usize, end: usize) -> Segment {
        Segment { label, start, end }
    }

    #[test]
    fn accuracy_examples() {
        let all = [true; 10];
        let a: Vec<u32> = (0..10).collect();
        assert_eq!(frame_accuracy(&a, &a, &all).unwrap(), 1.0);
        let b: Vec<u32> = a.iter().map(|x| x + 1).collect();
        assert_eq!(frame_accuracy(&a, &b, &all).unwrap(), 0.0);
        let half: Vec<u32> = (0..10).map(|i| if i < 5 { i } else { 99 }).collect();
        assert_eq!(frame_accuracy(&half, &a, &all).unwrap(), 0.5);
        assert!(frame_accuracy(&a, &a, &[false; 10]).is_err());
    }

    #[test]
    fn segments_examples() {
        assert_eq!(to_segments(&[0, 0, 1]), vec![seg(0, 0, 2), seg(1, 2, 3)]);
        assert_eq!(to_segments(&[7]), vec![seg(7, 0, 1)]);
    }

    #[test]
    fn f1_examples() {
        let truth = [seg(0, 0, 10)];
        for k in F1_THRESHOLDS {
            assert_eq!(f1_at_k(&truth, &truth, k).unwrap(), 1.0);
        }
        let half = [seg(0, 0, 5), seg(1, 5, 10)];
        // one of two predictions matches: P = 1/2, R = 1
        let expect = 2.0 * 0.5 / 1.5;
        assert!((f1_at_k(&half, &truth, 50).unwrap() - expect).abs() < 1e-12);
        let single = [seg(0, 0, 10)];
        let late = [seg(1, 0, 8), seg(0, 8, 10)];
        assert!(f1_at_k(&late, &single, 10).unwrap() > 0.0);
        assert_eq!(f1_at_k(&late, &single, 25).unwrap(), 0.0);
        assert!(f1_at_k(&half, &[seg(0, 0, 9)], 10).is_err());
        assert_eq!(f1_at_k(&[], &[], 50).unwrap(), 1.0);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5, 0.3], &[0.5, 0.3]).unwrap(), 0.5);
        assert!(auroc(&[], &[0.1]).is_err());
    }

    #[test]
    fn h_score_examples() {
        assert!((h_score(0.8462, 0.8469) - 0.8465).abs() < 1e-4);
        assert!((h_score(0.6, 0.3) - 0.4).abs() < 1e-12);
        assert_eq!(h_score(0.0, 0.9), 0.0);
        assert!((h_score(0.37, 0.37) - 0.37).abs() < 1e-15);
    }

    #[test]
    fn openness_examples() {
        let o = openness(11, 14, 11).unwrap();
        assert!((0.060..=0.066).contains(&o), "{o}");
        assert_eq!(openness(3, 3, 3).unwrap(), 0.0);
        assert!((openness(1, 4, 4).unwrap() - 0.5).abs() < 1e-15);
        assert!(openness(5, 3, 3).is_err());
        assert!(openness(0, 3, 3).is_err());
    }

    #[test]
    fn collapsed_mapping_scores_majority_share() {
        let truth = [4, 4, 4, 5];
        assert_eq!(acc_ood(&[4, 4, 4, 4], &truth).unwrap(), 0.75);
    }

    #[test]
    fn report_text_and_csv_round_trip() {
        let report = MetricReport {
            scenario: "open".into(),
            acc_close: Some(0.9123),
            acc_open: Some(0.5),
            acc_open_mapped: None,
            f1: [(10, 0.8), (25, 0.75), (50, 0.5)].into(),
            auroc: Some(1.0),
            acc_ood: Some(0.0),
            h_score: Some(0.0),
            openness: None,
        };
        let text = report.to_text();
        assert!(text.contains("acc_open_mapped: n/a"));
        let back = MetricReport::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        let csv = format!("{}\n{}\n", MetricReport::csv_header(), report.to_csv_row());
        let rows = MetricReport::from_csv(&csv).unwrap();
        assert_eq!(rows[0].to_csv_row(), report.to_csv_row());
        assert!(MetricReport::from_text("scenario: x\nacc_close: 5\n").is_err());
    }
}
