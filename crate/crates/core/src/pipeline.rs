//! Open-world inference: recognition, novelty detection, clustering of novel
//! frames and evaluation-time label mapping.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use crate::assignment;
use crate::batch::{padded_length, ClassIndex};
use crate::cluster::kmeans;
use crate::error::{arg, Error, Result};
use crate::metrics::{self, MetricReport, F1_THRESHOLDS};
use crate::model::Model;
use crate::skeleton::{OpenWorldSplit, SkeletonSequence};
use crate::tensor::Tensor;

pub const DEFAULT_PERCENTILE: f64 = 5.0;

/// Per-frame softmax argmax and its probability over `(N, K, T, 1)`
/// logits, in `n * T + t` order. Ties go to the lowest class index.
pub fn recognize(logits: &Tensor) -> Result<Vec<(usize, f64)>> {
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let (n, k, t, _) = logits.dims4();
    if k == 0 {
        return arg("logits have no classes");
    }
    let mut out = Vec::with_capacity(n * t);
    for ni in 0..n {
        for ti in 0..t {
            let z = |c: usize| logits.at4(ni, c, ti, 0);
            let mut best = 0;
            for c in 1..k {
                if z(c) > z(best) {
                    best = c;
                }
            }
            let denom: f64 = (0..k).map(|c| (z(c) - z(best)).exp()).sum();
            out.push((best, 1.0 / denom));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub percentile: f64,
    pub validation_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoveltyDetector {
    pub alpha: f64,
    pub calibration: Option<Calibration>,
}

impl NoveltyDetector {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return arg(format!("alpha {alpha} must be in (0, 1)"));
        }
        Ok(Self {
            alpha,
            calibration: None,
        })
    }

    /// Known iff `confidence > alpha`.
    pub fn detect(&self, confidence: f64) -> bool {
        confidence > self.alpha
    }
}

/// Sets alpha to the nearest-rank lower `percentile` of validation
/// confidences, clamped into `(0, 1)`.
pub fn calibrate_threshold(confidences: &[f64], percentile: f64) -> Result<NoveltyDetector> {
    if confidences.is_empty() {
        return arg("no validation confidences to calibrate on");
    }
    if !(percentile > 0.0 && percentile <= 50.0) {
        return arg(format!("percentile {percentile} must be in (0, 50]"));
    }
    if confidences.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite validation confidence".into()));
    }
    let mut sorted = confidences.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    let alpha = sorted[rank - 1].clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    Ok(NoveltyDetector {
        alpha,
        calibration: Some(Calibration {
            percentile,
            validation_size: sorted.len(),
        }),
    })
}

/// K-means pseudo-classes for frames flagged novel.
pub fn cluster_novel(embeddings: &[Vec<f64>], m: usize, seed: u64) -> Result<Vec<usize>> {
    Ok(kmeans(embeddings, m, seed)?.assignments)
}

/// Hungarian mapping of cluster ids onto the novel labels they co-occur with
/// most. Labels outside `novel` (misdetected known frames) are ignored when
/// counting; clusters left unmatched get ids from `fresh_start` upward.
pub fn map_clusters(
    cluster_ids: &[usize],
    truth: &[u32],
    novel: &BTreeSet<u32>,
    fresh_start: u32,
) -> Result<BTreeMap<usize, u32>> {
    if cluster_ids.len() != truth.len() {
        return arg("cluster ids and labels differ in length");
    }
    if cluster_ids.is_empty() {
        return arg("no frames to map");
    }
    let clusters: Vec<usize> = cluster_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let labels: Vec<u32> = novel.iter().copied().collect();
    let mut counts = vec![vec![0.0; labels.len()]; clusters.len()];
    for (c, l) in cluster_ids.iter().zip(truth) {
        if let (Ok(i), Ok(j)) = (clusters.binary_search(c), labels.binary_search(l)) {
            counts[i][j] += 1.0;
        }
    }
    let assignment = if labels.is_empty() {
        vec![None; clusters.len()]
    } else {
        assignment::maximize(&counts)?
    };
    let mut fresh = fresh_start;
    let mut mapping = BTreeMap::new();
    for (cluster, column) in clusters.iter().zip(assignment) {
        let label = match column {
            Some(j) => labels[j],
            None => {
                fresh += 1;
                fresh - 1
            }
        };
        mapping.insert(*cluster, label);
    }
    Ok(mapping)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutcome {
    pub known_pred: u32,
    pub confidence: f64,
    pub is_known: bool,
    pub cluster_id: Option<usize>,
    /// present iff the frame is flagged novel
    pub mapped_label: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceOutcome {
    pub frames: Vec<FrameOutcome>,
    pub embeddings: Vec<Vec<f64>>,
}

/// Per-frame `(class index, confidence)` and the matching cluster embeddings.
pub type SequenceInference = (Vec<(usize, f64)>, Vec<Vec<f64>>);

/// Per-frame logits and cluster embeddings of one sequence, padded only to
/// the model's temporal multiple.
pub fn infer_sequence(model: &Model, sequence: &SkeletonSequence) -> Result<SequenceInference> {
    let t = padded_length(sequence.frames());
    let offset = (t - sequence.frames()) / 2;
    let mut input = Tensor::zeros(&[1, 3, t, sequence.joints()]);
    sequence.write_padded(&mut input, 0, offset);
    let out = model.infer(&input)?;
    let rec = recognize(&out.logits)?;
    let d = out.embedding_i.dims4().1;
    let frames = offset..offset + sequence.frames();
    let embeddings = frames
        .clone()
        .map(|ti| (0..d).map(|c| out.embedding_i.at4(0, c, ti, 0)).collect())
        .collect();
    Ok((rec[frames].to_vec(), embeddings))
}

/// How frames are routed to the novel branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Routing<'a> {
    Detector(&'a NoveltyDetector),
    AllNovel,
}

/// Recognition, detection, clustering into at most `m` pseudo-classes and,
/// when `novel` is given, Hungarian mapping against the sequences' labels.
/// Without ground truth each cluster maps to `fresh_start + cluster`.
pub fn run_pipeline(
    model: &Model,
    classes: &ClassIndex,
    routing: Routing<'_>,
    sequences: &[SkeletonSequence],
    m: usize,
    novel: Option<&BTreeSet<u32>>,
    seed: u64,
) -> Result<Vec<SequenceOutcome>> {
    let fresh_start = classes
        .classes()
        .iter()
        .chain(novel.into_iter().flatten())
        .max()
        .map_or(0, |c| c + 1);
    let mut outcomes = Vec::with_capacity(sequences.len());
    for s in sequences {
        let (rec, embeddings) = infer_sequence(model, s)?;
        let frames = rec
            .into_iter()
            .map(|(ci, confidence)| FrameOutcome {
                known_pred: classes.class_of(ci),
                confidence,
                is_known: match routing {
                    Routing::Detector(d) => d.detect(confidence),
                    Routing::AllNovel => false,
                },
                cluster_id: None,
                mapped_label: None,
            })
            .collect();
        outcomes.push(SequenceOutcome { frames, embeddings });
    }
    let mut flagged = Vec::new();
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for (si, (o, s)) in outcomes.iter().zip(sequences).enumerate() {
        for (ti, f) in o.frames.iter().enumerate() {
            if !f.is_known {
                flagged.push((si, ti));
                points.push(o.embeddings[ti].clone());
                truth.push(s.labels()[ti]);
            }
        }
    }
    if flagged.is_empty() {
        return Ok(outcomes);
    }
    let k = m.max(1).min(points.len());
    let ids = cluster_novel(&points, k, seed)?;
    let mapping = match novel {
        Some(novel) => map_clusters(&ids, &truth, novel, fresh_start)?,
        None => ids
            .iter()
            .map(|&c| (c, fresh_start + c as u32))
            .collect(),
    };
    for (&(si, ti), &c) in flagged.iter().zip(&ids) {
        let f = &mut outcomes[si].frames[ti];
        f.cluster_id = Some(c);
        f.mapped_label = Some(mapping[&c]);
    }
    Ok(outcomes)
}

/// Label stream of an outcome: the recognized class for known frames, and
/// either `unknown` or the mapped pseudo-label for novel ones.
fn open_labels(frames: &[FrameOutcome], unknown: Option<u32>) -> Vec<u32> {
    frames
        .iter()
        .map(|f| match (f.is_known, unknown) {
            (true, _) => f.known_pred,
            (false, Some(u)) => u,
            (false, None) => f.mapped_label.unwrap_or(f.known_pred),
        })
        .collect()
}

fn pooled_f1(pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<BTreeMap<u32, f64>> {
    let segs: Vec<_> = pairs
        .iter()
        .map(|(p, t)| (metrics::to_segments(p), metrics::to_segments(t)))
        .collect();
    F1_THRESHOLDS
        .iter()
        .map(|&k| Ok((k, metrics::f1_at_k_pooled(&segs, k)?)))
        .collect()
}

fn accuracy(pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
    let pred: Vec<u32> = pairs.iter().flat_map(|(p, _)| p.iter().copied()).collect();
    let truth: Vec<u32> = pairs.iter().flat_map(|(_, t)| t.iter().copied()).collect();
    metrics::frame_accuracy(&pred, &truth, &vec![true; pred.len()])
}

/// Validation-frame confidences used to calibrate the detector.
pub fn validation_confidences(model: &Model, sequences: &[SkeletonSequence]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for s in sequences {
        out.extend(infer_sequence(model, s)?.0.into_iter().map(|(_, c)| c));
    }
    Ok(out)
}

/// Reports and per-frame outcomes of the three evaluation scenarios.
pub struct Evaluation {
    pub detector: NoveltyDetector,
    pub reports: Vec<MetricReport>,
    /// outcomes of the open-set scenario, one per test sequence
    pub outcomes: Vec<SequenceOutcome>,
}

fn in_scenario<T>(scenario: &str, result: Result<T>) -> Result<T> {
    result.map_err(|e| Error::Scenario {
        scenario: scenario.to_string(),
        source: Box::new(e),
    })
}

/// Runs the closed-set, open-set and OOD-only scenarios.
///
/// * closed: known-only test sequences, plain argmax recognition.
/// * open: all test sequences through the detector. `acc_close` is argmax
///   accuracy on known-truth frames; `acc_open` counts a novel frame as
///   correct when it is flagged novel, `acc_open_mapped` requires the
///   mapped pseudo-label to match; F1 uses the flagged-unknown stream.
/// * ood: maximal novel-class runs cut from the open test set, all routed
///   to the novel branch, so `acc_open` equals `acc_ood`.
pub fn evaluate(model: &Model, split: &OpenWorldSplit, percentile: f64, seed: u64) -> Result<Evaluation> {
    let classes = ClassIndex::new(&split.known_classes);
    let detector = in_scenario("calibration", calibrate(model, split, percentile))?;
    let n_known = split.known_classes.len();
    let n_novel = split.novel_classes.len();
    let openness = metrics::openness(n_known, n_known + n_novel, n_known + n_novel).ok();
    let mut reports = vec![in_scenario("closed", closed_scenario(model, &classes, split))?];
    let (open, outcomes) = in_scenario("open", open_scenario(model, &classes, split, &detector, seed))?;
    reports.push(MetricReport { openness, ..open });
    if n_novel > 0 {
        if let Some(ood) = in_scenario("ood", ood_scenario(model, &classes, split, seed))? {
            reports.push(MetricReport { openness, ..ood });
        }
    }
    Ok(Evaluation {
        detector,
        reports,
        outcomes,
    })
}

fn calibrate(model: &Model, split: &OpenWorldSplit, percentile: f64) -> Result<NoveltyDetector> {
    if split.val.is_empty() {
        return arg("validation split is empty");
    }
    calibrate_threshold(&validation_confidences(model, &split.val)?, percentile)
}

fn closed_scenario(model: &Model, classes: &ClassIndex, split: &OpenWorldSplit) -> Result<MetricReport> {
    let mut pairs = Vec::new();
    for s in &split.test_closed {
        let (rec, _) = infer_sequence(model, s)?;
        pairs.push((rec.iter().map(|(c, _)| classes.class_of(*c)).collect(), s.labels().to_vec()));
    }
    if pairs.is_empty() {
        return arg("no known-only test sequences");
    }
    Ok(MetricReport {
        scenario: "closed".into(),
        acc_close: Some(accuracy(&pairs)?),
        f1: pooled_f1(&pairs)?,
        openness: Some(0.0),
        ..Default::default()
    })
}

fn open_scenario(
    model: &Model,
    classes: &ClassIndex,
    split: &OpenWorldSplit,
    detector: &NoveltyDetector,
    seed: u64,
) -> Result<(MetricReport, Vec<SequenceOutcome>)> {
    let novel = &split.novel_classes;
    let open_world = !novel.is_empty();
    let unknown = classes.classes().iter().chain(novel).max().map_or(0, |c| c + 1);
    let outcomes = run_pipeline(
        model,
        classes,
        Routing::Detector(detector),
        &split.test_open,
        novel.len(),
        Some(novel),
        seed,
    )?;
    let (mut id_scores, mut ood_scores) = (Vec::new(), Vec::new());
    let (mut known_pred, mut known_truth) = (Vec::new(), Vec::new());
    let (mut ood_mapped, mut ood_truth) = (Vec::new(), Vec::new());
    let (mut open_hits, mut mapped_hits, mut frames) = (0usize, 0usize, 0usize);
    let mut open_pairs = Vec::new();
    for (o, s) in outcomes.iter().zip(&split.test_open) {
        for (f, &l) in o.frames.iter().zip(s.labels()) {
            frames += 1;
            if novel.contains(&l) {
                ood_scores.push(f.confidence);
                if !f.is_known {
                    open_hits += 1;
                    ood_mapped.push(f.mapped_label.expect("flagged frames carry a mapped label"));
                    ood_truth.push(l);
                    mapped_hits += usize::from(f.mapped_label == Some(l));
                }
            } else {
                id_scores.push(f.confidence);
                known_pred.push(f.known_pred);
                known_truth.push(l);
                if f.is_known && f.known_pred == l {
                    open_hits += 1;
                    mapped_hits += 1;
                }
            }
        }
        let truth: Vec<u32> = s.labels().iter().map(|l| if novel.contains(l) { unknown } else { *l }).collect();
        open_pairs.push((open_labels(&o.frames, Some(unknown)), truth));
    }
    if frames == 0 {
        return arg("open-set test split is empty");
    }
    let auroc = if open_world && !id_scores.is_empty() {
        Some(metrics::auroc(&id_scores, &ood_scores)?)
    } else {
        None
    };
    // no correctly flagged novel frame means zero OOD accuracy
    let acc_ood = open_world.then(|| metrics::acc_ood(&ood_mapped, &ood_truth).unwrap_or(0.0));
    let acc_close = if known_truth.is_empty() {
        None
    } else {
        Some(metrics::frame_accuracy(&known_pred, &known_truth, &vec![true; known_pred.len()])?)
    };
    let report = MetricReport {
        scenario: "open".into(),
        acc_close,
        acc_open: Some(open_hits as f64 / frames as f64),
        acc_open_mapped: Some(mapped_hits as f64 / frames as f64),
        f1: pooled_f1(&open_pairs)?,
        auroc,
        acc_ood,
        h_score: auroc.zip(acc_ood).map(|(a, b)| metrics::h_score(a, b)),
        openness: None,
    };
    Ok((report, outcomes))
}

fn ood_scenario(
    model: &Model,
    classes: &ClassIndex,
    split: &OpenWorldSplit,
    seed: u64,
) -> Result<Option<MetricReport>> {
    let novel = &split.novel_classes;
    let sequences = novel_runs(&split.test_open, novel)?;
    if sequences.is_empty() {
        return Ok(None);
    }
    let outcomes = run_pipeline(model, classes, Routing::AllNovel, &sequences, novel.len(), Some(novel), seed)?;
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = outcomes
        .iter()
        .zip(&sequences)
        .map(|(o, s)| (open_labels(&o.frames, None), s.labels().to_vec()))
        .collect();
    let acc = accuracy(&pairs)?;
    Ok(Some(MetricReport {
        scenario: "ood".into(),
        acc_open: Some(acc),
        acc_open_mapped: Some(acc),
        f1: pooled_f1(&pairs)?,
        acc_ood: Some(acc),
        ..Default::default()
    }))
}

/// Maximal runs of novel-class frames cut out of `sequences`.
fn novel_runs(sequences: &[SkeletonSequence], novel: &BTreeSet<u32>) -> Result<Vec<SkeletonSequence>> {
    let mut out = Vec::new();
    for s in sequences {
        let (t_all, v) = (s.frames(), s.joints());
        let mut t = 0;
        while t < t_all {
            if !novel.contains(&s.labels()[t]) {
                t += 1;
                continue;
            }
            let start = t;
            while t < t_all && novel.contains(&s.labels()[t]) {
                t += 1;
            }
            let len = t - start;
            let mut coords = Vec::with_capacity(3 * len * v);
            for a in 0..3 {
                let row = a * t_all * v;
                coords.extend_from_slice(&s.coords()[row + start * v..row + t * v]);
            }
            out.push(SkeletonSequence::new(coords, s.labels()[start..t].to_vec(), v, s.subject_id)?);
        }
    }
    Ok(out)
}

/// Writes one tab-separated line per frame:
/// `sequence frame known_pred confidence is_known cluster_id mapped_label`,
/// with `-` for absent values.
pub fn write_outcomes(out: &mut impl Write, outcomes: &[SequenceOutcome]) -> std::io::Result<()> {
    writeln!(out, "sequence\tframe\tknown_pred\tconfidence\tis_known\tcluster_id\tmapped_label")?;
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    for (si, o) in outcomes.iter().enumerate() {
        for (ti, f) in o.frames.iter().enumerate() {
            writeln!(
                out,
                "{si}\t{ti}\t{}\t{:.6}\t{}\t{}\t{}",
                f.known_pred,
                f.confidence,
                u8::from(f.is_known),
                opt(f.cluster_id.map(|c| c.to_string())),
                opt(f.mapped_label.map(|c| c.to_string())),
            )?;
        }
    }
    Ok(())
}
