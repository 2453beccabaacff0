//! Skeleton sequences, joint topology, synthetic data and the OWAS1 file format.
//!
//! A sequence stores coordinates as `(3, T, V)` row-major `f32` values with a
//! dense per-frame label track. Segments are never stored; they are derived
//! from runs of equal labels.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "OWAS1";

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    coords: Vec<f32>,
    labels: Vec<u32>,
    frames: usize,
    joints: usize,
    pub subject_id: u32,
}

impl SkeletonSequence {
    pub fn new(coords: Vec<f32>, labels: Vec<u32>, joints: usize, subject_id: u32) -> Result<Self> {
        let frames = labels.len();
        if frames == 0 || joints == 0 {
            return arg("sequence needs T >= 1 and V >= 1");
        }
        if coords.len() != 3 * frames * joints {
            return arg(format!(
                "coordinate block has {} values, expected 3*{frames}*{joints}",
                coords.len()
            ));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return arg("coordinates contain non-finite values");
        }
        Ok(Self {
            coords,
            labels,
            frames,
            joints,
            subject_id,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Raw `(3, T, V)` coordinate block.
    pub fn coords(&self) -> &[f32] {
        &self.coords
    }

    pub fn coord(&self, axis: usize, t: usize, v: usize) -> f32 {
        self.coords[(axis * self.frames + t) * self.joints + v]
    }

    pub fn label_set(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().collect()
    }

    /// Copies the sequence into a `(1, 3, T_pad, V)` tensor, placing frame 0 at
    /// `offset`. Frames outside the sequence stay zero.
    pub fn write_padded(&self, out: &mut Tensor, batch_index: usize, offset: usize) {
        let (_, c, t_pad, v) = out.dims4();
        assert!(c == 3 && v == self.joints && offset + self.frames <= t_pad);
        let data = out.data_mut();
        for a in 0..3 {
            for t in 0..self.frames {
                let dst = ((batch_index * 3 + a) * t_pad + offset + t) * v;
                let src = (a * self.frames + t) * v;
                for j in 0..v {
                    data[dst + j] = self.coords[src + j] as f64;
                }
            }
        }
    }
}

/// Undirected joint graph with its normalised adjacency
/// `D^{-1/2} (A + I) D^{-1/2}`.
#[derive(Clone, Debug)]
pub struct SkeletonGraph {
    num_joints: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Tensor,
}

impl SkeletonGraph {
    pub fn new(num_joints: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if num_joints == 0 {
            return arg("graph needs at least one joint");
        }
        let mut a = vec![0.0; num_joints * num_joints];
        for i in 0..num_joints {
            a[i * num_joints + i] = 1.0;
        }
        for &(i, j) in &edges {
            if i >= num_joints || j >= num_joints {
                return arg(format!("edge ({i}, {j}) outside {num_joints} joints"));
            }
            a[i * num_joints + j] = 1.0;
            a[j * num_joints + i] = 1.0;
        }
        let deg: Vec<f64> = (0..num_joints)
            .map(|i| a[i * num_joints..(i + 1) * num_joints].iter().sum())
            .collect();
        for i in 0..num_joints {
            for j in 0..num_joints {
                a[i * num_joints + j] /= (deg[i] * deg[j]).sqrt();
            }
        }
        Ok(Self {
            num_joints,
            edges,
            adjacency: Tensor::from_vec(&[num_joints, num_joints], a),
        })
    }

    /// Chain over the first `ceil(V/2)` joints; every remaining joint `j`
    /// hangs off chain joint `j - ceil(V/2)`.
    ///
    /// V=8: chain 0-1-2-3, branches 4-0, 5-1, 6-2, 7-3.
    pub fn chain_with_branches(num_joints: usize) -> Result<Self> {
        let spine = num_joints.div_ceil(2);
        let mut edges: Vec<(usize, usize)> = (1..spine).map(|j| (j - 1, j)).collect();
        edges.extend((spine..num_joints).map(|j| (j - spine, j)));
        Self::new(num_joints, edges)
    }

    /// Identity adjacency (self-loops only, no normalisation effect).
    pub fn identity(num_joints: usize) -> Result<Self> {
        Self::new(num_joints, Vec::new())
    }

    /// Same topology with joint `j` renamed to `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let edges = self.edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        Self::new(self.num_joints, edges)
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }
}

// -------------------------------------------------------------------------
// synthetic generator
// -------------------------------------------------------------------------

/// Parameters of a class's motion archetype. Depends only on the class id,
/// so every dataset shares the same archetypes.
#[derive(Clone, Debug)]
pub struct Archetype {
    /// per (axis, joint) resting offset from the neutral pose
    pub offset: Vec<f64>,
    /// per (axis, joint) oscillation amplitude
    pub amplitude: Vec<f64>,
    /// per (axis, joint) phase
    pub phase: Vec<f64>,
    /// whole cycles per segment
    pub cycles: f64,
}

impl Archetype {
    pub fn for_class(class: u32, joints: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0000 + class as u64);
        let n = 3 * joints;
        let offset = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let amplitude = (0..n).map(|_| rng.random_range(0.2..0.6)).collect();
        let phase = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let cycles = 1.0 + (class % 4) as f64;
        Self {
            offset,
            amplitude,
            phase,
            cycles,
        }
    }

    /// Noise-free position of `(axis, joint)` at `tau` frames into a segment
    /// of `len` frames.
    pub fn position(&self, axis: usize, joint: usize, joints: usize, tau: usize, len: usize) -> f64 {
        let i = axis * joints + joint;
        let rest = neutral_pose(axis, joint);
        let angle = std::f64::consts::TAU * self.cycles * tau as f64 / len as f64 + self.phase[i];
        rest + self.offset[i] + self.amplitude[i] * angle.sin()
    }
}

fn neutral_pose(axis: usize, joint: usize) -> f64 {
    match axis {
        0 => 0.1 * joint as f64,
        1 => 1.0 - 0.05 * joint as f64,
        _ => 0.0,
    }
}

/// Options for [`generate_synthetic`] beyond the required arguments.
#[derive(Clone, Copy, Debug)]
pub struct SynthOptions {
    pub num_sequences: usize,
    pub min_segments: usize,
    pub max_segments: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            num_sequences: 32,
            min_segments: 2,
            max_segments: 4,
        }
    }
}

/// Generates sequences of 2–4 concatenated segments; adjacent segments always
/// differ in class. Pure function of its arguments.
pub fn generate_synthetic(
    seed: u64,
    num_classes: usize,
    frames_per_segment: usize,
    joints: usize,
    noise_std: f64,
) -> Result<Vec<SkeletonSequence>> {
    generate_synthetic_with(seed, num_classes, frames_per_segment, joints, noise_std, SynthOptions::default())
}

pub fn generate_synthetic_with(
    seed: u64,
    num_classes: usize,
    frames_per_segment: usize,
    joints: usize,
    noise_std: f64,
    opts: SynthOptions,
) -> Result<Vec<SkeletonSequence>> {
    if num_classes < 2 {
        return arg("num_classes must be >= 2");
    }
    if frames_per_segment < 4 {
        return arg("frames_per_segment must be >= 4");
    }
    if joints == 0 {
        return arg("joints must be >= 1");
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return arg("noise_std must be finite and >= 0");
    }
    if opts.min_segments == 0 || opts.min_segments > opts.max_segments {
        return arg("invalid segment count range");
    }
    let archetypes: Vec<Archetype> = (0..num_classes as u32).map(|c| Archetype::for_class(c, joints)).collect();
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Argument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(opts.num_sequences);
    for _ in 0..opts.num_sequences {
        let segments = rng.random_range(opts.min_segments..=opts.max_segments);
        let mut classes = Vec::with_capacity(segments);
        for _ in 0..segments {
            let c = loop {
                let c = rng.random_range(0..num_classes as u32);
                if classes.last() != Some(&c) {
                    break c;
                }
            };
            classes.push(c);
        }
        let frames = segments * frames_per_segment;
        let labels: Vec<u32> = classes
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, frames_per_segment))
            .collect();
        let mut coords = vec![0f32; 3 * frames * joints];
        for a in 0..3 {
            for t in 0..frames {
                let arch = &archetypes[labels[t] as usize];
                let tau = t % frames_per_segment;
                for v in 0..joints {
                    let mut x = arch.position(a, v, joints, tau, frames_per_segment);
                    if noise_std > 0.0 {
                        x += noise.sample(&mut rng);
                    }
                    coords[(a * frames + t) * joints + v] = x as f32;
                }
            }
        }
        let subject = rng.random_range(1..=6);
        out.push(SkeletonSequence::new(coords, labels, joints, subject)?);
    }
    Ok(out)
}

// -------------------------------------------------------------------------
// open-world split
// -------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct OpenWorldSplit {
    pub known_classes: BTreeSet<u32>,
    pub novel_classes: BTreeSet<u32>,
    pub train: Vec<SkeletonSequence>,
    pub val: Vec<SkeletonSequence>,
    /// remaining sequences whose frames are all known
    pub test_closed: Vec<SkeletonSequence>,
    /// every sequence not used for train/val
    pub test_open: Vec<SkeletonSequence>,
    /// remaining sequences whose frames are all novel
    pub test_ood_only: Vec<SkeletonSequence>,
}

/// Splits `sequences` in order. Only sequences free of novel frames are
/// eligible for train/val; the first `train` fraction of them trains, the
/// next `val` fraction validates, and everything else is test data.
pub fn make_split(
    sequences: &[SkeletonSequence],
    novel_classes: &BTreeSet<u32>,
    ratios: (f64, f64),
) -> Result<OpenWorldSplit> {
    let (rt, rv) = ratios;
    if !(rt > 0.0 && rv > 0.0 && rt + rv < 1.0) {
        return arg(format!("ratios ({rt}, {rv}) must be positive with sum < 1"));
    }
    let observed: BTreeSet<u32> = sequences.iter().flat_map(|s| s.labels().iter().copied()).collect();
    if let Some(missing) = novel_classes.iter().find(|c| !observed.contains(c)) {
        return arg(format!("novel class {missing} never observed in the data"));
    }
    let known_classes: BTreeSet<u32> = observed.difference(novel_classes).copied().collect();
    let is_novel = |l: &u32| novel_classes.contains(l);

    let eligible: Vec<usize> = (0..sequences.len())
        .filter(|&i| !sequences[i].labels().iter().any(is_novel))
        .collect();
    let n_train = (eligible.len() as f64 * rt).round() as usize;
    let n_val = (eligible.len() as f64 * rv).round() as usize;
    let mut used = vec![false; sequences.len()];
    let mut pick = |range: std::ops::Range<usize>| -> Vec<SkeletonSequence> {
        eligible[range]
            .iter()
            .map(|&i| {
                used[i] = true;
                sequences[i].clone()
            })
            .collect()
    };
    let train = pick(0..n_train);
    let val = pick(n_train..n_train + n_val);

    let rest: Vec<&SkeletonSequence> = sequences.iter().zip(&used).filter(|(_, &u)| !u).map(|(s, _)| s).collect();
    let test_closed = rest
        .iter()
        .filter(|s| !s.labels().iter().any(is_novel))
        .map(|s| (*s).clone())
        .collect();
    let test_ood_only = rest
        .iter()
        .filter(|s| !novel_classes.is_empty() && s.labels().iter().all(is_novel))
        .map(|s| (*s).clone())
        .collect();
    let test_open = rest.into_iter().cloned().collect();
    Ok(OpenWorldSplit {
        known_classes,
        novel_classes: novel_classes.clone(),
        train,
        val,
        test_closed,
        test_open,
        test_ood_only,
    })
}

// -------------------------------------------------------------------------
// OWAS1 dataset format
// -------------------------------------------------------------------------
//
//   OWAS1\n
//   count:<n>\n
//   joints:<V>\n
//   sequence:<T>:<subject>\n      (n lines)
//   \n
//   per sequence: 3*T*V f32 LE coordinates in (3, T, V) order,
//                 then T i32 LE labels

pub fn encode_dataset(sequences: &[SkeletonSequence]) -> Result<Vec<u8>> {
    let joints = sequences.first().map_or(0, |s| s.joints());
    if sequences.iter().any(|s| s.joints() != joints) {
        return arg("all sequences in a dataset must share the joint count");
    }
    let mut out = Vec::new();
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "count:{}", sequences.len())?;
    writeln!(out, "joints:{joints}")?;
    for s in sequences {
        writeln!(out, "sequence:{}:{}", s.frames(), s.subject_id)?;
    }
    writeln!(out)?;
    for s in sequences {
        for c in s.coords() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for &l in s.labels() {
            let l = i32::try_from(l).map_err(|_| Error::Argument(format!("label {l} exceeds i32")))?;
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, sequences: &[SkeletonSequence]) -> Result<()> {
    let bytes = encode_dataset(sequences)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<SkeletonSequence>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}

/// Line-oriented reader over the text header of an OWAS1 file.
pub(crate) struct HeaderReader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> HeaderReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn fail<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset,
            message: message.into(),
        })
    }

    /// Next line without its newline, plus the offset where it starts.
    pub fn line(&mut self) -> Result<(usize, &'a str)> {
        let start = self.pos;
        let Some(len) = self.bytes[start..].iter().position(|&b| b == b'\n') else {
            return self.fail(start, "truncated header (missing newline)");
        };
        self.pos = start + len + 1;
        match std::str::from_utf8(&self.bytes[start..start + len]) {
            Ok(s) => Ok((start, s)),
            Err(_) => self.fail(start, "header line is not UTF-8"),
        }
    }

    pub fn expect_magic(&mut self) -> Result<()> {
        let (off, line) = self.line().or_else(|_| self.fail(0, "missing magic"))?;
        if line != MAGIC {
            return self.fail(off, format!("bad magic {line:?}, expected {MAGIC:?}"));
        }
        Ok(())
    }

    pub fn key_value(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (off, line) = self.line()?;
        match line.split_once(':') {
            Some((k, v)) if k == key => Ok((off, v)),
            _ => self.fail(off, format!("expected `{key}:` line, found {line:?}")),
        }
    }

    pub fn parse<T: std::str::FromStr>(&self, off: usize, text: &str, what: &str) -> Result<T> {
        text.trim()
            .parse()
            .or_else(|_| self.fail(off, format!("invalid {what}: {text:?}")))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SkeletonSequence>> {
    let mut r = HeaderReader::new(bytes);
    r.expect_magic()?;
    let (off, v) = r.key_value("count")?;
    let count: usize = r.parse(off, v, "count")?;
    let (off, v) = r.key_value("joints")?;
    let joints: usize = r.parse(off, v, "joint count")?;
    let mut shapes = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let (off, v) = r.key_value("sequence")?;
        let Some((t, subject)) = v.split_once(':') else {
            return r.fail(off, "sequence line must be `sequence:<T>:<subject>`");
        };
        shapes.push((r.parse::<usize>(off, t, "frame count")?, r.parse::<u32>(off, subject, "subject")?));
    }
    let (off, blank) = r.line()?;
    if !blank.is_empty() {
        return r.fail(off, "expected blank line after header");
    }
    let mut pos = r.pos;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if bytes.len() < *pos + n {
            return Err(Error::Format {
                offset: bytes.len(),
                message: format!("truncated data: needed {n} bytes at offset {pos}"),
            });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for &(t, subject) in &shapes {
        let block_start = pos;
        let coords: Vec<f32> = take(&mut pos, 4 * 3 * t * joints)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let labels_raw = take(&mut pos, 4 * t)?;
        let mut labels = Vec::with_capacity(t);
        for b in labels_raw.chunks_exact(4) {
            let l = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if l < 0 {
                return Err(Error::Format {
                    offset: block_start,
                    message: format!("negative label {l}"),
                });
            }
            labels.push(l as u32);
        }
        let seq = SkeletonSequence::new(coords, labels, joints, subject).map_err(|e| Error::Format {
            offset: block_start,
            message: e.to_string(),
        })?;
        out.push(seq);
    }
    if pos != bytes.len() {
        return Err(Error::Format {
            offset: pos,
            message: format!("{} trailing bytes", bytes.len() - pos),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_is_symmetric_with_positive_rows() {
        let g = SkeletonGraph::chain_with_branches(8).unwrap();
        let a = g.adjacency();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(a.data()[i * 8 + j], a.data()[j * 8 + i]);
            }
            let row: f64 = a.data()[i * 8..(i + 1) * 8].iter().sum();
            assert!(row.is_finite() && row > 0.0);
            assert!(a.data()[i * 8 + i] > 0.0);
        }
        assert_eq!(g.edges().len(), 7);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(1, 4, 16, 8, 0.0).unwrap();
        let b = generate_synthetic(1, 4, 16, 8, 0.0).unwrap();
        assert_eq!(encode_dataset(&a).unwrap(), encode_dataset(&b).unwrap());
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_synthetic(1, 4, 16, 8, 0.05).unwrap();
        let b = generate_synthetic(2, 4, 16, 8, 0.05).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_noise_segments_of_same_class_match() {
        let seqs = generate_synthetic(3, 4, 8, 5, 0.0).unwrap();
        let mut first: Option<Vec<f32>> = None;
        for s in &seqs {
            for seg in 0..s.frames() / 8 {
                if s.labels()[seg * 8] != 0 {
                    continue;
                }
                let frames: Vec<f32> = (0..3)
                    .flat_map(|a| (0..8).flat_map(move |tau| (0..5).map(move |v| (a, seg * 8 + tau, v))))
                    .map(|(a, t, v)| s.coord(a, t, v))
                    .collect();
                match &first {
                    None => first = Some(frames),
                    Some(f) => assert_eq!(f, &frames),
                }
            }
        }
        assert!(first.is_some(), "class 0 never generated");
    }

    #[test]
    fn generator_rejects_bad_sizes() {
        assert!(generate_synthetic(1, 1, 16, 8, 0.0).is_err());
        assert!(generate_synthetic(1, 4, 3, 8, 0.0).is_err());
        assert!(generate_synthetic(1, 4, 16, 8, -1.0).is_err());
    }

    #[test]
    fn labels_align_with_segments() {
        for s in generate_synthetic(9, 5, 6, 4, 0.1).unwrap() {
            assert_eq!(s.frames() % 6, 0);
            for seg in s.labels().chunks(6) {
                assert!(seg.iter().all(|&l| l == seg[0]));
            }
            for w in s.labels().chunks(6).collect::<Vec<_>>().windows(2) {
                assert_ne!(w[0][0], w[1][0]);
            }
        }
    }

    #[test]
    fn split_keeps_novel_out_of_training() {
        let seqs = generate_synthetic_with(
            5,
            10,
            4,
            3,
            0.0,
            SynthOptions {
                num_sequences: 200,
                ..Default::default()
            },
        )
        .unwrap();
        let novel: BTreeSet<u32> = [8, 9].into();
        let split = make_split(&seqs, &novel, (0.6, 0.2)).unwrap();
        for s in split.train.iter().chain(&split.val) {
            assert!(s.labels().iter().all(|l| *l < 8));
        }
        for s in &split.test_ood_only {
            assert!(s.labels().iter().all(|l| novel.contains(l)));
        }
        let eligible = seqs.iter().filter(|s| s.labels().iter().all(|l| *l < 8)).count();
        assert!((split.train.len() as f64 - 0.6 * eligible as f64).abs() <= 1.0);
        assert!((split.val.len() as f64 - 0.2 * eligible as f64).abs() <= 1.0);
        assert_eq!(split.train.len() + split.val.len() + split.test_open.len(), seqs.len());
        assert!(split.known_classes.is_disjoint(&split.novel_classes));
    }

    #[test]
    fn empty_novel_set_gives_closed_world() {
        let seqs = generate_synthetic(5, 4, 4, 3, 0.0).unwrap();
        let split = make_split(&seqs, &BTreeSet::new(), (0.5, 0.25)).unwrap();
        assert!(split.test_ood_only.is_empty());
        assert_eq!(split.test_open, split.test_closed);
    }

    #[test]
    fn unobserved_novel_class_is_rejected() {
        let seqs = generate_synthetic(5, 4, 4, 3, 0.0).unwrap();
        let err = make_split(&seqs, &[17].into(), (0.5, 0.25)).unwrap_err();
        assert!(err.to_string().contains("17"));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let bytes = encode_dataset(&[]).unwrap();
        assert!(bytes.starts_with(b"OWAS1\ncount:0\n"));
        assert!(decode_dataset(&bytes).unwrap().is_empty());
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let mut bytes = encode_dataset(&generate_synthetic(1, 3, 4, 2, 0.0).unwrap()).unwrap();
        bytes[4] = b'9';
        match decode_dataset(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_data_reports_offset() {
        let bytes = encode_dataset(&generate_synthetic(1, 3, 4, 2, 0.0).unwrap()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match decode_dataset(cut) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, cut.len());
                assert!(message.contains("truncated"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
