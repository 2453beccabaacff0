//! Batch assembly: temporal padding, label targets and Mixup.

use std::collections::BTreeSet;

use crate::error::{arg, Result};
use crate::objectives::mixup_pair;
use crate::skeleton::SkeletonSequence;
use crate::tensor::Tensor;

/// Sorted known-class ids and their logit indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassIndex {
    classes: Vec<u32>,
}

impl ClassIndex {
    pub fn new(classes: &BTreeSet<u32>) -> Self {
        Self {
            classes: classes.iter().copied().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: u32) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }

    pub fn class_of(&self, index: usize) -> u32 {
        self.classes[index]
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }
}

/// Smallest multiple of 4 that holds `frames` (at least 4).
pub fn padded_length(frames: usize) -> usize {
    frames.max(1).div_ceil(4) * 4
}

/// A padded batch. Sequences are centred in the padded window; padding
/// frames are zero and masked out.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(N, 3, T, V)`
    pub input: Tensor,
    /// `(N, K, T, 1)` soft labels; zero on masked frames
    pub targets: Tensor,
    /// `mask[n * T + t]`: frame counts towards losses
    pub mask: Vec<bool>,
    /// class index of clean, known, unmasked frames
    pub hard: Vec<Option<usize>>,
    /// `(offset, length)` of each sequence inside the padded window
    pub spans: Vec<(usize, usize)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.input.dims4().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames(&self) -> usize {
        self.input.dims4().2
    }

    /// Pads `sequences` to a common length. Frames whose label is not in
    /// `classes` are left unmasked for inference but carry no target.
    pub fn assemble(sequences: &[&SkeletonSequence], classes: &ClassIndex) -> Result<Self> {
        let Some(first) = sequences.first() else {
            return arg("empty batch");
        };
        let v = first.joints();
        if sequences.iter().any(|s| s.joints() != v) {
            return arg("sequences in a batch must share the joint count");
        }
        let n = sequences.len();
        let t = padded_length(sequences.iter().map(|s| s.frames()).max().unwrap_or(1));
        let k = classes.len();
        let mut input = Tensor::zeros(&[n, 3, t, v]);
        let mut targets = Tensor::zeros(&[n, k, t, 1]);
        let mut mask = vec![false; n * t];
        let mut hard = vec![None; n * t];
        let mut spans = Vec::with_capacity(n);
        for (ni, s) in sequences.iter().enumerate() {
            let offset = (t - s.frames()) / 2;
            s.write_padded(&mut input, ni, offset);
            for (i, &label) in s.labels().iter().enumerate() {
                let ti = offset + i;
                mask[ni * t + ti] = true;
                if let Some(ci) = classes.index_of(label) {
                    targets.data_mut()[(ni * k + ci) * t + ti] = 1.0;
                    hard[ni * t + ti] = Some(ci);
                }
            }
            spans.push((offset, s.frames()));
        }
        Ok(Self {
            input,
            targets,
            mask,
            hard,
            spans,
        })
    }

    /// Keeps only frames with a known-class target in the mask.
    pub fn mask_unlabelled(mut self) -> Self {
        for (m, h) in self.mask.iter_mut().zip(&self.hard) {
            *m &= h.is_some();
        }
        self
    }

    /// Appends one mixed sample per original sample: sample `i` is blended
    /// with sample `partner[i]` using `lambdas[i]`. Mixed frames count only
    /// where both sources are unmasked, and carry no hard label.
    pub fn with_mixup(&self, partner: &[usize], lambdas: &[f64]) -> Result<Self> {
        let (n, c, t, v) = self.input.dims4();
        let k = self.targets.dims4().1;
        if partner.len() != n || lambdas.len() != n {
            return arg("mixup needs one partner and one lambda per sample");
        }
        let m = 2 * n;
        let mut input = Tensor::zeros(&[m, c, t, v]);
        let mut targets = Tensor::zeros(&[m, k, t, 1]);
        let (xs, ys) = (c * t * v, k * t);
        input.data_mut()[..n * xs].copy_from_slice(self.input.data());
        targets.data_mut()[..n * ys].copy_from_slice(self.targets.data());
        let mut mask = self.mask.clone();
        let mut hard = self.hard.clone();
        let mut spans = self.spans.clone();
        let sample = |data: &Tensor, i: usize, size: usize, shape: &[usize]| {
            Tensor::from_vec(shape, data.data()[i * size..(i + 1) * size].to_vec())
        };
        for i in 0..n {
            let j = partner[i];
            let (xi, xj) = (sample(&self.input, i, xs, &[c, t, v]), sample(&self.input, j, xs, &[c, t, v]));
            let (yi, yj) = (sample(&self.targets, i, ys, &[k, t]), sample(&self.targets, j, ys, &[k, t]));
            let (xm, ym) = mixup_pair(&xi, &yi, &xj, &yj, lambdas[i])?;
            let row = n + i;
            input.data_mut()[row * xs..(row + 1) * xs].copy_from_slice(xm.data());
            for ti in 0..t {
                let valid = self.mask[i * t + ti] && self.mask[j * t + ti];
                mask.push(valid);
                hard.push(None);
                if valid {
                    for ki in 0..k {
                        targets.data_mut()[(row * k + ki) * t + ti] = ym.data()[ki * t + ti];
                    }
                }
            }
            spans.push(self.spans[i]);
        }
        Ok(Self {
            input,
            targets,
            mask,
            hard,
            spans,
        })
    }

    /// `(n, t)` frames per class index, over clean labelled frames.
    pub fn class_groups(&self) -> Vec<(usize, Vec<(usize, usize)>)> {
        let t = self.frames();
        let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
        for (i, h) in self.hard.iter().enumerate() {
            if let (Some(ci), true) = (h, self.mask[i]) {
                groups.entry(*ci).or_default().push((i / t, i % t));
            }
        }
        groups.into_iter().collect()
    }
}
