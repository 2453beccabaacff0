//! Spatial-temporal graph convolution encoder.
//!
//! Ten blocks in three channel levels. Blocks 5 and 8 halve the temporal
//! resolution, so the taps after blocks 4, 7 and 10 give a feature pyramid at
//! strides 1, 2 and 4.

use crate::autograd::Var;
use crate::model::{Forward, Init, ModelConfig, Params};
use crate::skeleton::SkeletonGraph;
use crate::tensor::Tensor;

pub const NUM_BLOCKS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub residual: bool,
}

impl BlockSpec {
    /// Residual branch needs a strided 1×1 projection.
    pub fn projects(&self) -> bool {
        self.residual && (self.c_in != self.c_out || self.stride != 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    /// stride 1
    pub g4: Var,
    /// stride 2
    pub g7: Var,
    /// stride 4
    pub g10: Var,
}

pub fn block_prefix(index: usize) -> String {
    format!("encoder.block{index:02}")
}

/// Block plan for a 3-channel input; `index` is 1-based.
pub fn block_specs(config: &ModelConfig) -> Vec<(usize, BlockSpec)> {
    let [c1, c2, c3] = config.channels;
    (1..=NUM_BLOCKS)
        .map(|i| {
            let (c_in, c_out, stride) = match i {
                1 => (3, c1, 1),
                2..=4 => (c1, c1, 1),
                5 => (c1, c2, 2),
                6 | 7 => (c2, c2, 1),
                8 => (c2, c3, 2),
                _ => (c3, c3, 1),
            };
            (
                i,
                BlockSpec {
                    c_in,
                    c_out,
                    stride,
                    residual: true,
                },
            )
        })
        .collect()
}

pub(crate) fn init_block(
    init: &mut Init,
    params: &mut Params,
    buffers: &mut Params,
    prefix: &str,
    spec: &BlockSpec,
    kernel: usize,
    batch_norm: bool,
) {
    init.conv(params, &format!("{prefix}.gcn"), spec.c_out, spec.c_in);
    params.insert(
        format!("{prefix}.tcn.weight"),
        init.weight(&[spec.c_out, spec.c_out, kernel], spec.c_out * kernel),
    );
    params.insert(format!("{prefix}.tcn.bias"), Tensor::zeros(&[spec.c_out]));
    if batch_norm {
        Init::norm(params, buffers, &format!("{prefix}.bn1"), spec.c_out);
        Init::norm(params, buffers, &format!("{prefix}.bn2"), spec.c_out);
    }
    if spec.projects() {
        params.insert(format!("{prefix}.res.weight"), init.weight(&[spec.c_out, spec.c_in, 1], spec.c_in));
        params.insert(format!("{prefix}.res.bias"), Tensor::zeros(&[spec.c_out]));
    }
}

pub(crate) fn init_params(config: &ModelConfig, init: &mut Init, params: &mut Params, buffers: &mut Params) {
    for (i, spec) in block_specs(config) {
        init_block(init, params, buffers, &block_prefix(i), &spec, config.temporal_kernel, config.batch_norm);
    }
}

/// One ST-GCN block:
/// `relu(BN(tconv(relu(BN(W·(x A)))), stride) + residual(x))`.
///
/// Temporal kernel size is read from the `tcn.weight` shape.
pub fn stgcn_block(fw: &mut Forward<'_>, x: Var, prefix: &str, spec: &BlockSpec, graph: &SkeletonGraph) -> Var {
    let mixed = fw.tape.joint_mix(x, graph.adjacency());
    let (w, b) = (fw.p(&format!("{prefix}.gcn.weight")), fw.p(&format!("{prefix}.gcn.bias")));
    let h = fw.tape.conv1x1(mixed, w, Some(b));
    let h = fw.norm(h, &format!("{prefix}.bn1"));
    let h = fw.tape.relu(h);
    let (w, b) = (fw.p(&format!("{prefix}.tcn.weight")), fw.p(&format!("{prefix}.tcn.bias")));
    let h = fw.tape.temporal_conv(h, w, Some(b), spec.stride);
    let h = fw.norm(h, &format!("{prefix}.bn2"));
    let h = if !spec.residual {
        h
    } else if spec.projects() {
        let (w, b) = (fw.p(&format!("{prefix}.res.weight")), fw.p(&format!("{prefix}.res.bias")));
        let r = fw.tape.temporal_conv(x, w, Some(b), spec.stride);
        fw.tape.add(h, r)
    } else {
        fw.tape.add(h, x)
    };
    fw.tape.relu(h)
}

/// Runs all ten blocks and returns the three tapped feature maps.
pub fn encode(fw: &mut Forward<'_>, x: Var, config: &ModelConfig, graph: &SkeletonGraph) -> Pyramid {
    let mut h = x;
    let mut taps = [x; 3];
    for (i, spec) in block_specs(config) {
        h = stgcn_block(fw, h, &block_prefix(i), &spec, graph);
        match i {
            4 => taps[0] = h,
            7 => taps[1] = h,
            10 => taps[2] = h,
            _ => {}
        }
    }
    Pyramid {
        g4: taps[0],
        g7: taps[1],
        g10: taps[2],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderKind, Mode, Model};

    fn config() -> ModelConfig {
        ModelConfig {
            joints: 8,
            num_classes: 3,
            channels: [16, 32, 64],
            temporal_kernel: 5,
            decoder: DecoderKind::Teu,
            decoder_channels: 8,
            embed_dim: 8,
            batch_norm: true,
        }
    }

    #[test]
    fn block_shape_propagation() {
        let model = Model::new(config(), 1).unwrap();
        let mut fw = Forward::new(&model.params, &model.buffers, Mode::Train, true);
        let x = fw.tape.constant(Tensor::full(&[2, 3, 16, 8], 0.1));
        let spec = block_specs(&model.config)[0].1;
        let y = stgcn_block(&mut fw, x, &block_prefix(1), &spec, model.graph());
        assert_eq!(fw.value(y).shape(), &[2, 16, 16, 8]);
    }

    #[test]
    fn pyramid_strides() {
        let model = Model::new(config(), 1).unwrap();
        let (fw, out) = model.forward(&Tensor::full(&[1, 3, 16, 8], 0.1), Mode::Train).unwrap();
        assert_eq!(fw.value(out.pyramid.g4).shape(), &[1, 16, 16, 8]);
        assert_eq!(fw.value(out.pyramid.g7).shape(), &[1, 32, 8, 8]);
        assert_eq!(fw.value(out.pyramid.g10).shape(), &[1, 64, 4, 8]);
    }

    #[test]
    fn zero_sequence_gives_finite_outputs() {
        let model = Model::new(config(), 1).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let (fw, out) = model.forward(&Tensor::zeros(&[1, 3, 8, 8]), mode).unwrap();
            for v in [out.pyramid.g4, out.pyramid.g7, out.pyramid.g10] {
                assert!(fw.value(v).is_finite());
            }
        }
    }

    #[test]
    fn identity_configuration_is_channel_projection() {
        let (c_in, c_out, v, t) = (3, 4, 5, 6);
        let spec = BlockSpec {
            c_in,
            c_out,
            stride: 1,
            residual: false,
        };
        let mut params = Params::new();
        let w: Vec<f64> = (0..c_out * c_in).map(|i| 0.1 * (i % 5) as f64).collect();
        params.insert("b.gcn.weight", Tensor::from_vec(&[c_out, c_in], w.clone()));
        params.insert("b.gcn.bias", Tensor::zeros(&[c_out]));
        let mut eye = Tensor::zeros(&[c_out, c_out, 1]);
        for i in 0..c_out {
            eye.data_mut()[i * c_out + i] = 1.0;
        }
        params.insert("b.tcn.weight", eye);
        params.insert("b.tcn.bias", Tensor::zeros(&[c_out]));
        let buffers = Params::new();
        let mut fw = Forward::new(&params, &buffers, Mode::Train, false);
        let input = Tensor::from_vec(&[1, c_in, t, v], (0..c_in * t * v).map(|i| (i % 7) as f64 * 0.3).collect());
        let x = fw.tape.constant(input.clone());
        let graph = SkeletonGraph::identity(v).unwrap();
        let y = stgcn_block(&mut fw, x, "b", &spec, &graph);
        let out = fw.value(y);
        for o in 0..c_out {
            for ti in 0..t {
                for j in 0..v {
                    let expect: f64 = (0..c_in).map(|c| w[o * c_in + c] * input.at4(0, c, ti, j)).sum();
                    assert!((out.at4(0, o, ti, j) - expect).abs() < 1e-12);
                }
            }
        }
    }
}
