//! Central finite-difference checks of the model's parameter gradients.

use crate::autograd::Var;
use crate::batch::{Batch, ClassIndex};
use crate::error::Result;
use crate::model::{DecoderKind, Forward, Mode, Model, ModelConfig, ModelOutput, Params};
use crate::objectives::{total_loss, ClassPrototype, LossConfig};
use crate::skeleton::{generate_synthetic_with, SynthOptions};
use crate::tensor::Tensor;

/// Step used for the central differences.
pub const EPS: f64 = 1e-5;
/// Denominator floor of the relative error, so near-zero gradients are
/// compared on an absolute scale.
pub const FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares the tape gradient of `loss` against central differences for
/// every element of every parameter of `model`.
pub fn check_model<F>(model: &Model, input: &Tensor, mode: Mode, loss: F) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Forward<'_>, &ModelOutput) -> Result<Var>,
{
    let eval = |params: &Params| -> Result<f64> {
        let (mut fw, out) = model.forward_with(params, input, mode)?;
        let l = loss(&mut fw, &out)?;
        Ok(fw.value(l).item())
    };
    let (mut fw, out) = model.forward_with(&model.params, input, mode)?;
    let l = loss(&mut fw, &out)?;
    let grads = fw.param_grads(l);
    drop(fw);
    let mut params = model.params.clone();
    let mut report = Vec::with_capacity(params.len());
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(params.get(&name).unwrap().shape()));
        let mut worst: f64 = 0.0;
        for i in 0..analytic.len() {
            let original = params.get(&name).unwrap().data()[i];
            params.get_mut(&name).unwrap().data_mut()[i] = original + EPS;
            let up = eval(&params)?;
            params.get_mut(&name).unwrap().data_mut()[i] = original - EPS;
            let down = eval(&params)?;
            params.get_mut(&name).unwrap().data_mut()[i] = original;
            worst = worst.max(relative_error(analytic.data()[i], (up - down) / (2.0 * EPS)));
        }
        report.push(ParamCheck {
            name,
            checked: analytic.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// Gradient check of the full training objective (cross-entropy plus both
/// clustering terms with live prototypes) on a two-sequence batch of eight
/// frames over four joints.
pub fn desk_suite(decoder: DecoderKind, seed: u64) -> Result<Vec<ParamCheck>> {
    let config = ModelConfig {
        joints: 4,
        num_classes: 3,
        channels: [4, 6, 8],
        temporal_kernel: 3,
        decoder,
        decoder_channels: 4,
        embed_dim: 5,
        batch_norm: true,
    };
    let model = Model::new(config, seed)?;
    let opts = SynthOptions {
        num_sequences: 2,
        min_segments: 2,
        max_segments: 2,
    };
    let seqs = generate_synthetic_with(seed, 3, 4, 4, 0.3, opts)?;
    let classes = ClassIndex::new(&[0, 1, 2].into());
    let refs: Vec<_> = seqs.iter().collect();
    let batch = Batch::assemble(&refs, &classes)?;
    let prototypes: Vec<ClassPrototype> = (0..3)
        .map(|c| ClassPrototype {
            class_id: c,
            mean: (0..5).map(|j| 0.1 * ((c as usize * 5 + j) % 7) as f64).collect(),
            initialized: c != 2,
        })
        .collect();
    let loss_config = LossConfig {
        beta: 0.5,
        ..LossConfig::default()
    };
    check_model(&model, &batch.input, Mode::Train, |fw, out| {
        Ok(total_loss(
            fw,
            out.decoder.logits,
            out.decoder.embedding_f,
            &batch,
            &prototypes,
            &loss_config,
            true,
        )?
        .total)
    })
}
