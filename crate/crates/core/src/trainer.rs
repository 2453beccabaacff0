//! Deterministic training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::{Batch, ClassIndex};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{arg, Error, Result};
use crate::model::{Forward, Mode, Model, Params};
use crate::objectives::{commit_prototypes, sample_lambda, total_loss, ClassPrototype};
use crate::pipeline::recognize;
use crate::skeleton::{OpenWorldSplit, SkeletonSequence};

/// Nesterov momentum SGD with L2 weight decay, in parameter-name order.
/// A parameter without a gradient entry is treated as having zero gradient.
pub fn sgd_step(
    params: &mut Params,
    grads: &Params,
    velocity: &mut Params,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, theta) in params.iter_mut() {
        let v = velocity
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("no velocity for {name}")))?;
        let g = grads.get(name);
        if let Some(g) = g {
            if g.shape() != theta.shape() {
                return arg(format!("gradient of {name} has shape {:?}", g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
        }
        for (i, (p, vel)) in theta.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let step = g.map_or(0.0, |g| g.data()[i]) + weight_decay * *p;
            *vel = momentum * *vel - lr * step;
            *p += momentum * *vel - lr * step;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub l_intra: f64,
    pub l_inter: f64,
    pub val_acc: f64,
    pub val_loss: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,loss,ce,l_intra,l_inter,val_acc,val_loss";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:?},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.lr, self.loss, self.ce, self.l_intra, self.l_inter, self.val_acc, self.val_loss
        )
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Frame accuracy and mean cross-entropy of `model` on `sequences`, one
/// sequence per forward pass.
pub fn validate(model: &Model, classes: &ClassIndex, sequences: &[SkeletonSequence]) -> Result<(f64, f64)> {
    let (mut hits, mut frames, mut loss_sum) = (0usize, 0usize, 0.0);
    for s in sequences {
        let batch = Batch::assemble(&[s], classes)?.mask_unlabelled();
        let counted = batch.mask.iter().filter(|&&m| m).count();
        if counted == 0 {
            continue;
        }
        let (mut fw, out) = model.forward(&batch.input, Mode::Eval)?;
        let ce = fw.tape.soft_cross_entropy(out.decoder.logits, &batch.targets, &batch.mask);
        loss_sum += fw.value(ce).item() * counted as f64;
        let rec = recognize(fw.value(out.decoder.logits))?;
        for (i, (c, _)) in rec.iter().enumerate() {
            if batch.mask[i] && batch.hard[i] == Some(*c) {
                hits += 1;
            }
        }
        frames += counted;
    }
    if frames == 0 {
        return arg("validation set has no labelled frames");
    }
    Ok((hits as f64 / frames as f64, loss_sum / frames as f64))
}

fn snapshot(
    model: &Model,
    classes: &ClassIndex,
    prototypes: &[ClassPrototype],
    epoch: usize,
    val: (f64, f64),
    config_hash: &str,
) -> Checkpoint {
    let prototypes = prototypes
        .iter()
        .map(|p| ClassPrototype {
            mean: p.mean.iter().map(|&x| x as f32 as f64).collect(),
            ..p.clone()
        })
        .collect();
    Checkpoint {
        model: model.clone(),
        classes: classes.clone(),
        prototypes,
        epoch,
        val_accuracy: val.0,
        val_loss: val.1,
        config_hash: config_hash.to_string(),
    }
}

/// Trains on `split.train` and returns the epoch with the best validation
/// accuracy, ties going to the lower validation loss.
pub fn train(split: &OpenWorldSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(split, config, |_| {})
}

/// [`train`] with a callback receiving each epoch's log row.
pub fn train_with(split: &OpenWorldSplit, config: &TrainConfig, mut on_epoch: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return arg("train and validation splits must be non-empty");
    }
    if let Some(l) = split
        .train
        .iter()
        .flat_map(|s| s.labels())
        .find(|l| !split.known_classes.contains(l))
    {
        return arg(format!("training label {l} is not a known class"));
    }
    let classes = ClassIndex::new(&split.known_classes);
    let joints = split.train[0].joints();
    let mut model = Model::new(config.arch.model_config(joints, classes.len()), config.seed)?;
    let dim = model.config.embed_dim;
    let mut prototypes: Vec<ClassPrototype> = classes.classes().iter().map(|&c| ClassPrototype::new(c, dim)).collect();
    let mut velocity = model.params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7261_696E));
    let config_hash = config.hash();
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..split.train.len()).collect();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut steps = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let fail = |message: String| Error::Training { epoch, step, message };
            let seqs: Vec<&SkeletonSequence> = chunk.iter().map(|&i| &split.train[i]).collect();
            let mut batch = Batch::assemble(&seqs, &classes)?.mask_unlabelled();
            if config.mixup_enabled {
                let mut partner: Vec<usize> = (0..seqs.len()).collect();
                partner.shuffle(&mut rng);
                let lambdas = (0..seqs.len())
                    .map(|_| sample_lambda(&mut rng, config.loss.mixup_alpha))
                    .collect::<Result<Vec<_>>>()?;
                batch = batch.with_mixup(&partner, &lambdas)?;
            }
            let (mut fw, out): (Forward<'_>, _) = model.forward(&batch.input, Mode::Train)?;
            let terms = total_loss(
                &mut fw,
                out.decoder.logits,
                out.decoder.embedding_f,
                &batch,
                &prototypes,
                &config.loss,
                config.tc_loss_enabled,
            )?;
            let total = fw.value(terms.total).item();
            if !total.is_finite() {
                return Err(fail(format!("loss is {total}")));
            }
            let grads = fw.param_grads(terms.total);
            let stats = std::mem::take(&mut fw.batch_stats);
            drop(fw);
            sgd_step(
                &mut model.params,
                &grads,
                &mut velocity,
                lr,
                config.momentum,
                config.weight_decay,
            )
            .map_err(|e| fail(e.to_string()))?;
            model.params.quantize_f32();
            if !model.params.is_finite() {
                return Err(fail("parameters became non-finite".into()));
            }
            model.update_running_stats(&stats);
            commit_prototypes(&mut prototypes, &terms.batch_means, config.loss.gamma);
            for (s, v) in sums.iter_mut().zip([total, terms.ce, terms.intra, terms.inter]) {
                *s += v;
            }
            steps += 1;
        }
        let (val_acc, val_loss) = validate(&model, &classes, &split.val)?;
        let n = steps as f64;
        let row = LogRow {
            epoch,
            lr,
            loss: sums[0] / n,
            ce: sums[1] / n,
            l_intra: sums[2] / n,
            l_inter: sums[3] / n,
            val_acc,
            val_loss,
        };
        log::info!("{}", row.to_csv());
        on_epoch(&row);
        log.push(row);
        let better = match &best {
            None => true,
            Some(b) => val_acc > b.val_accuracy || (val_acc == b.val_accuracy && val_loss < b.val_loss),
        };
        if better {
            best = Some(snapshot(&model, &classes, &prototypes, epoch, (val_acc, val_loss), &config_hash));
        }
    }
    Ok(TrainOutcome {
        checkpoint: best.expect("at least one epoch ran"),
        log,
    })
}
