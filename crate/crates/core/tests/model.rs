use owas::batch::Batch;
use owas::config::Architecture;
use owas::encoder::encode;
use owas::model::{Forward, Mode};
use owas::skeleton::{generate_synthetic_with, make_split, SynthOptions};
use owas::trainer::train;
use owas::{Checkpoint, ClassIndex, DecoderKind, Model, ModelConfig, OpenWorldSplit, Tensor, TrainConfig};

fn small_config(decoder: DecoderKind) -> ModelConfig {
    ModelConfig {
        joints: 5,
        num_classes: 3,
        channels: [4, 6, 8],
        temporal_kernel: 3,
        decoder,
        decoder_channels: 4,
        embed_dim: 5,
        batch_norm: true,
    }
}

fn ramp(shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|i| ((i * 37 % 23) as f64 - 11.0) * 0.07).collect())
}

fn small_split() -> OpenWorldSplit {
    let opts = SynthOptions {
        num_sequences: 30,
        min_segments: 2,
        max_segments: 3,
    };
    let seqs = generate_synthetic_with(4, 4, 6, 5, 0.3, opts).unwrap();
    make_split(&seqs, &[3].into(), (0.5, 0.25)).unwrap()
}

fn small_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        seed: 9,
        arch: Architecture {
            channels: [4, 6, 8],
            temporal_kernel: 3,
            decoder_channels: 4,
            embed_dim: 5,
            ..Architecture::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn encoder_is_joint_permutation_equivariant() {
    let model = Model::new(small_config(DecoderKind::Teu), 2).unwrap();
    let perm = [3, 0, 4, 1, 2];
    let x = ramp(&[2, 3, 8, 5]);
    let mut xp = Tensor::zeros(&[2, 3, 8, 5]);
    for n in 0..2 {
        for c in 0..3 {
            for t in 0..8 {
                for (v, &pv) in perm.iter().enumerate() {
                    xp.data_mut()[((n * 3 + c) * 8 + t) * 5 + pv] = x.at4(n, c, t, v);
                }
            }
        }
    }
    let graph = model.graph().clone();
    let permuted = graph.permuted(&perm).unwrap();
    let run = |input: &Tensor, g: &owas::SkeletonGraph| {
        let mut fw = Forward::new(&model.params, &model.buffers, Mode::Eval, true);
        let x = fw.tape.constant(input.clone());
        let p = encode(&mut fw, x, &model.config, g);
        [p.g4, p.g7, p.g10].map(|v| fw.value(v).clone())
    };
    let base = run(&x, &graph);
    let moved = run(&xp, &permuted);
    for (a, b) in base.iter().zip(&moved) {
        let (n, c, t, _) = a.dims4();
        for ni in 0..n {
            for ci in 0..c {
                for ti in 0..t {
                    for (v, &pv) in perm.iter().enumerate() {
                        assert!((a.at4(ni, ci, ti, v) - b.at4(ni, ci, ti, pv)).abs() < 1e-6);
                    }
                }
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let split = small_split();
    let outcome = train(&split, &small_train_config()).unwrap();
    let ck = &outcome.checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.classes, ck.classes);
    assert_eq!(loaded.prototypes, ck.prototypes);
    assert_eq!(loaded.config_hash, ck.config_hash);
    let refs: Vec<_> = split.val.iter().take(2).collect();
    let batch = Batch::assemble(&refs, &ClassIndex::new(&split.known_classes)).unwrap();
    let a = ck.model.infer(&batch.input).unwrap();
    let b = loaded.model.infer(&batch.input).unwrap();
    assert_eq!(a.logits.data(), b.logits.data());
    assert_eq!(a.embedding_i.data(), b.embedding_i.data());
    assert_eq!(loaded.encode().unwrap(), ck.encode().unwrap());
}

#[test]
fn training_is_deterministic_and_follows_the_schedule() {
    let split = small_split();
    let config = small_train_config();
    let a = train(&split, &config).unwrap();
    let b = train(&split, &config).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.encode().unwrap(), b.checkpoint.encode().unwrap());
    for row in &a.log {
        assert_eq!(row.lr, config.lr0 * config.lr_decay.powi(row.epoch as i32));
        assert!(row.loss.is_finite());
    }
}

#[test]
fn baseline_regime_has_no_clustering_terms() {
    let config = TrainConfig {
        mixup_enabled: false,
        tc_loss_enabled: false,
        ..small_train_config()
    };
    let out = train(&small_split(), &config).unwrap();
    for row in &out.log {
        assert_eq!((row.l_intra, row.l_inter), (0.0, 0.0));
        assert!((row.loss - row.ce).abs() < 1e-12);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let config = TrainConfig {
        lr0: 0.0,
        momentum: 0.0,
        epochs: 1,
        ..small_train_config()
    };
    let split = small_split();
    let out = train(&split, &config).unwrap();
    let fresh = Model::new(config.arch.model_config(5, split.known_classes.len()), config.seed).unwrap();
    assert_eq!(out.checkpoint.model.params, fresh.params);
}
