//! Temporal Efficient Upsampling (TEU) decoder and temporal pyramid pooling
//! head.
//!
//! Downsampling path: `G4`, `G7` are resampled to `T/4` and stacked with
//! `G10`; two 1×1 projections give `A` and `B`; `C = softmax_t(A) ⊙ B`.
//!
//! Upsampling path: `G7`, `G10` are resampled to `T` and stacked with `G4`; a
//! 1×1 projection gives `D`; `D̃ = D + P(B)` where `P` pools `B` over time and
//! replicates it; a second 1×1 projection refines `D̃`.
//!
//! Fusion: scaled dot-product cross-attention with `D̃` as queries and `C` as
//! keys/values, concatenated with `D` along channels to give `E`.

use crate::autograd::Var;
use crate::encoder::Pyramid;
use crate::error::{arg, Result};
use crate::model::{DecoderKind, Forward, Init, ModelConfig, Params};

pub const TPP_LEVELS: [usize; 3] = [1, 2, 4];

#[derive(Clone, Copy, Debug)]
pub struct DownsamplingOut {
    pub a: Var,
    pub a_soft: Var,
    pub b: Var,
    pub c: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct UpsamplingOut {
    pub d: Var,
    /// `D + P(B)` before refinement
    pub d_tilde_raw: Var,
    pub d_tilde: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `(N, K, T, 1)`
    pub logits: Var,
    /// `(N, d, T, 1)`, fed to the clustering loss
    pub embedding_f: Var,
    /// `(N, d, T, 1)`, fed to novelty clustering
    pub embedding_i: Var,
    pub e: Var,
}

fn level_channels(config: &ModelConfig) -> usize {
    config.channels.iter().sum()
}

fn fused_channels(config: &ModelConfig) -> usize {
    match config.decoder {
        DecoderKind::Teu => 2 * config.decoder_channels,
        DecoderKind::Tpp => config.decoder_channels,
    }
}

pub(crate) fn init_params(config: &ModelConfig, init: &mut Init, params: &mut Params) {
    let (cd, cin) = (config.decoder_channels, level_channels(config));
    if config.decoder == DecoderKind::Teu {
        init.conv(params, "decoder.a", cd, cin);
        init.conv(params, "decoder.b", cd, cin);
        init.conv(params, "decoder.refine", cd, cd);
    }
    init.conv(params, "decoder.d", cd, cin);
    let pooled = fused_channels(config) * (1 + TPP_LEVELS.len());
    init.conv(params, "head.f", config.embed_dim, pooled);
    init.conv(params, "head.i", config.embed_dim, config.embed_dim);
    init.conv(params, "head.cls", config.num_classes, config.embed_dim);
}

fn conv(fw: &mut Forward<'_>, x: Var, prefix: &str) -> Var {
    let (w, b) = (fw.p(&format!("{prefix}.weight")), fw.p(&format!("{prefix}.bias")));
    fw.tape.conv1x1(x, w, Some(b))
}

fn check_pyramid(fw: &Forward<'_>, p: &Pyramid) -> Result<(usize, usize)> {
    let (n4, _, t, v) = fw.value(p.g4).dims4();
    let (n7, _, t7, v7) = fw.value(p.g7).dims4();
    let (n10, _, t10, v10) = fw.value(p.g10).dims4();
    if v7 != v || v10 != v {
        return arg(format!("pyramid joint counts differ: {v}, {v7}, {v10}"));
    }
    if n7 != n4 || n10 != n4 || t7 * 2 != t || t10 * 4 != t {
        return arg(format!("pyramid temporal sizes {t}, {t7}, {t10} are not T, T/2, T/4"));
    }
    Ok((t, v))
}

pub fn downsampling_path(fw: &mut Forward<'_>, p: &Pyramid) -> Result<DownsamplingOut> {
    let (t, _) = check_pyramid(fw, p)?;
    let g4 = fw.tape.resample_time(p.g4, t / 4);
    let g7 = fw.tape.resample_time(p.g7, t / 4);
    let stacked = fw.tape.concat_channels(&[g4, g7, p.g10]);
    let a = conv(fw, stacked, "decoder.a");
    let b = conv(fw, stacked, "decoder.b");
    let a_soft = fw.tape.softmax_time(a);
    let c = fw.tape.mul(a_soft, b);
    Ok(DownsamplingOut { a, a_soft, b, c })
}

/// `b` is the downsampling path's `B`; pass `None` for the pyramid-pooling
/// baseline, which has no downsampling path.
pub fn upsampling_path(fw: &mut Forward<'_>, p: &Pyramid, b: Option<Var>) -> Result<UpsamplingOut> {
    let (t, _) = check_pyramid(fw, p)?;
    let g7 = fw.tape.resample_time(p.g7, t);
    let g10 = fw.tape.resample_time(p.g10, t);
    let stacked = fw.tape.concat_channels(&[p.g4, g7, g10]);
    let d = conv(fw, stacked, "decoder.d");
    let Some(b) = b else {
        return Ok(UpsamplingOut {
            d,
            d_tilde_raw: d,
            d_tilde: d,
        });
    };
    let pooled = fw.tape.time_mean_broadcast(b, t);
    let d_tilde_raw = fw.tape.add(d, pooled);
    let d_tilde = conv(fw, d_tilde_raw, "decoder.refine");
    Ok(UpsamplingOut { d, d_tilde_raw, d_tilde })
}

/// `E = concat(attend(D̃ → C), D)`.
pub fn fuse(fw: &mut Forward<'_>, c: Var, d_tilde: Var, d: Var) -> Result<Var> {
    let attended = fw.tape.cross_attention(d_tilde, c);
    if !fw.value(attended).is_finite() {
        return Err(crate::Error::Numeric("non-finite cross-attention output".into()));
    }
    Ok(fw.tape.concat_channels(&[attended, d]))
}

/// Pyramid pooling over `{1, 2, 4}` bins, joint averaging and the three
/// projections producing `F`, `I` and the per-frame logits.
pub fn tpp_head(fw: &mut Forward<'_>, e: Var) -> Result<DecoderOutput> {
    let (_, _, t, _) = fw.value(e).dims4();
    if t < 4 {
        return arg(format!("pyramid pooling needs T >= 4, got {t}"));
    }
    let mut parts = vec![e];
    for level in TPP_LEVELS {
        parts.push(fw.tape.bin_pool(e, level));
    }
    let pooled = fw.tape.concat_channels(&parts);
    let per_frame = fw.tape.mean_joints(pooled);
    let embedding_f = conv(fw, per_frame, "head.f");
    let h = fw.tape.relu(embedding_f);
    let embedding_i = conv(fw, h, "head.i");
    let h = fw.tape.relu(embedding_i);
    let logits = conv(fw, h, "head.cls");
    Ok(DecoderOutput {
        logits,
        embedding_f,
        embedding_i,
        e,
    })
}

pub fn decode(fw: &mut Forward<'_>, p: &Pyramid, config: &ModelConfig) -> Result<DecoderOutput> {
    let e = match config.decoder {
        DecoderKind::Teu => {
            let down = downsampling_path(fw, p)?;
            let up = upsampling_path(fw, p, Some(down.b))?;
            fuse(fw, down.c, up.d_tilde, up.d)?
        }
        DecoderKind::Tpp => upsampling_path(fw, p, None)?.d,
    };
    tpp_head(fw, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{attention_weights, Tape};
    use crate::model::Mode;
    use crate::tensor::Tensor;

    fn wavy(shape: &[usize], seed: u64) -> Tensor {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i as f64 + seed as f64) * 0.77).sin()).collect())
    }

    #[test]
    fn zero_logits_give_uniform_temporal_softmax() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 4, 3]));
        let s = tape.softmax_time(a);
        assert!(tape.value(s).data().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn one_hot_attention_masks_other_frames() {
        let mut tape = Tape::new();
        let mut a = Tensor::zeros(&[1, 1, 4, 2]);
        for v in 0..2 {
            a.data_mut()[2 * 2 + v] = 1.0;
        }
        let a = tape.constant(a);
        let b = tape.constant(wavy(&[1, 1, 4, 2], 1));
        let c = tape.mul(a, b);
        let cv = tape.value(c);
        for t in 0..4 {
            for v in 0..2 {
                let expect = if t == 2 { tape.value(b).at4(0, 0, t, v) } else { 0.0 };
                assert_eq!(cv.at4(0, 0, t, v), expect);
            }
        }
    }

    #[test]
    fn temporal_softmax_sums_to_one() {
        let mut tape = Tape::new();
        let a = tape.constant(wavy(&[2, 3, 5, 4], 7).map(|x| 4.0 * x));
        let s = tape.softmax_time(a);
        let sv = tape.value(s);
        for n in 0..2 {
            for c in 0..3 {
                for v in 0..4 {
                    let total: f64 = (0..5).map(|t| sv.at4(n, c, t, v)).sum();
                    assert!((total - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn pooling_a_constant_reproduces_it() {
        let mut tape = Tape::new();
        let b = tape.constant(Tensor::full(&[1, 2, 4, 3], 1.75));
        let p = tape.time_mean_broadcast(b, 16);
        assert!(tape.value(p).data().iter().all(|&x| x == 1.75));
    }

    #[test]
    fn pooled_mean_matches_temporal_mean() {
        let mut tape = Tape::new();
        let bt = wavy(&[1, 2, 4, 3], 3);
        let b = tape.constant(bt.clone());
        let p = tape.time_mean_broadcast(b, 16);
        let pv = tape.value(p);
        for c in 0..2 {
            for v in 0..3 {
                let over_p: f64 = (0..16).map(|t| pv.at4(0, c, t, v)).sum::<f64>() / 16.0;
                let over_b: f64 = (0..4).map(|t| bt.at4(0, c, t, v)).sum::<f64>() / 4.0;
                assert!((over_p - over_b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_keys_attend_to_constant() {
        let mut tape = Tape::new();
        let mut kv = Tensor::zeros(&[1, 3, 4, 2]);
        for c in 0..3 {
            for t in 0..4 {
                for v in 0..2 {
                    kv.data_mut()[((c * 4) + t) * 2 + v] = c as f64 - 0.5;
                }
            }
        }
        let q = tape.constant(wavy(&[1, 3, 16, 2], 2).map(|x| 3.0 * x));
        let kvv = tape.constant(kv);
        let y = tape.cross_attention(q, kvv);
        let yv = tape.value(y);
        for c in 0..3 {
            for t in 0..16 {
                for v in 0..2 {
                    assert!((yv.at4(0, c, t, v) - (c as f64 - 0.5)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_key_broadcasts() {
        let q = wavy(&[1, 2, 8, 3], 4);
        let kv = wavy(&[1, 2, 1, 3], 9);
        assert!(attention_weights(&q, &kv).data().iter().all(|&w| w == 1.0));
        let mut tape = Tape::new();
        let (qv, kvv) = (tape.constant(q), tape.constant(kv.clone()));
        let y = tape.cross_attention(qv, kvv);
        for c in 0..2 {
            for t in 0..8 {
                for v in 0..3 {
                    assert_eq!(tape.value(y).at4(0, c, t, v), kv.at4(0, c, 0, v));
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let w = attention_weights(&wavy(&[2, 4, 8, 3], 1).map(|x| 5.0 * x), &wavy(&[2, 4, 2, 3], 5));
        for row in w.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_e_gives_constant_logits() {
        let cfg = ModelConfig {
            joints: 3,
            num_classes: 4,
            channels: [2, 2, 2],
            temporal_kernel: 3,
            decoder: DecoderKind::Teu,
            decoder_channels: 3,
            embed_dim: 4,
            batch_norm: false,
        };
        let mut init = Init::new(5);
        let mut params = Params::new();
        init_params(&cfg, &mut init, &mut params);
        let buffers = Params::new();
        let mut fw = Forward::new(&params, &buffers, Mode::Eval, false);
        let mut e = Tensor::zeros(&[1, 6, 8, 3]);
        for (i, x) in e.data_mut().iter_mut().enumerate() {
            // constant in time, varying over channels and joints
            *x = ((i / 24) * 3 + i % 3) as f64 * 0.1;
        }
        let ev = fw.tape.constant(e.clone());
        let out = tpp_head(&mut fw, ev).unwrap();
        let logits = fw.value(out.logits);
        for k in 0..4 {
            for t in 1..8 {
                assert!((logits.at4(0, k, t, 0) - logits.at4(0, k, 0, 0)).abs() < 1e-12);
            }
        }
        // level-1 pooling is the global temporal mean at every frame
        let mut tape = Tape::new();
        let x = tape.constant(wavy(&[1, 2, 8, 3], 8));
        let p1 = tape.bin_pool(x, 1);
        for c in 0..2 {
            for v in 0..3 {
                let mean: f64 = (0..8).map(|t| tape.value(x).at4(0, c, t, v)).sum::<f64>() / 8.0;
                for t in 0..8 {
                    assert!((tape.value(p1).at4(0, c, t, v) - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn short_sequences_are_rejected_by_the_head() {
        let params = Params::new();
        let mut fw = Forward::new(&params, &params, Mode::Eval, false);
        let e = fw.tape.constant(Tensor::zeros(&[1, 2, 2, 3]));
        assert!(tpp_head(&mut fw, e).is_err());
    }
}
