use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::kernel::{cross_entropy, grad_check_coords, log_softmax_row};

pub(crate) fn small_cfg(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_mlp: 32,
        vocab_size: 11,
        max_seq: 8,
        seed,
        final_norm: true,
    }
}

/// A model with weights large enough that every path matters.
pub(crate) fn rough_model(cfg: ModelConfig) -> Model {
    let mut model = Model::init(cfg).unwrap();
    let mut rng = Rng::new(model.cfg.seed ^ 0xfeed);
    for v in model.params.iter_values_mut() {
        *v += 0.3 * rng.normal();
    }
    model
}

fn answer_logprob(logits: &Tensor, targets: &[(usize, usize)]) -> (f64, Tensor) {
    let mut g = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for &(pos, tok) in targets {
        let lp = log_softmax_row(logits.row(pos));
        total += lp[tok];
        let row = g.row_mut(pos);
        for (j, r) in row.iter_mut().enumerate() {
            *r -= libm::exp(lp[j]);
        }
        row[tok] += 1.0;
    }
    (total, g)
}

#[test]
fn fresh_model_reconstructs_residual() {
    let model = Model::init(small_cfg(1)).unwrap();
    let cache = forward(&model, &[1, 2, 3, 4, 5]).unwrap();
    assert!(cache.logits.is_finite());
    let graph = model.graph();
    for (sink, input) in cache.sink_inputs.iter().enumerate() {
        let mut sum = Tensor::zeros(input.shape());
        for src in 0..graph.fan_in(sink) {
            sum.add_assign(&cache.source_outputs[src]);
        }
        assert!(sum.max_abs_diff(input) < 1e-8, "sink {}", graph.sinks()[sink]);
    }
}

#[test]
fn single_token_attention_is_value_projection() {
    let model = rough_model(small_cfg(2));
    let cache = forward(&model, &[7]).unwrap();
    let d = model.cfg.d_model;
    let dh = model.cfg.d_head;
    let ln_g = model.layer(0, slot::LN1_G).data();
    let ln_b = model.layer(0, slot::LN1_B).data();
    let (y, _) = crate::kernel::layer_norm_forward(cache.sink_inputs[2].data(), ln_g, ln_b, d);
    let wv = &model.layer(0, slot::WV).data()[..d * dh];
    let bv = &model.layer(0, slot::BV).data()[..dh];
    let mut v = bv.to_vec();
    crate::kernel::mm_acc(&mut v, &y, wv, 1, d, dh);
    let mut expect = vec![0.0; d];
    crate::kernel::mm_acc(&mut expect, &v, &model.layer(0, slot::WO).data()[..dh * d], 1, dh, d);
    let got = cache.source_outputs[1].data();
    for (a, b) in got.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn rejects_bad_tokens() {
    let model = Model::init(small_cfg(1)).unwrap();
    assert!(matches!(forward(&model, &[11]), Err(Error::Input(_))));
    assert!(matches!(forward(&model, &[0; 9]), Err(Error::Input(_))));
    assert!(matches!(forward(&model, &[]), Err(Error::Input(_))));
}

#[test]
fn config_validation() {
    let mut cfg = small_cfg(0);
    cfg.d_head = 5;
    assert!(matches!(Model::init(cfg), Err(Error::Config(_))));
}

#[test]
fn constant_metric_has_zero_grads() {
    let model = rough_model(small_cfg(3));
    let (_, grads, _) = node_metric_grads(&model, &[1, 2, 3], &RunSpec::default(), |l| {
        Ok((1.5, Tensor::zeros(l.shape())))
    })
    .unwrap();
    assert!(grads.sinks.iter().all(|g| g.data().iter().all(|&x| x == 0.0)));
}

/// Sink-input gradient against central differences of an additive offset.
fn sink_grad_error(model: &Model, tokens: &[usize], targets: &[(usize, usize)], sink: usize, coords: &[usize]) -> f64 {
    let (value, grads, _) =
        node_metric_grads(model, tokens, &RunSpec::default(), |l| Ok(answer_logprob(l, targets))).unwrap();
    assert!(value.is_finite());
    let shape = [tokens.len(), model.cfg.d_model];
    let f = |delta: &Tensor| -> Result<f64> {
        let deltas = [(sink, delta.clone())];
        let spec = RunSpec {
            input_embedding: None,
            intervention: Intervention::SinkDeltas(&deltas),
        };
        let cache = forward_with(model, tokens, &spec)?;
        Ok(answer_logprob(&cache.logits, targets).0)
    };
    grad_check_coords(f, &grads.sinks[sink], &Tensor::zeros(&shape), 1e-5, coords.iter().copied()).unwrap()
}

#[test]
fn sink_grads_match_finite_differences() {
    let model = rough_model(small_cfg(4));
    let tokens = [3, 1, 4, 1, 5];
    let targets = [(3, 9), (4, 2)];
    let n_sinks = model.graph().sinks().len();
    let mut rng = Rng::new(44);
    for sink in 0..n_sinks {
        let coords: Vec<usize> = (0..6).map(|_| rng.below(tokens.len() * 16)).collect();
        let err = sink_grad_error(&model, &tokens, &targets, sink, &coords);
        assert!(err < 1e-4, "sink {sink}: {err}");
    }
}

#[test]
fn single_logit_metric_grads() {
    let model = rough_model(small_cfg(5));
    let tokens = [2, 6, 1];
    let (_, grads, _) = node_metric_grads(&model, &tokens, &RunSpec::default(), |l| {
        let mut g = Tensor::zeros(l.shape());
        g.row_mut(2)[4] = 1.0;
        Ok((l.row(2)[4], g))
    })
    .unwrap();
    let sink = model.graph().sinks().len() - 1;
    let f = |delta: &Tensor| -> Result<f64> {
        let deltas = [(sink, delta.clone())];
        let spec = RunSpec {
            input_embedding: None,
            intervention: Intervention::SinkDeltas(&deltas),
        };
        Ok(forward_with(&model, &tokens, &spec)?.logits.row(2)[4])
    };
    let err = grad_check_coords(f, &grads.sinks[sink], &Tensor::zeros(&[3, 16]), 1e-5, 0..48).unwrap();
    assert!(err < 1e-4);
    assert!(grads.sinks.iter().map(|g| g.dot(g)).sum::<f64>() > 0.0);
}

#[test]
fn param_grads_match_finite_differences() {
    let model = rough_model(small_cfg(6));
    let tokens = [1usize, 2, 3, 4, 5, 6];
    let targets = [3usize, 4, 5];
    let loss_of = |m: &Model| -> Result<f64> {
        let cache = forward(m, &tokens)?;
        let rows: Vec<&[f64]> = (2..5).map(|r| cache.logits.row(r)).collect();
        Ok(cross_entropy(&Tensor::from_rows(&rows)?, &targets)?.0)
    };
    let (_, grads) = sample_param_grads(&model, &tokens, |logits| {
        let rows: Vec<&[f64]> = (2..5).map(|r| logits.row(r)).collect();
        let (l, g) = cross_entropy(&Tensor::from_rows(&rows)?, &targets)?;
        let mut full = Tensor::zeros(logits.shape());
        for (i, r) in (2..5).enumerate() {
            full.row_mut(r).copy_from_slice(g.row(i));
        }
        Ok((l, full))
    })
    .unwrap();
    let mut rng = Rng::new(66);
    for (ti, tensor) in model.params.tensors.iter().enumerate() {
        let coords: Vec<usize> = (0..3).map(|_| rng.below(tensor.len())).collect();
        let f = |x: &Tensor| -> Result<f64> {
            let mut m = model.clone();
            m.params.tensors[ti] = x.clone();
            loss_of(&m)
        };
        let err = grad_check_coords(f, &grads.tensors[ti], tensor, 1e-5, coords).unwrap();
        assert!(err < 1e-4, "tensor {}: {err}", Params::shapes(&model.cfg)[ti].0);
    }
}

#[test]
fn param_grads_batch_linearity() {
    let model = rough_model(small_cfg(7));
    let a: &[usize] = &[1, 2, 3, 4];
    let ce = |logits: &Tensor, w: f64| -> Result<(f64, Tensor)> {
        let (l, mut g) = cross_entropy(logits, &[2, 3, 4, 5])?;
        g.scale(w);
        Ok((w * l, g))
    };
    let (_, zero) = param_grads(&model, &[a, a], |_, l| ce(l, 0.0)).unwrap();
    assert!(zero.iter_values().all(|&v| v == 0.0));
    let (l1, one) = param_grads(&model, &[a], |_, l| ce(l, 1.0)).unwrap();
    let (l2, two) = param_grads(&model, &[a, a], |_, l| ce(l, 1.0)).unwrap();
    assert_eq!(l2, 2.0 * l1);
    for (x, y) in one.iter_values().zip(two.iter_values()) {
        assert_eq!(2.0 * x, *y);
    }
}

#[test]
fn causal_mask_blocks_future_tokens() {
    let model = rough_model(small_cfg(8));
    let tokens = [1, 2, 3, 4, 5];
    let base = forward(&model, &tokens).unwrap();
    let mut emb = base.source_outputs[0].clone();
    let t = 3;
    for v in emb.row_mut(t) {
        *v += 0.7;
    }
    let spec = RunSpec {
        input_embedding: Some(&emb),
        intervention: Intervention::None,
    };
    let moved = forward_with(&model, &tokens, &spec).unwrap();
    for pos in 0..t {
        assert_eq!(moved.logits.row(pos), base.logits.row(pos));
    }
    assert_ne!(moved.logits.row(t), base.logits.row(t));
}

#[test]
fn forward_is_deterministic() {
    let a = forward(&rough_model(small_cfg(9)), &[1, 2, 3]).unwrap();
    let b = forward(&rough_model(small_cfg(9)), &[1, 2, 3]).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn edge_mask_with_all_edges_kept_matches_plain_forward() {
    let model = rough_model(small_cfg(10));
    let tokens = [4, 3, 2];
    let graph = model.graph();
    let keep = vec![true; graph.edge_count()];
    let ablation: Vec<Tensor> = (0..graph.sources().len()).map(|_| Tensor::zeros(&[3, 16])).collect();
    let spec = RunSpec {
        input_embedding: None,
        intervention: Intervention::EdgeMask {
            keep: &keep,
            ablation: &ablation,
        },
    };
    let masked = forward_with(&model, &tokens, &spec).unwrap();
    let plain = forward(&model, &tokens).unwrap();
    assert!(masked.logits.max_abs_diff(&plain.logits) < 1e-10);
    assert!(backward(&model, &masked, &masked.logits, None).is_err());
}
