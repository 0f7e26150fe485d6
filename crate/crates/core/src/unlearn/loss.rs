//! Per-sample objectives on answer tokens. Each returns the loss value and
//! its gradient with respect to the sample's logits.

use alloc::vec::Vec;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::kernel::{log_softmax_row, Tensor};

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -libm::log1p(libm::exp(-x))
    } else {
        x - libm::log1p(libm::exp(x))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Summed answer log-probability `log p(y|x)` and its logit gradient.
pub fn answer_logprob(logits: &Tensor, sample: &Sample) -> (f64, Tensor) {
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for (pos, tok) in sample.answer_targets() {
        let lp = log_softmax_row(logits.row(pos));
        total += lp[tok];
        let row = grad.row_mut(pos);
        for (g, l) in row.iter_mut().zip(&lp) {
            *g = -libm::exp(*l);
        }
        row[tok] += 1.0;
    }
    (total, grad)
}

/// Mean per-token cross-entropy over the answer.
pub fn answer_ce(logits: &Tensor, sample: &Sample) -> (f64, Tensor) {
    let n = sample.answer_tokens.len() as f64;
    let (lp, mut g) = answer_logprob(logits, sample);
    g.scale(-1.0 / n);
    (-lp / n, g)
}

/// Negative preference optimization:
/// `−(2/β)·log σ(−β·(log p_θ(y|x) − log p_ref(y|x)))`.
pub fn npo(logits: &Tensor, ref_logprob: f64, sample: &Sample, beta: f64) -> (f64, Tensor) {
    let (lp, mut g) = answer_logprob(logits, sample);
    let u = -beta * (lp - ref_logprob);
    let loss = -(2.0 / beta) * log_sigmoid(u);
    g.scale(2.0 * sigmoid(-u));
    (loss, g)
}

/// Reference-free, length-normalized NPO with margin:
/// `−(2/β)·log σ(β·CE(y|x) − γ)`, where CE is the mean per-token loss.
pub fn simnpo(logits: &Tensor, sample: &Sample, beta: f64, gamma: f64) -> (f64, Tensor) {
    let (ce, mut g) = answer_ce(logits, sample);
    let z = beta * ce - gamma;
    let loss = -(2.0 / beta) * log_sigmoid(z);
    g.scale(-2.0 * sigmoid(-z));
    (loss, g)
}

/// Self-distillation toward the reference distribution with the target
/// token's logit lowered by `beta`: mean over answer positions of
/// `H(q, p_θ)` with `q = softmax(ref_logits − β·onehot(y))`.
pub fn undial(logits: &Tensor, ref_logits: &Tensor, sample: &Sample, beta: f64) -> Result<(f64, Tensor)> {
    if logits.shape() != ref_logits.shape() {
        return Err(Error::Dimension {
            op: "undial",
            lhs: logits.shape().to_vec(),
            rhs: ref_logits.shape().to_vec(),
        });
    }
    let targets = sample.answer_targets();
    let n = targets.len() as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (pos, tok) in targets {
        let mut shifted: Vec<f64> = ref_logits.row(pos).to_vec();
        shifted[tok] -= beta;
        let q: Vec<f64> = log_softmax_row(&shifted).into_iter().map(libm::exp).collect();
        let lp = log_softmax_row(logits.row(pos));
        loss -= q.iter().zip(&lp).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((g, qv), l) in grad.row_mut(pos).iter_mut().zip(&q).zip(&lp) {
            *g = (libm::exp(*l) - qv) / n;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::kernel::grad_check;
    use crate::rng::Rng;
    use alloc::vec;

    type LossFn<'a> = &'a dyn Fn(&Tensor) -> (f64, Tensor);

    fn sample() -> Sample {
        Sample {
            id: 0,
            prompt_tokens: vec![1, 2, 3],
            answer_tokens: vec![4, 5],
            entity: "x".into(),
            split: Split::Forget,
        }
    }

    fn logits(seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::new(vec![4, 6], (0..24).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn npo_at_reference_is_two_ln2_over_beta() {
        let s = sample();
        let l = logits(1);
        let (lp, _) = answer_logprob(&l, &s);
        let (loss, _) = npo(&l, lp, &s, 0.5);
        assert!((loss - 4.0 * core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn objective_gradients() {
        let s = sample();
        for seed in 0..5 {
            let x = logits(seed);
            let r = logits(seed + 100);
            let ref_lp = answer_logprob(&r, &s).0;
            let checks: [(LossFn<'_>, &str); 4] = [
                (&|t| answer_ce(t, &s), "ce"),
                (&|t| npo(t, ref_lp, &s, 0.5), "npo"),
                (&|t| simnpo(t, &s, 3.5, 0.25), "simnpo"),
                (&|t| undial(t, &r, &s, 10.0).unwrap(), "undial"),
            ];
            for (f, name) in checks {
                let (_, g) = f(&x);
                let err = grad_check(|t| Ok(f(t).0), &g, &x, 1e-5).unwrap();
                assert!(err < 1e-4, "{name}: {err}");
            }
        }
    }

    #[test]
    fn undial_shape_mismatch() {
        let s = sample();
        assert!(undial(&logits(0), &Tensor::zeros(&[2, 6]), &s, 1.0).is_err());
    }
}
