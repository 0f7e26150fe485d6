//! Dense row-major `f64` kernels with hand-written reverse-mode gradients.
//!
//! Every differentiable op comes as a forward/backward pair. Backward
//! functions *accumulate* into their gradient buffers so that callers can sum
//! contributions from several consumers without temporaries. All reductions
//! run in a fixed sequential order, which keeps results bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix whose last axis is the column axis.
    pub fn rows(&self) -> usize {
        match self.shape.split_last() {
            Some((_, lead)) => lead.iter().product(),
            None => 1,
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, ctx: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(ctx))
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Standard matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    mm_acc(&mut out, &a.data, &b.data, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn mm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `dw[k,n] += aᵀ[k,m] · dy[m,n]`
pub fn mm_at_b_acc(dw: &mut [f64], a: &[f64], dy: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let wrow = &mut dw[p * n..(p + 1) * n];
            for (w, g) in wrow.iter_mut().zip(dyrow) {
                *w += av * g;
            }
        }
    }
}

/// `dx[m,k] += dy[m,n] · wᵀ[n,k]` where `w` is stored as `[k,n]`.
pub fn mm_a_bt_acc(dx: &mut [f64], dy: &[f64], w: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            dx[i * k + p] += dot(dyrow, &w[p * n..(p + 1) * n]);
        }
    }
}

/// Saved statistics of a layer-norm forward pass.
#[derive(Debug, Clone, Default)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Row-wise layer norm over the last axis of a `[rows, d]` buffer.
pub fn layer_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    d: usize,
) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / libm::sqrt(var + LN_EPS);
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Accumulates `dx`, and optionally the affine parameter gradients.
pub fn layer_norm_backward(
    dy: &[f64],
    cache: &LayerNormCache,
    gamma: &[f64],
    d: usize,
    dx: &mut [f64],
    dparams: Option<(&mut [f64], &mut [f64])>,
) {
    let rows = dy.len() / d;
    if let Some((dgamma, dbeta)) = dparams {
        for r in 0..rows {
            for j in 0..d {
                let g = dy[r * d + j];
                dgamma[j] += g * cache.xhat[r * d + j];
                dbeta[j] += g;
            }
        }
    }
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..d {
            let g = dyr[j] * gamma[j];
            mean_g += g;
            mean_gx += g * xh[j];
        }
        mean_g /= d as f64;
        mean_gx /= d as f64;
        let rs = cache.rstd[r];
        for j in 0..d {
            let g = dyr[j] * gamma[j];
            dx[r * d + j] += rs * (g - mean_g - xh[j] * mean_gx);
        }
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let rows = out.rows();
    for r in 0..rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Gradient of a row softmax: `ds = p ⊙ (dp − ⟨dp, p⟩)`, accumulated.
pub fn softmax_backward_row(dp: &[f64], p: &[f64], ds: &mut [f64]) {
    let inner = dot(dp, p);
    for ((d, g), pv) in ds.iter_mut().zip(dp).zip(p) {
        *d += pv * (g - inner);
    }
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
    row.iter().map(|v| v - lse).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + libm::tanh(u))
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Gathers rows of `table` (`[vocab, d]`) for each id.
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, d) = (table.rows(), table.cols());
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::Input(alloc::format!("token id {id} >= vocab size {v}")));
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), d], out)
}

/// Scatter-adds row gradients back into a `[vocab, d]` table gradient.
pub fn embedding_backward(dtable: &mut [f64], d: usize, ids: &[usize], dout: &[f64]) {
    for (i, &id) in ids.iter().enumerate() {
        for j in 0..d {
            dtable[id * d + j] += dout[i * d + j];
        }
    }
}

/// Mean cross-entropy of `logits` rows against `targets`, with its gradient.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rows() != targets.len() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: logits.shape.clone(),
            rhs: vec![targets.len()],
        });
    }
    let n = targets.len();
    let v = logits.cols();
    let mut grad = Tensor::zeros(&[n, v]);
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::Input(alloc::format!("target {t} >= {v}")));
        }
        let lp = log_softmax_row(logits.row(r));
        loss -= lp[t];
        let g = grad.row_mut(r);
        for j in 0..v {
            g[j] = libm::exp(lp[j]) / n as f64;
        }
        g[t] -= 1.0 / n as f64;
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy"));
    }
    Ok((loss, grad))
}

/// Compares an analytic gradient against central differences.
///
/// Returns `max_i |g_i − ĝ_i| / (|g_i| + |ĝ_i| + 1e-12)` where `ĝ` is the
/// central-difference estimate with step `eps`.
pub fn grad_check<F>(f: F, analytic: &Tensor, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    grad_check_coords(f, analytic, x, eps, 0..x.len())
}

/// [`grad_check`] restricted to the given coordinates.
pub fn grad_check_coords<F, I>(f: F, analytic: &Tensor, x: &Tensor, eps: f64, coords: I) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
    I: IntoIterator<Item = usize>,
{
    if !(eps > 0.0) {
        return Err(Error::Config("grad_check eps must be positive".into()));
    }
    if analytic.len() != x.len() {
        return Err(Error::Dimension {
            op: "grad_check",
            lhs: analytic.shape.clone(),
            rhs: x.shape.clone(),
        });
    }
    let fx = f(x)?;
    if !fx.is_finite() {
        return Err(Error::NonFinite("grad_check"));
    }
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe)?;
        probe.data[i] = orig - eps;
        let down = f(&probe)?;
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("grad_check"));
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data[i];
        let rel = libm::fabs(a - numeric) / (libm::fabs(a) + libm::fabs(numeric) + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);
        let col = Tensor::from_rows(&[&[5.0], &[7.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &col).unwrap(), col);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(3);
        let a = Tensor::new(vec![3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor::new(vec![4, 2], (0..8).map(|_| rng.normal()).collect()).unwrap();
        let fast = matmul(&a, &b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn grad_check_linear_and_square() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let ones = Tensor::full(&[2], 1.0);
        let err = grad_check(|t| Ok(t.sum()), &ones, &x, 1e-5).unwrap();
        assert!(err < 1e-9);
        let g = Tensor::new(vec![2], vec![2.0, 4.0]).unwrap();
        let err = grad_check(|t| Ok(t.data().iter().map(|v| v * v).sum()), &g, &x, 1e-5).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn grad_check_rejects_non_finite() {
        let x = Tensor::full(&[1], 1.0);
        let r = grad_check(|_| Ok(f64::NAN), &x, &x, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut rng = Rng::new(9);
        let x = Tensor::new(vec![5, 7], (0..35).map(|_| 10.0 * rng.normal()).collect()).unwrap();
        let p = softmax_rows(&x);
        for r in 0..5 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(p.row(r).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    /// Two-layer toy net: logits = gelu(LN(x) W1) W2, mean CE.
    fn toy_net_loss(x: &Tensor, w1: &[f64], w2: &[f64], targets: &[usize]) -> Result<(f64, Tensor)> {
        let (n, d, h, v) = (x.rows(), x.cols(), 5, 3);
        let gamma = vec![1.3; d];
        let beta = vec![0.1; d];
        let (y, ln) = layer_norm_forward(x.data(), &gamma, &beta, d);
        let mut pre = vec![0.0; n * h];
        mm_acc(&mut pre, &y, w1, n, d, h);
        let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
        let mut logits = vec![0.0; n * v];
        mm_acc(&mut logits, &act, w2, n, h, v);
        let logits = Tensor::new(vec![n, v], logits)?;
        let (loss, dlogits) = cross_entropy(&logits, targets)?;
        let mut dact = vec![0.0; n * h];
        mm_a_bt_acc(&mut dact, dlogits.data(), w2, n, h, v);
        let dpre: Vec<f64> = dact.iter().zip(&pre).map(|(g, &z)| g * gelu_grad(z)).collect();
        let mut dy = vec![0.0; n * d];
        mm_a_bt_acc(&mut dy, &dpre, w1, n, d, h);
        let mut dx = vec![0.0; n * d];
        layer_norm_backward(&dy, &ln, &gamma, d, &mut dx, None);
        Ok((loss, Tensor::new(vec![n, d], dx)?))
    }

    #[test]
    fn grad_check_two_layer_cross_entropy() {
        let mut rng = Rng::new(11);
        let w1: Vec<f64> = (0..4 * 5).map(|_| rng.normal()).collect();
        let w2: Vec<f64> = (0..5 * 3).map(|_| rng.normal()).collect();
        let targets = [0, 2, 1];
        for _ in 0..10 {
            let x = Tensor::new(vec![3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
            let (_, g) = toy_net_loss(&x, &w1, &w2, &targets).unwrap();
            let err = grad_check(|t| Ok(toy_net_loss(t, &w1, &w2, &targets)?.0), &g, &x, 1e-5).unwrap();
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn softmax_and_gelu_gradients() {
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            let x = Tensor::new(vec![1, 6], (0..6).map(|_| rng.normal()).collect()).unwrap();
            let w: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let f = |t: &Tensor| -> Result<f64> {
                let p = softmax_rows(t);
                Ok(dot(p.data(), &w) + t.data().iter().map(|&z| gelu(z)).sum::<f64>())
            };
            let p = softmax_rows(&x);
            let mut g = vec![0.0; 6];
            softmax_backward_row(&w, p.data(), &mut g);
            for (gi, &z) in g.iter_mut().zip(x.data()) {
                *gi += gelu_grad(z);
            }
            let g = Tensor::new(vec![1, 6], g).unwrap();
            assert!(grad_check(f, &g, &x, 1e-5).unwrap() < 1e-4);
        }
    }

    #[test]
    fn embedding_roundtrip_gradient() {
        let table = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let e = embedding_lookup(&table, &[2, 0, 2]).unwrap();
        assert_eq!(e.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let mut d = vec![0.0; 6];
        embedding_backward(&mut d, 2, &[2, 0, 2], &[1.0; 6]);
        assert_eq!(d, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(embedding_lookup(&table, &[3]).is_err());
    }
}
