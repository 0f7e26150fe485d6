use alloc::vec;
use alloc::vec::Vec;

use super::{final_index, layer_index, slot, ComputationGraph, Model, Params};
use crate::error::{Error, Result};
use crate::kernel::{
    self, dot, gelu, gelu_grad, layer_norm_backward, layer_norm_forward, mm_a_bt_acc, mm_acc, mm_at_b_acc,
    LayerNormCache, Tensor,
};

/// How sink inputs are assembled during a forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub enum Intervention<'a> {
    /// Plain residual stream.
    #[default]
    None,
    /// Residual stream plus an additive offset on selected sinks, given as
    /// `(sink index, [seq, d_model] offset)`.
    SinkDeltas(&'a [(usize, Tensor)]),
    /// Every sink input rebuilt edge by edge: kept edges read the live source
    /// output, the others read `ablation[source]`. Not differentiable.
    EdgeMask { keep: &'a [bool], ablation: &'a [Tensor] },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunSpec<'a> {
    /// Replaces the input node output (token + position embedding).
    pub input_embedding: Option<&'a Tensor>,
    pub intervention: Intervention<'a>,
}

/// Weight and optional bias slot for the q, k and v projections.
const LETTER_SLOTS: [(usize, Option<usize>); 3] =
    [(slot::WQ, Some(slot::BQ)), (slot::WK, None), (slot::WV, Some(slot::BV))];

#[derive(Debug, Clone, Default)]
struct HeadCache {
    ln: [LayerNormCache; 3],
    normed: [Vec<f64>; 3],
    proj: [Vec<f64>; 3],
    probs: Vec<f64>,
    z: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct MlpCache {
    ln: LayerNormCache,
    normed: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

/// Everything a forward pass produced, keyed by graph index.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub tokens: Vec<usize>,
    /// Output of each source node (`[seq, d_model]`), indexed like
    /// [`ComputationGraph::sources`].
    pub source_outputs: Vec<Tensor>,
    /// Input of each sink (`[seq, d_model]`), indexed like
    /// [`ComputationGraph::sinks`].
    pub sink_inputs: Vec<Tensor>,
    pub logits: Tensor,
    heads: Vec<HeadCache>,
    mlps: Vec<MlpCache>,
    final_ln: Option<LayerNormCache>,
    final_normed: Vec<f64>,
    embedding_overridden: bool,
    differentiable: bool,
}

/// Metric gradient with respect to every sink input and the input node output.
#[derive(Debug, Clone)]
pub struct SinkGrads {
    pub sinks: Vec<Tensor>,
    pub input_output: Tensor,
}

pub fn forward(model: &Model, tokens: &[usize]) -> Result<ActivationCache> {
    forward_with(model, tokens, &RunSpec::default())
}

struct SinkAssembler<'a> {
    spec: &'a RunSpec<'a>,
    graph: Option<ComputationGraph>,
    t: usize,
    d: usize,
}

impl SinkAssembler<'_> {
    fn input(&self, sink: usize, resid: &[f64], outputs: &[Tensor]) -> Result<Vec<f64>> {
        match self.spec.intervention {
            Intervention::None => Ok(resid.to_vec()),
            Intervention::SinkDeltas(deltas) => {
                let mut x = resid.to_vec();
                for (s, delta) in deltas.iter().filter(|(s, _)| *s == sink) {
                    if delta.len() != x.len() {
                        return Err(Error::Dimension {
                            op: "sink delta",
                            lhs: vec![self.t, self.d],
                            rhs: delta.shape().to_vec(),
                        });
                    }
                    let _ = s;
                    for (a, b) in x.iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
                Ok(x)
            }
            Intervention::EdgeMask { keep, ablation } => {
                let graph = self.graph.as_ref().expect("graph built for edge masks");
                let mut x = vec![0.0; self.t * self.d];
                for (src, edge) in graph.edges_into(sink).enumerate() {
                    let contrib = if keep[edge] { &outputs[src] } else { &ablation[src] };
                    if contrib.len() != x.len() {
                        return Err(Error::Dimension {
                            op: "edge ablation",
                            lhs: vec![self.t, self.d],
                            rhs: contrib.shape().to_vec(),
                        });
                    }
                    for (a, b) in x.iter_mut().zip(contrib.data()) {
                        *a += b;
                    }
                }
                Ok(x)
            }
        }
    }
}

fn affine(x: &[f64], w: &[f64], b: &[f64], t: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * n);
    for _ in 0..t {
        out.extend_from_slice(b);
    }
    mm_acc(&mut out, x, w, t, k, n);
    out
}

/// Forward pass with optional input override and sink intervention.
pub fn forward_with(model: &Model, tokens: &[usize], spec: &RunSpec<'_>) -> Result<ActivationCache> {
    model.validate_tokens(tokens)?;
    let cfg = &model.cfg;
    let (t, d, nh, dh, m, v) = (tokens.len(), cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp, cfg.vocab_size);

    let graph = match spec.intervention {
        Intervention::EdgeMask { keep, ablation } => {
            let g = ComputationGraph::build(cfg);
            if keep.len() != g.edge_count() || ablation.len() != g.sources().len() {
                return Err(Error::Input("edge mask does not match the graph".into()));
            }
            Some(g)
        }
        _ => None,
    };
    let asm = SinkAssembler { spec, graph, t, d };

    let emb = match spec.input_embedding {
        Some(e) => {
            if e.shape() != [t, d] {
                return Err(Error::Dimension {
                    op: "input embedding",
                    lhs: vec![t, d],
                    rhs: e.shape().to_vec(),
                });
            }
            e.clone()
        }
        None => {
            let mut e = kernel::embedding_lookup(&model.params.tensors[slot::TOK_EMB], tokens)?;
            let pos = &model.params.tensors[slot::POS_EMB];
            for (a, b) in e.data_mut().iter_mut().zip(&pos.data()[..t * d]) {
                *a += b;
            }
            e
        }
    };

    let mut resid = emb.data().to_vec();
    let mut outputs: Vec<Tensor> = vec![emb];
    let mut sink_inputs: Vec<Tensor> = Vec::new();
    let mut heads = Vec::with_capacity(cfg.n_layers * nh);
    let mut mlps = Vec::with_capacity(cfg.n_layers);
    let scale = 1.0 / libm::sqrt(dh as f64);

    for l in 0..cfg.n_layers {
        let ln_g = model.layer(l, slot::LN1_G).data();
        let ln_b = model.layer(l, slot::LN1_B).data();
        let wo = model.layer(l, slot::WO).data();
        let mut layer_outputs = Vec::with_capacity(nh);
        for h in 0..nh {
            let mut hc = HeadCache::default();
            for (li, (ws, bs)) in LETTER_SLOTS.into_iter().enumerate() {
                let x = asm.input(sink_inputs.len(), &resid, &outputs)?;
                let (y, lnc) = layer_norm_forward(&x, ln_g, ln_b, d);
                let w = &model.layer(l, ws).data()[h * d * dh..(h + 1) * d * dh];
                hc.proj[li] = match bs {
                    Some(bs) => affine(&y, w, &model.layer(l, bs).data()[h * dh..(h + 1) * dh], t, d, dh),
                    None => {
                        let mut p = vec![0.0; t * dh];
                        mm_acc(&mut p, &y, w, t, d, dh);
                        p
                    }
                };
                hc.normed[li] = y;
                hc.ln[li] = lnc;
                sink_inputs.push(Tensor::new(vec![t, d], x)?);
            }
            let (q, k, vv) = (&hc.proj[0], &hc.proj[1], &hc.proj[2]);
            let mut probs = vec![0.0; t * t];
            let mut z = vec![0.0; t * dh];
            for i in 0..t {
                let row = &mut probs[i * t..i * t + i + 1];
                for (j, p) in row.iter_mut().enumerate() {
                    *p = scale * dot(&q[i * dh..(i + 1) * dh], &k[j * dh..(j + 1) * dh]);
                }
                kernel::softmax_in_place(row);
                for j in 0..=i {
                    let p = probs[i * t + j];
                    for c in 0..dh {
                        z[i * dh + c] += p * vv[j * dh + c];
                    }
                }
            }
            let mut out = vec![0.0; t * d];
            mm_acc(&mut out, &z, &wo[h * dh * d..(h + 1) * dh * d], t, dh, d);
            hc.probs = probs;
            hc.z = z;
            heads.push(hc);
            layer_outputs.push(Tensor::new(vec![t, d], out)?);
        }
        for out in layer_outputs {
            for (r, o) in resid.iter_mut().zip(out.data()) {
                *r += o;
            }
            outputs.push(out);
        }

        let x = asm.input(sink_inputs.len(), &resid, &outputs)?;
        let (y, lnc) = layer_norm_forward(&x, model.layer(l, slot::LN2_G).data(), model.layer(l, slot::LN2_B).data(), d);
        let pre = affine(&y, model.layer(l, slot::W_IN).data(), model.layer(l, slot::B_IN).data(), t, d, m);
        let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
        let out = affine(&act, model.layer(l, slot::W_OUT).data(), model.layer(l, slot::B_OUT).data(), t, m, d);
        sink_inputs.push(Tensor::new(vec![t, d], x)?);
        mlps.push(MlpCache {
            ln: lnc,
            normed: y,
            pre,
            act,
        });
        for (r, o) in resid.iter_mut().zip(&out) {
            *r += o;
        }
        outputs.push(Tensor::new(vec![t, d], out)?);
    }

    let x = asm.input(sink_inputs.len(), &resid, &outputs)?;
    let (normed, final_ln) = if cfg.final_norm {
        let (y, c) = layer_norm_forward(
            &x,
            model.final_slot(slot::LNF_G).data(),
            model.final_slot(slot::LNF_B).data(),
            d,
        );
        (y, Some(c))
    } else {
        (x.clone(), None)
    };
    let logits = affine(&normed, model.final_slot(slot::W_U).data(), model.final_slot(slot::B_U).data(), t, d, v);
    sink_inputs.push(Tensor::new(vec![t, d], x)?);
    let logits = Tensor::new(vec![t, v], logits)?;
    logits.ensure_finite("forward")?;

    Ok(ActivationCache {
        tokens: tokens.to_vec(),
        source_outputs: outputs,
        sink_inputs,
        logits,
        heads,
        mlps,
        final_ln,
        final_normed: normed,
        embedding_overridden: spec.input_embedding.is_some(),
        differentiable: !matches!(spec.intervention, Intervention::EdgeMask { .. }),
    })
}

fn pair_mut(ts: &mut [Tensor], i: usize) -> (&mut [f64], &mut [f64]) {
    let (a, b) = ts.split_at_mut(i + 1);
    (a[i].data_mut(), b[0].data_mut())
}

fn bias_grad(db: &mut [f64], dy: &[f64], n: usize) {
    for row in dy.chunks(n) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

/// Reverse pass from `dlogits`. Returns the gradient with respect to every
/// sink input; parameter gradients are accumulated into `grads` when given.
pub fn backward(model: &Model, cache: &ActivationCache, dlogits: &Tensor, mut grads: Option<&mut Params>) -> Result<SinkGrads> {
    if !cache.differentiable {
        return Err(Error::Input("edge-masked runs are not differentiable".into()));
    }
    let cfg = &model.cfg;
    let (t, d, nh, dh, m, v) = (cache.tokens.len(), cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp, cfg.vocab_size);
    if dlogits.shape() != [t, v] {
        return Err(Error::Dimension {
            op: "backward",
            lhs: vec![t, v],
            rhs: dlogits.shape().to_vec(),
        });
    }
    let n_sinks = cache.sink_inputs.len();
    let mut sink_grads: Vec<Tensor> = Vec::with_capacity(n_sinks);
    sink_grads.resize_with(n_sinks, || Tensor::zeros(&[t, d]));

    // logits node
    let dy = dlogits.data();
    let w_u = model.final_slot(slot::W_U).data();
    if let Some(g) = grads.as_deref_mut() {
        mm_at_b_acc(g.tensors[final_index(cfg, slot::W_U)].data_mut(), &cache.final_normed, dy, t, d, v);
        bias_grad(g.tensors[final_index(cfg, slot::B_U)].data_mut(), dy, v);
    }
    let mut dnormed = vec![0.0; t * d];
    mm_a_bt_acc(&mut dnormed, dy, w_u, t, d, v);
    {
        let dst = sink_grads[n_sinks - 1].data_mut();
        match &cache.final_ln {
            Some(lnc) => {
                let gamma = model.final_slot(slot::LNF_G).data();
                let dparams = grads.as_deref_mut().map(|g| pair_mut(&mut g.tensors, final_index(cfg, slot::LNF_G)));
                layer_norm_backward(&dnormed, lnc, gamma, d, dst, dparams);
            }
            None => dst.copy_from_slice(&dnormed),
        }
    }
    let mut acc = sink_grads[n_sinks - 1].data().to_vec();
    let scale = 1.0 / libm::sqrt(dh as f64);

    for l in (0..cfg.n_layers).rev() {
        // MLP node: its output feeds every later sink, whose grads are in `acc`.
        let mc = &cache.mlps[l];
        let mlp_sink = l * (3 * nh + 1) + 3 * nh;
        let w_out = model.layer(l, slot::W_OUT).data();
        let w_in = model.layer(l, slot::W_IN).data();
        if let Some(g) = grads.as_deref_mut() {
            mm_at_b_acc(g.tensors[layer_index(l, slot::W_OUT)].data_mut(), &mc.act, &acc, t, m, d);
            bias_grad(g.tensors[layer_index(l, slot::B_OUT)].data_mut(), &acc, d);
        }
        let mut dact = vec![0.0; t * m];
        mm_a_bt_acc(&mut dact, &acc, w_out, t, m, d);
        let dpre: Vec<f64> = dact.iter().zip(&mc.pre).map(|(g, &z)| g * gelu_grad(z)).collect();
        if let Some(g) = grads.as_deref_mut() {
            mm_at_b_acc(g.tensors[layer_index(l, slot::W_IN)].data_mut(), &mc.normed, &dpre, t, d, m);
            bias_grad(g.tensors[layer_index(l, slot::B_IN)].data_mut(), &dpre, m);
        }
        let mut dnormed = vec![0.0; t * d];
        mm_a_bt_acc(&mut dnormed, &dpre, w_in, t, d, m);
        {
            let gamma = model.layer(l, slot::LN2_G).data();
            let dparams = grads.as_deref_mut().map(|g| pair_mut(&mut g.tensors, layer_index(l, slot::LN2_G)));
            layer_norm_backward(&dnormed, &mc.ln, gamma, d, sink_grads[mlp_sink].data_mut(), dparams);
        }
        for (a, b) in acc.iter_mut().zip(sink_grads[mlp_sink].data()) {
            *a += b;
        }

        // Attention heads: all read the same downstream gradient `acc`.
        let wo = model.layer(l, slot::WO).data();
        let ln_g = model.layer(l, slot::LN1_G).data();
        for h in 0..nh {
            let hc = &cache.heads[l * nh + h];
            let wo_h = &wo[h * dh * d..(h + 1) * dh * d];
            if let Some(g) = grads.as_deref_mut() {
                let dwo = &mut g.tensors[layer_index(l, slot::WO)].data_mut()[h * dh * d..(h + 1) * dh * d];
                mm_at_b_acc(dwo, &hc.z, &acc, t, dh, d);
            }
            let mut dz = vec![0.0; t * dh];
            mm_a_bt_acc(&mut dz, &acc, wo_h, t, dh, d);
            let (q, k, vv) = (&hc.proj[0], &hc.proj[1], &hc.proj[2]);
            let mut dq = vec![0.0; t * dh];
            let mut dk = vec![0.0; t * dh];
            let mut dv = vec![0.0; t * dh];
            let mut dp = vec![0.0; t];
            let mut ds = vec![0.0; t];
            for i in 0..t {
                let dzi = &dz[i * dh..(i + 1) * dh];
                for j in 0..=i {
                    dp[j] = dot(dzi, &vv[j * dh..(j + 1) * dh]);
                    let p = hc.probs[i * t + j];
                    for c in 0..dh {
                        dv[j * dh + c] += p * dzi[c];
                    }
                }
                ds[..=i].iter_mut().for_each(|x| *x = 0.0);
                kernel::softmax_backward_row(&dp[..=i], &hc.probs[i * t..i * t + i + 1], &mut ds[..=i]);
                for j in 0..=i {
                    let s = ds[j] * scale;
                    for c in 0..dh {
                        dq[i * dh + c] += s * k[j * dh + c];
                        dk[j * dh + c] += s * q[i * dh + c];
                    }
                }
            }
            for (li, (dproj, (ws, bs))) in [dq, dk, dv].into_iter().zip(LETTER_SLOTS).enumerate() {
                if let Some(g) = grads.as_deref_mut() {
                    let dw = &mut g.tensors[layer_index(l, ws)].data_mut()[h * d * dh..(h + 1) * d * dh];
                    mm_at_b_acc(dw, &hc.normed[li], &dproj, t, d, dh);
                    if let Some(bs) = bs {
                        let db = &mut g.tensors[layer_index(l, bs)].data_mut()[h * dh..(h + 1) * dh];
                        bias_grad(db, &dproj, dh);
                    }
                }
                let w = &model.layer(l, ws).data()[h * d * dh..(h + 1) * d * dh];
                let mut dnormed = vec![0.0; t * d];
                mm_a_bt_acc(&mut dnormed, &dproj, w, t, d, dh);
                let sink = l * (3 * nh + 1) + 3 * h + li;
                let dparams = grads.as_deref_mut().map(|g| pair_mut(&mut g.tensors, layer_index(l, slot::LN1_G)));
                layer_norm_backward(&dnormed, &hc.ln[li], ln_g, d, sink_grads[sink].data_mut(), dparams);
            }
        }
        let first = l * (3 * nh + 1);
        for g in &sink_grads[first..first + 3 * nh] {
            for (a, b) in acc.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }

    if let Some(g) = grads {
        if !cache.embedding_overridden {
            kernel::embedding_backward(g.tensors[slot::TOK_EMB].data_mut(), d, &cache.tokens, &acc);
            for (a, b) in g.tensors[slot::POS_EMB].data_mut()[..t * d].iter_mut().zip(&acc) {
                *a += b;
            }
        }
    }
    let input_output = Tensor::new(vec![t, d], acc)?;
    Ok(SinkGrads {
        sinks: sink_grads,
        input_output,
    })
}

/// Value of a scalar metric of the logits and its gradient with respect to
/// every sink input (the ∂m/∂a_v used by attribution patching).
pub fn node_metric_grads<F>(
    model: &Model,
    tokens: &[usize],
    spec: &RunSpec<'_>,
    metric: F,
) -> Result<(f64, SinkGrads, ActivationCache)>
where
    F: FnOnce(&Tensor) -> Result<(f64, Tensor)>,
{
    let cache = forward_with(model, tokens, spec)?;
    let (value, dlogits) = metric(&cache.logits)?;
    if !value.is_finite() || !dlogits.is_finite() {
        return Err(Error::NonFinite("metric"));
    }
    let grads = backward(model, &cache, &dlogits, None)?;
    Ok((value, grads, cache))
}

/// Loss and parameter gradient of a single sequence.
pub fn sample_param_grads<F>(model: &Model, tokens: &[usize], loss: F) -> Result<(f64, Params)>
where
    F: FnOnce(&Tensor) -> Result<(f64, Tensor)>,
{
    let cache = forward(model, tokens)?;
    let (value, dlogits) = loss(&cache.logits)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let mut grads = model.params.zeros_like();
    backward(model, &cache, &dlogits, Some(&mut grads))?;
    Ok((value, grads))
}

/// Summed loss and parameter gradient over a batch of sequences.
///
/// Each sample's gradient is computed in isolation and then added in batch
/// order, so duplicating a sample contributes exactly twice its gradient.
pub fn param_grads<F>(model: &Model, batch: &[&[usize]], mut loss: F) -> Result<(f64, Params)>
where
    F: FnMut(usize, &Tensor) -> Result<(f64, Tensor)>,
{
    let mut total = model.params.zeros_like();
    let mut value = 0.0;
    for (i, tokens) in batch.iter().enumerate() {
        let (l, g) = sample_param_grads(model, tokens, |logits| loss(i, logits))?;
        value += l;
        total.add_assign(&g);
    }
    Ok((value, total))
}
