//! Forward pass, loss and gradients of the depth-mixed transformer.

use rayon::prelude::*;

use oasis_core::depth::DepthWeights;
use oasis_core::{AttentionOutput, Error, Result, RouterMode, Scalar, SequenceTrace, Tensor};

use crate::config::ModelConfig;
use crate::params::Params;
use crate::tape::{Graph, NodeId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Dynamic per-tensor activation fake quantization at the attention
    /// input, attention output, block output and depth-mixture output.
    pub act_bits: Option<u32>,
}

struct LayerNodes {
    head_probs: Vec<NodeId>,
    head_ctx: Vec<NodeId>,
    context: NodeId,
    block: NodeId,
}

/// Node handles of one recorded sequence.
pub struct Recorded<S: Scalar = f64> {
    pub graph: Graph<S>,
    pub param_nodes: Vec<NodeId>,
    hidden: Vec<NodeId>,
    layers: Vec<LayerNodes>,
    depth: Vec<NodeId>,
    pub logits: NodeId,
    pub loss: Option<NodeId>,
}

/// Records the forward pass of one sequence on a fresh tape.
pub fn record<S: Scalar>(
    cfg: &ModelConfig,
    params: &Params<S>,
    tokens: &[usize],
    opts: ForwardOptions,
) -> Result<Recorded<S>> {
    let t_len = tokens.len();
    if t_len == 0 || t_len > cfg.seq_len {
        return Err(Error::Input(format!(
            "sequence length {t_len} outside 1..={}",
            cfg.seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
    }
    let lay = &params.layout;
    let mut g = Graph::new();
    let p: Vec<NodeId> = params.tensors.iter().map(|t| g.leaf(t.clone())).collect();
    let quant = |g: &mut Graph<S>, x: NodeId| -> Result<NodeId> {
        match opts.act_bits {
            Some(b) => g.fake_quant(x, b),
            None => Ok(x),
        }
    };

    let mut h1 = g.embed(p[lay.tok_emb], tokens)?;
    if let Some(pe) = lay.pos_emb {
        let positions: Vec<usize> = (0..t_len).collect();
        let pos = g.embed(p[pe], &positions)?;
        h1 = g.add(h1, pos)?;
    }
    let (heads, dh) = (cfg.n_heads, cfg.head_dim());
    let scale = S::of(1.0 / (dh as f64).sqrt());
    let depth_spec = cfg.router_mode.depth_normalizer();
    let inv_heads = S::one() / S::of_usize(heads);

    let mut hidden = vec![h1];
    let mut layers: Vec<LayerNodes> = Vec::new();
    let mut psi_cols: Vec<NodeId> = Vec::new();
    let mut depth = Vec::new();
    for (l, slots) in lay.layers.iter().enumerate() {
        let h = hidden[l];
        let x = g.rms_norm(h, p[slots.attn_gain])?;
        let x = quant(&mut g, x)?;
        let q = g.matmul(x, p[slots.wq])?;
        let k = g.matmul(x, p[slots.wk])?;
        let v = g.matmul(x, p[slots.wv])?;
        let gate = match slots.wg {
            Some(wg) => {
                let z = g.matmul(x, p[wg])?;
                Some(g.sigmoid(z))
            }
            None => None,
        };
        let (mut head_probs, mut head_ctx, mut gated_ctx) = (vec![], vec![], vec![]);
        let mut null_sum = None;
        for hd in 0..heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let pf = g.row_normalize(s, cfg.normalizer, true)?;
            let pr = g.slice_cols(pf, 0, t_len)?;
            let ctx = g.matmul(pr, vh)?;
            let out = match gate {
                Some(gt) => {
                    let gh = g.slice_cols(gt, hd * dh, dh)?;
                    g.mul(ctx, gh)?
                }
                None => ctx,
            };
            if cfg.router_mode == RouterMode::Oasis {
                let nm = g.slice_cols(pf, t_len, 1)?;
                null_sum = Some(match null_sum {
                    Some(acc) => g.add(acc, nm)?,
                    None => nm,
                });
            }
            head_probs.push(pf);
            head_ctx.push(ctx);
            gated_ctx.push(out);
        }
        let cat = g.concat_cols(&gated_ctx)?;
        let a = g.matmul(cat, p[slots.wo])?;
        let a = quant(&mut g, a)?;
        let u = g.matmul(a, p[slots.w1])?;
        let u = g.silu(u);
        let f = g.matmul(u, p[slots.w2])?;
        let f = quant(&mut g, f)?;
        if let Some(ns) = null_sum {
            psi_cols.push(g.scale(ns, inv_heads));
        }
        layers.push(LayerNodes {
            head_probs,
            head_ctx,
            context: a,
            block: f,
        });

        // Target layer l + 2 mixes h1 and f_1..f_{l+1}.
        let n_branch = l + 2;
        let mut logits = g.broadcast_rows(p[lay.depth_logits[l]], t_len)?;
        if cfg.router_mode == RouterMode::Oasis {
            let zero = g.leaf(Tensor::zeros(&[t_len, 1]));
            let mut cols = vec![zero];
            cols.extend(&psi_cols);
            let psi = g.concat_cols(&cols)?;
            let first = match cfg.embedding_null {
                oasis_core::EmbeddingNull::ZeroEvidence => 0,
                oasis_core::EmbeddingNull::Exclude => 1,
            };
            let dpsi = g.center_rows(psi, first)?;
            let braw = if cfg.per_layer_beta {
                g.slice_cols(p[lay.beta_raw], l, 1)?
            } else {
                p[lay.beta_raw]
            };
            let beta = g.softplus(braw);
            let shift = g.scale_by(dpsi, beta)?;
            logits = g.sub(logits, shift)?;
        }
        let w = g.row_normalize(logits, depth_spec, false)?;
        let mut acc: Option<NodeId> = None;
        for i in 0..n_branch {
            let u = if i == 0 { hidden[0] } else { layers[i - 1].block };
            let wi = g.slice_cols(w, i, 1)?;
            let term = g.row_scale(u, wi)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        let mut next = acc.expect("at least one branch");
        if cfg.router_mode != RouterMode::Vanilla && cfg.null_target == oasis_core::NullTarget::PreviousState {
            let wn = g.slice_cols(w, n_branch, 1)?;
            let term = g.row_scale(h, wn)?;
            next = g.add(next, term)?;
        }
        let next = quant(&mut g, next)?;
        depth.push(w);
        hidden.push(next);
    }
    let last = *hidden.last().expect("hidden states");
    let n = g.rms_norm(last, p[lay.final_gain])?;
    let logits = g.matmul(n, p[lay.unembed])?;
    let loss = if t_len >= 2 {
        Some(g.cross_entropy(logits, &tokens[1..])?)
    } else {
        None
    };
    Ok(Recorded {
        graph: g,
        param_nodes: p,
        hidden,
        layers,
        depth,
        logits,
        loss,
    })
}

impl<S: Scalar> Recorded<S> {
    pub fn loss_value(&self) -> Option<S> {
        self.loss.map(|l| self.graph.value(l).data()[0])
    }

    pub fn logits_value(&self) -> &Tensor<S> {
        self.graph.value(self.logits)
    }

    /// Largest |h_ℓ| per layer, for failure reports.
    pub fn diagnostics(&self) -> String {
        self.hidden
            .iter()
            .enumerate()
            .map(|(i, &h)| format!("h{}: max|x| = {:.3e}", i + 1, self.graph.value(h).max_abs().as_f64()))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Gradients of the loss with respect to every parameter.
    pub fn grads(&self) -> Result<Vec<Tensor<S>>> {
        let root = self.loss.ok_or_else(|| Error::Input("loss needs at least two tokens".into()))?;
        let grads = self.graph.backward(root)?;
        Ok(self
            .param_nodes
            .iter()
            .map(|&id| {
                let shape = self.graph.value(id).shape();
                match &grads[id] {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    pub fn trace(&self, cfg: &ModelConfig) -> Result<SequenceTrace<S>> {
        let g = &self.graph;
        let t_len = g.value(self.hidden[0]).shape()[0];
        let (heads, dh) = (cfg.n_heads, cfg.head_dim());
        let mut attention = Vec::new();
        let mut block_outputs = Vec::new();
        for layer in &self.layers {
            let mut weights = Tensor::zeros(&[heads, t_len, t_len]);
            let mut null_mass = Tensor::zeros(&[heads, t_len]);
            let mut head_context = Tensor::zeros(&[heads, t_len, dh]);
            for h in 0..heads {
                let pf = g.value(layer.head_probs[h]);
                let ctx = g.value(layer.head_ctx[h]);
                for t in 0..t_len {
                    let row = pf.row(t);
                    for j in 0..t_len {
                        weights.set(&[h, t, j], row[j]);
                    }
                    null_mass.set(&[h, t], row[t_len]);
                    for c in 0..dh {
                        head_context.set(&[h, t, c], ctx.row(t)[c]);
                    }
                }
            }
            attention.push(AttentionOutput {
                context: g.value(layer.context).clone(),
                weights,
                null_mass,
                head_context,
            });
            block_outputs.push(g.value(layer.block).clone());
        }
        let depth = self
            .depth
            .iter()
            .map(|&w| {
                let wv = g.value(w);
                let n_branch = wv.shape()[1] - 1;
                let mut alpha = Tensor::zeros(&[n_branch, t_len]);
                let mut null = Tensor::zeros(&[t_len]);
                for t in 0..t_len {
                    for i in 0..n_branch {
                        alpha.set(&[i, t], wv.at(&[t, i]));
                    }
                    null.set(&[t], wv.at(&[t, n_branch]));
                }
                DepthWeights {
                    alpha,
                    depth_null_mass: null,
                }
            })
            .collect();
        let trace = SequenceTrace {
            router_mode: cfg.router_mode,
            hidden: self.hidden.iter().map(|&h| g.value(h).clone()).collect(),
            attention,
            block_outputs,
            depth,
        };
        trace.validate()?;
        Ok(trace)
    }
}

fn check_params<S: Scalar>(cfg: &ModelConfig, params: &Params<S>) -> Result<()> {
    cfg.validate()?;
    if params.layout != crate::params::Layout::new(cfg) {
        return Err(Error::Config("parameters do not match the model configuration".into()));
    }
    Ok(())
}

/// Logits `B × T × vocab` and, when requested, one trace per sequence.
pub fn forward<S: Scalar>(
    cfg: &ModelConfig,
    params: &Params<S>,
    batch: &[Vec<usize>],
    capture: bool,
) -> Result<(Tensor<S>, Option<Vec<SequenceTrace<S>>>)> {
    forward_with(cfg, params, batch, capture, ForwardOptions::default())
}

pub fn forward_with<S: Scalar>(
    cfg: &ModelConfig,
    params: &Params<S>,
    batch: &[Vec<usize>],
    capture: bool,
    opts: ForwardOptions,
) -> Result<(Tensor<S>, Option<Vec<SequenceTrace<S>>>)> {
    check_params(cfg, params)?;
    let t_len = batch.first().map_or(0, |s| s.len());
    if batch.iter().any(|s| s.len() != t_len) {
        return Err(Error::Input("sequences in a batch must share one length".into()));
    }
    let per: Vec<Result<(Tensor<S>, Option<SequenceTrace<S>>)>> = batch
        .par_iter()
        .map(|tokens| {
            let rec = record(cfg, params, tokens, opts)?;
            let trace = if capture { Some(rec.trace(cfg)?) } else { None };
            Ok((rec.logits_value().clone(), trace))
        })
        .collect();
    let mut data = Vec::with_capacity(batch.len() * t_len * cfg.vocab);
    let mut traces = Vec::new();
    for r in per {
        let (l, t) = r?;
        data.extend_from_slice(l.data());
        traces.extend(t);
    }
    let logits = Tensor::new(vec![batch.len(), t_len, cfg.vocab], data)?;
    Ok((logits, capture.then_some(traces)))
}

/// Mean per-sequence loss, each sequence contributing its mean next-token
/// cross-entropy.
pub fn batch_loss<S: Scalar>(
    cfg: &ModelConfig,
    params: &Params<S>,
    batch: &[Vec<usize>],
    opts: ForwardOptions,
) -> Result<S> {
    check_params(cfg, params)?;
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let losses: Vec<Result<S>> = batch
        .par_iter()
        .map(|tokens| {
            let rec = record(cfg, params, tokens, opts)?;
            let loss = rec
                .loss_value()
                .ok_or_else(|| Error::Input("loss needs at least two tokens".into()))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss ({})", rec.diagnostics())));
            }
            Ok(loss)
        })
        .collect();
    let mut total = S::zero();
    for l in losses {
        total += l?;
    }
    Ok(total / S::of_usize(batch.len()))
}

/// Batch loss and its gradient for every parameter.
pub fn loss_and_grads<S: Scalar>(
    cfg: &ModelConfig,
    params: &Params<S>,
    batch: &[Vec<usize>],
) -> Result<(S, Vec<Tensor<S>>)> {
    check_params(cfg, params)?;
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let per: Vec<Result<(S, Vec<Tensor<S>>)>> = batch
        .par_iter()
        .map(|tokens| {
            let rec = record(cfg, params, tokens, ForwardOptions::default())?;
            let loss = rec
                .loss_value()
                .ok_or_else(|| Error::Input("loss needs at least two tokens".into()))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss ({})", rec.diagnostics())));
            }
            Ok((loss, rec.grads()?))
        })
        .collect();
    let inv = S::one() / S::of_usize(batch.len());
    let mut total = S::zero();
    let mut grads = params.zeros_like();
    for r in per {
        let (l, g) = r?;
        total += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
    }
    for g in grads.iter_mut() {
        for x in g.data_mut() {
            *x *= inv;
        }
    }
    Ok((total * inv, grads))
}
