//! Minimal reverse-mode tape over 2-D tensors.

use oasis_core::normalize::{normalize, vjp, NormalizerSpec};
use oasis_core::numerics::{sigmoid, silu, silu_grad, softplus};
use oasis_core::quant::{fake_quant, Granularity};
use oasis_core::{Error, Result, Scalar, Tensor};

pub type NodeId = usize;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    /// `x · s` with `s` a one-element node.
    ScaleBy(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    Embed(NodeId, Vec<usize>),
    RmsNorm { x: NodeId, gain: NodeId, inv_rms: Vec<S> },
    Silu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    /// Row-wise normalizer; the output has one extra column for null mass.
    RowNormalize { x: NodeId, spec: NormalizerSpec, causal: bool },
    CenterRows { x: NodeId, first: usize },
    BroadcastRows(NodeId, usize),
    /// `y[t, :] = w[t] · x[t, :]` with `w` a `T × 1` column.
    RowScale(NodeId, NodeId),
    /// Mean next-token cross-entropy; caches the softmax.
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Tensor<S> },
    /// Straight-through fake quantization.
    FakeQuant(NodeId),
}

/// Values and operations recorded in evaluation order.
pub struct Graph<S: Scalar = f64> {
    values: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape2<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn need(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Dimension(msg()))
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.values[id]
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.values.len() - 1
    }

    /// Parameters and constants. Values of rank 1 are stored as `1 × n`.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        let value = if value.shape().len() == 1 {
            let n = value.len();
            value.reshape(vec![1, n]).expect("rank-1 reshape")
        } else {
            value
        };
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a].matmul(&self.values[b])?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.values[a].transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a].add(&self.values[b])?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a].sub(&self.values[b])?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a].zip_map(&self.values[b], |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.values[a].scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        need(self.values[s].len() == 1, || "scale_by needs a one-element scale".into())?;
        let c = self.values[s].data()[0];
        let v = self.values[a].scale(c);
        Ok(self.push(v, Op::ScaleBy(a, s)))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = &self.values[a];
        let (r, c) = shape2(x);
        need(start + len <= c, || format!("column slice {start}+{len} of {c}"))?;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let v = Tensor::new(vec![r, len], data)?;
        Ok(self.push(v, Op::SliceCols(a, start, len)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        need(!parts.is_empty(), || "concatenating nothing".into())?;
        let r = self.values[parts[0]].shape()[0];
        need(parts.iter().all(|&p| self.values[p].shape()[0] == r), || {
            "concatenated parts disagree on rows".into()
        })?;
        let c: usize = parts.iter().map(|&p| self.values[p].shape()[1]).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.values[p].row(i));
            }
        }
        let v = Tensor::new(vec![r, c], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = &self.values[table];
        let (v, d) = shape2(t);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {v}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(out, Op::Embed(table, ids.to_vec())))
    }

    /// `y = x / sqrt(mean(x²) + eps) ⊙ gain`, row-wise.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let xv = &self.values[x];
        let (r, c) = shape2(xv);
        let g = &self.values[gain];
        need(g.len() == c, || format!("gain of {} for width {c}", g.len()))?;
        let eps = S::of(RMS_EPS);
        let mut inv_rms = Vec::with_capacity(r);
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = xv.row(i);
            let ms = row.iter().map(|&a| a * a).sum::<S>() / S::of_usize(c);
            let inv = S::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for (o, (&a, &w)) in out.row_mut(i).iter_mut().zip(row.iter().zip(g.data())) {
                *o = a * inv * w;
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].map(silu);
        self.push(v, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].map(softplus);
        self.push(v, Op::Softplus(a))
    }

    /// Normalizes each row; `causal` hides columns beyond the row index.
    /// Output is `rows × (cols + 1)` with the null mass last.
    pub fn row_normalize(&mut self, x: NodeId, spec: NormalizerSpec, causal: bool) -> Result<NodeId> {
        let xv = &self.values[x];
        let (r, c) = shape2(xv);
        let mut out = Tensor::zeros(&[r, c + 1]);
        let mut visible = vec![true; c];
        for i in 0..r {
            if causal {
                for (j, v) in visible.iter_mut().enumerate() {
                    *v = j <= i;
                }
            }
            let w = normalize(&spec, xv.row(i), &visible)?;
            let row = out.row_mut(i);
            row[..c].copy_from_slice(&w.probs);
            row[c] = w.null_mass;
        }
        Ok(self.push(out, Op::RowNormalize { x, spec, causal }))
    }

    /// Subtracts the row mean over columns `first..`; earlier columns become
    /// zero. A constant row centers to exactly zero.
    pub fn center_rows(&mut self, x: NodeId, first: usize) -> Result<NodeId> {
        let xv = &self.values[x];
        let (r, c) = shape2(xv);
        let mut out = Tensor::zeros(&[r, c]);
        if first < c {
            let n = S::of_usize(c - first);
            for i in 0..r {
                let row = xv.row(i);
                let reference = row[first];
                let offset = row[first..].iter().map(|&v| v - reference).sum::<S>() / n;
                for (o, &v) in out.row_mut(i)[first..].iter_mut().zip(&row[first..]) {
                    *o = v - reference - offset;
                }
            }
        }
        Ok(self.push(out, Op::CenterRows { x, first }))
    }

    /// Repeats a `1 × n` node `rows` times.
    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let xv = &self.values[x];
        need(xv.shape()[0] == 1, || "broadcast needs a single row".into())?;
        let n = xv.len();
        let data = (0..rows).flat_map(|_| xv.data().iter().copied()).collect();
        let v = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(v, Op::BroadcastRows(x, rows)))
    }

    pub fn row_scale(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xv = &self.values[x];
        let wv = &self.values[w];
        let (r, _) = shape2(xv);
        need(wv.shape() == [r, 1], || format!("row weights {:?} for {r} rows", wv.shape()))?;
        let mut out = xv.clone();
        for i in 0..r {
            let a = wv.data()[i];
            out.row_mut(i).iter_mut().for_each(|v| *v *= a);
        }
        Ok(self.push(out, Op::RowScale(x, w)))
    }

    /// Mean cross-entropy of rows `0..targets.len()` of `logits` against
    /// `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = &self.values[logits];
        let (r, v) = shape2(lv);
        need(targets.len() <= r && !targets.is_empty(), || {
            format!("{} targets for {r} rows", targets.len())
        })?;
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!("target {bad} outside vocabulary of {v}")));
        }
        let spec = NormalizerSpec::softmax();
        let all = vec![true; v];
        let mut probs = Tensor::zeros(&[targets.len(), v]);
        let mut total = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let lse = oasis_core::numerics::log_sum_exp(row, false);
            total += lse - row[t];
            probs.row_mut(i).copy_from_slice(&normalize(&spec, row, &all)?.probs);
        }
        let loss = Tensor::new(vec![1, 1], vec![total / S::of_usize(targets.len())])?;
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn fake_quant(&mut self, x: NodeId, bits: u32) -> Result<NodeId> {
        let v = fake_quant(&self.values[x], bits, Granularity::PerTensor)?;
        Ok(self.push(v, Op::FakeQuant(x)))
    }

    /// Gradients of the one-element node `root` with respect to every node.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Option<Tensor<S>>>> {
        need(self.values[root].len() == 1, || "backward from a non-scalar node".into())?;
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.values.len()];
        grads[root] = Some(Tensor::full(self.values[root].shape(), S::one()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, id: NodeId, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let val = |n: NodeId| &self.values[n];
        match &self.ops[id] {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                accumulate(grads, a, g.matmul(&val(b).transpose()?)?)?;
                accumulate(grads, b, val(a).transpose()?.matmul(g)?)?;
            }
            &Op::Transpose(a) => accumulate(grads, a, g.transpose()?)?,
            &Op::Add(a, b) => {
                accumulate(grads, a, g.clone())?;
                accumulate(grads, b, g.clone())?;
            }
            &Op::Sub(a, b) => {
                accumulate(grads, a, g.clone())?;
                accumulate(grads, b, g.scale(-S::one()))?;
            }
            &Op::Mul(a, b) => {
                accumulate(grads, a, g.zip_map(val(b), |x, y| x * y)?)?;
                accumulate(grads, b, g.zip_map(val(a), |x, y| x * y)?)?;
            }
            &Op::Scale(a, c) => accumulate(grads, a, g.scale(c))?,
            &Op::ScaleBy(a, s) => {
                let c = val(s).data()[0];
                accumulate(grads, a, g.scale(c))?;
                let ds: S = g.data().iter().zip(val(a).data()).map(|(&x, &y)| x * y).sum();
                accumulate(grads, s, Tensor::full(val(s).shape(), ds))?;
            }
            &Op::SliceCols(a, start, len) => {
                let (r, c) = shape2(val(a));
                let mut ga = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    ga.row_mut(i)[start..start + len].copy_from_slice(g.row(i));
                }
                accumulate(grads, a, ga)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = shape2(val(p));
                    let mut gp = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    offset += c;
                    accumulate(grads, p, gp)?;
                }
            }
            Op::Embed(table, ids) => {
                let mut gt = Tensor::zeros(val(*table).shape());
                for (i, &tok) in ids.iter().enumerate() {
                    for (o, &x) in gt.row_mut(tok).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                accumulate(grads, *table, gt)?;
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = val(*x);
                let gw = val(*gain).data();
                let (r, c) = shape2(xv);
                let mut gx = Tensor::zeros(&[r, c]);
                let mut gg = vec![S::zero(); c];
                let n = S::of_usize(c);
                for i in 0..r {
                    let inv = inv_rms[i];
                    let row = xv.row(i);
                    let gr = g.row(i);
                    // u = g ⊙ gain; dx = inv·u - inv³/n · (u·x) · x
                    let mut ux = S::zero();
                    for j in 0..c {
                        gg[j] += gr[j] * row[j] * inv;
                        ux += gr[j] * gw[j] * row[j];
                    }
                    let k = inv * inv * inv * ux / n;
                    for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                        *o = inv * gr[j] * gw[j] - k * row[j];
                    }
                }
                accumulate(grads, *x, gx)?;
                accumulate(grads, *gain, Tensor::new(val(*gain).shape().to_vec(), gg)?)?;
            }
            &Op::Silu(a) => accumulate(grads, a, g.zip_map(val(a), |u, x| u * silu_grad(x))?)?,
            &Op::Sigmoid(a) => {
                accumulate(grads, a, g.zip_map(&self.values[id], |u, y| u * y * (S::one() - y))?)?
            }
            &Op::Softplus(a) => accumulate(grads, a, g.zip_map(val(a), |u, x| u * sigmoid(x))?)?,
            Op::RowNormalize { x, spec, causal } => {
                let xv = val(*x);
                let (r, c) = shape2(xv);
                let mut gx = Tensor::zeros(&[r, c]);
                let mut visible = vec![true; c];
                for i in 0..r {
                    if *causal {
                        for (j, v) in visible.iter_mut().enumerate() {
                            *v = j <= i;
                        }
                    }
                    let gr = g.row(i);
                    let dz = vjp(spec, xv.row(i), &visible, &gr[..c], gr[c])?;
                    gx.row_mut(i).copy_from_slice(&dz);
                }
                accumulate(grads, *x, gx)?;
            }
            &Op::CenterRows { x, first } => {
                let (r, c) = shape2(val(x));
                let mut gx = Tensor::zeros(&[r, c]);
                if first < c {
                    let n = S::of_usize(c - first);
                    for i in 0..r {
                        let gr = &g.row(i)[first..];
                        let mean = gr.iter().copied().sum::<S>() / n;
                        for (o, &u) in gx.row_mut(i)[first..].iter_mut().zip(gr) {
                            *o = u - mean;
                        }
                    }
                }
                accumulate(grads, x, gx)?;
            }
            &Op::BroadcastRows(a, rows) => {
                let n = val(a).len();
                let mut ga = vec![S::zero(); n];
                for i in 0..rows {
                    for (o, &u) in ga.iter_mut().zip(g.row(i)) {
                        *o += u;
                    }
                }
                accumulate(grads, a, Tensor::new(vec![1, n], ga)?)?;
            }
            &Op::RowScale(x, w) => {
                let xv = val(x);
                let wv = val(w);
                let r = xv.shape()[0];
                let mut gx = g.clone();
                let mut gw = Tensor::zeros(&[r, 1]);
                for i in 0..r {
                    let a = wv.data()[i];
                    gx.row_mut(i).iter_mut().for_each(|v| *v *= a);
                    let s: S = g.row(i).iter().zip(xv.row(i)).map(|(&u, &v)| u * v).sum();
                    gw.data_mut()[i] = s;
                }
                accumulate(grads, x, gx)?;
                accumulate(grads, w, gw)?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (r, v) = shape2(val(*logits));
                let scale = g.data()[0] / S::of_usize(targets.len());
                let mut gl = Tensor::zeros(&[r, v]);
                for (i, &t) in targets.iter().enumerate() {
                    let row = gl.row_mut(i);
                    for (o, &p) in row.iter_mut().zip(probs.row(i)) {
                        *o = p * scale;
                    }
                    row[t] -= scale;
                }
                accumulate(grads, *logits, gl)?;
            }
            &Op::FakeQuant(a) => accumulate(grads, a, g.clone())?,
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: NodeId, g: Tensor<S>) -> Result<()> {
    match &mut grads[id] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}
