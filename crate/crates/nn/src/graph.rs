use crate::conv::{col2im, conv_out, conv_transpose_out, from_channel_major, im2col, to_channel_major, PatchGeom};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::{matmul_into, Element, MatRef};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvShape {
    n: usize,
    c_in: usize,
    c_out: usize,
    geom: PatchGeom,
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, w: Var, b: Option<Var>, s: ConvShape, cols: Vec<T> },
    ConvT { x: Var, w: Var, b: Option<Var>, s: ConvShape, x_cm: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Square(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    SumAll(Var),
    Reshape(Var),
    NarrowCols { x: Var, start: usize, len: usize },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    MeanRows(Var),
    GlobalAvgPool(Var),
    IndexRows { x: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    BceLogits { logits: Var, targets: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch-norm node.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

/// Reverse-mode autodiff tape.
///
/// Build a loss with the op methods, call [`backward`](Graph::backward), then pull
/// parameter gradients per store with [`grads_for`](Graph::grads_for).
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, u64, ParamId)>,
    frozen: Vec<u64>,
    stat_updates: Vec<(u64, ParamId, Tensor<T>)>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn channels_and_spatial(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected at least [batch, channels], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), params: Vec::new(), frozen: Vec::new(), stat_updates: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient can be read back with [`grad`](Self::grad).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.input(t)
    }

    /// Parameters of `store` enter subsequent graphs as constants.
    pub fn freeze(&mut self, store: &ParamStore<T>) {
        self.frozen.push(store.uid());
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let entry = &store.entries()[id.index()];
        let trainable = entry.kind == ParamKind::Trainable && !self.frozen.contains(&store.uid());
        let v = self.push(entry.value.clone(), Op::Leaf, trainable);
        if trainable {
            self.params.push((v.0, store.uid(), id));
        }
        v
    }

    /// Queues a buffer overwrite, applied by [`commit_stats`](Self::commit_stats).
    pub fn record_stat_update(&mut self, store: &ParamStore<T>, id: ParamId, value: Tensor<T>) {
        self.stat_updates.push((store.uid(), id, value));
    }

    pub fn commit_stats(&self, store: &mut ParamStore<T>) {
        for (uid, id, v) in &self.stat_updates {
            if *uid == store.uid() {
                *store.get_mut(*id) = v.clone();
            }
        }
    }

    // ---- dense ----

    /// `x [n, in] * w^T [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        assert_eq!(xs.len(), 2, "linear input must be 2-D, got {xs:?}");
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        assert_eq!(ws[1], inp, "linear weight {ws:?} does not accept {inp} inputs");
        let mut y = vec![T::zero(); n * out];
        matmul_into(
            MatRef::new(self.value(x).data(), n, inp),
            MatRef::new(self.value(w).data(), out, inp).t(),
            &mut y,
            T::zero(),
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(out) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::new(&[n, out], y), Op::Linear { x, w, b }, rg)
    }

    // ---- convolution ----

    /// 2-D convolution; `x [n, c, h, w]`, `w [c_out, c, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be 4-D, got {xs:?}");
        assert_eq!(ws[1], xs[1], "conv2d weight {ws:?} does not match input {xs:?}");
        let k = ws[2];
        let oh = conv_out(xs[2], k, stride, pad).expect("kernel larger than padded input");
        let ow = conv_out(xs[3], k, stride, pad).expect("kernel larger than padded input");
        let geom = PatchGeom { channels: xs[1], img_h: xs[2], img_w: xs[3], pos_h: oh, pos_w: ow, kernel: k, stride, pad };
        let s = ConvShape { n: xs[0], c_in: xs[1], c_out: ws[0], geom };
        let (p, pl) = (geom.positions(), geom.patch_len());
        let mut cols = vec![T::zero(); s.n * p * pl];
        {
            let xd = self.value(x).data();
            for (i, chunk) in cols.chunks_mut(p * pl).enumerate() {
                im2col(&xd[i * geom.img_len()..][..geom.img_len()], &geom, chunk);
            }
        }
        let mut out_cm = vec![T::zero(); s.c_out * s.n * p];
        matmul_into(
            MatRef::new(self.value(w).data(), s.c_out, pl),
            MatRef::new(&cols, s.n * p, pl).t(),
            &mut out_cm,
            T::zero(),
        );
        let mut y = from_channel_major(&out_cm, s.n, s.c_out, p);
        if let Some(b) = b {
            add_channel_bias(&mut y, self.value(b).data(), s.c_out, p);
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::new(&[s.n, s.c_out, oh, ow], y), Op::Conv { x, w, b, s, cols }, rg)
    }

    /// Transposed 2-D convolution; `x [n, c_in, h, w]`, `w [c_in, c_out, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, out_pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv_transpose2d input must be 4-D, got {xs:?}");
        assert_eq!(ws[0], xs[1], "conv_transpose2d weight {ws:?} does not match input {xs:?}");
        let k = ws[2];
        let oh = conv_transpose_out(xs[2], k, stride, pad, out_pad).expect("degenerate output");
        let ow = conv_transpose_out(xs[3], k, stride, pad, out_pad).expect("degenerate output");
        let geom = PatchGeom { channels: ws[1], img_h: oh, img_w: ow, pos_h: xs[2], pos_w: xs[3], kernel: k, stride, pad };
        let s = ConvShape { n: xs[0], c_in: xs[1], c_out: ws[1], geom };
        let (p, pl) = (geom.positions(), geom.patch_len());
        let x_cm = to_channel_major(self.value(x).data(), s.n, s.c_in, p);
        let mut cols = vec![T::zero(); s.n * p * pl];
        matmul_into(
            MatRef::new(&x_cm, s.c_in, s.n * p).t(),
            MatRef::new(self.value(w).data(), s.c_in, pl),
            &mut cols,
            T::zero(),
        );
        let img = geom.img_len();
        let mut y = vec![T::zero(); s.n * img];
        for (i, out) in y.chunks_mut(img).enumerate() {
            col2im(&cols[i * p * pl..][..p * pl], &geom, out);
        }
        if let Some(b) = b {
            add_channel_bias(&mut y, self.value(b).data(), s.c_out, oh * ow);
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::new(&[s.n, s.c_out, oh, ow], y), Op::ConvT { x, w, b, s, x_cm }, rg)
    }

    // ---- normalization ----

    /// Batch norm over dimension 1 using the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats<T>) {
        let (n, c, sp) = channels_and_spatial(self.value(x).shape());
        let m = n * sp;
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                s += xd[(i * c + ch) * sp..][..sp].iter().copied().sum::<T>();
            }
            let mu = s / T::c(m as f64);
            let mut ss = T::zero();
            for i in 0..n {
                for &v in &xd[(i * c + ch) * sp..][..sp] {
                    ss += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = ss;
        }
        let inv_std: Vec<T> = var.iter().map(|&ss| (ss / T::c(m as f64) + T::c(eps)).sqrt().recip()).collect();
        let unbiased: Vec<T> = var.iter().map(|&ss| ss / T::c(m.saturating_sub(1).max(1) as f64)).collect();
        let (y, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        let rg = self.rg(&[x, gamma, beta]);
        let shape = self.value(x).shape().to_vec();
        let v = self.push(
            Tensor::new(&shape, y),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: true },
            rg,
        );
        (v, BatchStats { mean, var: unbiased })
    }

    /// Batch norm with fixed running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Var {
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::c(eps)).sqrt().recip()).collect();
        let (y, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std);
        let rg = self.rg(&[x, gamma, beta]);
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(&shape, y), Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: false }, rg)
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> (Vec<T>, Vec<T>) {
        let (n, c, sp) = channels_and_spatial(self.value(x).shape());
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), c, "batch norm has {} channels, input has {c}", g.len());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * sp;
                for j in off..off + sp {
                    let h = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    y[j] = g[ch] * h + b[ch];
                }
            }
        }
        (y, xhat)
    }

    // ---- elementwise ----

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(v, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::c(s);
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::c(s);
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::c(slope);
        self.unary(a, |x| if x > T::zero() { x } else { x * s }, Op::LeakyRelu(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    // ---- shape and reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape);
        let rg = self.rg(&[a]);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Flattens everything after the batch dimension.
    pub fn flatten(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let shape = [t.rows(), t.row_len()];
        self.reshape(a, &shape)
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let (n, w) = (t.rows(), t.row_len());
        assert!(start + len <= w, "narrow {start}+{len} exceeds {w} columns");
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&t.data()[i * w + start..][..len]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[n, len], data), Op::NarrowCols { x, start, len }, rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.rows();
        assert_eq!(tb.rows(), n, "concat_cols row mismatch");
        let (wa, wb) = (ta.row_len(), tb.row_len());
        let mut data = Vec::with_capacity(n * (wa + wb));
        for i in 0..n {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[n, wa + wb], data), Op::ConcatCols(a, b), rg)
    }

    /// Stacks `b` under `a` along the batch dimension.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape()[1..], tb.shape()[1..], "concat_rows trailing shape mismatch");
        let mut shape = ta.shape().to_vec();
        shape[0] += tb.shape()[0];
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&shape, data), Op::ConcatRows(a, b), rg)
    }

    /// Mean over the batch dimension, keeping it as size one.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, w) = (t.rows(), t.row_len());
        let mut acc = vec![T::zero(); w];
        for i in 0..n {
            for (s, &v) in acc.iter_mut().zip(t.row(i)) {
                *s += v;
            }
        }
        let inv = T::c(1.0 / n.max(1) as f64);
        acc.iter_mut().for_each(|v| *v *= inv);
        let mut shape = t.shape().to_vec();
        shape[0] = 1;
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&shape, acc), Op::MeanRows(a), rg)
    }

    /// `[n, c, h, w]` to `[n, c]` by spatial averaging.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let (n, c, sp) = channels_and_spatial(self.value(a).shape());
        let d = self.value(a).data();
        let inv = T::c(1.0 / sp as f64);
        let data = (0..n * c).map(|j| d[j * sp..][..sp].iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&[n, c], data), Op::GlobalAvgPool(a), rg)
    }

    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x).select_rows(idx);
        let rg = self.rg(&[x]);
        self.push(v, Op::IndexRows { x, idx: idx.to_vec() }, rg)
    }

    // ---- losses ----

    /// Mean softmax cross-entropy of `logits [n, k]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let t = self.value(logits);
        let (n, k) = (t.rows(), t.row_len());
        assert_eq!(labels.len(), n, "one label per row");
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = t.row(i);
            assert!(labels[i] < k, "label {} out of range for {k} classes", labels[i]);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        loss /= T::c(n.max(1) as f64);
        let rg = self.rg(&[logits]);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg)
    }

    /// Mean binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.numel(), targets.len(), "one target per logit");
        let mut loss = T::zero();
        for (&l, &y) in t.data().iter().zip(targets) {
            loss += l.max(T::zero()) - l * y + (-l.abs()).exp().ln_1p();
        }
        loss /= T::c(targets.len().max(1) as f64);
        let rg = self.rg(&[logits]);
        self.push(Tensor::scalar(loss), Op::BceLogits { logits, targets: targets.to_vec() }, rg)
    }

    // ---- backward ----

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Accumulates `d loss / d node` for every node that requires it.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            self.backprop_node(i, &gy);
            self.grads[i] = Some(gy);
        }
    }

    fn acc(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, i: usize, gy: &Tensor<T>) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut out: Vec<(Var, Tensor<T>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (n, inp, o) = (xv.rows(), xv.row_len(), wv.rows());
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * inp];
                    matmul_into(MatRef::new(gy.data(), n, o), MatRef::new(wv.data(), o, inp), &mut dx, T::zero());
                    out.push((*x, Tensor::new(xv.shape(), dx)));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * inp];
                    matmul_into(MatRef::new(gy.data(), n, o).t(), MatRef::new(xv.data(), n, inp), &mut dw, T::zero());
                    out.push((*w, Tensor::new(wv.shape(), dw)));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); o];
                        for row in gy.data().chunks(o) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        out.push((*b, Tensor::new(&[o], db)));
                    }
                }
            }
            Op::Conv { x, w, b, s, cols } => {
                let g = &s.geom;
                let (p, pl) = (g.positions(), g.patch_len());
                let gy_cm = to_channel_major(gy.data(), s.n, s.c_out, p);
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); s.c_out * pl];
                    matmul_into(
                        MatRef::new(&gy_cm, s.c_out, s.n * p),
                        MatRef::new(cols, s.n * p, pl),
                        &mut dw,
                        T::zero(),
                    );
                    out.push((*w, Tensor::new(self.nodes[w.0].value.shape(), dw)));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        out.push((*b, Tensor::new(&[s.c_out], channel_sums(&gy_cm, s.c_out))));
                    }
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); s.n * p * pl];
                    matmul_into(
                        MatRef::new(&gy_cm, s.c_out, s.n * p).t(),
                        MatRef::new(self.nodes[w.0].value.data(), s.c_out, pl),
                        &mut dcols,
                        T::zero(),
                    );
                    let img = g.img_len();
                    let mut dx = vec![T::zero(); s.n * img];
                    for (k, chunk) in dx.chunks_mut(img).enumerate() {
                        col2im(&dcols[k * p * pl..][..p * pl], g, chunk);
                    }
                    out.push((*x, Tensor::new(self.nodes[x.0].value.shape(), dx)));
                }
            }
            Op::ConvT { x, w, b, s, x_cm } => {
                let g = &s.geom;
                let (p, pl) = (g.positions(), g.patch_len());
                let img = g.img_len();
                let mut dcols = vec![T::zero(); s.n * p * pl];
                for (k, chunk) in dcols.chunks_mut(p * pl).enumerate() {
                    im2col(&gy.data()[k * img..][..img], g, chunk);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); s.c_in * pl];
                    matmul_into(
                        MatRef::new(x_cm, s.c_in, s.n * p),
                        MatRef::new(&dcols, s.n * p, pl),
                        &mut dw,
                        T::zero(),
                    );
                    out.push((*w, Tensor::new(self.nodes[w.0].value.shape(), dw)));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let sp = g.img_h * g.img_w;
                        let mut db = vec![T::zero(); s.c_out];
                        for (j, chunk) in gy.data().chunks(sp).enumerate() {
                            db[j % s.c_out] += chunk.iter().copied().sum::<T>();
                        }
                        out.push((*b, Tensor::new(&[s.c_out], db)));
                    }
                }
                if self.needs(*x) {
                    let mut dx_cm = vec![T::zero(); s.c_in * s.n * p];
                    matmul_into(
                        MatRef::new(self.nodes[w.0].value.data(), s.c_in, pl),
                        MatRef::new(&dcols, s.n * p, pl).t(),
                        &mut dx_cm,
                        T::zero(),
                    );
                    let dx = from_channel_major(&dx_cm, s.n, s.c_in, p);
                    out.push((*x, Tensor::new(self.nodes[x.0].value.shape(), dx)));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, sp) = channels_and_spatial(y.shape());
                let gd = gy.data();
                let gam = self.nodes[gamma.0].value.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for k in 0..n {
                    for ch in 0..c {
                        let off = (k * c + ch) * sp;
                        for j in off..off + sp {
                            dgamma[ch] += gd[j] * xhat[j];
                            dbeta[ch] += gd[j];
                        }
                    }
                }
                if self.needs(*x) {
                    let m = T::c((n * sp) as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for k in 0..n {
                        for ch in 0..c {
                            let off = (k * c + ch) * sp;
                            for j in off..off + sp {
                                dx[j] = if *batch_stats {
                                    // dxhat = gy * gamma; sums over dxhat reuse dbeta / dgamma
                                    gam[ch] * inv_std[ch] / m * (m * gd[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    gam[ch] * inv_std[ch] * gd[j]
                                };
                            }
                        }
                    }
                    out.push((*x, Tensor::new(y.shape(), dx)));
                }
                out.push((*gamma, Tensor::new(&[c], dgamma)));
                out.push((*beta, Tensor::new(&[c], dbeta)));
            }
            Op::Add(a, b) => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                out.push((*a, gy.zip_map(bv, |g, v| g * v)));
                out.push((*b, gy.zip_map(av, |g, v| g * v)));
            }
            Op::Scale(a, s) => out.push((*a, gy.map(|g| g * *s))),
            Op::AddScalar(a) => out.push((*a, gy.clone())),
            Op::Exp(a) => out.push((*a, gy.zip_map(y, |g, v| g * v))),
            Op::Square(a) => {
                let two = T::c(2.0);
                out.push((*a, gy.zip_map(&self.nodes[a.0].value, |g, v| g * two * v)));
            }
            Op::Relu(a) => out.push((*a, gy.zip_map(y, |g, v| if v > T::zero() { g } else { T::zero() }))),
            Op::LeakyRelu(a, s) => {
                out.push((*a, gy.zip_map(&self.nodes[a.0].value, |g, v| if v > T::zero() { g } else { g * *s })))
            }
            Op::Sigmoid(a) => out.push((*a, gy.zip_map(y, |g, v| g * v * (T::one() - v)))),
            Op::Tanh(a) => out.push((*a, gy.zip_map(y, |g, v| g * (T::one() - v * v)))),
            Op::SumAll(a) => {
                let g = gy.data()[0];
                out.push((*a, Tensor::full(self.nodes[a.0].value.shape(), g)));
            }
            Op::Reshape(a) => out.push((*a, gy.clone().reshape(self.nodes[a.0].value.shape()))),
            Op::NarrowCols { x, start, len } => {
                let xv = &self.nodes[x.0].value;
                let (n, w) = (xv.rows(), xv.row_len());
                let mut dx = vec![T::zero(); n * w];
                for k in 0..n {
                    dx[k * w + start..][..*len].copy_from_slice(&gy.data()[k * len..][..*len]);
                }
                out.push((*x, Tensor::new(xv.shape(), dx)));
            }
            Op::ConcatRows(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let k = av.numel();
                out.push((*a, Tensor::new(av.shape(), gy.data()[..k].to_vec())));
                out.push((*b, Tensor::new(bv.shape(), gy.data()[k..].to_vec())));
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (n, wa, wb) = (av.rows(), av.row_len(), bv.row_len());
                let mut da = Vec::with_capacity(n * wa);
                let mut db = Vec::with_capacity(n * wb);
                for k in 0..n {
                    let row = gy.row(k);
                    da.extend_from_slice(&row[..wa]);
                    db.extend_from_slice(&row[wa..]);
                }
                out.push((*a, Tensor::new(av.shape(), da)));
                out.push((*b, Tensor::new(bv.shape(), db)));
            }
            Op::MeanRows(a) => {
                let av = &self.nodes[a.0].value;
                let n = av.rows();
                let inv = T::c(1.0 / n.max(1) as f64);
                let row: Vec<T> = gy.data().iter().map(|&g| g * inv).collect();
                let data = (0..n).flat_map(|_| row.iter().copied()).collect();
                out.push((*a, Tensor::new(av.shape(), data)));
            }
            Op::GlobalAvgPool(a) => {
                let av = &self.nodes[a.0].value;
                let (_, _, sp) = channels_and_spatial(av.shape());
                let inv = T::c(1.0 / sp as f64);
                let data = gy.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, sp)).collect();
                out.push((*a, Tensor::new(av.shape(), data)));
            }
            Op::IndexRows { x, idx } => {
                let xv = &self.nodes[x.0].value;
                let w = xv.row_len();
                let mut dx = vec![T::zero(); xv.numel()];
                for (k, &r) in idx.iter().enumerate() {
                    for (d, &g) in dx[r * w..][..w].iter_mut().zip(gy.row(k)) {
                        *d += g;
                    }
                }
                out.push((*x, Tensor::new(xv.shape(), dx)));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let lv = &self.nodes[logits.0].value;
                let (n, k) = (lv.rows(), lv.row_len());
                let scale = gy.data()[0] / T::c(n.max(1) as f64);
                let mut d = probs.clone();
                for (r, &lab) in labels.iter().enumerate() {
                    d[r * k + lab] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                out.push((*logits, Tensor::new(lv.shape(), d)));
            }
            Op::BceLogits { logits, targets } => {
                let lv = &self.nodes[logits.0].value;
                let scale = gy.data()[0] / T::c(targets.len().max(1) as f64);
                let d = lv.data().iter().zip(targets).map(|(&l, &t)| (sigmoid(l) - t) * scale).collect();
                out.push((*logits, Tensor::new(lv.shape(), d)));
            }
        }
        for (v, g) in out {
            self.acc(v, g);
        }
    }

    /// Summed gradients of every trainable parameter of `store` used on this tape.
    pub fn grads_for(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..store.len()).map(|_| None).collect();
        for &(node, uid, id) in &self.params {
            if uid != store.uid() {
                continue;
            }
            if let Some(g) = self.grads.get(node).and_then(|g| g.as_ref()) {
                match &mut out[id.index()] {
                    Some(e) => e.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_channel_bias<T: Element>(y: &mut [T], bias: &[T], c: usize, sp: usize) {
    for (j, chunk) in y.chunks_mut(sp).enumerate() {
        let b = bias[j % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums<T: Element>(cm: &[T], c: usize) -> Vec<T> {
    let w = cm.len() / c.max(1);
    (0..c).map(|ch| cm[ch * w..][..w].iter().copied().sum()).collect()
}
