//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation evaluates eagerly and records what its backward pass
//! needs. Parameters enter the tape as borrowed leaves, so building a graph
//! never copies a parameter store.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::numkernel::tensor::Tensor;
use crate::scalar::{gemm, MatRef, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Query rows `q` attend to key rows `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q: Range<usize>,
    pub k: Range<usize>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, segs: Vec<AttnSegment>, heads: usize, probs: Vec<Vec<T>> },
    Dropout { x: Var, mask: Vec<T> },
    Mse { pred: Var, target: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum(Var),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Grads<T> {
    pub map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }

    /// Adds `other` into `self` in key order.
    pub fn accumulate(&mut self, other: Grads<T>) {
        for (k, v) in other.map {
            match self.map.get_mut(&k) {
                Some(acc) => acc.add_assign(&v),
                None => {
                    self.map.insert(k, v);
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    named: Vec<(String, Var)>,
    by_name: HashMap<String, Var>,
    train: bool,
    rng: ChaCha8Rng,
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of(0.797_884_560_802_865_4);
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    let one = T::one();
    let x3 = x * x * x;
    let inner = c * (x + a * x3);
    let th = inner.tanh();
    let y = half * x * (one + th);
    let dinner = c * (one + T::of(3.0) * a * x * x);
    let dy = half * (one + th) + half * x * (one - th * th) * dinner;
    (y, dy)
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// Evaluation tape: dropout disabled.
    pub fn eval() -> Self {
        Self::with_mode(false, 0)
    }

    /// Training tape: dropout active, driven by `seed`.
    pub fn train(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    fn with_mode(train: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            named: Vec::new(),
            by_name: HashMap::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Named leaf borrowed from a parameter store. Repeated requests for the
    /// same name return the same node.
    pub fn param(&mut self, name: &str, t: &'a Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.by_name.get(name) {
            return v;
        }
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, requires_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.by_name.insert(name.to_string(), v);
        if trainable {
            self.named.push((name.to_string(), v));
        }
        v
    }

    /// Named owned leaf that receives a gradient (inputs under test).
    pub fn variable(&mut self, name: &str, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Leaf, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.by_name.insert(name.to_string(), v);
        self.named.push((name.to_string(), v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::Shape(format!(
                "matmul {}x{} · {}x{}",
                av.rows(),
                av.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let (m, n) = (av.rows(), bv.cols());
        let mut out = vec![T::zero(); m * n];
        gemm(av.view(), bv.view(), T::zero(), &mut out);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b` with `w` stored as `in × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.rows() {
            return Err(Error::Shape(format!(
                "linear input {} columns, weight {}x{}",
                xv.cols(),
                wv.rows(),
                wv.cols()
            )));
        }
        let (m, n) = (xv.rows(), wv.cols());
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(Error::Shape(format!("bias of {} for {} outputs", bv.len(), n)));
            }
            for r in 0..m {
                out[r * n..(r + 1) * n].copy_from_slice(bv.data());
            }
            gemm(xv.view(), wv.view(), T::one(), &mut out);
        } else {
            gemm(xv.view(), wv.view(), T::zero(), &mut out);
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Linear { x, w, b }, &parents))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() || av.cols() != bv.cols() {
            return Err(Error::Shape(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let n = av.cols();
        if rv.len() != n {
            return Err(Error::Shape(format!("add_row {:?} + {:?}", av.shape(), rv.shape())));
        }
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(rv.data()) {
                *x += *y;
            }
        }
        let t = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::Shape(format!("mul {:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x * *y).collect();
        let t = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| *x * s).collect();
        let t = Tensor::from_vec(av.shape(), data).expect("same shape");
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| gelu_parts(*x).0).collect();
        let t = Tensor::from_vec(av.shape(), data).expect("same shape");
        self.push(t, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalization followed by `gamma`/`beta` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, n) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != n || bv.len() != n {
            return Err(Error::Shape(format!("layer_norm width {} vs gamma {}", n, gv.len())));
        }
        let eps = T::of(1e-5);
        let nf = T::of(n as f64);
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let t = Tensor::from_vec(xv.shape(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Rows `ids` of `table`, stacked.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let rows = tv.rows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: rows });
        }
        let t = tv.select_rows(ids);
        Ok(self.push(t, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::Shape("concat_cols row counts differ".into()));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Multi-head scaled dot-product attention over independent segments.
    /// `causal` masks keys after the query position (requires equal-length
    /// segments). Rows of `q` outside every segment produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segs: &[AttnSegment],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (d, dv) = (qv.cols(), vv.cols());
        if kv.cols() != d || kv.rows() != vv.rows() || heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(Error::Shape(format!(
                "attention q {:?} k {:?} v {:?} heads {}",
                qv.shape(),
                kv.shape(),
                vv.shape(),
                heads
            )));
        }
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = vec![T::zero(); qv.rows() * dv];
        let mut probs = Vec::with_capacity(segs.len() * heads);
        for seg in segs {
            if seg.q.end > qv.rows() || seg.k.end > kv.rows() || seg.k.is_empty() {
                return Err(Error::Shape(format!("attention segment {:?} out of bounds", seg)));
            }
            let (nq, nk) = (seg.q.len(), seg.k.len());
            if causal && nq != nk {
                return Err(Error::Shape("causal attention needs square segments".into()));
            }
            for h in 0..heads {
                let mut p = vec![T::zero(); nq * nk];
                for i in 0..nq {
                    let qrow = &qv.row(seg.q.start + i)[h * dh..(h + 1) * dh];
                    let limit = if causal { i + 1 } else { nk };
                    let mut mx = T::neg_infinity();
                    for j in 0..limit {
                        let krow = &kv.row(seg.k.start + j)[h * dh..(h + 1) * dh];
                        let s = qrow.iter().zip(krow).map(|(a, b)| *a * *b).sum::<T>() * scale;
                        p[i * nk + j] = s;
                        if s > mx {
                            mx = s;
                        }
                    }
                    let mut z = T::zero();
                    for j in 0..limit {
                        let e = (p[i * nk + j] - mx).exp();
                        p[i * nk + j] = e;
                        z += e;
                    }
                    for j in 0..limit {
                        p[i * nk + j] /= z;
                    }
                    let orow = &mut out[(seg.q.start + i) * dv + h * dvh..(seg.q.start + i) * dv + (h + 1) * dvh];
                    for j in 0..limit {
                        let w = p[i * nk + j];
                        let vrow = &vv.row(seg.k.start + j)[h * dvh..(h + 1) * dvh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w * *x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let t = Tensor::matrix(qv.rows(), dv, out)?;
        let op = Op::Attention { q, k, v, segs: segs.to_vec(), heads, probs };
        Ok(self.push(t, op, &[q, k, v]))
    }

    /// Attention weights recorded by an attention node, one `nq×nk` matrix per
    /// (segment, head) in segment-major order.
    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<T>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Inverted dropout. Identity on evaluation tapes or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| *a * *m).collect();
        let t = Tensor::from_vec(xv.shape(), data).expect("same shape");
        self.push(t, Op::Dropout { x, mask }, &[x])
    }

    /// Mean squared error against a constant target, averaged over elements.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(Error::Shape(format!("mse {:?} vs {:?}", pv.shape(), target.shape())));
        }
        let n = T::of(pv.len().max(1) as f64);
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum::<T>()
            / n;
        let op = Op::Mse { pred, target: target.data().to_vec() };
        Ok(self.push(Tensor::scalar(loss), op, &[pred]))
    }

    /// Softmax cross-entropy, averaged over rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, n) = (lv.rows(), lv.cols());
        if rows != targets.len() {
            return Err(Error::Shape(format!("cross_entropy {} rows, {} targets", rows, targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: n });
        }
        let mut probs = vec![T::zero(); rows * n];
        let mut loss = T::zero();
        for r in 0..rows {
            let row = lv.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..n {
                let e = (row[c] - mx).exp();
                probs[r * n + c] = e;
                z += e;
            }
            for c in 0..n {
                probs[r * n + c] /= z;
            }
            loss += -(row[targets[r]] - mx - z.ln());
        }
        let loss = if rows > 0 { loss / T::of(rows as f64) } else { T::zero() };
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Gradients of scalar `loss` with respect to every named trainable leaf.
    /// Leaves the loss does not reach receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::NoForward("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut map = BTreeMap::new();
        for (name, v) in &self.named {
            let shape = self.nodes[v.0].value.shape().to_vec();
            let g = match grads.get(v.0).and_then(|g| g.clone()) {
                Some(g) => Tensor::from_vec(&shape, g)?,
                None => Tensor::zeros(&shape),
            };
            map.insert(name.clone(), g);
        }
        Ok(Grads { map })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let gm = MatRef::new(g, out.rows(), out.cols());
                if self.wants(*a) {
                    let acc = slot(grads, *a, av.len());
                    gemm(gm, bv.view().t(), T::one(), acc);
                }
                if self.wants(*b) {
                    let acc = slot(grads, *b, bv.len());
                    gemm(av.view().t(), gm, T::one(), acc);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let gm = MatRef::new(g, out.rows(), out.cols());
                if self.wants(*x) {
                    let acc = slot(grads, *x, xv.len());
                    gemm(gm, wv.view().t(), T::one(), acc);
                }
                if self.wants(*w) {
                    let acc = slot(grads, *w, wv.len());
                    gemm(xv.view().t(), gm, T::one(), acc);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let n = out.cols();
                        let acc = slot(grads, *b, n);
                        for row in g.chunks(n) {
                            for (a, v) in acc.iter_mut().zip(row) {
                                *a += *v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.wants(*p) {
                        let acc = slot(grads, *p, g.len());
                        for (x, y) in acc.iter_mut().zip(g) {
                            *x += *y;
                        }
                    }
                }
            }
            Op::AddRow(a, r) => {
                if self.wants(*a) {
                    let acc = slot(grads, *a, g.len());
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += *y;
                    }
                }
                if self.wants(*r) {
                    let n = out.cols();
                    let acc = slot(grads, *r, n);
                    for row in g.chunks(n) {
                        for (x, y) in acc.iter_mut().zip(row) {
                            *x += *y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let acc = slot(grads, *a, g.len());
                    for ((x, y), o) in acc.iter_mut().zip(g).zip(bv) {
                        *x += *y * *o;
                    }
                }
                if self.wants(*b) {
                    let acc = slot(grads, *b, g.len());
                    for ((x, y), o) in acc.iter_mut().zip(g).zip(av) {
                        *x += *y * *o;
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    let acc = slot(grads, *a, g.len());
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += *y * *s;
                    }
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let av = self.value(*a).data();
                    let acc = slot(grads, *a, g.len());
                    for ((x, y), v) in acc.iter_mut().zip(g).zip(av) {
                        *x += *y * gelu_parts(*v).1;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = out.cols();
                let rows = out.rows();
                let gv = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let acc = slot(grads, *gamma, n);
                    for r in 0..rows {
                        for c in 0..n {
                            acc[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if self.wants(*beta) {
                    let acc = slot(grads, *beta, n);
                    for r in 0..rows {
                        for c in 0..n {
                            acc[c] += g[r * n + c];
                        }
                    }
                }
                if self.wants(*x) {
                    let nf = T::of(n as f64);
                    let acc = slot(grads, *x, rows * n);
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..n {
                            let d = g[r * n + c] * gv[c];
                            dxhat[c] = d;
                            s1 += d;
                            s2 += d * xhat[r * n + c];
                        }
                        for c in 0..n {
                            acc[r * n + c] +=
                                rstd[r] / nf * (nf * dxhat[c] - s1 - xhat[r * n + c] * s2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let tv = self.value(*table);
                    let n = tv.cols();
                    let acc = slot(grads, *table, tv.len());
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..n {
                            acc[id * n + c] += g[r * n + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        let acc = slot(grads, *p, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                acc[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Attention { q, k, v, segs, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, segs, *heads, probs, grads);
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let acc = slot(grads, *x, g.len());
                    for ((a, y), m) in acc.iter_mut().zip(g).zip(mask) {
                        *a += *y * *m;
                    }
                }
            }
            Op::Mse { pred, target } => {
                if self.wants(*pred) {
                    let pv = self.value(*pred).data();
                    let n = T::of(pv.len().max(1) as f64);
                    let two = T::of(2.0);
                    let acc = slot(grads, *pred, pv.len());
                    for ((a, p), t) in acc.iter_mut().zip(pv).zip(target) {
                        *a += g[0] * two * (*p - *t) / n;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let lv = self.value(*logits);
                    let (rows, n) = (lv.rows(), lv.cols());
                    let scale = g[0] / T::of(rows.max(1) as f64);
                    let acc = slot(grads, *logits, rows * n);
                    for r in 0..rows {
                        for c in 0..n {
                            let mut d = probs[r * n + c];
                            if c == targets[r] {
                                d -= T::one();
                            }
                            acc[r * n + c] += d * scale;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).len();
                    let acc = slot(grads, *a, n);
                    for x in acc.iter_mut() {
                        *x += g[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        segs: &[AttnSegment],
        heads: usize,
        probs: &[Vec<T>],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (d, dv) = (qv.cols(), vv.cols());
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dvv = vec![T::zero(); vv.len()];
        for (si, seg) in segs.iter().enumerate() {
            let (nq, nk) = (seg.q.len(), seg.k.len());
            for h in 0..heads {
                let p = &probs[si * heads + h];
                let mut ds = vec![T::zero(); nq * nk];
                for i in 0..nq {
                    let qi = seg.q.start + i;
                    let grow = &g[qi * dv + h * dvh..qi * dv + (h + 1) * dvh];
                    let mut dot = T::zero();
                    for j in 0..nk {
                        let pij = p[i * nk + j];
                        if pij == T::zero() {
                            continue;
                        }
                        let kj = seg.k.start + j;
                        let vrow = &vv.row(kj)[h * dvh..(h + 1) * dvh];
                        let dp = grow.iter().zip(vrow).map(|(a, b)| *a * *b).sum::<T>();
                        ds[i * nk + j] = dp;
                        dot += pij * dp;
                        let dvrow = &mut dvv[kj * dv + h * dvh..kj * dv + (h + 1) * dvh];
                        for (a, b) in dvrow.iter_mut().zip(grow) {
                            *a += pij * *b;
                        }
                    }
                    for j in 0..nk {
                        let pij = p[i * nk + j];
                        ds[i * nk + j] = pij * (ds[i * nk + j] - dot) * scale;
                    }
                }
                for i in 0..nq {
                    let qi = seg.q.start + i;
                    for j in 0..nk {
                        let s = ds[i * nk + j];
                        if s == T::zero() {
                            continue;
                        }
                        let kj = seg.k.start + j;
                        let krow = &kv.row(kj)[h * dh..(h + 1) * dh];
                        let qrow = &qv.row(qi)[h * dh..(h + 1) * dh];
                        let dqrow = &mut dq[qi * d + h * dh..qi * d + (h + 1) * dh];
                        for (a, b) in dqrow.iter_mut().zip(krow) {
                            *a += s * *b;
                        }
                        let dkrow = &mut dk[kj * d + h * dh..kj * d + (h + 1) * dh];
                        for (a, b) in dkrow.iter_mut().zip(qrow) {
                            *a += s * *b;
                        }
                    }
                }
            }
        }
        for (var, part) in [(q, dq), (k, dk), (v, dvv)] {
            if self.wants(var) {
                let acc = slot(grads, var, part.len());
                for (a, b) in acc.iter_mut().zip(&part) {
                    *a += *b;
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let p = Tensor::<f64>::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        let mut tape = Tape::eval();
        let v = tape.param("p", &p, true);
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert!(g.get("p").unwrap().data().iter().all(|x| *x == 1.0));
    }

    #[test]
    fn mse_with_itself_has_zero_gradient() {
        let p = Tensor::<f64>::matrix(1, 4, vec![0.3, -1.0, 2.0, 7.0]).unwrap();
        let mut tape = Tape::eval();
        let v = tape.param("p", &p, true);
        let l = tape.mse(v, &p).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let g = tape.backward(l).unwrap();
        assert!(g.get("p").unwrap().data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let a = Tensor::<f64>::scalar(2.0);
        let b = Tensor::<f64>::scalar(3.0);
        let mut tape = Tape::eval();
        let va = tape.param("a", &a, true);
        let _vb = tape.param("b", &b, true);
        let s = tape.sum(va);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("b").unwrap().item(), 0.0);
        assert_eq!(g.get("a").unwrap().item(), 1.0);
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let tape = Tape::<f64>::eval();
        assert!(matches!(tape.backward(Var(0)), Err(Error::NoForward(_))));
    }

    #[test]
    fn causal_attention_rows_normalize() {
        let x = Tensor::<f64>::matrix(3, 4, (0..12).map(|v| (v as f64 * 0.37).cos()).collect()).unwrap();
        let mut tape = Tape::eval();
        let xv = tape.constant(x);
        let seg = AttnSegment { q: 0..3, k: 0..3 };
        let a = tape.attention(xv, xv, xv, &[seg], 2, true).unwrap();
        for p in tape.attention_probs(a).unwrap() {
            for i in 0..3 {
                let row = &p[i * 3..i * 3 + 3];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (j, &w) in row.iter().enumerate() {
                    if j > i {
                        assert_eq!(w, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Tensor::<f64>::matrix(2, 5, vec![1.0, 2.0, 3.0, 4.0, 10.0, -3.0, 0.0, 0.1, 5.0, 2.0]).unwrap();
        let gamma = Tensor::filled(&[5], 1.0);
        let beta = Tensor::zeros(&[5]);
        let mut tape = Tape::eval();
        let (xv, gv, bv) = (tape.constant(x), tape.constant(gamma), tape.constant(beta));
        let y = tape.layer_norm(xv, gv, bv).unwrap();
        let out = tape.value(y);
        for r in 0..2 {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
