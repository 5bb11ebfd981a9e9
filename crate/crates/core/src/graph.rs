//! Computation graph with reverse-mode differentiation.
//!
//! Operations are recorded on a tape as they execute (forward values are
//! cached eagerly); [`Graph::backward`] replays the tape in reverse and
//! accumulates exact gradients via the chain rule. Graphs are built fresh per
//! loss evaluation and thrown away, which keeps the engine simple and makes
//! every evaluation independent.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LRelu,
    Tanh,
    Sigmoid,
}

pub const LRELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    MatmulNT { a: NodeId, b: NodeId },
    Act { kind: Activation, x: NodeId },
    SoftmaxRows { x: NodeId },
    EntropyRows { logits: NodeId },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    BceLogit { logits: NodeId, targets: Tensor },
    Mse { a: NodeId, b: NodeId },
    GaussianNoise { x: NodeId },
    Dropout { x: NodeId, scaled_mask: Tensor },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MulElem { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    EmbedRows { table: NodeId, ids: Vec<usize> },
    RowDot { a: NodeId, b: NodeId },
    AddColVec { m: NodeId, v: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    ConcatWide { a: NodeId, b: NodeId },
    Reshape { x: NodeId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    out: Tensor,
    /// Cached intermediate needed by the backward rule (e.g. softmax probs).
    aux: Option<Tensor>,
    needs_grad: bool,
}

/// Forward-pass instrumentation.
#[derive(Debug, Default, Clone)]
pub struct Counters {
    pub disc_trunk_evals: usize,
}

pub struct Graph {
    nodes: Vec<Node>,
    dtype: DType,
    pub counters: Counters,
}

/// Gradient buffers produced by [`Graph::backward`], indexed by node id.
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.slots[id.0].as_ref()
    }

    /// Gradient for a leaf; untouched leaves get zeros of the given shape.
    pub fn for_leaf(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match &self.slots[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

fn dims(t: &Tensor) -> String {
    format!("{:?}", t.shape())
}

impl Graph {
    pub fn new(dtype: DType) -> Self {
        Graph {
            nodes: Vec::new(),
            dtype,
            counters: Counters::default(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].out
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, out: Tensor, aux: Option<Tensor>, needs_grad: bool) -> NodeId {
        let out = out.with_dtype(self.dtype);
        self.nodes.push(Node {
            op,
            out,
            aux,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable leaf: gradients are computed for it.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, None, true)
    }

    /// Constant leaf: gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, None, false)
    }

    /// out = x @ w + b with x: [n,d], w: [d,m], b: [m].
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, d) = (xv.rows(), xv.cols());
        let (wd, m) = (wv.rows(), wv.cols());
        if d != wd || bv.len() != m || xv.shape().len() != 2 || wv.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "affine",
                expected: "x:[n,d] w:[d,m] b:[m]".into(),
                got: format!("x:{} w:{} b:{}", dims(xv), dims(wv), dims(bv)),
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            row.copy_from_slice(bv.data());
            for k in 0..d {
                let xik = xv.at(i, k);
                let wrow = wv.row(k);
                for j in 0..m {
                    row[j] += xik * wrow[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Op::Affine { x, w, b },
            Tensor::new(vec![n, m], out).unwrap(),
            None,
            needs,
        ))
    }

    /// out = a @ b^T with a: [n,f], b: [k,f].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::Dimension {
                op: "matmul_nt",
                expected: "a:[n,f] b:[k,f]".into(),
                got: format!("a:{} b:{}", dims(av), dims(bv)),
            });
        }
        let (n, f, k) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let arow = av.row(i);
            for j in 0..k {
                let brow = bv.row(j);
                let mut s = 0.0;
                for t in 0..f {
                    s += arow[t] * brow[t];
                }
                out[i * k + j] = s;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::MatmulNT { a, b },
            Tensor::new(vec![n, k], out).unwrap(),
            None,
            needs,
        ))
    }

    pub fn activation(&mut self, kind: Activation, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data: Vec<f64> = xv
            .data()
            .iter()
            .map(|&v| match kind {
                Activation::Relu => {
                    if v >= 0.0 {
                        v
                    } else {
                        0.0
                    }
                }
                Activation::LRelu => {
                    if v >= 0.0 {
                        v
                    } else {
                        LRELU_SLOPE * v
                    }
                }
                Activation::Tanh => v.tanh(),
                Activation::Sigmoid => sigmoid(v),
            })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(Op::Act { kind, x }, out, None, needs)
    }

    /// Row-wise softmax with max subtraction; rows sum to 1.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.cols() < 2 {
            return Err(Error::Dimension {
                op: "softmax_rows",
                expected: "[n,k] with k >= 2".into(),
                got: dims(xv),
            });
        }
        if !xv.all_finite() {
            return Err(Error::Numeric("softmax_rows: non-finite logits".into()));
        }
        let out = softmax_matrix(xv);
        let needs = self.needs(x);
        Ok(self.push(Op::SoftmaxRows { x }, out, None, needs))
    }

    /// Mean over rows of the predictive entropy -sum_y p log p, from logits.
    pub fn entropy_rows(&mut self, logits: NodeId) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "entropy_rows",
                expected: "[n,k]".into(),
                got: dims(lv),
            });
        }
        let probs = softmax_matrix(lv);
        let n = lv.rows();
        let mut total = 0.0;
        for i in 0..n {
            for &p in probs.row(i) {
                if p > 0.0 {
                    total -= p * p.ln();
                }
            }
        }
        let out = Tensor::scalar(total / n as f64);
        let needs = self.needs(logits);
        Ok(self.push(Op::EntropyRows { logits }, out, Some(probs), needs))
    }

    /// Mean over rows of -log softmax(logits)[i, labels[i]].
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (n, k) = (lv.rows(), lv.cols());
        if labels.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy",
                expected: format!("{n} labels"),
                got: format!("{}", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
            return Err(Error::Index(format!(
                "cross_entropy: label {bad} out of range [0, {k})"
            )));
        }
        let probs = softmax_matrix(lv);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let out = Tensor::scalar(total / n as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            out,
            Some(probs),
            needs,
        ))
    }

    /// Mean binary cross-entropy from logits, in the stable log-sum-exp form.
    pub fn bce_logit(&mut self, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
        let lv = self.value(logits);
        if !lv.same_shape(targets) {
            return Err(Error::Dimension {
                op: "bce_logit",
                expected: dims(lv),
                got: dims(targets),
            });
        }
        let mut total = 0.0;
        for (&l, &t) in lv.data().iter().zip(targets.data()) {
            total += l.max(0.0) - l * t + (-l.abs()).exp().ln_1p();
        }
        let out = Tensor::scalar(total / lv.len() as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::BceLogit {
                logits,
                targets: targets.clone(),
            },
            out,
            None,
            needs,
        ))
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::Dimension {
                op: "mse",
                expected: dims(av),
                got: dims(bv),
            });
        }
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(total / av.len() as f64);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mse { a, b }, out, None, needs))
    }

    /// x + sigma * N(0,1) in train mode; identity in eval mode or when
    /// sigma = 0. The drawn noise is cached so replays are exact.
    pub fn gaussian_noise(
        &mut self,
        x: NodeId,
        sigma: f64,
        rng: &mut RngStream,
        train: bool,
    ) -> NodeId {
        if !train || sigma == 0.0 {
            return x;
        }
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let noise = Tensor::randn(&shape, sigma, rng);
        let data: Vec<f64> = xv
            .data()
            .iter()
            .zip(noise.data())
            .map(|(a, b)| a + b)
            .collect();
        let out = Tensor::new(shape, data).unwrap();
        let needs = self.needs(x);
        self.push(Op::GaussianNoise { x }, out, None, needs)
    }

    /// Inverted-scaling dropout: kept entries multiplied by 1/keep so the
    /// eval-mode identity preserves expectations.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut RngStream, train: bool) -> NodeId {
        debug_assert!((0.0..1.0).contains(&rate));
        if !train || rate == 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data: Vec<f64> = xv
            .data()
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        let scaled_mask = Tensor::new(shape.clone(), mask).unwrap();
        let out = Tensor::new(shape, data).unwrap();
        let needs = self.needs(x);
        self.push(Op::Dropout { x, scaled_mask }, out, None, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul_elem", a, b, |x, y| x * y, Op::MulElem { a, b })
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::Dimension {
                op: name,
                expected: dims(av),
                got: dims(bv),
            });
        }
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(op, out, None, needs))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data().iter().map(|v| c * v).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(Op::Scale { x, c }, out, None, needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.data().iter().sum());
        let needs = self.needs(x);
        self.push(Op::SumAll { x }, out, None, needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.len() as f64);
        let needs = self.needs(x);
        self.push(Op::MeanAll { x }, out, None, needs)
    }

    /// out[i,:] = table[ids[i],:], with scatter-add gradients into the table.
    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let k = tv.rows();
        if let Some(&bad) = ids.iter().find(|&&c| c >= k) {
            return Err(Error::Index(format!(
                "embed_rows: id {bad} out of range [0, {k})"
            )));
        }
        let out = tv.gather_rows(ids);
        let needs = self.needs(table);
        Ok(self.push(
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            out,
            None,
            needs,
        ))
    }

    /// out[i] = sum_f a[i,f] * b[i,f]  (shape [n]).
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) || av.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "row_dot",
                expected: "matching [n,f]".into(),
                got: format!("a:{} b:{}", dims(av), dims(bv)),
            });
        }
        let (n, f) = (av.rows(), av.cols());
        let mut data = vec![0.0; n];
        for i in 0..n {
            let (ar, br) = (av.row(i), bv.row(i));
            data[i] = (0..f).map(|t| ar[t] * br[t]).sum();
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::RowDot { a, b },
            Tensor::new(vec![n], data).unwrap(),
            None,
            needs,
        ))
    }

    /// out[i,j] = m[i,j] + v[i] with v: [n].
    pub fn add_col_vec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (mv, vv) = (self.value(m), self.value(v));
        if mv.shape().len() != 2 || vv.len() != mv.rows() {
            return Err(Error::Dimension {
                op: "add_col_vec",
                expected: "m:[n,k] v:[n]".into(),
                got: format!("m:{} v:{}", dims(mv), dims(vv)),
            });
        }
        let (n, k) = (mv.rows(), mv.cols());
        let mut data = Vec::with_capacity(n * k);
        for i in 0..n {
            let vi = vv.data()[i];
            data.extend(mv.row(i).iter().map(|x| x + vi));
        }
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push(
            Op::AddColVec { m, v },
            Tensor::new(vec![n, k], data).unwrap(),
            None,
            needs,
        ))
    }

    /// Stack [n] vectors as the columns of an [n, parts] matrix.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: no parts".into()));
        }
        let n = self.value(parts[0]).len();
        for &p in parts {
            let pv = self.value(p);
            if pv.len() != n || pv.shape().len() != 1 {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    expected: format!("[{n}] vectors"),
                    got: dims(pv),
                });
            }
        }
        let k = parts.len();
        let mut data = vec![0.0; n * k];
        for (j, &p) in parts.iter().enumerate() {
            for (i, &v) in self.value(p).data().iter().enumerate() {
                data[i * k + j] = v;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            Tensor::new(vec![n, k], data).unwrap(),
            None,
            needs,
        ))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_wide(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() || av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "concat_wide",
                expected: "matching row counts".into(),
                got: format!("a:{} b:{}", dims(av), dims(bv)),
            });
        }
        let (n, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::ConcatWide { a, b },
            Tensor::new(vec![n, ca + cb], data).unwrap(),
            None,
            needs,
        ))
    }

    /// Same data, new shape (element counts must agree).
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let count: usize = shape.iter().product();
        if count != xv.len() {
            return Err(Error::Dimension {
                op: "reshape",
                expected: format!("{} elements", xv.len()),
                got: format!("{shape:?}"),
            });
        }
        let out = Tensor::new(shape.to_vec(), xv.data().to_vec()).unwrap();
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape { x }, out, None, needs))
    }

    /// Reverse-mode sweep from a scalar loss node. Every node is visited at
    /// most once, in reverse tape order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut slots: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                slots[idx] = None;
                continue;
            }
            let Some(up) = slots[idx].take() else {
                continue;
            };
            self.propagate(idx, &up, &mut slots);
            // Leaf gradients are retained for the caller.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                slots[idx] = Some(up);
            }
        }
        Ok(Gradients { slots })
    }

    fn propagate(&self, idx: usize, up: &Tensor, slots: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let send = |id: NodeId, grad: Tensor, slots: &mut [Option<Tensor>]| {
            if !self.needs(id) {
                return;
            }
            match &mut slots[id.0] {
                Some(acc) => {
                    for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a += g;
                    }
                }
                slot @ None => *slot = Some(grad),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, d, m) = (xv.rows(), xv.cols(), wv.cols());
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let urow = up.row(i);
                        for k in 0..d {
                            let wrow = wv.row(k);
                            let mut s = 0.0;
                            for j in 0..m {
                                s += urow[j] * wrow[j];
                            }
                            dx[i * d + k] = s;
                        }
                    }
                    send(*x, Tensor::new(vec![n, d], dx).unwrap(), slots);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; d * m];
                    for i in 0..n {
                        let urow = up.row(i);
                        for k in 0..d {
                            let xik = xv.at(i, k);
                            let drow = &mut dw[k * m..(k + 1) * m];
                            for j in 0..m {
                                drow[j] += xik * urow[j];
                            }
                        }
                    }
                    send(*w, Tensor::new(vec![d, m], dw).unwrap(), slots);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for (j, u) in up.row(i).iter().enumerate() {
                            db[j] += u;
                        }
                    }
                    send(*b, Tensor::new(vec![m], db).unwrap(), slots);
                }
            }
            Op::MatmulNT { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, f, k) = (av.rows(), av.cols(), bv.rows());
                if self.needs(*a) {
                    let mut da = vec![0.0; n * f];
                    for i in 0..n {
                        let urow = up.row(i);
                        let drow = &mut da[i * f..(i + 1) * f];
                        for j in 0..k {
                            let brow = bv.row(j);
                            let u = urow[j];
                            for t in 0..f {
                                drow[t] += u * brow[t];
                            }
                        }
                    }
                    send(*a, Tensor::new(vec![n, f], da).unwrap(), slots);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * f];
                    for i in 0..n {
                        let urow = up.row(i);
                        let arow = av.row(i);
                        for j in 0..k {
                            let u = urow[j];
                            let drow = &mut db[j * f..(j + 1) * f];
                            for t in 0..f {
                                drow[t] += u * arow[t];
                            }
                        }
                    }
                    send(*b, Tensor::new(vec![k, f], db).unwrap(), slots);
                }
            }
            Op::Act { kind, x } => {
                let xv = self.value(*x);
                let yv = &node.out;
                let data: Vec<f64> = match kind {
                    Activation::Relu => xv
                        .data()
                        .iter()
                        .zip(up.data())
                        .map(|(&v, &u)| if v >= 0.0 { u } else { 0.0 })
                        .collect(),
                    Activation::LRelu => xv
                        .data()
                        .iter()
                        .zip(up.data())
                        .map(|(&v, &u)| if v >= 0.0 { u } else { LRELU_SLOPE * u })
                        .collect(),
                    Activation::Tanh => yv
                        .data()
                        .iter()
                        .zip(up.data())
                        .map(|(&y, &u)| u * (1.0 - y * y))
                        .collect(),
                    Activation::Sigmoid => yv
                        .data()
                        .iter()
                        .zip(up.data())
                        .map(|(&y, &u)| u * y * (1.0 - y))
                        .collect(),
                };
                send(*x, Tensor::new(xv.shape().to_vec(), data).unwrap(), slots);
            }
            Op::SoftmaxRows { x } => {
                let yv = &node.out;
                let (n, k) = (yv.rows(), yv.cols());
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    let (yr, ur) = (yv.row(i), up.row(i));
                    let dot: f64 = (0..k).map(|j| yr[j] * ur[j]).sum();
                    for j in 0..k {
                        dx[i * k + j] = yr[j] * (ur[j] - dot);
                    }
                }
                send(*x, Tensor::new(vec![n, k], dx).unwrap(), slots);
            }
            Op::EntropyRows { logits } => {
                let probs = node.aux.as_ref().unwrap();
                let (n, k) = (probs.rows(), probs.cols());
                let g = up.item() / n as f64;
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    let pr = probs.row(i);
                    let h: f64 = pr
                        .iter()
                        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                        .sum();
                    for j in 0..k {
                        let p = pr[j];
                        if p > 0.0 {
                            dx[i * k + j] = -g * p * (p.ln() + h);
                        }
                    }
                }
                send(*logits, Tensor::new(vec![n, k], dx).unwrap(), slots);
            }
            Op::CrossEntropy { logits, labels } => {
                let probs = node.aux.as_ref().unwrap();
                let (n, k) = (probs.rows(), probs.cols());
                let g = up.item() / n as f64;
                let mut dx = probs.data().to_vec();
                for (i, &y) in labels.iter().enumerate() {
                    dx[i * k + y] -= 1.0;
                }
                for v in &mut dx {
                    *v *= g;
                }
                send(*logits, Tensor::new(vec![n, k], dx).unwrap(), slots);
            }
            Op::BceLogit { logits, targets } => {
                let lv = self.value(*logits);
                let g = up.item() / lv.len() as f64;
                let data: Vec<f64> = lv
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&l, &t)| g * (sigmoid(l) - t))
                    .collect();
                send(*logits, Tensor::new(lv.shape().to_vec(), data).unwrap(), slots);
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let g = 2.0 * up.item() / av.len() as f64;
                if self.needs(*a) {
                    let da: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| g * (x - y))
                        .collect();
                    send(*a, Tensor::new(av.shape().to_vec(), da).unwrap(), slots);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| -g * (x - y))
                        .collect();
                    send(*b, Tensor::new(bv.shape().to_vec(), db).unwrap(), slots);
                }
            }
            Op::GaussianNoise { x } => {
                send(*x, up.clone(), slots);
            }
            Op::Dropout { x, scaled_mask } => {
                let data: Vec<f64> = up
                    .data()
                    .iter()
                    .zip(scaled_mask.data())
                    .map(|(u, m)| u * m)
                    .collect();
                send(*x, Tensor::new(up.shape().to_vec(), data).unwrap(), slots);
            }
            Op::Add { a, b } => {
                send(*a, up.clone(), slots);
                send(*b, up.clone(), slots);
            }
            Op::Sub { a, b } => {
                send(*a, up.clone(), slots);
                let neg: Vec<f64> = up.data().iter().map(|v| -v).collect();
                send(*b, Tensor::new(up.shape().to_vec(), neg).unwrap(), slots);
            }
            Op::MulElem { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da: Vec<f64> = up
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(u, y)| u * y)
                        .collect();
                    send(*a, Tensor::new(up.shape().to_vec(), da).unwrap(), slots);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = up
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(u, x)| u * x)
                        .collect();
                    send(*b, Tensor::new(up.shape().to_vec(), db).unwrap(), slots);
                }
            }
            Op::Scale { x, c } => {
                let data: Vec<f64> = up.data().iter().map(|u| c * u).collect();
                send(*x, Tensor::new(up.shape().to_vec(), data).unwrap(), slots);
            }
            Op::SumAll { x } => {
                let xv = self.value(*x);
                send(*x, Tensor::full(xv.shape(), up.item()), slots);
            }
            Op::MeanAll { x } => {
                let xv = self.value(*x);
                send(*x, Tensor::full(xv.shape(), up.item() / xv.len() as f64), slots);
            }
            Op::EmbedRows { table, ids } => {
                let tv = self.value(*table);
                let (k, f) = (tv.rows(), tv.cols());
                let mut dt = vec![0.0; k * f];
                for (i, &id) in ids.iter().enumerate() {
                    let urow = up.row(i);
                    let drow = &mut dt[id * f..(id + 1) * f];
                    for t in 0..f {
                        drow[t] += urow[t];
                    }
                }
                send(*table, Tensor::new(vec![k, f], dt).unwrap(), slots);
            }
            Op::RowDot { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, f) = (av.rows(), av.cols());
                if self.needs(*a) {
                    let mut da = vec![0.0; n * f];
                    for i in 0..n {
                        let u = up.data()[i];
                        let brow = bv.row(i);
                        for t in 0..f {
                            da[i * f + t] = u * brow[t];
                        }
                    }
                    send(*a, Tensor::new(vec![n, f], da).unwrap(), slots);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; n * f];
                    for i in 0..n {
                        let u = up.data()[i];
                        let arow = av.row(i);
                        for t in 0..f {
                            db[i * f + t] = u * arow[t];
                        }
                    }
                    send(*b, Tensor::new(vec![n, f], db).unwrap(), slots);
                }
            }
            Op::AddColVec { m, v } => {
                let (n, k) = (up.rows(), up.cols());
                send(*m, up.clone(), slots);
                if self.needs(*v) {
                    let mut dv = vec![0.0; n];
                    for i in 0..n {
                        dv[i] = up.row(i).iter().sum();
                    }
                    send(*v, Tensor::new(vec![n], dv).unwrap(), slots);
                }
                let _ = k;
            }
            Op::ConcatCols { parts } => {
                let n = up.rows();
                for (j, &p) in parts.iter().enumerate() {
                    if self.needs(p) {
                        let dp: Vec<f64> = (0..n).map(|i| up.at(i, j)).collect();
                        send(p, Tensor::new(vec![n], dp).unwrap(), slots);
                    }
                }
            }
            Op::Reshape { x } => {
                let xv = self.value(*x);
                send(
                    *x,
                    Tensor::new(xv.shape().to_vec(), up.data().to_vec()).unwrap(),
                    slots,
                );
            }
            Op::ConcatWide { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, ca, cb) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(n * ca);
                    for i in 0..n {
                        da.extend_from_slice(&up.row(i)[..ca]);
                    }
                    send(*a, Tensor::new(vec![n, ca], da).unwrap(), slots);
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(n * cb);
                    for i in 0..n {
                        db.extend_from_slice(&up.row(i)[ca..]);
                    }
                    send(*b, Tensor::new(vec![n, cb], db).unwrap(), slots);
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(x)) without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_matrix(logits: &Tensor) -> Tensor {
    let (n, k) = (logits.rows(), logits.cols());
    let mut data = vec![0.0; n * k];
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut data[i * k..(i + 1) * k];
        let mut sum = 0.0;
        for (o, &l) in out.iter_mut().zip(row) {
            *o = (l - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(vec![n, k], data).unwrap()
}
