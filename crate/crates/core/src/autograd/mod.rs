//! Reverse-mode differentiation over the closed set of primitives the
//! objective needs.
//!
//! A [`Tape`] records every operation in execution order, so node inputs
//! always precede the node. [`Tape::backward`] walks the record in reverse
//! from one scalar root and returns the adjoint of every node.
//!
//! Non-differentiable points take subgradient 0 (ReLU/hinge at 0, the GeM
//! floor, zero-length norms). Min/max selection uses the first attaining
//! index. The tape also tracks how close the forward pass came to any of
//! these kinks, see [`Tape::kink_margin`], so finite-difference checks can
//! reject samples that straddle one.

mod conv;
pub mod gradcheck;

pub use conv::ConvGeometry;

use crate::error::{Error, Result};
use crate::field::{self, GEM_FLOOR, MINMAX_EPS};
use crate::linalg;

/// A dense array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} values",
            data.len()
        );
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `x[m, n] * s[m]` broadcast along rows.
    MulRows(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    NormalizeRows {
        x: Var,
        d: usize,
        eps: f64,
        norms: Vec<f64>,
    },
    RowNorm {
        x: Var,
        d: usize,
    },
    Softmax {
        x: Var,
        n: usize,
        beta: f64,
    },
    MinMax {
        x: Var,
        lo: usize,
        hi: usize,
        degenerate: bool,
    },
    Gem {
        x: Var,
        s: usize,
        d: usize,
        p: f64,
    },
    /// Leaky slope below zero; 0 is a plain ReLU.
    Relu(Var, f64),
    Sum(Var),
    Mean(Var),
    Dot(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        k: usize,
        labels: Vec<usize>,
    },
    ColMean {
        x: Var,
        d: usize,
    },
    ColVar {
        x: Var,
        d: usize,
        mean: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        mean: Var,
        var: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    Slice {
        x: Var,
        offset: usize,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    PairDist {
        x: Var,
        n: usize,
        d: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulRows(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _) | Op::AddScalar(x) | Op::Relu(x, _) | Op::Sum(x) | Op::Mean(x) | Op::Dot(x, _) | Op::Reshape(x) => {
                vec![*x]
            }
            Op::NormalizeRows { x, .. }
            | Op::RowNorm { x, .. }
            | Op::Softmax { x, .. }
            | Op::MinMax { x, .. }
            | Op::Gem { x, .. }
            | Op::ColMean { x, .. }
            | Op::ColVar { x, .. }
            | Op::Slice { x, .. }
            | Op::PairDist { x, .. }
            | Op::Gather { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::BatchNorm { x, mean, var, gamma, beta, .. } => vec![*x, *mean, *var, *gamma, *beta],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Concat(v) => v.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulRows(..) => "mul_rows",
            Op::MatMul { .. } => "matmul",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::RowNorm { .. } => "row_norm",
            Op::Softmax { .. } => "softmax",
            Op::MinMax { .. } => "minmax_normalize",
            Op::Gem { .. } => "gem_pool",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Dot(..) => "dot",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ColMean { .. } => "col_mean",
            Op::ColVar { .. } => "col_var",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Slice { .. } => "slice",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::PairDist { .. } => "pair_dist",
            Op::Gather { .. } => "gather",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_margin: f64,
}

/// Adjoints of every node for one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when the root does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Smallest distance of any recorded input to a non-differentiable point.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Records a kink distance for a selection made outside the tape.
    pub fn note_kink(&mut self, distance: f64) {
        self.kink_margin = self.kink_margin.min(distance.abs());
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t)
    }

    /// Copies the value of `x` as a constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: operand shapes differ");
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor::new(
            ta.shape.clone(),
            ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x * s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x + s);
        self.push(Op::AddScalar(a), v)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn mul_rows(&mut self, x: Var, s: Var) -> Var {
        let m = self.value(s).len();
        let tx = self.value(x);
        assert!(m > 0 && tx.len().is_multiple_of(m), "mul_rows: {:?} by {m} rows", tx.shape);
        let n = tx.len() / m;
        let sv = &self.value(s).data;
        let data = tx
            .data
            .chunks_exact(n)
            .zip(sv)
            .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
            .collect();
        let t = Tensor::new(tx.shape.clone(), data);
        self.push(Op::MulRows(x, s), t)
    }

    /// `op(a) · op(b)` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs 2-D operands");
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul inner dimension {sa:?} x {sb:?}");
        let data = linalg::matmul(self.data(a), self.data(b), m, k, n, ta, tb);
        self.push(Op::MatMul { a, b, m, k, n, ta, tb }, Tensor::new(vec![m, n], data))
    }

    /// Rows of `x` (last axis) divided by their L2 norm floored at `eps`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let d = *t.shape.last().expect("normalize_rows on scalar");
        let (data, norms) = linalg::normalize_rows(&t.data, d, eps);
        let shape = t.shape.clone();
        let margin = norms.iter().map(|n| (n - eps).abs()).fold(f64::INFINITY, f64::min);
        self.note_kink(margin);
        self.push(Op::NormalizeRows { x, d, eps, norms }, Tensor::new(shape, data))
    }

    /// L2 norm along the last axis.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let y = self.row_norm_untracked(x);
        let margin = self.data(y).iter().copied().fold(f64::INFINITY, f64::min);
        self.note_kink(margin);
        y
    }

    /// Like [`Tape::row_norm`] but leaves the kink margin to the caller,
    /// for rows that are zero by construction.
    pub fn row_norm_untracked(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape.last().expect("row_norm on scalar");
        let data = field::row_norms(&t.data, d);
        let shape = t.shape[..t.shape.len() - 1].to_vec();
        self.push(Op::RowNorm { x, d }, Tensor::new(shape, data))
    }

    /// Softmax of `beta * x` along the last axis.
    pub fn softmax(&mut self, x: Var, beta: f64) -> Var {
        let t = self.value(x);
        let n = *t.shape.last().expect("softmax on scalar");
        let data = linalg::softmax_rows(&t.data, n, beta);
        let shape = t.shape.clone();
        self.push(Op::Softmax { x, n, beta }, Tensor::new(shape, data))
    }

    /// Min-max normalization over every entry of `x`.
    pub fn minmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (lo, lo_i, hi, hi_i) = field::extrema(&t.data);
        let degenerate = hi - lo < MINMAX_EPS;
        let data = field::minmax_slice(&t.data);
        let shape = t.shape.clone();
        let mut margin = f64::INFINITY;
        if degenerate {
            margin = t.data.iter().map(|v| v.abs().min((v - 1.0).abs())).fold(margin, f64::min);
        } else {
            for (i, &v) in t.data.iter().enumerate() {
                if i != lo_i {
                    margin = margin.min(v - lo);
                }
                if i != hi_i {
                    margin = margin.min(hi - v);
                }
            }
        }
        self.note_kink(margin);
        let op = Op::MinMax {
            x,
            lo: lo_i,
            hi: hi_i,
            degenerate,
        };
        self.push(op, Tensor::new(shape, data))
    }

    /// GeM pooling of `[n, s, d]` (or `[s, d]`) over the `s` axis.
    pub fn gem(&mut self, x: Var, p: f64) -> Var {
        let t = self.value(x);
        let (n, s, d) = match t.shape.as_slice() {
            [s, d] => (1, *s, *d),
            [n, s, d] => (*n, *s, *d),
            other => panic!("gem expects [n, s, d], got {other:?}"),
        };
        let mut data = Vec::with_capacity(n * d);
        for chunk in t.data.chunks_exact(s * d) {
            data.extend(field::gem_slice(chunk, s, d, p));
        }
        let margin = t.data.iter().map(|v| (v - GEM_FLOOR).abs()).fold(f64::INFINITY, f64::min);
        let shape = if t.shape.len() == 2 { vec![d] } else { vec![n, d] };
        self.note_kink(margin);
        self.push(Op::Gem { x, s, d, p }, Tensor::new(shape, data))
    }

    /// `max(0, x)`, also used as the hinge `[·]₊`.
    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    /// `x` where positive, `slope * x` elsewhere.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let margin = self.data(x).iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        self.note_kink(margin);
        self.leaky_relu_untracked(x, slope)
    }

    /// Like [`Tape::leaky_relu`] but does not contribute to the kink
    /// margin. Used inside the feature extractor, where pre-activations
    /// cross zero constantly and finite-difference checks are not run.
    pub fn leaky_relu_untracked(&mut self, x: Var, slope: f64) -> Var {
        let v = self.map(x, |a| if a > 0.0 { a } else { slope * a });
        self.push(Op::Relu(x, slope), v)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    /// `Σ x ⊙ w` against a constant weight array.
    pub fn dot_const(&mut self, x: Var, w: Vec<f64>) -> Var {
        assert_eq!(self.value(x).len(), w.len(), "dot_const length");
        let s = self.data(x).iter().zip(&w).map(|(a, b)| a * b).sum();
        self.push(Op::Dot(x, w), Tensor::scalar(s))
    }

    /// Mean softmax cross-entropy of `[n, k]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let t = self.value(logits);
        let [n, k] = t.shape[..] else {
            panic!("cross_entropy expects [n, k] logits, got {:?}", t.shape)
        };
        assert_eq!(n, labels.len(), "cross_entropy label count");
        let mut total = 0.0;
        for (row, &y) in t.data.chunks_exact(k).zip(labels) {
            assert!(y < k, "label {y} out of range for {k} classes");
            total += log_sum_exp(row) - row[y];
        }
        let op = Op::CrossEntropy {
            logits,
            k,
            labels: labels.to_vec(),
        };
        self.push(op, Tensor::scalar(total / n as f64))
    }

    /// Column means of `[n, d]`.
    pub fn col_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.shape[1];
        let mean = col_mean(&t.data, d);
        self.push(Op::ColMean { x, d }, Tensor::new(vec![d], mean))
    }

    /// Biased column variances of `[n, d]`.
    pub fn col_var(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.shape[1];
        let n = t.len() / d;
        let mean = col_mean(&t.data, d);
        let mut var = vec![0.0; d];
        for row in t.data.chunks_exact(d) {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        self.push(Op::ColVar { x, d, mean }, Tensor::new(vec![d], var))
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta` per column of `[n, d]`.
    pub fn batch_norm(&mut self, x: Var, mean: Var, var: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let t = self.value(x);
        let d = t.shape[1];
        let (mu, vr, g, b) = (self.data(mean), self.data(var), self.data(gamma), self.data(beta));
        let mut data = Vec::with_capacity(t.len());
        for row in t.data.chunks_exact(d) {
            for c in 0..d {
                data.push(g[c] * (row[c] - mu[c]) / (vr[c] + eps).sqrt() + b[c]);
            }
        }
        let shape = t.shape.clone();
        let op = Op::BatchNorm {
            x,
            mean,
            var,
            gamma,
            beta,
            eps,
        };
        self.push(op, Tensor::new(shape, data))
    }

    /// Batched NHWC convolution with bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let geom = ConvGeometry::infer(self.shape(x), self.shape(w), stride, pad);
        assert_eq!(self.value(b).len(), geom.cout, "conv2d bias length");
        let data = conv::forward(&geom, self.data(x), self.data(w), self.data(b));
        let shape = vec![geom.n, geom.ho, geom.wo, geom.cout];
        self.push(Op::Conv2d { x, w, b, geom }, Tensor::new(shape, data))
    }

    /// Sub-tensor `index` along the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(index < shape[0], "select {index} from {shape:?}");
        let inner: usize = shape[1..].iter().product();
        self.slice(x, index * inner, shape[1..].to_vec())
    }

    /// Contiguous block of `x` starting at flat `offset`, reshaped to `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: Vec<usize>) -> Var {
        let len: usize = shape.iter().product();
        let data = self.data(x)[offset..offset + len].to_vec();
        self.push(Op::Slice { x, offset }, Tensor::new(shape, data))
    }

    /// Stacks equally shaped operands along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let inner = self.shape(parts[0]).to_vec();
        let mut data = Vec::with_capacity(parts.len() * inner.iter().product::<usize>());
        for &p in parts {
            assert_eq!(self.shape(p), inner.as_slice(), "stack shapes differ");
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        self.push(Op::Concat(parts.to_vec()), Tensor::new(shape, data))
    }

    /// Concatenates operands along their existing leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(&self.shape(p)[1..], tail.as_slice(), "concat trailing shapes differ");
            lead += self.shape(p)[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Op::Concat(parts.to_vec()), Tensor::new(shape, data))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let data = self.data(x).to_vec();
        self.push(Op::Reshape(x), Tensor::new(shape, data))
    }

    /// Euclidean distance matrix between the rows of `[n, d]`.
    pub fn pair_dist(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, d] = t.shape[..] else {
            panic!("pair_dist expects [n, d], got {:?}", t.shape)
        };
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let (a, b) = (&t.data[i * d..(i + 1) * d], &t.data[j * d..(j + 1) * d]);
                    data[i * n + j] = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
                }
            }
        }
        self.push(Op::PairDist { x, n, d }, Tensor::new(vec![n, n], data))
    }

    /// Picks flat entries of `x`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let src = self.data(x);
        let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(vec![idx.len()], data);
        self.push(Op::Gather { x, idx }, t)
    }

    /// Reverse accumulation from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    op: node.op.name().into(),
                    detail: format!("non-finite adjoint at node {i}"),
                });
            }
            self.propagate(node, &g, &mut grads);
            // blame the op whose local derivative broke, not its consumer
            let bad = node
                .op
                .inputs()
                .into_iter()
                .any(|v| grads[v.0].as_ref().is_some_and(|a| a.iter().any(|x| !x.is_finite())));
            if bad {
                return Err(Error::Numeric {
                    op: node.op.name().into(),
                    detail: format!("non-finite adjoint produced at node {i}"),
                });
            }
            grads[i] = Some(g);
        }
        let mut shapes: Vec<Vec<usize>> = self.nodes[..=root.0].iter().map(|n| n.value.shape.clone()).collect();
        grads.resize(self.nodes.len(), None);
        shapes.extend(self.nodes[root.0 + 1..].iter().map(|n| n.value.shape.clone()));
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value.data;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.iter().copied());
                acc(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.iter().copied());
                acc(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y));
                acc(grads, *b, g.iter().zip(va).map(|(g, x)| g * x));
            }
            Op::Scale(a, s) => acc(grads, *a, g.iter().map(|v| v * s)),
            Op::AddScalar(a) => acc(grads, *a, g.iter().copied()),
            Op::MulRows(x, s) => {
                let (vx, vs) = (val(*x), val(*s));
                let n = vx.len() / vs.len();
                let dx: Vec<f64> = g
                    .chunks_exact(n)
                    .zip(vs)
                    .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
                    .collect();
                let ds: Vec<f64> = g
                    .chunks_exact(n)
                    .zip(vx.chunks_exact(n))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                acc(grads, *x, dx);
                acc(grads, *s, ds);
            }
            Op::MatMul { a, b, m, k, n, ta, tb } => {
                let (va, vb) = (val(*a), val(*b));
                // C = op(A) op(B); dop(A) = G op(B)^T, dop(B) = op(A)^T G
                let da = if *ta {
                    // A stored k x m: dA = op(B) G^T
                    linalg::matmul(vb, g, *k, *n, *m, *tb, true)
                } else {
                    linalg::matmul(g, vb, *m, *n, *k, false, !*tb)
                };
                let db = if *tb {
                    // B stored n x k: dB = G^T op(A)
                    linalg::matmul(g, va, *n, *m, *k, true, *ta)
                } else {
                    linalg::matmul(va, g, *k, *m, *n, !*ta, false)
                };
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::NormalizeRows { x, d, eps, norms } => {
                let y = &node.value.data;
                let mut dx = Vec::with_capacity(y.len());
                for ((gr, yr), &nm) in g.chunks_exact(*d).zip(y.chunks_exact(*d)).zip(norms) {
                    if nm > *eps {
                        let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        dx.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * gy) / nm));
                    } else {
                        dx.extend(gr.iter().map(|gv| gv / eps));
                    }
                }
                acc(grads, *x, dx);
            }
            Op::RowNorm { x, d } => {
                let vx = val(*x);
                let y = &node.value.data;
                let mut dx = Vec::with_capacity(vx.len());
                for ((xr, &nm), &gv) in vx.chunks_exact(*d).zip(y).zip(g) {
                    if nm > 0.0 {
                        dx.extend(xr.iter().map(|v| gv * v / nm));
                    } else {
                        dx.extend(std::iter::repeat_n(0.0, *d));
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Softmax { x, n, beta } => {
                let y = &node.value.data;
                let mut dx = Vec::with_capacity(y.len());
                for (gr, yr) in g.chunks_exact(*n).zip(y.chunks_exact(*n)) {
                    let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(gv, yv)| beta * yv * (gv - gy)));
                }
                acc(grads, *x, dx);
            }
            Op::MinMax { x, lo, hi, degenerate } => {
                let vx = val(*x);
                if *degenerate {
                    acc(
                        grads,
                        *x,
                        g.iter().zip(vx).map(|(gv, &v)| if v > 0.0 && v < 1.0 { *gv } else { 0.0 }),
                    );
                } else {
                    let span = vx[*hi] - vx[*lo];
                    let y = &node.value.data;
                    let mut dx: Vec<f64> = g.iter().map(|gv| gv / span).collect();
                    let dlo: f64 = g.iter().zip(y).map(|(gv, yv)| gv * (yv - 1.0)).sum::<f64>() / span;
                    let dhi: f64 = -g.iter().zip(y).map(|(gv, yv)| gv * yv).sum::<f64>() / span;
                    dx[*lo] += dlo;
                    dx[*hi] += dhi;
                    acc(grads, *x, dx);
                }
            }
            Op::Gem { x, s, d, p } => {
                let vx = val(*x);
                let y = &node.value.data;
                let mut dx = vec![0.0; vx.len()];
                let inv = 1.0 / *s as f64;
                for (bi, (xc, dc)) in vx.chunks_exact(s * d).zip(dx.chunks_exact_mut(s * d)).enumerate() {
                    let yb = &y[bi * d..(bi + 1) * d];
                    let gb = &g[bi * d..(bi + 1) * d];
                    let coef: Vec<f64> = yb
                        .iter()
                        .zip(gb)
                        .map(|(yv, gv)| gv * inv * yv.powf(1.0 - p))
                        .collect();
                    for (xr, dr) in xc.chunks_exact(*d).zip(dc.chunks_exact_mut(*d)) {
                        for c in 0..*d {
                            if xr[c] > GEM_FLOOR {
                                dr[c] = coef[c] * xr[c].powf(p - 1.0);
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Relu(x, slope) => {
                let vx = val(*x);
                acc(grads, *x, g.iter().zip(vx).map(|(gv, &v)| if v > 0.0 { *gv } else { slope * gv }));
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                acc(grads, *x, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(grads, *x, std::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::Dot(x, w) => acc(grads, *x, w.iter().map(|wv| wv * g[0])),
            Op::CrossEntropy { logits, k, labels } => {
                let vl = val(*logits);
                let n = labels.len() as f64;
                let mut dx = Vec::with_capacity(vl.len());
                for (row, &y) in vl.chunks_exact(*k).zip(labels) {
                    let lse = log_sum_exp(row);
                    for (j, &v) in row.iter().enumerate() {
                        let p = (v - lse).exp();
                        let t = if j == y { 1.0 } else { 0.0 };
                        dx.push(g[0] * (p - t) / n);
                    }
                }
                acc(grads, *logits, dx);
            }
            Op::ColMean { x, d } => {
                let n = val(*x).len() / d;
                let dx: Vec<f64> = (0..n * d).map(|i| g[i % d] / n as f64).collect();
                acc(grads, *x, dx);
            }
            Op::ColVar { x, d, mean } => {
                let vx = val(*x);
                let n = (vx.len() / d) as f64;
                let dx: Vec<f64> = vx
                    .iter()
                    .enumerate()
                    .map(|(i, v)| g[i % d] * 2.0 * (v - mean[i % d]) / n)
                    .collect();
                acc(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                mean,
                var,
                gamma,
                beta,
                eps,
            } => {
                let vx = val(*x);
                let (mu, vr, gm) = (val(*mean), val(*var), val(*gamma));
                let d = mu.len();
                let inv: Vec<f64> = vr.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut dx = Vec::with_capacity(vx.len());
                let mut dmu = vec![0.0; d];
                let mut dvar = vec![0.0; d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (xr, gr) in vx.chunks_exact(d).zip(g.chunks_exact(d)) {
                    for c in 0..d {
                        let centered = xr[c] - mu[c];
                        let gx = gr[c] * gm[c] * inv[c];
                        dx.push(gx);
                        dmu[c] -= gx;
                        dvar[c] -= 0.5 * gr[c] * gm[c] * centered * inv[c].powi(3);
                        dgamma[c] += gr[c] * centered * inv[c];
                        dbeta[c] += gr[c];
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *mean, dmu);
                acc(grads, *var, dvar);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv::backward(geom, val(*x), val(*w), g);
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                acc(grads, *b, db);
            }
            Op::Slice { x, offset } => {
                let n = val(*x).len();
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; n]);
                for (s, gv) in slot[*offset..*offset + g.len()].iter_mut().zip(g) {
                    *s += gv;
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    acc(grads, *p, g[off..off + n].iter().copied());
                    off += n;
                }
            }
            Op::Reshape(x) => acc(grads, *x, g.iter().copied()),
            Op::PairDist { x, n, d } => {
                let vx = val(*x);
                let dist = &node.value.data;
                let mut dx = vec![0.0; vx.len()];
                for i in 0..*n {
                    for j in 0..*n {
                        let dij = dist[i * n + j];
                        let gij = g[i * n + j];
                        if i == j || dij == 0.0 || gij == 0.0 {
                            continue;
                        }
                        for c in 0..*d {
                            let diff = (vx[i * d + c] - vx[j * d + c]) / dij * gij;
                            dx[i * d + c] += diff;
                            dx[j * d + c] -= diff;
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Gather { x, idx } => {
                let n = val(*x).len();
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; n]);
                for (&i, gv) in idx.iter().zip(g) {
                    slot[i] += gv;
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl IntoIterator<Item = f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib.into_iter().collect()),
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn col_mean(data: &[f64], d: usize) -> Vec<f64> {
    let n = data.len() / d;
    let mut mean = vec![0.0; d];
    for row in data.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    mean
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        let sq = t.mul(x, x);
        let root = t.sum(sq);
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(x).data, vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn independent_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let y = t.leaf(Tensor::new(vec![2], vec![3.0, 4.0]));
        let root = t.sum(x);
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(y).data, vec![0.0, 0.0]);
        assert!(g.get_slice(y).is_none());
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn nan_names_the_primitive() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1], vec![1.0]));
        let y = t.scale(x, f64::NAN);
        let root = t.sum(y);
        match t.backward(root) {
            Err(Error::Numeric { op, .. }) => assert_eq!(op, "scale"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.3, 1.0, 0.2, -0.7]));
        let p = t.softmax(x, 10.0);
        let root = t.dot_const(p, vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.5]);
        let g = t.backward(root).unwrap().get(x);
        for row in g.data.chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 2], vec![0.3, -0.1, 0.8, 0.5]));
        let n = t.normalize_rows(x, 1e-8);
        let c = t.matmul(n, n, false, true);
        let p = t.softmax(c, 5.0);
        let root = t.dot_const(p, vec![1.0, 2.0, 3.0, 4.0]);
        let a = t.backward(root).unwrap().get(x);
        let b = t.backward(root).unwrap().get(x);
        let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }
}
