use std::sync::Arc;

use rand::RngExt;

use super::scalar::{gemm, MatRef};
use super::{NumericsError, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used to target fault injection in gradient-check tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    AddRow,
    AddConst,
    Mul,
    Scale,
    Gelu,
    LayerNorm,
    Softmax,
    LogSoftmax,
    GatherRows,
    ConcatRows,
    Attention,
    CrossEntropy,
    KlDivergence,
    Sum,
    Dropout,
}

/// One attention block: queries `q_off..q_off+q_len` attend to keys
/// `k_off..k_off+k_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_off: usize,
    pub q_len: usize,
    pub k_off: usize,
    pub k_len: usize,
}

/// Packing of several independent sequences into one tall matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub segments: Vec<AttnSegment>,
    /// Query `i` of a segment sees keys `0..=i` only (requires `q_len <= k_len`).
    pub causal: bool,
}

impl AttnLayout {
    /// Self-attention over consecutive sequences of the given lengths.
    pub fn packed(lengths: &[usize], causal: bool) -> Self {
        let mut off = 0;
        let segments = lengths
            .iter()
            .map(|&len| {
                let seg = AttnSegment {
                    q_off: off,
                    q_len: len,
                    k_off: off,
                    k_len: len,
                };
                off += len;
                seg
            })
            .collect();
        Self { segments, causal }
    }

    /// Cross-attention: query sequence `b` attends to key sequence `b`.
    pub fn cross(q_lengths: &[usize], k_lengths: &[usize]) -> Self {
        assert_eq!(q_lengths.len(), k_lengths.len());
        let (mut qo, mut ko) = (0, 0);
        let segments = q_lengths
            .iter()
            .zip(k_lengths)
            .map(|(&ql, &kl)| {
                let seg = AttnSegment {
                    q_off: qo,
                    q_len: ql,
                    k_off: ko,
                    k_len: kl,
                };
                qo += ql;
                ko += kl;
                seg
            })
            .collect();
        Self {
            segments,
            causal: false,
        }
    }

    fn q_rows(&self) -> usize {
        self.segments
            .iter()
            .map(|s| s.q_off + s.q_len)
            .max()
            .unwrap_or(0)
    }

    fn k_rows(&self) -> usize {
        self.segments
            .iter()
            .map(|s| s.k_off + s.k_len)
            .max()
            .unwrap_or(0)
    }
}

enum Op<S> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_t: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttnLayout>,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<S>,
        scale: S,
    },
    KlDivergence {
        student: Var,
        teacher_probs: Vec<S>,
        student_probs: Vec<S>,
        scale: S,
    },
    Sum(Var),
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
}

impl<S> Op<S> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::AddConst(..) => OpKind::AddConst,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Gelu(..) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Attention { .. } => OpKind::Attention,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::KlDivergence { .. } => OpKind::KlDivergence,
            Op::Sum(..) => OpKind::Sum,
            Op::Dropout { .. } => OpKind::Dropout,
        })
    }
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    needs_grad: bool,
    op: Op<S>,
}

/// Records operations in execution order so that [`Tape::backward`] can
/// replay them in reverse. Node indices are topologically ordered by
/// construction.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    fault: Option<OpKind>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (
            shape[..shape.len() - 1].iter().product(),
            shape[shape.len() - 1],
        ),
    }
}

fn shape_err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Shape(msg.into())
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows<S: Scalar>(data: &[S], cols: usize) -> Vec<S> {
    let mut out = data.to_vec();
    if cols == 0 {
        return out;
    }
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<S: Scalar>(data: &[S], cols: usize) -> Vec<S> {
    let mut out = data.to_vec();
    if cols == 0 {
        return out;
    }
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
        row.iter_mut().for_each(|v| *v = *v - lse);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x)
}

const LN_EPS: f64 = 1e-5;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Corrupts the backward rule of one op kind (gradients scaled by 1.5).
    /// Exists so gradient checks can be shown to catch a broken rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape invariant")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, needs_grad: bool, op: Op<S>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    /// Records a parameter; gradients flow to it iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<S>) -> Result<Var, NumericsError> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(shape_err(format!(
                "constant of shape {shape:?} with {} values",
                value.len()
            )));
        }
        Ok(self.push(shape, value, false, Op::Leaf))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · bᵀ` where `b` is stored `[n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var, NumericsError> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err(format!(
                "matmul inner dimensions {:?} x {:?}{}",
                self.shape(a),
                self.shape(b),
                if b_t { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![S::zero(); m * n];
        let bm = MatRef::new(self.value(b), br, bc);
        gemm(
            MatRef::new(self.value(a), m, k),
            if b_t { bm.t() } else { bm },
            &mut out,
            false,
        );
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], out, ng, Op::MatMul { a, b, b_t }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), out, ng, Op::Add(a, b)))
    }

    /// Adds a length-`n` row vector to every row of `x[m×n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (_, n) = self.dims(x);
        if self.value(bias).len() != n {
            return Err(shape_err(format!(
                "add_row: bias {:?} for matrix {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        let ng = self.requires_grad(x) || self.requires_grad(bias);
        Ok(self.push(self.shape(x).to_vec(), out, ng, Op::AddRow(x, bias)))
    }

    /// `x + c` for a constant buffer `c` of the same size.
    pub fn add_const(&mut self, x: Var, c: &[S]) -> Result<Var, NumericsError> {
        if c.len() != self.value(x).len() {
            return Err(shape_err("add_const: size mismatch"));
        }
        let out = self.value(x).iter().zip(c).map(|(&a, &b)| a + b).collect();
        let ng = self.requires_grad(x);
        Ok(self.push(self.shape(x).to_vec(), out, ng, Op::AddConst(x)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), out, ng, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let ng = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), out, ng, Op::Scale(x, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let ng = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), out, ng, Op::Gelu(x))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err("layer_norm: gain/bias width"));
        }
        let eps = S::lit(LN_EPS);
        let nn = S::from_usize(n).unwrap();
        let mut xhat = vec![S::zero(); m * n];
        let mut rstd = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        {
            let xv = self.value(x);
            let g = self.value(gain);
            let b = self.value(bias);
            for r in 0..m {
                let row = &xv[r * n..(r + 1) * n];
                let mean = row.iter().copied().sum::<S>() / nn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
                let rs = S::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for c in 0..n {
                    let h = (row[c] - mean) * rs;
                    xhat[r * n + c] = h;
                    out[r * n + c] = h * g[c] + b[c];
                }
            }
        }
        let ng = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            ng,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (_, n) = self.dims(x);
        if n == 0 {
            return Err(shape_err("softmax over empty last dimension"));
        }
        let out = softmax_rows(self.value(x), n);
        let ng = self.requires_grad(x);
        Ok(self.push(self.shape(x).to_vec(), out, ng, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (_, n) = self.dims(x);
        if n == 0 {
            return Err(shape_err("log_softmax over empty last dimension"));
        }
        let out = log_softmax_rows(self.value(x), n);
        let ng = self.requires_grad(x);
        Ok(self.push(self.shape(x).to_vec(), out, ng, Op::LogSoftmax(x)))
    }

    /// `out[i] = src[idx[i]]` row-wise; embedding lookup is a gather.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(NumericsError::Index(format!("row {bad} of {m}")));
        }
        let sv = self.value(src);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&sv[i * n..(i + 1) * n]);
        }
        let ng = self.requires_grad(src);
        Ok(self.push(
            vec![idx.len(), n],
            out,
            ng,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let n = parts.first().map(|&p| self.dims(p).1).unwrap_or(0);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(shape_err("concat_rows: column counts differ"));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(vec![rows, n], out, ng, Op::ConcatRows(parts.to_vec())))
    }

    /// Scaled dot-product multi-head attention over packed sequences.
    /// `q[rows_q×d]`, `k`/`v[rows_k×d]`; heads split the `d` columns.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttnLayout>,
    ) -> Result<Var, NumericsError> {
        let (qr, d) = self.dims(q);
        let (kr, dk) = self.dims(k);
        let (vr, dv) = self.dims(v);
        if dk != d || dv != d || kr != vr {
            return Err(shape_err("attention: q/k/v widths or k/v rows differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(format!(
                "attention: {d} columns over {heads} heads"
            )));
        }
        if layout.q_rows() > qr || layout.k_rows() > kr {
            return Err(shape_err("attention: layout exceeds matrix rows"));
        }
        if layout.causal && layout.segments.iter().any(|s| s.q_len > s.k_len) {
            return Err(shape_err(
                "attention: causal segment with more queries than keys",
            ));
        }
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let mut out = vec![S::zero(); qr * d];
        let mut probs = Vec::new();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut qh = Vec::new();
        let mut kh = Vec::new();
        let mut vh = Vec::new();
        let mut oh = Vec::new();
        for seg in &layout.segments {
            let (ql, kl) = (seg.q_len, seg.k_len);
            if ql == 0 {
                continue;
            }
            for h in 0..heads {
                copy_head(qv, d, seg.q_off, ql, h * dh, dh, &mut qh);
                copy_head(kv, d, seg.k_off, kl, h * dh, dh, &mut kh);
                copy_head(vv, d, seg.k_off, kl, h * dh, dh, &mut vh);
                let mut p = vec![S::zero(); ql * kl];
                gemm(
                    MatRef::new(&qh, ql, dh),
                    MatRef::new(&kh, kl, dh).t(),
                    &mut p,
                    false,
                );
                for i in 0..ql {
                    let row = &mut p[i * kl..(i + 1) * kl];
                    let visible = if layout.causal { i + 1 } else { kl };
                    for x in row[..visible].iter_mut() {
                        *x = *x * scale;
                    }
                    softmax_in_place(&mut row[..visible]);
                    for x in row[visible..].iter_mut() {
                        *x = S::zero();
                    }
                }
                oh.clear();
                oh.resize(ql * dh, S::zero());
                gemm(
                    MatRef::new(&p, ql, kl),
                    MatRef::new(&vh, kl, dh),
                    &mut oh,
                    false,
                );
                for i in 0..ql {
                    let dst = (seg.q_off + i) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
                }
                probs.extend_from_slice(&p);
            }
        }
        let ng = self.requires_grad(q) || self.requires_grad(k) || self.requires_grad(v);
        Ok(self.push(
            vec![qr, d],
            out,
            ng,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
        ))
    }

    /// `scale · Σ_j −log softmax(logits_j)[targets_j]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        scale: S,
    ) -> Result<Var, NumericsError> {
        let (t, vocab) = self.dims(logits);
        if targets.len() != t {
            return Err(shape_err(format!(
                "cross_entropy: {t} rows, {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= vocab) {
            return Err(NumericsError::Index(format!(
                "target {bad} outside vocabulary of {vocab}"
            )));
        }
        let logp = log_softmax_rows(self.value(logits), vocab);
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(j, &y)| logp[j * vocab + y])
            .sum::<S>();
        let probs = logp.into_iter().map(|v| v.exp()).collect();
        let ng = self.requires_grad(logits);
        Ok(self.push(
            vec![],
            vec![loss * scale],
            ng,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
        ))
    }

    /// `scale · Σ_j KL(softmax(teacher_j) ∥ softmax(student_j))`. The teacher
    /// side is a constant: no gradient is ever produced for it.
    pub fn kl_divergence(
        &mut self,
        teacher_logits: &Tensor<S>,
        student_logits: Var,
        scale: S,
    ) -> Result<Var, NumericsError> {
        if teacher_logits.shape() != self.shape(student_logits) {
            return Err(shape_err(format!(
                "kl_divergence: teacher {:?} vs student {:?}",
                teacher_logits.shape(),
                self.shape(student_logits)
            )));
        }
        let (_, vocab) = self.dims(student_logits);
        let t_logp = log_softmax_rows(teacher_logits.data(), vocab);
        let s_logp = log_softmax_rows(self.value(student_logits), vocab);
        let mut kl = S::zero();
        for (&tl, &sl) in t_logp.iter().zip(&s_logp) {
            let p = tl.exp();
            if p > S::zero() {
                kl = kl + p * (tl - sl);
            }
        }
        // Rounding can leave tiny negatives when the rows coincide.
        let kl = kl.max(S::zero());
        let ng = self.requires_grad(student_logits);
        Ok(self.push(
            vec![],
            vec![kl * scale],
            ng,
            Op::KlDivergence {
                student: student_logits,
                teacher_probs: t_logp.into_iter().map(|v| v.exp()).collect(),
                student_probs: s_logp.into_iter().map(|v| v.exp()).collect(),
                scale,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.requires_grad(x);
        self.push(vec![], vec![s], ng, Op::Sum(x))
    }

    /// Inverted dropout; `p == 0` records nothing and returns `x`.
    pub fn dropout<R: rand::Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = S::lit(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        let ng = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), out, ng, Op::Dropout { x, mask })
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, NumericsError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let factor = match (self.fault, node.op.kind()) {
                (Some(f), Some(k)) if f == k => S::lit(1.5),
                _ => S::one(),
            };
            self.backward_node(node, &g, factor, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<S>, g: &[S], factor: S, grads: &mut [Option<Vec<S>>]) {
        if let Op::Attention {
            q,
            k,
            v,
            heads,
            layout,
            probs,
        } = &node.op
        {
            self.attention_backward(node, g, factor, *q, *k, *v, *heads, layout, probs, grads);
            return;
        }
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            let len = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); len]);
            f(buf);
        };
        let one = S::one();
        let scaled = |x: S| x * factor;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (m, k) = rows_cols(&nodes[a.0].shape);
                let (br, bc) = rows_cols(&nodes[b.0].shape);
                let n = node.shape[1];
                let gm = MatRef::new(g, m, n);
                if wants(*a) {
                    let bm = MatRef::new(&nodes[b.0].value, br, bc);
                    acc(*a, &mut |buf| {
                        let mut tmp = vec![S::zero(); m * k];
                        gemm(gm, if *b_t { bm } else { bm.t() }, &mut tmp, false);
                        buf.iter_mut()
                            .zip(&tmp)
                            .for_each(|(d, &s)| *d = *d + scaled(s));
                    });
                }
                if wants(*b) {
                    let am = MatRef::new(&nodes[a.0].value, m, k);
                    acc(*b, &mut |buf| {
                        if factor == one {
                            if *b_t {
                                gemm(gm.t(), am, buf, true);
                            } else {
                                gemm(am.t(), gm, buf, true);
                            }
                        } else {
                            let mut tmp = vec![S::zero(); br * bc];
                            if *b_t {
                                gemm(gm.t(), am, &mut tmp, false);
                            } else {
                                gemm(am.t(), gm, &mut tmp, false);
                            }
                            buf.iter_mut()
                                .zip(&tmp)
                                .for_each(|(d, &s)| *d = *d + s * factor);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if wants(*x) {
                        acc(*x, &mut |buf| {
                            buf.iter_mut()
                                .zip(g)
                                .for_each(|(d, &s)| *d = *d + scaled(s))
                        });
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if wants(*x) {
                    acc(*x, &mut |buf| {
                        buf.iter_mut()
                            .zip(g)
                            .for_each(|(d, &s)| *d = *d + scaled(s))
                    });
                }
                if wants(*bias) {
                    let n = nodes[bias.0].value.len();
                    acc(*bias, &mut |buf| {
                        for row in g.chunks(n) {
                            buf.iter_mut()
                                .zip(row)
                                .for_each(|(d, &s)| *d = *d + scaled(s));
                        }
                    });
                }
            }
            Op::AddConst(x) => {
                if wants(*x) {
                    acc(*x, &mut |buf| {
                        buf.iter_mut()
                            .zip(g)
                            .for_each(|(d, &s)| *d = *d + scaled(s))
                    });
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    acc(*a, &mut |buf| {
                        for ((d, &s), &o) in buf.iter_mut().zip(g).zip(bv) {
                            *d = *d + scaled(s * o);
                        }
                    });
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    acc(*b, &mut |buf| {
                        for ((d, &s), &o) in buf.iter_mut().zip(g).zip(av) {
                            *d = *d + scaled(s * o);
                        }
                    });
                }
            }
            Op::Scale(x, s) => {
                if wants(*x) {
                    acc(*x, &mut |buf| {
                        buf.iter_mut()
                            .zip(g)
                            .for_each(|(d, &v)| *d = *d + scaled(v * *s))
                    });
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = &nodes[x.0].value;
                    acc(*x, &mut |buf| {
                        for ((d, &s), &xi) in buf.iter_mut().zip(g).zip(xv) {
                            *d = *d + scaled(s * gelu_grad(xi));
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = rows_cols(&node.shape);
                let gv = &nodes[gain.0].value;
                if wants(*gain) {
                    acc(*gain, &mut |buf| {
                        for r in 0..m {
                            for c in 0..n {
                                buf[c] = buf[c] + scaled(g[r * n + c] * xhat[r * n + c]);
                            }
                        }
                    });
                }
                if wants(*bias) {
                    acc(*bias, &mut |buf| {
                        for row in g.chunks(n) {
                            buf.iter_mut()
                                .zip(row)
                                .for_each(|(d, &s)| *d = *d + scaled(s));
                        }
                    });
                }
                if wants(*x) {
                    let nn = S::from_usize(n).unwrap();
                    acc(*x, &mut |buf| {
                        let mut gh = vec![S::zero(); n];
                        for r in 0..m {
                            let xh = &xhat[r * n..(r + 1) * n];
                            for c in 0..n {
                                gh[c] = g[r * n + c] * gv[c];
                            }
                            let mean_g = gh.iter().copied().sum::<S>() / nn;
                            let mean_gx = gh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<S>() / nn;
                            for c in 0..n {
                                let dx = rstd[r] * (gh[c] - mean_g - xh[c] * mean_gx);
                                buf[r * n + c] = buf[r * n + c] + scaled(dx);
                            }
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let n = *node.shape.last().unwrap();
                    let y = &node.value;
                    acc(*x, &mut |buf| {
                        for ((drow, grow), yrow) in
                            buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n))
                        {
                            let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<S>();
                            for c in 0..n {
                                drow[c] = drow[c] + scaled(yrow[c] * (grow[c] - dot));
                            }
                        }
                    });
                }
            }
            Op::LogSoftmax(x) => {
                if wants(*x) {
                    let n = *node.shape.last().unwrap();
                    let y = &node.value;
                    acc(*x, &mut |buf| {
                        for ((drow, grow), yrow) in
                            buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n))
                        {
                            let total = grow.iter().copied().sum::<S>();
                            for c in 0..n {
                                drow[c] = drow[c] + scaled(grow[c] - yrow[c].exp() * total);
                            }
                        }
                    });
                }
            }
            Op::GatherRows { src, idx } => {
                if wants(*src) {
                    let n = *node.shape.last().unwrap();
                    acc(*src, &mut |buf| {
                        for (r, &i) in idx.iter().enumerate() {
                            for c in 0..n {
                                buf[i * n + c] = buf[i * n + c] + scaled(g[r * n + c]);
                            }
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if wants(*p) {
                        let seg = &g[off..off + len];
                        acc(*p, &mut |buf| {
                            buf.iter_mut()
                                .zip(seg)
                                .for_each(|(d, &s)| *d = *d + scaled(s))
                        });
                    }
                    off += len;
                }
            }
            Op::Attention { .. } => unreachable!(),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                if wants(*logits) {
                    let n = *nodes[logits.0].shape.last().unwrap();
                    let coef = g[0] * *scale * factor;
                    acc(*logits, &mut |buf| {
                        for (j, &y) in targets.iter().enumerate() {
                            for c in 0..n {
                                let onehot = if c == y { one } else { S::zero() };
                                buf[j * n + c] =
                                    buf[j * n + c] + coef * (probs[j * n + c] - onehot);
                            }
                        }
                    });
                }
            }
            Op::KlDivergence {
                student,
                teacher_probs,
                student_probs,
                scale,
            } => {
                if wants(*student) {
                    let coef = g[0] * *scale * factor;
                    acc(*student, &mut |buf| {
                        for ((d, &q), &p) in buf.iter_mut().zip(student_probs).zip(teacher_probs) {
                            *d = *d + coef * (q - p);
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    acc(*x, &mut |buf| {
                        buf.iter_mut().for_each(|d| *d = *d + scaled(g[0]))
                    });
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    acc(*x, &mut |buf| {
                        for ((d, &s), &m) in buf.iter_mut().zip(g).zip(mask) {
                            *d = *d + scaled(s * m);
                        }
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node<S>,
        g: &[S],
        factor: S,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &AttnLayout,
        probs: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let nodes = &self.nodes;
        let d = node.shape[1];
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let mut dq = nodes[q.0].needs_grad.then(|| vec![S::zero(); qv.len()]);
        let mut dk = nodes[k.0].needs_grad.then(|| vec![S::zero(); kv.len()]);
        let mut dv = nodes[v.0].needs_grad.then(|| vec![S::zero(); vv.len()]);
        let (mut qh, mut kh, mut vh, mut gh) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut p_off = 0;
        for seg in &layout.segments {
            let (ql, kl) = (seg.q_len, seg.k_len);
            if ql == 0 {
                continue;
            }
            for h in 0..heads {
                let p = &probs[p_off..p_off + ql * kl];
                p_off += ql * kl;
                copy_head(g, d, seg.q_off, ql, h * dh, dh, &mut gh);
                copy_head(vv, d, seg.k_off, kl, h * dh, dh, &mut vh);
                if let Some(dv) = dv.as_mut() {
                    let mut t = vec![S::zero(); kl * dh];
                    gemm(
                        MatRef::new(p, ql, kl).t(),
                        MatRef::new(&gh, ql, dh),
                        &mut t,
                        false,
                    );
                    add_head(dv, d, seg.k_off, kl, h * dh, dh, &t, factor);
                }
                if dq.is_none() && dk.is_none() {
                    continue;
                }
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then the 1/sqrt(dh) scale.
                let mut ds = vec![S::zero(); ql * kl];
                gemm(
                    MatRef::new(&gh, ql, dh),
                    MatRef::new(&vh, kl, dh).t(),
                    &mut ds,
                    false,
                );
                for i in 0..ql {
                    let pr = &p[i * kl..(i + 1) * kl];
                    let dr = &mut ds[i * kl..(i + 1) * kl];
                    let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<S>();
                    for j in 0..kl {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                if let Some(dq) = dq.as_mut() {
                    copy_head(kv, d, seg.k_off, kl, h * dh, dh, &mut kh);
                    let mut t = vec![S::zero(); ql * dh];
                    gemm(
                        MatRef::new(&ds, ql, kl),
                        MatRef::new(&kh, kl, dh),
                        &mut t,
                        false,
                    );
                    add_head(dq, d, seg.q_off, ql, h * dh, dh, &t, factor);
                }
                if let Some(dk) = dk.as_mut() {
                    copy_head(qv, d, seg.q_off, ql, h * dh, dh, &mut qh);
                    let mut t = vec![S::zero(); kl * dh];
                    gemm(
                        MatRef::new(&ds, ql, kl).t(),
                        MatRef::new(&qh, ql, dh),
                        &mut t,
                        false,
                    );
                    add_head(dk, d, seg.k_off, kl, h * dh, dh, &t, factor);
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(buf) = buf {
                let target = grads[var.0].get_or_insert_with(|| vec![S::zero(); buf.len()]);
                target.iter_mut().zip(&buf).for_each(|(d, &s)| *d = *d + s);
            }
        }
    }
}

fn copy_head<S: Scalar>(
    src: &[S],
    d: usize,
    row_off: usize,
    rows: usize,
    col_off: usize,
    dh: usize,
    out: &mut Vec<S>,
) {
    out.clear();
    for r in row_off..row_off + rows {
        out.extend_from_slice(&src[r * d + col_off..r * d + col_off + dh]);
    }
}

#[allow(clippy::too_many_arguments)]
fn add_head<S: Scalar>(
    dst: &mut [S],
    d: usize,
    row_off: usize,
    rows: usize,
    col_off: usize,
    dh: usize,
    src: &[S],
    factor: S,
) {
    for r in 0..rows {
        let base = (row_off + r) * d + col_off;
        for c in 0..dh {
            dst[base + c] = dst[base + c] + src[r * dh + c] * factor;
        }
    }
}

/// Result of a reverse pass: one optional gradient buffer per tape node.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `v` into `t.grad` when `t` requires grad.
    pub fn write_to(&self, v: Var, t: &mut Tensor<S>) -> Result<(), NumericsError> {
        if !t.requires_grad() {
            return Ok(());
        }
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(&Tensor::new(shape.to_vec(), data).unwrap().with_grad())
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = leaf(&mut tape, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let out = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(out), &[1.0, 0.0, 0.0, 1.0]);
        let a = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, &[2, 1], vec![1.0, 1.0]);
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[3.0, 7.0]);
        assert_eq!(tape.shape(out), &[2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, &[2, 3], vec![0.0; 6]);
        assert!(matches!(tape.matmul(a, b), Err(NumericsError::Shape(_))));
        assert!(tape.matmul_t(a, b).is_ok());
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2], vec![0.0, 0.0]);
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
        let x = leaf(&mut tape, &[1, 2], vec![1000.0, 0.0]);
        let y = tape.softmax(x).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-9);
        assert!(tape.value(y)[1].abs() < 1e-9);
        assert!(tape.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_uniform_and_limit() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3, 4], vec![0.0; 12]);
        let l = tape.cross_entropy(x, &[0, 3, 2], 1.0).unwrap();
        assert!((tape.value(l)[0] - 3.0 * 4f64.ln()).abs() < 1e-12);

        let mut prev = f64::INFINITY;
        for mag in [1.0, 10.0, 100.0] {
            let mut row = vec![0.0; 4];
            row[1] = mag;
            let x = leaf(&mut tape, &[1, 4], row);
            let lv = tape.cross_entropy(x, &[1], 1.0).unwrap();
            let l = tape.value(lv)[0];
            assert!(l >= 0.0 && l < prev);
            prev = l;
        }
        assert!(prev < 1e-12);
        let x = leaf(&mut tape, &[1, 4], vec![0.0; 4]);
        assert!(matches!(
            tape.cross_entropy(x, &[4], 1.0),
            Err(NumericsError::Index(_))
        ));
    }

    #[test]
    fn kl_zero_for_identical_and_ln4_for_onehot_vs_uniform() {
        let mut tape = Tape::new();
        let teacher = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.5]).unwrap();
        let s = leaf(&mut tape, &[2, 3], teacher.data().to_vec());
        let kl = tape.kl_divergence(&teacher, s, 1.0).unwrap();
        assert!(tape.value(kl)[0].abs() < 1e-15);

        let teacher = Tensor::new(vec![1, 4], vec![60.0, 0.0, 0.0, 0.0]).unwrap();
        let s = leaf(&mut tape, &[1, 4], vec![0.0; 4]);
        let kl = tape.kl_divergence(&teacher, s, 1.0).unwrap();
        assert!((tape.value(kl)[0] - 4f64.ln()).abs() < 1e-9);

        let s = leaf(&mut tape, &[2, 4], vec![0.0; 8]);
        assert!(tape.kl_divergence(&teacher, s, 1.0).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones_and_constant_loss_touches_nothing() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, &[2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, 1.0]);
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let p = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        let c = tape.constant(vec![2], vec![3.0, 4.0]).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert!(g.get(p).is_none());
        let mut t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        g.write_to(p, &mut t).unwrap();
        assert!(t.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(p), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let mut tape = Tape::new();
        let q = leaf(&mut tape, &[3, 2], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]);
        let k = leaf(&mut tape, &[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let v1 = leaf(&mut tape, &[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v2 = leaf(&mut tape, &[3, 2], vec![1.0, 2.0, 3.0, 4.0, 50.0, 60.0]);
        let layout = Arc::new(AttnLayout::packed(&[3], true));
        let a = tape.attention(q, k, v1, 1, layout.clone()).unwrap();
        let b = tape.attention(q, k, v2, 1, layout).unwrap();
        assert_eq!(&tape.value(a)[..4], &tape.value(b)[..4]);
        assert_eq!(&tape.value(a)[..2], &[1.0, 2.0]);
        assert_ne!(&tape.value(a)[4..], &tape.value(b)[4..]);
    }
}
