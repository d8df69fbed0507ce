//! Dense-tensor algebra with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass and records
//! the operation that produced it. [`Tape::backward`] walks the record in
//! reverse, accumulating gradients additively into every tensor that
//! requires them. Tensors are indexed by [`TensorId`]; the tape is a
//! single-owner unit (no interior mutability), so distinct tapes can run on
//! distinct threads.
//!
//! The operation set is exactly what the sequence classifier needs:
//! elementwise arithmetic with right-aligned broadcasting, GELU/sigmoid/
//! dropout, 2-D matmul, temporal mean pooling, the two loss heads, and the
//! state-space kernel/convolution pair whose math lives in [`crate::ssm`].

use rand::Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::ssm::batched;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {a:?} and {b:?}")]
    ShapeMismatch {
        op: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} elements, data has {got}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called twice without zero_grad")]
    BackwardTwice,
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// One tensor: contiguous data plus the operation that produced it.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
    op: Op<T>,
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Gelu(TensorId),
    Sigmoid(TensorId),
    Dropout {
        input: TensorId,
        mask: Vec<T>,
    },
    MatMul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(TensorId),
    MeanPoolTime {
        input: TensorId,
        batch: usize,
        len: usize,
        width: usize,
    },
    SumAll(TensorId),
    SoftmaxCrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    BceMultilabel {
        logits: TensorId,
        targets: TensorId,
    },
    SsmKernel {
        a_raw: TensorId,
        theta: TensorId,
        b_re: TensorId,
        b_im: TensorId,
        c_re: TensorId,
        c_im: TensorId,
        filters: usize,
        modes: usize,
        margin: T,
    },
    CausalConv {
        u: TensorId,
        kernels: TensorId,
        d: TensorId,
        batch: usize,
        len: usize,
        filters: usize,
        use_fft: bool,
    },
    #[cfg(test)]
    ConcatPair(TensorId, TensorId),
}

/// Recording tape; all operations append to it in topological order.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    tensors: Vec<Tensor<T>>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Right-aligned broadcast of two shapes, numpy style.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Row-major strides with broadcast dimensions zeroed.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let offset = nd - shape.len();
    let mut strides = vec![0usize; nd];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            tensors: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.tensors[id.0].grad.as_deref()
    }

    /// Reset every gradient and re-arm [`Tape::backward`].
    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        let id = TensorId(self.tensors.len());
        self.tensors.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
            op,
        });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    /// Create a leaf tensor.
    pub fn leaf(
        &mut self,
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        if numel(&shape) != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ShapeDataMismatch {
                expected: numel(&shape),
                got: data.len(),
                shape,
            });
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    /// Leaf that never participates in gradients.
    pub fn constant(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        self.leaf(data, shape, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<TensorId, TensorError> {
        let (sa, sb) = (&self.tensors[a.0].shape, &self.tensors[b.0].shape);
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            a: sa.clone(),
            b: sb.clone(),
        })?;
        let req = self.needs(a) || self.needs(b);
        let n = numel(&out_shape);
        let mut data = Vec::with_capacity(n);
        if *sa == out_shape && *sb == out_shape {
            let (da, db) = (&self.tensors[a.0].data, &self.tensors[b.0].data);
            for i in 0..n {
                data.push(f(da[i], db[i]));
            }
        } else {
            let stra = broadcast_strides(sa, &out_shape);
            let strb = broadcast_strides(sb, &out_shape);
            let (da, db) = (&self.tensors[a.0].data, &self.tensors[b.0].data);
            let nd = out_shape.len();
            let mut idx = vec![0usize; nd];
            let (mut offa, mut offb) = (0usize, 0usize);
            for _ in 0..n {
                data.push(f(da[offa], db[offb]));
                for d in (0..nd).rev() {
                    idx[d] += 1;
                    offa += stra[d];
                    offb += strb[d];
                    if idx[d] < out_shape[d] {
                        break;
                    }
                    idx[d] = 0;
                    offa -= stra[d] * out_shape[d];
                    offb -= strb[d] * out_shape[d];
                }
            }
        }
        Ok(self.push(out_shape, data, req, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// GELU with the exact Gaussian-CDF formulation: `x Φ(x)`.
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let data: Vec<T> = self.tensors[a.0]
            .data
            .iter()
            .map(|&x| x * x.norm_cdf())
            .collect();
        let shape = self.tensors[a.0].shape.clone();
        let req = self.needs(a);
        Ok(self.push(shape, data, req, Op::Gelu(a)))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let data: Vec<T> = self.tensors[a.0].data.iter().map(|&x| x.sigmoid()).collect();
        let shape = self.tensors[a.0].shape.clone();
        let req = self.needs(a);
        Ok(self.push(shape, data, req, Op::Sigmoid(a)))
    }

    /// Inverted dropout: in train mode surviving entries scale by `1/(1-p)`;
    /// in eval mode this is the identity (the input id is returned as-is).
    pub fn dropout<R: Rng>(
        &mut self,
        a: TensorId,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<TensorId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArg(format!(
                "dropout probability must be in [0,1), got {p}"
            )));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let scale = T::of_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = self.tensors[a.0]
            .data
            .iter()
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let data: Vec<T> = self.tensors[a.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.tensors[a.0].shape.clone();
        let req = self.needs(a);
        Ok(self.push(shape, data, req, Op::Dropout { input: a, mask }))
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (&self.tensors[a.0].shape, &self.tensors[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                a: sa.clone(),
                b: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        {
            let da = &self.tensors[a.0].data;
            let db = &self.tensors[b.0].data;
            for i in 0..m {
                for p in 0..k {
                    let av = da[i * k + p];
                    if av == T::zero() {
                        continue;
                    }
                    let row = &db[p * n..(p + 1) * n];
                    let dst = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        dst[j] += av * row[j];
                    }
                }
            }
        }
        let req = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, req, Op::MatMul { a, b, m, k, n }))
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        if numel(&shape) != self.tensors[a.0].data.len() {
            return Err(TensorError::ShapeDataMismatch {
                expected: numel(&shape),
                got: self.tensors[a.0].data.len(),
                shape,
            });
        }
        let data = self.tensors[a.0].data.clone();
        let req = self.needs(a);
        Ok(self.push(shape, data, req, Op::Reshape(a)))
    }

    /// Mean over the temporal axis: `[batch, len, width] -> [batch, width]`.
    pub fn mean_pool_time(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s = self.tensors[a.0].shape.clone();
        if s.len() != 3 || s[1] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "mean_pool_time",
                a: s,
                b: vec![],
            });
        }
        let (batch, len, width) = (s[0], s[1], s[2]);
        let inv = T::of_f64(1.0 / len as f64);
        let mut out = vec![T::zero(); batch * width];
        {
            let d = &self.tensors[a.0].data;
            for b in 0..batch {
                for t in 0..len {
                    for w in 0..width {
                        out[b * width + w] += d[(b * len + t) * width + w];
                    }
                }
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        let req = self.needs(a);
        Ok(self.push(
            vec![batch, width],
            out,
            req,
            Op::MeanPoolTime {
                input: a,
                batch,
                len,
                width,
            },
        ))
    }

    /// Sum of every element, as a scalar tensor.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let mut acc = T::zero();
        for &v in &self.tensors[a.0].data {
            acc += v;
        }
        let req = self.needs(a);
        Ok(self.push(vec![1], vec![acc], req, Op::SumAll(a)))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`, stabilized by
    /// max subtraction. `logits` is `[batch, classes]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
    ) -> Result<TensorId, TensorError> {
        let s = self.tensors[logits.0].shape.clone();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                a: s,
                b: vec![targets.len()],
            });
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::InvalidArg(format!(
                "target class {t} out of range for {classes} classes"
            )));
        }
        let d = &self.tensors[logits.0].data;
        let mut probs = vec![T::zero(); batch * classes];
        let mut loss = T::zero();
        for b in 0..batch {
            let row = &d[b * classes..(b + 1) * classes];
            let maxv = row.iter().cloned().fold(row[0], T::max);
            let mut denom = T::zero();
            for k in 0..classes {
                let e = (row[k] - maxv).exp();
                probs[b * classes + k] = e;
                denom += e;
            }
            for k in 0..classes {
                probs[b * classes + k] = probs[b * classes + k] / denom;
            }
            loss += denom.ln() - (row[targets[b]] - maxv);
        }
        loss = loss / T::of_usize(batch);
        let req = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            req,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over batch and classes of per-entry sigmoid cross-entropy, in
    /// the log-sum-exp-stable form. Targets must be exactly 0 or 1.
    pub fn bce_multilabel(
        &mut self,
        logits: TensorId,
        targets: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (sl, st) = (
            self.tensors[logits.0].shape.clone(),
            self.tensors[targets.0].shape.clone(),
        );
        if sl != st {
            return Err(TensorError::ShapeMismatch {
                op: "bce_multilabel",
                a: sl,
                b: st,
            });
        }
        if let Some(&t) = self.tensors[targets.0]
            .data
            .iter()
            .find(|&&t| t != T::zero() && t != T::one())
        {
            return Err(TensorError::InvalidArg(format!(
                "multilabel targets must be 0 or 1, got {t}"
            )));
        }
        let n = self.tensors[logits.0].data.len();
        let mut loss = T::zero();
        {
            let dz = &self.tensors[logits.0].data;
            let dt = &self.tensors[targets.0].data;
            for i in 0..n {
                let z = dz[i];
                let t = dt[i];
                loss += z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln();
            }
        }
        loss = loss / T::of_usize(n);
        let req = self.needs(logits);
        Ok(self.push(vec![1], vec![loss], req, Op::BceMultilabel { logits, targets }))
    }

    /// Stacked state-space kernels from raw parameters; every input is
    /// `[filters, modes]`, output is `[filters, len]`. See
    /// [`crate::ssm::batched::kernel_forward`] for the math.
    #[allow(clippy::too_many_arguments)]
    pub fn ssm_kernel(
        &mut self,
        a_raw: TensorId,
        theta: TensorId,
        b_re: TensorId,
        b_im: TensorId,
        c_re: TensorId,
        c_im: TensorId,
        len: usize,
        margin: T,
    ) -> Result<TensorId, TensorError> {
        let s = self.tensors[a_raw.0].shape.clone();
        for id in [theta, b_re, b_im, c_re, c_im] {
            if self.tensors[id.0].shape != s {
                return Err(TensorError::ShapeMismatch {
                    op: "ssm_kernel",
                    a: s,
                    b: self.tensors[id.0].shape.clone(),
                });
            }
        }
        if s.len() != 2 || len == 0 {
            return Err(TensorError::InvalidArg(format!(
                "ssm_kernel expects [filters, modes] parameters and len >= 1, got {s:?}, len {len}"
            )));
        }
        let (filters, modes) = (s[0], s[1]);
        let raw = batched::RawModes {
            a_raw: &self.tensors[a_raw.0].data,
            theta: &self.tensors[theta.0].data,
            b_re: &self.tensors[b_re.0].data,
            b_im: &self.tensors[b_im.0].data,
            c_re: &self.tensors[c_re.0].data,
            c_im: &self.tensors[c_im.0].data,
            filters,
            modes,
        };
        let data = batched::kernel_forward(&raw, len, margin);
        let req = [a_raw, theta, b_re, b_im, c_re, c_im]
            .iter()
            .any(|&id| self.needs(id));
        Ok(self.push(
            vec![filters, len],
            data,
            req,
            Op::SsmKernel {
                a_raw,
                theta,
                b_re,
                b_im,
                c_re,
                c_im,
                filters,
                modes,
                margin,
            },
        ))
    }

    /// Per-filter causal convolution with one-step delay and feedthrough:
    /// `u` is `[batch, len, filters]`, `kernels` `[filters, len]`, `d`
    /// `[filters]`.
    pub fn causal_conv(
        &mut self,
        u: TensorId,
        kernels: TensorId,
        d: TensorId,
        use_fft: bool,
    ) -> Result<TensorId, TensorError> {
        let su = self.tensors[u.0].shape.clone();
        let sk = self.tensors[kernels.0].shape.clone();
        let sd = self.tensors[d.0].shape.clone();
        if su.len() != 3 || sk.len() != 2 || su[1] != sk[1] || su[2] != sk[0] || sd != vec![sk[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "causal_conv",
                a: su,
                b: sk,
            });
        }
        let (batch, len, filters) = (su[0], su[1], su[2]);
        let data = batched::causal_conv_forward(
            &self.tensors[u.0].data,
            &self.tensors[kernels.0].data,
            &self.tensors[d.0].data,
            batch,
            len,
            filters,
            use_fft,
        );
        let req = self.needs(u) || self.needs(kernels) || self.needs(d);
        Ok(self.push(
            su,
            data,
            req,
            Op::CausalConv {
                u,
                kernels,
                d,
                batch,
                len,
                filters,
                use_fft,
            },
        ))
    }

    fn accumulate(&mut self, id: TensorId, grad: &[T]) {
        if !self.tensors[id.0].requires_grad {
            return;
        }
        let slot = &mut self.tensors[id.0];
        match &mut slot.grad {
            Some(g) => {
                for (gi, &v) in g.iter_mut().zip(grad) {
                    *gi += v;
                }
            }
            None => slot.grad = Some(grad.to_vec()),
        }
    }

    /// Reduce an output-shaped gradient back to an input shape by summing
    /// over broadcast dimensions.
    fn reduce_to_shape(grad: &[T], out_shape: &[usize], in_shape: &[usize]) -> Vec<T> {
        if out_shape == in_shape {
            return grad.to_vec();
        }
        let strides = broadcast_strides(in_shape, out_shape);
        let nd = out_shape.len();
        let mut out = vec![T::zero(); numel(in_shape)];
        let mut idx = vec![0usize; nd];
        let mut off = 0usize;
        for &g in grad {
            out[off] += g;
            for d in (0..nd).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
                off -= strides[d] * out_shape[d];
            }
        }
        out
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively;
    /// call [`Tape::zero_grad`] before reusing the tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.tensors[loss.0].data.len() != 1 {
            return Err(TensorError::NotScalar(self.tensors[loss.0].shape.clone()));
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        self.backward_done = true;
        if !self.tensors[loss.0].requires_grad {
            return Ok(());
        }
        self.tensors[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let id = TensorId(i);
            if !self.tensors[i].requires_grad || self.tensors[i].grad.is_none() {
                continue;
            }
            let grad = self.tensors[i].grad.clone().unwrap();
            let op = self.tensors[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let out_shape = self.tensors[id.0].shape.clone();
                    let ga = Self::reduce_to_shape(&grad, &out_shape, &self.tensors[a.0].shape.clone());
                    self.accumulate(a, &ga);
                    let gb = Self::reduce_to_shape(&grad, &out_shape, &self.tensors[b.0].shape.clone());
                    self.accumulate(b, &gb);
                }
                Op::Sub(a, b) => {
                    let out_shape = self.tensors[id.0].shape.clone();
                    let ga = Self::reduce_to_shape(&grad, &out_shape, &self.tensors[a.0].shape.clone());
                    self.accumulate(a, &ga);
                    let neg: Vec<T> = grad.iter().map(|&g| -g).collect();
                    let gb = Self::reduce_to_shape(&neg, &out_shape, &self.tensors[b.0].shape.clone());
                    self.accumulate(b, &gb);
                }
                Op::Mul(a, b) => {
                    let out_shape = self.tensors[id.0].shape.clone();
                    let sa = self.tensors[a.0].shape.clone();
                    let sb = self.tensors[b.0].shape.clone();
                    // d(a*b) = grad*b for a, grad*a for b (expanded, then reduced)
                    let expand = |data: &[T], shape: &[usize]| -> Vec<T> {
                        let strides = broadcast_strides(shape, &out_shape);
                        let nd = out_shape.len();
                        let n = numel(&out_shape);
                        let mut out = Vec::with_capacity(n);
                        let mut idx = vec![0usize; nd];
                        let mut off = 0usize;
                        for _ in 0..n {
                            out.push(data[off]);
                            for d in (0..nd).rev() {
                                idx[d] += 1;
                                off += strides[d];
                                if idx[d] < out_shape[d] {
                                    break;
                                }
                                idx[d] = 0;
                                off -= strides[d] * out_shape[d];
                            }
                        }
                        out
                    };
                    let bexp = expand(&self.tensors[b.0].data, &sb);
                    let aexp = expand(&self.tensors[a.0].data, &sa);
                    let mut ga = vec![T::zero(); grad.len()];
                    let mut gb = vec![T::zero(); grad.len()];
                    for j in 0..grad.len() {
                        ga[j] = grad[j] * bexp[j];
                        gb[j] = grad[j] * aexp[j];
                    }
                    let ra = Self::reduce_to_shape(&ga, &out_shape, &sa);
                    self.accumulate(a, &ra);
                    let rb = Self::reduce_to_shape(&gb, &out_shape, &sb);
                    self.accumulate(b, &rb);
                }
                Op::Gelu(a) => {
                    let din: Vec<T> = self.tensors[a.0]
                        .data
                        .iter()
                        .zip(&grad)
                        .map(|(&x, &g)| g * (x.norm_cdf() + x * x.norm_pdf()))
                        .collect();
                    self.accumulate(a, &din);
                }
                Op::Sigmoid(a) => {
                    let din: Vec<T> = self.tensors[id.0]
                        .data
                        .iter()
                        .zip(&grad)
                        .map(|(&s, &g)| g * s * (T::one() - s))
                        .collect();
                    self.accumulate(a, &din);
                }
                Op::Dropout { input, mask } => {
                    let din: Vec<T> = mask.iter().zip(&grad).map(|(&m, &g)| g * m).collect();
                    self.accumulate(input, &din);
                }
                Op::MatMul { a, b, m, k, n } => {
                    // dA = dY Bᵀ, dB = Aᵀ dY
                    let da_needed = self.tensors[a.0].requires_grad;
                    let db_needed = self.tensors[b.0].requires_grad;
                    if da_needed {
                        let db = &self.tensors[b.0].data;
                        let mut ga = vec![T::zero(); m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let g = grad[i * n + j];
                                if g == T::zero() {
                                    continue;
                                }
                                for p in 0..k {
                                    ga[i * k + p] += g * db[p * n + j];
                                }
                            }
                        }
                        self.accumulate(a, &ga);
                    }
                    if db_needed {
                        let da = &self.tensors[a.0].data;
                        let mut gb = vec![T::zero(); k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let av = da[i * k + p];
                                if av == T::zero() {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[p * n + j] += av * grad[i * n + j];
                                }
                            }
                        }
                        self.accumulate(b, &gb);
                    }
                }
                Op::Reshape(a) => {
                    self.accumulate(a, &grad);
                }
                Op::MeanPoolTime {
                    input,
                    batch,
                    len,
                    width,
                } => {
                    let inv = T::of_f64(1.0 / len as f64);
                    let mut din = vec![T::zero(); batch * len * width];
                    for b in 0..batch {
                        for t in 0..len {
                            for w in 0..width {
                                din[(b * len + t) * width + w] = grad[b * width + w] * inv;
                            }
                        }
                    }
                    self.accumulate(input, &din);
                }
                Op::SumAll(a) => {
                    let din = vec![grad[0]; self.tensors[a.0].data.len()];
                    self.accumulate(a, &din);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let batch = targets.len();
                    let classes = probs.len() / batch;
                    let scale = grad[0] / T::of_usize(batch);
                    let mut din = vec![T::zero(); probs.len()];
                    for b in 0..batch {
                        for kk in 0..classes {
                            let one_hot = if kk == targets[b] { T::one() } else { T::zero() };
                            din[b * classes + kk] = (probs[b * classes + kk] - one_hot) * scale;
                        }
                    }
                    self.accumulate(logits, &din);
                }
                Op::BceMultilabel { logits, targets } => {
                    let n = self.tensors[logits.0].data.len();
                    let scale = grad[0] / T::of_usize(n);
                    let din: Vec<T> = self.tensors[logits.0]
                        .data
                        .iter()
                        .zip(&self.tensors[targets.0].data)
                        .map(|(&z, &t)| (z.sigmoid() - t) * scale)
                        .collect();
                    self.accumulate(logits, &din);
                }
                Op::SsmKernel {
                    a_raw,
                    theta,
                    b_re,
                    b_im,
                    c_re,
                    c_im,
                    filters,
                    modes,
                    margin,
                } => {
                    let len = self.tensors[id.0].shape[1];
                    let raw = batched::RawModes {
                        a_raw: &self.tensors[a_raw.0].data,
                        theta: &self.tensors[theta.0].data,
                        b_re: &self.tensors[b_re.0].data,
                        b_im: &self.tensors[b_im.0].data,
                        c_re: &self.tensors[c_re.0].data,
                        c_im: &self.tensors[c_im.0].data,
                        filters,
                        modes,
                    };
                    let (da, dth, dbre, dbim, dcre, dcim) =
                        batched::kernel_backward(&raw, len, margin, &grad);
                    self.accumulate(a_raw, &da);
                    self.accumulate(theta, &dth);
                    self.accumulate(b_re, &dbre);
                    self.accumulate(b_im, &dbim);
                    self.accumulate(c_re, &dcre);
                    self.accumulate(c_im, &dcim);
                }
                Op::CausalConv {
                    u,
                    kernels,
                    d,
                    batch,
                    len,
                    filters,
                    use_fft,
                } => {
                    let (du, dk, dd) = batched::causal_conv_backward(
                        &self.tensors[u.0].data,
                        &self.tensors[kernels.0].data,
                        &self.tensors[d.0].data,
                        &grad,
                        batch,
                        len,
                        filters,
                        use_fft,
                    );
                    self.accumulate(u, &du);
                    self.accumulate(kernels, &dk);
                    self.accumulate(d, &dd);
                }
                #[cfg(test)]
                Op::ConcatPair(a, b) => {
                    let na = self.tensors[a.0].data.len();
                    self.accumulate(a, &grad[..na]);
                    let gb = grad[na..].to_vec();
                    self.accumulate(b, &gb);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{finite_difference_gradient, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t64() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn add_vectors() {
        let mut tp = t64();
        let a = tp.leaf(vec![1.0, 2.0], vec![2], false).unwrap();
        let b = tp.leaf(vec![3.0, 4.0], vec![2], false).unwrap();
        let c = tp.add(a, b).unwrap();
        assert_eq!(tp.value(c), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let mut tp = t64();
        let a = tp.leaf(vec![1.0, 2.0], vec![2], false).unwrap();
        let b = tp.leaf(vec![1.0, 2.0, 3.0], vec![3], false).unwrap();
        let err = tp.add(a, b).unwrap_err();
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
    }

    #[test]
    fn gelu_fixed_points() {
        let mut tp = t64();
        let a = tp.leaf(vec![0.0], vec![1], false).unwrap();
        let g = tp.gelu(a).unwrap();
        assert_eq!(tp.value(g), &[0.0]);
    }

    #[test]
    fn gelu_matches_independent_erf_series() {
        // Maclaurin series for erf, summed far past double precision.
        fn erf_series(x: f64) -> f64 {
            let mut term = x;
            let mut sum = x;
            for n in 1..200 {
                term *= -x * x / n as f64;
                sum += term / (2 * n + 1) as f64;
            }
            sum * 2.0 / std::f64::consts::PI.sqrt()
        }
        let mut tp = t64();
        let xs = vec![3.0, -1.25, 0.5, 2.0];
        let a = tp.leaf(xs.clone(), vec![4], false).unwrap();
        let g = tp.gelu(a).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            let phi = 0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
            let expect = x * phi;
            assert!(
                (tp.value(g)[i] - expect).abs() < 1e-6,
                "gelu({x}) = {} vs {expect}",
                tp.value(g)[i]
            );
        }
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut tp = t64();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eye = tp
            .leaf(
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
                vec![3, 3],
                false,
            )
            .unwrap();
        let m_data: Vec<f64> = (0..9).map(|_| rng.random::<f64>()).collect();
        let m = tp.leaf(m_data.clone(), vec![3, 3], false).unwrap();
        let prod = tp.matmul(eye, m).unwrap();
        assert_eq!(tp.value(prod), &m_data[..]);

        let a = tp.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], false).unwrap();
        let b = tp.leaf(vec![1.0, 1.0], vec![2, 1], false).unwrap();
        let c = tp.matmul(a, b).unwrap();
        assert_eq!(tp.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (5, 4, 3);
        let da: Vec<f64> = (0..m * k).map(|_| rng.random::<f64>() - 0.5).collect();
        let db: Vec<f64> = (0..k * n).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += da[i * k + p] * db[p * n + j];
                }
                expect[i * n + j] = s;
            }
        }
        let mut tp = t64();
        let a = tp.leaf(da, vec![m, k], false).unwrap();
        let b = tp.leaf(db, vec![k, n], false).unwrap();
        let c = tp.matmul(a, b).unwrap();
        // Same additions in a different order can differ in the last ulp;
        // the triple loop here matches the implementation's order exactly.
        assert_eq!(tp.value(c), &expect[..]);
    }

    #[test]
    fn matmul_inner_extent_mismatch() {
        let mut tp = t64();
        let a = tp.leaf(vec![0.0; 6], vec![2, 3], false).unwrap();
        let b = tp.leaf(vec![0.0; 8], vec![4, 2], false).unwrap();
        assert!(tp.matmul(a, b).is_err());
    }

    #[test]
    fn mean_pool_constant_and_simple() {
        let mut tp = t64();
        let a = tp
            .leaf(vec![1.0, 2.0, 3.0], vec![1, 3, 1], false)
            .unwrap();
        let p = tp.mean_pool_time(a).unwrap();
        assert_eq!(tp.value(p), &[2.0]);
        let c = tp.leaf(vec![0.7; 8], vec![2, 2, 2], false).unwrap();
        let pc = tp.mean_pool_time(c).unwrap();
        assert_eq!(tp.value(pc), &[0.7; 4]);
    }

    #[test]
    fn mean_pool_invariant_under_time_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, l, w) = (2usize, 7, 3);
        let data: Vec<f64> = (0..b * l * w).map(|_| rng.random::<f64>()).collect();
        // reversal permutation of the temporal axis
        let mut perm = data.clone();
        for bi in 0..b {
            for t in 0..l {
                for wi in 0..w {
                    perm[(bi * l + t) * w + wi] = data[(bi * l + (l - 1 - t)) * w + wi];
                }
            }
        }
        let mut tp = t64();
        let a = tp.leaf(data, vec![b, l, w], false).unwrap();
        let ap = tp.leaf(perm, vec![b, l, w], false).unwrap();
        let p1 = tp.mean_pool_time(a).unwrap();
        let p2 = tp.mean_pool_time(ap).unwrap();
        for i in 0..b * w {
            assert!((tp.value(p1)[i] - tp.value(p2)[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ce_uniform_and_saturated() {
        let mut tp = t64();
        let l = tp.leaf(vec![0.0, 0.0], vec![1, 2], false).unwrap();
        let loss = tp.softmax_cross_entropy(l, &[1]).unwrap();
        assert!((tp.value(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let l2 = tp.leaf(vec![30.0, -30.0], vec![1, 2], false).unwrap();
        let loss2 = tp.softmax_cross_entropy(l2, &[0]).unwrap();
        assert!(tp.value(loss2)[0].abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits: Vec<f64> = (0..12).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let shifted: Vec<f64> = logits.iter().map(|&z| z + 123.456).collect();
        let targets = [2usize, 0, 3];
        let mut tp = t64();
        let a = tp.leaf(logits, vec![3, 4], false).unwrap();
        let b = tp.leaf(shifted, vec![3, 4], false).unwrap();
        let la = tp.softmax_cross_entropy(a, &targets).unwrap();
        let lb = tp.softmax_cross_entropy(b, &targets).unwrap();
        assert!((tp.value(la)[0] - tp.value(lb)[0]).abs() < 1e-10);
    }

    #[test]
    fn softmax_ce_target_out_of_range() {
        let mut tp = t64();
        let l = tp.leaf(vec![0.0, 0.0], vec![1, 2], false).unwrap();
        assert!(tp.softmax_cross_entropy(l, &[2]).is_err());
    }

    #[test]
    fn bce_known_values_and_validation() {
        let mut tp = t64();
        let z = tp.leaf(vec![0.0], vec![1, 1], false).unwrap();
        let t = tp.leaf(vec![1.0], vec![1, 1], false).unwrap();
        let loss = tp.bce_multilabel(z, t).unwrap();
        assert!((tp.value(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let z2 = tp.leaf(vec![30.0], vec![1, 1], false).unwrap();
        let loss2 = tp.bce_multilabel(z2, t).unwrap();
        assert!(tp.value(loss2)[0] < 1e-12);

        let bad = tp.leaf(vec![0.5], vec![1, 1], false).unwrap();
        assert!(tp.bce_multilabel(z, bad).is_err());
    }

    #[test]
    fn backward_square_and_fanout() {
        let mut tp = t64();
        let x = tp.leaf(vec![3.0], vec![1], true).unwrap();
        let y = tp.mul(x, x).unwrap();
        tp.backward(y).unwrap();
        assert_eq!(tp.grad(x).unwrap(), &[6.0]);

        let mut tp = t64();
        let x = tp.leaf(vec![1.0], vec![1], true).unwrap();
        let y = tp.add(x, x).unwrap();
        tp.backward(y).unwrap();
        assert_eq!(tp.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_twice_errors_until_reset() {
        let mut tp = t64();
        let x = tp.leaf(vec![2.0], vec![1], true).unwrap();
        let y = tp.mul(x, x).unwrap();
        tp.backward(y).unwrap();
        assert_eq!(tp.backward(y), Err(TensorError::BackwardTwice));
        tp.zero_grad();
        tp.backward(y).unwrap();
        assert_eq!(tp.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tp = t64();
        let x = tp.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(matches!(tp.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn dropout_eval_is_identity_train_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tp = t64();
        let x = tp.leaf(vec![1.0; 1000], vec![1000], false).unwrap();
        let eval = tp.dropout(x, 0.3, false, &mut rng).unwrap();
        assert_eq!(eval, x);
        let train = tp.dropout(x, 0.3, true, &mut rng).unwrap();
        let vals = tp.value(train);
        let survivors = vals.iter().filter(|&&v| v != 0.0).count();
        assert!(vals
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
        assert!((survivors as f64 / 1000.0 - 0.7).abs() < 0.05);
        assert!(tp.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn broadcast_add_matches_manual_expansion() {
        let mut tp = t64();
        let a = tp
            .leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3], false)
            .unwrap();
        let b = tp.leaf(vec![10.0, 20.0, 30.0], vec![3], false).unwrap();
        let c = tp.add(a, b).unwrap();
        assert_eq!(tp.value(c), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        // Commutes with explicit expansion of the smaller operand.
        let bexp = tp
            .leaf(vec![10.0, 20.0, 30.0, 10.0, 20.0, 30.0], vec![2, 3], false)
            .unwrap();
        let c2 = tp.add(bexp, a).unwrap();
        assert_eq!(tp.value(c), tp.value(c2));
    }

    #[test]
    fn broadcast_grad_reduces_correctly() {
        let mut tp = t64();
        let a = tp.leaf(vec![0.0; 6], vec![2, 3], true).unwrap();
        let b = tp.leaf(vec![1.0, 2.0, 3.0], vec![3], true).unwrap();
        let c = tp.add(a, b).unwrap();
        let s = tp.sum_all(c).unwrap();
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(a).unwrap(), &[1.0; 6]);
        assert_eq!(tp.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    /// Finite-difference check of one scalar-valued graph over a flat
    /// parameter vector.
    fn fd_check<F>(n_params: usize, seed: u64, mut build: F)
    where
        F: FnMut(&mut Tape<f64>, &[f64]) -> TensorId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0: Vec<f64> = (0..n_params).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut tp = Tape::new();
        let loss = build(&mut tp, &x0);
        tp.backward(loss).unwrap();
        let analytic: Vec<f64> = (0..n_params)
            .map(|i| tp.grad(TensorId(i)).map(|g| g[0]).unwrap_or(0.0))
            .collect();
        // Leaves must be pushed first, one scalar each, by the builder.
        let numeric = finite_difference_gradient(
            &mut |x: &[f64]| {
                let mut tp = Tape::new();
                let l = build(&mut tp, x);
                tp.value(l)[0]
            },
            &x0,
            1e-5,
        );
        let err = max_rel_err(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn gradients_match_finite_differences_per_op() {
        // gelu -> mul -> sum
        fd_check(4, 11, |tp, x| {
            let ids: Vec<TensorId> = x
                .iter()
                .map(|&v| tp.leaf(vec![v], vec![1], true).unwrap())
                .collect();
            let a = tp.add(ids[0], ids[1]).unwrap();
            let g = tp.gelu(a).unwrap();
            let s = tp.sigmoid(ids[2]).unwrap();
            let m = tp.mul(g, s).unwrap();
            let m2 = tp.mul(m, ids[3]).unwrap();
            tp.sum_all(m2).unwrap()
        });
        // matmul + softmax ce
        fd_check(6, 13, |tp, x| {
            let ids: Vec<TensorId> = x
                .iter()
                .map(|&v| tp.leaf(vec![v], vec![1], true).unwrap())
                .collect();
            let mut row = ids[0];
            // assemble a 1x6 then reshape to 2x3 -> matmul with fixed 3x2
            for &id in &ids[1..] {
                row = tp.concat_pair(row, id);
            }
            let a = tp.reshape(row, vec![2, 3]).unwrap();
            let w = tp
                .leaf(vec![0.3, -0.2, 0.8, 0.5, -0.7, 0.1], vec![3, 2], false)
                .unwrap();
            let logits = tp.matmul(a, w).unwrap();
            tp.softmax_cross_entropy(logits, &[0, 1]).unwrap()
        });
        // bce multilabel
        fd_check(4, 17, |tp, x| {
            let ids: Vec<TensorId> = x
                .iter()
                .map(|&v| tp.leaf(vec![v], vec![1], true).unwrap())
                .collect();
            let mut row = ids[0];
            for &id in &ids[1..] {
                row = tp.concat_pair(row, id);
            }
            let z = tp.reshape(row, vec![2, 2]).unwrap();
            let t = tp
                .leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], false)
                .unwrap();
            tp.bce_multilabel(z, t).unwrap()
        });
        // ssm kernel + causal conv + mean pool
        fd_check(6, 19, |tp, x| {
            let ids: Vec<TensorId> = x
                .iter()
                .map(|&v| tp.leaf(vec![v], vec![1], true).unwrap())
                .collect();
            let a_raw = tp.reshape(ids[0], vec![1, 1]).unwrap();
            let theta = tp.reshape(ids[1], vec![1, 1]).unwrap();
            let b_re = tp.reshape(ids[2], vec![1, 1]).unwrap();
            let b_im = tp.reshape(ids[3], vec![1, 1]).unwrap();
            let c_re = tp.reshape(ids[4], vec![1, 1]).unwrap();
            let c_im = tp.reshape(ids[5], vec![1, 1]).unwrap();
            let k = tp
                .ssm_kernel(a_raw, theta, b_re, b_im, c_re, c_im, 8, 0.01)
                .unwrap();
            let u = tp
                .leaf(
                    (0..8).map(|i| 0.3 * (i as f64) - 1.0).collect(),
                    vec![1, 8, 1],
                    false,
                )
                .unwrap();
            let d = tp.leaf(vec![0.4], vec![1], false).unwrap();
            let y = tp.causal_conv(u, k, d, false).unwrap();
            let p = tp.mean_pool_time(y).unwrap();
            let sq = tp.mul(p, p).unwrap();
            tp.sum_all(sq).unwrap()
        });
    }

    #[test]
    fn causal_conv_input_gradients_match_fd() {
        // perturb u rather than the kernel parameters
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let len = 6;
        let u0: Vec<f64> = (0..len).map(|_| rng.random::<f64>() - 0.5).collect();
        let kern: Vec<f64> = (0..len).map(|_| rng.random::<f64>() - 0.5).collect();
        let run = |u: &[f64], fft: bool| -> (f64, Vec<f64>) {
            let mut tp = Tape::new();
            let uid = tp.leaf(u.to_vec(), vec![1, len, 1], true).unwrap();
            let kid = tp.leaf(kern.clone(), vec![1, len], false).unwrap();
            let did = tp.leaf(vec![0.9], vec![1], false).unwrap();
            let y = tp.causal_conv(uid, kid, did, fft).unwrap();
            let sq = tp.mul(y, y).unwrap();
            let l = tp.sum_all(sq).unwrap();
            tp.backward(l).unwrap();
            (tp.value(l)[0], tp.grad(uid).unwrap().to_vec())
        };
        for fft in [false, true] {
            let (_, analytic) = run(&u0, fft);
            let numeric = finite_difference_gradient(
                &mut |u: &[f64]| run(u, fft).0,
                &u0,
                1e-5,
            );
            let err = max_rel_err(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "fft={fft} err {err}");
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Concatenate two tensors along a flattened axis; test helper for
    /// assembling parameter vectors from scalar leaves.
    #[cfg(test)]
    fn concat_pair(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let mut data = self.tensors[a.0].data.clone();
        data.extend_from_slice(&self.tensors[b.0].data);
        let n = data.len();
        let req = self.needs(a) || self.needs(b);
        self.push(vec![n], data, req, Op::ConcatPair(a, b))
    }
}
