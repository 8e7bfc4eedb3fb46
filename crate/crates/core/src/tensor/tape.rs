//! The reverse-mode differentiation tape.
//!
//! Every operation appends one node holding its output value, the operand
//! ids, and whatever the backward rule needs. Nodes are created in
//! topological order by construction (an operand id always precedes its
//! consumer), so [`Tape::backward`] is a single reverse sweep that visits
//! each node once.
//!
//! Gradient semantics follow the usual convention: interior gradients are
//! scratch state local to one backward call, while gradients of leaves
//! created with `requires_grad = true` accumulate across calls until
//! [`Tape::zero_grads`] resets them. Calling `backward` twice therefore
//! doubles every leaf gradient.
//!
//! Shape violations are programmer errors and panic with a message naming
//! the operation; no operation broadcasts implicitly.

use super::conv;
use super::{numel, Element, Tensor};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
enum Unary {
    Silu,
    Sigmoid,
    Softplus,
    Exp,
    Abs,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Neg(TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Unary(TensorId, Unary),
    Matmul(TensorId, TensorId),
    Bmm(TensorId, TensorId),
    Conv2d {
        x: TensorId,
        k: TensorId,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: TensorId,
        k: TensorId,
        stride: usize,
        pad: usize,
    },
    Conv1d {
        x: TensorId,
        k: TensorId,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
    Softmax(TensorId),
    Reshape(TensorId),
    Transpose(TensorId, usize, usize),
    Expand(TensorId, usize),
    SumAxis(TensorId, usize),
    MeanAxis(TensorId, usize),
    SumAll(TensorId),
    MeanAll(TensorId),
    Concat(Vec<TensorId>, usize),
    Slice {
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reverse(TensorId, usize),
    Patchify {
        x: TensorId,
        p: usize,
    },
    Unpatchify {
        x: TensorId,
        p: usize,
        c: usize,
        h: usize,
        w: usize,
    },
}

struct Node<T: Element> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Accumulated gradient; populated for `requires_grad` leaves only.
    grad: Option<Vec<T>>,
    /// Leaves: the user's flag. Interior nodes: true when any operand
    /// requires a gradient, so the backward sweep can skip dead branches.
    requires_grad: bool,
    op: Op,
}

/// Whether to scan every op output for NaN/Inf. Always on in debug builds;
/// enabled in release builds with `DIFFUMA_CHECK_FINITE=1`.
pub fn finite_checks_enabled() -> bool {
    use std::sync::OnceLock;
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| {
        cfg!(debug_assertions)
            || std::env::var("DIFFUMA_CHECK_FINITE").map(|v| v == "1").unwrap_or(false)
    })
}

/// The compute graph. See the module docs for the gradient contract.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf. With `requires_grad`, backward passes
    /// accumulate into its gradient buffer.
    pub fn leaf(&mut self, value: &Tensor<T>, requires_grad: bool) -> TensorId {
        self.push(
            value.shape().to_vec(),
            value.data().to_vec(),
            Op::Leaf,
            requires_grad,
            "leaf",
        )
    }

    /// Insert a tensor that never receives gradients.
    pub fn constant(&mut self, value: &Tensor<T>) -> TensorId {
        self.leaf(value, false)
    }

    /// Scalar constant convenience.
    pub fn constant_scalar(&mut self, value: T) -> TensorId {
        self.constant(&Tensor::scalar(value))
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    /// Clone a node's value out of the tape.
    pub fn value(&self, id: TensorId) -> Tensor<T> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any backward pass
    /// has reached it.
    pub fn grad(&self, id: TensorId) -> Option<Tensor<T>> {
        let node = &self.nodes[id.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.shape.clone(), g.clone()))
    }

    /// Clear all accumulated leaf gradients.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        if finite_checks_enabled() && !data.iter().all(|v| v.is_finite()) {
            panic!("{name}: non-finite value in output of shape {shape:?}");
        }
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn req(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ---------------------------------------------------------------------
    // Elementwise operations
    // ---------------------------------------------------------------------

    fn binary_shape_check(&self, name: &str, a: TensorId, b: TensorId) {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "{name}: shape mismatch {:?} vs {:?} (no implicit broadcasting; reshape/expand first)",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_shape_check("add", a, b);
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let req = self.req(a) || self.req(b);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Add(a, b), req, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_shape_check("sub", a, b);
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let req = self.req(a) || self.req(b);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Sub(a, b), req, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_shape_check("mul", a, b);
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let req = self.req(a) || self.req(b);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Mul(a, b), req, "mul")
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| -x).collect();
        let req = self.req(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Neg(a), req, "neg")
    }

    /// Multiply by a compile-time-known scalar constant.
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let cc = T::from_f64(c);
        let data = self.nodes[a.0].data.iter().map(|&x| x * cc).collect();
        let req = self.req(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Scale(a, c), req, "scale")
    }

    /// Add a scalar constant to every element.
    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let cc = T::from_f64(c);
        let data = self.nodes[a.0].data.iter().map(|&x| x + cc).collect();
        let req = self.req(a);
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            Op::AddScalar(a),
            req,
            "add_scalar",
        )
    }

    fn unary(&mut self, a: TensorId, kind: Unary, name: &'static str) -> TensorId {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| match kind {
                Unary::Silu => x * sigmoid(x),
                Unary::Sigmoid => sigmoid(x),
                Unary::Softplus => softplus(x),
                Unary::Exp => x.exp(),
                Unary::Abs => x.abs(),
            })
            .collect();
        let req = self.req(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Unary(a, kind), req, name)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Unary::Silu, "silu")
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Unary::Sigmoid, "sigmoid")
    }

    /// `ln(1 + exp(x))`, evaluated in overflow-safe form.
    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Unary::Softplus, "softplus")
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Unary::Exp, "exp")
    }

    /// Absolute value; the subgradient at 0 is defined as 0.
    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Unary::Abs, "abs")
    }

    // ---------------------------------------------------------------------
    // Contractions
    // ---------------------------------------------------------------------

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} x {sb:?} (expect [m,k] x [k,n])"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_kernel(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        let req = self.req(a) || self.req(b);
        self.push(vec![m, n], out, Op::Matmul(a, b), req, "matmul")
    }

    /// Batched matrix product `[g,m,k] x [g,k,n] -> [g,m,n]`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "bmm: incompatible shapes {sa:?} x {sb:?} (expect [g,m,k] x [g,k,n])"
        );
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); g * m * n];
        for gi in 0..g {
            matmul_kernel(
                &self.nodes[a.0].data[gi * m * k..][..m * k],
                &self.nodes[b.0].data[gi * k * n..][..k * n],
                &mut out[gi * m * n..][..m * n],
                m,
                k,
                n,
            );
        }
        let req = self.req(a) || self.req(b);
        self.push(vec![g, m, n], out, Op::Bmm(a, b), req, "bmm")
    }

    /// Composite: `x @ w (+ bias)` for `x: [m,k]`, `w: [k,n]`, `bias: [n]`.
    /// Built from `matmul`/`reshape`/`expand`/`add`, so its gradient needs
    /// no dedicated rule.
    pub fn linear(&mut self, x: TensorId, w: TensorId, bias: Option<TensorId>) -> TensorId {
        let y = self.matmul(x, w);
        match bias {
            None => y,
            Some(b) => {
                let m = self.shape(y)[0];
                let n = self.shape(y)[1];
                assert_eq!(
                    self.shape(b),
                    &[n],
                    "linear: bias shape {:?} does not match output width {n}",
                    self.shape(b)
                );
                let b1 = self.reshape(b, &[1, n]);
                let bb = self.expand(b1, 0, m);
                self.add(y, bb)
            }
        }
    }

    // ---------------------------------------------------------------------
    // Convolutions
    // ---------------------------------------------------------------------

    /// 2-D cross-correlation. `x: [b,ci,h,w]`, `k: [co,ci,kh,kw]`.
    pub fn conv2d(&mut self, x: TensorId, k: TensorId, stride: usize, pad: usize) -> TensorId {
        let (sx, sk) = (&self.nodes[x.0].shape, &self.nodes[k.0].shape);
        assert!(
            sx.len() == 4 && sk.len() == 4,
            "conv2d: expect input [b,ci,h,w] and kernel [co,ci,kh,kw], got {sx:?} and {sk:?}"
        );
        assert!(stride > 0, "conv2d: stride must be positive");
        assert!(
            sx.iter().all(|&d| d > 0) && sk.iter().all(|&d| d > 0),
            "conv2d: zero-extent dimension in input {sx:?} or kernel {sk:?}"
        );
        assert_eq!(
            sx[1], sk[1],
            "conv2d: input channels {} != kernel channels {}",
            sx[1], sk[1]
        );
        let (b, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sk[0], sk[2], sk[3]);
        let ho = conv::conv_out_len(h, kh, stride, pad);
        let wo = conv::conv_out_len(w, kw, stride, pad);
        let mut out = vec![T::zero(); b * co * ho * wo];
        conv::conv2d_forward(
            &self.nodes[x.0].data,
            &self.nodes[k.0].data,
            &mut out,
            (b, ci, h, w),
            (co, kh, kw),
            stride,
            pad,
            (ho, wo),
        );
        let req = self.req(x) || self.req(k);
        self.push(
            vec![b, co, ho, wo],
            out,
            Op::Conv2d { x, k, stride, pad },
            req,
            "conv2d",
        )
    }

    /// Transposed 2-D convolution, the adjoint of [`Tape::conv2d`] with the
    /// same kernel tensor. `x: [b,ci,h,w]`, `k: [ci,co,kh,kw]`.
    pub fn conv_transpose2d(
        &mut self,
        x: TensorId,
        k: TensorId,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let (sx, sk) = (&self.nodes[x.0].shape, &self.nodes[k.0].shape);
        assert!(
            sx.len() == 4 && sk.len() == 4,
            "conv_transpose2d: expect input [b,ci,h,w] and kernel [ci,co,kh,kw], got {sx:?} and {sk:?}"
        );
        assert!(stride > 0, "conv_transpose2d: stride must be positive");
        assert!(
            sx.iter().all(|&d| d > 0) && sk.iter().all(|&d| d > 0),
            "conv_transpose2d: zero-extent dimension in input {sx:?} or kernel {sk:?}"
        );
        assert_eq!(
            sx[1], sk[0],
            "conv_transpose2d: input channels {} != kernel in-channels {}",
            sx[1], sk[0]
        );
        let (b, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sk[1], sk[2], sk[3]);
        let ho = conv::conv_transpose_out_len(h, kh, stride, pad);
        let wo = conv::conv_transpose_out_len(w, kw, stride, pad);
        let mut out = vec![T::zero(); b * co * ho * wo];
        conv::conv_transpose2d_forward(
            &self.nodes[x.0].data,
            &self.nodes[k.0].data,
            &mut out,
            (b, ci, h, w),
            (co, kh, kw),
            stride,
            pad,
            (ho, wo),
        );
        let req = self.req(x) || self.req(k);
        self.push(
            vec![b, co, ho, wo],
            out,
            Op::ConvTranspose2d { x, k, stride, pad },
            req,
            "conv_transpose2d",
        )
    }

    /// Grouped 1-D cross-correlation. `x: [b,ci,l]`, `k: [co,ci/groups,kl]`.
    /// `groups == ci == co` is a depthwise temporal convolution.
    pub fn conv1d(
        &mut self,
        x: TensorId,
        k: TensorId,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> TensorId {
        let (sx, sk) = (&self.nodes[x.0].shape, &self.nodes[k.0].shape);
        assert!(
            sx.len() == 3 && sk.len() == 3,
            "conv1d: expect input [b,ci,l] and kernel [co,ci/groups,kl], got {sx:?} and {sk:?}"
        );
        assert!(stride > 0 && groups > 0, "conv1d: stride and groups must be positive");
        assert!(
            sx.iter().all(|&d| d > 0) && sk.iter().all(|&d| d > 0),
            "conv1d: zero-extent dimension in input {sx:?} or kernel {sk:?}"
        );
        let (b, ci, l) = (sx[0], sx[1], sx[2]);
        let (co, cig, kl) = (sk[0], sk[1], sk[2]);
        assert!(
            ci % groups == 0 && co % groups == 0 && cig == ci / groups,
            "conv1d: groups {groups} incompatible with channels ci={ci}, co={co}, kernel {sk:?}"
        );
        let lo = conv::conv_out_len(l, kl, stride, pad);
        let mut out = vec![T::zero(); b * co * lo];
        conv::conv1d_forward(
            &self.nodes[x.0].data,
            &self.nodes[k.0].data,
            &mut out,
            (b, ci, l),
            (co, kl),
            stride,
            pad,
            groups,
            lo,
        );
        let req = self.req(x) || self.req(k);
        self.push(
            vec![b, co, lo],
            out,
            Op::Conv1d {
                x,
                k,
                stride,
                pad,
                groups,
            },
            req,
            "conv1d",
        )
    }

    // ---------------------------------------------------------------------
    // Normalisation and softmax
    // ---------------------------------------------------------------------

    /// Layer normalisation over the last axis with learnable scale/shift.
    /// `gamma`/`beta` have the shape of the last axis; `eps = 1e-5`.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        let sx = &self.nodes[x.0].shape;
        assert!(!sx.is_empty(), "layer_norm: input must have rank >= 1");
        let d = *sx.last().unwrap();
        assert_eq!(
            self.nodes[gamma.0].shape,
            vec![d],
            "layer_norm: gamma shape {:?} must be [{d}]",
            self.nodes[gamma.0].shape
        );
        assert_eq!(
            self.nodes[beta.0].shape,
            vec![d],
            "layer_norm: beta shape {:?} must be [{d}]",
            self.nodes[beta.0].shape
        );
        let rows = numel(sx) / d;
        let mut out = vec![T::zero(); rows * d];
        let eps = T::from_f64(LAYER_NORM_EPS);
        let xd = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let bt = &self.nodes[beta.0].data;
        for r in 0..rows {
            let row = &xd[r * d..][..d];
            let (mean, rstd) = row_mean_rstd(row, eps);
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * g[j] + bt[j];
            }
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        self.push(
            sx.clone(),
            out,
            Op::LayerNorm { x, gamma, beta },
            req,
            "layer_norm",
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let sx = &self.nodes[x.0].shape;
        assert!(!sx.is_empty(), "softmax: input must have rank >= 1");
        let d = *sx.last().unwrap();
        let rows = numel(sx) / d;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xd[r * d..][..d];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..d {
                let e = (row[j] - max).exp();
                out[r * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                out[r * d + j] /= sum;
            }
        }
        let req = self.req(x);
        self.push(sx.clone(), out, Op::Softmax(x), req, "softmax")
    }

    // ---------------------------------------------------------------------
    // Shape manipulation
    // ---------------------------------------------------------------------

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        assert_eq!(
            numel(&self.nodes[x.0].shape),
            numel(shape),
            "reshape: cannot view {:?} as {:?}",
            self.nodes[x.0].shape,
            shape
        );
        let data = self.nodes[x.0].data.clone();
        let req = self.req(x);
        self.push(shape.to_vec(), data, Op::Reshape(x), req, "reshape")
    }

    /// Swap two axes.
    pub fn transpose(&mut self, x: TensorId, a: usize, b: usize) -> TensorId {
        let sx = self.nodes[x.0].shape.clone();
        assert!(
            a < sx.len() && b < sx.len(),
            "transpose: axes ({a},{b}) out of range for shape {sx:?}"
        );
        let mut out_shape = sx.clone();
        out_shape.swap(a, b);
        let mut out = vec![T::zero(); numel(&sx)];
        transpose_kernel(&self.nodes[x.0].data, &mut out, &sx, a, b);
        let req = self.req(x);
        self.push(out_shape, out, Op::Transpose(x, a, b), req, "transpose")
    }

    /// Materialise a broadcast of a size-1 axis to length `n`.
    pub fn expand(&mut self, x: TensorId, axis: usize, n: usize) -> TensorId {
        let sx = self.nodes[x.0].shape.clone();
        assert!(
            axis < sx.len() && sx[axis] == 1,
            "expand: axis {axis} of shape {sx:?} must exist and have extent 1"
        );
        assert!(n > 0, "expand: target extent must be positive");
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let xd = &self.nodes[x.0].data;
        let mut out = vec![T::zero(); outer * n * inner];
        for o in 0..outer {
            let src = &xd[o * inner..][..inner];
            for i in 0..n {
                out[(o * n + i) * inner..][..inner].copy_from_slice(src);
            }
        }
        let mut out_shape = sx;
        out_shape[axis] = n;
        let req = self.req(x);
        self.push(out_shape, out, Op::Expand(x, axis), req, "expand")
    }

    /// Sum over one axis (the axis is removed).
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> TensorId {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over one axis (the axis is removed).
    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> TensorId {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&mut self, x: TensorId, axis: usize, mean: bool) -> TensorId {
        let sx = self.nodes[x.0].shape.clone();
        assert!(
            axis < sx.len(),
            "reduce: axis {axis} out of range for shape {sx:?}"
        );
        let n = sx[axis];
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let xd = &self.nodes[x.0].data;
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &xd[(o * n + i) * inner..][..inner];
                let dst = &mut out[o * inner..][..inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += *s;
                }
            }
        }
        if mean {
            let inv = T::one() / T::from_f64(n as f64);
            for v in &mut out {
                *v *= inv;
            }
        }
        let mut out_shape = sx;
        out_shape.remove(axis);
        let req = self.req(x);
        let op = if mean {
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        self.push(out_shape, out, op, req, if mean { "mean_axis" } else { "sum_axis" })
    }

    /// Sum of all elements (scalar output).
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut acc = T::zero();
        for v in &self.nodes[x.0].data {
            acc += *v;
        }
        let req = self.req(x);
        self.push(vec![], vec![acc], Op::SumAll(x), req, "sum_all")
    }

    /// Mean of all elements (scalar output).
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].data.len();
        let mut acc = T::zero();
        for v in &self.nodes[x.0].data {
            acc += *v;
        }
        acc /= T::from_f64(n as f64);
        let req = self.req(x);
        self.push(vec![], vec![acc], Op::MeanAll(x), req, "mean_all")
    }

    /// Concatenate along an axis. All other extents must match.
    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> TensorId {
        assert!(!xs.is_empty(), "concat: need at least one operand");
        let first = self.nodes[xs[0].0].shape.clone();
        assert!(
            axis < first.len(),
            "concat: axis {axis} out of range for shape {first:?}"
        );
        let mut total = 0usize;
        for &id in xs {
            let s = &self.nodes[id.0].shape;
            assert_eq!(s.len(), first.len(), "concat: rank mismatch {s:?} vs {first:?}");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(
                    d == axis || a == b,
                    "concat: extent mismatch at axis {d}: {s:?} vs {first:?}"
                );
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first;
        out_shape[axis] = total;
        let mut out = vec![T::zero(); numel(&out_shape)];
        let mut offset = 0usize;
        for &id in xs {
            let n = self.nodes[id.0].shape[axis];
            let src = &self.nodes[id.0].data;
            for o in 0..outer {
                let dst = &mut out[(o * total + offset) * inner..][..n * inner];
                dst.copy_from_slice(&src[o * n * inner..][..n * inner]);
            }
            offset += n;
        }
        let req = xs.iter().any(|&id| self.req(id));
        self.push(out_shape, out, Op::Concat(xs.to_vec(), axis), req, "concat")
    }

    /// Contiguous sub-range along one axis.
    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> TensorId {
        let sx = self.nodes[x.0].shape.clone();
        assert!(
            axis < sx.len(),
            "slice: axis {axis} out of range for shape {sx:?}"
        );
        assert!(
            len > 0 && start + len <= sx[axis],
            "slice: range {start}..{} exceeds extent {} of shape {sx:?}",
            start + len,
            sx[axis]
        );
        let n = sx[axis];
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let xd = &self.nodes[x.0].data;
        let mut out = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src = &xd[(o * n + start) * inner..][..len * inner];
            out[o * len * inner..][..len * inner].copy_from_slice(src);
        }
        let mut out_shape = sx;
        out_shape[axis] = len;
        let req = self.req(x);
        self.push(
            out_shape,
            out,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            req,
            "slice",
        )
    }

    /// Reverse the order of elements along one axis.
    pub fn reverse(&mut self, x: TensorId, axis: usize) -> TensorId {
        let sx = self.nodes[x.0].shape.clone();
        assert!(
            axis < sx.len(),
            "reverse: axis {axis} out of range for shape {sx:?}"
        );
        let n = sx[axis];
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let xd = &self.nodes[x.0].data;
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..n {
                let src = &xd[(o * n + i) * inner..][..inner];
                out[(o * n + (n - 1 - i)) * inner..][..inner].copy_from_slice(src);
            }
        }
        let req = self.req(x);
        self.push(sx, out, Op::Reverse(x, axis), req, "reverse")
    }

    /// Split frames into non-overlapping `p x p` patches:
    /// `[f,c,h,w] -> [f, (h/p)*(w/p), c*p*p]`.
    pub fn patchify(&mut self, x: TensorId, p: usize) -> TensorId {
        let sx = self.nodes[x.0].shape.clone();
        assert!(
            sx.len() == 4,
            "patchify: expect input [f,c,h,w], got {sx:?}"
        );
        let (f, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        assert!(
            p > 0 && h % p == 0 && w % p == 0,
            "patchify: patch size {p} must divide spatial dims ({h},{w})"
        );
        let mut out = vec![T::zero(); f * c * h * w];
        patchify_kernel(&self.nodes[x.0].data, &mut out, f, c, h, w, p);
        let tokens = (h / p) * (w / p);
        let req = self.req(x);
        self.push(
            vec![f, tokens, c * p * p],
            out,
            Op::Patchify { x, p },
            req,
            "patchify",
        )
    }

    /// Inverse of [`Tape::patchify`]:
    /// `[f, (h/p)*(w/p), c*p*p] -> [f,c,h,w]`.
    pub fn unpatchify(&mut self, x: TensorId, p: usize, c: usize, h: usize, w: usize) -> TensorId {
        let sx = self.nodes[x.0].shape.clone();
        assert!(
            sx.len() == 3,
            "unpatchify: expect input [f,tokens,features], got {sx:?}"
        );
        assert!(
            p > 0 && h % p == 0 && w % p == 0,
            "unpatchify: patch size {p} must divide spatial dims ({h},{w})"
        );
        let f = sx[0];
        assert!(
            sx[1] == (h / p) * (w / p) && sx[2] == c * p * p,
            "unpatchify: shape {sx:?} does not match target [{f},{c},{h},{w}] with p={p}"
        );
        let mut out = vec![T::zero(); f * c * h * w];
        unpatchify_kernel(&self.nodes[x.0].data, &mut out, f, c, h, w, p);
        let req = self.req(x);
        self.push(
            vec![f, c, h, w],
            out,
            Op::Unpatchify { x, p, c, h, w },
            req,
            "unpatchify",
        )
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar output. Interior gradients are
    /// scratch state; gradients of `requires_grad` leaves accumulate across
    /// calls (two identical calls double them).
    pub fn backward(&mut self, out: TensorId) {
        assert_eq!(
            self.nodes[out.0].data.len(),
            1,
            "backward: output must be a scalar, got shape {:?}",
            self.nodes[out.0].shape
        );
        let mut scratch: Vec<Option<Vec<T>>> = vec![None; out.0 + 1];
        scratch[out.0] = Some(vec![T::one()]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                scratch[i] = None;
                continue;
            }
            let Some(g) = scratch[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    let buf = node
                        .grad
                        .get_or_insert_with(|| vec![T::zero(); node.data.len()]);
                    for (d, s) in buf.iter_mut().zip(&g) {
                        *d += *s;
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut scratch, a, |dst| add_assign(dst, &g));
                    self.acc(&mut scratch, b, |dst| add_assign(dst, &g));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut scratch, a, |dst| add_assign(dst, &g));
                    self.acc(&mut scratch, b, |dst| sub_assign(dst, &g));
                }
                Op::Mul(a, b) => {
                    // Split borrows: contributions are computed before `acc`
                    // mutates the scratch table.
                    let da: Vec<T> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    let db: Vec<T> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.acc(&mut scratch, a, |dst| add_assign(dst, &da));
                    self.acc(&mut scratch, b, |dst| add_assign(dst, &db));
                }
                Op::Neg(a) => {
                    self.acc(&mut scratch, a, |dst| sub_assign(dst, &g));
                }
                Op::Scale(a, c) => {
                    let cc = T::from_f64(c);
                    self.acc(&mut scratch, a, |dst| {
                        for (d, s) in dst.iter_mut().zip(&g) {
                            *d += *s * cc;
                        }
                    });
                }
                Op::AddScalar(a) => {
                    self.acc(&mut scratch, a, |dst| add_assign(dst, &g));
                }
                Op::Unary(a, kind) => {
                    let xd = &self.nodes[a.0].data;
                    let yd = &self.nodes[i].data;
                    let dx: Vec<T> = match kind {
                        Unary::Silu => g
                            .iter()
                            .zip(xd)
                            .map(|(&gv, &x)| {
                                let s = sigmoid(x);
                                gv * s * (T::one() + x * (T::one() - s))
                            })
                            .collect(),
                        Unary::Sigmoid => g
                            .iter()
                            .zip(yd)
                            .map(|(&gv, &y)| gv * y * (T::one() - y))
                            .collect(),
                        Unary::Softplus => g
                            .iter()
                            .zip(xd)
                            .map(|(&gv, &x)| gv * sigmoid(x))
                            .collect(),
                        Unary::Exp => g.iter().zip(yd).map(|(&gv, &y)| gv * y).collect(),
                        Unary::Abs => g
                            .iter()
                            .zip(xd)
                            .map(|(&gv, &x)| {
                                if x > T::zero() {
                                    gv
                                } else if x < T::zero() {
                                    -gv
                                } else {
                                    T::zero()
                                }
                            })
                            .collect(),
                    };
                    self.acc(&mut scratch, a, |dst| add_assign(dst, &dx));
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    let mut da = vec![T::zero(); m * k];
                    let mut db = vec![T::zero(); k * n];
                    matmul_backward(
                        &self.nodes[a.0].data,
                        &self.nodes[b.0].data,
                        &g,
                        &mut da,
                        &mut db,
                        m,
                        k,
                        n,
                    );
                    self.acc(&mut scratch, a, |dst| add_assign(dst, &da));
                    self.acc(&mut scratch, b, |dst| add_assign(dst, &db));
                }
                Op::Bmm(a, b) => {
                    let sa = &self.nodes[a.0].shape;
                    let (gn, m, k) = (sa[0], sa[1], sa[2]);
                    let n = self.nodes[b.0].shape[2];
                    let mut da = vec![T::zero(); gn * m * k];
                    let mut db = vec![T::zero(); gn * k * n];
                    for gi in 0..gn {
                        matmul_backward(
                            &self.nodes[a.0].data[gi * m * k..][..m * k],
                            &self.nodes[b.0].data[gi * k * n..][..k * n],
                            &g[gi * m * n..][..m * n],
                            &mut da[gi * m * k..][..m * k],
                            &mut db[gi * k * n..][..k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.acc(&mut scratch, a, |dst| add_assign(dst, &da));
                    self.acc(&mut scratch, b, |dst| add_assign(dst, &db));
                }
                Op::Conv2d { x, k, stride, pad } => {
                    let sx = self.nodes[x.0].shape.clone();
                    let sk = self.nodes[k.0].shape.clone();
                    let so = self.nodes[i].shape.clone();
                    let dims_x = (sx[0], sx[1], sx[2], sx[3]);
                    let dims_k = (sk[0], sk[2], sk[3]);
                    let dims_o = (so[2], so[3]);
                    if self.req(x) {
                        let mut dx = vec![T::zero(); numel(&sx)];
                        conv::conv2d_backward_input(
                            &g,
                            &self.nodes[k.0].data,
                            &mut dx,
                            dims_x,
                            dims_k,
                            stride,
                            pad,
                            dims_o,
                        );
                        self.acc(&mut scratch, x, |dst| add_assign(dst, &dx));
                    }
                    if self.req(k) {
                        let mut dk = vec![T::zero(); numel(&sk)];
                        conv::conv2d_backward_kernel(
                            &self.nodes[x.0].data,
                            &g,
                            &mut dk,
                            dims_x,
                            dims_k,
                            stride,
                            pad,
                            dims_o,
                        );
                        self.acc(&mut scratch, k, |dst| add_assign(dst, &dk));
                    }
                }
                Op::ConvTranspose2d { x, k, stride, pad } => {
                    let sx = self.nodes[x.0].shape.clone();
                    let sk = self.nodes[k.0].shape.clone();
                    let so = self.nodes[i].shape.clone();
                    let dims_x = (sx[0], sx[1], sx[2], sx[3]);
                    let dims_k = (sk[1], sk[2], sk[3]);
                    let dims_o = (so[2], so[3]);
                    if self.req(x) {
                        let mut dx = vec![T::zero(); numel(&sx)];
                        conv::conv_transpose2d_backward_input(
                            &g,
                            &self.nodes[k.0].data,
                            &mut dx,
                            dims_x,
                            dims_k,
                            stride,
                            pad,
                            dims_o,
                        );
                        self.acc(&mut scratch, x, |dst| add_assign(dst, &dx));
                    }
                    if self.req(k) {
                        let mut dk = vec![T::zero(); numel(&sk)];
                        conv::conv_transpose2d_backward_kernel(
                            &self.nodes[x.0].data,
                            &g,
                            &mut dk,
                            dims_x,
                            dims_k,
                            stride,
                            pad,
                            dims_o,
                        );
                        self.acc(&mut scratch, k, |dst| add_assign(dst, &dk));
                    }
                }
                Op::Conv1d {
                    x,
                    k,
                    stride,
                    pad,
                    groups,
                } => {
                    let sx = self.nodes[x.0].shape.clone();
                    let sk = self.nodes[k.0].shape.clone();
                    let lo = self.nodes[i].shape[2];
                    let dims_x = (sx[0], sx[1], sx[2]);
                    let dims_k = (sk[0], sk[2]);
                    if self.req(x) {
                        let mut dx = vec![T::zero(); numel(&sx)];
                        conv::conv1d_backward_input(
                            &g,
                            &self.nodes[k.0].data,
                            &mut dx,
                            dims_x,
                            dims_k,
                            stride,
                            pad,
                            groups,
                            lo,
                        );
                        self.acc(&mut scratch, x, |dst| add_assign(dst, &dx));
                    }
                    if self.req(k) {
                        let mut dk = vec![T::zero(); numel(&sk)];
                        conv::conv1d_backward_kernel(
                            &self.nodes[x.0].data,
                            &g,
                            &mut dk,
                            dims_x,
                            dims_k,
                            stride,
                            pad,
                            groups,
                            lo,
                        );
                        self.acc(&mut scratch, k, |dst| add_assign(dst, &dk));
                    }
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let d = *self.nodes[x.0].shape.last().unwrap();
                    let rows = self.nodes[x.0].data.len() / d;
                    let xd = &self.nodes[x.0].data;
                    let gd = &self.nodes[gamma.0].data;
                    let eps = T::from_f64(LAYER_NORM_EPS);
                    let mut dx = vec![T::zero(); xd.len()];
                    let mut dgamma = vec![T::zero(); d];
                    let mut dbeta = vec![T::zero(); d];
                    let inv_d = T::one() / T::from_f64(d as f64);
                    for r in 0..rows {
                        let row = &xd[r * d..][..d];
                        let grow = &g[r * d..][..d];
                        let (mean, rstd) = row_mean_rstd(row, eps);
                        // dxhat, plus the two row means the backward rule needs.
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            let dxhat = grow[j] * gd[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dgamma[j] += grow[j] * xhat;
                            dbeta[j] += grow[j];
                        }
                        let mean_dxhat = sum_dxhat * inv_d;
                        let mean_dxhat_xhat = sum_dxhat_xhat * inv_d;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            let dxhat = grow[j] * gd[j];
                            dx[r * d + j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    self.acc(&mut scratch, x, |dst| add_assign(dst, &dx));
                    self.acc(&mut scratch, gamma, |dst| add_assign(dst, &dgamma));
                    self.acc(&mut scratch, beta, |dst| add_assign(dst, &dbeta));
                }
                Op::Softmax(x) => {
                    let d = *self.nodes[i].shape.last().unwrap();
                    let rows = self.nodes[i].data.len() / d;
                    let yd = &self.nodes[i].data;
                    let mut dx = vec![T::zero(); yd.len()];
                    for r in 0..rows {
                        let yrow = &yd[r * d..][..d];
                        let grow = &g[r * d..][..d];
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot += grow[j] * yrow[j];
                        }
                        for j in 0..d {
                            dx[r * d + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    self.acc(&mut scratch, x, |dst| add_assign(dst, &dx));
                }
                Op::Reshape(x) => {
                    self.acc(&mut scratch, x, |dst| add_assign(dst, &g));
                }
                Op::Transpose(x, a, b) => {
                    // Transposing the gradient back is the exact adjoint.
                    let out_shape = self.nodes[i].shape.clone();
                    let mut dx = vec![T::zero(); g.len()];
                    transpose_kernel(&g, &mut dx, &out_shape, a, b);
                    self.acc(&mut scratch, x, |dst| add_assign(dst, &dx));
                }
                Op::Expand(x, axis) => {
                    let sx = &self.nodes[x.0].shape;
                    let n = self.nodes[i].shape[axis];
                    let outer: usize = sx[..axis].iter().product();
                    let inner: usize = sx[axis + 1..].iter().product();
                    let mut dx = vec![T::zero(); outer * inner];
                    for o in 0..outer {
                        for rep in 0..n {
                            let src = &g[(o * n + rep) * inner..][..inner];
                            let dst = &mut dx[o * inner..][..inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                    }
                    self.acc(&mut scratch, x, |dst| add_assign(dst, &dx));
                }
                Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                    let mean = matches!(self.nodes[i].op, Op::MeanAxis(..));
                    let sx = &self.nodes[x.0].shape;
                    let n = sx[axis];
                    let outer: usize = sx[..axis].iter().product();
                    let inner: usize = sx[axis + 1..].iter().product();
                    let scale = if mean {
                        T::one() / T::from_f64(n as f64)
                    } else {
                        T::one()
                    };
                    let mut dx = vec![T::zero(); numel(sx)];
                    for o in 0..outer {
                        let src = &g[o * inner..][..inner];
                        for rep in 0..n {
                            let dst = &mut dx[(o * n + rep) * inner..][..inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s * scale;
                            }
                        }
                    }
                    self.acc(&mut scratch, x, |dst| add_assign(dst, &dx));
                }
                Op::SumAll(x) | Op::MeanAll(x) => {
                    let n = self.nodes[x.0].data.len();
                    let scale = if matches!(self.nodes[i].op, Op::MeanAll(..)) {
                        T::one() / T::from_f64(n as f64)
                    } else {
                        T::one()
                    };
                    let gv = g[0] * scale;
                    self.acc(&mut scratch, x, |dst| {
                        for d in dst.iter_mut() {
                            *d += gv;
                        }
                    });
                }
                Op::Concat(xs, axis) => {
                    let out_shape = self.nodes[i].shape.clone();
                    let total = out_shape[axis];
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let mut offset = 0usize;
                    for &xid in &xs {
                        let n = self.nodes[xid.0].shape[axis];
                        let mut dx = vec![T::zero(); outer * n * inner];
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..n * inner];
                            dx[o * n * inner..][..n * inner].copy_from_slice(src);
                        }
                        offset += n;
                        self.acc(&mut scratch, xid, |dst| add_assign(dst, &dx));
                    }
                }
                Op::Slice {
                    x,
                    axis,
                    start,
                    len,
                } => {
                    let sx = &self.nodes[x.0].shape;
                    let n = sx[axis];
                    let outer: usize = sx[..axis].iter().product();
                    let inner: usize = sx[axis + 1..].iter().product();
                    let mut dx = vec![T::zero(); numel(sx)];
                    for o in 0..outer {
                        let dst = &mut dx[(o * n + start) * inner..][..len * inner];
                        let src = &g[o * len * inner..][..len * inner];
                        dst.copy_from_slice(src);
                    }
                    self.acc(&mut scratch, x, |dst| add_assign(dst, &dx));
                }
                Op::Reverse(x, axis) => {
                    let sx = &self.nodes[x.0].shape;
                    let n = sx[axis];
                    let outer: usize = sx[..axis].iter().product();
                    let inner: usize = sx[axis + 1..].iter().product();
                    let mut dx = vec![T::zero(); g.len()];
                    for o in 0..outer {
                        for idx in 0..n {
                            let src = &g[(o * n + idx) * inner..][..inner];
                            dx[(o * n + (n - 1 - idx)) * inner..][..inner].copy_from_slice(src);
                        }
                    }
                    self.acc(&mut scratch, x, |dst| add_assign(dst, &dx));
                }
                Op::Patchify { x, p } => {
                    let sx = &self.nodes[x.0].shape;
                    let (f, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let mut dx = vec![T::zero(); numel(sx)];
                    unpatchify_kernel(&g, &mut dx, f, c, h, w, p);
                    self.acc(&mut scratch, x, |dst| add_assign(dst, &dx));
                }
                Op::Unpatchify { x, p, c, h, w } => {
                    let f = self.nodes[x.0].shape[0];
                    let mut dx = vec![T::zero(); self.nodes[x.0].data.len()];
                    patchify_kernel(&g, &mut dx, f, c, h, w, p);
                    self.acc(&mut scratch, x, |dst| add_assign(dst, &dx));
                }
            }
            scratch[i] = None;
        }
    }

    /// Apply `f` to the scratch-gradient buffer of `id`, initialising it to
    /// zeros on first touch. Skips operands that require no gradient.
    fn acc(
        &self,
        scratch: &mut [Option<Vec<T>>],
        id: TensorId,
        f: impl FnOnce(&mut Vec<T>),
    ) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut scratch[id.0];
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.nodes[id.0].data.len()]);
        f(buf);
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    // Evaluate through exp(-|x|) so neither branch overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Element>(x: T) -> T {
    // max(x, 0) + ln(1 + exp(-|x|))
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn row_mean_rstd<T: Element>(row: &[T], eps: T) -> (T, T) {
    let inv_d = T::one() / T::from_f64(row.len() as f64);
    let mut mean = T::zero();
    for &v in row {
        mean += v;
    }
    mean *= inv_d;
    let mut var = T::zero();
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var *= inv_d;
    (mean, T::one() / (var + eps).sqrt())
}

fn add_assign<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn sub_assign<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d -= *s;
    }
}

/// `out += a @ b` for row-major `[m,k] x [k,n]`.
fn matmul_kernel<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let orow = &mut out[i * n..][..n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * n..][..n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Gradients of `y = a @ b`: `da += g @ b^T`, `db += a^T @ g`.
#[allow(clippy::too_many_arguments)]
fn matmul_backward<T: Element>(
    a: &[T],
    b: &[T],
    g: &[T],
    da: &mut [T],
    db: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let grow = &g[i * n..][..n];
        let darow = &mut da[i * k..][..k];
        for kk in 0..k {
            let brow = &b[kk * n..][..n];
            let mut acc = T::zero();
            for (gv, bv) in grow.iter().zip(brow) {
                acc += *gv * *bv;
            }
            darow[kk] += acc;
        }
        let arow = &a[i * k..][..k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let dbrow = &mut db[kk * n..][..n];
            for (d, gv) in dbrow.iter_mut().zip(grow) {
                *d += av * *gv;
            }
        }
    }
}

/// Copy with two axes swapped. Decomposes the shape as
/// `[outer, a, mid, b, inner]` so the innermost copy is contiguous.
fn transpose_kernel<T: Element>(src: &[T], dst: &mut [T], shape: &[usize], a: usize, b: usize) {
    if a == b {
        dst.copy_from_slice(src);
        return;
    }
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    let outer: usize = shape[..a].iter().product();
    let alen = shape[a];
    let mid: usize = shape[a + 1..b].iter().product();
    let blen = shape[b];
    let inner: usize = shape[b + 1..].iter().product();
    // src layout: [outer, alen, mid, blen, inner]
    // dst layout: [outer, blen, mid, alen, inner]
    for o in 0..outer {
        let so = o * alen * mid * blen * inner;
        for ai in 0..alen {
            for mi in 0..mid {
                for bi in 0..blen {
                    let s = so + ((ai * mid + mi) * blen + bi) * inner;
                    let d = so + ((bi * mid + mi) * alen + ai) * inner;
                    dst[d..d + inner].copy_from_slice(&src[s..s + inner]);
                }
            }
        }
    }
}

/// `[f,c,h,w] -> [f, (h/p)*(w/p), c*p*p]` as a pure index permutation.
fn patchify_kernel<T: Element>(
    src: &[T],
    dst: &mut [T],
    f: usize,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) {
    let (gh, gw) = (h / p, w / p);
    let tokens = gh * gw;
    let feat = c * p * p;
    for fi in 0..f {
        for ci in 0..c {
            let plane = &src[(fi * c + ci) * h * w..][..h * w];
            for ph in 0..gh {
                for pw in 0..gw {
                    let t = ph * gw + pw;
                    let out_base = (fi * tokens + t) * feat + ci * p * p;
                    for i in 0..p {
                        let row = &plane[(ph * p + i) * w + pw * p..][..p];
                        dst[out_base + i * p..][..p].copy_from_slice(row);
                    }
                }
            }
        }
    }
}

/// Inverse permutation of [`patchify_kernel`].
fn unpatchify_kernel<T: Element>(
    src: &[T],
    dst: &mut [T],
    f: usize,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) {
    let (gh, gw) = (h / p, w / p);
    let tokens = gh * gw;
    let feat = c * p * p;
    for fi in 0..f {
        for ci in 0..c {
            let plane = &mut dst[(fi * c + ci) * h * w..][..h * w];
            for ph in 0..gh {
                for pw in 0..gw {
                    let t = ph * gw + pw;
                    let in_base = (fi * tokens + t) * feat + ci * p * p;
                    for i in 0..p {
                        let dst_row = &mut plane[(ph * p + i) * w + pw * p..][..p];
                        dst_row.copy_from_slice(&src[in_base + i * p..][..p]);
                    }
                }
            }
        }
    }
}
