use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, conv_out_len, conv_transpose_out_len, ConvGeometry, KERNEL};
use super::{broadcast_index_map, broadcast_shape, numel, Real, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-side zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Padding2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding2d {
    pub const fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Self { top, bottom, left, right }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Scale(Var, T),
    Shift(Var),
    Clamp(Var, T, T),
    Elu(Var, T),
    LeakyRelu(Var, T),
    Sum(Var, Vec<usize>),
    Mean(Var, Vec<usize>),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeometry, cols: Vec<T> },
    ConvTranspose2d { x: Var, k: Var, b: Var, geom: ConvGeometry },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Linear record of operations. Nodes are appended in evaluation order, so
/// every node's inputs precede it and [`Tape::backward`] can visit nodes in
/// exact reverse order.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

type Grads<T> = Vec<(Var, Vec<T>)>;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It takes part in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Resets accumulated gradients of every leaf.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(v.0))
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn derived(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        let value = Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None };
        self.push(value, op, needs_grad)
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(Var, Var) -> Op<T>,
    ) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            left: sa.to_vec(),
            right: sb.to_vec(),
        })?;
        let (da, db) = (self.data(a), self.data(b));
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(sa, &out_shape);
            let mb = broadcast_index_map(sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.derived(&out_shape, data, op(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, TensorError> {
        self.check(a)?;
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.derived(&shape, data, op, needs))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, T::exp, Op::Exp(a))
    }

    /// Natural logarithm. Non-positive inputs are rejected instead of
    /// producing NaN or -inf.
    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        if self.data(a).iter().any(|&x| !(x > T::zero())) {
            return Err(TensorError::NonPositiveLog);
        }
        self.unary(a, T::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        if self.data(a).iter().any(|&x| x < T::zero()) {
            return Err(TensorError::InvalidArgument("negative input to sqrt"));
        }
        self.unary(a, T::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        self.unary(a, |x| x + c, Op::Shift(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is passed through inside the
    /// interval and zero outside.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var, TensorError> {
        if lo > hi {
            return Err(TensorError::InvalidArgument("clamp bounds are reversed"));
        }
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn elu(&mut self, a: Var, alpha: T) -> Result<Var, TensorError> {
        if alpha < T::zero() {
            return Err(TensorError::InvalidArgument("activation slope must be non-negative"));
        }
        self.unary(a, |x| if x > T::zero() { x } else { alpha * x.exp_m1() }, Op::Elu(a, alpha))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: T) -> Result<Var, TensorError> {
        if alpha < T::zero() {
            return Err(TensorError::InvalidArgument("activation slope must be non-negative"));
        }
        self.unary(a, |x| if x > T::zero() { x } else { alpha * x }, Op::LeakyRelu(a, alpha))
    }

    // ---- reductions --------------------------------------------------

    fn reduce_axes(&self, a: Var, axes: Option<&[usize]>) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), TensorError> {
        let shape = self.shape(a);
        let mut axes: Vec<usize> = match axes {
            Some(list) => list.to_vec(),
            None => (0..shape.len()).collect(),
        };
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(TensorError::InvalidAxis { axis: bad, rank: shape.len() });
        }
        let keep: Vec<usize> = shape.iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect();
        let out: Vec<usize> = shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
        Ok((axes, keep, out))
    }

    fn reduce_sum(&self, a: Var, keep: &[usize]) -> Vec<T> {
        let x = self.data(a);
        let mut acc = vec![T::zero(); numel(keep)];
        if acc.len() == 1 {
            acc[0] = x.iter().copied().sum();
        } else {
            let map = broadcast_index_map(keep, self.shape(a));
            for (&j, &v) in map.iter().zip(x) {
                acc[j] += v;
            }
        }
        acc
    }

    /// Sum over `axes` (all axes when `None`). Reduced axes are dropped.
    pub fn sum(&mut self, a: Var, axes: Option<&[usize]>) -> Result<Var, TensorError> {
        self.check(a)?;
        let (axes, keep, out) = self.reduce_axes(a, axes)?;
        let data = self.reduce_sum(a, &keep);
        let needs = self.needs(a);
        Ok(self.derived(&out, data, Op::Sum(a, axes), needs))
    }

    pub fn mean(&mut self, a: Var, axes: Option<&[usize]>) -> Result<Var, TensorError> {
        self.check(a)?;
        let (axes, keep, out) = self.reduce_axes(a, axes)?;
        let count = self.nodes[a.0].value.len() / numel(&keep).max(1);
        if count == 0 {
            return Err(TensorError::InvalidArgument("mean over an empty extent"));
        }
        let inv = T::one() / T::of(count as f64);
        let data = self.reduce_sum(a, &keep).into_iter().map(|v| v * inv).collect();
        let needs = self.needs(a);
        Ok(self.derived(&out, data, Op::Mean(a, axes), needs))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", left: sa.to_vec(), right: sb.to_vec() });
        }
        let (p, q, r) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); p * r];
        kernels::gemm_nn(p, q, r, self.data(a), self.data(b), &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.derived(&[p, r], out, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "transpose", left: s.to_vec(), right: Vec::new() });
        }
        let (r, c) = (s[0], s[1]);
        let x = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.derived(&[c, r], out, Op::Transpose(a), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.check(a)?;
        if numel(shape) != self.nodes[a.0].value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = self.data(a).to_vec();
        let needs = self.needs(a);
        Ok(self.derived(shape, data, Op::Reshape(a), needs))
    }

    /// Dense layer `x·wᵀ + b` with `x: [batch, in]`, `w: [out, in]`,
    /// `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch { op: "linear", left: sx.to_vec(), right: sw.to_vec() });
        }
        if sb != [sw[0]] {
            return Err(TensorError::ShapeMismatch { op: "linear bias", left: sw.to_vec(), right: sb.to_vec() });
        }
        let (batch, inp, outp) = (sx[0], sx[1], sw[0]);
        let mut out = vec![T::zero(); batch * outp];
        for row in out.chunks_exact_mut(outp) {
            row.copy_from_slice(self.data(b));
        }
        kernels::gemm_nt(batch, inp, outp, self.data(x), self.data(w), &mut out);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.derived(&[batch, outp], out, Op::Linear { x, w, b }, needs))
    }

    // ---- convolutions ------------------------------------------------

    fn conv_operands(&self, x: Var, k: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        for v in [x, k, b] {
            self.check(v)?;
        }
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 4 || sk.len() != 4 || sk[2] != KERNEL || sk[3] != KERNEL {
            return Err(TensorError::ShapeMismatch { op, left: sx.to_vec(), right: sk.to_vec() });
        }
        Ok(())
    }

    /// 3×3, stride-2 cross-correlation plus bias.
    ///
    /// `x: [batch, in_c, h, w]`, `k: [out_c, in_c, 3, 3]`, `b: [out_c]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, pad: Padding2d) -> Result<Var, TensorError> {
        self.conv_operands(x, k, b, "conv2d")?;
        let (sx, sk, sb) = (self.shape(x), self.shape(k), self.shape(b));
        if sx[1] != sk[1] || sb != [sk[0]] {
            return Err(TensorError::ShapeMismatch { op: "conv2d channels", left: sx.to_vec(), right: sk.to_vec() });
        }
        let oh = conv_out_len(sx[2], pad.top, pad.bottom);
        let ow = conv_out_len(sx[3], pad.left, pad.right);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(TensorError::InvalidArgument("conv2d input smaller than the kernel"));
        };
        let geom = ConvGeometry {
            batch: sx[0],
            wide_c: sx[1],
            wide_h: sx[2],
            wide_w: sx[3],
            narrow_c: sk[0],
            narrow_h: oh,
            narrow_w: ow,
            pad_top: pad.top,
            pad_left: pad.left,
        };
        let mut cols = vec![T::zero(); geom.patch_len() * geom.cols()];
        geom.im2col(self.data(x), &mut cols);
        let mut mat = vec![T::zero(); geom.narrow_c * geom.cols()];
        kernels::gemm_nn(geom.narrow_c, geom.patch_len(), geom.cols(), self.data(k), &cols, &mut mat);
        let plane = geom.narrow_plane();
        let mut out = vec![T::zero(); mat.len()];
        ConvGeometry::to_batch_major(geom.batch, geom.narrow_c, plane, &mat, &mut out);
        add_channel_bias(&mut out, self.data(b), plane);
        let needs = self.needs(x) || self.needs(k) || self.needs(b);
        if !self.needs(k) {
            cols = Vec::new();
        }
        let shape = [geom.batch, geom.narrow_c, oh, ow];
        Ok(self.derived(&shape, out, Op::Conv2d { x, k, b, geom, cols }, needs))
    }

    /// 3×3, stride-2 transposed convolution (the adjoint of [`conv2d`]
    /// with the same padding) plus bias.
    ///
    /// `x: [batch, in_c, h, w]`, `k: [in_c, out_c, 3, 3]`, `b: [out_c]`.
    /// The output extent is `(h-1)·2 + 3 + output_pad - top - bottom`.
    ///
    /// [`conv2d`]: Self::conv2d
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        k: Var,
        b: Var,
        pad: Padding2d,
        output_pad: (usize, usize),
    ) -> Result<Var, TensorError> {
        self.conv_operands(x, k, b, "conv_transpose2d")?;
        let (sx, sk, sb) = (self.shape(x), self.shape(k), self.shape(b));
        if sx[1] != sk[0] || sb != [sk[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d channels",
                left: sx.to_vec(),
                right: sk.to_vec(),
            });
        }
        let oh = conv_transpose_out_len(sx[2], pad.top, pad.bottom, output_pad.0);
        let ow = conv_transpose_out_len(sx[3], pad.left, pad.right, output_pad.1);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(TensorError::InvalidArgument("conv_transpose2d padding removes the whole output"));
        };
        if output_pad.0 >= kernels::STRIDE || output_pad.1 >= kernels::STRIDE {
            return Err(TensorError::InvalidArgument("output padding must be smaller than the stride"));
        }
        let geom = ConvGeometry {
            batch: sx[0],
            wide_c: sk[1],
            wide_h: oh,
            wide_w: ow,
            narrow_c: sx[1],
            narrow_h: sx[2],
            narrow_w: sx[3],
            pad_top: pad.top,
            pad_left: pad.left,
        };
        let plane = geom.narrow_plane();
        let mut xmat = vec![T::zero(); geom.narrow_c * geom.cols()];
        ConvGeometry::to_channel_major(geom.batch, geom.narrow_c, plane, self.data(x), &mut xmat);
        let mut cols = vec![T::zero(); geom.patch_len() * geom.cols()];
        kernels::gemm_tn(geom.patch_len(), geom.narrow_c, geom.cols(), self.data(k), &xmat, &mut cols);
        let mut out = vec![T::zero(); geom.batch * geom.wide_c * geom.wide_plane()];
        geom.col2im(&cols, &mut out);
        add_channel_bias(&mut out, self.data(b), geom.wide_plane());
        let needs = self.needs(x) || self.needs(k) || self.needs(b);
        let shape = [geom.batch, geom.wide_c, oh, ow];
        Ok(self.derived(&shape, out, Op::ConvTranspose2d { x, k, b, geom }, needs))
    }

    // ---- reverse pass ------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Gradients are added to the
    /// leaves' gradient buffers, so repeated calls accumulate until
    /// [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.check(loss)?;
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let mut adjoint: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adjoint[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adjoint[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (v, contrib) in self.local_grads(i, &g) {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match adjoint[v.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                    None => adjoint[v.0] = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn unbroadcast(&self, g: &[T], out_shape: &[usize], target: Var) -> Vec<T> {
        let shape = self.shape(target);
        if shape == out_shape {
            return g.to_vec();
        }
        let mut acc = vec![T::zero(); numel(shape)];
        for (&j, &v) in broadcast_index_map(shape, out_shape).iter().zip(g) {
            acc[j] += v;
        }
        acc
    }

    fn operand(&self, g_len: usize, shape: &[usize], v: Var) -> Vec<T> {
        let s = self.shape(v);
        let d = self.data(v);
        if s == shape {
            d.to_vec()
        } else {
            debug_assert_eq!(numel(shape), g_len);
            broadcast_index_map(s, shape).into_iter().map(|j| d[j]).collect()
        }
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Grads<T> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let oshape = node.value.shape();
        let map1 = |v: Var, f: &dyn Fn(usize) -> T| -> Grads<T> { vec![(v, (0..g.len()).map(f).collect())] };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, self.unbroadcast(g, oshape, *a)), (*b, self.unbroadcast(g, oshape, *b))],
            Op::Sub(a, b) => {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                vec![(*a, self.unbroadcast(g, oshape, *a)), (*b, self.unbroadcast(&neg, oshape, *b))]
            }
            Op::Mul(a, b) => {
                let mut res = Vec::new();
                if self.needs(*a) {
                    let bv = self.operand(g.len(), oshape, *b);
                    let ga: Vec<T> = g.iter().zip(&bv).map(|(&x, &y)| x * y).collect();
                    res.push((*a, self.unbroadcast(&ga, oshape, *a)));
                }
                if self.needs(*b) {
                    let av = self.operand(g.len(), oshape, *a);
                    let gb: Vec<T> = g.iter().zip(&av).map(|(&x, &y)| x * y).collect();
                    res.push((*b, self.unbroadcast(&gb, oshape, *b)));
                }
                res
            }
            Op::Div(a, b) => {
                let bv = self.operand(g.len(), oshape, *b);
                let mut res = Vec::new();
                if self.needs(*a) {
                    let ga: Vec<T> = g.iter().zip(&bv).map(|(&x, &y)| x / y).collect();
                    res.push((*a, self.unbroadcast(&ga, oshape, *a)));
                }
                if self.needs(*b) {
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let gb: Vec<T> = g.iter().zip(out).zip(&bv).map(|((&x, &o), &y)| -x * o / y).collect();
                    res.push((*b, self.unbroadcast(&gb, oshape, *b)));
                }
                res
            }
            Op::Exp(a) => map1(*a, &|j| g[j] * out[j]),
            Op::Log(a) => {
                let x = self.data(*a);
                map1(*a, &|j| g[j] / x[j])
            }
            Op::Sqrt(a) => map1(*a, &|j| g[j] * T::of(0.5) / out[j]),
            Op::Square(a) => {
                let x = self.data(*a);
                map1(*a, &|j| g[j] * T::of(2.0) * x[j])
            }
            Op::Scale(a, c) => map1(*a, &|j| g[j] * *c),
            Op::Shift(a) => vec![(*a, g.to_vec())],
            Op::Clamp(a, lo, hi) => {
                let x = self.data(*a);
                map1(*a, &|j| if x[j] >= *lo && x[j] <= *hi { g[j] } else { T::zero() })
            }
            Op::Elu(a, alpha) => {
                let x = self.data(*a);
                map1(*a, &|j| if x[j] > T::zero() { g[j] } else { g[j] * (out[j] + *alpha) })
            }
            Op::LeakyRelu(a, alpha) => {
                let x = self.data(*a);
                map1(*a, &|j| if x[j] > T::zero() { g[j] } else { g[j] * *alpha })
            }
            Op::Sum(a, axes) | Op::Mean(a, axes) => {
                let ishape = self.shape(*a);
                let n = numel(ishape);
                let keep: Vec<usize> =
                    ishape.iter().enumerate().map(|(d, &s)| if axes.contains(&d) { 1 } else { s }).collect();
                let factor = match node.op {
                    Op::Mean(..) => T::one() / T::of((n / numel(&keep).max(1)) as f64),
                    _ => T::one(),
                };
                let grad = if g.len() == 1 {
                    vec![g[0] * factor; n]
                } else {
                    broadcast_index_map(&keep, ishape).into_iter().map(|j| g[j] * factor).collect()
                };
                vec![(*a, grad)]
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (p, q, r) = (sa[0], sa[1], sb[1]);
                let mut res = Vec::new();
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); p * q];
                    kernels::gemm_nt(p, r, q, g, self.data(*b), &mut ga);
                    res.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); q * r];
                    kernels::gemm_tn(q, p, r, self.data(*a), g, &mut gb);
                    res.push((*b, gb));
                }
                res
            }
            Op::Transpose(a) => {
                let (r, c) = (oshape[0], oshape[1]);
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = g[i * c + j];
                    }
                }
                vec![(*a, ga)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (batch, inp, outp) = (sx[0], sx[1], sw[0]);
                let mut res = Vec::new();
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); batch * inp];
                    kernels::gemm_nn(batch, outp, inp, g, self.data(*w), &mut gx);
                    res.push((*x, gx));
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); outp * inp];
                    kernels::gemm_tn(outp, batch, inp, g, self.data(*x), &mut gw);
                    res.push((*w, gw));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); outp];
                    for row in g.chunks_exact(outp) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    res.push((*b, gb));
                }
                res
            }
            Op::Conv2d { x, k, b, geom, cols } => {
                let plane = geom.narrow_plane();
                let mut gmat = vec![T::zero(); geom.narrow_c * geom.cols()];
                ConvGeometry::to_channel_major(geom.batch, geom.narrow_c, plane, g, &mut gmat);
                let mut res = Vec::new();
                if self.needs(*x) {
                    let mut gcols = vec![T::zero(); geom.patch_len() * geom.cols()];
                    kernels::gemm_tn(geom.patch_len(), geom.narrow_c, geom.cols(), self.data(*k), &gmat, &mut gcols);
                    let mut gx = vec![T::zero(); geom.batch * geom.wide_c * geom.wide_plane()];
                    geom.col2im(&gcols, &mut gx);
                    res.push((*x, gx));
                }
                if self.needs(*k) {
                    let mut gk = vec![T::zero(); geom.narrow_c * geom.patch_len()];
                    kernels::gemm_nt(geom.narrow_c, geom.cols(), geom.patch_len(), &gmat, cols, &mut gk);
                    res.push((*k, gk));
                }
                if self.needs(*b) {
                    res.push((*b, channel_sums(g, geom.narrow_c, plane)));
                }
                res
            }
            Op::ConvTranspose2d { x, k, b, geom } => {
                let plane = geom.narrow_plane();
                let mut gcols = vec![T::zero(); geom.patch_len() * geom.cols()];
                geom.im2col(g, &mut gcols);
                let mut res = Vec::new();
                if self.needs(*x) {
                    let mut gmat = vec![T::zero(); geom.narrow_c * geom.cols()];
                    kernels::gemm_nn(geom.narrow_c, geom.patch_len(), geom.cols(), self.data(*k), &gcols, &mut gmat);
                    let mut gx = vec![T::zero(); gmat.len()];
                    ConvGeometry::to_batch_major(geom.batch, geom.narrow_c, plane, &gmat, &mut gx);
                    res.push((*x, gx));
                }
                if self.needs(*k) {
                    let mut xmat = vec![T::zero(); geom.narrow_c * geom.cols()];
                    ConvGeometry::to_channel_major(geom.batch, geom.narrow_c, plane, self.data(*x), &mut xmat);
                    let mut gk = vec![T::zero(); geom.narrow_c * geom.patch_len()];
                    kernels::gemm_nt(geom.narrow_c, geom.cols(), geom.patch_len(), &xmat, &gcols, &mut gk);
                    res.push((*k, gk));
                }
                if self.needs(*b) {
                    res.push((*b, channel_sums(g, geom.wide_c, geom.wide_plane())));
                }
                res
            }
        }
    }
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    let ch = bias.len();
    for (idx, chunk) in out.chunks_exact_mut(plane).enumerate() {
        let bv = bias[idx % ch];
        chunk.iter_mut().for_each(|v| *v += bv);
    }
}

fn channel_sums<T: Real>(g: &[T], ch: usize, plane: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); ch];
    for (idx, chunk) in g.chunks_exact(plane).enumerate() {
        acc[idx % ch] += chunk.iter().copied().sum::<T>();
    }
    acc
}
