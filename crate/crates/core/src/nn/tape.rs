//! Reverse-mode automatic differentiation over a linear tape of `f64` arrays.
//!
//! Every operation records its inputs; [`Tape::backward`] walks the tape in
//! reverse and accumulates gradients only along paths that reach a node
//! created with `requires_grad`. Frozen parameters enter as constants, so a
//! frozen network costs a single input-gradient pass per layer.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn};

use super::kernels;

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A fixed linear operator with a known adjoint, used for custom reparameterizations.
pub trait LinearMap: Send + Sync {
    fn apply(&self, x: &Tensor) -> Tensor;
    fn adjoint(&self, g: &Tensor) -> Tensor;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2x2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    SumAxis0(Var),
    Concat0(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    GlobalAvgPool(Var),
    Upsample2x(Var),
    Patchify(Var, usize),
    Unpatchify(Var, usize),
    BceWithLogits(Var, Arc<Tensor>),
    Mean(Var),
    Linear(Var, Arc<dyn LinearMap>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn as3(t: &Tensor) -> ndarray::ArrayView3<'_, f64> {
    t.view()
        .into_dimensionality::<Ix3>()
        .expect("expected a [C, H, W] array")
}

fn as4(t: &Tensor) -> ndarray::ArrayView4<'_, f64> {
    t.view()
        .into_dimensionality::<Ix4>()
        .expect("expected a 4-D array")
}

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-D array")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Shares storage with a parameter store without copying.
    pub fn shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_arc(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        *self.nodes[v.0]
            .value
            .iter()
            .next()
            .expect("scalar node is empty")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = va + vb;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = va * vb;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// `x [N, D] + b [D]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let vx = as2(self.value(x));
        let vb = self.value(b);
        assert_eq!(vb.len(), vx.ncols(), "add_row_bias: width mismatch");
        let vb1 = vb
            .view()
            .into_shape_with_order(vb.len())
            .expect("bias is 1-D");
        let out = (&vx + &vb1).into_dyn();
        let ng = self.needs(x) || self.needs(b);
        self.push(out, Op::AddRowBias(x, b), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = as2(self.value(a));
        let vb = as2(self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dimension mismatch");
        let out = va.dot(&vb).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = as2(self.value(a))
            .t()
            .as_standard_layout()
            .into_owned()
            .into_dyn();
        let ng = self.needs(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let ng = self.needs(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let vx = as3(self.value(x));
        let vw = as4(self.value(w));
        assert_eq!(vx.dim().0, vw.dim().1, "conv2d: channel mismatch");
        let bias = b.map(|b| self.value(b).as_slice().expect("contiguous bias"));
        let out = kernels::conv2d(vx, vw, bias, stride, pad).into_dyn();
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let vx = as3(self.value(x));
        let vw = as4(self.value(w));
        assert_eq!(
            vx.dim().0,
            vw.dim().0,
            "conv_transpose2x2: channel mismatch"
        );
        let bias = b.map(|b| self.value(b).as_slice().expect("contiguous bias"));
        let out = kernels::conv_transpose2x2(vx, vw, bias).into_dyn();
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::ConvTranspose2x2 { x, w, b }, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(kernels::gelu);
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(kernels::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(kernels::sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Softmax along `axis`, independently for every lane.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let mut out = self.value(a).clone();
        for lane in out.lanes_mut(Axis(axis)) {
            kernels::softmax_lane(lane);
        }
        let ng = self.needs(a);
        self.push(out, Op::Softmax(a, axis), ng)
    }

    pub fn sum_axis0(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0));
        let ng = self.needs(a);
        self.push(out, Op::SumAxis0(a), ng)
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat0: trailing shapes differ");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::Concat0(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = as2(self.value(a))
            .slice(ndarray::s![.., start..end])
            .to_owned()
            .into_dyn();
        let ng = self.needs(a);
        self.push(out, Op::SliceCols(a, start, end), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .expect("concat_cols: row counts differ")
            .into_dyn();
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// `[C, H, W] -> [C]`
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let v = as3(self.value(a));
        let (c, h, w) = v.dim();
        let out = v
            .to_shape((c, h * w))
            .expect("pool reshape")
            .mean_axis(Axis(1))
            .expect("non-empty spatial extent")
            .into_dyn();
        let ng = self.needs(a);
        self.push(out, Op::GlobalAvgPool(a), ng)
    }

    /// Nearest-neighbour upsampling of a `[C, H, W]` map by two.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let v = as3(self.value(a));
        let (c, h, w) = v.dim();
        let out =
            ndarray::Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, x)| v[[ci, y / 2, x / 2]]);
        let ng = self.needs(a);
        self.push(out.into_dyn(), Op::Upsample2x(a), ng)
    }

    /// `[C, H, W] -> [N, P*P*C]` with row-major patches flattened channel-last.
    pub fn patchify(&mut self, a: Var, p: usize) -> Var {
        let out = patchify_array(as3(self.value(a)), p).into_dyn();
        let ng = self.needs(a);
        self.push(out, Op::Patchify(a, p), ng)
    }

    /// Inverse of [`Tape::patchify`] onto a `[C, H, W]` grid.
    pub fn unpatchify(&mut self, a: Var, p: usize, c: usize, h: usize, w: usize) -> Var {
        let out = unpatchify_array(as2(self.value(a)), p, c, h, w).into_dyn();
        let ng = self.needs(a);
        self.push(out, Op::Unpatchify(a, p), ng)
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Arc<Tensor>) -> Var {
        let v = self.value(logits);
        assert_eq!(v.shape(), target.shape(), "bce: shape mismatch");
        let n = v.len() as f64;
        let total: f64 = v
            .iter()
            .zip(target.iter())
            .map(|(&z, &t)| kernels::bce_with_logit(z, t))
            .sum();
        let out = ArrayD::from_elem(IxDyn(&[]), total / n);
        let ng = self.needs(logits);
        self.push(out, Op::BceWithLogits(logits, target), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = ArrayD::from_elem(IxDyn(&[]), v.sum() / v.len() as f64);
        let ng = self.needs(a);
        self.push(out, Op::Mean(a), ng)
    }

    pub fn linear_map(&mut self, a: Var, map: Arc<dyn LinearMap>) -> Var {
        let out = map.apply(self.value(a));
        let ng = self.needs(a);
        self.push(out, Op::Linear(a, map), ng)
    }

    /// Gradients of the scalar `loss` with respect to every node that requires them.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, &g * self.value(*b));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, &g * self.value(*a));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g * *s),
            Op::AddRowBias(x, b) => {
                if self.needs(*b) {
                    let gb = as2(&g).sum_axis(Axis(0));
                    let shape = self.value(*b).raw_dim();
                    self.accumulate(
                        grads,
                        *b,
                        gb.into_shape_with_order(shape).expect("bias shape"),
                    );
                }
                self.accumulate(grads, *x, g);
            }
            Op::MatMul(a, b) => {
                let g2 = as2(&g);
                if self.needs(*a) {
                    let ga = g2.dot(&as2(self.value(*b)).t());
                    self.accumulate(grads, *a, ga.into_dyn());
                }
                if self.needs(*b) {
                    let gb = as2(self.value(*a)).t().dot(&g2);
                    self.accumulate(grads, *b, gb.into_dyn());
                }
            }
            Op::Transpose(a) => {
                let gt = as2(&g).t().as_standard_layout().into_owned().into_dyn();
                self.accumulate(grads, *a, gt);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).raw_dim();
                let gr = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(shape)
                    .expect("reshape back");
                self.accumulate(grads, *a, gr);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let g3 = as3(&g);
                let (gx, gw) = kernels::conv2d_backward(
                    as3(self.value(*x)),
                    as4(self.value(*w)),
                    g3,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx.into_dyn());
                }
                if let Some(gw) = gw {
                    let shape = self.value(*w).raw_dim();
                    self.accumulate(
                        grads,
                        *w,
                        gw.into_shape_with_order(shape).expect("weight shape"),
                    );
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb: Array1<f64> = g3.outer_iter().map(|p| p.sum()).collect();
                        self.accumulate(grads, *b, gb.into_dyn());
                    }
                }
            }
            Op::ConvTranspose2x2 { x, w, b } => {
                let g3 = as3(&g);
                let (gx, gw) = kernels::conv_transpose2x2_backward(
                    as3(self.value(*x)),
                    as4(self.value(*w)),
                    g3,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx.into_dyn());
                }
                if let Some(gw) = gw {
                    let shape = self.value(*w).raw_dim();
                    self.accumulate(
                        grads,
                        *w,
                        gw.into_shape_with_order(shape).expect("weight shape"),
                    );
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb: Array1<f64> = g3.outer_iter().map(|p| p.sum()).collect();
                        self.accumulate(grads, *b, gb.into_dyn());
                    }
                }
            }
            Op::Gelu(a) => {
                let mut ga = g;
                ga.zip_mut_with(self.value(*a), |gv, &x| *gv *= kernels::gelu_grad(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let mut ga = g;
                ga.zip_mut_with(out, |gv, &y| *gv *= 1.0 - y * y);
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g;
                ga.zip_mut_with(out, |gv, &y| *gv *= y * (1.0 - y));
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a, axis) => {
                let mut ga = g;
                for (mut gl, yl) in ga
                    .lanes_mut(Axis(*axis))
                    .into_iter()
                    .zip(out.lanes(Axis(*axis)))
                {
                    let dot: f64 = gl.iter().zip(yl.iter()).map(|(a, b)| a * b).sum();
                    gl.zip_mut_with(&yl, |gv, &y| *gv = y * (*gv - dot));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAxis0(a) => {
                let shape = self.value(*a).raw_dim();
                let ga = g
                    .insert_axis(Axis(0))
                    .broadcast(shape)
                    .expect("broadcast back over summed axis")
                    .to_owned();
                self.accumulate(grads, *a, ga);
            }
            Op::Concat0(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[0];
                    if self.needs(p) {
                        let gp = g
                            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
                            .to_owned();
                        self.accumulate(grads, p, gp);
                    }
                    start += len;
                }
            }
            Op::SliceCols(a, start, end) => {
                let shape = self.value(*a).raw_dim();
                let mut ga = Tensor::zeros(shape);
                ga.slice_axis_mut(Axis(1), ndarray::Slice::from(*start..*end))
                    .assign(&g);
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[1];
                    if self.needs(p) {
                        let gp = g
                            .slice_axis(Axis(1), ndarray::Slice::from(start..start + len))
                            .to_owned();
                        self.accumulate(grads, p, gp);
                    }
                    start += len;
                }
            }
            Op::GlobalAvgPool(a) => {
                let shape = self.value(*a).raw_dim();
                let (h, w) = (shape[1], shape[2]);
                let scale = 1.0 / (h * w) as f64;
                let ga =
                    ndarray::Array3::from_shape_fn((shape[0], h, w), |(c, _, _)| g[[c]] * scale);
                self.accumulate(grads, *a, ga.into_dyn());
            }
            Op::Upsample2x(a) => {
                let src = self.value(*a);
                let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
                let g3 = as3(&g);
                let mut ga = ndarray::Array3::<f64>::zeros((c, h, w));
                for ((ci, y, x), v) in g3.indexed_iter() {
                    ga[[ci, y / 2, x / 2]] += v;
                }
                self.accumulate(grads, *a, ga.into_dyn());
            }
            Op::Patchify(a, p) => {
                let src = self.value(*a);
                let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
                let ga = unpatchify_array(as2(&g), *p, c, h, w);
                self.accumulate(grads, *a, ga.into_dyn());
            }
            Op::Unpatchify(a, p) => {
                let ga = patchify_array(as3(&g), *p);
                self.accumulate(grads, *a, ga.into_dyn());
            }
            Op::BceWithLogits(logits, target) => {
                let gs = *g.iter().next().expect("scalar grad");
                let v = self.value(*logits);
                let n = v.len() as f64;
                let mut ga = v.clone();
                ga.zip_mut_with(target, |z, &t| *z = gs * (kernels::sigmoid(*z) - t) / n);
                self.accumulate(grads, *logits, ga);
            }
            Op::Mean(a) => {
                let gs = *g.iter().next().expect("scalar grad");
                let v = self.value(*a);
                let ga = ArrayD::from_elem(v.raw_dim(), gs / v.len() as f64);
                self.accumulate(grads, *a, ga);
            }
            Op::Linear(a, map) => {
                self.accumulate(grads, *a, map.adjoint(&g));
            }
        }
    }
}

/// `[C, H, W] -> [N, P*P*C]`; patches in row-major order, each flattened as `(py, px, c)`.
pub fn patchify_array(x: ndarray::ArrayView3<f64>, p: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (gh, gw) = (h / p, w / p);
    let d = p * p * c;
    let mut out = Array2::<f64>::zeros((gh * gw, d));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            for py in 0..p {
                for px in 0..p {
                    for ci in 0..c {
                        row[(py * p + px) * c + ci] = x[[ci, gy * p + py, gx * p + px]];
                    }
                }
            }
        }
    }
    out
}

pub fn unpatchify_array(
    seq: ndarray::ArrayView2<f64>,
    p: usize,
    c: usize,
    h: usize,
    w: usize,
) -> ndarray::Array3<f64> {
    let gw = w / p;
    let mut out = ndarray::Array3::<f64>::zeros((c, h, w));
    for (n, row) in seq.outer_iter().enumerate() {
        let (gy, gx) = (n / gw, n % gw);
        for py in 0..p {
            for px in 0..p {
                for ci in 0..c {
                    out[[ci, gy * p + py, gx * p + px]] = row[(py * p + px) * c + ci];
                }
            }
        }
    }
    out
}
