//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every tracked node. The graph is single-use:
//! build it, run backward once, drop it.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice};

pub type Tensor = ArrayD<f64>;

/// Geometry of a 2D convolution over channel-last `[B, H, W, C]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeom {
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw || sh == 0 || sw == 0 {
            return None;
        }
        Some(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Slice { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    IndexSelect { x: usize, axis: usize, indices: Rc<Vec<usize>> },
    Relu(usize),
    Gelu(usize),
    Silu(usize),
    Abs(usize),
    Powf(usize, f64),
    Sum(usize),
    SumAxis(usize),
    Softmax(usize),
    LayerNorm { x: usize, inv_std: Rc<Tensor> },
    Conv2d { x: usize, w: usize, cols: Rc<Array2<f64>>, geom: Conv2dGeom },
    CrossEntropy { logits: usize, targets: Rc<Vec<usize>> },
    StraightThrough(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
    retain: Cell<bool>,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        self.push_rc(Rc::new(value), op, tracked)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let retain = matches!(op, Op::Leaf) && tracked;
        nodes.push(Node { value, op, tracked, retain: Cell::new(retain) });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf. The tensor is shared, not copied.
    pub fn leaf(&self, value: Rc<Tensor>) -> Var<'_> {
        self.push_rc(value, Op::Leaf, true)
    }

    /// Shared value that never receives gradient.
    pub fn constant_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        self.push_rc(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(ArrayD::ones(nodes[loss.id].value.raw_dim()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            if node.retain.get() {
                grads[id] = Some(g);
            }
        }
        Grads { grads }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].tracked {
        return;
    }
    debug_assert_eq!(g.shape(), nodes[id].value.shape(), "gradient shape for node {id}");
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Sum `grad` down to `shape`, undoing numpy-style broadcasting.
pub fn reduce_to_shape(grad: Tensor, shape: &[usize]) -> Tensor {
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn to_2d(t: &Tensor) -> Array2<f64> {
    let nd = t.ndim();
    let k = t.shape()[nd - 1];
    let m = t.len() / k.max(1);
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order((m, k))
        .expect("contiguous reshape")
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, reduce_to_shape(g.clone(), val(*a).shape()));
            accumulate(nodes, grads, *b, reduce_to_shape(g.clone(), val(*b).shape()));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, reduce_to_shape(g.clone(), val(*a).shape()));
            accumulate(nodes, grads, *b, reduce_to_shape(-g, val(*b).shape()));
        }
        Op::Mul(a, b) => {
            if nodes[*a].tracked {
                let ga = g * val(*b);
                accumulate(nodes, grads, *a, reduce_to_shape(ga, val(*a).shape()));
            }
            if nodes[*b].tracked {
                let gb = g * val(*a);
                accumulate(nodes, grads, *b, reduce_to_shape(gb, val(*b).shape()));
            }
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, g * *c),
        Op::Offset(x) => accumulate(nodes, grads, *x, g.clone()),
        Op::MatMul(a, b) => {
            let av = val(*a);
            let bv = val(*b).view().into_dimensionality::<Ix2>().expect("rhs is 2-D");
            let g2 = to_2d(g);
            if nodes[*a].tracked {
                let ga = g2.dot(&bv.t());
                let ga = ga.into_shape_with_order(IxDyn(av.shape())).expect("shape");
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[*b].tracked {
                let a2 = to_2d(av);
                let gb = a2.t().dot(&g2).into_dyn();
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let batch = av.shape()[0];
            let mut ga = nodes[*a].tracked.then(|| Tensor::zeros(av.raw_dim()));
            let mut gb = nodes[*b].tracked.then(|| Tensor::zeros(bv.raw_dim()));
            for i in 0..batch {
                let gi = mat2(g, i);
                let ai = mat2(av, i);
                let bi = mat2(bv, i);
                if let Some(ga) = ga.as_mut() {
                    let mut out = ga.index_axis_mut(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    if *trans_b {
                        general_mat_mul(1.0, &gi, &bi, 0.0, &mut out);
                    } else {
                        general_mat_mul(1.0, &gi, &bi.t(), 0.0, &mut out);
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    let mut out = gb.index_axis_mut(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    if *trans_b {
                        general_mat_mul(1.0, &gi.t(), &ai, 0.0, &mut out);
                    } else {
                        general_mat_mul(1.0, &ai.t(), &gi, 0.0, &mut out);
                    }
                }
            }
            if let Some(ga) = ga {
                accumulate(nodes, grads, *a, ga);
            }
            if let Some(gb) = gb {
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Reshape(x) => {
            let shape = val(*x).shape().to_vec();
            let gx = g.as_standard_layout().into_owned().into_shape_with_order(IxDyn(&shape)).expect("shape");
            accumulate(nodes, grads, *x, gx);
        }
        Op::Permute(x, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let gx = g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Slice { x, axis, start } => {
            let xv = val(*x);
            let mut gx = Tensor::zeros(xv.raw_dim());
            let len = g.shape()[*axis];
            gx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len)).assign(g);
            accumulate(nodes, grads, *x, gx);
        }
        Op::Concat { xs, axis } => {
            let mut offset = 0;
            for &x in xs {
                let len = val(x).shape()[*axis];
                let part = g.slice_axis(Axis(*axis), Slice::from(offset..offset + len)).to_owned();
                accumulate(nodes, grads, x, part);
                offset += len;
            }
        }
        Op::IndexSelect { x, axis, indices } => {
            let xv = val(*x);
            let mut gx = Tensor::zeros(xv.raw_dim());
            for (k, &i) in indices.iter().enumerate() {
                let src = g.index_axis(Axis(*axis), k);
                let mut dst = gx.index_axis_mut(Axis(*axis), i);
                dst += &src;
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Relu(x) => {
            let mut gx = g.clone();
            gx.zip_mut_with(val(*x), |gv, &xv| {
                if xv <= 0.0 {
                    *gv = 0.0
                }
            });
            accumulate(nodes, grads, *x, gx);
        }
        Op::Gelu(x) => {
            let mut gx = g.clone();
            gx.zip_mut_with(val(*x), |gv, &xv| *gv *= gelu_grad(xv));
            accumulate(nodes, grads, *x, gx);
        }
        Op::Silu(x) => {
            let mut gx = g.clone();
            gx.zip_mut_with(val(*x), |gv, &xv| {
                let s = sigmoid(xv);
                *gv *= s * (1.0 + xv * (1.0 - s));
            });
            accumulate(nodes, grads, *x, gx);
        }
        Op::Abs(x) => {
            let mut gx = g.clone();
            gx.zip_mut_with(val(*x), |gv, &xv| {
                *gv *= if xv > 0.0 {
                    1.0
                } else if xv < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            accumulate(nodes, grads, *x, gx);
        }
        Op::Powf(x, p) => {
            let mut gx = g.clone();
            gx.zip_mut_with(val(*x), |gv, &xv| *gv *= p * xv.powf(p - 1.0));
            accumulate(nodes, grads, *x, gx);
        }
        Op::Sum(x) => {
            let gv = g.iter().next().copied().unwrap_or(0.0);
            accumulate(nodes, grads, *x, Tensor::from_elem(val(*x).raw_dim(), gv));
        }
        Op::SumAxis(x) => {
            let gx = g.broadcast(val(*x).raw_dim()).expect("broadcast").to_owned();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Softmax(x) => {
            let y = &*node.value;
            let gy = g * y;
            let last = Axis(y.ndim() - 1);
            let s = gy.sum_axis(last).insert_axis(last);
            let gx = &gy - &(y * &s);
            accumulate(nodes, grads, *x, gx);
        }
        Op::LayerNorm { x, inv_std } => {
            let y = &*node.value;
            let last = Axis(y.ndim() - 1);
            let d = y.shape()[y.ndim() - 1] as f64;
            let mean_g = g.sum_axis(last).insert_axis(last) / d;
            let mean_gy = (g * y).sum_axis(last).insert_axis(last) / d;
            let gx = (g - &mean_g - &(y * &mean_gy)) * &**inv_std;
            accumulate(nodes, grads, *x, gx);
        }
        Op::Conv2d { x, w, cols, geom } => {
            let xv = val(*x);
            let wv = val(*w);
            let (kh, kw, c, o) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
            let g2 = to_2d(g);
            if nodes[*w].tracked {
                let gw = cols.t().dot(&g2);
                let gw = gw.into_shape_with_order(IxDyn(&[kh, kw, c, o])).expect("shape");
                accumulate(nodes, grads, *w, gw);
            }
            if nodes[*x].tracked {
                let w2 = wv.view().into_shape_with_order((kh * kw * c, o)).expect("contiguous weight");
                let gcols = g2.dot(&w2.t());
                let gx = col2im(&gcols, xv.shape(), geom);
                accumulate(nodes, grads, *x, gx);
            }
        }
        Op::CrossEntropy { logits, targets } => {
            let lv = val(*logits);
            let rows = lv.shape()[0];
            let scale = g.iter().next().copied().unwrap_or(0.0) / rows as f64;
            let mut gx = softmax_last(lv);
            for (r, &t) in targets.iter().enumerate() {
                gx[[r, t]] -= 1.0;
            }
            gx *= scale;
            accumulate(nodes, grads, *logits, gx);
        }
        Op::StraightThrough(x) => accumulate(nodes, grads, *x, g.clone()),
    }
}

fn mat2(t: &Tensor, i: usize) -> ArrayView2<'_, f64> {
    t.index_axis(Axis(0), i).into_dimensionality::<Ix2>().expect("3-D batch operand")
}

pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    let mut y = x.as_standard_layout().into_owned();
    let d = *y.shape().last().expect("softmax needs at least 1-D input");
    if d == 0 {
        return y;
    }
    for row in y.as_slice_mut().expect("standard layout").chunks_mut(d) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    y
}

fn im2col(x: &Tensor, geom: &Conv2dGeom) -> (Array2<f64>, usize, usize) {
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let (ho, wo) = geom.output_size(h, w).expect("conv geometry");
    let xs = x.as_slice().expect("standard layout input");
    let row_len = kh * kw * c;
    let mut cols = Array2::<f64>::zeros((b * ho * wo, row_len));
    let cs = cols.as_slice_mut().expect("fresh array");
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let r = (bi * ho + oy) * wo + ox;
                let row = &mut cs[r * row_len..(r + 1) * row_len];
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let dst = (ky * kw + kx) * c;
                        row[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(cols: &Array2<f64>, shape: &[usize], geom: &Conv2dGeom) -> Tensor {
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let (ho, wo) = geom.output_size(h, w).expect("conv geometry");
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let row_len = kh * kw * c;
    let mut out = Tensor::zeros(IxDyn(shape));
    let os = out.as_slice_mut().expect("fresh array");
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let r = (bi * ho + oy) * wo + ox;
                let row = &cs[r * row_len..(r + 1) * row_len];
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let src = (ky * kw + kx) * c;
                        for (o, v) in os[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Shared handle to the computed value.
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Single-element value as a float.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar");
        *v.iter().next().unwrap()
    }

    /// Keep this node's gradient after backward (leaves always keep theirs).
    pub fn retain_grad(&self) {
        self.graph.nodes.borrow()[self.id].retain.set(true);
    }

    pub fn is_tracked(&self) -> bool {
        self.graph.tracked(self.id)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.push_rc(self.value(), Op::Leaf, false)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        let tracked = self.is_tracked();
        self.graph.push(value, op, tracked)
    }

    fn binary(&self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let tracked = self.is_tracked() || other.is_tracked();
        self.graph.push(value, op, tracked)
    }

    pub fn add(&self, other: Var<'g>) -> Var<'g> {
        let v = &*self.value() + &*other.value();
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g>) -> Var<'g> {
        let v = &*self.value() - &*other.value();
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g>) -> Var<'g> {
        let v = &*self.value() * &*other.value();
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        let v = &*self.value() * c;
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn offset(&self, c: f64) -> Var<'g> {
        let v = &*self.value() + c;
        self.unary(v, Op::Offset(self.id))
    }

    /// `[..., M, K] x [K, N] -> [..., M, N]`.
    pub fn matmul(&self, rhs: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = rhs.value();
        let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
        let a2 = to_2d(&a);
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dimension");
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = b2.ncols();
        let out = a2.dot(&b2).into_shape_with_order(IxDyn(&shape)).expect("shape");
        self.binary(rhs, out, Op::MatMul(self.id, rhs.id))
    }

    /// Batched product over a leading axis: `[B, M, K] x [B, K, N]`, or
    /// `[B, M, K] x [B, N, K]ᵀ` when `trans_b`.
    pub fn bmm(&self, rhs: Var<'g>, trans_b: bool) -> Var<'g> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.ndim(), 3, "bmm lhs must be 3-D");
        assert_eq!(b.ndim(), 3, "bmm rhs must be 3-D");
        let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let n = if trans_b { b.shape()[1] } else { b.shape()[2] };
        let kb = if trans_b { b.shape()[2] } else { b.shape()[1] };
        assert_eq!(batch, b.shape()[0], "bmm batch");
        assert_eq!(k, kb, "bmm inner dimension");
        let mut out = Tensor::zeros(IxDyn(&[batch, m, n]));
        for i in 0..batch {
            let ai = mat2(&a, i);
            let bi = mat2(&b, i);
            let mut o = out.index_axis_mut(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            if trans_b {
                general_mat_mul(1.0, &ai, &bi.t(), 0.0, &mut o);
            } else {
                general_mat_mul(1.0, &ai, &bi, 0.0, &mut o);
            }
        }
        self.binary(rhs, out, Op::BatchMatMul { a: self.id, b: rhs.id, trans_b })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let v = self.value();
        let out = v
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {:?}: {e}", v.shape(), shape));
        self.unary(out, Op::Reshape(self.id))
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'g> {
        let v = self.value();
        let out = v.view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        self.unary(out, Op::Permute(self.id, axes.to_vec()))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let v = self.value();
        let out = v.slice_axis(Axis(axis), Slice::from(start..start + len)).as_standard_layout().into_owned();
        self.unary(out, Op::Slice { x: self.id, axis, start })
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat shapes");
        let tracked = parts.iter().any(|p| p.is_tracked());
        graph.push(out, Op::Concat { xs: parts.iter().map(|p| p.id).collect(), axis }, tracked)
    }

    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Var<'g> {
        let v = self.value();
        let out = v.select(Axis(axis), indices);
        self.unary(out, Op::IndexSelect { x: self.id, axis, indices: Rc::new(indices.to_vec()) })
    }

    pub fn relu(&self) -> Var<'g> {
        let out = self.value().mapv(|x| x.max(0.0));
        self.unary(out, Op::Relu(self.id))
    }

    pub fn gelu(&self) -> Var<'g> {
        let out = self.value().mapv(gelu);
        self.unary(out, Op::Gelu(self.id))
    }

    pub fn silu(&self) -> Var<'g> {
        let out = self.value().mapv(|x| x * sigmoid(x));
        self.unary(out, Op::Silu(self.id))
    }

    pub fn abs(&self) -> Var<'g> {
        let out = self.value().mapv(f64::abs);
        self.unary(out, Op::Abs(self.id))
    }

    pub fn powf(&self, p: f64) -> Var<'g> {
        let out = self.value().mapv(|x| x.powf(p));
        self.unary(out, Op::Powf(self.id, p))
    }

    pub fn square(&self) -> Var<'g> {
        self.mul(*self)
    }

    pub fn sum(&self) -> Var<'g> {
        let s = self.value().sum();
        self.unary(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&self, axis: usize) -> Var<'g> {
        let out = self.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.unary(out, Op::SumAxis(self.id))
    }

    pub fn mean_axis(&self, axis: usize) -> Var<'g> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    pub fn softmax(&self) -> Var<'g> {
        let out = softmax_last(&self.value());
        self.unary(out, Op::Softmax(self.id))
    }

    /// Parameter-free normalization over the last axis.
    pub fn layer_norm(&self, eps: f64) -> Var<'g> {
        let x = self.value();
        let last = Axis(x.ndim() - 1);
        let d = x.shape()[x.ndim() - 1] as f64;
        let mean = x.sum_axis(last).insert_axis(last) / d;
        let centered = &*x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(last).insert_axis(last) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let out = &centered * &inv_std;
        self.unary(out, Op::LayerNorm { x: self.id, inv_std: Rc::new(inv_std) })
    }

    /// Channel-last convolution: `[B, H, W, C]` with weight `[kh, kw, C, O]`.
    pub fn conv2d(&self, weight: Var<'g>, geom: Conv2dGeom) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        assert_eq!(x.ndim(), 4, "conv2d input must be [B, H, W, C]");
        assert_eq!(w.ndim(), 4, "conv2d weight must be [kh, kw, C, O]");
        assert_eq!((w.shape()[0], w.shape()[1]), geom.kernel, "conv2d kernel");
        assert_eq!(x.shape()[3], w.shape()[2], "conv2d channels");
        let x = x.as_standard_layout().into_owned();
        let (cols, ho, wo) = im2col(&x, &geom);
        let (kh, kw, c, o) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let w2 = w.view().into_shape_with_order((kh * kw * c, o)).expect("contiguous weight");
        let out = cols.dot(&w2).into_shape_with_order(IxDyn(&[x.shape()[0], ho, wo, o])).expect("shape");
        let cols = if self.is_tracked() || weight.is_tracked() { cols } else { Array2::zeros((0, 0)) };
        self.binary(weight, out, Op::Conv2d { x: self.id, w: weight.id, cols: Rc::new(cols), geom })
    }

    /// Mean cross-entropy of `[M, V]` logits against `M` class targets.
    pub fn cross_entropy(&self, targets: &[usize]) -> Var<'g> {
        let l = self.value();
        assert_eq!(l.ndim(), 2, "cross_entropy expects [M, V] logits");
        assert_eq!(l.shape()[0], targets.len(), "one target per row");
        assert!(!targets.is_empty(), "cross_entropy over zero rows");
        let v = l.shape()[1];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < v, "target {t} out of range {v}");
            let row = l.index_axis(Axis(0), r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = ArrayD::from_elem(IxDyn(&[]), total / targets.len() as f64);
        self.unary(out, Op::CrossEntropy { logits: self.id, targets: Rc::new(targets.to_vec()) })
    }

    /// Forward value is `replacement`; gradient flows to `self` unchanged.
    pub fn straight_through(&self, replacement: Tensor) -> Var<'g> {
        assert_eq!(replacement.shape(), self.shape().as_slice(), "straight-through shape");
        self.unary(replacement, Op::StraightThrough(self.id))
    }
}

impl<'g> std::ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(&self, rhs)
    }
}

impl<'g> std::ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(&self, rhs)
    }
}

impl<'g> std::ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(&self, rhs)
    }
}

impl<'g> std::ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Self::Output {
        self.scale(-1.0)
    }
}
