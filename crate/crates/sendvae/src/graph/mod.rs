//! A small reverse-mode tape over `ndarray` tensors.
//!
//! Every training step builds a fresh [`Graph`]: leaves are bound first
//! (parameters as variables, data as constants), ops are evaluated eagerly,
//! and [`Graph::backward`] walks the tape in reverse. The engine is generic
//! over `f32`/`f64` so the same forward code is trained in single precision
//! and gradient-checked against central finite differences in double
//! precision.

pub mod fd;
pub mod kernels;

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, Slice};

/// Element type for graph tensors.
pub trait Real: ndarray::NdFloat + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op<F: Real> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Silu(NodeId),
    Gelu(NodeId),
    Scale(NodeId, F),
    AddScalar(NodeId, F),
    Clamp(NodeId, F, F),
    ClampMin(NodeId, F),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    SliceAxis(NodeId, usize, usize, usize),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxis(NodeId, usize, bool),
    MeanAxis(NodeId, usize, bool),
    MaxAxis(NodeId, usize),
    MatMul(NodeId, NodeId),
    BatMatMul(NodeId, NodeId, bool),
    Softmax(NodeId, usize),
    LayerNorm(NodeId, NodeId, NodeId, F),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        ph: usize,
        pw: usize,
    },
    AvgPool2d(NodeId, usize),
    Upsample2x(NodeId),
    Patchify(NodeId, usize),
    Unpatchify(NodeId, usize),
    Embedding(NodeId, Vec<usize>),
    CrossEntropy(NodeId, Vec<usize>),
}

struct Node<F: Real> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
    aux: Option<ArrayD<F>>, // op-specific cache (e.g. softmax probs)
}

/// Gradients indexed by node id after a backward pass.
pub struct Grads<F: Real> {
    slots: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<F>> {
        self.slots[id.0].as_ref()
    }

    /// Gradient of a node, zeros if it never received one.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> ArrayD<F> {
        self.slots[id.0]
            .clone()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(shape)))
    }
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let ad = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let bd = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            ad == bd || ad == 1 || bd == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        out[i] = ad.max(bd);
    }
    out
}

/// Sums `grad` down to `target` shape, undoing right-aligned broadcasting.
fn reduce_to_shape<F: Real>(grad: ArrayD<F>, target: &[usize]) -> ArrayD<F> {
    let mut g = grad;
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gd, &td)) in g.shape().to_vec().iter().zip(target.iter()).enumerate() {
        if td == 1 && gd != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn binary_broadcast<F: Real>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    f: impl Fn(F, F) -> F,
) -> ArrayD<F> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        out.zip_mut_with(b, |x, &y| *x = f(*x, y));
        return out;
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::<F>::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn softmax_axis<F: Real>(x: &ArrayD<F>, axis: usize) -> ArrayD<F> {
    let mut y = x.clone();
    for mut lane in y.lanes_mut(Axis(axis)) {
        let mut mx = F::neg_infinity();
        for &v in lane.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for v in lane.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        let inv = F::one() / sum;
        for v in lane.iter_mut() {
            *v = *v * inv;
        }
    }
    y
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    pub fn view(&self, id: NodeId) -> ArrayViewD<'_, F> {
        self.nodes[id.0].value.view()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, id: NodeId) -> F {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.push_aux(value, op, needs_grad, None)
    }

    fn push_aux(
        &mut self,
        value: ArrayD<F>,
        op: Op<F>,
        needs_grad: bool,
        aux: Option<ArrayD<F>>,
    ) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            aux,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf that will receive a gradient.
    pub fn variable(&mut self, value: ArrayD<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without a gradient (data, targets, fixed kernels).
    pub fn constant(&mut self, value: ArrayD<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: F) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = binary_broadcast(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = binary_broadcast(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = binary_broadcast(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = binary_broadcast(self.value(a), self.value(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Div(a, b), ng)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| -x);
        let ng = self.ng(a);
        self.push(v, Op::Neg(a), ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.exp());
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.sqrt());
        let ng = self.ng(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| F::one() / (F::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.tanh());
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .mapv(|x| x / (F::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let c = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = F::from_f64(0.044715);
        let half = F::from_f64(0.5);
        let v = self.value(a).mapv(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (F::one() + u.tanh())
        });
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.value(a).mapv(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.value(a).mapv(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a, c), ng)
    }

    pub fn clamp(&mut self, a: NodeId, lo: F, hi: F) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(lo).min(hi));
        let ng = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    pub fn clamp_min(&mut self, a: NodeId, lo: F) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(lo));
        let ng = self.ng(a);
        self.push(v, Op::ClampMin(a, lo), ng)
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Permute(a, axes.to_vec()), ng)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::Concat(parts.to_vec(), axis), ng)
    }

    pub fn slice_axis(&mut self, a: NodeId, axis: usize, from: usize, to: usize) -> NodeId {
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(from..to))
            .to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceAxis(a, axis, from, to), ng)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = F::from_f64(self.value(a).len() as f64);
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum() / n);
        let ng = self.ng(a);
        self.push(v, Op::MeanAll(a), ng)
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize, keepdim: bool) -> NodeId {
        let mut v = self.value(a).sum_axis(Axis(axis));
        if keepdim {
            v = v.insert_axis(Axis(axis));
        }
        let ng = self.ng(a);
        self.push(v, Op::SumAxis(a, axis, keepdim), ng)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize, keepdim: bool) -> NodeId {
        let n = F::from_f64(self.value(a).shape()[axis] as f64);
        let mut v = self.value(a).sum_axis(Axis(axis)).mapv(|x| x / n);
        if keepdim {
            v = v.insert_axis(Axis(axis));
        }
        let ng = self.ng(a);
        self.push(v, Op::MeanAxis(a, axis, keepdim), ng)
    }

    /// Max along an axis, keepdim. Gradient routes to the arg max.
    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let x = self.value(a);
        let mut v = x.map_axis(Axis(axis), |lane| {
            let mut mx = F::neg_infinity();
            for &e in lane.iter() {
                if e > mx {
                    mx = e;
                }
            }
            mx
        });
        // arg indices stored as aux, in lane order
        let args: Vec<F> = x
            .lanes(Axis(axis))
            .into_iter()
            .map(|lane| {
                let mut mx = F::neg_infinity();
                let mut arg = 0usize;
                for (i, &e) in lane.iter().enumerate() {
                    if e > mx {
                        mx = e;
                        arg = i;
                    }
                }
                F::from_f64(arg as f64)
            })
            .collect();
        v = v.insert_axis(Axis(axis));
        let aux = ArrayD::from_shape_vec(IxDyn(&[args.len()]), args).unwrap();
        let ng = self.ng(a);
        self.push_aux(v, Op::MaxAxis(a, axis), ng, Some(aux))
    }

    // ---- linear algebra ----

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.view(a).into_dimensionality::<ndarray::Ix2>().unwrap();
        let bv = self.view(b).into_dimensionality::<ndarray::Ix2>().unwrap();
        let v = kernels::gemm(av, bv).into_dyn();
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// Batched 3-D matmul; `transpose_b` treats b as `(g,n,k)`.
    pub fn bat_matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> NodeId {
        let av = self.view(a).into_dimensionality::<ndarray::Ix3>().unwrap();
        let bv = self.view(b).into_dimensionality::<ndarray::Ix3>().unwrap();
        let v = kernels::bmm(av, bv, transpose_b).into_dyn();
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::BatMatMul(a, b, transpose_b), ng)
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        let v = softmax_axis(self.value(a), axis);
        let ng = self.ng(a);
        self.push(v, Op::Softmax(a, axis), ng)
    }

    /// Layer norm over the last axis with learned gain and bias (1-D each).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: F) -> NodeId {
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let d = *xv.shape().last().unwrap();
        let inv_d = F::one() / F::from_f64(d as f64);
        let mut out = xv.clone();
        let gs = g.as_slice().unwrap();
        let bs = b.as_slice().unwrap();
        for mut lane in out.lanes_mut(Axis(xv.ndim() - 1)) {
            let mut mu = F::zero();
            for &v in lane.iter() {
                mu = mu + v;
            }
            mu = mu * inv_d;
            let mut var = F::zero();
            for &v in lane.iter() {
                var = var + (v - mu) * (v - mu);
            }
            var = var * inv_d;
            let inv_sigma = F::one() / (var + eps).sqrt();
            for (i, v) in lane.iter_mut().enumerate() {
                *v = (*v - mu) * inv_sigma * gs[i] + bs[i];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(out, Op::LayerNorm(x, gain, bias, eps), ng)
    }

    // ---- conv / pooling / tokens ----

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, ph: usize, pw: usize) -> NodeId {
        let xv = self.view(x).into_dimensionality::<ndarray::Ix4>().unwrap();
        let wv = self.view(w).into_dimensionality::<ndarray::Ix4>().unwrap();
        let v = kernels::conv2d(xv, wv, stride, ph, pw).into_dyn();
        let ng = self.ng(x) || self.ng(w);
        self.push(v, Op::Conv2d { x, w, stride, ph, pw }, ng)
    }

    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> NodeId {
        let xv = self.view(x).into_dimensionality::<ndarray::Ix4>().unwrap();
        let v = kernels::avg_pool2d(xv, k).into_dyn();
        let ng = self.ng(x);
        self.push(v, Op::AvgPool2d(x, k), ng)
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let xv = self.view(x).into_dimensionality::<ndarray::Ix4>().unwrap();
        let v = kernels::upsample2x(xv).into_dyn();
        let ng = self.ng(x);
        self.push(v, Op::Upsample2x(x), ng)
    }

    pub fn patchify(&mut self, x: NodeId, p: usize) -> NodeId {
        let xv = self.view(x).into_dimensionality::<ndarray::Ix4>().unwrap();
        let v = kernels::patchify(xv, p).into_dyn();
        let ng = self.ng(x);
        self.push(v, Op::Patchify(x, p), ng)
    }

    pub fn unpatchify(&mut self, t: NodeId, p: usize, c: usize, h: usize, w: usize) -> NodeId {
        let tv = self.view(t).into_dimensionality::<ndarray::Ix3>().unwrap();
        let v = kernels::unpatchify(tv, p, c, h, w).into_dyn();
        let ng = self.ng(t);
        self.push(v, Op::Unpatchify(t, p), ng)
    }

    /// Row lookup: `table (V,C)`, `indices (B)` -> `(B,C)`.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let t = self
            .view(table)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let c = t.dim().1;
        let mut out = ndarray::Array2::<F>::zeros((indices.len(), c));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&t.row(i));
        }
        let ng = self.ng(table);
        self.push(out.into_dyn(), Op::Embedding(table, indices.to_vec()), ng)
    }

    /// Mean softmax cross-entropy of `logits (B,K)` against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let probs = softmax_axis(self.value(logits), self.value(logits).ndim() - 1);
        let p2 = probs.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = labels.len();
        let tiny = F::from_f64(1e-12);
        let mut loss = F::zero();
        for (r, &y) in labels.iter().enumerate() {
            loss = loss - (p2[[r, y]] + tiny).ln();
        }
        loss = loss / F::from_f64(b as f64);
        let ng = self.ng(logits);
        self.push_aux(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::CrossEntropy(logits, labels.to_vec()),
            ng,
            Some(probs),
        )
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Grads<F> {
        let mut slots: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), F::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            self.accumulate_parent_grads(i, &g, &mut slots);
            slots[i] = Some(g);
        }
        Grads { slots }
    }

    fn add_grad(slots: &mut [Option<ArrayD<F>>], id: NodeId, g: ArrayD<F>) {
        match &mut slots[id.0] {
            Some(acc) => *acc = &*acc + &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_parent_grads(
        &self,
        i: usize,
        g: &ArrayD<F>,
        slots: &mut Vec<Option<ArrayD<F>>>,
    ) {
        use Op::*;
        let node = &self.nodes[i];
        match &node.op {
            Leaf => {}
            Add(a, b) => {
                if self.ng(*a) {
                    Self::add_grad(slots, *a, reduce_to_shape(g.clone(), self.shape(*a)));
                }
                if self.ng(*b) {
                    Self::add_grad(slots, *b, reduce_to_shape(g.clone(), self.shape(*b)));
                }
            }
            Sub(a, b) => {
                if self.ng(*a) {
                    Self::add_grad(slots, *a, reduce_to_shape(g.clone(), self.shape(*a)));
                }
                if self.ng(*b) {
                    Self::add_grad(slots, *b, reduce_to_shape(g.mapv(|x| -x), self.shape(*b)));
                }
            }
            Mul(a, b) => {
                if self.ng(*a) {
                    let ga = binary_broadcast(g, self.value(*b), |x, y| x * y);
                    Self::add_grad(slots, *a, reduce_to_shape(ga, self.shape(*a)));
                }
                if self.ng(*b) {
                    let gb = binary_broadcast(g, self.value(*a), |x, y| x * y);
                    Self::add_grad(slots, *b, reduce_to_shape(gb, self.shape(*b)));
                }
            }
            Div(a, b) => {
                if self.ng(*a) {
                    let ga = binary_broadcast(g, self.value(*b), |x, y| x / y);
                    Self::add_grad(slots, *a, reduce_to_shape(ga, self.shape(*a)));
                }
                if self.ng(*b) {
                    // d(a/b)/db = -a / b^2
                    let t = binary_broadcast(self.value(*a), self.value(*b), |x, y| -x / (y * y));
                    let gb = binary_broadcast(g, &t, |x, y| x * y);
                    Self::add_grad(slots, *b, reduce_to_shape(gb, self.shape(*b)));
                }
            }
            Neg(a) => Self::add_grad(slots, *a, g.mapv(|x| -x)),
            Exp(a) => {
                let mut ga = node.value.clone();
                ga.zip_mut_with(g, |y, &gg| *y = *y * gg);
                Self::add_grad(slots, *a, ga);
            }
            Sqrt(a) => {
                let half = F::from_f64(0.5);
                let mut ga = node.value.clone();
                ga.zip_mut_with(g, |y, &gg| *y = gg * half / *y);
                Self::add_grad(slots, *a, ga);
            }
            Square(a) => {
                let two = F::from_f64(2.0);
                let mut ga = self.value(*a).clone();
                ga.zip_mut_with(g, |x, &gg| *x = two * *x * gg);
                Self::add_grad(slots, *a, ga);
            }
            Sigmoid(a) => {
                let mut ga = node.value.clone();
                ga.zip_mut_with(g, |y, &gg| *y = gg * *y * (F::one() - *y));
                Self::add_grad(slots, *a, ga);
            }
            Tanh(a) => {
                let mut ga = node.value.clone();
                ga.zip_mut_with(g, |y, &gg| *y = gg * (F::one() - *y * *y));
                Self::add_grad(slots, *a, ga);
            }
            Silu(a) => {
                let mut ga = self.value(*a).clone();
                ga.zip_mut_with(g, |x, &gg| {
                    let s = F::one() / (F::one() + (-*x).exp());
                    *x = gg * s * (F::one() + *x * (F::one() - s));
                });
                Self::add_grad(slots, *a, ga);
            }
            Gelu(a) => {
                let c = F::from_f64(0.797_884_560_802_865_4);
                let k = F::from_f64(0.044715);
                let half = F::from_f64(0.5);
                let three = F::from_f64(3.0);
                let mut ga = self.value(*a).clone();
                ga.zip_mut_with(g, |x, &gg| {
                    let u = c * (*x + k * *x * *x * *x);
                    let t = u.tanh();
                    let du = c * (F::one() + three * k * *x * *x);
                    *x = gg * (half * (F::one() + t) + half * *x * (F::one() - t * t) * du);
                });
                Self::add_grad(slots, *a, ga);
            }
            Scale(a, c) => Self::add_grad(slots, *a, g.mapv(|x| x * *c)),
            AddScalar(a, _) => Self::add_grad(slots, *a, g.clone()),
            Clamp(a, lo, hi) => {
                let mut ga = self.value(*a).clone();
                ga.zip_mut_with(g, |x, &gg| {
                    *x = if *x >= *lo && *x <= *hi { gg } else { F::zero() };
                });
                Self::add_grad(slots, *a, ga);
            }
            ClampMin(a, lo) => {
                let mut ga = self.value(*a).clone();
                ga.zip_mut_with(g, |x, &gg| *x = if *x >= *lo { gg } else { F::zero() });
                Self::add_grad(slots, *a, ga);
            }
            Reshape(a) => {
                let ga = g
                    .clone()
                    .into_shape_with_order(self.value(*a).raw_dim())
                    .unwrap();
                Self::add_grad(slots, *a, ga);
            }
            Permute(a, axes) => {
                let mut inv = vec![0usize; axes.len()];
                for (pos, &ax) in axes.iter().enumerate() {
                    inv[ax] = pos;
                }
                let ga = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                Self::add_grad(slots, *a, ga);
            }
            Concat(parts, axis) => {
                let mut offset = 0usize;
                for &p in parts {
                    let d = self.shape(p)[*axis];
                    if self.ng(p) {
                        let gp = g
                            .slice_axis(Axis(*axis), Slice::from(offset..offset + d))
                            .to_owned();
                        Self::add_grad(slots, p, gp);
                    }
                    offset += d;
                }
            }
            SliceAxis(a, axis, from, to) => {
                let mut ga = ArrayD::<F>::zeros(self.value(*a).raw_dim());
                ga.slice_axis_mut(Axis(*axis), Slice::from(*from..*to)).assign(g);
                Self::add_grad(slots, *a, ga);
            }
            SumAll(a) => {
                let gv = *g.iter().next().unwrap();
                Self::add_grad(slots, *a, ArrayD::from_elem(self.value(*a).raw_dim(), gv));
            }
            MeanAll(a) => {
                let n = F::from_f64(self.value(*a).len() as f64);
                let gv = *g.iter().next().unwrap() / n;
                Self::add_grad(slots, *a, ArrayD::from_elem(self.value(*a).raw_dim(), gv));
            }
            SumAxis(a, axis, keepdim) => {
                let gk = if *keepdim {
                    g.clone()
                } else {
                    g.clone().insert_axis(Axis(*axis))
                };
                let ga = gk
                    .broadcast(self.value(*a).raw_dim())
                    .unwrap()
                    .to_owned();
                Self::add_grad(slots, *a, ga);
            }
            MeanAxis(a, axis, keepdim) => {
                let n = F::from_f64(self.value(*a).shape()[*axis] as f64);
                let gk = if *keepdim {
                    g.clone()
                } else {
                    g.clone().insert_axis(Axis(*axis))
                };
                let ga = gk
                    .broadcast(self.value(*a).raw_dim())
                    .unwrap()
                    .mapv(|x| x / n);
                Self::add_grad(slots, *a, ga);
            }
            MaxAxis(a, axis) => {
                let args = node.aux.as_ref().unwrap();
                let mut ga = ArrayD::<F>::zeros(self.value(*a).raw_dim());
                let gl = g.index_axis(Axis(*axis), 0);
                for ((mut lane, &arg), &gg) in ga
                    .lanes_mut(Axis(*axis))
                    .into_iter()
                    .zip(args.iter())
                    .zip(gl.iter())
                {
                    lane[arg.as_f64() as usize] = gg;
                }
                Self::add_grad(slots, *a, ga);
            }
            MatMul(a, b) => {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                if self.ng(*a) {
                    let bv = self.view(*b).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let ga = kernels::gemm(g2, bv.t().as_standard_layout().view());
                    Self::add_grad(slots, *a, ga.into_dyn());
                }
                if self.ng(*b) {
                    let av = self.view(*a).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let gb = kernels::gemm(av.t().as_standard_layout().view(), g2);
                    Self::add_grad(slots, *b, gb.into_dyn());
                }
            }
            BatMatMul(a, b, transpose_b) => {
                let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let av = self.view(*a).into_dimensionality::<ndarray::Ix3>().unwrap();
                let bv = self.view(*b).into_dimensionality::<ndarray::Ix3>().unwrap();
                if !*transpose_b {
                    // out = a.b : da = g.b^T, db = a^T.g
                    if self.ng(*a) {
                        Self::add_grad(slots, *a, kernels::bmm(g3, bv, true).into_dyn());
                    }
                    if self.ng(*b) {
                        Self::add_grad(slots, *b, kernels::bmm_tn(av, g3).into_dyn());
                    }
                } else {
                    // out = a.b^T : da = g.b, db = g^T.a
                    if self.ng(*a) {
                        Self::add_grad(slots, *a, kernels::bmm(g3, bv, false).into_dyn());
                    }
                    if self.ng(*b) {
                        Self::add_grad(slots, *b, kernels::bmm_tn(g3, av).into_dyn());
                    }
                }
            }
            Softmax(a, axis) => {
                let s = &node.value;
                let mut ga = s.clone();
                // g_in = s * (g - sum(g*s over axis))
                let gs = binary_broadcast(g, s, |x, y| x * y);
                let dot = gs.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                let dotb = dot.broadcast(s.raw_dim()).unwrap().to_owned();
                ndarray::Zip::from(&mut ga)
                    .and(g)
                    .and(&dotb)
                    .for_each(|sv, &gg, &dd| *sv = *sv * (gg - dd));
                Self::add_grad(slots, *a, ga);
            }
            LayerNorm(x, gain, bias, eps) => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = *xv.shape().last().unwrap();
                let inv_d = F::one() / F::from_f64(d as f64);
                let last = Axis(xv.ndim() - 1);
                let gs = gv.as_slice().unwrap();

                let mut dx = ArrayD::<F>::zeros(xv.raw_dim());
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];

                for ((x_lane, g_lane), mut dx_lane) in xv
                    .lanes(last)
                    .into_iter()
                    .zip(g.lanes(last))
                    .zip(dx.lanes_mut(last))
                {
                    let mut mu = F::zero();
                    for &v in x_lane.iter() {
                        mu = mu + v;
                    }
                    mu = mu * inv_d;
                    let mut var = F::zero();
                    for &v in x_lane.iter() {
                        var = var + (v - mu) * (v - mu);
                    }
                    var = var * inv_d;
                    let inv_sigma = F::one() / (var + *eps).sqrt();

                    // dxhat, plus gain/bias grads
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    let mut dxhat = vec![F::zero(); d];
                    for i in 0..d {
                        let xhat = (x_lane[i] - mu) * inv_sigma;
                        let gg = g_lane[i];
                        dgain[i] = dgain[i] + gg * xhat;
                        dbias[i] = dbias[i] + gg;
                        let dh = gg * gs[i];
                        dxhat[i] = dh;
                        sum_dxhat = sum_dxhat + dh;
                        sum_dxhat_xhat = sum_dxhat_xhat + dh * xhat;
                    }
                    for i in 0..d {
                        let xhat = (x_lane[i] - mu) * inv_sigma;
                        dx_lane[i] = inv_sigma
                            * (dxhat[i] - inv_d * sum_dxhat - inv_d * xhat * sum_dxhat_xhat);
                    }
                }
                if self.ng(*x) {
                    Self::add_grad(slots, *x, dx);
                }
                if self.ng(*gain) {
                    Self::add_grad(
                        slots,
                        *gain,
                        ArrayD::from_shape_vec(IxDyn(&[d]), dgain).unwrap(),
                    );
                }
                if self.ng(*bias) {
                    Self::add_grad(
                        slots,
                        *bias,
                        ArrayD::from_shape_vec(IxDyn(&[d]), dbias).unwrap(),
                    );
                }
            }
            Conv2d { x, w, stride, ph, pw } => {
                let xv = self.view(*x).into_dimensionality::<ndarray::Ix4>().unwrap();
                let wv = self.view(*w).into_dimensionality::<ndarray::Ix4>().unwrap();
                let gv = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let (dx, dw) = kernels::conv2d_backward(xv, wv, gv, *stride, *ph, *pw);
                if self.ng(*x) {
                    Self::add_grad(slots, *x, dx.into_dyn());
                }
                if self.ng(*w) {
                    Self::add_grad(slots, *w, dw.into_dyn());
                }
            }
            AvgPool2d(a, k) => {
                let gv = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                Self::add_grad(slots, *a, kernels::avg_pool2d_backward(gv, *k).into_dyn());
            }
            Upsample2x(a) => {
                let gv = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                Self::add_grad(slots, *a, kernels::upsample2x_backward(gv).into_dyn());
            }
            Patchify(a, p) => {
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let shp = self.shape(*a);
                let (c, h, w) = (shp[1], shp[2], shp[3]);
                Self::add_grad(slots, *a, kernels::unpatchify(gv, *p, c, h, w).into_dyn());
            }
            Unpatchify(a, p) => {
                let gv = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                Self::add_grad(slots, *a, kernels::patchify(gv, *p).into_dyn());
            }
            Embedding(table, indices) => {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut gt = ndarray::Array2::<F>::zeros((
                    self.shape(*table)[0],
                    self.shape(*table)[1],
                ));
                for (r, &i) in indices.iter().enumerate() {
                    let mut row = gt.row_mut(i);
                    row += &g2.row(r);
                }
                Self::add_grad(slots, *table, gt.into_dyn());
            }
            CrossEntropy(logits, labels) => {
                let probs = node.aux.as_ref().unwrap();
                let gv = *g.iter().next().unwrap();
                let inv_b = F::one() / F::from_f64(labels.len() as f64);
                let mut gl = probs.clone();
                {
                    let mut g2 = gl
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    for (r, &y) in labels.iter().enumerate() {
                        g2[[r, y]] = g2[[r, y]] - F::one();
                    }
                }
                let gl = gl.mapv(|p| p * inv_b * gv);
                Self::add_grad(slots, *logits, gl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn broadcast_add_reduces_gradient_correctly() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.variable(arr1(&[10.0, 20.0]).into_dyn());
        let s = g.add(a, b);
        let loss = g.sum_all(s);
        let grads = g.backward(loss);
        assert_eq!(
            grads.get(b).unwrap(),
            &arr1(&[2.0, 2.0]).into_dyn(),
            "bias grad sums over broadcast rows"
        );
        assert_eq!(grads.get(a).unwrap(), &ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
    }

    #[test]
    fn matmul_forward_matches_manual() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.constant(arr2(&[[5.0], [6.0]]).into_dyn());
        let c = g.matmul(a, b);
        assert_eq!(g.value(c), &arr2(&[[17.0], [39.0]]).into_dyn());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(arr2(&[[0.0, 1.0, 2.0], [5.0, 5.0, 5.0]]).into_dyn());
        let s = g.softmax(a, 1);
        for row in g.value(s).rows() {
            let total: f64 = row.sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
