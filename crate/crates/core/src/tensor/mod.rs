//! Reverse-mode automatic differentiation on dynamically shaped `f64` arrays.
//!
//! The engine is a flat tape: every operation appends a [`Node`] holding its
//! forward value, the indices of its parents, and whatever context its
//! backward pass needs. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients per node. Everything is single-threaded and runs in
//! `f64`, so two runs over the same inputs produce bit-identical values —
//! training runs, metric streams, and checkpoints are reproducible by
//! construction.
//!
//! Shape errors inside the engine are programmer errors and panic with a
//! message naming the op; public library entry points validate their inputs
//! and return `Result` before building a graph.

pub mod gradcheck;

use std::sync::Arc;

use ndarray::{Array2, ArrayD, ArrayViewD, Axis, Ix2, IxDyn, Zip};

/// Dynamically shaped f64 array, the engine's only value type.
pub type Arr = ArrayD<f64>;

/// Handle to a node on the tape. Cheap to copy; only valid for the graph
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Exp,
    Ln,
    Sqrt,
    Sqr,
    Gelu,
    ClampMin(f64),
    Matmul,
    Bmm,
    Reshape { orig: Vec<usize> },
    Permute { axes: Vec<usize> },
    SumAll,
    SumAxisKeep,
    SoftmaxLast,
    LogSoftmaxLast,
    LayerNormLast { rstd: Arc<Arr> },
    GatherRows { idx: Arc<Vec<usize>> },
    TakePerRow { idx: Arc<Vec<usize>> },
    Diag,
    ConcatAxis { axis: usize, lens: Vec<usize> },
    SliceAxis { axis: usize, start: usize },
    Rope2d { cos: Arc<Array2<f64>>, sin: Arc<Array2<f64>> },
    Conv3x3,
    Detach,
}

pub(crate) struct Node {
    pub value: Arr,
    pub parents: Vec<usize>,
    pub op: Op,
    pub needs_grad: bool,
}

/// Computation tape. Build ops through the methods below, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient of `v`, materializing zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Arr {
        match self.by_node[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Arr::zeros(IxDyn(shape)),
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `g` down to `target` shape, inverting a broadcast.
fn reduce_to_shape(g: ArrayViewD<'_, f64>, target: &[usize]) -> Arr {
    let mut out = g.to_owned();
    while out.ndim() > target.len() {
        out = out.sum_axis(Axis(0));
    }
    for (i, &t) in target.iter().enumerate() {
        if out.shape()[i] != t {
            debug_assert_eq!(t, 1, "reduce_to_shape target must be 1 where shapes differ");
            out = out.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    out
}

fn binary_elementwise(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        Zip::from(&mut out).and(b).for_each(|o, &bv| *o = f(*o, bv));
        out
    } else {
        let shape = broadcast_shape(a.shape(), b.shape());
        let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
        let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
        let mut out = Arr::zeros(IxDyn(&shape));
        Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
        out
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_K * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 0-dim (or single-element) node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar_value on node with {} elements", val.len());
        *val.iter().next().unwrap()
    }

    fn push(&mut self, value: Arr, parents: Vec<usize>, op: Op) -> Var {
        let needs_grad = match op {
            Op::Leaf => false, // set by leaf()
            Op::Detach => false,
            _ => parents.iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node { value, parents, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (parameters, trainable activations).
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.nodes.push(Node { value, parents: vec![], op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input (data, frozen teachers, masks).
    pub fn constant(&mut self, value: Arr) -> Var {
        self.nodes.push(Node { value, parents: vec![], op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(ndarray::arr0(x).into_dyn())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = binary_elementwise(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        self.push(out, vec![a.0, b.0], Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = binary_elementwise(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        self.push(out, vec![a.0, b.0], Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = binary_elementwise(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        self.push(out, vec![a.0, b.0], Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = binary_elementwise(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x / y);
        self.push(out, vec![a.0, b.0], Op::Div)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| -x);
        self.push(out, vec![a.0], Op::Neg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| c * x);
        self.push(out, vec![a.0], Op::Scale(c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(out, vec![a.0], Op::AddScalar)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(f64::exp);
        self.push(out, vec![a.0], Op::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(f64::ln);
        self.push(out, vec![a.0], Op::Ln)
    }

    /// Elementwise `max(x, c)`; gradient passes through only where `x > c`.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| x.max(c));
        self.push(out, vec![a.0], Op::ClampMin(c))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(out, vec![a.0], Op::Sqrt)
    }

    pub fn sqr(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(out, vec![a.0], Op::Sqr)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(gelu);
        self.push(out, vec![a.0], Op::Gelu)
    }

    /// 2-D matrix product `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
        let out = av.dot(&bv).into_dyn();
        self.push(out, vec![a.0, b.0], Op::Matmul)
    }

    /// Batched matrix product `[n,m,k] @ [n,k,p] -> [n,m,p]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.ndim(), 3, "bmm lhs must be 3-D");
        assert_eq!(bv.ndim(), 3, "bmm rhs must be 3-D");
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm batch mismatch");
        let (n, m, p) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
        let mut out = Arr::zeros(IxDyn(&[n, m, p]));
        for i in 0..n {
            let ai = av.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            let bi = bv.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        self.push(out, vec![a.0, b.0], Op::Bmm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let orig = self.nodes[a.0].value.shape().to_vec();
        let out = self.nodes[a.0]
            .value
            .to_shape(IxDyn(shape))
            .expect("reshape size mismatch")
            .to_owned();
        self.push(out, vec![a.0], Op::Reshape { orig })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let out = self.nodes[a.0].value.view().permuted_axes(IxDyn(axes)).to_owned();
        self.push(out, vec![a.0], Op::Permute { axes: axes.to_vec() })
    }

    /// Transpose the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, a: Var) -> Var {
        let nd = self.nodes[a.0].value.ndim();
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(a, &axes)
    }

    /// Sum of all elements, producing a 0-dim scalar node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(ndarray::arr0(s).into_dyn(), vec![a.0], Op::SumAll)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum along `axis`, keeping it as size 1.
    pub fn sum_axis_keep(&mut self, a: Var, axis: usize) -> Var {
        let out = self.nodes[a.0].value.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.push(out, vec![a.0], Op::SumAxisKeep)
    }

    pub fn mean_axis_keep(&mut self, a: Var, axis: usize) -> Var {
        let n = self.nodes[a.0].value.shape()[axis];
        let s = self.sum_axis_keep(a, axis);
        self.scale(s, 1.0 / n as f64)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let out = softmax_lanes(&self.nodes[a.0].value);
        self.push(out, vec![a.0], Op::SoftmaxLast)
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut out = v.clone();
        let last = v.ndim() - 1;
        for mut lane in out.lanes_mut(Axis(last)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = lane.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
            lane.mapv_inplace(|x| x - lse);
        }
        self.push(out, vec![a.0], Op::LogSoftmaxLast)
    }

    /// Normalize the last axis to zero mean, unit variance (no affine part).
    pub fn layer_norm_last(&mut self, a: Var, eps: f64) -> Var {
        let v = &self.nodes[a.0].value;
        let last = v.ndim() - 1;
        let mut out = v.clone();
        let mut rstd_shape = v.shape().to_vec();
        rstd_shape[last] = 1;
        let mut rstd = Arr::zeros(IxDyn(&rstd_shape));
        let n = v.shape()[last] as f64;
        for (mut lane, r) in out.lanes_mut(Axis(last)).into_iter().zip(rstd.iter_mut()) {
            let mean = lane.sum() / n;
            let var = lane.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + eps).sqrt();
            lane.mapv_inplace(|x| (x - mean) * rs);
            *r = rs;
        }
        self.push(out, vec![a.0], Op::LayerNormLast { rstd: Arc::new(rstd) })
    }

    /// Row lookup: `table[idx[i], :]` for each i. Backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = &self.nodes[table.0].value;
        assert_eq!(t.ndim(), 2, "gather_rows table must be 2-D");
        let w = t.shape()[1];
        let mut out = Arr::zeros(IxDyn(&[idx.len(), w]));
        for (i, &r) in idx.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&t.index_axis(Axis(0), r));
        }
        self.push(out, vec![table.0], Op::GatherRows { idx: Arc::new(idx.to_vec()) })
    }

    /// Per-batch row selection: `x[b, idx[b], :]` from `[B,T,W] -> [B,W]`.
    pub fn take_per_row(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.ndim(), 3, "take_per_row expects [B,T,W]");
        let (b, t, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        assert_eq!(idx.len(), b, "take_per_row index count");
        let mut out = Arr::zeros(IxDyn(&[b, w]));
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < t, "take_per_row index {} out of {} rows", r, t);
            for j in 0..w {
                out[[i, j]] = v[[i, r, j]];
            }
        }
        self.push(out, vec![x.0], Op::TakePerRow { idx: Arc::new(idx.to_vec()) })
    }

    /// Main diagonal of a square matrix `[N,N] -> [N]`.
    pub fn diag(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.ndim(), 2, "diag expects a matrix");
        let n = v.shape()[0];
        assert_eq!(n, v.shape()[1], "diag expects a square matrix");
        let out = Arr::from_shape_fn(IxDyn(&[n]), |ix| v[[ix[0], ix[0]]]);
        self.push(out, vec![a.0], Op::Diag)
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let lens = parts.iter().map(|p| self.nodes[p.0].value.shape()[axis]).collect();
        let parents = parts.iter().map(|p| p.0).collect();
        self.push(out, parents, Op::ConcatAxis { axis, lens })
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let out = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push(out, vec![a.0], Op::SliceAxis { axis, start })
    }

    /// Rotate channel pairs of `[B,H,T,D]` by per-token angles.
    ///
    /// `cos`/`sin` have shape `[T, D/2]`; pair `(2i, 2i+1)` of token t rotates
    /// by the angle whose cosine/sine sit at `[t, i]`. The backward pass is
    /// the inverse rotation.
    pub fn rope2d(&mut self, x: Var, cos: Arc<Array2<f64>>, sin: Arc<Array2<f64>>) -> Var {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.ndim(), 4, "rope2d expects [B,H,T,D]");
        let d = v.shape()[3];
        assert_eq!(d % 2, 0, "rope2d needs even head dim");
        assert_eq!(cos.shape(), &[v.shape()[2], d / 2], "rope2d table shape");
        let out = rope_apply(v, &cos, &sin, false);
        self.push(out, vec![x.0], Op::Rope2d { cos, sin })
    }

    /// 3x3 convolution with zero padding 1: `x [B,Cin,H,W]`, `w [Cout,Cin,3,3]`,
    /// `b [Cout]` -> `[B,Cout,H,W]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(xv.ndim(), 4, "conv3x3 input must be [B,Cin,H,W]");
        assert_eq!(wv.shape()[2..], [3, 3], "conv3x3 kernel must be 3x3");
        assert_eq!(wv.shape()[1], xv.shape()[1], "conv3x3 channel mismatch");
        assert_eq!(bv.shape(), &[wv.shape()[0]], "conv3x3 bias shape");
        let (bs, cin, h, wdt) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let cout = wv.shape()[0];
        let mut out = Arr::zeros(IxDyn(&[bs, cout, h, wdt]));
        for n in 0..bs {
            for co in 0..cout {
                for i in 0..h {
                    for j in 0..wdt {
                        let mut acc = bv[[co]];
                        for ci in 0..cin {
                            for di in 0..3usize {
                                for dj in 0..3usize {
                                    let ii = i as isize + di as isize - 1;
                                    let jj = j as isize + dj as isize - 1;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wdt
                                    {
                                        acc += xv[[n, ci, ii as usize, jj as usize]]
                                            * wv[[co, ci, di, dj]];
                                    }
                                }
                            }
                        }
                        out[[n, co, i, j]] = acc;
                    }
                }
            }
        }
        self.push(out, vec![x.0, w.0, b.0], Op::Conv3x3)
    }

    /// Stop-gradient: same value, no backward flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.clone();
        self.push(out, vec![a.0], Op::Detach)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Backpropagate from a scalar node through the tape.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Arr::ones(self.nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { by_node: grads }
    }

    fn accumulate(&self, grads: &mut [Option<Arr>], parent: usize, contrib: Arr) {
        if !self.nodes[parent].needs_grad {
            return;
        }
        match &mut grads[parent] {
            Some(existing) => *existing += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, i: usize, g: &Arr, grads: &mut [Option<Arr>]) {
        let node = &self.nodes[i];
        let parent_val = |k: usize| &self.nodes[node.parents[k]].value;
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add => {
                self.accumulate(grads, node.parents[0], reduce_to_shape(g.view(), parent_val(0).shape()));
                self.accumulate(grads, node.parents[1], reduce_to_shape(g.view(), parent_val(1).shape()));
            }
            Op::Sub => {
                self.accumulate(grads, node.parents[0], reduce_to_shape(g.view(), parent_val(0).shape()));
                let neg = g.mapv(|x| -x);
                self.accumulate(grads, node.parents[1], reduce_to_shape(neg.view(), parent_val(1).shape()));
            }
            Op::Mul => {
                let da = binary_elementwise(g, parent_val(1), |x, y| x * y);
                let db = binary_elementwise(g, parent_val(0), |x, y| x * y);
                self.accumulate(grads, node.parents[0], reduce_to_shape(da.view(), parent_val(0).shape()));
                self.accumulate(grads, node.parents[1], reduce_to_shape(db.view(), parent_val(1).shape()));
            }
            Op::Div => {
                let da = binary_elementwise(g, parent_val(1), |x, y| x / y);
                // db = -g * out / b
                let gout = binary_elementwise(g, &node.value, |x, y| x * y);
                let db = binary_elementwise(&gout, parent_val(1), |x, y| -x / y);
                self.accumulate(grads, node.parents[0], reduce_to_shape(da.view(), parent_val(0).shape()));
                self.accumulate(grads, node.parents[1], reduce_to_shape(db.view(), parent_val(1).shape()));
            }
            Op::Neg => self.accumulate(grads, node.parents[0], g.mapv(|x| -x)),
            Op::Scale(c) => self.accumulate(grads, node.parents[0], g.mapv(|x| c * x)),
            Op::AddScalar => self.accumulate(grads, node.parents[0], g.clone()),
            Op::Exp => {
                let da = binary_elementwise(g, &node.value, |x, y| x * y);
                self.accumulate(grads, node.parents[0], da);
            }
            Op::Ln => {
                let da = binary_elementwise(g, parent_val(0), |x, y| x / y);
                self.accumulate(grads, node.parents[0], da);
            }
            Op::ClampMin(c) => {
                let da =
                    binary_elementwise(g, parent_val(0), |x, y| if y > *c { x } else { 0.0 });
                self.accumulate(grads, node.parents[0], da);
            }
            Op::Sqrt => {
                let da = binary_elementwise(g, &node.value, |x, y| 0.5 * x / y);
                self.accumulate(grads, node.parents[0], da);
            }
            Op::Sqr => {
                let da = binary_elementwise(g, parent_val(0), |x, y| 2.0 * x * y);
                self.accumulate(grads, node.parents[0], da);
            }
            Op::Gelu => {
                let da = binary_elementwise(g, parent_val(0), |x, y| x * gelu_grad(y));
                self.accumulate(grads, node.parents[0], da);
            }
            Op::Matmul => {
                let a = parent_val(0).view().into_dimensionality::<Ix2>().unwrap();
                let b = parent_val(1).view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                self.accumulate(grads, node.parents[0], gv.dot(&b.t()).into_dyn());
                self.accumulate(grads, node.parents[1], a.t().dot(&gv).into_dyn());
            }
            Op::Bmm => {
                let a = parent_val(0);
                let b = parent_val(1);
                let n = a.shape()[0];
                let mut da = Arr::zeros(a.raw_dim());
                let mut db = Arr::zeros(b.raw_dim());
                for k in 0..n {
                    let ak = a.index_axis(Axis(0), k).into_dimensionality::<Ix2>().unwrap();
                    let bk = b.index_axis(Axis(0), k).into_dimensionality::<Ix2>().unwrap();
                    let gk = g.index_axis(Axis(0), k).into_dimensionality::<Ix2>().unwrap();
                    da.index_axis_mut(Axis(0), k).assign(&gk.dot(&bk.t()));
                    db.index_axis_mut(Axis(0), k).assign(&ak.t().dot(&gk));
                }
                self.accumulate(grads, node.parents[0], da);
                self.accumulate(grads, node.parents[1], db);
            }
            Op::Reshape { orig } => {
                let da = g.to_shape(IxDyn(orig)).expect("reshape backward").to_owned();
                self.accumulate(grads, node.parents[0], da);
            }
            Op::Permute { axes } => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let da = g.view().permuted_axes(IxDyn(&inv)).to_owned();
                self.accumulate(grads, node.parents[0], da);
            }
            Op::SumAll => {
                let gv = *g.iter().next().unwrap();
                self.accumulate(grads, node.parents[0], Arr::from_elem(parent_val(0).raw_dim(), gv));
            }
            Op::SumAxisKeep => {
                let target = parent_val(0).shape();
                let da = g.broadcast(IxDyn(target)).expect("sum_axis backward").to_owned();
                self.accumulate(grads, node.parents[0], da);
            }
            Op::SoftmaxLast => {
                let y = &node.value;
                let last = y.ndim() - 1;
                let mut da = binary_elementwise(g, y, |gv, yv| gv * yv);
                // da = y * (g - sum(g*y))
                let dots = da.sum_axis(Axis(last)).insert_axis(Axis(last));
                let corr = binary_elementwise(&dots.to_owned(), y, |d, yv| d * yv);
                da -= &corr;
                self.accumulate(grads, node.parents[0], da);
            }
            Op::LogSoftmaxLast => {
                let y = &node.value;
                let last = y.ndim() - 1;
                let gsum = g.sum_axis(Axis(last)).insert_axis(Axis(last)).to_owned();
                let soft = y.mapv(f64::exp);
                let corr = binary_elementwise(&gsum, &soft, |s, p| s * p);
                let da = binary_elementwise(g, &corr, |gv, c| gv - c);
                self.accumulate(grads, node.parents[0], da);
            }
            Op::LayerNormLast { rstd } => {
                let xhat = &node.value;
                let last = xhat.ndim() - 1;
                let n = xhat.shape()[last] as f64;
                let gmean = g.sum_axis(Axis(last)).insert_axis(Axis(last)).mapv(|x| x / n);
                let gx = binary_elementwise(g, xhat, |gv, xv| gv * xv);
                let gxmean = gx.sum_axis(Axis(last)).insert_axis(Axis(last)).mapv(|x| x / n);
                let t1 = binary_elementwise(g, &gmean.to_owned(), |gv, m| gv - m);
                let t2 = binary_elementwise(xhat, &gxmean.to_owned(), |xv, m| xv * m);
                let centered = binary_elementwise(&t1, &t2, |a, b| a - b);
                let da = binary_elementwise(&centered, &rstd.as_ref().clone(), |c, r| c * r);
                self.accumulate(grads, node.parents[0], da);
            }
            Op::GatherRows { idx } => {
                let mut da = Arr::zeros(parent_val(0).raw_dim());
                for (i, &r) in idx.iter().enumerate() {
                    let mut row = da.index_axis_mut(Axis(0), r);
                    row += &g.index_axis(Axis(0), i);
                }
                self.accumulate(grads, node.parents[0], da);
            }
            Op::TakePerRow { idx } => {
                let mut da = Arr::zeros(parent_val(0).raw_dim());
                let w = da.shape()[2];
                for (b, &r) in idx.iter().enumerate() {
                    for j in 0..w {
                        da[[b, r, j]] += g[[b, j]];
                    }
                }
                self.accumulate(grads, node.parents[0], da);
            }
            Op::Diag => {
                let n = g.len();
                let mut da = Arr::zeros(parent_val(0).raw_dim());
                for k in 0..n {
                    da[[k, k]] = g[[k]];
                }
                self.accumulate(grads, node.parents[0], da);
            }
            Op::ConcatAxis { axis, lens } => {
                let mut start = 0usize;
                for (p, &len) in node.parents.iter().zip(lens.iter()) {
                    let part = g
                        .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    self.accumulate(grads, *p, part);
                    start += len;
                }
            }
            Op::SliceAxis { axis, start } => {
                let mut da = Arr::zeros(parent_val(0).raw_dim());
                let len = g.shape()[*axis];
                da.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + len))
                    .assign(g);
                self.accumulate(grads, node.parents[0], da);
            }
            Op::Rope2d { cos, sin } => {
                let da = rope_apply(g, cos, sin, true);
                self.accumulate(grads, node.parents[0], da);
            }
            Op::Conv3x3 => {
                let xv = parent_val(0);
                let wv = parent_val(1);
                let (bs, cin, h, wdt) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let cout = wv.shape()[0];
                let mut dx = Arr::zeros(xv.raw_dim());
                let mut dw = Arr::zeros(wv.raw_dim());
                let mut db = Arr::zeros(parent_val(2).raw_dim());
                for n in 0..bs {
                    for co in 0..cout {
                        for i in 0..h {
                            for j in 0..wdt {
                                let gv = g[[n, co, i, j]];
                                db[[co]] += gv;
                                for ci in 0..cin {
                                    for di in 0..3usize {
                                        for dj in 0..3usize {
                                            let ii = i as isize + di as isize - 1;
                                            let jj = j as isize + dj as isize - 1;
                                            if ii >= 0
                                                && jj >= 0
                                                && (ii as usize) < h
                                                && (jj as usize) < wdt
                                            {
                                                dx[[n, ci, ii as usize, jj as usize]] +=
                                                    gv * wv[[co, ci, di, dj]];
                                                dw[[co, ci, di, dj]] +=
                                                    gv * xv[[n, ci, ii as usize, jj as usize]];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, node.parents[0], dx);
                self.accumulate(grads, node.parents[1], dw);
                self.accumulate(grads, node.parents[2], db);
            }
        }
    }
}

fn softmax_lanes(v: &Arr) -> Arr {
    let mut out = v.clone();
    let last = v.ndim() - 1;
    for mut lane in out.lanes_mut(Axis(last)) {
        let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in lane.iter_mut() {
            *x = (*x - m).exp();
            sum += *x;
        }
        for x in lane.iter_mut() {
            *x /= sum;
        }
    }
    out
}

fn rope_apply(x: &Arr, cos: &Array2<f64>, sin: &Array2<f64>, inverse: bool) -> Arr {
    let (b, h, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Arr::zeros(x.raw_dim());
    let sign = if inverse { -1.0 } else { 1.0 };
    for bi in 0..b {
        for hi in 0..h {
            for ti in 0..t {
                for p in 0..d / 2 {
                    let c = cos[[ti, p]];
                    let s = sign * sin[[ti, p]];
                    let x0 = x[[bi, hi, ti, 2 * p]];
                    let x1 = x[[bi, hi, ti, 2 * p + 1]];
                    out[[bi, hi, ti, 2 * p]] = x0 * c - x1 * s;
                    out[[bi, hi, ti, 2 * p + 1]] = x0 * s + x1 * c;
                }
            }
        }
    }
    out
}

/// Composite helpers shared by the model and loss code.
impl Graph {
    /// `x @ w + bias` where `x` is `[.., in]`, flattening leading axes.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let shape = self.value(x).shape().to_vec();
        let in_dim = *shape.last().unwrap();
        let out_dim = self.value(w).shape()[1];
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, in_dim]);
        let mut y = self.matmul(flat, w);
        if let Some(b) = bias {
            y = self.add(y, b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_dim;
        self.reshape(y, &out_shape)
    }

    /// LayerNorm with affine parameters over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let n = self.layer_norm_last(x, eps);
        let scaled = self.mul(n, gamma);
        self.add(scaled, beta)
    }

    /// Scale rows of `[.., D]` to unit L2 norm (epsilon-guarded).
    pub fn normalize_last(&mut self, x: Var, eps: f64) -> Var {
        let sq = self.sqr(x);
        let last = self.value(x).ndim() - 1;
        let ssum = self.sum_axis_keep(sq, last);
        let eps_shifted = self.add_scalar(ssum, eps);
        let norm = self.sqrt(eps_shifted);
        self.div(x, norm)
    }
}
