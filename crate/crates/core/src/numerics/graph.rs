//! Reverse-mode tape. A `Graph` records every op; `Tensor` is a cheap handle
//! into it. Parameters live outside the graph as plain [`NdArray`]s in a
//! [`ParamSet`]; each training step binds them onto a fresh graph with
//! [`Graph::param`], runs forward, and exports per-parameter gradients with
//! [`Graph::backward`]. Frozen models bind through [`Graph::constant`], which
//! still lets gradients flow through their activations to upstream learnable
//! inputs without exporting anything for the frozen weights themselves.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::nd::NdArray;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRowBias(usize, usize),
    ScaleRows(usize, usize),
    AddSpatialBias(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Silu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Abs(usize),
    Square(usize),
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),
    MeanSpatial(usize),
    L2NormRows(usize),
    L2NormalizeRows(usize),
    CosineSimRows(usize, usize),
    SoftmaxRows(usize),
    LogSumExpRows(usize),
    CumsumExclRows(usize),
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize, len: usize },
    Reshape(usize),
    Im2Col { x: usize, geom: ConvGeom },
    Upsample2x(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddRowBias(..) => "add_row_bias",
            Op::ScaleRows(..) => "scale_rows",
            Op::AddSpatialBias(..) => "add_spatial_bias",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Silu(..) => "silu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SumRows(..) => "sum_rows",
            Op::MeanSpatial(..) => "mean_spatial",
            Op::L2NormRows(..) => "l2_norm_rows",
            Op::L2NormalizeRows(..) => "l2_normalize_rows",
            Op::CosineSimRows(..) => "cosine_sim_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::CumsumExclRows(..) => "cumsum_excl_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::Im2Col { .. } => "im2col",
            Op::Upsample2x(..) => "upsample2x",
        }
    }
}

/// Every differentiable op the tape registers, for coverage accounting in
/// gradient-check suites. `leaf` is excluded (no backward rule of its own).
pub const OP_REGISTRY: &[&str] = &[
    "add", "sub", "mul", "scale", "add_scalar", "add_row_bias", "scale_rows", "add_spatial_bias",
    "matmul", "transpose", "relu", "silu", "sigmoid", "softplus", "exp", "abs", "square",
    "sum_all", "mean_all", "sum_rows", "mean_spatial", "l2_norm_rows", "l2_normalize_rows",
    "cosine_sim_rows", "softmax_rows", "logsumexp_rows", "cumsum_excl_rows", "concat_cols",
    "slice_cols", "reshape", "im2col", "upsample2x",
];

struct Node {
    value: NdArray,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    param_names: BTreeSet<String>,
}

/// Named parameter storage; ordered, so optimizer state and checkpoints line
/// up deterministically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, NdArray>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, a: NdArray) {
        assert!(
            self.map.insert(name.to_string(), a).is_none(),
            "parameter {:?} registered twice",
            name
        );
    }

    pub fn get(&self, name: &str) -> &NdArray {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {:?} not found", name))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut NdArray {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter {:?} not found", name))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NdArray)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut NdArray)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elems(&self) -> usize {
        self.map.values().map(|a| a.numel()).sum()
    }
}

/// Per-parameter gradients exported by a backward pass. Repeated
/// [`Graph::backward_into`] calls accumulate.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, NdArray>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NdArray)> {
        self.map.iter()
    }

    fn accumulate(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        match self.map.get_mut(name) {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(data) {
                    *a += b;
                }
            }
            None => {
                self.map.insert(name.to_string(), NdArray::from_vec(shape, data.to_vec()));
            }
        }
    }
}

#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Graph`]. Clone is cheap; the value lives on the
/// tape until the graph is dropped.
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
    shape: Vec<usize>,
    needs_grad: bool,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?}, grad={})", self.id, self.shape, self.needs_grad)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { inner: Rc::new(RefCell::new(GraphInner::default())) }
    }

    fn push(&self, value: NdArray, op: Op, needs_grad: bool) -> Tensor {
        let shape = value.shape.clone();
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { value, op, needs_grad });
        Tensor { graph: self.clone(), id, shape, needs_grad }
    }

    /// Bind a learnable parameter; its gradient is exported under `name`.
    pub fn param(&self, name: &str, value: &NdArray) -> Tensor {
        let t = self.push(value.clone(), Op::Leaf, true);
        let mut inner = self.inner.borrow_mut();
        assert!(
            inner.param_names.insert(name.to_string()),
            "parameter {:?} bound twice on one graph",
            name
        );
        let id = t.id;
        inner.params.push((name.to_string(), id));
        t
    }

    /// Bind all entries of a `ParamSet`, learnable or frozen, under their own
    /// names prefixed by `prefix`.
    pub fn bind(&self, prefix: &str, ps: &ParamSet, trainable: bool) -> BTreeMap<String, Tensor> {
        ps.iter()
            .map(|(k, v)| {
                let full = format!("{}{}", prefix, k);
                let t = if trainable { self.param(&full, v) } else { self.constant(v) };
                (k.clone(), t)
            })
            .collect()
    }

    /// A fixed input; gradients flow through it to upstream nodes but are not
    /// exported for it.
    pub fn constant(&self, value: &NdArray) -> Tensor {
        self.push(value.clone(), Op::Leaf, false)
    }

    pub fn constant_owned(&self, value: NdArray) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant_owned(NdArray::scalar(v))
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Distinct op names recorded so far, for gradient-check coverage.
    pub fn ops_used(&self) -> BTreeSet<&'static str> {
        self.inner
            .borrow()
            .nodes
            .iter()
            .map(|n| n.op.name())
            .filter(|&n| n != "leaf")
            .collect()
    }

    pub fn backward(&self, loss: &Tensor) -> Gradients {
        let mut g = Gradients::new();
        self.backward_into(loss, &mut g);
        g
    }

    pub fn backward_into(&self, loss: &Tensor, out: &mut Gradients) {
        assert!(Rc::ptr_eq(&self.inner, &loss.graph.inner), "backward: loss from a different graph");
        let inner = self.inner.borrow();
        assert_eq!(
            inner.nodes[loss.id].value.numel(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            inner.nodes[loss.id].value.shape
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            if !inner.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            step_backward(&inner, id, &gout, &mut grads);
            grads[id] = Some(gout);
        }

        for (name, pid) in &inner.params {
            let node = &inner.nodes[*pid];
            match &grads[*pid] {
                Some(g) => out.accumulate(name, &node.value.shape, g),
                None => out.accumulate(name, &node.value.shape, &vec![0.0; node.value.numel()]),
            }
        }
    }
}

fn val<'a>(inner: &'a GraphInner, id: usize) -> &'a NdArray {
    &inner.nodes[id].value
}

fn wants(inner: &GraphInner, id: usize) -> bool {
    inner.nodes[id].needs_grad
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], id: usize, len: usize) -> &'a mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn step_backward(inner: &GraphInner, id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &inner.nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &dst in &[*a, *b] {
                if wants(inner, dst) {
                    let g = slot(grads, dst, gout.len());
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if wants(inner, *a) {
                let g = slot(grads, *a, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
            if wants(inner, *b) {
                let g = slot(grads, *b, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi -= go;
                }
            }
        }
        Op::Mul(a, b) => {
            if wants(inner, *a) {
                let bv = val(inner, *b).data.clone();
                let g = slot(grads, *a, gout.len());
                for ((gi, &go), bv) in g.iter_mut().zip(gout).zip(&bv) {
                    *gi += go * bv;
                }
            }
            if wants(inner, *b) {
                let av = val(inner, *a).data.clone();
                let g = slot(grads, *b, gout.len());
                for ((gi, &go), av) in g.iter_mut().zip(gout).zip(&av) {
                    *gi += go * av;
                }
            }
        }
        Op::Scale(x, c) => {
            if wants(inner, *x) {
                let c = *c;
                let g = slot(grads, *x, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go * c;
                }
            }
        }
        Op::AddScalar(x) => {
            if wants(inner, *x) {
                let g = slot(grads, *x, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
        }
        Op::AddRowBias(x, b) => {
            let (_, cols) = val(inner, *x).as_2d();
            if wants(inner, *x) {
                let g = slot(grads, *x, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
            if wants(inner, *b) {
                let g = slot(grads, *b, cols);
                for row in gout.chunks(cols) {
                    for (gi, &go) in g.iter_mut().zip(row) {
                        *gi += go;
                    }
                }
            }
        }
        Op::ScaleRows(x, s) => {
            let (rows, cols) = val(inner, *x).as_2d();
            if wants(inner, *x) {
                let sv = val(inner, *s).data.clone();
                let g = slot(grads, *x, rows * cols);
                for i in 0..rows {
                    let si = sv[i];
                    for j in 0..cols {
                        g[i * cols + j] += gout[i * cols + j] * si;
                    }
                }
            }
            if wants(inner, *s) {
                let xv = val(inner, *x).data.clone();
                let g = slot(grads, *s, rows);
                for i in 0..rows {
                    let mut acc = 0.0;
                    for j in 0..cols {
                        acc += gout[i * cols + j] * xv[i * cols + j];
                    }
                    g[i] += acc;
                }
            }
        }
        Op::AddSpatialBias(x, b) => {
            let sh = &val(inner, *x).shape;
            let (n, hw, c) = (sh[0], sh[1] * sh[2], sh[3]);
            if wants(inner, *x) {
                let g = slot(grads, *x, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
            if wants(inner, *b) {
                let g = slot(grads, *b, n * c);
                for bn in 0..n {
                    for p in 0..hw {
                        let base = (bn * hw + p) * c;
                        for ch in 0..c {
                            g[bn * c + ch] += gout[base + ch];
                        }
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = val(inner, *a).as_2d();
            let (_, n) = val(inner, *b).as_2d();
            if wants(inner, *a) {
                let mut tmp = vec![0.0; m * k];
                kernels::mm_nt(gout, &val(inner, *b).data, m, n, k, &mut tmp);
                let g = slot(grads, *a, m * k);
                for (gi, t) in g.iter_mut().zip(&tmp) {
                    *gi += t;
                }
            }
            if wants(inner, *b) {
                let mut tmp = vec![0.0; k * n];
                kernels::mm_tn(&val(inner, *a).data, gout, k, m, n, &mut tmp);
                let g = slot(grads, *b, k * n);
                for (gi, t) in g.iter_mut().zip(&tmp) {
                    *gi += t;
                }
            }
        }
        Op::Transpose(x) => {
            if wants(inner, *x) {
                let (r, c) = val(inner, *x).as_2d();
                let g = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += gout[j * r + i];
                    }
                }
            }
        }
        Op::Relu(x) => {
            if wants(inner, *x) {
                let xv = val(inner, *x).data.clone();
                let g = slot(grads, *x, gout.len());
                for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(&xv) {
                    if x > 0.0 {
                        *gi += go;
                    }
                }
            }
        }
        Op::Silu(x) => {
            if wants(inner, *x) {
                let xv = val(inner, *x).data.clone();
                let g = slot(grads, *x, gout.len());
                for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(&xv) {
                    let s = sigmoid(x);
                    *gi += go * (s + x * s * (1.0 - s));
                }
            }
        }
        Op::Sigmoid(x) => {
            if wants(inner, *x) {
                let yv = val(inner, id).data.clone();
                let g = slot(grads, *x, gout.len());
                for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(&yv) {
                    *gi += go * y * (1.0 - y);
                }
            }
        }
        Op::Softplus(x) => {
            if wants(inner, *x) {
                let xv = val(inner, *x).data.clone();
                let g = slot(grads, *x, gout.len());
                for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(&xv) {
                    *gi += go * sigmoid(x);
                }
            }
        }
        Op::Exp(x) => {
            if wants(inner, *x) {
                let yv = val(inner, id).data.clone();
                let g = slot(grads, *x, gout.len());
                for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(&yv) {
                    *gi += go * y;
                }
            }
        }
        Op::Abs(x) => {
            if wants(inner, *x) {
                let xv = val(inner, *x).data.clone();
                let g = slot(grads, *x, gout.len());
                for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(&xv) {
                    *gi += go * if x >= 0.0 { 1.0 } else { -1.0 };
                }
            }
        }
        Op::Square(x) => {
            if wants(inner, *x) {
                let xv = val(inner, *x).data.clone();
                let g = slot(grads, *x, gout.len());
                for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(&xv) {
                    *gi += go * 2.0 * x;
                }
            }
        }
        Op::SumAll(x) => {
            if wants(inner, *x) {
                let n = val(inner, *x).numel();
                let g = slot(grads, *x, n);
                for gi in g.iter_mut() {
                    *gi += gout[0];
                }
            }
        }
        Op::MeanAll(x) => {
            if wants(inner, *x) {
                let n = val(inner, *x).numel();
                let g = slot(grads, *x, n);
                let go = gout[0] / n as f64;
                for gi in g.iter_mut() {
                    *gi += go;
                }
            }
        }
        Op::SumRows(x) => {
            if wants(inner, *x) {
                let (r, c) = val(inner, *x).as_2d();
                let g = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += gout[i];
                    }
                }
            }
        }
        Op::MeanSpatial(x) => {
            if wants(inner, *x) {
                let sh = &val(inner, *x).shape;
                let (n, hw, c) = (sh[0], sh[1] * sh[2], sh[3]);
                let g = slot(grads, *x, n * hw * c);
                let inv = 1.0 / hw as f64;
                for bn in 0..n {
                    for p in 0..hw {
                        let base = (bn * hw + p) * c;
                        for ch in 0..c {
                            g[base + ch] += gout[bn * c + ch] * inv;
                        }
                    }
                }
            }
        }
        Op::L2NormRows(x) => {
            if wants(inner, *x) {
                let xv = val(inner, *x).data.clone();
                let (r, c) = val(inner, *x).as_2d();
                let rv = val(inner, id).data.clone();
                let g = slot(grads, *x, r * c);
                for i in 0..r {
                    let coef = gout[i] / rv[i];
                    for j in 0..c {
                        g[i * c + j] += coef * xv[i * c + j];
                    }
                }
            }
        }
        Op::L2NormalizeRows(x) => {
            if wants(inner, *x) {
                let xv = val(inner, *x).data.clone();
                let (r, c) = val(inner, *x).as_2d();
                let yv = val(inner, id).data.clone();
                let g = slot(grads, *x, r * c);
                for i in 0..r {
                    let row = i * c;
                    let norm = row_norm(&xv[row..row + c]);
                    let dot: f64 = (0..c).map(|j| gout[row + j] * yv[row + j]).sum();
                    for j in 0..c {
                        g[row + j] += (gout[row + j] - yv[row + j] * dot) / norm;
                    }
                }
            }
        }
        Op::CosineSimRows(a, b) => {
            let (r, c) = val(inner, *a).as_2d();
            let av = val(inner, *a).data.clone();
            let bv = val(inner, *b).data.clone();
            let cv = val(inner, id).data.clone();
            if wants(inner, *a) {
                let g = slot(grads, *a, r * c);
                for i in 0..r {
                    let row = i * c;
                    let ra = row_norm(&av[row..row + c]);
                    let rb = row_norm(&bv[row..row + c]);
                    for j in 0..c {
                        g[row + j] += gout[i] * (bv[row + j] / (ra * rb) - cv[i] * av[row + j] / (ra * ra));
                    }
                }
            }
            if wants(inner, *b) {
                let g = slot(grads, *b, r * c);
                for i in 0..r {
                    let row = i * c;
                    let ra = row_norm(&av[row..row + c]);
                    let rb = row_norm(&bv[row..row + c]);
                    for j in 0..c {
                        g[row + j] += gout[i] * (av[row + j] / (ra * rb) - cv[i] * bv[row + j] / (rb * rb));
                    }
                }
            }
        }
        Op::SoftmaxRows(x) => {
            if wants(inner, *x) {
                let (r, c) = val(inner, *x).as_2d();
                let yv = val(inner, id).data.clone();
                let g = slot(grads, *x, r * c);
                for i in 0..r {
                    let row = i * c;
                    let dot: f64 = (0..c).map(|j| gout[row + j] * yv[row + j]).sum();
                    for j in 0..c {
                        g[row + j] += yv[row + j] * (gout[row + j] - dot);
                    }
                }
            }
        }
        Op::LogSumExpRows(x) => {
            if wants(inner, *x) {
                let (r, c) = val(inner, *x).as_2d();
                let xv = val(inner, *x).data.clone();
                let lse = val(inner, id).data.clone();
                let g = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += gout[i] * (xv[i * c + j] - lse[i]).exp();
                    }
                }
            }
        }
        Op::CumsumExclRows(x) => {
            if wants(inner, *x) {
                let (r, c) = val(inner, *x).as_2d();
                let g = slot(grads, *x, r * c);
                for i in 0..r {
                    let mut run = 0.0;
                    for j in (0..c).rev() {
                        g[i * c + j] += run;
                        run += gout[i * c + j];
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let rows = val(inner, id).as_2d().0;
            let total = val(inner, id).as_2d().1;
            let widths: Vec<usize> = parts.iter().map(|&p| val(inner, p).as_2d().1).collect();
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let w = widths[pi];
                if wants(inner, p) {
                    let g = slot(grads, p, rows * w);
                    for i in 0..rows {
                        for j in 0..w {
                            g[i * w + j] += gout[i * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }
        Op::SliceCols { x, start, len } => {
            if wants(inner, *x) {
                let (r, c) = val(inner, *x).as_2d();
                let g = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..*len {
                        g[i * c + start + j] += gout[i * len + j];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if wants(inner, *x) {
                let g = slot(grads, *x, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
        }
        Op::Im2Col { x, geom } => {
            if wants(inner, *x) {
                let n = val(inner, *x).numel();
                let g = slot(grads, *x, n);
                kernels::col2im(gout, geom, g);
            }
        }
        Op::Upsample2x(x) => {
            if wants(inner, *x) {
                let sh = &val(inner, *x).shape;
                let (n, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
                let g = slot(grads, *x, n * h * w * c);
                let (h2, w2) = (2 * h, 2 * w);
                for bn in 0..n {
                    for y in 0..h2 {
                        for x2 in 0..w2 {
                            let src = ((bn * h2 + y) * w2 + x2) * c;
                            let dst = ((bn * h + y / 2) * w + x2 / 2) * c;
                            for ch in 0..c {
                                g[dst + ch] += gout[src + ch];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const NORM_EPS: f64 = 1e-12;

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|&x| x * x).sum::<f64>().sqrt().max(NORM_EPS)
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn needs_grad(&self) -> bool {
        self.needs_grad
    }

    pub fn value(&self) -> NdArray {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn scalar_value(&self) -> f64 {
        let inner = self.graph.inner.borrow();
        let v = &inner.nodes[self.id].value;
        assert_eq!(v.numel(), 1, "scalar_value on shape {:?}", v.shape);
        v.data[0]
    }

    fn same_graph(&self, other: &Tensor, op: &str) {
        assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "{}: tensors belong to different graphs",
            op
        );
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let v = {
            let inner = self.graph.inner.borrow();
            inner.nodes[self.id].value.map(&f)
        };
        self.graph.push(v, op, self.needs_grad)
    }

    fn binary_same_shape(&self, other: &Tensor, name: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Tensor {
        self.same_graph(other, name);
        assert_eq!(
            self.shape, other.shape,
            "{}: lhs shape {:?} does not match rhs shape {:?}",
            name, self.shape, other.shape
        );
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            NdArray {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        };
        self.graph.push(v, op, self.needs_grad || other.needs_grad)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary_same_shape(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary_same_shape(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary_same_shape(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    /// [N,M] + [1,M] broadcast over rows.
    pub fn add_row_bias(&self, bias: &Tensor) -> Tensor {
        self.same_graph(bias, "add_row_bias");
        let (_, cols) = two_d(&self.shape);
        assert_eq!(
            bias.numel(),
            cols,
            "add_row_bias: input shape {:?} needs bias of {} entries, got shape {:?}",
            self.shape,
            cols,
            bias.shape
        );
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[bias.id].value;
            let mut out = a.clone();
            for row in out.data.chunks_mut(cols) {
                for (o, &bv) in row.iter_mut().zip(&b.data) {
                    *o += bv;
                }
            }
            out
        };
        self.graph.push(v, Op::AddRowBias(self.id, bias.id), self.needs_grad || bias.needs_grad)
    }

    /// [N,D] scaled per row by s [N,1].
    pub fn scale_rows(&self, s: &Tensor) -> Tensor {
        self.same_graph(s, "scale_rows");
        let (rows, cols) = two_d(&self.shape);
        assert_eq!(
            s.numel(),
            rows,
            "scale_rows: input shape {:?} needs one scale per row ({}), got shape {:?}",
            self.shape,
            rows,
            s.shape
        );
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let sv = &inner.nodes[s.id].value;
            let mut out = a.clone();
            for (i, row) in out.data.chunks_mut(cols).enumerate() {
                for o in row.iter_mut() {
                    *o *= sv.data[i];
                }
            }
            out
        };
        self.graph.push(v, Op::ScaleRows(self.id, s.id), self.needs_grad || s.needs_grad)
    }

    /// [N,H,W,C] + per-sample channel bias [N,C] broadcast over H,W.
    pub fn add_spatial_bias(&self, bias: &Tensor) -> Tensor {
        self.same_graph(bias, "add_spatial_bias");
        assert_eq!(self.shape.len(), 4, "add_spatial_bias: input must be NHWC, got {:?}", self.shape);
        let (n, c) = (self.shape[0], self.shape[3]);
        assert_eq!(
            bias.shape,
            vec![n, c],
            "add_spatial_bias: input shape {:?} needs bias [N,C] = [{},{}], got {:?}",
            self.shape,
            n,
            c,
            bias.shape
        );
        let hw = self.shape[1] * self.shape[2];
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[bias.id].value;
            let mut out = a.clone();
            for bn in 0..n {
                for p in 0..hw {
                    let base = (bn * hw + p) * c;
                    for ch in 0..c {
                        out.data[base + ch] += b.data[bn * c + ch];
                    }
                }
            }
            out
        };
        self.graph.push(v, Op::AddSpatialBias(self.id, bias.id), self.needs_grad || bias.needs_grad)
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.same_graph(other, "matmul");
        let (m, k) = two_d(&self.shape);
        let (k2, n) = two_d(&other.shape);
        assert_eq!(
            k, k2,
            "matmul: lhs shape {:?} incompatible with rhs shape {:?}",
            self.shape, other.shape
        );
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            let mut out = vec![0.0; m * n];
            kernels::mm_nn(&a.data, &b.data, m, k, n, &mut out);
            NdArray::from_vec(&[m, n], out)
        };
        self.graph.push(v, Op::MatMul(self.id, other.id), self.needs_grad || other.needs_grad)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = two_d(&self.shape);
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.data[i * c + j];
                }
            }
            NdArray::from_vec(&[c, r], out)
        };
        self.graph.push(v, Op::Transpose(self.id), self.needs_grad)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn silu(&self) -> Tensor {
        self.unary(Op::Silu(self.id), |x| x * sigmoid(x))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(Op::Softplus(self.id), |x| x.max(0.0) + (-x.abs()).exp().ln_1p())
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn square(&self) -> Tensor {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn sum_all(&self) -> Tensor {
        let v = {
            let inner = self.graph.inner.borrow();
            NdArray::scalar(inner.nodes[self.id].value.data.iter().sum())
        };
        self.graph.push(v, Op::SumAll(self.id), self.needs_grad)
    }

    pub fn mean_all(&self) -> Tensor {
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            NdArray::scalar(a.data.iter().sum::<f64>() / a.numel() as f64)
        };
        self.graph.push(v, Op::MeanAll(self.id), self.needs_grad)
    }

    /// [N,D] -> [N,1] row sums.
    pub fn sum_rows(&self) -> Tensor {
        let (r, c) = two_d(&self.shape);
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let out: Vec<f64> = a.data.chunks(c).map(|row| row.iter().sum()).collect();
            NdArray::from_vec(&[r, 1], out)
        };
        self.graph.push(v, Op::SumRows(self.id), self.needs_grad)
    }

    /// [N,H,W,C] -> [N,C] spatial average.
    pub fn mean_spatial(&self) -> Tensor {
        assert_eq!(self.shape.len(), 4, "mean_spatial: input must be NHWC, got {:?}", self.shape);
        let (n, hw, c) = (self.shape[0], self.shape[1] * self.shape[2], self.shape[3]);
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let mut out = vec![0.0; n * c];
            for bn in 0..n {
                for p in 0..hw {
                    let base = (bn * hw + p) * c;
                    for ch in 0..c {
                        out[bn * c + ch] += a.data[base + ch];
                    }
                }
            }
            let inv = 1.0 / hw as f64;
            for o in out.iter_mut() {
                *o *= inv;
            }
            NdArray::from_vec(&[n, c], out)
        };
        self.graph.push(v, Op::MeanSpatial(self.id), self.needs_grad)
    }

    /// [N,D] -> [N,1] Euclidean row norms (clamped at 1e-12).
    pub fn l2_norm_rows(&self) -> Tensor {
        let (r, c) = two_d(&self.shape);
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let out: Vec<f64> = a.data.chunks(c).map(row_norm).collect();
            NdArray::from_vec(&[r, 1], out)
        };
        self.graph.push(v, Op::L2NormRows(self.id), self.needs_grad)
    }

    /// Rows rescaled to unit norm; zero rows map near zero (norm clamp).
    pub fn l2_normalize_rows(&self) -> Tensor {
        let (_, c) = two_d(&self.shape);
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let mut out = a.clone();
            for row in out.data.chunks_mut(c) {
                let norm = row_norm(row);
                for x in row.iter_mut() {
                    *x /= norm;
                }
            }
            out
        };
        self.graph.push(v, Op::L2NormalizeRows(self.id), self.needs_grad)
    }

    /// Row-wise cosine similarity of two [N,D] inputs -> [N,1].
    pub fn cosine_sim_rows(&self, other: &Tensor) -> Tensor {
        self.same_graph(other, "cosine_sim_rows");
        assert_eq!(
            self.shape, other.shape,
            "cosine_sim_rows: lhs shape {:?} does not match rhs shape {:?}",
            self.shape, other.shape
        );
        let (r, c) = two_d(&self.shape);
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            let mut out = vec![0.0; r];
            for i in 0..r {
                let ra = &a.data[i * c..(i + 1) * c];
                let rb = &b.data[i * c..(i + 1) * c];
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                out[i] = dot / (row_norm(ra) * row_norm(rb));
            }
            NdArray::from_vec(&[r, 1], out)
        };
        self.graph
            .push(v, Op::CosineSimRows(self.id, other.id), self.needs_grad || other.needs_grad)
    }

    pub fn softmax_rows(&self) -> Tensor {
        let (_, c) = two_d(&self.shape);
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let mut out = a.clone();
            for row in out.data.chunks_mut(c) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            out
        };
        self.graph.push(v, Op::SoftmaxRows(self.id), self.needs_grad)
    }

    /// [N,D] -> [N,1] log-sum-exp per row, max-shifted.
    pub fn logsumexp_rows(&self) -> Tensor {
        let (r, c) = two_d(&self.shape);
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let mut out = vec![0.0; r];
            for (i, row) in a.data.chunks(c).enumerate() {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
                out[i] = m + s.ln();
            }
            NdArray::from_vec(&[r, 1], out)
        };
        self.graph.push(v, Op::LogSumExpRows(self.id), self.needs_grad)
    }

    /// Exclusive prefix sums along each row: out[i,j] = sum of x[i,..j].
    pub fn cumsum_excl_rows(&self) -> Tensor {
        let (_, c) = two_d(&self.shape);
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let mut out = a.clone();
            for row in out.data.chunks_mut(c) {
                let mut run = 0.0;
                for x in row.iter_mut() {
                    let cur = *x;
                    *x = run;
                    run += cur;
                }
            }
            out
        };
        self.graph.push(v, Op::CumsumExclRows(self.id), self.needs_grad)
    }

    /// Column-wise concatenation of same-row-count matrices.
    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let g = parts[0].graph.clone();
        let rows = two_d(&parts[0].shape).0;
        for p in parts.iter().skip(1) {
            parts[0].same_graph(p, "concat_cols");
            assert_eq!(
                two_d(&p.shape).0,
                rows,
                "concat_cols: row mismatch, first shape {:?} vs {:?}",
                parts[0].shape,
                p.shape
            );
        }
        let widths: Vec<usize> = parts.iter().map(|p| two_d(&p.shape).1).collect();
        let total: usize = widths.iter().sum();
        let v = {
            let inner = g.inner.borrow();
            let mut out = vec![0.0; rows * total];
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let a = &inner.nodes[p.id].value;
                for i in 0..rows {
                    out[i * total + off..i * total + off + w].copy_from_slice(&a.data[i * w..(i + 1) * w]);
                }
                off += w;
            }
            NdArray::from_vec(&[rows, total], out)
        };
        let needs = parts.iter().any(|p| p.needs_grad);
        g.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), needs)
    }

    /// Contiguous column range of a [N,D] matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        let (r, c) = two_d(&self.shape);
        assert!(
            start + len <= c,
            "slice_cols: range {}..{} out of bounds for shape {:?}",
            start,
            start + len,
            self.shape
        );
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let mut out = vec![0.0; r * len];
            for i in 0..r {
                out[i * len..(i + 1) * len].copy_from_slice(&a.data[i * c + start..i * c + start + len]);
            }
            NdArray::from_vec(&[r, len], out)
        };
        self.graph.push(v, Op::SliceCols { x: self.id, start, len }, self.needs_grad)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            self.numel(),
            "reshape: {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        let v = {
            let inner = self.graph.inner.borrow();
            inner.nodes[self.id].value.clone().reshape(shape)
        };
        self.graph.push(v, Op::Reshape(self.id), self.needs_grad)
    }

    /// Convolution patch gather over NHWC input; pairs with a matmul against
    /// a [C_out, kh·kw·C_in] weight matrix.
    pub fn im2col(&self, kh: usize, kw: usize, stride: usize, pad: usize) -> Tensor {
        assert_eq!(self.shape.len(), 4, "im2col: input must be NHWC, got {:?}", self.shape);
        let geom = ConvGeom::new(self.shape[0], self.shape[1], self.shape[2], self.shape[3], kh, kw, stride, pad);
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let mut out = vec![0.0; geom.out_rows() * geom.patch_len()];
            kernels::im2col(&a.data, &geom, &mut out);
            NdArray::from_vec(&[geom.out_rows(), geom.patch_len()], out)
        };
        self.graph.push(v, Op::Im2Col { x: self.id, geom }, self.needs_grad)
    }

    /// Nearest-neighbour 2x upsample of NHWC input.
    pub fn upsample2x(&self) -> Tensor {
        assert_eq!(self.shape.len(), 4, "upsample2x: input must be NHWC, got {:?}", self.shape);
        let (n, h, w, c) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let v = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let mut out = vec![0.0; n * 4 * h * w * c];
            let (h2, w2) = (2 * h, 2 * w);
            for bn in 0..n {
                for y in 0..h2 {
                    for x in 0..w2 {
                        let src = ((bn * h + y / 2) * w + x / 2) * c;
                        let dst = ((bn * h2 + y) * w2 + x) * c;
                        out[dst..dst + c].copy_from_slice(&a.data[src..src + c]);
                    }
                }
            }
            NdArray::from_vec(&[n, h2, w2, c], out)
        };
        self.graph.push(v, Op::Upsample2x(self.id), self.needs_grad)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }
}

fn two_d(shape: &[usize]) -> (usize, usize) {
    assert!(!shape.is_empty(), "rank-0 tensor where a matrix is needed");
    (shape[0], shape[1..].iter().product())
}

impl std::ops::Add for &Tensor {
    type Output = Tensor;
    fn add(self, rhs: &Tensor) -> Tensor {
        Tensor::add(self, rhs)
    }
}

impl std::ops::Sub for &Tensor {
    type Output = Tensor;
    fn sub(self, rhs: &Tensor) -> Tensor {
        Tensor::sub(self, rhs)
    }
}

impl std::ops::Mul for &Tensor {
    type Output = Tensor;
    fn mul(self, rhs: &Tensor) -> Tensor {
        Tensor::mul(self, rhs)
    }
}

/// 2-D convolution over NHWC input with weights [C_out, kh·kw·C_in] and bias
/// [1, C_out]; composed from im2col, matmul, transpose and add_row_bias so
/// every piece has its own backward rule.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize) -> Tensor {
    assert_eq!(x.shape().len(), 4, "conv2d: input must be NHWC, got {:?}", x.shape());
    let (n, h, w, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let c_out = weight.shape()[0];
    assert_eq!(
        weight.shape()[1..].iter().product::<usize>(),
        kh * kw * c_in,
        "conv2d: weight shape {:?} does not match kernel {}x{} over {} channels",
        weight.shape(),
        kh,
        kw,
        c_in
    );
    let geom = ConvGeom::new(n, h, w, c_in, kh, kw, stride, pad);
    let cols = x.im2col(kh, kw, stride, pad);
    let out = cols.matmul(&weight.transpose()).add_row_bias(bias);
    out.reshape(&[n, geom.h_out, geom.w_out, c_out])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let g = Graph::new();
        let a = g.constant_owned(NdArray::from_vec(&[3, 3], vec![2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 1.0, 7.0]));
        let eye = g.constant_owned(NdArray::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let out = eye.matmul(&a);
        assert_eq!(out.value().data, a.value().data);
    }

    #[test]
    fn conv_1x1_scales_pixels() {
        let g = Graph::new();
        let x = g.constant_owned(NdArray::from_vec(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let w = g.constant_owned(NdArray::from_vec(&[1, 1], vec![2.5]));
        let b = g.constant_owned(NdArray::from_vec(&[1, 1], vec![0.0]));
        let y = conv2d(&x, &w, &b, 1, 1, 1, 0);
        assert_eq!(y.value().data, vec![2.5, 5.0, 7.5, 10.0]);
    }

    #[test]
    fn conv_3x3_matches_sliding_window_oracle() {
        // 4x4 input, 3x3 kernel, stride 1, no padding -> 2x2, against a
        // direct nested-loop evaluation.
        let g = Graph::new();
        let xv: Vec<f64> = (0..16).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let wv: Vec<f64> = (0..9).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let x = g.constant_owned(NdArray::from_vec(&[1, 4, 4, 1], xv.clone()));
        let w = g.constant_owned(NdArray::from_vec(&[1, 9], wv.clone()));
        let b = g.constant_owned(NdArray::from_vec(&[1, 1], vec![0.25]));
        let y = conv2d(&x, &w, &b, 3, 3, 1, 0);
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        for oy in 0..2 {
            for ox in 0..2 {
                let mut want = 0.25;
                for ky in 0..3 {
                    for kx in 0..3 {
                        want += xv[(oy + ky) * 4 + (ox + kx)] * wv[ky * 3 + kx];
                    }
                }
                let got = y.value().data[oy * 2 + ox];
                assert!((got - want).abs() < 1e-12, "pixel ({},{}) {} vs {}", oy, ox, got, want);
            }
        }
    }

    #[test]
    fn backward_square_and_product() {
        let g = Graph::new();
        let mut ps = ParamSet::new();
        ps.insert("x", NdArray::scalar(3.0));
        ps.insert("y", NdArray::scalar(5.0));
        let x = g.param("x", ps.get("x"));
        let loss = x.square().sum_all();
        let grads = g.backward(&loss);
        assert_eq!(grads.get("x").unwrap().data[0], 6.0);

        let g2 = Graph::new();
        let x = g2.param("x", &NdArray::scalar(2.0));
        let y = g2.param("y", ps.get("y"));
        let _ = ps;
        let loss = x.mul(&y).sum_all();
        let grads = g2.backward(&loss);
        let gx = grads.get("x").unwrap().data[0];
        let gy = grads.get("y").unwrap().data[0];
        assert_eq!((gx, gy), (5.0, 2.0));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let g = Graph::new();
        let x = g.param("x", &NdArray::scalar(2.0));
        let loss = x.square().sum_all();
        let mut grads = Gradients::new();
        g.backward_into(&loss, &mut grads);
        g.backward_into(&loss, &mut grads);
        assert_eq!(grads.get("x").unwrap().data[0], 8.0);
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn non_scalar_loss_rejected() {
        let g = Graph::new();
        let x = g.param("x", &NdArray::zeros(&[2, 2]));
        g.backward(&x);
    }

    #[test]
    #[should_panic(expected = "matmul: lhs shape")]
    fn matmul_shape_mismatch_names_op() {
        let g = Graph::new();
        let a = g.constant_owned(NdArray::zeros(&[2, 3]));
        let b = g.constant_owned(NdArray::zeros(&[4, 2]));
        a.matmul(&b);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::new();
        let x = g.constant_owned(NdArray::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]));
        let y = x.softmax_rows().value();
        for row in y.data.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cumsum_exclusive_forward() {
        let g = Graph::new();
        let x = g.constant_owned(NdArray::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.cumsum_excl_rows().value().data, vec![0.0, 1.0, 3.0, 6.0]);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let g = Graph::new();
        let a = g.constant_owned(NdArray::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant_owned(NdArray::from_vec(&[2, 1], vec![9.0, 8.0]));
        let cat = Tensor::concat_cols(&[&a, &b]);
        assert_eq!(cat.value().data, vec![1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        assert_eq!(cat.slice_cols(0, 2).value().data, a.value().data);
        assert_eq!(cat.slice_cols(2, 1).value().data, b.value().data);
    }

    #[test]
    fn upsample_nearest_values() {
        let g = Graph::new();
        let x = g.constant_owned(NdArray::from_vec(&[1, 1, 2, 1], vec![3.0, 7.0]));
        let y = x.upsample2x();
        assert_eq!(y.shape(), &[1, 2, 4, 1]);
        assert_eq!(y.value().data, vec![3.0, 3.0, 7.0, 7.0, 3.0, 3.0, 7.0, 7.0]);
    }

    #[test]
    fn l2_normalize_unit_norm() {
        let g = Graph::new();
        let x = g.constant_owned(NdArray::from_vec(&[2, 3], vec![3.0, 4.0, 0.0, -1.0, 2.0, 2.0]));
        let y = x.l2_normalize_rows().value();
        for row in y.data.chunks(3) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_weights_get_no_grad_but_pass_grad_through() {
        let g = Graph::new();
        let x = g.param("x", &NdArray::from_vec(&[1, 2], vec![1.0, 2.0]));
        let w_frozen = g.constant_owned(NdArray::from_vec(&[2, 2], vec![1.0, 0.5, -0.5, 2.0]));
        let loss = x.matmul(&w_frozen).square().sum_all();
        let grads = g.backward(&loss);
        assert!(grads.get("x").is_some());
        let gx = grads.get("x").unwrap();
        assert!(gx.data.iter().any(|&v| v != 0.0));
        assert_eq!(grads.iter().count(), 1);
    }

    #[test]
    fn forward_and_gradients_bit_identical_across_runs() {
        let run = || {
            let g = Graph::new();
            let x = g.param("x", &NdArray::from_vec(&[2, 3], vec![0.3, -0.8, 1.2, 0.05, 2.0, -1.5]));
            let w = g.param("w", &NdArray::from_vec(&[3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]));
            let loss = x.matmul(&w).silu().square().mean_all();
            let grads = g.backward(&loss);
            (loss.scalar_value(), grads.get("w").unwrap().data.clone())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert!(l1.to_bits() == l2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
