use std::cell::RefCell;
use std::rc::Rc;

use super::array::DiffArray;
use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>),
    MeanAxis(usize, usize),
    SumAll(usize),
    SqFrobenius(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    LayerNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    GatherRows(usize, Rc<[usize]>),
    AdaptiveAvgPool { input: usize, kh: usize, kw: usize },
    Bce(usize, Rc<[f64]>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// A recorded computation. Values are computed eagerly as ops are added;
/// [`Graph::backward`] replays the record in reverse.
///
/// A graph is confined to the thread that builds it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
    /// Set when the loss does not depend on anything that requires a gradient.
    pub detached: bool,
}

impl Gradients {
    /// Gradient with respect to `var`, if it was reached.
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Adds every reached parameter gradient into `store`. Parameters the
    /// loss did not reach get an all-zero gradient.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(node, pid) in &self.params {
            let p = store.get_mut(pid);
            match &self.grads[node] {
                Some(g) => p.accumulate_grad(g)?,
                None => {
                    let z = vec![0.0; p.len()];
                    p.accumulate_grad(&z)?;
                }
            }
        }
        Ok(())
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

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            param: None,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    /// Records a leaf holding a copy of `a`. Gradients are tracked iff `a.requires_grad()`.
    pub fn input(&self, a: &DiffArray) -> Var<'_> {
        self.push(a.shape().to_vec(), a.values().to_vec(), Op::Leaf, a.requires_grad())
    }

    pub fn constant(&self, shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Var<'_>> {
        let a = DiffArray::new(shape, values)?;
        Ok(self.input(&a))
    }

    /// Records a parameter leaf; its gradient is routed back by [`Gradients::accumulate_into`].
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let p = store.get(id);
        let v = self.push(p.shape().to_vec(), p.values().to_vec(), Op::Leaf, p.requires_grad());
        self.nodes.borrow_mut()[v.id].param = Some(id);
        v
    }

    /// Reverse-mode pass from a rank-0 loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.shape.is_empty() {
            return Err(Error::rank("backward", 0, &root.shape));
        }
        let params: Vec<(usize, ParamId)> = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if !root.needs_grad {
            return Ok(Gradients {
                grads,
                params,
                detached: true,
            });
        }
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            params,
            detached: false,
        })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            acc(grads, nodes, a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc(grads, nodes, b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        &Op::Sub(a, b) => {
            acc(grads, nodes, a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc(grads, nodes, b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            acc(grads, nodes, a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * vb[i];
                }
            });
            acc(grads, nodes, b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * va[i];
                }
            });
        }
        &Op::Scale(a, c) => acc(grads, nodes, a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
        &Op::AddBias(a, b) => {
            acc(grads, nodes, a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            let n = nodes[b].value.len();
            acc(grads, nodes, b, |d| {
                for row in g.chunks_exact(n) {
                    d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            });
        }
        &Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            acc(grads, nodes, a, |d| kernels::gemm_nt_acc(g, vb, d, m, n, k));
            acc(grads, nodes, b, |d| kernels::gemm_tn_acc(va, g, d, m, k, n));
        }
        &Op::BatchMatMul(a, b) => {
            let (bs, m, k) = (nodes[a].shape[0], nodes[a].shape[1], nodes[a].shape[2]);
            let n = nodes[b].shape[2];
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            acc(grads, nodes, a, |d| {
                for t in 0..bs {
                    kernels::gemm_nt_acc(
                        &g[t * m * n..(t + 1) * m * n],
                        &vb[t * k * n..(t + 1) * k * n],
                        &mut d[t * m * k..(t + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            });
            acc(grads, nodes, b, |d| {
                for t in 0..bs {
                    kernels::gemm_tn_acc(
                        &va[t * m * k..(t + 1) * m * k],
                        &g[t * m * n..(t + 1) * m * n],
                        &mut d[t * k * n..(t + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            });
        }
        Op::Permute(a, perm) => {
            let idx = kernels::permute_index(&nodes[*a].shape, perm);
            acc(grads, nodes, *a, |d| {
                for (o, &src) in idx.iter().enumerate() {
                    d[src] += g[o];
                }
            });
        }
        &Op::Reshape(a) => acc(grads, nodes, a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
        Op::Concat(parts) => {
            let last = *node.shape.last().unwrap();
            let rows = g.len() / last;
            let mut off = 0;
            for &p in parts {
                let w = *nodes[p].shape.last().unwrap();
                acc(grads, nodes, p, |d| {
                    for r in 0..rows {
                        for c in 0..w {
                            d[r * w + c] += g[r * last + off + c];
                        }
                    }
                });
                off += w;
            }
        }
        &Op::MeanAxis(a, axis) => {
            let shape = &nodes[a].shape;
            let outer: usize = shape[..axis].iter().product();
            let n = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let inv = 1.0 / n as f64;
            acc(grads, nodes, a, |d| {
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            d[(o * n + j) * inner + i] += g[o * inner + i] * inv;
                        }
                    }
                }
            });
        }
        &Op::SumAll(a) => acc(grads, nodes, a, |d| d.iter_mut().for_each(|x| *x += g[0])),
        &Op::SqFrobenius(a) => {
            let va = &nodes[a].value;
            acc(grads, nodes, a, |d| {
                d.iter_mut().zip(va).for_each(|(x, v)| *x += 2.0 * v * g[0])
            });
        }
        &Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let batch = nodes[input].shape[0];
            let c_out = nodes[weight].shape[0];
            let (rows, np) = (geom.col_rows(), geom.col_cols());
            let img_len = geom.c_in * geom.h * geom.w;
            let vx = &nodes[input].value;
            let vw = &nodes[weight].value;
            let mut cols = vec![0.0; rows * np];
            if nodes[weight].needs_grad {
                let mut dw = vec![0.0; vw.len()];
                for b in 0..batch {
                    geom.im2col(&vx[b * img_len..(b + 1) * img_len], &mut cols);
                    kernels::gemm_nt_acc(&g[b * c_out * np..(b + 1) * c_out * np], &cols, &mut dw, c_out, np, rows);
                }
                acc(grads, nodes, weight, |d| d.iter_mut().zip(&dw).for_each(|(x, y)| *x += y));
            }
            if let Some(bias) = bias {
                acc(grads, nodes, bias, |d| {
                    for b in 0..batch {
                        for co in 0..c_out {
                            let s: f64 = g[(b * c_out + co) * np..(b * c_out + co + 1) * np].iter().sum();
                            d[co] += s;
                        }
                    }
                });
            }
            acc(grads, nodes, input, |d| {
                for b in 0..batch {
                    cols.iter_mut().for_each(|x| *x = 0.0);
                    kernels::gemm_tn_acc(vw, &g[b * c_out * np..(b + 1) * c_out * np], &mut cols, c_out, rows, np);
                    geom.col2im(&cols, &mut d[b * img_len..(b + 1) * img_len]);
                }
            });
        }
        &Op::Relu(a) => {
            let va = &nodes[a].value;
            acc(grads, nodes, a, |d| {
                for i in 0..d.len() {
                    if va[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            });
        }
        &Op::Sigmoid(a) => {
            let y = &node.value;
            acc(grads, nodes, a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        &Op::Softmax(a) => {
            let y = &node.value;
            let n = *node.shape.last().unwrap();
            acc(grads, nodes, a, |d| {
                for ((dr, yr), gr) in d.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        dr[i] += yr[i] * (gr[i] - dot);
                    }
                }
            });
        }
        &Op::LayerNorm { input, gamma, beta, eps } => {
            let x = &nodes[input].value;
            let gm = &nodes[gamma].value;
            let n = gm.len();
            let rows = x.len() / n;
            let mut dx = vec![0.0; x.len()];
            let (mut dgamma, mut dbeta) = (vec![0.0; n], vec![0.0; n]);
            let mut xhat = vec![0.0; n];
            let mut dxhat = vec![0.0; n];
            for r in 0..rows {
                let (xr, gr) = (&x[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                let inv = layer_norm_row(xr, eps, &mut xhat);
                for i in 0..n {
                    dxhat[i] = gr[i] * gm[i];
                    dgamma[i] += gr[i] * xhat[i];
                    dbeta[i] += gr[i];
                }
                let s1: f64 = dxhat.iter().sum();
                let s2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    dx[r * n + i] = inv / n as f64 * (n as f64 * dxhat[i] - s1 - xhat[i] * s2);
                }
            }
            acc(grads, nodes, input, |d| d.iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
            acc(grads, nodes, gamma, |d| d.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b));
            acc(grads, nodes, beta, |d| d.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b));
        }
        Op::GatherRows(a, idx) => {
            let c = nodes[*a].shape[1];
            acc(grads, nodes, *a, |d| {
                for (o, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[src * c + j] += g[o * c + j];
                    }
                }
            });
        }
        &Op::AdaptiveAvgPool { input, kh, kw } => {
            let s = &nodes[input].shape;
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let planes = nodes[input].value.len() / (h * w);
            acc(grads, nodes, input, |d| {
                for p in 0..planes {
                    for i in 0..kh {
                        let (r0, r1) = kernels::adaptive_bounds(i, kh, h);
                        for j in 0..kw {
                            let (c0, c1) = kernels::adaptive_bounds(j, kw, w);
                            let gv = g[(p * kh + i) * kw + j] / ((r1 - r0) * (c1 - c0)) as f64;
                            for r in r0..r1 {
                                for c in c0..c1 {
                                    d[(p * h + r) * w + c] += gv;
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::Bce(p, targets) => {
            let vp = &nodes[*p].value;
            let n = vp.len() as f64;
            acc(grads, nodes, *p, |d| {
                for i in 0..d.len() {
                    let q = vp[i].clamp(BCE_EPS, 1.0 - BCE_EPS);
                    let y = targets[i];
                    // d/dq of −[y ln q + (1−y) ln(1−q)], zero where the clamp is active
                    if vp[i] > BCE_EPS && vp[i] < 1.0 - BCE_EPS {
                        d[i] += g[0] * (q - y) / (q * (1.0 - q)) / n;
                    }
                }
            });
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.graph.nodes.borrow()[self.id].shape.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    /// First element; the value of a rank-0 result.
    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value[0]
    }

    pub fn to_array(&self) -> DiffArray {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        let mut a = DiffArray::zeros(n.shape.clone());
        a.values_mut().copy_from_slice(&n.value);
        a
    }

    fn with_nodes<T>(&self, f: impl FnOnce(&[Node]) -> T) -> T {
        f(&self.graph.nodes.borrow())
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.graph.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        let (shape, value) = self.with_nodes(|n| {
            let (a, b) = (&n[self.id], &n[other.id]);
            if a.shape != b.shape {
                return Err(Error::dim(name, &a.shape, &b.shape));
            }
            Ok((a.shape.clone(), a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect()))
        })?;
        let ng = self.needs(&[self.id, other.id]);
        Ok(self.graph.push(shape, value, op(self.id, other.id), ng))
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let (shape, value) = self.with_nodes(|n| {
            let a = &n[self.id];
            (a.shape.clone(), a.value.iter().map(|&x| f(x)).collect::<Vec<_>>())
        });
        let ng = self.needs(&[self.id]);
        self.graph.push(shape, value, op, ng)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// Adds a length-`n` bias to every row of an array whose last extent is `n`.
    pub fn add_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        let (shape, value) = self.with_nodes(|n| {
            let (a, b) = (&n[self.id], &n[bias.id]);
            let last = a.shape.last().copied().unwrap_or(0);
            if b.shape.len() != 1 || b.shape[0] != last {
                return Err(Error::dim("add_bias", &a.shape, &b.shape));
            }
            let mut v = a.value.clone();
            for row in v.chunks_exact_mut(last) {
                row.iter_mut().zip(&b.value).for_each(|(x, y)| *x += y);
            }
            Ok((a.shape.clone(), v))
        })?;
        let ng = self.needs(&[self.id, bias.id]);
        Ok(self.graph.push(shape, value, Op::AddBias(self.id, bias.id), ng))
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (shape, value) = self.with_nodes(|n| {
            let (a, b) = (&n[self.id], &n[other.id]);
            if a.shape.len() != 2 {
                return Err(Error::rank("matmul", 2, &a.shape));
            }
            if b.shape.len() != 2 {
                return Err(Error::rank("matmul", 2, &b.shape));
            }
            if a.shape[1] != b.shape[0] {
                return Err(Error::dim("matmul", &a.shape, &b.shape));
            }
            let (m, k, p) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut c = vec![0.0; m * p];
            kernels::gemm_acc(&a.value, &b.value, &mut c, m, k, p);
            Ok((vec![m, p], c))
        })?;
        let ng = self.needs(&[self.id, other.id]);
        Ok(self.graph.push(shape, value, Op::MatMul(self.id, other.id), ng))
    }

    /// Batched product of rank-3 arrays: `[g,m,k] · [g,k,n] → [g,m,n]`.
    pub fn bmm(self, other: Var<'g>) -> Result<Var<'g>> {
        let (shape, value) = self.with_nodes(|n| {
            let (a, b) = (&n[self.id], &n[other.id]);
            if a.shape.len() != 3 {
                return Err(Error::rank("bmm", 3, &a.shape));
            }
            if b.shape.len() != 3 {
                return Err(Error::rank("bmm", 3, &b.shape));
            }
            if a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
                return Err(Error::dim("bmm", &a.shape, &b.shape));
            }
            let (bs, m, k, p) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
            let mut c = vec![0.0; bs * m * p];
            for t in 0..bs {
                kernels::gemm_acc(
                    &a.value[t * m * k..(t + 1) * m * k],
                    &b.value[t * k * p..(t + 1) * k * p],
                    &mut c[t * m * p..(t + 1) * m * p],
                    m,
                    k,
                    p,
                );
            }
            Ok((vec![bs, m, p], c))
        })?;
        let ng = self.needs(&[self.id, other.id]);
        Ok(self.graph.push(shape, value, Op::BatchMatMul(self.id, other.id), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'g>> {
        let (shape, value) = self.with_nodes(|n| {
            let a = &n[self.id];
            let mut seen = vec![false; a.shape.len()];
            if perm.len() != a.shape.len() || perm.iter().any(|&p| p >= a.shape.len() || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::dim("permute", &a.shape, perm));
            }
            let idx = kernels::permute_index(&a.shape, perm);
            let shape: Vec<usize> = perm.iter().map(|&p| a.shape[p]).collect();
            Ok((shape, idx.iter().map(|&i| a.value[i]).collect::<Vec<_>>()))
        })?;
        let ng = self.needs(&[self.id]);
        Ok(self.graph.push(shape, value, Op::Permute(self.id, perm.to_vec()), ng))
    }

    /// Swaps the two axes of a rank-2 array.
    pub fn transpose(self) -> Result<Var<'g>> {
        if self.rank() != 2 {
            return Err(Error::rank("transpose", 2, &self.shape()));
        }
        self.permute(&[1, 0])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.with_nodes(|n| {
            let a = &n[self.id];
            if shape.iter().product::<usize>() != a.value.len() || shape.contains(&0) {
                return Err(Error::dim("reshape", &a.shape, shape));
            }
            Ok(a.value.clone())
        })?;
        let ng = self.needs(&[self.id]);
        Ok(self.graph.push(shape.to_vec(), value, Op::Reshape(self.id), ng))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_last(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::Input("concat of zero arrays".into()))?;
        let graph = first.graph;
        let (shape, value) = {
            let n = graph.nodes.borrow();
            let lead = &n[first.id].shape[..n[first.id].shape.len().saturating_sub(1)];
            let mut total = 0;
            for p in parts {
                let s = &n[p.id].shape;
                if s.is_empty() || &s[..s.len() - 1] != lead {
                    return Err(Error::dim("concat_last", &n[first.id].shape, s));
                }
                total += s[s.len() - 1];
            }
            let rows: usize = lead.iter().product();
            let mut v = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    let w = *n[p.id].shape.last().unwrap();
                    v.extend_from_slice(&n[p.id].value[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            (shape, v)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let ng = first.needs(&ids);
        Ok(graph.push(shape, value, Op::Concat(ids), ng))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        let (shape, value) = self.with_nodes(|n| {
            let a = &n[self.id];
            if axis >= a.shape.len() {
                return Err(Error::rank("mean_axis", axis + 1, &a.shape));
            }
            let outer: usize = a.shape[..axis].iter().product();
            let len = a.shape[axis];
            let inner: usize = a.shape[axis + 1..].iter().product();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += a.value[(o * len + j) * inner + i];
                    }
                }
            }
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|x| *x *= inv);
            let mut shape = a.shape.clone();
            shape.remove(axis);
            Ok((shape, out))
        })?;
        let ng = self.needs(&[self.id]);
        Ok(self.graph.push(shape, value, Op::MeanAxis(self.id, axis), ng))
    }

    pub fn sum_all(self) -> Var<'g> {
        let s: f64 = self.with_nodes(|n| n[self.id].value.iter().sum());
        let ng = self.needs(&[self.id]);
        self.graph.push(Vec::new(), vec![s], Op::SumAll(self.id), ng)
    }

    pub fn mean_all(self) -> Var<'g> {
        let n = self.with_nodes(|n| n[self.id].value.len());
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sum of squared entries.
    pub fn sq_frobenius(self) -> Var<'g> {
        let s: f64 = self.with_nodes(|n| n[self.id].value.iter().map(|v| v * v).sum());
        let ng = self.needs(&[self.id]);
        self.graph.push(Vec::new(), vec![s], Op::SqFrobenius(self.id), ng)
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax_last(self) -> Result<Var<'g>> {
        let (shape, value) = self.with_nodes(|n| {
            let a = &n[self.id];
            if a.shape.is_empty() {
                return Err(Error::rank("softmax", 1, &a.shape));
            }
            if a.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("softmax of non-finite input".into()));
            }
            let w = *a.shape.last().unwrap();
            let mut v = a.value.clone();
            for row in v.chunks_exact_mut(w) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                row.iter_mut().for_each(|x| *x /= s);
            }
            Ok((a.shape.clone(), v))
        })?;
        let ng = self.needs(&[self.id]);
        Ok(self.graph.push(shape, value, Op::Softmax(self.id), ng))
    }

    /// Normalises every row over the last axis to zero mean and unit
    /// variance, then applies `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (shape, value) = self.with_nodes(|n| {
            let (a, gm, bt) = (&n[self.id], &n[gamma.id], &n[beta.id]);
            let last = a.shape.last().copied().unwrap_or(0);
            if gm.shape != [last] || bt.shape != [last] {
                return Err(Error::dim("layer_norm", &a.shape, &gm.shape));
            }
            let mut v = vec![0.0; a.value.len()];
            let mut xhat = vec![0.0; last];
            for (xr, yr) in a.value.chunks_exact(last).zip(v.chunks_exact_mut(last)) {
                layer_norm_row(xr, eps, &mut xhat);
                for i in 0..last {
                    yr[i] = gm.value[i] * xhat[i] + bt.value[i];
                }
            }
            Ok((a.shape.clone(), v))
        })?;
        let ng = self.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.graph.push(
            shape,
            value,
            Op::LayerNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
            ng,
        ))
    }

    /// Row-wise softmax of a rank-2 array.
    pub fn softmax_rows(self) -> Result<Var<'g>> {
        if self.rank() != 2 {
            return Err(Error::rank("softmax_rows", 2, &self.shape()));
        }
        self.softmax_last()
    }

    /// 2-D cross-correlation of `[B,C_in,H,W]` with `[C_out,C_in,k,k]` weights.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let (shape, value, geom) = self.with_nodes(|n| {
            let (x, w) = (&n[self.id], &n[weight.id]);
            if x.shape.len() != 4 {
                return Err(Error::rank("conv2d", 4, &x.shape));
            }
            if w.shape.len() != 4 || w.shape[1] != x.shape[1] || w.shape[2] != w.shape[3] {
                return Err(Error::dim("conv2d", &x.shape, &w.shape));
            }
            if let Some(b) = bias {
                if n[b.id].shape != [w.shape[0]] {
                    return Err(Error::dim("conv2d bias", &w.shape, &n[b.id].shape));
                }
            }
            let (batch, c_in, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let c_out = w.shape[0];
            let geom = ConvGeom::new(c_in, h, wd, w.shape[2], stride, pad)
                .ok_or_else(|| Error::dim("conv2d", &x.shape, &w.shape))?;
            let (rows, np) = (geom.col_rows(), geom.col_cols());
            let img_len = c_in * h * wd;
            let mut cols = vec![0.0; rows * np];
            let mut out = vec![0.0; batch * c_out * np];
            for b in 0..batch {
                geom.im2col(&x.value[b * img_len..(b + 1) * img_len], &mut cols);
                let dst = &mut out[b * c_out * np..(b + 1) * c_out * np];
                if let Some(bv) = bias {
                    for co in 0..c_out {
                        dst[co * np..(co + 1) * np].iter_mut().for_each(|v| *v = n[bv.id].value[co]);
                    }
                }
                kernels::gemm_acc(&w.value, &cols, dst, c_out, rows, np);
            }
            Ok((vec![batch, c_out, geom.h_out, geom.w_out], out, geom))
        })?;
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let ng = self.needs(&ids);
        Ok(self.graph.push(
            shape,
            value,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            ng,
        ))
    }

    /// Selects rows of a rank-2 array: output row `i` is input row `index[i]`.
    pub fn gather_rows(self, index: Rc<[usize]>) -> Result<Var<'g>> {
        let (shape, value) = self.with_nodes(|n| {
            let a = &n[self.id];
            if a.shape.len() != 2 {
                return Err(Error::rank("gather_rows", 2, &a.shape));
            }
            let (r, c) = (a.shape[0], a.shape[1]);
            if let Some(&bad) = index.iter().find(|&&i| i >= r) {
                return Err(Error::dim("gather_rows", &a.shape, &[bad]));
            }
            let mut v = Vec::with_capacity(index.len() * c);
            for &i in index.iter() {
                v.extend_from_slice(&a.value[i * c..(i + 1) * c]);
            }
            Ok((vec![index.len(), c], v))
        })?;
        let ng = self.needs(&[self.id]);
        Ok(self.graph.push(shape, value, Op::GatherRows(self.id, index), ng))
    }

    /// Adaptive average pooling over the trailing two axes into a `kh×kw` grid.
    pub fn adaptive_avg_pool(self, kh: usize, kw: usize) -> Result<Var<'g>> {
        let (shape, value) = self.with_nodes(|n| {
            let a = &n[self.id];
            if a.shape.len() < 2 {
                return Err(Error::rank("adaptive_avg_pool", 2, &a.shape));
            }
            let (h, w) = (a.shape[a.shape.len() - 2], a.shape[a.shape.len() - 1]);
            if kh == 0 || kw == 0 || kh > h || kw > w {
                return Err(Error::dim("adaptive_avg_pool", &a.shape, &[kh, kw]));
            }
            let planes = a.value.len() / (h * w);
            let mut out = vec![0.0; planes * kh * kw];
            for p in 0..planes {
                let plane = &a.value[p * h * w..(p + 1) * h * w];
                for i in 0..kh {
                    let (r0, r1) = kernels::adaptive_bounds(i, kh, h);
                    for j in 0..kw {
                        let (c0, c1) = kernels::adaptive_bounds(j, kw, w);
                        let mut s = 0.0;
                        for r in r0..r1 {
                            for c in c0..c1 {
                                s += plane[r * w + c];
                            }
                        }
                        out[(p * kh + i) * kw + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
                    }
                }
            }
            let mut shape = a.shape[..a.shape.len() - 2].to_vec();
            shape.extend([kh, kw]);
            Ok((shape, out))
        })?;
        let ng = self.needs(&[self.id]);
        Ok(self.graph.push(shape, value, Op::AdaptiveAvgPool { input: self.id, kh, kw }, ng))
    }

    /// Mean binary cross-entropy of probabilities against {0,1} targets,
    /// with probabilities clamped to `[BCE_EPS, 1 − BCE_EPS]`.
    pub fn bce(self, targets: &[f64]) -> Result<Var<'g>> {
        let value = self.with_nodes(|n| {
            let a = &n[self.id];
            if a.value.len() != targets.len() {
                return Err(Error::dim("bce", &a.shape, &[targets.len()]));
            }
            if let Some(&bad) = targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
                return Err(Error::Label(format!("target {bad} is not 0 or 1")));
            }
            let mut s = 0.0;
            for (&p, &y) in a.value.iter().zip(targets) {
                let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                s -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
            }
            Ok(s / targets.len() as f64)
        })?;
        let ng = self.needs(&[self.id]);
        Ok(self.graph.push(Vec::new(), vec![value], Op::Bce(self.id, targets.into()), ng))
    }
}

/// Writes the normalised row into `xhat` and returns `1/sqrt(var + eps)`.
fn layer_norm_row(x: &[f64], eps: f64, xhat: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (h, v) in xhat.iter_mut().zip(x) {
        *h = (v - mean) * inv;
    }
    inv
}

/// Logistic function, kept strictly inside (0, 1).
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}
