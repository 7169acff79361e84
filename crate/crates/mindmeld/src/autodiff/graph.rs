//! The computation tape.
//!
//! Nodes are appended in execution order, so the vector itself is the
//! topological order and the backward pass is a single reverse sweep.
//! Values are computed eagerly when an op is recorded; gradients are
//! allocated lazily during [`Graph::backward`] and accumulate additively
//! when a node feeds several consumers.

use super::{shape_mismatch, AutodiffError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// Broadcast-add a `[1, c]` bias over the rows of a `[r, c]` input.
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    RowSums(NodeId),
    SumAll(NodeId),
}

struct Node {
    op: Op,
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
}

/// Reverse-mode tape over rank-1/2 tensors.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, op: Op, value: Vec<f64>, rows: usize, cols: usize, needs_grad: bool) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            op,
            value,
            rows,
            cols,
            needs_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a tensor as a leaf; gradients flow back iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let (r, c) = t.dims2();
        self.push(Op::Leaf, t.data().to_vec(), r, c, t.requires_grad)
    }

    /// Insert raw values as a non-differentiable constant row vector.
    pub fn constant(&mut self, data: &[f64]) -> NodeId {
        self.push(Op::Leaf, data.to_vec(), 1, data.len(), false)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId, AutodiffError> {
        if data.len() != rows * cols {
            return Err(AutodiffError::InvalidTensor {
                shape: vec![rows, cols],
                len: data.len(),
            });
        }
        Ok(self.push(Op::Leaf, data, rows, cols, false))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Leaf, vec![0.0; rows * cols], rows, cols, false)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Gradient of the last backward target w.r.t. this node, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Copy a node's value out as a tensor (`[c]` for single rows, else `[r, c]`).
    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        let shape = if n.rows == 1 {
            vec![n.cols]
        } else {
            vec![n.rows, n.cols]
        };
        Tensor::new(shape, n.value.clone()).expect("node value matches node dims")
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if ac != br {
            return Err(shape_mismatch(
                "matmul",
                format!("[{ar}x{ac}] * [{br}x{bc}]"),
            ));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; ar * bc];
        for i in 0..ar {
            let arow = &av[i * ac..(i + 1) * ac];
            let orow = &mut out[i * bc..(i + 1) * bc];
            for (k, &aik) in arow.iter().enumerate() {
                if aik != 0.0 {
                    let brow = &bv[k * bc..(k + 1) * bc];
                    for j in 0..bc {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), out, ar, bc, ng))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.dims(x);
        let (br, bc) = self.dims(bias);
        if br != 1 || bc != c {
            return Err(shape_mismatch(
                "add_bias",
                format!("[{r}x{c}] + bias [{br}x{bc}]"),
            ));
        }
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(xv[i * c + j] + bv[j]);
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddBias(x, bias), out, r, c, ng))
    }

    fn elementwise2(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId, AutodiffError> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if ar != br || ac != bc {
            return Err(shape_mismatch(
                op_name,
                format!("[{ar}x{ac}] vs [{br}x{bc}]"),
            ));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(make(a, b), out, ar, ac, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise2("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise2("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise2("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let (r, c) = self.dims(x);
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let ng = self.needs(x);
        self.push(op, out, r, c, ng)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        self.unary(x, |v| k * v, Op::Scale(x, k))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Concatenate along the column axis; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(shape_mismatch("concat_cols", "no inputs".into()));
        }
        let (r, _) = self.dims(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(shape_mismatch(
                    "concat_cols",
                    format!("row counts differ: {r} vs {pr}"),
                ));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let (_, pc) = self.dims(p);
                let v = &self.nodes[p.0].value;
                out.extend_from_slice(&v[i * pc..(i + 1) * pc]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, r, total, ng))
    }

    /// Take columns `[start, start+len)` of every row.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.dims(x);
        if start + len > c || len == 0 {
            return Err(shape_mismatch(
                "slice_cols",
                format!("[{start}, {}) of {c} columns", start + len),
            ));
        }
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::SliceCols(x, start, len), out, r, len, ng))
    }

    /// Select rows of `table` by index; duplicates accumulate their gradients.
    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.dims(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_mismatch(
                "gather_rows",
                format!("row {bad} out of {r}"),
            ));
        }
        let v = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let ng = self.needs(table);
        Ok(self.push(Op::GatherRows(table, idx.to_vec()), out, idx.len(), c, ng))
    }

    /// Sum each row, producing a `[r, 1]` column.
    pub fn row_sums(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        let v = &self.nodes[x.0].value;
        let out: Vec<f64> = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
        let ng = self.needs(x);
        self.push(Op::RowSums(x), out, r, 1, ng)
    }

    /// Sum every element down to a scalar.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x.0].value.iter().sum();
        let ng = self.needs(x);
        self.push(Op::SumAll(x), vec![total], 1, 1, ng)
    }

    /// Record `mean + exp(0.5 * log_var) * noise`.
    ///
    /// Gradients flow to `mean` and `log_var`; the injected noise is a
    /// constant, so the sample stays differentiable in the distribution
    /// parameters only.
    pub fn sample_gaussian_reparam(
        &mut self,
        mean: NodeId,
        log_var: NodeId,
        noise: &Tensor,
    ) -> Result<NodeId, AutodiffError> {
        let (mr, mc) = self.dims(mean);
        let (lr, lc) = self.dims(log_var);
        let (nr, nc) = noise.dims2();
        if (mr, mc) != (lr, lc) || (mr, mc) != (nr, nc) {
            return Err(shape_mismatch(
                "sample_gaussian_reparam",
                format!("mean [{mr}x{mc}], log_var [{lr}x{lc}], noise [{nr}x{nc}]"),
            ));
        }
        let noise_id = self.push(Op::Leaf, noise.data().to_vec(), nr, nc, false);
        let half = self.scale(log_var, 0.5);
        let std = self.exp(half);
        let scaled = self.mul(std, noise_id)?;
        self.add(mean, scaled)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss; every reachable `needs_grad` node
    /// ends up with `d loss / d node` in its gradient slot.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            let shape = if r == 1 { vec![c] } else { vec![r, c] };
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        let Graph { nodes, grads } = self;
        for i in (0..nodes.len()).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            // Nodes never seen by the sweep keep a None grad.
            let out_grad = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(nodes, grads, i, &out_grad);
            grads[i] = Some(out_grad);
        }
        Ok(())
    }
}

fn ensure<'a>(grads: &'a mut [Option<Vec<f64>>], id: usize, len: usize) -> &'a mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let needs = |id: NodeId| nodes[id.0].needs_grad;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ar, ac) = (nodes[a.0].rows, nodes[a.0].cols);
            let bc = nodes[b.0].cols;
            if needs(*a) {
                let bv = &nodes[b.0].value;
                let da = ensure(grads, a.0, ar * ac);
                // dA[i,k] += sum_j g[i,j] * B[k,j]
                for r in 0..ar {
                    let grow = &g[r * bc..(r + 1) * bc];
                    let darow = &mut da[r * ac..(r + 1) * ac];
                    for k in 0..ac {
                        let brow = &bv[k * bc..(k + 1) * bc];
                        let mut s = 0.0;
                        for j in 0..bc {
                            s += grow[j] * brow[j];
                        }
                        darow[k] += s;
                    }
                }
            }
            if needs(*b) {
                let av = &nodes[a.0].value;
                let db = ensure(grads, b.0, ac * bc);
                // dB[k,j] += sum_i A[i,k] * g[i,j]
                for r in 0..ar {
                    let arow = &av[r * ac..(r + 1) * ac];
                    let grow = &g[r * bc..(r + 1) * bc];
                    for (k, &aik) in arow.iter().enumerate() {
                        if aik != 0.0 {
                            let dbrow = &mut db[k * bc..(k + 1) * bc];
                            for j in 0..bc {
                                dbrow[j] += aik * grow[j];
                            }
                        }
                    }
                }
            }
        }
        Op::AddBias(x, bias) => {
            let (r, c) = (nodes[i].rows, nodes[i].cols);
            if needs(*x) {
                let dx = ensure(grads, x.0, r * c);
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if needs(*bias) {
                let db = ensure(grads, bias.0, c);
                for row in 0..r {
                    for j in 0..c {
                        db[j] += g[row * c + j];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for id in [*a, *b] {
                if needs(id) {
                    let d = ensure(grads, id.0, g.len());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                let d = ensure(grads, a.0, g.len());
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            if needs(*b) {
                let d = ensure(grads, b.0, g.len());
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv -= gv;
                }
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let bv = &nodes[b.0].value;
                let d = ensure(grads, a.0, g.len());
                for ((dv, &gv), bvv) in d.iter_mut().zip(g).zip(bv) {
                    *dv += gv * bvv;
                }
            }
            if needs(*b) {
                let av = &nodes[a.0].value;
                let d = ensure(grads, b.0, g.len());
                for ((dv, &gv), avv) in d.iter_mut().zip(g).zip(av) {
                    *dv += gv * avv;
                }
            }
        }
        Op::Scale(x, k) => {
            if needs(*x) {
                let d = ensure(grads, x.0, g.len());
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv += k * gv;
                }
            }
        }
        Op::Tanh(x) => {
            if needs(*x) {
                let y = &nodes[i].value;
                let d = ensure(grads, x.0, g.len());
                for ((dv, &gv), yv) in d.iter_mut().zip(g).zip(y) {
                    *dv += gv * (1.0 - yv * yv);
                }
            }
        }
        Op::Sigmoid(x) => {
            if needs(*x) {
                let y = &nodes[i].value;
                let d = ensure(grads, x.0, g.len());
                for ((dv, &gv), yv) in d.iter_mut().zip(g).zip(y) {
                    *dv += gv * yv * (1.0 - yv);
                }
            }
        }
        Op::Relu(x) => {
            if needs(*x) {
                let xv = &nodes[x.0].value;
                let d = ensure(grads, x.0, g.len());
                for ((dv, &gv), &xvv) in d.iter_mut().zip(g).zip(xv) {
                    if xvv > 0.0 {
                        *dv += gv;
                    }
                }
            }
        }
        Op::Exp(x) => {
            if needs(*x) {
                let y = &nodes[i].value;
                let d = ensure(grads, x.0, g.len());
                for ((dv, &gv), yv) in d.iter_mut().zip(g).zip(y) {
                    *dv += gv * yv;
                }
            }
        }
        Op::Square(x) => {
            if needs(*x) {
                let xv = &nodes[x.0].value;
                let d = ensure(grads, x.0, g.len());
                for ((dv, &gv), xvv) in d.iter_mut().zip(g).zip(xv) {
                    *dv += 2.0 * gv * xvv;
                }
            }
        }
        Op::Clamp(x, lo, hi) => {
            if needs(*x) {
                let (lo, hi) = (*lo, *hi);
                let xv = &nodes[x.0].value;
                let d = ensure(grads, x.0, g.len());
                for ((dv, &gv), &xvv) in d.iter_mut().zip(g).zip(xv) {
                    if xvv >= lo && xvv <= hi {
                        *dv += gv;
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let (r, total) = (nodes[i].rows, nodes[i].cols);
            let mut offset = 0;
            for p in parts {
                let pc = nodes[p.0].cols;
                if needs(*p) {
                    let d = ensure(grads, p.0, r * pc);
                    for row in 0..r {
                        let src = &g[row * total + offset..row * total + offset + pc];
                        let dst = &mut d[row * pc..(row + 1) * pc];
                        for (dv, &gv) in dst.iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                }
                offset += pc;
            }
        }
        Op::SliceCols(x, start, len) => {
            if needs(*x) {
                let (r, c) = (nodes[x.0].rows, nodes[x.0].cols);
                let d = ensure(grads, x.0, r * c);
                for row in 0..r {
                    for j in 0..*len {
                        d[row * c + start + j] += g[row * len + j];
                    }
                }
            }
        }
        Op::GatherRows(table, idx) => {
            if needs(*table) {
                let (tr, c) = (nodes[table.0].rows, nodes[table.0].cols);
                let d = ensure(grads, table.0, tr * c);
                for (out_row, &src_row) in idx.iter().enumerate() {
                    let src = &g[out_row * c..(out_row + 1) * c];
                    let dst = &mut d[src_row * c..(src_row + 1) * c];
                    for (dv, &gv) in dst.iter_mut().zip(src) {
                        *dv += gv;
                    }
                }
            }
        }
        Op::RowSums(x) => {
            if needs(*x) {
                let (r, c) = (nodes[x.0].rows, nodes[x.0].cols);
                let d = ensure(grads, x.0, r * c);
                for row in 0..r {
                    let gv = g[row];
                    for j in 0..c {
                        d[row * c + j] += gv;
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if needs(*x) {
                let n = nodes[x.0].value.len();
                let d = ensure(grads, x.0, n);
                let gv = g[0];
                for dv in d.iter_mut() {
                    *dv += gv;
                }
            }
        }
    }
}
