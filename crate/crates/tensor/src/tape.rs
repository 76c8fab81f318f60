//! Define-by-run gradient tape.
//!
//! Every operation appends a node holding its output value plus whatever the
//! backward rule needs. The recorded order is a topological order, so the
//! backward pass is a single reverse sweep with sequential, index-ordered
//! accumulation (bit-reproducible under a fixed seed).

use std::rc::Rc;

use crate::real::Real;
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<R: Real> {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, R),
    AddN(Vec<NodeId>),
    /// [n,d] + row vector [d]
    AddRow(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    /// A · Bᵀ
    MatmulNT(NodeId, NodeId),
    /// Aᵀ · B
    MatmulTN(NodeId, NodeId),
    Transpose(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Silu(NodeId),
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        /// Saved 1/√(mean(x²)+eps) per row.
        inv: Vec<R>,
    },
    Rope2d {
        x: NodeId,
        coords: Rc<Vec<(usize, usize)>>,
        heads: usize,
        base: f64,
    },
    GatherRows {
        x: NodeId,
        idx: Rc<Vec<usize>>,
    },
    GroupedSdpa {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        groups: Rc<Vec<Vec<usize>>>,
        heads: usize,
        /// Saved attention probabilities, one m×m block per (group, head).
        probs: Vec<Vec<R>>,
    },
    MeanRows(NodeId),
    SumAll(NodeId),
    /// Two-class softmax cross-entropy against a fixed target index.
    CeLogits2 {
        logits: NodeId,
        target: usize,
    },
}

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op<R>,
}

pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<R> {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a node after `backward`; `None` when no path
    /// connected the node to the loss.
    pub fn grad(&self, id: NodeId) -> Option<&[R]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zero-filled for disconnected nodes.
    pub fn grad_tensor(&self, id: NodeId) -> Tensor<R> {
        let shape = self.value(id).shape().to_vec();
        match self.grad(id) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn leaf(&mut self, value: Tensor<R>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> NodeId {
        self.push(value, Op::Constant)
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), TensorError> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: R) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data).expect("scale"), Op::Scale(a, c))
    }

    pub fn add_n(&mut self, ids: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = ids.first().ok_or(TensorError::EmptyInput("add_n"))?;
        let shape = self.value(*first).shape().to_vec();
        let mut data = vec![R::ZERO; self.value(*first).numel()];
        for &id in ids {
            self.binary_same_shape("add_n", *first, id)?;
            for (o, &x) in data.iter_mut().zip(self.value(id).data()) {
                *o += x;
            }
        }
        Ok(self.push(Tensor::new(shape, data)?, Op::AddN(ids.to_vec())))
    }

    /// Broadcast-add a row vector [d] to every row of [n,d].
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (n, d) = self.dims2("add_row", a)?;
        let bshape = self.value(bias).shape().to_vec();
        if bshape != [d] && bshape != [1, d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: vec![n, d],
                rhs: bshape,
            });
        }
        let mut data = self.value(a).data().to_vec();
        let b = self.value(bias).data();
        for row in data.chunks_mut(d) {
            for (o, &x) in row.iter_mut().zip(b) {
                *o += x;
            }
        }
        Ok(self.push(Tensor::new(vec![n, d], data)?, Op::AddRow(a, bias)))
    }

    fn dims2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), TensorError> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, ka) = self.dims2("matmul", a)?;
        let (kb, n) = self.dims2("matmul", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, ka],
                rhs: vec![kb, n],
            });
        }
        let mut out = vec![R::ZERO; m * n];
        matmul_raw(self.value(a).data(), self.value(b).data(), m, ka, n, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, ka) = self.dims2("matmul_nt", a)?;
        let (n, kb) = self.dims2("matmul_nt", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: vec![m, ka],
                rhs: vec![n, kb],
            });
        }
        let mut out = vec![R::ZERO; m * n];
        matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, ka, n, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatmulNT(a, b)))
    }

    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ka, m) = self.dims2("matmul_tn", a)?;
        let (kb, n) = self.dims2("matmul_tn", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tn",
                lhs: vec![ka, m],
                rhs: vec![kb, n],
            });
        }
        let mut out = vec![R::ZERO; m * n];
        matmul_tn_raw(self.value(a).data(), self.value(b).data(), m, ka, n, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatmulTN(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.dims2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![R::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a)))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let data = softmax_raw(self.value(x).data(), &shape, axis);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax { x, axis }))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, data).expect("silu"), Op::Silu(x))
    }

    /// Row-wise RMS normalization with a learned gain:
    /// y = x · gain / √(mean(x²) + eps).
    pub fn rmsnorm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> Result<NodeId, TensorError> {
        let (n, d) = self.dims2("rmsnorm", x)?;
        if self.value(gain).shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "rmsnorm",
                lhs: vec![n, d],
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let epsr = R::from_f64(eps);
        let dn = R::from_f64(d as f64);
        let mut inv = Vec::with_capacity(n);
        let mut out = vec![R::ZERO; n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mut ss = R::ZERO;
            for &v in row {
                ss += v * v;
            }
            let r = R::ONE / (ss / dn + epsr).sqrt();
            inv.push(r);
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                orow[j] = row[j] * g[j] * r;
            }
        }
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::RmsNorm { x, gain, inv }))
    }

    /// 2-D rotary embedding over per-head channel pairs. The first half of
    /// each head rotates with the h coordinate, the second half with w;
    /// pair i of an axis with coordinate p turns by p · base^(−2i/(d/2)).
    pub fn rope2d(
        &mut self,
        x: NodeId,
        coords: Rc<Vec<(usize, usize)>>,
        heads: usize,
        base: f64,
    ) -> Result<NodeId, TensorError> {
        let (n, dim) = self.dims2("rope2d", x)?;
        if n != coords.len() {
            return Err(TensorError::ShapeMismatch {
                op: "rope2d",
                lhs: vec![n, dim],
                rhs: vec![coords.len()],
            });
        }
        if dim % heads != 0 || (dim / heads) % 4 != 0 {
            return Err(TensorError::Config(format!(
                "rope2d requires head dim divisible by 4, got dim {dim} over {heads} heads"
            )));
        }
        let mut out = self.value(x).data().to_vec();
        rope2d_raw(&mut out, &coords, n, dim, heads, base, false);
        Ok(self.push(
            Tensor::new(vec![n, dim], out)?,
            Op::Rope2d {
                x,
                coords,
                heads,
                base,
            },
        ))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Rc<Vec<usize>>) -> Result<NodeId, TensorError> {
        let (n, d) = self.dims2("gather_rows", x)?;
        let mut out = Vec::with_capacity(idx.len() * d);
        let src = self.value(x).data();
        for &i in idx.iter() {
            if i >= n {
                return Err(TensorError::Config(format!(
                    "gather_rows index {i} out of range for {n} rows"
                )));
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], out)?,
            Op::GatherRows { x, idx },
        ))
    }

    /// Scaled dot-product attention restricted to token groups. Each group is
    /// a set of row indices attending only among themselves; heads split the
    /// channel axis. Rows not covered by any group pass through as zero.
    pub fn grouped_sdpa(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        groups: Rc<Vec<Vec<usize>>>,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let (n, dim) = self.dims2("grouped_sdpa", q)?;
        self.binary_same_shape("grouped_sdpa", q, k)?;
        self.binary_same_shape("grouped_sdpa", q, v)?;
        if dim % heads != 0 {
            return Err(TensorError::Config(format!(
                "grouped_sdpa: dim {dim} not divisible by {heads} heads"
            )));
        }
        let hd = dim / heads;
        let scale = R::from_f64(1.0 / (hd as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![R::ZERO; n * dim];
        let mut probs = Vec::with_capacity(groups.len() * heads);
        for group in groups.iter() {
            let m = group.len();
            for h in 0..heads {
                let off = h * hd;
                // logits over the group, max-subtracted softmax per row
                let mut p = vec![R::ZERO; m * m];
                for (a, &ia) in group.iter().enumerate() {
                    let qrow = &qd[ia * dim + off..ia * dim + off + hd];
                    let prow = &mut p[a * m..(a + 1) * m];
                    for (b, &ib) in group.iter().enumerate() {
                        let krow = &kd[ib * dim + off..ib * dim + off + hd];
                        let mut s = R::ZERO;
                        for c in 0..hd {
                            s += qrow[c] * krow[c];
                        }
                        prow[b] = s * scale;
                    }
                    let mx = prow.iter().fold(prow[0], |acc, &x| acc.max(x));
                    let mut sum = R::ZERO;
                    for x in prow.iter_mut() {
                        *x = (*x - mx).exp();
                        sum += *x;
                    }
                    for x in prow.iter_mut() {
                        *x = *x / sum;
                    }
                }
                // weighted values
                for (a, &ia) in group.iter().enumerate() {
                    let prow = &p[a * m..(a + 1) * m];
                    let orow = &mut out[ia * dim + off..ia * dim + off + hd];
                    for (b, &ib) in group.iter().enumerate() {
                        let w = prow[b];
                        let vrow = &vd[ib * dim + off..ib * dim + off + hd];
                        for c in 0..hd {
                            orow[c] += w * vrow[c];
                        }
                    }
                }
                probs.push(p);
            }
        }
        Ok(self.push(
            Tensor::new(vec![n, dim], out)?,
            Op::GroupedSdpa {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
        ))
    }

    /// Mean over the row axis: [n,d] → [1,d].
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (n, d) = self.dims2("mean_rows", x)?;
        if n == 0 {
            return Err(TensorError::EmptyInput("mean_rows"));
        }
        let src = self.value(x).data();
        let inv = R::from_f64(1.0 / n as f64);
        let mut out = vec![R::ZERO; d];
        for row in src.chunks(d) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        Ok(self.push(Tensor::new(vec![1, d], out)?, Op::MeanRows(x)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = R::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// Stable two-class cross-entropy of logits [1,2] against target ∈ {0,1}.
    pub fn ce_logits2(&mut self, logits: NodeId, target: usize) -> Result<NodeId, TensorError> {
        let val = self.value(logits);
        if val.numel() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "ce_logits2",
                lhs: val.shape().to_vec(),
                rhs: vec![1, 2],
            });
        }
        if target > 1 {
            return Err(TensorError::Config(format!(
                "ce_logits2 target must be 0 or 1, got {target}"
            )));
        }
        let z0 = val.data()[0];
        let z1 = val.data()[1];
        let mx = z0.max(z1);
        let lse = mx + ((z0 - mx).exp() + (z1 - mx).exp()).ln();
        let zt = if target == 0 { z0 } else { z1 };
        Ok(self.push(Tensor::scalar(lse - zt), Op::CeLogits2 { logits, target }))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate across shared
    /// subexpressions; calling it twice resets previous gradients. Subgraphs
    /// that no leaf feeds into are skipped entirely.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Leaf => needs[i] = true,
                Op::Constant => {}
                op => needs[i] = op.for_each_input(|input| needs[input.0]),
            }
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![R::ONE; 1]);
        for id in (0..=loss.0).rev() {
            if !needs[id] && id != loss.0 {
                continue;
            }
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, &needs, id, &gout);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }
}

impl<R: Real> Op<R> {
    /// Visits every input id; returns true when any satisfies the predicate.
    fn for_each_input(&self, mut any: impl FnMut(NodeId) -> bool) -> bool {
        match self {
            Op::Leaf | Op::Constant => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::Matmul(a, b)
            | Op::MatmulNT(a, b)
            | Op::MatmulTN(a, b) => any(*a) || any(*b),
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Silu(a)
            | Op::MeanRows(a)
            | Op::SumAll(a)
            | Op::Softmax { x: a, .. }
            | Op::Rope2d { x: a, .. }
            | Op::GatherRows { x: a, .. }
            | Op::CeLogits2 { logits: a, .. } => any(*a),
            Op::AddN(ids) => ids.iter().any(|i| any(*i)),
            Op::RmsNorm { x, gain, .. } => any(*x) || any(*gain),
            Op::GroupedSdpa { q, k, v, .. } => any(*q) || any(*k) || any(*v),
        }
    }
}

fn accum<R: Real>(nodes: &[Node<R>], grads: &mut [Option<Vec<R>>], id: NodeId, delta: &[R]) {
    let numel = nodes[id.0].value.numel();
    let slot = grads[id.0].get_or_insert_with(|| vec![R::ZERO; numel]);
    for (g, &d) in slot.iter_mut().zip(delta) {
        *g += d;
    }
}


fn propagate<R: Real>(
    nodes: &[Node<R>],
    grads: &mut [Option<Vec<R>>],
    needs: &[bool],
    id: usize,
    gout: &[R],
) {
    let value = |n: NodeId| &nodes[n.0].value;
    let need = |n: &NodeId| needs[n.0];
    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            if need(a) {
                accum(nodes, grads, *a, gout);
            }
            if need(b) {
                accum(nodes, grads, *b, gout);
            }
        }
        Op::Sub(a, b) => {
            if need(a) {
                accum(nodes, grads, *a, gout);
            }
            if need(b) {
                let neg: Vec<R> = gout.iter().map(|&g| -g).collect();
                accum(nodes, grads, *b, &neg);
            }
        }
        Op::Mul(a, b) => {
            if need(a) {
                let da: Vec<R> = gout
                    .iter()
                    .zip(value(*b).data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                accum(nodes, grads, *a, &da);
            }
            if need(b) {
                let db: Vec<R> = gout
                    .iter()
                    .zip(value(*a).data())
                    .map(|(&g, &x)| g * x)
                    .collect();
                accum(nodes, grads, *b, &db);
            }
        }
        Op::Scale(a, c) => {
            if need(a) {
                let da: Vec<R> = gout.iter().map(|&g| g * *c).collect();
                accum(nodes, grads, *a, &da);
            }
        }
        Op::AddN(ids) => {
            for a in ids {
                if need(a) {
                    accum(nodes, grads, *a, gout);
                }
            }
        }
        Op::AddRow(a, bias) => {
            if need(a) {
                accum(nodes, grads, *a, gout);
            }
            if need(bias) {
                let d = value(*bias).numel();
                let mut db = vec![R::ZERO; d];
                for row in gout.chunks(d) {
                    for (o, &g) in db.iter_mut().zip(row) {
                        *o += g;
                    }
                }
                accum(nodes, grads, *bias, &db);
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (value(*a).rows(), value(*a).cols());
            let n = value(*b).cols();
            if need(a) {
                let mut da = vec![R::ZERO; m * k];
                matmul_nt_raw(gout, value(*b).data(), m, n, k, &mut da);
                accum(nodes, grads, *a, &da);
            }
            if need(b) {
                let mut db = vec![R::ZERO; k * n];
                matmul_tn_raw(value(*a).data(), gout, k, m, n, &mut db);
                accum(nodes, grads, *b, &db);
            }
        }
        Op::MatmulNT(a, b) => {
            let (m, k) = (value(*a).rows(), value(*a).cols());
            let n = value(*b).rows();
            if need(a) {
                let mut da = vec![R::ZERO; m * k];
                matmul_raw(gout, value(*b).data(), m, n, k, &mut da);
                accum(nodes, grads, *a, &da);
            }
            if need(b) {
                let mut db = vec![R::ZERO; n * k];
                matmul_tn_raw(gout, value(*a).data(), n, m, k, &mut db);
                accum(nodes, grads, *b, &db);
            }
        }
        Op::MatmulTN(a, b) => {
            let (k, m) = (value(*a).rows(), value(*a).cols());
            let n = value(*b).cols();
            if need(a) {
                let mut da = vec![R::ZERO; k * m];
                matmul_nt_raw(value(*b).data(), gout, k, n, m, &mut da);
                accum(nodes, grads, *a, &da);
            }
            if need(b) {
                let mut db = vec![R::ZERO; k * n];
                matmul_raw(value(*a).data(), gout, k, m, n, &mut db);
                accum(nodes, grads, *b, &db);
            }
        }
        Op::Transpose(a) => {
            if need(a) {
                let (m, n) = (value(*a).rows(), value(*a).cols());
                let mut da = vec![R::ZERO; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = gout[i * m + j];
                    }
                }
                accum(nodes, grads, *a, &da);
            }
        }
        Op::Softmax { x, axis } => {
            if need(x) {
                let y = nodes[id].value.data();
                let shape = nodes[id].value.shape();
                let dx = softmax_backward_raw(y, gout, shape, *axis);
                accum(nodes, grads, *x, &dx);
            }
        }
        Op::Silu(a) => {
            if need(a) {
                let dx: Vec<R> = value(*a)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (R::ONE - s))
                    })
                    .collect();
                accum(nodes, grads, *a, &dx);
            }
        }
        Op::RmsNorm { x, gain, inv } => {
            let (n, d) = (value(*x).rows(), value(*x).cols());
            let xs = value(*x).data();
            let g = value(*gain).data();
            let dn = R::from_f64(d as f64);
            if need(x) {
                let mut dx = vec![R::ZERO; n * d];
                for i in 0..n {
                    let r = inv[i];
                    let row = &xs[i * d..(i + 1) * d];
                    let grow = &gout[i * d..(i + 1) * d];
                    // dot = Σ_k dy_k · g_k · x_k
                    let mut dot = R::ZERO;
                    for j in 0..d {
                        dot += grow[j] * g[j] * row[j];
                    }
                    let coef = r * r * r / dn;
                    let drow = &mut dx[i * d..(i + 1) * d];
                    for j in 0..d {
                        drow[j] = grow[j] * g[j] * r - row[j] * coef * dot;
                    }
                }
                accum(nodes, grads, *x, &dx);
            }
            if need(gain) {
                let mut dg = vec![R::ZERO; d];
                for i in 0..n {
                    let r = inv[i];
                    let row = &xs[i * d..(i + 1) * d];
                    let grow = &gout[i * d..(i + 1) * d];
                    for j in 0..d {
                        dg[j] += grow[j] * row[j] * r;
                    }
                }
                accum(nodes, grads, *gain, &dg);
            }
        }
        Op::Rope2d {
            x,
            coords,
            heads,
            base,
        } => {
            if need(x) {
                let (n, dim) = (value(*x).rows(), value(*x).cols());
                let mut dx = gout.to_vec();
                // rotations are orthogonal: the adjoint is the inverse rotation
                rope2d_raw(&mut dx, coords, n, dim, *heads, *base, true);
                accum(nodes, grads, *x, &dx);
            }
        }
        Op::GatherRows { x, idx } => {
            if need(x) {
                let d = value(*x).cols();
                let numel = value(*x).numel();
                let slot = grads[x.0].get_or_insert_with(|| vec![R::ZERO; numel]);
                for (r, &i) in idx.iter().enumerate() {
                    let grow = &gout[r * d..(r + 1) * d];
                    let drow = &mut slot[i * d..(i + 1) * d];
                    for (o, &g) in drow.iter_mut().zip(grow) {
                        *o += g;
                    }
                }
            }
        }
        Op::GroupedSdpa {
            q,
            k,
            v,
            groups,
            heads,
            probs,
        } => {
            if !(need(q) || need(k) || need(v)) {
                return;
            }
            let dim = value(*q).cols();
            let hd = dim / heads;
            let scale = R::from_f64(1.0 / (hd as f64).sqrt());
            let n = value(*q).rows();
            let qd = value(*q).data();
            let kd = value(*k).data();
            let vd = value(*v).data();
            let mut dq = vec![R::ZERO; n * dim];
            let mut dk = vec![R::ZERO; n * dim];
            let mut dv = vec![R::ZERO; n * dim];
            let mut pi = 0;
            for group in groups.iter() {
                let m = group.len();
                for h in 0..*heads {
                    let off = h * hd;
                    let p = &probs[pi];
                    pi += 1;
                    for (a, &ia) in group.iter().enumerate() {
                        let grow = &gout[ia * dim + off..ia * dim + off + hd];
                        let prow = &p[a * m..(a + 1) * m];
                        // dP_ab = dO_a · V_b ; dV_b += P_ab · dO_a
                        let mut dp = vec![R::ZERO; m];
                        for (b, &ib) in group.iter().enumerate() {
                            let vrow = &vd[ib * dim + off..ib * dim + off + hd];
                            let mut s = R::ZERO;
                            for c in 0..hd {
                                s += grow[c] * vrow[c];
                            }
                            dp[b] = s;
                            let dvrow = &mut dv[ib * dim + off..ib * dim + off + hd];
                            let w = prow[b];
                            for c in 0..hd {
                                dvrow[c] += w * grow[c];
                            }
                        }
                        // softmax backward on the logit row
                        let mut dot = R::ZERO;
                        for b in 0..m {
                            dot += dp[b] * prow[b];
                        }
                        let qrow = &qd[ia * dim + off..ia * dim + off + hd];
                        let dqrow = &mut dq[ia * dim + off..ia * dim + off + hd];
                        for (b, &ib) in group.iter().enumerate() {
                            let ds = prow[b] * (dp[b] - dot) * scale;
                            let krow = &kd[ib * dim + off..ib * dim + off + hd];
                            let dkrow = &mut dk[ib * dim + off..ib * dim + off + hd];
                            for c in 0..hd {
                                dqrow[c] += ds * krow[c];
                                dkrow[c] += ds * qrow[c];
                            }
                        }
                    }
                }
            }
            if need(q) {
                accum(nodes, grads, *q, &dq);
            }
            if need(k) {
                accum(nodes, grads, *k, &dk);
            }
            if need(v) {
                accum(nodes, grads, *v, &dv);
            }
        }
        Op::MeanRows(a) => {
            if need(a) {
                let (n, d) = (value(*a).rows(), value(*a).cols());
                let inv = R::from_f64(1.0 / n as f64);
                let mut da = vec![R::ZERO; n * d];
                for row in da.chunks_mut(d) {
                    for (o, &g) in row.iter_mut().zip(gout) {
                        *o = g * inv;
                    }
                }
                accum(nodes, grads, *a, &da);
            }
        }
        Op::SumAll(a) => {
            if need(a) {
                let g = gout[0];
                let da = vec![g; value(*a).numel()];
                accum(nodes, grads, *a, &da);
            }
        }
        Op::CeLogits2 { logits, target } => {
            if need(logits) {
                let z0 = value(*logits).data()[0];
                let z1 = value(*logits).data()[1];
                let mx = z0.max(z1);
                let e0 = (z0 - mx).exp();
                let e1 = (z1 - mx).exp();
                let sum = e0 + e1;
                let g = gout[0];
                let mut dz = [e0 / sum * g, e1 / sum * g];
                dz[*target] -= g;
                accum(nodes, grads, *logits, &dz);
            }
        }
    }
}

#[inline]
fn sigmoid<R: Real>(v: R) -> R {
    R::ONE / (R::ONE + (-v).exp())
}

pub(crate) fn softmax_raw<R: Real>(x: &[R], shape: &[usize], axis: usize) -> Vec<R> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut mx = out[base];
            for a in 1..axis_len {
                mx = mx.max(out[base + a * inner]);
            }
            let mut sum = R::ZERO;
            for a in 0..axis_len {
                let idx = base + a * inner;
                out[idx] = (out[idx] - mx).exp();
                sum += out[idx];
            }
            for a in 0..axis_len {
                out[base + a * inner] = out[base + a * inner] / sum;
            }
        }
    }
    out
}

fn softmax_backward_raw<R: Real>(y: &[R], dy: &[R], shape: &[usize], axis: usize) -> Vec<R> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut dx = vec![R::ZERO; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut dot = R::ZERO;
            for a in 0..axis_len {
                let idx = base + a * inner;
                dot += dy[idx] * y[idx];
            }
            for a in 0..axis_len {
                let idx = base + a * inner;
                dx[idx] = y[idx] * (dy[idx] - dot);
            }
        }
    }
    dx
}

/// Pure (non-tape) 2-D rotary application, shared by tests and inference
/// helpers. Layout matches [`Tape::rope2d`].
pub fn rope2d_apply<R: Real>(
    x: &Tensor<R>,
    coords: &[(usize, usize)],
    heads: usize,
    base: f64,
) -> Tensor<R> {
    let (n, dim) = (x.rows(), x.cols());
    assert_eq!(n, coords.len());
    let mut data = x.data().to_vec();
    rope2d_raw(&mut data, coords, n, dim, heads, base, false);
    Tensor::new(vec![n, dim], data).expect("rope2d_apply shape")
}

/// In-place 2-D rotary transform; `inverse` flips the rotation direction.
fn rope2d_raw<R: Real>(
    data: &mut [R],
    coords: &[(usize, usize)],
    n: usize,
    dim: usize,
    heads: usize,
    base: f64,
    inverse: bool,
) {
    let hd = dim / heads;
    let half = hd / 2;
    let pairs = half / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    for t in 0..n {
        let (ch, cw) = coords[t];
        for h in 0..heads {
            let off = t * dim + h * hd;
            for i in 0..pairs {
                let freq = base.powf(-2.0 * i as f64 / half as f64);
                // h axis
                let th = sign * ch as f64 * freq;
                let (s, c) = (R::from_f64(th.sin()), R::from_f64(th.cos()));
                let a = data[off + 2 * i];
                let b = data[off + 2 * i + 1];
                data[off + 2 * i] = a * c - b * s;
                data[off + 2 * i + 1] = a * s + b * c;
                // w axis
                let tw = sign * cw as f64 * freq;
                let (s, c) = (R::from_f64(tw.sin()), R::from_f64(tw.cos()));
                let a = data[off + half + 2 * i];
                let b = data[off + half + 2 * i + 1];
                data[off + half + 2 * i] = a * c - b * s;
                data[off + half + 2 * i + 1] = a * s + b * c;
            }
        }
    }
}
