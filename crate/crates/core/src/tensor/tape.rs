use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{numel, Tensor};
use crate::error::{contract, shape_err, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    Square(Var),
    Relu(Var),
    MatMul(Var, Var),
    TransposeLast(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Keeps the row-softmax probabilities `[.., Tq, Tk]` for the reverse pass.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        probs: Vec<f64>,
    },
    SqDist(Var, Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order because
/// an op can only reference nodes that already exist.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    let (na, nb) = (numel(a), numel(b));
    if nb == 1 && b.len() <= a.len() {
        return Some(a.to_vec());
    }
    if na == 1 && a.len() <= b.len() {
        return Some(b.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Some(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Some(b.to_vec());
    }
    None
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every output position of `permute(shape, axes)`, the source offset.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let src: usize = idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum();
        map.push(src);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// Batch layout shared by forward and backward matmul.
struct MatMulDims {
    batch: usize,
    batch_a: usize,
    batch_b: usize,
    n: usize,
    k: usize,
    m: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatMulDims, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err("matmul", a, b));
    }
    let (n, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, m) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(shape_err("matmul", a, b));
    }
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch_shape = if ba.len() >= bb.len() && ba.ends_with(bb) {
        ba
    } else if bb.ends_with(ba) {
        bb
    } else {
        return Err(shape_err("matmul", a, b));
    };
    let mut out = batch_shape.to_vec();
    out.push(n);
    out.push(m);
    Ok((
        MatMulDims {
            batch: numel(batch_shape),
            batch_a: numel(ba),
            batch_b: numel(bb),
            n,
            k,
            m,
        },
        out,
    ))
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records a leaf. `requires_grad` leaves receive gradients in
    /// [`backward`](Self::backward).
    pub fn leaf(&mut self, shape: &[usize], value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(contract(format!(
                "leaf of shape {:?} needs {} values, got {}",
                shape,
                numel(shape),
                value.len()
            )));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, requires_grad))
    }

    /// Records a copy of `t`, tracked iff `t` carries a gradient buffer.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a copy of `t` that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape and value agree")
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| shape_err(name, sa, sb))?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = Vec::with_capacity(numel(&out_shape));
        // broadcasting only ever repeats the shorter operand whole
        if va.len() >= vb.len() {
            for ch in va.chunks_exact(vb.len()) {
                value.extend(ch.iter().zip(vb).map(|(&x, &y)| f(x, y)));
            }
        } else {
            for ch in vb.chunks_exact(va.len()) {
                value.extend(va.iter().zip(ch).map(|(&x, &y)| f(x, y)));
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out_shape, value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a);
        self.push(shape, value, op, tracked)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, libm::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Batched matrix product `[.., n, k] x [.., k, m] -> [.., n, m]`.
    ///
    /// The shorter batch prefix must be a suffix of the longer one; a plain
    /// `[k, m]` weight therefore applies to every batch element.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (dims, out_shape) = matmul_dims(self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let MatMulDims { n, k, m, .. } = dims;
        let mut out = vec![0.0; dims.batch * n * m];
        for bi in 0..dims.batch {
            let ao = (bi % dims.batch_a) * n * k;
            let bo = (bi % dims.batch_b) * k * m;
            let oo = bi * n * m;
            for i in 0..n {
                let row = &mut out[oo + i * m..oo + (i + 1) * m];
                for p in 0..k {
                    let aip = va[ao + i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &vb[bo + p * m..bo + (p + 1) * m];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out_shape, out, Op::MatMul(a, b), tracked))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(shape_err("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        let (shape, value) = self.permuted(a, &axes);
        let tracked = self.tracked(a);
        Ok(self.push(shape, value, Op::TransposeLast(a), tracked))
    }

    fn permuted(&self, a: Var, axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
        let shape = self.shape(a);
        let map = permute_index(shape, axes);
        let src = self.value(a);
        let value = map.iter().map(|&i| src[i]).collect();
        (axes.iter().map(|&ax| shape[ax]).collect(), value)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        let valid = axes.len() == rank
            && axes
                .iter()
                .all(|&ax| ax < rank && !core::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(shape_err("permute", self.shape(a), axes));
        }
        let (shape, value) = self.permuted(a, axes);
        let tracked = self.tracked(a);
        Ok(self.push(shape, value, Op::Permute(a, axes.to_vec()), tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        let tracked = self.tracked(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), tracked))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(contract(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for q in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + q;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = libm::exp(x[at(j)] - max);
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(shape, y, Op::Softmax { x: a, axis }, tracked))
    }

    /// Normalizes over the last axis, then applies `gain * x_hat + bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| shape_err("layer_norm", &shape, &[]))?;
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(shape_err("layer_norm", &shape, self.shape(gain)));
        }
        let x = self.value(a);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = x.len() / width.max(1);
        let mut normalized = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = is;
            for j in 0..width {
                let xh = (row[j] - mean) * is;
                normalized[r * width + j] = xh;
                y[r * width + j] = xh * g[j] + b[j];
            }
        }
        let tracked = self.tracked(a) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(
            shape,
            y,
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                normalized,
                inv_std,
            },
            tracked,
        ))
    }

    /// Fused scaled dot-product attention, `softmax(scale * q k^T) v` over
    /// the last two axes. `q: [.., Tq, dk]`, `k: [.., Tk, dk]`,
    /// `v: [.., Tk, dv]` with identical batch prefixes.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        let r = sq.len();
        let ok = r >= 2
            && sk.len() == r
            && sv.len() == r
            && sq[..r - 2] == sk[..r - 2]
            && sk[..r - 2] == sv[..r - 2]
            && sq[r - 1] == sk[r - 1]
            && sk[r - 2] == sv[r - 2];
        if !ok {
            return Err(shape_err("attention", sq, sk));
        }
        let (tq, dk, tk, dv) = (sq[r - 2], sq[r - 1], sk[r - 2], sv[r - 1]);
        let batch = numel(&sq[..r - 2]);
        let mut out_shape = sq[..r - 2].to_vec();
        out_shape.extend([tq, dv]);
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * tq * tk];
        let mut out = vec![0.0; batch * tq * dv];
        for bi in 0..batch {
            let (qb, kb, vb) = (
                &vq[bi * tq * dk..],
                &vk[bi * tk * dk..],
                &vv[bi * tk * dv..],
            );
            for i in 0..tq {
                let qi = &qb[i * dk..(i + 1) * dk];
                let row = &mut probs[(bi * tq + i) * tk..(bi * tq + i + 1) * tk];
                let mut max = f64::NEG_INFINITY;
                for (j, p) in row.iter_mut().enumerate() {
                    let kj = &kb[j * dk..(j + 1) * dk];
                    *p = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    max = max.max(*p);
                }
                let mut z = 0.0;
                for p in row.iter_mut() {
                    *p = libm::exp(*p - max);
                    z += *p;
                }
                let o = &mut out[(bi * tq + i) * dv..(bi * tq + i + 1) * dv];
                for (j, p) in row.iter_mut().enumerate() {
                    *p /= z;
                    for (ov, vj) in o.iter_mut().zip(&vb[j * dv..(j + 1) * dv]) {
                        *ov += *p * vj;
                    }
                }
            }
        }
        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(v);
        Ok(self.push(
            out_shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            },
            tracked,
        ))
    }

    /// Squared Euclidean distance from every row of `points` (`[.., n, k]`)
    /// to every row of `centers` (`[m, k]`), giving `[.., n, m]`.
    ///
    /// Differences are formed explicitly so a point that equals a center has
    /// distance exactly zero.
    pub fn sq_dist(&mut self, points: Var, centers: Var) -> Result<Var> {
        let (sp, sc) = (self.shape(points), self.shape(centers));
        if sp.is_empty() || sc.len() != 2 || sp[sp.len() - 1] != sc[1] {
            return Err(shape_err("sq_dist", sp, sc));
        }
        let (k, m) = (sc[1], sc[0]);
        let mut out_shape = sp[..sp.len() - 1].to_vec();
        out_shape.push(m);
        let (h, c) = (self.value(points), self.value(centers));
        let rows = h.len() / k.max(1);
        let mut out = vec![0.0; rows * m];
        for p in 0..rows {
            let hp = &h[p * k..(p + 1) * k];
            for j in 0..m {
                let cj = &c[j * k..(j + 1) * k];
                out[p * m + j] = hp.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        let tracked = self.tracked(points) || self.tracked(centers);
        Ok(self.push(out_shape, out, Op::SqDist(points, centers), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let tracked = self.tracked(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let tracked = self.tracked(a);
        self.push(Vec::new(), vec![s], Op::Mean(a), tracked)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradient buffers are rebuilt from zero on every call, so repeating
    /// `backward` on the same tape yields identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        // Zero-initialized gradient slot for a tracked input, else None.
        let slot = |v: Var, grads: &mut [Option<Vec<f64>>]| -> bool {
            if !nodes[v.0].tracked {
                return false;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; nodes[v.0].value.len()]);
            }
            true
        };
        macro_rules! acc {
            ($v:expr) => {
                grads[$v.0].as_mut().expect("slot allocated")
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if slot(*a, grads) {
                    reduce_into(acc!(a), g, 1.0);
                }
                if slot(*b, grads) {
                    reduce_into(acc!(b), g, sign);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if slot(*a, grads) {
                    mul_grad_into(acc!(a), g, vb);
                }
                if slot(*b, grads) {
                    mul_grad_into(acc!(b), g, va);
                }
            }
            Op::Neg(a) => {
                if slot(*a, grads) {
                    acc!(a).iter_mut().zip(g).for_each(|(o, gi)| *o -= gi);
                }
            }
            Op::Scale(a, c) => {
                if slot(*a, grads) {
                    acc!(a).iter_mut().zip(g).for_each(|(o, gi)| *o += gi * c);
                }
            }
            Op::Exp(a) => {
                if slot(*a, grads) {
                    let y = &node.value;
                    for ((o, gi), yi) in acc!(a).iter_mut().zip(g).zip(y) {
                        *o += gi * yi;
                    }
                }
            }
            Op::Square(a) => {
                if slot(*a, grads) {
                    let x = &nodes[a.0].value;
                    for ((o, gi), xi) in acc!(a).iter_mut().zip(g).zip(x) {
                        *o += 2.0 * xi * gi;
                    }
                }
            }
            Op::Relu(a) => {
                if slot(*a, grads) {
                    let x = &nodes[a.0].value;
                    for ((o, gi), xi) in acc!(a).iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (dims, _) = matmul_dims(&nodes[a.0].shape, &nodes[b.0].shape)
                    .expect("validated in forward");
                let MatMulDims { n, k, m, .. } = dims;
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if slot(*a, grads) {
                    let ga = acc!(a);
                    // dA = dC . B^T
                    for bi in 0..dims.batch {
                        let ao = (bi % dims.batch_a) * n * k;
                        let bo = (bi % dims.batch_b) * k * m;
                        let go = bi * n * m;
                        for i in 0..n {
                            let grow = &g[go + i * m..go + (i + 1) * m];
                            for p in 0..k {
                                let brow = &vb[bo + p * m..bo + (p + 1) * m];
                                let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                                ga[ao + i * k + p] += dot;
                            }
                        }
                    }
                }
                if slot(*b, grads) {
                    let gb = acc!(b);
                    // dB = A^T . dC
                    for bi in 0..dims.batch {
                        let ao = (bi % dims.batch_a) * n * k;
                        let bo = (bi % dims.batch_b) * k * m;
                        let go = bi * n * m;
                        for i in 0..n {
                            let grow = &g[go + i * m..go + (i + 1) * m];
                            for p in 0..k {
                                let aip = va[ao + i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let out = &mut gb[bo + p * m..bo + (p + 1) * m];
                                for (o, gv) in out.iter_mut().zip(grow) {
                                    *o += aip * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::TransposeLast(a) | Op::Permute(a, _) => {
                if slot(*a, grads) {
                    let src_shape = &nodes[a.0].shape;
                    let axes: Vec<usize> = match &node.op {
                        Op::Permute(_, axes) => axes.clone(),
                        _ => {
                            let r = src_shape.len();
                            let mut ax: Vec<usize> = (0..r).collect();
                            ax.swap(r - 2, r - 1);
                            ax
                        }
                    };
                    let map = permute_index(src_shape, &axes);
                    let ga = acc!(a);
                    for (o, &src) in map.iter().enumerate() {
                        ga[src] += g[o];
                    }
                }
            }
            Op::Reshape(a) => {
                if slot(*a, grads) {
                    acc!(a).iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
                }
            }
            Op::Softmax { x, axis } => {
                if slot(*x, grads) {
                    let y = &node.value;
                    let (outer, len, inner) = split_axis(&node.shape, *axis);
                    let gx = acc!(x);
                    for o in 0..outer {
                        for q in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + q;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let width = *node.shape.last().expect("rank >= 1");
                let rows = inv_std.len();
                let gv = &nodes[gain.0].value;
                if slot(*bias, grads) {
                    let gb = acc!(bias);
                    for r in 0..rows {
                        for j in 0..width {
                            gb[j] += g[r * width + j];
                        }
                    }
                }
                if slot(*gain, grads) {
                    let gg = acc!(gain);
                    for r in 0..rows {
                        for j in 0..width {
                            gg[j] += g[r * width + j] * normalized[r * width + j];
                        }
                    }
                }
                if slot(*x, grads) {
                    let gx = acc!(x);
                    let w = width as f64;
                    let mut dxh = vec![0.0; width];
                    for r in 0..rows {
                        let xh = &normalized[r * width..(r + 1) * width];
                        for j in 0..width {
                            dxh[j] = g[r * width + j] * gv[j];
                        }
                        let sum_d: f64 = dxh.iter().sum();
                        let sum_dx: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..width {
                            gx[r * width + j] +=
                                inv_std[r] / w * (w * dxh[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            } => {
                let (sq, sk, sv) = (&nodes[q.0].shape, &nodes[k.0].shape, &nodes[v.0].shape);
                let r = sq.len();
                let (tq, dk, tk, dv) = (sq[r - 2], sq[r - 1], sk[r - 2], sv[r - 1]);
                let batch = probs.len() / (tq * tk).max(1);
                let (vq, vk, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                // local buffers keep aliased inputs (q == k) correct
                let local = |x: Var| {
                    nodes[x.0]
                        .tracked
                        .then(|| vec![0.0; nodes[x.0].value.len()])
                };
                let (mut gq, mut gk, mut gv) = (local(*q), local(*k), local(*v));
                let mut ds = vec![0.0; tk];
                for bi in 0..batch {
                    let (qo, ko, vo) = (bi * tq * dk, bi * tk * dk, bi * tk * dv);
                    for i in 0..tq {
                        let p = &probs[(bi * tq + i) * tk..(bi * tq + i + 1) * tk];
                        let gi = &g[(bi * tq + i) * dv..(bi * tq + i + 1) * dv];
                        if let Some(gv) = gv.as_mut() {
                            for (j, pj) in p.iter().enumerate() {
                                let row = &mut gv[vo + j * dv..vo + (j + 1) * dv];
                                for (o, gg) in row.iter_mut().zip(gi) {
                                    *o += pj * gg;
                                }
                            }
                        }
                        if gq.is_none() && gk.is_none() {
                            continue;
                        }
                        let mut dot = 0.0;
                        for (j, d) in ds.iter_mut().enumerate() {
                            let vj = &vv[vo + j * dv..vo + (j + 1) * dv];
                            *d = gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                            dot += p[j] * *d;
                        }
                        for (d, pj) in ds.iter_mut().zip(p) {
                            *d = scale * pj * (*d - dot);
                        }
                        if let Some(gq) = gq.as_mut() {
                            let row = &mut gq[qo + i * dk..qo + (i + 1) * dk];
                            for (j, d) in ds.iter().enumerate() {
                                for (o, kv) in
                                    row.iter_mut().zip(&vk[ko + j * dk..ko + (j + 1) * dk])
                                {
                                    *o += d * kv;
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            let qi = &vq[qo + i * dk..qo + (i + 1) * dk];
                            for (j, d) in ds.iter().enumerate() {
                                for (o, qv) in gk[ko + j * dk..ko + (j + 1) * dk].iter_mut().zip(qi)
                                {
                                    *o += d * qv;
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
                    if let Some(buf) = buf {
                        slot(*var, grads);
                        acc!(var).iter_mut().zip(&buf).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::SqDist(points, centers) => {
                let (h, c) = (&nodes[points.0].value, &nodes[centers.0].value);
                let cs = &nodes[centers.0].shape;
                let (m, k) = (cs[0], cs[1]);
                let rows = h.len() / k.max(1);
                if slot(*points, grads) {
                    let gh = acc!(points);
                    for p in 0..rows {
                        for j in 0..m {
                            let w = 2.0 * g[p * m + j];
                            if w == 0.0 {
                                continue;
                            }
                            for q in 0..k {
                                gh[p * k + q] += w * (h[p * k + q] - c[j * k + q]);
                            }
                        }
                    }
                }
                if slot(*centers, grads) {
                    let gc = acc!(centers);
                    for p in 0..rows {
                        for j in 0..m {
                            let w = 2.0 * g[p * m + j];
                            if w == 0.0 {
                                continue;
                            }
                            for q in 0..k {
                                gc[j * k + q] -= w * (h[p * k + q] - c[j * k + q]);
                            }
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if slot(*a, grads) {
                    let ga = acc!(a);
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        1.0 / ga.len() as f64
                    } else {
                        1.0
                    };
                    let gv = g[0] * scale;
                    ga.iter_mut().for_each(|o| *o += gv);
                }
            }
        }
    }
}

/// `acc[i % acc.len()] += sign * g[i]`; `acc.len()` divides `g.len()`.
fn reduce_into(acc: &mut [f64], g: &[f64], sign: f64) {
    for ch in g.chunks_exact(acc.len()) {
        for (o, gi) in acc.iter_mut().zip(ch) {
            *o += sign * gi;
        }
    }
}

/// Gradient of one factor of a broadcast product:
/// `acc[i % na] += g[i] * other[i % nb]`, where `g` has the output length.
fn mul_grad_into(acc: &mut [f64], g: &[f64], other: &[f64]) {
    let (na, nb) = (acc.len(), other.len());
    if na == g.len() {
        for (gc, ac) in g.chunks_exact(nb).zip(acc.chunks_exact_mut(nb)) {
            for ((o, gi), ov) in ac.iter_mut().zip(gc).zip(other) {
                *o += gi * ov;
            }
        }
    } else {
        // acc is the repeated operand, so other has the output length
        for (gc, oc) in g.chunks_exact(na).zip(other.chunks_exact(na)) {
            for ((o, gi), ov) in acc.iter_mut().zip(gc).zip(oc) {
                *o += gi * ov;
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}
