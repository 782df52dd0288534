//! Reverse-mode gradient propagation over the graph recorded in
//! [`crate::tensor`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{
    broadcast_zip, matmul_nt, matmul_tn, mean_var, permute_data, reduce_to_shape, Node, Op, Tensor,
    TensorError, TensorResult,
};

/// Gradients keyed by tensor identity, as returned by
/// [`Tensor::backward_collect`].
pub struct Gradients {
    map: BTreeMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn take(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        self.map.remove(&t.id())
    }
}

impl Tensor {
    /// Populates the grad buffer of every tracked tensor reachable from this
    /// scalar loss. Gradients accumulate additively into existing buffers.
    /// The graph is freed as it is traversed; a second call is an error.
    pub fn backward(&self) -> TensorResult<()> {
        self.run_backward(true).map(|_| ())
    }

    /// Like [`Tensor::backward`] but leaves grad buffers untouched and returns
    /// the gradients instead. Used where several graphs share parameter
    /// tensors and the caller reduces the results in a fixed order.
    pub fn backward_collect(&self) -> TensorResult<Gradients> {
        self.run_backward(false)
    }

    fn run_backward(&self, write_buffers: bool) -> TensorResult<Gradients> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss { numel: self.numel() });
        }
        if self.mark_consumed() {
            return Err(TensorError::GraphConsumed);
        }

        // Iterative depth-first postorder. Nodes are taken out of their
        // tensors here, which is what frees the graph afterwards.
        let mut visited: BTreeSet<u64> = BTreeSet::new();
        let mut nodes: BTreeMap<u64, Node> = BTreeMap::new();
        let mut handles: BTreeMap<u64, Tensor> = BTreeMap::new();
        let mut order: Vec<u64> = Vec::new();
        let mut stack: Vec<(u64, usize)> = Vec::new();

        visited.insert(self.id());
        if let Some(n) = self.take_node() {
            nodes.insert(self.id(), n);
        }
        handles.insert(self.id(), self.clone());
        stack.push((self.id(), 0));

        while let Some(&mut (id, ref mut next)) = stack.last_mut() {
            let degree = nodes.get(&id).map_or(0, |n| n.parents.len());
            if *next < degree {
                let child = nodes[&id].parents[*next].clone();
                *next += 1;
                if visited.insert(child.id()) {
                    if let Some(n) = child.take_node() {
                        nodes.insert(child.id(), n);
                    }
                    stack.push((child.id(), 0));
                    handles.insert(child.id(), child);
                }
            } else {
                order.push(id);
                stack.pop();
            }
        }

        let mut grads: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        grads.insert(self.id(), vec![1.0]);

        // Postorder lists parents before users, so walk it in reverse: every
        // tensor has its full upstream gradient before it propagates.
        for id in order.iter().rev() {
            let Some(node) = nodes.get(id) else { continue };
            let Some(gout) = grads.get(id).cloned() else { continue };
            let out = &handles[id];
            propagate(&node.op, &node.parents, out, &gout, &mut |idx: usize, contrib: Vec<f64>| {
                let pid = node.parents[idx].id();
                grads
                    .entry(pid)
                    .and_modify(|acc| {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    })
                    .or_insert(contrib);
            });
        }

        if write_buffers {
            for (id, g) in &grads {
                let t = &handles[id];
                if t.requires_grad() {
                    t.accumulate_grad(g);
                }
            }
        }
        Ok(Gradients { map: grads })
    }
}

fn propagate(
    op: &Op,
    parents: &[Tensor],
    out: &Tensor,
    gout: &[f64],
    emit: &mut dyn FnMut(usize, Vec<f64>),
) {
    let wants = |i: usize| parents[i].requires_grad();
    match op {
        Op::Add => {
            for i in 0..2 {
                if wants(i) {
                    emit(i, reduce_to_shape(gout, out.shape(), parents[i].shape()));
                }
            }
        }
        Op::Sub => {
            if wants(0) {
                emit(0, reduce_to_shape(gout, out.shape(), parents[0].shape()));
            }
            if wants(1) {
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                emit(1, reduce_to_shape(&neg, out.shape(), parents[1].shape()));
            }
        }
        Op::Mul => {
            let (a, b) = (&parents[0], &parents[1]);
            if wants(0) {
                let g = mul_expanded(gout, out.shape(), b);
                emit(0, reduce_to_shape(&g, out.shape(), a.shape()));
            }
            if wants(1) {
                let g = mul_expanded(gout, out.shape(), a);
                emit(1, reduce_to_shape(&g, out.shape(), b.shape()));
            }
        }
        Op::Div => {
            let (a, b) = (&parents[0], &parents[1]);
            if wants(0) {
                let inv =
                    broadcast_zip(gout, out.shape(), b.data(), b.shape(), out.shape(), |g, bv| g / bv);
                emit(0, reduce_to_shape(&inv, out.shape(), a.shape()));
            }
            if wants(1) {
                let local = broadcast_zip(
                    a.data(),
                    a.shape(),
                    b.data(),
                    b.shape(),
                    out.shape(),
                    |av, bv| -av / (bv * bv),
                );
                let g: Vec<f64> = local.iter().zip(gout).map(|(l, g)| l * g).collect();
                emit(1, reduce_to_shape(&g, out.shape(), b.shape()));
            }
        }
        Op::Scale(c) => {
            if wants(0) {
                emit(0, gout.iter().map(|g| g * c).collect());
            }
        }
        Op::AddScalar(_) => {
            if wants(0) {
                emit(0, gout.to_vec());
            }
        }
        Op::Matmul { m, k, n } => {
            let (a, b) = (&parents[0], &parents[1]);
            if wants(0) {
                let mut da = vec![0.0; m * k];
                matmul_nt(gout, b.data(), *m, *n, *k, &mut da);
                emit(0, da);
            }
            if wants(1) {
                let mut db = vec![0.0; k * n];
                matmul_tn(a.data(), gout, *k, *m, *n, &mut db);
                emit(1, db);
            }
        }
        Op::Reshape => {
            if wants(0) {
                emit(0, gout.to_vec());
            }
        }
        Op::Permute(perm) => {
            if wants(0) {
                let mut inv = vec![0usize; perm.len()];
                for (p, &a) in perm.iter().enumerate() {
                    inv[a] = p;
                }
                let (_, g) = permute_data(out.shape(), gout, &inv);
                emit(0, g);
            }
        }
        Op::Slice { axis, start, len } => {
            if wants(0) {
                let parent = &parents[0];
                let extent = parent.shape()[*axis];
                let outer: usize = parent.shape()[..*axis].iter().product();
                let inner: usize = parent.shape()[*axis + 1..].iter().product();
                let mut g = vec![0.0; parent.numel()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&gout[src..src + len * inner]);
                }
                emit(0, g);
            }
        }
        Op::Concat { axis } => {
            let extent = out.shape()[*axis];
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[*axis + 1..].iter().product();
            let mut offset = 0;
            for (i, p) in parents.iter().enumerate() {
                let part = p.shape()[*axis];
                if wants(i) {
                    let mut g = vec![0.0; p.numel()];
                    for o in 0..outer {
                        let src = (o * extent + offset) * inner;
                        let dst = o * part * inner;
                        g[dst..dst + part * inner].copy_from_slice(&gout[src..src + part * inner]);
                    }
                    emit(i, g);
                }
                offset += part;
            }
        }
        Op::SumAll => {
            if wants(0) {
                emit(0, vec![gout[0]; parents[0].numel()]);
            }
        }
        Op::Sigmoid => {
            if wants(0) {
                let g = out.data().iter().zip(gout).map(|(&y, g)| g * y * (1.0 - y)).collect();
                emit(0, g);
            }
        }
        Op::Tanh => {
            if wants(0) {
                let g = out.data().iter().zip(gout).map(|(&y, g)| g * (1.0 - y * y)).collect();
                emit(0, g);
            }
        }
        Op::Gelu => {
            if wants(0) {
                let g = parents[0]
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&x, g)| g * (math::norm_cdf(x) + x * math::norm_pdf(x)))
                    .collect();
                emit(0, g);
            }
        }
        Op::Ln => {
            if wants(0) {
                let g = parents[0].data().iter().zip(gout).map(|(&x, g)| g / x).collect();
                emit(0, g);
            }
        }
        Op::Conv1d { stride } => {
            let x = &parents[0];
            let kernel = &parents[1];
            let (c_in, t) = (x.shape()[0], x.shape()[1]);
            let (c_out, _, l) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
            let k_frames = out.shape()[1];
            if wants(0) {
                let w = kernel.data();
                let mut dx = vec![0.0; x.numel()];
                for co in 0..c_out {
                    let grow = &gout[co * k_frames..(co + 1) * k_frames];
                    for ci in 0..c_in {
                        let wrow = &w[(co * c_in + ci) * l..(co * c_in + ci + 1) * l];
                        let drow = &mut dx[ci * t..(ci + 1) * t];
                        for (k, &g) in grow.iter().enumerate() {
                            let base = k * stride;
                            for (dl, &wv) in wrow.iter().enumerate() {
                                drow[base + dl] += g * wv;
                            }
                        }
                    }
                }
                emit(0, dx);
            }
            if wants(1) {
                let xd = x.data();
                let mut dw = vec![0.0; kernel.numel()];
                for co in 0..c_out {
                    let grow = &gout[co * k_frames..(co + 1) * k_frames];
                    for ci in 0..c_in {
                        let xrow = &xd[ci * t..(ci + 1) * t];
                        let wrow = &mut dw[(co * c_in + ci) * l..(co * c_in + ci + 1) * l];
                        for (k, &g) in grow.iter().enumerate() {
                            let base = k * stride;
                            for (dl, w) in wrow.iter_mut().enumerate() {
                                *w += g * xrow[base + dl];
                            }
                        }
                    }
                }
                emit(1, dw);
            }
            if parents.len() == 3 && wants(2) {
                let mut db = vec![0.0; c_out];
                for (co, d) in db.iter_mut().enumerate() {
                    *d = gout[co * k_frames..(co + 1) * k_frames].iter().sum();
                }
                emit(2, db);
            }
        }
        Op::ConvTranspose1d { stride } => {
            let f = &parents[0];
            let kernel = &parents[1];
            let (c_in, k_frames) = (f.shape()[0], f.shape()[1]);
            let (_, c_out, l) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
            let t_out = out.shape()[1];
            if wants(0) {
                let w = kernel.data();
                let mut df = vec![0.0; f.numel()];
                for ci in 0..c_in {
                    let drow = &mut df[ci * k_frames..(ci + 1) * k_frames];
                    for co in 0..c_out {
                        let wrow = &w[(ci * c_out + co) * l..(ci * c_out + co + 1) * l];
                        let grow = &gout[co * t_out..(co + 1) * t_out];
                        for (k, d) in drow.iter_mut().enumerate() {
                            let base = k * stride;
                            let mut acc = 0.0;
                            for (dl, &wv) in wrow.iter().enumerate() {
                                acc += wv * grow[base + dl];
                            }
                            *d += acc;
                        }
                    }
                }
                emit(0, df);
            }
            if wants(1) {
                let fd = f.data();
                let mut dw = vec![0.0; kernel.numel()];
                for ci in 0..c_in {
                    let frow = &fd[ci * k_frames..(ci + 1) * k_frames];
                    for co in 0..c_out {
                        let grow = &gout[co * t_out..(co + 1) * t_out];
                        let wrow = &mut dw[(ci * c_out + co) * l..(ci * c_out + co + 1) * l];
                        for (k, &fv) in frow.iter().enumerate() {
                            let base = k * stride;
                            for (dl, w) in wrow.iter_mut().enumerate() {
                                *w += fv * grow[base + dl];
                            }
                        }
                    }
                }
                emit(1, dw);
            }
        }
        Op::LayerNorm { eps } => {
            let x = &parents[0];
            let gain = &parents[1];
            let d = *x.shape().last().expect("non-empty");
            let positions = x.numel() / d;
            let xd = x.data();
            let gd = gain.data();
            let mut dx = wants(0).then(|| vec![0.0; x.numel()]);
            let mut dgain = wants(1).then(|| vec![0.0; d]);
            let mut dshift = wants(2).then(|| vec![0.0; d]);
            for p in 0..positions {
                let row = &xd[p * d..(p + 1) * d];
                let grow = &gout[p * d..(p + 1) * d];
                let (mu, var) = mean_var(row);
                let inv = 1.0 / math::sqrt(var + eps);
                if let Some(dg) = dgain.as_mut() {
                    for i in 0..d {
                        dg[i] += grow[i] * (row[i] - mu) * inv;
                    }
                }
                if let Some(ds) = dshift.as_mut() {
                    for i in 0..d {
                        ds[i] += grow[i];
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    // dx = (g - mean(g) - xhat * mean(g .* xhat)) / s with g = gain .* dy
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for i in 0..d {
                        let g = gd[i] * grow[i];
                        let xh = (row[i] - mu) * inv;
                        m1 += g;
                        m2 += g * xh;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    let drow = &mut dx[p * d..(p + 1) * d];
                    for i in 0..d {
                        let g = gd[i] * grow[i];
                        let xh = (row[i] - mu) * inv;
                        drow[i] = (g - m1 - xh * m2) * inv;
                    }
                }
            }
            if let Some(g) = dx {
                emit(0, g);
            }
            if let Some(g) = dgain {
                emit(1, g);
            }
            if let Some(g) = dshift {
                emit(2, g);
            }
        }
        Op::Segment(spec) => {
            if wants(0) {
                let d = out.shape()[0];
                let (i_len, j_len) = (spec.chunk, spec.positions());
                let mut dx = vec![0.0; d * spec.frames];
                for dc in 0..d {
                    let drow = &mut dx[dc * spec.frames..(dc + 1) * spec.frames];
                    for i in 0..i_len {
                        for j in 0..j_len {
                            let padded = j * spec.hop + i;
                            if let Some(k) = spec.unpadded_index(padded) {
                                drow[k] += gout[(dc * i_len + i) * j_len + j];
                            }
                        }
                    }
                }
                emit(0, dx);
            }
        }
        Op::Merge(spec) => {
            if wants(0) {
                let d = out.shape()[0];
                let (i_len, j_len) = (spec.chunk, spec.positions());
                let cov = spec.coverage();
                let mut du = vec![0.0; d * i_len * j_len];
                for dc in 0..d {
                    let grow = &gout[dc * spec.frames..(dc + 1) * spec.frames];
                    for i in 0..i_len {
                        for j in 0..j_len {
                            let padded = j * spec.hop + i;
                            if let Some(k) = spec.unpadded_index(padded) {
                                du[(dc * i_len + i) * j_len + j] = grow[k] / cov[padded] as f64;
                            }
                        }
                    }
                }
                emit(0, du);
            }
        }
    }
}

/// gout times `other` broadcast-expanded to the output shape.
fn mul_expanded(gout: &[f64], out_shape: &[usize], other: &Tensor) -> Vec<f64> {
    broadcast_zip(gout, out_shape, other.data(), other.shape(), out_shape, |g, v| g * v)
}
