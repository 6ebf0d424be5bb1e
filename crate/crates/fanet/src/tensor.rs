//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during a forward pass as a flat
//! arena of nodes; a [`Tensor`] is a copyable handle (tape id + node id)
//! into that arena. Each non-leaf node carries a backward closure that
//! distributes the output gradient onto its input nodes. Creation order is
//! topological by construction, so [`Tape::backward`] is a single reverse
//! sweep that visits each node exactly once, summing gradients from all
//! paths.
//!
//! Layout is row-major throughout; image tensors use N x H x W x C axis
//! order. Elementwise ops broadcast the right operand onto the left using
//! the right-aligned rule: after padding the right shape with leading 1s,
//! every axis must equal the left's extent or be 1.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor {
    tape: u64,
    pub(crate) id: usize,
}

type BackwardFn = Box<dyn Fn(&[f64], &[Node], &mut [Option<Vec<f64>>])>;

pub(crate) struct Node {
    pub(crate) data: Vec<f64>,
    pub(crate) shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    backward: Option<BackwardFn>,
}

/// Arena of tensors plus the recorded operations of one forward pass.
///
/// A tape is confined to one worker at a time; independent tapes may run
/// in parallel.
pub struct Tape {
    tape_id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            tape_id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn check(&self, t: Tensor) -> Result<()> {
        if t.tape != self.tape_id || t.id >= self.nodes.len() {
            return Err(Error::DetachedTensor);
        }
        Ok(())
    }

    /// Create a leaf tensor. Leaves receive gradients but have no inputs.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || data.len() != numel {
            return Err(Error::BadShape {
                op: "leaf",
                expected: format!("{} elements for shape", numel),
                shape: shape.to_vec(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("leaf tensor".into()));
        }
        Ok(self.push(data, shape.to_vec(), None))
    }

    /// Leaf filled with a constant.
    pub fn fill(&mut self, value: f64, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        self.leaf(vec![value; numel], shape)
    }

    /// Scalar leaf of shape `[1]`.
    pub fn scalar_leaf(&mut self, value: f64) -> Result<Tensor> {
        self.leaf(vec![value], &[1])
    }

    pub(crate) fn push(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            backward,
        });
        Tensor {
            tape: self.tape_id,
            id,
        }
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    pub fn data(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].data
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, t: Tensor) -> Result<f64> {
        let n = &self.nodes[t.id];
        if n.data.len() != 1 {
            return Err(Error::BadShape {
                op: "scalar",
                expected: "single element".into(),
                shape: n.shape.clone(),
            });
        }
        Ok(n.data[0])
    }

    /// Gradient buffer written by the last [`Tape::backward`] call, if any
    /// gradient reached this tensor.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.id].grad.as_deref()
    }

    /// Reverse sweep from a scalar loss. Every tensor reachable from the
    /// loss ends up holding dLoss/dTensor; contributions from multiple
    /// paths sum. Gradients from a previous backward call are replaced.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        self.check(loss)?;
        let loss_node = &self.nodes[loss.id];
        if loss_node.data.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_node.shape.clone(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if let Some(bw) = &self.nodes[id].backward {
                bw(&gout, &self.nodes, &mut grads);
            }
            grads[id] = Some(gout);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        Ok(())
    }

    /// Debug dump: first line is the space-separated shape, then one
    /// row-major value per line with 17 significant digits.
    pub fn dump_text(&self, t: Tensor) -> Result<String> {
        self.check(t)?;
        let node = &self.nodes[t.id];
        let mut out = node
            .shape
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        out.push('\n');
        for v in &node.data {
            out.push_str(&format!("{:.16e}\n", v));
        }
        Ok(out)
    }

    // ── Elementwise ops (right operand broadcasts onto the left) ──

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_op("add", a, b, |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_op("sub", a, b, |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_op("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    /// Shared machinery for add/sub/mul: forward map plus the pair of
    /// local partial derivatives (d/da, d/db) at each element.
    fn binary_op(
        &mut self,
        opname: &'static str,
        a: Tensor,
        b: Tensor,
        fwd: fn(f64, f64) -> f64,
        partials: fn(f64, f64) -> (f64, f64),
    ) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let a_shape = self.nodes[a.id].shape.clone();
        let b_shape = self.nodes[b.id].shape.clone();
        if !broadcastable(&a_shape, &b_shape) {
            return Err(Error::ShapeMismatch {
                op: opname,
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let b_exp = expand_to(&self.nodes[b.id].data, &b_shape, &a_shape);
        let out: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(&b_exp)
            .map(|(&x, &y)| fwd(x, y))
            .collect();
        let bw: BackwardFn = Box::new(move |g, nodes, grads| {
            let a_data = &nodes[a.id].data;
            let b_shape = &nodes[b.id].shape;
            let a_shape = &nodes[a.id].shape;
            let b_exp = expand_to(&nodes[b.id].data, b_shape, a_shape);
            let mut db_full = vec![0.0; g.len()];
            {
                let da = grad_buf(grads, a.id, a_data.len());
                for i in 0..g.len() {
                    let (pa, pb) = partials(a_data[i], b_exp[i]);
                    da[i] += g[i] * pa;
                    db_full[i] = g[i] * pb;
                }
            }
            let reduced = reduce_to(&db_full, a_shape, b_shape);
            let db = grad_buf(grads, b.id, nodes[b.id].data.len());
            for (d, r) in db.iter_mut().zip(reduced) {
                *d += r;
            }
        });
        Ok(self.push(out, a_shape, Some(bw)))
    }

    pub fn neg(&mut self, a: Tensor) -> Result<Tensor> {
        self.check(a)?;
        let out: Vec<f64> = self.nodes[a.id].data.iter().map(|v| -v).collect();
        let shape = self.nodes[a.id].shape.clone();
        let bw: BackwardFn = Box::new(move |g, nodes, grads| {
            let da = grad_buf(grads, a.id, nodes[a.id].data.len());
            for (d, &gv) in da.iter_mut().zip(g) {
                *d -= gv;
            }
        });
        Ok(self.push(out, shape, Some(bw)))
    }

    pub fn exp(&mut self, a: Tensor) -> Result<Tensor> {
        self.check(a)?;
        let out: Vec<f64> = self.nodes[a.id].data.iter().map(|v| v.exp()).collect();
        let shape = self.nodes[a.id].shape.clone();
        let id = self.nodes.len();
        let bw: BackwardFn = Box::new(move |g, nodes, grads| {
            let y = &nodes[id].data;
            let da = grad_buf(grads, a.id, nodes[a.id].data.len());
            for i in 0..g.len() {
                da[i] += g[i] * y[i];
            }
        });
        Ok(self.push(out, shape, Some(bw)))
    }

    /// Elementwise reciprocal 1/x.
    pub fn recip(&mut self, a: Tensor) -> Result<Tensor> {
        self.check(a)?;
        let out: Vec<f64> = self.nodes[a.id].data.iter().map(|v| 1.0 / v).collect();
        let shape = self.nodes[a.id].shape.clone();
        let id = self.nodes.len();
        let bw: BackwardFn = Box::new(move |g, nodes, grads| {
            let y = &nodes[id].data;
            let da = grad_buf(grads, a.id, nodes[a.id].data.len());
            for i in 0..g.len() {
                da[i] -= g[i] * y[i] * y[i];
            }
        });
        Ok(self.push(out, shape, Some(bw)))
    }

    /// Multiply by a compile-time constant (no gradient for the constant).
    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        self.check(a)?;
        let out: Vec<f64> = self.nodes[a.id].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[a.id].shape.clone();
        let bw: BackwardFn = Box::new(move |g, nodes, grads| {
            let da = grad_buf(grads, a.id, nodes[a.id].data.len());
            for i in 0..g.len() {
                da[i] += g[i] * c;
            }
        });
        Ok(self.push(out, shape, Some(bw)))
    }

    pub fn reshape(&mut self, a: Tensor, new_shape: &[usize]) -> Result<Tensor> {
        self.check(a)?;
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[a.id].data.len() {
            return Err(Error::BadShape {
                op: "reshape",
                expected: format!("{} elements", self.nodes[a.id].data.len()),
                shape: new_shape.to_vec(),
            });
        }
        let out = self.nodes[a.id].data.clone();
        let bw: BackwardFn = Box::new(move |g, nodes, grads| {
            let da = grad_buf(grads, a.id, nodes[a.id].data.len());
            for (d, &gv) in da.iter_mut().zip(g) {
                *d += gv;
            }
        });
        Ok(self.push(out, new_shape.to_vec(), Some(bw)))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        self.check(a)?;
        let total: f64 = self.nodes[a.id].data.iter().sum();
        let bw: BackwardFn = Box::new(move |g, nodes, grads| {
            let da = grad_buf(grads, a.id, nodes[a.id].data.len());
            for d in da.iter_mut() {
                *d += g[0];
            }
        });
        Ok(self.push(vec![total], vec![1], Some(bw)))
    }

    /// Standard 2-d matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let a_shape = self.nodes[a.id].shape.clone();
        let b_shape = self.nodes[b.id].shape.clone();
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let out = matmul_raw(&self.nodes[a.id].data, &self.nodes[b.id].data, m, k, n);
        let bw: BackwardFn = Box::new(move |g, nodes, grads| {
            let a_data = &nodes[a.id].data;
            let b_data = &nodes[b.id].data;
            // dA = g . B^T
            {
                let da = grad_buf(grads, a.id, m * k);
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * b_data[p * n + j];
                        }
                        da[i * k + p] += s;
                    }
                }
            }
            // dB = A^T . g
            {
                let db = grad_buf(grads, b.id, k * n);
                for p in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += a_data[i * k + p] * g[i * n + j];
                        }
                        db[p * n + j] += s;
                    }
                }
            }
        });
        Ok(self.push(out, vec![m, n], Some(bw)))
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

/// Fetch (allocating on first touch) the gradient accumulator for a node.
pub(crate) fn grad_buf<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    id: usize,
    len: usize,
) -> &'g mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

/// Accumulate a local contribution into a node's gradient. Safe when
/// several of an op's inputs alias the same node.
pub(crate) fn add_into(grads: &mut [Option<Vec<f64>>], id: usize, contrib: &[f64]) {
    let buf = grad_buf(grads, id, contrib.len());
    for (b, &c) in buf.iter_mut().zip(contrib) {
        *b += c;
    }
}

/// True when `from` broadcasts onto `target` under the right-aligned rule.
pub(crate) fn broadcastable(target: &[usize], from: &[usize]) -> bool {
    if from.len() > target.len() {
        return false;
    }
    let offset = target.len() - from.len();
    from.iter()
        .zip(&target[offset..])
        .all(|(&f, &t)| f == t || f == 1)
}

/// Materialize `from` expanded to `target` shape.
pub(crate) fn expand_to(data: &[f64], from: &[usize], target: &[usize]) -> Vec<f64> {
    if from == target {
        return data.to_vec();
    }
    let rank = target.len();
    let mut padded = vec![1usize; rank];
    padded[rank - from.len()..].copy_from_slice(from);
    let numel: usize = target.iter().product();
    let mut out = vec![0.0; numel];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src = 0;
        let mut stride = 1;
        for d in (0..rank).rev() {
            let coord = rem % target[d];
            rem /= target[d];
            let c = if padded[d] == 1 { 0 } else { coord };
            src += c * stride;
            stride *= padded[d];
        }
        *slot = data[src];
    }
    out
}

/// Sum a gradient of `from_shape` down to `to_shape` (the broadcast adjoint).
pub(crate) fn reduce_to(grad: &[f64], from_shape: &[usize], to_shape: &[usize]) -> Vec<f64> {
    if from_shape == to_shape {
        return grad.to_vec();
    }
    let rank = from_shape.len();
    let mut padded = vec![1usize; rank];
    padded[rank - to_shape.len()..].copy_from_slice(to_shape);
    let numel: usize = to_shape.iter().product();
    let mut out = vec![0.0; numel];
    for (flat, &gv) in grad.iter().enumerate() {
        let mut rem = flat;
        let mut dst = 0;
        let mut stride = 1;
        for d in (0..rank).rev() {
            let coord = rem % from_shape[d];
            rem /= from_shape[d];
            let c = if padded[d] == 1 { 0 } else { coord };
            dst += c * stride;
            stride *= padded[d];
        }
        out[dst] += gv;
    }
    out
}

/// Max relative error between the analytic gradient of `f` at `x0` and a
/// central finite difference, elementwise:
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_difference_check<F>(f: F, x0: &[f64], shape: &[usize], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid("finite difference eps must be positive".into()));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(x0.to_vec(), shape)?;
    let y = f(&mut tape, x)?;
    if tape.data(y).len() != 1 {
        return Err(Error::NonScalarLoss {
            shape: tape.shape(y).to_vec(),
        });
    }
    tape.backward(y)?;
    let analytic: Vec<f64> = match tape.grad(x) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x0.len()],
    };

    let eval = |xs: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let xt = t.leaf(xs.to_vec(), shape)?;
        let yt = f(&mut t, xt)?;
        t.scalar(yt)
    };

    let mut max_rel = 0.0f64;
    let mut probe = x0.to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = eval(&probe)?;
        probe[i] = orig - eps;
        let fm = eval(&probe)?;
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn add_basic() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let b = t.leaf(vec![3.0, 4.0], &[2]).unwrap();
        let c = t.add(a, b).unwrap();
        assert_eq!(t.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn mul_identity() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.5, -2.0, 0.25], &[3]).unwrap();
        let ones = t.fill(1.0, &[3]).unwrap();
        let y = t.mul(x, ones).unwrap();
        assert_eq!(t.data(y), t.data(x));
    }

    #[test]
    fn broadcast_channel_weights_matches_loop_oracle() {
        // 2x2x3 feature block times per-channel weights shaped 1x1x3.
        let feat: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let w = [2.0, -1.0, 0.5];
        let mut t = Tape::new();
        let x = t.leaf(feat.clone(), &[2, 2, 3]).unwrap();
        let wt = t.leaf(w.to_vec(), &[1, 1, 3]).unwrap();
        let y = t.mul(x, wt).unwrap();
        let mut expected = vec![0.0; 12];
        for h in 0..2 {
            for ww in 0..2 {
                for c in 0..3 {
                    let i = (h * 2 + ww) * 3 + c;
                    expected[i] = feat[i] * w[c];
                }
            }
        }
        assert_eq!(t.data(y), &expected[..]);
    }

    #[test]
    fn incompatible_shapes_error_names_both() {
        let mut t = Tape::new();
        let a = t.leaf(vec![0.0; 6], &[2, 3]).unwrap();
        let b = t.leaf(vec![0.0; 4], &[2, 2]).unwrap();
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_identity_and_small() {
        let mut t = Tape::new();
        let eye = t.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let m = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let p = t.matmul(eye, m).unwrap();
        assert_eq!(t.data(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.leaf(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = t.leaf(vec![3.0, 4.0], &[2, 1]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[11.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let mut t = Tape::new();
        let a = t.leaf(vec![0.0; 6], &[2, 3]).unwrap();
        let b = t.leaf(vec![0.0; 8], &[4, 2]).unwrap();
        assert!(t.matmul(a, b).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.3; 24], &[2, 3, 4]).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 24][..]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0][..]);
    }

    #[test]
    fn gradient_accumulates_across_paths() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.5, -1.0], &[2]).unwrap();
        let s1 = t.sum(x).unwrap();
        let s2 = t.sum(x).unwrap();
        let loss = t.add(s1, s2).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0][..]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(
            t.backward(x),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn cross_tape_use_is_detached() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.leaf(vec![1.0], &[1]).unwrap();
        let b = t2.leaf(vec![1.0], &[1]).unwrap();
        assert!(matches!(t1.add(a, b), Err(Error::DetachedTensor)));
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let mut t = Tape::new();
        assert!(t.leaf(vec![f64::NAN], &[1]).is_err());
        assert!(t.leaf(vec![f64::INFINITY], &[1]).is_err());
    }

    #[test]
    fn fd_check_sum_of_squares_tight() {
        let xs: Vec<f64> = (0..8).map(|i| (i as f64) * 0.37 - 1.2).collect();
        let err = finite_difference_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &xs,
            &[8],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "rel err {err}");
    }

    #[test]
    fn fd_check_constant_is_zero() {
        let err = finite_difference_check(
            |t, x| {
                let zero = t.fill(0.0, &[4])?;
                let z = t.mul(x, zero)?;
                t.sum(z)
            },
            &[1.0, 2.0, 3.0, 4.0],
            &[4],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fd_check_matmul() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // check gradient w.r.t. the left operand
        let b2 = b.clone();
        let w2 = w.clone();
        let err = finite_difference_check(
            move |t, x| {
                let bt = t.leaf(b2.clone(), &[4, 2])?;
                let wt = t.leaf(w2.clone(), &[3, 2])?;
                let p = t.matmul(x, bt)?;
                let weighted = t.mul(p, wt)?;
                t.sum(weighted)
            },
            &a,
            &[3, 4],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "dA rel err {err}");
        // and w.r.t. the right operand
        let a2 = a.clone();
        let err = finite_difference_check(
            move |t, x| {
                let at = t.leaf(a2.clone(), &[3, 4])?;
                let wt = t.leaf(w.clone(), &[3, 2])?;
                let p = t.matmul(at, x)?;
                let weighted = t.mul(p, wt)?;
                t.sum(weighted)
            },
            &b,
            &[4, 2],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "dB rel err {err}");
    }

    #[test]
    fn elementwise_fd_many_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let xs: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let other: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let o1 = other.clone();
            let add_err = finite_difference_check(
                move |t, x| {
                    let o = t.leaf(o1.clone(), &[6])?;
                    let y = t.add(x, o)?;
                    let sq = t.mul(y, y)?;
                    t.sum(sq)
                },
                &xs,
                &[6],
                1e-5,
            )
            .unwrap();
            assert!(add_err <= 1e-6);
            let o2 = other.clone();
            let mul_err = finite_difference_check(
                move |t, x| {
                    let o = t.leaf(o2.clone(), &[6])?;
                    let y = t.mul(x, o)?;
                    t.sum(y)
                },
                &xs,
                &[6],
                1e-5,
            )
            .unwrap();
            assert!(mul_err <= 1e-6);
        }
    }

    #[test]
    fn dump_text_format() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 0.5], &[2, 1]).unwrap();
        let dump = t.dump_text(x).unwrap();
        let mut lines = dump.lines();
        assert_eq!(lines.next().unwrap(), "2 1");
        let v: f64 = lines.next().unwrap().parse().unwrap();
        assert_eq!(v, 1.0);
        // 17 significant digits: mantissa with 16 fractional places
        assert!(dump.contains("5.0000000000000000e-1"));
    }

    proptest! {
        // Broadcast-multiply equals the explicit loop on every shape up to 4x4x4x4.
        #[test]
        fn broadcast_mul_matches_loop(
            dims in proptest::collection::vec(1usize..=4, 1..=4),
            mask in proptest::collection::vec(proptest::bool::ANY, 4),
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a_shape = dims.clone();
            // b: same rank with a random subset of axes collapsed to 1
            let b_shape: Vec<usize> = a_shape
                .iter()
                .enumerate()
                .map(|(i, &d)| if mask[i % mask.len()] { 1 } else { d })
                .collect();
            let a_n: usize = a_shape.iter().product();
            let b_n: usize = b_shape.iter().product();
            let a_data: Vec<f64> = (0..a_n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b_data: Vec<f64> = (0..b_n).map(|_| rng.gen_range(-3.0..3.0)).collect();

            let mut t = Tape::new();
            let at = t.leaf(a_data.clone(), &a_shape).unwrap();
            let bt = t.leaf(b_data.clone(), &b_shape).unwrap();
            let y = t.mul(at, bt).unwrap();

            // explicit loop oracle
            let rank = a_shape.len();
            let mut expected = vec![0.0; a_n];
            for (flat, e) in expected.iter_mut().enumerate() {
                let mut rem = flat;
                let mut bsrc = 0;
                let mut stride = 1;
                for d in (0..rank).rev() {
                    let coord = rem % a_shape[d];
                    rem /= a_shape[d];
                    let c = if b_shape[d] == 1 { 0 } else { coord };
                    bsrc += c * stride;
                    stride *= b_shape[d];
                }
                *e = a_data[flat] * b_data[bsrc];
            }
            prop_assert_eq!(t.data(y), &expected[..]);
        }

        // Sum-of-elements loss gives an all-ones gradient for any shape.
        #[test]
        fn sum_loss_gradient_is_ones(dims in proptest::collection::vec(1usize..=5, 1..=4)) {
            let n: usize = dims.iter().product();
            let mut t = Tape::new();
            let x = t.leaf(vec![0.123; n], &dims).unwrap();
            let s = t.sum(x).unwrap();
            t.backward(s).unwrap();
            prop_assert_eq!(t.grad(x).unwrap(), &vec![1.0; n][..]);
        }
    }
}
