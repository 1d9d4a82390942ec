//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Graph`] records operations in execution order; every node stores its
//! value, so the backward pass is a single reverse sweep of vector-Jacobian
//! products and a forward [`Graph::replay`] can re-evaluate the whole tape
//! after leaf values change (used by the finite-difference oracle). The tape
//! is rebuilt each training step, which keeps alternating two parameter sets
//! trivially correct.
//!
//! The op set is the minimum needed for MLPs with bias rows, graph-mean
//! message passing, set pooling, and squared-error losses. No broadcasting
//! beyond bias-add over rows.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Params, Tensor};
use std::sync::Arc;

pub type NodeId = usize;

/// Published SELU constants.
pub fn selu_lambda<F: Scalar>() -> F {
    F::cast(1.0507009873554805)
}

pub fn selu_alpha<F: Scalar>() -> F {
    F::cast(1.6732632423543772)
}

pub fn selu_scalar<F: Scalar>(x: F) -> F {
    let lambda = selu_lambda::<F>();
    let alpha = selu_alpha::<F>();
    if x > F::zero() {
        lambda * x
    } else {
        lambda * alpha * (x.exp() - F::one())
    }
}

fn selu_deriv<F: Scalar>(x: F) -> F {
    let lambda = selu_lambda::<F>();
    let alpha = selu_alpha::<F>();
    if x > F::zero() {
        lambda
    } else {
        lambda * alpha * x.exp()
    }
}

/// Adjacency lists for graph-mean aggregation: `adj[i]` holds the source rows
/// averaged into row `i`.
pub type Adjacency = Arc<Vec<Vec<u32>>>;

#[derive(Clone)]
enum Op<F> {
    Leaf { param: bool },
    Matmul(NodeId, NodeId),
    BiasAddRows(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Selu(NodeId),
    ConcatCols(Vec<NodeId>),
    RepeatRows(NodeId, usize),
    MeanRows(NodeId),
    SumAll(NodeId),
    L2Normalize(NodeId),
    NeighborMean(NodeId, Adjacency),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

/// Node ids of one [`Params`] set bound into a graph, in parameter order.
pub struct ParamBinding {
    pub ids: Vec<NodeId>,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id].value
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Constant leaf: no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf { param: false }, false)
    }

    /// Parameter leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf { param: true }, true)
    }

    /// Bind every tensor of a parameter set as a leaf. With `trainable` false
    /// the leaves are constants and backward skips their whole subgraph.
    pub fn bind_params(&mut self, params: &Params<F>, trainable: bool) -> ParamBinding {
        let ids = (0..params.len())
            .map(|i| {
                let value = params.value(i).clone();
                if trainable {
                    self.param(value)
                } else {
                    self.leaf(value)
                }
            })
            .collect();
        ParamBinding { ids }
    }

    /// Copy gradients for a binding back into the parameter set's grad slots.
    /// Parameters the loss never touched get explicit zero gradients.
    pub fn write_grads(&self, binding: &ParamBinding, params: &mut Params<F>) -> Result<()> {
        for (i, &id) in binding.ids.iter().enumerate() {
            let g = match self.grad(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(params.value(i).shape().to_vec()),
            };
            params.set_grad(i, g)?;
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn record(&mut self, op: Op<F>) -> Result<NodeId> {
        let value = self.eval(&op)?;
        let requires_grad = match &op {
            Op::Leaf { param } => *param,
            Op::Matmul(a, b)
            | Op::BiasAddRows(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => self.rg(*a) || self.rg(*b),
            Op::Scale(a, _)
            | Op::Selu(a)
            | Op::RepeatRows(a, _)
            | Op::MeanRows(a)
            | Op::SumAll(a)
            | Op::L2Normalize(a)
            | Op::NeighborMean(a, _) => self.rg(*a),
            Op::ConcatCols(ids) => ids.iter().any(|&i| self.rg(i)),
        };
        Ok(self.push(value, op, requires_grad))
    }

    // ---- op builders ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Matmul(a, b))
    }

    /// `a (r x c) + bias (vector of length c)`, broadcast over rows.
    pub fn bias_add_rows(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Op::BiasAddRows(a, bias))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: F) -> Result<NodeId> {
        self.record(Op::Scale(a, s))
    }

    pub fn selu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Selu(a))
    }

    pub fn concat_cols(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        self.record(Op::ConcatCols(ids.to_vec()))
    }

    /// Tile a row vector (`[c]` or `1 x c`) to `rows x c`.
    pub fn repeat_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        self.record(Op::RepeatRows(a, rows))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::SumAll(a))
    }

    /// Normalize the whole tensor to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::L2Normalize(a))
    }

    /// Row `i` of the output is the mean of rows `adj[i]` of the input.
    /// Rows with no neighbors become zero.
    pub fn neighbor_mean(&mut self, a: NodeId, adj: Adjacency) -> Result<NodeId> {
        self.record(Op::NeighborMean(a, adj))
    }

    // ---- forward evaluation ---------------------------------------------

    fn eval(&self, op: &Op<F>) -> Result<Tensor<F>> {
        match op {
            Op::Leaf { .. } => unreachable!("leaves are pushed directly"),
            Op::Matmul(a, b) => self.nodes[*a].value.matmul(&self.nodes[*b].value),
            Op::BiasAddRows(a, bias) => {
                let (r, c) = self.nodes[*a].value.as_matrix()?;
                let bv = &self.nodes[*bias].value;
                if bv.numel() != c {
                    return Err(Error::shape(format!(
                        "bias of {} elements for {} columns",
                        bv.numel(),
                        c
                    )));
                }
                let mut out = self.nodes[*a].value.clone();
                let bd = bv.data();
                let od = out.data_mut();
                for i in 0..r {
                    for j in 0..c {
                        od[i * c + j] = od[i * c + j] + bd[j];
                    }
                }
                Ok(out)
            }
            Op::Add(a, b) => self.nodes[*a].value.add(&self.nodes[*b].value),
            Op::Sub(a, b) => self.nodes[*a].value.sub(&self.nodes[*b].value),
            Op::Mul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if av.shape() != bv.shape() {
                    return Err(Error::shape(format!(
                        "mul: {:?} vs {:?}",
                        av.shape(),
                        bv.shape()
                    )));
                }
                let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                Tensor::new(av.shape().to_vec(), data)
            }
            Op::Scale(a, s) => Ok(self.nodes[*a].value.scale(*s)),
            Op::Selu(a) => Ok(self.nodes[*a].value.map(selu_scalar)),
            Op::ConcatCols(ids) => {
                if ids.is_empty() {
                    return Err(Error::contract("concat_cols of zero tensors"));
                }
                let rows = self.nodes[ids[0]].value.as_matrix()?.0;
                let mut widths = Vec::with_capacity(ids.len());
                for &id in ids {
                    let (r, c) = self.nodes[id].value.as_matrix()?;
                    if r != rows {
                        return Err(Error::shape(format!(
                            "concat_cols: {} rows vs {}",
                            r, rows
                        )));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = vec![F::zero(); rows * total];
                let mut off = 0;
                for (&id, &w) in ids.iter().zip(&widths) {
                    let src = self.nodes[id].value.data();
                    for i in 0..rows {
                        data[i * total + off..i * total + off + w]
                            .copy_from_slice(&src[i * w..(i + 1) * w]);
                    }
                    off += w;
                }
                Tensor::new(vec![rows, total], data)
            }
            Op::RepeatRows(a, rows) => {
                let av = &self.nodes[*a].value;
                let c = match av.shape() {
                    [c] => *c,
                    [1, c] => *c,
                    s => {
                        return Err(Error::shape(format!(
                            "repeat_rows wants a row vector, got {:?}",
                            s
                        )))
                    }
                };
                let mut data = Vec::with_capacity(rows * c);
                for _ in 0..*rows {
                    data.extend_from_slice(av.data());
                }
                Tensor::new(vec![*rows, c], data)
            }
            Op::MeanRows(a) => {
                let means = self.nodes[*a].value.mean_rows()?;
                Tensor::new(vec![1, means.len()], means)
            }
            Op::SumAll(a) => Ok(Tensor::scalar(self.nodes[*a].value.sum())),
            Op::L2Normalize(a) => {
                let av = &self.nodes[*a].value;
                let norm = av.data().iter().map(|&v| v * v).sum::<F>().sqrt();
                if norm == F::zero() {
                    return Err(Error::Numeric {
                        step: 0,
                        msg: "cannot l2-normalize a zero tensor".into(),
                    });
                }
                Ok(av.scale(F::one() / norm))
            }
            Op::NeighborMean(a, adj) => {
                let (r, c) = self.nodes[*a].value.as_matrix()?;
                if adj.len() != r {
                    return Err(Error::shape(format!(
                        "adjacency for {} rows on a {}-row matrix",
                        adj.len(),
                        r
                    )));
                }
                let src = self.nodes[*a].value.data();
                let mut data = vec![F::zero(); r * c];
                for (i, neigh) in adj.iter().enumerate() {
                    if neigh.is_empty() {
                        continue;
                    }
                    let inv = F::one() / F::from_usize(neigh.len()).unwrap();
                    for &j in neigh {
                        let j = j as usize;
                        for col in 0..c {
                            data[i * c + col] = data[i * c + col] + src[j * c + col];
                        }
                    }
                    for col in 0..c {
                        data[i * c + col] = data[i * c + col] * inv;
                    }
                }
                Tensor::new(vec![r, c], data)
            }
        }
    }

    /// Re-evaluate every non-leaf node from current leaf values, in tape order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.nodes[i].value = self.eval(&op)?;
        }
        Ok(())
    }

    /// Overwrite a leaf's value (e.g. to perturb a parameter before replay).
    pub fn set_leaf_value(&mut self, id: NodeId, value: Tensor<F>) -> Result<()> {
        if !matches!(self.nodes[id].op, Op::Leaf { .. }) {
            return Err(Error::contract("set_leaf_value on a non-leaf node"));
        }
        if value.shape() != self.nodes[id].value.shape() {
            return Err(Error::shape(format!(
                "leaf value {:?} vs {:?}",
                value.shape(),
                self.nodes[id].value.shape()
            )));
        }
        self.nodes[id].value = value;
        Ok(())
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients accumulate into every node
    /// on a differentiable path; leaves bound as constants are skipped.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss] = Some(Tensor::new(
            self.nodes[loss].value.shape().to_vec(),
            vec![F::one()],
        )?);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, f: impl FnOnce(&mut [F])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        if self.grads[id].is_none() {
            self.grads[id] = Some(Tensor::zeros(self.nodes[id].value.shape().to_vec()));
        }
        f(self.grads[id].as_mut().unwrap().data_mut());
    }

    fn backward_op(&mut self, out: NodeId, op: &Op<F>, g: &Tensor<F>) {
        match op {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.nodes[*a].value.as_matrix().unwrap();
                let n = self.nodes[*b].value.shape()[1];
                if self.rg(*a) {
                    // dA += g . B^T
                    let bdata = self.nodes[*b].value.data().to_vec();
                    self.accumulate(*a, |da| {
                        F::gemm(
                            m,
                            n,
                            k,
                            F::one(),
                            g.data(),
                            n as isize,
                            1,
                            &bdata,
                            1,
                            n as isize,
                            F::one(),
                            da,
                        );
                    });
                }
                if self.rg(*b) {
                    // dB += A^T . g
                    let adata = self.nodes[*a].value.data().to_vec();
                    self.accumulate(*b, |db| {
                        F::gemm(
                            k,
                            m,
                            n,
                            F::one(),
                            &adata,
                            1,
                            k as isize,
                            g.data(),
                            n as isize,
                            1,
                            F::one(),
                            db,
                        );
                    });
                }
            }
            Op::BiasAddRows(a, bias) => {
                self.accumulate(*a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g.data()) {
                        *d = *d + gv;
                    }
                });
                let (r, c) = self.nodes[*a].value.as_matrix().unwrap();
                self.accumulate(*bias, |db| {
                    for i in 0..r {
                        for j in 0..c {
                            db[j] = db[j] + g.data()[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(*a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g.data()) {
                        *d = *d + gv;
                    }
                });
                self.accumulate(*b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g.data()) {
                        *d = *d + gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g.data()) {
                        *d = *d + gv;
                    }
                });
                self.accumulate(*b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g.data()) {
                        *d = *d - gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bdata = self.nodes[*b].value.data().to_vec();
                    self.accumulate(*a, |da| {
                        for ((d, &gv), &bv) in da.iter_mut().zip(g.data()).zip(&bdata) {
                            *d = *d + gv * bv;
                        }
                    });
                }
                if self.rg(*b) {
                    let adata = self.nodes[*a].value.data().to_vec();
                    self.accumulate(*b, |db| {
                        for ((d, &gv), &av) in db.iter_mut().zip(g.data()).zip(&adata) {
                            *d = *d + gv * av;
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(*a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g.data()) {
                        *d = *d + s * gv;
                    }
                });
            }
            Op::Selu(a) => {
                if self.rg(*a) {
                    let xdata = self.nodes[*a].value.data().to_vec();
                    self.accumulate(*a, |da| {
                        for ((d, &gv), &x) in da.iter_mut().zip(g.data()).zip(&xdata) {
                            *d = *d + gv * selu_deriv(x);
                        }
                    });
                }
            }
            Op::ConcatCols(ids) => {
                let rows = self.nodes[out].value.shape()[0];
                let total = self.nodes[out].value.shape()[1];
                let mut off = 0;
                for &id in ids {
                    let w = self.nodes[id].value.shape()[1];
                    self.accumulate(id, |dd| {
                        for i in 0..rows {
                            for j in 0..w {
                                dd[i * w + j] = dd[i * w + j] + g.data()[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::RepeatRows(a, rows) => {
                let c = self.nodes[*a].value.numel();
                self.accumulate(*a, |da| {
                    for i in 0..*rows {
                        for j in 0..c {
                            da[j] = da[j] + g.data()[i * c + j];
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let (r, c) = self.nodes[*a].value.as_matrix().unwrap();
                let inv = F::one() / F::from_usize(r).unwrap();
                self.accumulate(*a, |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = da[i * c + j] + g.data()[j] * inv;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gs = g.data()[0];
                self.accumulate(*a, |da| {
                    for d in da.iter_mut() {
                        *d = *d + gs;
                    }
                });
            }
            Op::L2Normalize(a) => {
                if self.rg(*a) {
                    let x = self.nodes[*a].value.data().to_vec();
                    let y = self.nodes[out].value.data().to_vec();
                    let norm = x.iter().map(|&v| v * v).sum::<F>().sqrt();
                    let dot: F = g.data().iter().zip(&y).map(|(&gv, &yv)| gv * yv).sum();
                    self.accumulate(*a, |da| {
                        for ((d, &gv), &yv) in da.iter_mut().zip(g.data()).zip(&y) {
                            *d = *d + (gv - yv * dot) / norm;
                        }
                    });
                }
            }
            Op::NeighborMean(a, adj) => {
                let c = self.nodes[*a].value.shape()[1];
                let adj = adj.clone();
                self.accumulate(*a, |da| {
                    for (i, neigh) in adj.iter().enumerate() {
                        if neigh.is_empty() {
                            continue;
                        }
                        let inv = F::one() / F::from_usize(neigh.len()).unwrap();
                        for &j in neigh {
                            let j = j as usize;
                            for col in 0..c {
                                da[j * c + col] = da[j * c + col] + g.data()[i * c + col] * inv;
                            }
                        }
                    }
                });
            }
        }
    }

    /// Max over parameter elements of the relative error between the autodiff
    /// gradient and a central finite difference of the replayed loss:
    /// `|ad - fd| / (|ad| + 1e-8)`. Returns zero for a parameter-free graph.
    pub fn finite_diff_check(&mut self, loss: NodeId, eps: F) -> Result<F> {
        if eps <= F::zero() {
            return Err(Error::contract("finite_diff_check needs eps > 0"));
        }
        self.backward(loss)?;
        let param_ids: Vec<NodeId> = (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf { param: true }))
            .collect();
        let ad: Vec<Tensor<F>> = param_ids
            .iter()
            .map(|&id| match self.grad(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.nodes[id].value.shape().to_vec()),
            })
            .collect();

        let two = F::cast(2.0);
        let floor = F::cast(1e-8);
        let mut max_rel = F::zero();
        for (pi, &id) in param_ids.iter().enumerate() {
            for e in 0..self.nodes[id].value.numel() {
                let orig = self.nodes[id].value.data()[e];
                self.nodes[id].value.data_mut()[e] = orig + eps;
                self.replay()?;
                let lp = self.nodes[loss].value.item()?;
                self.nodes[id].value.data_mut()[e] = orig - eps;
                self.replay()?;
                let lm = self.nodes[loss].value.item()?;
                self.nodes[id].value.data_mut()[e] = orig;

                let fd = (lp - lm) / (two * eps);
                let a = ad[pi].data()[e];
                let rel = (a - fd).abs() / (a.abs() + floor);
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
        self.replay()?;
        Ok(max_rel)
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn selu_fixed_points() {
        assert_eq!(selu_scalar(0.0f64), 0.0);
        assert!((selu_scalar(1.0f64) - 1.0507009873554805).abs() < 1e-15);
        let expected = 1.0507009873554805 * 1.6732632423543772 * ((-1.0f64).exp() - 1.0);
        assert!((selu_scalar(-1.0f64) - expected).abs() < 1e-15);
        assert!((expected + 1.1113307).abs() < 1e-6);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let p = g.param(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap());
        let s = g.sum_all(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_mse_single_element() {
        // loss = mean((p - 0)^2) with p=[2] -> d/dp = 2p = 4
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![2.0]));
        let sq = g.mul(p, p).unwrap();
        let total = g.sum_all(sq).unwrap();
        let loss = g.scale(total, 1.0).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn matmul_grad_of_sum_is_column_sums() {
        // d sum(a.b) / da = column sums of b^T, i.e. da[i][j] = sum_k b[j][k]
        let mut rng = StdRng::seed_from_u64(7);
        let mut g = Graph::new();
        let a = g.param(rand_tensor(&mut rng, &[3, 3]));
        let b_val = rand_tensor(&mut rng, &[3, 3]);
        let b = g.leaf(b_val.clone());
        let prod = g.matmul(a, b).unwrap();
        let loss = g.sum_all(prod).unwrap();

        let fd_err = g.finite_diff_check(loss, 1e-5).unwrap();
        assert!(fd_err < 1e-7, "finite-diff rel err {}", fd_err);

        let da = g.grad(a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected: f64 = (0..3).map(|k| b_val.data()[j * 3 + k]).sum();
                assert!((da.data()[i * 3 + j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_quadratic_fd_is_exact() {
        // Quadratic loss: central differences are exact up to roundoff.
        let mut rng = StdRng::seed_from_u64(3);
        let mut g = Graph::new();
        let w = g.param(rand_tensor(&mut rng, &[4, 2]));
        let x = g.leaf(rand_tensor(&mut rng, &[5, 4]));
        let target = g.leaf(rand_tensor(&mut rng, &[5, 2]));
        let pred = g.matmul(x, w).unwrap();
        let diff = g.sub(pred, target).unwrap();
        let sq = g.mul(diff, diff).unwrap();
        let total = g.sum_all(sq).unwrap();
        let loss = g.scale(total, 1.0 / 5.0).unwrap();
        let err = g.finite_diff_check(loss, 1e-5).unwrap();
        assert!(err < 1e-7, "rel err {}", err);
    }

    #[test]
    fn zero_parameter_graph_checks_to_zero() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let loss = g.sum_all(a).unwrap();
        let err = g.finite_diff_check(loss, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    /// MLP with every op the networks use: concat, bias rows, selu, repeat,
    /// mean pooling, normalization, neighbor aggregation.
    fn build_mixed_graph(rng: &mut StdRng, g: &mut Graph<f64>) -> NodeId {
        let x = g.leaf(rand_tensor(rng, &[6, 3]));
        let w1 = g.param(rand_tensor(rng, &[6, 8]));
        let b1 = g.param(rand_tensor(rng, &[8]));
        let w2 = g.param(rand_tensor(rng, &[8, 3]));
        let b2 = g.param(rand_tensor(rng, &[3]));
        let ctx = g.param(rand_tensor(rng, &[1, 3]));

        let adj: Adjacency = Arc::new(vec![
            vec![1, 2],
            vec![0],
            vec![0, 1, 3],
            vec![2],
            vec![5],
            vec![4, 0],
        ]);
        let m = g.neighbor_mean(x, adj).unwrap();
        let h = g.concat_cols(&[x, m]).unwrap();
        let lin = g.matmul(h, w1).unwrap();
        let lin = g.bias_add_rows(lin, b1).unwrap();
        let act = g.selu(lin).unwrap();
        let out = g.matmul(act, w2).unwrap();
        let out = g.bias_add_rows(out, b2).unwrap();

        let pooled = g.mean_rows(out).unwrap();
        let unit = g.l2_normalize(pooled).unwrap();
        let tiled = g.repeat_rows(unit, 6).unwrap();
        let ctx_rows = g.repeat_rows(ctx, 6).unwrap();
        let mixed = g.add(tiled, ctx_rows).unwrap();
        let both = g.concat_cols(&[out, mixed]).unwrap();

        let target = g.leaf(rand_tensor(rng, &[6, 6]));
        let diff = g.sub(both, target).unwrap();
        let sq = g.mul(diff, diff).unwrap();
        let total = g.sum_all(sq).unwrap();
        g.scale(total, 1.0 / 6.0).unwrap()
    }

    #[test]
    fn mixed_ops_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = StdRng::seed_from_u64(seed);
            let mut g = Graph::new();
            let loss = build_mixed_graph(&mut rng, &mut g);
            let err = g.finite_diff_check(loss, 1e-5).unwrap();
            assert!(err < 1e-6, "seed {} rel err {}", seed, err);
        }
    }

    #[test]
    fn non_trainable_binding_gets_no_gradient() {
        let mut params = Params::new();
        params.push("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut g = Graph::new();
        let binding = g.bind_params(&params, false);
        let x = g.leaf(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let y = g.matmul(x, binding.ids[0]).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(binding.ids[0]).is_none());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut g1 = Graph::new();
        let l1 = build_mixed_graph(&mut rng, &mut g1);
        let mut rng = StdRng::seed_from_u64(11);
        let mut g2 = Graph::new();
        let l2 = build_mixed_graph(&mut rng, &mut g2);
        assert_eq!(g1.value(l1).data(), g2.value(l2).data());
    }

    #[test]
    fn replay_reproduces_values() {
        let mut rng = StdRng::seed_from_u64(21);
        let mut g = Graph::new();
        let loss = build_mixed_graph(&mut rng, &mut g);
        let before = g.value(loss).item().unwrap();
        g.replay().unwrap();
        assert_eq!(g.value(loss).item().unwrap(), before);
    }

    #[test]
    fn f32_graph_works() {
        let mut g: Graph<f32> = Graph::new();
        let p = g.param(Tensor::vector(vec![3.0f32]));
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert!((g.grad(p).unwrap().data()[0] - 6.0).abs() < 1e-6);
    }
}
