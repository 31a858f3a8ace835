//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an eager tape: every operation appends a node recording its
//! op kind, parent ids and whatever forward values its backward rule needs.
//! Tensors are cheap handles (graph + node id). A tape and its tensors are
//! confined to one thread; parameters live outside the tape and are re-leafed
//! into a fresh graph for every forward/backward pass.

mod ops;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::cell::RefCell;
use std::rc::Rc;

/// Op kind tag plus parent references and saved forward values.
#[derive(Clone)]
pub(crate) enum Op<F: Scalar> {
    Leaf,
    Add(usize, usize),
    /// `[t, d] + [d]`, broadcasting the row vector over rows.
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, F),
    Exp(usize),
    Ln(usize),
    Sigmoid(usize),
    Relu(usize),
    MatMul(usize, usize),
    Transpose(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        /// Per-row mean and reciprocal stddev saved from the forward pass.
        mean: Vec<F>,
        inv_std: Vec<F>,
    },
    DepthwiseConv {
        x: usize,
        kernel: usize,
        causal: bool,
    },
    Conv1d {
        x: usize,
        weight: usize,
        stride: usize,
    },
    GatherRows {
        table: usize,
        rows: Vec<usize>,
    },
    SumAll(usize),
    /// Scalar-valued fused op with gradient precomputed at forward time.
    Custom {
        x: usize,
        grad: Vec<F>,
    },
}

pub(crate) struct Node<F: Scalar> {
    pub shape: Vec<usize>,
    pub data: Rc<Vec<F>>,
    pub grad: Option<Vec<F>>,
    /// Whether gradient flows into or through this node.
    pub requires: bool,
    pub op: Op<F>,
}

struct GraphInner<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Eager autodiff tape. Clones share the same underlying tape.
pub struct Graph<F: Scalar> {
    inner: Rc<RefCell<GraphInner<F>>>,
}

impl<F: Scalar> Clone for Graph<F> {
    fn clone(&self) -> Self {
        Graph {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Graph`].
pub struct Tensor<F: Scalar> {
    graph: Graph<F>,
    id: usize,
    shape: Vec<usize>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            graph: self.graph.clone(),
            id: self.id,
            shape: self.shape.clone(),
        }
    }
}

fn assert_all_finite<F: Scalar>(what: &str, data: &[F]) {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            panic!("non-finite value {v} at index {i} produced by {what}");
        }
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner { nodes: Vec::new() })),
        }
    }

    pub fn same_graph(&self, other: &Graph<F>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Creates a leaf from raw data. `requires_grad` marks it as a gradient
    /// target for [`Tensor::backward`].
    pub fn leaf(&self, shape: &[usize], data: Vec<F>, requires_grad: bool) -> Tensor<F> {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "leaf shape {shape:?} does not match data length {}",
            data.len()
        );
        assert_all_finite("leaf", &data);
        self.push_raw(shape.to_vec(), Rc::new(data), requires_grad, Op::Leaf)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, shape: &[usize], data: Vec<F>) -> Tensor<F> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&self, v: F) -> Tensor<F> {
        self.constant(&[1], vec![v])
    }

    pub fn zeros(&self, shape: &[usize], requires_grad: bool) -> Tensor<F> {
        let numel: usize = shape.iter().product();
        self.leaf(shape, vec![F::zero(); numel], requires_grad)
    }

    /// Clears every gradient buffer on the tape.
    pub fn zero_grad(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }

    fn push_raw(
        &self,
        shape: Vec<usize>,
        data: Rc<Vec<F>>,
        requires: bool,
        op: Op<F>,
    ) -> Tensor<F> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: shape.clone(),
            data,
            grad: None,
            requires,
            op,
        });
        Tensor {
            graph: self.clone(),
            id,
            shape,
        }
    }

    pub(crate) fn push_op(&self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, what: &str) -> Tensor<F> {
        assert_all_finite(what, &data);
        let requires = {
            let inner = self.inner.borrow();
            op_parents(&op).iter().any(|&p| inner.nodes[p].requires)
        };
        self.push_raw(shape, Rc::new(data), requires, op)
    }

    pub(crate) fn with_nodes<R>(&self, f: impl FnOnce(&[Node<F>]) -> R) -> R {
        f(&self.inner.borrow().nodes)
    }
}

fn op_parents<F: Scalar>(op: &Op<F>) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
            vec![*a, *b]
        }
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Sigmoid(a)
        | Op::Relu(a)
        | Op::Transpose(a)
        | Op::SumAll(a) => vec![*a],
        Op::SliceCols { x, .. } | Op::SliceRows { x, .. } => vec![*x],
        Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
        Op::LogSoftmax { x, .. } => vec![*x],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::DepthwiseConv { x, kernel, .. } => vec![*x, *kernel],
        Op::Conv1d { x, weight, .. } => vec![*x, *weight],
        Op::GatherRows { table, .. } => vec![*table],
        Op::Custom { x, .. } => vec![*x],
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn graph(&self) -> &Graph<F> {
        &self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Number of rows when viewed as a matrix (leading dims collapsed).
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn data(&self) -> Rc<Vec<F>> {
        self.graph
            .with_nodes(|nodes| Rc::clone(&nodes[self.id].data))
    }

    pub fn value(&self) -> Vec<F> {
        self.data().as_ref().clone()
    }

    /// Reads a scalar tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.with_nodes(|nodes| nodes[self.id].requires)
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.graph
            .inner
            .borrow()
            .nodes
            .get(self.id)
            .and_then(|n| n.grad.clone())
    }

    /// A gradient-stopped view sharing this tensor's storage.
    pub fn detach(&self) -> Tensor<F> {
        self.graph
            .push_raw(self.shape.clone(), self.data(), false, Op::Leaf)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into every
    /// `requires_grad` node reachable from this one; repeated calls without
    /// [`Graph::zero_grad`] keep accumulating.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape
            )));
        }
        if !self.item().is_finite() {
            return Err(Error::Contract(format!(
                "backward root must be finite, got {}",
                self.item()
            )));
        }

        let mut inner = self.graph.inner.borrow_mut();
        let nodes = &mut inner.nodes;
        if !nodes[self.id].requires {
            return Ok(()); // nothing reachable wants gradient
        }

        // Mark ancestors that both feed the root and require gradient.
        let mut marked = vec![false; self.id + 1];
        let mut stack = vec![self.id];
        marked[self.id] = true;
        while let Some(id) = stack.pop() {
            for p in op_parents(&nodes[id].op) {
                if nodes[p].requires && !marked[p] {
                    marked[p] = true;
                    stack.push(p);
                }
            }
        }

        // One backward pass runs on scratch buffers, then adds its result into
        // the persistent grads, so repeated calls accumulate one unit each.
        let mut scratch: Vec<Option<Vec<F>>> = vec![None; self.id + 1];
        scratch[self.id] = Some(vec![F::one()]);

        // The tape is append-only, so descending ids is reverse topological
        // order; each marked node is visited exactly once.
        for id in (0..=self.id).rev() {
            if marked[id] {
                ops::backward_step(nodes, &mut scratch, id);
            }
        }

        for (id, s) in scratch.into_iter().enumerate() {
            let Some(s) = s else { continue };
            let node = &mut nodes[id];
            match node.grad.as_mut() {
                Some(g) => {
                    for (gi, si) in g.iter_mut().zip(s.iter()) {
                        *gi = *gi + *si;
                    }
                }
                None => node.grad = Some(s),
            }
        }
        Ok(())
    }
}

pub use ops::{logsumexp_slice, matmul_raw};
pub(crate) use ops::MASK_PENALTY;

#[cfg(test)]
mod tests {
    use super::*;

    type G = Graph<f64>;

    #[test]
    fn leaf_roundtrip_and_shape_invariant() {
        let g = G::new();
        let t = g.leaf(&[2, 3], vec![1., 2., 3., 4., 5., 6.], false);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.value(), vec![1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    #[should_panic(expected = "does not match data length")]
    fn leaf_shape_mismatch_panics() {
        let g = G::new();
        g.leaf(&[2, 2], vec![1., 2., 3.], false);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_leaf_rejected() {
        let g = G::new();
        g.leaf(&[1], vec![f64::NAN], false);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let g = G::new();
        let w = g.leaf(&[3], vec![2., -1., 5.], true);
        let loss = w.sum_all();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1., 1., 1.]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2w() {
        let g = G::new();
        let w = g.leaf(&[3], vec![2., -1., 5.], true);
        let loss = w.mul(&w).sum_all();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![4., -2., 10.]);
    }

    #[test]
    fn backward_accumulates_until_zero_grad() {
        let g = G::new();
        let w = g.leaf(&[2], vec![1., 2.], true);
        let loss = w.sum_all();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2., 2.]);
        g.zero_grad();
        assert!(w.grad().is_none());
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1., 1.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = G::new();
        let w = g.leaf(&[2], vec![1., 2.], true);
        assert!(matches!(w.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_identity_and_1x1() {
        let g = G::new();
        let a = g.leaf(&[2, 2], vec![1., 2., 3., 4.], false);
        let eye = g.leaf(&[2, 2], vec![1., 0., 0., 1.], false);
        assert_eq!(a.matmul(&eye).unwrap().value(), vec![1., 2., 3., 4.]);
        let x = g.leaf(&[1, 1], vec![2.], false);
        let y = g.leaf(&[1, 1], vec![3.], false);
        assert_eq!(x.matmul(&y).unwrap().value(), vec![6.]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let g = G::new();
        let a = g.leaf(&[2, 3], vec![0.; 6], false);
        let b = g.leaf(&[2, 2], vec![0.; 4], false);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn log_softmax_symmetry_and_stability() {
        let g = G::new();
        let x = g.leaf(&[2], vec![0., 0.], false);
        let y = x.log_softmax(0).unwrap().value();
        let ln2 = std::f64::consts::LN_2;
        assert!((y[0] + ln2).abs() < 1e-15 && (y[1] + ln2).abs() < 1e-15);

        let x = g.leaf(&[2], vec![1000., 0.], false);
        let y = x.log_softmax(0).unwrap().value();
        assert!(y[0].abs() < 1e-12);
        assert!((y[1] + 1000.).abs() < 1e-9);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let g = G::new();
        let x = g.leaf(&[3, 4], (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect(), false);
        let y = x.log_softmax(1).unwrap().value();
        for r in 0..3 {
            let s: f64 = y[r * 4..(r + 1) * 4].iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        }
    }

    #[test]
    fn depthwise_conv_padding_arithmetic() {
        let g = G::new();
        let x = g.leaf(&[3, 1], vec![1., 1., 1.], false);
        let k = g.leaf(&[3, 1], vec![1., 1., 1.], false);
        assert_eq!(x.depthwise_conv1d(&k, true).unwrap().value(), vec![1., 2., 3.]);
        assert_eq!(x.depthwise_conv1d(&k, false).unwrap().value(), vec![2., 3., 2.]);
    }

    #[test]
    fn depthwise_centered_even_kernel_is_config_error() {
        let g = G::new();
        let x = g.leaf(&[3, 1], vec![1., 1., 1.], false);
        let k = g.leaf(&[2, 1], vec![1., 1.], false);
        assert!(matches!(
            x.depthwise_conv1d(&k, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn causal_conv_outputs_ignore_future_bit_exactly() {
        let g = G::new();
        let xv: Vec<f64> = (0..8).map(|i| (i as f64 * 0.77).sin()).collect();
        let kv: Vec<f64> = vec![0.3, -0.2, 0.5];
        let x = g.leaf(&[8, 1], xv.clone(), false);
        let k = g.leaf(&[3, 1], kv.clone(), false);
        let base = x.depthwise_conv1d(&k, true).unwrap().value();

        let mut perturbed = xv;
        for v in perturbed.iter_mut().skip(5) {
            *v += 13.25;
        }
        let x2 = g.leaf(&[8, 1], perturbed, false);
        let out = x2.depthwise_conv1d(&k, true).unwrap().value();
        for t in 0..5 {
            assert!(base[t].to_bits() == out[t].to_bits(), "frame {t} changed");
        }
    }

    #[test]
    fn layer_norm_constant_rows() {
        let g = G::new();
        let x = g.leaf(&[2, 4], vec![5.; 8], false);
        let gamma = g.leaf(&[4], vec![1.; 4], false);
        let beta = g.leaf(&[4], vec![0.; 4], false);
        let y = x.layer_norm(&gamma, &beta, 1e-12).unwrap().value();
        assert!(y.iter().all(|v| v.abs() < 1e-5));

        let beta_b = g.leaf(&[4], vec![7.; 4], false);
        let y = x.layer_norm(&gamma, &beta_b, 1e-12).unwrap().value();
        assert!(y.iter().all(|v| (v - 7.).abs() < 1e-5));
    }

    #[test]
    fn activation_fixed_points() {
        let g = G::new();
        let x = g.leaf(&[1], vec![0.], false);
        assert_eq!(x.swish().value(), vec![0.]);
        assert_eq!(x.sigmoid().value(), vec![0.5]);

        // glu([a; 0]) = a * sigmoid(0) = a / 2
        let x = g.leaf(&[1, 4], vec![3., -2., 0., 0.], false);
        assert_eq!(x.glu().unwrap().value(), vec![1.5, -1.]);

        let odd = g.leaf(&[1, 3], vec![1., 2., 3.], false);
        assert!(matches!(odd.glu(), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        use crate::testing::{finite_difference, max_rel_err};
        let g = G::new();
        let av: Vec<f64> = (0..6).map(|i| (i as f64 * 1.3).cos()).collect();
        let bv: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let a = g.leaf(&[2, 3], av.clone(), true);
        let b = g.leaf(&[3, 4], bv.clone(), false);
        a.matmul(&b).unwrap().sum_all().backward().unwrap();
        let analytic = a.grad().unwrap();

        let fd = finite_difference(
            &mut |xs: &[f64]| {
                let g = G::new();
                let a = g.leaf(&[2, 3], xs.to_vec(), false);
                let b = g.leaf(&[3, 4], bv.clone(), false);
                a.matmul(&b).unwrap().sum_all().item()
            },
            &av,
            1e-6,
        );
        assert!(max_rel_err(&analytic, &fd) < 1e-4);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        use crate::testing::{finite_difference, max_rel_err};
        let xv: Vec<f64> = (0..8).map(|i| (i as f64 * 0.9).sin() * 2.0).collect();
        let run = |xs: &[f64]| -> (f64, Option<Vec<f64>>) {
            let g = G::new();
            let x = g.leaf(&[2, 4], xs.to_vec(), true);
            let gamma = g.leaf(&[4], vec![1.3, 0.7, -0.2, 1.0], false);
            let beta = g.leaf(&[4], vec![0.1, -0.5, 0.2, 0.0], false);
            // weight rows so the gradient is not the trivial constant case
            let w = g.constant(&[2, 4], (0..8).map(|i| 0.3 + 0.1 * i as f64).collect());
            let loss = x.layer_norm(&gamma, &beta, 1e-6).unwrap().mul(&w).sum_all();
            loss.backward().unwrap();
            (loss.item(), x.grad())
        };
        let (_, analytic) = run(&xv);
        let fd = finite_difference(&mut |xs: &[f64]| run(xs).0, &xv, 1e-6);
        assert!(max_rel_err(&analytic.unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = G::new();
        let w = g.leaf(&[2], vec![3., 4.], true);
        let d = w.detach();
        assert!(!d.requires_grad());
        let loss = d.mul(&d).sum_all();
        assert!(!loss.requires_grad());
        loss.backward().unwrap();
        assert!(w.grad().is_none());
    }
}
