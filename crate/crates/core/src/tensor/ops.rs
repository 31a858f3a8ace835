//! Forward implementations and backward rules for every tape op.

use super::{Node, Op, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::rc::Rc;

/// Additive penalty used to mask attention logits. Large enough that
/// `exp(x - max)` underflows to exactly zero for masked entries, which keeps
/// chunked outputs bit-identical to full-pass outputs, while staying finite.
pub(crate) const MASK_PENALTY: f64 = -1.0e9;

fn same_graph_check<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) {
    assert!(
        a.graph().same_graph(b.graph()),
        "operands belong to different graphs"
    );
}

impl<F: Scalar> Tensor<F> {
    fn binary_same_shape(&self, other: &Tensor<F>, name: &str) {
        same_graph_check(self, other);
        assert_eq!(
            self.shape(),
            other.shape(),
            "{name}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Tensor<F>) -> Tensor<F> {
        self.binary_same_shape(other, "add");
        let a = self.data();
        let b = other.data();
        let data: Vec<F> = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
        self.graph()
            .push_op(self.shape().to_vec(), data, Op::Add(self.id(), other.id()), "add")
    }

    /// `[t, d] + [d]` broadcast add of a row vector over every row.
    pub fn add_row(&self, row: &Tensor<F>) -> Tensor<F> {
        same_graph_check(self, row);
        let d = self.cols();
        assert_eq!(row.shape(), &[d], "add_row: row must have shape [{d}]");
        let a = self.data();
        let b = row.data();
        let data: Vec<F> = a
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % d])
            .collect();
        self.graph()
            .push_op(self.shape().to_vec(), data, Op::AddRow(self.id(), row.id()), "add_row")
    }

    pub fn sub(&self, other: &Tensor<F>) -> Tensor<F> {
        self.binary_same_shape(other, "sub");
        let a = self.data();
        let b = other.data();
        let data: Vec<F> = a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect();
        self.graph()
            .push_op(self.shape().to_vec(), data, Op::Sub(self.id(), other.id()), "sub")
    }

    pub fn mul(&self, other: &Tensor<F>) -> Tensor<F> {
        self.binary_same_shape(other, "mul");
        let a = self.data();
        let b = other.data();
        let data: Vec<F> = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
        self.graph()
            .push_op(self.shape().to_vec(), data, Op::Mul(self.id(), other.id()), "mul")
    }

    pub fn neg(&self) -> Tensor<F> {
        let data: Vec<F> = self.data().iter().map(|&x| -x).collect();
        self.graph()
            .push_op(self.shape().to_vec(), data, Op::Neg(self.id()), "neg")
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        let data: Vec<F> = self.data().iter().map(|&x| x * c).collect();
        self.graph()
            .push_op(self.shape().to_vec(), data, Op::Scale(self.id(), c), "scale")
    }

    pub fn exp(&self) -> Tensor<F> {
        let data: Vec<F> = self.data().iter().map(|&x| x.exp()).collect();
        self.graph()
            .push_op(self.shape().to_vec(), data, Op::Exp(self.id()), "exp")
    }

    pub fn ln(&self) -> Tensor<F> {
        let data: Vec<F> = self.data().iter().map(|&x| x.ln()).collect();
        self.graph()
            .push_op(self.shape().to_vec(), data, Op::Ln(self.id()), "ln")
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        let one = F::one();
        let data: Vec<F> = self
            .data()
            .iter()
            .map(|&x| one / (one + (-x).exp()))
            .collect();
        self.graph()
            .push_op(self.shape().to_vec(), data, Op::Sigmoid(self.id()), "sigmoid")
    }

    pub fn relu(&self) -> Tensor<F> {
        let data: Vec<F> = self.data().iter().map(|&x| x.max(F::zero())).collect();
        self.graph()
            .push_op(self.shape().to_vec(), data, Op::Relu(self.id()), "relu")
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&self) -> Tensor<F> {
        self.mul(&self.sigmoid())
    }

    /// Splits the last axis in half and gates: `glu([a; b]) = a * sigmoid(b)`.
    pub fn glu(&self) -> Result<Tensor<F>> {
        let d = self.cols();
        if d % 2 != 0 {
            return Err(Error::Dimension(format!(
                "glu needs an even last axis, got {d}"
            )));
        }
        let a = self.slice_cols(0, d / 2)?;
        let b = self.slice_cols(d / 2, d / 2)?;
        Ok(a.mul(&b.sigmoid()))
    }

    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        same_graph_check(self, other);
        if self.shape().len() != 2 || other.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul needs 2-d operands, got {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let a = self.data();
        let b = other.data();
        let data = matmul_raw(&a, &b, m, k, n);
        Ok(self
            .graph()
            .push_op(vec![m, n], data, Op::MatMul(self.id(), other.id()), "matmul"))
    }

    pub fn transpose(&self) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2, "transpose needs a 2-d tensor");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let a = self.data();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = a[i * n + j];
            }
        }
        self.graph()
            .push_op(vec![n, m], data, Op::Transpose(self.id()), "transpose")
    }

    /// Columns `[start, start+len)` of a matrix (any leading shape, last axis
    /// indexed).
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<F>> {
        let d = self.cols();
        if start + len > d {
            return Err(Error::Dimension(format!(
                "slice_cols [{start}, {}) out of range for last axis {d}",
                start + len
            )));
        }
        let rows = self.rows();
        let a = self.data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&a[r * d + start..r * d + start + len]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.graph().push_op(
            shape,
            data,
            Op::SliceCols { x: self.id(), start },
            "slice_cols",
        ))
    }

    pub fn concat_cols(parts: &[Tensor<F>]) -> Result<Tensor<F>> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = parts[0].rows();
        for p in parts.iter().skip(1) {
            same_graph_check(&parts[0], p);
            if p.rows() != rows {
                return Err(Error::Dimension(
                    "concat_cols: row counts disagree".to_string(),
                ));
            }
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for r in 0..rows {
            for (p, d) in parts.iter().zip(datas.iter()) {
                let c = p.cols();
                data.extend_from_slice(&d[r * c..(r + 1) * c]);
            }
        }
        let mut shape = parts[0].shape().to_vec();
        *shape.last_mut().unwrap() = total;
        Ok(parts[0].graph().push_op(
            shape,
            data,
            Op::ConcatCols(parts.iter().map(|p| p.id()).collect()),
            "concat_cols",
        ))
    }

    /// Rows `[start, start+len)` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<F>> {
        assert_eq!(self.shape().len(), 2, "slice_rows needs a 2-d tensor");
        let (t, d) = (self.shape()[0], self.shape()[1]);
        if start + len > t {
            return Err(Error::Dimension(format!(
                "slice_rows [{start}, {}) out of range for {t} rows",
                start + len
            )));
        }
        let a = self.data();
        let data = a[start * d..(start + len) * d].to_vec();
        Ok(self.graph().push_op(
            vec![len, d],
            data,
            Op::SliceRows { x: self.id(), start },
            "slice_rows",
        ))
    }

    pub fn concat_rows(parts: &[Tensor<F>]) -> Result<Tensor<F>> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let d = parts[0].cols();
        let mut rows = 0;
        for p in parts {
            same_graph_check(&parts[0], p);
            if p.shape().len() != 2 || p.cols() != d {
                return Err(Error::Dimension(
                    "concat_rows: column counts disagree".to_string(),
                ));
            }
            rows += p.shape()[0];
        }
        let mut data = Vec::with_capacity(rows * d);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        Ok(parts[0].graph().push_op(
            vec![rows, d],
            data,
            Op::ConcatRows(parts.iter().map(|p| p.id()).collect()),
            "concat_rows",
        ))
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<F>> {
        let nd = self.shape().len();
        if axis >= nd {
            return Err(Error::Dimension(format!(
                "log_softmax axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let a = self.data();
        let mut data = vec![F::zero(); a.len()];
        for_each_lane(self.shape(), axis, |lane| {
            let m = lane
                .iter()
                .map(|&i| a[i])
                .fold(F::neg_infinity(), |acc, v| acc.max(v));
            let mut sum = F::zero();
            for &i in lane {
                sum = sum + (a[i] - m).exp();
            }
            let lse = m + sum.ln();
            for &i in lane {
                data[i] = a[i] - lse;
            }
        });
        Ok(self.graph().push_op(
            self.shape().to_vec(),
            data,
            Op::LogSoftmax { x: self.id(), axis },
            "log_softmax",
        ))
    }

    /// Softmax along `axis`, computed as `exp(log_softmax)`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<F>> {
        Ok(self.log_softmax(axis)?.exp())
    }

    /// Per-position normalization over the last axis followed by an affine map.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
        same_graph_check(self, gamma);
        same_graph_check(self, beta);
        let d = self.cols();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm affine must have shape [{d}], got {:?} / {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = self.rows();
        let a = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut data = vec![F::zero(); a.len()];
        let mut means = vec![F::zero(); rows];
        let mut inv_stds = vec![F::zero(); rows];
        let dn = F::from_usize(d).unwrap();
        for r in 0..rows {
            let row = &a[r * d..(r + 1) * d];
            let mean = row.iter().copied().fold(F::zero(), |s, v| s + v) / dn;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(F::zero(), |s, v| s + v)
                / dn;
            let inv_std = F::one() / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv_std;
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv_std * gm[j] + bt[j];
            }
        }
        Ok(self.graph().push_op(
            self.shape().to_vec(),
            data,
            Op::LayerNorm {
                x: self.id(),
                gamma: gamma.id(),
                beta: beta.id(),
                mean: means,
                inv_std: inv_stds,
            },
            "layer_norm",
        ))
    }

    /// Per-channel 1-d convolution of `[t, d]` with a `[k, d]` kernel.
    ///
    /// Causal mode left-pads with `k-1` zeros so `out[t]` sees only `x[..=t]`;
    /// centered mode pads `(k-1)/2` on each side and requires odd `k`.
    pub fn depthwise_conv1d(&self, kernel: &Tensor<F>, causal: bool) -> Result<Tensor<F>> {
        same_graph_check(self, kernel);
        if self.shape().len() != 2 || kernel.shape().len() != 2 {
            return Err(Error::Dimension(
                "depthwise_conv1d needs 2-d input and kernel".to_string(),
            ));
        }
        let (t, d) = (self.shape()[0], self.shape()[1]);
        let (k, dk) = (kernel.shape()[0], kernel.shape()[1]);
        if dk != d {
            return Err(Error::Dimension(format!(
                "depthwise kernel channels {dk} != input channels {d}"
            )));
        }
        if !causal && k % 2 == 0 {
            return Err(Error::Config(format!(
                "centered depthwise conv needs an odd kernel, got {k}"
            )));
        }
        let shift = if causal { k - 1 } else { (k - 1) / 2 };
        let x = self.data();
        let w = kernel.data();
        let mut data = vec![F::zero(); t * d];
        for out_t in 0..t {
            for i in 0..k {
                let src = out_t as isize - shift as isize + i as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                for c in 0..d {
                    data[out_t * d + c] = data[out_t * d + c] + w[i * d + c] * x[src * d + c];
                }
            }
        }
        Ok(self.graph().push_op(
            vec![t, d],
            data,
            Op::DepthwiseConv {
                x: self.id(),
                kernel: kernel.id(),
                causal,
            },
            "depthwise_conv1d",
        ))
    }

    /// Valid (no-padding) 1-d convolution over time: `[t, c_in]` with weights
    /// `[k, c_in, c_out]` at the given stride.
    pub fn conv1d(&self, weight: &Tensor<F>, stride: usize) -> Result<Tensor<F>> {
        same_graph_check(self, weight);
        if self.shape().len() != 2 || weight.shape().len() != 3 {
            return Err(Error::Dimension(
                "conv1d needs [t, c_in] input and [k, c_in, c_out] weight".to_string(),
            ));
        }
        let (t, cin) = (self.shape()[0], self.shape()[1]);
        let (k, wcin, cout) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
        if wcin != cin {
            return Err(Error::Dimension(format!(
                "conv1d channels disagree: input {cin}, weight {wcin}"
            )));
        }
        if t < k {
            return Err(Error::Dimension(format!(
                "conv1d input of {t} frames shorter than kernel {k}"
            )));
        }
        let t_out = (t - k) / stride + 1;
        let x = self.data();
        let w = weight.data();
        let mut data = vec![F::zero(); t_out * cout];
        for ot in 0..t_out {
            let base = ot * stride;
            let out_row = &mut data[ot * cout..(ot + 1) * cout];
            for i in 0..k {
                let x_row = &x[(base + i) * cin..(base + i + 1) * cin];
                for (ci, &xv) in x_row.iter().enumerate() {
                    let w_row = &w[(i * cin + ci) * cout..(i * cin + ci + 1) * cout];
                    for (o, out) in out_row.iter_mut().enumerate() {
                        *out = *out + xv * w_row[o];
                    }
                }
            }
        }
        Ok(self.graph().push_op(
            vec![t_out, cout],
            data,
            Op::Conv1d {
                x: self.id(),
                weight: weight.id(),
                stride,
            },
            "conv1d",
        ))
    }

    /// Row lookup: `out[i] = table[rows[i]]`.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor<F>> {
        assert_eq!(self.shape().len(), 2, "gather_rows needs a 2-d table");
        let (v, d) = (self.shape()[0], self.shape()[1]);
        let a = self.data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= v {
                return Err(Error::Dimension(format!(
                    "gather_rows index {r} out of range for table with {v} rows"
                )));
            }
            data.extend_from_slice(&a[r * d..(r + 1) * d]);
        }
        Ok(self.graph().push_op(
            vec![rows.len(), d],
            data,
            Op::GatherRows {
                table: self.id(),
                rows: rows.to_vec(),
            },
            "gather_rows",
        ))
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let s = self.data().iter().copied().fold(F::zero(), |a, v| a + v);
        self.graph()
            .push_op(vec![1], vec![s], Op::SumAll(self.id()), "sum_all")
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = F::from_usize(self.numel()).unwrap();
        self.sum_all().scale(F::one() / n)
    }

    /// Scalar-valued fused op: `value` with a precomputed gradient w.r.t.
    /// `self`, used by losses whose backward rule is cheaper to compute during
    /// the forward pass.
    pub fn custom_scalar(&self, value: F, grad: Vec<F>) -> Tensor<F> {
        assert_eq!(grad.len(), self.numel(), "custom grad length mismatch");
        self.graph().push_op(
            vec![1],
            vec![value],
            Op::Custom {
                x: self.id(),
                grad,
            },
            "custom_scalar",
        )
    }
}

/// `c[m,n] = a[m,k] * b[k,n]`, row-major.
pub fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + av * b_row[j];
            }
        }
    }
    c
}

/// Stable log(sum(exp(xs))).
pub fn logsumexp_slice<F: Scalar>(xs: &[F]) -> F {
    let m = xs.iter().copied().fold(F::neg_infinity(), |a, v| a.max(v));
    if !m.is_finite() {
        return m;
    }
    let s = xs.iter().map(|&v| (v - m).exp()).fold(F::zero(), |a, v| a + v);
    m + s.ln()
}

/// Visits each 1-d lane of `shape` along `axis`, passing element indices.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut lane = vec![0usize; axis_len];
    for o in 0..outer {
        for i in 0..inner {
            for (a, slot) in lane.iter_mut().enumerate() {
                *slot = o * axis_len * inner + a * inner + i;
            }
            f(&lane);
        }
    }
}

/// Applies the backward rule of node `id`, accumulating into its parents'
/// scratch gradients.
pub(crate) fn backward_step<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    id: usize,
) {
    let Some(out_grad) = grads[id].clone() else {
        return;
    };
    // Whole-node reads needed by the rules below.
    let out_data = Rc::clone(&nodes[id].data);
    match nodes[id].op.clone() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, a, |g| {
                for (gi, &d) in g.iter_mut().zip(out_grad.iter()) {
                    *gi = *gi + d;
                }
            });
            acc(nodes, grads, b, |g| {
                for (gi, &d) in g.iter_mut().zip(out_grad.iter()) {
                    *gi = *gi + d;
                }
            });
        }
        Op::AddRow(a, b) => {
            acc(nodes, grads, a, |g| {
                for (gi, &d) in g.iter_mut().zip(out_grad.iter()) {
                    *gi = *gi + d;
                }
            });
            let d = nodes[b].shape[0];
            acc(nodes, grads, b, |g| {
                for (i, &gv) in out_grad.iter().enumerate() {
                    g[i % d] = g[i % d] + gv;
                }
            });
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, a, |g| {
                for (gi, &d) in g.iter_mut().zip(out_grad.iter()) {
                    *gi = *gi + d;
                }
            });
            acc(nodes, grads, b, |g| {
                for (gi, &d) in g.iter_mut().zip(out_grad.iter()) {
                    *gi = *gi - d;
                }
            });
        }
        Op::Mul(a, b) => {
            let a_data = Rc::clone(&nodes[a].data);
            let b_data = Rc::clone(&nodes[b].data);
            acc(nodes, grads, a, |g| {
                for i in 0..g.len() {
                    g[i] = g[i] + out_grad[i] * b_data[i];
                }
            });
            acc(nodes, grads, b, |g| {
                for i in 0..g.len() {
                    g[i] = g[i] + out_grad[i] * a_data[i];
                }
            });
        }
        Op::Neg(a) => acc(nodes, grads, a, |g| {
            for (gi, &d) in g.iter_mut().zip(out_grad.iter()) {
                *gi = *gi - d;
            }
        }),
        Op::Scale(a, c) => acc(nodes, grads, a, |g| {
            for (gi, &d) in g.iter_mut().zip(out_grad.iter()) {
                *gi = *gi + c * d;
            }
        }),
        Op::Exp(a) => acc(nodes, grads, a, |g| {
            for i in 0..g.len() {
                g[i] = g[i] + out_grad[i] * out_data[i];
            }
        }),
        Op::Ln(a) => {
            let a_data = Rc::clone(&nodes[a].data);
            acc(nodes, grads, a, |g| {
                for i in 0..g.len() {
                    g[i] = g[i] + out_grad[i] / a_data[i];
                }
            });
        }
        Op::Sigmoid(a) => acc(nodes, grads, a, |g| {
            for i in 0..g.len() {
                let y = out_data[i];
                g[i] = g[i] + out_grad[i] * y * (F::one() - y);
            }
        }),
        Op::Relu(a) => {
            let a_data = Rc::clone(&nodes[a].data);
            acc(nodes, grads, a, |g| {
                for i in 0..g.len() {
                    if a_data[i] > F::zero() {
                        g[i] = g[i] + out_grad[i];
                    }
                }
            });
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            let a_data = Rc::clone(&nodes[a].data);
            let b_data = Rc::clone(&nodes[b].data);
            // dA[i,p] = sum_j dC[i,j] * B[p,j]
            acc(nodes, grads, a, |g| {
                for i in 0..m {
                    let dc_row = &out_grad[i * n..(i + 1) * n];
                    for p in 0..k {
                        let b_row = &b_data[p * n..(p + 1) * n];
                        let mut s = F::zero();
                        for j in 0..n {
                            s = s + dc_row[j] * b_row[j];
                        }
                        g[i * k + p] = g[i * k + p] + s;
                    }
                }
            });
            // dB[p,j] = sum_i A[i,p] * dC[i,j]
            acc(nodes, grads, b, |g| {
                for i in 0..m {
                    let dc_row = &out_grad[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a_data[i * k + p];
                        let g_row = &mut g[p * n..(p + 1) * n];
                        for j in 0..n {
                            g_row[j] = g_row[j] + av * dc_row[j];
                        }
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (n, m) = (nodes[id].shape[0], nodes[id].shape[1]);
            acc(nodes, grads, a, |g| {
                for i in 0..n {
                    for j in 0..m {
                        g[j * n + i] = g[j * n + i] + out_grad[i * m + j];
                    }
                }
            });
        }
        Op::SliceCols { x, start } => {
            let len = *nodes[id].shape.last().unwrap();
            let d = *nodes[x].shape.last().unwrap();
            let rows = out_grad.len() / len;
            acc(nodes, grads, x, |g| {
                for r in 0..rows {
                    for j in 0..len {
                        g[r * d + start + j] = g[r * d + start + j] + out_grad[r * len + j];
                    }
                }
            });
        }
        Op::ConcatCols(xs) => {
            let total = *nodes[id].shape.last().unwrap();
            let rows = out_grad.len() / total;
            let mut offset = 0;
            for x in xs {
                let c = *nodes[x].shape.last().unwrap();
                let off = offset;
                acc(nodes, grads, x, |g| {
                    for r in 0..rows {
                        for j in 0..c {
                            g[r * c + j] = g[r * c + j] + out_grad[r * total + off + j];
                        }
                    }
                });
                offset += c;
            }
        }
        Op::SliceRows { x, start } => {
            let d = nodes[id].shape[1];
            acc(nodes, grads, x, |g| {
                for (i, &gv) in out_grad.iter().enumerate() {
                    g[start * d + i] = g[start * d + i] + gv;
                }
            });
        }
        Op::ConcatRows(xs) => {
            let mut offset = 0;
            for x in xs {
                let n = nodes[x].shape.iter().product::<usize>();
                let off = offset;
                acc(nodes, grads, x, |g| {
                    for i in 0..n {
                        g[i] = g[i] + out_grad[off + i];
                    }
                });
                offset += n;
            }
        }
        Op::LogSoftmax { x, axis } => {
            let shape = nodes[id].shape.clone();
            acc(nodes, grads, x, |g| {
                for_each_lane(&shape, axis, |lane| {
                    let mut dsum = F::zero();
                    for &i in lane {
                        dsum = dsum + out_grad[i];
                    }
                    for &i in lane {
                        g[i] = g[i] + out_grad[i] - out_data[i].exp() * dsum;
                    }
                });
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let d = *nodes[id].shape.last().unwrap();
            let rows = out_grad.len() / d;
            let x_data = Rc::clone(&nodes[x].data);
            let gm = Rc::clone(&nodes[gamma].data);
            let dn = F::from_usize(d).unwrap();
            acc(nodes, grads, beta, |g| {
                for r in 0..rows {
                    for j in 0..d {
                        g[j] = g[j] + out_grad[r * d + j];
                    }
                }
            });
            acc(nodes, grads, gamma, |g| {
                for r in 0..rows {
                    let (mu, is) = (mean[r], inv_std[r]);
                    for j in 0..d {
                        let xh = (x_data[r * d + j] - mu) * is;
                        g[j] = g[j] + out_grad[r * d + j] * xh;
                    }
                }
            });
            acc(nodes, grads, x, |g| {
                for r in 0..rows {
                    let (mu, is) = (mean[r], inv_std[r]);
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for j in 0..d {
                        let dy = out_grad[r * d + j] * gm[j];
                        let xh = (x_data[r * d + j] - mu) * is;
                        s1 = s1 + dy;
                        s2 = s2 + dy * xh;
                    }
                    s1 = s1 / dn;
                    s2 = s2 / dn;
                    for j in 0..d {
                        let dy = out_grad[r * d + j] * gm[j];
                        let xh = (x_data[r * d + j] - mu) * is;
                        g[r * d + j] = g[r * d + j] + (dy - s1 - xh * s2) * is;
                    }
                }
            });
        }
        Op::DepthwiseConv { x, kernel, causal } => {
            let (t, d) = (nodes[id].shape[0], nodes[id].shape[1]);
            let k = nodes[kernel].shape[0];
            let shift = if causal { k - 1 } else { (k - 1) / 2 };
            let x_data = Rc::clone(&nodes[x].data);
            let w_data = Rc::clone(&nodes[kernel].data);
            acc(nodes, grads, x, |g| {
                for out_t in 0..t {
                    for i in 0..k {
                        let src = out_t as isize - shift as isize + i as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..d {
                            g[src * d + c] =
                                g[src * d + c] + out_grad[out_t * d + c] * w_data[i * d + c];
                        }
                    }
                }
            });
            acc(nodes, grads, kernel, |g| {
                for out_t in 0..t {
                    for i in 0..k {
                        let src = out_t as isize - shift as isize + i as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..d {
                            g[i * d + c] =
                                g[i * d + c] + out_grad[out_t * d + c] * x_data[src * d + c];
                        }
                    }
                }
            });
        }
        Op::Conv1d { x, weight, stride } => {
            let (t_out, cout) = (nodes[id].shape[0], nodes[id].shape[1]);
            let cin = nodes[x].shape[1];
            let k = nodes[weight].shape[0];
            let x_data = Rc::clone(&nodes[x].data);
            let w_data = Rc::clone(&nodes[weight].data);
            acc(nodes, grads, x, |g| {
                for ot in 0..t_out {
                    let base = ot * stride;
                    let dout = &out_grad[ot * cout..(ot + 1) * cout];
                    for i in 0..k {
                        for ci in 0..cin {
                            let w_row = &w_data[(i * cin + ci) * cout..(i * cin + ci + 1) * cout];
                            let mut s = F::zero();
                            for (o, &dv) in dout.iter().enumerate() {
                                s = s + dv * w_row[o];
                            }
                            g[(base + i) * cin + ci] = g[(base + i) * cin + ci] + s;
                        }
                    }
                }
            });
            acc(nodes, grads, weight, |g| {
                for ot in 0..t_out {
                    let base = ot * stride;
                    let dout = &out_grad[ot * cout..(ot + 1) * cout];
                    for i in 0..k {
                        for ci in 0..cin {
                            let xv = x_data[(base + i) * cin + ci];
                            let g_row = &mut g[(i * cin + ci) * cout..(i * cin + ci + 1) * cout];
                            for (o, &dv) in dout.iter().enumerate() {
                                g_row[o] = g_row[o] + xv * dv;
                            }
                        }
                    }
                }
            });
        }
        Op::GatherRows { table, rows } => {
            let d = nodes[id].shape[1];
            acc(nodes, grads, table, |g| {
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        g[r * d + j] = g[r * d + j] + out_grad[i * d + j];
                    }
                }
            });
        }
        Op::SumAll(a) => {
            let dv = out_grad[0];
            acc(nodes, grads, a, |g| {
                for gi in g.iter_mut() {
                    *gi = *gi + dv;
                }
            });
        }
        Op::Custom { x, grad } => {
            let dv = out_grad[0];
            acc(nodes, grads, x, |g| {
                for (gi, &gr) in g.iter_mut().zip(grad.iter()) {
                    *gi = *gi + dv * gr;
                }
            });
        }
    }
}

fn acc<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    id: usize,
    f: impl FnOnce(&mut Vec<F>),
) {
    if !nodes[id].requires {
        return;
    }
    let grad = grads[id].get_or_insert_with(|| {
        let n: usize = nodes[id].shape.iter().product();
        vec![F::zero(); n]
    });
    f(grad);
}
