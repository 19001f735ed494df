//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Tape`] records every primitive operation in topological order; a
//! [`Var`] is a cheap handle to one recorded node. Calling [`Tape::backward`]
//! on a scalar node propagates adjoints to every parameter leaf. The tape can
//! also re-evaluate itself from the leaves (`replay`), which is what powers
//! [`grad_check`]: central finite differences are computed by replaying the
//! recorded computation with a perturbed leaf, so the check never needs the
//! code that built the graph.
//!
//! Tapes are confined to one thread; independent tapes may run concurrently.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::tensor::{Tensor, TensorError};

/// Stable identifier of a parameter leaf, assigned by the caller (the
/// network's weight store uses its slot indices).
pub type ParamSlot = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamSlot> },
    MatMul,
    Add,
    Sub,
    Hadamard,
    Scale(f64),
    Sigmoid,
    Softplus,
    Abs,
    AddRowBias,
    ConcatCols,
    GatherRows(Vec<usize>),
    ScatterAddRows { idx: Vec<usize>, out_rows: usize },
    ScaleRows(Vec<f64>),
    MeanRows,
    SumAll,
    FeatureNorm { eps: f64 },
    QuatToRot,
    Sph2,
    ChannelDot,
    RowwiseOuter,
    RowwiseDot,
    RowwiseScale,
    RowNormalize { eps: f64 },
    RowwiseCross,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Append-only record of a forward computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`]. Copyable; carries its shape so that
/// shape validation never needs to borrow the tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    rows: usize,
    cols: usize,
}

/// Gradients keyed by parameter slot, in slot order.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_slot: BTreeMap<ParamSlot, Tensor>,
}

impl Gradients {
    pub fn get(&self, slot: ParamSlot) -> Option<&Tensor> {
        self.by_slot.get(&slot)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamSlot, &Tensor)> {
        self.by_slot.iter().map(|(k, v)| (*k, v))
    }

    /// Entry-wise sum; used when accumulating per-structure gradients.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (slot, g) in other.by_slot.iter() {
            match self.by_slot.get_mut(slot) {
                Some(acc) => {
                    let data: Vec<f64> = acc
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(a, b)| a + b)
                        .collect();
                    *acc = Tensor::from_vec_unchecked(acc.shape().to_vec(), data);
                }
                None => {
                    self.by_slot.insert(*slot, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_slot.values_mut() {
            let data: Vec<f64> = g.data().iter().map(|v| v * factor).collect();
            *g = Tensor::from_vec_unchecked(g.shape().to_vec(), data);
        }
    }
}

pub fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const SQRT3: f64 = 1.7320508075688772;

/// Degree-2 real spherical-harmonic components of (x, y, z), scaled so the
/// five-vector has unit norm on the unit sphere.
pub(crate) fn sph2_components(x: f64, y: f64, z: f64) -> [f64; 5] {
    [
        SQRT3 * x * y,
        SQRT3 * y * z,
        0.5 * (3.0 * z * z - 1.0),
        SQRT3 * x * z,
        0.5 * SQRT3 * (x * x - y * y),
    ]
}

/// Algorithm-1 rotation matrix of an already-normalized quaternion,
/// row-major. Shared by the frames module and the tape primitive.
pub(crate) fn quat_rotation_entries(a: f64, b: f64, c: f64, d: f64) -> [f64; 9] {
    [
        a * a + b * b - c * c - d * d,
        2.0 * (b * c - a * d),
        2.0 * (b * d + a * c),
        2.0 * (b * c + a * d),
        a * a - b * b + c * c - d * d,
        2.0 * (c * d - a * b),
        2.0 * (b * d - a * c),
        2.0 * (c * d + a * b),
        a * a - b * b - c * c + d * d,
    ]
}

/// Entries of dR/du for the unnormalized quadratic form, as four 9-vectors.
fn quat_rotation_jacobian(a: f64, b: f64, c: f64, d: f64) -> [[f64; 9]; 4] {
    [
        [a, -d, c, d, a, -b, -c, b, a].map(|v| 2.0 * v),
        [b, c, d, c, -b, -a, d, a, -b].map(|v| 2.0 * v),
        [-c, b, a, b, c, d, -a, d, -c].map(|v| 2.0 * v),
        [-d, -a, b, a, -d, c, b, c, d].map(|v| 2.0 * v),
    ]
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

/// Forward evaluation of one primitive. This is the single code path used
/// both when recording and when replaying, which is what makes replay
/// reproduce stored values bit-exactly.
fn compute_value(op: &Op, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
    let out = match op {
        Op::Leaf { .. } => unreachable!("leaves are never recomputed"),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = a.dims2();
            let (k2, n) = b.dims2();
            if k != k2 {
                return Err(shape_err("matmul", a, b));
            }
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a.data()[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        data[i * n + j] += av * b.data()[p * n + j];
                    }
                }
            }
            Tensor::from_vec_unchecked(vec![m, n], data)
        }
        Op::Add | Op::Sub | Op::Hadamard => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                let name = match op {
                    Op::Add => "add",
                    Op::Sub => "sub",
                    _ => "hadamard",
                };
                return Err(shape_err(name, a, b));
            }
            let data: Vec<f64> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    _ => x * y,
                })
                .collect();
            Tensor::from_vec_unchecked(a.shape().to_vec(), data)
        }
        Op::Scale(c) => {
            let a = inputs[0];
            Tensor::from_vec_unchecked(
                a.shape().to_vec(),
                a.data().iter().map(|v| v * c).collect(),
            )
        }
        Op::Sigmoid => {
            let a = inputs[0];
            Tensor::from_vec_unchecked(
                a.shape().to_vec(),
                a.data().iter().map(|&v| stable_sigmoid(v)).collect(),
            )
        }
        Op::Softplus => {
            let a = inputs[0];
            Tensor::from_vec_unchecked(
                a.shape().to_vec(),
                a.data().iter().map(|&v| stable_softplus(v)).collect(),
            )
        }
        Op::Abs => {
            let a = inputs[0];
            Tensor::from_vec_unchecked(
                a.shape().to_vec(),
                a.data().iter().map(|v| v.abs()).collect(),
            )
        }
        Op::AddRowBias => {
            let (x, b) = (inputs[0], inputs[1]);
            let (n, d) = x.dims2();
            let (br, bd) = b.dims2();
            if br != 1 || bd != d {
                return Err(shape_err("add_row_bias", x, b));
            }
            let mut data = x.data().to_vec();
            for r in 0..n {
                for c in 0..d {
                    data[r * d + c] += b.data()[c];
                }
            }
            Tensor::from_vec_unchecked(vec![n, d], data)
        }
        Op::ConcatCols => {
            let (n, _) = inputs[0].dims2();
            let total: usize = inputs.iter().map(|t| t.dims2().1).sum();
            let mut data = Vec::with_capacity(n * total);
            for r in 0..n {
                for t in inputs {
                    let (tn, tc) = t.dims2();
                    if tn != n {
                        return Err(shape_err("concat_cols", inputs[0], t));
                    }
                    data.extend_from_slice(&t.data()[r * tc..(r + 1) * tc]);
                }
            }
            Tensor::from_vec_unchecked(vec![n, total], data)
        }
        Op::GatherRows(idx) => {
            let x = inputs[0];
            let (n, d) = x.dims2();
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                if i >= n {
                    return Err(TensorError::RowOutOfBounds {
                        op: "gather_rows",
                        index: i,
                        rows: n,
                    });
                }
                data.extend_from_slice(x.row(i));
            }
            Tensor::from_vec_unchecked(vec![idx.len(), d], data)
        }
        Op::ScatterAddRows { idx, out_rows } => {
            let x = inputs[0];
            let (m, d) = x.dims2();
            if idx.len() != m {
                return Err(TensorError::Invalid {
                    op: "scatter_add_rows",
                    what: format!("{} indices for {m} rows", idx.len()),
                });
            }
            let mut data = vec![0.0; out_rows * d];
            for (r, &i) in idx.iter().enumerate() {
                if i >= *out_rows {
                    return Err(TensorError::RowOutOfBounds {
                        op: "scatter_add_rows",
                        index: i,
                        rows: *out_rows,
                    });
                }
                for c in 0..d {
                    data[i * d + c] += x.data()[r * d + c];
                }
            }
            Tensor::from_vec_unchecked(vec![*out_rows, d], data)
        }
        Op::ScaleRows(w) => {
            let x = inputs[0];
            let (m, d) = x.dims2();
            if w.len() != m {
                return Err(TensorError::Invalid {
                    op: "scale_rows",
                    what: format!("{} weights for {m} rows", w.len()),
                });
            }
            let mut data = x.data().to_vec();
            for r in 0..m {
                for c in 0..d {
                    data[r * d + c] *= w[r];
                }
            }
            Tensor::from_vec_unchecked(vec![m, d], data)
        }
        Op::MeanRows => {
            let x = inputs[0];
            let (n, d) = x.dims2();
            let mut data = vec![0.0; d];
            for r in 0..n {
                for c in 0..d {
                    data[c] += x.data()[r * d + c];
                }
            }
            for v in data.iter_mut() {
                *v /= n as f64;
            }
            Tensor::from_vec_unchecked(vec![1, d], data)
        }
        Op::SumAll => {
            let x = inputs[0];
            Tensor::from_vec_unchecked(vec![1, 1], vec![x.data().iter().sum()])
        }
        Op::FeatureNorm { eps } => {
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let (n, d) = x.dims2();
            if gamma.dims2() != (1, d) || beta.dims2() != (1, d) {
                return Err(shape_err("feature_norm", x, gamma));
            }
            let mut data = vec![0.0; n * d];
            for r in 0..n {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv_sigma = 1.0 / (var + eps).sqrt();
                for c in 0..d {
                    let xhat = (row[c] - mean) * inv_sigma;
                    data[r * d + c] = xhat * gamma.data()[c] + beta.data()[c];
                }
            }
            Tensor::from_vec_unchecked(vec![n, d], data)
        }
        Op::QuatToRot => {
            let q = inputs[0];
            let (n, four) = q.dims2();
            if four != 4 {
                return Err(TensorError::Invalid {
                    op: "quat_to_rot_rows",
                    what: format!("expected n x 4, got n x {four}"),
                });
            }
            let mut data = Vec::with_capacity(n * 9);
            for r in 0..n {
                let row = q.row(r);
                let s = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2] + row[3] * row[3])
                    .sqrt();
                if s <= 1e-12 {
                    return Err(TensorError::Invalid {
                        op: "quat_to_rot_rows",
                        what: format!("degenerate quaternion in row {r} (norm {s:.3e})"),
                    });
                }
                let entries =
                    quat_rotation_entries(row[0] / s, row[1] / s, row[2] / s, row[3] / s);
                data.extend_from_slice(&entries);
            }
            Tensor::from_vec_unchecked(vec![n, 9], data)
        }
        Op::Sph2 => {
            let u = inputs[0];
            let (m, three) = u.dims2();
            if three != 3 {
                return Err(TensorError::Invalid {
                    op: "sph2_rows",
                    what: format!("expected m x 3, got m x {three}"),
                });
            }
            let mut data = Vec::with_capacity(m * 5);
            for r in 0..m {
                let row = u.row(r);
                data.extend_from_slice(&sph2_components(row[0], row[1], row[2]));
            }
            Tensor::from_vec_unchecked(vec![m, 5], data)
        }
        Op::ChannelDot => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, dq) = a.dims2();
            let (m2, q) = b.dims2();
            if m != m2 || q == 0 || dq % q != 0 {
                return Err(shape_err("channel_dot", a, b));
            }
            let d = dq / q;
            let mut data = vec![0.0; m * d];
            for r in 0..m {
                for c in 0..d {
                    let mut acc = 0.0;
                    for k in 0..q {
                        acc += a.data()[r * dq + c * q + k] * b.data()[r * q + k];
                    }
                    data[r * d + c] = acc;
                }
            }
            Tensor::from_vec_unchecked(vec![m, d], data)
        }
        Op::RowwiseOuter => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, p) = a.dims2();
            let (m2, q) = b.dims2();
            if m != m2 {
                return Err(shape_err("rowwise_outer", a, b));
            }
            let mut data = vec![0.0; m * p * q];
            for r in 0..m {
                for i in 0..p {
                    let av = a.data()[r * p + i];
                    for j in 0..q {
                        data[r * p * q + i * q + j] = av * b.data()[r * q + j];
                    }
                }
            }
            Tensor::from_vec_unchecked(vec![m, p * q], data)
        }
        Op::RowwiseDot => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err("rowwise_dot", a, b));
            }
            let (m, d) = a.dims2();
            let mut data = vec![0.0; m];
            for r in 0..m {
                data[r] = (0..d)
                    .map(|c| a.data()[r * d + c] * b.data()[r * d + c])
                    .sum();
            }
            Tensor::from_vec_unchecked(vec![m, 1], data)
        }
        Op::RowwiseScale => {
            let (x, s) = (inputs[0], inputs[1]);
            let (m, d) = x.dims2();
            if s.dims2() != (m, 1) {
                return Err(shape_err("rowwise_scale", x, s));
            }
            let mut data = x.data().to_vec();
            for r in 0..m {
                for c in 0..d {
                    data[r * d + c] *= s.data()[r];
                }
            }
            Tensor::from_vec_unchecked(vec![m, d], data)
        }
        Op::RowNormalize { eps } => {
            let x = inputs[0];
            let (m, d) = x.dims2();
            let mut data = vec![0.0; m * d];
            for r in 0..m {
                let row = x.row(r);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n <= *eps {
                    return Err(TensorError::Invalid {
                        op: "row_normalize",
                        what: format!("row {r} has norm {n:.3e} <= {eps:.3e}"),
                    });
                }
                for c in 0..d {
                    data[r * d + c] = row[c] / n;
                }
            }
            Tensor::from_vec_unchecked(vec![m, d], data)
        }
        Op::RowwiseCross => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, d) = a.dims2();
            if d != 3 || b.dims2() != (m, 3) {
                return Err(shape_err("rowwise_cross", a, b));
            }
            let mut data = vec![0.0; m * 3];
            for r in 0..m {
                let x = a.row(r);
                let y = b.row(r);
                data[r * 3] = x[1] * y[2] - x[2] * y[1];
                data[r * 3 + 1] = x[2] * y[0] - x[0] * y[2];
                data[r * 3 + 2] = x[0] * y[1] - x[1] * y[0];
            }
            Tensor::from_vec_unchecked(vec![m, 3], data)
        }
    };
    if out.data().iter().any(|v| !v.is_finite()) {
        let name = op_name(op);
        return Err(TensorError::NonFinite { op: name });
    }
    Ok(out)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::MatMul => "matmul",
        Op::Add => "add",
        Op::Sub => "sub",
        Op::Hadamard => "hadamard",
        Op::Scale(_) => "scale",
        Op::Sigmoid => "sigmoid",
        Op::Softplus => "softplus",
        Op::Abs => "abs",
        Op::AddRowBias => "add_row_bias",
        Op::ConcatCols => "concat_cols",
        Op::GatherRows(_) => "gather_rows",
        Op::ScatterAddRows { .. } => "scatter_add_rows",
        Op::ScaleRows(_) => "scale_rows",
        Op::MeanRows => "mean_rows",
        Op::SumAll => "sum_all",
        Op::FeatureNorm { .. } => "feature_norm",
        Op::QuatToRot => "quat_to_rot_rows",
        Op::Sph2 => "sph2_rows",
        Op::ChannelDot => "channel_dot",
        Op::RowwiseOuter => "rowwise_outer",
        Op::RowwiseDot => "rowwise_dot",
        Op::RowwiseScale => "rowwise_scale",
        Op::RowNormalize { .. } => "row_normalize",
        Op::RowwiseCross => "rowwise_cross",
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn as_2d(t: &Tensor) -> Result<(usize, usize), TensorError> {
        match t.shape().len() {
            1 | 2 => Ok(t.dims2()),
            _ => Err(TensorError::Invalid {
                op: "tape",
                what: format!("tape tensors must be rank 1 or 2, got {:?}", t.shape()),
            }),
        }
    }

    fn push_leaf(&self, value: Tensor, param: Option<ParamSlot>) -> Result<Var<'_>, TensorError> {
        let (rows, cols) = Self::as_2d(&value)?;
        let value = Tensor::from_vec_unchecked(vec![rows, cols], value.data().to_vec());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf { param },
            inputs: Vec::new(),
            value,
        });
        Ok(Var {
            tape: self,
            index: nodes.len() - 1,
            rows,
            cols,
        })
    }

    /// Records a constant leaf (no gradient will be reported for it).
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>, TensorError> {
        self.push_leaf(value, None)
    }

    pub fn constant_scalar(&self, v: f64) -> Result<Var<'_>, TensorError> {
        self.constant(Tensor::scalar(v)?)
    }

    /// Records a parameter leaf; gradients are keyed by `slot`.
    pub fn parameter(&self, slot: ParamSlot, value: &Tensor) -> Result<Var<'_>, TensorError> {
        self.push_leaf(value.clone(), Some(slot))
    }

    fn record(&self, op: Op, input_vars: &[Var<'_>]) -> Result<Var<'_>, TensorError> {
        let inputs: Vec<usize> = input_vars.iter().map(|v| v.index).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<&Tensor> = inputs.iter().map(|&i| &nodes[i].value).collect();
            compute_value(&op, &tensors)?
        };
        let (rows, cols) = value.dims2();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs, value });
        Ok(Var {
            tape: self,
            index: nodes.len() - 1,
            rows,
            cols,
        })
    }

    /// Clone of the tensor held by a node.
    pub fn value_of(&self, var: Var<'_>) -> Tensor {
        self.nodes.borrow()[var.index].value.clone()
    }

    /// Recomputes every non-leaf node from the stored leaves and checks that
    /// the results match the stored values bit-for-bit.
    pub fn replay_matches(&self) -> Result<bool, TensorError> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let value = match &node.op {
                Op::Leaf { .. } => node.value.clone(),
                op => {
                    let tensors: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                    compute_value(op, &tensors)?
                }
            };
            if value.data() != node.value.data() {
                return Ok(false);
            }
            values.push(value);
        }
        Ok(true)
    }

    /// Evaluates the value of `target` with one leaf overridden; used by
    /// finite-difference checks.
    fn eval_with_override(
        &self,
        leaf: usize,
        replacement: &Tensor,
        target: usize,
    ) -> Result<f64, TensorError> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Tensor> = Vec::with_capacity(target + 1);
        for (i, node) in nodes.iter().take(target + 1).enumerate() {
            let value = match &node.op {
                Op::Leaf { .. } => {
                    if i == leaf {
                        replacement.clone()
                    } else {
                        node.value.clone()
                    }
                }
                op => {
                    let tensors: Vec<&Tensor> = node.inputs.iter().map(|&j| &values[j]).collect();
                    compute_value(op, &tensors)?
                }
            };
            values.push(value);
        }
        values[target].item()
    }

    /// Reverse-mode gradient of a scalar node with respect to every
    /// parameter leaf. Parameters the loss does not reach get zero
    /// gradients of their own shape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        assert!(std::ptr::eq(loss.tape, self), "loss from another tape");
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.index].value;
        if loss_value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            let out_shape = node.value.dims2();
            let input_values: Vec<&Tensor> =
                node.inputs.iter().map(|&j| &nodes[j].value).collect();
            let mut input_grads: Vec<Vec<f64>> = input_values
                .iter()
                .map(|t| vec![0.0; t.len()])
                .collect();
            accumulate(
                &node.op,
                &input_values,
                &node.value,
                out_shape,
                &grad,
                &mut input_grads,
            );
            for (slot, g) in node.inputs.iter().zip(input_grads) {
                match grads[*slot].as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => grads[*slot] = Some(g),
                }
            }
            // Re-install this node's grad only if it is a parameter we still
            // need below; leaves keep theirs for collection.
            if matches!(node.op, Op::Leaf { param: Some(_) }) {
                grads[i] = Some(grad);
            }
        }

        let mut out = Gradients::default();
        for (i, node) in nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(slot) } = node.op {
                let shape = node.value.shape().to_vec();
                let tensor = match grads[i].take() {
                    Some(g) => Tensor::from_vec_unchecked(shape, g),
                    None => Tensor::zeros(shape),
                };
                match out.by_slot.get_mut(&slot) {
                    Some(acc) => {
                        let data: Vec<f64> = acc
                            .data()
                            .iter()
                            .zip(tensor.data())
                            .map(|(a, b)| a + b)
                            .collect();
                        *acc = Tensor::from_vec_unchecked(acc.shape().to_vec(), data);
                    }
                    None => {
                        out.by_slot.insert(slot, tensor);
                    }
                }
            }
        }
        Ok(out)
    }

    fn param_leaves(&self) -> Vec<(usize, ParamSlot)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(slot) } => Some((i, slot)),
                _ => None,
            })
            .collect()
    }
}

fn accumulate(
    op: &Op,
    inputs: &[&Tensor],
    value: &Tensor,
    out_shape: (usize, usize),
    grad: &[f64],
    input_grads: &mut [Vec<f64>],
) {
    match op {
        Op::Leaf { .. } => {}
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = a.dims2();
            let (_, n) = b.dims2();
            // dA = dC B^T ; dB = A^T dC
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += grad[i * n + j] * b.data()[p * n + j];
                    }
                    input_grads[0][i * k + p] += acc;
                }
            }
            for p in 0..k {
                for j in 0..n {
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += a.data()[i * k + p] * grad[i * n + j];
                    }
                    input_grads[1][p * n + j] += acc;
                }
            }
        }
        Op::Add => {
            for (g, v) in input_grads[0].iter_mut().zip(grad) {
                *g += v;
            }
            for (g, v) in input_grads[1].iter_mut().zip(grad) {
                *g += v;
            }
        }
        Op::Sub => {
            for (g, v) in input_grads[0].iter_mut().zip(grad) {
                *g += v;
            }
            for (g, v) in input_grads[1].iter_mut().zip(grad) {
                *g -= v;
            }
        }
        Op::Hadamard => {
            let (a, b) = (inputs[0], inputs[1]);
            for i in 0..grad.len() {
                input_grads[0][i] += grad[i] * b.data()[i];
                input_grads[1][i] += grad[i] * a.data()[i];
            }
        }
        Op::Scale(c) => {
            for (g, v) in input_grads[0].iter_mut().zip(grad) {
                *g += c * v;
            }
        }
        Op::Sigmoid => {
            for i in 0..grad.len() {
                let y = value.data()[i];
                input_grads[0][i] += grad[i] * y * (1.0 - y);
            }
        }
        Op::Softplus => {
            for i in 0..grad.len() {
                input_grads[0][i] += grad[i] * stable_sigmoid(inputs[0].data()[i]);
            }
        }
        Op::Abs => {
            for i in 0..grad.len() {
                let x = inputs[0].data()[i];
                input_grads[0][i] += grad[i] * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
            }
        }
        Op::AddRowBias => {
            let (n, d) = out_shape;
            for i in 0..grad.len() {
                input_grads[0][i] += grad[i];
            }
            for r in 0..n {
                for c in 0..d {
                    input_grads[1][c] += grad[r * d + c];
                }
            }
        }
        Op::ConcatCols => {
            let (n, _) = out_shape;
            let widths: Vec<usize> = inputs.iter().map(|t| t.dims2().1).collect();
            let total: usize = widths.iter().sum();
            for r in 0..n {
                let mut offset = 0;
                for (slot, w) in widths.iter().enumerate() {
                    for c in 0..*w {
                        input_grads[slot][r * w + c] += grad[r * total + offset + c];
                    }
                    offset += w;
                }
            }
        }
        Op::GatherRows(idx) => {
            let d = inputs[0].dims2().1;
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..d {
                    input_grads[0][i * d + c] += grad[r * d + c];
                }
            }
        }
        Op::ScatterAddRows { idx, .. } => {
            let d = inputs[0].dims2().1;
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..d {
                    input_grads[0][r * d + c] += grad[i * d + c];
                }
            }
        }
        Op::ScaleRows(w) => {
            let (m, d) = inputs[0].dims2();
            for r in 0..m {
                for c in 0..d {
                    input_grads[0][r * d + c] += grad[r * d + c] * w[r];
                }
            }
        }
        Op::MeanRows => {
            let (n, d) = inputs[0].dims2();
            let inv = 1.0 / n as f64;
            for r in 0..n {
                for c in 0..d {
                    input_grads[0][r * d + c] += grad[c] * inv;
                }
            }
        }
        Op::SumAll => {
            for g in input_grads[0].iter_mut() {
                *g += grad[0];
            }
        }
        Op::FeatureNorm { eps } => {
            let (x, gamma) = (inputs[0], inputs[1]);
            let (n, d) = x.dims2();
            let inv_d = 1.0 / d as f64;
            for r in 0..n {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() * inv_d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_d;
                let inv_sigma = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_sigma).collect();
                let gout = &grad[r * d..(r + 1) * d];
                // d gamma, d beta
                for c in 0..d {
                    input_grads[1][c] += gout[c] * xhat[c];
                    input_grads[2][c] += gout[c];
                }
                // d x via the standard layer-norm adjoint
                let dxhat: Vec<f64> = (0..d).map(|c| gout[c] * gamma.data()[c]).collect();
                let mean_dxhat = dxhat.iter().sum::<f64>() * inv_d;
                let mean_dxhat_xhat = dxhat
                    .iter()
                    .zip(&xhat)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * inv_d;
                for c in 0..d {
                    input_grads[0][r * d + c] +=
                        inv_sigma * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                }
            }
        }
        Op::QuatToRot => {
            let q = inputs[0];
            let (n, _) = q.dims2();
            for r in 0..n {
                let row = q.row(r);
                let s2 = row.iter().map(|v| v * v).sum::<f64>();
                let s = s2.sqrt();
                let u = [row[0] / s, row[1] / s, row[2] / s, row[3] / s];
                let jac = quat_rotation_jacobian(u[0], u[1], u[2], u[3]);
                let gout = &grad[r * 9..(r + 1) * 9];
                let mut gu = [0.0; 4];
                for k in 0..4 {
                    gu[k] = jac[k].iter().zip(gout).map(|(a, b)| a * b).sum();
                }
                let u_dot_gu: f64 = u.iter().zip(&gu).map(|(a, b)| a * b).sum();
                for k in 0..4 {
                    input_grads[0][r * 4 + k] += (gu[k] - u[k] * u_dot_gu) / s;
                }
            }
        }
        Op::Sph2 => {
            let u = inputs[0];
            let (m, _) = u.dims2();
            for r in 0..m {
                let row = u.row(r);
                let (x, y, z) = (row[0], row[1], row[2]);
                let g = &grad[r * 5..(r + 1) * 5];
                input_grads[0][r * 3] += SQRT3 * (y * g[0] + z * g[3] + x * g[4]);
                input_grads[0][r * 3 + 1] += SQRT3 * (x * g[0] + z * g[1] - y * g[4]);
                input_grads[0][r * 3 + 2] += SQRT3 * (y * g[1] + x * g[3]) + 3.0 * z * g[2];
            }
        }
        Op::ChannelDot => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, dq) = a.dims2();
            let (_, q) = b.dims2();
            let d = dq / q;
            for r in 0..m {
                for c in 0..d {
                    let g = grad[r * d + c];
                    for k in 0..q {
                        input_grads[0][r * dq + c * q + k] += g * b.data()[r * q + k];
                        input_grads[1][r * q + k] += g * a.data()[r * dq + c * q + k];
                    }
                }
            }
        }
        Op::RowwiseOuter => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, p) = a.dims2();
            let (_, q) = b.dims2();
            for r in 0..m {
                for i in 0..p {
                    for j in 0..q {
                        let g = grad[r * p * q + i * q + j];
                        input_grads[0][r * p + i] += g * b.data()[r * q + j];
                        input_grads[1][r * q + j] += g * a.data()[r * p + i];
                    }
                }
            }
        }
        Op::RowwiseDot => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, d) = a.dims2();
            for r in 0..m {
                for c in 0..d {
                    input_grads[0][r * d + c] += grad[r] * b.data()[r * d + c];
                    input_grads[1][r * d + c] += grad[r] * a.data()[r * d + c];
                }
            }
        }
        Op::RowwiseScale => {
            let (x, s) = (inputs[0], inputs[1]);
            let (m, d) = x.dims2();
            for r in 0..m {
                for c in 0..d {
                    input_grads[0][r * d + c] += grad[r * d + c] * s.data()[r];
                    input_grads[1][r] += grad[r * d + c] * x.data()[r * d + c];
                }
            }
        }
        Op::RowNormalize { .. } => {
            let x = inputs[0];
            let (m, d) = x.dims2();
            for r in 0..m {
                let row = x.row(r);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let y = &value.data()[r * d..(r + 1) * d];
                let g = &grad[r * d..(r + 1) * d];
                let y_dot_g: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for c in 0..d {
                    input_grads[0][r * d + c] += (g[c] - y[c] * y_dot_g) / n;
                }
            }
        }
        Op::RowwiseCross => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, _) = a.dims2();
            for r in 0..m {
                let x = a.row(r);
                let y = b.row(r);
                let g = &grad[r * 3..(r + 1) * 3];
                // dL/da = b x g ; dL/db = g x a
                input_grads[0][r * 3] += y[1] * g[2] - y[2] * g[1];
                input_grads[0][r * 3 + 1] += y[2] * g[0] - y[0] * g[2];
                input_grads[0][r * 3 + 2] += y[0] * g[1] - y[1] * g[0];
                input_grads[1][r * 3] += g[1] * x[2] - g[2] * x[1];
                input_grads[1][r * 3 + 1] += g[2] * x[0] - g[0] * x[2];
                input_grads[1][r * 3 + 2] += g[0] * x[1] - g[1] * x[0];
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(*self)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        self.tape.record(Op::MatMul, &[*self, rhs])
    }

    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        self.tape.record(Op::Add, &[*self, rhs])
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        self.tape.record(Op::Sub, &[*self, rhs])
    }

    pub fn hadamard(&self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        self.tape.record(Op::Hadamard, &[*self, rhs])
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>, TensorError> {
        self.tape.record(Op::Scale(c), &[*self])
    }

    pub fn sigmoid(&self) -> Result<Var<'t>, TensorError> {
        self.tape.record(Op::Sigmoid, &[*self])
    }

    pub fn softplus(&self) -> Result<Var<'t>, TensorError> {
        self.tape.record(Op::Softplus, &[*self])
    }

    pub fn abs(&self) -> Result<Var<'t>, TensorError> {
        self.tape.record(Op::Abs, &[*self])
    }

    pub fn add_row_bias(&self, bias: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&bias);
        self.tape.record(Op::AddRowBias, &[*self, bias])
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        for p in parts {
            parts[0].same_tape(p);
        }
        tape.record(Op::ConcatCols, parts)
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>, TensorError> {
        self.tape.record(Op::GatherRows(idx.to_vec()), &[*self])
    }

    pub fn scatter_add_rows(&self, idx: &[usize], out_rows: usize) -> Result<Var<'t>, TensorError> {
        self.tape.record(
            Op::ScatterAddRows {
                idx: idx.to_vec(),
                out_rows,
            },
            &[*self],
        )
    }

    pub fn scale_rows(&self, weights: &[f64]) -> Result<Var<'t>, TensorError> {
        self.tape.record(Op::ScaleRows(weights.to_vec()), &[*self])
    }

    pub fn mean_rows(&self) -> Result<Var<'t>, TensorError> {
        self.tape.record(Op::MeanRows, &[*self])
    }

    pub fn sum_all(&self) -> Result<Var<'t>, TensorError> {
        self.tape.record(Op::SumAll, &[*self])
    }

    pub fn feature_norm(
        &self,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f64,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        self.tape
            .record(Op::FeatureNorm { eps }, &[*self, gamma, beta])
    }

    /// Per-row quaternion -> rotation-matrix conversion; rows are
    /// normalized internally, output rows hold the 3x3 matrix row-major.
    pub fn quat_to_rot_rows(&self) -> Result<Var<'t>, TensorError> {
        self.tape.record(Op::QuatToRot, &[*self])
    }

    /// Per-row degree-2 real spherical harmonics (5 components).
    pub fn sph2_rows(&self) -> Result<Var<'t>, TensorError> {
        self.tape.record(Op::Sph2, &[*self])
    }

    /// Channel-wise inner product: self is m x (d*q) (chunks of q per
    /// channel), rhs is m x q, output is m x d.
    pub fn channel_dot(&self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        self.tape.record(Op::ChannelDot, &[*self, rhs])
    }

    /// Per-row outer product: m x p with m x q gives m x (p*q).
    pub fn rowwise_outer(&self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        self.tape.record(Op::RowwiseOuter, &[*self, rhs])
    }

    pub fn rowwise_dot(&self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        self.tape.record(Op::RowwiseDot, &[*self, rhs])
    }

    /// Multiplies each row of self (m x d) by the matching entry of a
    /// column vector (m x 1).
    pub fn rowwise_scale(&self, s: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&s);
        self.tape.record(Op::RowwiseScale, &[*self, s])
    }

    pub fn row_normalize(&self, eps: f64) -> Result<Var<'t>, TensorError> {
        self.tape.record(Op::RowNormalize { eps }, &[*self])
    }

    pub fn rowwise_cross(&self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        self.tape.record(Op::RowwiseCross, &[*self, rhs])
    }
}

/// One compared entry in a [`GradCheckReport`].
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub slot: ParamSlot,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradCheckEntry>,
    pub failures: Vec<GradCheckEntry>,
    pub tol: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compares [`Tape::backward`] against central finite differences obtained
/// by replaying the tape with perturbed parameter leaves. At most
/// `samples_per_param` entries are probed per parameter (all of them when
/// the parameter is small); entries where both sides vanish are skipped.
pub fn grad_check(
    tape: &Tape,
    loss: Var<'_>,
    step: f64,
    tol: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport, TensorError> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    assert!(step > 0.0 && tol > 0.0);
    let grads = tape.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        worst: None,
        failures: Vec::new(),
        tol,
        step,
    };

    for (leaf, slot) in tape.param_leaves() {
        let base = tape.value_of(Var {
            tape,
            index: leaf,
            rows: 0,
            cols: 0,
        });
        let n = base.len();
        let entries: Vec<usize> = if n <= samples_per_param {
            (0..n).collect()
        } else {
            let mut picked: Vec<usize> = (0..n).collect();
            picked.shuffle(&mut rng);
            picked.truncate(samples_per_param);
            picked
        };
        for entry in entries {
            let analytic = grads.get(slot).map(|g| g.at(entry)).unwrap_or(0.0);
            let mut plus = base.data().to_vec();
            plus[entry] += step;
            let mut minus = base.data().to_vec();
            minus[entry] -= step;
            let shape = base.shape().to_vec();
            let f_plus = tape.eval_with_override(
                leaf,
                &Tensor::from_vec_unchecked(shape.clone(), plus),
                loss.index,
            )?;
            let f_minus = tape.eval_with_override(
                leaf,
                &Tensor::from_vec_unchecked(shape, minus),
                loss.index,
            )?;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            if analytic.abs() < 1e-12 && numeric.abs() < 1e-7 {
                report.skipped += 1;
                continue;
            }
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            report.checked += 1;
            let item = GradCheckEntry {
                slot,
                entry,
                analytic,
                numeric,
                rel_err: rel,
            };
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(item.clone());
            }
            if rel >= tol && report.failures.len() < 16 {
                report.failures.push(item);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(vec![rows, cols], data).unwrap()
    }

    /// Exhaustive finite-difference check for a single-output graph.
    fn fd_check<F>(build: F, n_params: usize, tol: f64)
    where
        F: for<'t> Fn(&'t Tape, &mut ChaCha8Rng) -> Var<'t>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..4 {
            let tape = Tape::new();
            let loss = build(&tape, &mut rng);
            let report = grad_check(&tape, loss, 1e-6, tol, usize::MAX, trial).unwrap();
            assert!(
                report.pass(),
                "trial {trial}: max rel err {:.3e} (worst {:?})",
                report.max_rel_err,
                report.worst
            );
            assert!(report.checked > 0 || n_params == 0);
        }
    }

    #[test]
    fn matmul_hand_example() {
        let tape = Tape::new();
        let a = tape
            .constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
            .unwrap();
        let b = tape
            .constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap())
            .unwrap();
        let c = a.matmul(b).unwrap();
        assert_eq!(c.value().data(), &[2.0, 1.0, 4.0, 3.0]);

        // identity and annihilator cases
        let eye = tape
            .constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap())
            .unwrap();
        assert_eq!(eye.matmul(a).unwrap().value(), a.value());
        let zero = tape.constant(Tensor::zeros(vec![2, 2])).unwrap();
        assert_eq!(zero.matmul(a).unwrap().value().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        assert!(matches!(
            a.matmul(b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn elementwise_values() {
        let tape = Tape::new();
        let x = tape
            .constant(Tensor::from_vec(vec![1, 3], vec![0.0, 1.0, -1.0]).unwrap())
            .unwrap();
        let s = x.sigmoid().unwrap().value();
        assert!((s.at(0) - 0.5).abs() < 1e-15);
        let sp = x.softplus().unwrap().value();
        assert!((sp.at(0) - std::f64::consts::LN_2).abs() < 1e-15);
        let ones = tape
            .constant(Tensor::from_vec(vec![1, 3], vec![1.0; 3]).unwrap())
            .unwrap();
        assert_eq!(x.hadamard(ones).unwrap().value(), x.value());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_tensor(&mut rng, 3, 4);
        let v = tape.parameter(0, &p).unwrap();
        let loss = v.sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[1.0; 12][..]);
    }

    #[test]
    fn quadratic_gradient_is_parameter() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_tensor(&mut rng, 2, 5);
        let v = tape.parameter(0, &p).unwrap();
        let loss = v.hadamard(v).unwrap().sum_all().unwrap().scale(0.5).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(0).unwrap().max_abs_diff(&p) < 1e-15);
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_tensor(&mut rng, 2, 2);
        let unused = random_tensor(&mut rng, 3, 1);
        let v = tape.parameter(0, &p).unwrap();
        let _ = tape.parameter(1, &unused).unwrap();
        let loss = v.sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(1).unwrap().data(), &[0.0; 3][..]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::zeros(vec![2, 2])).unwrap();
        assert!(matches!(
            tape.backward(v),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn backward_is_linear_in_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_tensor(&mut rng, 3, 3);
        let w = random_tensor(&mut rng, 3, 3);
        let grad_for = |factor: f64| {
            let tape = Tape::new();
            let v = tape.parameter(0, &p).unwrap();
            let c = tape.constant(w.clone()).unwrap();
            let loss = v
                .matmul(c)
                .unwrap()
                .softplus()
                .unwrap()
                .sum_all()
                .unwrap()
                .scale(factor)
                .unwrap();
            let grads = tape.backward(loss).unwrap();
            grads.get(0).unwrap().clone()
        };
        let g1 = grad_for(1.0);
        let g3 = grad_for(3.0);
        for i in 0..9 {
            assert!((3.0 * g1.at(i) - g3.at(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_reproduces_values_bit_exactly() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_tensor(&mut rng, 4, 4);
        let v = tape.parameter(0, &p).unwrap();
        let w = tape.constant(random_tensor(&mut rng, 4, 4)).unwrap();
        let _ = v
            .matmul(w)
            .unwrap()
            .sigmoid()
            .unwrap()
            .feature_norm(
                tape.constant(Tensor::from_vec(vec![1, 4], vec![1.0; 4]).unwrap())
                    .unwrap(),
                tape.constant(Tensor::from_vec(vec![1, 4], vec![0.0; 4]).unwrap())
                    .unwrap(),
                1e-5,
            )
            .unwrap()
            .sum_all()
            .unwrap();
        assert!(tape.replay_matches().unwrap());
    }

    #[test]
    fn fd_matmul_add_bias_softplus() {
        fd_check(
            |tape, rng| {
                let x = tape.parameter(0, &random_tensor(rng, 3, 4)).unwrap();
                let w = tape.parameter(1, &random_tensor(rng, 4, 2)).unwrap();
                let b = tape.parameter(2, &random_tensor(rng, 1, 2)).unwrap();
                x.matmul(w)
                    .unwrap()
                    .add_row_bias(b)
                    .unwrap()
                    .softplus()
                    .unwrap()
                    .sum_all()
                    .unwrap()
            },
            3,
            1e-7,
        );
    }

    #[test]
    fn fd_elementwise_chain() {
        fd_check(
            |tape, rng| {
                let a = tape.parameter(0, &random_tensor(rng, 2, 3)).unwrap();
                let b = tape.parameter(1, &random_tensor(rng, 2, 3)).unwrap();
                a.hadamard(b)
                    .unwrap()
                    .sigmoid()
                    .unwrap()
                    .sub(b.scale(0.25).unwrap())
                    .unwrap()
                    .abs()
                    .unwrap()
                    .sum_all()
                    .unwrap()
            },
            2,
            1e-7,
        );
    }

    #[test]
    fn fd_gather_scatter_concat() {
        fd_check(
            |tape, rng| {
                let x = tape.parameter(0, &random_tensor(rng, 4, 3)).unwrap();
                let idx = [0usize, 2, 2, 3, 1];
                let g = x.gather_rows(&idx).unwrap();
                let cat = Var::concat_cols(&[g, g]).unwrap();
                cat.scatter_add_rows(&[1, 0, 3, 3, 2], 4)
                    .unwrap()
                    .scale_rows(&[0.5, 1.5, 1.0, 0.25])
                    .unwrap()
                    .mean_rows()
                    .unwrap()
                    .sum_all()
                    .unwrap()
            },
            1,
            1e-7,
        );
    }

    #[test]
    fn fd_feature_norm() {
        fd_check(
            |tape, rng| {
                let x = tape.parameter(0, &random_tensor(rng, 3, 6)).unwrap();
                let gamma = tape.parameter(1, &random_tensor(rng, 1, 6)).unwrap();
                let beta = tape.parameter(2, &random_tensor(rng, 1, 6)).unwrap();
                x.feature_norm(gamma, beta, 1e-5)
                    .unwrap()
                    .sigmoid()
                    .unwrap()
                    .sum_all()
                    .unwrap()
            },
            3,
            1e-6,
        );
    }

    #[test]
    fn fd_quat_to_rot() {
        fd_check(
            |tape, rng| {
                let q = tape.parameter(0, &random_tensor(rng, 5, 4)).unwrap();
                let w = tape.constant(random_tensor(rng, 5, 9)).unwrap();
                q.quat_to_rot_rows()
                    .unwrap()
                    .hadamard(w)
                    .unwrap()
                    .sum_all()
                    .unwrap()
            },
            1,
            1e-6,
        );
    }

    #[test]
    fn fd_sph2_and_channel_ops() {
        fd_check(
            |tape, rng| {
                let u = tape.parameter(0, &random_tensor(rng, 4, 3)).unwrap();
                let f = tape.parameter(1, &random_tensor(rng, 4, 2)).unwrap();
                let y2 = u.sph2_rows().unwrap();
                let outer = f.rowwise_outer(y2).unwrap(); // 4 x 10
                outer
                    .channel_dot(y2)
                    .unwrap()
                    .sum_all()
                    .unwrap()
            },
            2,
            1e-6,
        );
    }

    #[test]
    fn fd_row_geometry_ops() {
        // Composite Gram-Schmidt chain; divisions by residual norms amplify
        // finite-difference roundoff, hence the looser tolerance.
        fd_check(
            |tape, rng| {
                let a = tape.parameter(0, &random_tensor(rng, 4, 3)).unwrap();
                let b = tape.parameter(1, &random_tensor(rng, 4, 3)).unwrap();
                let an = a.row_normalize(1e-9).unwrap();
                let proj = an.rowwise_dot(b).unwrap();
                let b_perp = b.sub(an.rowwise_scale(proj).unwrap()).unwrap();
                let bn = b_perp.row_normalize(1e-9).unwrap();
                let c = an.rowwise_cross(bn).unwrap();
                Var::concat_cols(&[an, bn, c])
                    .unwrap()
                    .sigmoid()
                    .unwrap()
                    .sum_all()
                    .unwrap()
            },
            2,
            1e-5,
        );
    }

    #[test]
    fn quat_rows_match_normalized_gauge() {
        let tape = Tape::new();
        let q = tape
            .constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![2.0, 0.0, 0.0, 0.0]]).unwrap())
            .unwrap();
        let r = q.quat_to_rot_rows().unwrap().value();
        assert_eq!(r.row(0), r.row(1));
        assert_eq!(r.row(0), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn degenerate_quaternion_row_errors() {
        let tape = Tape::new();
        let q = tape
            .constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 0.0]]).unwrap())
            .unwrap();
        assert!(q.quat_to_rot_rows().is_err());
    }

    #[test]
    fn grad_check_linear_model_is_tight() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_tensor(&mut rng, 1, 6);
        let w = random_tensor(&mut rng, 6, 1);
        let v = tape.parameter(0, &p).unwrap();
        let c = tape.constant(w).unwrap();
        let loss = v.matmul(c).unwrap();
        let report = grad_check(&tape, loss, 1e-6, 1e-9, usize::MAX, 0).unwrap();
        assert!(report.pass(), "max rel err {:.3e}", report.max_rel_err);
    }
}
