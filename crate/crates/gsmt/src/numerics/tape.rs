use std::sync::atomic::{AtomicU64, Ordering};

use super::{NumericsError, Tensor};

static TAPE_SERIAL: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a specific [`Tape`].
///
/// Ids are tape-scoped: using one against a different tape is a
/// tape-integrity error, not silent garbage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeId {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    /// Shapes equal.
    None,
    /// Right operand is a single element applied everywhere.
    ScalarRhs,
    /// Right operand is a row vector added to every row of a 2-D left
    /// operand; its gradient sums over rows.
    RowRhs,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize, bc: Broadcast },
    Sub { a: usize, b: usize, bc: Broadcast },
    Mul { a: usize, b: usize, bc: Broadcast },
    Scale { a: usize, factor: f64 },
    Concat { inputs: Vec<usize>, axis: usize },
    Reshape { a: usize },
    Relu { a: usize },
    LeakyRelu { a: usize, slope: f64 },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Exp { a: usize },
    Abs { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    RowSoftmax { a: usize, mask: Option<Vec<bool>> },
    PairConcat { features: usize, gamma: usize },
    Attend { alpha: usize, features: usize },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Ordered record of primitive operations for one forward pass.
///
/// Operations are appended in execution order, so every node's inputs
/// precede it and a single reverse sweep visits each exactly once.
pub struct Tape {
    serial: u64,
    nodes: Vec<Node>,
    ran_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the given tensor, if it was
    /// reachable and marked as requiring grad.
    pub fn get(&self, id: TapeId) -> Option<&[f64]> {
        if id.tape != self.tape {
            return None;
        }
        self.grads.get(id.index).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            serial: TAPE_SERIAL.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            ran_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf tensor. Gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> TapeId {
        let needs = tensor.requires_grad();
        self.push(tensor.clone(), needs, Op::Leaf)
    }

    /// Records a constant leaf regardless of the tensor's grad flag.
    pub fn constant(&mut self, tensor: &Tensor) -> TapeId {
        let mut t = tensor.clone();
        t.set_requires_grad(false);
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, id: TapeId) -> &Tensor {
        debug_assert_eq!(id.tape, self.serial);
        &self.nodes[id.index].value
    }

    fn check(&self, op: &'static str, id: TapeId) -> Result<usize, NumericsError> {
        if id.tape != self.serial || id.index >= self.nodes.len() {
            return Err(NumericsError::TapeIntegrity { op });
        }
        Ok(id.index)
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> TapeId {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        TapeId {
            tape: self.serial,
            index,
        }
    }

    fn emit(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        needs_grad: bool,
        op: Op,
    ) -> Result<TapeId, NumericsError> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut t = Tensor::new(shape, data).expect("emit: shape/data consistent");
        if needs_grad {
            t.set_requires_grad(true);
        }
        Ok(self.push(t, needs_grad, op))
    }

    // ── Binary primitives ───────────────────────────────────────────────

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId, NumericsError> {
        let ai = self.check("matmul", a)?;
        let bi = self.check("matmul", b)?;
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(NumericsError::dim(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let data = matmul_raw(av.data(), bv.data(), m, k, n);
        let needs = self.nodes[ai].needs_grad || self.nodes[bi].needs_grad;
        self.emit("matmul", vec![m, n], data, needs, Op::MatMul { a: ai, b: bi })
    }

    fn broadcast_rule(
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
    ) -> Result<Broadcast, NumericsError> {
        if a.shape() == b.shape() {
            Ok(Broadcast::None)
        } else if b.numel() == 1 {
            Ok(Broadcast::ScalarRhs)
        } else if a.shape().len() == 2 && b.numel() == a.shape()[1] {
            Ok(Broadcast::RowRhs)
        } else {
            Err(NumericsError::dim(
                op,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ))
        }
    }

    fn zip(
        &mut self,
        op_name: &'static str,
        a: TapeId,
        b: TapeId,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize, Broadcast) -> Op,
    ) -> Result<TapeId, NumericsError> {
        let ai = self.check(op_name, a)?;
        let bi = self.check(op_name, b)?;
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let bc = Self::broadcast_rule(op_name, av, bv)?;
        let data: Vec<f64> = match bc {
            Broadcast::None => av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Broadcast::ScalarRhs => {
                let y = bv.data()[0];
                av.data().iter().map(|&x| f(x, y)).collect()
            }
            Broadcast::RowRhs => {
                let cols = bv.numel();
                av.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv.data()[i % cols]))
                    .collect()
            }
        };
        let shape = av.shape().to_vec();
        let needs = self.nodes[ai].needs_grad || self.nodes[bi].needs_grad;
        self.emit(op_name, shape, data, needs, make(ai, bi, bc))
    }

    pub fn add(&mut self, a: TapeId, b: TapeId) -> Result<TapeId, NumericsError> {
        self.zip("add", a, b, |x, y| x + y, |a, b, bc| Op::Add { a, b, bc })
    }

    pub fn sub(&mut self, a: TapeId, b: TapeId) -> Result<TapeId, NumericsError> {
        self.zip("sub", a, b, |x, y| x - y, |a, b, bc| Op::Sub { a, b, bc })
    }

    /// Elementwise product (same broadcast rules as `add`).
    pub fn mul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId, NumericsError> {
        self.zip("mul", a, b, |x, y| x * y, |a, b, bc| Op::Mul { a, b, bc })
    }

    /// Multiplication by a compile-time constant (not a tape node).
    pub fn scale(&mut self, a: TapeId, factor: f64) -> Result<TapeId, NumericsError> {
        let ai = self.check("scale", a)?;
        if !factor.is_finite() {
            return Err(NumericsError::NonFinite { op: "scale" });
        }
        let av = &self.nodes[ai].value;
        let data: Vec<f64> = av.data().iter().map(|&x| x * factor).collect();
        let shape = av.shape().to_vec();
        let needs = self.nodes[ai].needs_grad;
        self.emit("scale", shape, data, needs, Op::Scale { a: ai, factor })
    }

    /// Concatenates 2-D tensors along `axis` (0 = stack rows, 1 = widen rows).
    pub fn concat(&mut self, inputs: &[TapeId], axis: usize) -> Result<TapeId, NumericsError> {
        if inputs.is_empty() {
            return Err(NumericsError::dim("concat", "empty input list"));
        }
        if axis > 1 {
            return Err(NumericsError::dim("concat", format!("axis {axis} out of range")));
        }
        let mut idxs = Vec::with_capacity(inputs.len());
        for &id in inputs {
            idxs.push(self.check("concat", id)?);
        }
        let first = &self.nodes[idxs[0]].value;
        if first.shape().len() != 2 {
            return Err(NumericsError::dim("concat", "inputs must be 2-D"));
        }
        let (r0, c0) = (first.shape()[0], first.shape()[1]);
        for &i in &idxs[1..] {
            let s = self.nodes[i].value.shape();
            let ok = s.len() == 2 && if axis == 0 { s[1] == c0 } else { s[0] == r0 };
            if !ok {
                return Err(NumericsError::dim(
                    "concat",
                    format!("incompatible shapes {:?} vs {s:?} on axis {axis}", [r0, c0]),
                ));
            }
        }
        let (rows, cols, data) = if axis == 0 {
            let rows: usize = idxs.iter().map(|&i| self.nodes[i].value.shape()[0]).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &i in &idxs {
                data.extend_from_slice(self.nodes[i].value.data());
            }
            (rows, c0, data)
        } else {
            let cols: usize = idxs.iter().map(|&i| self.nodes[i].value.shape()[1]).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &i in &idxs {
                    let v = &self.nodes[i].value;
                    let c = v.shape()[1];
                    data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
                }
            }
            (r0, cols, data)
        };
        let needs = idxs.iter().any(|&i| self.nodes[i].needs_grad);
        self.emit(
            "concat",
            vec![rows, cols],
            data,
            needs,
            Op::Concat { inputs: idxs, axis },
        )
    }

    pub fn reshape(&mut self, a: TapeId, shape: Vec<usize>) -> Result<TapeId, NumericsError> {
        let ai = self.check("reshape", a)?;
        let av = &self.nodes[ai].value;
        if shape.iter().product::<usize>() != av.numel() {
            return Err(NumericsError::dim(
                "reshape",
                format!("{:?} -> {shape:?}", av.shape()),
            ));
        }
        let data = av.data().to_vec();
        let needs = self.nodes[ai].needs_grad;
        self.emit("reshape", shape, data, needs, Op::Reshape { a: ai })
    }

    // ── Unary primitives ────────────────────────────────────────────────

    fn map(
        &mut self,
        op_name: &'static str,
        a: TapeId,
        f: impl Fn(f64) -> f64,
        make: impl Fn(usize) -> Op,
    ) -> Result<TapeId, NumericsError> {
        let ai = self.check(op_name, a)?;
        let av = &self.nodes[ai].value;
        let data: Vec<f64> = av.data().iter().map(|&x| f(x)).collect();
        let shape = av.shape().to_vec();
        let needs = self.nodes[ai].needs_grad;
        self.emit(op_name, shape, data, needs, make(ai))
    }

    pub fn relu(&mut self, a: TapeId) -> Result<TapeId, NumericsError> {
        self.map("relu", a, |x| x.max(0.0), |a| Op::Relu { a })
    }

    pub fn leaky_relu(&mut self, a: TapeId, slope: f64) -> Result<TapeId, NumericsError> {
        self.map(
            "leaky_relu",
            a,
            |x| if x > 0.0 { x } else { slope * x },
            |a| Op::LeakyRelu { a, slope },
        )
    }

    pub fn sigmoid(&mut self, a: TapeId) -> Result<TapeId, NumericsError> {
        self.map("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), |a| Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: TapeId) -> Result<TapeId, NumericsError> {
        self.map("tanh", a, f64::tanh, |a| Op::Tanh { a })
    }

    pub fn exp(&mut self, a: TapeId) -> Result<TapeId, NumericsError> {
        self.map("exp", a, f64::exp, |a| Op::Exp { a })
    }

    pub fn abs(&mut self, a: TapeId) -> Result<TapeId, NumericsError> {
        self.map("abs", a, f64::abs, |a| Op::Abs { a })
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: TapeId) -> Result<TapeId, NumericsError> {
        let ai = self.check("sum", a)?;
        let s: f64 = self.nodes[ai].value.data().iter().sum();
        let needs = self.nodes[ai].needs_grad;
        self.emit("sum", vec![1], vec![s], needs, Op::Sum { a: ai })
    }

    pub fn mean(&mut self, a: TapeId) -> Result<TapeId, NumericsError> {
        let ai = self.check("mean", a)?;
        let v = &self.nodes[ai].value;
        if v.numel() == 0 {
            return Err(NumericsError::dim("mean", "empty tensor"));
        }
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        let needs = self.nodes[ai].needs_grad;
        self.emit("mean", vec![1], vec![s], needs, Op::Mean { a: ai })
    }

    // ── Structured primitives ───────────────────────────────────────────

    /// Row-wise softmax of a 2-D tensor with an optional element mask.
    ///
    /// Masked entries are excluded from both the stabilizing max and the
    /// normalization, and the corresponding outputs are exactly 0. The
    /// denominator sums exponentials in value order, so permuting a row's
    /// entries permutes its outputs bit-exactly.
    pub fn row_softmax_masked(
        &mut self,
        a: TapeId,
        mask: Option<&[bool]>,
    ) -> Result<TapeId, NumericsError> {
        let ai = self.check("row_softmax", a)?;
        let v = &self.nodes[ai].value;
        if v.shape().len() != 2 {
            return Err(NumericsError::dim(
                "row_softmax",
                format!("expected 2-D, got {:?}", v.shape()),
            ));
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(NumericsError::dim(
                    "row_softmax",
                    format!("mask has {} entries for {rows}x{cols}", m.len()),
                ));
            }
        }
        let live = |r: usize, c: usize| mask.map_or(true, |m| m[r * cols + c]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if live(r, c) {
                    max = max.max(v.data()[r * cols + c]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(NumericsError::FullyMaskedRow { row: r });
            }
            let mut exps: Vec<f64> = Vec::with_capacity(cols);
            for c in 0..cols {
                if live(r, c) {
                    let e = (v.data()[r * cols + c] - max).exp();
                    data[r * cols + c] = e;
                    exps.push(e);
                }
            }
            let denom = ordered_sum(&mut exps);
            for c in 0..cols {
                if live(r, c) {
                    data[r * cols + c] /= denom;
                }
            }
        }
        let needs = self.nodes[ai].needs_grad;
        self.emit(
            "row_softmax",
            vec![rows, cols],
            data,
            needs,
            Op::RowSoftmax {
                a: ai,
                mask: mask.map(<[bool]>::to_vec),
            },
        )
    }

    /// Expands node features and pairwise connection weights into one row
    /// per ordered node pair: row `i*n + j` is `[u_i | u_j | gamma_ij]`.
    pub fn pair_concat(&mut self, features: TapeId, gamma: TapeId) -> Result<TapeId, NumericsError> {
        let fi = self.check("pair_concat", features)?;
        let gi = self.check("pair_concat", gamma)?;
        let (fv, gv) = (&self.nodes[fi].value, &self.nodes[gi].value);
        if fv.shape().len() != 2 {
            return Err(NumericsError::dim("pair_concat", "features must be 2-D"));
        }
        let (n, d) = (fv.shape()[0], fv.shape()[1]);
        if gv.shape() != [n, n] {
            return Err(NumericsError::dim(
                "pair_concat",
                format!("gamma {:?} incompatible with {n} nodes", gv.shape()),
            ));
        }
        let width = 2 * d + 1;
        let mut data = Vec::with_capacity(n * n * width);
        for i in 0..n {
            for j in 0..n {
                data.extend_from_slice(&fv.data()[i * d..(i + 1) * d]);
                data.extend_from_slice(&fv.data()[j * d..(j + 1) * d]);
                data.push(gv.data()[i * n + j]);
            }
        }
        let needs = self.nodes[fi].needs_grad || self.nodes[gi].needs_grad;
        self.emit(
            "pair_concat",
            vec![n * n, width],
            data,
            needs,
            Op::PairConcat {
                features: fi,
                gamma: gi,
            },
        )
    }

    /// Attention-weighted aggregation `v_i = sum_j alpha_ij * u_j`.
    ///
    /// Per output element the products are summed in value order, so a
    /// consistent permutation of nodes permutes the output bit-exactly.
    pub fn attend(&mut self, alpha: TapeId, features: TapeId) -> Result<TapeId, NumericsError> {
        let ai = self.check("attend", alpha)?;
        let fi = self.check("attend", features)?;
        let (av, fv) = (&self.nodes[ai].value, &self.nodes[fi].value);
        if av.shape().len() != 2 || av.shape()[0] != av.shape()[1] {
            return Err(NumericsError::dim("attend", "alpha must be square"));
        }
        let n = av.shape()[0];
        if fv.shape().len() != 2 || fv.shape()[0] != n {
            return Err(NumericsError::dim(
                "attend",
                format!("features {:?} incompatible with {n} nodes", fv.shape()),
            ));
        }
        let d = fv.shape()[1];
        let mut data = vec![0.0; n * d];
        let mut terms: Vec<f64> = Vec::with_capacity(n);
        for i in 0..n {
            for f in 0..d {
                terms.clear();
                for j in 0..n {
                    terms.push(av.data()[i * n + j] * fv.data()[j * d + f]);
                }
                data[i * d + f] = ordered_sum(&mut terms);
            }
        }
        let needs = self.nodes[ai].needs_grad || self.nodes[fi].needs_grad;
        self.emit(
            "attend",
            vec![n, d],
            data,
            needs,
            Op::Attend {
                alpha: ai,
                features: fi,
            },
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each op on the tape is visited
    /// exactly once; adjoints accumulate additively across fan-out. A second
    /// call without a fresh tape is an error.
    pub fn backward(&mut self, loss: TapeId) -> Result<Gradients, NumericsError> {
        let li = self.check("backward", loss)?;
        if self.ran_backward {
            return Err(NumericsError::BackwardTwice);
        }
        self.ran_backward = true;
        if !self.nodes[li].value.is_scalar() {
            return Err(NumericsError::NonScalarLoss(
                self.nodes[li].value.shape().to_vec(),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);

        for idx in (0..=li).rev() {
            let Some(out_grad) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &out_grad, &mut grads);
            grads[idx] = Some(out_grad);
        }
        Ok(Gradients {
            tape: self.serial,
            grads,
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Accumulates into `grads[$target]` iff that node needs a gradient;
        // `$buf` is the target's adjoint buffer inside `$body`.
        macro_rules! accum {
            ($target:expr, |$buf:ident| $body:expr) => {{
                let t: usize = $target;
                if self.nodes[t].needs_grad {
                    let numel = self.nodes[t].value.numel();
                    let $buf = grads[t].get_or_insert_with(|| vec![0.0; numel]);
                    $body
                }
            }};
        }

        let nodes = &self.nodes;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                accum!(*a, |buf| {
                    // dA = G * B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv.data()[p * n + j];
                            }
                            buf[i * k + p] += s;
                        }
                    }
                });
                accum!(*b, |buf| {
                    // dB = A^T * G
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av.data()[i * k + p];
                            for j in 0..n {
                                buf[p * n + j] += a_ip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add { a, b, bc } => {
                accum!(*a, |buf| add_assign(buf, g));
                accum!(*b, |buf| reduce_assign(buf, g, *bc, 1.0));
            }
            Op::Sub { a, b, bc } => {
                accum!(*a, |buf| add_assign(buf, g));
                accum!(*b, |buf| reduce_assign(buf, g, *bc, -1.0));
            }
            Op::Mul { a, b, bc } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                accum!(*a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        let y = match bc {
                            Broadcast::None => bv.data()[i],
                            Broadcast::ScalarRhs => bv.data()[0],
                            Broadcast::RowRhs => bv.data()[i % bv.numel()],
                        };
                        buf[i] += gi * y;
                    }
                });
                accum!(*b, |buf| match bc {
                    Broadcast::None => {
                        for (i, gi) in g.iter().enumerate() {
                            buf[i] += gi * av.data()[i];
                        }
                    }
                    Broadcast::ScalarRhs => {
                        buf[0] += g.iter().zip(av.data()).map(|(gi, x)| gi * x).sum::<f64>();
                    }
                    Broadcast::RowRhs => {
                        let cols = buf.len();
                        for (i, gi) in g.iter().enumerate() {
                            buf[i % cols] += gi * av.data()[i];
                        }
                    }
                });
            }
            Op::Scale { a, factor } => {
                accum!(*a, |buf| {
                    for (bi, gi) in buf.iter_mut().zip(g) {
                        *bi += gi * factor;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &inp in inputs {
                        let len = nodes[inp].value.numel();
                        accum!(inp, |buf| add_assign(buf, &g[offset..offset + len]));
                        offset += len;
                    }
                } else {
                    let rows = nodes[inputs[0]].value.shape()[0];
                    let total_cols: usize =
                        inputs.iter().map(|&i| nodes[i].value.shape()[1]).sum();
                    let mut col_offset = 0;
                    for &inp in inputs {
                        let cols = nodes[inp].value.shape()[1];
                        accum!(inp, |buf| {
                            for r in 0..rows {
                                for c in 0..cols {
                                    buf[r * cols + c] += g[r * total_cols + col_offset + c];
                                }
                            }
                        });
                        col_offset += cols;
                    }
                }
            }
            Op::Reshape { a } => {
                accum!(*a, |buf| add_assign(buf, g));
            }
            Op::Relu { a } => {
                let av = &nodes[*a].value;
                accum!(*a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        if av.data()[i] > 0.0 {
                            buf[i] += gi;
                        }
                    }
                });
            }
            Op::LeakyRelu { a, slope } => {
                let av = &nodes[*a].value;
                accum!(*a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += if av.data()[i] > 0.0 { *gi } else { gi * slope };
                    }
                });
            }
            Op::Sigmoid { a } => {
                let out = &nodes[idx].value;
                accum!(*a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        let y = out.data()[i];
                        buf[i] += gi * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh { a } => {
                let out = &nodes[idx].value;
                accum!(*a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        let y = out.data()[i];
                        buf[i] += gi * (1.0 - y * y);
                    }
                });
            }
            Op::Exp { a } => {
                let out = &nodes[idx].value;
                accum!(*a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi * out.data()[i];
                    }
                });
            }
            Op::Abs { a } => {
                let av = &nodes[*a].value;
                accum!(*a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        let x = av.data()[i];
                        // Subgradient 0 at the kink.
                        let s = if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        buf[i] += gi * s;
                    }
                });
            }
            Op::Sum { a } => {
                let g0 = g[0];
                accum!(*a, |buf| {
                    for bi in buf.iter_mut() {
                        *bi += g0;
                    }
                });
            }
            Op::Mean { a } => {
                let g0 = g[0] / nodes[*a].value.numel() as f64;
                accum!(*a, |buf| {
                    for bi in buf.iter_mut() {
                        *bi += g0;
                    }
                });
            }
            Op::RowSoftmax { a, mask } => {
                let out = &nodes[idx].value;
                let (rows, cols) = (out.shape()[0], out.shape()[1]);
                accum!(*a, |buf| {
                    for r in 0..rows {
                        let live = |c: usize| mask.as_ref().map_or(true, |m| m[r * cols + c]);
                        let mut dot = 0.0;
                        for c in 0..cols {
                            if live(c) {
                                dot += g[r * cols + c] * out.data()[r * cols + c];
                            }
                        }
                        for c in 0..cols {
                            if live(c) {
                                let y = out.data()[r * cols + c];
                                buf[r * cols + c] += y * (g[r * cols + c] - dot);
                            }
                        }
                    }
                });
            }
            Op::PairConcat { features, gamma } => {
                let n = nodes[*features].value.shape()[0];
                let d = nodes[*features].value.shape()[1];
                let width = 2 * d + 1;
                accum!(*features, |buf| {
                    for i in 0..n {
                        for j in 0..n {
                            let row = (i * n + j) * width;
                            for f in 0..d {
                                buf[i * d + f] += g[row + f];
                                buf[j * d + f] += g[row + d + f];
                            }
                        }
                    }
                });
                accum!(*gamma, |buf| {
                    for i in 0..n {
                        for j in 0..n {
                            buf[i * n + j] += g[(i * n + j) * width + 2 * d];
                        }
                    }
                });
            }
            Op::Attend { alpha, features } => {
                let (av, fv) = (&nodes[*alpha].value, &nodes[*features].value);
                let n = av.shape()[0];
                let d = fv.shape()[1];
                accum!(*alpha, |buf| {
                    for i in 0..n {
                        for j in 0..n {
                            let mut s = 0.0;
                            for f in 0..d {
                                s += g[i * d + f] * fv.data()[j * d + f];
                            }
                            buf[i * n + j] += s;
                        }
                    }
                });
                accum!(*features, |buf| {
                    for i in 0..n {
                        for j in 0..n {
                            let a_ij = av.data()[i * n + j];
                            for f in 0..d {
                                buf[j * d + f] += a_ij * g[i * d + f];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_assign(buf: &mut [f64], g: &[f64]) {
    for (bi, gi) in buf.iter_mut().zip(g) {
        *bi += gi;
    }
}

fn reduce_assign(buf: &mut [f64], g: &[f64], bc: Broadcast, sign: f64) {
    match bc {
        Broadcast::None => {
            for (bi, gi) in buf.iter_mut().zip(g) {
                *bi += sign * gi;
            }
        }
        Broadcast::ScalarRhs => {
            buf[0] += sign * g.iter().sum::<f64>();
        }
        Broadcast::RowRhs => {
            let cols = buf.len();
            for (i, gi) in g.iter().enumerate() {
                buf[i % cols] += sign * gi;
            }
        }
    }
}

/// Sums in ascending value order: the result depends only on the multiset of
/// summands, never on their arrangement.
fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            let (crow, brow) = (&mut c[i * n..(i + 1) * n], &b[p * n..(p + 1) * n]);
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += a_ip * bj;
            }
        }
    }
    c
}
