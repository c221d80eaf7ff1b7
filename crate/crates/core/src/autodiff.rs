//! Reverse-mode differentiation over a closed set of tensor ops.
//!
//! A [`Tape`] records every op in creation order, so node indices are already a
//! topological order. [`Tape::backward`] walks them in reverse and accumulates
//! into input gradients.
//!
//! Only scalar-with-tensor broadcasting exists (in [`Tape::add`]); every other
//! alignment goes through [`Tape::tile_rows`] or [`Tape::reshape`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Names of the primitive ops, used in error reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    MulScalar,
    ConcatLastAxis,
    Reshape,
    Relu,
    MaxOverAxis,
    MeanOverAxis,
    Square,
    Sqrt,
    GatherRows,
    TileRows,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::MulScalar => "mul-scalar",
            OpKind::ConcatLastAxis => "concat-last-axis",
            OpKind::Reshape => "reshape",
            OpKind::Relu => "relu",
            OpKind::MaxOverAxis => "max-over-axis",
            OpKind::MeanOverAxis => "mean-over-axis",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::GatherRows => "gather-rows",
            OpKind::TileRows => "tile-rows",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    MulScalar { a: Var, c: f64 },
    Concat { parts: Vec<(Var, usize)> },
    Reshape { a: Var },
    Relu { a: Var },
    Max { a: Var, argmax: Vec<usize> },
    Mean { a: Var, axis: usize },
    Square { a: Var },
    Sqrt { a: Var },
    GatherRows { a: Var, index: Vec<usize> },
    TileRows { a: Var, times: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::MulScalar { .. } => OpKind::MulScalar,
            Op::Concat { .. } => OpKind::ConcatLastAxis,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Relu { .. } => OpKind::Relu,
            Op::Max { .. } => OpKind::MaxOverAxis,
            Op::Mean { .. } => OpKind::MeanOverAxis,
            Op::Square { .. } => OpKind::Square,
            Op::Sqrt { .. } => OpKind::Sqrt,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::TileRows { .. } => OpKind::TileRows,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` was unreachable.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Computation graph recorder.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Adds an input. Gradients are tracked through it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::Numeric {
                op: op.kind().name(),
                node,
            });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(node))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::contract(format!("var {} is not on this tape", v.0)))
        }
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::contract(format!(
                "matmul shapes {sa:?} x {sb:?} do not conform"
            )));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        self.push(Tensor::new([n, m], out)?, Op::MatMul { a, b }, &[a, b])
    }

    /// Elementwise sum of equal shapes, or a one-element tensor broadcast over the other.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.numel() == 1 {
            let s = vb.data()[0];
            Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x + s).collect())?
        } else if va.numel() == 1 {
            let s = va.data()[0];
            Tensor::new(vb.shape().to_vec(), vb.data().iter().map(|x| s + x).collect())?
        } else {
            return Err(Error::contract(format!(
                "add shapes {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            )));
        };
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect())?;
        self.push(value, Op::MulScalar { a, c }, &[a])
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        for &p in parts {
            self.check(p)?;
        }
        let lead = {
            let s = self.shape(first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::contract(format!(
                    "concat leading shapes differ: {:?} vs {lead:?}",
                    s
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let inputs: Vec<(Var, usize)> = parts.iter().copied().zip(widths).collect();
        self.push(Tensor::new(shape, out)?, Op::Concat { parts: inputs }, parts)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).clone().reshaped(shape)?;
        self.push(value, Op::Reshape { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let data = va.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Relu { a }, &[a])
    }

    /// Max over `axis`, removing it. Also returns the argmax position along
    /// `axis` for each output element; ties go to the lowest position.
    pub fn max_over_axis(&mut self, a: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        self.check(a)?;
        let va = self.value(a);
        let (outer, len, inner, out_shape) = split_axis(va.shape(), axis)?;
        let data = va.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut pos = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    let x = data[base + i];
                    let slot = o * inner + i;
                    if j == 0 || x > out[slot] {
                        out[slot] = x;
                        pos[slot] = j;
                    }
                }
            }
        }
        let argmax = pos
            .iter()
            .enumerate()
            .map(|(slot, &j)| ((slot / inner) * len + j) * inner + slot % inner)
            .collect();
        let v = self.push(Tensor::new(out_shape, out)?, Op::Max { a, argmax }, &[a])?;
        Ok((v, pos))
    }

    pub fn mean_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let (outer, len, inner, out_shape) = split_axis(va.shape(), axis)?;
        let data = va.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += data[base + i];
                }
            }
        }
        let scale = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        self.push(Tensor::new(out_shape, out)?, Op::Mean { a, axis }, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * x).collect())?;
        self.push(value, Op::Square { a }, &[a])
    }

    /// Elementwise square root; inputs must be non-negative.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        if let Some(x) = va.data().iter().find(|&&x| x < 0.0) {
            return Err(Error::contract(format!("sqrt of negative value {x}")));
        }
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x.sqrt()).collect())?;
        self.push(value, Op::Sqrt { a }, &[a])
    }

    /// Selects rows (leading-axis slices) by index; repeats are allowed.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        if va.shape().is_empty() {
            return Err(Error::contract("gather-rows on a scalar"));
        }
        if index.is_empty() {
            return Err(Error::contract("gather-rows with no indices"));
        }
        let n = va.rows();
        let w = va.row_len();
        let mut out = Vec::with_capacity(index.len() * w);
        for &i in index {
            if i >= n {
                return Err(Error::contract(format!("gather index {i} out of range {n}")));
            }
            out.extend_from_slice(va.row(i));
        }
        let mut shape = va.shape().to_vec();
        shape[0] = index.len();
        let op = Op::GatherRows {
            a,
            index: index.to_vec(),
        };
        self.push(Tensor::new(shape, out)?, op, &[a])
    }

    /// Repeats each row `times` times consecutively: row `i` lands on rows
    /// `i*times .. (i+1)*times`.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        self.check(a)?;
        if times == 0 {
            return Err(Error::contract("tile-rows with zero repeats"));
        }
        let va = self.value(a);
        if va.shape().is_empty() {
            return Err(Error::contract("tile-rows on a scalar"));
        }
        let mut out = Vec::with_capacity(va.numel() * times);
        for r in 0..va.rows() {
            let row = va.row(r);
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let mut shape = va.shape().to_vec();
        shape[0] *= times;
        self.push(Tensor::new(shape, out)?, Op::TileRows { a, times }, &[a])
    }

    // Composites built only from the primitives above.

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.mul_scalar(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.constant(Tensor::scalar(c));
        self.add(a, s)
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, [n])?;
        self.mean_over_axis(flat, 0)
    }

    /// Sum over the last axis of a 2-D tensor: `[n, w] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::contract(format!("sum_rows on shape {s:?}")));
        }
        let ones = self.constant(Tensor::full([s[1], 1], 1.0));
        let col = self.matmul(a, ones)?;
        self.reshape(col, [s[0]])
    }

    /// Stacks 2-D tensors with equal widths along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let width = match parts.first() {
            Some(&p) => self.shape(p).last().copied().unwrap_or(1),
            None => return Err(Error::contract("concat_rows of zero tensors")),
        };
        let mut flat = Vec::with_capacity(parts.len());
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p).to_vec();
            if s.len() != 2 || s[1] != width {
                return Err(Error::contract(format!("concat_rows shape {s:?}, width {width}")));
            }
            rows += s[0];
            flat.push(self.reshape(p, [1, s[0] * width])?);
        }
        let joined = self.concat_last(&flat)?;
        self.reshape(joined, [rows, width])
    }

    /// Backpropagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data();
                    self.accumulate(grads, *a, |ga| gemm(n, m, k, gd, false, bv, true, ga, 1.0));
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    self.accumulate(grads, *b, |gb| gemm(k, n, m, av, true, gd, false, gb, 1.0));
                }
            }
            Op::Add { a, b } => {
                for &x in [a, b] {
                    if !self.requires_grad(x) {
                        continue;
                    }
                    if self.value(x).numel() == g.numel() {
                        self.accumulate_copy(grads, x, gd);
                    } else {
                        let total: f64 = gd.iter().sum();
                        self.accumulate(grads, x, |gx| gx[0] += total);
                    }
                }
            }
            Op::MulScalar { a, c } => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(gd).for_each(|(x, y)| *x += c * y)
                });
            }
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let rows = g.numel() / total;
                let mut offset = 0;
                for &(p, w) in parts {
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, |gp| {
                            for r in 0..rows {
                                let src = &gd[r * total + offset..r * total + offset + w];
                                add_into(&mut gp[r * w..(r + 1) * w], src);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::Reshape { a } => self.accumulate_copy(grads, *a, gd),
            Op::Relu { a } => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, &inp), &up) in ga.iter_mut().zip(av).zip(gd) {
                        if inp > 0.0 {
                            *x += up;
                        }
                    }
                });
            }
            Op::Max { a, argmax, .. } => self.accumulate(grads, *a, |ga| {
                for (&src, &up) in argmax.iter().zip(gd) {
                    ga[src] += up;
                }
            }),
            Op::Mean { a, axis } => {
                let (outer, len, inner, _) =
                    split_axis(self.shape(*a), *axis).expect("validated in forward");
                let scale = 1.0 / len as f64;
                self.accumulate(grads, *a, |ga| {
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for i in 0..inner {
                                ga[base + i] += gd[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::Square { a } => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, &inp), &up) in ga.iter_mut().zip(av).zip(gd) {
                        *x += 2.0 * inp * up;
                    }
                });
            }
            Op::Sqrt { a } => {
                let out = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, &y), &up) in ga.iter_mut().zip(out).zip(gd) {
                        // zero subgradient where the derivative is unbounded
                        if y > 0.0 {
                            *x += up / (2.0 * y);
                        }
                    }
                });
            }
            Op::GatherRows { a, index } => {
                let w = self.value(*a).row_len();
                self.accumulate(grads, *a, |ga| {
                    for (k, &i) in index.iter().enumerate() {
                        add_into(&mut ga[i * w..(i + 1) * w], &gd[k * w..(k + 1) * w]);
                    }
                });
            }
            Op::TileRows { a, times } => {
                let va = self.value(*a);
                let w = va.row_len();
                let rows = va.rows();
                self.accumulate(grads, *a, |ga| {
                    for r in 0..rows {
                        for c in 0..*times {
                            let src = (r * times + c) * w;
                            add_into(&mut ga[r * w..(r + 1) * w], &gd[src..src + w]);
                        }
                    }
                });
            }
        }
    }

    /// Adds `g` into the gradient of `v`, copying instead of zero-filling on
    /// first touch.
    fn accumulate_copy(&self, grads: &mut [Option<Tensor>], v: Var, g: &[f64]) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(slot) => add_into(slot.data_mut(), g),
            empty => *empty = Some(Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("shape matches value")),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v).to_vec()));
        f(slot.data_mut());
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Splits a shape around `axis` into `(outer, len, inner, shape_without_axis)`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
    if axis >= shape.len() {
        return Err(Error::contract(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    let mut out = shape.to_vec();
    out.remove(axis);
    Ok((outer, shape[axis], inner, out))
}

/// `c = op(a) * op(b) + beta * c` with `op(a)` of shape `m x k`, `op(b)` of `k x n`.
/// A transposed operand is stored in its untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are asserted above and the strides index within them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
