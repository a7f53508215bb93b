use super::{gemm, ParamId, ParamStore, Real, Tensor};
use crate::error::{contract, shape, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: Var, idx: Vec<usize> },
    ScatterAdd { src: Var, idx: Vec<usize> },
    Conv3x3 { x: Var, w: Var, b: Var, cols: Vec<T> },
    Upsample2x(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Max { a: Var, arg: usize },
    Bce { logits: Var, targets: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Linear record of a forward computation; nodes are stored in creation
/// order, which is a topological order, so backward is a single reverse sweep.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Tape that rejects any op producing NaN or infinity.
    pub fn with_finite_check() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. With `requires_grad` its gradient is available from
    /// [`Tape::gradients`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            needs_grad: p.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape(op, format!("expected a rank-2 operand, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape(
                op,
                format!("operands {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// `op(a) · op(b)` for rank-2 operands, where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2("matmul", a)?;
        let (br, bc) = self.dims2("matmul", b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape(
                "matmul",
                format!(
                    "inner extents differ: {:?}{} x {:?}{}",
                    self.shape(a),
                    if ta { "ᵀ" } else { "" },
                    self.shape(b),
                    if tb { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::raw(vec![m, n], out), Op::MatMul { a, b, ta, tb }, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shp = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(name, Tensor::raw(shp, data), op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a row vector (`[d]` or `[1, d]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(row).len() != cols {
            return Err(shape(
                "add_row",
                format!("row of {} values cannot broadcast over {:?}", self.value(row).len(), self.shape(a)),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        if cols > 0 {
            for chunk in data.chunks_mut(cols) {
                chunk.iter_mut().zip(&r).for_each(|(x, &y)| *x += y);
            }
        }
        let shp = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(row);
        self.push("add_row", Tensor::raw(shp, data), Op::AddRow(a, row), needs)
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shp = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(name, Tensor::raw(shp, data), op, needs)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.map("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let c = T::lit(GELU_C);
        let k = T::lit(GELU_A);
        let half = T::lit(0.5);
        self.map(
            "gelu",
            a,
            |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Softmax over the last axis (rows of the trailing extent).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shp = self.shape(a).to_vec();
        let d = *shp.last().unwrap_or(&0);
        let mut data = self.value(a).data().to_vec();
        if d > 0 {
            for row in data.chunks_mut(d) {
                let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let mut s = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                row.iter_mut().for_each(|x| *x = *x / s);
            }
        }
        let needs = self.needs(a);
        self.push("softmax", Tensor::raw(shp, data), Op::Softmax(a), needs)
    }

    /// Row-wise layer normalization with learned affine `gamma`, `beta`.
    /// Constant rows normalize to zero, so they map to `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape(
                "layer_norm",
                format!(
                    "affine params of size {}/{} for rows of {d}",
                    self.value(gamma).len(),
                    self.value(beta).len()
                ),
            ));
        }
        if d == 0 {
            return Err(shape("layer_norm", "empty rows"));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = xv.len() / d;
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let shp = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            "layer_norm",
            Tensor::raw(shp, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// Selects rows of `table` (embedding lookup / gather).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.value(table).rows();
        let d = self.value(table).cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape("gather_rows", format!("index {bad} out of range for {rows} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(
            "gather_rows",
            Tensor::raw(vec![idx.len(), d], out),
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    /// `out[idx[r]] += src[r]` into a zero `[rows, d]` tensor.
    pub fn scatter_add_rows(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (n, d) = self.dims2("scatter_add_rows", src)?;
        if n != idx.len() {
            return Err(shape("scatter_add_rows", format!("{n} source rows for {} indices", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape("scatter_add_rows", format!("index {bad} out of range for {rows} rows")));
        }
        let s = self.value(src).data();
        let mut out = vec![T::zero(); rows * d];
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..d {
                out[i * d + c] += s[r * d + c];
            }
        }
        let needs = self.needs(src);
        self.push(
            "scatter_add_rows",
            Tensor::raw(vec![rows, d], out),
            Op::ScatterAdd {
                src,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    /// 3×3 convolution, stride 1, zero padding 1. `x: [C, H, W]`,
    /// `w: [O, C, 3, 3]`, `b: [O]` → `[O, H, W]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || ws[1] != xs[0] {
            return Err(shape("conv3x3", format!("input {xs:?} with kernel {ws:?}")));
        }
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let o = ws[0];
        if self.value(b).len() != o {
            return Err(shape("conv3x3", format!("bias of {} for {o} output channels", self.value(b).len())));
        }
        let hw = h * wd;
        let cols = im2col(self.value(x).data(), c, h, wd);
        let mut out = vec![T::zero(); o * hw];
        gemm(o, c * 9, hw, self.value(w).data(), false, &cols, false, &mut out, false);
        let bias = self.value(b).data();
        for (oc, chunk) in out.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bias[oc]);
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push("conv3x3", Tensor::raw(vec![o, h, wd], out), Op::Conv3x3 { x, w, b, cols }, needs)
    }

    /// Nearest-neighbour 2× upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape("upsample2x", format!("expected [C, H, W], got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.needs(x);
        self.push("upsample2x", Tensor::raw(vec![c, 2 * h, 2 * w], out), Op::Upsample2x(x), needs)
    }

    /// Concatenates rank-2 tensors along the row (token) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape("concat_rows", "no operands"));
        }
        let d = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != d {
                return Err(shape("concat_rows", format!("operand {:?} does not have {d} columns", t.shape())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", Tensor::raw(vec![rows, d], data), Op::ConcatRows(parts.to_vec()), needs)
    }

    /// Concatenates rank-2 tensors along the column (feature) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape("concat_cols", "no operands"));
        }
        let n = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != n {
                return Err(shape("concat_cols", format!("operand {:?} does not have {n} rows", t.shape())));
            }
            total += t.cols();
        }
        let mut data = vec![T::zero(); n * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..n {
                data[r * total + off..r * total + off + c].copy_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_cols", Tensor::raw(vec![n, total], data), Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_rows", a)?;
        if start + len > r {
            return Err(shape("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let needs = self.needs(a);
        self.push("slice_rows", Tensor::raw(vec![len, c], data), Op::SliceRows { a, start }, needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", a)?;
        if start + len > c {
            return Err(shape("slice_cols", format!("columns {start}..{} of {c}", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&src[row * c + start..row * c + start + len]);
        }
        let needs = self.needs(a);
        self.push("slice_cols", Tensor::raw(vec![r, len], data), Op::SliceCols { a, start }, needs)
    }

    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        let n: usize = new_shape.iter().product();
        if n != self.value(a).len() {
            return Err(shape("reshape", format!("cannot view {:?} as {new_shape:?}", self.shape(a))));
        }
        let data = self.value(a).data().to_vec();
        let needs = self.needs(a);
        self.push("reshape", Tensor::raw(new_shape.to_vec(), data), Op::Reshape(a), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(a);
        self.push("transpose", Tensor::raw(vec![c, r], data), Op::Transpose(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        let needs = self.needs(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Mean of all elements; the mean of an empty tensor is zero.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let m = if t.is_empty() {
            T::zero()
        } else {
            s / T::from_usize(t.len()).unwrap()
        };
        let needs = self.needs(a);
        self.push("mean", Tensor::scalar(m), Op::Mean(a), needs)
    }

    /// Maximum over all elements; the gradient flows to the first maximiser.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape("max", "empty operand"));
        }
        let mut arg = 0;
        for (i, &v) in t.data().iter().enumerate() {
            if v > t.data()[arg] {
                arg = i;
            }
        }
        let m = t.data()[arg];
        let needs = self.needs(a);
        self.push("max", Tensor::scalar(m), Op::Max { a, arg }, needs)
    }

    /// Elementwise binary cross-entropy between `sigmoid(logits)` and soft
    /// `targets` in `[0, 1]`, computed in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.value(logits).len() != targets.len() {
            return Err(shape(
                "bce_with_logits",
                format!("logits {:?} vs targets {:?}", self.shape(logits), targets.shape()),
            ));
        }
        let data = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .collect();
        let shp = self.shape(logits).to_vec();
        let needs = self.needs(logits);
        self.push(
            "bce_with_logits",
            Tensor::raw(shp, data),
            Op::Bce {
                logits,
                targets: targets.data().to_vec(),
            },
            needs,
        )
    }

    /// Reverse sweep from a scalar `loss`; returns the gradient of every node
    /// that requires one (`None` elsewhere).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    /// Accumulates `∂loss/∂param` into the gradient buffers of `store`.
    /// Repeated calls add up until [`ParamStore::zero_grad`].
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in self.param_gradients(loss)? {
            store.accumulate_grad(id, &g)?;
        }
        Ok(())
    }

    /// Per-parameter gradients in tape order, without touching any store.
    /// A parameter recorded twice appears twice.
    pub fn param_gradients(&self, loss: Var) -> Result<Vec<(ParamId, Vec<T>)>> {
        let grads = self.gradients(loss)?;
        Ok(self
            .nodes
            .iter()
            .zip(grads)
            .filter_map(|(node, g)| match (&node.op, g) {
                (Op::Param(id), Some(g)) => Some((*id, g)),
                _ => None,
            })
            .collect())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let ash = self.shape(*a);
                let k = if *ta { ash[0] } else { ash[1] };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let ga = acc(grads, *a, av.len());
                    if *ta {
                        gemm(k, n, m, bv, *tb, g, true, ga, true);
                    } else {
                        gemm(m, n, k, g, false, bv, !*tb, ga, true);
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, bv.len());
                    if *tb {
                        gemm(n, m, k, g, true, av, *ta, gb, true);
                    } else {
                        gemm(k, m, n, av, !*ta, g, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if self.needs(v) {
                        acc(grads, v, g.len()).iter_mut().zip(g).for_each(|(x, &y)| *x += sign * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if self.needs(v) {
                        acc(grads, v, g.len()).iter_mut().zip(g).for_each(|(x, &y)| *x += sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    acc(grads, *a, g.len()).iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if self.needs(*row) {
                    let d = self.value(*row).len();
                    let gr = acc(grads, *row, d);
                    if d > 0 {
                        for chunk in g.chunks(d) {
                            gr.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                acc(grads, *a, g.len()).iter_mut().zip(g).for_each(|(x, &y)| *x += *s * y);
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    if av[j] > T::zero() {
                        ga[j] += g[j];
                    }
                }
            }
            Op::Gelu(a) => {
                let c = T::lit(GELU_C);
                let k = T::lit(GELU_A);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let av = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    let x = av[j];
                    let t = (c * (x + k * x * x * x)).tanh();
                    let d = half * (T::one() + t)
                        + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    ga[j] += g[j] * d;
                }
            }
            Op::Sigmoid(a) => {
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * out[j] * (T::one() - out[j]);
                }
            }
            Op::Tanh(a) => {
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * (T::one() - out[j] * out[j]);
                }
            }
            Op::Softmax(a) => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let ga = acc(grads, *a, g.len());
                if d > 0 {
                    for ((gr, yr), dst) in g.chunks(d).zip(out.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: T = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                        for c in 0..d {
                            dst[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let gg = acc(grads, *gamma, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = acc(grads, *beta, d);
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                    }
                }
                if self.needs(*x) {
                    let inv_d = T::one() / T::from_usize(d).unwrap();
                    let gx = acc(grads, *x, g.len());
                    for (r, ((gr, hr), dst)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..d {
                            let dh = gr[c] * gam[c];
                            s1 += dh;
                            s2 += dh * hr[c];
                        }
                        s1 = s1 * inv_d;
                        s2 = s2 * inv_d;
                        for c in 0..d {
                            let dh = gr[c] * gam[c];
                            dst[c] += rstd[r] * (dh - s1 - hr[c] * s2);
                        }
                    }
                }
            }
            Op::Gather { table, idx } => {
                let d = self.value(*table).cols();
                let gt = acc(grads, *table, self.value(*table).len());
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..d {
                        gt[src * d + c] += g[r * d + c];
                    }
                }
            }
            Op::ScatterAdd { src, idx } => {
                let d = self.value(*src).cols();
                let gs = acc(grads, *src, self.value(*src).len());
                for (r, &dst) in idx.iter().enumerate() {
                    for c in 0..d {
                        gs[r * d + c] += g[dst * d + c];
                    }
                }
            }
            Op::Conv3x3 { x, w, b, cols } => {
                let xs = self.shape(*x);
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let o = self.shape(*w)[0];
                let hw = h * wd;
                if self.needs(*b) {
                    let gb = acc(grads, *b, o);
                    for (oc, chunk) in g.chunks(hw).enumerate() {
                        gb[oc] += chunk.iter().copied().sum();
                    }
                }
                if self.needs(*w) {
                    let gw = acc(grads, *w, o * c * 9);
                    gemm(o, hw, c * 9, g, false, cols, true, gw, true);
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); c * 9 * hw];
                    gemm(c * 9, o, hw, self.value(*w).data(), true, g, false, &mut dcols, false);
                    let gx = acc(grads, *x, c * hw);
                    col2im_add(&dcols, c, h, wd, gx);
                }
            }
            Op::Upsample2x(x) => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let gx = acc(grads, *x, c * h * w);
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        acc(grads, p, n).iter_mut().zip(&g[off..off + n]).for_each(|(a, &b)| *a += b);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let n = node.value.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let gp = acc(grads, p, n * c);
                        for r in 0..n {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows { a, start } => {
                let c = node.value.cols();
                let n = self.value(*a).len();
                let ga = acc(grads, *a, n);
                ga[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            Op::SliceCols { a, start } => {
                let (r, len) = (node.value.shape()[0], node.value.shape()[1]);
                let c = self.value(*a).cols();
                let ga = acc(grads, *a, r * c);
                for row in 0..r {
                    for j in 0..len {
                        ga[row * c + start + j] += g[row * len + j];
                    }
                }
            }
            Op::Reshape(a) => {
                acc(grads, *a, g.len()).iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let ga = acc(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, n).iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                if n > 0 {
                    let s = g[0] / T::from_usize(n).unwrap();
                    acc(grads, *a, n).iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Max { a, arg } => {
                let n = self.value(*a).len();
                acc(grads, *a, n)[*arg] += g[0];
            }
            Op::Bce { logits, targets } => {
                let z = self.value(*logits).data();
                let gl = acc(grads, *logits, g.len());
                for j in 0..g.len() {
                    gl[j] += g[j] * (sigmoid(z[j]) - targets[j]);
                }
            }
        }
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); c * 9 * hw];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = (ch * h + sy as usize) * w;
                    let dst = row + y * w;
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    for xx in x0..x1 {
                        cols[dst + xx] = x[src_row + xx + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], c: usize, h: usize, w: usize, gx: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = (ch * h + sy as usize) * w;
                    let src = row + y * w;
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    for xx in x0..x1 {
                        gx[dst_row + xx + kx - 1] += cols[src + xx];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let mut tape = Tape::<f64>::new();
        for c in [-40.0, 0.0, 7.5, 300.0] {
            let x = tape.constant(t(&[3], &[c, c, c]));
            let y = tape.softmax(x).unwrap();
            for &v in tape.value(y).data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero_before_affine() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2, 5], 4.25));
        let g = tape.constant(Tensor::full(&[5], 1.0));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.gradients(y).unwrap();
        assert_eq!(g[0].as_ref().unwrap()[0], 6.0);
    }

    #[test]
    fn conv_of_impulse_with_ones_kernel_is_a_block() {
        let mut tape = Tape::<f32>::new();
        let mut img = Tensor::zeros(&[1, 5, 5]);
        img.data_mut()[2 * 5 + 2] = 1.0;
        let x = tape.constant(img);
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv3x3(x, w, b).unwrap();
        let out = tape.value(y).data();
        for r in 0..5 {
            for c in 0..5 {
                let expect = if (1..=3).contains(&r) && (1..=3).contains(&c) { 1.0 } else { 0.0 };
                assert_eq!(out[r * 5 + c], expect, "({r},{c})");
            }
        }
    }

    #[test]
    fn conv_impulse_at_border_is_clipped() {
        let mut tape = Tape::<f32>::new();
        let mut img = Tensor::zeros(&[1, 4, 4]);
        img.data_mut()[0] = 1.0;
        let x = tape.constant(img);
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv3x3(x, w, b).unwrap();
        let ones: Vec<usize> = tape.value(y).data().iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        assert_eq!(ones, vec![0, 1, 4, 5]);
    }

    #[test]
    fn grad_of_sum_wx_is_outer_structure() {
        // loss = sum(W x), W: 2x3, x: 3x1 → dW[i][j] = x[j]
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6])).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let x = tape.constant(t(&[3, 1], &[1.5, -2.0, 0.25]));
        let y = tape.matmul(wv, x).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[1.5, -2.0, 0.25, 1.5, -2.0, 0.25]);
    }

    #[test]
    fn unrelated_param_has_zero_grad() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", t(&[2], &[1.0, 2.0])).unwrap();
        let p = store.insert("p", t(&[2], &[3.0, 4.0])).unwrap();
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let _pv = tape.param(&store, p);
        let l = tape.sum(av).unwrap();
        tape.backward(l, &mut store).unwrap();
        assert!(store.get(p).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", t(&[1], &[2.0])).unwrap();
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let l = tape.mul(av, av).unwrap();
        tape.backward(l, &mut store).unwrap();
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get(a).grad.data(), &[8.0]);
        store.zero_grad();
        assert_eq!(store.get(a).grad.data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.gradients(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn finite_check_flags_overflow() {
        let mut tape = Tape::<f32>::with_finite_check();
        let a = tape.constant(Tensor::full(&[2], 1e30));
        assert!(matches!(tape.mul(a, a), Err(Error::NonFinite { op: "mul" })));
        let mut lax = Tape::<f32>::new();
        let a = lax.constant(Tensor::full(&[2], 1e30));
        assert!(lax.mul(a, a).is_ok());
    }

    #[test]
    fn sigmoid_range_and_softmax_rows_sum_to_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[4, 7], |i| (i as f32 - 13.0) * 0.9));
        let s = tape.sigmoid(x).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let p = tape.softmax(x).unwrap();
        for r in 0..4 {
            let sum: f32 = tape.value(p).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn frozen_param_is_a_constant() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", t(&[1], &[2.0])).unwrap();
        store.set_all_requires_grad(false);
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let l = tape.mul(av, av).unwrap();
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get(a).grad.data(), &[0.0]);
    }
}
