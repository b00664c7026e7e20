use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(super) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    Powf(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Reshape(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    L2NormRows { x: Var, norms: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64> },
    Conv2d { x: Var, kernel: Var, stride: usize },
    ConvTranspose2d { x: Var, kernel: Var, stride: usize },
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order, so
/// `backward` is a single reverse sweep that visits each node once.
#[derive(Default)]
pub struct Tape<T: Float = f32> {
    pub(super) values: Vec<Tensor<T>>,
    pub(super) ops: Vec<Op>,
    pub(super) requires: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
}

/// Mutable view over gradient buffers used during the reverse sweep.
pub(super) struct Sink<'a, T: Float> {
    grads: &'a mut [Option<Vec<T>>],
    requires: &'a [bool],
    values: &'a [Tensor<T>],
}

impl<T: Float> Sink<'_, T> {
    /// Gradient buffer for `v`, or `None` when `v` does not need one.
    pub(super) fn get(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.requires[v.0] {
            return None;
        }
        let n = self.values[v.0].numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    pub(super) fn add(&mut self, v: Var, g: impl IntoIterator<Item = T>) {
        if let Some(buf) = self.get(v) {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(super) fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires_grad);
        Var(self.values.len() - 1)
    }

    pub(super) fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Leaf that participates in differentiation.
    pub fn var(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.values[v.0].data()[0]
    }

    /// Reverse sweep from a scalar `loss`, populating gradients of every
    /// ancestor that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.grads = (0..self.values.len()).map(|_| None).collect();
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let mut sink = Sink {
                grads: &mut self.grads,
                requires: &self.requires,
                values: &self.values,
            };
            backprop(i, &g, &self.values, &self.ops[i], &mut sink);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Var {
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let r = self.req(a) || self.req(b);
        self.push(out, op, r)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let out = self.values[a.0].map(f);
        let r = self.req(a);
        self.push(out, op, r)
    }

    // ---- linear algebra ---------------------------------------------------

    /// `a·b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(
                "matmul",
                format!("expected 2-D operands, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::dim(
                "matmul",
                format!(
                    "inner dimensions disagree: {sa:?} x {sb:?}{}",
                    if trans_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        let bs = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            self.values[a.0].data(),
            (k as isize, 1),
            self.values[b.0].data(),
            bs,
            &mut out,
            T::zero(),
        );
        let r = self.req(a) || self.req(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            r,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.values[a.0].data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let r = self.req(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), r))
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.zip(a, b, Op::Div(a, b), |x, y| x / y))
    }

    /// Elementwise max; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        Ok(self.zip(a, b, Op::Maximum(a, b), |x, y| if x >= y { x } else { y }))
    }

    /// Elementwise min; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        Ok(self.zip(a, b, Op::Minimum(a, b), |x, y| if x <= y { x } else { y }))
    }

    fn row_operand(&self, op: &'static str, a: Var, row: Var) -> Result<usize> {
        let (_, cols) = self.values[a.0].dims2();
        if self.values[row.0].numel() != cols {
            return Err(Error::dim(
                op,
                format!(
                    "row of shape {:?} does not broadcast over {:?}",
                    self.shape(row),
                    self.shape(a)
                ),
            ));
        }
        Ok(cols)
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.row_operand("add_row", a, row)?;
        let rv = self.values[row.0].data();
        let va = &self.values[a.0];
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rv[i % cols])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let r = self.req(a) || self.req(row);
        Ok(self.push(out, Op::AddRow(a, row), r))
    }

    /// Multiplies every row of `a` elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.row_operand("mul_row", a, row)?;
        let rv = self.values[row.0].data();
        let va = &self.values[a.0];
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * rv[i % cols])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let r = self.req(a) || self.req(row);
        Ok(self.push(out, Op::MulRow(a, row), r))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = T::of(c);
        self.unary(a, Op::Scale(a, c), |x| x * cc)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cc = T::of(c);
        self.unary(a, Op::AddScalar(a), |x| x + cc)
    }

    /// `c - a`.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| T::of(gelu(x.f64()).0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let pp = T::of(p);
        self.unary(a, Op::Powf(a, p), |x| x.powf(pp))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().map(|x| x.f64()).sum::<f64>();
        let r = self.req(a);
        self.push(Tensor::scalar(T::of(s)), Op::Sum(a), r)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.values[a.0];
        let s = v.data().iter().map(|x| x.f64()).sum::<f64>() / v.numel().max(1) as f64;
        let r = self.req(a);
        self.push(Tensor::scalar(T::of(s)), Op::Mean(a), r)
    }

    /// Mean over rows: `m×n -> 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = &self.values[a.0];
        let (m, n) = v.dims2();
        if m == 0 {
            return Err(Error::Input("mean_rows over zero rows".into()));
        }
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            for (j, x) in v.row(i).iter().enumerate() {
                acc[j] += x.f64();
            }
        }
        let data = acc.into_iter().map(|s| T::of(s / m as f64)).collect();
        let r = self.req(a);
        Ok(self.push(Tensor::new(vec![1, n], data)?, Op::MeanRows(a), r))
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.values[a.0].clone().reshape(shape)?;
        let r = self.req(a);
        Ok(self.push(out, Op::Reshape(a), r))
    }

    /// Stacks 2-D tensors along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.values[p.0].dims2().1,
            None => return Err(Error::Input("concat of zero tensors".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = &self.values[p.0];
            let (m, n) = v.dims2();
            if n != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column count {n} differs from {cols}"),
                ));
            }
            rows += m;
            data.extend_from_slice(v.data());
        }
        let r = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            r,
        ))
    }

    /// Joins 2-D tensors side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.values[p.0].dims2().0,
            None => return Err(Error::Input("concat of zero tensors".into())),
        };
        let mut total = 0;
        for &p in parts {
            let (m, n) = self.values[p.0].dims2();
            if m != rows {
                return Err(Error::dim(
                    "concat_cols",
                    format!("row count {m} differs from {rows}"),
                ));
            }
            total += n;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.values[p.0].row(i));
            }
        }
        let r = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            r,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.values[a.0];
        let (m, n) = v.dims2();
        if start + len > m {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} out of {m}", start + len),
            ));
        }
        let data = v.data()[start * n..(start + len) * n].to_vec();
        let r = self.req(a);
        Ok(self.push(
            Tensor::new(vec![len, n], data)?,
            Op::SliceRows { x: a, start },
            r,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.values[a.0];
        let (m, n) = v.dims2();
        if start + len > n {
            return Err(Error::dim(
                "slice_cols",
                format!("cols {start}..{} out of {n}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let r = self.req(a);
        Ok(self.push(
            Tensor::new(vec![m, len], data)?,
            Op::SliceCols { x: a, start },
            r,
        ))
    }

    // ---- indexing ---------------------------------------------------------

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.values[table.0];
        let (vocab, dim) = t.dims2();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Input(format!(
                    "token id {id} out of vocabulary of size {vocab}"
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        let r = self.req(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), dim], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            r,
        ))
    }

    /// Picks column `idx[i]` from row `i`: `m×n -> m×1`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = &self.values[a.0];
        let (m, n) = v.dims2();
        if idx.len() != m {
            return Err(Error::dim(
                "pick",
                format!("{} indices for {m} rows", idx.len()),
            ));
        }
        let mut data = Vec::with_capacity(m);
        for (i, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(Error::Input(format!("index {j} out of {n} columns")));
            }
            data.push(v.at(i, j));
        }
        let r = self.req(a);
        Ok(self.push(
            Tensor::new(vec![m, 1], data)?,
            Op::Pick {
                x: a,
                idx: idx.to_vec(),
            },
            r,
        ))
    }
}

#[inline]
pub(super) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Tanh-approximated GELU and its derivative.
pub(super) fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn backprop<T: Float>(i: usize, g: &[T], values: &[Tensor<T>], op: &Op, sink: &mut Sink<'_, T>) {
    let val = |v: Var| &values[v.0];
    let out = &values[i];
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (m, k) = val(*a).dims2();
            let n = out.dims2().1;
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = sink.get(*a) {
                // dA = G·Bᵀ (or G·B when b is stored transposed)
                let bs = if *trans_b { (1, k as isize) } else { (n as isize, 1) };
                let bt = (bs.1, bs.0);
                T::gemm(m, n, k, g, (n as isize, 1), bv, bt, ga, T::one());
            }
            if let Some(gb) = sink.get(*b) {
                if *trans_b {
                    // B is n×k: dB = Gᵀ·A
                    T::gemm(n, m, k, g, (1, n as isize), av, (k as isize, 1), gb, T::one());
                } else {
                    // B is k×n: dB = Aᵀ·G
                    T::gemm(k, m, n, av, (1, k as isize), g, (n as isize, 1), gb, T::one());
                }
            }
        }
        Op::Add(a, b) => {
            sink.add(*a, g.iter().copied());
            sink.add(*b, g.iter().copied());
        }
        Op::Sub(a, b) => {
            sink.add(*a, g.iter().copied());
            sink.add(*b, g.iter().map(|&x| -x));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            sink.add(*a, g.iter().zip(bv).map(|(&g, &y)| g * y));
            sink.add(*b, g.iter().zip(av).map(|(&g, &x)| g * x));
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            sink.add(*a, g.iter().zip(bv).map(|(&g, &y)| g / y));
            sink.add(
                *b,
                g.iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&g, (&x, &y))| -g * x / (y * y)),
            );
        }
        Op::Maximum(a, b) | Op::Minimum(a, b) => {
            let is_max = matches!(op, Op::Maximum(..));
            let (av, bv) = (val(*a).data(), val(*b).data());
            let pick_a: Vec<bool> = av
                .iter()
                .zip(bv)
                .map(|(x, y)| if is_max { x >= y } else { x <= y })
                .collect();
            sink.add(
                *a,
                g.iter().zip(&pick_a).map(|(&g, &p)| if p { g } else { T::zero() }),
            );
            sink.add(
                *b,
                g.iter().zip(&pick_a).map(|(&g, &p)| if p { T::zero() } else { g }),
            );
        }
        Op::AddRow(a, row) => {
            sink.add(*a, g.iter().copied());
            if let Some(gr) = sink.get(*row) {
                let cols = gr.len();
                for (idx, &x) in g.iter().enumerate() {
                    gr[idx % cols] += x;
                }
            }
        }
        Op::MulRow(a, row) => {
            let (av, rv) = (val(*a).data(), val(*row).data());
            let cols = rv.len();
            sink.add(*a, g.iter().enumerate().map(|(idx, &x)| x * rv[idx % cols]));
            if let Some(gr) = sink.get(*row) {
                for (idx, &x) in g.iter().enumerate() {
                    gr[idx % cols] += x * av[idx];
                }
            }
        }
        Op::Scale(a, c) => {
            let c = T::of(*c);
            sink.add(*a, g.iter().map(|&x| x * c));
        }
        Op::AddScalar(a) | Op::Reshape(a) => sink.add(*a, g.iter().copied()),
        Op::Exp(a) => sink.add(*a, g.iter().zip(out.data()).map(|(&g, &y)| g * y)),
        Op::Log(a) => sink.add(*a, g.iter().zip(val(*a).data()).map(|(&g, &x)| g / x)),
        Op::Sigmoid(a) => sink.add(
            *a,
            g.iter()
                .zip(out.data())
                .map(|(&g, &y)| g * y * (T::one() - y)),
        ),
        Op::Relu(a) => sink.add(
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }),
        ),
        Op::Gelu(a) => sink.add(
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(&g, &x)| g * T::of(gelu(x.f64()).1)),
        ),
        Op::Abs(a) => sink.add(
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(&g, &x)| if x >= T::zero() { g } else { -g }),
        ),
        Op::Powf(a, p) => {
            let pp = T::of(*p);
            let pm1 = T::of(*p - 1.0);
            sink.add(
                *a,
                g.iter()
                    .zip(val(*a).data())
                    .map(|(&g, &x)| g * pp * x.powf(pm1)),
            );
        }
        Op::Sum(a) => {
            let n = val(*a).numel();
            sink.add(*a, std::iter::repeat_n(g[0], n));
        }
        Op::Mean(a) => {
            let n = val(*a).numel();
            let s = g[0] / T::of(n as f64);
            sink.add(*a, std::iter::repeat_n(s, n));
        }
        Op::MeanRows(a) => {
            let (m, n) = val(*a).dims2();
            let inv = T::of(1.0 / m as f64);
            sink.add(*a, (0..m * n).map(|idx| g[idx % n] * inv));
        }
        Op::Transpose(a) => {
            let (m, n) = val(*a).dims2();
            if let Some(ga) = sink.get(*a) {
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] += g[c * m + r];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = val(p).numel();
                sink.add(p, g[off..off + len].iter().copied());
                off += len;
            }
        }
        Op::ConcatCols(parts) => {
            let (rows, total) = out.dims2();
            let mut col = 0;
            for &p in parts {
                let n = val(p).dims2().1;
                if let Some(gp) = sink.get(p) {
                    for r in 0..rows {
                        for c in 0..n {
                            gp[r * n + c] += g[r * total + col + c];
                        }
                    }
                }
                col += n;
            }
        }
        Op::SliceRows { x, start } => {
            let n = val(*x).dims2().1;
            if let Some(gx) = sink.get(*x) {
                for (dst, &s) in gx[start * n..].iter_mut().zip(g) {
                    *dst += s;
                }
            }
        }
        Op::SliceCols { x, start } => {
            let n = val(*x).dims2().1;
            let (m, len) = out.dims2();
            if let Some(gx) = sink.get(*x) {
                for r in 0..m {
                    for c in 0..len {
                        gx[r * n + start + c] += g[r * len + c];
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let dim = val(*table).dims2().1;
            if let Some(gt) = sink.get(*table) {
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..dim {
                        gt[id * dim + c] += g[r * dim + c];
                    }
                }
            }
        }
        Op::Pick { x, idx } => {
            let n = val(*x).dims2().1;
            if let Some(gx) = sink.get(*x) {
                for (r, &j) in idx.iter().enumerate() {
                    gx[r * n + j] += g[r];
                }
            }
        }
        Op::Softmax { .. }
        | Op::LogSoftmax { .. }
        | Op::LayerNorm { .. }
        | Op::L2NormRows { .. }
        | Op::Attention { .. }
        | Op::Conv2d { .. }
        | Op::ConvTranspose2d { .. } => super::nn::backprop_nn(g, values, out, op, sink),
    }
}
