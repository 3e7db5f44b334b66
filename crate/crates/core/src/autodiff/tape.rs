use super::tensor::Tensor;
use super::DiffError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Stable identifier of a learnable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named collection of learnable tensors. Registration order is the
/// serialization and optimizer order, so it is deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.entries.push((name.to_string(), tensor.with_grad()));
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Round every parameter through `f32`. Serialized snapshots hold 32-bit
    /// values, so this aligns in-memory state with what a reader of the
    /// snapshot will see.
    pub fn round_to_f32(&mut self) {
        for (_, t) in &mut self.entries {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Arithmetic mode of a tape. `Single` rounds every op result through `f32`,
/// mimicking 32-bit storage; `Double` is the reference mode all gradient
/// tolerances assume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Double,
    Single,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Matmul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScaleRows(Var, Var),
    SelectColumn(Var, usize),
    MulScalar(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    NormalCdf(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Gradient map produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a tape variable, if it was tracked.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a registered parameter.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, node)| self.grads[*node].as_ref())
    }
}

/// Records a forward computation and differentiates it in reverse.
///
/// One tape is one graph: build, call [`Tape::backward`], drop. Tapes share
/// nothing, so independent graphs may live on independent threads.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    param_nodes: Vec<(ParamId, Var)>,
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::Double)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            param_nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> Tensor {
        let n = &self.nodes[var.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, mut value: Vec<f64>, needs_grad: bool) -> Var {
        if self.precision == Precision::Single {
            for v in &mut value {
                *v = *v as f32 as f64;
            }
        }
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            1 => (1, s[0]),
            _ => (s[0], s[1]),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> DiffError {
        DiffError::ShapeMismatch {
            op,
            lhs: self.nodes[a.0].shape.clone(),
            rhs: self.nodes[b.0].shape.clone(),
        }
    }

    /// Constant input; gradients do not flow into it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            Op::Leaf { param: None },
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Input that participates in `backward`.
    pub fn watched(&mut self, t: &Tensor) -> Var {
        self.push(
            Op::Leaf { param: None },
            t.shape().to_vec(),
            t.data().to_vec(),
            true,
        )
    }

    /// Leaf tied to a registered parameter; `Gradients::param` resolves it.
    /// Repeated reads of the same parameter reuse one node so its gradient
    /// accumulates in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, var)) = self.param_nodes.iter().find(|(p, _)| *p == id) {
            return var;
        }
        let t = store.value(id);
        let var = self.push(
            Op::Leaf { param: Some(id) },
            t.shape().to_vec(),
            t.data().to_vec(),
            true,
        );
        self.param_nodes.push((id, var));
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, ka) = self.dims2(a);
        let (kb, n) = self.dims2(b);
        if ka != kb {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        let av = self.val(a);
        let bv = self.val(b);
        for i in 0..m {
            for k in 0..ka {
                let aik = av[i * ka + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[k * n..(k + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b_kj) in orow.iter_mut().zip(brow) {
                    *o += aik * b_kj;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), vec![m, n], out, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let sa = self.nodes[a.0].shape.clone();
        let (ra, ca) = self.dims2(a);
        let (rb, cb) = self.dims2(b);
        let needs = self.needs(a) || self.needs(b);
        if ra == rb && ca == cb {
            let out: Vec<f64> = self
                .val(a)
                .iter()
                .zip(self.val(b))
                .map(|(&x, &y)| x + y)
                .collect();
            Ok(self.push(Op::Add(a, b), sa, out, needs))
        } else if rb == 1 && cb == ca {
            // row-vector broadcast over matrix rows
            let bv = self.val(b).to_vec();
            let out: Vec<f64> = self
                .val(a)
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bv[i % ca])
                .collect();
            Ok(self.push(Op::AddRow(a, b), sa, out, needs))
        } else {
            Err(self.mismatch("add", a, b))
        }
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Var, Var) -> Op,
    ) -> Result<Var, DiffError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch(name, a, b));
        }
        let out: Vec<f64> = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(op(a, b), shape, out, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same("div", a, b, |x, y| x / y, Op::Div)
    }

    /// `out[i, j] = a[i, j] * col[i]` where `col` has shape `[rows, 1]`.
    pub fn scale_rows(&mut self, a: Var, col: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims2(a);
        let (rc, cc) = self.dims2(col);
        if rc != r || cc != 1 {
            return Err(self.mismatch("scale_rows", a, col));
        }
        let cv = self.val(col).to_vec();
        let out: Vec<f64> = self
            .val(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * cv[i / c])
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(col);
        Ok(self.push(Op::ScaleRows(a, col), shape, out, needs))
    }

    /// Column `j` of a matrix as a `[rows, 1]` tensor.
    pub fn select_column(&mut self, a: Var, j: usize) -> Result<Var, DiffError> {
        let (r, c) = self.dims2(a);
        if j >= c {
            return Err(DiffError::BadIndex { index: j, len: c });
        }
        let out: Vec<f64> = (0..r).map(|i| self.val(a)[i * c + j]).collect();
        let needs = self.needs(a);
        Ok(self.push(Op::SelectColumn(a, j), vec![r, 1], out, needs))
    }

    /// Multiply every element by a one-element variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, DiffError> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(self.mismatch("mul_scalar", a, s));
        }
        let sv = self.val(s)[0];
        let out: Vec<f64> = self.val(a).iter().map(|&x| x * sv).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(Op::MulScalar(a, s), shape, out, needs))
    }

    /// `scale * a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out: Vec<f64> = self.val(a).iter().map(|&x| scale * x + shift).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(Op::Affine(a, scale), shape, out, needs)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.val(a).iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(op, shape, out, needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn normal_cdf(&mut self, a: Var) -> Var {
        self.unary(a, normal_cdf, Op::NormalCdf(a))
    }

    /// Elementwise `max(a, c)`; the gradient is zero where the floor binds.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x.max(c), Op::ClampMin(a, c))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims2(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.val(a)[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= sum;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(Op::Softmax(a), shape, out, needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.val(a).iter().sum();
        let needs = self.needs(a);
        self.push(Op::Sum(a), vec![1], vec![s], needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.val(a).len() as f64;
        let s: f64 = self.val(a).iter().sum();
        let needs = self.needs(a);
        self.push(Op::Mean(a), vec![1], vec![s / n], needs)
    }

    /// Column means: `[n, k] -> [1, k]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims2(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += self.val(a)[i * c + j];
            }
        }
        for v in &mut out {
            *v /= r as f64;
        }
        let needs = self.needs(a);
        self.push(Op::MeanRows(a), vec![1, c], out, needs)
    }

    /// Row lookup: `table[indices[i], :]` stacked into `[len, cols]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var, DiffError> {
        let (rows, cols) = self.dims2(table);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &ix in indices {
            if ix >= rows {
                return Err(DiffError::BadIndex {
                    index: ix,
                    len: rows,
                });
            }
            out.extend_from_slice(&self.val(table)[ix * cols..(ix + 1) * cols]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Op::Gather(table, indices.to_vec()),
            vec![indices.len(), cols],
            out,
            needs,
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::EmptyConcat);
        }
        let (r, _) = self.dims2(parts[0]);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.dims2(p);
            if rp != r {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for i in 0..r {
                out[i * total + off..i * total + off + w]
                    .copy_from_slice(&self.val(p)[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![r, total], out, needs))
    }

    /// Reverse pass from a scalar loss. Every reachable tracked node gets a
    /// gradient; two calls on the same graph produce bit-identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }

        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                params.push((id, i));
            }
        }
        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].shape.clone(), data).expect("gradient shape")
                })
            })
            .collect();
        Ok(Gradients {
            grads: tensors,
            params,
        })
    }

    fn bump(grads: &mut [Option<Vec<f64>>], node: &Node, target: usize, f: impl FnOnce(&mut [f64])) {
        if !node.needs_grad {
            return;
        }
        let slot = grads[target].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }

    fn accumulate(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.dims2(*a);
                let (_, n) = self.dims2(*b);
                let av = self.val(*a);
                let bv = self.val(*b);
                Self::bump(grads, &self.nodes[a.0], a.0, |ga| {
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gout[i * n + j] * bv[kk * n + j];
                            }
                            ga[i * k + kk] += acc;
                        }
                    }
                });
                Self::bump(grads, &self.nodes[b.0], b.0, |gb| {
                    for kk in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[i * k + kk] * gout[i * n + j];
                            }
                            gb[kk * n + j] += acc;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                Self::bump(grads, &self.nodes[b.0], b.0, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let (_, c) = self.dims2(*a);
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                Self::bump(grads, &self.nodes[b.0], b.0, |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        g[i % c] += go;
                    }
                });
            }
            Op::Sub(a, b) => {
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                Self::bump(grads, &self.nodes[b.0], b.0, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi -= go;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.val(*a);
                let bv = self.val(*b);
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[i];
                    }
                });
                Self::bump(grads, &self.nodes[b.0], b.0, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let av = self.val(*a);
                let bv = self.val(*b);
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / bv[i];
                    }
                });
                Self::bump(grads, &self.nodes[b.0], b.0, |g| {
                    for i in 0..g.len() {
                        g[i] -= gout[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::ScaleRows(a, col) => {
                let (_, c) = self.dims2(*a);
                let av = self.val(*a);
                let cv = self.val(*col);
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * cv[i / c];
                    }
                });
                Self::bump(grads, &self.nodes[col.0], col.0, |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        g[i / c] += go * av[i];
                    }
                });
            }
            Op::SelectColumn(a, j) => {
                let (_, c) = self.dims2(*a);
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        g[i * c + j] += go;
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let sv = self.val(*s)[0];
                let av = self.val(*a);
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * sv;
                    }
                });
                Self::bump(grads, &self.nodes[s.0], s.0, |g| {
                    let mut acc = 0.0;
                    for i in 0..gout.len() {
                        acc += gout[i] * av[i];
                    }
                    g[0] += acc;
                });
            }
            Op::Affine(a, scale) => {
                let scale = *scale;
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go * scale;
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = &self.nodes[idx].value;
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * (1.0 - yv[i] * yv[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let yv = &self.nodes[idx].value;
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * yv[i];
                    }
                });
            }
            Op::Log(a) => {
                let av = self.val(*a);
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / av[i];
                    }
                });
            }
            Op::Softplus(a) => {
                let av = self.val(*a);
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * sigmoid(av[i]);
                    }
                });
            }
            Op::NormalCdf(a) => {
                let av = self.val(*a);
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * INV_SQRT_2PI * (-0.5 * av[i] * av[i]).exp();
                    }
                });
            }
            Op::ClampMin(a, c) => {
                let av = self.val(*a);
                let c = *c;
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for i in 0..g.len() {
                        if av[i] > c {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let (r, c) = self.dims2(*a);
                let yv = &self.nodes[idx].value;
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for i in 0..r {
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += gout[i * c + j] * yv[i * c + j];
                        }
                        for j in 0..c {
                            g[i * c + j] += yv[i * c + j] * (gout[i * c + j] - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let go = gout[0];
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.val(*a).len() as f64;
                let go = gout[0] / n;
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                });
            }
            Op::MeanRows(a) => {
                let (r, c) = self.dims2(*a);
                Self::bump(grads, &self.nodes[a.0], a.0, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gout[j] / r as f64;
                        }
                    }
                });
            }
            Op::Gather(table, indices) => {
                let (_, cols) = self.dims2(*table);
                Self::bump(grads, &self.nodes[table.0], table.0, |g| {
                    for (pos, &ix) in indices.iter().enumerate() {
                        for j in 0..cols {
                            g[ix * cols + j] += gout[pos * cols + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.dims2(Var(idx)).1;
                let mut off = 0;
                for &p in parts {
                    let (rp, w) = self.dims2(p);
                    Self::bump(grads, &self.nodes[p.0], p.0, |g| {
                        for i in 0..rp {
                            for j in 0..w {
                                g[i * w + j] += gout[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
        }
    }
}
