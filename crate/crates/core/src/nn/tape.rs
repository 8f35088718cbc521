//! Reverse-mode tape over the layer vocabulary TG-Critic needs.
//!
//! Activations use a `(time, frequency, channel)` row-major layout. Every op
//! appends one node; `backward` walks the nodes once in reverse order.

use std::collections::BTreeMap;

use super::{NnError, ParamId, ParamStore, Tensor};

/// Floor applied to the labelled probability inside the cross-entropy.
pub const CE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis selector for pooling and upsampling on `(time, frequency, ...)` tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Time,
    Frequency,
}

impl Axis {
    fn dim(self) -> usize {
        match self {
            Axis::Time => 0,
            Axis::Frequency => 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    t: usize,
    f: usize,
    cin: usize,
    cout: usize,
    kt: usize,
    kf: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kt * self.kf * self.cin
    }

    fn positions(&self) -> usize {
        self.t * self.f
    }
}

/// `(outer, axis length, inner)` view of a tensor around one axis.
#[derive(Debug, Clone, Copy)]
struct AxisView {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisView {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Var, g: ConvGeom },
    AvgPool { x: Var, view: AxisView, p: usize },
    Upsample { x: Var, view: AxisView, k: usize },
    Concat { xs: Vec<Var>, rows: usize, widths: Vec<usize> },
    Reshape { x: Var },
    Dense { x: Var, w: Var, b: Var, n: usize, m: usize },
    Elu { x: Var },
    Softmax { x: Var },
    GlobalAvgPool { x: Var, t: usize, c: usize },
    CrossEntropy { p: Var, label: usize },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the parameters it depends on.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(id, t)| (*id, t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }
}

/// `c = a * b + beta * c`; `a` is `m x k` (stored `k x m` when `at`), `b` is `k x n`
/// (stored `n x k` when `bt`), `c` is row-major `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
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

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (pt, pf) = ((g.kt / 2) as isize, (g.kf / 2) as isize);
    let patch = g.patch();
    let mut cols = vec![0.0; g.positions() * patch];
    for t in 0..g.t {
        for f in 0..g.f {
            let row = &mut cols[(t * g.f + f) * patch..(t * g.f + f + 1) * patch];
            for dt in 0..g.kt {
                let st = t as isize + dt as isize - pt;
                if st < 0 || st >= g.t as isize {
                    continue;
                }
                for df in 0..g.kf {
                    let sf = f as isize + df as isize - pf;
                    if sf < 0 || sf >= g.f as isize {
                        continue;
                    }
                    let src = (st as usize * g.f + sf as usize) * g.cin;
                    let dst = (dt * g.kf + df) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (pt, pf) = ((g.kt / 2) as isize, (g.kf / 2) as isize);
    let patch = g.patch();
    let mut x = vec![0.0; g.positions() * g.cin];
    for t in 0..g.t {
        for f in 0..g.f {
            let row = &cols[(t * g.f + f) * patch..(t * g.f + f + 1) * patch];
            for dt in 0..g.kt {
                let st = t as isize + dt as isize - pt;
                if st < 0 || st >= g.t as isize {
                    continue;
                }
                for df in 0..g.kf {
                    let sf = f as isize + df as isize - pf;
                    if sf < 0 || sf >= g.f as isize {
                        continue;
                    }
                    let dst = (st as usize * g.f + sf as usize) * g.cin;
                    let src = (dt * g.kf + df) * g.cin;
                    for c in 0..g.cin {
                        x[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    x
}

/// Tree reduction; exact for `2^k` equal values, which keeps pooling an inverse of upsampling.
fn pairwise_sum(v: &mut [f64]) -> f64 {
    let mut n = v.len();
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            v[i] = v[2 * i] + v[2 * i + 1];
        }
        if n % 2 == 1 {
            v[half] = v[n - 1];
            n = half + 1;
        } else {
            n = half;
        }
    }
    v.first().copied().unwrap_or(0.0)
}

fn shape_err(msg: String) -> NnError {
    NnError::Shape(msg)
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.store.get(id).value,
            _ => &self.nodes[v.0].value,
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value, false)
    }

    /// A parameter leaf; carries gradients only when the parameter is trainable.
    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.store.get(id).trainable;
        self.push(Op::Param(id), Tensor::zeros(&[0]), trainable)
    }

    fn conv(&mut self, x: Var, w: Var, b: Var, g: ConvGeom, out_shape: Vec<usize>) -> Result<Var, NnError> {
        let bv = self.value(b);
        if bv.shape() != [g.cout] {
            return Err(shape_err(format!("bias {:?} for {} output channels", bv.shape(), g.cout)));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; g.positions() * g.cout];
        for row in out.chunks_exact_mut(g.cout) {
            row.copy_from_slice(bv.data());
        }
        if g.kt == 1 && g.kf == 1 {
            gemm(g.positions(), g.cin, g.cout, xv, false, wv, false, 1.0, &mut out);
        } else {
            let cols = im2col(xv, &g);
            gemm(g.positions(), g.patch(), g.cout, &cols, false, wv, false, 1.0, &mut out);
        }
        let requires = self.requires(x) || self.requires(w) || self.requires(b);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(Op::Conv { x, w, b, g }, value, requires))
    }

    /// Same-padded stride-1 2-D cross-correlation: `[T,F,Cin] * [kt,kf,Cin,Cout] + [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[2] != xs[2] || ws[0] % 2 == 0 || ws[1] % 2 == 0 {
            return Err(shape_err(format!("conv2d input {xs:?} with kernel {ws:?}")));
        }
        let g = ConvGeom {
            t: xs[0],
            f: xs[1],
            cin: xs[2],
            cout: ws[3],
            kt: ws[0],
            kf: ws[1],
        };
        self.conv(x, w, b, g, vec![xs[0], xs[1], ws[3]])
    }

    /// Per-position channel mixing with a `[1,1,Cin,Cout]` kernel.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let ws = self.value(w).shape();
        if ws.len() != 4 || ws[0] != 1 || ws[1] != 1 {
            return Err(shape_err(format!("conv1x1 kernel {ws:?}")));
        }
        self.conv2d(x, w, b)
    }

    /// Same-padded 1-D cross-correlation along time: `[T,Cin] * [k,Cin,Cout] + [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[1] || ws[0] % 2 == 0 {
            return Err(shape_err(format!("conv1d input {xs:?} with kernel {ws:?}")));
        }
        let g = ConvGeom {
            t: xs[0],
            f: 1,
            cin: xs[1],
            cout: ws[2],
            kt: ws[0],
            kf: 1,
        };
        self.conv(x, w, b, g, vec![xs[0], ws[2]])
    }

    /// Non-overlapping mean over windows of `p` along `axis`.
    pub fn avg_pool(&mut self, x: Var, axis: Axis, p: usize) -> Result<Var, NnError> {
        let shape = self.value(x).shape().to_vec();
        let dim = axis.dim();
        if dim >= shape.len() || p == 0 || shape[dim] % p != 0 {
            return Err(shape_err(format!("cannot pool {shape:?} by {p} on {axis:?}")));
        }
        let view = AxisView::of(&shape, dim);
        let xv = self.value(x).data();
        let out_len = view.len / p;
        let mut out = vec![0.0; view.outer * out_len * view.inner];
        let mut window = vec![0.0; p];
        for o in 0..view.outer {
            for j in 0..out_len {
                for c in 0..view.inner {
                    for (r, slot) in window.iter_mut().enumerate() {
                        *slot = xv[(o * view.len + j * p + r) * view.inner + c];
                    }
                    out[(o * out_len + j) * view.inner + c] = pairwise_sum(&mut window) / p as f64;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[dim] = out_len;
        let requires = self.requires(x);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(Op::AvgPool { x, view, p }, value, requires))
    }

    /// Repeats each index `k` times along `axis`.
    pub fn upsample_nearest(&mut self, x: Var, axis: Axis, k: usize) -> Result<Var, NnError> {
        let shape = self.value(x).shape().to_vec();
        let dim = axis.dim();
        if k == 0 {
            return Err(NnError::InvalidArgument("upsampling factor must be positive".into()));
        }
        if dim >= shape.len() {
            return Err(shape_err(format!("cannot upsample {shape:?} on {axis:?}")));
        }
        let view = AxisView::of(&shape, dim);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len() * k);
        for o in 0..view.outer {
            for i in 0..view.len {
                let src = &xv[(o * view.len + i) * view.inner..(o * view.len + i + 1) * view.inner];
                for _ in 0..k {
                    out.extend_from_slice(src);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[dim] *= k;
        let requires = self.requires(x);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(Op::Upsample { x, view, k }, value, requires))
    }

    /// Concatenation along the last axis; all leading dims must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, NnError> {
        let first = self
            .value(*xs.first().ok_or_else(|| NnError::InvalidArgument("empty concat".into()))?)
            .shape()
            .to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(shape_err(format!("concat of {first:?} with {s:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(total);
        let requires = xs.iter().any(|&x| self.requires(x));
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            Op::Concat {
                xs: xs.to_vec(),
                rows,
                widths,
            },
            value,
            requires,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let value = self.value(x).clone().reshaped(shape)?;
        let requires = self.requires(x);
        Ok(self.push(Op::Reshape { x }, value, requires))
    }

    /// Affine map `x[n] . w[n,m] + b[m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 1 || ws.len() != 2 || ws[0] != xs[0] || bs != [ws[1]] {
            return Err(shape_err(format!("dense {xs:?} x {ws:?} + {bs:?}")));
        }
        let (n, m) = (ws[0], ws[1]);
        let mut out = self.value(b).data().to_vec();
        gemm(1, n, m, self.value(x).data(), false, self.value(w).data(), false, 1.0, &mut out);
        let requires = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(Op::Dense { x, w, b, n, m }, Tensor::vector(out), requires))
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v > 0.0 { v } else { v.exp_m1() }).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        let requires = self.requires(x);
        self.push(Op::Elu { x }, value, requires)
    }

    /// Max-subtracted softmax over a vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        if xv.shape().len() != 1 || xv.is_empty() {
            return Err(shape_err(format!("softmax over {:?}", xv.shape())));
        }
        let max = xv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.data().iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let out = exps.into_iter().map(|e| e / sum).collect();
        let requires = self.requires(x);
        Ok(self.push(Op::Softmax { x }, Tensor::vector(out), requires))
    }

    /// Per-channel mean over time of a `[T, C]` tensor.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || xs[0] == 0 {
            return Err(shape_err(format!("global average pool over {xs:?}")));
        }
        let (t, c) = (xs[0], xs[1]);
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= t as f64);
        let requires = self.requires(x);
        Ok(self.push(Op::GlobalAvgPool { x, t, c }, Tensor::vector(out), requires))
    }

    /// `-ln(max(p[label], 1e-12))` for a probability vector.
    pub fn cross_entropy(&mut self, p: Var, label: usize) -> Result<Var, NnError> {
        let pv = self.value(p);
        if pv.shape().len() != 1 || label >= pv.len() {
            return Err(NnError::InvalidArgument(format!(
                "label {label} for distribution of shape {:?}",
                pv.shape()
            )));
        }
        let sum: f64 = pv.data().iter().sum();
        if (sum - 1.0).abs() > 1e-6 || pv.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(NnError::InvalidArgument(format!(
                "not a probability distribution (sum {sum})"
            )));
        }
        let loss = -pv.data()[label].max(CE_FLOOR).ln();
        let requires = self.requires(p);
        Ok(self.push(Op::CrossEntropy { p, label }, Tensor::scalar(loss), requires))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let requires = self.requires(x);
        self.push(Op::Sum { x }, Tensor::scalar(s), requires)
    }

    /// Gradients of scalar `loss` with respect to every trainable parameter it reaches.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        if !self.value(loss).is_scalar() {
            return Err(NnError::NotScalar(self.value(loss).shape().to_vec()));
        }
        if !self.requires(loss) {
            return Err(NnError::Detached);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let send = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match out.grads.get_mut(id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.grads.insert(*id, g);
                    }
                },
                Op::Conv { x, w, b, g: geom } => {
                    let dy = g.data();
                    if self.requires(*b) {
                        let mut db = vec![0.0; geom.cout];
                        for row in dy.chunks_exact(geom.cout) {
                            for (a, v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        send(*b, Tensor::vector(db), &mut grads);
                    }
                    let xv = self.value(*x).data();
                    let pointwise = geom.kt == 1 && geom.kf == 1;
                    let cols_owned;
                    let cols: &[f64] = if pointwise {
                        xv
                    } else {
                        cols_owned = im2col(xv, geom);
                        &cols_owned
                    };
                    if self.requires(*w) {
                        let mut dw = vec![0.0; geom.patch() * geom.cout];
                        gemm(geom.patch(), geom.positions(), geom.cout, cols, true, dy, false, 0.0, &mut dw);
                        let shape = self.value(*w).shape().to_vec();
                        send(*w, Tensor::new(&shape, dw)?, &mut grads);
                    }
                    if self.requires(*x) {
                        let wv = self.value(*w).data();
                        let mut dcols = vec![0.0; geom.positions() * geom.patch()];
                        gemm(geom.positions(), geom.cout, geom.patch(), dy, false, wv, true, 0.0, &mut dcols);
                        let dx = if pointwise { dcols } else { col2im(&dcols, geom) };
                        let shape = self.value(*x).shape().to_vec();
                        send(*x, Tensor::new(&shape, dx)?, &mut grads);
                    }
                }
                Op::AvgPool { x, view, p } => {
                    let out_len = view.len / p;
                    let inv = 1.0 / *p as f64;
                    let mut dx = vec![0.0; view.outer * view.len * view.inner];
                    for o in 0..view.outer {
                        for i in 0..view.len {
                            let dst = (o * view.len + i) * view.inner;
                            let src = (o * out_len + i / p) * view.inner;
                            for c in 0..view.inner {
                                dx[dst + c] = g.data()[src + c] * inv;
                            }
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    send(*x, Tensor::new(&shape, dx)?, &mut grads);
                }
                Op::Upsample { x, view, k } => {
                    let mut dx = vec![0.0; view.outer * view.len * view.inner];
                    for o in 0..view.outer {
                        for i in 0..view.len {
                            let dst = (o * view.len + i) * view.inner;
                            for r in 0..*k {
                                let src = (o * view.len * k + i * k + r) * view.inner;
                                for c in 0..view.inner {
                                    dx[dst + c] += g.data()[src + c];
                                }
                            }
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    send(*x, Tensor::new(&shape, dx)?, &mut grads);
                }
                Op::Concat { xs, rows, widths } => {
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (&x, &w) in xs.iter().zip(widths) {
                        if self.requires(x) {
                            let mut dx = Vec::with_capacity(rows * w);
                            for r in 0..*rows {
                                dx.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                            }
                            let shape = self.value(x).shape().to_vec();
                            send(x, Tensor::new(&shape, dx)?, &mut grads);
                        }
                        offset += w;
                    }
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    send(*x, g.reshaped(&shape)?, &mut grads);
                }
                Op::Dense { x, w, b, n, m } => {
                    let dy = g.data();
                    if self.requires(*b) {
                        send(*b, Tensor::vector(dy.to_vec()), &mut grads);
                    }
                    if self.requires(*w) {
                        let xv = self.value(*x).data();
                        let mut dw = vec![0.0; n * m];
                        for (i, xi) in xv.iter().enumerate() {
                            for (j, d) in dy.iter().enumerate() {
                                dw[i * m + j] = xi * d;
                            }
                        }
                        send(*w, Tensor::new(&[*n, *m], dw)?, &mut grads);
                    }
                    if self.requires(*x) {
                        let mut dx = vec![0.0; *n];
                        gemm(*n, *m, 1, self.value(*w).data(), false, dy, false, 0.0, &mut dx);
                        send(*x, Tensor::vector(dx), &mut grads);
                    }
                }
                Op::Elu { x } => {
                    let dx = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &d)| if y > 0.0 { d } else { d * (y + 1.0) })
                        .collect();
                    send(*x, Tensor::new(node.value.shape(), dx)?, &mut grads);
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let dot: f64 = y.iter().zip(g.data()).map(|(a, b)| a * b).sum();
                    let dx = y.iter().zip(g.data()).map(|(yi, di)| yi * (di - dot)).collect();
                    send(*x, Tensor::vector(dx), &mut grads);
                }
                Op::GlobalAvgPool { x, t, c } => {
                    let inv = 1.0 / *t as f64;
                    let mut dx = Vec::with_capacity(t * c);
                    for _ in 0..*t {
                        dx.extend(g.data().iter().map(|d| d * inv));
                    }
                    send(*x, Tensor::new(&[*t, *c], dx)?, &mut grads);
                }
                Op::CrossEntropy { p, label } => {
                    let pv = self.value(*p);
                    let mut dp = vec![0.0; pv.len()];
                    let q = pv.data()[*label];
                    if q >= CE_FLOOR {
                        dp[*label] = -g.data()[0] / q;
                    }
                    send(*p, Tensor::vector(dp), &mut grads);
                }
                Op::Sum { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    send(*x, Tensor::filled(&shape, g.data()[0]), &mut grads);
                }
            }
        }
        Ok(out)
    }
}
