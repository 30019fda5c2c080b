//! Forward implementations and reverse-mode adjoints for every primitive.

use super::{shape_str, CustomVjp, Node, Op, Result, Tape, Tensor, TensorError, Var};
use crate::real::Real;

/// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
/// Smooth everywhere; the exact-erf form needs libm erf which std lacks.
#[inline]
fn gelu_val<R: Real>(x: R) -> R {
    let c = R::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = R::from_f64(0.044715);
    let half = R::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (R::ONE + u.tanh())
}

#[inline]
fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::from_f64(0.797_884_560_802_865_4);
    let a = R::from_f64(0.044715);
    let half = R::from_f64(0.5);
    let three = R::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = R::ONE - t * t;
    half * (R::ONE + t) + half * x * sech2 * c * (R::ONE + three * a * x * x)
}

/// out[m x n] = a[m x k] * b[k x n], accumulating into `out`.
fn matmul_acc<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == R::ZERO {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// out[m x k] += g[m x n] * b[k x n]^T  (dA of matmul).
fn matmul_nt_acc<R: Real>(g: &[R], b: &[R], m: usize, n: usize, k: usize, out: &mut [R]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for q in 0..k {
            let brow = &b[q * n..(q + 1) * n];
            let mut acc = R::ZERO;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            orow[q] += acc;
        }
    }
}

/// out[k x n] += a[m x k]^T * g[m x n]  (dB of matmul).
fn matmul_tn_acc<R: Real>(a: &[R], g: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (q, &aiq) in arow.iter().enumerate() {
            if aiq == R::ZERO {
                continue;
            }
            let orow = &mut out[q * n..(q + 1) * n];
            for j in 0..n {
                orow[j] += aiq * grow[j];
            }
        }
    }
}

fn require_2d<R: Real>(t: &Tensor<R>, op: &'static str) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| TensorError::BadShape {
        op,
        expected: "a 2-D tensor",
        got: shape_str(t.shape()),
    })
}

/// Iterate lanes along `axis` of a row-major shape: yields (base, stride).
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, Vec<usize>) {
    let stride: usize = shape[axis + 1..].iter().product();
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner = stride;
    let mut bases = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for r in 0..inner {
            bases.push(o * axis_len * stride + r);
        }
    }
    (axis_len, stride, bases)
}

impl<R: Real> Tape<R> {
    /// Standard matrix product. Backward: dA += G B^T, dB += A^T G.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_2d(self.value(a), "matmul")?;
        let (k2, n) = require_2d(self.value(b), "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: shape_str(self.value(a).shape()),
                rhs: shape_str(self.value(b).shape()),
            });
        }
        let mut out = vec![R::ZERO; m * n];
        matmul_acc(
            self.value(a).values(),
            self.value(b).values(),
            m,
            k,
            n,
            &mut out,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = require_2d(self.value(a), "transpose")?;
        let src = self.value(a).values();
        let mut out = vec![R::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: shape_str(self.value(a).shape()),
                rhs: shape_str(self.value(b).shape()),
            });
        }
        let out: Vec<R> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: shape_str(self.value(a).shape()),
                rhs: shape_str(self.value(b).shape()),
            });
        }
        let out: Vec<R> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b))
    }

    /// Broadcast a [n] bias over the rows of a [m x n] matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = require_2d(self.value(a), "add_bias")?;
        if self.value(bias).shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: shape_str(self.value(a).shape()),
                rhs: shape_str(self.value(bias).shape()),
            });
        }
        let bv = self.value(bias).values().to_vec();
        let mut out = self.value(a).values().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bv[j];
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::AddBias { a, bias })
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, a: Var, k: R) -> Result<Var> {
        let out: Vec<R> = self.value(a).values().iter().map(|&x| x * k).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale(a, k))
    }

    /// Sum all entries to a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut acc = R::ZERO;
        for &v in self.value(a).values() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::Sum(a))
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, R::ONE / R::from_f64(n as f64))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = require_2d(self.value(src), "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(TensorError::BadShape {
                op: "slice_cols",
                expected: "column range within bounds",
                got: format!("{}..{} of {}", start, start + len, n),
            });
        }
        let v = self.value(src).values();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + start + len]);
        }
        self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { src, start, len })
    }

    /// Concatenate along the feature (last) axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n1) = require_2d(self.value(a), "concat_cols")?;
        let (m2, n2) = require_2d(self.value(b), "concat_cols")?;
        if m != m2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: shape_str(self.value(a).shape()),
                rhs: shape_str(self.value(b).shape()),
            });
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = Vec::with_capacity(m * (n1 + n2));
        for i in 0..m {
            out.extend_from_slice(&av[i * n1..(i + 1) * n1]);
            out.extend_from_slice(&bv[i * n2..(i + 1) * n2]);
        }
        self.push(Tensor::new(vec![m, n1 + n2], out)?, Op::ConcatCols(a, b))
    }

    /// Zero out whole rows (sequence masking). `keep[i] == false` zeroes
    /// row i; gradients of zeroed rows are dropped symmetrically.
    pub fn row_mask(&mut self, src: Var, keep: &[bool]) -> Result<Var> {
        let (m, n) = require_2d(self.value(src), "row_mask")?;
        if keep.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "row_mask",
                lhs: shape_str(self.value(src).shape()),
                rhs: format!("[{}]", keep.len()),
            });
        }
        let mut out = self.value(src).values().to_vec();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out[i * n..(i + 1) * n].fill(R::ZERO);
            }
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::RowMask {
                src,
                keep: keep.to_vec(),
            },
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<R> = self.value(a).values().iter().map(|&x| gelu_val(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Gelu(a))
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: R) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let n = *shape.last().ok_or(TensorError::BadShape {
            op: "layer_norm",
            expected: "rank >= 1",
            got: shape_str(&shape),
        })?;
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape_str(&shape),
                rhs: format!(
                    "gain {} bias {}",
                    shape_str(self.value(gain).shape()),
                    shape_str(self.value(bias).shape())
                ),
            });
        }
        let xv = self.value(x).values();
        let g = self.value(gain).values();
        let b = self.value(bias).values();
        let lanes = xv.len() / n;
        let mut out = vec![R::ZERO; xv.len()];
        let inv_n = R::ONE / R::from_f64(n as f64);
        for l in 0..lanes {
            let row = &xv[l * n..(l + 1) * n];
            let mut mean = R::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = R::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let inv_std = R::ONE / (var + eps).sqrt();
            let orow = &mut out[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, eps })
    }

    /// Gather rows of an embedding table. Backward scatter-adds into the
    /// gathered rows.
    pub fn embedding(&mut self, table: Var, ids: &[u16]) -> Result<Var> {
        let (v, d) = require_2d(self.value(table), "embedding")?;
        for &id in ids {
            if id as usize >= v {
                return Err(TensorError::TokenOutOfRange {
                    op: "embedding",
                    index: id as usize,
                    vocab: v,
                });
            }
        }
        let tv = self.value(table).values();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id as usize * d..(id as usize + 1) * d]);
        }
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Numerically stabilised log-softmax along `axis`: the max of each
    /// lane is subtracted before exponentiation, so outputs exponentiate
    /// and sum to one within float tolerance.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "log_softmax",
                axis,
                shape: shape_str(&shape),
            });
        }
        let xv = self.value(x).values();
        let (axis_len, stride, bases) = lanes(&shape, axis);
        let mut out = vec![R::ZERO; xv.len()];
        for &base in &bases {
            let mut mx = R::NEG_INFINITY;
            for s in 0..axis_len {
                mx = mx.max(xv[base + s * stride]);
            }
            let mut z = R::ZERO;
            for s in 0..axis_len {
                z += (xv[base + s * stride] - mx).exp();
            }
            let lz = z.ln() + mx;
            for s in 0..axis_len {
                out[base + s * stride] = xv[base + s * stride] - lz;
            }
        }
        self.push(Tensor::new(shape, out)?, Op::LogSoftmax { x, axis })
    }

    /// Row-wise softmax restricted to allowed entries; excluded entries get
    /// weight exactly 0.0, which is what keeps causal masking bitwise and
    /// all stored values finite (an additive -inf mask would not).
    pub fn masked_softmax_rows(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (m, n) = require_2d(self.value(x), "masked_softmax")?;
        if allowed.len() != m * n {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: shape_str(self.value(x).shape()),
                rhs: format!("mask of {} entries", allowed.len()),
            });
        }
        let xv = self.value(x).values();
        let mut out = vec![R::ZERO; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let arow = &allowed[i * n..(i + 1) * n];
            let mut mx = R::NEG_INFINITY;
            for j in 0..n {
                if arow[j] {
                    mx = mx.max(row[j]);
                }
            }
            if mx == R::NEG_INFINITY {
                return Err(TensorError::EmptyAttentionRow { row: i });
            }
            let mut z = R::ZERO;
            for j in 0..n {
                if arow[j] {
                    z += (row[j] - mx).exp();
                }
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                if arow[j] {
                    orow[j] = (row[j] - mx).exp() / z;
                }
            }
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MaskedSoftmaxRows {
                x,
                allowed: allowed.to_vec(),
            },
        )
    }

    /// Label-smoothed cross-entropy over rows of log-probabilities:
    /// sum_r w_r * -( (1-eps) logp[r][t_r] + eps/K * sum_k logp[r][k] ).
    /// Row weights fold in confidence gates and normalisation.
    pub fn smoothed_ce_rows(
        &mut self,
        logp: Var,
        targets: &[u16],
        row_weights: &[R],
        eps: R,
    ) -> Result<Var> {
        let (m, k) = require_2d(self.value(logp), "smoothed_cross_entropy")?;
        if targets.len() != m || row_weights.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "smoothed_cross_entropy",
                lhs: shape_str(self.value(logp).shape()),
                rhs: format!("{} targets / {} weights", targets.len(), row_weights.len()),
            });
        }
        for &t in targets {
            if t as usize >= k {
                return Err(TensorError::TokenOutOfRange {
                    op: "smoothed_cross_entropy",
                    index: t as usize,
                    vocab: k,
                });
            }
        }
        let lv = self.value(logp).values();
        let eps_k = eps / R::from_f64(k as f64);
        let keep = R::ONE - eps;
        let mut acc = R::ZERO;
        for r in 0..m {
            let row = &lv[r * k..(r + 1) * k];
            let mut smooth = R::ZERO;
            for &v in row {
                smooth += v;
            }
            acc += row_weights[r] * -(keep * row[targets[r] as usize] + eps_k * smooth);
        }
        self.push(
            Tensor::scalar(acc),
            Op::SmoothedCeRows {
                logp,
                targets: targets.to_vec(),
                row_weights: row_weights.to_vec(),
                eps,
            },
        )
    }

    /// Single-distribution smoothed cross-entropy (a [K] or [1 x K] input).
    pub fn smoothed_cross_entropy(&mut self, logp: Var, target: u16, eps: R) -> Result<Var> {
        let flat = match self.value(logp).shape() {
            [_k] => {
                let t = self.value(logp).clone();
                let k = t.numel();
                let reshaped = Tensor::new(vec![1, k], t.values().to_vec())?;
                // reshape by re-recording as a slice-free alias: use a 1-row view
                let v = self.push(reshaped, Op::Custom {
                    inputs: vec![logp],
                    vjp: Box::new(ReshapeRowVjp),
                })?;
                v
            }
            [1, _k] => logp,
            _ => {
                return Err(TensorError::BadShape {
                    op: "smoothed_cross_entropy",
                    expected: "[K] or [1xK] log-probabilities",
                    got: shape_str(self.value(logp).shape()),
                })
            }
        };
        self.smoothed_ce_rows(flat, &[target], &[R::ONE], eps)
    }

    /// Record an op with a hand-written adjoint.
    pub fn push_custom(
        &mut self,
        inputs: Vec<Var>,
        value: Tensor<R>,
        vjp: Box<dyn CustomVjp<R>>,
    ) -> Result<Var> {
        self.push(value, Op::Custom { inputs, vjp })
    }

    pub(crate) fn push(&mut self, tensor: Tensor<R>, op: Op<R>) -> Result<Var> {
        if !tensor.values().iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { tensor, op });
        Ok(Var(self.nodes.len() - 1))
    }
}

/// View a [K] vector as a [1 x K] row; gradient passes straight through.
struct ReshapeRowVjp;

impl<R: Real> super::CustomVjp<R> for ReshapeRowVjp {
    fn name(&self) -> &'static str {
        "reshape_row"
    }
    fn backward(&self, _inputs: &[&Tensor<R>], _output: &Tensor<R>, out_grad: &[R]) -> Vec<Vec<R>> {
        vec![out_grad.to_vec()]
    }
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn is_const<R: Real>(nodes: &[Node<R>], v: Var) -> bool {
    matches!(nodes[v.0].op, Op::Const)
}

/// Push the output gradient of node `i` back to its inputs.
pub(crate) fn accumulate_input_grads<R: Real>(
    nodes: &[Node<R>],
    i: usize,
    gout: &[R],
    grads: &mut [Vec<R>],
) {
    match &nodes[i].op {
        Op::Leaf | Op::Const => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].tensor.dims2().unwrap();
            let n = nodes[b.0].tensor.dims2().unwrap().1;
            if !is_const(nodes, *a) {
                matmul_nt_acc(gout, nodes[b.0].tensor.values(), m, n, k, &mut grads[a.0]);
            }
            if !is_const(nodes, *b) {
                matmul_tn_acc(nodes[a.0].tensor.values(), gout, m, k, n, &mut grads[b.0]);
            }
        }
        Op::Transpose(a) => {
            if !is_const(nodes, *a) {
                let (m, n) = nodes[a.0].tensor.dims2().unwrap();
                let ga = &mut grads[a.0];
                for i2 in 0..m {
                    for j in 0..n {
                        ga[i2 * n + j] += gout[j * m + i2];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if !is_const(nodes, *a) {
                add_into(&mut grads[a.0], gout);
            }
            if !is_const(nodes, *b) {
                add_into(&mut grads[b.0], gout);
            }
        }
        Op::Mul(a, b) => {
            if !is_const(nodes, *a) {
                let bv = nodes[b.0].tensor.values();
                for (idx, g) in gout.iter().enumerate() {
                    grads[a.0][idx] += *g * bv[idx];
                }
            }
            if !is_const(nodes, *b) {
                let av = nodes[a.0].tensor.values();
                for (idx, g) in gout.iter().enumerate() {
                    grads[b.0][idx] += *g * av[idx];
                }
            }
        }
        Op::AddBias { a, bias } => {
            let (m, n) = nodes[a.0].tensor.dims2().unwrap();
            if !is_const(nodes, *a) {
                add_into(&mut grads[a.0], gout);
            }
            if !is_const(nodes, *bias) {
                let gb = &mut grads[bias.0];
                for i2 in 0..m {
                    for j in 0..n {
                        gb[j] += gout[i2 * n + j];
                    }
                }
            }
        }
        Op::Scale(a, kf) => {
            if !is_const(nodes, *a) {
                for (idx, g) in gout.iter().enumerate() {
                    grads[a.0][idx] += *g * *kf;
                }
            }
        }
        Op::Sum(a) => {
            if !is_const(nodes, *a) {
                let g0 = gout[0];
                for g in grads[a.0].iter_mut() {
                    *g += g0;
                }
            }
        }
        Op::SliceCols { src, start, len } => {
            if !is_const(nodes, *src) {
                let (m, n) = nodes[src.0].tensor.dims2().unwrap();
                let gs = &mut grads[src.0];
                for i2 in 0..m {
                    for j in 0..*len {
                        gs[i2 * n + start + j] += gout[i2 * len + j];
                    }
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let (m, n1) = nodes[a.0].tensor.dims2().unwrap();
            let n2 = nodes[b.0].tensor.dims2().unwrap().1;
            let n = n1 + n2;
            if !is_const(nodes, *a) {
                let ga = &mut grads[a.0];
                for i2 in 0..m {
                    for j in 0..n1 {
                        ga[i2 * n1 + j] += gout[i2 * n + j];
                    }
                }
            }
            if !is_const(nodes, *b) {
                let gb = &mut grads[b.0];
                for i2 in 0..m {
                    for j in 0..n2 {
                        gb[i2 * n2 + j] += gout[i2 * n + n1 + j];
                    }
                }
            }
        }
        Op::RowMask { src, keep } => {
            if !is_const(nodes, *src) {
                let (_, n) = nodes[src.0].tensor.dims2().unwrap();
                let gs = &mut grads[src.0];
                for (i2, &k) in keep.iter().enumerate() {
                    if k {
                        for j in 0..n {
                            gs[i2 * n + j] += gout[i2 * n + j];
                        }
                    }
                }
            }
        }
        Op::Gelu(a) => {
            if !is_const(nodes, *a) {
                let av = nodes[a.0].tensor.values();
                for (idx, g) in gout.iter().enumerate() {
                    grads[a.0][idx] += *g * gelu_grad(av[idx]);
                }
            }
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let xv = nodes[x.0].tensor.values();
            let g = nodes[gain.0].tensor.values();
            let n = *nodes[x.0].tensor.shape().last().unwrap();
            let lanes = xv.len() / n;
            let inv_n = R::ONE / R::from_f64(n as f64);
            for l in 0..lanes {
                let row = &xv[l * n..(l + 1) * n];
                let grow = &gout[l * n..(l + 1) * n];
                let mut mean = R::ZERO;
                for &v in row {
                    mean += v;
                }
                mean *= inv_n;
                let mut var = R::ZERO;
                for &v in row {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_n;
                let inv_std = R::ONE / (var + *eps).sqrt();
                if !is_const(nodes, *gain) || !is_const(nodes, *bias) {
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv_std;
                        if !is_const(nodes, *gain) {
                            grads[gain.0][j] += grow[j] * xhat;
                        }
                        if !is_const(nodes, *bias) {
                            grads[bias.0][j] += grow[j];
                        }
                    }
                }
                if !is_const(nodes, *x) {
                    let mut mean_gg = R::ZERO;
                    let mut mean_ggx = R::ZERO;
                    for j in 0..n {
                        let gg = grow[j] * g[j];
                        let xhat = (row[j] - mean) * inv_std;
                        mean_gg += gg;
                        mean_ggx += gg * xhat;
                    }
                    mean_gg *= inv_n;
                    mean_ggx *= inv_n;
                    let gx = &mut grads[x.0][l * n..(l + 1) * n];
                    for j in 0..n {
                        let gg = grow[j] * g[j];
                        let xhat = (row[j] - mean) * inv_std;
                        gx[j] += inv_std * (gg - mean_gg - xhat * mean_ggx);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if !is_const(nodes, *table) {
                let d = nodes[table.0].tensor.dims2().unwrap().1;
                let gt = &mut grads[table.0];
                for (u, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                    add_into(dst, &gout[u * d..(u + 1) * d]);
                }
            }
        }
        Op::LogSoftmax { x, axis } => {
            if !is_const(nodes, *x) {
                let yv = nodes[i].tensor.values();
                let shape = nodes[x.0].tensor.shape();
                let (axis_len, stride, bases) = lanes(shape, *axis);
                let gx = &mut grads[x.0];
                for &base in &bases {
                    let mut gsum = R::ZERO;
                    for s in 0..axis_len {
                        gsum += gout[base + s * stride];
                    }
                    for s in 0..axis_len {
                        let idx = base + s * stride;
                        gx[idx] += gout[idx] - yv[idx].exp() * gsum;
                    }
                }
            }
        }
        Op::MaskedSoftmaxRows { x, allowed } => {
            if !is_const(nodes, *x) {
                let yv = nodes[i].tensor.values();
                let (m, n) = nodes[x.0].tensor.dims2().unwrap();
                let gx = &mut grads[x.0];
                for r in 0..m {
                    let base = r * n;
                    let mut dot = R::ZERO;
                    for j in 0..n {
                        dot += gout[base + j] * yv[base + j];
                    }
                    for j in 0..n {
                        if allowed[base + j] {
                            gx[base + j] += yv[base + j] * (gout[base + j] - dot);
                        }
                    }
                }
            }
        }
        Op::SmoothedCeRows {
            logp,
            targets,
            row_weights,
            eps,
        } => {
            if !is_const(nodes, *logp) {
                let k = nodes[logp.0].tensor.dims2().unwrap().1;
                let g0 = gout[0];
                let eps_k = *eps / R::from_f64(k as f64);
                let keep = R::ONE - *eps;
                let gl = &mut grads[logp.0];
                for (r, (&t, &w)) in targets.iter().zip(row_weights).enumerate() {
                    let coeff = g0 * w;
                    for j in 0..k {
                        let mut d = -eps_k;
                        if j == t as usize {
                            d -= keep;
                        }
                        gl[r * k + j] += coeff * d;
                    }
                }
            }
        }
        Op::Custom { inputs, vjp } => {
            let in_tensors: Vec<&Tensor<R>> = inputs.iter().map(|v| &nodes[v.0].tensor).collect();
            let contributions = vjp.backward(&in_tensors, &nodes[i].tensor, gout);
            debug_assert_eq!(contributions.len(), inputs.len());
            for (v, c) in inputs.iter().zip(contributions) {
                if !is_const(nodes, *v) {
                    add_into(&mut grads[v.0], &c);
                }
            }
        }
    }
}
