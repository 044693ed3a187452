//! Forward kernels and their vector-Jacobian products.
//!
//! Shapes must conform exactly; elementwise ops broadcast only on size-1
//! axes with equal rank. Anything looser is a silent-bug factory, so the
//! caller reshapes explicitly.

use super::tensor::{numel, strides, Tensor, TensorError};

type R = Result<Tensor, TensorError>;

/// Resolve the broadcast shape of two equal-rank shapes (size-1 axes only).
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
    }
    let mut out = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        if x == y {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else if y == 1 {
            out.push(x);
        } else {
            return Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
        }
    }
    Ok(out)
}

/// Map a flat output index to a flat input index under broadcasting.
fn bcast_index(out_idx: &[usize], in_shape: &[usize], in_strides: &[usize]) -> usize {
    let mut idx = 0;
    for (d, &o) in out_idx.iter().enumerate() {
        let i = if in_shape[d] == 1 { 0 } else { o };
        idx += i * in_strides[d];
    }
    idx
}

/// Reduce a gradient over the broadcast output shape back onto `in_shape`.
fn reduce_bcast(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let in_str = strides(in_shape);
    let mut out = vec![0.0; numel(in_shape)];
    let mut idx = vec![0usize; out_shape.len()];
    for &g in grad {
        out[bcast_index(&idx, in_shape, &in_str)] += g;
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn binary_forward(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<usize>, Vec<f64>), TensorError> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let av = a.values();
    let bv = b.values();
    let n = numel(&shape);
    let mut out = Vec::with_capacity(n);
    if a.shape() == shape.as_slice() && b.shape() == shape.as_slice() {
        for i in 0..n {
            out.push(f(av[i], bv[i]));
        }
    } else {
        let a_str = strides(a.shape());
        let b_str = strides(b.shape());
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            let x = av[bcast_index(&idx, a.shape(), &a_str)];
            let y = bv[bcast_index(&idx, b.shape(), &b_str)];
            out.push(f(x, y));
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
    Ok((shape, out))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> R {
        let (shape, out) = binary_forward("add", self, other, |x, y| x + y)?;
        let (a, b) = (self.clone(), other.clone());
        let out_shape = shape.clone();
        Tensor::from_op("add", shape, out, vec![self.clone(), other.clone()], Box::new(move |g| {
            if a.requires_grad() {
                a.accumulate_grad(&reduce_bcast(g, &out_shape, a.shape()));
            }
            if b.requires_grad() {
                b.accumulate_grad(&reduce_bcast(g, &out_shape, b.shape()));
            }
        }))
    }

    pub fn sub(&self, other: &Tensor) -> R {
        let (shape, out) = binary_forward("sub", self, other, |x, y| x - y)?;
        let (a, b) = (self.clone(), other.clone());
        let out_shape = shape.clone();
        Tensor::from_op("sub", shape, out, vec![self.clone(), other.clone()], Box::new(move |g| {
            if a.requires_grad() {
                a.accumulate_grad(&reduce_bcast(g, &out_shape, a.shape()));
            }
            if b.requires_grad() {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                b.accumulate_grad(&reduce_bcast(&neg, &out_shape, b.shape()));
            }
        }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> R {
        let (shape, out) = binary_forward("mul", self, other, |x, y| x * y)?;
        let (a, b) = (self.clone(), other.clone());
        let out_shape = shape.clone();
        Tensor::from_op("mul", shape, out, vec![self.clone(), other.clone()], Box::new(move |g| {
            let a_str = strides(a.shape());
            let b_str = strides(b.shape());
            let av = a.values();
            let bv = b.values();
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            let mut idx = vec![0usize; out_shape.len()];
            for &gv in g {
                let ia = bcast_index(&idx, a.shape(), &a_str);
                let ib = bcast_index(&idx, b.shape(), &b_str);
                ga[ia] += gv * bv[ib];
                gb[ib] += gv * av[ia];
                for d in (0..out_shape.len()).rev() {
                    idx[d] += 1;
                    if idx[d] < out_shape[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            drop(av);
            drop(bv);
            if a.requires_grad() {
                a.accumulate_grad(&ga);
            }
            if b.requires_grad() {
                b.accumulate_grad(&gb);
            }
        }))
    }

    fn unary(&self, op: &'static str, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> R {
        let v = self.values();
        let out: Vec<f64> = v.iter().map(|&x| f(x)).collect();
        drop(v);
        let parent = self.clone();
        let out_copy = out.clone();
        Tensor::from_op(op, self.shape().to_vec(), out, vec![self.clone()], Box::new(move |g| {
            let xv = parent.values();
            let contrib: Vec<f64> = g
                .iter()
                .zip(xv.iter().zip(out_copy.iter()))
                .map(|(&gv, (&x, &y))| gv * df(x, y))
                .collect();
            drop(xv);
            parent.accumulate_grad(&contrib);
        }))
    }

    pub fn neg(&self) -> R {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn abs(&self) -> R {
        // subgradient 0 at the kink
        self.unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> R {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn tanh(&self) -> R {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Smooth ramp ln(1 + e^x); gradient is the logistic sigmoid. Unlike a
    /// hard ramp it has no kink, so finite-difference checks stay exact, and
    /// unlike tanh it never saturates on the positive side.
    pub fn softplus(&self) -> R {
        self.unary(
            "softplus",
            |x| if x > 30.0 { x } else { x.exp().ln_1p() },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn exp(&self) -> R {
        self.unary("exp", f64::exp, |_, y| y)
    }

    /// Natural log. Callers clamp first; ln of a non-positive value trips the
    /// non-finite check at the op boundary.
    pub fn ln(&self) -> R {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    /// Elementwise max(x, floor). Gradient is blocked where the floor engages.
    pub fn clamp_min(&self, floor: f64) -> R {
        self.unary("clamp_min", move |x| x.max(floor), move |x, _| if x > floor { 1.0 } else { 0.0 })
    }

    pub fn powf(&self, p: f64) -> R {
        self.unary("powf", move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn scale(&self, c: f64) -> R {
        self.unary("scale", move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> R {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    /// Matrix product. Supports [m,k]x[k,n], batched [b,m,k]x[b,k,n], and
    /// [b,m,k]x[k,n] with the right-hand side shared across the batch.
    pub fn matmul(&self, other: &Tensor) -> R {
        let (ls, rs) = (self.shape().to_vec(), other.shape().to_vec());
        let (batch, m, k, n, shared_rhs, out_shape) = match (ls.len(), rs.len()) {
            (2, 2) if ls[1] == rs[0] => (1, ls[0], ls[1], rs[1], true, vec![ls[0], rs[1]]),
            (3, 3) if ls[0] == rs[0] && ls[2] == rs[1] => {
                (ls[0], ls[1], ls[2], rs[2], false, vec![ls[0], ls[1], rs[2]])
            }
            (3, 2) if ls[2] == rs[0] => (ls[0], ls[1], ls[2], rs[1], true, vec![ls[0], ls[1], rs[1]]),
            _ => return Err(TensorError::ShapeMismatch { op: "matmul", lhs: ls, rhs: rs }),
        };
        let av = self.values();
        let bv = other.values();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_off = bi * m * k;
            let b_off = if shared_rhs { 0 } else { bi * k * n };
            let o_off = bi * m * n;
            for i in 0..m {
                let a_row = &av[a_off + i * k..a_off + (i + 1) * k];
                let o_row = &mut out[o_off + i * n..o_off + (i + 1) * n];
                for (kk, &a_ik) in a_row.iter().enumerate() {
                    let b_row = &bv[b_off + kk * n..b_off + (kk + 1) * n];
                    for (o, &b_kj) in o_row.iter_mut().zip(b_row) {
                        *o += a_ik * b_kj;
                    }
                }
            }
        }
        drop(av);
        drop(bv);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op("matmul", out_shape, out, vec![self.clone(), other.clone()], Box::new(move |g| {
            let av = a.values();
            let bv = b.values();
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            for bi in 0..batch {
                let a_off = bi * m * k;
                let b_off = if shared_rhs { 0 } else { bi * k * n };
                let g_off = bi * m * n;
                // dA = G B^T ; dB = A^T G
                for i in 0..m {
                    let g_row = &g[g_off + i * n..g_off + (i + 1) * n];
                    let ga_row = &mut ga[a_off + i * k..a_off + (i + 1) * k];
                    for kk in 0..k {
                        let b_row = &bv[b_off + kk * n..b_off + (kk + 1) * n];
                        let mut acc = 0.0;
                        for (gv, bvv) in g_row.iter().zip(b_row) {
                            acc += gv * bvv;
                        }
                        ga_row[kk] += acc;
                    }
                    let a_row = &av[a_off + i * k..a_off + (i + 1) * k];
                    for (kk, &a_ik) in a_row.iter().enumerate() {
                        let gb_row = &mut gb[b_off + kk * n..b_off + (kk + 1) * n];
                        for (gbv, gv) in gb_row.iter_mut().zip(g_row) {
                            *gbv += a_ik * gv;
                        }
                    }
                }
            }
            drop(av);
            drop(bv);
            if a.requires_grad() {
                a.accumulate_grad(&ga);
            }
            if b.requires_grad() {
                b.accumulate_grad(&gb);
            }
        }))
    }

    /// Add a bias vector along the trailing axis.
    pub fn bias_add(&self, bias: &Tensor) -> R {
        let last = *self.shape().last().unwrap();
        if bias.shape() != [last] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let xv = self.values();
        let bv = bias.values();
        let out: Vec<f64> = xv.iter().enumerate().map(|(i, &x)| x + bv[i % last]).collect();
        drop(xv);
        drop(bv);
        let (a, b) = (self.clone(), bias.clone());
        Tensor::from_op("bias_add", self.shape().to_vec(), out, vec![self.clone(), bias.clone()], Box::new(move |g| {
            if a.requires_grad() {
                a.accumulate_grad(g);
            }
            if b.requires_grad() {
                let mut gb = vec![0.0; last];
                for (i, &gv) in g.iter().enumerate() {
                    gb[i % last] += gv;
                }
                b.accumulate_grad(&gb);
            }
        }))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(axis: usize, parts: &[Tensor]) -> R {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            });
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                shape: parts[0].shape().to_vec(),
            });
        }
        let mut out_shape = parts[0].shape().to_vec();
        for p in &parts[1..] {
            if p.shape().len() != rank
                || p.shape()
                    .iter()
                    .enumerate()
                    .any(|(d, &s)| d != axis && s != out_shape[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: out_shape,
                    rhs: p.shape().to_vec(),
                });
            }
            out_shape[axis] += p.shape()[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut out = vec![0.0; numel(&out_shape)];
        let mut offset = 0;
        for p in parts {
            let pa = p.shape()[axis];
            let pv = p.values();
            for o in 0..outer {
                let src = &pv[o * pa * inner..(o + 1) * pa * inner];
                let dst_start = (o * total_axis + offset) * inner;
                out[dst_start..dst_start + pa * inner].copy_from_slice(src);
            }
            offset += pa;
        }
        let owned: Vec<Tensor> = parts.to_vec();
        let axis_sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::from_op("concat", out_shape, out, owned.clone(), Box::new(move |g| {
            let mut offset = 0;
            for (p, &pa) in owned.iter().zip(&axis_sizes) {
                if p.requires_grad() {
                    let mut gp = vec![0.0; p.len()];
                    for o in 0..outer {
                        let src_start = (o * total_axis + offset) * inner;
                        gp[o * pa * inner..(o + 1) * pa * inner]
                            .copy_from_slice(&g[src_start..src_start + pa * inner]);
                    }
                    p.accumulate_grad(&gp);
                }
                offset += pa;
            }
        }))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> R {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { op: "slice", axis, shape });
        }
        if start + len > shape[axis] || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                bound: shape[axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total_axis = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let v = self.values();
        let mut out = vec![0.0; numel(&out_shape)];
        for o in 0..outer {
            let src_start = (o * total_axis + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&v[src_start..src_start + len * inner]);
        }
        drop(v);
        let parent = self.clone();
        let parent_len = self.len();
        Tensor::from_op("slice", out_shape, out, vec![self.clone()], Box::new(move |g| {
            let mut gp = vec![0.0; parent_len];
            for o in 0..outer {
                let dst_start = (o * total_axis + start) * inner;
                gp[dst_start..dst_start + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            parent.accumulate_grad(&gp);
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> R {
        if numel(shape) != self.len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("element count {} != {}", numel(shape), self.len()),
            });
        }
        let parent = self.clone();
        Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), vec![self.clone()], Box::new(move |g| {
            parent.accumulate_grad(g);
        }))
    }

    /// Permute axes; `axes` is a permutation of `0..rank`.
    pub fn permute(&self, axes: &[usize]) -> R {
        let shape = self.shape().to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape,
                reason: format!("invalid axis permutation {:?}", axes),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out_str = strides(&out_shape);
        let v = self.values();
        let mut out = vec![0.0; v.len()];
        let mut idx = vec![0usize; rank];
        for &val in v.iter() {
            let mut o = 0;
            for (d, &a) in axes.iter().enumerate() {
                o += idx[a] * out_str[d];
            }
            out[o] = val;
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        drop(v);
        let parent = self.clone();
        let axes_owned = axes.to_vec();
        let in_shape = shape.clone();
        Tensor::from_op("permute", out_shape.clone(), out, vec![self.clone()], Box::new(move |g| {
            let mut gp = vec![0.0; numel(&in_shape)];
            let out_str = strides(&axes_owned.iter().map(|&a| in_shape[a]).collect::<Vec<_>>());
            let in_str = strides(&in_shape);
            let mut idx = vec![0usize; in_shape.len()];
            for _ in 0..gp.len() {
                let mut o = 0;
                for (d, &a) in axes_owned.iter().enumerate() {
                    o += idx[a] * out_str[d];
                }
                let mut i = 0;
                for (d, &x) in idx.iter().enumerate() {
                    i += x * in_str[d];
                }
                gp[i] = g[o];
                for d in (0..in_shape.len()).rev() {
                    idx[d] += 1;
                    if idx[d] < in_shape[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            parent.accumulate_grad(&gp);
        }))
    }

    /// Sum along one axis; the axis is kept with size 1 so results broadcast
    /// back without a reshape.
    pub fn sum_axis(&self, axis: usize) -> R {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { op: "sum_axis", axis, shape });
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let v = self.values();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += v[base + i];
                }
            }
        }
        drop(v);
        let parent = self.clone();
        let parent_len = self.len();
        Tensor::from_op("sum_axis", out_shape, out, vec![self.clone()], Box::new(move |g| {
            let mut gp = vec![0.0; parent_len];
            for o in 0..outer {
                for j in 0..n {
                    let base = (o * n + j) * inner;
                    for i in 0..inner {
                        gp[base + i] = g[o * inner + i];
                    }
                }
            }
            parent.accumulate_grad(&gp);
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> R {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis)?.scale(1.0 / n)
    }

    pub fn sum_all(&self) -> R {
        let total: f64 = self.values().iter().sum();
        let parent = self.clone();
        let parent_len = self.len();
        Tensor::from_op("sum_all", vec![1], vec![total], vec![self.clone()], Box::new(move |g| {
            parent.accumulate_grad(&vec![g[0]; parent_len]);
        }))
    }

    pub fn mean_all(&self) -> R {
        let n = self.len() as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&self, axis: usize) -> R {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { op: "softmax", axis, shape });
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let v = self.values();
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..n {
                    m = m.max(v[at(j)]);
                }
                let mut z = 0.0;
                for j in 0..n {
                    let e = (v[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        drop(v);
        let y = out.clone();
        let parent = self.clone();
        Tensor::from_op("softmax", shape, out, vec![self.clone()], Box::new(move |g| {
            let mut gp = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g[at(j)] * y[at(j)];
                    }
                    for j in 0..n {
                        gp[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            parent.accumulate_grad(&gp);
        }))
    }

    /// Stable log-softmax along the trailing axis.
    pub fn log_softmax_last(&self) -> R {
        let shape = self.shape().to_vec();
        let n = *shape.last().unwrap();
        let rows = self.len() / n;
        let v = self.values();
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            let lz = m + z.ln();
            for (j, &x) in row.iter().enumerate() {
                out[r * n + j] = x - lz;
            }
        }
        drop(v);
        let y = out.clone();
        let parent = self.clone();
        Tensor::from_op("log_softmax", shape, out, vec![self.clone()], Box::new(move |g| {
            let mut gp = vec![0.0; g.len()];
            for r in 0..rows {
                let gsum: f64 = g[r * n..(r + 1) * n].iter().sum();
                for j in 0..n {
                    let p = y[r * n + j].exp();
                    gp[r * n + j] = g[r * n + j] - p * gsum;
                }
            }
            parent.accumulate_grad(&gp);
        }))
    }

    /// Strided 3-D convolution over input `[B,F,H,W,Cin]` with kernel
    /// `[kf,kh,kw,Cin,Cout]`, zero padding `(k-1)/2` per dim, stride
    /// `(sf,sh,sw)`. A 1x1x1 kernel with unit stride is the channel-adjusting
    /// pointwise convolution.
    pub fn conv3d(&self, weight: &Tensor, stride: (usize, usize, usize)) -> R {
        let ws = weight.shape();
        if ws.len() != 5 {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: self.shape().to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let pad = ((ws[0] - 1) / 2, (ws[1] - 1) / 2, (ws[2] - 1) / 2);
        self.conv3d_pad(weight, stride, pad)
    }

    /// [`Tensor::conv3d`] with explicit zero padding per dimension. Padding
    /// (0, 0, 0) with kernel == stride is exact non-overlapping patching.
    pub fn conv3d_pad(
        &self,
        weight: &Tensor,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> R {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        if xs.len() != 5 || ws.len() != 5 || xs[4] != ws[3] {
            return Err(TensorError::ShapeMismatch { op: "conv3d", lhs: xs, rhs: ws });
        }
        let (b, f, h, w, cin) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (kf, kh, kw, cout) = (ws[0], ws[1], ws[2], ws[4]);
        let (sf, sh, sw) = stride;
        let (pf, ph, pw) = pad;
        let of = (f + 2 * pf - kf) / sf + 1;
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        let out_shape = vec![b, of, oh, ow, cout];
        let xv = self.values();
        let wv = weight.values();
        let mut out = vec![0.0; numel(&out_shape)];
        for bi in 0..b {
            for f0 in 0..of {
                for h0 in 0..oh {
                    for w0 in 0..ow {
                        let o_base = (((bi * of + f0) * oh + h0) * ow + w0) * cout;
                        for tf in 0..kf {
                            let fi = (f0 * sf + tf) as isize - pf as isize;
                            if fi < 0 || fi >= f as isize {
                                continue;
                            }
                            for th in 0..kh {
                                let hi = (h0 * sh + th) as isize - ph as isize;
                                if hi < 0 || hi >= h as isize {
                                    continue;
                                }
                                for tw in 0..kw {
                                    let wi = (w0 * sw + tw) as isize - pw as isize;
                                    if wi < 0 || wi >= w as isize {
                                        continue;
                                    }
                                    let x_base = (((bi * f + fi as usize) * h + hi as usize) * w
                                        + wi as usize)
                                        * cin;
                                    let w_base = ((tf * kh + th) * kw + tw) * cin * cout;
                                    for ci in 0..cin {
                                        let xval = xv[x_base + ci];
                                        let w_row = &wv[w_base + ci * cout..w_base + (ci + 1) * cout];
                                        let o_row = &mut out[o_base..o_base + cout];
                                        for (o, &wv_) in o_row.iter_mut().zip(w_row) {
                                            *o += xval * wv_;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(xv);
        drop(wv);
        let (x, wt) = (self.clone(), weight.clone());
        Tensor::from_op("conv3d", out_shape, out, vec![self.clone(), weight.clone()], Box::new(move |g| {
            let xv = x.values();
            let wv = wt.values();
            let mut gx = vec![0.0; xv.len()];
            let mut gw = vec![0.0; wv.len()];
            for bi in 0..b {
                for f0 in 0..of {
                    for h0 in 0..oh {
                        for w0 in 0..ow {
                            let o_base = (((bi * of + f0) * oh + h0) * ow + w0) * cout;
                            let g_row = &g[o_base..o_base + cout];
                            for tf in 0..kf {
                                let fi = (f0 * sf + tf) as isize - pf as isize;
                                if fi < 0 || fi >= f as isize {
                                    continue;
                                }
                                for th in 0..kh {
                                    let hi = (h0 * sh + th) as isize - ph as isize;
                                    if hi < 0 || hi >= h as isize {
                                        continue;
                                    }
                                    for tw in 0..kw {
                                        let wi = (w0 * sw + tw) as isize - pw as isize;
                                        if wi < 0 || wi >= w as isize {
                                            continue;
                                        }
                                        let x_base = (((bi * f + fi as usize) * h + hi as usize) * w
                                            + wi as usize)
                                            * cin;
                                        let w_base = ((tf * kh + th) * kw + tw) * cin * cout;
                                        for ci in 0..cin {
                                            let w_row =
                                                &wv[w_base + ci * cout..w_base + (ci + 1) * cout];
                                            let gw_row =
                                                &mut gw[w_base + ci * cout..w_base + (ci + 1) * cout];
                                            let xval = xv[x_base + ci];
                                            let mut acc = 0.0;
                                            for ((&gv, &wvv), gwv) in
                                                g_row.iter().zip(w_row).zip(gw_row.iter_mut())
                                            {
                                                acc += gv * wvv;
                                                *gwv += gv * xval;
                                            }
                                            gx[x_base + ci] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            drop(xv);
            drop(wv);
            if x.requires_grad() {
                x.accumulate_grad(&gx);
            }
            if wt.requires_grad() {
                wt.accumulate_grad(&gw);
            }
        }))
    }

    /// Embedding lookup: `weight` is `[V, d]`, output `[ids.len(), d]`.
    pub fn embedding(&self, ids: &[usize]) -> R {
        let shape = self.shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape,
                reason: "weight must be 2-D".into(),
            });
        }
        let (v, d) = (shape[0], shape[1]);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { op: "embedding", index: id, bound: v });
            }
        }
        let wv = self.values();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&wv[id * d..(id + 1) * d]);
        }
        drop(wv);
        let parent = self.clone();
        let ids_owned = ids.to_vec();
        Tensor::from_op("embedding", vec![ids.len(), d], out, vec![self.clone()], Box::new(move |g| {
            let mut gw = vec![0.0; v * d];
            for (row, &id) in ids_owned.iter().enumerate() {
                for j in 0..d {
                    gw[id * d + j] += g[row * d + j];
                }
            }
            parent.accumulate_grad(&gw);
        }))
    }

    /// Mean cross-entropy over the unmasked rows of `[N, C]` logits with
    /// integer targets. Stable via log-softmax.
    pub fn cross_entropy(&self, targets: &[usize], mask: &[bool]) -> R {
        let shape = self.shape().to_vec();
        if shape.len() != 2 || targets.len() != shape[0] || mask.len() != shape[0] {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape,
                reason: format!("targets/mask length {} / {}", targets.len(), mask.len()),
            });
        }
        let (rows, c) = (shape[0], shape[1]);
        for (&t, &m) in targets.iter().zip(mask) {
            if m && t >= c {
                return Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: t, bound: c });
            }
        }
        let n_valid = mask.iter().filter(|&&m| m).count();
        if n_valid == 0 {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape,
                reason: "all positions masked out".into(),
            });
        }
        let v = self.values();
        let mut probs = vec![0.0; v.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &v[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            let lz = m + z.ln();
            for (j, &x) in row.iter().enumerate() {
                probs[r * c + j] = (x - lz).exp();
            }
            if mask[r] {
                loss -= row[targets[r]] - lz;
            }
        }
        drop(v);
        loss /= n_valid as f64;
        let parent = self.clone();
        let targets_owned = targets.to_vec();
        let mask_owned = mask.to_vec();
        Tensor::from_op("cross_entropy", vec![1], vec![loss], vec![self.clone()], Box::new(move |g| {
            let scale = g[0] / n_valid as f64;
            let mut gp = vec![0.0; probs.len()];
            for r in 0..rows {
                if !mask_owned[r] {
                    continue;
                }
                for j in 0..c {
                    let y = if j == targets_owned[r] { 1.0 } else { 0.0 };
                    gp[r * c + j] = scale * (probs[r * c + j] - y);
                }
            }
            parent.accumulate_grad(&gp);
        }))
    }
}

/// KL divergence sum_i p_i * ln(p_i / q_i) with both distributions clamped at
/// a 1e-12 floor before the log so zero probabilities stay finite. `p` is
/// treated as a constant (target) distribution.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> R {
    if p.shape() != q.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "kl_divergence",
            lhs: p.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    let p_const = p.detach();
    let log_ratio = p_const.clamp_min(1e-12)?.ln()?.sub(&q.clamp_min(1e-12)?.ln()?)?;
    p_const.mul(&log_ratio)?.sum_all()
}

/// Layer normalization over the trailing axis with learned gain/shift,
/// composed from primitive ops so the backward pass comes for free.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> R {
    let last_axis = x.shape().len() - 1;
    let d = *x.shape().last().unwrap();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let mean = x.mean_axis(last_axis)?;
    let centered = x.sub(&mean)?;
    let var = centered.square()?.mean_axis(last_axis)?;
    let inv_std = var.add_scalar(eps)?.powf(-0.5)?;
    let normed = centered.mul(&inv_std)?;
    let mut gshape = vec![1; x.shape().len()];
    gshape[last_axis] = d;
    normed.mul(&gamma.reshape(&gshape)?)?.add(&beta.reshape(&gshape)?)
}
