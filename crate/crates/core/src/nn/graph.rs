//! Tape-based reverse-mode differentiation over a fixed set of fused ops.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid topological
//! order for the adjoint sweep. Parameters are borrowed from the model rather
//! than copied into the tape.

use matrixmultiply::sgemm;
use rand::Rng;

use super::{NnError, Parameter, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Input,
    Param(usize),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f32>,
        count: usize,
    },
    Sum {
        parts: Vec<Var>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Higher-precision copy of scalar reductions (losses).
    precise: Option<f64>,
}

pub struct Graph<'p> {
    params: &'p [Parameter],
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Adjoints of the leaves (inputs and parameters) after a backward sweep.
pub struct Grads {
    grads: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Boolean attention mask of shape `[L_q, L_kv]`, `true` meaning "may attend".
pub fn causal_mask(len: usize) -> Vec<bool> {
    let mut m = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            m[i * len + j] = true;
        }
    }
    m
}

// Thin safe wrapper: C[m,n] = alpha * A[m,k] B[k,n] + beta * C, arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    a_off: usize,
    rsa: usize,
    csa: usize,
    b: &[f32],
    b_off: usize,
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    c_off: usize,
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a_off + (m - 1) * rsa + (k - 1) * csa < a.len());
        assert!(b_off + (k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!(c_off + (m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every address touched by the kernel.
    unsafe {
        sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b.as_ptr().add(b_off),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f32>>], v: Var, delta: &[f32]) {
    let g = accumulate(grads, v, delta.len());
    for (a, d) in g.iter_mut().zip(delta) {
        *a += d;
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Parameter]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            precise: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node; differentiable iff `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Input, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Input, false)
    }

    /// Node for model parameter `index`; repeated calls return the same node.
    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        let v = self.push(Tensor::zeros(vec![0]), Op::Param(index), true);
        self.param_vars[index] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(i) => &self.params[i].tensor,
            _ => &self.nodes[v.0].value,
        }
    }

    /// Scalar value, using the higher-precision accumulator when the node has one.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.precise
            .unwrap_or_else(|| self.value(v).data()[0] as f64)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        if ws.shape().len() != 2 || xs.cols() != ws.shape()[0] || bs.numel() != ws.shape()[1] {
            return Err(NnError::ShapeMismatch {
                op: "affine",
                detail: format!(
                    "x {:?}, weight {:?}, bias {:?}: need x [*, d_in], weight [d_in, d_out], bias [d_out]",
                    xs.shape(),
                    ws.shape(),
                    bs.shape()
                ),
            });
        }
        let (din, dout, n) = (ws.shape()[0], ws.shape()[1], xs.rows());
        let mut y = Vec::with_capacity(n * dout);
        for _ in 0..n {
            y.extend_from_slice(bs.data());
        }
        gemm(
            n,
            din,
            dout,
            1.0,
            xs.data(),
            0,
            din,
            1,
            ws.data(),
            0,
            dout,
            1,
            1.0,
            &mut y,
            0,
            dout,
            1,
        );
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::new(shape, y)?, Op::Affine { x, w, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NnError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Relu { x }, needs)
    }

    /// Sign of every ReLU input, in recording order. Two evaluations with
    /// different patterns sit on different linear pieces.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f32> = (0..xv.numel())
            .map(|_| {
                if rng.random::<f32>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Dropout { x, mask }, needs)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: f32) -> Result<Var, NnError> {
        let (xv, gv, ov) = (self.value(x), self.value(gain), self.value(offset));
        let d = xv.cols();
        if d < 2 || gv.numel() != d || ov.numel() != d {
            return Err(NnError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "x {:?}, gain {:?}, offset {:?}",
                    xv.shape(),
                    gv.shape(),
                    ov.shape()
                ),
            });
        }
        let n = xv.rows();
        let mut xhat = vec![0.0f32; n * d];
        let mut rstd = vec![0.0f32; n];
        let mut y = vec![0.0f32; n * d];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                y[r * d + c] = h * gv.data()[c] + ov.data()[c];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(offset);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Row-wise softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut y = vec![0.0f32; xv.numel()];
        for (out, row) in y.chunks_mut(n.max(1)).zip(xv.data().chunks(n.max(1))) {
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = ((v as f64 - max).exp() / sum) as f32;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), y).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Softmax { x }, needs)
    }

    /// Scaled dot-product attention over already-projected `q [L_q, d]`,
    /// `k, v [L_kv, d]`, split into `heads` contiguous column groups.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var, NnError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(NnError::Config(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(NnError::ShapeMismatch {
                op: "attention",
                detail: format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            });
        }
        let (lq, lk, dh) = (qv.rows(), kv.rows(), d / heads);
        if let Some(m) = mask {
            if m.len() != lq * lk {
                return Err(NnError::ShapeMismatch {
                    op: "attention",
                    detail: format!("mask has {} entries, expected {lq}x{lk}", m.len()),
                });
            }
        }
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0f32; heads * lq * lk];
        let mut out = vec![0.0f32; lq * d];
        for h in 0..heads {
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            gemm(
                lq,
                dh,
                lk,
                scale,
                qv.data(),
                h * dh,
                d,
                1,
                kv.data(),
                h * dh,
                1,
                d,
                0.0,
                p,
                0,
                lk,
                1,
            );
            for i in 0..lq {
                let row = &mut p[i * lk..(i + 1) * lk];
                match mask {
                    Some(m) => masked_softmax(row, &m[i * lk..(i + 1) * lk]),
                    None => softmax_in_place(row),
                }
            }
            gemm(
                lq,
                lk,
                dh,
                1.0,
                p,
                0,
                lk,
                1,
                vv.data(),
                h * dh,
                d,
                1,
                0.0,
                &mut out,
                h * dh,
                d,
                1,
            );
        }
        let t = Tensor::new(vec![lq, d], out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Mean cross-entropy over rows whose target is `Some`; ignored rows are
    /// excluded from the mean. All rows ignored gives a loss of 0.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var, NnError> {
        let lv = self.value(logits);
        let c = lv.cols();
        let n = lv.rows();
        if targets.len() != n {
            return Err(NnError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{n} rows but {} targets", targets.len()),
            });
        }
        let mut probs = vec![0.0f32; n * c];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= c {
                return Err(NnError::TargetOutOfRange {
                    row: r,
                    target: t,
                    classes: c,
                });
            }
            let row = lv.row(r);
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            total += sum.ln() + max as f64 - row[t] as f64;
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (((v - max) as f64).exp() / sum) as f32;
            }
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let needs = self.needs(logits);
        let var = self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            needs,
        );
        self.nodes[var.0].precise = Some(loss);
        Ok(var)
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let mut total = 0.0f64;
        for &p in parts {
            if self.value(p).numel() != 1 {
                return Err(NnError::ShapeMismatch {
                    op: "sum",
                    detail: format!("expected scalar, got {:?}", self.value(p).shape()),
                });
            }
            total += self.scalar(p);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let var = self.push(
            Tensor::scalar(total as f32),
            Op::Sum {
                parts: parts.to_vec(),
            },
            needs,
        );
        self.nodes[var.0].precise = Some(total);
        Ok(var)
    }

    /// Reverse sweep from `out`. `seed` is the output cotangent; `None`
    /// requires a scalar output and seeds it with 1.
    pub fn backward(&self, out: Var, seed: Option<&[f32]>) -> Result<Grads, NnError> {
        let out_len = self.value(out).numel();
        let seed = match seed {
            Some(s) if s.len() == out_len => s.to_vec(),
            Some(s) => {
                return Err(NnError::ShapeMismatch {
                    op: "backward",
                    detail: format!("seed has {} values for output of {out_len}", s.len()),
                })
            }
            None if out_len == 1 => vec![1.0],
            None => {
                return Err(NnError::ShapeMismatch {
                    op: "backward",
                    detail: "non-scalar output needs an explicit seed".into(),
                })
            }
        };
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &gy, &mut grads);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Input | Op::Param(_)) {
                *g = None;
            }
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, idx: usize, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &self.nodes[idx].op {
            Op::Input | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (din, dout, n) = (wv.shape()[0], wv.shape()[1], xv.rows());
                if self.needs(*x) {
                    let dx = accumulate(grads, *x, n * din);
                    gemm(
                        n,
                        dout,
                        din,
                        1.0,
                        gy,
                        0,
                        dout,
                        1,
                        wv.data(),
                        0,
                        1,
                        dout,
                        1.0,
                        dx,
                        0,
                        din,
                        1,
                    );
                }
                if self.needs(*w) {
                    let dw = accumulate(grads, *w, din * dout);
                    gemm(
                        din,
                        n,
                        dout,
                        1.0,
                        xv.data(),
                        0,
                        1,
                        din,
                        gy,
                        0,
                        dout,
                        1,
                        1.0,
                        dw,
                        0,
                        dout,
                        1,
                    );
                }
                if self.needs(*b) {
                    let db = accumulate(grads, *b, dout);
                    for row in gy.chunks(dout) {
                        for (a, g) in db.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    add_into(grads, *a, gy);
                }
                if self.needs(*b) {
                    add_into(grads, *b, gy);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    let g = accumulate(grads, *x, gy.len());
                    for ((a, &d), &v) in g.iter_mut().zip(gy).zip(xv) {
                        if v > 0.0 {
                            *a += d;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let g = accumulate(grads, *x, gy.len());
                    for ((a, &d), &m) in g.iter_mut().zip(gy).zip(mask) {
                        *a += d * m;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let n = rstd.len();
                if self.needs(*x) {
                    let dx = accumulate(grads, *x, n * d);
                    let mut dxhat = vec![0.0f32; d];
                    for r in 0..n {
                        let gr = &gy[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0f32;
                        let mut m2 = 0.0f32;
                        for c in 0..d {
                            dxhat[c] = gr[c] * gv[c];
                            m1 += dxhat[c];
                            m2 += dxhat[c] * hr[c];
                        }
                        m1 /= d as f32;
                        m2 /= d as f32;
                        for c in 0..d {
                            dx[r * d + c] += rstd[r] * (dxhat[c] - m1 - hr[c] * m2);
                        }
                    }
                }
                if self.needs(*gain) {
                    let dg = accumulate(grads, *gain, d);
                    for (gr, hr) in gy.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if self.needs(*offset) {
                    let db = accumulate(grads, *offset, d);
                    for gr in gy.chunks(d) {
                        for (a, g) in db.iter_mut().zip(gr) {
                            *a += g;
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if self.needs(*x) {
                    let y = &self.nodes[idx].value;
                    let n = y.cols();
                    let g = accumulate(grads, *x, gy.len());
                    for ((yr, gr), out) in y.data().chunks(n).zip(gy.chunks(n)).zip(g.chunks_mut(n))
                    {
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            out[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let (lq, lk, dh) = (qv.rows(), kv.rows(), d / heads);
                let scale = 1.0 / (dh as f32).sqrt();
                let (nq, nk, nv) = (self.needs(*q), self.needs(*k), self.needs(*v));
                let mut dq = vec![0.0f32; if nq { lq * d } else { 0 }];
                let mut dk = vec![0.0f32; if nk { lk * d } else { 0 }];
                let mut dv = vec![0.0f32; if nv { lk * d } else { 0 }];
                let mut ds = vec![0.0f32; lq * lk];
                for h in 0..*heads {
                    let p = &probs[h * lq * lk..(h + 1) * lq * lk];
                    if nv {
                        gemm(
                            lk,
                            lq,
                            dh,
                            1.0,
                            p,
                            0,
                            1,
                            lk,
                            gy,
                            h * dh,
                            d,
                            1,
                            1.0,
                            &mut dv,
                            h * dh,
                            d,
                            1,
                        );
                    }
                    if !(nq || nk) {
                        continue;
                    }
                    gemm(
                        lq,
                        dh,
                        lk,
                        1.0,
                        gy,
                        h * dh,
                        d,
                        1,
                        vv.data(),
                        h * dh,
                        1,
                        d,
                        0.0,
                        &mut ds,
                        0,
                        lk,
                        1,
                    );
                    for i in 0..lq {
                        let pr = &p[i * lk..(i + 1) * lk];
                        let dr = &mut ds[i * lk..(i + 1) * lk];
                        let dot: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..lk {
                            dr[j] = pr[j] * (dr[j] - dot);
                        }
                    }
                    if nq {
                        gemm(
                            lq,
                            lk,
                            dh,
                            scale,
                            &ds,
                            0,
                            lk,
                            1,
                            kv.data(),
                            h * dh,
                            d,
                            1,
                            1.0,
                            &mut dq,
                            h * dh,
                            d,
                            1,
                        );
                    }
                    if nk {
                        gemm(
                            lk,
                            lq,
                            dh,
                            scale,
                            &ds,
                            0,
                            1,
                            lk,
                            qv.data(),
                            h * dh,
                            d,
                            1,
                            1.0,
                            &mut dk,
                            h * dh,
                            d,
                            1,
                        );
                    }
                }
                if nq {
                    add_into(grads, *q, &dq);
                }
                if nk {
                    add_into(grads, *k, &dk);
                }
                if nv {
                    add_into(grads, *v, &dv);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if self.needs(*logits) && *count > 0 {
                    let c = self.value(*logits).cols();
                    let scale = gy[0] / *count as f32;
                    let g = accumulate(grads, *logits, probs.len());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[r * c + j] += (probs[r * c + j] - onehot) * scale;
                        }
                    }
                }
            }
            Op::Sum { parts } => {
                for &p in parts {
                    if self.needs(p) {
                        add_into(grads, p, gy);
                    }
                }
            }
        }
    }

    /// Parameter adjoints in parameter order; `None` for parameters that
    /// did not take part in the forward pass.
    pub fn param_grads<'g>(&self, grads: &'g Grads) -> Vec<Option<&'g [f32]>> {
        self.param_vars
            .iter()
            .map(|v| v.and_then(|v| grads.get(v)))
            .collect()
    }
}

/// Below this shifted score the normalized weight can land in the f32
/// subnormal range. Such weights are far under rounding of the row sum but
/// make every later multiply slow, so they are set to exactly zero.
const UNDERFLOW_SCORE: f32 = -80.0;

fn shifted_exp(v: f32, max: f32) -> f32 {
    let d = v - max;
    if d < UNDERFLOW_SCORE {
        0.0
    } else {
        d.exp()
    }
}

/// Max-subtracted softmax with an `f64` normalizer.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = shifted_exp(*v, max);
        sum += *v as f64;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / sum) as f32;
    }
}

fn masked_softmax(row: &mut [f32], allowed: &[bool]) {
    let max = row
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .fold(f32::NEG_INFINITY, |acc, (&v, _)| acc.max(v));
    if max == f32::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0f64;
    for (v, &a) in row.iter_mut().zip(allowed) {
        *v = if a { shifted_exp(*v, max) } else { 0.0 };
        sum += *v as f64;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / sum) as f32;
    }
}
