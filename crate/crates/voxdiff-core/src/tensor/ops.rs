//! Differentiable operations on [`Tensor`].
//!
//! Volumetric tensors use the layout `[C, H, W, L]` with index
//! `((c*H + h)*W + w)*L + l`; matrices are row-major `[rows, cols]`.

use super::{BackCtx, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl Tensor {
    // ---- elementwise binary -------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx| vec![ctx.grad.to_vec(), ctx.grad.to_vec()]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx| {
                vec![
                    ctx.grad.to_vec(),
                    ctx.grad.iter().map(|g| -g).collect(),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                vec![
                    ctx.grad.iter().zip(b).map(|(g, b)| g * b).collect(),
                    ctx.grad.iter().zip(a).map(|(g, a)| g * a).collect(),
                ]
            }),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("div", self, other)?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a / b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx| {
                let b = ctx.parents[1].data();
                let out = ctx.out_data;
                vec![
                    ctx.grad.iter().zip(b).map(|(g, b)| g / b).collect(),
                    ctx.grad
                        .iter()
                        .zip(out.iter().zip(b))
                        .map(|(g, (o, b))| -g * o / b)
                        .collect(),
                ]
            }),
        ))
    }

    // ---- scalar -------------------------------------------------------------

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|a| a + s).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| vec![ctx.grad.to_vec()]),
        )
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * s).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                vec![ctx.grad.iter().map(|g| g * s).collect()]
            }),
        )
    }

    // ---- elementwise unary --------------------------------------------------

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn abs(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.abs()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let x = ctx.parents[0].data();
                vec![ctx
                    .grad
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x >= 0.0 { *g } else { -g })
                    .collect()]
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a.exp()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                vec![ctx
                    .grad
                    .iter()
                    .zip(ctx.out_data)
                    .map(|(g, o)| g * o)
                    .collect()]
            }),
        )
    }

    pub fn log(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.ln()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let x = ctx.parents[0].data();
                vec![ctx.grad.iter().zip(x).map(|(g, x)| g / x).collect()]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a.tanh()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                vec![ctx
                    .grad
                    .iter()
                    .zip(ctx.out_data)
                    .map(|(g, o)| g * (1.0 - o * o))
                    .collect()]
            }),
        )
    }

    pub fn silu(&self) -> Tensor {
        let data = self.data().iter().map(|&a| a * sigmoid(a)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let x = ctx.parents[0].data();
                vec![ctx
                    .grad
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s * (1.0 + x * (1.0 - s)))
                    })
                    .collect()]
            }),
        )
    }

    /// GELU via the tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&x| {
                0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
            })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let x = ctx.parents[0].data();
                vec![ctx
                    .grad
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect()]
            }),
        )
    }

    /// Exact-erf GELU, x * Phi(x). Used where GELU stands in for a Gaussian CDF.
    pub fn gelu_erf(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x * phi(x)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let x = ctx.parents[0].data();
                vec![ctx
                    .grad
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| g * (phi(x) + x * gauss_pdf(x)))
                    .collect()]
            }),
        )
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let n = ctx.parents[0].numel();
                vec![vec![ctx.grad[0]; n]]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        let s = self.data().iter().sum::<f64>() / n;
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let count = ctx.parents[0].numel();
                vec![vec![ctx.grad[0] / count as f64; count]]
            }),
        )
    }

    // ---- matrix ops ---------------------------------------------------------

    /// `self [m,k] @ other [k,n] -> [m,n]`, or with `trans_b`,
    /// `self [m,k] @ other [n,k]^T -> [m,n]`.
    pub fn matmul(&self, other: &Tensor, trans_b: bool) -> Result<Tensor> {
        let (a_sh, b_sh) = (self.shape(), other.shape());
        if a_sh.len() != 2 || b_sh.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "matmul",
                msg: format!("expects 2-D operands, got {a_sh:?} and {b_sh:?}"),
            });
        }
        let (m, k) = (a_sh[0], a_sh[1]);
        let (bk, n) = if trans_b {
            (b_sh[1], b_sh[0])
        } else {
            (b_sh[0], b_sh[1])
        };
        if k != bk {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a_sh.to_vec(),
                rhs: b_sh.to_vec(),
            });
        }
        let data = mm(self.data(), other.data(), m, k, n, false, trans_b);
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &BackCtx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                let g = ctx.grad;
                if trans_b {
                    // out = a b^T: da = g b, db = g^T a
                    vec![
                        mm(g, b, m, n, k, false, false),
                        mm(g, a, n, m, k, true, false),
                    ]
                } else {
                    // out = a b: da = g b^T, db = a^T g
                    vec![
                        mm(g, b, m, n, k, false, true),
                        mm(a, g, k, m, n, true, false),
                    ]
                }
            }),
        ))
    }

    /// `x [m, din] @ w [din, dout] + b [dout]`.
    pub fn linear(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let x_sh = self.shape();
        let w_sh = w.shape();
        if x_sh.len() != 2 || w_sh.len() != 2 || x_sh[1] != w_sh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: x_sh.to_vec(),
                rhs: w_sh.to_vec(),
            });
        }
        if b.shape() != [w_sh[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "linear(bias)",
                lhs: w_sh.to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (x_sh[0], x_sh[1], w_sh[1]);
        let mut data = mm(self.data(), w.data(), m, k, n, false, false);
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += b.data()[c];
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), w.clone(), b.clone()],
            Box::new(move |ctx: &BackCtx| {
                let x = ctx.parents[0].data();
                let w = ctx.parents[1].data();
                let g = ctx.grad;
                let dx = mm(g, w, m, n, k, false, true);
                let dw = mm(x, g, k, m, n, true, false);
                let mut db = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        db[c] += g[r * n + c];
                    }
                }
                vec![dx, dw, db]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let n = *self.shape().last().unwrap_or(&1);
        let rows = self.numel() / n;
        let mut data = vec![0.0; self.numel()];
        for r in 0..rows {
            let row = &self.data()[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in data[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in &mut data[r * n..(r + 1) * n] {
                *o /= sum;
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let y = ctx.out_data;
                let g = ctx.grad;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for ((d, &y), &g) in
                        dx[r * n..(r + 1) * n].iter_mut().zip(ys).zip(gs)
                    {
                        *d = y * (g - dot);
                    }
                }
                vec![dx]
            }),
        )
    }

    // ---- structural ---------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::InvalidArgument {
                op: "reshape",
                msg: format!(
                    "cannot reshape {:?} ({} values) to {:?}",
                    self.shape(),
                    self.numel(),
                    shape
                ),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| vec![ctx.grad.to_vec()]),
        ))
    }

    /// `out[i] = self[indices[i]]`. Backward scatter-adds, so bijective index
    /// maps (permutations, window partition, cyclic shifts) are exact inverses.
    pub fn gather(&self, indices: Vec<usize>, out_shape: &[usize]) -> Result<Tensor> {
        if indices.len() != out_shape.iter().product::<usize>() {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: format!(
                    "index count {} does not match output shape {:?}",
                    indices.len(),
                    out_shape
                ),
            });
        }
        let src = self.data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of bounds for {} values", src.len()),
            });
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let in_len = src.len();
        Ok(Tensor::from_op(
            out_shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let mut dx = vec![0.0; in_len];
                for (&i, &g) in indices.iter().zip(ctx.grad) {
                    dx[i] += g;
                }
                vec![dx]
            }),
        ))
    }

    /// Concatenation along `axis`; all parts must agree on the other axes.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "empty part list".into(),
        })?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.shape().len() != rank {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != first.shape()[d] {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let len = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
            }
        }
        let part_axis: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(Tensor::from_op(
            out_shape,
            data,
            parts.to_vec(),
            Box::new(move |ctx: &BackCtx| {
                let mut grads: Vec<Vec<f64>> = part_axis
                    .iter()
                    .map(|&a| Vec::with_capacity(outer * a * inner))
                    .collect();
                let mut pos = 0;
                for _o in 0..outer {
                    for (gi, &a) in part_axis.iter().enumerate() {
                        let len = a * inner;
                        grads[gi].extend_from_slice(&ctx.grad[pos..pos + len]);
                        pos += len;
                    }
                }
                grads
            }),
        ))
    }

    // ---- neural-net ops -----------------------------------------------------

    /// Per-channel affine conditioning: `out = x * (1 + sc) + sh`.
    /// `x` is `[C, ...]`; `sc` and `sh` are `[C]`.
    pub fn scale_shift(&self, sc: &Tensor, sh: &Tensor) -> Result<Tensor> {
        let c = self.shape().first().copied().unwrap_or(0);
        if sc.shape() != [c] || sh.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_shift",
                lhs: self.shape().to_vec(),
                rhs: sc.shape().to_vec(),
            });
        }
        let spatial = self.numel() / c;
        let mut data = vec![0.0; self.numel()];
        for ch in 0..c {
            let s = 1.0 + sc.data()[ch];
            let t = sh.data()[ch];
            for i in 0..spatial {
                data[ch * spatial + i] = self.data()[ch * spatial + i] * s + t;
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), sc.clone(), sh.clone()],
            Box::new(move |ctx: &BackCtx| {
                let x = ctx.parents[0].data();
                let sc = ctx.parents[1].data();
                let g = ctx.grad;
                let mut dx = vec![0.0; x.len()];
                let mut dsc = vec![0.0; c];
                let mut dsh = vec![0.0; c];
                for ch in 0..c {
                    let s = 1.0 + sc[ch];
                    for i in 0..spatial {
                        let idx = ch * spatial + i;
                        dx[idx] = g[idx] * s;
                        dsc[ch] += g[idx] * x[idx];
                        dsh[ch] += g[idx];
                    }
                }
                vec![dx, dsc, dsh]
            }),
        ))
    }

    /// Group normalization over `[C, ...]` with per-channel affine parameters.
    pub fn group_norm(
        &self,
        groups: usize,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let c = self.shape().first().copied().unwrap_or(0);
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::InvalidArgument {
                op: "group_norm",
                msg: format!("{groups} groups do not divide {c} channels"),
            });
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "group_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let spatial = self.numel() / c;
        let gc = c / groups;
        let glen = gc * spatial;
        let mut mean = vec![0.0; groups];
        let mut inv_std = vec![0.0; groups];
        let x = self.data();
        for g in 0..groups {
            let seg = &x[g * glen..(g + 1) * glen];
            let m: f64 = seg.iter().sum::<f64>() / glen as f64;
            let v: f64 =
                seg.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / glen as f64;
            mean[g] = m;
            inv_std[g] = 1.0 / (v + eps).sqrt();
        }
        let mut data = vec![0.0; self.numel()];
        for ch in 0..c {
            let g = ch / gc;
            let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
            for i in 0..spatial {
                let idx = ch * spatial + i;
                data[idx] = ga * (x[idx] - mean[g]) * inv_std[g] + be;
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |ctx: &BackCtx| {
                let x = ctx.parents[0].data();
                let gamma = ctx.parents[1].data();
                let grad = ctx.grad;
                let mut dx = vec![0.0; x.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for g in 0..groups {
                    // y_hat = (x - mean)/std; out = gamma*y_hat + beta
                    // dx = (1/std) (G - mean(G) - y_hat*mean(G*y_hat)),
                    // with G = grad*gamma over the group.
                    let mut sum_g = 0.0;
                    let mut sum_gy = 0.0;
                    for ch in g * gc..(g + 1) * gc {
                        for i in 0..spatial {
                            let idx = ch * spatial + i;
                            let yhat = (x[idx] - mean[g]) * inv_std[g];
                            let big_g = grad[idx] * gamma[ch];
                            sum_g += big_g;
                            sum_gy += big_g * yhat;
                            dgamma[ch] += grad[idx] * yhat;
                            dbeta[ch] += grad[idx];
                        }
                    }
                    let m = glen as f64;
                    for ch in g * gc..(g + 1) * gc {
                        for i in 0..spatial {
                            let idx = ch * spatial + i;
                            let yhat = (x[idx] - mean[g]) * inv_std[g];
                            let big_g = grad[idx] * gamma[ch];
                            dx[idx] = inv_std[g]
                                * (big_g - sum_g / m - yhat * sum_gy / m);
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            }),
        ))
    }

    /// 3D convolution, stride 1, zero padding preserving spatial extent.
    /// `self [Cin,H,W,L]`, `weight [Cout,Cin,kh,kw,kl]` (odd kernels),
    /// `bias [Cout]`.
    pub fn conv3d(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 5 || xs[0] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (cin, h, w, l) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw, kl) = (ws[0], ws[2], ws[3], ws[4]);
        if kh % 2 == 0 || kw % 2 == 0 || kl % 2 == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv3d",
                msg: format!("kernel extents must be odd, got {kh}x{kw}x{kl}"),
            });
        }
        if bias.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d(bias)",
                lhs: ws.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let data = conv3d_fwd(
            self.data(),
            weight.data(),
            bias.data(),
            cin,
            cout,
            (h, w, l),
            (kh, kw, kl),
        );
        Ok(Tensor::from_op(
            vec![cout, h, w, l],
            data,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |ctx: &BackCtx| {
                conv3d_bwd(
                    ctx.parents[0].data(),
                    ctx.parents[1].data(),
                    ctx.grad,
                    cin,
                    cout,
                    (h, w, l),
                    (kh, kw, kl),
                )
            }),
        ))
    }

    /// Trilinear resampling of `[C,H,W,L]` to the target spatial extents.
    pub fn resize_trilinear(&self, target: [usize; 3]) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "resize_trilinear",
                msg: format!("expects [C,H,W,L], got {xs:?}"),
            });
        }
        if target.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidArgument {
                op: "resize_trilinear",
                msg: format!("zero target extent {target:?}"),
            });
        }
        let c = xs[0];
        let src = [xs[1], xs[2], xs[3]];
        let maps: [Vec<(usize, usize, f64)>; 3] = [
            axis_map(src[0], target[0]),
            axis_map(src[1], target[1]),
            axis_map(src[2], target[2]),
        ];
        let (sh, sw, sl) = (src[0], src[1], src[2]);
        let (th, tw, tl) = (target[0], target[1], target[2]);
        let mut data = vec![0.0; c * th * tw * tl];
        let x = self.data();
        for ch in 0..c {
            let xo = ch * sh * sw * sl;
            let oo = ch * th * tw * tl;
            for (oh, &(h0, h1, fh)) in maps[0].iter().enumerate() {
                for (ow, &(w0, w1, fw)) in maps[1].iter().enumerate() {
                    for (ol, &(l0, l1, fl)) in maps[2].iter().enumerate() {
                        let mut v = 0.0;
                        for (hi, wh) in [(h0, 1.0 - fh), (h1, fh)] {
                            for (wi, ww) in [(w0, 1.0 - fw), (w1, fw)] {
                                for (li, wl) in [(l0, 1.0 - fl), (l1, fl)] {
                                    let wt = wh * ww * wl;
                                    if wt != 0.0 {
                                        v += wt
                                            * x[xo + (hi * sw + wi) * sl + li];
                                    }
                                }
                            }
                        }
                        data[oo + (oh * tw + ow) * tl + ol] = v;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c, th, tw, tl],
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let mut dx = vec![0.0; c * sh * sw * sl];
                let g = ctx.grad;
                for ch in 0..c {
                    let xo = ch * sh * sw * sl;
                    let oo = ch * th * tw * tl;
                    for (oh, &(h0, h1, fh)) in maps[0].iter().enumerate() {
                        for (ow, &(w0, w1, fw)) in maps[1].iter().enumerate() {
                            for (ol, &(l0, l1, fl)) in maps[2].iter().enumerate()
                            {
                                let gv = g[oo + (oh * tw + ow) * tl + ol];
                                for (hi, wh) in [(h0, 1.0 - fh), (h1, fh)] {
                                    for (wi, ww) in [(w0, 1.0 - fw), (w1, fw)] {
                                        for (li, wl) in
                                            [(l0, 1.0 - fl), (l1, fl)]
                                        {
                                            let wt = wh * ww * wl;
                                            if wt != 0.0 {
                                                dx[xo
                                                    + (hi * sw + wi) * sl
                                                    + li] += gv * wt;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dx]
            }),
        ))
    }
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Dense matrix product with optional operand transposition.
/// Result is `[m, n]`; `a` is `m x k` (or `k x m` if `ta`), `b` is `k x n`
/// (or `n x k` if `tb`).
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = if ta { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

fn conv3d_fwd(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    (h, wd, l): (usize, usize, usize),
    (kh, kw, kl): (usize, usize, usize),
) -> Vec<f64> {
    let (ph, pw, pl) = (kh / 2, kw / 2, kl / 2);
    let spatial = h * wd * l;
    let mut out = vec![0.0; cout * spatial];
    for co in 0..cout {
        let oseg = &mut out[co * spatial..(co + 1) * spatial];
        oseg.fill(b[co]);
        for ci in 0..cin {
            let xseg = &x[ci * spatial..(ci + 1) * spatial];
            let wseg = &w[(co * cin + ci) * kh * kw * kl..];
            for dh in 0..kh {
                for dw in 0..kw {
                    for dl in 0..kl {
                        let wv = wseg[(dh * kw + dw) * kl + dl];
                        if wv == 0.0 {
                            continue;
                        }
                        let (oh0, oh1) =
                            valid_range(h, dh as isize - ph as isize);
                        let (ow0, ow1) =
                            valid_range(wd, dw as isize - pw as isize);
                        let (ol0, ol1) =
                            valid_range(l, dl as isize - pl as isize);
                        let sh = dh as isize - ph as isize;
                        let sw = dw as isize - pw as isize;
                        let sl = dl as isize - pl as isize;
                        for oh in oh0..oh1 {
                            let ih = (oh as isize + sh) as usize;
                            for ow in ow0..ow1 {
                                let iw = (ow as isize + sw) as usize;
                                let obase = (oh * wd + ow) * l;
                                let ibase = (ih * wd + iw) * l;
                                for ol in ol0..ol1 {
                                    let il = (ol as isize + sl) as usize;
                                    oseg[obase + ol] += wv * xseg[ibase + il];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3d_bwd(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    cin: usize,
    cout: usize,
    (h, wd, l): (usize, usize, usize),
    (kh, kw, kl): (usize, usize, usize),
) -> Vec<Vec<f64>> {
    let (ph, pw, pl) = (kh / 2, kw / 2, kl / 2);
    let spatial = h * wd * l;
    let mut dx = vec![0.0; cin * spatial];
    let mut dw = vec![0.0; cout * cin * kh * kw * kl];
    let mut db = vec![0.0; cout];
    for co in 0..cout {
        let gseg = &grad[co * spatial..(co + 1) * spatial];
        db[co] = gseg.iter().sum();
        for ci in 0..cin {
            let xseg = &x[ci * spatial..(ci + 1) * spatial];
            let dxseg = &mut dx[ci * spatial..(ci + 1) * spatial];
            let wbase = (co * cin + ci) * kh * kw * kl;
            for dh in 0..kh {
                for dwk in 0..kw {
                    for dl in 0..kl {
                        let widx = wbase + (dh * kw + dwk) * kl + dl;
                        let wv = w[widx];
                        let sh = dh as isize - ph as isize;
                        let sw = dwk as isize - pw as isize;
                        let sl = dl as isize - pl as isize;
                        let (oh0, oh1) = valid_range(h, sh);
                        let (ow0, ow1) = valid_range(wd, sw);
                        let (ol0, ol1) = valid_range(l, sl);
                        let mut wacc = 0.0;
                        for oh in oh0..oh1 {
                            let ih = (oh as isize + sh) as usize;
                            for ow in ow0..ow1 {
                                let iw = (ow as isize + sw) as usize;
                                let obase = (oh * wd + ow) * l;
                                let ibase = (ih * wd + iw) * l;
                                for ol in ol0..ol1 {
                                    let il = (ol as isize + sl) as usize;
                                    let g = gseg[obase + ol];
                                    wacc += g * xseg[ibase + il];
                                    dxseg[ibase + il] += g * wv;
                                }
                            }
                        }
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }
    vec![dx, dw, db]
}

/// Output index range for which `out + shift` is a valid input index.
fn valid_range(extent: usize, shift: isize) -> (usize, usize) {
    let lo = if shift < 0 { (-shift) as usize } else { 0 };
    let hi = if shift > 0 {
        extent.saturating_sub(shift as usize)
    } else {
        extent
    };
    (lo.min(hi), hi)
}

/// Per-output-index source pair and interpolation fraction
/// (half-pixel-center convention).
fn axis_map(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            if src == 1 {
                return (0, 0, 0.0);
            }
            let scale = src as f64 / dst as f64;
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, src as f64 - 1.0);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}
