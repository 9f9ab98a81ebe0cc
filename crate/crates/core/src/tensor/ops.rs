//! Differentiable operations on [`Tensor`].
//!
//! Backward closures capture parent handles (or small saved buffers) and
//! never the node they belong to, so graphs are acyclic and drop cleanly.

use super::kernels;
use super::{Result, Tensor, TensorError};
use crate::rng::Rng;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(TensorError::ShapeMismatch {
            op,
            detail: format!("needs a non-empty last axis, got {:?}", t.shape()),
        }),
    }
}

pub(crate) fn permute_copy(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0;
        for (i, &ax) in axes.iter().enumerate() {
            src += idx[i] * in_strides[ax];
        }
        *slot = data[src];
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    (out_shape, out)
}

impl Tensor {
    /// Element-wise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; a.len()];
        kernels::zip_map(&a, &b, |x, y| x + y, &mut out);
        drop(a);
        drop(b);
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g| Ok(vec![Some(g.to_vec()), Some(g.to_vec())])),
        )
    }

    /// Element-wise product of two same-shape tensors.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let mut out = vec![0.0; self.numel()];
        kernels::zip_map(&self.data(), &other.data(), |x, y| x * y, &mut out);
        let (lhs, rhs) = (self.clone(), other.clone());
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let b = rhs.data();
                let a = lhs.data();
                let da: Vec<f64> = g.iter().zip(b.iter()).map(|(&gi, &bi)| gi * bi).collect();
                let db: Vec<f64> = g.iter().zip(a.iter()).map(|(&gi, &ai)| gi * ai).collect();
                Ok(vec![Some(da), Some(db)])
            }),
        )
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let mut out = vec![0.0; self.numel()];
        kernels::map(&self.data(), |x| x * c, &mut out);
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| Ok(vec![Some(g.iter().map(|&gi| gi * c).collect())])),
        )
    }

    /// Adds a rank-1 bias along the last axis.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let d = last_dim("add_bias", self)?;
        if bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias {:?} against last axis {}", bias.shape(), d),
            });
        }
        let x = self.data();
        let b = bias.data();
        let mut out = vec![0.0; x.len()];
        for (o_row, x_row) in out.chunks_mut(d).zip(x.chunks(d)) {
            for ((o, &xv), &bv) in o_row.iter_mut().zip(x_row).zip(b.iter()) {
                *o = xv + bv;
            }
        }
        drop(x);
        drop(b);
        Tensor::from_op(
            "add_bias",
            self.shape().to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                let mut db = vec![0.0; d];
                for row in g.chunks(d) {
                    for (s, &gv) in db.iter_mut().zip(row) {
                        *s += gv;
                    }
                }
                Ok(vec![Some(g.to_vec()), Some(db)])
            }),
        )
    }

    /// `self` with shape `[..., k]` times a `[k, n]` matrix; leading axes are
    /// treated as stacked rows.
    pub fn matmul(&self, w: &Tensor) -> Result<Tensor> {
        let k = last_dim("matmul", self)?;
        if w.shape().len() != 2 || w.shape()[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} @ {:?}", self.shape(), w.shape()),
            });
        }
        let n = w.shape()[1];
        let m = self.numel() / k;
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(&self.data(), &w.data(), m, k, n, &mut out);
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().expect("rank checked") = n;
        let (lhs, rhs) = (self.clone(), w.clone());
        Tensor::from_op(
            "matmul",
            out_shape,
            out,
            vec![self.clone(), w.clone()],
            Box::new(move |g| {
                let mut da = vec![0.0; m * k];
                kernels::matmul_nt(g, &rhs.data(), m, n, k, &mut da);
                let mut dw = vec![0.0; k * n];
                kernels::matmul_tn(&lhs.data(), g, m, k, n, &mut dw);
                Ok(vec![Some(da), Some(dw)])
            }),
        )
    }

    /// Batched matrix product over rank-3 tensors: `[g, m, k] x [g, k, n]`,
    /// or `[g, n, k]` when `b_transposed` contracts against row-major keys.
    pub fn bmm(&self, other: &Tensor, b_transposed: bool) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let bad = |detail: String| TensorError::ShapeMismatch { op: "bmm", detail };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad(format!("{:?} x {:?}", sa, sb)));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if b_transposed {
            if sb[2] != k {
                return Err(bad(format!("{:?} x {:?}^T", sa, sb)));
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad(format!("{:?} x {:?}", sa, sb)));
            }
            sb[2]
        };
        let mut out = vec![0.0; batch * m * n];
        kernels::bmm(&self.data(), &other.data(), batch, m, k, n, b_transposed, &mut out);
        let (lhs, rhs) = (self.clone(), other.clone());
        Tensor::from_op(
            "bmm",
            vec![batch, m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let mut da = vec![0.0; batch * m * k];
                let mut db = vec![0.0; batch * k * n]; // b's element count either layout
                if b_transposed {
                    // out = A @ B^T with B stored [n, k]
                    kernels::bmm(g, &rhs.data(), batch, m, n, k, false, &mut da);
                    kernels::bmm_tn(g, &lhs.data(), batch, m, n, k, &mut db);
                } else {
                    kernels::bmm(g, &rhs.data(), batch, m, n, k, true, &mut da);
                    kernels::bmm_tn(&lhs.data(), g, batch, m, k, n, &mut db);
                }
                Ok(vec![Some(da), Some(db)])
            }),
        )
    }

    /// Same data, new shape with an equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(), shape),
            });
        }
        Tensor::from_op(
            "reshape",
            shape,
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g| Ok(vec![Some(g.to_vec())])),
        )
    }

    /// Reorders axes, copying into the new layout.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                detail: format!("axes {:?} for rank {}", axes, rank),
            });
        }
        let (out_shape, out) = permute_copy(&self.data(), self.shape(), axes);
        let mut inverse = vec![0usize; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let fwd_shape = out_shape.clone();
        Tensor::from_op(
            "permute",
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let (_, back) = permute_copy(g, &fwd_shape, &inverse);
                Ok(vec![Some(back)])
            }),
        )
    }

    /// The tanh approximation of the gaussian error linear unit.
    pub fn gelu(&self) -> Result<Tensor> {
        let mut out = vec![0.0; self.numel()];
        kernels::map(&self.data(), kernels::gelu, &mut out);
        let src = self.clone();
        Tensor::from_op(
            "gelu",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let x = src.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gi, &xi)| gi * kernels::gelu_grad(xi))
                    .collect();
                Ok(vec![Some(dx)])
            }),
        )
    }

    /// Normalizes each slice along the last axis, then applies a learned
    /// affine transform.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = last_dim("layer_norm", self)?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("gamma {:?}, beta {:?}, last axis {}", gamma.shape(), beta.shape(), d),
            });
        }
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let rows = x.len() / d;
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mut mean = 0.0;
            for &v in xr {
                mean += v;
            }
            mean /= d as f64;
            let mut var = 0.0;
            for &v in xr {
                var += (v - mean) * (v - mean);
            }
            var /= d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let xh = (xr[i] - mean) * is;
                xhat[r * d + i] = xh;
                out[r * d + i] = gm[i] * xh + bt[i];
            }
        }
        drop(x);
        let gamma_c = gamma.clone();
        drop(gm);
        drop(bt);
        Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let gm = gamma_c.data();
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let rows = g.len() / d;
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let is = inv_std[r];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for i in 0..d {
                        let dxh = gr[i] * gm[i];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[i];
                        dgamma[i] += gr[i] * xh[i];
                        dbeta[i] += gr[i];
                    }
                    let inv_d = 1.0 / d as f64;
                    for i in 0..d {
                        let dxh = gr[i] * gm[i];
                        dx[r * d + i] = is * (dxh - sum_dxh * inv_d - xh[i] * sum_dxh_xh * inv_d);
                    }
                }
                Ok(vec![Some(dx), Some(dgamma), Some(dbeta)])
            }),
        )
    }

    /// Looks up rows of a `[vocab, dim]` table; gradients scatter-add back.
    pub fn embedding(ids: &[usize], weight: &Tensor) -> Result<Tensor> {
        if weight.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                detail: format!("weight must be rank 2, got {:?}", weight.shape()),
            });
        }
        let (vocab, dim) = (weight.shape()[0], weight.shape()[1]);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfBounds {
                    op: "embedding",
                    index: id,
                    size: vocab,
                });
            }
        }
        let w = weight.data();
        let mut out = vec![0.0; ids.len() * dim];
        for (row, &id) in ids.iter().enumerate() {
            out[row * dim..(row + 1) * dim].copy_from_slice(&w[id * dim..(id + 1) * dim]);
        }
        drop(w);
        let ids_saved: Vec<usize> = ids.to_vec();
        Tensor::from_op(
            "embedding",
            vec![ids_saved.len(), dim],
            out,
            vec![weight.clone()],
            Box::new(move |g| {
                let mut dw = vec![0.0; vocab * dim];
                for (row, &id) in ids_saved.iter().enumerate() {
                    for i in 0..dim {
                        dw[id * dim + i] += g[row * dim + i];
                    }
                }
                Ok(vec![Some(dw)])
            }),
        )
    }

    /// Inverted dropout: keeps each element with probability `1 - p` and
    /// rescales survivors by `1 / (1 - p)`. The mask is drawn sequentially
    /// from `rng`, so a given seed always produces the same mask.
    pub fn dropout(&self, p: f64, rng: &mut Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                detail: format!("p must be in [0, 1), got {}", p),
            });
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.f64() < p { 0.0 } else { keep_scale })
            .collect();
        let mut out = vec![0.0; self.numel()];
        kernels::zip_map(&self.data(), &mask, |x, m| x * m, &mut out);
        Tensor::from_op(
            "dropout",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                Ok(vec![Some(g.iter().zip(&mask).map(|(&gi, &m)| gi * m).collect())])
            }),
        )
    }

    /// Replaces elements where `mask` is true with `value`; those positions
    /// receive zero gradient.
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                detail: format!("mask len {} vs {} elements", mask.len(), self.numel()),
            });
        }
        let x = self.data();
        let out: Vec<f64> = x
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        drop(x);
        let mask_saved: Vec<bool> = mask.to_vec();
        Tensor::from_op(
            "masked_fill",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                Ok(vec![Some(
                    g.iter()
                        .zip(&mask_saved)
                        .map(|(&gi, &m)| if m { 0.0 } else { gi })
                        .collect(),
                )])
            }),
        )
    }

    /// Softmax along the last axis at the given temperature.
    pub fn softmax(&self, temperature: f64) -> Result<Tensor> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                detail: format!("temperature must be positive, got {}", temperature),
            });
        }
        let d = last_dim("softmax", self)?;
        let mut out = vec![0.0; self.numel()];
        kernels::softmax_rows(&self.data(), d, temperature, &mut out);
        let y = out.clone();
        Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; g.len()];
                for r in 0..g.len() / d {
                    let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let mut dot = 0.0;
                    for i in 0..d {
                        dot += gr[i] * yr[i];
                    }
                    for i in 0..d {
                        dx[r * d + i] = yr[i] * (gr[i] - dot) / temperature;
                    }
                }
                Ok(vec![Some(dx)])
            }),
        )
    }

    /// From a `[batch, len, dim]` tensor, picks one `dim`-vector per batch
    /// element at the given position.
    pub fn select_rows(&self, positions: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "select_rows",
                detail: format!("expected rank 3, got {:?}", s),
            });
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        if positions.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "select_rows",
                detail: format!("{} positions for batch {}", positions.len(), b),
            });
        }
        for &p in positions {
            if p >= l {
                return Err(TensorError::IndexOutOfBounds {
                    op: "select_rows",
                    index: p,
                    size: l,
                });
            }
        }
        let x = self.data();
        let mut out = vec![0.0; b * d];
        for (bi, &p) in positions.iter().enumerate() {
            out[bi * d..(bi + 1) * d].copy_from_slice(&x[(bi * l + p) * d..(bi * l + p + 1) * d]);
        }
        drop(x);
        let pos_saved = positions.to_vec();
        Tensor::from_op(
            "select_rows",
            vec![b, d],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; b * l * d];
                for (bi, &p) in pos_saved.iter().enumerate() {
                    dx[(bi * l + p) * d..(bi * l + p + 1) * d].copy_from_slice(&g[bi * d..(bi + 1) * d]);
                }
                Ok(vec![Some(dx)])
            }),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let mut total = 0.0;
        for &v in self.data().iter() {
            total += v;
        }
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![],
            vec![total],
            vec![self.clone()],
            Box::new(move |g| Ok(vec![Some(vec![g[0]; n])])),
        )
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                detail: "empty tensor".to_string(),
            });
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Mean cross-entropy between `[n, classes]` logits and integer labels,
    /// computed through a fused log-softmax for stability.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits {:?} vs {} labels", s, labels.len()),
            });
        }
        let (n, c) = (s[0], s[1]);
        for &y in labels {
            if y >= c {
                return Err(TensorError::IndexOutOfBounds {
                    op: "cross_entropy",
                    index: y,
                    size: c,
                });
            }
        }
        let mut log_q = vec![0.0; n * c];
        kernels::log_softmax_rows(&self.data(), c, 1.0, &mut log_q);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            total -= log_q[i * c + y];
        }
        let loss = total / n as f64;
        let probs: Vec<f64> = log_q.iter().map(|&lq| lq.exp()).collect();
        let labels_saved = labels.to_vec();
        Tensor::from_op(
            "cross_entropy",
            vec![],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g| {
                let scale = g[0] / n as f64;
                let mut dz = probs.clone();
                for (i, &y) in labels_saved.iter().enumerate() {
                    dz[i * c + y] -= 1.0;
                }
                for v in dz.iter_mut() {
                    *v *= scale;
                }
                Ok(vec![Some(dz)])
            }),
        )
    }

    /// Mean KL divergence KL(p || q) between temperature-softened
    /// distributions, where `p` comes from `teacher` logits and `q` from
    /// `student` logits. Only the student side receives gradient; the
    /// teacher is treated as a constant even if it happens to be tracked.
    pub fn kl_divergence(teacher: &Tensor, student: &Tensor, temperature: f64) -> Result<Tensor> {
        same_shape("kl_divergence", teacher, student)?;
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "kl_divergence",
                detail: format!("temperature must be positive, got {}", temperature),
            });
        }
        let s = teacher.shape();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "kl_divergence",
                detail: format!("expected rank-2 logits, got {:?}", s),
            });
        }
        let (n, c) = (s[0], s[1]);
        let mut log_p = vec![0.0; n * c];
        let mut log_q = vec![0.0; n * c];
        kernels::log_softmax_rows(&teacher.data(), c, temperature, &mut log_p);
        kernels::log_softmax_rows(&student.data(), c, temperature, &mut log_q);
        let mut total = 0.0;
        for i in 0..n * c {
            total += log_p[i].exp() * (log_p[i] - log_q[i]);
        }
        let loss = total / n as f64;
        let p: Vec<f64> = log_p.iter().map(|&l| l.exp()).collect();
        let q: Vec<f64> = log_q.iter().map(|&l| l.exp()).collect();
        Tensor::from_op(
            "kl_divergence",
            vec![],
            vec![loss],
            vec![teacher.clone(), student.clone()],
            Box::new(move |g| {
                let scale = g[0] / (temperature * n as f64);
                let ds: Vec<f64> = q.iter().zip(&p).map(|(&qi, &pi)| (qi - pi) * scale).collect();
                Ok(vec![None, Some(ds)])
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn softmax_closed_form() {
        let t = Tensor::from_vec(vec![1, 2], vec![3f64.ln(), 0.0]).unwrap();
        let y = t.softmax(1.0).unwrap().to_vec();
        assert!((y[0] - 0.75).abs() < 1e-15);
        assert!((y[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_handles_extreme_logits() {
        let t = Tensor::from_vec(vec![1, 3], vec![-1e30, 700.0, 710.0]).unwrap();
        let y = t.softmax(1.0).unwrap().to_vec();
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(y[0], 0.0);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        // Uniform logits over two classes.
        let t = param(vec![1, 2], vec![0.0, 0.0]);
        let loss = t.cross_entropy(&[0]).unwrap().item().unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);

        // logits [1, -1], true class 1: loss = 2 + ln(1 + e^-2)
        let t = param(vec![1, 2], vec![1.0, -1.0]);
        let loss = t.cross_entropy(&[1]).unwrap().item().unwrap();
        assert!((loss - (2.0 + (1.0 + (-2.0f64).exp()).ln())).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let t = param(vec![1, 2], vec![3f64.ln(), 0.0]);
        t.cross_entropy(&[1]).unwrap().backward().unwrap();
        let g = t.grad().unwrap();
        assert!((g[0] - 0.75).abs() < 1e-15);
        assert!((g[1] - (0.25 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn kl_divergence_closed_form() {
        // p = [0.75, 0.25], q = [0.5, 0.5]
        let teacher = Tensor::from_vec(vec![1, 2], vec![3f64.ln(), 0.0]).unwrap();
        let student = param(vec![1, 2], vec![0.0, 0.0]);
        let kl = Tensor::kl_divergence(&teacher, &student, 1.0).unwrap();
        let expect = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl.item().unwrap() - expect).abs() < 1e-15);

        kl.backward().unwrap();
        let g = student.grad().unwrap();
        // (q - p) / (T * n)
        assert!((g[0] - (0.5 - 0.75)).abs() < 1e-15);
        assert!((g[1] - (0.5 - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn kl_divergence_gives_teacher_no_gradient() {
        let teacher = param(vec![1, 2], vec![1.0, 0.0]);
        let student = param(vec![1, 2], vec![0.0, 0.0]);
        Tensor::kl_divergence(&teacher, &student, 2.0)
            .unwrap()
            .backward()
            .unwrap();
        assert!(teacher.grad().is_none());
        assert!(student.grad().is_some());
    }

    #[test]
    fn blended_distillation_loss_closed_form() {
        // student logits [0,0], teacher [2 ln 3, 0], label 1, T = 2, w = 0.5
        let student = param(vec![1, 2], vec![0.0, 0.0]);
        let teacher = Tensor::from_vec(vec![1, 2], vec![2.0 * 3f64.ln(), 0.0]).unwrap();
        let (t, w) = (2.0, 0.5);
        let ce = student.cross_entropy(&[1]).unwrap();
        let kl = Tensor::kl_divergence(&teacher, &student, t).unwrap();
        let loss = ce.scale(1.0 - w).unwrap().add(&kl.scale(w * t * t).unwrap()).unwrap();
        let expect = 0.5 * std::f64::consts::LN_2
            + 0.5 * 4.0 * (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln());
        assert!((loss.item().unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn matmul_gradients_match_manual_products() {
        // y = sum(A @ B); dA = ones @ B^T, dB = A^T @ ones
        let a = param(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = param(vec![3, 2], vec![1.0, -1.0, 0.5, 2.0, -2.0, 1.0]);
        a.matmul(&b).unwrap().sum().unwrap().backward().unwrap();
        let da = a.grad().unwrap();
        let db = b.grad().unwrap();
        for r in 0..2 {
            for l in 0..3 {
                let expect = b.to_vec()[l * 2] + b.to_vec()[l * 2 + 1];
                assert!((da[r * 3 + l] - expect).abs() < 1e-12);
            }
        }
        for l in 0..3 {
            for j in 0..2 {
                let expect = a.to_vec()[l] + a.to_vec()[3 + l];
                assert!((db[l * 2 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bmm_matches_unbatched_matmul() {
        let a = param(vec![2, 2, 3], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect());
        let b = param(vec![2, 3, 2], (0..12).map(|i| (i as f64).sin()).collect());
        let out = a.bmm(&b, false).unwrap();
        for g in 0..2 {
            let ag = Tensor::from_vec(vec![2, 3], a.to_vec()[g * 6..(g + 1) * 6].to_vec()).unwrap();
            let bg = Tensor::from_vec(vec![3, 2], b.to_vec()[g * 6..(g + 1) * 6].to_vec()).unwrap();
            let single = ag.matmul(&bg).unwrap().to_vec();
            for (x, y) in out.to_vec()[g * 4..(g + 1) * 4].iter().zip(&single) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let t = Tensor::from_vec(vec![2, 3, 4], (0..24).map(|i| i as f64).collect()).unwrap();
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.to_vec(), t.to_vec());
    }

    #[test]
    fn permute_moves_elements_correctly() {
        // [[1, 2], [3, 4]] transposed
        let t = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let w = param(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let e = Tensor::embedding(&[2, 0, 2], &w).unwrap();
        assert_eq!(e.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        e.sum().unwrap().backward().unwrap();
        // Row 2 used twice, row 0 once, row 1 never.
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_rejects_out_of_vocab_id() {
        let w = param(vec![3, 2], vec![0.0; 6]);
        let err = Tensor::embedding(&[3], &w).unwrap_err();
        assert!(matches!(err, TensorError::IndexOutOfBounds { index: 3, size: 3, .. }));
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let x = param(vec![3], vec![1.0, 2.0, 3.0]);
        let y = x.masked_fill(&[false, true, false], -1e30).unwrap();
        assert_eq!(y.to_vec()[1], -1e30);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn select_rows_picks_positions() {
        let x = param(vec![2, 3, 2], (0..12).map(|i| i as f64).collect());
        let y = x.select_rows(&[2, 0]).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, 5.0, 6.0, 7.0]);
        y.sum().unwrap().backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g[4], 1.0);
        assert_eq!(g[6], 1.0);
        assert_eq!(g.iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn dropout_scales_survivors_and_is_seeded() {
        let x = Tensor::param(vec![1000], vec![1.0; 1000]).unwrap();
        let mut rng = Rng::from_seed(7);
        let y = x.dropout(0.5, &mut rng).unwrap();
        let kept: Vec<f64> = y.to_vec().into_iter().filter(|&v| v != 0.0).collect();
        assert!(kept.iter().all(|&v| v == 2.0));
        let frac = kept.len() as f64 / 1000.0;
        assert!((frac - 0.5).abs() < 0.06, "kept fraction {}", frac);

        let mut rng2 = Rng::from_seed(7);
        let y2 = x.dropout(0.5, &mut rng2).unwrap();
        assert_eq!(y.to_vec(), y2.to_vec());
    }

    #[test]
    fn dropout_rejects_p_of_one() {
        let x = Tensor::param(vec![2], vec![1.0, 1.0]).unwrap();
        let mut rng = Rng::from_seed(0);
        assert!(x.dropout(1.0, &mut rng).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        let x = Tensor::from_vec(vec![3], vec![0.0, 10.0, -10.0]).unwrap();
        let y = x.gelu().unwrap().to_vec();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 10.0).abs() < 1e-9);
        assert!(y[2].abs() < 1e-9);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let x = Tensor::param(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        let gamma = Tensor::param(vec![4], vec![1.0; 4]).unwrap();
        let beta = Tensor::param(vec![4], vec![0.0; 4]).unwrap();
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap().to_vec();
        for row in y.chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn overflowing_op_reports_its_name() {
        let x = Tensor::from_vec(vec![1], vec![1e308]).unwrap();
        let err = x.scale(10.0).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "scale" }));
        let y = Tensor::from_vec(vec![1], vec![1e308]).unwrap();
        let err = x.mul(&y).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "mul" }));
    }
}
