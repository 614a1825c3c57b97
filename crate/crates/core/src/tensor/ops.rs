//! Operations on [`Tensor`]. Each op computes forward values eagerly and
//! registers a closure that maps the output gradient to parent gradients.

use std::ops::Range;

use super::{Element, Node, Tensor};
use crate::error::{CoreError, Result};

fn same_shape<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn sigmoid<E: Element>(z: E) -> E {
    if z >= E::zero() {
        E::one() / (E::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (E::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow for large `|z|`.
pub(crate) fn softplus<E: Element>(z: E) -> E {
    let m = if z > E::zero() { z } else { E::zero() };
    m + (-z.abs()).exp().ln_1p()
}

/// Row-wise max-shifted softmax over a dense `rows x cols` buffer. The
/// exponentiation pass is a pure map so it vectorizes; sums stay in strict
/// order.
fn softmax_rows_inplace<E: Element>(buf: &mut [E], cols: usize) {
    for row in buf.chunks_exact_mut(cols) {
        let max = row.iter().fold(row[0], |acc, &v| if v > acc { v } else { acc });
        for v in row.iter_mut() {
            *v = (*v - max).exp_fast();
        }
        let mut sum = E::zero();
        for &v in row.iter() {
            sum += v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl<E: Element> Node<E> {
    fn grad_slice(&self) -> std::cell::Ref<'_, [E]> {
        std::cell::Ref::map(self.grad.borrow(), |slot| {
            slot.as_deref().expect("output gradient missing in backward closure")
        })
    }
}

impl<E: Element> Tensor<E> {
    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("add", self, rhs)?;
        let values: Vec<E> =
            self.values().iter().zip(rhs.values()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            values,
            self.shape(),
            vec![self.clone(), rhs.clone()],
            Box::new(|node| {
                let g = node.grad_slice();
                for parent in [node.parent(0), node.parent(1)] {
                    parent.accumulate(|buf| {
                        for (b, &gi) in buf.iter_mut().zip(g.iter()) {
                            *b += gi;
                        }
                    });
                }
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("sub", self, rhs)?;
        let values: Vec<E> =
            self.values().iter().zip(rhs.values()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            values,
            self.shape(),
            vec![self.clone(), rhs.clone()],
            Box::new(|node| {
                let g = node.grad_slice();
                node.parent(0).accumulate(|buf| {
                    for (b, &gi) in buf.iter_mut().zip(g.iter()) {
                        *b += gi;
                    }
                });
                node.parent(1).accumulate(|buf| {
                    for (b, &gi) in buf.iter_mut().zip(g.iter()) {
                        *b -= gi;
                    }
                });
            }),
        ))
    }

    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("mul", self, rhs)?;
        let values: Vec<E> =
            self.values().iter().zip(rhs.values()).map(|(&a, &b)| a * b).collect();
        Ok(Tensor::from_op(
            values,
            self.shape(),
            vec![self.clone(), rhs.clone()],
            Box::new(|node| {
                let g = node.grad_slice();
                let (a, b) = (node.parent(0), node.parent(1));
                let bv: Vec<E> = b.values().to_vec();
                a.accumulate(|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                let av: Vec<E> = a.values().to_vec();
                b.accumulate(|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }),
        ))
    }

    pub fn scale(&self, factor: E) -> Tensor<E> {
        let values: Vec<E> = self.values().iter().map(|&a| a * factor).collect();
        Tensor::from_op(
            values,
            self.shape(),
            vec![self.clone()],
            Box::new(move |node| {
                let g = node.grad_slice();
                node.parent(0).accumulate(|buf| {
                    for (b, &gi) in buf.iter_mut().zip(g.iter()) {
                        *b += gi * factor;
                    }
                });
            }),
        )
    }

    /// Broadcast add of a row block: `self` is `(r·t) x d`, `rhs` is `t x d`,
    /// and row `i` of the output is `self[i] + rhs[i mod t]`. Covers bias
    /// addition (`t = 1`) and positional embeddings (`t` = tokens per
    /// sample).
    pub fn add_rows(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, d) = self.shape();
        let (t, d2) = rhs.shape();
        if d != d2 || t == 0 || m % t != 0 {
            return Err(CoreError::shape(
                "add_rows",
                format!("lhs {:?} rhs {:?}", self.shape(), rhs.shape()),
            ));
        }
        let rv = rhs.values();
        let values: Vec<E> = self
            .values()
            .chunks_exact(d)
            .enumerate()
            .flat_map(|(i, row)| {
                let p = (i % t) * d;
                row.iter().zip(&rv[p..p + d]).map(|(&a, &b)| a + b).collect::<Vec<E>>()
            })
            .collect();
        Ok(Tensor::from_op(
            values,
            (m, d),
            vec![self.clone(), rhs.clone()],
            Box::new(move |node| {
                let g = node.grad_slice();
                node.parent(0).accumulate(|buf| {
                    for (b, &gi) in buf.iter_mut().zip(g.iter()) {
                        *b += gi;
                    }
                });
                node.parent(1).accumulate(|buf| {
                    for (i, row) in g.chunks_exact(d).enumerate() {
                        let p = (i % t) * d;
                        for (j, &gi) in row.iter().enumerate() {
                            buf[p + j] += gi;
                        }
                    }
                });
            }),
        ))
    }

    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, k) = self.shape();
        let (k2, n) = rhs.shape();
        if k != k2 {
            return Err(CoreError::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let mut values = vec![E::zero(); m * n];
        E::gemm(
            m,
            k,
            n,
            self.values(),
            k as isize,
            1,
            rhs.values(),
            n as isize,
            1,
            E::zero(),
            &mut values,
        );
        Ok(Tensor::from_op(
            values,
            (m, n),
            vec![self.clone(), rhs.clone()],
            Box::new(move |node| {
                let g = node.grad_slice();
                let (a, b) = (node.parent(0), node.parent(1));
                // dA += G · B^T, expressed through strides on B.
                let bv: Vec<E> = b.values().to_vec();
                a.accumulate(|buf| {
                    E::gemm(m, n, k, &g, n as isize, 1, &bv, 1, n as isize, E::one(), buf);
                });
                // dB += A^T · G.
                let av: Vec<E> = a.values().to_vec();
                b.accumulate(|buf| {
                    E::gemm(k, m, n, &av, 1, k as isize, &g, n as isize, 1, E::one(), buf);
                });
            }),
        ))
    }

    /// Multi-head self-attention over a packed `qkv` matrix, fused into a
    /// single graph node.
    ///
    /// `self` is `(batch · t, 3 · heads · head_dim)`: each sample occupies a
    /// contiguous block of `t` rows and the columns hold `[q | k | v]`, each
    /// `heads · head_dim` wide in head-major order. For every sample and
    /// head this computes `softmax(scale · q kᵀ) v` and writes the result
    /// into the matching columns of the `(batch · t, heads · head_dim)`
    /// output. One node replaces the per-sample, per-head chain of slice,
    /// matmul, scale, softmax and concat ops, which keeps the graph small
    /// and the buffers cache-resident; the attention probabilities are kept
    /// for the backward pass.
    pub fn multi_head_attention(
        &self,
        batch: usize,
        heads: usize,
        head_dim: usize,
        scale: E,
    ) -> Result<Tensor<E>> {
        let (rows, cols) = self.shape();
        let d = heads * head_dim;
        if batch == 0 || heads == 0 || head_dim == 0 {
            return Err(CoreError::invalid("attention", "zero batch, heads or head_dim"));
        }
        if rows % batch != 0 || rows == 0 {
            return Err(CoreError::shape(
                "attention",
                format!("{rows} rows do not split into {batch} samples"),
            ));
        }
        if cols != 3 * d {
            return Err(CoreError::shape(
                "attention",
                format!("{cols} columns, expected 3 * {heads} * {head_dim}"),
            ));
        }
        let t = rows / batch;
        let qv = self.values();
        let mut out = vec![E::zero(); rows * d];
        let mut probs = vec![E::zero(); batch * heads * t * t];
        let mut head_out = vec![E::zero(); t * head_dim];
        for s in 0..batch {
            let base = s * t * cols;
            for h in 0..heads {
                let q_off = base + h * head_dim;
                let k_off = base + d + h * head_dim;
                let v_off = base + 2 * d + h * head_dim;
                let a = &mut probs[(s * heads + h) * t * t..][..t * t];
                E::gemm(
                    t,
                    head_dim,
                    t,
                    &qv[q_off..],
                    cols as isize,
                    1,
                    &qv[k_off..],
                    1,
                    cols as isize,
                    E::zero(),
                    a,
                );
                for v in a.iter_mut() {
                    *v = *v * scale;
                }
                softmax_rows_inplace(a, t);
                E::gemm(
                    t,
                    t,
                    head_dim,
                    a,
                    t as isize,
                    1,
                    &qv[v_off..],
                    cols as isize,
                    1,
                    E::zero(),
                    &mut head_out,
                );
                for i in 0..t {
                    let dst = (s * t + i) * d + h * head_dim;
                    out[dst..dst + head_dim]
                        .copy_from_slice(&head_out[i * head_dim..(i + 1) * head_dim]);
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            (rows, d),
            vec![self.clone()],
            Box::new(move |node| {
                let g = node.grad_slice();
                let parent = node.parent(0);
                let pv: Vec<E> = parent.values().to_vec();
                parent.accumulate(|buf| {
                    let mut da = vec![E::zero(); t * t];
                    let mut tmp = vec![E::zero(); t * head_dim];
                    let add_strided = |buf: &mut [E], off: usize, tmp: &[E]| {
                        for i in 0..t {
                            let dst = off + i * cols;
                            for j in 0..head_dim {
                                buf[dst + j] += tmp[i * head_dim + j];
                            }
                        }
                    };
                    for s in 0..batch {
                        let base = s * t * cols;
                        for h in 0..heads {
                            let q_off = base + h * head_dim;
                            let k_off = base + d + h * head_dim;
                            let v_off = base + 2 * d + h * head_dim;
                            let g_off = s * t * d + h * head_dim;
                            let a = &probs[(s * heads + h) * t * t..][..t * t];
                            // dV = Aᵀ · dOut.
                            E::gemm(
                                t,
                                t,
                                head_dim,
                                a,
                                1,
                                t as isize,
                                &g[g_off..],
                                d as isize,
                                1,
                                E::zero(),
                                &mut tmp,
                            );
                            add_strided(buf, v_off, &tmp);
                            // dA = dOut · Vᵀ.
                            E::gemm(
                                t,
                                head_dim,
                                t,
                                &g[g_off..],
                                d as isize,
                                1,
                                &pv[v_off..],
                                1,
                                cols as isize,
                                E::zero(),
                                &mut da,
                            );
                            // Softmax backward, folding in the logit scale:
                            // dL_ij = scale · a_ij · (dA_ij − Σ_k dA_ik a_ik).
                            for i in 0..t {
                                let row = &mut da[i * t..(i + 1) * t];
                                let arow = &a[i * t..(i + 1) * t];
                                let mut dot = E::zero();
                                for j in 0..t {
                                    dot += row[j] * arow[j];
                                }
                                for j in 0..t {
                                    row[j] = scale * arow[j] * (row[j] - dot);
                                }
                            }
                            // dQ = dL · K.
                            E::gemm(
                                t,
                                t,
                                head_dim,
                                &da,
                                t as isize,
                                1,
                                &pv[k_off..],
                                cols as isize,
                                1,
                                E::zero(),
                                &mut tmp,
                            );
                            add_strided(buf, q_off, &tmp);
                            // dK = dLᵀ · Q.
                            E::gemm(
                                t,
                                t,
                                head_dim,
                                &da,
                                1,
                                t as isize,
                                &pv[q_off..],
                                cols as isize,
                                1,
                                E::zero(),
                                &mut tmp,
                            );
                            add_strided(buf, k_off, &tmp);
                        }
                    }
                });
            }),
        ))
    }

    pub fn transpose(&self) -> Tensor<E> {
        let (m, n) = self.shape();
        let v = self.values();
        let mut values = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = v[i * n + j];
            }
        }
        Tensor::from_op(
            values,
            (n, m),
            vec![self.clone()],
            Box::new(move |node| {
                let g = node.grad_slice();
                node.parent(0).accumulate(|buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[j * n + i] += g[i * m + j];
                        }
                    }
                });
            }),
        )
    }

    /// GELU with the tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self) -> Tensor<E> {
        let c = E::from_f64(0.797_884_560_802_865_4);
        let a = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let values: Vec<E> = self
            .values()
            .iter()
            .map(|&x| {
                let u = c * (x + a * x * x * x);
                half * x * (E::one() + u.tanh_fast())
            })
            .collect();
        Tensor::from_op(
            values,
            self.shape(),
            vec![self.clone()],
            Box::new(move |node| {
                let g = node.grad_slice();
                let parent = node.parent(0);
                let xv: Vec<E> = parent.values().to_vec();
                parent.accumulate(|buf| {
                    let three = E::from_f64(3.0);
                    for i in 0..buf.len() {
                        let x = xv[i];
                        let u = c * (x + a * x * x * x);
                        let t = u.tanh_fast();
                        let sech2 = E::one() - t * t;
                        let du = c * (E::one() + three * a * x * x);
                        let dy = half * (E::one() + t) + half * x * sech2 * du;
                        buf[i] += g[i] * dy;
                    }
                });
            }),
        )
    }

    /// Layer normalisation over the last dimension with learnable scale and
    /// shift. `gamma` and `beta` are `1 x d`; variance is the biased estimate.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: E) -> Result<Tensor<E>> {
        let (m, d) = self.shape();
        if gamma.shape() != (1, d) || beta.shape() != (1, d) {
            return Err(CoreError::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    self.shape(),
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        if d == 0 {
            return Err(CoreError::shape("layer_norm", "zero-width input"));
        }
        let gv = gamma.values();
        let bv = beta.values();
        let inv_d = E::one() / E::from_f64(d as f64);
        let mut values = vec![E::zero(); m * d];
        for (i, row) in self.values().chunks_exact(d).enumerate() {
            let mean = row.iter().fold(E::zero(), |s, &x| s + x) * inv_d;
            let var = row.iter().fold(E::zero(), |s, &x| s + (x - mean) * (x - mean)) * inv_d;
            let inv_std = E::one() / (var + eps).sqrt();
            for j in 0..d {
                values[i * d + j] = gv[j] * (row[j] - mean) * inv_std + bv[j];
            }
        }
        Ok(Tensor::from_op(
            values,
            (m, d),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |node| {
                let g = node.grad_slice();
                let x = node.parent(0);
                let xv: Vec<E> = x.values().to_vec();
                let gamma_v: Vec<E> = node.parent(1).values().to_vec();
                let inv_d = E::one() / E::from_f64(d as f64);
                // Per-row statistics are recomputed; they are cheap relative
                // to storing normalised activations for every node.
                let mut xhat = vec![E::zero(); m * d];
                let mut inv_std_rows = vec![E::zero(); m];
                for (i, row) in xv.chunks_exact(d).enumerate() {
                    let mean = row.iter().fold(E::zero(), |s, &v| s + v) * inv_d;
                    let var =
                        row.iter().fold(E::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_d;
                    let inv_std = E::one() / (var + eps).sqrt();
                    inv_std_rows[i] = inv_std;
                    for j in 0..d {
                        xhat[i * d + j] = (row[j] - mean) * inv_std;
                    }
                }
                node.parent(1).accumulate(|buf| {
                    for i in 0..m {
                        for j in 0..d {
                            buf[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                node.parent(2).accumulate(|buf| {
                    for i in 0..m {
                        for j in 0..d {
                            buf[j] += g[i * d + j];
                        }
                    }
                });
                x.accumulate(|buf| {
                    for i in 0..m {
                        let mut m1 = E::zero();
                        let mut m2 = E::zero();
                        for j in 0..d {
                            let h = gamma_v[j] * g[i * d + j];
                            m1 += h;
                            m2 += h * xhat[i * d + j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let h = gamma_v[j] * g[i * d + j];
                            buf[i * d + j] += (h - m1 - xhat[i * d + j] * m2) * inv_std_rows[i];
                        }
                    }
                });
            }),
        ))
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax_t(&self, temperature: E) -> Result<Tensor<E>> {
        if temperature <= E::zero() {
            return Err(CoreError::invalid("softmax temperature", format!("{temperature}")));
        }
        let (m, d) = self.shape();
        if d == 0 {
            return Err(CoreError::shape("softmax_t", "zero-width input"));
        }
        let mut values = vec![E::zero(); m * d];
        for (i, row) in self.values().chunks_exact(d).enumerate() {
            let max = row.iter().fold(row[0], |acc, &v| if v > acc { v } else { acc });
            let out = &mut values[i * d..(i + 1) * d];
            // Exponentiate in a separate pass so the loop is a pure map the
            // compiler can vectorize; the summation stays a strict-order
            // scalar reduction.
            for (o, &v) in out.iter_mut().zip(row) {
                *o = ((v - max) / temperature).exp_fast();
            }
            let mut sum = E::zero();
            for &o in out.iter() {
                sum += o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        Ok(Tensor::from_op(
            values,
            (m, d),
            vec![self.clone()],
            Box::new(move |node| {
                let g = node.grad_slice();
                let y: Vec<E> = node.values().to_vec();
                node.parent(0).accumulate(|buf| {
                    for i in 0..m {
                        let mut dot = E::zero();
                        for j in 0..d {
                            dot += g[i * d + j] * y[i * d + j];
                        }
                        for j in 0..d {
                            buf[i * d + j] +=
                                (g[i * d + j] - dot) * y[i * d + j] / temperature;
                        }
                    }
                });
            }),
        ))
    }

    /// Row-wise `log(softmax(x / temperature))`.
    pub fn log_softmax_t(&self, temperature: E) -> Result<Tensor<E>> {
        if temperature <= E::zero() {
            return Err(CoreError::invalid("softmax temperature", format!("{temperature}")));
        }
        let (m, d) = self.shape();
        if d == 0 {
            return Err(CoreError::shape("log_softmax_t", "zero-width input"));
        }
        let mut values = vec![E::zero(); m * d];
        for (i, row) in self.values().chunks_exact(d).enumerate() {
            let max = row.iter().fold(row[0], |acc, &v| if v > acc { v } else { acc });
            let out = &mut values[i * d..(i + 1) * d];
            // Same split as `softmax_t`: a vectorizable exponentiation pass
            // into the output buffer, then a strict-order sum. The buffer is
            // overwritten with the actual log-probabilities afterwards.
            for (o, &v) in out.iter_mut().zip(row) {
                *o = ((v - max) / temperature).exp_fast();
            }
            let mut sum = E::zero();
            for &o in out.iter() {
                sum += o;
            }
            let lse = sum.ln() + max / temperature;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = v / temperature - lse;
            }
        }
        Ok(Tensor::from_op(
            values,
            (m, d),
            vec![self.clone()],
            Box::new(move |node| {
                let g = node.grad_slice();
                let logp: Vec<E> = node.values().to_vec();
                node.parent(0).accumulate(|buf| {
                    for i in 0..m {
                        let mut gsum = E::zero();
                        for j in 0..d {
                            gsum += g[i * d + j];
                        }
                        for j in 0..d {
                            let p = logp[i * d + j].exp_fast();
                            buf[i * d + j] += (g[i * d + j] - p * gsum) / temperature;
                        }
                    }
                });
            }),
        ))
    }

    /// Elementwise natural log; errors on non-positive inputs.
    pub fn ln(&self) -> Result<Tensor<E>> {
        if self.values().iter().any(|&v| v <= E::zero()) {
            return Err(CoreError::invalid("ln", "input has non-positive entries"));
        }
        let values: Vec<E> = self.values().iter().map(|&v| v.ln()).collect();
        Ok(Tensor::from_op(
            values,
            self.shape(),
            vec![self.clone()],
            Box::new(|node| {
                let g = node.grad_slice();
                let parent = node.parent(0);
                let xv: Vec<E> = parent.values().to_vec();
                parent.accumulate(|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / xv[i];
                    }
                });
            }),
        ))
    }

    pub fn exp(&self) -> Tensor<E> {
        let values: Vec<E> = self.values().iter().map(|&v| v.exp()).collect();
        Tensor::from_op(
            values,
            self.shape(),
            vec![self.clone()],
            Box::new(|node| {
                let g = node.grad_slice();
                let y: Vec<E> = node.values().to_vec();
                node.parent(0).accumulate(|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * y[i];
                    }
                });
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let total = self.values().iter().fold(E::zero(), |s, &v| s + v);
        Tensor::from_op(
            vec![total],
            (1, 1),
            vec![self.clone()],
            Box::new(|node| {
                let g = node.grad_slice()[0];
                node.parent(0).accumulate(|buf| {
                    for b in buf.iter_mut() {
                        *b += g;
                    }
                });
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = E::from_f64(self.len() as f64);
        let total = self.values().iter().fold(E::zero(), |s, &v| s + v);
        Tensor::from_op(
            vec![total / n],
            (1, 1),
            vec![self.clone()],
            Box::new(move |node| {
                let g = node.grad_slice()[0] / n;
                node.parent(0).accumulate(|buf| {
                    for b in buf.iter_mut() {
                        *b += g;
                    }
                });
            }),
        )
    }

    /// Sum over columns: `m x n` to `m x 1`.
    pub fn row_sum(&self) -> Tensor<E> {
        let (m, n) = self.shape();
        let values: Vec<E> = self
            .values()
            .chunks_exact(n.max(1))
            .map(|row| row.iter().fold(E::zero(), |s, &v| s + v))
            .collect();
        Tensor::from_op(
            values,
            (m, 1),
            vec![self.clone()],
            Box::new(move |node| {
                let g = node.grad_slice();
                node.parent(0).accumulate(|buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[i];
                        }
                    }
                });
            }),
        )
    }

    pub fn concat_rows(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(CoreError::shape("concat_rows", "no inputs"));
        }
        let d = parts[0].cols();
        if parts.iter().any(|p| p.cols() != d) {
            return Err(CoreError::shape("concat_rows", "column counts differ"));
        }
        let total_rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut values = Vec::with_capacity(total_rows * d);
        for p in parts {
            values.extend_from_slice(p.values());
        }
        let row_starts: Vec<usize> = parts
            .iter()
            .scan(0usize, |acc, p| {
                let s = *acc;
                *acc += p.rows();
                Some(s)
            })
            .collect();
        Ok(Tensor::from_op(
            values,
            (total_rows, d),
            parts.to_vec(),
            Box::new(move |node| {
                let g = node.grad_slice();
                for (pi, &start) in row_starts.iter().enumerate() {
                    let parent = node.parent(pi);
                    let rows = parent.rows();
                    parent.accumulate(|buf| {
                        let src = &g[start * d..(start + rows) * d];
                        for (b, &gi) in buf.iter_mut().zip(src) {
                            *b += gi;
                        }
                    });
                }
            }),
        ))
    }

    pub fn concat_cols(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(CoreError::shape("concat_cols", "no inputs"));
        }
        let m = parts[0].rows();
        if parts.iter().any(|p| p.rows() != m) {
            return Err(CoreError::shape("concat_cols", "row counts differ"));
        }
        let total_cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut values = vec![E::zero(); m * total_cols];
        let mut col_starts = Vec::with_capacity(parts.len());
        let mut start = 0usize;
        for p in parts {
            col_starts.push(start);
            let w = p.cols();
            let pv = p.values();
            for i in 0..m {
                values[i * total_cols + start..i * total_cols + start + w]
                    .copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            start += w;
        }
        Ok(Tensor::from_op(
            values,
            (m, total_cols),
            parts.to_vec(),
            Box::new(move |node| {
                let g = node.grad_slice();
                for (pi, &start) in col_starts.iter().enumerate() {
                    let parent = node.parent(pi);
                    let w = parent.cols();
                    parent.accumulate(|buf| {
                        for i in 0..m {
                            for j in 0..w {
                                buf[i * w + j] += g[i * total_cols + start + j];
                            }
                        }
                    });
                }
            }),
        ))
    }

    /// Contiguous block copy of the given row and column ranges.
    pub fn slice(&self, rows: Range<usize>, cols: Range<usize>) -> Result<Tensor<E>> {
        let (m, n) = self.shape();
        if rows.start >= rows.end || cols.start >= cols.end || rows.end > m || cols.end > n {
            return Err(CoreError::shape(
                "slice",
                format!("rows {rows:?}, cols {cols:?} of {:?}", self.shape()),
            ));
        }
        let (r0, r1, c0, c1) = (rows.start, rows.end, cols.start, cols.end);
        let (h, w) = (r1 - r0, c1 - c0);
        let v = self.values();
        let mut values = Vec::with_capacity(h * w);
        for i in r0..r1 {
            values.extend_from_slice(&v[i * n + c0..i * n + c1]);
        }
        Ok(Tensor::from_op(
            values,
            (h, w),
            vec![self.clone()],
            Box::new(move |node| {
                let g = node.grad_slice();
                node.parent(0).accumulate(|buf| {
                    for i in 0..h {
                        for j in 0..w {
                            buf[(r0 + i) * n + c0 + j] += g[i * w + j];
                        }
                    }
                });
            }),
        ))
    }

    pub fn slice_rows(&self, rows: Range<usize>) -> Result<Tensor<E>> {
        let cols = self.cols();
        self.slice(rows, 0..cols)
    }

    /// Same values, new shape with identical element count.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor<E>> {
        if rows * cols != self.len() {
            return Err(CoreError::shape(
                "reshape",
                format!("{:?} to ({rows}, {cols})", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            self.values().to_vec(),
            (rows, cols),
            vec![self.clone()],
            Box::new(|node| {
                let g = node.grad_slice();
                node.parent(0).accumulate(|buf| {
                    for (b, &gi) in buf.iter_mut().zip(g.iter()) {
                        *b += gi;
                    }
                });
            }),
        ))
    }

    /// Row-wise `x / max(‖x‖₂, eps)`.
    pub fn row_l2_normalize(&self, eps: E) -> Tensor<E> {
        let (m, d) = self.shape();
        let mut values = vec![E::zero(); m * d];
        let mut denoms = vec![E::zero(); m];
        for (i, row) in self.values().chunks_exact(d.max(1)).enumerate() {
            let norm = row.iter().fold(E::zero(), |s, &v| s + v * v).sqrt();
            let denom = if norm > eps { norm } else { eps };
            denoms[i] = denom;
            for j in 0..d {
                values[i * d + j] = row[j] / denom;
            }
        }
        Tensor::from_op(
            values,
            (m, d),
            vec![self.clone()],
            Box::new(move |node| {
                let g = node.grad_slice();
                let parent = node.parent(0);
                let xv: Vec<E> = parent.values().to_vec();
                let eps_local = eps;
                parent.accumulate(|buf| {
                    for i in 0..m {
                        let row = &xv[i * d..(i + 1) * d];
                        let norm = row.iter().fold(E::zero(), |s, &v| s + v * v).sqrt();
                        if norm > eps_local {
                            let mut dot = E::zero();
                            for j in 0..d {
                                dot += g[i * d + j] * row[j];
                            }
                            let inv = E::one() / norm;
                            let inv3 = inv * inv * inv;
                            for j in 0..d {
                                buf[i * d + j] += g[i * d + j] * inv - row[j] * dot * inv3;
                            }
                        } else {
                            // Below the guard the denominator is the constant eps.
                            for j in 0..d {
                                buf[i * d + j] += g[i * d + j] / eps_local;
                            }
                        }
                    }
                });
            }),
        )
    }

    /// Mean-reduced binary cross-entropy on logits with a per-class positive
    /// weight, computed in the fused stable form
    /// `w·y·softplus(-x) + (1-y)·softplus(x)`.
    ///
    /// `targets` must match the logit shape with entries exactly 0 or 1;
    /// `pos_weight` is `1 x C`. Both must be constants: the gradient is
    /// defined with respect to the logits only.
    pub fn weighted_bce_mean(
        &self,
        targets: &Tensor<E>,
        pos_weight: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let (m, c) = self.shape();
        same_shape("weighted_bce_mean", self, targets)?;
        if pos_weight.shape() != (1, c) {
            return Err(CoreError::shape(
                "weighted_bce_mean",
                format!("pos_weight {:?} for {c} classes", pos_weight.shape()),
            ));
        }
        if targets.needs_grad() || pos_weight.needs_grad() {
            return Err(CoreError::invalid(
                "weighted_bce_mean",
                "targets and pos_weight must be constants",
            ));
        }
        if targets.values().iter().any(|&t| !(t == E::zero() || t == E::one())) {
            return Err(CoreError::invalid(
                "weighted_bce_mean",
                "targets must be exactly 0 or 1",
            ));
        }
        let w = pos_weight.values().to_vec();
        let y = targets.values().to_vec();
        let x = self.values();
        let count = E::from_f64((m * c) as f64);
        let mut total = E::zero();
        for i in 0..m {
            for j in 0..c {
                let idx = i * c + j;
                total += w[j] * y[idx] * softplus(-x[idx])
                    + (E::one() - y[idx]) * softplus(x[idx]);
            }
        }
        Ok(Tensor::from_op(
            vec![total / count],
            (1, 1),
            vec![self.clone()],
            Box::new(move |node| {
                let g = node.grad_slice()[0];
                let parent = node.parent(0);
                let xv: Vec<E> = parent.values().to_vec();
                parent.accumulate(|buf| {
                    for i in 0..m {
                        for j in 0..c {
                            let idx = i * c + j;
                            let d = (E::one() - y[idx]) * sigmoid(xv[idx])
                                - w[j] * y[idx] * sigmoid(-xv[idx]);
                            buf[idx] += g * d / count;
                        }
                    }
                });
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(values: &[f64], rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::leaf(values.to_vec(), rows, cols).unwrap()
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3);
        let b = t64(&[7.0, 8.0, 9.0, 10.0, 11.0, 12.0], 3, 2);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.values(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_backward_shapes_and_values() {
        // s = sum(A·B) with A = ones(1,2), B = [[1],[2]]: ds/dA = B^T, ds/dB = A^T.
        let a = t64(&[1.0, 1.0], 1, 2);
        let b = t64(&[1.0, 2.0], 2, 1);
        let s = a.matmul(&b).unwrap().sum_all();
        s.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn softmax_known_value() {
        // softmax([1, 0] / 0.5) = [0.8808, 0.1192] to 4 decimals.
        let x = t64(&[1.0, 0.0], 1, 2);
        let y = x.softmax_t(0.5).unwrap();
        let v = y.values();
        assert!((v[0] - 0.8808).abs() < 5e-5, "got {}", v[0]);
        assert!((v[1] - 0.1192).abs() < 5e-5, "got {}", v[1]);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t64(&[5.0, -3.0, 0.5, 2.0, 2.0, 2.0], 2, 3);
        let y = x.softmax_t(0.07).unwrap();
        for row in y.values().chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_is_log_of_softmax() {
        let x = t64(&[0.3, -1.2, 4.0, 0.0], 1, 4);
        let a = x.softmax_t(0.1).unwrap();
        let b = x.log_softmax_t(0.1).unwrap();
        for (pa, lb) in a.values().iter().zip(b.values()) {
            assert!((pa.ln() - lb).abs() < 1e-10);
        }
    }

    #[test]
    fn weighted_bce_known_value() {
        // Single logit 0, target 1, weight 4: loss = 4·ln 2.
        let x = t64(&[0.0], 1, 1);
        let y = Tensor::constant(vec![1.0], 1, 1).unwrap();
        let w = Tensor::constant(vec![4.0], 1, 1).unwrap();
        let loss = x.weighted_bce_mean(&y, &w).unwrap();
        assert!((loss.item() - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss.item() - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn weighted_bce_rejects_soft_targets() {
        let x = t64(&[0.0], 1, 1);
        let y = Tensor::constant(vec![0.5], 1, 1).unwrap();
        let w = Tensor::constant(vec![1.0], 1, 1).unwrap();
        assert!(x.weighted_bce_mean(&y, &w).is_err());
    }

    #[test]
    fn weighted_bce_gradient_formula() {
        let x = t64(&[0.7, -1.3, 0.0, 2.0], 2, 2);
        let y = Tensor::constant(vec![1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
        let w = Tensor::constant(vec![3.0, 0.5], 1, 2).unwrap();
        let loss = x.weighted_bce_mean(&y, &w).unwrap();
        loss.backward().unwrap();
        let grad = x.grad().unwrap();
        let expect = |x: f64, y: f64, w: f64| {
            ((1.0 - y) * sigmoid(x) - w * y * sigmoid(-x)) / 4.0
        };
        let xs = [0.7, -1.3, 0.0, 2.0];
        let ys = [1.0, 0.0, 0.0, 1.0];
        let ws = [3.0, 0.5, 3.0, 0.5];
        for i in 0..4 {
            assert!((grad[i] - expect(xs[i], ys[i], ws[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_normalises_rows() {
        let x = t64(&[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0], 2, 4);
        let gamma = Tensor::constant(vec![1.0; 4], 1, 4).unwrap();
        let beta = Tensor::constant(vec![0.0; 4], 1, 4).unwrap();
        let y = x.layer_norm(&gamma, &beta, 1e-12).unwrap();
        for row in y.values().chunks_exact(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let x = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2);
        let top = x.slice_rows(0..1).unwrap();
        let rest = x.slice_rows(1..3).unwrap();
        let back = Tensor::concat_rows(&[top, rest]).unwrap();
        assert_eq!(back.values(), x.values());
        let s = back.sum_all();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn concat_cols_layout() {
        let a = t64(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        let b = t64(&[5.0, 6.0], 2, 1);
        let c = Tensor::concat_cols(&[a, b]).unwrap();
        assert_eq!(c.shape(), (2, 3));
        assert_eq!(c.values(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    }

    #[test]
    fn add_rows_broadcasts_per_block() {
        let x = t64(&[0.0; 8], 4, 2);
        let pos = t64(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        let y = x.add_rows(&pos).unwrap();
        assert_eq!(y.values(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let s = y.sum_all();
        s.backward().unwrap();
        assert_eq!(pos.grad().unwrap(), vec![2.0; 4]);
    }

    #[test]
    fn row_l2_normalize_unit_norms() {
        let x = t64(&[3.0, 4.0, 0.0, 0.0], 2, 2);
        let y = x.row_l2_normalize(1e-6);
        assert!((y.values()[0] - 0.6).abs() < 1e-12);
        assert!((y.values()[1] - 0.8).abs() < 1e-12);
        // Zero row falls back to the epsilon denominator.
        assert_eq!(&y.values()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let x = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3);
        let yt = x.transpose();
        assert_eq!(yt.shape(), (3, 2));
        assert_eq!(yt.values(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let s = yt.transpose().mul(&x).unwrap().sum_all();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    }
}
