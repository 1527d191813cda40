use std::rc::Rc;

use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, Ix2};

use super::elementwise::channel_dims;
use super::{flat, from_vec};
use crate::{lit, Scalar, Var};

/// Per-channel statistics observed by a batch-norm forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
}

fn as2<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("expected a matrix")
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Row-wise layer normalization of `[n, d]` with affine `gamma`, `beta` of length `d`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Var<'t, T> {
        let x = self.value();
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let gv = gamma.value();
        let bv = beta.value();
        let (gs, bs) = (flat(&gv), flat(&bv));
        let dt: T = lit(d as f64);
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for (r, row) in flat(&x).chunks(d).enumerate() {
            let mu = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gs[j] + bs[j];
            }
        }
        let (ix, ig, ib) = (self.id, gamma.id, beta.id);
        self.tape.push(from_vec(&[n, d], out), &[self, gamma, beta], move |g, grads| {
            let gs_out = flat(g);
            let gamma_s = flat(&gv);
            if grads.wants(ig) || grads.wants(ib) {
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for r in 0..n {
                    for j in 0..d {
                        gg[j] += gs_out[r * d + j] * xhat[r * d + j];
                        gb[j] += gs_out[r * d + j];
                    }
                }
                grads.accumulate(ig, from_vec(&[d], gg));
                grads.accumulate(ib, from_vec(&[d], gb));
            }
            if grads.wants(ix) {
                let mut gx = vec![T::zero(); n * d];
                for r in 0..n {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let gh = gs_out[r * d + j] * gamma_s[j];
                        m1 += gh;
                        m2 += gh * xhat[r * d + j];
                    }
                    m1 = m1 / dt;
                    m2 = m2 / dt;
                    for j in 0..d {
                        let gh = gs_out[r * d + j] * gamma_s[j];
                        gx[r * d + j] = inv_std[r] * (gh - m1 - xhat[r * d + j] * m2);
                    }
                }
                grads.accumulate(ix, from_vec(&[n, d], gx));
            }
        })
    }

    /// Multi-head scaled dot-product attention over `[n, d]` projections with
    /// an optional additive logit bias of shape `[heads, n, n]`.
    ///
    /// Returns the `[n, d]` output and the `[heads, n, n]` attention weights.
    pub fn attention(
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        heads: usize,
    ) -> (Var<'t, T>, Rc<Array3<T>>) {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let (n, d) = (qv.shape()[0], qv.shape()[1]);
        assert!(heads > 0 && d % heads == 0, "hidden size must divide into heads");
        let dh = d / heads;
        let scale: T = T::one() / lit::<T>(dh as f64).sqrt();
        let bias_v = bias.map(|b| b.value());
        if let Some(b) = &bias_v {
            assert_eq!(b.shape(), &[heads, n, n], "attention bias must be [heads, n, n]");
        }
        let (q2, k2, v2) = (as2(&qv), as2(&kv), as2(&vv));
        let mut probs = Array3::<T>::zeros((heads, n, n));
        let mut out = Array2::<T>::zeros((n, d));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut logits = q2.slice(cols).dot(&k2.slice(cols).t()) * scale;
            if let Some(b) = &bias_v {
                let b3 = b.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                logits += &b3.slice(s![h, .., ..]);
            }
            for (i, row) in logits.rows_mut().into_iter().enumerate() {
                let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut z = T::zero();
                for &x in row.iter() {
                    z += (x - m).exp();
                }
                for (j, &x) in row.iter().enumerate() {
                    probs[[h, i, j]] = (x - m).exp() / z;
                }
            }
            let ph = probs.slice(s![h, .., ..]);
            out.slice_mut(cols).assign(&ph.dot(&v2.slice(cols)));
        }
        let probs = Rc::new(probs);
        let saved = probs.clone();
        let mut parents = vec![q, k, v];
        if let Some(b) = bias {
            parents.push(b);
        }
        let (iq, ik, iv) = (q.id, k.id, v.id);
        let ibias = bias.map(|b| b.id);
        let var = q.tape.push(out.into_dyn(), &parents, move |g, grads| {
            let g2 = as2(g);
            let (q2, k2, v2) = (as2(&qv), as2(&kv), as2(&vv));
            let mut gq = Array2::<T>::zeros((n, d));
            let mut gk = Array2::<T>::zeros((n, d));
            let mut gv = Array2::<T>::zeros((n, d));
            let mut gb = Array3::<T>::zeros((heads, n, n));
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let p = saved.slice(s![h, .., ..]);
                let go = g2.slice(cols);
                gv.slice_mut(cols).assign(&p.t().dot(&go));
                let gp = go.dot(&v2.slice(cols).t());
                let mut gs = Array2::<T>::zeros((n, n));
                for i in 0..n {
                    let dot: T = (0..n).map(|j| gp[[i, j]] * p[[i, j]]).sum();
                    for j in 0..n {
                        gs[[i, j]] = p[[i, j]] * (gp[[i, j]] - dot);
                    }
                }
                gb.slice_mut(s![h, .., ..]).assign(&gs);
                gq.slice_mut(cols).assign(&(gs.dot(&k2.slice(cols)) * scale));
                gk.slice_mut(cols).assign(&(gs.t().dot(&q2.slice(cols)) * scale));
            }
            grads.accumulate(iq, gq.into_dyn());
            grads.accumulate(ik, gk.into_dyn());
            grads.accumulate(iv, gv.into_dyn());
            if let Some(ib) = ibias {
                grads.accumulate(ib, gb.into_dyn());
            }
        });
        (var, probs)
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'t, T> {
        let z = self.value();
        let (b, k) = (z.shape()[0], z.shape()[1]);
        assert_eq!(labels.len(), b, "one label per row");
        let bt: T = lit(b as f64);
        let mut soft = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for (r, row) in flat(&z).chunks(k).enumerate() {
            let y = labels[r];
            assert!(y < k, "label {y} out of range for {k} classes");
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let zsum: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + zsum.ln();
            loss += lse - row[y];
            for j in 0..k {
                soft[r * k + j] = (row[j] - m).exp() / zsum;
            }
        }
        let labels = labels.to_vec();
        let id = self.id;
        self.tape.push(
            ndarray::arr0(loss / bt).into_dyn(),
            &[self],
            move |g, grads| {
                let gv = *g.iter().next().unwrap() / bt;
                let mut gz = soft.clone();
                for (r, &y) in labels.iter().enumerate() {
                    gz[r * k + y] -= T::one();
                }
                for v in &mut gz {
                    *v *= gv;
                }
                grads.accumulate(id, from_vec(&[b, k], gz));
            },
        )
    }

    /// Batch normalization without affine terms, using the statistics of this
    /// batch over every axis except 1.
    pub fn batch_norm(self, eps: T) -> (Var<'t, T>, BatchStats<T>) {
        let x = self.value();
        let (batch, c, inner) = channel_dims(x.shape());
        let count = batch * inner;
        let ct: T = lit(count as f64);
        let xs = flat(&x);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..batch {
            for ci in 0..c {
                let start = (bi * c + ci) * inner;
                mean[ci] += xs[start..start + inner].iter().copied().sum::<T>();
            }
        }
        for m in &mut mean {
            *m = *m / ct;
        }
        for bi in 0..batch {
            for ci in 0..c {
                let start = (bi * c + ci) * inner;
                let mu = mean[ci];
                var[ci] += xs[start..start + inner]
                    .iter()
                    .map(|&v| (v - mu) * (v - mu))
                    .sum::<T>();
            }
        }
        for v in &mut var {
            *v = *v / ct;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        for bi in 0..batch {
            for ci in 0..c {
                let start = (bi * c + ci) * inner;
                for j in start..start + inner {
                    xhat[j] = (xs[j] - mean[ci]) * inv_std[ci];
                }
            }
        }
        let shape = x.shape().to_vec();
        let xhat_saved = xhat.clone();
        let id = self.id;
        let stats = BatchStats { mean, var };
        let var_out = self.tape.push(from_vec(&shape, xhat), &[self], move |g, grads| {
            let gs = flat(g);
            let mut m1 = vec![T::zero(); c];
            let mut m2 = vec![T::zero(); c];
            for bi in 0..batch {
                for ci in 0..c {
                    let start = (bi * c + ci) * inner;
                    for j in start..start + inner {
                        m1[ci] += gs[j];
                        m2[ci] += gs[j] * xhat_saved[j];
                    }
                }
            }
            let mut gx = vec![T::zero(); gs.len()];
            for bi in 0..batch {
                for ci in 0..c {
                    let (a, b) = (m1[ci] / ct, m2[ci] / ct);
                    let start = (bi * c + ci) * inner;
                    for j in start..start + inner {
                        gx[j] = inv_std[ci] * (gs[j] - a - xhat_saved[j] * b);
                    }
                }
            }
            grads.accumulate(id, from_vec(&shape, gx));
        });
        (var_out, stats)
    }

    /// Normalization with fixed (running) statistics; linear in `self`.
    pub fn normalize_with(self, mean: &[T], var: &[T], eps: T) -> Var<'t, T> {
        let x = self.value();
        let (batch, c, inner) = channel_dims(x.shape());
        assert_eq!(mean.len(), c);
        assert_eq!(var.len(), c);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = (*x).clone();
        {
            let os = out.as_slice_mut().unwrap();
            for bi in 0..batch {
                for ci in 0..c {
                    let start = (bi * c + ci) * inner;
                    for o in &mut os[start..start + inner] {
                        *o = (*o - mean[ci]) * inv_std[ci];
                    }
                }
            }
        }
        let id = self.id;
        self.tape.push(out, &[self], move |g, grads| {
            let mut gx = g.clone();
            let gs = gx.as_slice_mut().unwrap();
            for bi in 0..batch {
                for ci in 0..c {
                    let start = (bi * c + ci) * inner;
                    for v in &mut gs[start..start + inner] {
                        *v *= inv_std[ci];
                    }
                }
            }
            grads.accumulate(id, gx);
        })
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(self) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 4, "global_avg_pool expects [B, C, H, W]");
        let (batch, c, inner) = channel_dims(x.shape());
        let it: T = lit(inner as f64);
        let xs = flat(&x);
        let out: Vec<T> = (0..batch * c)
            .map(|bc| xs[bc * inner..(bc + 1) * inner].iter().copied().sum::<T>() / it)
            .collect();
        let shape = x.shape().to_vec();
        let id = self.id;
        self.tape.push(from_vec(&[batch, c], out), &[self], move |g, grads| {
            let gs = flat(g);
            let mut gx = Vec::with_capacity(batch * c * inner);
            for &v in gs {
                let share = v / it;
                gx.extend(std::iter::repeat_n(share, inner));
            }
            grads.accumulate(id, from_vec(&shape, gx));
        })
    }

    /// Max pooling with a square window and no padding.
    pub fn max_pool2d(self, kernel: usize, stride: usize) -> Var<'t, T> {
        self.pool2d(kernel, stride, true)
    }

    /// Average pooling with a square window and no padding.
    pub fn avg_pool2d(self, kernel: usize, stride: usize) -> Var<'t, T> {
        self.pool2d(kernel, stride, false)
    }

    fn pool2d(self, kernel: usize, stride: usize, max: bool) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 4, "pooling expects [B, C, H, W]");
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        assert!(h >= kernel && w >= kernel, "pooling window larger than input");
        let ho = (h - kernel) / stride + 1;
        let wo = (w - kernel) / stride + 1;
        let xs = flat(&x);
        let area: T = lit((kernel * kernel) as f64);
        let mut out = vec![T::zero(); b * c * ho * wo];
        // For max pooling, the flat input index that won each output cell.
        let mut argmax = if max { vec![0usize; out.len()] } else { Vec::new() };
        for bc in 0..b * c {
            let base = bc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = (bc * ho + oy) * wo + ox;
                    let mut best = T::neg_infinity();
                    let mut best_i = 0;
                    let mut acc = T::zero();
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if max {
                                if xs[i] > best {
                                    best = xs[i];
                                    best_i = i;
                                }
                            } else {
                                acc += xs[i];
                            }
                        }
                    }
                    if max {
                        out[o] = best;
                        argmax[o] = best_i;
                    } else {
                        out[o] = acc / area;
                    }
                }
            }
        }
        let shape = x.shape().to_vec();
        let id = self.id;
        self.tape.push(from_vec(&[b, c, ho, wo], out), &[self], move |g, grads| {
            let gs = flat(g);
            let mut gx = vec![T::zero(); b * c * h * w];
            if max {
                for (o, &gv) in gs.iter().enumerate() {
                    gx[argmax[o]] += gv;
                }
            } else {
                for bc in 0..b * c {
                    let base = bc * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let share = gs[(bc * ho + oy) * wo + ox] / area;
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    gx[base + (oy * stride + ky) * w + ox * stride + kx] += share;
                                }
                            }
                        }
                    }
                }
            }
            grads.accumulate(id, from_vec(&shape, gx));
        })
    }
}
