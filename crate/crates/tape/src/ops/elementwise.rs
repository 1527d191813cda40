use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use super::{flat, from_vec};
use crate::{lit, Scalar, Var};

impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let out = &*a + &*b;
        let (ia, ib) = (self.id, other.id);
        self.tape.push(out, &[self, other], move |g, grads| {
            grads.accumulate(ia, g.clone());
            grads.accumulate(ib, g.clone());
        })
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let out = &*a - &*b;
        let (ia, ib) = (self.id, other.id);
        self.tape.push(out, &[self, other], move |g, grads| {
            grads.accumulate(ia, g.clone());
            grads.accumulate(ib, g.mapv(|x| -x));
        })
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let out = &*a * &*b;
        let (ia, ib) = (self.id, other.id);
        self.tape.push(out, &[self, other], move |g, grads| {
            if grads.wants(ia) {
                grads.accumulate(ia, g * &*b);
            }
            if grads.wants(ib) {
                grads.accumulate(ib, g * &*a);
            }
        })
    }

    /// Sum of any number of equally shaped values.
    pub fn add_n(vars: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!vars.is_empty(), "add_n of nothing");
        let first = vars[0].value();
        let mut out = (*first).clone();
        for v in &vars[1..] {
            let val = v.value();
            assert_eq!(val.shape(), out.shape(), "add_n: shape mismatch");
            out += &*val;
        }
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        vars[0].tape.push(out, vars, move |g, grads| {
            for &id in &ids {
                grads.accumulate(id, g.clone());
            }
        })
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let out = self.value().mapv(|x| x * s);
        let id = self.id;
        self.tape.push(out, &[self], move |g, grads| {
            grads.accumulate(id, g.mapv(|x| x * s));
        })
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let out = self.value().mapv(|x| x + s);
        let id = self.id;
        self.tape.push(out, &[self], move |g, grads| {
            grads.accumulate(id, g.clone());
        })
    }

    /// Multiplies every element by a scalar-shaped `other`.
    pub fn mul_scalar_var(self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let s = other.item();
        let out = a.mapv(|x| x * s);
        let (ia, is) = (self.id, other.id);
        let sshape = other.shape();
        self.tape.push(out, &[self, other], move |g, grads| {
            if grads.wants(ia) {
                grads.accumulate(ia, g.mapv(|x| x * s));
            }
            if grads.wants(is) {
                let d: T = g.iter().zip(a.iter()).map(|(&g, &x)| g * x).sum();
                grads.accumulate(is, ArrayD::from_elem(IxDyn(&sshape), d));
            }
        })
    }

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.mapv(|v| if v > T::zero() { v } else { T::zero() });
        let id = self.id;
        self.tape.push(out, &[self], move |g, grads| {
            let mut gx = g.clone();
            gx.zip_mut_with(&*x, |g, &v| {
                if v <= T::zero() {
                    *g = T::zero();
                }
            });
            grads.accumulate(id, gx);
        })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.mapv(|v| v * sigmoid(v));
        let id = self.id;
        self.tape.push(out, &[self], move |g, grads| {
            let mut gx = g.clone();
            gx.zip_mut_with(&*x, |g, &v| {
                let s = sigmoid(v);
                *g *= s * (T::one() + v * (T::one() - s));
            });
            grads.accumulate(id, gx);
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        let x = self.value();
        let c: T = lit(0.797_884_560_802_865_4); // sqrt(2/pi)
        let a: T = lit(0.044_715);
        let half: T = lit(0.5);
        let out = x.mapv(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        let id = self.id;
        self.tape.push(out, &[self], move |g, grads| {
            let mut gx = g.clone();
            let three: T = lit(3.0);
            gx.zip_mut_with(&*x, |g, &v| {
                let u = c * (v + a * v * v * v);
                let t = u.tanh();
                let du = c * (T::one() + three * a * v * v);
                *g *= half * (T::one() + t) + half * v * (T::one() - t * t) * du;
            });
            grads.accumulate(id, gx);
        })
    }

    /// Sum of all elements, as a scalar-shaped value.
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let s: T = flat(&x).iter().copied().sum();
        let shape = x.shape().to_vec();
        let id = self.id;
        self.tape.push(ArrayD::from_elem(IxDyn(&[]), s), &[self], move |g, grads| {
            let gv = *g.iter().next().unwrap();
            grads.accumulate(id, ArrayD::from_elem(IxDyn(&shape), gv));
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / lit(n as f64))
    }

    /// Sum of squared elements.
    pub fn sum_sq(self) -> Var<'t, T> {
        let x = self.value();
        let s: T = flat(&x).iter().map(|&v| v * v).sum();
        let id = self.id;
        self.tape.push(ArrayD::from_elem(IxDyn(&[]), s), &[self], move |g, grads| {
            let gv = *g.iter().next().unwrap() * lit(2.0);
            grads.accumulate(id, x.mapv(|v| v * gv));
        })
    }

    /// Euclidean norm of the flattened value. The gradient at zero is taken as zero.
    pub fn l2_norm(self) -> Var<'t, T> {
        let x = self.value();
        let n = flat(&x).iter().map(|&v| v * v).sum::<T>().sqrt();
        let id = self.id;
        self.tape.push(ArrayD::from_elem(IxDyn(&[]), n), &[self], move |g, grads| {
            if n == T::zero() {
                return;
            }
            let gv = *g.iter().next().unwrap() / n;
            grads.accumulate(id, x.mapv(|v| v * gv));
        })
    }

    /// Adds `bias` (length = last dimension) to every row.
    pub fn add_row(self, bias: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let b = bias.value();
        let d = *x.shape().last().expect("add_row on a scalar");
        assert_eq!(b.shape(), &[d], "add_row: bias length must equal last dimension");
        let bs = flat(&b);
        let mut out = (*x).clone();
        for row in out.as_slice_mut().unwrap().chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(bs) {
                *o += bv;
            }
        }
        let (ix, ib) = (self.id, bias.id);
        self.tape.push(out, &[self, bias], move |g, grads| {
            grads.accumulate(ix, g.clone());
            if grads.wants(ib) {
                let mut gb = vec![T::zero(); d];
                for row in flat(g).chunks(d) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                grads.accumulate(ib, from_vec(&[d], gb));
            }
        })
    }

    /// Adds a per-channel value along axis 1 of a `[B, C, ...]` tensor.
    pub fn add_channel(self, bias: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let b = bias.value();
        let (batch, c, inner) = channel_dims(x.shape());
        assert_eq!(b.shape(), &[c], "add_channel: bias length must equal channel count");
        let bs = flat(&b).to_vec();
        let mut out = (*x).clone();
        let os = out.as_slice_mut().unwrap();
        for bi in 0..batch {
            for (ci, &bv) in bs.iter().enumerate() {
                let start = (bi * c + ci) * inner;
                for o in &mut os[start..start + inner] {
                    *o += bv;
                }
            }
        }
        let (ix, ib) = (self.id, bias.id);
        self.tape.push(out, &[self, bias], move |g, grads| {
            grads.accumulate(ix, g.clone());
            if grads.wants(ib) {
                grads.accumulate(ib, channel_sums(g, None));
            }
        })
    }

    /// Multiplies by a per-channel value along axis 1 of a `[B, C, ...]` tensor.
    pub fn mul_channel(self, scale: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let s = scale.value();
        let (batch, c, inner) = channel_dims(x.shape());
        assert_eq!(s.shape(), &[c], "mul_channel: scale length must equal channel count");
        let mut out = (*x).clone();
        {
            let ss = flat(&s);
            let os = out.as_slice_mut().unwrap();
            for bi in 0..batch {
                for (ci, &sv) in ss.iter().enumerate() {
                    let start = (bi * c + ci) * inner;
                    for o in &mut os[start..start + inner] {
                        *o *= sv;
                    }
                }
            }
        }
        let (ix, is) = (self.id, scale.id);
        self.tape.push(out, &[self, scale], move |g, grads| {
            if grads.wants(ix) {
                let mut gx = g.clone();
                let ss = flat(&s);
                let gs = gx.as_slice_mut().unwrap();
                for bi in 0..batch {
                    for (ci, &sv) in ss.iter().enumerate() {
                        let start = (bi * c + ci) * inner;
                        for v in &mut gs[start..start + inner] {
                            *v *= sv;
                        }
                    }
                }
                grads.accumulate(ix, gx);
            }
            if grads.wants(is) {
                grads.accumulate(is, channel_sums(g, Some(&x)));
            }
        })
    }
}

/// Splits a `[B, C, rest...]` shape into `(B, C, prod(rest))`.
pub(crate) fn channel_dims(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected at least [batch, channels]");
    (shape[0], shape[1], shape[2..].iter().product())
}

/// Per-channel sum of `g` (optionally of `g * x`).
fn channel_sums<T: Scalar>(g: &ArrayD<T>, x: Option<&Rc<ArrayD<T>>>) -> ArrayD<T> {
    let (batch, c, inner) = channel_dims(g.shape());
    let gs = flat(g);
    let xs = x.map(|x| flat(x));
    let mut out = vec![T::zero(); c];
    for bi in 0..batch {
        for (ci, acc) in out.iter_mut().enumerate() {
            let start = (bi * c + ci) * inner;
            let range = start..start + inner;
            *acc += match xs {
                Some(xs) => gs[range.clone()].iter().zip(&xs[range]).map(|(&a, &b)| a * b).sum(),
                None => gs[range].iter().copied().sum(),
            };
        }
    }
    ndarray::Array1::from(out).into_dyn()
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}
