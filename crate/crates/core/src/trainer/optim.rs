use std::f64::consts::PI;
use std::io::{Read, Write};

use ghnforge_tape::{lit, Scalar};
use ndarray::{ArrayD, Zip};

use crate::error::{Error, Result};
use crate::target_net::{read_scalars, read_u32, scalar_width, write_scalars};

/// `lr * 0.5 * (1 + cos(pi * step / (total - 1)))`: `lr` at the first step
/// and zero at the last.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    lr * 0.5 * (1.0 + (PI * t).cos())
}

/// Adam with bias correction and decoupled weight decay:
/// `w <- w (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [ArrayD<T>], grads: &[ArrayD<T>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per tensor");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t): (T, T) = (lit(b1), lit(b2));
        let (one, eps) = (T::one(), lit::<T>(self.eps));
        let decay: T = lit(1.0 - lr * self.weight_decay);
        let (c1, c2, lr): (T, T, T) = (lit(c1), lit(c2), lit(lr));
        for (((w, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(w).and(g).and(m).and(v).for_each(|w, &g, m, v| {
                *m = b1t * *m + (one - b1t) * g;
                *v = b2t * *v + (one - b2t) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *w = *w * decay - lr * update;
            });
        }
    }

    const MAGIC: &'static [u8; 4] = b"GHNA";

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let width = scalar_width::<T>();
        w.write_all(Self::MAGIC)?;
        w.write_all(&[width])?;
        for x in [self.beta1, self.beta2, self.eps, self.weight_decay] {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&self.t.to_le_bytes())?;
        w.write_all(&(self.m.len() as u32).to_le_bytes())?;
        for (m, v) in self.m.iter().zip(&self.v) {
            w.write_all(&(m.ndim() as u32).to_le_bytes())?;
            for &d in m.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            write_scalars(w, m.iter(), width)?;
            write_scalars(w, v.iter(), width)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |d: &str| Error::format("<optimizer state>", d);
        let mut head = [0u8; 5];
        r.read_exact(&mut head)?;
        if &head[..4] != Self::MAGIC || !matches!(head[4], 4 | 8) {
            return Err(bad("not an optimizer state"));
        }
        let width = head[4];
        let mut f = [0f64; 4];
        for x in &mut f {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *x = f64::from_le_bytes(b);
        }
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let t = u64::from_le_bytes(b);
        let count = read_u32(r)? as usize;
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let rank = read_u32(r)? as usize;
            if rank > 4 {
                return Err(bad("tensor rank above 4"));
            }
            let dims = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().product();
            for out in [&mut m, &mut v] {
                let data = read_scalars::<T>(r, n, width)?;
                out.push(ArrayD::from_shape_vec(dims.clone(), data).unwrap());
            }
        }
        Ok(Self {
            beta1: f[0],
            beta2: f[1],
            eps: f[2],
            weight_decay: f[3],
            t,
            m,
            v,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(4e-4, 0, 100), 4e-4);
        assert!(cosine_lr(4e-4, 99, 100) <= 1e-8 * 4e-4);
        assert!((cosine_lr(1.0, 50, 101) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_lr(0.1, 0, 1), 0.1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut opt = AdamW::<f64>::new(0.0);
        let mut w = vec![ndarray::arr1(&[1.0, -2.0, 0.5]).into_dyn()];
        let g = vec![ndarray::arr1(&[0.3, -7.0, 1e-3]).into_dyn()];
        opt.step(&mut w, &g, 0.01);
        let want = [0.99, -1.99, 0.49];
        for (a, b) in w[0].iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn matches_the_reference_recurrence() {
        let mut opt = AdamW::<f64>::new(0.1);
        let mut w = vec![ndarray::arr1(&[0.7]).into_dyn()];
        let (mut x, mut m, mut v) = (0.7f64, 0.0, 0.0);
        for t in 1..=5 {
            let g = 2.0 * x + 0.1;
            opt.step(&mut w, &[ndarray::arr1(&[g]).into_dyn()], 0.05);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x = x * (1.0 - 0.05 * 0.1) - 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((w[0][0] - x).abs() < 1e-14);
    }

    #[test]
    fn zero_gradients_shrink_parameters_monotonically() {
        let mut opt = AdamW::<f64>::new(1e-2);
        let mut w = vec![ndarray::arr1(&[3.0, -1.0]).into_dyn()];
        let g = vec![ArrayD::zeros(vec![2])];
        let mut last = f64::INFINITY;
        for _ in 0..20 {
            opt.step(&mut w, &g, 0.1);
            let n = w[0].mapv(|v| v * v).sum();
            assert!(n < last);
            last = n;
        }
    }

    #[test]
    fn state_round_trips() {
        let mut opt = AdamW::<f32>::new(0.01);
        let mut w = vec![ArrayD::from_elem(vec![2, 3], 1.0f32), ArrayD::from_elem(vec![4], -1.0f32)];
        let g = vec![ArrayD::from_elem(vec![2, 3], 0.3f32), ArrayD::from_elem(vec![4], 0.1f32)];
        opt.step(&mut w, &g, 0.1);
        let mut buf = Vec::new();
        opt.write_to(&mut buf).unwrap();
        let back = AdamW::<f32>::read_from(&mut &buf[..]).unwrap();
        assert_eq!(back, opt);
    }
}
