use ndarray::{ArrayView2, Ix2};

use crate::{Scalar, Var};

fn as2<T: Scalar>(a: &ndarray::ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("expected a matrix")
}

impl<'t, T: Scalar> Var<'t, T> {
    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        let out = as2(&a).dot(&as2(&b)).into_dyn();
        let (ia, ib) = (self.id, other.id);
        self.tape.push(out, &[self, other], move |g, grads| {
            let g2 = as2(g);
            if grads.wants(ia) {
                grads.accumulate(ia, g2.dot(&as2(&b).t()).into_dyn());
            }
            if grads.wants(ib) {
                grads.accumulate(ib, as2(&a).t().dot(&g2).into_dyn());
            }
        })
    }

    /// `[n, k] x [m, k]^T -> [n, m]`; the layout of a linear layer with
    /// weights stored as `[out, in]`.
    pub fn matmul_nt(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        let out = as2(&a).dot(&as2(&b).t()).into_dyn();
        let (ia, ib) = (self.id, other.id);
        self.tape.push(out, &[self, other], move |g, grads| {
            let g2 = as2(g);
            if grads.wants(ia) {
                grads.accumulate(ia, g2.dot(&as2(&b)).into_dyn());
            }
            if grads.wants(ib) {
                grads.accumulate(ib, g2.t().dot(&as2(&a)).into_dyn());
            }
        })
    }
}
