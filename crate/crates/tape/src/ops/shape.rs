use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn};

use super::{flat, from_vec};
use crate::{Scalar, Var};

impl<'t, T: Scalar> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(
            x.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let out = from_vec(shape, flat(&x).to_vec());
        let orig = x.shape().to_vec();
        let id = self.id;
        self.tape.push(out, &[self], move |g, grads| {
            grads.accumulate(id, from_vec(&orig, flat(g).to_vec()));
        })
    }

    /// Axis permutation; `axes[i]` is the source axis of output axis `i`.
    pub fn permute(self, axes: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let out = x.view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let id = self.id;
        self.tape.push(out, &[self], move |g, grads| {
            let gx = g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned();
            grads.accumulate(id, gx);
        })
    }

    /// Transpose of a 2-D value.
    pub fn t(self) -> Var<'t, T> {
        assert_eq!(self.value().ndim(), 2, "t() expects a matrix");
        self.permute(&[1, 0])
    }

    /// Row lookup into a `[rows, d]` table. Rows may repeat; their gradients add up.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'t, T> {
        let table = self.value();
        assert_eq!(table.ndim(), 2, "gather_rows expects a matrix");
        let (rows, d) = (table.shape()[0], table.shape()[1]);
        let src = flat(&table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            assert!(r < rows, "gather_rows: row {r} out of range {rows}");
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let idx: Rc<[usize]> = idx.into();
        let id = self.id;
        self.tape.push(from_vec(&[idx.len(), d], out), &[self], move |g, grads| {
            if !grads.wants(id) {
                return;
            }
            let mut gt = vec![T::zero(); rows * d];
            for (k, row) in flat(g).chunks(d).enumerate() {
                let r = idx[k];
                for (acc, &v) in gt[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *acc += v;
                }
            }
            grads.accumulate(id, from_vec(&[rows, d], gt));
        })
    }

    /// Elementwise gather: `out.flat[j] = self.flat[index[j]]`, shaped `out_shape`.
    /// Backward scatter-adds, so repeated indices accumulate.
    pub fn gather(self, index: Rc<[usize]>, out_shape: &[usize]) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(
            index.len(),
            out_shape.iter().product::<usize>(),
            "gather: index length must match output shape"
        );
        let src = flat(&x);
        let out: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let n = x.len();
        let xshape = x.shape().to_vec();
        let id = self.id;
        self.tape.push(from_vec(out_shape, out), &[self], move |g, grads| {
            if !grads.wants(id) {
                return;
            }
            let mut gx = vec![T::zero(); n];
            for (&i, &v) in index.iter().zip(flat(g)) {
                gx[i] += v;
            }
            grads.accumulate(id, from_vec(&xshape, gx));
        })
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(vars: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
        assert!(!vars.is_empty(), "concat of nothing");
        let values: Vec<Rc<ArrayD<T>>> = vars.iter().map(|v| v.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        vars[0].tape.push(out, vars, move |g, grads| {
            let mut start = 0;
            for (&id, &len) in ids.iter().zip(&sizes) {
                if grads.wants(id) {
                    let part = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                        .as_standard_layout()
                        .into_owned();
                    grads.accumulate(id, part);
                }
                start += len;
            }
        })
    }

    /// Contiguous range `[start, end)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, end: usize) -> Var<'t, T> {
        let x = self.value();
        let out = x
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .as_standard_layout()
            .into_owned();
        let xshape = x.raw_dim();
        let id = self.id;
        self.tape.push(out, &[self], move |g, grads| {
            if !grads.wants(id) {
                return;
            }
            let mut gx = ArrayD::zeros(xshape.clone());
            gx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..end))
                .assign(g);
            grads.accumulate(id, gx);
        })
    }
}
