use ndarray::ArrayView2;

use super::{flat, from_vec};
use crate::{Scalar, Var};

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    /// Input coordinate for output `o` and kernel offset `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `[B, C, H, W]` into a `[C*kh*kw, B*Ho*Wo]` patch matrix.
fn im2col<T: Scalar>(x: &[T], g: &Geometry) -> Vec<T> {
    let ncols = g.cols();
    let mut cols = vec![T::zero(); g.rows() * ncols];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for bi in 0..g.batch {
                    let plane = &x[(bi * g.cin + ci) * g.h * g.w..(bi * g.cin + ci + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let Some(iy) = g.source(oy, ky, g.h) else {
                            continue;
                        };
                        let out_row = (bi * g.ho + oy) * g.wo;
                        for ox in 0..g.wo {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                dst[out_row + ox] = plane[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch gradients back onto the input.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry) -> Vec<T> {
    let ncols = g.cols();
    let mut x = vec![T::zero(); g.batch * g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for bi in 0..g.batch {
                    let base = (bi * g.cin + ci) * g.h * g.w;
                    for oy in 0..g.ho {
                        let Some(iy) = g.source(oy, ky, g.h) else {
                            continue;
                        };
                        let out_row = (bi * g.ho + oy) * g.wo;
                        for ox in 0..g.wo {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                x[base + iy * g.w + ix] += src[out_row + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[O, B*Ho*Wo]` (channel-major) to `[B, O, Ho, Wo]`.
fn channel_major_to_nchw<T: Scalar>(m: &[T], batch: usize, o: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for oc in 0..o {
        for bi in 0..batch {
            let src = &m[oc * batch * hw + bi * hw..oc * batch * hw + (bi + 1) * hw];
            out[(bi * o + oc) * hw..(bi * o + oc + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

fn nchw_to_channel_major<T: Scalar>(x: &[T], batch: usize, o: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..batch {
        for oc in 0..o {
            let src = &x[(bi * o + oc) * hw..(bi * o + oc + 1) * hw];
            out[oc * batch * hw + bi * hw..oc * batch * hw + (bi + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    /// 2-D cross-correlation of `[B, C, H, W]` with weights `[O, C, kh, kw]`,
    /// zero padding `pad` on every side, no bias.
    pub fn conv2d(self, weight: Var<'t, T>, stride: usize, pad: usize) -> Var<'t, T> {
        let x = self.value();
        let w = weight.value();
        assert_eq!(x.ndim(), 4, "conv2d input must be [B, C, H, W]");
        assert_eq!(w.ndim(), 4, "conv2d weight must be [O, C, kh, kw]");
        let (batch, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        assert_eq!(cin, wc, "conv2d: input has {cin} channels, weight expects {wc}");
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than padded input");
        let geo = Geometry {
            batch,
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncols, hw) = (geo.rows(), geo.cols(), geo.ho * geo.wo);
        let cols = im2col(flat(&x), &geo);
        let out = {
            let wm = ArrayView2::from_shape((o, rows), flat(&w)).unwrap();
            let cm = ArrayView2::from_shape((rows, ncols), &cols[..]).unwrap();
            let prod = wm.dot(&cm);
            let prod = prod.as_standard_layout();
            channel_major_to_nchw(prod.as_slice().unwrap(), batch, o, hw)
        };
        let (ix, iw) = (self.id, weight.id);
        self.tape.push(
            from_vec(&[batch, o, geo.ho, geo.wo], out),
            &[self, weight],
            move |g, grads| {
                let gm_vec = nchw_to_channel_major(flat(g), batch, o, hw);
                let gm = ArrayView2::from_shape((o, ncols), &gm_vec[..]).unwrap();
                if grads.wants(iw) {
                    let cm = ArrayView2::from_shape((rows, ncols), &cols[..]).unwrap();
                    let gw = gm.dot(&cm.t());
                    grads.accumulate(iw, from_vec(&[o, cin, kh, kw], gw.iter().copied().collect()));
                }
                if grads.wants(ix) {
                    let wm = ArrayView2::from_shape((o, rows), flat(&w)).unwrap();
                    let gcols = wm.t().dot(&gm);
                    let gcols = gcols.as_standard_layout();
                    let gx = col2im(gcols.as_slice().unwrap(), &geo);
                    grads.accumulate(ix, from_vec(&[batch, cin, h, wd], gx));
                }
            },
        )
    }
}
