use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

/// Source coordinate in a decoded `[co, ci, sh, sw]` tensor for every element
/// of `target`, in row-major target order.
///
/// Channels wrap (`r mod co`), which is slicing when the target is smaller
/// and tiling-then-truncating when it is larger. Spatial extents take a
/// centred window starting at `(s - h) / 2`; matrices and vectors read the
/// centre position, and vectors read input channel 0.
pub fn source_coords(t_shape: [usize; 4], target: &[usize]) -> Result<Vec<[usize; 4]>> {
    let [co, ci, sh, sw] = t_shape;
    let unsupported = || Error::UnsupportedShape(target.to_vec());
    let (o, i, h, w) = match *target {
        [o] => (o, 1, 1, 1),
        [o, i] => (o, i, 1, 1),
        [o, i, h, w] => (o, i, h, w),
        _ => return Err(unsupported()),
    };
    if h > sh || w > sw || target.contains(&0) {
        return Err(unsupported());
    }
    let (y0, x0) = ((sh - h) / 2, (sw - w) / 2);
    let mut out = Vec::with_capacity(o * i * h * w);
    for a in 0..o {
        for b in 0..i {
            for y in 0..h {
                for x in 0..w {
                    out.push([a % co, b % ci, y0 + y, x0 + x]);
                }
            }
        }
    }
    Ok(out)
}

/// Flat row-major offsets into the decoded tensor; see [`source_coords`].
pub fn materialize_index(t_shape: [usize; 4], target: &[usize]) -> Result<Vec<usize>> {
    let [_, ci, sh, sw] = t_shape;
    Ok(source_coords(t_shape, target)?
        .into_iter()
        .map(|[a, b, y, x]| ((a * ci + b) * sh + y) * sw + x)
        .collect())
}

/// Copies the elements of `t` selected for `target`.
pub fn materialize<T: Clone>(t: &ArrayD<T>, target: &[usize]) -> Result<ArrayD<T>> {
    let s = t.shape();
    assert_eq!(s.len(), 4, "decoded tensors are rank 4");
    let t = t.as_standard_layout();
    let flat = t.as_slice().unwrap();
    let data = materialize_index([s[0], s[1], s[2], s[3]], target)?
        .into_iter()
        .map(|k| flat[k].clone())
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(target), data).unwrap())
}

#[cfg(test)]
mod tests {
    use ndarray::s;

    use super::*;

    fn iota(shape: &[usize]) -> ArrayD<usize> {
        ArrayD::from_shape_vec(IxDyn(shape), (0..shape.iter().product()).collect()).unwrap()
    }

    #[test]
    fn full_shape_is_identity() {
        let t = iota(&[4, 4, 16, 16]);
        assert_eq!(materialize(&t, &[4, 4, 16, 16]).unwrap(), t);
    }

    #[test]
    fn smaller_target_is_a_slice() {
        let t = iota(&[8, 8, 3, 3]);
        let m = materialize(&t, &[4, 4, 3, 3]).unwrap();
        assert_eq!(m, t.slice(s![0..4, 0..4, .., ..]).into_dyn());
    }

    #[test]
    fn larger_target_tiles_then_truncates() {
        let t = iota(&[2, 2, 1, 1]);
        let m = materialize(&t, &[5, 2, 1, 1]).unwrap();
        let rows: Vec<Vec<usize>> = m.outer_iter().map(|r| r.iter().copied().collect()).collect();
        let (r0, r1) = (vec![0, 1], vec![2, 3]);
        assert_eq!(rows, [r0.clone(), r1.clone(), r0.clone(), r1, r0]);
    }

    #[test]
    fn low_rank_targets_read_the_centre() {
        let t = iota(&[3, 3, 16, 16]);
        let v = materialize(&t, &[2]).unwrap();
        assert_eq!(v[[1]], t[[1, 0, 7, 7]]);
        let m = materialize(&t, &[2, 3]).unwrap();
        assert_eq!(m[[1, 2]], t[[1, 2, 7, 7]]);
        let k = materialize(&t, &[1, 1, 3, 3]).unwrap();
        assert_eq!(k[[0, 0, 0, 0]], t[[0, 0, 6, 6]]);
    }

    #[test]
    fn oversized_kernels_and_odd_ranks_are_rejected() {
        let shape = [4, 4, 16, 16];
        assert!(matches!(
            materialize_index(shape, &[1, 1, 17, 3]),
            Err(Error::UnsupportedShape(_))
        ));
        assert!(matches!(
            materialize_index(shape, &[1, 1, 3]),
            Err(Error::UnsupportedShape(_))
        ));
    }
}
