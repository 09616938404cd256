//! Small dense kernels with a fixed reduction order.
//!
//! Every output entry is a left-to-right sum over the shared axis, so results
//! do not depend on batch size or on how rows are distributed across threads.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis, Zip};

/// Sequential dot product.
#[inline]
pub fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).fold(0.0, |acc, (x, y)| acc + x * y)
}

#[inline]
pub fn norm(a: ArrayView1<'_, f64>) -> f64 {
    a.iter().fold(0.0, |acc, x| acc + x * x).sqrt()
}

/// `a · bᵀ` for `a: [m × k]`, `b: [n × k]`, parallel over rows of `a`.
pub fn matmul_nt(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    debug_assert_eq!(a.ncols(), b.ncols());
    let mut out = Array2::<f64>::zeros((a.nrows(), b.nrows()));
    Zip::from(out.axis_iter_mut(Axis(0)))
        .and(a.axis_iter(Axis(0)))
        .par_for_each(|mut row, x| {
            for (o, k) in row.iter_mut().zip(b.axis_iter(Axis(0))) {
                *o = dot(x, k);
            }
        });
    out
}

/// `a · b` for `a: [m × k]`, `b: [k × n]`, parallel over rows of `a`.
pub fn matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    debug_assert_eq!(a.ncols(), b.nrows());
    let mut out = Array2::<f64>::zeros((a.nrows(), b.ncols()));
    Zip::from(out.axis_iter_mut(Axis(0)))
        .and(a.axis_iter(Axis(0)))
        .par_for_each(|mut row, x| {
            for (xk, bk) in x.iter().zip(b.axis_iter(Axis(0))) {
                row.scaled_add(*xk, &bk);
            }
        });
    out
}

/// `aᵀ · b` for `a: [m × k]`, `b: [m × n]`, summed over rows in index order.
pub fn matmul_tn(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    debug_assert_eq!(a.nrows(), b.nrows());
    let mut out = Array2::<f64>::zeros((a.ncols(), b.ncols()));
    for (ra, rb) in a.axis_iter(Axis(0)).zip(b.axis_iter(Axis(0))) {
        for (mut orow, &x) in out.axis_iter_mut(Axis(0)).zip(ra.iter()) {
            orow.scaled_add(x, &rb);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn products_agree_with_hand_values() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[5.0, 6.0], [7.0, 8.0]];
        assert_eq!(
            matmul_nt(a.view(), b.view()),
            array![[17.0, 23.0], [39.0, 53.0]]
        );
        assert_eq!(
            matmul(a.view(), b.view()),
            array![[19.0, 22.0], [43.0, 50.0]]
        );
        assert_eq!(
            matmul_tn(a.view(), b.view()),
            array![[26.0, 30.0], [38.0, 44.0]]
        );
    }
}
