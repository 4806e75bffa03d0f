//! Dense kernels with a fixed summation order.
//!
//! BLAS-style backends pick SIMD paths at runtime, which changes rounding
//! between machines. These loops accumulate strictly left to right so results
//! are reproducible wherever IEEE-754 binary64 semantics hold.

use ndarray::{Array1, Array2, ArrayView2};

/// `x · wᵀ + b` for `x: n×k`, `w: m×k`, `b: m`.
pub(crate) fn affine(x: ArrayView2<f64>, w: ArrayView2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (n, k) = x.dim();
    let m = w.nrows();
    debug_assert_eq!(w.ncols(), k);
    let x = x.as_standard_layout();
    let w = w.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let ws = w.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let xi = &xs[i * k..(i + 1) * k];
        for j in 0..m {
            let wj = &ws[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += xi[t] * wj[t];
            }
            out[i * m + j] = acc + b[j];
        }
    }
    Array2::from_shape_vec((n, m), out).expect("shape")
}

/// `dᵀ · a` for `d: n×m`, `a: n×k`, giving `m×k`.
pub(crate) fn t_dot(d: ArrayView2<f64>, a: ArrayView2<f64>) -> Array2<f64> {
    let (n, m) = d.dim();
    let k = a.ncols();
    debug_assert_eq!(a.nrows(), n);
    let d = d.as_standard_layout();
    let a = a.as_standard_layout();
    let ds = d.as_slice().expect("standard layout");
    let as_ = a.as_slice().expect("standard layout");
    let mut out = vec![0.0; m * k];
    for i in 0..n {
        let ai = &as_[i * k..(i + 1) * k];
        for j in 0..m {
            let g = ds[i * m + j];
            if g == 0.0 {
                continue;
            }
            let row = &mut out[j * k..(j + 1) * k];
            for t in 0..k {
                row[t] += g * ai[t];
            }
        }
    }
    Array2::from_shape_vec((m, k), out).expect("shape")
}

/// `d · w` for `d: n×m`, `w: m×k`, giving `n×k`.
pub(crate) fn dot(d: ArrayView2<f64>, w: ArrayView2<f64>) -> Array2<f64> {
    let (n, m) = d.dim();
    let k = w.ncols();
    debug_assert_eq!(w.nrows(), m);
    let d = d.as_standard_layout();
    let w = w.as_standard_layout();
    let ds = d.as_slice().expect("standard layout");
    let ws = w.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &mut out[i * k..(i + 1) * k];
        for j in 0..m {
            let g = ds[i * m + j];
            if g == 0.0 {
                continue;
            }
            let wj = &ws[j * k..(j + 1) * k];
            for t in 0..k {
                row[t] += g * wj[t];
            }
        }
    }
    Array2::from_shape_vec((n, k), out).expect("shape")
}

/// Column sums of `d: n×m`.
pub(crate) fn col_sum(d: ArrayView2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(d.ncols());
    for row in d.rows() {
        for (o, v) in out.iter_mut().zip(row.iter()) {
            *o += v;
        }
    }
    out
}

pub(crate) fn norm(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kernels_match_ndarray() {
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]];
        let w = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.0]];
        let b = array![0.5, -0.5];
        let got = affine(x.view(), w.view(), &b);
        let want = x.dot(&w.t()) + &b;
        assert_eq!(got, want);

        let d = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(t_dot(d.view(), x.view()), d.t().dot(&x));
        assert_eq!(dot(d.view(), w.view()), d.dot(&w));
        assert_eq!(col_sum(d.view()), array![4.0, 6.0]);
    }
}
