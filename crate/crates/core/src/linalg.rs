//! Small dense linear-algebra helpers on row-major `f64` matrices.

use alloc::vec::Vec;

/// Determinant of the `n × n` row-major matrix `a` by LU factorization with
/// partial pivoting.
pub fn det_lu(a: &[f64], n: usize) -> f64 {
    assert_eq!(a.len(), n * n, "matrix is not {n}x{n}");
    let mut lu: Vec<f64> = a.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| lu[i * n + col].abs().total_cmp(&lu[j * n + col].abs()))
            .expect("non-empty range");
        let p = lu[pivot * n + col];
        if p == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for k in 0..n {
                lu.swap(col * n + k, pivot * n + k);
            }
            det = -det;
        }
        det *= p;
        for row in col + 1..n {
            let f = lu[row * n + col] / p;
            if f != 0.0 {
                for k in col + 1..n {
                    lu[row * n + k] -= f * lu[col * n + k];
                }
            }
        }
    }
    det
}

/// Determinant by cofactor expansion along the first row. Exponential cost;
/// meant as an independent check for small matrices.
pub fn det_cofactor(a: &[f64], n: usize) -> f64 {
    assert_eq!(a.len(), n * n);
    match n {
        0 => 1.0,
        1 => a[0],
        _ => {
            let mut total = 0.0;
            let mut minor = Vec::with_capacity((n - 1) * (n - 1));
            for j in 0..n {
                minor.clear();
                for r in 1..n {
                    for c in (0..n).filter(|&c| c != j) {
                        minor.push(a[r * n + c]);
                    }
                }
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                total += sign * a[j] * det_cofactor(&minor, n - 1);
            }
            total
        }
    }
}

/// Principal submatrix on `rows` (used for both rows and columns).
pub fn principal_submatrix(a: &[f64], n: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * rows.len());
    for &i in rows {
        for &j in rows {
            out.push(a[i * n + j]);
        }
    }
    out
}
