//! Small dense helpers for the d×d and (d+1)×(d+1) systems that show up per
//! simplex and per hull facet. Sizes are tiny (d ≤ 6), so everything works on
//! stack-free flat slices instead of allocating matrix types in hot loops.

use nalgebra::DMatrix;

/// Determinant of a `k×k` row-major matrix by Gaussian elimination with
/// partial pivoting. The buffer is clobbered.
pub(crate) fn det_in_place(m: &mut [f64], k: usize) -> f64 {
    let mut det = 1.0;
    for col in 0..k {
        let mut piv = col;
        let mut best = m[col * k + col].abs();
        for row in col + 1..k {
            let v = m[row * k + col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if piv != col {
            for c in 0..k {
                m.swap(col * k + c, piv * k + c);
            }
            det = -det;
        }
        let p = m[col * k + col];
        det *= p;
        for row in col + 1..k {
            let factor = m[row * k + col] / p;
            if factor != 0.0 {
                for c in col + 1..k {
                    m[row * k + c] -= factor * m[col * k + c];
                }
            }
        }
    }
    det
}

/// Generalised cross product: the vector orthogonal to the `k-1` rows of a
/// `(k-1)×k` row-major matrix, with entries given by signed cofactors.
pub(crate) fn orthogonal_complement(rows: &[f64], k: usize, out: &mut [f64]) {
    debug_assert_eq!(rows.len(), (k - 1) * k);
    if k == 1 {
        out[0] = 1.0;
        return;
    }
    if k == 3 {
        let (a, b) = (&rows[..3], &rows[3..]);
        out[0] = a[1] * b[2] - a[2] * b[1];
        out[1] = a[2] * b[0] - a[0] * b[2];
        out[2] = a[0] * b[1] - a[1] * b[0];
        return;
    }
    let mut minor = vec![0.0; (k - 1) * (k - 1)];
    for skip in 0..k {
        for r in 0..k - 1 {
            let mut c2 = 0;
            for c in 0..k {
                if c != skip {
                    minor[r * (k - 1) + c2] = rows[r * k + c];
                    c2 += 1;
                }
            }
        }
        let sign = if skip % 2 == 0 { 1.0 } else { -1.0 };
        out[skip] = sign * det_in_place(&mut minor, k - 1);
    }
}

/// Inverse and determinant of a `k×k` column-major matrix.
pub(crate) fn inverse_and_det(cols: &[f64], k: usize) -> Option<(Vec<f64>, f64)> {
    let m = DMatrix::from_column_slice(k, k, cols);
    let det = m.determinant();
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv = m.try_inverse()?;
    Some((inv.as_slice().to_vec(), det))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |acc, v| acc * v as f64)
}
