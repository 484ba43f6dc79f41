//! Dense linear-algebra helpers for the model fitters.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// One singular triple `(s, u, v)` with `u` and `v` unit vectors.
#[derive(Debug, Clone)]
pub(crate) struct SingularTriple {
    pub value: f64,
    pub left: DVector<f64>,
    pub right: DVector<f64>,
}

/// Leading `k` singular triples, sorted by decreasing singular value. The
/// sign of each pair is fixed so that the left vector has a positive sum
/// (or, failing that, a positive first non-zero entry).
pub(crate) fn leading_singular(m: &DMatrix<f64>, k: usize) -> Vec<SingularTriple> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("left vectors requested");
    let vt = svd.v_t.expect("right vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(k)
        .map(|i| {
            let mut left: DVector<f64> = u.column(i).into_owned();
            let mut right: DVector<f64> = vt.row(i).transpose().into_owned();
            let total: f64 = left.iter().sum();
            let flip = if total.abs() > 1e-12 {
                total < 0.0
            } else {
                left.iter().find(|v| v.abs() > 1e-12).is_some_and(|v| *v < 0.0)
            };
            if flip {
                left.neg_mut();
                right.neg_mut();
            }
            SingularTriple {
                value: svd.singular_values[i],
                left,
                right,
            }
        })
        .collect()
}

/// Minimum-norm solution of the normal equations `A x = b` for symmetric
/// positive semi-definite `A`, along with the numerical rank of `A`.
pub(crate) fn min_norm_solve(a: DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, usize) {
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = max * 1e-10;
    let kept: Vec<bool> = eig.eigenvalues.iter().map(|&l| l > cutoff && l > 0.0).collect();
    let rank = kept.iter().filter(|&&k| k).count();
    let apply = |rhs: &DVector<f64>| {
        let mut coords = eig.eigenvectors.transpose() * rhs;
        for (i, c) in coords.iter_mut().enumerate() {
            *c = if kept[i] { *c / eig.eigenvalues[i] } else { 0.0 };
        }
        &eig.eigenvectors * coords
    };
    let mut x = apply(b);
    // a few steps of iterative refinement recover digits lost to conditioning
    for _ in 0..3 {
        let r = b - &a * &x;
        x += apply(&r);
    }
    (x, rank)
}

/// Least-squares fit `y ~ c0 + c1 * x`, returning `(c0, c1)`.
pub(crate) fn simple_regression(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_matrix_has_one_triple() {
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let v = DVector::from_vec(vec![-1.0, 0.5, 0.25, 0.25]);
        let m = &u * v.transpose();
        let t = leading_singular(&m, 2);
        assert!(t[1].value < 1e-12);
        let back = &t[0].left * t[0].right.transpose() * t[0].value;
        assert!((back - m).abs().max() < 1e-12);
        assert!(t[0].left.iter().sum::<f64>() > 0.0);
    }

    #[test]
    fn min_norm_handles_rank_deficiency() {
        // x0 + x1 = 2 twice: min-norm solution (1, 1), rank 1
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![2.0, 2.0]);
        let (sol, rank) = min_norm_solve(x.transpose() * &x, &(x.transpose() * y));
        assert_eq!(rank, 1);
        assert!((sol[0] - 1.0).abs() < 1e-12 && (sol[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simple_regression_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let (c0, c1) = simple_regression(&x, &y);
        assert!((c0 - 2.0).abs() < 1e-14 && (c1 + 0.5).abs() < 1e-14);
    }
}
