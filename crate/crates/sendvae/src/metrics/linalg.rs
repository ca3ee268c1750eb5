//! Symmetric eigendecomposition (cyclic Jacobi) and PCA projection, f64.

use ndarray::{Array1, Array2};

/// Eigenvalues and eigenvectors (columns) of a symmetric matrix.
/// Eigenvalues are returned in descending order.
pub fn eigh(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "eigh needs a square matrix");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap());
    let mut vals = Array1::<f64>::zeros(n);
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = m[[src, src]];
        // sign convention: largest-magnitude component positive
        let col = v.column(src);
        let mut arg = 0usize;
        for k in 1..n {
            if col[k].abs() > col[arg].abs() {
                arg = k;
            }
        }
        let flip = if col[arg] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vecs[[k, dst]] = flip * col[k];
        }
    }
    (vals, vecs)
}

/// Principal symmetric square root via eigendecomposition, with small
/// negative eigenvalues clamped to zero.
pub fn sqrtm_psd(a: &Array2<f64>, neg_tol: f64) -> Result<Array2<f64>, f64> {
    let (vals, vecs) = eigh(a);
    let mut worst = 0.0f64;
    for &l in vals.iter() {
        if l < worst {
            worst = l;
        }
    }
    if worst < -neg_tol {
        return Err(worst);
    }
    let n = a.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let s = vals[k].max(0.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += s * vecs[[i, k]] * vecs[[j, k]];
            }
        }
    }
    Ok(out)
}

/// Projects rows onto the top-k principal components of their covariance.
pub fn pca_project(rows: &Array2<f64>, k: usize) -> Array2<f64> {
    let (n, d) = rows.dim();
    let k = k.min(d);
    let mean = rows.sum_axis(ndarray::Axis(0)) / n as f64;
    let centered = rows - &mean.view().insert_axis(ndarray::Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0).max(1.0);
    let (_vals, vecs) = eigh(&cov);
    let basis = vecs.slice(ndarray::s![.., 0..k]);
    centered.dot(&basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn eigh_recovers_known_spectrum() {
        let a = arr2(&[[2.0, 1.0], [1.0, 2.0]]);
        let (vals, vecs) = eigh(&a);
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // reconstruct
        let recon = vecs.dot(&Array2::from_diag(&vals)).dot(&vecs.t());
        for (x, y) in recon.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn sqrtm_squares_back() {
        let a = arr2(&[[4.0, 1.0], [1.0, 3.0]]);
        let r = sqrtm_psd(&a, 1e-8).unwrap();
        let sq = r.dot(&r);
        for (x, y) in sq.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn pca_keeps_dominant_direction() {
        let mut rows = Array2::<f64>::zeros((64, 3));
        let mut rng = crate::rng::stream(1, "pca", 0);
        for mut r in rows.outer_iter_mut() {
            let t = crate::rng::normal(&mut rng);
            r[0] = 3.0 * t;
            r[1] = t + 0.01 * crate::rng::normal(&mut rng);
            r[2] = 0.01 * crate::rng::normal(&mut rng);
        }
        let p = pca_project(&rows, 1);
        assert_eq!(p.dim(), (64, 1));
        let var: f64 = p.column(0).iter().map(|v| v * v).sum::<f64>() / 63.0;
        assert!(var > 9.0, "projected variance {var} lost the main axis");
    }
}
