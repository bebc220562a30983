//! Small dense linear-algebra helpers used by the analysis code.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DEGENERATE_TOL: f64 = 1e-12;
const SVD_TOL: f64 = 1e-14;
const SVD_MAX_SWEEPS: usize = 100;

/// Orthonormal basis `(e1, e2)` of `span{u, v}` with `e1 = u / ‖u‖`.
pub fn gram_schmidt_plane(u: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    if u.numel() != v.numel() {
        return Err(Error::Dimension {
            op: "gram_schmidt_plane",
            left: u.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let nu = u.norm();
    if nu < DEGENERATE_TOL {
        return Err(Error::DegeneratePlane(format!("first direction has norm {nu:e}")));
    }
    let e1 = u.scale(1.0 / nu).flatten();
    let v = v.clone().flatten();
    let proj = e1.dot(&v)?;
    let mut resid = v.axpy(-proj, &e1)?;
    // second pass keeps |e1·e2| at rounding level when u and v are nearly parallel
    let proj2 = e1.dot(&resid)?;
    resid = resid.axpy(-proj2, &e1)?;
    let nr = resid.norm();
    if nr < DEGENERATE_TOL {
        return Err(Error::DegeneratePlane(format!(
            "second direction is parallel to the first (residual {nr:e})"
        )));
    }
    Ok((e1, resid.scale(1.0 / nr)))
}

/// Singular values in descending order, computed with one-sided Jacobi
/// rotations. Returns `min(rows, cols)` values.
pub fn singular_values(m: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = m.dims2()?;
    if !m.is_finite() {
        return Err(Error::NonFinite { op: "singular_values" });
    }
    // orthogonalize the columns of a tall matrix
    let a = if rows >= cols { m.clone() } else { m.transpose()? };
    let (r, c) = a.dims2()?;
    // column-major copy for cache-friendly column rotations
    let mut cols_data: Vec<Vec<f64>> = (0..c).map(|j| (0..r).map(|i| a.at(i, j)).collect()).collect();

    let mut converged = false;
    let mut residual = 0.0;
    for _ in 0..SVD_MAX_SWEEPS {
        residual = 0.0f64;
        let mut rotated = false;
        for p in 0..c {
            for q in (p + 1)..c {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols_data[p], &cols_data[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..r {
                        alpha += cp[i] * cp[i];
                        beta += cq[i] * cq[i];
                        gamma += cp[i] * cq[i];
                    }
                    (alpha, beta, gamma)
                };
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= SVD_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (left, right) = cols_data.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                for i in 0..r {
                    let x = cp[i];
                    let y = cq[i];
                    cp[i] = cs * x - sn * y;
                    cq[i] = sn * x + cs * y;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "one-sided Jacobi SVD",
            residual,
        });
    }
    let mut sv: Vec<f64> = cols_data
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// `σ_max / σ_min` over singular values above `floor`; `None` when fewer
/// than one value survives.
pub fn condition_number(m: &Tensor, floor: f64) -> Result<Option<f64>> {
    let sv = singular_values(m)?;
    let kept: Vec<f64> = sv.into_iter().filter(|&s| s > floor).collect();
    match (kept.first(), kept.last()) {
        (Some(max), Some(min)) => Ok(Some(max / min)),
        _ => Ok(None),
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na * nb)).clamp(-1.0, 1.0))
    }
}
