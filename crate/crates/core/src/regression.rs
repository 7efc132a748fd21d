//! Least-squares projection on standardized polynomial bases.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Ridge added to the normalized Gram matrix.
pub const RIDGE: f64 = 1e-10;

/// Monomials in standardized state up to a total degree.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialBasis {
    exponents: Vec<Vec<u8>>,
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl PolynomialBasis {
    /// Fits the standardization to the rows of `xs` (`m` values per row)
    /// selected by `rows`. Components with no spread contribute only the
    /// constant.
    pub fn fit(xs: &[f64], m: usize, rows: &[usize], degree: u8) -> Self {
        let n = rows.len().max(1) as f64;
        let mut center = vec![0.0; m];
        for &r in rows {
            for k in 0..m {
                center[k] += xs[r * m + k];
            }
        }
        center.iter_mut().for_each(|c| *c /= n);
        let mut scale = vec![0.0; m];
        for &r in rows {
            for k in 0..m {
                let dev = xs[r * m + k] - center[k];
                scale[k] += dev * dev;
            }
        }
        let active: Vec<bool> = scale
            .iter_mut()
            .zip(&center)
            .map(|(s, c)| {
                *s = (*s / n).sqrt();
                *s > 1e-12 * (1.0 + c.abs())
            })
            .collect();
        let mut exponents = Vec::new();
        let mut current = vec![0u8; m];
        enumerate(&mut current, 0, degree, &active, &mut exponents);
        exponents.sort_by_key(|e| e.iter().map(|&v| v as u32).sum::<u32>());
        PolynomialBasis { exponents, center, scale }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let z: Vec<f64> = x
            .iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(v, (c, s))| if *s > 0.0 { (v - c) / s } else { 0.0 })
            .collect();
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e.iter().zip(&z).map(|(&k, zi)| zi.powi(k as i32)).product();
        }
    }
}

fn enumerate(current: &mut Vec<u8>, axis: usize, budget: u8, active: &[bool], out: &mut Vec<Vec<u8>>) {
    if axis == current.len() {
        out.push(current.clone());
        return;
    }
    let top = if active[axis] { budget } else { 0 };
    for k in 0..=top {
        current[axis] = k;
        enumerate(current, axis + 1, budget - k, active, out);
    }
    current[axis] = 0;
}

/// Conditional-expectation estimator: regresses `targets` (row-major,
/// `q` columns per row) on the basis over `rows` and returns fitted values
/// for every row of `xs`.
///
/// Sums run over `rows` in order, so the result is reproducible.
pub fn project(basis: &PolynomialBasis, xs: &[f64], m: usize, rows: &[usize], targets: &[f64], q: usize) -> Result<Vec<f64>> {
    let nb = basis.len();
    if rows.len() < nb {
        return Err(Error::RankDeficient(format!("{} samples for {nb} basis functions", rows.len())));
    }
    let n_all = xs.len() / m;
    let mut phi = vec![0.0; n_all * nb];
    for (r, chunk) in phi.chunks_mut(nb).enumerate() {
        basis.eval_into(&xs[r * m..(r + 1) * m], chunk);
    }
    let n = rows.len() as f64;
    let mut gram = DMatrix::<f64>::zeros(nb, nb);
    let mut rhs = DMatrix::<f64>::zeros(nb, q);
    for &r in rows {
        let f = &phi[r * nb..(r + 1) * nb];
        let y = &targets[r * q..(r + 1) * q];
        for a in 0..nb {
            for b in a..nb {
                gram[(a, b)] += f[a] * f[b];
            }
            for c in 0..q {
                rhs[(a, c)] += f[a] * y[c];
            }
        }
    }
    for a in 0..nb {
        for b in a..nb {
            let v = gram[(a, b)] / n;
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
        gram[(a, a)] += RIDGE;
    }
    rhs /= n;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("normal equations are not positive definite".into()))?;
    let coef = chol.solve(&rhs);
    let mut fitted = vec![0.0; n_all * q];
    for r in 0..n_all {
        let f = DVector::from_column_slice(&phi[r * nb..(r + 1) * nb]);
        for c in 0..q {
            fitted[r * q + c] = coef.column(c).dot(&f);
        }
    }
    Ok(fitted)
}
