//! Classical fourth-order Runge–Kutta in maturity on a uniform grid, with
//! step doubling until two successive resolutions agree.

use nalgebra::{DMatrix, DVector};

use crate::curve::{ForwardCurve, MaturityGrid};
use crate::error::{Error, Result};

use std::sync::Arc;

/// Largest number of RK4 substeps per grid cell.
pub const MAX_SUBSTEPS: usize = 4096;

/// Default agreement target between two successive resolutions.
pub const REFINEMENT_TOL: f64 = 1e-11;

#[derive(Debug, Clone)]
pub struct OdeSolution {
    /// `values[i][k]`: component `k` at node `i`.
    pub values: Vec<Vec<f64>>,
    pub substeps: usize,
    /// Sup difference between the returned solution and the one with half
    /// as many substeps.
    pub refinement_error: f64,
}

/// Integrates the autonomous system `y' = f(y)` from `x = 0` across the grid
/// with `substeps` RK4 steps per cell. `cap` bounds `|y|` (blow-up check).
pub fn rk4_on_grid(
    f: &dyn Fn(&[f64], &mut [f64]),
    y0: &[f64],
    grid: &MaturityGrid,
    substeps: usize,
    cap: f64,
) -> Result<Vec<Vec<f64>>> {
    let n = y0.len();
    let h = grid.spacing() / substeps as f64;
    let mut y = y0.to_vec();
    let mut out = Vec::with_capacity(grid.n_points());
    out.push(y.clone());
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for cell in 0..grid.n_points() - 1 {
        for s in 0..substeps {
            f(&y, &mut k1);
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * h * k1[i];
            }
            f(&tmp, &mut k2);
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * h * k2[i];
            }
            f(&tmp, &mut k3);
            for i in 0..n {
                tmp[i] = y[i] + h * k3[i];
            }
            f(&tmp, &mut k4);
            for i in 0..n {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if y.iter().any(|v| !v.is_finite() || v.abs() > cap) {
                let x = grid.node(cell) + (s + 1) as f64 * h;
                return Err(Error::BlowUp { x, cap });
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

fn sup_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(u, v)| u.iter().zip(v).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// Doubles the substep count from 1 until successive solutions agree to
/// `tol·max(1, sup|y|)` or [`MAX_SUBSTEPS`] is reached.
pub fn integrate_refined(
    f: &dyn Fn(&[f64], &mut [f64]),
    y0: &[f64],
    grid: &MaturityGrid,
    cap: f64,
    tol: f64,
) -> Result<OdeSolution> {
    let mut m = 1;
    let mut coarse = rk4_on_grid(f, y0, grid, m, cap)?;
    loop {
        let fine = rk4_on_grid(f, y0, grid, 2 * m, cap)?;
        let err = sup_diff(&coarse, &fine);
        let scale = fine
            .iter()
            .flat_map(|v| v.iter())
            .fold(1.0f64, |s, v| s.max(v.abs()));
        m *= 2;
        if err <= tol * scale || m >= MAX_SUBSTEPS {
            return Ok(OdeSolution {
                values: fine,
                substeps: m,
                refinement_error: err,
            });
        }
        coarse = fine;
    }
}

pub(crate) fn to_curves(grid: &Arc<MaturityGrid>, values: &[Vec<f64>], d: usize) -> Result<Vec<ForwardCurve>> {
    (0..d)
        .map(|k| ForwardCurve::from_values(grid, values.iter().map(|v| v[k]).collect()))
        .collect()
}

/// Solves `Λ' = γΛ`, `Λ(0) = λ0`.
pub fn solve_linear_lambda(
    gamma: &DMatrix<f64>,
    lambda0: &[f64],
    grid: &Arc<MaturityGrid>,
) -> Result<Vec<ForwardCurve>> {
    let d = lambda0.len();
    check_square(gamma, d, "gamma")?;
    let f = |y: &[f64], out: &mut [f64]| {
        let v = gamma * DVector::from_column_slice(y);
        out.copy_from_slice(v.as_slice());
    };
    let sol = integrate_refined(&f, lambda0, grid, f64::INFINITY, REFINEMENT_TOL)?;
    to_curves(grid, &sol.values, d)
}

pub(crate) fn check_square(m: &DMatrix<f64>, d: usize, what: &str) -> Result<()> {
    if m.nrows() != d || m.ncols() != d {
        return Err(Error::Precondition(format!(
            "{what} is {}x{}, expected {d}x{d}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Riccati right-hand side `λ0_k + Σ γ^{ki}Δ_i − Σ Γ^{k,ij}Δ_iΔ_j`.
pub(crate) fn riccati_rhs<'a>(
    gamma: &'a DMatrix<f64>,
    big_gamma: &'a [DMatrix<f64>],
    lambda0: &'a [f64],
) -> impl Fn(&[f64], &mut [f64]) + 'a {
    move |y: &[f64], out: &mut [f64]| {
        let d = y.len();
        for k in 0..d {
            let mut v = lambda0[k];
            for i in 0..d {
                v += gamma[(k, i)] * y[i];
            }
            let g = &big_gamma[k];
            for i in 0..d {
                for j in 0..d {
                    v -= g[(i, j)] * y[i] * y[j];
                }
            }
            out[k] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Arc<MaturityGrid> {
        Arc::new(MaturityGrid::default())
    }

    #[test]
    fn scalar_exponential() {
        let g = grid();
        let a = 0.6;
        let l = solve_linear_lambda(&DMatrix::from_element(1, 1, -a), &[2.0], &g).unwrap();
        for (x, v) in g.nodes().into_iter().zip(l[0].values()) {
            assert!((v - 2.0 * (-a * x).exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn jordan_block_gives_x_exp() {
        // matrix-exponential oracle: exp(xJ) = e^{-αx}[[1, x], [0, 1]]
        let g = grid();
        let a = 0.5;
        let gamma = DMatrix::from_row_slice(2, 2, &[-a, 1.0, 0.0, -a]);
        let l = solve_linear_lambda(&gamma, &[0.0, 1.0], &g).unwrap();
        for (i, x) in g.nodes().into_iter().enumerate() {
            assert!((l[0].values()[i] - x * (-a * x).exp()).abs() < 1e-8);
            assert!((l[1].values()[i] - (-a * x).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_gamma_is_constant() {
        let g = grid();
        let l = solve_linear_lambda(&DMatrix::zeros(2, 2), &[1.5, -0.5], &g).unwrap();
        assert!(l[0].values().iter().all(|v| *v == 1.5));
        assert!(l[1].values().iter().all(|v| *v == -0.5));
    }

    #[test]
    fn blow_up_reports_location() {
        // Δ' = 1 + Δ² explodes at x = π/2
        let g = grid();
        let gamma = DMatrix::zeros(1, 1);
        let big = vec![DMatrix::from_element(1, 1, -1.0)];
        let f = riccati_rhs(&gamma, &big, &[1.0]);
        match rk4_on_grid(&f, &[0.0], &g, 8, 1e6) {
            Err(Error::BlowUp { x, .. }) => assert!((x - std::f64::consts::FRAC_PI_2).abs() < 0.1),
            other => panic!("{other:?}"),
        }
    }
}
