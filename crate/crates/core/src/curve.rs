//! Discrete forward-curve space: a uniform maturity grid carrying sampled
//! curves, with evaluation, the shift semigroup, the derivative operator,
//! the weighted Sobolev-type norm and the HJM bilinear map
//! `S(f, g)(x) = f(x)·∫_0^x g`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::closed_form::ClosedForm;
use crate::error::{Error, Result};

/// Relative slack used when deciding whether a maturity sits on a grid node.
const NODE_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightKind {
    /// `w(x) = (1 + x)^α`, requires `α > 3`.
    Polynomial,
    /// `w(x) = e^{αx}`, requires `α > 0`.
    Exponential,
}

/// Uniform maturity grid `x_i = i·Δx` on `[0, x_max]` with the norm weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaturityGrid {
    x_max: f64,
    n_points: usize,
    weight_alpha: f64,
    weight_kind: WeightKind,
}

impl Default for MaturityGrid {
    fn default() -> Self {
        MaturityGrid {
            x_max: 20.0,
            n_points: 256,
            weight_alpha: 4.0,
            weight_kind: WeightKind::Polynomial,
        }
    }
}

impl MaturityGrid {
    pub fn new(x_max: f64, n_points: usize, weight_alpha: f64) -> Result<Self> {
        Self::with_weight(x_max, n_points, weight_alpha, WeightKind::Polynomial)
    }

    pub fn with_weight(
        x_max: f64,
        n_points: usize,
        weight_alpha: f64,
        weight_kind: WeightKind,
    ) -> Result<Self> {
        if !(x_max.is_finite() && x_max > 0.0) {
            return Err(Error::Domain(format!("x_max must be positive, got {x_max}")));
        }
        if n_points < 16 {
            return Err(Error::Domain(format!("n_points must be >= 16, got {n_points}")));
        }
        let ok = match weight_kind {
            WeightKind::Polynomial => weight_alpha > 3.0,
            WeightKind::Exponential => weight_alpha > 0.0,
        };
        if !ok || !weight_alpha.is_finite() {
            return Err(Error::Domain(format!(
                "weight exponent {weight_alpha} does not make w^(-1/3) integrable"
            )));
        }
        Ok(MaturityGrid {
            x_max,
            n_points,
            weight_alpha,
            weight_kind,
        })
    }

    /// Grid with spacing `dx` and `n_points` nodes, so `x_max = (n_points-1)·dx`.
    pub fn with_spacing(dx: f64, n_points: usize, weight_alpha: f64) -> Result<Self> {
        Self::new(dx * (n_points - 1) as f64, n_points, weight_alpha)
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn weight_alpha(&self) -> f64 {
        self.weight_alpha
    }

    pub fn weight_kind(&self) -> WeightKind {
        self.weight_kind
    }

    pub fn spacing(&self) -> f64 {
        self.x_max / (self.n_points - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.spacing()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.node(i)).collect()
    }

    pub fn weight(&self, x: f64) -> f64 {
        match self.weight_kind {
            WeightKind::Polynomial => (1.0 + x).powf(self.weight_alpha),
            WeightKind::Exponential => (self.weight_alpha * x).exp(),
        }
    }

    /// Same interval, half the spacing.
    pub fn refined(&self) -> MaturityGrid {
        MaturityGrid {
            n_points: 2 * self.n_points - 1,
            ..self.clone()
        }
    }

    /// Index of the node at `x`, if `x` is a node up to rounding.
    pub fn node_index(&self, x: f64) -> Option<usize> {
        let r = x / self.spacing();
        let i = r.round();
        if (r - i).abs() <= NODE_SNAP && i >= 0.0 && (i as usize) < self.n_points {
            Some(i as usize)
        } else {
            None
        }
    }

    /// Nearest node to `x` (clamped to the grid).
    pub fn nearest_node(&self, x: f64) -> usize {
        let i = (x / self.spacing()).round().max(0.0) as usize;
        i.min(self.n_points - 1)
    }

    /// Trapezoid quadrature weights (including `Δx`).
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let dx = self.spacing();
        let mut w = vec![dx; self.n_points];
        w[0] = 0.5 * dx;
        w[self.n_points - 1] = 0.5 * dx;
        w
    }

    /// Whether `t` is an integer number of grid cells.
    pub fn is_cell_multiple(&self, t: f64) -> Option<usize> {
        let r = t / self.spacing();
        let k = r.round();
        ((r - k).abs() <= NODE_SNAP && k >= 0.0).then_some(k as usize)
    }
}

/// A forward curve sampled on a [`MaturityGrid`], optionally carrying an
/// exact analytic descriptor. When the descriptor is present the samples are
/// always its evaluations at the nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCurve {
    grid: Arc<MaturityGrid>,
    values: Vec<f64>,
    closed_form: Option<ClosedForm>,
}

impl ForwardCurve {
    pub fn from_values(grid: &Arc<MaturityGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_points() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.n_points()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite curve value at node {i} (x = {})",
                grid.node(i)
            )));
        }
        Ok(ForwardCurve {
            grid: Arc::clone(grid),
            values,
            closed_form: None,
        })
    }

    pub fn from_fn(grid: &Arc<MaturityGrid>, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_values(grid, grid.nodes().into_iter().map(f).collect())
    }

    pub fn from_closed_form(grid: &Arc<MaturityGrid>, cf: ClosedForm) -> Result<Self> {
        let mut c = Self::from_values(grid, grid.nodes().into_iter().map(|x| cf.eval(x)).collect())?;
        c.closed_form = Some(cf);
        Ok(c)
    }

    pub fn zero(grid: &Arc<MaturityGrid>) -> Self {
        Self::from_closed_form(grid, ClosedForm::zero()).expect("zero curve is finite")
    }

    pub fn constant(grid: &Arc<MaturityGrid>, c: f64) -> Self {
        Self::from_closed_form(grid, ClosedForm::constant(c)).expect("constant curve is finite")
    }

    /// `coeff·e^{-decay·x}`
    pub fn exponential(grid: &Arc<MaturityGrid>, coeff: f64, decay: f64) -> Result<Self> {
        Self::from_closed_form(grid, ClosedForm::term(coeff, 0, decay))
    }

    pub fn grid(&self) -> &Arc<MaturityGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn closed_form(&self) -> Option<&ClosedForm> {
        self.closed_form.as_ref()
    }

    /// Drops the analytic descriptor, keeping only the samples.
    pub fn without_closed_form(&self) -> ForwardCurve {
        ForwardCurve {
            closed_form: None,
            ..self.clone()
        }
    }

    pub fn same_grid(&self, other: &ForwardCurve) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "grid ({}, {}) vs ({}, {})",
                self.grid.x_max(),
                self.grid.n_points(),
                other.grid.x_max(),
                other.grid.n_points()
            )))
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Point evaluation; exact at nodes, analytic when a descriptor is
    /// present, monotone cubic Hermite interpolation otherwise.
    pub fn eval(&self, x: f64) -> Result<f64> {
        let x_max = self.grid.x_max();
        if !(0.0..=x_max * (1.0 + NODE_SNAP)).contains(&x) {
            return Err(Error::Domain(format!("maturity {x} outside [0, {x_max}]")));
        }
        if let Some(i) = self.grid.node_index(x) {
            return Ok(self.values[i]);
        }
        if let Some(cf) = &self.closed_form {
            return Ok(cf.eval(x));
        }
        Ok(self.interpolate(x))
    }

    fn interpolate(&self, x: f64) -> f64 {
        let n = self.values.len();
        let dx = self.grid.spacing();
        let k = ((x / dx).floor() as usize).min(n - 2);
        let t = (x - k as f64 * dx) / dx;
        let (d0, d1) = (self.pchip_slope(k), self.pchip_slope(k + 1));
        let (y0, y1) = (self.values[k], self.values[k + 1]);
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * dx * d0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * dx * d1
    }

    /// Fritsch–Carlson slope at node `k` (uniform spacing).
    fn pchip_slope(&self, k: usize) -> f64 {
        let y = &self.values;
        let n = y.len();
        let dx = self.grid.spacing();
        let secant = |i: usize| (y[i + 1] - y[i]) / dx;
        if k == 0 || k == n - 1 {
            let (d0, d1) = if k == 0 {
                (secant(0), secant(1))
            } else {
                (secant(n - 2), secant(n - 3))
            };
            let d = 0.5 * (3.0 * d0 - d1);
            if d.signum() != d0.signum() {
                0.0
            } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
                3.0 * d0
            } else {
                d
            }
        } else {
            let (a, b) = (secant(k - 1), secant(k));
            if a * b <= 0.0 {
                0.0
            } else {
                2.0 / (1.0 / a + 1.0 / b)
            }
        }
    }

    /// `S(t)h(x) = h(t + x)`, with flat continuation of the last sample
    /// beyond `x_max` for curves without a descriptor.
    pub fn shift(&self, t: f64) -> Result<ForwardCurve> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("shift by negative time {t}")));
        }
        if let Some(cf) = &self.closed_form {
            return ForwardCurve::from_closed_form(&self.grid, cf.shifted(t));
        }
        let n = self.values.len();
        let last = self.values[n - 1];
        let values = if let Some(k) = self.grid.is_cell_multiple(t) {
            (0..n).map(|i| if i + k < n { self.values[i + k] } else { last }).collect()
        } else {
            let x_max = self.grid.x_max();
            self.grid
                .nodes()
                .into_iter()
                .map(|x| {
                    let y = x + t;
                    if y >= x_max {
                        last
                    } else {
                        self.interpolate(y)
                    }
                })
                .collect()
        };
        ForwardCurve::from_values(&self.grid, values)
    }

    /// `Ah = h'`: analytic with a descriptor, otherwise second-order central
    /// differences inside and second-order one-sided stencils at the ends.
    pub fn derivative(&self) -> ForwardCurve {
        if let Some(cf) = &self.closed_form {
            return ForwardCurve::from_closed_form(&self.grid, cf.derivative())
                .expect("derivative of a finite descriptor is finite");
        }
        ForwardCurve {
            grid: Arc::clone(&self.grid),
            values: self.stencil_derivative(),
            closed_form: None,
        }
    }

    fn stencil_derivative(&self) -> Vec<f64> {
        let y = &self.values;
        let n = y.len();
        let inv = 1.0 / (2.0 * self.grid.spacing());
        let mut d = vec![0.0; n];
        d[0] = (-3.0 * y[0] + 4.0 * y[1] - y[2]) * inv;
        d[n - 1] = (3.0 * y[n - 1] - 4.0 * y[n - 2] + y[n - 3]) * inv;
        for i in 1..n - 1 {
            d[i] = (y[i + 1] - y[i - 1]) * inv;
        }
        d
    }

    /// `‖h‖_w = (h(0)² + ∫ |h'|² w dx)^{1/2}` with trapezoid quadrature.
    pub fn hw_norm(&self) -> f64 {
        let d = self.derivative();
        let q: f64 = self
            .grid
            .trapezoid_weights()
            .iter()
            .zip(self.grid.nodes())
            .zip(d.values())
            .map(|((tw, x), dv)| tw * self.grid.weight(x) * dv * dv)
            .sum();
        (self.values[0] * self.values[0] + q).sqrt()
    }

    pub fn scale(&self, s: f64) -> ForwardCurve {
        match &self.closed_form {
            Some(cf) => ForwardCurve::from_closed_form(&self.grid, cf.scaled(s))
                .expect("scaled finite descriptor"),
            None => ForwardCurve {
                grid: Arc::clone(&self.grid),
                values: self.values.iter().map(|v| v * s).collect(),
                closed_form: None,
            },
        }
    }

    /// `a·self + b·other`
    pub fn combine(&self, a: f64, other: &ForwardCurve, b: f64) -> Result<ForwardCurve> {
        self.same_grid(other)?;
        match (&self.closed_form, &other.closed_form) {
            (Some(f), Some(g)) => ForwardCurve::from_closed_form(&self.grid, f.combine(a, g, b)),
            _ => ForwardCurve::from_values(
                &self.grid,
                self.values
                    .iter()
                    .zip(&other.values)
                    .map(|(x, y)| a * x + b * y)
                    .collect(),
            ),
        }
    }

    pub fn add(&self, other: &ForwardCurve) -> Result<ForwardCurve> {
        self.combine(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &ForwardCurve) -> Result<ForwardCurve> {
        self.combine(1.0, other, -1.0)
    }

    /// `Σ c_k·f_k`; all curves must share one grid.
    pub fn linear_combination(
        grid: &Arc<MaturityGrid>,
        terms: &[(f64, &ForwardCurve)],
    ) -> Result<ForwardCurve> {
        terms
            .iter()
            .try_fold(ForwardCurve::zero(grid), |acc, (c, f)| acc.combine(1.0, f, *c))
    }

    /// Pointwise product.
    pub fn product(&self, other: &ForwardCurve) -> Result<ForwardCurve> {
        self.same_grid(other)?;
        if let (Some(f), Some(g)) = (&self.closed_form, &other.closed_form) {
            if let Some(p) = f.product(g) {
                return ForwardCurve::from_closed_form(&self.grid, p);
            }
        }
        ForwardCurve::from_values(
            &self.grid,
            self.values.iter().zip(&other.values).map(|(x, y)| x * y).collect(),
        )
    }

    /// Cumulative trapezoid integral `x ↦ ∫_0^x h` on the grid.
    pub fn cumulative_trapezoid(&self) -> ForwardCurve {
        let half = 0.5 * self.grid.spacing();
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.values.len());
        out.push(0.0);
        for w in self.values.windows(2) {
            acc += half * (w[0] + w[1]);
            out.push(acc);
        }
        ForwardCurve {
            grid: Arc::clone(&self.grid),
            values: out,
            closed_form: None,
        }
    }

    /// `x ↦ ∫_0^x h`: exact for exponential-polynomial descriptors, trapezoid
    /// otherwise.
    pub fn antiderivative(&self) -> ForwardCurve {
        if let Some(f) = self.closed_form.as_ref().and_then(ClosedForm::antiderivative) {
            if let Ok(c) = ForwardCurve::from_closed_form(&self.grid, f) {
                return c;
            }
        }
        self.cumulative_trapezoid()
    }

    /// Samples of `h'` used by the embedding: analytic when available.
    fn embedding_derivative(&self, analytic: bool) -> Vec<f64> {
        match (&self.closed_form, analytic) {
            (Some(cf), true) => {
                let d = cf.derivative();
                self.grid.nodes().into_iter().map(|x| d.eval(x)).collect()
            }
            _ => self.stencil_derivative(),
        }
    }

    /// Curve CSV: header `x,value`, one row per node.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,value\n");
        for (x, v) in self.grid.nodes().into_iter().zip(&self.values) {
            s.push_str(&format!("{x},{v}\n"));
        }
        s
    }

    /// Reads a curve CSV (header `x,value`; `#` lines are comments). The grid
    /// is inferred from the rows and must be uniform starting at 0.
    pub fn from_csv(text: &str, weight_alpha: f64) -> Result<ForwardCurve> {
        let mut rows = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        match rows.next() {
            Some("x,value") => {}
            other => {
                return Err(Error::Config(format!(
                    "curve CSV must start with header `x,value`, found {other:?}"
                )))
            }
        }
        let mut xs = Vec::new();
        let mut vs = Vec::new();
        for row in rows {
            let (x, v) = row
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("malformed CSV row `{row}`")))?;
            xs.push(crate::closed_form::parse_f64(x, "CSV x")?);
            vs.push(crate::closed_form::parse_f64(v, "CSV value")?);
        }
        let grid = Arc::new(grid_from_nodes(&xs, weight_alpha)?);
        ForwardCurve::from_values(&grid, vs)
    }
}

pub(crate) fn grid_from_nodes(xs: &[f64], weight_alpha: f64) -> Result<MaturityGrid> {
    if xs.len() < 16 || xs[0] != 0.0 {
        return Err(Error::Config(
            "curve rows must start at x = 0 and have at least 16 nodes".into(),
        ));
    }
    let grid = MaturityGrid::new(*xs.last().unwrap(), xs.len(), weight_alpha)?;
    for (i, x) in xs.iter().enumerate() {
        if (x - grid.node(i)).abs() > 1e-9 * grid.x_max() {
            return Err(Error::Config(format!("non-uniform maturity {x} at row {i}")));
        }
    }
    Ok(grid)
}

/// `S(f, g)(x) = f(x)·∫_0^x g`, with the integral by cumulative trapezoid.
pub fn hjm_bilinear(f: &ForwardCurve, g: &ForwardCurve) -> Result<ForwardCurve> {
    f.same_grid(g)?;
    let int_g = g.cumulative_trapezoid();
    ForwardCurve::from_values(
        f.grid(),
        f.values().iter().zip(int_g.values()).map(|(a, b)| a * b).collect(),
    )
}

/// Exact `S(f, g)` when both arguments are exponential-polynomial.
pub fn hjm_bilinear_exact(f: &ForwardCurve, g: &ForwardCurve) -> Result<Option<ForwardCurve>> {
    f.same_grid(g)?;
    let (Some(fc), Some(gc)) = (f.closed_form(), g.closed_form()) else {
        return Ok(None);
    };
    let Some(prod) = gc.antiderivative().and_then(|ig| fc.product(&ig)) else {
        return Ok(None);
    };
    ForwardCurve::from_closed_form(f.grid(), prod).map(Some)
}

/// `S(f, g)`, exact when possible and by trapezoid otherwise.
pub fn hjm_bilinear_best(f: &ForwardCurve, g: &ForwardCurve) -> Result<ForwardCurve> {
    match hjm_bilinear_exact(f, g)? {
        Some(s) => Ok(s),
        None => hjm_bilinear(f, g),
    }
}

/// `‖A S(f, g) − S(Af, g) − S(f, Ag) − f·g(0)‖∞` on the sampled curves
/// (trapezoid `S`, stencil `A`).
pub fn drift_identity_residual(f: &ForwardCurve, g: &ForwardCurve) -> Result<f64> {
    let (f, g) = (f.without_closed_form(), g.without_closed_form());
    let lhs = hjm_bilinear(&f, &g)?.derivative();
    let rhs = hjm_bilinear(&f.derivative(), &g)?
        .add(&hjm_bilinear(&f, &g.derivative())?)?
        .combine(1.0, &f, g.values()[0])?;
    Ok(lhs.sub(&rhs)?.sup_norm())
}

/// Finite-dimensional image of curves under `h ↦ (h(0), h'(x_i)·√(w(x_i)·ω_i))`
/// with trapezoid weights `ω_i`, so that Euclidean inner products are the
/// grid version of the `H_w` inner product and `‖embed(h)‖ = hw_norm(h)`.
///
/// Derivatives are analytic only when every curve carries a descriptor;
/// otherwise all curves use the same stencil so the map stays linear.
pub fn embed(curves: &[&ForwardCurve]) -> Result<DMatrix<f64>> {
    let Some(first) = curves.first() else {
        return Err(Error::Precondition("embedding of an empty curve list".into()));
    };
    for c in curves {
        first.same_grid(c)?;
    }
    let grid = first.grid();
    let analytic = curves.iter().all(|c| c.closed_form().is_some());
    let scale: Vec<f64> = grid
        .trapezoid_weights()
        .iter()
        .zip(grid.nodes())
        .map(|(tw, x)| (tw * grid.weight(x)).sqrt())
        .collect();
    let n = grid.n_points();
    let mut m = DMatrix::zeros(n + 1, curves.len());
    for (j, c) in curves.iter().enumerate() {
        m[(0, j)] = c.values()[0];
        for (i, (d, s)) in c.embedding_derivative(analytic).iter().zip(&scale).enumerate() {
            m[(i + 1, j)] = d * s;
        }
    }
    Ok(m)
}

/// Least-squares projection of a curve onto the span of others, measured in
/// the embedded inner product.
#[derive(Debug, Clone)]
pub struct Projection {
    pub coefficients: Vec<f64>,
    pub residual_norm: f64,
    pub target_norm: f64,
}

impl Projection {
    /// `‖target − P target‖ / ‖target‖`, or 0 for a zero target.
    pub fn relative_residual(&self) -> f64 {
        if self.target_norm == 0.0 {
            0.0
        } else {
            self.residual_norm / self.target_norm
        }
    }
}

pub fn project_onto_span(target: &ForwardCurve, basis: &[&ForwardCurve]) -> Result<Projection> {
    let mut all: Vec<&ForwardCurve> = basis.to_vec();
    all.push(target);
    let m = embed(&all)?;
    let k = basis.len();
    let b: DVector<f64> = m.column(k).into_owned();
    let target_norm = b.norm();
    if k == 0 {
        return Ok(Projection {
            coefficients: vec![],
            residual_norm: target_norm,
            target_norm,
        });
    }
    let a = m.columns(0, k).into_owned();
    let coefficients = least_squares(&a, &b)?;
    let resid = &b - &a * DVector::from_column_slice(&coefficients);
    Ok(Projection {
        coefficients,
        residual_norm: resid.norm(),
        target_norm,
    })
}

/// Minimum-norm least-squares solution of `a·c ≈ b` via SVD.
pub(crate) fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Vec<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-13 * (a.nrows().max(a.ncols()) as f64);
    let sol = svd
        .solve(b, eps.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Numerical(format!("least squares failed: {e}")))?;
    Ok(sol.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Arc<MaturityGrid> {
        Arc::new(MaturityGrid::new(20.0, n, 4.0).unwrap())
    }

    fn sampled_exp(g: &Arc<MaturityGrid>, decay: f64) -> ForwardCurve {
        ForwardCurve::from_fn(g, |x| (-decay * x).exp()).unwrap()
    }

    #[test]
    fn grid_invariants_are_checked() {
        assert!(MaturityGrid::new(20.0, 15, 4.0).is_err());
        assert!(MaturityGrid::new(0.0, 64, 4.0).is_err());
        assert!(MaturityGrid::new(20.0, 64, 3.0).is_err());
        assert!(MaturityGrid::with_weight(20.0, 64, 0.1, WeightKind::Exponential).is_ok());
        let g = MaturityGrid::default();
        assert_eq!(g.n_points(), 256);
        assert_eq!(g.refined().n_points(), 511);
        assert_eq!(g.refined().spacing(), g.spacing() / 2.0);
    }

    #[test]
    fn eval_examples() {
        let g = grid(256);
        assert_eq!(ForwardCurve::constant(&g, 1.0).eval(2.0).unwrap(), 1.0);
        let h = sampled_exp(&g, 1.0);
        assert!(matches!(h.eval(20.5), Err(Error::Domain(_))));
        assert!(matches!(h.eval(-0.1), Err(Error::Domain(_))));
        // interpolation between nodes is accurate for smooth data
        let x = 1.234;
        assert!((h.eval(x).unwrap() - (-x).exp()).abs() < 1e-4);
    }

    #[test]
    fn eval_at_nodes_is_bit_exact() {
        let g = grid(64);
        let h = ForwardCurve::from_fn(&g, |x| (3.0 * x).sin() + 0.1 * x).unwrap();
        for i in 0..64 {
            assert_eq!(h.eval(g.node(i)).unwrap().to_bits(), h.values()[i].to_bits());
        }
    }

    #[test]
    fn shift_examples() {
        let g = grid(128);
        let h = ForwardCurve::from_fn(&g, |x| (0.3 * x).cos()).unwrap();
        assert_eq!(h.shift(0.0).unwrap(), h);
        assert!(matches!(h.shift(-1.0), Err(Error::Domain(_))));

        let e = ForwardCurve::exponential(&g, 1.0, 0.7).unwrap();
        let s = e.shift(1.3).unwrap();
        for (x, v) in g.nodes().into_iter().zip(s.values()) {
            let want = (-0.7f64 * 1.3).exp() * (-0.7 * x).exp();
            assert!((v - want).abs() < 1e-15);
        }

        // integer-cell shifts use flat continuation
        let dx = g.spacing();
        let s3 = h.shift(3.0 * dx).unwrap();
        assert_eq!(s3.values()[0], h.values()[3]);
        assert_eq!(s3.values()[127], h.values()[127]);
        assert_eq!(s3.values()[125], h.values()[127]);
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        let g = grid(64);
        let c = ForwardCurve::from_values(&g, vec![2.5; 64]).unwrap();
        assert!(c.derivative().values().iter().all(|v| v.abs() < 1e-12));
        assert!(ForwardCurve::constant(&g, 2.5).derivative().sup_norm() == 0.0);
    }

    #[test]
    fn stencil_derivative_is_second_order() {
        // analytic-derivative oracle under dyadic refinement
        let mut errs = Vec::new();
        for n in [65, 129, 257, 513] {
            let g = grid(n);
            let d = sampled_exp(&g, 1.0).derivative();
            let e = g
                .nodes()
                .into_iter()
                .zip(d.values())
                .map(|(x, v)| (v + (-x).exp()).abs())
                .fold(0.0, f64::max);
            errs.push(e);
        }
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 1.8, "order {order}");
        }
    }

    #[test]
    fn norm_examples() {
        let g = grid(256);
        assert_eq!(ForwardCurve::constant(&g, -3.0).hw_norm(), 3.0);
        let h = ForwardCurve::from_fn(&g, |x| (-x).exp() + 0.2 * (x / 3.0).sin()).unwrap();
        let n1 = h.hw_norm();
        assert!((h.scale(2.0).hw_norm() - 2.0 * n1).abs() < 1e-12 * n1);
        assert_eq!(ForwardCurve::zero(&g).hw_norm(), 0.0);
    }

    #[test]
    fn norm_of_exponential_matches_quadrature_oracle() {
        // 1 + ∫_0^20 e^{-2x}(1+x)^4 dx, from the antiderivative
        // -e^{-2x} Σ_k P^{(k)}(x)/2^{k+1} with P = (1+x)^4.
        let anti = |x: f64| {
            let u = 1.0 + x;
            let s = u.powi(4) / 2.0 + 4.0 * u.powi(3) / 4.0 + 12.0 * u * u / 8.0 + 24.0 * u / 16.0
                + 24.0 / 32.0;
            -(-2.0 * x).exp() * s
        };
        let reference = (1.0 + anti(20.0) - anti(0.0)).sqrt();
        let g = grid(256);
        let h = ForwardCurve::exponential(&g, 1.0, 1.0).unwrap();
        let got = h.hw_norm();
        assert!(((got - reference) / reference).abs() < 1e-4, "{got} vs {reference}");
    }

    #[test]
    fn bilinear_examples() {
        let g = grid(256);
        let one = ForwardCurve::constant(&g, 1.0);
        let s = hjm_bilinear(&one, &one).unwrap();
        for (x, v) in g.nodes().into_iter().zip(s.values()) {
            assert!((v - x).abs() < 1e-12);
        }
        let e = ForwardCurve::exponential(&g, 1.0, 0.5).unwrap();
        assert_eq!(hjm_bilinear(&e, &one).unwrap().values()[0], 0.0);

        let exact = hjm_bilinear_exact(&e, &e).unwrap().unwrap();
        for (x, v) in g.nodes().into_iter().zip(exact.values()) {
            let want = ((-0.5 * x).exp() - (-x).exp()) / 0.5;
            assert!((v - want).abs() < 1e-14);
        }
    }

    #[test]
    fn bilinear_trapezoid_is_second_order() {
        let a = 0.8;
        let mut errs = Vec::new();
        for n in [65, 129, 257] {
            let g = grid(n);
            let e = sampled_exp(&g, a);
            let s = hjm_bilinear(&e, &e).unwrap();
            let err = g
                .nodes()
                .into_iter()
                .zip(s.values())
                .map(|(x, v)| (v - ((-a * x).exp() - (-2.0 * a * x).exp()) / a).abs())
                .fold(0.0, f64::max);
            errs.push(err / g.spacing().powi(2));
        }
        // error / Δx² stays bounded
        assert!(errs.iter().all(|c| *c < 0.1), "{errs:?}");
    }

    #[test]
    fn drift_identity_residual_is_second_order() {
        let res: Vec<f64> = [257, 513, 1025, 2049]
            .iter()
            .map(|&n| {
                let e = ForwardCurve::exponential(&grid(n), 1.0, 1.0).unwrap();
                drift_identity_residual(&e, &e).unwrap()
            })
            .collect();
        for w in res.windows(2) {
            assert!((w[0] / w[1]).log2() >= 1.8, "{res:?}");
        }
    }

    #[test]
    fn grid_mismatch_is_structural() {
        let a = ForwardCurve::constant(&grid(64), 1.0);
        let b = ForwardCurve::constant(&grid(65), 1.0);
        assert!(matches!(hjm_bilinear(&a, &b), Err(Error::GridMismatch(_))));
        assert!(matches!(a.add(&b), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn embedding_norm_equals_hw_norm() {
        let g = grid(128);
        let h = ForwardCurve::from_fn(&g, |x| 0.03 + 0.01 * (-0.4 * x).exp()).unwrap();
        let m = embed(&[&h]).unwrap();
        assert!((m.column(0).norm() - h.hw_norm()).abs() < 1e-14);
    }

    #[test]
    fn csv_round_trip() {
        let g = grid(32);
        let h = ForwardCurve::from_fn(&g, |x| 0.01 * x.sin() + 1.0 / 3.0).unwrap();
        let back = ForwardCurve::from_csv(&format!("# comment\n{}", h.to_csv()), 4.0).unwrap();
        assert_eq!(back.values(), h.values());
        assert!(ForwardCurve::from_csv("t,value\n0,1\n", 4.0).is_err());
    }
}
