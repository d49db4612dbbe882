//! The ν-semiflow, leaf charts `(u, y) ↦ Fl_u(h0) + Σ y_kΛ_k`, projection
//! onto a leaf and tangency residuals.

use std::sync::Arc;

use nalgebra::DVector;

use crate::curve::{embed, least_squares, project_onto_span, ForwardCurve};
use crate::error::{Error, Result};
use crate::lie::{numerical_rank, DEFAULT_RANK_TOLERANCE};
use crate::model::HjmModel;

/// Tangency threshold on relative projection residuals.
pub const TANGENCY_TOL: f64 = 1e-5;

/// Distance (relative) below which a curve counts as lying on a family.
pub const ON_FAMILY_TOL: f64 = 1e-8;

const GN_MAX_ITER: usize = 50;
const GN_STEP_TOL: f64 = 1e-10;

/// One splitting step of `∂_u r = Ar + α_HJM(r)`: exact shift by `dt`, then
/// an explicit drift step evaluated at the shifted curve.
pub(crate) fn drift_step(model: &HjmModel, r: &ForwardCurve, dt: f64) -> Result<ForwardCurve> {
    let s = r.shift(dt)?;
    let a = model.hjm_drift(&s)?;
    s.combine(1.0, &a, dt)
}

fn check_steps(model: &HjmModel, u: f64, dt: f64) -> Result<usize> {
    let grid = model.grid();
    if !(u >= 0.0 && u.is_finite()) {
        return Err(Error::Domain(format!("flow time {u} must be finite and non-negative")));
    }
    if grid.is_cell_multiple(dt).map_or(true, |k| k == 0) {
        return Err(Error::Config(format!(
            "flow step {dt} is not a positive multiple of the grid spacing {}",
            grid.spacing()
        )));
    }
    let n = (u / dt).round();
    if (n * dt - u).abs() > 1e-9 * dt.max(u) {
        return Err(Error::Config(format!("flow time {u} is not a multiple of the step {dt}")));
    }
    Ok(n as usize)
}

/// `Fl_u(h0)` by repeated [`drift_step`] on the sampled curve.
pub fn nu_semiflow_splitting(model: &HjmModel, h0: &ForwardCurve, u: f64, dt: f64) -> Result<ForwardCurve> {
    let n = check_steps(model, u, dt)?;
    model.sigma(h0)?;
    let mut r = h0.without_closed_form();
    for k in 0..n {
        r = drift_step(model, &r, dt).map_err(|e| with_exit_time(e, (k + 1) as f64 * dt))?;
    }
    Ok(r)
}

fn with_exit_time(e: Error, t: f64) -> Error {
    match e {
        Error::Region(m) => Error::Region(format!("flow left the region at u = {t}: {m}")),
        other => other,
    }
}

/// Mild solution `S(u)h0 + F(·+u) − F` with `F = ∫_0^x α_HJM` for
/// state-independent volatility.
fn mild_flow(model: &HjmModel, h0: &ForwardCurve, u: f64) -> Result<ForwardCurve> {
    let alpha = model.hjm_drift(h0)?;
    let f = alpha.antiderivative();
    h0.shift(u)?.add(&f.shift(u)?.sub(&f)?)
}

/// The semiflow of `ν`. Deterministic volatility uses the closed-form mild
/// solution; otherwise the grid-locked splitting scheme with step `dt`.
pub fn nu_semiflow(model: &HjmModel, h0: &ForwardCurve, u: f64, dt: f64) -> Result<ForwardCurve> {
    check_steps(model, u, dt)?;
    if model.has_deterministic_volatility() {
        mild_flow(model, h0, u)
    } else {
        nu_semiflow_splitting(model, h0, u, dt)
    }
}

/// `(u, y) ↦ Fl_u(h0) + Σ y_kΛ_k` on `[0, u_max] × [−y_bound, y_bound]ᵈ`.
#[derive(Debug, Clone)]
pub struct LeafChart {
    model: Arc<HjmModel>,
    base: ForwardCurve,
    lambdas: Vec<ForwardCurve>,
    dt: f64,
    u_max: f64,
    y_bound: f64,
    /// `Fl_{k·dt}(h0)` for the splitting flow; empty for the mild flow.
    flow: Vec<ForwardCurve>,
}

impl LeafChart {
    /// Defaults: `u_max = 1`, `y_bound = ‖h0‖∞`.
    pub fn new(
        model: Arc<HjmModel>,
        base: ForwardCurve,
        lambdas: Vec<ForwardCurve>,
        u_max: Option<f64>,
        y_bound: Option<f64>,
    ) -> Result<Self> {
        base.same_grid_as(model.grid())?;
        model.sigma(&base)?;
        let dt = model.grid().spacing();
        let u_max = u_max.unwrap_or(1.0);
        let y_bound = y_bound.unwrap_or_else(|| base.sup_norm().max(f64::MIN_POSITIVE));
        if !(u_max > 0.0 && y_bound > 0.0) {
            return Err(Error::Domain("chart ranges must be positive".into()));
        }
        let mut flow = Vec::new();
        if !model.has_deterministic_volatility() {
            let steps = (u_max / dt).ceil() as usize + 1;
            flow.push(base.clone());
            let mut r = base.without_closed_form();
            for k in 0..steps {
                r = drift_step(&model, &r, dt).map_err(|e| with_exit_time(e, (k + 1) as f64 * dt))?;
                flow.push(r.clone());
            }
        }
        let chart = LeafChart { model, base, lambdas, dt, u_max, y_bound, flow };
        let mut tangent = vec![chart.model.ito_drift(&chart.base)?];
        tangent.extend(chart.lambdas.iter().cloned());
        let (r, _) = numerical_rank(&tangent, DEFAULT_RANK_TOLERANCE)?;
        if r != chart.lambdas.len() + 1 {
            return Err(Error::Construction(format!(
                "leaf tangent rank at the base point is {r}, expected {}",
                chart.lambdas.len() + 1
            )));
        }
        Ok(chart)
    }

    pub fn model(&self) -> &Arc<HjmModel> {
        &self.model
    }

    pub fn base(&self) -> &ForwardCurve {
        &self.base
    }

    pub fn lambdas(&self) -> &[ForwardCurve] {
        &self.lambdas
    }

    pub fn d(&self) -> usize {
        self.lambdas.len()
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn y_bound(&self) -> f64 {
        self.y_bound
    }

    /// `Fl_u(h0)` for any `u ∈ [0, u_max]`.
    pub fn flow_at(&self, u: f64) -> Result<ForwardCurve> {
        if !(0.0..=self.u_max * (1.0 + 1e-12)).contains(&u) {
            return Err(Error::Domain(format!("u = {u} outside [0, {}]", self.u_max)));
        }
        self.flow_unchecked(u)
    }

    fn flow_unchecked(&self, u: f64) -> Result<ForwardCurve> {
        if self.flow.is_empty() {
            return mild_flow(&self.model, &self.base, u);
        }
        let mut k = (u / self.dt).floor() as usize;
        let mut r = u - k as f64 * self.dt;
        if r > self.dt * (1.0 - 1e-12) {
            k += 1;
            r = 0.0;
        }
        if r < 1e-12 * self.dt {
            r = 0.0;
        }
        let k = k.min(self.flow.len() - 1);
        if r == 0.0 {
            return Ok(self.flow[k].clone());
        }
        drift_step(&self.model, &self.flow[k], r)
    }

    /// `α(u, y)`.
    pub fn eval(&self, u: f64, y: &[f64]) -> Result<ForwardCurve> {
        if y.len() != self.d() {
            return Err(Error::Precondition(format!("{} chart coordinates for {} directions", y.len(), self.d())));
        }
        if let Some(v) = y.iter().find(|v| !(v.abs() <= self.y_bound)) {
            return Err(Error::Domain(format!("y = {v} outside [-{b}, {b}]", b = self.y_bound)));
        }
        let f = self.flow_at(u)?;
        self.add_directions(f, y)
    }

    fn add_directions(&self, mut f: ForwardCurve, y: &[f64]) -> Result<ForwardCurve> {
        for (l, c) in self.lambdas.iter().zip(y) {
            if *c != 0.0 {
                f = f.combine(1.0, l, *c)?;
            }
        }
        Ok(f)
    }

    fn du(&self, u: f64) -> Result<ForwardCurve> {
        let step = 1e-5 * self.dt;
        let (a, b) = if u + step <= self.u_max + self.dt {
            (u, u + step)
        } else {
            (u - step, u)
        };
        let fa = self.flow_unchecked(a)?.without_closed_form();
        let fb = self.flow_unchecked(b)?.without_closed_form();
        fb.combine(1.0 / step, &fa, -1.0 / step)
    }

    /// Columns `∂_uα, ∂_{y_1}α, …, ∂_{y_d}α` (the `u` column by a forward
    /// difference).
    pub fn jacobian(&self, u: f64, _y: &[f64]) -> Result<Vec<ForwardCurve>> {
        let mut cols = vec![self.du(u)?];
        cols.extend(self.lambdas.iter().cloned());
        Ok(cols)
    }
}

/// `α(u, y)` of a chart.
pub fn leaf_parametrization(chart: &LeafChart, u: f64, y: &[f64]) -> Result<ForwardCurve> {
    chart.eval(u, y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafProjection {
    pub u: f64,
    pub y: Vec<f64>,
    /// Embedded-norm distance `‖h − α(u, y)‖`.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Gauss–Newton minimization of `‖h − α(u, y)‖` started from the linear
/// projection of `h − h0` at `u = 0`. The flow time is kept in `[0, u_max]`.
pub fn project_to_leaf(h: &ForwardCurve, chart: &LeafChart) -> Result<LeafProjection> {
    h.same_grid(chart.base())?;
    let d = chart.d();
    let target = h.without_closed_form();
    let residual_vec = |u: f64, y: &[f64]| -> Result<DVector<f64>> {
        let a = chart.add_directions(chart.flow_unchecked(u)?, y)?.without_closed_form();
        let diff = target.sub(&a)?;
        Ok(embed(&[&diff])?.column(0).into_owned())
    };
    let sampled: Vec<ForwardCurve> = chart.lambdas.iter().map(|l| l.without_closed_form()).collect();
    let refs: Vec<&ForwardCurve> = sampled.iter().collect();
    let start = target.sub(&chart.base().without_closed_form())?;
    let mut y = if d == 0 { vec![] } else { project_onto_span(&start, &refs)?.coefficients };
    let mut u = 0.0;
    let mut r = residual_vec(u, &y)?;
    let mut best = (r.norm(), u, y.clone());
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=GN_MAX_ITER {
        iterations = it;
        let mut cols = vec![chart.du(u)?];
        cols.extend(sampled.iter().cloned());
        let crefs: Vec<&ForwardCurve> = cols.iter().collect();
        let j = embed(&crefs)?;
        let mut step = least_squares(&j, &r)?;
        // keep u inside its range
        let new_u = (u + step[0]).clamp(0.0, chart.u_max());
        step[0] = new_u - u;
        let norm = step.iter().map(|s| s * s).sum::<f64>().sqrt();
        u = new_u;
        for (yk, s) in y.iter_mut().zip(&step[1..]) {
            *yk += s;
        }
        r = residual_vec(u, &y)?;
        if r.norm() < best.0 {
            best = (r.norm(), u, y.clone());
        }
        if norm < GN_STEP_TOL {
            converged = true;
            break;
        }
    }
    Ok(LeafProjection {
        u: best.1,
        y: best.2,
        residual: best.0,
        converged,
        iterations,
    })
}

/// A finite-dimensional family of curves.
#[derive(Debug, Clone, Copy)]
pub enum Family<'a> {
    /// A linear span.
    Span(&'a [ForwardCurve]),
    /// A leaf chart.
    Chart(&'a LeafChart),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangencyReport {
    /// Relative distance of `h` from the family.
    pub distance: f64,
    pub mu_residual: f64,
    pub sigma_residuals: Vec<f64>,
    pub consistent: bool,
}

/// Relative residuals of `μ(h)` and each `σʲ(h)` against the tangent space
/// of the family at `h`.
pub fn tangency_check(model: &HjmModel, family: Family<'_>, h: &ForwardCurve) -> Result<TangencyReport> {
    let scale = embed(&[h])?.column(0).norm().max(f64::MIN_POSITIVE);
    let (distance, tangent) = match family {
        Family::Span(curves) => {
            let refs: Vec<&ForwardCurve> = curves.iter().collect();
            let p = project_onto_span(h, &refs)?;
            (p.residual_norm / scale, curves.to_vec())
        }
        Family::Chart(chart) => {
            let p = project_to_leaf(h, chart)?;
            (p.residual / scale, chart.jacobian(p.u, &p.y)?)
        }
    };
    if distance >= ON_FAMILY_TOL {
        return Err(Error::Precondition(format!(
            "curve is not on the family: relative distance {distance:e}"
        )));
    }
    let refs: Vec<&ForwardCurve> = tangent.iter().collect();
    let mu_residual = project_onto_span(&model.stratonovich_drift(h)?, &refs)?.relative_residual();
    let sigma_residuals = model
        .sigma(h)?
        .iter()
        .map(|s| Ok(project_onto_span(s, &refs)?.relative_residual()))
        .collect::<Result<Vec<_>>>()?;
    let consistent = mu_residual < TANGENCY_TOL && sigma_residuals.iter().all(|r| *r < TANGENCY_TOL);
    Ok(TangencyReport {
        distance,
        mu_residual,
        sigma_residuals,
        consistent,
    })
}
