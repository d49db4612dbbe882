//! Finite-dimensional realizations: constant volatility directions, the
//! linear and Riccati systems they satisfy, affine realizations, the
//! Gaussian global leaf, leaf charts and tangency checks.

pub mod leaf;
pub mod ode;
pub mod svensson;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::closed_form::ClosedForm;
use crate::curve::{embed, project_onto_span, ForwardCurve, MaturityGrid};
use crate::error::{Error, Result};
use crate::functional::{FunctionalKind, LinearFunctional};
use crate::lie::{LieAlgebraReport, DEFAULT_RANK_TOLERANCE};
use crate::model::{CoefficientFn, HjmModel, PhiTerm, StateRegion};

pub use leaf::{
    leaf_parametrization, nu_semiflow, project_to_leaf, tangency_check, Family, LeafChart,
    LeafProjection, TangencyReport,
};
pub use ode::{integrate_refined, rk4_on_grid, solve_linear_lambda, OdeSolution};
pub use svensson::{svensson_basis, svensson_model, BracketObservation, SvenssonSetup};

/// Residual threshold for span-membership decisions.
pub const SPAN_TOL: f64 = 1e-6;

/// Default `|Δ|` bound of the Riccati solver.
pub const BLOW_UP_CAP: f64 = 1e6;

/// Gram condition number above which the constancy of `γ, Γ` is not supported.
pub const GRAM_CONDITION_LIMIT: f64 = 1e10;

/// Parameters of the CIR forward-curve basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CirParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d_level: f64,
}

impl CirParams {
    pub fn new(a: f64, b: f64, c: f64, d_level: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && c > 0.0 && d_level >= 0.0)
            || ![a, b, c, d_level].iter().all(|v| v.is_finite())
        {
            return Err(Error::Domain(format!(
                "CIR parameters need a, b, c > 0 and d >= 0, got ({a}, {b}, {c}, {d_level})"
            )));
        }
        Ok(CirParams { a, b, c, d_level })
    }
}

/// `g0 = d(e^{ax} − 1)/(e^{ax} + c)` and `g1 = b·e^{ax}/(e^{ax} + c)²`.
pub fn cir_forward_basis(p: &CirParams, grid: &Arc<MaturityGrid>) -> Result<(ForwardCurve, ForwardCurve)> {
    let g0 = ClosedForm::rational(p.a, p.c, 1, vec![-p.d_level, p.d_level]);
    let g1 = ClosedForm::rational(p.a, p.c, 2, vec![0.0, p.b]);
    Ok((
        ForwardCurve::from_closed_form(grid, g0)?,
        ForwardCurve::from_closed_form(grid, g1)?,
    ))
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub deltas: Vec<ForwardCurve>,
    pub lambdas: Vec<ForwardCurve>,
    pub substeps: usize,
    pub refinement_error: f64,
    pub warnings: Vec<String>,
}

/// Solves `Δ_k' = λ0_k + Σ γ^{ki}Δ_i − Σ Γ^{k,ij}Δ_iΔ_j`, `Δ_k(0) = 0`, and
/// returns `Λ_k = Δ_k'` evaluated from the right-hand side.
pub fn solve_riccati_delta(
    gamma: &DMatrix<f64>,
    big_gamma: &[DMatrix<f64>],
    lambda0: &[f64],
    grid: &Arc<MaturityGrid>,
    cap: f64,
) -> Result<RiccatiSolution> {
    let d = lambda0.len();
    ode::check_square(gamma, d, "gamma")?;
    if big_gamma.len() != d {
        return Err(Error::Precondition(format!(
            "big gamma has {} slices, expected {d}",
            big_gamma.len()
        )));
    }
    for g in big_gamma {
        ode::check_square(g, d, "big gamma slice")?;
    }
    let f = ode::riccati_rhs(gamma, big_gamma, lambda0);
    let sol = integrate_refined(&f, &vec![0.0; d], grid, cap, ode::REFINEMENT_TOL)?;
    let mut lam_vals = Vec::with_capacity(sol.values.len());
    let mut buf = vec![0.0; d];
    for y in &sol.values {
        f(y, &mut buf);
        lam_vals.push(buf.clone());
    }
    let deltas = ode::to_curves(grid, &sol.values, d)?;
    let lambdas = ode::to_curves(grid, &lam_vals, d)?;
    let mut warnings = gamma_warnings(gamma);
    if let Some(w) = gram_warning(&deltas)? {
        warnings.push(w);
    }
    if sol.refinement_error > 1e-9 {
        warnings.push(format!(
            "step refinement stopped at {} substeps with difference {:e}",
            sol.substeps, sol.refinement_error
        ));
    }
    Ok(RiccatiSolution {
        deltas,
        lambdas,
        substeps: sol.substeps,
        refinement_error: sol.refinement_error,
        warnings,
    })
}

fn gamma_warnings(gamma: &DMatrix<f64>) -> Vec<String> {
    if gamma.is_empty() {
        return vec![];
    }
    gamma
        .complex_eigenvalues()
        .iter()
        .filter(|e| e.re >= 0.0)
        .map(|e| {
            format!(
                "gamma eigenvalue {}{:+}i has non-negative real part; Δ may leave the smooth decaying class",
                e.re, e.im
            )
        })
        .collect()
}

/// Condition number of the Gram matrix of `{Δ_i} ∪ {Δ_iΔ_j}`.
pub fn delta_gram_condition(deltas: &[ForwardCurve]) -> Result<f64> {
    let mut all: Vec<ForwardCurve> = deltas.to_vec();
    for i in 0..deltas.len() {
        for j in i..deltas.len() {
            all.push(deltas[i].product(&deltas[j])?);
        }
    }
    let refs: Vec<&ForwardCurve> = all.iter().collect();
    let m = embed(&refs)?;
    let s = m.singular_values();
    let (hi, lo) = (s.max(), s.min());
    Ok(if lo == 0.0 { f64::INFINITY } else { (hi / lo).powi(2) })
}

fn gram_warning(deltas: &[ForwardCurve]) -> Result<Option<String>> {
    let cond = delta_gram_condition(deltas)?;
    Ok((cond > GRAM_CONDITION_LIMIT).then(|| {
        format!("Gram matrix of Δ_i and Δ_iΔ_j has condition {cond:e}; constancy of gamma and big gamma is not supported")
    }))
}

/// `a(h)` of an affine realization.
#[derive(Debug, Clone, PartialEq)]
pub enum AMap {
    Constant(DMatrix<f64>),
    /// `a^{ij}(h) = δ^{ij} + Σ_m A_m^{ij} ℓ_m(h)`.
    Affine {
        delta: DMatrix<f64>,
        coefficients: Vec<DMatrix<f64>>,
        functionals: Vec<LinearFunctional>,
    },
    /// Not affine in the functionals; evaluated from the model's volatility.
    Model,
}

impl AMap {
    /// The functional `v^{ij}` of an affine map, as one combined functional.
    pub fn v_functional(&self, i: usize, j: usize) -> Option<LinearFunctional> {
        let AMap::Affine { coefficients, functionals, .. } = self else {
            return None;
        };
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for (a, l) in coefficients.iter().zip(functionals) {
            for (x, w) in l.nodes().iter().zip(l.weights()) {
                nodes.push(*x);
                weights.push(a[(i, j)] * w);
            }
        }
        LinearFunctional::new(nodes, weights, FunctionalKind::PointCombination).ok()
    }

    fn describe(&self) -> serde_json::Value {
        let mat = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        match self {
            AMap::Constant(a) => json!({"kind": "constant", "a": mat(a)}),
            AMap::Affine { delta, coefficients, functionals } => json!({
                "kind": "affine",
                "delta": mat(delta),
                "coefficients": coefficients.iter().map(mat).collect::<Vec<_>>(),
                "functionals": functionals.iter().map(|l| json!({
                    "kind": l.kind().name(), "nodes": l.nodes(), "weights": l.weights()
                })).collect::<Vec<_>>(),
            }),
            AMap::Model => json!({"kind": "model"}),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AffineRealization {
    pub lambdas: Vec<ForwardCurve>,
    pub deltas: Vec<ForwardCurve>,
    pub gamma: DMatrix<f64>,
    /// `big_gamma[k][(i, j)] = Γ^{k,ij}`.
    pub big_gamma: Vec<DMatrix<f64>>,
    pub a_map: AMap,
    pub warnings: Vec<String>,
    model: Option<Arc<HjmModel>>,
}

impl AffineRealization {
    pub fn new(
        lambdas: Vec<ForwardCurve>,
        gamma: DMatrix<f64>,
        big_gamma: Vec<DMatrix<f64>>,
        a_map: AMap,
    ) -> Result<Self> {
        let d = lambdas.len();
        ode::check_square(&gamma, d, "gamma")?;
        let (r, _) = crate::lie::numerical_rank(&lambdas, DEFAULT_RANK_TOLERANCE)?;
        if r != d {
            return Err(Error::Construction(format!(
                "the {d} directions have numerical rank {r}"
            )));
        }
        let deltas = lambdas.iter().map(ForwardCurve::antiderivative).collect();
        Ok(AffineRealization {
            lambdas,
            deltas,
            gamma,
            big_gamma,
            a_map,
            warnings: vec![],
            model: None,
        })
    }

    pub fn d(&self) -> usize {
        self.lambdas.len()
    }

    /// Coefficients `ρ^{jk}` with `σʲ(h) = Σ_k ρ^{jk}Λ_k`.
    pub fn rho(&self, model: &HjmModel, h: &ForwardCurve) -> Result<DMatrix<f64>> {
        let sigma = model.sigma(h)?;
        let basis: Vec<&ForwardCurve> = self.lambdas.iter().collect();
        let mut rho = DMatrix::zeros(sigma.len(), self.d());
        for (j, s) in sigma.iter().enumerate() {
            let p = project_onto_span(s, &basis)?;
            for (k, c) in p.coefficients.iter().enumerate() {
                rho[(j, k)] = *c;
            }
        }
        Ok(rho)
    }

    /// `a(h)`.
    pub fn a_at(&self, h: &ForwardCurve) -> Result<DMatrix<f64>> {
        match &self.a_map {
            AMap::Constant(a) => Ok(a.clone()),
            AMap::Affine { delta, coefficients, functionals } => {
                let mut a = delta.clone();
                for (c, l) in coefficients.iter().zip(functionals) {
                    a += c * l.apply(h)?;
                }
                Ok(a)
            }
            AMap::Model => {
                let model = self.model.as_ref().ok_or_else(|| {
                    Error::Precondition("realization has no model to evaluate a(h)".into())
                })?;
                let rho = self.rho(model, h)?;
                Ok(rho.transpose() * rho)
            }
        }
    }

    /// Whether `v^{ii}(h) + δ^{ii}([h]) > 0` for every `i`.
    pub fn a_positive(&self, h: &ForwardCurve) -> Result<bool> {
        let a = self.a_at(h)?;
        Ok((0..self.d()).all(|i| a[(i, i)] > 0.0))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mat = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        json!({
            "d": self.d(),
            "lambdas": self.lambdas.iter().map(|c| c.values().to_vec()).collect::<Vec<_>>(),
            "deltas": self.deltas.iter().map(|c| c.values().to_vec()).collect::<Vec<_>>(),
            "gamma": mat(&self.gamma),
            "big_gamma": self.big_gamma.iter().map(mat).collect::<Vec<_>>(),
            "a_map": self.a_map.describe(),
            "warnings": self.warnings,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectionMode {
    /// Requires `k_D = d + 1` (constant-direction volatility).
    MinimalRealization,
    /// Accepts any constant rank and returns `k_D − 1` directions.
    General,
}

/// Orthonormal (embedded inner product) basis of the span of the retained
/// non-drift fields over all test points.
pub fn extract_constant_directions(
    report: &LieAlgebraReport,
    model: &HjmModel,
    mode: DirectionMode,
) -> Result<Vec<ForwardCurve>> {
    let k_d = report.k_d.ok_or_else(|| {
        Error::Structure(format!(
            "distribution rank is not constant across test points: {:?}",
            report.rank_per_point
        ))
    })?;
    if mode == DirectionMode::MinimalRealization && k_d != model.d() + 1 {
        return Err(Error::Structure(format!(
            "not in the affine class: distribution rank {k_d} differs from d + 1 = {}",
            model.d() + 1
        )));
    }
    let mut cols = Vec::new();
    for f in report.fields.iter().filter(|f| f.label != "μ" && f.label != "ν") {
        for h in &report.test_points {
            cols.push(f.eval(h)?);
        }
    }
    if cols.is_empty() {
        return Err(Error::Structure("no volatility fields were retained".into()));
    }
    let refs: Vec<&ForwardCurve> = cols.iter().collect();
    let m = embed(&refs)?;
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let smax = svd.singular_values[order[0]];
    let r = order
        .iter()
        .filter(|&&i| smax > 0.0 && svd.singular_values[i] >= report.tolerance_used * smax)
        .count();
    if r != k_d - 1 {
        return Err(Error::Structure(format!(
            "not in the affine class: volatility fields span {r} dimensions, expected k_D - 1 = {}",
            k_d - 1
        )));
    }
    let grid = cols[0].grid().clone();
    let mut basis = Vec::with_capacity(r);
    for &i in order.iter().take(r) {
        let s = svd.singular_values[i];
        let terms: Vec<(f64, &ForwardCurve)> =
            cols.iter().enumerate().map(|(c, f)| (v_t[(i, c)] / s, f)).collect();
        let mut lam = ForwardCurve::linear_combination(&grid, &terms)?;
        let e = embed(&[&lam])?;
        let lead = e.column(0).iter().copied().fold(0.0, |m: f64, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            lam = lam.scale(-1.0);
        }
        basis.push(lam);
    }
    let brefs: Vec<&ForwardCurve> = basis.iter().collect();
    for (p, h) in report.test_points.iter().enumerate() {
        for (j, s) in model.sigma(h)?.iter().enumerate() {
            let res = project_onto_span(s, &brefs)?.relative_residual();
            if res >= SPAN_TOL {
                return Err(Error::Structure(format!(
                    "sigma {} at test point {p} leaves the constant span (residual {res:e})",
                    j + 1
                )));
            }
        }
    }
    Ok(basis)
}

/// Builds the affine realization of a model with constant-direction
/// volatility from its Lie algebra report.
pub fn construct_realization(
    model: &Arc<HjmModel>,
    report: &LieAlgebraReport,
    mode: DirectionMode,
) -> Result<AffineRealization> {
    let lambdas = extract_constant_directions(report, model, mode)?;
    let d = lambdas.len();
    let mut real = AffineRealization::new(lambdas, DMatrix::zeros(d, d), vec![DMatrix::zeros(d, d); d], AMap::Model)?;
    real.model = Some(model.clone());

    // a at every test point, then an affine fit in y = ℓ(h)
    let mut ys = Vec::new();
    let mut avals = Vec::new();
    for h in &report.test_points {
        ys.push(model.state(h)?);
        avals.push(real.a_at(h)?);
    }
    real.a_map = fit_a_map(model, &ys, &avals);

    // Γ^{k,ij} = ½ Da^{ij}(h)Λ_k
    let h0 = &report.test_points[0];
    for k in 0..d {
        let g = match &real.a_map {
            AMap::Constant(_) => DMatrix::zeros(d, d),
            AMap::Affine { coefficients, functionals, .. } => {
                let mut g = DMatrix::zeros(d, d);
                for (c, l) in coefficients.iter().zip(functionals) {
                    g += c * (0.5 * l.apply(&real.lambdas[k])?);
                }
                g
            }
            AMap::Model => {
                let eps = f64::EPSILON.cbrt() * (1.0 + h0.sup_norm()) / (1.0 + real.lambdas[k].sup_norm());
                let plus = real.a_at(&h0.combine(1.0, &real.lambdas[k], eps)?)?;
                let minus = real.a_at(&h0.combine(1.0, &real.lambdas[k], -eps)?)?;
                (plus - minus) * (0.25 / eps)
            }
        };
        real.big_gamma[k] = g;
    }

    // γ from Λ_k' + Σ Γ^{k,ij}(Δ_iΔ_j)' ∈ span{Λ}
    let lrefs: Vec<&ForwardCurve> = real.lambdas.iter().collect();
    let mut worst = 0.0f64;
    for k in 0..d {
        let mut target = real.lambdas[k].derivative();
        for i in 0..d {
            for j in 0..d {
                let c = real.big_gamma[k][(i, j)];
                if c != 0.0 {
                    let dd = real.lambdas[i]
                        .product(&real.deltas[j])?
                        .add(&real.deltas[i].product(&real.lambdas[j])?)?;
                    target = target.combine(1.0, &dd, c)?;
                }
            }
        }
        let p = project_onto_span(&target, &lrefs)?;
        worst = worst.max(p.relative_residual());
        for (i, c) in p.coefficients.iter().enumerate() {
            real.gamma[(k, i)] = *c;
        }
    }
    if worst >= SPAN_TOL {
        real.warnings.push(format!(
            "Λ' + Σ Γ (Δ_iΔ_j)' leaves span{{Λ}} (residual {worst:e})"
        ));
    }
    real.warnings.extend(gamma_warnings(&real.gamma));
    if let Some(w) = gram_warning(&real.deltas)? {
        real.warnings.push(w);
    }
    Ok(real)
}

fn fit_a_map(model: &HjmModel, ys: &[Vec<f64>], avals: &[DMatrix<f64>]) -> AMap {
    let d = avals[0].nrows();
    let scale = avals
        .iter()
        .flat_map(|a| a.iter().copied())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let constant = avals
        .iter()
        .all(|a| (a - &avals[0]).amax() <= 1e-10 * scale);
    if constant {
        return AMap::Constant(avals[0].clone());
    }
    let q = model.q();
    let n = ys.len();
    if q == 0 || n < q + 1 {
        return AMap::Model;
    }
    // design matrix [1, y]
    let x = DMatrix::from_fn(n, q + 1, |r, c| if c == 0 { 1.0 } else { ys[r][c - 1] });
    let svd = x.clone().svd(true, true);
    let mut delta = DMatrix::zeros(d, d);
    let mut coefficients = vec![DMatrix::zeros(d, d); q];
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let b = DVector::from_iterator(n, avals.iter().map(|a| a[(i, j)]));
            let Ok(sol) = svd.solve(&b, 1e-14 * svd.singular_values.max()) else {
                return AMap::Model;
            };
            worst = worst.max((&x * &sol - &b).amax());
            delta[(i, j)] = sol[0];
            for m in 0..q {
                coefficients[m][(i, j)] = sol[m + 1];
            }
        }
    }
    if worst > 1e-8 * scale {
        return AMap::Model;
    }
    AMap::Affine {
        delta,
        coefficients,
        functionals: model.functionals().to_vec(),
    }
}

/// `b·1 + Σ c_jΔ_j − ½ Σ a^{ij}Δ_iΔ_j`.
pub fn gaussian_global_leaf(a: &DMatrix<f64>, deltas: &[ForwardCurve], b: f64, c: &[f64]) -> Result<ForwardCurve> {
    let d = deltas.len();
    ode::check_square(a, d, "a")?;
    if c.len() != d {
        return Err(Error::Precondition(format!("{} coefficients for {d} directions", c.len())));
    }
    if (a - a.transpose()).amax() > 1e-12 * a.amax().max(1.0) || a.clone().cholesky().is_none() {
        return Err(Error::Precondition("a must be symmetric positive definite".into()));
    }
    let Some(first) = deltas.first() else {
        return Err(Error::Precondition("no directions".into()));
    };
    let grid = first.grid().clone();
    let mut h = ForwardCurve::constant(&grid, b);
    for j in 0..d {
        h = h.combine(1.0, &deltas[j], c[j])?;
        for i in 0..d {
            h = h.combine(1.0, &deltas[i].product(&deltas[j])?, -0.5 * a[(i, j)])?;
        }
    }
    Ok(h)
}

/// Whether `h − h(0) + ½ Σ a^{ij}Δ_iΔ_j ∈ span{Δ}` (equivalently
/// `ν(h) ∈ span{Λ}`), with the relative projection residual. Non-constant
/// `a` maps are evaluated at `h`.
pub fn nu_in_span_criterion(h: &ForwardCurve, real: &AffineRealization) -> Result<(bool, f64)> {
    let a = real.a_at(h)?;
    let grid = h.grid().clone();
    let mut target = h.combine(1.0, &ForwardCurve::constant(&grid, 1.0), -h.values()[0])?;
    for i in 0..real.d() {
        for j in 0..real.d() {
            let p = real.deltas[i].product(&real.deltas[j])?;
            target = target.combine(1.0, &p, 0.5 * a[(i, j)])?;
        }
    }
    let refs: Vec<&ForwardCurve> = real.deltas.iter().collect();
    let r = project_onto_span(&target, &refs)?.relative_residual();
    Ok((r < SPAN_TOL, r))
}

/// Scalar Riccati data of the CIR realization with `Λ(0) = 1`.
#[derive(Debug, Clone)]
pub struct CirRealization {
    pub params: CirParams,
    /// Riccati coefficients of `Δ' = 1 − βΔ − ΓΔ²`.
    pub beta: f64,
    pub big_gamma: f64,
    /// Volatility scale: `σ(h) = √(s²·h(0))·ĝ1`.
    pub s2: f64,
    pub riccati: RiccatiSolution,
    pub model: Arc<HjmModel>,
    pub g0: ForwardCurve,
    pub g1: ForwardCurve,
    /// `g1` scaled to `ĝ1(0) = 1`.
    pub g1_hat: ForwardCurve,
    pub realization: AffineRealization,
}

/// CIR-type one-factor model: short-rate functional, square-root volatility
/// along `ĝ1`, and its Riccati realization. With `κ = a`,
/// `β = κ(1 − c)/(1 + c)` and `Γ = κ²c/(1 + c)²` the Riccati solution has
/// `Λ ∝ g1`.
pub fn cir_realization(p: &CirParams, grid: &Arc<MaturityGrid>) -> Result<CirRealization> {
    let kappa = p.a;
    let beta = kappa * (1.0 - p.c) / (1.0 + p.c);
    let big_gamma = kappa * kappa * p.c / (1.0 + p.c).powi(2);
    let s2 = 2.0 * big_gamma;
    let riccati = solve_riccati_delta(
        &DMatrix::from_element(1, 1, -beta),
        &[DMatrix::from_element(1, 1, big_gamma)],
        &[1.0],
        grid,
        BLOW_UP_CAP,
    )?;
    let (g0, g1) = cir_forward_basis(p, grid)?;
    let norm = (1.0 + p.c).powi(2) / p.b;
    let g1_hat = g1.scale(norm);
    let ev0 = LinearFunctional::point_evaluation(grid, 0.0)?;
    let shape = g1_hat
        .closed_form()
        .cloned()
        .ok_or_else(|| Error::Construction("CIR basis lost its descriptor".into()))?;
    let model = Arc::new(
        HjmModel::new(
            grid.clone(),
            vec![ev0.clone()],
            vec![vec![PhiTerm::new(
                CoefficientFn::SqrtAffine { scale: s2.sqrt(), c0: 0.0, c: vec![1.0] },
                shape.clone(),
            )]],
            StateRegion::with_lower_bounds(vec![Some(0.0)]),
        )?
        .with_perturbation_basis(vec![ClosedForm::constant(1.0), shape]),
    );
    let mut realization = AffineRealization::new(
        riccati.lambdas.clone(),
        DMatrix::from_element(1, 1, -beta),
        vec![DMatrix::from_element(1, 1, big_gamma)],
        AMap::Affine {
            delta: DMatrix::zeros(1, 1),
            coefficients: vec![DMatrix::from_element(1, 1, s2)],
            functionals: vec![ev0],
        },
    )?;
    realization.deltas = riccati.deltas.clone();
    realization.warnings = riccati.warnings.clone();
    realization.model = Some(model.clone());
    Ok(CirRealization {
        params: *p,
        beta,
        big_gamma,
        s2,
        riccati,
        model,
        g0,
        g1,
        g1_hat,
        realization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{generate_dla, DlaOptions};

    fn grid() -> Arc<MaturityGrid> {
        Arc::new(MaturityGrid::default())
    }

    #[test]
    fn cir_basis_examples() {
        let g = grid();
        let p = CirParams::new(1.0, 1.0, 1.0, 1.0).unwrap();
        let (g0, g1) = cir_forward_basis(&p, &g).unwrap();
        assert_eq!(g0.eval(0.0).unwrap(), 0.0);
        let e = 1f64.exp();
        assert!((g0.eval(1.0).unwrap() - (e - 1.0) / (e + 1.0)).abs() < 1e-15);
        assert!((g1.eval(1.0).unwrap() - e / (e + 1.0).powi(2)).abs() < 1e-15);
        assert!(g1.values().iter().all(|v| *v > 0.0));
        assert!(g1.values()[g.n_points() - 1] < 1e-7);
        assert!(CirParams::new(1.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn cir_ratio_is_constant() {
        let g = grid();
        for p in [
            CirParams::new(1.0, 1.0, 1.0, 1.0).unwrap(),
            CirParams::new(0.3, 0.02, 2.5, 0.05).unwrap(),
            CirParams::new(1.7, 4.0, 0.2, 0.0).unwrap(),
        ] {
            let (g0, g1) = cir_forward_basis(&p, &g).unwrap();
            let d0 = g0.derivative();
            let want = p.d_level * p.a * (1.0 + p.c) / p.b;
            for (a, b) in d0.values().iter().zip(g1.values()) {
                if *b > 1e-200 {
                    let r = a / b;
                    assert!((r - want).abs() <= 1e-8 * want.abs().max(1e-300), "{r} vs {want}");
                }
            }
        }
    }

    #[test]
    fn riccati_without_quadratic_term_is_linear() {
        let g = grid();
        let gamma = DMatrix::from_row_slice(2, 2, &[-0.5, 1.0, 0.0, -0.5]);
        let sol = solve_riccati_delta(&gamma, &[DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)], &[0.0, 1.0], &g, BLOW_UP_CAP)
            .unwrap();
        let lin = solve_linear_lambda(&gamma, &[0.0, 1.0], &g).unwrap();
        for k in 0..2 {
            assert!(sol.lambdas[k].sub(&lin[k]).unwrap().sup_norm() < 1e-9);
            assert_eq!(sol.deltas[k].values()[0], 0.0);
        }
    }

    #[test]
    fn cir_riccati_matches_tanh_form() {
        let g = grid();
        let p = CirParams::new(0.8, 0.5, 0.6, 0.04).unwrap();
        let cir = cir_realization(&p, &g).unwrap();
        // closed form Δ(x) = 2(u − 1)/((κ + β)(u + c)), u = e^{κx}
        let (k, b, c) = (p.a, cir.beta, p.c);
        for (x, v) in g.nodes().into_iter().zip(cir.riccati.deltas[0].values()) {
            let u = (k * x).exp();
            let want = 2.0 * (u - 1.0) / ((k + b) * (u + c));
            assert!((v - want).abs() < 1e-9);
        }
        let diff = cir.riccati.lambdas[0].sub(&cir.g1_hat).unwrap();
        assert!(diff.sup_norm() < 1e-6);
    }

    #[test]
    fn riccati_step_halving_order() {
        let g = grid();
        let gamma = DMatrix::from_element(1, 1, -0.3);
        let big = [DMatrix::from_element(1, 1, 0.4)];
        let f = ode::riccati_rhs(&gamma, &big, &[1.0]);
        let sols: Vec<Vec<Vec<f64>>> =
            [1, 2, 4].iter().map(|m| rk4_on_grid(&f, &[0.0], &g, *m, 1e6).unwrap()).collect();
        let diff = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            a.iter().zip(b).map(|(u, v)| (u[0] - v[0]).abs()).fold(0.0, f64::max)
        };
        let order = (diff(&sols[0], &sols[1]) / diff(&sols[1], &sols[2])).log2();
        assert!(order >= 3.8, "{order}");
    }

    #[test]
    fn riccati_warns_on_growing_modes() {
        let g = grid();
        let sol = solve_riccati_delta(
            &DMatrix::from_element(1, 1, 0.01),
            &[DMatrix::from_element(1, 1, 1.0)],
            &[1.0],
            &g,
            BLOW_UP_CAP,
        )
        .unwrap();
        assert!(sol.warnings.iter().any(|w| w.contains("eigenvalue")));
    }

    #[test]
    fn riccati_blow_up_is_an_error() {
        let g = grid();
        let r = solve_riccati_delta(
            &DMatrix::zeros(1, 1),
            &[DMatrix::from_element(1, 1, -1.0)],
            &[1.0],
            &g,
            BLOW_UP_CAP,
        );
        assert!(matches!(r, Err(Error::BlowUp { .. })));
    }

    fn gaussian() -> (Arc<HjmModel>, AffineRealization) {
        let g = grid();
        let m = Arc::new(
            HjmModel::constant_volatility(g.clone(), vec![ClosedForm::term(0.015, 0, 0.4)]).unwrap(),
        );
        let h0 = ForwardCurve::from_closed_form(
            &g,
            ClosedForm::constant(0.04).combine(1.0, &ClosedForm::term(-0.01, 1, 0.3), 1.0),
        )
        .unwrap();
        let rep = generate_dla(&m, &h0, &DlaOptions::default()).unwrap();
        let real = construct_realization(&m, &rep, DirectionMode::MinimalRealization).unwrap();
        (m, real)
    }

    #[test]
    fn constant_volatility_realization() {
        let (m, real) = gaussian();
        assert_eq!(real.d(), 1);
        assert!(matches!(real.a_map, AMap::Constant(_)));
        assert!((real.gamma[(0, 0)] + 0.4).abs() < 1e-10);
        assert_eq!(real.big_gamma[0][(0, 0)], 0.0);
        // σ(h) = ρΛ with a = ρ²
        let h = ForwardCurve::constant(m.grid(), 0.03);
        let s = &m.sigma(&h).unwrap()[0];
        let a = real.a_at(&h).unwrap()[(0, 0)];
        let recon = real.lambdas[0].scale(a.sqrt());
        assert!(s.sub(&recon).unwrap().sup_norm() < 1e-12 * s.sup_norm() * 10.0);
        assert_eq!(real.deltas[0].values()[0], 0.0);
        let js = real.to_json();
        assert_eq!(js["a_map"]["kind"], "constant");
    }

    #[test]
    fn gaussian_leaf_members_pass_the_criterion() {
        let (_, real) = gaussian();
        let AMap::Constant(a) = &real.a_map else { panic!() };
        for (b, c) in [(0.0, 0.0), (0.03, 0.01), (-0.02, 0.5), (0.05, -0.2)] {
            let h = gaussian_global_leaf(a, &real.deltas, b, &[c]).unwrap();
            let (inside, r) = nu_in_span_criterion(&h, &real).unwrap();
            assert!(inside, "residual {r}");
        }
        let g4 = ForwardCurve::from_closed_form(real.lambdas[0].grid(), ClosedForm::term(1.0, 1, 0.8)).unwrap();
        let (inside, r) = nu_in_span_criterion(&g4, &real).unwrap();
        assert!(!inside && r > 1e-2);
    }

    #[test]
    fn constant_curve_with_degenerate_a_is_in_span() {
        let g = grid();
        let lam = ForwardCurve::exponential(&g, 1.0, 0.5).unwrap();
        let real = AffineRealization::new(
            vec![lam],
            DMatrix::from_element(1, 1, -0.5),
            vec![DMatrix::zeros(1, 1)],
            AMap::Constant(DMatrix::zeros(1, 1)),
        )
        .unwrap();
        let (inside, r) = nu_in_span_criterion(&ForwardCurve::constant(&g, 0.04), &real).unwrap();
        assert!(inside);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn global_leaf_needs_positive_definite_a() {
        let g = grid();
        let d = ForwardCurve::exponential(&g, 1.0, 0.5).unwrap().antiderivative();
        assert!(gaussian_global_leaf(&DMatrix::from_element(1, 1, -1.0), &[d], 0.0, &[0.0]).is_err());
    }

    #[test]
    fn svensson_directions_are_g2() {
        let s = SvenssonSetup::with_default_grid(0.5).unwrap();
        let h0 = s.curve(&SvenssonSetup::default_state()).unwrap();
        let rep = generate_dla(&s.model, &h0, &DlaOptions::default()).unwrap();
        let lams = extract_constant_directions(&rep, &s.model, DirectionMode::MinimalRealization).unwrap();
        assert_eq!(lams.len(), 1);
        let p = project_onto_span(&s.basis[1], &[&lams[0]]).unwrap();
        assert!(p.relative_residual() < 1e-10);
        assert!((embed(&[&lams[0]]).unwrap().column(0).norm() - 1.0).abs() < 1e-12);
        for h in &rep.test_points {
            let sig = &s.model.sigma(h).unwrap()[0];
            assert!(project_onto_span(sig, &[&lams[0]]).unwrap().relative_residual() < SPAN_TOL);
        }
        let real = construct_realization(&s.model, &rep, DirectionMode::MinimalRealization).unwrap();
        assert!(matches!(real.a_map, AMap::Affine { .. }));
        assert!((real.gamma[(0, 0)] + 0.5).abs() < 1e-9, "{}", real.gamma);
        assert!(real.big_gamma[0][(0, 0)].abs() < 1e-12);
        assert!(real.a_positive(&h0).unwrap());
    }

    fn rotating_model() -> Arc<HjmModel> {
        let g = grid();
        let l = LinearFunctional::point_evaluation(&g, 1.0).unwrap();
        let angle = |f: fn(f64, f64, Vec<f64>) -> CoefficientFn| f(0.01, 0.0, vec![40.0]);
        Arc::new(
            HjmModel::new(
                g,
                vec![l],
                vec![vec![
                    PhiTerm::new(angle(|scale, c0, c| CoefficientFn::Cosine { scale, c0, c }), ClosedForm::term(1.0, 0, 1.0)),
                    PhiTerm::new(angle(|scale, c0, c| CoefficientFn::Sine { scale, c0, c }), ClosedForm::term(1.0, 0, 2.0)),
                ]],
                StateRegion::unbounded(1),
            )
            .unwrap(),
        )
    }

    #[test]
    fn rotating_direction_is_not_affine() {
        let m = rotating_model();
        let h0 = ForwardCurve::from_closed_form(m.grid(), ClosedForm::constant(0.03).combine(1.0, &ClosedForm::term(0.01, 0, 0.5), 1.0))
            .unwrap();
        let rep = generate_dla(&m, &h0, &DlaOptions { max_depth: 3, ..DlaOptions::default() }).unwrap();
        assert!(rep.rank_by_depth.last().copied().unwrap() > m.d() + 1, "{:?}", rep.rank_by_depth);
        for mode in [DirectionMode::MinimalRealization, DirectionMode::General] {
            let r = extract_constant_directions(&rep, &m, mode);
            assert!(matches!(r, Err(Error::Structure(_))), "{mode:?}: {r:?}");
        }
    }

    #[test]
    fn cir_chart_is_two_dimensional() {
        let g = grid();
        let p = CirParams::new(0.8, 0.5, 0.6, 0.04).unwrap();
        let cir = cir_realization(&p, &g).unwrap();
        let h0 = cir.g0.add(&cir.g1_hat.scale(0.03)).unwrap().add(&ForwardCurve::constant(&g, 0.01)).unwrap();
        let chart = LeafChart::new(cir.model.clone(), h0, cir.riccati.lambdas.clone(), None, None).unwrap();
        for (u, y) in [(0.0, 0.0), (0.25, 0.01), (0.8, -0.02)] {
            let j = chart.jacobian(u, &[y]).unwrap();
            assert_eq!(crate::lie::numerical_rank(&j, DEFAULT_RANK_TOLERANCE).unwrap().0, 2);
        }
        // the CIR curves themselves keep ν inside span{Λ}
        let on = cir.g0.add(&cir.g1_hat.scale(0.03)).unwrap();
        let nu = cir.model.ito_drift(&on).unwrap();
        let r = project_onto_span(&nu, &[&cir.g1_hat]).unwrap().relative_residual();
        assert!(r < 1e-6, "{r}");
    }

    #[test]
    fn generic_curve_fails_the_cir_criterion() {
        let g = grid();
        let p = CirParams::new(0.8, 0.5, 0.6, 0.04).unwrap();
        let cir = cir_realization(&p, &g).unwrap();
        let g4 = ForwardCurve::from_closed_form(&g, ClosedForm::term(1.0, 1, 1.0)).unwrap();
        let (inside, r) = nu_in_span_criterion(&g4, &cir.realization).unwrap();
        assert!(!inside && r > 1e-2, "{r}");
        let v = cir.realization.a_map.v_functional(0, 0).unwrap();
        assert!((v.apply(&ForwardCurve::constant(&g, 1.0)).unwrap() - cir.s2).abs() < 1e-15);
    }
}
