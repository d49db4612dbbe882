//! HJM models with volatilities of the form `σʲ(h) = φʲ(ℓ(h))`, the induced
//! drifts and the vector-field interface used by the bracket machinery.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::closed_form::ClosedForm;
use crate::curve::{hjm_bilinear_best, ForwardCurve, MaturityGrid};
use crate::error::{Error, Result};
use crate::functional::LinearFunctional;

/// Smooth scalar function of `y ∈ ℝ^q`. Most variants act on the affine
/// argument `z = c0 + Σ c_k y_k` (missing `c_k` read as 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CoefficientFn {
    Constant(f64),
    Affine { c0: f64, c: Vec<f64> },
    /// `scale·√z`; `z ≤ 0` is outside the region.
    SqrtAffine { scale: f64, c0: f64, c: Vec<f64> },
    /// `Σ coeff·Π y_k^{p_k}`
    Polynomial { terms: Vec<(f64, Vec<u32>)> },
    Cosine { scale: f64, c0: f64, c: Vec<f64> },
    Sine { scale: f64, c0: f64, c: Vec<f64> },
}

fn affine_arg(c0: f64, c: &[f64], y: &[f64]) -> f64 {
    c0 + c.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()
}

fn padded(c: &[f64], q: usize) -> Vec<f64> {
    (0..q).map(|k| c.get(k).copied().unwrap_or(0.0)).collect()
}

impl CoefficientFn {
    /// Number of `y` components the function reads.
    pub fn arity(&self) -> usize {
        match self {
            CoefficientFn::Constant(_) => 0,
            CoefficientFn::Affine { c, .. }
            | CoefficientFn::SqrtAffine { c, .. }
            | CoefficientFn::Cosine { c, .. }
            | CoefficientFn::Sine { c, .. } => c.len(),
            CoefficientFn::Polynomial { terms } => {
                terms.iter().map(|(_, p)| p.len()).max().unwrap_or(0)
            }
        }
    }

    pub fn value(&self, y: &[f64]) -> Result<f64> {
        Ok(match self {
            CoefficientFn::Constant(v) => *v,
            CoefficientFn::Affine { c0, c } => affine_arg(*c0, c, y),
            CoefficientFn::SqrtAffine { scale, c0, c } => scale * sqrt_arg(*c0, c, y)?.sqrt(),
            CoefficientFn::Polynomial { terms } => terms
                .iter()
                .map(|(a, p)| a * monomial(p, y, None))
                .sum(),
            CoefficientFn::Cosine { scale, c0, c } => scale * affine_arg(*c0, c, y).cos(),
            CoefficientFn::Sine { scale, c0, c } => scale * affine_arg(*c0, c, y).sin(),
        })
    }

    pub fn gradient(&self, y: &[f64]) -> Result<Vec<f64>> {
        let q = y.len();
        Ok(match self {
            CoefficientFn::Constant(_) => vec![0.0; q],
            CoefficientFn::Affine { c, .. } => padded(c, q),
            CoefficientFn::SqrtAffine { scale, c0, c } => {
                let s = scale / (2.0 * sqrt_arg(*c0, c, y)?.sqrt());
                padded(c, q).into_iter().map(|v| v * s).collect()
            }
            CoefficientFn::Polynomial { terms } => (0..q)
                .map(|k| {
                    terms
                        .iter()
                        .map(|(a, p)| {
                            let pk = p.get(k).copied().unwrap_or(0);
                            if pk == 0 {
                                0.0
                            } else {
                                a * pk as f64 * monomial(p, y, Some((k, 1)))
                            }
                        })
                        .sum()
                })
                .collect(),
            CoefficientFn::Cosine { scale, c0, c } => {
                let s = -scale * affine_arg(*c0, c, y).sin();
                padded(c, q).into_iter().map(|v| v * s).collect()
            }
            CoefficientFn::Sine { scale, c0, c } => {
                let s = scale * affine_arg(*c0, c, y).cos();
                padded(c, q).into_iter().map(|v| v * s).collect()
            }
        })
    }

    pub fn hessian(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        let q = y.len();
        let outer = |c: &[f64], s: f64| {
            let c = padded(c, q);
            DMatrix::from_fn(q, q, |i, j| s * c[i] * c[j])
        };
        Ok(match self {
            CoefficientFn::Constant(_) | CoefficientFn::Affine { .. } => DMatrix::zeros(q, q),
            CoefficientFn::SqrtAffine { scale, c0, c } => {
                let z = sqrt_arg(*c0, c, y)?;
                outer(c, -scale / (4.0 * z * z.sqrt()))
            }
            CoefficientFn::Cosine { scale, c0, c } => outer(c, -scale * affine_arg(*c0, c, y).cos()),
            CoefficientFn::Sine { scale, c0, c } => outer(c, -scale * affine_arg(*c0, c, y).sin()),
            CoefficientFn::Polynomial { terms } => DMatrix::from_fn(q, q, |i, j| {
                terms
                    .iter()
                    .map(|(a, p)| {
                        let pi = p.get(i).copied().unwrap_or(0);
                        let pj = p.get(j).copied().unwrap_or(0);
                        if i == j {
                            if pi < 2 {
                                0.0
                            } else {
                                a * (pi * (pi - 1)) as f64 * monomial(p, y, Some((i, 2)))
                            }
                        } else if pi == 0 || pj == 0 {
                            0.0
                        } else {
                            let mut lowered = p.clone();
                            lowered[i] -= 1;
                            a * (pi * pj) as f64 * monomial(&lowered, y, Some((j, 1)))
                        }
                    })
                    .sum()
            }),
        })
    }

    /// Text form used by model files, e.g. `sqrt 0.7 0 1`.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        match self {
            CoefficientFn::Constant(v) => format!("const {v:?}"),
            CoefficientFn::Affine { c0, c } => format!("affine {c0:?} {}", list(c)).trim_end().into(),
            CoefficientFn::SqrtAffine { scale, c0, c } => {
                format!("sqrt {scale:?} {c0:?} {}", list(c)).trim_end().into()
            }
            CoefficientFn::Cosine { scale, c0, c } => {
                format!("cos {scale:?} {c0:?} {}", list(c)).trim_end().into()
            }
            CoefficientFn::Sine { scale, c0, c } => {
                format!("sin {scale:?} {c0:?} {}", list(c)).trim_end().into()
            }
            CoefficientFn::Polynomial { terms } => {
                let t: Vec<String> = terms
                    .iter()
                    .map(|(a, p)| {
                        let e: Vec<String> = p.iter().map(u32::to_string).collect();
                        format!("{a:?}:{}", e.join(","))
                    })
                    .collect();
                format!("poly {}", t.join(" "))
            }
        }
    }

    pub fn parse(text: &str) -> Result<CoefficientFn> {
        let mut it = text.split_whitespace();
        let head = it
            .next()
            .ok_or_else(|| Error::Config("empty coefficient function".into()))?;
        let rest: Vec<&str> = it.collect();
        let nums = |v: &[&str]| -> Result<Vec<f64>> {
            v.iter()
                .map(|s| crate::closed_form::parse_f64(s, "coefficient"))
                .collect()
        };
        let split_scaled = |v: &[&str]| -> Result<(f64, f64, Vec<f64>)> {
            if v.len() < 2 {
                return Err(Error::Config(format!("`{head}` expects `scale c0 c1 ...`")));
            }
            let n = nums(v)?;
            Ok((n[0], n[1], n[2..].to_vec()))
        };
        match head {
            "const" => match nums(&rest)?.as_slice() {
                [v] => Ok(CoefficientFn::Constant(*v)),
                _ => Err(Error::Config("`const` expects one number".into())),
            },
            "affine" => {
                let n = nums(&rest)?;
                if n.is_empty() {
                    return Err(Error::Config("`affine` expects `c0 c1 ...`".into()));
                }
                Ok(CoefficientFn::Affine {
                    c0: n[0],
                    c: n[1..].to_vec(),
                })
            }
            "sqrt" => {
                let (scale, c0, c) = split_scaled(&rest)?;
                Ok(CoefficientFn::SqrtAffine { scale, c0, c })
            }
            "cos" => {
                let (scale, c0, c) = split_scaled(&rest)?;
                Ok(CoefficientFn::Cosine { scale, c0, c })
            }
            "sin" => {
                let (scale, c0, c) = split_scaled(&rest)?;
                Ok(CoefficientFn::Sine { scale, c0, c })
            }
            "poly" => {
                let terms = rest
                    .iter()
                    .map(|t| {
                        let (a, p) = t.split_once(':').ok_or_else(|| {
                            Error::Config(format!("poly term `{t}` must be `coeff:p1,p2,...`"))
                        })?;
                        let powers = if p.is_empty() {
                            vec![]
                        } else {
                            p.split(',')
                                .map(|e| {
                                    e.trim().parse::<u32>().map_err(|_| {
                                        Error::Config(format!("poly exponent `{e}` is not a count"))
                                    })
                                })
                                .collect::<Result<Vec<_>>>()?
                        };
                        Ok((crate::closed_form::parse_f64(a, "poly coeff")?, powers))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(CoefficientFn::Polynomial { terms })
            }
            other => Err(Error::Config(format!("unknown coefficient function `{other}`"))),
        }
    }
}

fn sqrt_arg(c0: f64, c: &[f64], y: &[f64]) -> Result<f64> {
    let z = affine_arg(c0, c, y);
    if z > 0.0 {
        Ok(z)
    } else {
        Err(Error::Region(format!(
            "square-root argument {z} is not positive at y = {y:?}"
        )))
    }
}

/// `Π y_k^{p_k}` with optionally the exponent of one index lowered.
fn monomial(p: &[u32], y: &[f64], lower: Option<(usize, u32)>) -> f64 {
    p.iter()
        .enumerate()
        .map(|(k, &e)| {
            let e = match lower {
                Some((i, by)) if i == k => e - by,
                _ => e,
            };
            y.get(k).copied().unwrap_or(0.0).powi(e as i32)
        })
        .product()
}

/// One summand `coeff(y)·shape(x)` of a volatility curve `φʲ(y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiTerm {
    pub coeff: CoefficientFn,
    pub shape: ClosedForm,
}

impl PhiTerm {
    pub fn new(coeff: CoefficientFn, shape: ClosedForm) -> Self {
        PhiTerm { coeff, shape }
    }
}

/// Working set `U = {h : ℓ_k(h) > lower_k}` (unbounded where `None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRegion {
    lower: Vec<Option<f64>>,
}

impl StateRegion {
    pub fn unbounded(q: usize) -> Self {
        StateRegion { lower: vec![None; q] }
    }

    pub fn with_lower_bounds(lower: Vec<Option<f64>>) -> Self {
        StateRegion { lower }
    }

    pub fn lower_bounds(&self) -> &[Option<f64>] {
        &self.lower
    }

    pub fn contains(&self, y: &[f64]) -> Result<()> {
        for (k, (v, lo)) in y.iter().zip(&self.lower).enumerate() {
            if let Some(lo) = lo {
                if !(v > lo) {
                    return Err(Error::Region(format!(
                        "functional {} evaluates to {v}, not above its lower bound {lo}",
                        k + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A time-homogeneous HJM model `dr = (Ar + α_HJM(r))dt + Σ φʲ(ℓ(r)) dWʲ`.
#[derive(Debug, Clone, PartialEq)]
pub struct HjmModel {
    grid: Arc<MaturityGrid>,
    functionals: Vec<LinearFunctional>,
    phi: Vec<Vec<PhiTerm>>,
    region: StateRegion,
    perturbation_basis: Vec<ClosedForm>,
    /// `ℓ(shape)` for every term, `[j][t][k]`.
    ell_shapes: Vec<Vec<Vec<f64>>>,
}

impl HjmModel {
    pub fn new(
        grid: Arc<MaturityGrid>,
        functionals: Vec<LinearFunctional>,
        phi: Vec<Vec<PhiTerm>>,
        region: StateRegion,
    ) -> Result<Self> {
        let q = functionals.len();
        if region.lower.len() != q {
            return Err(Error::Construction(format!(
                "region has {} bounds for {q} functionals",
                region.lower.len()
            )));
        }
        let mut ell_shapes = Vec::with_capacity(phi.len());
        for (j, terms) in phi.iter().enumerate() {
            let mut row = Vec::with_capacity(terms.len());
            for t in terms {
                if t.coeff.arity() > q {
                    return Err(Error::Construction(format!(
                        "phi {} reads {} functionals but the model has {q}",
                        j + 1,
                        t.coeff.arity()
                    )));
                }
                let c = ForwardCurve::from_closed_form(&grid, t.shape.clone())?;
                row.push(
                    functionals
                        .iter()
                        .map(|l| l.apply(&c))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            ell_shapes.push(row);
        }
        Ok(HjmModel {
            grid,
            functionals,
            phi,
            region,
            perturbation_basis: vec![
                ClosedForm::constant(1.0),
                ClosedForm::term(1.0, 0, 0.5),
                ClosedForm::term(1.0, 1, 0.5),
                ClosedForm::term(1.0, 0, 1.0),
            ],
            ell_shapes,
        })
    }

    /// `σ ≡ 0`.
    pub fn zero_volatility(grid: Arc<MaturityGrid>) -> Self {
        Self::new(grid, vec![], vec![], StateRegion::unbounded(0)).expect("empty model")
    }

    /// Deterministic volatility `σʲ(h) = shapeʲ`.
    pub fn constant_volatility(grid: Arc<MaturityGrid>, shapes: Vec<ClosedForm>) -> Result<Self> {
        let phi = shapes
            .into_iter()
            .map(|s| vec![PhiTerm::new(CoefficientFn::Constant(1.0), s)])
            .collect();
        Self::new(grid, vec![], phi, StateRegion::unbounded(0))
    }

    /// Curves used to perturb base points when sampling test states.
    pub fn with_perturbation_basis(mut self, basis: Vec<ClosedForm>) -> Self {
        self.perturbation_basis = basis;
        self
    }

    pub fn grid(&self) -> &Arc<MaturityGrid> {
        &self.grid
    }

    /// True when no `φʲ` depends on the state.
    pub fn has_deterministic_volatility(&self) -> bool {
        self.phi
            .iter()
            .flatten()
            .all(|t| matches!(t.coeff, CoefficientFn::Constant(_)))
    }

    pub fn d(&self) -> usize {
        self.phi.len()
    }

    pub fn q(&self) -> usize {
        self.functionals.len()
    }

    pub fn functionals(&self) -> &[LinearFunctional] {
        &self.functionals
    }

    pub fn phi_terms(&self) -> &[Vec<PhiTerm>] {
        &self.phi
    }

    pub fn region(&self) -> &StateRegion {
        &self.region
    }

    pub fn perturbation_basis(&self) -> Vec<ForwardCurve> {
        self.perturbation_basis
            .iter()
            .filter_map(|cf| ForwardCurve::from_closed_form(&self.grid, cf.clone()).ok())
            .collect()
    }

    pub fn perturbation_closed_forms(&self) -> &[ClosedForm] {
        &self.perturbation_basis
    }

    /// `ℓ(h) ∈ ℝ^q`.
    pub fn ell(&self, h: &ForwardCurve) -> Result<Vec<f64>> {
        self.functionals.iter().map(|l| l.apply(h)).collect()
    }

    /// `ℓ(h)` after checking that `h` lies in the region.
    pub fn state(&self, h: &ForwardCurve) -> Result<Vec<f64>> {
        h.same_grid_as(&self.grid)?;
        let y = self.ell(h)?;
        self.region.contains(&y)?;
        Ok(y)
    }

    pub fn in_region(&self, h: &ForwardCurve) -> bool {
        self.state(h).is_ok() && self.sigma(h).is_ok()
    }

    pub fn phi_closed_form(&self, j: usize, y: &[f64]) -> Result<ClosedForm> {
        self.phi[j].iter().try_fold(ClosedForm::zero(), |acc, t| {
            Ok(acc.combine(1.0, &t.shape, t.coeff.value(y)?))
        })
    }

    /// `φʲ(y)`.
    pub fn phi(&self, j: usize, y: &[f64]) -> Result<ForwardCurve> {
        ForwardCurve::from_closed_form(&self.grid, self.phi_closed_form(j, y)?)
    }

    /// `Dφʲ(y)·e`.
    pub fn phi_directional(&self, j: usize, y: &[f64], e: &[f64]) -> Result<ClosedForm> {
        self.phi[j].iter().try_fold(ClosedForm::zero(), |acc, t| {
            let g = t.coeff.gradient(y)?;
            Ok(acc.combine(1.0, &t.shape, dot(&g, e)))
        })
    }

    /// `σʲ(h) = φʲ(ℓ(h))` for `j = 1..d`.
    pub fn sigma(&self, h: &ForwardCurve) -> Result<Vec<ForwardCurve>> {
        let y = self.state(h)?;
        self.sigma_at(&y)
    }

    pub fn sigma_at(&self, y: &[f64]) -> Result<Vec<ForwardCurve>> {
        (0..self.d()).map(|j| self.phi(j, y)).collect()
    }

    /// `Dσʲ(h)·v = Dφʲ(ℓ(h))·ℓ(v)`.
    pub fn sigma_jacobian(&self, j: usize, h: &ForwardCurve, v: &ForwardCurve) -> Result<ForwardCurve> {
        let y = self.state(h)?;
        let e = self.ell(v)?;
        ForwardCurve::from_closed_form(&self.grid, self.phi_directional(j, &y, &e)?)
    }

    fn drift_from_sigma(&self, sigma: &[ForwardCurve]) -> Result<ForwardCurve> {
        sigma
            .iter()
            .try_fold(ForwardCurve::zero(&self.grid), |acc, s| {
                acc.add(&hjm_bilinear_best(s, s)?)
            })
    }

    /// `α_HJM(h) = Σ S(σʲ(h), σʲ(h))`.
    pub fn hjm_drift(&self, h: &ForwardCurve) -> Result<ForwardCurve> {
        self.drift_from_sigma(&self.sigma(h)?)
    }

    /// `ν(h) = Ah + α_HJM(h)`.
    pub fn ito_drift(&self, h: &ForwardCurve) -> Result<ForwardCurve> {
        h.derivative().add(&self.hjm_drift(h)?)
    }

    /// `ℓ(φʲ(y))` computed from the cached term values.
    fn ell_phi(&self, j: usize, y: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.q()];
        for (t, ls) in self.phi[j].iter().zip(&self.ell_shapes[j]) {
            let c = t.coeff.value(y)?;
            for (o, l) in out.iter_mut().zip(ls) {
                *o += c * l;
            }
        }
        Ok(out)
    }

    /// `Σ_j Dφʲ(y)(ℓ(φʲ(y)))`, the Stratonovich correction at `ℓ(h) = y`.
    pub fn correction_at(&self, y: &[f64]) -> Result<ClosedForm> {
        (0..self.d()).try_fold(ClosedForm::zero(), |acc, j| {
            let c = self.ell_phi(j, y)?;
            Ok(acc.combine(1.0, &self.phi_directional(j, y, &c)?, 1.0))
        })
    }

    /// `μ(h) = ν(h) − ½ Σ Dσʲ(h)σʲ(h)`.
    pub fn stratonovich_drift(&self, h: &ForwardCurve) -> Result<ForwardCurve> {
        let y = self.state(h)?;
        let corr = ForwardCurve::from_closed_form(&self.grid, self.correction_at(&y)?)?;
        self.ito_drift(h)?.combine(1.0, &corr, -0.5)
    }

    /// `Γ(y) = Σ_j S(φʲ(y)) − ½ Dφʲ(y)(ℓ(φʲ(y)))`, so that `μ(h) = Ah + Γ(ℓ(h))`.
    pub fn gamma_map(&self, y: &[f64]) -> Result<ForwardCurve> {
        if y.len() != self.q() {
            return Err(Error::Precondition(format!(
                "gamma map needs {} coordinates, got {}",
                self.q(),
                y.len()
            )));
        }
        self.region.contains(y)?;
        let drift = self.drift_from_sigma(&self.sigma_at(y)?)?;
        let corr = ForwardCurve::from_closed_form(&self.grid, self.correction_at(y)?)?;
        drift.combine(1.0, &corr, -0.5)
    }

    /// `Dν(h)·v = v' + Σ_j S(Dσʲv, σʲ) + S(σʲ, Dσʲv)`.
    pub fn ito_jacobian(&self, h: &ForwardCurve, v: &ForwardCurve) -> Result<ForwardCurve> {
        let y = self.state(h)?;
        let e = self.ell(v)?;
        let mut acc = v.derivative();
        for j in 0..self.d() {
            let s = self.phi(j, &y)?;
            let ds = ForwardCurve::from_closed_form(&self.grid, self.phi_directional(j, &y, &e)?)?;
            acc = acc.add(&hjm_bilinear_best(&ds, &s)?)?;
            acc = acc.add(&hjm_bilinear_best(&s, &ds)?)?;
        }
        Ok(acc)
    }

    /// Derivative of the Stratonovich correction at `y` in direction `e`.
    fn correction_derivative(&self, y: &[f64], e: &[f64]) -> Result<ClosedForm> {
        let mut acc = ClosedForm::zero();
        for j in 0..self.d() {
            let c = self.ell_phi(j, y)?;
            // Dc·e = Σ_s (∇coeff_s·e) ℓ(shape_s)
            let mut dc = vec![0.0; self.q()];
            for (t, ls) in self.phi[j].iter().zip(&self.ell_shapes[j]) {
                let ge = dot(&t.coeff.gradient(y)?, e);
                for (o, l) in dc.iter_mut().zip(ls) {
                    *o += ge * l;
                }
            }
            for t in &self.phi[j] {
                let hmat = t.coeff.hessian(y)?;
                let mut second = 0.0;
                for a in 0..self.q() {
                    for b in 0..self.q() {
                        second += e[a] * hmat[(a, b)] * c[b];
                    }
                }
                let coef = second + dot(&t.coeff.gradient(y)?, &dc);
                acc = acc.combine(1.0, &t.shape, coef);
            }
        }
        Ok(acc)
    }

    /// `Dμ(h)·v`.
    pub fn stratonovich_jacobian(&self, h: &ForwardCurve, v: &ForwardCurve) -> Result<ForwardCurve> {
        let y = self.state(h)?;
        let e = self.ell(v)?;
        let dcorr = ForwardCurve::from_closed_form(&self.grid, self.correction_derivative(&y, &e)?)?;
        self.ito_jacobian(h, v)?.combine(1.0, &dcorr, -0.5)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ForwardCurve {
    pub(crate) fn same_grid_as(&self, grid: &Arc<MaturityGrid>) -> Result<()> {
        if Arc::ptr_eq(self.grid(), grid) || **self.grid() == **grid {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "curve on grid ({}, {}) used with a model on ({}, {})",
                self.grid().x_max(),
                self.grid().n_points(),
                grid.x_max(),
                grid.n_points()
            )))
        }
    }
}

/// A curve-valued function of curves, optionally with an analytic Jacobian.
pub trait VectorField: Send + Sync {
    fn label(&self) -> String;

    fn eval(&self, h: &ForwardCurve) -> Result<ForwardCurve>;

    /// `DX(h)·v` when known in closed form.
    fn analytic_jacobian(&self, _h: &ForwardCurve, _v: &ForwardCurve) -> Option<Result<ForwardCurve>> {
        None
    }
}

impl fmt::Debug for dyn VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VectorField({})", self.label())
    }
}

/// `σʲ` of a model (index `j` from 0).
pub struct SigmaField {
    pub model: Arc<HjmModel>,
    pub j: usize,
}

impl VectorField for SigmaField {
    fn label(&self) -> String {
        format!("σ{}", self.j + 1)
    }

    fn eval(&self, h: &ForwardCurve) -> Result<ForwardCurve> {
        let y = self.model.state(h)?;
        self.model.phi(self.j, &y)
    }

    fn analytic_jacobian(&self, h: &ForwardCurve, v: &ForwardCurve) -> Option<Result<ForwardCurve>> {
        Some(self.model.sigma_jacobian(self.j, h, v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftKind {
    Ito,
    Stratonovich,
}

/// `ν` or `μ` of a model.
pub struct DriftField {
    pub model: Arc<HjmModel>,
    pub kind: DriftKind,
}

impl VectorField for DriftField {
    fn label(&self) -> String {
        match self.kind {
            DriftKind::Ito => "ν".into(),
            DriftKind::Stratonovich => "μ".into(),
        }
    }

    fn eval(&self, h: &ForwardCurve) -> Result<ForwardCurve> {
        match self.kind {
            DriftKind::Ito => self.model.ito_drift(h),
            DriftKind::Stratonovich => self.model.stratonovich_drift(h),
        }
    }

    fn analytic_jacobian(&self, h: &ForwardCurve, v: &ForwardCurve) -> Option<Result<ForwardCurve>> {
        Some(match self.kind {
            DriftKind::Ito => self.model.ito_jacobian(h, v),
            DriftKind::Stratonovich => self.model.stratonovich_jacobian(h, v),
        })
    }
}

type CurveFn = dyn Fn(&ForwardCurve) -> Result<ForwardCurve> + Send + Sync;
type JacFn = dyn Fn(&ForwardCurve, &ForwardCurve) -> Result<ForwardCurve> + Send + Sync;

/// A vector field built from closures.
pub struct FnField {
    label: String,
    f: Arc<CurveFn>,
    jac: Option<Arc<JacFn>>,
}

impl FnField {
    pub fn new(
        label: impl Into<String>,
        f: impl Fn(&ForwardCurve) -> Result<ForwardCurve> + Send + Sync + 'static,
    ) -> Self {
        FnField {
            label: label.into(),
            f: Arc::new(f),
            jac: None,
        }
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&ForwardCurve, &ForwardCurve) -> Result<ForwardCurve> + Send + Sync + 'static,
    ) -> Self {
        self.jac = Some(Arc::new(jac));
        self
    }
}

impl VectorField for FnField {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn eval(&self, h: &ForwardCurve) -> Result<ForwardCurve> {
        (self.f)(h)
    }

    fn analytic_jacobian(&self, h: &ForwardCurve, v: &ForwardCurve) -> Option<Result<ForwardCurve>> {
        self.jac.as_ref().map(|j| j(h, v))
    }
}

/// `DX(h)·v`, analytic when the field provides it.
pub fn directional_derivative(
    field: &dyn VectorField,
    h: &ForwardCurve,
    v: &ForwardCurve,
) -> Result<ForwardCurve> {
    match field.analytic_jacobian(h, v) {
        Some(r) => r,
        None => directional_derivative_fd(field, h, v),
    }
}

/// Central difference `(X(h+εv) − X(h−εv))/(2ε)` with
/// `ε = ∛eps·(1 + ‖h‖∞)/(1 + ‖v‖∞)`, halved (up to 8 times) while `h ± εv`
/// leaves the region.
pub fn directional_derivative_fd(
    field: &dyn VectorField,
    h: &ForwardCurve,
    v: &ForwardCurve,
) -> Result<ForwardCurve> {
    let mut eps = f64::EPSILON.cbrt() * (1.0 + h.sup_norm()) / (1.0 + v.sup_norm());
    let mut last = None;
    for _ in 0..=8 {
        let plus = h.combine(1.0, v, eps)?;
        let minus = h.combine(1.0, v, -eps)?;
        match (field.eval(&plus), field.eval(&minus)) {
            (Ok(a), Ok(b)) => return a.combine(0.5 / eps, &b, -0.5 / eps),
            (Err(e @ Error::Region(_)), _) | (_, Err(e @ Error::Region(_))) => {
                last = Some(e);
                eps *= 0.5;
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Region("difference step left the region".into())))
}
