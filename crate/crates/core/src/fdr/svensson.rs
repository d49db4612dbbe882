//! The Svensson-type four-factor model: basis `1, e^{−αx}, xe^{−αx},
//! xe^{−2αx}`, the dual functional of the last member and the volatility
//! `σ(h) = √(αℓ(h))·e^{−αx}`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::closed_form::ClosedForm;
use crate::curve::{project_onto_span, ForwardCurve, MaturityGrid};
use crate::error::{Error, Result};
use crate::functional::{build_functional, LinearFunctional};
use crate::model::{directional_derivative_fd, CoefficientFn, DriftField, DriftKind, HjmModel, PhiTerm, SigmaField, StateRegion};

use super::leaf::LeafChart;

/// Candidate maturities for the dual functional (snapped to grid nodes).
pub const FUNCTIONAL_NODES: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];

pub fn svensson_closed_forms(alpha: f64) -> [ClosedForm; 4] {
    [
        ClosedForm::constant(1.0),
        ClosedForm::term(1.0, 0, alpha),
        ClosedForm::term(1.0, 1, alpha),
        ClosedForm::term(1.0, 1, 2.0 * alpha),
    ]
}

pub fn svensson_basis(alpha: f64, grid: &Arc<MaturityGrid>) -> Result<Vec<ForwardCurve>> {
    svensson_closed_forms(alpha)
        .into_iter()
        .map(|cf| ForwardCurve::from_closed_form(grid, cf))
        .collect()
}

#[derive(Debug, Clone)]
pub struct SvenssonSetup {
    pub alpha: f64,
    pub model: Arc<HjmModel>,
    pub basis: Vec<ForwardCurve>,
    /// `ℓ` with `ℓ(g4) = 1` and `ℓ(g1) = ℓ(g2) = ℓ(g3) = 0`.
    pub functional: LinearFunctional,
}

/// Builds the model on `grid`. Test-point perturbations mix the four basis
/// curves with two curves outside their span.
pub fn svensson_model(alpha: f64, grid: &Arc<MaturityGrid>) -> Result<SvenssonSetup> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    let basis = svensson_basis(alpha, grid)?;
    let targets: Vec<(ForwardCurve, f64)> = basis.iter().cloned().zip([0.0, 0.0, 0.0, 1.0]).collect();
    let nodes: Vec<f64> = FUNCTIONAL_NODES.iter().map(|x| x.min(grid.x_max())).collect();
    let functional = build_functional(&targets, &nodes)?;
    let cfs = svensson_closed_forms(alpha);
    let mut perturb: Vec<ClosedForm> = cfs.to_vec();
    perturb.push(ClosedForm::term(1.0, 0, 0.3 * alpha));
    perturb.push(ClosedForm::term(1.0, 2, 1.5 * alpha));
    let model = HjmModel::new(
        grid.clone(),
        vec![functional.clone()],
        vec![vec![PhiTerm::new(
            CoefficientFn::SqrtAffine { scale: alpha.sqrt(), c0: 0.0, c: vec![1.0] },
            cfs[1].clone(),
        )]],
        StateRegion::with_lower_bounds(vec![Some(0.0)]),
    )?
    .with_perturbation_basis(perturb);
    Ok(SvenssonSetup {
        alpha,
        model: Arc::new(model),
        basis,
        functional,
    })
}

/// Outcome of comparing the finite-difference bracket `[μ, σ](h)` with the
/// two candidate analytic coefficients along `g2`.
#[derive(Debug, Clone, Serialize)]
pub struct BracketObservation {
    /// Coefficient of the projection onto `g2`.
    pub fd_coefficient: f64,
    /// Relative residual of the bracket off `span{g2}`.
    pub direction_residual: f64,
    /// `−α√(αℓ) − ℓ(μ)/(2√(αℓ))`.
    pub uncorrected_coefficient: f64,
    /// `−α√(αℓ) − αℓ(μ)/(2√(αℓ))`.
    pub corrected_coefficient: f64,
    pub uncorrected_relative_error: f64,
    pub corrected_relative_error: f64,
    /// `"corrected"` or `"uncorrected"`, whichever is closer.
    pub observed: String,
}

impl SvenssonSetup {
    pub fn with_default_grid(alpha: f64) -> Result<Self> {
        svensson_model(alpha, &Arc::new(MaturityGrid::default()))
    }

    pub fn grid(&self) -> &Arc<MaturityGrid> {
        self.model.grid()
    }

    /// `(0.04, −0.02, 0.01, 0.02)`.
    pub fn default_state() -> [f64; 4] {
        [0.04, -0.02, 0.01, 0.02]
    }

    /// `Σ z_i g_i` with its descriptor.
    pub fn curve(&self, z: &[f64; 4]) -> Result<ForwardCurve> {
        let cf = svensson_closed_forms(self.alpha)
            .iter()
            .zip(z)
            .fold(ClosedForm::zero(), |acc, (g, c)| acc.combine(1.0, g, *c));
        ForwardCurve::from_closed_form(self.grid(), cf)
    }

    /// Random states in `span{g1..g4} ∩ U` around `z0`: each coordinate is
    /// perturbed by up to 50% of the largest `|z0_i|`, `z4` kept positive.
    pub fn random_states(&self, z0: &[f64; 4], count: usize, seed: u64) -> Vec<[f64; 4]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = z0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (0..count)
            .map(|_| {
                let mut z = *z0;
                for v in z.iter_mut().take(3) {
                    *v += 0.5 * s * rng.random_range(-1.0..1.0);
                }
                z[3] = z0[3].abs().max(1e-3 * s) * rng.random_range(0.25..1.75);
                z
            })
            .collect()
    }

    /// Leaf chart at `Σ z0_i g_i` with direction `g2` scaled to unit
    /// embedded norm.
    pub fn chart(&self, z0: &[f64; 4]) -> Result<LeafChart> {
        let base = self.curve(z0)?;
        let g2 = &self.basis[1];
        let lam = g2.scale(1.0 / g2.hw_norm());
        LeafChart::new(self.model.clone(), base, vec![lam], None, None)
    }

    /// Compares `[μ, σ](h)` computed with finite-difference Jacobians against
    /// the two analytic coefficients.
    pub fn bracket_observation(&self, h: &ForwardCurve) -> Result<BracketObservation> {
        let mu = DriftField { model: self.model.clone(), kind: DriftKind::Stratonovich };
        let sigma = SigmaField { model: self.model.clone(), j: 0 };
        let mu_h = self.model.stratonovich_drift(h)?;
        let sigma_h = self.model.sigma(h)?.remove(0);
        let bracket = directional_derivative_fd(&mu, h, &sigma_h)?
            .sub(&directional_derivative_fd(&sigma, h, &mu_h)?)?;
        let p = project_onto_span(&bracket, &[&self.basis[1]])?;
        let fd = p.coefficients[0];
        let l = self.functional.apply(h)?;
        let lmu = self.functional.apply(&mu_h)?;
        let a = self.alpha;
        let root = (a * l).sqrt();
        let uncorrected = -a * root - lmu / (2.0 * root);
        let corrected = -a * root - a * lmu / (2.0 * root);
        let rel = |c: f64| (fd - c).abs() / fd.abs().max(c.abs()).max(f64::MIN_POSITIVE);
        let (pe, ce) = (rel(uncorrected), rel(corrected));
        Ok(BracketObservation {
            fd_coefficient: fd,
            direction_residual: p.relative_residual(),
            uncorrected_coefficient: uncorrected,
            corrected_coefficient: corrected,
            uncorrected_relative_error: pe,
            corrected_relative_error: ce,
            observed: if ce <= pe { "corrected" } else { "uncorrected" }.into(),
        })
    }
}
