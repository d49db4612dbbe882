//! Monte Carlo simulation of realized finite-dimensional dynamics and of the
//! full forward-rate equation on the grid, with invariance residuals and a
//! coupled comparison of the two.
//!
//! Random numbers come from ChaCha8 seeded with the run seed; path `p` uses
//! stream `p`, so adding paths never changes existing ones.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::closed_form::ClosedForm;
use crate::curve::{embed, ForwardCurve, MaturityGrid};
use crate::error::{Error, Result};
use crate::fdr::leaf::{project_to_leaf, Family};
use crate::fdr::svensson::{svensson_closed_forms, svensson_model};
use crate::model::HjmModel;

/// Gaussian increments `ΔW` for a contiguous block of paths.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    pub seed: u64,
    pub dt: f64,
    pub d: usize,
    pub n_steps: usize,
    pub first_path: u64,
    /// `increments[path][step][j]`, already scaled by `√dt`.
    pub increments: Vec<Vec<Vec<f64>>>,
}

/// Increments of one path: stream `path` of the seeded generator.
pub fn path_increments(seed: u64, dt: f64, d: usize, n_steps: usize, path: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    let s = dt.sqrt();
    (0..n_steps)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * s
                })
                .collect()
        })
        .collect()
}

/// Sums consecutive groups of `factor` increments.
pub fn coarsen_increments(fine: &[Vec<f64>], factor: usize) -> Result<Vec<Vec<f64>>> {
    if factor == 0 || fine.len() % factor != 0 {
        return Err(Error::Config(format!(
            "{} steps cannot be grouped by {factor}",
            fine.len()
        )));
    }
    Ok(fine
        .chunks(factor)
        .map(|c| {
            let mut s = c[0].clone();
            for v in &c[1..] {
                for (a, b) in s.iter_mut().zip(v) {
                    *a += b;
                }
            }
            s
        })
        .collect())
}

impl NoiseRecord {
    pub fn generate(seed: u64, dt: f64, d: usize, n_steps: usize, first_path: u64, paths: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("time step {dt} must be positive")));
        }
        let increments = (0..paths as u64)
            .into_par_iter()
            .map(|p| path_increments(seed, dt, d, n_steps, first_path + p))
            .collect();
        Ok(NoiseRecord { seed, dt, d, n_steps, first_path, increments })
    }

    pub fn zeros(dt: f64, d: usize, n_steps: usize, paths: usize) -> Self {
        NoiseRecord {
            seed: 0,
            dt,
            d,
            n_steps,
            first_path: 0,
            increments: vec![vec![vec![0.0; d]; n_steps]; paths],
        }
    }

    pub fn paths(&self) -> usize {
        self.increments.len()
    }

    /// The record at step `factor·dt`, each increment the sum of its fine
    /// sub-increments.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let increments = self
            .increments
            .iter()
            .map(|p| coarsen_increments(p, factor))
            .collect::<Result<Vec<_>>>()?;
        Ok(NoiseRecord {
            seed: self.seed,
            dt: self.dt * factor as f64,
            d: self.d,
            n_steps: self.n_steps / factor,
            first_path: self.first_path,
            increments,
        })
    }
}

fn step_count(t_end: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::Config(format!("horizon {t_end} and step {dt} must be positive")));
    }
    let n = (t_end / dt).round();
    if (n * dt - t_end).abs() > 1e-9 * t_end.max(dt) {
        return Err(Error::Config(format!("horizon {t_end} is not a multiple of the step {dt}")));
    }
    Ok(n as usize)
}

fn check_noise(inc: &[Vec<f64>], n: usize, d: usize) -> Result<()> {
    if inc.len() < n || inc.iter().take(n).any(|v| v.len() != d) {
        return Err(Error::Config(format!(
            "noise record has {} steps of width {}, need {n} of width {d}",
            inc.len(),
            inc.first().map_or(0, Vec::len)
        )));
    }
    Ok(())
}

/// Time series of realized states.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZPath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub m: usize,
    /// Steps where a square-root argument was clipped at zero.
    pub clips: usize,
    pub exited_region_at: Option<f64>,
}

impl ZPath {
    /// `t,z1,…,zm` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for i in 1..=self.m {
            let _ = write!(s, ",z{i}");
        }
        s.push('\n');
        for (t, z) in self.times.iter().zip(&self.states) {
            let _ = write!(s, "{t:?}");
            for v in z {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
        s
    }
}

/// A finite-dimensional diffusion `Z` and its curve map `φ`.
pub trait RealizedSde: Send + Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn initial_state(&self) -> Vec<f64>;
    /// One Euler step in place from `t − dt` to `t`; increments `clips`
    /// when a square-root argument is cut at zero.
    fn step(&self, z: &mut [f64], t: f64, dt: f64, dw: &[f64], clips: &mut usize) -> Result<()>;
    /// `φ(z)` on `grid`.
    fn curve(&self, z: &[f64], t: f64, grid: &Arc<MaturityGrid>) -> Result<ForwardCurve>;
    /// The forward-rate model this realizes, on `grid`.
    fn model(&self, grid: &Arc<MaturityGrid>) -> Result<Arc<HjmModel>>;
}

pub fn simulate_z(sde: &dyn RealizedSde, t_end: f64, dt: f64, noise: &[Vec<f64>]) -> Result<ZPath> {
    let n = step_count(t_end, dt)?;
    check_noise(noise, n, sde.noise_dim())?;
    let mut z = sde.initial_state();
    let mut times = vec![0.0];
    let mut states = vec![z.clone()];
    let mut clips = 0;
    for (k, dw) in noise.iter().take(n).enumerate() {
        sde.step(&mut z, (k + 1) as f64 * dt, dt, dw, &mut clips)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite realized state at t = {}", (k + 1) as f64 * dt)));
        }
        times.push((k + 1) as f64 * dt);
        states.push(z.clone());
    }
    Ok(ZPath { times, states, m: sde.dim(), clips, exited_region_at: None })
}

/// `dZ² = (Z³ + Z⁴ − αZ²)dt + √(αZ⁴)dW`, `Z³ = Z³_0 e^{−αt}`,
/// `Z⁴ = Z⁴_0 e^{−2αt}`, `Z¹` constant.
#[derive(Debug, Clone, PartialEq)]
pub struct SvenssonSde {
    pub alpha: f64,
    pub z0: [f64; 4],
}

impl SvenssonSde {
    pub fn new(alpha: f64, z0: [f64; 4]) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
        }
        if z0[3] < 0.0 {
            return Err(Error::Domain(format!("z4 must be non-negative, got {}", z0[3])));
        }
        Ok(SvenssonSde { alpha, z0 })
    }
}

impl RealizedSde for SvenssonSde {
    fn dim(&self) -> usize {
        4
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn initial_state(&self) -> Vec<f64> {
        self.z0.to_vec()
    }

    fn step(&self, z: &mut [f64], t: f64, dt: f64, dw: &[f64], clips: &mut usize) -> Result<()> {
        let a = self.alpha;
        let v = a * z[3];
        if v < 0.0 {
            *clips += 1;
        }
        z[1] += (z[2] + z[3] - a * z[1]) * dt + v.max(0.0).sqrt() * dw[0];
        z[2] = self.z0[2] * (-a * t).exp();
        z[3] = self.z0[3] * (-2.0 * a * t).exp();
        Ok(())
    }

    fn curve(&self, z: &[f64], _t: f64, grid: &Arc<MaturityGrid>) -> Result<ForwardCurve> {
        let cf = svensson_closed_forms(self.alpha)
            .iter()
            .zip(z)
            .fold(ClosedForm::zero(), |acc, (g, c)| acc.combine(1.0, g, *c));
        ForwardCurve::from_closed_form(grid, cf)
    }

    fn model(&self, grid: &Arc<MaturityGrid>) -> Result<Arc<HjmModel>> {
        Ok(svensson_model(self.alpha, grid)?.model)
    }
}

/// `σ ≡ 0`: the realized state is the elapsed time and `φ(t) = S(t)h0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportSde {
    pub h0: ClosedForm,
}

impl RealizedSde for TransportSde {
    fn dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        0
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![0.0]
    }

    fn step(&self, z: &mut [f64], _t: f64, dt: f64, _dw: &[f64], _clips: &mut usize) -> Result<()> {
        z[0] += dt;
        Ok(())
    }

    fn curve(&self, z: &[f64], t: f64, grid: &Arc<MaturityGrid>) -> Result<ForwardCurve> {
        let _ = z;
        ForwardCurve::from_closed_form(grid, self.h0.clone())?.without_closed_form().shift(t)
    }

    fn model(&self, grid: &Arc<MaturityGrid>) -> Result<Arc<HjmModel>> {
        Ok(Arc::new(HjmModel::zero_volatility(grid.clone())))
    }
}

/// Svensson state dynamics; see [`SvenssonSde`].
pub fn simulate_z_svensson(z0: [f64; 4], alpha: f64, t_end: f64, dt: f64, noise: &[Vec<f64>]) -> Result<ZPath> {
    simulate_z(&SvenssonSde::new(alpha, z0)?, t_end, dt, noise)
}

/// Curves on one grid over time.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdePath {
    pub times: Vec<f64>,
    pub curves: Vec<ForwardCurve>,
    pub exited_region_at: Option<f64>,
    /// Steps where the volatility was switched off outside the region.
    pub clips: usize,
}

impl SpdePath {
    /// Long format `t,x,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,x,value\n");
        for (t, c) in self.times.iter().zip(&self.curves) {
            for (x, v) in c.grid().nodes().into_iter().zip(c.values()) {
                let _ = writeln!(s, "{t:?},{x:?},{v:?}");
            }
        }
        s
    }

    /// Inverse of [`SpdePath::to_csv`]; the grid is rebuilt from the nodes
    /// of the first time.
    pub fn from_csv(text: &str, weight_alpha: f64) -> Result<SpdePath> {
        let mut rows: Vec<(f64, f64, f64)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("t,") {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(Error::Config(format!("path row {} has {} fields", i + 1, f.len())));
            }
            let p = |s: &str| crate::closed_form::parse_f64(s.trim(), "path value");
            rows.push((p(f[0])?, p(f[1])?, p(f[2])?));
        }
        let Some(&(t0, _, _)) = rows.first() else {
            return Err(Error::Config("path file has no rows".into()));
        };
        let xs: Vec<f64> = rows.iter().take_while(|r| r.0 == t0).map(|r| r.1).collect();
        let grid = Arc::new(crate::curve::grid_from_nodes(&xs, weight_alpha)?);
        let n = xs.len();
        if rows.len() % n != 0 {
            return Err(Error::Config("path rows do not form whole curves".into()));
        }
        let mut times = Vec::new();
        let mut curves = Vec::new();
        for chunk in rows.chunks(n) {
            if chunk.iter().any(|r| r.0 != chunk[0].0) {
                return Err(Error::Config(format!("time {} has the wrong number of nodes", chunk[0].0)));
            }
            times.push(chunk[0].0);
            curves.push(ForwardCurve::from_values(&grid, chunk.iter().map(|r| r.2).collect())?);
        }
        Ok(SpdePath { times, curves, exited_region_at: None, clips: 0 })
    }
}

/// `Σ_i Z^i_t g_i` at every time.
pub fn realize_curve_path(z: &ZPath, basis: &[ForwardCurve]) -> Result<SpdePath> {
    let Some(first) = basis.first() else {
        return Err(Error::Precondition("empty basis".into()));
    };
    let grid = first.grid().clone();
    if z.m != basis.len() {
        return Err(Error::Precondition(format!("{} states for {} basis curves", z.m, basis.len())));
    }
    let curves = z
        .states
        .iter()
        .map(|s| {
            let terms: Vec<(f64, &ForwardCurve)> = s.iter().copied().zip(basis).collect();
            ForwardCurve::linear_combination(&grid, &terms)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpdePath { times: z.times.clone(), curves, exited_region_at: z.exited_region_at, clips: z.clips })
}

/// What happens when a step would leave the model's region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum ExitPolicy {
    /// End the path; the exit time is recorded.
    #[default]
    Stop,
    /// Transport only (zero drift and volatility) for that step, counted.
    Truncate,
}

/// Runs the grid-locked splitting scheme, calling `observe(t, r_t)` at every
/// time including `t = 0`. Returns the exit time (if any) and the clip count.
pub fn run_spde(
    model: &HjmModel,
    h0: &ForwardCurve,
    t_end: f64,
    dt: f64,
    noise: &[Vec<f64>],
    policy: ExitPolicy,
    mut observe: impl FnMut(f64, &ForwardCurve) -> Result<()>,
) -> Result<(Option<f64>, usize)> {
    let grid = model.grid();
    if (dt - grid.spacing()).abs() > 1e-12 * grid.spacing() {
        return Err(Error::Config(format!(
            "time step {dt} must equal the grid spacing {}",
            grid.spacing()
        )));
    }
    let n = step_count(t_end, dt)?;
    check_noise(noise, n, model.d())?;
    model.sigma(h0)?;
    let mut r = h0.without_closed_form();
    observe(0.0, &r)?;
    let mut clips = 0;
    for (k, dw) in noise.iter().take(n).enumerate() {
        let t = (k + 1) as f64 * dt;
        let s = r.shift(dt)?;
        let sigma = match model.sigma(&s) {
            Ok(v) => Some(v),
            Err(Error::Region(_)) => match policy {
                ExitPolicy::Stop => return Ok((Some(t), clips)),
                ExitPolicy::Truncate => {
                    clips += 1;
                    None
                }
            },
            Err(e) => return Err(e),
        };
        r = match sigma {
            None => s,
            Some(sig) => {
                let mut next = s.combine(1.0, &model.hjm_drift(&s)?, dt)?;
                for (sj, w) in sig.iter().zip(dw) {
                    next = next.combine(1.0, sj, *w)?;
                }
                next
            }
        };
        observe(t, &r)?;
    }
    Ok((None, clips))
}

/// The splitting scheme with `dt = Δx`: exact shift, then
/// `r ← r + dt·α_HJM(r) + Σ σʲ(r)ΔWʲ`.
pub fn simulate_hjm_spde(
    model: &HjmModel,
    h0: &ForwardCurve,
    t_end: f64,
    dt: f64,
    noise: &[Vec<f64>],
    policy: ExitPolicy,
) -> Result<SpdePath> {
    let mut times = Vec::new();
    let mut curves = Vec::new();
    let (exited_region_at, clips) = run_spde(model, h0, t_end, dt, noise, policy, |t, r| {
        times.push(t);
        curves.push(r.clone());
        Ok(())
    })?;
    Ok(SpdePath { times, curves, exited_region_at, clips })
}

/// Embedding rows (`h(0)` plus one per node) covering the nodes that the
/// flat tail fill cannot reach before `t_end`: `x ≤ x_max − t_end − Δx`,
/// keeping the derivative stencil clear of filled values.
pub fn interior_rows(grid: &MaturityGrid, t_end: f64) -> usize {
    let n = grid.n_points();
    if t_end <= 0.0 {
        return n + 1;
    }
    let dx = grid.spacing();
    let last = ((grid.x_max() - t_end) / dx + 1e-9).floor() as i64 - 1;
    (last.clamp(0, n as i64 - 1) as usize) + 2
}

/// Embedded norm restricted to the first `rows` rows.
fn interior_norm(h: &ForwardCurve, rows: usize) -> Result<f64> {
    Ok(embed(&[&h.without_closed_form()])?.rows(0, rows).norm())
}

/// Relative distance from a fixed linear span, with the orthonormal basis
/// computed once. Curves are embedded with the difference stencil, over the
/// first `rows` embedding rows.
#[derive(Debug, Clone)]
pub struct SpanProjector {
    q: DMatrix<f64>,
    rows: usize,
}

impl SpanProjector {
    pub fn new(basis: &[ForwardCurve]) -> Result<Self> {
        let rows = basis.first().map_or(0, |b| b.grid().n_points() + 1);
        Self::with_rows(basis, rows)
    }

    /// Measures on `[0, x_max − t_end − Δx]` only (see [`interior_rows`]).
    pub fn with_horizon(basis: &[ForwardCurve], t_end: f64) -> Result<Self> {
        let rows = basis.first().map_or(0, |b| interior_rows(b.grid(), t_end));
        Self::with_rows(basis, rows)
    }

    fn with_rows(basis: &[ForwardCurve], rows: usize) -> Result<Self> {
        let sampled: Vec<ForwardCurve> = basis.iter().map(|b| b.without_closed_form()).collect();
        let refs: Vec<&ForwardCurve> = sampled.iter().collect();
        let m = embed(&refs)?.rows(0, rows).into_owned();
        let svd = m.svd(true, false);
        let u = svd.u.expect("requested U");
        let smax = svd.singular_values.max();
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > 1e-12 * smax)
            .collect();
        let q = DMatrix::from_fn(u.nrows(), keep.len(), |r, c| u[(r, keep[c])]);
        Ok(SpanProjector { q, rows })
    }

    /// `(‖h − Ph‖, ‖h‖)` in the embedded norm.
    pub fn distance(&self, h: &ForwardCurve) -> Result<(f64, f64)> {
        let b = embed(&[&h.without_closed_form()])?.rows(0, self.rows).column(0).into_owned();
        let p = &self.q * (self.q.transpose() * &b);
        Ok(((b.clone() - p).norm(), b.norm()))
    }

    pub fn relative_distance(&self, h: &ForwardCurve) -> Result<f64> {
        let (d, n) = self.distance(h)?;
        Ok(if n == 0.0 { 0.0 } else { d / n })
    }
}

/// Per-time distance of the path from the family, relative to `‖r_t‖`.
pub fn invariance_residuals(path: &SpdePath, target: Family<'_>) -> Result<Vec<f64>> {
    if path.curves.is_empty() {
        return Err(Error::Precondition("empty path".into()));
    }
    match target {
        Family::Span(basis) => {
            let proj = SpanProjector::with_horizon(basis, path.times.last().copied().unwrap_or(0.0))?;
            path.curves.iter().map(|c| proj.relative_distance(c)).collect()
        }
        Family::Chart(chart) => path
            .curves
            .iter()
            .map(|c| {
                let n = embed(&[&c.without_closed_form()])?.column(0).norm();
                let p = project_to_leaf(c, chart)?;
                Ok(if n == 0.0 { 0.0 } else { p.residual / n })
            })
            .collect(),
    }
}

/// Sup over time of the span residual for each of `paths` paths (in path
/// order), measured on the nodes the tail fill cannot reach by `t_end`.
/// Paths are streamed, so none is stored.
#[allow(clippy::too_many_arguments)]
pub fn span_residual_ensemble(
    model: &HjmModel,
    h0: &ForwardCurve,
    basis: &[ForwardCurve],
    t_end: f64,
    seed: u64,
    paths: usize,
    policy: ExitPolicy,
) -> Result<Vec<f64>> {
    let dt = model.grid().spacing();
    let n = step_count(t_end, dt)?;
    let proj = SpanProjector::with_horizon(basis, t_end)?;
    (0..paths as u64)
        .into_par_iter()
        .map(|p| {
            let inc = path_increments(seed, dt, model.d(), n, p);
            let mut sup = 0.0f64;
            run_spde(model, h0, t_end, dt, &inc, policy, |_, r| {
                sup = sup.max(proj.relative_distance(r)?);
                Ok(())
            })?;
            Ok(sup)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelGap {
    pub dt: f64,
    pub n_points: usize,
    /// `sup_t ‖r_t − φ(Z_t)‖ / sup_t ‖φ(Z_t)‖` per path, on the interior
    /// nodes of [`interior_rows`].
    pub sup_gaps: Vec<f64>,
    pub mean_sup_gap: f64,
    /// Gap series of the first path.
    pub gap_series: Vec<f64>,
    pub times: Vec<f64>,
    pub exits: Vec<Option<f64>>,
    pub spde_clips: usize,
    pub z_clips: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub coarse: LevelGap,
    pub fine: LevelGap,
    /// `coarse.mean_sup_gap / fine.mean_sup_gap`.
    pub refinement_ratio: f64,
}

fn level_gap(
    sde: &dyn RealizedSde,
    grid: &Arc<MaturityGrid>,
    t_end: f64,
    noises: &[Vec<Vec<f64>>],
) -> Result<LevelGap> {
    let model = sde.model(grid)?;
    let dt = grid.spacing();
    let h0 = sde.curve(&sde.initial_state(), 0.0, grid)?;
    let rows = interior_rows(grid, t_end);
    let per_path: Vec<(f64, Vec<f64>, Vec<f64>, Option<f64>, usize, usize)> = noises
        .par_iter()
        .map(|inc| {
            let zp = simulate_z(sde, t_end, dt, inc)?;
            let mut sup_gap = 0.0f64;
            let mut sup_norm = 0.0f64;
            let mut series = Vec::new();
            let mut times = Vec::new();
            let (exit, clips) = run_spde(&model, &h0, t_end, dt, inc, ExitPolicy::Stop, |t, r| {
                let k = times.len();
                let phi = sde.curve(&zp.states[k], t, grid)?.without_closed_form();
                let diff = r.sub(&phi)?;
                let g = interior_norm(&diff, rows)?;
                let n = interior_norm(&phi, rows)?;
                sup_gap = sup_gap.max(g);
                sup_norm = sup_norm.max(n);
                series.push(g);
                times.push(t);
                Ok(())
            })?;
            let rel = if sup_norm == 0.0 { sup_gap } else { sup_gap / sup_norm };
            Ok((rel, series, times, exit, clips, zp.clips))
        })
        .collect::<Result<Vec<_>>>()?;
    let sup_gaps: Vec<f64> = per_path.iter().map(|p| p.0).collect();
    let mean_sup_gap = if sup_gaps.is_empty() { 0.0 } else { sup_gaps.iter().sum::<f64>() / sup_gaps.len() as f64 };
    Ok(LevelGap {
        dt,
        n_points: grid.n_points(),
        mean_sup_gap,
        gap_series: per_path.first().map(|p| p.1.clone()).unwrap_or_default(),
        times: per_path.first().map(|p| p.2.clone()).unwrap_or_default(),
        exits: per_path.iter().map(|p| p.3).collect(),
        spde_clips: per_path.iter().map(|p| p.4).sum(),
        z_clips: per_path.iter().map(|p| p.5).sum(),
        sup_gaps,
    })
}

/// Simulates the forward-rate equation and the realized SDE on shared noise
/// at `dt = Δx` of `grid` and again after halving both (coarse increments
/// are sums of the fine ones).
pub fn compare_realization(
    sde: &dyn RealizedSde,
    grid: &Arc<MaturityGrid>,
    t_end: f64,
    seed: u64,
    paths: usize,
) -> Result<ComparisonReport> {
    let fine_grid = Arc::new(grid.refined());
    let dt_f = fine_grid.spacing();
    let n_f = step_count(t_end, dt_f)?;
    let fine_noise: Vec<Vec<Vec<f64>>> = (0..paths as u64)
        .map(|p| path_increments(seed, dt_f, sde.noise_dim(), n_f, p))
        .collect();
    let coarse_noise = fine_noise
        .iter()
        .map(|p| coarsen_increments(p, 2))
        .collect::<Result<Vec<_>>>()?;
    let coarse = level_gap(sde, grid, t_end, &coarse_noise)?;
    let fine = level_gap(sde, &fine_grid, t_end, &fine_noise)?;
    let refinement_ratio = if fine.mean_sup_gap == 0.0 { f64::INFINITY } else { coarse.mean_sup_gap / fine.mean_sup_gap };
    Ok(ComparisonReport { coarse, fine, refinement_ratio })
}

/// Mean and standard error of samples.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}
