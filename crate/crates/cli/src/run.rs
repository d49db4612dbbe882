//! Commands: each one builds the configured model, runs one stage of the
//! pipeline and writes its artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use hjmfdr::closed_form::ClosedForm;
use hjmfdr::curve::{ForwardCurve, MaturityGrid};
use hjmfdr::fdr::{
    cir_realization, construct_realization, tangency_check, AffineRealization, CirParams, CirRealization, Family,
    LeafChart, SvenssonSetup, svensson_model,
};
use hjmfdr::functional::LinearFunctional;
use hjmfdr::lie::{generate_dla, DlaOptions, LieAlgebraReport};
use hjmfdr::model::{HjmModel, PhiTerm, StateRegion};
use hjmfdr::sim::{
    compare_realization, invariance_residuals, path_increments, realize_curve_path, simulate_hjm_spde, simulate_z,
    SpdePath, SvenssonSde,
};
use hjmfdr::Error;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{InitialBlock, ModelBlock, RunConfig, Scheme};

/// Configuration bundled for `demo-svensson`.
pub const SVENSSON_CONFIG: &str = include_str!("../configs/svensson.conf");

/// Artifact schema version, bumped whenever a field changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Analyze,
    Construct,
    Simulate,
    Verify,
    DemoSvensson,
}

/// An error with the operation that raised it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{op}: {error}")]
pub struct Failure {
    pub op: String,
    pub error: Error,
}

impl Failure {
    /// 2 configuration, 3 region or structure, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self.error {
            Error::Config(_) | Error::Io(_) | Error::GridMismatch(_) | Error::Precondition(_) => 2,
            Error::Region(_) | Error::Domain(_) | Error::Structure(_) | Error::Construction(_) => 3,
            Error::BlowUp { .. } | Error::Numerical(_) => 4,
        }
    }
}

trait Op<T> {
    fn op(self, op: &str) -> Result<T, Failure>;
}

impl<T> Op<T> for hjmfdr::Result<T> {
    fn op(self, op: &str) -> Result<T, Failure> {
        self.map_err(|error| Failure { op: op.to_string(), error })
    }
}

type Outcome<T> = Result<T, Failure>;

/// Writes artifacts into one directory, each stamped with the resolved
/// config and the hash of all inputs.
pub struct Artifacts {
    dir: PathBuf,
    config_text: String,
    input_sha256: String,
    json: bool,
    csv: bool,
    pub written: Vec<PathBuf>,
    pub summary: Vec<String>,
}

impl Artifacts {
    fn new(cfg: &RunConfig, extra_inputs: &[&[u8]]) -> Outcome<Self> {
        let config_text = cfg.stamp();
        let mut h = Sha256::new();
        h.update(config_text.as_bytes());
        for x in extra_inputs {
            h.update(x);
        }
        let dir = PathBuf::from(&cfg.output.directory);
        std::fs::create_dir_all(&dir)
            .map_err(Error::from)
            .op(&format!("output.directory {}", dir.display()))?;
        Ok(Artifacts {
            dir,
            config_text,
            input_sha256: hex::encode(h.finalize()),
            json: cfg.output.json,
            csv: cfg.output.csv,
            written: Vec::new(),
            summary: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, content: &str) -> Outcome<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, content).map_err(Error::from).op(&format!("write {}", path.display()))?;
        self.written.push(path);
        Ok(())
    }

    fn json(&mut self, name: &str, kind: &str, body: Value) -> Outcome<()> {
        if !self.json {
            return Ok(());
        }
        let doc = json!({
            "schema": format!("hjmfdr.{kind}/{SCHEMA_VERSION}"),
            "config": self.config_text,
            "input_sha256": self.input_sha256,
            "result": body,
        });
        let text = serde_json::to_string_pretty(&doc).expect("JSON values serialize") + "\n";
        self.write(name, &text)
    }

    fn csv(&mut self, name: &str, kind: &str, body: &str) -> Outcome<()> {
        if !self.csv {
            return Ok(());
        }
        let mut s = format!("# schema = hjmfdr.{kind}/{SCHEMA_VERSION}\n# input_sha256 = {}\n", self.input_sha256);
        for l in self.config_text.lines() {
            let _ = writeln!(s, "# {l}");
        }
        s.push_str(body);
        self.write(name, &s)
    }

    fn note(&mut self, line: String) {
        self.summary.push(line);
    }
}

/// The configured model with what the commands need around it.
pub struct Setup {
    pub grid: Arc<MaturityGrid>,
    pub model: Arc<HjmModel>,
    pub h0: ForwardCurve,
    pub svensson: Option<SvenssonSetup>,
    pub cir: Option<CirRealization>,
}

pub fn build(cfg: &RunConfig) -> Outcome<Setup> {
    let grid = Arc::new(cfg.grid.build().op("grid")?);
    match &cfg.model {
        ModelBlock::Svensson { alpha } => {
            let s = svensson_model(*alpha, &grid).op("svensson_model")?;
            let h0 = match &cfg.initial {
                InitialBlock::State(z) => s.curve(&[z[0], z[1], z[2], z[3]]),
                InitialBlock::Curve(cf) => ForwardCurve::from_closed_form(&grid, cf.clone()),
            }
            .op("initial")?;
            s.model.sigma(&h0).op("initial curve")?;
            Ok(Setup { grid, model: s.model.clone(), h0, svensson: Some(s), cir: None })
        }
        ModelBlock::Cir { a, b, c, level } => {
            let p = CirParams::new(*a, *b, *c, *level).op("model (cir parameters)")?;
            let cir = cir_realization(&p, &grid).op("cir_realization")?;
            let h0 = match &cfg.initial {
                InitialBlock::State(r) => cir.g0.add(&cir.g1_hat.scale(r[0])),
                InitialBlock::Curve(cf) => ForwardCurve::from_closed_form(&grid, cf.clone()),
            }
            .op("initial")?;
            cir.model.sigma(&h0).op("initial curve")?;
            Ok(Setup { grid, model: cir.model.clone(), h0, svensson: None, cir: Some(cir) })
        }
        ModelBlock::Custom { functionals, phi, lower_bounds, perturbation } => {
            let ells = functionals
                .iter()
                .enumerate()
                .map(|(k, f)| {
                    let nodes = f.nodes.iter().map(|x| grid.node(grid.nearest_node(*x))).collect();
                    LinearFunctional::new(nodes, f.weights.clone(), f.kind).op(&format!("functional.{}", k + 1))
                })
                .collect::<Outcome<Vec<_>>>()?;
            let terms = phi
                .iter()
                .map(|ts| ts.iter().map(|t| PhiTerm::new(t.coeff.clone(), t.shape.clone())).collect())
                .collect();
            let mut model =
                HjmModel::new(grid.clone(), ells, terms, StateRegion::with_lower_bounds(lower_bounds.clone()))
                    .op("model")?;
            if !perturbation.is_empty() {
                model = model.with_perturbation_basis(perturbation.clone());
            }
            let h0 = match &cfg.initial {
                InitialBlock::Curve(cf) => ForwardCurve::from_closed_form(&grid, cf.clone()).op("initial")?,
                InitialBlock::State(_) => unreachable!("rejected by the config parser"),
            };
            model.sigma(&h0).op("initial curve")?;
            Ok(Setup { grid, model: Arc::new(model), h0, svensson: None, cir: None })
        }
    }
}

fn dla(cfg: &RunConfig, setup: &Setup) -> Outcome<LieAlgebraReport> {
    let a = &cfg.analysis;
    let opts = DlaOptions {
        max_depth: a.max_depth,
        tolerance: a.tolerance,
        test_points: a.test_points,
        seed: a.seed,
        perturbation: a.perturbation,
    };
    generate_dla(&setup.model, &setup.h0, &opts).op("generate_dla")
}

fn analyze(cfg: &RunConfig, setup: &Setup, out: &mut Artifacts) -> Outcome<LieAlgebraReport> {
    let rep = dla(cfg, setup)?;
    out.json("analysis.json", "analysis", rep.to_json())?;
    let k = rep.k_d.map_or("not constant".to_string(), |k| k.to_string());
    let flag = if rep.stabilized { "stabilized" } else { "not stabilized" };
    out.note(format!("analyze: k_D = {k} ({flag}), depth ranks {:?}", rep.rank_by_depth));
    Ok(rep)
}

fn realization(cfg: &RunConfig, setup: &Setup) -> Outcome<AffineRealization> {
    if let Some(cir) = &setup.cir {
        return Ok(cir.realization.clone());
    }
    let rep = dla(cfg, setup)?;
    construct_realization(&setup.model, &rep, cfg.analysis.mode).op("construct_realization")
}

fn curves_csv(curves: &[ForwardCurve], name: &str) -> String {
    let mut s = String::from("x");
    for k in 1..=curves.len() {
        let _ = write!(s, ",{name}_{k}");
    }
    s.push('\n');
    if let Some(first) = curves.first() {
        for (i, x) in first.grid().nodes().into_iter().enumerate() {
            let _ = write!(s, "{x:?}");
            for c in curves {
                let _ = write!(s, ",{:?}", c.values()[i]);
            }
            s.push('\n');
        }
    }
    s
}

fn construct(cfg: &RunConfig, setup: &Setup, out: &mut Artifacts) -> Outcome<AffineRealization> {
    let real = realization(cfg, setup)?;
    out.json("realization.json", "realization", real.to_json())?;
    out.csv("lambdas.csv", "lambdas", &curves_csv(&real.lambdas, "lambda"))?;
    out.csv("deltas.csv", "deltas", &curves_csv(&real.deltas, "delta"))?;
    out.note(format!("construct: d = {}, a map {}", real.d(), real.to_json()["a_map"]["kind"]));
    for w in &real.warnings {
        out.note(format!("construct warning: {w}"));
    }
    Ok(real)
}

fn n_steps(cfg: &RunConfig) -> usize {
    (cfg.simulate.t_end / cfg.simulate.dt).round() as usize
}

/// One path of the configured scheme driven by path `p` of the noise.
fn simulate_path(cfg: &RunConfig, setup: &Setup, p: u64) -> Outcome<(SpdePath, Option<String>)> {
    let sim = &cfg.simulate;
    let noise = path_increments(sim.seed, sim.dt, setup.model.d(), n_steps(cfg), p);
    match sim.scheme {
        Scheme::Spde => Ok((
            simulate_hjm_spde(&setup.model, &setup.h0, sim.t_end, sim.dt, &noise, sim.exit_policy)
                .op("simulate_hjm_spde")?,
            None,
        )),
        Scheme::Realized => {
            let (Some(s), InitialBlock::State(z)) = (&setup.svensson, &cfg.initial) else {
                return Err(Error::Config("simulate.scheme: `realized` needs the Svensson model and initial.state".into()))
                    .op("simulate");
            };
            let sde = SvenssonSde::new(s.alpha, [z[0], z[1], z[2], z[3]]).op("initial.state")?;
            let zp = simulate_z(&sde, sim.t_end, sim.dt, &noise).op("simulate_z")?;
            let path = realize_curve_path(&zp, &s.basis).op("realize_curve_path")?;
            Ok((path, Some(zp.to_csv())))
        }
    }
}

fn simulate(cfg: &RunConfig, setup: &Setup, out: &mut Artifacts) -> Outcome<SpdePath> {
    let sim = &cfg.simulate;
    let mut rows = Vec::new();
    let mut first = None;
    for p in 0..sim.paths.max(1) {
        let (path, z_csv) = simulate_path(cfg, setup, p as u64)?;
        if p < sim.save_paths {
            out.csv(&format!("path_{p:03}.csv"), "path", &path.to_csv())?;
            if let Some(z) = z_csv {
                out.csv(&format!("z_path_{p:03}.csv"), "z_path", &z)?;
            }
        }
        rows.push(json!({
            "path": p,
            "exited_region_at": path.exited_region_at,
            "clips": path.clips,
            "final_time": path.times.last(),
            "final_short_rate": path.curves.last().map(|c| c.values()[0]),
        }));
        if p == 0 {
            first = Some(path);
        }
    }
    let exits = rows.iter().filter(|r| !r["exited_region_at"].is_null()).count();
    out.json(
        "simulation.json",
        "simulation",
        json!({
            "scheme": format!("{:?}", sim.scheme).to_lowercase(),
            "dt": sim.dt,
            "n_steps": n_steps(cfg),
            "paths": rows,
        }),
    )?;
    out.note(format!("simulate: {} paths of {} steps, {exits} left the region", rows.len(), n_steps(cfg)));
    Ok(first.expect("at least one path"))
}

/// Invariance residuals of `path`, tangency at its first curve, and the
/// coupled comparison when requested.
fn verify(cfg: &RunConfig, setup: &Setup, path: &SpdePath, out: &mut Artifacts) -> Outcome<f64> {
    let first = path.curves.first().ok_or(Error::Config("verify.path: empty path".into())).op("verify")?;
    if first.grid().n_points() != setup.grid.n_points()
        || (first.grid().x_max() - setup.grid.x_max()).abs() > 1e-9 * setup.grid.x_max()
    {
        return Err(Error::Config(format!(
            "verify.path: path grid ({}, {} points) differs from the configured grid",
            first.grid().x_max(),
            first.grid().n_points()
        )))
        .op("verify");
    }
    // re-home the curves on the configured grid
    let curves = path
        .curves
        .iter()
        .map(|c| ForwardCurve::from_values(&setup.grid, c.values().to_vec()))
        .collect::<hjmfdr::Result<Vec<_>>>()
        .op("verify.path")?;
    let path = SpdePath { curves, ..path.clone() };
    let h = &path.curves[0];

    let span;
    let chart;
    let (family, family_name) = if let Some(s) = &setup.svensson {
        span = s.basis.clone();
        (Family::Span(&span), "span{g1, g2, g3, g4}")
    } else if let Some(c) = &setup.cir {
        span = vec![c.g0.clone(), c.g1_hat.clone()];
        (Family::Span(&span), "span{g0, g1}")
    } else {
        let real = realization(cfg, setup)?;
        chart = LeafChart::new(setup.model.clone(), h.clone(), real.lambdas.clone(), None, None).op("leaf chart")?;
        (Family::Chart(&chart), "leaf chart at the first curve")
    };
    let residuals = invariance_residuals(&path, family).op("invariance_residuals")?;
    let max = residuals.iter().copied().fold(0.0, f64::max);
    let tangency = match tangency_check(&setup.model, family, h) {
        Ok(t) => json!({
            "distance": t.distance,
            "mu_residual": t.mu_residual,
            "sigma_residuals": t.sigma_residuals,
            "consistent": t.consistent,
        }),
        Err(e @ Error::Precondition(_)) => json!({ "skipped": e.to_string() }),
        Err(e) => return Err(e).op("tangency_check"),
    };
    let comparison = match (&setup.svensson, &cfg.initial) {
        (Some(s), InitialBlock::State(z)) if cfg.verify.compare_paths > 0 => {
            let sde = SvenssonSde::new(s.alpha, [z[0], z[1], z[2], z[3]]).op("initial.state")?;
            let rep = compare_realization(&sde, &setup.grid, cfg.simulate.t_end, cfg.simulate.seed, cfg.verify.compare_paths)
                .op("compare_realization")?;
            out.note(format!(
                "verify: realization gap {:.3e} -> {:.3e} under refinement",
                rep.coarse.mean_sup_gap, rep.fine.mean_sup_gap
            ));
            serde_json::to_value(&rep).expect("report serializes")
        }
        _ => Value::Null,
    };
    out.json(
        "verification.json",
        "verification",
        json!({
            "family": family_name,
            "times": path.times,
            "invariance_residuals": residuals,
            "max_invariance_residual": max,
            "tangency": tangency,
            "comparison": comparison,
        }),
    )?;
    out.note(format!("verify: max invariance residual {max:.3e} against {family_name}"));
    Ok(max)
}

/// Bracket observation at the initial curve moved off the family (on the
/// family the bracket vanishes).
fn bracket(setup: &Setup, out: &mut Artifacts) -> Outcome<()> {
    let Some(s) = &setup.svensson else { return Ok(()) };
    let bump = ForwardCurve::from_closed_form(&setup.grid, ClosedForm::term(0.01, 0, 0.15)).op("bracket")?;
    let h = setup.h0.add(&bump).op("bracket")?;
    let obs = s.bracket_observation(&h).op("bracket_observation")?;
    out.json("bracket.json", "bracket", serde_json::to_value(&obs).expect("observation serializes"))?;
    out.note(format!(
        "bracket: [mu, sigma] along g2 (residual {:.1e}), {} coefficient observed",
        obs.direction_residual, obs.observed
    ));
    Ok(())
}

/// Runs `command` and returns the artifacts written.
pub fn run(command: Command, cfg: &RunConfig) -> Result<Artifacts, Failure> {
    let mut path_bytes = Vec::new();
    let given_path = (command == Command::Verify && !cfg.verify.path.is_empty()).then(|| Path::new(&cfg.verify.path));
    if let Some(p) = given_path {
        path_bytes = std::fs::read(p).map_err(Error::from).op(&format!("verify.path {}", p.display()))?;
    }
    let mut out = Artifacts::new(cfg, &[&path_bytes])?;
    let setup = build(cfg)?;
    match command {
        Command::Analyze => {
            analyze(cfg, &setup, &mut out)?;
        }
        Command::Construct => {
            construct(cfg, &setup, &mut out)?;
        }
        Command::Simulate => {
            simulate(cfg, &setup, &mut out)?;
        }
        Command::Verify => {
            let path = match given_path {
                Some(p) => {
                    let text = String::from_utf8(path_bytes)
                        .map_err(|_| Error::Config("not UTF-8 text".into()))
                        .op(&format!("verify.path {}", p.display()))?;
                    SpdePath::from_csv(&text, cfg.grid.weight_alpha).op("verify.path")?
                }
                None => simulate_path(cfg, &setup, 0)?.0,
            };
            verify(cfg, &setup, &path, &mut out)?;
        }
        Command::DemoSvensson => {
            if setup.svensson.is_none() {
                return Err(Error::Config("model.kind: demo-svensson needs the Svensson model".into())).op("demo-svensson");
            }
            analyze(cfg, &setup, &mut out)?;
            construct(cfg, &setup, &mut out)?;
            bracket(&setup, &mut out)?;
            let path = simulate(cfg, &setup, &mut out)?;
            verify(cfg, &setup, &path, &mut out)?;
        }
    }
    Ok(out)
}
