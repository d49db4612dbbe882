//! Run configuration: sectioned `key = value` text.
//!
//! ```text
//! # comment
//! [grid]
//! x_max = 21.25
//! n_points = 256
//! ```
//!
//! Keys are unique within a section except the descriptor keys `term` and
//! `rational`, which may repeat inside `[initial]`, `[phi.J.K]` and
//! `[perturbation.K]`. Unknown sections and keys are errors. The serialized
//! form spells out every default, so parse → serialize → parse is the
//! identity.

use std::fmt::Write as _;

use hjmfdr::closed_form::ClosedForm;
use hjmfdr::curve::{MaturityGrid, WeightKind};
use hjmfdr::fdr::DirectionMode;
use hjmfdr::functional::FunctionalKind;
use hjmfdr::model::CoefficientFn;
use hjmfdr::sim::ExitPolicy;
use hjmfdr::{Error, Result};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "HJMFDR_OUT";
const DEFAULT_OUT: &str = "hjmfdr-out";

#[derive(Debug, Clone, PartialEq)]
pub struct GridBlock {
    pub x_max: f64,
    pub n_points: usize,
    pub weight_alpha: f64,
    pub weight_kind: WeightKind,
}

impl GridBlock {
    pub fn build(&self) -> Result<MaturityGrid> {
        MaturityGrid::with_weight(self.x_max, self.n_points, self.weight_alpha, self.weight_kind)
            .map_err(|e| Error::Config(format!("grid: {e}")))
    }

    pub fn spacing(&self) -> f64 {
        self.x_max / (self.n_points as f64 - 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalSpec {
    pub kind: FunctionalKind,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhiTermSpec {
    pub coeff: CoefficientFn,
    pub shape: ClosedForm,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelBlock {
    Svensson { alpha: f64 },
    Cir { a: f64, b: f64, c: f64, level: f64 },
    Custom {
        functionals: Vec<FunctionalSpec>,
        /// Terms of `φʲ`, one list per factor.
        phi: Vec<Vec<PhiTermSpec>>,
        /// One entry per functional; `None` is unbounded.
        lower_bounds: Vec<Option<f64>>,
        perturbation: Vec<ClosedForm>,
    },
}

/// Initial curve: family coordinates (Svensson `z1..z4`, CIR short rate) or
/// an analytic descriptor.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialBlock {
    State(Vec<f64>),
    Curve(ClosedForm),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisBlock {
    pub max_depth: usize,
    pub tolerance: f64,
    pub test_points: usize,
    pub seed: u64,
    pub perturbation: f64,
    pub mode: DirectionMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// The forward-rate equation on the grid.
    Spde,
    /// The realized state SDE mapped to curves.
    Realized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateBlock {
    pub t_end: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    pub exit_policy: ExitPolicy,
    pub scheme: Scheme,
    /// How many paths are written as CSV.
    pub save_paths: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyBlock {
    /// Path CSV to check; empty means "simulate one path first".
    pub path: String,
    /// Paths of the coupled realization comparison (0 skips it).
    pub compare_paths: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputBlock {
    pub directory: String,
    pub json: bool,
    pub csv: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid: GridBlock,
    pub model: ModelBlock,
    pub initial: InitialBlock,
    pub analysis: AnalysisBlock,
    pub simulate: SimulateBlock,
    pub verify: VerifyBlock,
    pub output: OutputBlock,
}

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    line: usize,
}

/// Sections in file order with their entries.
#[derive(Debug, Clone, Default)]
struct Raw {
    sections: Vec<(String, Vec<Entry>)>,
}

const REPEATABLE: [&str; 2] = ["term", "rational"];

impl Raw {
    fn parse(text: &str) -> Result<Raw> {
        let mut raw = Raw::default();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = strip_comment(line).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {line_no}: unterminated section header")))?
                    .trim();
                if raw.section(name).is_some() {
                    return Err(Error::Config(format!("line {line_no}: section [{name}] appears twice")));
                }
                raw.sections.push((name.to_string(), Vec::new()));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`, got `{line}`")))?;
            let Some((name, entries)) = raw.sections.last_mut() else {
                return Err(Error::Config(format!("line {line_no}: key `{}` outside any section", k.trim())));
            };
            let key = k.trim().to_string();
            if !REPEATABLE.contains(&key.as_str()) && entries.iter().any(|e| e.key == key) {
                return Err(Error::Config(format!("line {line_no}: {name}.{key} is set twice")));
            }
            entries.push(Entry { key, value: v.trim().to_string(), line: line_no });
        }
        Ok(raw)
    }

    fn section(&self, name: &str) -> Option<&Vec<Entry>> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    /// `section.key=value`; the key is the text after the last dot.
    fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` must be `section.key=value`")))?;
        let (section, key) = path
            .trim()
            .rsplit_once('.')
            .ok_or_else(|| Error::Config(format!("override `{path}` must name `section.key`")))?;
        if REPEATABLE.contains(&key) {
            return Err(Error::Config(format!("{path}: descriptor lines cannot be overridden")));
        }
        let entry = Entry { key: key.to_string(), value: value.trim().to_string(), line: 0 };
        match self.sections.iter_mut().find(|(n, _)| n == section) {
            Some((_, entries)) => match entries.iter_mut().find(|e| e.key == key) {
                Some(e) => *e = entry,
                None => entries.push(entry),
            },
            None => self.sections.push((section.to_string(), vec![entry])),
        }
        Ok(())
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

/// Typed access to one section; every read key is marked so leftovers can
/// be reported as unknown.
struct Section<'a> {
    name: &'a str,
    entries: &'a [Entry],
    used: Vec<bool>,
}

impl<'a> Section<'a> {
    fn new(name: &'a str, entries: &'a [Entry]) -> Self {
        Section { name, entries, used: vec![false; entries.len()] }
    }

    fn empty(name: &'a str) -> Self {
        Section::new(name, &[])
    }

    fn raw(&mut self, key: &str) -> Option<(&'a str, usize)> {
        let i = self.entries.iter().position(|e| e.key == key)?;
        self.used[i] = true;
        Some((self.entries[i].value.as_str(), self.entries[i].line))
    }

    fn err(&self, key: &str, line: usize, msg: impl std::fmt::Display) -> Error {
        if line > 0 {
            Error::Config(format!("{}.{key} (line {line}): {msg}", self.name))
        } else {
            Error::Config(format!("{}.{key}: {msg}", self.name))
        }
    }

    fn get<T: std::str::FromStr>(&mut self, key: &str, default: Option<T>) -> Result<T> {
        match self.raw(key) {
            Some((v, line)) => v.parse().map_err(|_| self.err(key, line, format!("cannot parse `{v}`"))),
            None => default.ok_or_else(|| self.err(key, 0, "missing")),
        }
    }

    fn f64(&mut self, key: &str, default: Option<f64>) -> Result<f64> {
        let v: f64 = self.get(key, default)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(key, 0, "must be finite"))
        }
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some((v, line)) = self.raw(key) else { return Ok(None) };
        v.split_whitespace()
            .map(|s| s.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<_>>>()
            .map(Some)
            .ok_or_else(|| self.err(key, line, format!("`{v}` is not a list of numbers")))
    }

    fn descriptor(&mut self) -> Result<ClosedForm> {
        let mut pieces = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if REPEATABLE.contains(&e.key.as_str()) {
                self.used[i] = true;
                pieces.push(
                    ClosedForm::parse_piece(&e.key, &e.value)
                        .map_err(|err| Error::Config(format!("{}.{} (line {}): {err}", self.name, e.key, e.line)))?,
                );
            }
        }
        Ok(ClosedForm::new(pieces))
    }

    fn finish(self) -> Result<()> {
        match self.used.iter().position(|u| !u) {
            Some(i) => {
                let e = &self.entries[i];
                Err(self.err(&e.key, e.line, "unknown key"))
            }
            None => Ok(()),
        }
    }
}

fn functional_kind(name: &str) -> Option<FunctionalKind> {
    [FunctionalKind::PointCombination, FunctionalKind::BenchmarkYield, FunctionalKind::DualBasis]
        .into_iter()
        .find(|k| k.name() == name)
}

fn weight_kind_name(k: WeightKind) -> &'static str {
    match k {
        WeightKind::Polynomial => "polynomial",
        WeightKind::Exponential => "exponential",
    }
}

/// `name.N` or `name.N.M` with 1-based indices.
fn indices(section: &str, prefix: &str) -> Option<Vec<usize>> {
    let rest = section.strip_prefix(prefix)?.strip_prefix('.')?;
    rest.split('.').map(|s| s.parse::<usize>().ok().filter(|n| *n >= 1)).collect()
}

impl RunConfig {
    /// Parses config text, then applies `section.key=value` overrides.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut raw = Raw::parse(text)?;
        for o in overrides {
            raw.set(o)?;
        }
        Self::from_raw(&raw)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        Self::parse_with_overrides(text, &[])
    }

    fn from_raw(raw: &Raw) -> Result<RunConfig> {
        const FIXED: [&str; 7] = ["grid", "model", "initial", "analysis", "simulate", "verify", "output"];
        for (name, _) in &raw.sections {
            let indexed = indices(name, "functional").is_some_and(|v| v.len() == 1)
                || indices(name, "phi").is_some_and(|v| v.len() == 2)
                || indices(name, "perturbation").is_some_and(|v| v.len() == 1);
            if !FIXED.contains(&name.as_str()) && !indexed {
                return Err(Error::Config(format!("unknown section [{name}]")));
            }
        }
        let open = |name: &'static str| match raw.section(name) {
            Some(e) => Section::new(name, e),
            None => Section::empty(name),
        };

        let mut s = open("grid");
        let kind_name: String = s.get("weight_kind", Some("polynomial".to_string()))?;
        let weight_kind = match kind_name.as_str() {
            "polynomial" => WeightKind::Polynomial,
            "exponential" => WeightKind::Exponential,
            other => return Err(Error::Config(format!("grid.weight_kind: unknown kind `{other}`"))),
        };
        let grid = GridBlock {
            x_max: s.f64("x_max", Some(20.0))?,
            n_points: s.get("n_points", Some(256))?,
            weight_alpha: s.f64("weight_alpha", Some(4.0))?,
            weight_kind,
        };
        s.finish()?;
        grid.build()?;

        let model = Self::model_from_raw(raw, open("model"))?;

        let mut s = open("initial");
        let state = s.list("state")?;
        let curve = s.descriptor()?;
        let initial = match (state, curve.pieces().is_empty()) {
            (Some(z), true) => InitialBlock::State(z),
            (None, false) => InitialBlock::Curve(curve),
            (Some(_), false) => {
                return Err(Error::Config("initial: give either `state` or descriptor lines, not both".into()))
            }
            (None, true) => match &model {
                ModelBlock::Svensson { .. } => InitialBlock::State(vec![0.04, -0.02, 0.01, 0.02]),
                ModelBlock::Cir { .. } => InitialBlock::State(vec![0.03]),
                ModelBlock::Custom { .. } => InitialBlock::Curve(ClosedForm::constant(0.04)),
            },
        };
        s.finish()?;
        match (&model, &initial) {
            (ModelBlock::Svensson { .. }, InitialBlock::State(z)) if z.len() != 4 => {
                return Err(Error::Config(format!("initial.state: Svensson needs 4 coordinates, got {}", z.len())))
            }
            (ModelBlock::Cir { .. }, InitialBlock::State(z)) if z.len() != 1 => {
                return Err(Error::Config(format!("initial.state: CIR needs the short rate only, got {}", z.len())))
            }
            (ModelBlock::Custom { .. }, InitialBlock::State(_)) => {
                return Err(Error::Config("initial.state: custom models take descriptor lines".into()))
            }
            _ => {}
        }

        let mut s = open("analysis");
        let mode_name: String = s.get("mode", Some("minimal".to_string()))?;
        let mode = match mode_name.as_str() {
            "minimal" => DirectionMode::MinimalRealization,
            "general" => DirectionMode::General,
            other => return Err(Error::Config(format!("analysis.mode: unknown mode `{other}`"))),
        };
        let analysis = AnalysisBlock {
            max_depth: s.get("max_depth", Some(4))?,
            tolerance: s.f64("tolerance", Some(hjmfdr::lie::DEFAULT_RANK_TOLERANCE))?,
            test_points: s.get("test_points", Some(10))?,
            seed: s.get("seed", Some(0x5eed))?,
            perturbation: s.f64("perturbation", Some(0.1))?,
            mode,
        };
        s.finish()?;
        if analysis.max_depth == 0 || analysis.test_points == 0 {
            return Err(Error::Config("analysis.max_depth and analysis.test_points must be positive".into()));
        }

        let mut s = open("simulate");
        let policy: String = s.get("exit_policy", Some("stop".to_string()))?;
        let exit_policy = match policy.as_str() {
            "stop" => ExitPolicy::Stop,
            "truncate" => ExitPolicy::Truncate,
            other => return Err(Error::Config(format!("simulate.exit_policy: unknown policy `{other}`"))),
        };
        let scheme: String = s.get("scheme", Some("spde".to_string()))?;
        let scheme = match scheme.as_str() {
            "spde" => Scheme::Spde,
            "realized" => Scheme::Realized,
            other => return Err(Error::Config(format!("simulate.scheme: unknown scheme `{other}`"))),
        };
        let dt = s.f64("dt", Some(grid.spacing()))?;
        // default horizon: the whole number of steps closest to one year
        let year = dt * (1.0 / dt).round().max(1.0);
        let simulate = SimulateBlock {
            t_end: s.f64("t_end", Some(year))?,
            dt,
            paths: s.get("paths", Some(4))?,
            seed: s.get("seed", Some(1))?,
            exit_policy,
            scheme,
            save_paths: s.get("save_paths", Some(1))?,
        };
        s.finish()?;
        if (simulate.dt - grid.spacing()).abs() > 1e-12 * grid.spacing() {
            return Err(Error::Config(format!(
                "simulate.dt: {} must equal the grid spacing {}",
                simulate.dt,
                grid.spacing()
            )));
        }
        let steps = (simulate.t_end / simulate.dt).round();
        if !(simulate.t_end > 0.0) || (steps * simulate.dt - simulate.t_end).abs() > 1e-9 * simulate.t_end {
            return Err(Error::Config(format!(
                "simulate.t_end: {} is not a positive multiple of dt = {}",
                simulate.t_end, simulate.dt
            )));
        }
        if simulate.scheme == Scheme::Realized && !matches!(model, ModelBlock::Svensson { .. }) {
            return Err(Error::Config("simulate.scheme: `realized` is available for the Svensson model only".into()));
        }

        let mut s = open("verify");
        let verify = VerifyBlock {
            path: s.get("path", Some(String::new()))?,
            compare_paths: s.get("compare_paths", Some(0))?,
        };
        s.finish()?;

        let mut s = open("output");
        let default_dir = std::env::var(OUT_ENV).unwrap_or_else(|_| DEFAULT_OUT.to_string());
        let directory: String = s.get("directory", Some(default_dir))?;
        let formats: String = s.get("formats", Some("json csv".to_string()))?;
        let mut output = OutputBlock { directory, json: false, csv: false };
        for f in formats.split_whitespace() {
            match f {
                "json" => output.json = true,
                "csv" => output.csv = true,
                other => return Err(Error::Config(format!("output.formats: unknown format `{other}`"))),
            }
        }
        s.finish()?;
        if output.directory.is_empty() {
            return Err(Error::Config("output.directory: must not be empty".into()));
        }

        Ok(RunConfig { grid, model, initial, analysis, simulate, verify, output })
    }

    fn model_from_raw(raw: &Raw, mut s: Section<'_>) -> Result<ModelBlock> {
        let kind: String = s.get("kind", None)?;
        let model = match kind.as_str() {
            "svensson" => {
                let alpha = s.f64("alpha", Some(0.5))?;
                if alpha <= 0.0 {
                    return Err(Error::Config("model.alpha: must be positive".into()));
                }
                ModelBlock::Svensson { alpha }
            }
            "cir" => ModelBlock::Cir {
                a: s.f64("a", None)?,
                b: s.f64("b", None)?,
                c: s.f64("c", None)?,
                level: s.f64("level", None)?,
            },
            "custom" => {
                let mut functionals = Vec::new();
                for k in 1.. {
                    let name = format!("functional.{k}");
                    let Some(entries) = raw.section(&name) else { break };
                    let mut f = Section::new(&name, entries);
                    let kind: String = f.get("kind", Some("point".to_string()))?;
                    let kind = functional_kind(&kind).ok_or_else(|| f.err("kind", 0, format!("unknown kind `{kind}`")))?;
                    let nodes = f.list("nodes")?.ok_or_else(|| f.err("nodes", 0, "missing"))?;
                    let weights = f.list("weights")?.unwrap_or_else(|| vec![1.0; nodes.len()]);
                    f.finish()?;
                    functionals.push(FunctionalSpec { kind, nodes, weights });
                }
                let mut phi = Vec::new();
                for j in 1.. {
                    let mut terms = Vec::new();
                    for t in 1.. {
                        let name = format!("phi.{j}.{t}");
                        let Some(entries) = raw.section(&name) else { break };
                        let mut p = Section::new(&name, entries);
                        let (text, line) = p.raw("coeff").ok_or_else(|| p.err("coeff", 0, "missing"))?;
                        let coeff = CoefficientFn::parse(text).map_err(|e| p.err("coeff", line, e))?;
                        let shape = p.descriptor()?;
                        p.finish()?;
                        terms.push(PhiTermSpec { coeff, shape });
                    }
                    if terms.is_empty() {
                        break;
                    }
                    phi.push(terms);
                }
                let mut perturbation = Vec::new();
                for k in 1.. {
                    let name = format!("perturbation.{k}");
                    let Some(entries) = raw.section(&name) else { break };
                    let mut p = Section::new(&name, entries);
                    perturbation.push(p.descriptor()?);
                    p.finish()?;
                }
                let bounds = match s.raw("lower_bounds") {
                    None => vec![None; functionals.len()],
                    Some((v, line)) => v
                        .split_whitespace()
                        .map(|b| match b {
                            "none" => Ok(None),
                            x => x.parse::<f64>().map(Some).map_err(|_| s.err("lower_bounds", line, format!("`{x}` is not a bound"))),
                        })
                        .collect::<Result<Vec<_>>>()?,
                };
                if functionals.is_empty() || phi.is_empty() {
                    return Err(Error::Config(
                        "model: a custom model needs [functional.1] and [phi.1.1] sections".into(),
                    ));
                }
                if bounds.len() != functionals.len() {
                    return Err(Error::Config(format!(
                        "model.lower_bounds: {} bounds for {} functionals",
                        bounds.len(),
                        functionals.len()
                    )));
                }
                check_dense(raw, &functionals, &phi, &perturbation)?;
                ModelBlock::Custom { functionals, phi, lower_bounds: bounds, perturbation }
            }
            other => return Err(Error::Config(format!("model.kind: unknown kind `{other}`"))),
        };
        s.finish()?;
        if !matches!(model, ModelBlock::Custom { .. }) {
            if let Some((name, _)) = raw
                .sections
                .iter()
                .find(|(n, _)| n.starts_with("functional.") || n.starts_with("phi.") || n.starts_with("perturbation."))
            {
                return Err(Error::Config(format!("[{name}] is only valid with model.kind = custom")));
            }
        }
        Ok(model)
    }

    /// Resolved text form with every key present.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let g = &self.grid;
        let _ = writeln!(s, "[grid]");
        let _ = writeln!(s, "x_max = {:?}", g.x_max);
        let _ = writeln!(s, "n_points = {}", g.n_points);
        let _ = writeln!(s, "weight_alpha = {:?}", g.weight_alpha);
        let _ = writeln!(s, "weight_kind = {}", weight_kind_name(g.weight_kind));

        let _ = writeln!(s, "\n[model]");
        let mut sections = String::new();
        match &self.model {
            ModelBlock::Svensson { alpha } => {
                let _ = writeln!(s, "kind = svensson");
                let _ = writeln!(s, "alpha = {alpha:?}");
            }
            ModelBlock::Cir { a, b, c, level } => {
                let _ = writeln!(s, "kind = cir");
                let _ = writeln!(s, "a = {a:?}\nb = {b:?}\nc = {c:?}\nlevel = {level:?}");
            }
            ModelBlock::Custom { functionals, phi, lower_bounds, perturbation } => {
                let _ = writeln!(s, "kind = custom");
                let b: Vec<String> =
                    lower_bounds.iter().map(|b| b.map_or("none".to_string(), |v| format!("{v:?}"))).collect();
                let _ = writeln!(s, "lower_bounds = {}", b.join(" "));
                for (k, f) in functionals.iter().enumerate() {
                    let _ = writeln!(sections, "\n[functional.{}]", k + 1);
                    let _ = writeln!(sections, "kind = {}", f.kind.name());
                    let _ = writeln!(sections, "nodes = {}", join(&f.nodes));
                    let _ = writeln!(sections, "weights = {}", join(&f.weights));
                }
                for (j, terms) in phi.iter().enumerate() {
                    for (t, term) in terms.iter().enumerate() {
                        let _ = writeln!(sections, "\n[phi.{}.{}]", j + 1, t + 1);
                        let _ = writeln!(sections, "coeff = {}", term.coeff.to_text());
                        for l in term.shape.to_lines() {
                            let _ = writeln!(sections, "{l}");
                        }
                    }
                }
                for (k, p) in perturbation.iter().enumerate() {
                    let _ = writeln!(sections, "\n[perturbation.{}]", k + 1);
                    for l in p.to_lines() {
                        let _ = writeln!(sections, "{l}");
                    }
                }
            }
        }
        s.push_str(&sections);

        let _ = writeln!(s, "\n[initial]");
        match &self.initial {
            InitialBlock::State(z) => {
                let _ = writeln!(s, "state = {}", join(z));
            }
            InitialBlock::Curve(cf) => {
                for l in cf.to_lines() {
                    let _ = writeln!(s, "{l}");
                }
            }
        }

        let a = &self.analysis;
        let _ = writeln!(s, "\n[analysis]");
        let _ = writeln!(s, "max_depth = {}", a.max_depth);
        let _ = writeln!(s, "tolerance = {:?}", a.tolerance);
        let _ = writeln!(s, "test_points = {}", a.test_points);
        let _ = writeln!(s, "seed = {}", a.seed);
        let _ = writeln!(s, "perturbation = {:?}", a.perturbation);
        let mode = match a.mode {
            DirectionMode::MinimalRealization => "minimal",
            DirectionMode::General => "general",
        };
        let _ = writeln!(s, "mode = {mode}");

        let m = &self.simulate;
        let _ = writeln!(s, "\n[simulate]");
        let _ = writeln!(s, "t_end = {:?}", m.t_end);
        let _ = writeln!(s, "dt = {:?}", m.dt);
        let _ = writeln!(s, "paths = {}", m.paths);
        let _ = writeln!(s, "seed = {}", m.seed);
        let policy = match m.exit_policy {
            ExitPolicy::Stop => "stop",
            ExitPolicy::Truncate => "truncate",
        };
        let _ = writeln!(s, "exit_policy = {policy}");
        let scheme = match m.scheme {
            Scheme::Spde => "spde",
            Scheme::Realized => "realized",
        };
        let _ = writeln!(s, "scheme = {scheme}");
        let _ = writeln!(s, "save_paths = {}", m.save_paths);

        let _ = writeln!(s, "\n[verify]");
        let _ = writeln!(s, "path = {}", self.verify.path);
        let _ = writeln!(s, "compare_paths = {}", self.verify.compare_paths);

        let o = &self.output;
        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "directory = {}", o.directory);
        let formats: Vec<&str> = [("json", o.json), ("csv", o.csv)].iter().filter(|f| f.1).map(|f| f.0).collect();
        let _ = writeln!(s, "formats = {}", formats.join(" "));
        s
    }

    /// The serialized config without the output directory, so that runs
    /// writing to different places stamp identical inputs.
    pub fn stamp(&self) -> String {
        self.serialize().lines().filter(|l| !l.starts_with("directory = ")).map(|l| format!("{l}\n")).collect()
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

/// Rejects gaps such as `[phi.1.3]` without `[phi.1.2]`, which the
/// sequential scan above would silently skip.
fn check_dense(raw: &Raw, f: &[FunctionalSpec], phi: &[Vec<PhiTermSpec>], p: &[ClosedForm]) -> Result<()> {
    for (name, _) in &raw.sections {
        let ok = if let Some(v) = indices(name, "functional") {
            v[0] <= f.len()
        } else if let Some(v) = indices(name, "phi") {
            v[0] <= phi.len() && v[1] <= phi[v[0] - 1].len()
        } else if let Some(v) = indices(name, "perturbation") {
            v[0] <= p.len()
        } else {
            true
        };
        if !ok {
            return Err(Error::Config(format!("section [{name}] does not follow its predecessors")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CUSTOM: &str = "
[grid]
x_max = 21.25
n_points = 256

[model]
kind = custom
lower_bounds = 0

[functional.1]
nodes = 1.0

[phi.1.1]
coeff = sqrt 0.2 0 1
term = 1, 0, 0.5   # e^{-x/2}

[initial]
term = 0.03, 0, 0
term = 0.01, 1, 0.4
";

    #[test]
    fn defaults_are_explicit_and_round_trip() {
        let c = RunConfig::parse("[model]\nkind = svensson\n[output]\ndirectory = out\n").unwrap();
        let text = c.serialize();
        for key in ["x_max", "weight_kind", "alpha", "state", "tolerance", "dt", "exit_policy", "formats"] {
            assert!(text.contains(&format!("{key} = ")), "{key} missing in\n{text}");
        }
        let again = RunConfig::parse(&text).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.serialize(), text);
    }

    #[test]
    fn custom_model_round_trips() {
        let c = RunConfig::parse(&format!("{CUSTOM}\n[output]\ndirectory = o\n")).unwrap();
        let ModelBlock::Custom { functionals, phi, lower_bounds, .. } = &c.model else { panic!() };
        assert_eq!(functionals.len(), 1);
        assert_eq!(phi[0].len(), 1);
        assert_eq!(lower_bounds, &vec![Some(0.0)]);
        assert_eq!(RunConfig::parse(&c.serialize()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_sections_are_errors() {
        let e = RunConfig::parse("[model]\nkind = svensson\nalpah = 0.5\n").unwrap_err();
        assert!(e.to_string().contains("model.alpah"), "{e}");
        let e = RunConfig::parse("[model]\nkind = svensson\n[extra]\na = 1\n").unwrap_err();
        assert!(e.to_string().contains("[extra]"), "{e}");
        let e = RunConfig::parse("[model]\nkind = svensson\n[phi.1.1]\ncoeff = const 1\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn overrides_replace_and_add_keys() {
        let over = vec!["analysis.max_depth=1".to_string(), "model.alpha = 0.7".to_string()];
        let c = RunConfig::parse_with_overrides("[model]\nkind = svensson\nalpha = 0.5\n", &over).unwrap();
        assert_eq!(c.analysis.max_depth, 1);
        assert_eq!(c.model, ModelBlock::Svensson { alpha: 0.7 });
        assert!(RunConfig::parse_with_overrides("[model]\nkind = svensson\n", &["nodot=1".into()]).is_err());
    }

    #[test]
    fn errors_name_the_key() {
        let cases = [
            ("[model]\nkind = svensson\n[simulate]\ndt = 0.5\n", "simulate.dt"),
            ("[model]\nkind = svensson\n[simulate]\nt_end = 0.1\n", "simulate.t_end"),
            ("[model]\nkind = svensson\n[grid]\nn_points = many\n", "grid.n_points"),
            ("[model]\nkind = cir\na = 1\n", "model.b"),
            ("[model]\nkind = svensson\n[initial]\nstate = 1 2\n", "initial.state"),
            ("[model]\nkind = svensson\nkind = cir\n", "model.kind"),
        ];
        for (text, key) in cases {
            let e = RunConfig::parse(text).unwrap_err();
            assert!(e.to_string().contains(key), "{key}: {e}");
        }
    }

    #[test]
    fn gaps_in_indexed_sections_are_rejected() {
        let text = CUSTOM.replace("[phi.1.1]", "[phi.1.2]");
        assert!(RunConfig::parse(&text).is_err());
    }
}
