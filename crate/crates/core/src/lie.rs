//! Lie brackets of curve vector fields, numerical rank of their span and the
//! breadth-first generation of the Lie algebra distribution.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde_json::json;

use crate::curve::{embed, project_onto_span, ForwardCurve};
use crate::error::{Error, Result};
use crate::model::{directional_derivative, DriftField, DriftKind, HjmModel, SigmaField, VectorField};

/// Default relative singular-value threshold.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-6;

/// A named vector field: a generator or a left-normed bracket word.
#[derive(Clone)]
pub struct VectorFieldHandle {
    pub label: String,
    pub field: Arc<dyn VectorField>,
    pub depth: usize,
}

impl std::fmt::Debug for VectorFieldHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (depth {})", self.label, self.depth)
    }
}

impl VectorFieldHandle {
    pub fn new(field: Arc<dyn VectorField>, depth: usize) -> Self {
        VectorFieldHandle {
            label: field.label(),
            field,
            depth,
        }
    }

    pub fn eval(&self, h: &ForwardCurve) -> Result<ForwardCurve> {
        self.field.eval(h)
    }

    /// `[self, other]` as a new handle.
    pub fn bracket(&self, other: &VectorFieldHandle) -> VectorFieldHandle {
        let b = BracketField {
            x: self.field.clone(),
            y: other.field.clone(),
        };
        VectorFieldHandle {
            label: b.label(),
            field: Arc::new(b),
            depth: self.depth + other.depth,
        }
    }
}

/// `[X, Y]` as a vector field (its own Jacobian is taken by differences).
pub struct BracketField {
    pub x: Arc<dyn VectorField>,
    pub y: Arc<dyn VectorField>,
}

impl VectorField for BracketField {
    fn label(&self) -> String {
        format!("[{},{}]", self.x.label(), self.y.label())
    }

    fn eval(&self, h: &ForwardCurve) -> Result<ForwardCurve> {
        lie_bracket(self.x.as_ref(), self.y.as_ref(), h)
    }
}

/// `[X, Y](h) = DX(h)·Y(h) − DY(h)·X(h)`.
pub fn lie_bracket(x: &dyn VectorField, y: &dyn VectorField, h: &ForwardCurve) -> Result<ForwardCurve> {
    let xv = x.eval(h)?;
    let yv = y.eval(h)?;
    let a = directional_derivative(x, h, &yv)?;
    let b = directional_derivative(y, h, &xv)?;
    a.sub(&b)
}

/// Rank of a set of curves in the embedded inner product: the number of
/// singular values at or above `tolerance` times the largest. Returns the
/// full descending spectrum.
pub fn numerical_rank(vectors: &[ForwardCurve], tolerance: f64) -> Result<(usize, Vec<f64>)> {
    if vectors.is_empty() {
        return Ok((0, vec![]));
    }
    let refs: Vec<&ForwardCurve> = vectors.iter().collect();
    let m = embed(&refs)?;
    let s = singular_values(m);
    Ok((rank_of(&s, tolerance), s))
}

fn singular_values(m: DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn rank_of(s: &[f64], tolerance: f64) -> usize {
    match s.first() {
        Some(&smax) if smax > 0.0 => s.iter().filter(|v| **v >= tolerance * smax).count(),
        _ => 0,
    }
}

#[derive(Debug, Clone)]
pub struct DlaOptions {
    pub max_depth: usize,
    pub tolerance: f64,
    pub test_points: usize,
    pub seed: u64,
    /// Perturbation size relative to `‖h0‖∞`.
    pub perturbation: f64,
}

impl Default for DlaOptions {
    fn default() -> Self {
        DlaOptions {
            max_depth: 4,
            tolerance: DEFAULT_RANK_TOLERANCE,
            test_points: 10,
            seed: 0x5eed,
            perturbation: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LieAlgebraReport {
    pub test_points: Vec<ForwardCurve>,
    /// Retained spanning fields, in order of discovery.
    pub fields: Vec<VectorFieldHandle>,
    /// Labels of evaluated fields that added no rank.
    pub rejected: Vec<String>,
    /// Spectrum of the retained fields per test point, descending.
    pub singular_values: Vec<Vec<f64>>,
    pub rank_per_point: Vec<usize>,
    /// Consensus rank; `None` when the points disagree.
    pub k_d: Option<usize>,
    pub tolerance_used: f64,
    /// Largest per-point rank after each depth level.
    pub rank_by_depth: Vec<usize>,
    /// True when a whole level added no rank before `max_depth` ran out.
    pub stabilized: bool,
    /// Smallest over points of `s_k / s_{k+1}` for the spectrum of all
    /// evaluated fields (`k` the rank); `None` if nothing was rejected.
    pub gap: Option<f64>,
}

impl LieAlgebraReport {
    pub fn non_constant(&self) -> bool {
        self.k_d.is_none()
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "k_D": self.k_d,
            "non_constant_rank": self.non_constant(),
            "tolerance_used": self.tolerance_used,
            "rank_per_point": self.rank_per_point,
            "singular_values": self.singular_values,
            "fields": self.fields.iter().map(|f| json!({"label": f.label, "depth": f.depth})).collect::<Vec<_>>(),
            "rejected": self.rejected,
            "rank_by_depth": self.rank_by_depth,
            "stabilized": self.stabilized,
            "gap": self.gap,
            "test_points": self.test_points.iter().map(|c| c.values().to_vec()).collect::<Vec<_>>(),
        })
    }
}

/// `{μ, σ¹, …, σᵈ}` of a model.
pub fn generators(model: &Arc<HjmModel>) -> Vec<VectorFieldHandle> {
    let mut g = vec![VectorFieldHandle::new(
        Arc::new(DriftField {
            model: model.clone(),
            kind: DriftKind::Stratonovich,
        }),
        1,
    )];
    for j in 0..model.d() {
        g.push(VectorFieldHandle::new(
            Arc::new(SigmaField {
                model: model.clone(),
                j,
            }),
            1,
        ));
    }
    g
}

/// `h0` followed by `count − 1` random states `h0 + p`, where `p` is a
/// Gaussian combination of the model's perturbation basis rescaled to
/// `perturbation·‖h0‖∞`. Candidates outside the region are redrawn.
pub fn sample_test_points(
    model: &HjmModel,
    h0: &ForwardCurve,
    count: usize,
    perturbation: f64,
    seed: u64,
) -> Result<Vec<ForwardCurve>> {
    model.sigma(h0)?;
    let basis = model.perturbation_basis();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![h0.clone()];
    let scale = perturbation * h0.sup_norm().max(f64::MIN_POSITIVE);
    let mut attempts = 0;
    while points.len() < count {
        attempts += 1;
        if attempts > 1000 * count {
            return Err(Error::Region(
                "could not draw test points inside the region".into(),
            ));
        }
        let mut p = ForwardCurve::zero(model.grid());
        for b in &basis {
            let xi: f64 = StandardNormal.sample(&mut rng);
            p = p.combine(1.0, b, xi / b.sup_norm().max(f64::MIN_POSITIVE))?;
        }
        let n = p.sup_norm();
        if n == 0.0 {
            continue;
        }
        let h = h0.combine(1.0, &p, scale / n)?;
        if model.in_region(&h) {
            points.push(h);
        }
    }
    Ok(points)
}

/// Generates the Lie algebra distribution at `h0` and random nearby points.
pub fn generate_dla(model: &Arc<HjmModel>, h0: &ForwardCurve, opts: &DlaOptions) -> Result<LieAlgebraReport> {
    let points = sample_test_points(model, h0, opts.test_points.max(1), opts.perturbation, opts.seed)?;
    generate_dla_at_points(model, &points, opts)
}

/// As [`generate_dla`], on a caller-supplied set of test points.
pub fn generate_dla_at_points(
    model: &Arc<HjmModel>,
    points: &[ForwardCurve],
    opts: &DlaOptions,
) -> Result<LieAlgebraReport> {
    if points.is_empty() {
        return Err(Error::Precondition("no test points".into()));
    }
    for p in points {
        model.sigma(p)?;
    }
    let gens = generators(model);
    let evaluate = |f: &VectorFieldHandle| -> Result<Vec<ForwardCurve>> {
        points.par_iter().map(|h| f.eval(h)).collect()
    };

    let mut retained: Vec<VectorFieldHandle> = Vec::new();
    let mut values: Vec<Vec<ForwardCurve>> = vec![Vec::new(); points.len()];
    let mut all_values: Vec<Vec<ForwardCurve>> = vec![Vec::new(); points.len()];
    let mut ranks = vec![0usize; points.len()];
    let mut rejected = Vec::new();
    let mut rank_by_depth = Vec::new();
    let mut stabilized = false;

    let mut level: Vec<VectorFieldHandle> = gens.clone();
    for depth in 1..=opts.max_depth {
        let mut added = Vec::new();
        for cand in &level {
            let vals = evaluate(cand)?;
            let mut raised = false;
            let mut new_ranks = ranks.clone();
            for (i, v) in vals.iter().enumerate() {
                let mut trial = values[i].clone();
                trial.push(v.clone());
                let (r, _) = numerical_rank(&trial, opts.tolerance)?;
                new_ranks[i] = r;
                raised |= r > ranks[i];
            }
            for (i, v) in vals.into_iter().enumerate() {
                all_values[i].push(v.clone());
                if raised {
                    values[i].push(v);
                }
            }
            if raised {
                ranks = new_ranks;
                retained.push(cand.clone());
                added.push(cand.clone());
            } else {
                rejected.push(cand.label.clone());
            }
        }
        rank_by_depth.push(*ranks.iter().max().unwrap_or(&0));
        if depth > 1 && added.is_empty() {
            stabilized = true;
            break;
        }
        // next level: [X_i, W] for generators X_i and words W retained at this level
        level = added
            .iter()
            .flat_map(|w| {
                gens.iter()
                    .filter(move |x| x.label != w.label)
                    .map(move |x| x.bracket(w))
            })
            .collect();
        if level.is_empty() {
            stabilized = depth > 1;
            break;
        }
    }

    let mut singular = Vec::with_capacity(points.len());
    let mut rank_per_point = Vec::with_capacity(points.len());
    let mut gap: Option<f64> = None;
    for i in 0..points.len() {
        let (r, s) = numerical_rank(&values[i], opts.tolerance)?;
        rank_per_point.push(r);
        singular.push(s);
        if all_values[i].len() > values[i].len() {
            let (_, s_all) = numerical_rank(&all_values[i], opts.tolerance)?;
            let g = if r == 0 || r >= s_all.len() {
                None
            } else if s_all[r] == 0.0 {
                Some(f64::INFINITY)
            } else {
                Some(s_all[r - 1] / s_all[r])
            };
            if let Some(g) = g {
                gap = Some(gap.map_or(g, |old| old.min(g)));
            }
        }
    }
    let gap = gap.filter(|g| g.is_finite());
    let k_d = rank_per_point
        .iter()
        .all(|r| *r == rank_per_point[0])
        .then_some(rank_per_point[0]);
    Ok(LieAlgebraReport {
        test_points: points.to_vec(),
        fields: retained,
        rejected,
        singular_values: singular,
        rank_per_point,
        k_d,
        tolerance_used: opts.tolerance,
        rank_by_depth,
        stabilized,
        gap,
    })
}

/// Whether `μ(h) ∈ span{σʲ(h)}`, with the relative projection residual.
pub fn drift_in_span_test(model: &HjmModel, h: &ForwardCurve, tolerance: f64) -> Result<(bool, f64)> {
    let mu = model.stratonovich_drift(h)?;
    let sigma = model.sigma(h)?;
    let refs: Vec<&ForwardCurve> = sigma.iter().collect();
    let p = project_onto_span(&mu, &refs)?;
    let r = p.relative_residual();
    Ok((r < tolerance, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_form::ClosedForm;
    use crate::curve::MaturityGrid;
    use crate::model::FnField;
    use proptest::prelude::*;

    fn grid() -> Arc<MaturityGrid> {
        Arc::new(MaturityGrid::default())
    }

    fn cf(g: &Arc<MaturityGrid>, c: ClosedForm) -> ForwardCurve {
        ForwardCurve::from_closed_form(g, c).unwrap()
    }

    /// Linear field acting on two adjacent node values by a 2×2 block.
    fn block_field(g: &Arc<MaturityGrid>, m: [[f64; 2]; 2], at: usize, label: &str) -> FnField {
        let apply = {
            let g = g.clone();
            move |h: &ForwardCurve| {
                let mut v = vec![0.0; g.n_points()];
                let (a, b) = (h.values()[at], h.values()[at + 1]);
                v[at] = m[0][0] * a + m[0][1] * b;
                v[at + 1] = m[1][0] * a + m[1][1] * b;
                ForwardCurve::from_values(&g, v)
            }
        };
        FnField::new(label, apply)
    }

    #[test]
    fn rank_examples() {
        let g = grid();
        let zero = vec![ForwardCurve::zero(&g); 3];
        assert_eq!(numerical_rank(&zero, 1e-6).unwrap().0, 0);
        let basis = vec![
            ForwardCurve::constant(&g, 1.0),
            cf(&g, ClosedForm::term(1.0, 0, 0.5)),
            cf(&g, ClosedForm::term(1.0, 1, 0.5)),
        ];
        assert_eq!(numerical_rank(&basis, 1e-6).unwrap().0, 3);
        let col = vec![basis[1].clone(), basis[1].scale(2.0)];
        assert_eq!(numerical_rank(&col, 1e-6).unwrap().0, 1);
        assert_eq!(numerical_rank(&[], 1e-6).unwrap().0, 0);
    }

    #[test]
    fn constant_fields_commute() {
        let g = grid();
        let a = cf(&g, ClosedForm::term(1.0, 0, 0.3));
        let b = cf(&g, ClosedForm::term(1.0, 1, 0.9));
        let x = FnField::new("a", move |_: &ForwardCurve| Ok(a.clone()));
        let y = FnField::new("b", move |_: &ForwardCurve| Ok(b.clone()));
        let h = ForwardCurve::constant(&g, 0.02);
        assert!(lie_bracket(&x, &y, &h).unwrap().sup_norm() < 1e-10);
    }

    #[test]
    fn bracket_of_linear_fields_is_the_commutator() {
        let g = grid();
        let m1 = [[1.0, 2.0], [0.5, -1.0]];
        let m2 = [[0.0, 1.0], [3.0, 0.25]];
        let at = 10;
        let x = block_field(&g, m1, at, "X");
        let y = block_field(&g, m2, at, "Y");
        let h = ForwardCurve::from_fn(&g, |x| 0.02 + 0.01 * (x / 2.0).sin()).unwrap();
        let br = lie_bracket(&x, &y, &h).unwrap();
        // DX·Y − DY·X = M1 M2 h − M2 M1 h
        let (a, b) = (h.values()[at], h.values()[at + 1]);
        let mul = |m: [[f64; 2]; 2], n: [[f64; 2]; 2]| {
            let mut r = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    r[i][j] = m[i][0] * n[0][j] + m[i][1] * n[1][j];
                }
            }
            r
        };
        let p = mul(m1, m2);
        let q = mul(m2, m1);
        let want = [
            (p[0][0] - q[0][0]) * a + (p[0][1] - q[0][1]) * b,
            (p[1][0] - q[1][0]) * a + (p[1][1] - q[1][1]) * b,
        ];
        assert!((br.values()[at] - want[0]).abs() < 1e-8);
        assert!((br.values()[at + 1] - want[1]).abs() < 1e-8);
        let others: f64 = br
            .values()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != at && *i != at + 1)
            .map(|(_, v)| v.abs())
            .fold(0.0, f64::max);
        assert_eq!(others, 0.0);
    }

    #[test]
    fn zero_volatility_drift_has_empty_span() {
        let g = grid();
        let m = HjmModel::zero_volatility(g.clone());
        let h = cf(&g, ClosedForm::term(0.01, 1, 0.4));
        let (inside, r) = drift_in_span_test(&m, &h, 1e-6).unwrap();
        assert!(!inside);
        assert_eq!(r, 1.0);
    }

    fn quadratic_field(g: &Arc<MaturityGrid>, node: f64, shape: ClosedForm, k: f64, label: &str) -> FnField {
        let l = crate::functional::LinearFunctional::point_evaluation(g, node).unwrap();
        let s = cf(g, shape);
        let (l2, s2) = (l.clone(), s.clone());
        FnField::new(label, move |h: &ForwardCurve| {
            let y = l.apply(h)?;
            Ok(s.scale(k * y * y + y))
        })
        .with_jacobian(move |h: &ForwardCurve, v: &ForwardCurve| {
            let y = l2.apply(h)?;
            Ok(s2.scale((2.0 * k * y + 1.0) * l2.apply(v)?))
        })
    }

    fn smooth_fields(g: &Arc<MaturityGrid>, k: [f64; 3]) -> [FnField; 3] {
        [
            quadratic_field(g, 1.0, ClosedForm::term(1.0, 0, 0.4), k[0], "X"),
            quadratic_field(g, 3.0, ClosedForm::term(1.0, 1, 0.7), k[1], "Y"),
            quadratic_field(g, 0.5, ClosedForm::constant(1.0), k[2], "Z"),
        ]
    }

    fn rel(a: &ForwardCurve, scale: f64) -> f64 {
        a.sup_norm() / scale.max(1e-300)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn bracket_is_antisymmetric(k in prop::array::uniform3(-2.0f64..2.0), c in 0.01f64..0.1) {
            let g = grid();
            let [x, y, _] = smooth_fields(&g, k);
            let h = cf(&g, ClosedForm::constant(c).combine(1.0, &ClosedForm::term(0.02, 0, 0.3), 1.0));
            let xy = lie_bracket(&x, &y, &h).unwrap();
            let yx = lie_bracket(&y, &x, &h).unwrap();
            let s = xy.sup_norm().max(yx.sup_norm());
            prop_assert!(rel(&xy.add(&yx).unwrap(), s) < 1e-9);
        }

        #[test]
        fn bracket_is_bilinear(k in prop::array::uniform3(-2.0f64..2.0), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let g = grid();
            let [x, y, z] = smooth_fields(&g, k);
            let h = cf(&g, ClosedForm::constant(0.05).combine(1.0, &ClosedForm::term(0.01, 1, 0.5), 1.0));
            let x = Arc::new(x);
            let y = Arc::new(y);
            let comb = {
                let (x, y) = (x.clone(), y.clone());
                FnField::new("aX+bY", move |h: &ForwardCurve| x.eval(h)?.combine(a, &y.eval(h)?, b))
            };
            let lhs = lie_bracket(&comb, &z, &h).unwrap();
            let rhs = lie_bracket(x.as_ref(), &z, &h).unwrap()
                .combine(a, &lie_bracket(y.as_ref(), &z, &h).unwrap(), b).unwrap();
            let s = lhs.sup_norm().max(rhs.sup_norm());
            prop_assert!(rel(&lhs.sub(&rhs).unwrap(), s) < 1e-8);
        }

        #[test]
        fn jacobi_identity_holds(k in prop::array::uniform3(-2.0f64..2.0)) {
            let g = grid();
            let [x, y, z] = smooth_fields(&g, k);
            let (x, y, z): (Arc<dyn VectorField>, Arc<dyn VectorField>, Arc<dyn VectorField>) =
                (Arc::new(x), Arc::new(y), Arc::new(z));
            let h = cf(&g, ClosedForm::constant(0.04).combine(1.0, &ClosedForm::term(0.02, 0, 0.8), 1.0));
            let br = |a: &Arc<dyn VectorField>, b: &Arc<dyn VectorField>| -> Arc<dyn VectorField> {
                Arc::new(BracketField { x: a.clone(), y: b.clone() })
            };
            let t1 = lie_bracket(x.as_ref(), br(&y, &z).as_ref(), &h).unwrap();
            let t2 = lie_bracket(y.as_ref(), br(&z, &x).as_ref(), &h).unwrap();
            let t3 = lie_bracket(z.as_ref(), br(&x, &y).as_ref(), &h).unwrap();
            let s = t1.sup_norm().max(t2.sup_norm()).max(t3.sup_norm());
            let sum = t1.add(&t2).unwrap().add(&t3).unwrap();
            prop_assert!(rel(&sum, s) < 1e-5);
        }

        #[test]
        fn rank_ignores_order_and_positive_scaling(perm in Just(vec![2usize, 0, 1]).prop_shuffle(),
                                                   scales in prop::array::uniform3(0.1f64..10.0)) {
            let g = grid();
            let base = vec![
                cf(&g, ClosedForm::term(1.0, 0, 0.5)),
                cf(&g, ClosedForm::term(1.0, 1, 0.5)),
                cf(&g, ClosedForm::term(2.0, 0, 0.5)),
            ];
            let (r0, _) = numerical_rank(&base, 1e-6).unwrap();
            let shuffled: Vec<_> = perm.iter().map(|&i| base[i].scale(scales[i])).collect();
            let (r1, _) = numerical_rank(&shuffled, 1e-6).unwrap();
            prop_assert_eq!(r0, 2);
            prop_assert_eq!(r0, r1);
        }
    }

    #[test]
    fn constant_volatility_rank_two_and_stabilizes() {
        let g = grid();
        let m = Arc::new(
            HjmModel::constant_volatility(g.clone(), vec![ClosedForm::term(0.01, 0, 0.7)]).unwrap(),
        );
        let h0 = cf(&g, ClosedForm::constant(0.03).combine(1.0, &ClosedForm::term(0.01, 1, 0.25), 1.0));
        let rep = generate_dla(&m, &h0, &DlaOptions::default()).unwrap();
        assert_eq!(rep.k_d, Some(2), "{:?}", rep.singular_values);
        assert!(rep.stabilized);
        assert!(rep.rank_by_depth.windows(2).all(|w| w[1] >= w[0]));
        let js = rep.to_json();
        assert_eq!(js["k_D"], 2);
    }

    #[test]
    fn depth_one_is_not_stabilized() {
        let g = grid();
        let m = Arc::new(
            HjmModel::constant_volatility(g.clone(), vec![ClosedForm::term(0.01, 0, 0.7)]).unwrap(),
        );
        let h0 = cf(&g, ClosedForm::constant(0.03).combine(1.0, &ClosedForm::term(0.01, 1, 0.25), 1.0));
        let opts = DlaOptions { max_depth: 1, ..DlaOptions::default() };
        let rep = generate_dla(&m, &h0, &opts).unwrap();
        assert!(!rep.stabilized);
        assert!(rep.k_d.unwrap() >= m.d());
    }
}
