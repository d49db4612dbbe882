//! Continuous linear functionals on sampled curves: finite combinations of
//! point evaluations at grid nodes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curve::{ForwardCurve, MaturityGrid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FunctionalKind {
    PointCombination,
    BenchmarkYield,
    DualBasis,
}

impl FunctionalKind {
    pub fn name(self) -> &'static str {
        match self {
            FunctionalKind::PointCombination => "point",
            FunctionalKind::BenchmarkYield => "yield",
            FunctionalKind::DualBasis => "dual",
        }
    }
}

/// `ℓ(h) = Σ_i w_i·h(x_i)` with every `x_i` a node of the curve's grid.
///
/// Nodes are kept on grid nodes so that application only reads stored
/// samples and is exactly linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFunctional {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    kind: FunctionalKind,
}

impl LinearFunctional {
    pub fn new(nodes: Vec<f64>, weights: Vec<f64>, kind: FunctionalKind) -> Result<Self> {
        if nodes.len() != weights.len() || nodes.is_empty() {
            return Err(Error::Construction(format!(
                "{} nodes but {} weights",
                nodes.len(),
                weights.len()
            )));
        }
        if let Some(x) = nodes.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::Domain(format!("functional node {x} is not a maturity")));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Construction("non-finite functional weight".into()));
        }
        Ok(LinearFunctional { nodes, weights, kind })
    }

    /// `ev_x`, with `x` snapped to the nearest node of `grid`.
    pub fn point_evaluation(grid: &MaturityGrid, x: f64) -> Result<Self> {
        check_range(grid, x)?;
        let x = grid.node(grid.nearest_node(x));
        Self::new(vec![x], vec![1.0], FunctionalKind::PointCombination)
    }

    /// Average yield `(1/x)·∫_0^x h` by trapezoid on the grid, `x` snapped to
    /// the nearest positive node.
    pub fn benchmark_yield(grid: &MaturityGrid, maturity: f64) -> Result<Self> {
        check_range(grid, maturity)?;
        let k = grid.nearest_node(maturity).max(1);
        let x = grid.node(k);
        let dx = grid.spacing();
        let nodes: Vec<f64> = (0..=k).map(|i| grid.node(i)).collect();
        let weights = (0..=k)
            .map(|i| if i == 0 || i == k { 0.5 * dx / x } else { dx / x })
            .collect();
        Self::new(nodes, weights, FunctionalKind::BenchmarkYield)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kind(&self) -> FunctionalKind {
        self.kind
    }

    pub fn apply(&self, h: &ForwardCurve) -> Result<f64> {
        let grid = h.grid();
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            check_range(grid, *x)?;
            let i = grid.node_index(*x).ok_or_else(|| {
                Error::GridMismatch(format!("functional node {x} is not a grid node"))
            })?;
            acc += w * h.values()[i];
        }
        Ok(acc)
    }

    /// Descriptor lines: `kind = ...`, `nodes = ...`, `weights = ...`.
    pub fn to_lines(&self) -> Vec<String> {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        vec![
            format!("kind = {}", self.kind.name()),
            format!("nodes = {}", join(&self.nodes)),
            format!("weights = {}", join(&self.weights)),
        ]
    }
}

fn check_range(grid: &MaturityGrid, x: f64) -> Result<()> {
    if (0.0..=grid.x_max() * (1.0 + 1e-12)).contains(&x) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "functional node {x} outside [0, {}]",
            grid.x_max()
        )))
    }
}

/// Minimum-norm functional with `ℓ(f_k) = c_k` supported on the candidate
/// nodes (each snapped to the nearest grid node).
pub fn build_functional(
    targets: &[(ForwardCurve, f64)],
    candidate_nodes: &[f64],
) -> Result<LinearFunctional> {
    let Some((first, _)) = targets.first() else {
        return Err(Error::Construction("no constraints given".into()));
    };
    let grid = first.grid().clone();
    for (f, _) in targets {
        first.same_grid(f)?;
    }
    let mut idx: Vec<usize> = Vec::new();
    for &x in candidate_nodes {
        check_range(&grid, x)?;
        let i = grid.nearest_node(x);
        if !idx.contains(&i) {
            idx.push(i);
        }
    }
    let (k, m) = (targets.len(), idx.len());
    if m < k {
        return Err(Error::Construction(format!(
            "{m} distinct candidate nodes for {k} constraints"
        )));
    }
    let a = DMatrix::from_fn(k, m, |r, c| targets[r].0.values()[idx[c]]);
    let b = DVector::from_iterator(k, targets.iter().map(|t| t.1));

    // name the first constraint that depends on the earlier ones
    let mut ortho: Vec<DVector<f64>> = Vec::new();
    for r in 0..k {
        let row = a.row(r).transpose();
        let mut v = row.clone();
        for q in &ortho {
            v -= q * q.dot(&v);
        }
        if v.norm() <= 1e-10 * row.norm().max(f64::MIN_POSITIVE) {
            return Err(Error::Construction(format!(
                "constraint {} is linearly dependent on the preceding constraints at the candidate nodes",
                r + 1
            )));
        }
        ortho.push(v.normalize());
    }

    let svd = a.clone().svd(true, true);
    let w = svd
        .solve(&b, 1e-14 * svd.singular_values.max())
        .map_err(|e| Error::Construction(format!("constraint solve failed: {e}")))?;
    let achieved = &a * &w;
    for r in 0..k {
        let err = (achieved[r] - b[r]).abs();
        if err > 1e-10 * b[r].abs().max(1.0) {
            return Err(Error::Construction(format!(
                "constraint {} reproduced only to {err:e}",
                r + 1
            )));
        }
    }
    LinearFunctional::new(
        idx.iter().map(|&i| grid.node(i)).collect(),
        w.iter().copied().collect(),
        FunctionalKind::DualBasis,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_form::ClosedForm;
    use std::sync::Arc;

    fn grid() -> Arc<MaturityGrid> {
        Arc::new(MaturityGrid::default())
    }

    fn svensson_basis(g: &Arc<MaturityGrid>, a: f64) -> Vec<ForwardCurve> {
        [
            ClosedForm::constant(1.0),
            ClosedForm::term(1.0, 0, a),
            ClosedForm::term(1.0, 1, a),
            ClosedForm::term(1.0, 1, 2.0 * a),
        ]
        .into_iter()
        .map(|cf| ForwardCurve::from_closed_form(g, cf).unwrap())
        .collect()
    }

    #[test]
    fn benchmark_yield_of_constant_is_constant() {
        let g = grid();
        let l = LinearFunctional::benchmark_yield(&g, 5.0).unwrap();
        let one = ForwardCurve::constant(&g, 1.0);
        assert!((l.apply(&one).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(l.kind(), FunctionalKind::BenchmarkYield);
    }

    #[test]
    fn dual_functional_reproduces_constraints() {
        let g = grid();
        let basis = svensson_basis(&g, 0.5);
        let targets: Vec<_> = basis
            .iter()
            .cloned()
            .zip([0.0, 0.0, 0.0, 1.0])
            .collect();
        let l = build_functional(&targets, &[0.5, 1.0, 2.0, 4.0, 8.0]).unwrap();
        for (f, c) in &targets {
            assert!((l.apply(f).unwrap() - c).abs() < 1e-10);
        }
    }

    #[test]
    fn five_nodes_four_constraints_solve_is_exact() {
        // direct oracle: residual of the constraint matrix times the weights
        let g = grid();
        let basis = svensson_basis(&g, 1.0);
        let targets: Vec<_> = basis.iter().cloned().zip([0.3, -1.0, 2.0, 1.0]).collect();
        let l = build_functional(&targets, &[0.25, 1.0, 2.5, 5.0, 10.0]).unwrap();
        let resid: f64 = targets
            .iter()
            .map(|(f, c)| {
                let s: f64 = l
                    .nodes()
                    .iter()
                    .zip(l.weights())
                    .map(|(x, w)| w * f.eval(*x).unwrap())
                    .sum();
                (s - c).abs()
            })
            .fold(0.0, f64::max);
        assert!(resid < 1e-12, "{resid}");
    }

    #[test]
    fn dependent_constraints_are_named() {
        let g = grid();
        let b = svensson_basis(&g, 1.0);
        let twice = b[1].scale(2.0);
        let targets = vec![(b[0].clone(), 0.0), (b[1].clone(), 1.0), (twice, 2.0)];
        match build_functional(&targets, &[0.5, 1.0, 2.0, 3.0]) {
            Err(Error::Construction(m)) => assert!(m.contains("constraint 3"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_range_nodes_are_rejected() {
        let g = grid();
        assert!(matches!(
            LinearFunctional::point_evaluation(&g, 25.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn foreign_grid_is_a_mismatch() {
        let g = grid();
        let l = LinearFunctional::point_evaluation(&g, g.spacing()).unwrap();
        let other = Arc::new(MaturityGrid::new(20.0, 100, 4.0).unwrap());
        let h = ForwardCurve::constant(&other, 1.0);
        assert!(matches!(l.apply(&h), Err(Error::GridMismatch(_))));
    }
}
