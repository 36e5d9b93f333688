//! λ selection over a grid on the probability simplex.

use serde::{Deserialize, Serialize};

use crate::adapter::{weighted_compose, AdapterCheckpoint, CompositionMode, WeightVector};
use crate::error::{Error, Result};
use crate::eval::{evaluate, personality_traits, EvalReport};
use crate::model::BaseModel;
use crate::tasks::Questionnaire;

/// All weight vectors `k / m` with `m = 1/g` and integer `k_i` summing to `m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimplexGrid {
    pub n: usize,
    pub m: u32,
    /// Integer numerators in lexicographic order.
    pub numerators: Vec<Vec<u32>>,
}

impl SimplexGrid {
    pub fn len(&self) -> usize {
        self.numerators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.numerators.is_empty()
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.numerators[i].iter().map(|&k| f64::from(k) / f64::from(self.m)).collect()
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }
}

fn steps(g: f64) -> Result<u32> {
    if !(g > 0.0 && g <= 1.0) {
        return Err(Error::Invalid(format!("granularity must be in (0, 1], got {g}")));
    }
    let inv = 1.0 / g;
    let m = inv.round();
    if (inv - m).abs() > 1e-9 || m > f64::from(u32::MAX) {
        return Err(Error::Invalid(format!("1/granularity must be an integer, got 1/{g} = {inv}")));
    }
    Ok(m as u32)
}

/// Interior grid: every component at least `g`.
pub fn simplex_grid(n: usize, g: f64) -> Result<SimplexGrid> {
    simplex_grid_with(n, g, false)
}

/// With `include_boundaries`, components may also be zero.
pub fn simplex_grid_with(n: usize, g: f64, include_boundaries: bool) -> Result<SimplexGrid> {
    if n == 0 {
        return Err(Error::Invalid("simplex needs at least one component".into()));
    }
    let m = steps(g)?;
    let lo = u32::from(!include_boundaries);
    let mut numerators = Vec::new();
    let mut current = Vec::with_capacity(n);
    fill(n, m, lo, &mut current, &mut numerators);
    Ok(SimplexGrid { n, m, numerators })
}

fn fill(n: usize, remaining: u32, lo: u32, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    let left = n - current.len();
    if left == 1 {
        if remaining >= lo {
            current.push(remaining);
            out.push(current.clone());
            current.pop();
        }
        return;
    }
    let reserve = lo * (left as u32 - 1);
    if remaining < reserve {
        return;
    }
    for k in lo..=remaining - reserve {
        current.push(k);
        fill(n, remaining - k, lo, current, out);
        current.pop();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEval {
    pub weights: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub target: String,
    pub mode: CompositionMode,
    pub granularity: f64,
    pub best_weights: WeightVector,
    pub best_objective: f64,
    pub best_report: EvalReport,
    pub baseline_objective: f64,
    pub baseline_report: EvalReport,
    pub grid: Vec<GridEval>,
    #[serde(skip)]
    pub composed: Option<AdapterCheckpoint>,
}

/// Checks that `adapters` hold the target's traits in E/I, S/N, T/F, J/P order.
pub fn check_targets(adapters: &[AdapterCheckpoint], target: &str) -> Result<()> {
    let traits = personality_traits(target)?;
    if adapters.len() != 4 {
        return Err(Error::Invalid(format!("a personality needs 4 adapters, got {}", adapters.len())));
    }
    for (i, (a, t)) in adapters.iter().zip(traits).enumerate() {
        if a.trait_label != t.to_string() {
            return Err(Error::Invalid(format!(
                "adapter {} is for trait {:?}, but {} needs {t} at position {}",
                i + 1,
                a.trait_label,
                target.to_ascii_uppercase(),
                i + 1
            )));
        }
    }
    Ok(())
}

fn objective_of(report: &EvalReport) -> f64 {
    report.target_objective().expect("report has a target")
}

/// Evaluates every grid point plus equal weights and keeps the best.
///
/// Ties keep the earlier, lexicographically smaller grid point.
pub fn sweep(
    adapters: &[AdapterCheckpoint],
    target: &str,
    base: &BaseModel,
    q: &Questionnaire,
    mode: CompositionMode,
    g: f64,
) -> Result<SweepResult> {
    check_targets(adapters, target)?;
    crate::adapter::validate_compatibility(adapters, mode)?;
    let run = |w: &WeightVector| -> Result<(AdapterCheckpoint, EvalReport)> {
        let composed = weighted_compose(adapters, w, mode)?;
        let report = evaluate(base, Some(&composed), q, Some(target))?;
        Ok((composed, report))
    };

    let equal = WeightVector::equal(adapters.len());
    let (_, baseline_report) = run(&equal)?;
    let baseline_objective = objective_of(&baseline_report);

    let grid = simplex_grid(adapters.len(), g)?;
    let mut evals = Vec::with_capacity(grid.len());
    let mut best: Option<(WeightVector, AdapterCheckpoint, EvalReport, f64)> = None;
    for point in grid.points() {
        let w = WeightVector::new(point.clone())?;
        let (composed, report) = run(&w)?;
        let objective = objective_of(&report);
        evals.push(GridEval { weights: point, objective });
        if best.as_ref().is_none_or(|b| objective > b.3) {
            best = Some((w, composed, report, objective));
        }
    }
    let (best_weights, composed, best_report, best_objective) =
        best.ok_or_else(|| Error::Invalid("empty simplex grid".into()))?;
    Ok(SweepResult {
        target: target.to_ascii_uppercase(),
        mode,
        granularity: g,
        best_weights,
        best_objective,
        best_report,
        baseline_objective,
        baseline_report,
        grid: evals,
        composed: Some(composed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_grids() {
        assert_eq!(simplex_grid(1, 0.1).unwrap().points().collect::<Vec<_>>(), vec![vec![1.0]]);
        assert_eq!(simplex_grid(2, 0.5).unwrap().points().collect::<Vec<_>>(), vec![vec![0.5, 0.5]]);
        let g = simplex_grid(3, 0.25).unwrap();
        assert_eq!(g.numerators, vec![vec![1, 1, 2], vec![1, 2, 1], vec![2, 1, 1]]);
        assert_eq!(simplex_grid_with(2, 0.5, true).unwrap().numerators, vec![vec![0, 2], vec![1, 1], vec![2, 0]]);
        assert!(simplex_grid(5, 0.25).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_granularity() {
        assert!(simplex_grid(4, 0.3).is_err());
        assert!(simplex_grid(4, 0.0).is_err());
        assert!(simplex_grid(4, 1.5).is_err());
        assert!(simplex_grid(0, 0.1).is_err());
    }
}
