//! Anchor problems: minimize a weighted sum of group inflations subject to the
//! hinge-surrogate risk constraint on a subsample of optimization voxels.
//!
//! The problem is
//!
//! ```text
//! minimize    sum_k w_k λ_k
//! subject to  sum_i p_i max(0, 1 + (r_i - λ_{g(i)}) / γ) <= ε,   λ >= 0
//! ```
//!
//! where each row `i` carries a residual `r_i`, a group `g(i)` and a
//! probability weight `p_i`. It is a linear program once each hinge gets a
//! slack variable. The constraint is a sum of one convex, non-increasing,
//! piecewise-linear function per group, so the LP is a continuous knapsack
//! over the linear pieces of those functions: the optimum takes pieces in
//! order of decreasing risk reduction per unit of objective, splitting the
//! last one. [`solve_anchor`] does exactly that.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{group_weights, hinge, residuals, GroupWeights, LambdaMode, LambdaVector, DEFAULT_GAMMA};
use crate::partition::PartitionSpec;
use crate::tensor_io::SampleSet;

/// Slack allowed on the surrogate constraint.
pub const FEASIBILITY_TOL: f64 = 1e-6;
/// Voxels drawn per sample for fixed partitions.
pub const DEFAULT_D_OPT_FIXED: usize = 50;
/// Minimum rows per present group and sample.
pub const DEFAULT_D_MIN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorRow {
    pub residual: f64,
    pub group: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorProblem {
    pub rows: Vec<AnchorRow>,
    pub weights: GroupWeights,
    pub epsilon: f64,
    pub gamma: f64,
    pub mode: LambdaMode,
    pub seed: u64,
}

impl AnchorProblem {
    pub fn new(
        rows: Vec<AnchorRow>,
        weights: GroupWeights,
        epsilon: f64,
        gamma: f64,
        mode: LambdaMode,
    ) -> Result<Self> {
        let problem = Self {
            rows,
            weights,
            epsilon,
            gamma,
            mode,
            seed: 0,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn k(&self) -> usize {
        self.weights.counts.len()
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if let Some(w) = self.weights.counts.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "group weights must be finite and nonnegative, got {w}"
            )));
        }
        let k = self.k();
        for row in &self.rows {
            if row.group >= k {
                return Err(Error::GroupOutOfRange { group: row.group, k });
            }
            if !(row.weight >= 0.0 && row.weight.is_finite() && row.residual.is_finite()) {
                return Err(Error::InvalidParameter(format!("bad anchor row {row:?}")));
            }
        }
        if self.mode == LambdaMode::Scalar && k != 1 {
            return Err(Error::LambdaLength { expected: 1, found: k });
        }
        Ok(())
    }

    /// Weighted mean hinge loss of the rows at `lambda`.
    pub fn surrogate(&self, lambda: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|r| r.weight * hinge(r.residual - lambda[r.group], self.gamma))
            .sum()
    }

    pub fn objective(&self, lambda: &[f64]) -> f64 {
        self.weights.counts.iter().zip(lambda).map(|(w, l)| w * l).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSolution {
    pub lambda_tilde: LambdaVector,
    pub achieved_surrogate: f64,
    pub objective: f64,
    pub solver_iterations: usize,
    pub feasible: bool,
    pub epsilon: f64,
    pub gamma: f64,
    pub seed: u64,
}

/// Subsampling and surrogate parameters for building an anchor problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorSettings {
    pub epsilon: f64,
    pub gamma: f64,
    /// Voxels per sample. `None` means 50 for fixed partitions and
    /// `d_min / min_k E[|S_k|]/d` for semantic ones.
    pub d_opt: Option<usize>,
    pub d_min: usize,
    pub seed: u64,
}

impl AnchorSettings {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            gamma: DEFAULT_GAMMA,
            d_opt: None,
            d_min: DEFAULT_D_MIN,
            seed: 0,
        }
    }
}

/// Per-sample draw size that gives the rarest present group `d_min` voxels in
/// expectation: `d_min / (min_k E[|S_k|] / E[d])`.
pub fn semantic_d_opt(weights: &GroupWeights, mean_d: f64, d_min: usize) -> usize {
    let min_fraction = weights
        .counts
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|w| w / mean_d)
        .fold(f64::INFINITY, f64::min);
    if !min_fraction.is_finite() {
        return d_min;
    }
    ((d_min as f64 / min_fraction) - 1e-9).ceil().max(d_min as f64) as usize
}

/// Draws a stratified voxel subsample of `opt_set` and assembles the anchor problem.
///
/// Each sample contributes about `d_opt` rows split across its groups in
/// proportion to their sizes, with at least `d_min` rows (or the whole group,
/// if smaller) for every group present in it. Row weights make each sample's
/// rows an unbiased estimate of its own mean surrogate, and samples count equally.
pub fn subsample(opt_set: &SampleSet, part: &PartitionSpec, settings: &AnchorSettings) -> Result<AnchorProblem> {
    if opt_set.is_empty() {
        return Err(Error::EmptySet);
    }
    let weights = group_weights(opt_set, part)?;
    let k = part.k();
    let mean_d = opt_set.samples().iter().map(|s| s.dim() as f64).sum::<f64>() / opt_set.len() as f64;
    let d_opt = match (settings.d_opt, part) {
        (Some(d), _) => d,
        (None, PartitionSpec::Semantic { .. }) => semantic_d_opt(&weights, mean_d, settings.d_min),
        (None, _) => DEFAULT_D_OPT_FIXED,
    };
    let present = weights.counts.iter().filter(|&&w| w > 0.0).count();
    if d_opt < present * settings.d_min || d_opt == 0 {
        return Err(Error::InvalidParameter(format!(
            "d_opt = {d_opt} cannot give {} present groups {} rows each",
            present, settings.d_min
        )));
    }

    let n = opt_set.len() as f64;
    let mut rows = Vec::new();
    let mut support = vec![0usize; k];
    for (i, sample) in opt_set.samples().iter().enumerate() {
        let member = part.membership(sample)?;
        let d = sample.dim();
        let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); k];
        for j in 0..d {
            let g = member.group(j);
            if g >= k {
                return Err(Error::GroupOutOfRange { group: g, k });
            }
            by_group[g].push(j);
        }
        let sizes: Vec<usize> = by_group.iter().map(Vec::len).collect();
        let alloc = allocate(&sizes, d_opt.min(d), settings.d_min);
        let res = residuals(sample);
        let mut rng = ChaCha8Rng::seed_from_u64(crate::synth::derive_seed(settings.seed, i as u64));
        for (g, (voxels, &take)) in by_group.iter().zip(&alloc).enumerate() {
            if take == 0 {
                continue;
            }
            let w = (voxels.len() as f64 / d as f64) / take as f64 / n;
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, voxels.len(), take).into_vec();
            picked.sort_unstable();
            rows.extend(picked.into_iter().map(|p| AnchorRow {
                residual: res.values()[voxels[p]],
                group: g,
                weight: w,
            }));
            support[g] += take;
        }
    }
    if let Some(g) = (0..k).find(|&g| weights.counts[g] > 0.0 && support[g] == 0) {
        return Err(Error::MissingSupport(g));
    }

    let mut problem = AnchorProblem::new(rows, weights, settings.epsilon, settings.gamma, LambdaMode::of(part))?;
    problem.seed = settings.seed;
    Ok(problem)
}

/// Largest-remainder proportional allocation of `total` draws over groups of
/// the given sizes, raised to `min(d_min, size)` for every nonempty group.
fn allocate(sizes: &[usize], total: usize, d_min: usize) -> Vec<usize> {
    let d: usize = sizes.iter().sum();
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| s * total / d).collect();
    let mut rest = total - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // Largest fractional part first, ties by group index.
    order.sort_by_key(|&g| (std::cmp::Reverse((sizes[g] * total) % d), g));
    for &g in order.iter().cycle().take(sizes.len() * 2) {
        if rest == 0 {
            break;
        }
        if alloc[g] < sizes[g] {
            alloc[g] += 1;
            rest -= 1;
        }
    }
    for (a, &s) in alloc.iter_mut().zip(sizes) {
        *a = (*a).max(d_min.min(s)).min(s);
    }
    alloc
}

/// A maximal interval of one group's λ on which its surrogate is linear.
struct Piece {
    group: usize,
    start: f64,
    end: f64,
    slope: f64,
    efficiency: f64,
}

/// Solves the anchor problem exactly.
pub fn solve_anchor(problem: &AnchorProblem) -> Result<AnchorSolution> {
    problem.validate()?;
    let k = problem.k();
    let gamma = problem.gamma;

    // Knees b_i = r_i + γ: row i stops contributing once λ_g >= b_i.
    let mut knees: Vec<Vec<(f64, f64)>> = vec![Vec::new(); k];
    for row in &problem.rows {
        let knee = row.residual + gamma;
        if knee > 0.0 && row.weight > 0.0 {
            knees[row.group].push((knee, row.weight));
        }
    }

    let at_zero = problem.surrogate(&vec![0.0; k]);
    let mut lambda = vec![0.0; k];
    let mut need = at_zero - problem.epsilon;
    let mut iterations = 0;

    if need > 0.0 {
        let mut pieces = Vec::new();
        for (g, group_knees) in knees.iter_mut().enumerate() {
            group_knees.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut active: f64 = group_knees.iter().map(|&(_, w)| w).sum();
            let mut start = 0.0;
            for &(knee, w) in group_knees.iter() {
                if knee > start {
                    let slope = active / gamma;
                    let cost = problem.weights.counts[g];
                    pieces.push(Piece {
                        group: g,
                        start,
                        end: knee,
                        slope,
                        efficiency: if cost > 0.0 { slope / cost } else { f64::INFINITY },
                    });
                    start = knee;
                }
                active -= w;
            }
        }
        // Stable: within a group pieces stay in λ order, since efficiency is non-increasing.
        pieces.sort_by(|a, b| b.efficiency.total_cmp(&a.efficiency));

        let mut done = false;
        for piece in &pieces {
            iterations += 1;
            let reduction = piece.slope * (piece.end - piece.start);
            if reduction >= need {
                lambda[piece.group] = piece.start + need / piece.slope;
                done = true;
                break;
            }
            lambda[piece.group] = piece.end;
            need -= reduction;
        }
        if !done {
            return Err(Error::Infeasible(format!(
                "surrogate cannot be brought below epsilon = {}",
                problem.epsilon
            )));
        }
    }

    let achieved = problem.surrogate(&lambda);
    let objective = problem.objective(&lambda);
    Ok(AnchorSolution {
        lambda_tilde: LambdaVector::new(lambda, problem.mode)?,
        achieved_surrogate: achieved,
        objective,
        solver_iterations: iterations,
        feasible: achieved <= problem.epsilon + FEASIBILITY_TOL,
        epsilon: problem.epsilon,
        gamma,
        seed: problem.seed,
    })
}
