//! Generation-hyperparameter search: evaluate sampler settings on a
//! validation set, rank by RMSE and spread-skill calibration.

use crate::error::{CoreError, Result};
use crate::sampler::SampleConfig;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Clone, Debug)]
pub struct GridSpec {
    pub num_steps: Vec<usize>,
    pub s_churn: Vec<f64>,
    pub sigma_max: Vec<f64>,
    pub rho: Vec<f64>,
}

impl Default for GridSpec {
    /// The published search grid: 4 x 3 x 3 x 3 = 108 cells.
    fn default() -> Self {
        GridSpec {
            num_steps: vec![9, 18, 36, 72],
            s_churn: vec![0.0, 0.2, 0.41421356237],
            sigma_max: vec![20.0, 80.0, 140.0],
            rho: vec![4.0, 7.0, 10.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub num_steps: usize,
    pub s_churn: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl GridCell {
    /// Overlay this cell's generation knobs onto a base sampling config.
    pub fn apply(&self, base: &SampleConfig) -> SampleConfig {
        SampleConfig {
            num_steps: self.num_steps,
            s_churn: self.s_churn,
            sigma_max: self.sigma_max,
            rho: self.rho,
            ..base.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GridResult {
    pub cell: GridCell,
    /// RMSE of the ensemble mean on the validation set.
    pub rmse: f64,
    /// Overall spread-skill ratio; may be infinite on degenerate skill.
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RankedCell {
    pub result: GridResult,
    pub rmse_rank: f64,
    pub ratio_rank: f64,
    pub rank_sum: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridRanking {
    /// Best first; ties broken by lower num_steps (cheaper inference), then
    /// lexicographically by the remaining knobs.
    pub rows: Vec<RankedCell>,
    pub selected: GridCell,
}

/// All cells in lexicographic axis order (num_steps outermost).
pub fn enumerate(spec: &GridSpec) -> Result<Vec<GridCell>> {
    if spec.num_steps.is_empty()
        || spec.s_churn.is_empty()
        || spec.sigma_max.is_empty()
        || spec.rho.is_empty()
    {
        return Err(CoreError::EmptyInput("grid axis".into()));
    }
    let mut cells = Vec::new();
    for &num_steps in &spec.num_steps {
        for &s_churn in &spec.s_churn {
            for &sigma_max in &spec.sigma_max {
                for &rho in &spec.rho {
                    cells.push(GridCell { num_steps, s_churn, sigma_max, rho });
                }
            }
        }
    }
    Ok(cells)
}

/// 1-based ranks, ascending; tied keys share the mean of their positions.
fn average_ranks(keys: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    let mut ranks = vec![0.0; keys.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && keys[idx[j + 1]] == keys[idx[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &slot in &idx[i..=j] {
            ranks[slot] = shared;
        }
        i = j + 1;
    }
    ranks
}

fn order_key(row: &RankedCell) -> (f64, usize, f64, f64, f64, f64) {
    let c = row.result.cell;
    (row.rank_sum, c.num_steps, c.s_churn, c.sigma_max, c.rho, row.result.rmse)
}

/// Rank-sum selection over an already-evaluated table: rank cells by RMSE
/// and by |ratio - 1| separately, add the ranks, pick the minimum.
pub fn select(results: &[GridResult]) -> Result<GridRanking> {
    if results.is_empty() {
        return Err(CoreError::EmptyInput("grid results".into()));
    }
    for r in results {
        if !r.rmse.is_finite() || r.rmse < 0.0 || r.ratio.is_nan() || r.ratio < 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "bad grid metrics rmse={} ratio={}",
                r.rmse, r.ratio
            )));
        }
    }
    let rmse_keys: Vec<f64> = results.iter().map(|r| r.rmse).collect();
    let ratio_keys: Vec<f64> = results.iter().map(|r| (r.ratio - 1.0).abs()).collect();
    let rmse_ranks = average_ranks(&rmse_keys);
    let ratio_ranks = average_ranks(&ratio_keys);
    let mut rows: Vec<RankedCell> = results
        .iter()
        .zip(rmse_ranks.iter().zip(&ratio_ranks))
        .map(|(r, (&rr, &tr))| RankedCell {
            result: *r,
            rmse_rank: rr,
            ratio_rank: tr,
            rank_sum: rr + tr,
        })
        .collect();
    rows.sort_by(|a, b| {
        let (ka, kb) = (order_key(a), order_key(b));
        ka.0.total_cmp(&kb.0)
            .then(ka.1.cmp(&kb.1))
            .then(ka.2.total_cmp(&kb.2))
            .then(ka.3.total_cmp(&kb.3))
            .then(ka.4.total_cmp(&kb.4))
            .then(ka.5.total_cmp(&kb.5))
    });
    let selected = rows[0].result.cell;
    Ok(GridRanking { rows, selected })
}

/// Evaluate every cell (in parallel) and rank the table.
pub fn run_grid<F>(cells: &[GridCell], eval: F) -> Result<GridRanking>
where
    F: Fn(&GridCell) -> Result<GridResult> + Sync,
{
    if cells.is_empty() {
        return Err(CoreError::EmptyInput("grid cells".into()));
    }
    let results: Vec<GridResult> = cells.par_iter().map(|c| eval(c)).collect::<Result<_>>()?;
    select(&results)
}
