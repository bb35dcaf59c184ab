//! Verification suite: pixel metrics, spread-skill reliability, radial
//! spectra, and the generation-hyperparameter grid search.

mod gridsearch;
mod metrics;
mod spectrum;

pub use gridsearch::{
    enumerate, run_grid, select, GridCell, GridRanking, GridResult, GridSpec, RankedCell,
};
pub use metrics::{
    pixel_metrics, spread_skill, spread_skill_from_samples, PixelMetrics, SpreadSkillBin,
    SpreadSkillConfig, SpreadSkillCurve,
};
pub use spectrum::{
    fractional_change, radial_spectrum, SpectrumConfig, SpectrumReport, PARSEVAL_TOL,
};
