//! Experiment orchestration: specs and sweeps, step-size schedules, the
//! reference optimum, analyses, and plot data.

pub mod analysis;
pub mod experiment;
pub mod plot;
pub mod reference;
pub mod schedule;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use analysis::{
    debias_comparison, estimate_gradient_noise, random_params, sample_smoothness, speedup_analysis,
    stationarity_analysis, truncation_decay_analysis, DebiasSummary, NoiseReport, SpeedupRow,
    StationarityCurve, TruncationFit,
};
pub use experiment::{
    expand_sweep, run_experiment, EnvSource, ExperimentSpec, MetricsRecord, MetricsRow,
    ScheduleSpec, SweepAxes, SweepPoint,
};
pub use plot::emit_plot_data;
pub use reference::{certified_optimum, optimal_objective, Reference, ReferenceOptions};
pub use schedule::{horizon_bound, suggest_schedule, Schedule, ScheduleMode, TheoryConstants};

/// Plot-data kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalysisKind {
    Convergence,
    Speedup,
    Stationarity,
}

impl fmt::Display for AnalysisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnalysisKind::Convergence => "convergence",
            AnalysisKind::Speedup => "speedup",
            AnalysisKind::Stationarity => "stationarity",
        })
    }
}

impl FromStr for AnalysisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convergence" => Ok(AnalysisKind::Convergence),
            "speedup" => Ok(AnalysisKind::Speedup),
            "stationarity" => Ok(AnalysisKind::Stationarity),
            other => Err(Error::Config(format!(
                "unknown analysis kind `{other}` (expected convergence, speedup or stationarity)"
            ))),
        }
    }
}
