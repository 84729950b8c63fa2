pub mod basis;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod inference;
pub mod objective;
pub mod optimizer;
pub mod selection;
pub mod simulate;
pub mod twostage;

pub use basis::{build_flatness_penalty, BasisSpec, KnotLayout, PenaltyMatrix, SplineBasis};
pub use dynamics::{
    eval_at_times, sensitivities, sensitivities_at_times, sensitivities_closed_form,
    sensitivities_variational, solve_trajectory, CurveSolution, DynamicsConfig, GradientFunction,
    GridSensitivities, SensitivityMethod, TimeSensitivities,
};
pub use data::{Curve, Dataset, ParameterState, PenaltySettings, Subject, TimeMap};
pub use error::{Error, Result};
pub use objective::{loss, residuals, update_variances, LossBreakdown, VarianceEstimates};
pub use inference::{info_matrices, se_g, InfoMatrices};
pub use optimizer::{assemble_jacobians, fit, FitOptions, FitResult, JacobianBlocks};
pub use simulate::{default_design, generate, GroundTruth, Regime, SimDesign};
pub use selection::{approx_cv, exact_cv, select_model, stepwise_knot_candidates, CVReport, Candidate, Criterion, RankedModel};
pub use twostage::{presmooth_curve, region_ise, stage2_fit, two_stage, Stage2Method, TwoStageFit, TwoStageOptions};
