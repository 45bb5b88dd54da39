//! Estimation of heteroscedastic stratified two-way error-component models
//! on unbalanced panel data.
//!
//! The crate covers single equations (Within estimator, classical and robust
//! fixed-effects covariances, quadratic unbiased variance components,
//! feasible GLS) and SUR systems (group-by-duration GLS with structured
//! covariance blocks, two covariance procedures, cross-equation
//! restrictions), plus the Monte Carlo harness used to study them.

pub mod error;
pub mod montecarlo;
pub mod panel;
pub mod projections;
pub mod single_eq;
pub mod sur;

pub use error::{Error, Result};
pub use panel::{
    assign_strata, build_incidence, build_panel_index, IncidenceSet, PanelIndex, StrataAssignment,
    StrataRule,
};
pub use projections::{
    center, generalized_inverse, within_projector, StratumSelector, WithinProjector,
};
pub use single_eq::{
    build_omega, fe_robust_by_individual, fe_robust_by_stratum, gls_fit, que_components,
    que_statistics, within_fit, FitReport, Omega, Regime, VarianceComponents, WithinFit,
};
pub use sur::{
    omega_block, que_sur_components, sur_gls, sur_within_residuals, wb_sur_components, OmegaBlock,
    SurComponents, SurDesign, SurProcedure, SurResiduals,
};
