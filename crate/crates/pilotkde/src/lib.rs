//! Kernel density estimation with a global plug-in bandwidth, Edgeworth and
//! Cornish–Fisher approximations evaluated by quadrature, and a Monte Carlo
//! coverage harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandwidth;
pub mod coverage;
pub mod density;
pub mod edgeworth;
pub mod error;
pub mod exec;
pub mod kde;
pub mod kernel;
pub mod numerics;

pub use bandwidth::{
    estimate_il, linearization_diagnostic, optimal_bandwidth, pilot_bandwidth, plugin_bandwidth, BandwidthReport,
    IlVariant, Linearization, LinearizationModel, PluginBandwidth,
};
pub use coverage::{emit_table, make_intervals, run_coverage, run_replication, CoverageRow, CoverageTable, Method, SimConfig, TableFormat};
pub use density::{density_functionals, marron_wand, sample, smoothed_mean, Component, DensityFunctionals, MixtureDensity};
pub use edgeworth::{build_context, cdf_approx, cornish_fisher_quantile, BPolicy, CdfKind, ExpansionContext, ExpansionSetup};
pub use error::{Error, NumericsError, Result};
pub use exec::Execution;
pub use kde::{gamma_functionals, kde, standardized_stat, studentized_stat, variance_estimate, StatContext};
pub use kernel::{gaussian_kernel, hermite_order_kernel, kernel_constants, KernelConstants, KernelSpec};
pub use numerics::{QuadratureSpec, RngStream};
