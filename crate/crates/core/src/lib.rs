//! Safe extremum seeking with a logarithmic barrier.
//!
//! The cost `J` is only available through point evaluations; the safe set is
//! `{θ : h(θ) > 0}`. The controller perturbs its estimate with a sinusoidal
//! dither, demodulates `Ĵ = J − μ log h` and integrates the resulting gradient
//! estimate. Four layers of the same loop are provided ([`dynamics::Layer`]),
//! alongside numerical checks of its safety margin, repulsion and equilibrium
//! behaviour ([`analysis`]).

pub mod analysis;
pub mod dynamics;
pub mod objective;
pub mod scenarios;
pub mod signals;

pub use analysis::{
    averaged_gradient, margin_constants, proximity_study, sequential_tuning_study, solve_equilibrium,
    verify_repulsion, AnalysisBox, AnalysisError, EquilibriumMode, MarginConstants, ProximityReport,
    RepulsionReport, SafetyReport, TuningPoint, TuningRow,
};
pub use dynamics::{
    integrate_averaged, integrate_model_based, integrate_model_free, integrate_unconstrained_baseline,
    DynamicsError, EscParams, IntegratorConfig, Layer, SafetyBreach, Trajectory,
};
pub use objective::{make_barrier, Barrier, BarrierFamily, ObjectiveError, Problem, QuadraticCost};
pub use scenarios::{builtin, Scenario, ScenarioError};
pub use signals::{DitherSpec, Rational, SignalError};
