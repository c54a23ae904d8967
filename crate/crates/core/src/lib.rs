//! Heparin dosing engine: patient kinetics, likelihood-based estimation,
//! scenario-weighted receding-horizon planning, closed-loop simulation and
//! prediction evaluation.
//!
//! The numeric core (`dynamics`, `lp`, `estimation`, `dosing`) is generic over
//! [`Real`]; the aliases below fix it to `f64`, which the simulator, evaluation
//! and file formats use throughout.

pub mod dosing;
pub mod dynamics;
pub mod estimation;
pub mod evaluation;
pub mod io;
pub mod lp;
pub mod real;
pub mod simulator;

pub use real::Real;

pub type PatientParams = dynamics::PatientParams<f64>;
pub type PatientState = dynamics::PatientState<f64>;
pub type GlobalDecayRates = dynamics::GlobalDecayRates<f64>;
pub type Domains = dynamics::Domains<f64>;
pub type Trajectory = dynamics::Trajectory<f64>;
pub type LpProblem = lp::LpProblem<f64>;
pub type LpSolution = lp::LpSolution<f64>;
pub type ObservationSeries = estimation::ObservationSeries<f64>;
pub type EstimationConfig = estimation::EstimationConfig<f64>;
pub type EstimateResult = estimation::EstimateResult<f64>;
pub type PriorSpec = estimation::PriorSpec<f64>;
pub type ScenarioTable = estimation::ScenarioTable<f64>;
pub type LossSpec = dosing::LossSpec<f64>;
pub type DosePlan = dosing::DosePlan<f64>;
pub type PlannerConfig = dosing::PlannerConfig<f64>;
