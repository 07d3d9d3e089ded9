//! Numerical laboratory for stochastic evolution equations driven by two
//! independent noise sources: a cylindrical Wiener process and a smooth
//! stationary Ornstein-Uhlenbeck forcing.
//!
//! The crate simulates the enlarged Markov process (state, driving history),
//! estimates evolutionary systems of measures by pullback under a frozen
//! driving realization, and certifies exponential mixing through maximal
//! couplings. A scalar model with closed-form laws serves as ground truth;
//! a 2D Navier-Stokes vorticity model exercises the same machinery at PDE
//! scale.

pub mod driving;
pub mod ergodicity;
pub mod error;
pub mod integrator;
pub mod measures;
pub mod navier_stokes;
pub mod oracle;
pub mod rng;
pub mod stats;

pub use driving::{DrivingPath, HistoryWindow, OuSpec};
pub use error::{CoreError, Divergence};
pub use integrator::{EnsembleState, SemilinearModel, StepScheme, WienerStream};
pub use measures::{CouplingRun, EmpiricalMeasure, PseudoMetric};
pub use rng::{CounterRng, StreamId};
