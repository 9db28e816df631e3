//! Fixed-step ESDIRK integrators with internal numerical differentiation
//! (iterated and direct forward sensitivities), embedded in a
//! multiple-shooting SQP for the quadruple tank tracking problem.

// Negated float comparisons deliberately reject NaN; indexed loops mirror the
// textbook formulas.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::excessive_precision
)]

pub mod bench;
pub mod integrator;
pub mod linalg;
pub mod model;
pub mod nlp;
pub mod qp;
pub mod sensitivity;
pub mod sqp;
pub mod tableau;

pub use integrator::{Esdirk, IntegratorError, NewtonSettings, NewtonStrategy, WorkCounters};
pub use linalg::Matrix;
pub use model::{OdeModel, Qts, QtsParameters};
pub use nlp::{DecisionVector, OcpProblem};
pub use sensitivity::{SensitivityMode, SensitivityPair};
pub use sqp::{solve_ocp, SqpResult, SqpSettings};
pub use tableau::{make_tableau, ButcherTableau, Method};
