//! Distributed primal-dual resource allocation for entanglement-distribution
//! networks.
//!
//! The crate is split along the life cycle of an experiment:
//!
//! * [`topology`] builds graphs, paths and routing matrices.
//! * [`utility`] holds the session utilities (secret-key rate, negativity and a
//!   concave test utility) with their derivatives.
//! * [`qnum`] implements the primal-dual update rules, a centralized reference
//!   solver, KKT residuals, the Slater point and a brute-force oracle.
//! * [`stability`] is the continuous-time counterpart: ODE right-hand side,
//!   RK4 integration, Lyapunov function and linearization.
//! * [`sim`] is the deterministic discrete-event kernel.
//! * [`protocol`] embeds the algorithm into a sequential quantum network
//!   (q-datagrams, session/link controllers, loss handling, variants).
//! * [`metrics`] turns simulation traces into series, convergence times and CSV.
//! * [`scenario`] parses and validates scenario files and drives runs.
//!
//! The optimization and stability code is generic over the scalar type (see
//! [`Real`]); the simulator works in `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod metrics;
pub mod protocol;
pub mod qnum;
pub mod scenario;
pub mod sim;
pub mod stability;
pub mod topology;
pub mod utility;

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar accepted by the numeric modules: `f32` or `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub use qnum::{PrimalDualState, ProblemInstance, StepSizes};
pub use stability::{Linearization, OdeState};
pub use topology::{LinkId, NodeId, RoutingMatrix, SessionSpec, Topology};
pub use utility::{Utility, UtilityKind};

/// Double-precision aliases used by the simulator and the CLI.
pub type PrimalDualStateF64 = PrimalDualState<f64>;
pub type ProblemInstanceF64 = ProblemInstance<f64>;
pub type StepSizesF64 = StepSizes<f64>;
pub type UtilityF64 = Utility<f64>;
pub type OdeStateF64 = OdeState<f64>;
pub type LinearizationF64 = Linearization<f64>;

/// Single-precision aliases, mostly useful for quick sweeps of the reference
/// solver.
pub type PrimalDualStateF32 = PrimalDualState<f32>;
pub type ProblemInstanceF32 = ProblemInstance<f32>;
pub type StepSizesF32 = StepSizes<f32>;
pub type UtilityF32 = Utility<f32>;
