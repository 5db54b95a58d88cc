//! Region-of-attraction estimation for polynomial control systems through
//! moment and sum-of-squares relaxations.
//!
//! The crate is layered bottom-up: [`polyalg`] and [`semisets`] describe the
//! problem data, [`conic`] is the semidefinite solver, [`sosmom`] compiles
//! measures and SOS certificates into conic programs, and the remaining
//! modules assemble the outer and inner relaxations, extract controllers and
//! check results numerically.

pub mod conic;
pub mod extract;
pub mod inner;
pub mod polyalg;
pub mod semisets;
pub mod sosmom;
pub mod outer;
pub mod verify;
