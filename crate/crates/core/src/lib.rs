//! Doubly robust estimation of conditional average treatment effects on the
//! treated in staggered difference-in-differences designs, with uniform
//! inference over a continuous covariate.

pub mod first_stage;
pub mod linalg;
pub mod panel;
pub mod quadrature;
pub mod rng;
pub mod local_poly;
pub mod density;
pub mod catt;
pub mod bandwidth;
pub mod band;
pub mod discrete;
pub mod pipeline;
pub mod simulation;
