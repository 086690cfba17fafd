//! Data-driven feedback linearization with candidate-function dictionaries.
//!
//! A control-affine system `x' = f(x) + g(x) u` is linearized by a coordinate
//! change `tau(x) = T Z(x)` and feedback `u = gamma(x)^{-1} (v - delta(x))`
//! with `delta = N Y(x)` and `gamma = M W(x)`, where `Z`, `Y`, `W` are
//! user-supplied dictionaries. The unknown coefficient matrices span the
//! kernel of a regressor that is linear in them, built either from sampled
//! data or from a model.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod dictionary;
pub mod linalg;
pub mod modelbased;
pub mod regressor;
pub mod report;
pub mod simulator;
pub mod solver;
