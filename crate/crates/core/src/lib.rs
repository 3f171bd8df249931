//! Second-order optimality diagnostics for smooth conic programs
//!
//! `min g(x)  s.t.  q(x) in Theta`, with `Theta` a product of nonpositive
//! orthants and second-order cones, plus a small laboratory for univariate
//! piecewise functions. Every analytic verdict has a sampling cross-check.

pub mod cones;
pub mod expr;
pub mod linalg;
pub mod lp;
pub mod num;
pub mod oracle;
pub mod problem;
pub mod conic;
pub mod corpus;
pub mod cq;
pub mod descent;
pub mod kkt;
pub mod pw1d;
pub mod report;
pub mod sampling;
pub mod sosc;
