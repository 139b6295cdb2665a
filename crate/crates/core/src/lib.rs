//! Feynman–Kac loop-gas simulator for bosonic Hubbard-type models on
//! bi-dimensional graphs with a torus single-site space.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod energy;
pub mod gibbs;
pub mod graph;
pub mod jumps;
pub mod loops;
pub mod mw;
pub mod oracle;
pub mod params;
pub mod quad;
pub mod rdmk;
pub mod stats;
pub mod torus;
