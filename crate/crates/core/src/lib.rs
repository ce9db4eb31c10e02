//! Projected belief networks: maximum-entropy layer priors, saddle-point
//! likelihoods, right-inverse generation, discriminative alignment and an
//! HMM tail for sequence scoring.

// `!(x > 0.0)` is how parameter checks reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Numeric loops index several parallel arrays by the same counter.
#![allow(clippy::needless_range_loop)]

pub(crate) mod codec;
pub mod container;
pub mod conv;
pub mod error;
pub mod expfam;
pub mod features;
pub mod harness;
pub mod hmm;
pub mod layer;
pub mod linalg;
pub mod network;
pub mod train;
