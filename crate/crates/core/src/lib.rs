//! Viewpoint estimation toolkit: circular azimuth geometry, viewpoint loss
//! kernels with analytic gradients, score-weighted detection aggregation,
//! curriculum triplet sampling, a desk-scale trainer and AVP evaluation.

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::should_implement_trait)]

pub mod aggregate;
pub mod avp;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod sampler;
pub mod toytrain;
pub mod viewgeom;

pub use error::{Error, Result};
