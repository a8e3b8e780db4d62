//! Recurrent visual attention with a learned stopping policy.
//!
//! The network looks at an image through a sequence of small glimpses, updates a
//! recurrent state after each one, and decides where to look next and whether to
//! stop. Location and stop decisions are trained with REINFORCE; the classifier is
//! trained with per-step cross-entropy.

pub mod data;
pub mod glimpse;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod training;
