//! Cross-supervised training objectives for video grounding at desk scale.
//!
//! The library provides, over a mini-batch of video/text pairs embedded in
//! a shared space:
//!
//! - contrastive and caption objectives, both in a ground-truth-clip
//!   variant and a support-set variant where the video side is pooled to a
//!   single query-conditioned embedding ([`objectives`], [`supportset`]);
//! - analytic gradients for every loss with respect to every embedding and
//!   parameter, verified against a central-difference oracle
//!   ([`numerics`], [`gradcheck`]);
//! - toy encoders and projections standing in for pretrained backbones
//!   ([`encoders`]);
//! - a synthetic planted-entity grounding task with proposal scoring, NMS
//!   and Rank n@m evaluation ([`grounding`]);
//! - the end-to-end trainable pipeline tying it together ([`model`]).

pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod grounding;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod supportset;

pub use error::{Error, Result};
