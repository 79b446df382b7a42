//! Neural-field surrogate models for steady fields on meshed domains.
//!
//! The crate provides:
//! - a small dense-tensor substrate with reverse-mode autodiff that supports
//!   differentiating through unrolled inner optimization loops ([`tensor`]),
//! - Gaussian Fourier-feature encodings, single- and multi-scale ([`encoding`]),
//! - shift-modulated multiscale coordinate networks and hypernetworks
//!   ([`field`]),
//! - the two training frameworks: end-to-end on parameters, and
//!   encode-process-decode with meta-learned latent codes ([`pipeline`]),
//! - triangle-mesh handling and signed-distance sampling ([`geometry`]),
//! - a POD + Gaussian-process-regression baseline ([`podgpr`]),
//! - dataset manifests, binary containers, normalization, splits and metrics
//!   ([`data`]),
//! - synthetic dataset generators for desk-scale verification ([`synth`]).

pub mod data;
pub mod encoding;
pub mod field;
pub mod geometry;
pub mod pipeline;
pub mod podgpr;
pub mod synth;
pub mod tensor;
