//! Feature fields over featured point clouds, with a trainable attention decoder.
//!
//! A feature field maps any point in space to a `C`-dimensional semantic
//! feature conditioned on a scene point cloud. This crate provides
//!
//! * the inverse-distance-weighted field ([`scene`]), used as the baseline
//!   and as the query-side input of the decoder;
//! * the attention field ([`attention`]), a cross-attention decoder from a
//!   query point to every scene point;
//! * self-supervised training of that decoder from a handful of scenes
//!   ([`keypoints`], [`training`]);
//! * an articulated end-effector with differentiable forward kinematics
//!   ([`effector`]) and the energies used to transfer a single
//!   demonstrated pose to a new scene ([`energy`]);
//! * a procedural scene generator and benchmark harness ([`synth`]) and the
//!   on-disk formats ([`io`], [`config`]).
//!
//! Gradients come from the small reverse-mode tape in [`numerics`].
//!
//! The guide under `book/` walks through each piece; its code listings are
//! compiled and run as doc-tests of this crate.

pub mod attention;
pub mod config;
pub mod effector;
pub mod energy;
mod error;
pub mod io;
pub mod keypoints;
pub mod numerics;
pub mod scene;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

// The guide's listings run as doc-tests, one module per chapter so a
// failure points at its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/numerics.md")]
    mod numerics {}
    #[doc = include_str!("../../../book/src/feature-fields.md")]
    mod feature_fields {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/effector.md")]
    mod effector {}
    #[doc = include_str!("../../../book/src/energy.md")]
    mod energy {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
