//! Toolkit for multi-entity 3D motion control of video generators at desk
//! scale.
//!
//! * [`pose`]: SE(3) poses, pose sequences, alignment and interpolation.
//! * [`traj`]: spline trajectory templates and scene composition on a
//!   5 m × 5 m stage.
//! * [`camera`]: the 12-camera surround rig and 2D projection.
//! * [`dataset`]: manifest enumeration and the `.poseq` document format.
//! * [`injector`]: the grounded object injector (pose encoder, entity-wise
//!   fusion, gated self-attention, LoRA) inside a small DiT block, with
//!   hand-written gradients.
//! * [`sampler`]: annealed classifier-free-guidance sampling with DDIM.
//! * [`metrics`]: TransErr / RotErr and entity-class histograms.
//!
//! The guide under `book/` walks through each of these; its code listings
//! are compiled and run as doc-tests of this crate.

pub mod camera;
pub mod dataset;
pub mod error;
pub mod injector;
pub mod metrics;
pub mod pose;
pub mod sampler;
pub mod tensor;
pub mod traj;

pub use error::{Error, Result};
pub use pose::{Mat3, Pose6DoF, PoseSequence, Vec3};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/poses.md")]
    mod poses {}
    #[doc = include_str!("../../../book/src/trajectories.md")]
    mod trajectories {}
    #[doc = include_str!("../../../book/src/cameras.md")]
    mod cameras {}
    #[doc = include_str!("../../../book/src/dataset.md")]
    mod dataset {}
    #[doc = include_str!("../../../book/src/injector.md")]
    mod injector {}
    #[doc = include_str!("../../../book/src/sampler.md")]
    mod sampler {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
}
