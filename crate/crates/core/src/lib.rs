//! Feed-forward reconstruction of rigged, animatable head avatars from a
//! single image.
//!
//! The crate is organized around a small number of self-contained layers:
//!
//! * [`autodiff`] — reverse-mode tape over flat tensors, optimizer, LR
//!   schedule and checkpoint serialization.
//! * [`assets`] — mesh / rig / image containers and file formats, plus the
//!   procedural mini rig and synthetic subject generators used for tests
//!   and training fixtures.
//! * [`headmodel`] — blendshapes, joint regression and linear blend skinning.
//! * [`remesh`] — topology correction (edge splits, orientation repair,
//!   degenerate-face removal) with rig attribute transfer.
//! * [`raster`] — deterministic software rasterizer, texture shading and
//!   inverse-mapping UV unwrap.
//! * [`neural`] — network blocks (MLP, cross-attention, GRU cells, patch
//!   encoder, texture decoder) built on the autodiff tape.
//! * [`losses`] — training objectives and image quality metrics.
//! * [`pipeline`] — the iterative dual-branch reconstruction loop and the
//!   single-subject training driver.

pub mod assets;
pub mod autodiff;
pub mod checks;
pub mod headmodel;
pub mod losses;
pub mod neural;
pub mod pipeline;
pub mod raster;
pub mod remesh;

mod error;
mod threads;

pub use assets::{Image, PartLabel, RiggedMesh, SyntheticSubject};
pub use autodiff::{Grads, Scalar, Tape, TensorId};
pub use error::Error;
pub use headmodel::{Camera, PoseParams};
pub use pipeline::{train_overfit, Config, ForwardRun, Model, PipelineState, Profile, TrainReport};
pub use raster::{RasterMap, UvImage};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
