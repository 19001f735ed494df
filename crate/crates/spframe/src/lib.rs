//! Symmetry-preserving frames for crystal structures.
//!
//! The crate bundles everything needed to study frame canonicalization on
//! periodic systems at desk scale: crystal geometry and symmetry operations,
//! periodic graph construction, equivariant and invariant frame builders,
//! a tape-based reverse-mode autodiff engine, a small frame-aware
//! message-passing network, and a verification harness that turns the
//! invariance and symmetry-preservation claims into pass/fail reports.
//!
//! Data-parallel inner loops (Monte-Carlo invariance trials, batched graph
//! builds, per-structure gradient evaluation) run on rayon when the default
//! `parallel` feature is enabled and fall back to plain iterators otherwise.

pub mod crystal;
pub mod exec;
pub mod frames;
pub mod graph;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod tape;
pub mod tensor;

pub use crystal::{Lattice, RigidMotion, Structure, SymmetryOp};
pub use frames::{Frame, Quaternion};
pub use graph::{Edge, PeriodicGraph};
pub use network::{FrameMode, ModelConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
