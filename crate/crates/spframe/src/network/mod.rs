//! Placeholder.
pub struct FrameMode;
pub struct ModelConfig;
