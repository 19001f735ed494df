//! Placeholder.
pub struct Frame; pub struct Quaternion;
