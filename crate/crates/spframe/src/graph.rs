//! Placeholder.
pub struct Edge; pub struct PeriodicGraph;
