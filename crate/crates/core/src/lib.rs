pub mod numcore;
pub mod model;
pub mod train;
pub mod runtime;
pub mod latency;
pub mod eval;
