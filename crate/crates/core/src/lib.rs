pub mod annotate;
pub mod audio;
pub mod cqt;
pub mod features;
pub mod forest;
pub mod model;
pub mod nn;
pub mod timbre;
pub mod train;
