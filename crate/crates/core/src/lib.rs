pub mod admm;
pub mod cert;
pub mod cli;
pub mod cvxprog;
pub mod dataio;
pub mod error;
pub mod gates;
pub mod head;
pub mod linops;
pub mod metrics;
pub mod oracle;
pub mod synth;

pub use error::{CldError, Result};
