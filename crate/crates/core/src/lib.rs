//! Space-time Markov chain approximation of diffusions on metric graphs.

pub mod analysis;
pub mod diffusion;
pub mod graph;
pub mod kernel;
pub mod quadrature;
pub mod sampler;
pub mod scenario;
pub mod subdivision;
