//! Simulation and receiver processing for multi-layer superimposed on-off
//! keying over a discrete Poisson photon-counting channel.
//!
//! Layers transmit binary symbols whose boundaries are staggered in time.
//! Cutting the frame at every symbol boundary yields chips whose active
//! symbol set forms a hidden Markov chain with Poisson emissions; the
//! modules here build that model and run rate computation, channel
//! estimation, trellis detection and iterative LDPC decoding on it.

pub mod channel;
pub mod detection;
pub mod error;
pub mod estimation;
pub mod experiment;
pub mod hmm;
pub mod ldpc;
pub mod pilot;
pub mod rates;
pub mod turbo;
pub mod util;

pub use channel::{ChannelConfig, LayerSymbols, ObservationSequence, RateTable, StateVector};
pub use error::{Error, Result};
