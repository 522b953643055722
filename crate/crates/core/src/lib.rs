//! Auscultation inference engine.
//!
//! The crate is organized the way a recording flows through the system:
//!
//! * [`audio`] turns PCM samples into normalized log-mel spectrograms and MFCCs.
//! * [`nn`] is a small dense-layer library with hand-written reverse-mode gradients.
//! * [`model`] assembles the encoder / conformer / BiGRU / trial-block classifier.
//! * [`train`] holds the focal loss, balanced sampling, schedule and the toy training loop.
//! * [`emr`] covers the tabular side: encoding, correlation, clustering, SMOTE and boosted trees.
//! * [`fusion`] blends audio and tabular probabilities and scores predictions.
//! * [`stream`] is the two-thread recorder/decoder built on a 60-minute ring buffer.
//! * [`io`] reads WAV files, cycle annotations, manifests and model files.

pub mod audio;
pub mod emr;
pub mod error;
pub mod fusion;
pub mod io;
pub mod model;
pub mod nn;
pub mod stream;
pub mod train;

pub use error::{Error, Result};
