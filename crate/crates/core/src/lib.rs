//! Detection toolkit for North Atlantic right whale upcalls in
//! continuous underwater audio.
//!
//! The pipeline: WAV ingestion and resampling to 1 kHz, dB spectrograms
//! ([`signal`]), per-call SNR estimation and chirp-template candidates
//! ([`snr`]), two classifiers — a from-scratch residual CNN ([`nnet`])
//! and a PCA + shrinkage-LDA baseline ([`lda`]) — a sliding-window
//! detector ([`detector`]), annotation matching and metrics ([`eval`]),
//! and a synthetic-data generator ([`synth`]) that makes every stage
//! verifiable without field recordings.

pub mod detector;
pub mod error;
pub mod eval;
pub mod lda;
pub mod nnet;
pub mod signal;
pub mod snr;
pub mod synth;

pub use error::{Error, Result};
pub use signal::{AudioClip, Spectrogram};
