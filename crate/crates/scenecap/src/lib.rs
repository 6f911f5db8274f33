//! Scene-aware image captioning with region attention.
//!
//! Modules, bottom-up: [`seqmodel`] (LSTM layers with optional
//! scene-factorized gates), [`attention`], [`regions`] (region proposals and
//! selection), [`scene`] (LDA and the scene MLP), [`captioner`] (the decoder),
//! [`textmetrics`] (BLEU, ROUGE-L, CIDEr-D, vocabulary) and [`harness`]
//! (datasets, training, evaluation, retrieval, checkpoints).

pub mod attention;
pub mod captioner;
pub mod error;
pub mod harness;
pub mod init;
pub mod regions;
pub mod scene;
pub mod seqmodel;
pub mod textmetrics;

pub use error::{Error, Result};
