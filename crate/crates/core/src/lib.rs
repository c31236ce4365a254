//! End-to-end spoken question answering at desk scale.
//!
//! Audio words are encoded by a recurrent autoencoder whose bottleneck is pulled
//! towards the text embedding of the word it realises. A shared transformer is
//! then pre-trained with masked-token prediction on a mixture of text and audio
//! inputs and fine-tuned to point at answer spans inside spoken passages. A
//! cascade baseline answers from simulated ASR transcripts instead, and the two
//! can be ensembled. Everything runs on a synthetic spoken corpus with a
//! controllable recognition-error channel.

pub mod autodiff;
pub mod checkpoint;
pub mod cascade;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod joint_embed;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod speech_bert;
pub mod tensor;
pub mod text_encoder;
pub mod train;

pub use error::{Error, Result};
