//! Core algorithms for BART-style denoising pretraining on SMILES strings.
//!
//! Everything here is pure computation over in-memory values: SMILES
//! parsing and canonicalization, subword tokenization, the span-masking
//! noiser, a small pre-layer-norm encoder-decoder transformer with exact
//! gradients, fine-tuning recipes, decoding, and attribution/probing
//! analyses. File formats, IO and the command line live in the `molbart`
//! companion crate.
//!
//! The crate is `no_std` compatible (it needs `alloc`). The default `std`
//! feature only enables runtime CPU feature detection in the matrix kernels.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corrupt;
pub mod finetune;
pub mod generate;
pub mod interpret;
pub mod linalg;
pub mod math;
pub mod model;
pub mod molgraph;
pub mod rng;
pub mod synth;
pub mod tokenizer;

/// Identifier of the hash used for canonical-SMILES deduplication.
pub const HASH_ALGORITHM: &str = "xxh3-128";

/// Toolkit version embedded in every artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
