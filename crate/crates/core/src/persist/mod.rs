//! Run configuration and checkpoint persistence.

mod checkpoint;
mod config;

pub use checkpoint::{
    decode, encode, load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION,
    MAGIC,
};
pub use config::{corpus_hash, parse_scm, scm_name, RunConfig, SEED_ENV};
