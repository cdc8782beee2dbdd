pub mod ingest;
pub mod align;
pub mod tokenize;
pub mod pack;
pub mod slide;
pub mod retrieve;
pub mod export;
pub mod synth;
pub mod config;
pub mod pipeline;
