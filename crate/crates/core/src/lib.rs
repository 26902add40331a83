pub mod backbone;
pub mod benchmark;
pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod rothead;
pub mod rotmatch;
pub mod store;
