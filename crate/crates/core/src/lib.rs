//! Cross-domain sequential recommendation with Shapley-weighted domain losses.

pub mod cli;
pub mod data;
pub mod eval;
pub mod game;
pub mod model;
pub mod plot;
pub mod synth;
pub mod train;
