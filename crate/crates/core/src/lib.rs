pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod losses;
pub mod model;
pub mod synth;
pub mod text;
pub mod trainer;
