pub mod dataset;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod models;
pub mod nn;
pub mod training;
mod util;
