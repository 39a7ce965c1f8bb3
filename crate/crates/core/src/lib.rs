pub mod alignment;
pub mod autodiff;
pub mod dsp;
pub mod inference;
pub mod losses;
pub mod models;
pub mod synth;
pub mod training;
