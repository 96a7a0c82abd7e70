pub mod ba;
pub mod correspondence;
pub mod estimation;
pub mod eval;
pub mod geometry;
pub mod io;
mod lm;
pub mod pipeline;
pub mod spline;
pub mod synth;
pub mod time;
