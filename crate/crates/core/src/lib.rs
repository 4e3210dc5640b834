pub mod eval;
pub mod io;
pub mod model;
pub mod nn;
pub mod noise;
pub mod pipeline;
pub mod repr;
pub mod sim;
