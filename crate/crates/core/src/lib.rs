pub mod codec;
pub mod error;
pub mod geometry;
pub mod rng;
pub mod sample;
pub mod autograd;
pub mod tensor;
pub mod model;
pub mod objective;
pub mod foundry;
pub mod eval;
