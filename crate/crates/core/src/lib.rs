pub mod controller;
pub mod evaluators;
pub mod evolution;
pub mod harness;
pub mod nn;
pub mod reinforce;
pub mod space;
