pub mod augmenter;
pub mod harness;
pub mod model;
pub mod optimizer;
pub mod policy;
pub mod proposer;
pub mod seed;
pub mod sim;
pub mod theory;
