pub mod checkpoint;
pub mod corpus;
pub mod dataset;
pub mod dcgan;
pub mod estop;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod invgen;
pub mod nn;
pub mod reannotate;
pub mod scalar;
pub mod synthworld;
pub mod train;
pub mod workflow;

pub use scalar::Scalar;

/// Single-precision instantiations used by training and inference.
pub type Generator32 = dcgan::Generator<f32>;
pub type Discriminator32 = dcgan::Discriminator<f32>;
pub type InvGenerator32 = invgen::InvGenerator<f32>;
pub type FeatureExtractor32 = heads::FeatureExtractor<f32>;
pub type GonetHead32 = heads::GonetHead<f32>;
pub type TemporalHead32 = heads::TemporalHead<f32>;
pub type Pipeline32 = heads::Pipeline<f32>;

/// Double-precision instantiations used by the gradient checks.
pub type Generator64 = dcgan::Generator<f64>;
pub type Discriminator64 = dcgan::Discriminator<f64>;
pub type InvGenerator64 = invgen::InvGenerator<f64>;
pub type GonetHead64 = heads::GonetHead<f64>;
pub type TemporalHead64 = heads::TemporalHead<f64>;
