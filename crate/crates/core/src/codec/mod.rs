//! Fuzzy population encoders and the Q-value decoders.

mod decode;
mod encode;
mod membership;

pub use decode::{
    accumulate_population, centroid_positions, decode_centroid, decode_weighted_sum, fit_centroid, CentroidFit,
    NeuralDecoder, PopulationActivation, QVector,
};
pub(crate) use encode::encoder_neuron;
pub use encode::{bernoulli_frames, fuzzy_encode, integrate_and_fire, rate_encode, RateEncoding, ENCODER_THRESHOLD};
pub use membership::{membership_eval, MembershipBank};
