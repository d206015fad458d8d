//! Closed-form information capacity and multiplication-count models.

mod capacity;
mod cost;

pub use capacity::{capacity, CapacityReport};
pub use cost::{
    conv_multiplications, cost_model, decoder_overhead, fuzzy_encoder_multiplications, ConvSpec, CostReport,
};
