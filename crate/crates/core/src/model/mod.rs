//! Network construction: the six two-stream layouts, their lightweight
//! presets, and the patch discriminator used for adversarial training.

mod config;
mod discriminator;
mod network;

#[cfg(test)]
mod tests;

pub use config::{
    Connection, CsdPlacement, DiscriminatorConfig, Framework, ModelConfig, Variant, DEFAULT_CHANNEL_PLAN,
    DEFAULT_FEATURE_FLOOR, LITE_CHANNEL_PLAN,
};
pub(crate) use config::parse_bool;
pub use discriminator::Discriminator;
pub use network::{
    box_downsample, param_rows, EnhanceModel, ForwardHooks, ForwardResult, ForwardVars, ParamRow, EXTENT_MULTIPLE,
};

/// Published parameter totals for the named presets, in millions, kept for
/// side-by-side reports.
pub const REFERENCE_PARAMS_M: [(&str, f64); 3] = [
    ("csdnet", 17.2948),
    ("litecsdnet", 0.0602),
    ("slitecsdnet", 0.0301),
];
