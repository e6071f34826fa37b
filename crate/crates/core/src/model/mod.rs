//! Stand-in language model, vision stub, pruning classifier and weight files.

mod block;
pub mod checkpoint;
mod classifier;
mod config;
mod layout;
mod lvlm;
mod params;

pub use block::LayerCache;
pub use checkpoint::{load_classifier, load_lvlm, save_classifier, save_lvlm, CHECKPOINT_VERSION};
pub use classifier::Classifier;
pub use config::{ModelConfig, PRESETS};
pub use layout::TokenLayout;
pub use lvlm::{
    AttentionCapture, Eviction, ForwardOptions, GraphMask, KvCache, Lvlm, LvlmOutput, Prefill,
    PrefillMask,
};
pub use params::{Bound, ParamStore};
