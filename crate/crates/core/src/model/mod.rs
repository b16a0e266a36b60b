//! The attention-MIL network: encoder, attention pooling, task heads and losses.

mod bag;
mod checkpoint;
mod gradcheck;
mod network;

pub use bag::{Bag, Instance};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader,
    ParamHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::network_gradcheck;
pub use network::{
    argmax, attention_pool, aux_loss, collect_output, main_loss, BagNodes, BagOutput, BoundParams,
    ConvSpec, EncoderConfig, LayerIds, MilModel,
};
