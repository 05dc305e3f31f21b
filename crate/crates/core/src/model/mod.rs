//! The All-ConvNet: construction, inference, freezing, transfusion, trimming
//! and checkpoint persistence.

mod arch;
mod check;
mod checkpoint;
mod mask;
mod net;
mod transfer;

pub use arch::{ArchitectureSpec, ConvSpec, CONV_LAYERS, INPUT_SHAPE};
pub use check::NetObjective;
pub use checkpoint::{Checkpoint, CheckpointMeta, NamedTensor, FORMAT_VERSION, MAGIC};
pub use mask::FreezeMask;
pub use net::{predict, AllConvNet, ConvBlock, DEFAULT_DROPOUT, INPUT_STAGE, STAGES};
pub use transfer::{copy_prefix, freeze_for_adaptation, transfuse, trim_slim, FreezeMode};
