//! Cross-entropy pretraining, self-critical fine-tuning with a CIDEr-D
//! reward, the learning-rate schedule and beam search.

mod beam;
pub mod checkpoint;
mod loss;
mod optim;
mod schedule;
mod scst;
mod trainer;

pub use beam::{beam_search, decode_example, greedy, strip_end, DecodedBeam, ModelStepper, StepDecoder};
pub use checkpoint::{config_hash, load_checkpoint, load_checkpoint_for, read_manifest, resolve_checkpoint, Checkpoint, CheckpointManifest};
pub use loss::{shift_right, teacher_forcing, xe_loss};
pub use optim::{clip_global_norm, global_norm, Adam};
pub use schedule::{lr_schedule, LrStage, TrainConfig};
pub use scst::{advantages, scst_sample, ScstSample};
pub use trainer::{
    checkpoint_name, evaluate, reference_words, thread_count, train, EpochRecord, EvalReport, Phase, PhaseSelection, Progress,
    ScstStepReport, TrainOptions, Trainer, METRIC_LOG,
};
