//! Encoder-decoder captioning.

pub mod corpus;
pub mod decode;
pub mod features;
pub mod model;
pub mod train;
pub mod vocab;

pub use corpus::{token_task, Caption, Example, ParallelCorpus, Source};
pub use decode::{
    beam, beam_search, greedy, greedy_decode, greedy_trace, Hypothesis, SearchConfig, StepModel,
    StopReason,
};
pub use features::{load_features, write_features};
pub use model::{
    decode_teacher_forced, encode_tokens, joint_loss, scheduled_sampling_step, ArnetMode,
    CaptionModel, DecodeTrace, DecoderParams, DecoderSession, InitMode, ModelConfig, SourceKind,
};
pub use train::{
    train_two_stage, EpochRecord, ScheduledSampling, Stage, StopMetric, Trainer, TrainingConfig,
};
pub use vocab::Vocabulary;
