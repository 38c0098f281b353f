//! Synthetic tasks, toy models and the training drivers built on them.

mod dataset;
mod model;
mod train;

pub use dataset::{make_teacher_task, split_dataset, Dataset, DatasetError, Split, SplitSpec, TeacherTask};
pub use model::{Activation, LossKind, ModelSpec, ToyModel};
pub use train::{
    bilora_on_split, train_bilora, train_lora_baseline, BaselineConfig, BaselineForm, RunOutcome, TrainFailure,
};
