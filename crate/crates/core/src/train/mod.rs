//! Splits, recipes, data and the training loop.

pub mod data;
mod recipe;
mod split;
mod trainer;

pub use data::{load_cifar10_binary, load_manifest, synthetic, AttributeMode, Dataset, SyntheticConfig};
pub use recipe::{default_recipe, RecipeConfig, RecipeOverrides, Schedule, VictimKind};
pub use split::{make_split, SplitPlan, MIN_POOL};
pub use trainer::{
    accuracy_on, epoch_batches, overfitting_level, predict_logits, train, train_with, EpochRecord,
    PreparedBatch, TrainOptions, TrainedVictim, EVAL_BATCH,
};
