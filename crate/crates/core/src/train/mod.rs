//! Losses, weight scheduling, optimisation and the training loop.

mod augment;
mod eval;
mod loss;
mod optim;
mod schedule;
mod trainer;

pub use augment::{
    apply_geometric, apply_photometric, make_augmented_pair, AugmentConfig, AugmentPair, GeometricTransform,
    PhotometricTransform,
};
pub use eval::{
    classification_metrics, evaluate, finetune_physical, per_class_params, ClassParams, ClassificationMetrics,
    FinetuneConfig, MetricsReport, ObservedPair, PhysicalFit,
};
pub use loss::{
    boundary_loss, boundary_masks, physics_loss, residual, temporal_loss, total_loss, LossBreakdown, LossTerms,
    LossWeights,
};
pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use schedule::{adaptive_lambda, cosine_lr, EmaTracker, LambdaConfig, LambdaMode, LambdaScheduler};
pub use trainer::{
    batch_objective, predict_classes, read_log, train, train_with_hook, write_log, EpochLog, TrainConfig, TrainOutcome,
    LOG_CSV, LOG_JSON,
};
