//! Loss, optimizer, schedule, metrics, augmentation and the training loop.

mod augment;
mod loss;
mod metrics;
mod optim;
mod perturb;
mod trainer;

pub use augment::{augment, robustness_suite, rotate_z, AugmentConfig, Perturbation, JITTER_CLIP, JITTER_SIGMA};
pub use loss::ce_label_smoothing;
pub use metrics::{argmax, metrics, Confusion, Metrics};
pub use optim::{cosine_lr, AdamW, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use perturb::{perturbation_eval, PerturbationRow};
pub use trainer::{
    evaluate, train_loop, Dataset, EpochRecord, Evaluation, Precision, Sample, Split, TrainConfig, TrainOutcome,
    TrainReport, CSV_HEADER,
};
