//! Composite objective, gradient checking, training and the synthetic
//! grounding task.

mod batch;
mod gradcheck;
mod losses;
mod synthetic;
mod train;

pub use batch::{evaluate_batch, prepare, BatchEval, PreparedExample, TrainExample};
pub use gradcheck::{
    grad_check, relative_error, CoordCheck, GradCheckOptions, GradCheckReport, GroupStat,
    RELATIVE_ERROR_FLOOR,
};
pub use losses::{
    composite_loss, loc_loss, loc_loss_batch, loc_loss_graph, text_loss, LossBreakdown,
    SampleOutputs,
};
pub use synthetic::{synthesize_dataset, synthetic_vocabulary, PALETTE};
pub use train::{train, Adam, LogRow, LrSchedule, TrainConfig, TrainOutcome};
