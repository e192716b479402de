//! Two-phase training: alignment with a progressive schedule, then routing
//! over the projectors. Also checkpoints and evaluation.

mod checkpoint;
mod config;
mod eval;
mod gradcheck;
mod model;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, CheckpointMeta, MAGIC, VERSION};
pub use config::{apply_override, Config, ModelConfig, OptimConfig, RouterConfig, ScheduleConfig};
pub use eval::{covariate_analysis, entropy, evaluate, EvalReport, SampleResult};
pub use gradcheck::{all_passed, composite_suite, full_suite, toy_config, worst};
pub use model::{Model, Routing};
pub use optim::{AdamW, ParamGrads};
pub use trainer::{Phase, StepStats, Trainer, LOG_HEADER};

/// Caps rayon's global pool at `MODROUTE_THREADS` when set. Only the first
/// call has an effect.
pub fn configure_threads() {
    if let Some(n) = std::env::var("MODROUTE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

#[cfg(test)]
mod tests;
