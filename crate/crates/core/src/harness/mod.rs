//! Drivers behind the command line: training, evaluation, the fusion
//! comparison and the gradient-check report.

pub mod compare;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod train;

pub use compare::{compare, Comparison, CompareRow, Stat};
pub use config::{lr_schedule, Preset, TrainConfig};
pub use eval::{evaluate, EvalOptions, EvalResult};
pub use gradcheck::{gradcheck_report, GradcheckReport};
pub use train::{train, TrainReport};
