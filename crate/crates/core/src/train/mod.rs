//! Multi-angle training, metrics, evaluation sweeps and method comparison.

mod compare;
mod eval;
mod metrics;
mod trainer;

pub use compare::{compare, Comparison, ComparisonRow};
pub use eval::{
    eval_radiance, evaluate, parse_angle_grid, testset_id, AnyModel, EvalOptions, Retriever,
};
pub use metrics::{
    read_geometry_csv, read_metrics_csv, BinKind, BinMetrics, ErrorAccum, GeometryMetrics, Metrics,
};
pub use trainer::{
    history_csv, sample_geometry, train, AngleStrategy, LrSchedule, TrainConfig, TrainContext,
    TrainOutcome,
};
