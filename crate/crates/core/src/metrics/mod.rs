//! Segmentation metrics and paired significance testing.

pub mod distance;
pub mod mask;
pub mod report;
pub mod wsrt;

pub use distance::{assd, squared_distance_transform, Assd, AssdStatus};
pub use mask::{boundary, dice, BinaryMask};
pub use report::{
    compare, evaluate, evaluated_classes, mean_std, render_comparison, Aggregate, ComparisonRow, EvalEntry, EvalReport,
    LabelMap,
};
pub use wsrt::{wsrt, wsrt_exact, wsrt_normal, WsrtMethod, WsrtResult};
