//! Evaluation protocols: position inference, multi-step generation and
//! interpolation, with similarity alignment and figure output.

mod align;
pub mod figures;
mod tasks;

pub use align::{align, align_similarity, AlignmentResult};
pub use tasks::{
    generation_report, generation_task, interpolation_report, interpolation_task, position_inference_task,
    reconstruction_nll, sign_test, FigureOptions, GenerationOutput, GenerationRecord, InterpolationOutput,
    InterpolationRecord, PositionRecord, OBSERVED,
};
