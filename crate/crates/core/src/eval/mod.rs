//! Evaluation: oracle metrics, test cases, sweeps and statistics.

pub mod cases;
pub mod metrics;
pub mod oracle;
pub mod stats;
pub mod sweep;

use crate::denoiser::prompt::Label;
use crate::io::ImageRgb;
use crate::pilot::mask::BinaryMask;
use crate::pilot::pipeline::InpaintResult;
use crate::{Real, Result};

use metrics::{background_mse, boundary_ring, seam_score, MetricReport};
use oracle::{semantic_score, Oracle};

/// All metrics of one finished job. `input` and `m` are the job's inputs.
pub fn score<T: Real>(
    result: &InpaintResult,
    input: &ImageRgb,
    m: &BinaryMask,
    target: Label,
    oracle: &Oracle<T>,
) -> Result<MetricReport> {
    let degenerate = m.all() || boundary_ring(m).none();
    Ok(MetricReport {
        background_mse: background_mse(&result.raw, input, m)?,
        seam_score: if degenerate { 1.0 } else { seam_score(&result.output, m)? },
        semantic_score: if m.none() { 0.0 } else { semantic_score(oracle, &result.output, m, target)? },
        wall_time_s: result.record.timings.total_s,
        degenerate_mask: degenerate,
    })
}
