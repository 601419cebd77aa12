//! Central finite-difference checking of analytic loss gradients.
//!
//! Every loss is probed on a shared score grid: the checked score sits at
//! index 0 of a three-class vector with fixed companions, the target makes
//! index 0 either the positive or a negative, and the analytic `dL/dq_0` is
//! compared against `(L(q+h) - L(q-h)) / 2h`.

use crate::activation::{ScoreVector, Temperature};
use crate::data::{ClassFrequencyTable, GroupThresholds};
use crate::error::Result;
use crate::loss::{
    eql_weights, gol_loss_with_weights, gumbel_loss, sigmoid_bce, softmax_ce, DropState,
    LossBreakdown, LossKind, TargetVector,
};

/// Score grid covering the clip range end to end.
pub const DEFAULT_GRID: [f64; 7] = [-4.0, -2.0, 0.0, 1.0, 3.0, 6.0, 10.0];

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Threshold below which an analytic gradient is considered verified.
pub const REL_ERROR_LIMIT: f64 = 1e-5;

/// Companion scores filling indices 1 and 2 of the probe vector.
const COMPANIONS: [f64; 2] = [0.5, -1.0];

/// One grid point's comparison of numerical and analytic gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckRow {
    pub loss: LossKind,
    pub q: f64,
    pub y: u8,
    pub numerical: f64,
    pub analytic: f64,
    pub rel_error: f64,
}

/// Relative error with an absolute floor, so vanishing gradients compare on
/// an absolute scale instead of dividing by zero.
pub fn relative_error(numerical: f64, analytic: f64) -> f64 {
    let denominator = (numerical.abs() + analytic.abs()).max(1e-8);
    (numerical - analytic).abs() / denominator
}

/// Two-sided difference quotient `(f(x+h) - f(x-h)) / 2h`.
pub fn central_difference<F>(f: F, x: f64, h: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

/// Evaluates `kind` on the probe vector `[q, 0.5, -1.0]`. The drop-weighted
/// losses run with an all-frequent frequency table, so their weights are all
/// 1 and the check exercises the composition path.
fn evaluate(kind: LossKind, q0: f64, positive: bool) -> Result<LossBreakdown> {
    let q = ScoreVector::new(vec![q0, COMPANIONS[0], COMPANIONS[1]])?;
    let y = TargetVector::one_hot(if positive { 0 } else { 1 }, 3)?;
    match kind {
        LossKind::SigmoidBce => sigmoid_bce(&q, &y),
        LossKind::SoftmaxCe => softmax_ce(&q, &y),
        LossKind::Gumbel => gumbel_loss(&q, &y),
        LossKind::Gol => {
            let freq = all_frequent_table();
            let state = DropState::new(0.0011, 0.5, 0.5, 0)?;
            crate::loss::gol_loss(&q, &y, &freq, true, &state)
        }
        LossKind::EqlGumbel => {
            let freq = all_frequent_table();
            let weights = eql_weights(&y, &freq, true, 0.0011)?;
            gol_loss_with_weights(&q, &y, &weights, Temperature::STANDARD)
        }
    }
}

fn all_frequent_table() -> ClassFrequencyTable {
    ClassFrequencyTable::new(
        &[(400, 400), (300, 300), (300, 300)],
        1000,
        GroupThresholds::default(),
    )
    .expect("static table")
}

/// Checks one loss on a score grid, for the probe class being positive and
/// negative at each point.
pub fn grad_check_loss(kind: LossKind, grid: &[f64], h: f64) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::with_capacity(grid.len() * 2);
    for &q in grid {
        for positive in [false, true] {
            let analytic = evaluate(kind, q, positive)?.grad[0];
            let numerical =
                central_difference(|x| Ok(evaluate(kind, x, positive)?.total), q, h)?;
            rows.push(GradCheckRow {
                loss: kind,
                q,
                y: positive as u8,
                numerical,
                analytic,
                rel_error: relative_error(numerical, analytic),
            });
        }
    }
    Ok(rows)
}

/// Largest relative error across rows; 0 for an empty slice.
pub fn max_rel_error(rows: &[GradCheckRow]) -> f64 {
    rows.iter().map(|r| r.rel_error).fold(0.0, f64::max)
}

/// Renders rows as CSV with one line per grid point.
pub fn rows_to_csv(rows: &[GradCheckRow]) -> String {
    let mut out = String::from("loss,q,y,numerical,analytic,rel_error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.loss, r.q, r.y, r.numerical, r.analytic, r.rel_error
        ));
    }
    out
}
