//! Training objectives over probability maps.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

pub const BCE_EPS: f64 = 1e-7;
pub const JACCARD_SMOOTH: f64 = 1.0;

/// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
pub fn bce_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    tape.bce(pred, target, BCE_EPS)
}

/// `1 - (sum PG + s) / (sum P + sum G - sum PG + s)` over the whole tensor.
pub fn jaccard_loss(tape: &mut Tape, pred: Var, target: Var, smooth: f64) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape("jaccard_loss", tape.shape(pred), tape.shape(target)));
    }
    let pg = tape.mul(pred, target)?;
    let inter = tape.sum(pg);
    let sp = tape.sum(pred);
    let sg = tape.sum(target);
    let total = tape.add(sp, sg)?;
    let union = tape.sub(total, inter)?;
    let num = tape.add_scalar(inter, smooth);
    let den = tape.add_scalar(union, smooth);
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// BCE plus soft Jaccard with the default smoothing.
pub fn combined_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let b = bce_loss(tape, pred, target)?;
    let j = jaccard_loss(tape, pred, target, JACCARD_SMOOTH)?;
    tape.add(b, j)
}
