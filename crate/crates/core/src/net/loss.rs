use crate::error::{Error, Result};
use crate::grid::Grid;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross entropy on a logit, `max(x, 0) - x z + ln(1 + e^-|x|)`.
/// For `x >= 0` this is `x - x z + ln(1 + e^-x)`; the rearrangement keeps it
/// finite for large negative logits.
pub fn bce_scalar(x: f64, z: f64) -> f64 {
    x.max(0.0) - x * z + (-x.abs()).exp().ln_1p()
}

/// Per-pixel loss map and its mean.
pub fn bce_with_logits(logits: &Grid, targets: &Grid) -> Result<(Grid, f64)> {
    if !logits.same_shape(targets) {
        return Err(Error::Validation(format!(
            "logits {}x{} vs targets {}x{}",
            logits.width, logits.height, targets.width, targets.height
        )));
    }
    let per: Vec<f64> = logits
        .data
        .iter()
        .zip(&targets.data)
        .map(|(&x, &z)| bce_scalar(x as f64, z as f64))
        .collect();
    let mean = per.iter().sum::<f64>() / per.len().max(1) as f64;
    let map = Grid::from_vec(
        logits.width,
        logits.height,
        per.into_iter().map(|v| v as f32).collect(),
    )?;
    Ok((map, mean))
}

/// Fraction of pixels where `sigmoid(logit) > 0.5` agrees with the target.
pub fn pixel_accuracy(logits: &Grid, targets: &Grid) -> Result<f64> {
    if !logits.same_shape(targets) {
        return Err(Error::Validation("logits and targets differ in shape".into()));
    }
    let hits = logits
        .data
        .iter()
        .zip(&targets.data)
        .filter(|(&x, &z)| (x > 0.0) == (z > 0.5))
        .count();
    Ok(hits as f64 / logits.data.len().max(1) as f64)
}
