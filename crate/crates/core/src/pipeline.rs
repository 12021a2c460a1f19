use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::net::{finetune, forward, sigmoid, TrainConfig, UNetConfig, Weights};
use crate::post::{evaluate_tiles, MatchReport, PostParams};
use crate::synth::Tile;

/// Per-pixel crater-rim probabilities, one tile at a time.
pub fn predict_probs(weights: &Weights, config: &UNetConfig, images: &[Grid]) -> Result<Vec<Grid>> {
    images
        .iter()
        .map(|img| {
            let logits = forward(weights, config, std::slice::from_ref(img), false, 0)?
                .pop()
                .expect("one output per input");
            Ok(probs_from_logits(&logits))
        })
        .collect()
}

pub fn probs_from_logits(logits: &Grid) -> Grid {
    Grid {
        width: logits.width,
        height: logits.height,
        data: logits.data.iter().map(|&x| sigmoid(x as f64) as f32).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub pixel_accuracy: f64,
    pub report: MatchReport,
}

/// Scores a network on labelled tiles: pixel accuracy of the rim masks and
/// crater-level matching after post-processing.
pub fn evaluate_model(weights: &Weights, config: &UNetConfig, tiles: &[Tile], post: &PostParams) -> Result<Evaluation> {
    if tiles.is_empty() {
        return Err(Error::Validation("no tiles to evaluate".into()));
    }
    let images: Vec<Grid> = tiles.iter().map(|t| t.image.clone()).collect();
    let probs = predict_probs(weights, config, &images)?;
    let (mut hits, mut pixels) = (0usize, 0usize);
    for (p, t) in probs.iter().zip(tiles) {
        hits += p
            .data
            .iter()
            .zip(&t.mask.data)
            .filter(|(&p, &z)| (p > 0.5) == (z > 0.5))
            .count();
        pixels += p.data.len();
    }
    let truths: Vec<_> = tiles.iter().map(|t| t.truth.clone()).collect();
    Ok(Evaluation {
        pixel_accuracy: hits as f64 / pixels as f64,
        report: evaluate_tiles(&probs, &truths, post)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferRow {
    /// Number of fine-tuning tiles; 0 is the pretrained model as is.
    pub n: usize,
    pub eval: Evaluation,
}

impl TransferRow {
    pub const CSV_HEADER: &'static str = "n,pixel_accuracy,precision,recall,f1";

    pub fn to_csv_row(&self) -> String {
        let r = &self.eval.report;
        format!(
            "{},{},{},{},{}",
            self.n, self.eval.pixel_accuracy, r.precision, r.recall, r.f1
        )
    }
}

/// Fine-tunes `pretrained` on the first `n` tiles of `pool` for every `n` in
/// `sizes` and evaluates each result on the same `test` tiles.
#[allow(clippy::too_many_arguments)]
pub fn transfer_experiment(
    pretrained: &Weights,
    config: &UNetConfig,
    pool: &[Tile],
    sizes: &[usize],
    test: &[Tile],
    epochs: usize,
    tc: &TrainConfig,
    post: &PostParams,
) -> Result<Vec<TransferRow>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation(format!("fine-tune sizes {sizes:?} not strictly increasing")));
    }
    if let Some(&max) = sizes.last() {
        if max > pool.len() {
            return Err(Error::Validation(format!(
                "fine-tune size {max} exceeds the {} available tiles",
                pool.len()
            )));
        }
    }
    sizes
        .iter()
        .map(|&n| {
            let w = if n == 0 {
                pretrained.clone()
            } else {
                finetune(pretrained, config, &pool[..n], &[], epochs, tc)?.0
            };
            Ok(TransferRow {
                n,
                eval: evaluate_model(&w, config, test, post)?,
            })
        })
        .collect()
}
