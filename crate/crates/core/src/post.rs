//! Post-processing of predicted rim probabilities and detection scoring.
//!
//! The chain for one tile is [`binarize`] → [`template_match`] → [`dedupe`],
//! and [`match_to_truth`] turns the surviving detections into TP/FP/FN counts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use crate::catalog::PixelCrater;
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostParams {
    /// Global binarization threshold.
    pub threshold: f64,
    pub r_min: usize,
    pub r_max: usize,
    /// Minimum correlation for a template hit.
    pub match_prob: f64,
    /// Position criterion: squared center distance over squared smaller radius.
    pub dedupe_pos: f64,
    /// Radius criterion: radius difference over the smaller radius.
    pub dedupe_rad: f64,
    /// Template annulus width in pixels.
    pub ring_thickness: usize,
}

impl Default for PostParams {
    fn default() -> Self {
        PostParams {
            threshold: 0.1,
            r_min: 5,
            r_max: 40,
            match_prob: 0.5,
            dedupe_pos: 1.8,
            dedupe_rad: 1.0,
            ring_thickness: 2,
        }
    }
}

impl PostParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} not in (0, 1)", self.threshold));
        }
        if self.r_min < 3 || self.r_min > self.r_max {
            return bad(format!(
                "radius range [{}, {}] invalid (need 3 <= r_min <= r_max)",
                self.r_min, self.r_max
            ));
        }
        if !(-1.0..=1.0).contains(&self.match_prob) {
            return bad(format!("match_prob {} not in [-1, 1]", self.match_prob));
        }
        if !(self.dedupe_pos > 0.0 && self.dedupe_rad > 0.0) {
            return bad("dedupe thresholds must be positive".into());
        }
        if self.ring_thickness == 0 {
            return bad("ring thickness must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub crater: PixelCrater,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MatchReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MatchReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let (precision, recall, f1) = if tp == 0 && fp == 0 && fn_ == 0 {
            (1.0, 1.0, 1.0)
        } else {
            let p = precision(tp, fp);
            let r = recall(tp, fn_);
            (p, r, f1(p, r))
        };
        MatchReport {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    /// Sums the counts and recomputes the metrics.
    pub fn merge(&self, other: &MatchReport) -> MatchReport {
        Self::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "tp={}\nfp={}\nfn={}\nprecision={}\nrecall={}\nf1={}\n",
            self.tp, self.fp, self.fn_, self.precision, self.recall, self.f1
        )
    }

    pub const CSV_HEADER: &'static str = "tp,fp,fn,precision,recall,f1";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.tp, self.fp, self.fn_, self.precision, self.recall, self.f1
        )
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut counts = [None; 3];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Validation(format!("bad report line `{line}`")));
            };
            let slot = match k {
                "tp" => 0,
                "fp" => 1,
                "fn" => 2,
                _ => continue,
            };
            counts[slot] = Some(
                v.parse::<usize>()
                    .map_err(|e| Error::Validation(format!("bad count `{line}`: {e}")))?,
            );
        }
        match counts {
            [Some(tp), Some(fp), Some(fn_)] => Ok(Self::from_counts(tp, fp, fn_)),
            _ => Err(Error::Validation("report lacks tp/fp/fn".into())),
        }
    }
}

/// `tp / (tp + fp)`, 0 when nothing was detected.
pub fn precision(tp: usize, fp: usize) -> f64 {
    if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

/// `tp / (tp + fn)`, 0 when there is nothing to find.
pub fn recall(tp: usize, fn_: usize) -> f64 {
    if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    }
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// 1 where `f > threshold`, else 0. Equality maps to 0.
pub fn binarize(img: &Grid, threshold: f64) -> Grid {
    Grid {
        width: img.width,
        height: img.height,
        data: img
            .data
            .iter()
            .map(|&v| if v as f64 > threshold { 1.0 } else { 0.0 })
            .collect(),
    }
}

/// Square patch of side `2 * (r + thickness) + 1` holding an annulus of width
/// `thickness` centered on radius `r`.
pub fn make_ring_template(r: usize, thickness: usize) -> Grid {
    let half = r + thickness;
    let side = 2 * half + 1;
    let c = half as f64;
    let band = 0.5 * thickness as f64;
    Grid::from_fn(side, side, |x, y| {
        let d = (x as f64 - c).hypot(y as f64 - c);
        if (d - r as f64).abs() <= band {
            1.0
        } else {
            0.0
        }
    })
}

/// Summed-area table with a zero row and column in front.
struct Integral {
    w: usize,
    h: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(binary: &Grid) -> Self {
        let (w, h) = (binary.width, binary.height);
        let mut sums = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += (binary.get(x, y) > 0.5) as u32;
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Integral { w, h, sums }
    }

    /// Count of ones in the window `[x - half, x + half]²`, zero outside the image.
    fn window(&self, x: usize, y: usize, half: usize) -> u32 {
        let x0 = x.saturating_sub(half);
        let y0 = y.saturating_sub(half);
        let x1 = (x + half + 1).min(self.w);
        let y1 = (y + half + 1).min(self.h);
        let s = |xx: usize, yy: usize| self.sums[yy * (self.w + 1) + xx];
        s(x1, y1) + s(x0, y0) - s(x0, y1) - s(x1, y0)
    }
}

/// Zero-mean normalized cross-correlation of ring templates against a binary
/// image, for every radius in `[r_min, r_max]` and every pixel position.
///
/// The image is zero-padded so templates may hang over the border. Radii
/// whose template is larger than the image are skipped. Returns one score
/// plane per radius (`None` for skipped radii).
pub fn correlation_volume(binary: &Grid, params: &PostParams) -> Vec<Option<Vec<f64>>> {
    let (w, h) = (binary.width, binary.height);
    let integral = Integral::new(binary);
    let ones: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| binary.get(x, y) > 0.5)
        .collect();

    (params.r_min..=params.r_max)
        .map(|r| {
            let half = r + params.ring_thickness;
            let side = 2 * half + 1;
            if side > w || side > h {
                return None;
            }
            let template = make_ring_template(r, params.ring_thickness);
            let offsets: Vec<(isize, isize)> = (0..side)
                .flat_map(|y| (0..side).map(move |x| (x, y)))
                .filter(|&(x, y)| template.get(x, y) > 0.5)
                .map(|(x, y)| (x as isize - half as isize, y as isize - half as isize))
                .collect();

            // Cross term: scatter every foreground pixel back onto the
            // template centers that would cover it.
            let mut cross = vec![0u32; w * h];
            for &(px, py) in &ones {
                for &(dx, dy) in &offsets {
                    let qx = px as isize - dx;
                    let qy = py as isize - dy;
                    if qx >= 0 && qy >= 0 && (qx as usize) < w && (qy as usize) < h {
                        cross[qy as usize * w + qx as usize] += 1;
                    }
                }
            }

            let n = (side * side) as f64;
            let nt = offsets.len() as f64;
            let t_var = nt - nt * nt / n;
            let mut plane = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let s = integral.window(x, y, half) as f64;
                    let i_var = s - s * s / n;
                    if i_var <= 0.0 || t_var <= 0.0 {
                        continue;
                    }
                    let c = cross[y * w + x] as f64;
                    plane[y * w + x] = (c - s * nt / n) / (i_var * t_var).sqrt();
                }
            }
            Some(plane)
        })
        .collect()
}

/// Local maxima of the correlation volume over (x, y, r) that exceed
/// `params.match_prob`, sorted by descending score.
pub fn template_match(binary: &Grid, params: &PostParams) -> Vec<Detection> {
    let (w, h) = (binary.width, binary.height);
    let volume = correlation_volume(binary, params);
    let mut out = Vec::new();
    for (ri, plane) in volume.iter().enumerate() {
        let Some(plane) = plane else { continue };
        let r = params.r_min + ri;
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                if v <= params.match_prob {
                    continue;
                }
                if is_local_max(&volume, ri, x, y, w, h, v) {
                    out.push(Detection {
                        crater: PixelCrater::new(x as f64, y as f64, r as f64),
                        score: v,
                    });
                }
            }
        }
    }
    sort_by_score(&mut out);
    out
}

fn is_local_max(
    volume: &[Option<Vec<f64>>],
    ri: usize,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    v: f64,
) -> bool {
    let r_lo = ri.saturating_sub(1);
    let r_hi = (ri + 1).min(volume.len() - 1);
    for plane in volume[r_lo..=r_hi].iter().flatten() {
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                if plane[ny * w + nx] > v {
                    return false;
                }
            }
        }
    }
    true
}

/// Descending score; ties broken by radius, then row, then column.
fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.crater.r_px.total_cmp(&b.crater.r_px))
            .then(a.crater.y_px.total_cmp(&b.crater.y_px))
            .then(a.crater.x_px.total_cmp(&b.crater.x_px))
    });
}

/// Position and radius criteria shared by duplicate removal and matching.
/// The radius difference is taken in absolute value.
pub fn same_crater(a: &PixelCrater, b: &PixelCrater, d_xy: f64, d_r: f64) -> bool {
    let r_min = a.r_px.min(b.r_px);
    let dx = a.x_px - b.x_px;
    let dy = a.y_px - b.y_px;
    (dx * dx + dy * dy) / (r_min * r_min) < d_xy && (a.r_px - b.r_px).abs() / r_min < d_r
}

/// Greedy duplicate removal in descending score order.
pub fn dedupe(dets: &[Detection], d_xy: f64, d_r: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sort_by_score(&mut sorted);
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        if !kept
            .iter()
            .any(|k| same_crater(&k.crater, &d.crater, d_xy, d_r))
        {
            kept.push(d);
        }
    }
    kept
}

/// One-to-one greedy matching of detections (descending score) against the
/// ground truth. Each detection takes the closest unmatched truth crater that
/// satisfies both criteria.
pub fn match_to_truth(dets: &[Detection], truth: &[PixelCrater], d_xy: f64, d_r: f64) -> MatchReport {
    let mut sorted = dets.to_vec();
    sort_by_score(&mut sorted);
    let mut taken = vec![false; truth.len()];
    let mut tp = 0;
    for d in &sorted {
        let best = truth
            .iter()
            .enumerate()
            .filter(|(i, t)| !taken[*i] && same_crater(t, &d.crater, d_xy, d_r))
            .min_by(|(_, a), (_, b)| {
                let da = (a.x_px - d.crater.x_px).powi(2) + (a.y_px - d.crater.y_px).powi(2);
                let db = (b.x_px - d.crater.x_px).powi(2) + (b.y_px - d.crater.y_px).powi(2);
                da.total_cmp(&db)
            })
            .map(|(i, _)| i);
        if let Some(i) = best {
            taken[i] = true;
            tp += 1;
        }
    }
    MatchReport::from_counts(tp, sorted.len() - tp, truth.len() - tp)
}

/// Thresholds a probability map and extracts deduplicated craters.
pub fn detect(prob: &Grid, params: &PostParams) -> Vec<Detection> {
    let binary = binarize(prob, params.threshold);
    let hits = template_match(&binary, params);
    dedupe(&hits, params.dedupe_pos, params.dedupe_rad)
}

/// Runs [`detect`] on every tile and sums the counts.
pub fn evaluate_tiles(
    probs: &[Grid],
    truths: &[Vec<PixelCrater>],
    params: &PostParams,
) -> Result<MatchReport> {
    if probs.len() != truths.len() {
        return Err(Error::Validation(format!(
            "{} prediction tiles but {} truth tiles",
            probs.len(),
            truths.len()
        )));
    }
    Ok(probs
        .iter()
        .zip(truths)
        .map(|(p, t)| {
            let dets = detect(p, params);
            match_to_truth(&dets, t, params.dedupe_pos, params.dedupe_rad)
        })
        .fold(MatchReport::from_counts(0, 0, 0), |acc, r| acc.merge(&r)))
}

#[derive(Deserialize)]
struct DetectionRow {
    tile_id: String,
    x_px: f64,
    y_px: f64,
    r_px: f64,
    score: f64,
}

pub fn save_detections<'a, I>(tiles: I, path: &Path) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a [Detection])>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "tile_id,x_px,y_px,r_px,score").map_err(io)?;
    for (id, dets) in tiles {
        for d in dets {
            writeln!(
                w,
                "{},{},{},{},{}",
                id, d.crater.x_px, d.crater.y_px, d.crater.r_px, d.score
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Rows in file order, tagged with their tile id.
pub fn load_detections(path: &Path) -> Result<Vec<(String, Detection)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<DetectionRow>() {
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        out.push((
            row.tile_id,
            Detection {
                crater: PixelCrater::new(row.x_px, row.y_px, row.r_px),
                score: row.score,
            },
        ));
    }
    Ok(out)
}
