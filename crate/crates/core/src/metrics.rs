//! Counting metrics: grid average mean error (GAME), MAE and RMSE.
//!
//! GAME at level `l` splits each map into a `2^l x 2^l` grid of near-equal
//! tiles (boundaries at `floor(k * dim / 2^l)`, so remainder pixels land in
//! the trailing tiles), sums predicted and true density per tile, and
//! averages the summed absolute tile errors over all images. Level 0 is the
//! plain mean absolute count error.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datagen::Illumination;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Highest GAME level reported.
pub const MAX_GAME_LEVEL: usize = 3;

/// Sums of the `4^l` grid tiles of a single-image density map.
fn tile_sums(map: &Tensor, level: usize) -> Vec<f64> {
    let s = map.shape();
    let grid = 1usize << level;
    let ybounds: Vec<usize> = (0..=grid).map(|k| k * s.h / grid).collect();
    let xbounds: Vec<usize> = (0..=grid).map(|k| k * s.w / grid).collect();
    let mut sums = Vec::with_capacity(grid * grid);
    for ty in 0..grid {
        for tx in 0..grid {
            let mut acc = 0.0;
            for y in ybounds[ty]..ybounds[ty + 1] {
                for x in xbounds[tx]..xbounds[tx + 1] {
                    acc += map.get(0, 0, y, x);
                }
            }
            sums.push(acc);
        }
    }
    sums
}

fn check_pairs(preds: &[Tensor], gts: &[Tensor]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::usage("metrics require at least one image"));
    }
    if preds.len() != gts.len() {
        return Err(Error::usage(format!(
            "metrics require equal list lengths, found {} predictions and {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    for (p, g) in preds.iter().zip(gts) {
        let (ps, gs) = (p.shape(), g.shape());
        if ps != gs {
            return Err(Error::usage(format!(
                "prediction shape {ps} does not match ground truth shape {gs}"
            )));
        }
        if ps.n != 1 || ps.c != 1 {
            return Err(Error::usage(format!(
                "metrics expect single-image single-channel maps, found shape {ps}"
            )));
        }
    }
    Ok(())
}

/// Grid average mean error at `level`; level 0 equals MAE.
pub fn game(preds: &[Tensor], gts: &[Tensor], level: usize) -> Result<f64> {
    if level > MAX_GAME_LEVEL {
        return Err(Error::usage(format!(
            "GAME level {level} out of range 0..={MAX_GAME_LEVEL}"
        )));
    }
    check_pairs(preds, gts)?;
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let ps = tile_sums(p, level);
        let gs = tile_sums(g, level);
        total += ps
            .iter()
            .zip(&gs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    Ok(total / preds.len() as f64)
}

/// Mean absolute count error.
pub fn mae(preds: &[Tensor], gts: &[Tensor]) -> Result<f64> {
    game(preds, gts, 0)
}

/// Root mean square count error.
pub fn rmse(preds: &[Tensor], gts: &[Tensor]) -> Result<f64> {
    check_pairs(preds, gts)?;
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let e = p.sum() - g.sum();
        total += e * e;
    }
    Ok((total / preds.len() as f64).sqrt())
}

/// GAME(0..=3) plus RMSE over one set of images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitMetrics {
    pub game: [f64; MAX_GAME_LEVEL + 1],
    pub rmse: f64,
    pub n_images: usize,
}

fn split_metrics(preds: &[Tensor], gts: &[Tensor]) -> Result<SplitMetrics> {
    let mut g = [0.0; MAX_GAME_LEVEL + 1];
    for (l, slot) in g.iter_mut().enumerate() {
        *slot = game(preds, gts, l)?;
    }
    Ok(SplitMetrics {
        game: g,
        rmse: rmse(preds, gts)?,
        n_images: preds.len(),
    })
}

/// Full evaluation report: overall metrics plus per-illumination splits.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub overall: SplitMetrics,
    pub bright: Option<SplitMetrics>,
    pub dark: Option<SplitMetrics>,
}

/// Aggregates metrics overall and per illumination tag.
pub fn report(preds: &[Tensor], gts: &[Tensor], tags: &[Illumination]) -> Result<MetricsReport> {
    check_pairs(preds, gts)?;
    if tags.len() != preds.len() {
        return Err(Error::usage(format!(
            "tag list length {} does not match {} images",
            tags.len(),
            preds.len()
        )));
    }
    let overall = split_metrics(preds, gts)?;
    let split = |want: Illumination| -> Result<Option<SplitMetrics>> {
        let idx: Vec<usize> = tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == want)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            return Ok(None);
        }
        let p: Vec<Tensor> = idx.iter().map(|&i| preds[i].clone()).collect();
        let g: Vec<Tensor> = idx.iter().map(|&i| gts[i].clone()).collect();
        split_metrics(&p, &g).map(Some)
    };
    Ok(MetricsReport {
        overall,
        bright: split(Illumination::Bright)?,
        dark: split(Illumination::Dark)?,
    })
}

/// Renders the report as CSV with header `split,level_or_metric,value`.
pub fn to_csv(report: &MetricsReport) -> String {
    let mut out = String::from("split,level_or_metric,value\n");
    let mut emit = |name: &str, m: &SplitMetrics| {
        for (l, v) in m.game.iter().enumerate() {
            let _ = writeln!(out, "{name},GAME({l}),{v:.6}");
        }
        let _ = writeln!(out, "{name},RMSE,{:.6}", m.rmse);
        let _ = writeln!(out, "{name},n_images,{}", m.n_images);
    };
    emit("overall", &report.overall);
    if let Some(m) = &report.bright {
        emit("bright", m);
    }
    if let Some(m) = &report.dark {
        emit("dark", m);
    }
    out
}

pub fn write_csv(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_csv(report))?;
    Ok(())
}
