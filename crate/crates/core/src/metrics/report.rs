use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::displacement::all_metrics;
use crate::data::{denormalize_boxes, BBox, TrajectoryWindow};
use crate::error::{Error, Result};
use crate::model::{stack_boxes, TrajectoryModel};
use crate::nn::ParamRegistry;

pub const METRIC_NAMES: [&str; 6] = ["ade_sq", "c_ade_sq", "fde_sq", "c_fde_sq", "ade_px", "fde_px"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Per window and metric, the minimum over `L` samples.
    BestOfL,
    /// One prior sample per window.
    Single,
}

impl std::fmt::Display for PredictionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PredictionMode::BestOfL => "best_of_l",
            PredictionMode::Single => "single",
        })
    }
}

/// Frames covered by a horizon of `seconds` at `fps`: `⌈seconds·fps⌉`.
pub fn horizon_frames(seconds: f64, fps: f64) -> usize {
    // the small slack keeps 0.3 s · 10 fps = 3.0000000000000004 at 3 frames
    (seconds * fps - 1e-9).ceil().max(0.0) as usize
}

/// Label used in report keys: one decimal place when exact, else shortest.
pub fn horizon_label(h: f64) -> String {
    let one = format!("{h:.1}");
    if one.parse::<f64>().ok() == Some(h) {
        one
    } else {
        format!("{h}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: f64,
    pub ade_sq: f64,
    pub c_ade_sq: f64,
    pub fde_sq: f64,
    pub c_fde_sq: f64,
    pub ade_px: f64,
    pub fde_px: f64,
}

impl HorizonMetrics {
    fn from_array(horizon: f64, m: [f64; 6]) -> Self {
        HorizonMetrics {
            horizon,
            ade_sq: m[0],
            c_ade_sq: m[1],
            fde_sq: m[2],
            c_fde_sq: m[3],
            ade_px: m[4],
            fde_px: m[5],
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.ade_sq, self.c_ade_sq, self.fde_sq, self.c_fde_sq, self.ade_px, self.fde_px]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mode: PredictionMode,
    pub samples: usize,
    pub count: usize,
    /// Sorted by horizon.
    pub horizons: Vec<HorizonMetrics>,
}

impl MetricsReport {
    pub fn get(&self, horizon: f64) -> Option<&HorizonMetrics> {
        self.horizons.iter().find(|h| h.horizon == horizon)
    }

    /// Flat JSON object: `ade_sq_0.5`, `c_fde_sq_1.5`, …, plus `count`,
    /// `mode` and `samples`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("count".into(), self.count.into());
        map.insert("mode".into(), self.mode.to_string().into());
        map.insert("samples".into(), self.samples.into());
        for h in &self.horizons {
            let label = horizon_label(h.horizon);
            for (name, v) in METRIC_NAMES.iter().zip(h.as_array()) {
                map.insert(format!("{name}_{label}"), v.into());
            }
        }
        serde_json::Value::Object(map)
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let bad = || Error::Data("malformed metrics JSON".into());
        let obj = v.as_object().ok_or_else(bad)?;
        let mode = match obj.get("mode").and_then(|m| m.as_str()) {
            Some("best_of_l") => PredictionMode::BestOfL,
            Some("single") => PredictionMode::Single,
            _ => return Err(bad()),
        };
        let count = obj.get("count").and_then(|c| c.as_u64()).ok_or_else(bad)? as usize;
        let samples = obj.get("samples").and_then(|c| c.as_u64()).ok_or_else(bad)? as usize;
        let mut labels: Vec<(f64, String)> = obj
            .keys()
            .filter_map(|k| k.strip_prefix("ade_sq_"))
            .filter_map(|l| l.parse::<f64>().ok().map(|h| (h, l.to_string())))
            .collect();
        labels.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut horizons = Vec::new();
        for (h, label) in labels {
            let mut m = [0.0; 6];
            for (slot, name) in m.iter_mut().zip(METRIC_NAMES) {
                *slot = obj
                    .get(&format!("{name}_{label}"))
                    .and_then(|x| x.as_f64())
                    .ok_or_else(bad)?;
            }
            horizons.push(HorizonMetrics::from_array(h, m));
        }
        Ok(MetricsReport {
            mode,
            samples,
            count,
            horizons,
        })
    }

    /// Aligned plain-text table, one row per horizon.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode: {}  samples: {}  windows: {}", self.mode, self.samples, self.count);
        let _ = writeln!(
            s,
            "{:>8} {:>12} {:>12} {:>12} {:>12} {:>10} {:>10}",
            "horizon", "ADE", "C-ADE", "FDE", "C-FDE", "ADE(px)", "FDE(px)"
        );
        for h in &self.horizons {
            let _ = writeln!(
                s,
                "{:>8} {:>12.2} {:>12.2} {:>12.2} {:>12.2} {:>10.2} {:>10.2}",
                format!("{}s", horizon_label(h.horizon)),
                h.ade_sq,
                h.c_ade_sq,
                h.fde_sq,
                h.c_fde_sq,
                h.ade_px,
                h.fde_px
            );
        }
        s
    }
}

/// Denormalized predictions, `[window][sample][t_pred]`.
pub type WindowPredictions = Vec<Vec<Vec<BBox>>>;

/// Samples `l` futures per window from the prior. Batch `k` draws its noise
/// from stream `k` of `seed`, so results do not depend on thread count.
pub fn predict_windows(
    model: &TrajectoryModel,
    params: &ParamRegistry,
    windows: &[TrajectoryWindow],
    l: usize,
    seed: u64,
    batch_size: usize,
) -> Result<WindowPredictions> {
    let chunks: Vec<&[TrajectoryWindow]> = windows.chunks(batch_size.max(1)).collect();
    let per_chunk: Vec<Result<WindowPredictions>> = chunks
        .par_iter()
        .enumerate()
        .map(|(k, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let obs: Vec<&[BBox]> = chunk.iter().map(|w| w.observed.as_slice()).collect();
            let set = model.predict_with_rng(params, &stack_boxes(&obs)?, l, &mut rng)?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(b, w)| (0..l).map(|s| denormalize_boxes(&set.boxes(b, s), &w.norm_ref)).collect())
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(windows.len());
    for c in per_chunk {
        out.extend(c?);
    }
    Ok(out)
}

/// Aggregates metrics of precomputed predictions. In best-of-L mode each
/// metric is minimized independently over samples per window.
pub fn score(
    windows: &[TrajectoryWindow],
    predictions: &WindowPredictions,
    horizons: &[f64],
    mode: PredictionMode,
) -> Result<MetricsReport> {
    if windows.len() != predictions.len() {
        return Err(Error::invalid(format!(
            "{} windows but {} prediction sets",
            windows.len(),
            predictions.len()
        )));
    }
    let mut hs = horizons.to_vec();
    hs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    hs.dedup();
    let mut sums = vec![[0.0; 6]; hs.len()];
    let mut samples = 0;
    for (w, preds) in windows.iter().zip(predictions) {
        let gt = w.raw_future();
        let used = match mode {
            PredictionMode::BestOfL => preds.len(),
            PredictionMode::Single => 1.min(preds.len()),
        };
        if used == 0 {
            return Err(Error::invalid(format!("window {} has no predictions", w.id)));
        }
        samples = used;
        for (hi, &h) in hs.iter().enumerate() {
            let n = horizon_frames(h, w.fps);
            if n == 0 || n > gt.len() {
                return Err(Error::Config(format!(
                    "horizon {h}s needs {n} frames at {} fps but t_pred is {}",
                    w.fps,
                    gt.len()
                )));
            }
            let mut best = [f64::INFINITY; 6];
            for p in &preds[..used] {
                let m = all_metrics(&p[..n], &gt[..n])?;
                for k in 0..6 {
                    best[k] = best[k].min(m[k]);
                }
            }
            for k in 0..6 {
                sums[hi][k] += best[k];
            }
        }
    }
    let count = windows.len();
    let horizons = hs
        .iter()
        .zip(&sums)
        .map(|(&h, s)| {
            let mean = if count == 0 { [0.0; 6] } else { s.map(|x| x / count as f64) };
            HorizonMetrics::from_array(h, mean)
        })
        .collect();
    Ok(MetricsReport {
        mode,
        samples,
        count,
        horizons,
    })
}

/// Predicts and scores in one call. Single mode draws one sample per window.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &TrajectoryModel,
    params: &ParamRegistry,
    windows: &[TrajectoryWindow],
    horizons: &[f64],
    l: usize,
    mode: PredictionMode,
    seed: u64,
    batch_size: usize,
) -> Result<MetricsReport> {
    let draws = match mode {
        PredictionMode::BestOfL => l,
        PredictionMode::Single => 1,
    };
    let preds = predict_windows(model, params, windows, draws, seed, batch_size)?;
    score(windows, &preds, horizons, mode)
}

/// Root-mean-square distance of final box centers from their mean, over the
/// samples of one window.
pub fn endpoint_spread(samples: &[Vec<BBox>]) -> f64 {
    let ends: Vec<[f64; 2]> = samples
        .iter()
        .filter_map(|s| s.last())
        .map(|b| [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0])
        .collect();
    if ends.is_empty() {
        return 0.0;
    }
    let n = ends.len() as f64;
    let mx = ends.iter().map(|e| e[0]).sum::<f64>() / n;
    let my = ends.iter().map(|e| e[1]).sum::<f64>() / n;
    (ends.iter().map(|e| (e[0] - mx).powi(2) + (e[1] - my).powi(2)).sum::<f64>() / n).sqrt()
}
