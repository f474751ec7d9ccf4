use std::collections::BTreeMap;

use super::record::{BBox, TrajectoryRecord};
use crate::error::{Error, Result};

/// One observed/future pair cut from a record, in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryWindow {
    /// `{record_id}:{start}`.
    pub id: String,
    pub record_id: String,
    pub start: usize,
    pub fps: f64,
    pub observed: Vec<BBox>,
    pub future: Vec<BBox>,
    pub action: usize,
    /// Last observed box in pixels.
    pub norm_ref: BBox,
}

impl TrajectoryWindow {
    pub fn t_obs(&self) -> usize {
        self.observed.len()
    }

    pub fn t_pred(&self) -> usize {
        self.future.len()
    }

    pub fn raw_observed(&self) -> Vec<BBox> {
        denormalize_boxes(&self.observed, &self.norm_ref)
    }

    pub fn raw_future(&self) -> Vec<BBox> {
        denormalize_boxes(&self.future, &self.norm_ref)
    }
}

/// `(W, H, W, H)` of a reference box.
fn scale_of(norm_ref: &BBox) -> Result<[f64; 4]> {
    let w = norm_ref[2] - norm_ref[0];
    let h = norm_ref[3] - norm_ref[1];
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        return Err(Error::Data(format!(
            "reference box {norm_ref:?} has zero area; cannot normalize"
        )));
    }
    Ok([w, h, w, h])
}

/// Expresses `boxes` relative to `norm_ref`: `(b - ref) / (W, H, W, H)`.
pub fn normalize_boxes(boxes: &[BBox], norm_ref: &BBox) -> Result<Vec<BBox>> {
    let s = scale_of(norm_ref)?;
    Ok(boxes
        .iter()
        .map(|b| std::array::from_fn(|k| (b[k] - norm_ref[k]) / s[k]))
        .collect())
}

/// Inverse of [`normalize_boxes`]. `norm_ref` must have positive area.
pub fn denormalize_boxes(boxes: &[BBox], norm_ref: &BBox) -> Vec<BBox> {
    let w = norm_ref[2] - norm_ref[0];
    let h = norm_ref[3] - norm_ref[1];
    let s = [w, h, w, h];
    boxes
        .iter()
        .map(|b| std::array::from_fn(|k| b[k] * s[k] + norm_ref[k]))
        .collect()
}

/// Most frequent id; ties go to the lowest id.
pub fn majority_action(actions: &[usize]) -> usize {
    let mut counts = BTreeMap::new();
    for &a in actions {
        *counts.entry(a).or_insert(0usize) += 1;
    }
    let mut best = (0, usize::MAX);
    for (&a, &n) in &counts {
        if n > best.0 {
            best = (n, a);
        }
    }
    best.1
}

/// Windows at offsets `0, stride, 2·stride, …` that fit entirely inside the
/// record. Records shorter than `t_obs + t_pred` yield nothing.
pub fn extract_windows(
    record: &TrajectoryRecord,
    t_obs: usize,
    t_pred: usize,
    stride: usize,
) -> Result<Vec<TrajectoryWindow>> {
    if t_obs == 0 || t_pred == 0 || stride == 0 {
        return Err(Error::invalid(format!(
            "t_obs, t_pred and stride must be >= 1 (got {t_obs}, {t_pred}, {stride})"
        )));
    }
    let span = t_obs + t_pred;
    let mut out = Vec::new();
    let mut start = 0;
    while start + span <= record.len() {
        let obs = &record.boxes[start..start + t_obs];
        let fut = &record.boxes[start + t_obs..start + span];
        let norm_ref = obs[t_obs - 1];
        out.push(TrajectoryWindow {
            id: format!("{}:{start}", record.id),
            record_id: record.id.clone(),
            start,
            fps: record.fps,
            observed: normalize_boxes(obs, &norm_ref)?,
            future: normalize_boxes(fut, &norm_ref)?,
            action: majority_action(&record.actions[start..start + t_obs]),
            norm_ref,
        });
        start += stride;
    }
    Ok(out)
}

/// Windows of every record, in record order.
pub fn extract_all(
    records: &[TrajectoryRecord],
    t_obs: usize,
    t_pred: usize,
    stride: usize,
) -> Result<Vec<TrajectoryWindow>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(extract_windows(r, t_obs, t_pred, stride)?);
    }
    Ok(out)
}
