use crate::data::BBox;
use crate::error::{Error, Result};

fn check(op: &'static str, pred: &[BBox], gt: &[BBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape {
            op,
            lhs: vec![pred.len(), 4],
            rhs: vec![gt.len(), 4],
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid(format!("{op}: empty trajectory")));
    }
    Ok(())
}

fn center(b: &BBox) -> [f64; 2] {
    [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0]
}

fn box_sq(p: &BBox, g: &BBox) -> f64 {
    (0..4).map(|k| (p[k] - g[k]).powi(2)).sum::<f64>() / 4.0
}

fn center_sq(p: &BBox, g: &BBox) -> f64 {
    let (a, b) = (center(p), center(g));
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)) / 2.0
}

fn center_dist(p: &BBox, g: &BBox) -> f64 {
    let (a, b) = (center(p), center(g));
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean squared corner-coordinate error over all frames (squared pixels).
pub fn ade_sq(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    check("ade_sq", pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| box_sq(p, g)).sum::<f64>() / pred.len() as f64)
}

/// Mean squared box-center error over all frames (squared pixels).
pub fn c_ade_sq(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    check("c_ade_sq", pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| center_sq(p, g)).sum::<f64>() / pred.len() as f64)
}

/// Mean squared corner-coordinate error at the final frame.
pub fn fde_sq(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    check("fde_sq", pred, gt)?;
    Ok(box_sq(pred.last().unwrap(), gt.last().unwrap()))
}

/// Mean squared box-center error at the final frame.
pub fn c_fde_sq(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    check("c_fde_sq", pred, gt)?;
    Ok(center_sq(pred.last().unwrap(), gt.last().unwrap()))
}

/// Mean Euclidean center distance in pixels.
pub fn ade_px(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    check("ade_px", pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| center_dist(p, g)).sum::<f64>() / pred.len() as f64)
}

/// Euclidean center distance at the final frame, in pixels.
pub fn fde_px(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    check("fde_px", pred, gt)?;
    Ok(center_dist(pred.last().unwrap(), gt.last().unwrap()))
}

/// `(ade_px, fde_px)`.
pub fn pixel_variants(pred: &[BBox], gt: &[BBox]) -> Result<(f64, f64)> {
    Ok((ade_px(pred, gt)?, fde_px(pred, gt)?))
}

/// All six metrics for one prediction, in [`crate::metrics::METRIC_NAMES`] order.
pub fn all_metrics(pred: &[BBox], gt: &[BBox]) -> Result<[f64; 6]> {
    Ok([
        ade_sq(pred, gt)?,
        c_ade_sq(pred, gt)?,
        fde_sq(pred, gt)?,
        c_fde_sq(pred, gt)?,
        ade_px(pred, gt)?,
        fde_px(pred, gt)?,
    ])
}
