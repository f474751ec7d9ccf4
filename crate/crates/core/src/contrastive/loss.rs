use serde::{Deserialize, Serialize};

use super::batch::{ContrastiveBatch, Origin};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveOptions {
    pub tau: f64,
    /// Adds the positives to the denominator (supervised-contrastive form).
    pub positives_in_denominator: bool,
    /// Uses cosine instead of raw dot-product similarity.
    pub unit_normalize: bool,
}

impl Default for ContrastiveOptions {
    fn default() -> Self {
        ContrastiveOptions {
            tau: 0.1,
            positives_in_denominator: false,
            unit_normalize: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ContrastiveOutput {
    pub loss: Var,
    /// Anchors with at least one positive and one negative.
    pub b_eff: usize,
    pub anchors: usize,
}

/// Guards the row norm against exactly-zero embeddings.
const NORM_EPS: f64 = 1e-12;

/// Rows of `e` scaled to unit length.
pub(crate) fn unit_rows(g: &mut Graph, e: Var) -> Result<Var> {
    let sq = g.row_dot(e, e)?;
    let sq = g.add_scalar(sq, NORM_EPS)?;
    let norm = g.powf(sq, 0.5)?;
    let et = g.transpose(e)?;
    let scaled = g.div(et, norm)?;
    g.transpose(scaled)
}

/// `anchor_rows · embeddingsᵀ / tau` as an `[A, N]` matrix.
fn similarity(g: &mut Graph, e: Var, anchors: &[usize], tau: f64) -> Result<Var> {
    let a = g.gather_rows(e, anchors)?;
    let et = g.transpose(e)?;
    let s = g.matmul(a, et)?;
    g.scale(s, 1.0 / tau)
}

/// Action-class contrastive loss over a batch, matrix form:
/// `−(1/B_eff) Σ_i [lse_{j∈pos(i)} s_ij − lse_{k∈neg(i)} s_ik]` with
/// `s = h_i·h_j / tau`. Anchors lacking positives or negatives are skipped;
/// with none left the loss is zero.
pub fn action_contrastive_loss(
    g: &mut Graph,
    batch: &ContrastiveBatch,
    opts: &ContrastiveOptions,
) -> Result<ContrastiveOutput> {
    if !(opts.tau > 0.0) {
        return Err(Error::Domain {
            op: "action_contrastive_loss",
            detail: format!("tau must be > 0, got {}", opts.tau),
        });
    }
    let anchors = batch.anchors();
    let n = batch.len();
    let mut pos_mask = vec![false; anchors.len() * n];
    let mut den_mask = vec![false; anchors.len() * n];
    let mut b_eff = 0;
    for (r, &i) in anchors.iter().enumerate() {
        let a = batch.actions[i];
        let has_pos = (0..n).any(|j| j != i && batch.actions[j] == a);
        let has_neg = (0..n).any(|j| batch.actions[j] != a);
        if !(has_pos && has_neg) {
            continue;
        }
        b_eff += 1;
        for j in (0..n).filter(|&j| j != i) {
            let same = batch.actions[j] == a;
            pos_mask[r * n + j] = same;
            den_mask[r * n + j] = !same || opts.positives_in_denominator;
        }
    }
    let e = if opts.unit_normalize {
        unit_rows(g, batch.embeddings)?
    } else {
        batch.embeddings
    };
    let s = similarity(g, e, &anchors, opts.tau)?;
    let lse_pos = g.masked_logsumexp(s, &pos_mask)?;
    let lse_den = g.masked_logsumexp(s, &den_mask)?;
    let diff = g.sub(lse_pos, lse_den)?;
    let total = g.sum_all(diff)?;
    let scale = if b_eff == 0 { 0.0 } else { -1.0 / b_eff as f64 };
    let loss = g.scale(total, scale)?;
    Ok(ContrastiveOutput {
        loss,
        b_eff,
        anchors: anchors.len(),
    })
}

/// NT-Xent over real rows and their augmented twins: cosine similarity,
/// each such row's positive is its twin and its denominator every other row.
/// Returns the mean over rows.
pub fn simclr_loss(g: &mut Graph, batch: &ContrastiveBatch, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Domain {
            op: "simclr_loss",
            detail: format!("tau must be > 0, got {tau}"),
        });
    }
    let n = batch.len();
    let mut twin = vec![usize::MAX; n];
    for i in 0..n {
        if batch.origin[i] == Origin::Augmented {
            let s = batch.source[i];
            if twin[s] != usize::MAX {
                return Err(Error::invalid(format!("real row {s} has more than one augmented view")));
            }
            twin[s] = i;
            twin[i] = s;
        }
    }
    let rows: Vec<usize> = (0..n).filter(|&i| batch.origin[i] != Origin::Synthetic).collect();
    if let Some(&i) = rows.iter().find(|&&i| twin[i] == usize::MAX) {
        return Err(Error::invalid(format!("row {i} has no augmented twin")));
    }
    if rows.is_empty() {
        return Err(Error::invalid("simclr loss needs at least one real/augmented pair"));
    }
    let e = unit_rows(g, batch.embeddings)?;
    let s = similarity(g, e, &rows, tau)?;
    let mut mask = vec![false; rows.len() * n];
    for (r, &i) in rows.iter().enumerate() {
        for j in (0..n).filter(|&j| j != i) {
            mask[r * n + j] = true;
        }
    }
    let lse = g.masked_logsumexp(s, &mask)?;
    let a = g.gather_rows(e, &rows)?;
    let twin_rows: Vec<usize> = rows.iter().map(|&i| twin[i]).collect();
    let b = g.gather_rows(e, &twin_rows)?;
    let pos = g.row_dot(a, b)?;
    let pos = g.scale(pos, 1.0 / tau)?;
    let per_row = g.sub(lse, pos)?;
    g.mean_all(per_row)
}

/// `traj + beta · contrastive`.
pub fn combined_loss(g: &mut Graph, traj: Var, contrastive: Var, beta: f64) -> Result<Var> {
    let weighted = g.scale(contrastive, beta)?;
    g.add(traj, weighted)
}
