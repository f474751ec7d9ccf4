use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::BBox;
use crate::error::{Error, Result};
use crate::model::TrajectoryModel;
use crate::nn::ParamRegistry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    Augmented,
    Synthetic,
}

/// Weights and sampling knobs of the contrastive term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the contrastive term in the total loss.
    pub beta: f64,
    /// Similarity temperature.
    pub tau: f64,
    /// Std of the white noise added to observed segments for augmented views.
    pub epsilon_sigma: f64,
    /// Synthetic samples decoded per real sample.
    pub l_synth: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 0.75,
            tau: 0.1,
            epsilon_sigma: 0.01,
            l_synth: 2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.epsilon_sigma >= 0.0 && self.epsilon_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon_sigma must be >= 0, got {}",
                self.epsilon_sigma
            )));
        }
        Ok(())
    }
}

/// Embedding rows with their action ids and provenance. Real rows are the
/// anchors; every other row points at the real row it was derived from.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    /// `[B_total, d]`
    pub embeddings: Var,
    pub actions: Vec<usize>,
    pub origin: Vec<Origin>,
    /// Index of the real row each row derives from (itself for real rows).
    pub source: Vec<usize>,
}

impl ContrastiveBatch {
    pub fn new(
        g: &Graph,
        embeddings: Var,
        actions: Vec<usize>,
        origin: Vec<Origin>,
        source: Vec<usize>,
    ) -> Result<Self> {
        let shape = g.shape(embeddings);
        let n = actions.len();
        if shape.len() != 2 || shape[0] != n || origin.len() != n || source.len() != n {
            return Err(Error::Shape {
                op: "contrastive_batch",
                lhs: shape.to_vec(),
                rhs: vec![n, origin.len(), source.len()],
            });
        }
        for i in 0..n {
            let s = source[i];
            let ok = match origin[i] {
                Origin::Real => s == i,
                _ => s < n && origin[s] == Origin::Real && actions[s] == actions[i],
            };
            if !ok {
                return Err(Error::invalid(format!(
                    "row {i} ({:?}) has inconsistent source {s}",
                    origin[i]
                )));
            }
        }
        Ok(ContrastiveBatch {
            embeddings,
            actions,
            origin,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn anchor_mask(&self) -> Vec<bool> {
        self.origin.iter().map(|o| *o == Origin::Real).collect()
    }

    pub fn anchors(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.origin[i] == Origin::Real).collect()
    }
}

/// Rows with the anchor's action (other than the anchor itself), and rows
/// with a different action.
pub fn partition(batch: &ContrastiveBatch, anchor: usize) -> (Vec<usize>, Vec<usize>) {
    let a = batch.actions[anchor];
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for j in (0..batch.len()).filter(|&j| j != anchor) {
        if batch.actions[j] == a {
            pos.push(j);
        } else {
            neg.push(j);
        }
    }
    (pos, neg)
}

/// Adds i.i.d. `N(0, sigma²)` noise to every coordinate.
pub fn augment_anchor(observed: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("augmentation sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(observed.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma checked");
    let values = observed.values().iter().map(|&x| x + normal.sample(rng)).collect();
    Tensor::new(observed.shape().to_vec(), values)
}

/// A decoded trajectory segment used as an extra contrastive member.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `t_obs` boxes, normalized against the segment's own last box.
    pub segment: Vec<BBox>,
    pub source: usize,
    pub action: usize,
}

/// Re-expresses boxes relative to their last box. Falls back to a pure shift
/// when the last box has no positive extent.
fn renormalize(boxes: &[BBox]) -> Vec<BBox> {
    let r = boxes[boxes.len() - 1];
    let (w, h) = (r[2] - r[0], r[3] - r[1]);
    let s = if w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite() {
        [w, h, w, h]
    } else {
        [1.0; 4]
    };
    boxes
        .iter()
        .map(|b| std::array::from_fn(|k| (b[k] - r[k]) / s[k]))
        .collect()
}

/// `l_synth` prior samples per real row, each cut to the last `t_obs` steps
/// of observed ++ decoded future and re-normalized. Computed outside any
/// training graph, so no gradient reaches the generator.
pub fn synth_samples(
    model: &TrajectoryModel,
    params: &ParamRegistry,
    observed: &Tensor,
    actions: &[usize],
    l_synth: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SyntheticSample>> {
    if l_synth == 0 {
        return Ok(Vec::new());
    }
    let b = observed.shape()[0];
    if actions.len() != b {
        return Err(Error::Shape {
            op: "synth_samples",
            lhs: observed.shape().to_vec(),
            rhs: vec![actions.len()],
        });
    }
    let t_obs = model.config().t_obs;
    let preds = model.predict_with_rng(params, observed, l_synth, rng)?;
    let obs = observed.values();
    let mut out = Vec::with_capacity(b * l_synth);
    for j in 0..b {
        let hist: Vec<BBox> = obs[j * t_obs * 4..(j + 1) * t_obs * 4]
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        for l in 0..l_synth {
            let mut full = hist.clone();
            full.extend(preds.boxes(j, l));
            let tail = &full[full.len() - t_obs..];
            out.push(SyntheticSample {
                segment: renormalize(tail),
                source: j,
                action: actions[j],
            });
        }
    }
    Ok(out)
}
