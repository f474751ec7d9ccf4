use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Regime, RunConfig};
use crate::autodiff::{Graph, Tensor, Var};
use crate::contrastive::{
    action_contrastive_loss, augment_anchor, combined_loss, simclr_loss, synth_samples, ContrastiveBatch, Origin,
};
use crate::data::{make_batches, TrajectoryWindow};
use crate::error::{Error, Result};
use crate::metrics::{ade_sq, predict_windows};
use crate::model::{stack_boxes, standard_normal, TrajectoryModel};
use crate::nn::{adam_step, AdamConfig, AdamState, BoundParams, ParamRegistry};

/// Independent random streams derived from the run seed.
pub(crate) mod stream {
    pub const LATENT_NOISE: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const SYNTHETIC: u64 = 3;
    pub const VALIDATION: u64 = 4;
    pub const EVAL: u64 = 5;
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Loss decomposition of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    pub l_traj: f64,
    pub l_con: f64,
    pub l_final: f64,
    /// Anchors with at least one positive and one negative.
    pub b_eff: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    /// Means over the epoch's batches.
    pub l_traj: f64,
    pub l_con: f64,
    pub l_final: f64,
    /// Best-of-L squared-pixel ADE over the full prediction span on the
    /// validation windows; absent without validation data.
    pub val_ade_sq: Option<f64>,
    pub best: bool,
}

/// Frozen model that decodes synthetic contrastive samples.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub model: &'a TrajectoryModel,
    pub params: &'a ParamRegistry,
}

/// Graph of one training step, before backward.
pub struct StepGraph {
    pub graph: Graph,
    pub bound: BoundParams,
    pub traj: Var,
    /// Contrastive term, when the regime has one this step.
    pub contrastive: Option<Var>,
    pub total: Var,
    pub b_eff: usize,
}

/// Per-step random sources, one independent stream each.
pub struct StepRngs {
    pub latent: ChaCha8Rng,
    pub augment: ChaCha8Rng,
    pub synthetic: ChaCha8Rng,
}

impl StepRngs {
    pub fn new(seed: u64) -> Self {
        StepRngs {
            latent: stream_rng(seed, stream::LATENT_NOISE),
            augment: stream_rng(seed, stream::AUGMENT),
            synthetic: stream_rng(seed, stream::SYNTHETIC),
        }
    }
}

/// Builds the loss graph for one batch. The contrastive term only sees
/// encoder outputs, so its gradient cannot reach decoder or latent heads.
/// Latent noise is drawn before anything else, so it does not depend on the
/// regime.
pub fn build_step(
    cfg: &RunConfig,
    model: &TrajectoryModel,
    params: &ParamRegistry,
    batch: &[&TrajectoryWindow],
    regime: Regime,
    generator: Option<Generator<'_>>,
    rngs: &mut StepRngs,
) -> Result<StepGraph> {
    let mc = model.config();
    let b = batch.len();
    let obs_t = stack_boxes(&batch.iter().map(|w| w.observed.as_slice()).collect::<Vec<_>>())?;
    let fut_t = stack_boxes(&batch.iter().map(|w| w.future.as_slice()).collect::<Vec<_>>())?;
    let noise_t = standard_normal(&mut rngs.latent, b * mc.k_bom, mc.d_z);

    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let obs = g.constant(obs_t.clone());
    let fut = g.constant(fut_t);
    let noise = g.constant(noise_t);
    let fw = model.forward_train(&mut g, &p, obs, fut, noise)?;

    let weights = cfg.loss.weights();
    let mut contrastive = None;
    let mut b_eff = 0;
    if regime != Regime::None {
        let actions: Vec<usize> = batch.iter().map(|w| w.action).collect();
        let mut rows = vec![fw.h];
        let mut row_actions = actions.clone();
        let mut origin = vec![Origin::Real; b];
        let mut source: Vec<usize> = (0..b).collect();

        let aug = augment_anchor(&obs_t, weights.epsilon_sigma, &mut rngs.augment)?;
        let aug = g.constant(aug);
        rows.push(model.encode(&mut g, &p, aug)?);
        row_actions.extend(&actions);
        origin.extend(std::iter::repeat(Origin::Augmented).take(b));
        source.extend(0..b);

        if let (Regime::AbcPlus, Some(gen)) = (regime, generator) {
            let synth = synth_samples(gen.model, gen.params, &obs_t, &actions, weights.l_synth, &mut rngs.synthetic)?;
            let segs = stack_boxes(&synth.iter().map(|s| s.segment.as_slice()).collect::<Vec<_>>())?;
            let segs = g.constant(segs);
            rows.push(model.encode(&mut g, &p, segs)?);
            for s in &synth {
                row_actions.push(s.action);
                origin.push(Origin::Synthetic);
                source.push(s.source);
            }
        }
        let e = g.concat_rows(&rows)?;
        let cb = ContrastiveBatch::new(&g, e, row_actions, origin, source)?;
        let con = match regime {
            Regime::Simclr => {
                b_eff = b;
                simclr_loss(&mut g, &cb, weights.tau)?
            }
            _ => {
                let out = action_contrastive_loss(&mut g, &cb, &cfg.contrastive_options())?;
                b_eff = out.b_eff;
                out.loss
            }
        };
        contrastive = Some(con);
    }
    let total = match contrastive {
        Some(c) => combined_loss(&mut g, fw.traj, c, weights.beta)?,
        None => fw.traj,
    };
    Ok(StepGraph {
        graph: g,
        bound: p,
        traj: fw.traj,
        contrastive,
        total,
        b_eff,
    })
}

/// Result of a training run.
pub struct TrainOutcome {
    pub model: TrajectoryModel,
    /// Parameters after the last step.
    pub last: ParamRegistry,
    /// Parameters of the epoch with the lowest validation error (the last
    /// epoch without validation data).
    pub best: ParamRegistry,
    pub best_epoch: usize,
    pub steps: Vec<StepReport>,
    pub epochs: Vec<EpochReport>,
}

fn batch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Best-of-L ADE over the whole predicted span, for checkpoint selection.
pub fn validation_error(
    cfg: &RunConfig,
    model: &TrajectoryModel,
    params: &ParamRegistry,
    windows: &[TrajectoryWindow],
) -> Result<f64> {
    let preds = predict_windows(
        model,
        params,
        windows,
        cfg.eval.samples,
        cfg.seed.wrapping_add(stream::VALIDATION),
        cfg.eval.batch_size,
    )?;
    let mut total = 0.0;
    for (w, samples) in windows.iter().zip(&preds) {
        let gt = w.raw_future();
        let mut best = f64::INFINITY;
        for s in samples {
            best = best.min(ade_sq(s, &gt)?);
        }
        total += best;
    }
    Ok(total / windows.len().max(1) as f64)
}

/// Trains a fresh model. `on_step` sees every report as it is produced.
pub fn train(
    cfg: &RunConfig,
    train_windows: &[TrajectoryWindow],
    val_windows: &[TrajectoryWindow],
    external_generator: Option<Generator<'_>>,
    on_step: &mut dyn FnMut(&StepReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_windows.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 training windows, found {}",
            train_windows.len()
        )));
    }
    let (model, mut params) = TrajectoryModel::init(cfg.model_config(), cfg.seed)?;
    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            lr: cfg.optim.lr,
            ..AdamConfig::default()
        },
    );
    let regime = cfg.loss.regime;
    let labels: Vec<usize> = train_windows.iter().map(|w| w.action).collect();
    let mut classes = labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if regime.uses_labels() && classes.len() < 2 {
        log::warn!(
            "training data has a single action class; the contrastive term contributes 0 and training uses the trajectory loss only"
        );
    }
    let bs = cfg.optim.batch_size.min(train_windows.len());
    let mut rngs = StepRngs::new(cfg.seed);
    let started = Instant::now();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best = params.clone();
    let mut best_err = f64::INFINITY;
    let mut best_epoch = 0;
    let mut step = 0;
    for epoch in 0..cfg.optim.epochs {
        let batches = make_batches(&labels, bs, batch_seed(cfg.seed, epoch), cfg.optim.balance_batches, true)?;
        let warming = regime == Regime::AbcPlus && external_generator.is_none() && epoch < cfg.loss.warmup_epochs;
        let step_regime = if warming { Regime::None } else { regime };
        let mut sums = [0.0; 3];
        for idx in &batches {
            let batch: Vec<&TrajectoryWindow> = idx.iter().map(|&i| &train_windows[i]).collect();
            let snapshot;
            let generator = match (step_regime, external_generator) {
                (Regime::AbcPlus, Some(gen)) => Some(gen),
                (Regime::AbcPlus, None) => {
                    snapshot = params.clone();
                    Some(Generator {
                        model: &model,
                        params: &snapshot,
                    })
                }
                _ => None,
            };
            let numeric = |e: Error| match e {
                Error::Domain { .. } | Error::NonFinite(_) => {
                    Error::NonFinite(format!("training diverged at epoch {epoch} step {step}: {e}"))
                }
                other => other,
            };
            let sg = build_step(cfg, &model, &params, &batch, step_regime, generator, &mut rngs).map_err(numeric)?;
            let l_traj = sg.graph.scalar(sg.traj);
            let l_con = sg.contrastive.map_or(0.0, |c| sg.graph.scalar(c));
            let l_final = sg.graph.scalar(sg.total);
            if !(l_traj.is_finite() && l_con.is_finite() && l_final.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch} step {step} (L_traj {l_traj}, L_con {l_con})"
                )));
            }
            let grads = sg.graph.backward(sg.total).map_err(numeric)?;
            params.set_grads(&sg.bound, &grads)?;
            if let Some(c) = cfg.optim.clip_norm {
                params.clip_grad_norm(c)?;
            }
            adam_step(&mut params, &mut adam)?;
            if regime.uses_labels() && !warming && sg.b_eff == 0 && step_regime != Regime::None {
                log::debug!("step {step}: no anchor has both positives and negatives");
            }
            let report = StepReport {
                epoch,
                step,
                l_traj,
                l_con,
                l_final,
                b_eff: sg.b_eff,
                wall_time: cfg.log_wall_time.then(|| started.elapsed().as_secs_f64()),
            };
            sums[0] += l_traj;
            sums[1] += l_con;
            sums[2] += l_final;
            on_step(&report);
            steps.push(report);
            step += 1;
        }
        let n = batches.len().max(1) as f64;
        let val = if val_windows.is_empty() {
            None
        } else {
            Some(validation_error(cfg, &model, &params, val_windows)?)
        };
        let improved = match val {
            Some(v) => v < best_err,
            None => true,
        };
        if improved {
            best_err = val.unwrap_or(best_err);
            best = params.clone();
            best_epoch = epoch;
        }
        log::info!(
            "epoch {epoch}: L_traj {:.5} L_con {:.5} L_final {:.5}{}",
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            val.map(|v| format!(" val ADE_sq {v:.3}")).unwrap_or_default()
        );
        epochs.push(EpochReport {
            epoch,
            steps: batches.len(),
            l_traj: sums[0] / n,
            l_con: sums[1] / n,
            l_final: sums[2] / n,
            val_ade_sq: val,
            best: improved,
        });
    }
    Ok(TrainOutcome {
        model,
        last: params,
        best,
        best_epoch,
        steps,
        epochs,
    })
}

/// Batch view of window observations, `[B, t_obs·4]`.
pub(crate) fn observed_tensor(windows: &[TrajectoryWindow]) -> Result<Tensor> {
    stack_boxes(&windows.iter().map(|w| w.observed.as_slice()).collect::<Vec<_>>())
}
