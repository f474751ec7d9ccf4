use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{DecoderMode, ModelConfig};
use super::loss::{bom_l2, kl_gaussian, repeat_rows, reparameterize, traj_loss, LatentGaussian};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::BBox;
use crate::error::{Error, Result};
use crate::nn::{init_params, Activation, BoundParams, Linear, LstmCell, Mlp, ParamRegistry, ParamSpecs};

/// Layers of the bidirectional decoder that the forward decoder lacks.
#[derive(Clone, Debug)]
struct BackwardDecoder {
    goal: Mlp,
    init: Linear,
    lstm: LstmCell,
    out: Linear,
}

/// Conditional VAE trajectory predictor over normalized boxes.
#[derive(Clone, Debug)]
pub struct TrajectoryModel {
    config: ModelConfig,
    encoder: LstmCell,
    future_encoder: LstmCell,
    prior_head: Mlp,
    posterior_head: Mlp,
    dec_init: Linear,
    dec_lstm: LstmCell,
    dec_out: Linear,
    backward: Option<BackwardDecoder>,
}

/// Graph values produced by one training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TrainForward {
    /// Encoder embedding `[B, d_h]`.
    pub h: Var,
    pub prior: LatentGaussian,
    pub posterior: LatentGaussian,
    /// `[B·K, t_pred·4]`, `K` consecutive rows per window.
    pub predictions: Var,
    pub bom: Var,
    pub kl: Var,
    pub traj: Var,
}

/// `L` sampled futures per input window, stored as `[B, L, t_pred, 4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub batch: usize,
    pub samples: usize,
    pub t_pred: usize,
    values: Vec<f64>,
}

impl PredictionSet {
    pub fn new(batch: usize, samples: usize, t_pred: usize, values: Vec<f64>) -> Result<Self> {
        if samples == 0 || values.len() != batch * samples * t_pred * 4 {
            return Err(Error::invalid(format!(
                "prediction set [{batch}, {samples}, {t_pred}, 4] does not match {} values",
                values.len()
            )));
        }
        Ok(PredictionSet {
            batch,
            samples,
            t_pred,
            values,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.samples, self.t_pred, 4]
    }

    /// Sample `l` of window `b` as `t_pred·4` flat coordinates.
    pub fn flat(&self, b: usize, l: usize) -> &[f64] {
        let n = self.t_pred * 4;
        let start = (b * self.samples + l) * n;
        &self.values[start..start + n]
    }

    pub fn boxes(&self, b: usize, l: usize) -> Vec<BBox> {
        self.flat(b, l)
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.values.clone()).expect("sizes checked at construction")
    }
}

/// Stacks box sequences of equal length into `[N, T·4]`.
pub fn stack_boxes<S: AsRef<[BBox]>>(rows: &[S]) -> Result<Tensor> {
    let t = rows.first().map_or(0, |r| r.as_ref().len());
    let mut values = Vec::with_capacity(rows.len() * t * 4);
    for r in rows {
        let r = r.as_ref();
        if r.len() != t {
            return Err(Error::Shape {
                op: "stack_boxes",
                lhs: vec![t, 4],
                rhs: vec![r.len(), 4],
            });
        }
        values.extend(r.iter().flatten());
    }
    Tensor::new(vec![rows.len(), t * 4], values)
}

/// `[rows, d]` standard-normal draws from a seeded stream.
pub fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Tensor {
    let values = (0..rows * d).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, d], values).expect("sized by construction")
}

impl TrajectoryModel {
    pub fn new(config: ModelConfig) -> Result<(Self, ParamSpecs)> {
        config.validate()?;
        let mut s = ParamSpecs::new();
        let (d_h, d_z) = (config.d_h, config.d_z);
        let encoder = LstmCell::new(&mut s, "encoder.lstm", 4, d_h);
        let future_encoder = LstmCell::new(&mut s, "future_encoder.lstm", 4, d_h);
        let prior_head = Mlp::new(&mut s, "prior_head", &[d_h, d_h, 2 * d_z], Activation::Tanh, Activation::Identity);
        let posterior_head = Mlp::new(
            &mut s,
            "posterior_head",
            &[2 * d_h, d_h, 2 * d_z],
            Activation::Tanh,
            Activation::Identity,
        );
        let dec_init = Linear::new(&mut s, "decoder.init", d_h + d_z, d_h);
        let dec_lstm = LstmCell::new(&mut s, "decoder.lstm", d_h + d_z, d_h);
        let dec_out = Linear::new(&mut s, "decoder.out", d_h, 4);
        let backward = match config.decoder {
            DecoderMode::Forward => None,
            DecoderMode::Bidirectional => Some(BackwardDecoder {
                goal: Mlp::new(&mut s, "decoder.goal", &[d_h + d_z, d_h, 4], Activation::Tanh, Activation::Identity),
                init: Linear::new(&mut s, "decoder.backward_init", d_h + d_z + 4, d_h),
                lstm: LstmCell::new(&mut s, "decoder.backward_lstm", d_h + d_z + 4, d_h),
                out: Linear::new(&mut s, "decoder.backward_out", d_h, 4),
            }),
        };
        let model = TrajectoryModel {
            config,
            encoder,
            future_encoder,
            prior_head,
            posterior_head,
            dec_init,
            dec_lstm,
            dec_out,
            backward,
        };
        Ok((model, s))
    }

    /// Builds the model and samples its parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParamRegistry)> {
        let (model, specs) = Self::new(config)?;
        let params = init_params(&specs, seed)?;
        Ok((model, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Runs `cell` over a `[B, T·4]` (or `[B, T, 4]`) sequence of boxes and
    /// returns the last hidden state.
    fn run_encoder(&self, cell: &LstmCell, g: &mut Graph, p: &BoundParams, seq: Var, steps: usize) -> Result<Var> {
        if steps == 0 {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        let shape = g.shape(seq).to_vec();
        let seq = match shape.as_slice() {
            [b, t, 4] if *t == steps => g.reshape(seq, &[*b, t * 4])?,
            [_, n] if *n == steps * 4 => seq,
            _ => {
                return Err(Error::Shape {
                    op: "encode",
                    lhs: shape,
                    rhs: vec![steps, 4],
                })
            }
        };
        let b = g.shape(seq)[0];
        let mut h = g.constant(Tensor::zeros(vec![b, cell.d_h]));
        let mut c = h;
        for t in 0..steps {
            let x = g.slice(seq, 4 * t, 4)?;
            (h, c) = cell.step(g, p, x, h, c)?;
        }
        Ok(h)
    }

    /// Embedding `h: [B, d_h]` of observed segments `[B, t_obs·4]`.
    pub fn encode(&self, g: &mut Graph, p: &BoundParams, observed: Var) -> Result<Var> {
        self.run_encoder(&self.encoder, g, p, observed, self.config.t_obs)
    }

    /// Recognition-network encoding of ground-truth futures `[B, t_pred·4]`.
    pub fn encode_future(&self, g: &mut Graph, p: &BoundParams, future: Var) -> Result<Var> {
        self.run_encoder(&self.future_encoder, g, p, future, self.config.t_pred)
    }

    /// Prior from `h`; posterior from `[h, future_enc]` when given.
    pub fn latent_heads(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        h: Var,
        future_enc: Option<Var>,
    ) -> Result<(LatentGaussian, Option<LatentGaussian>)> {
        let d_z = self.config.d_z;
        let prior_out = self.prior_head.forward(g, p, h)?;
        let prior = LatentGaussian::from_head(g, prior_out, d_z)?;
        let posterior = match future_enc {
            Some(fe) => {
                let joint = g.concat(&[h, fe])?;
                let out = self.posterior_head.forward(g, p, joint)?;
                Some(LatentGaussian::from_head(g, out, d_z)?)
            }
            None => None,
        };
        Ok((prior, posterior))
    }

    /// Decodes `t_pred` boxes per row from `h: [N, d_h]`, `z: [N, d_z]`, with
    /// per-step deltas accumulated from `last: [N, 4]`. Returns `[N, t_pred·4]`.
    pub fn decode(&self, g: &mut Graph, p: &BoundParams, h: Var, z: Var, last: Var) -> Result<Var> {
        let t_pred = self.config.t_pred;
        let hz = g.concat(&[h, z])?;

        let init = self.dec_init.forward(g, p, hz)?;
        let mut state = g.tanh(init)?;
        let mut cell = g.constant(Tensor::zeros(g.shape(state).to_vec()));
        let xi = self.dec_lstm.project_input(g, p, hz)?;
        let mut pos = last;
        let mut forward = Vec::with_capacity(t_pred);
        for _ in 0..t_pred {
            (state, cell) = self.dec_lstm.step_projected(g, p, xi, state, cell)?;
            let delta = self.dec_out.forward(g, p, state)?;
            pos = g.add(pos, delta)?;
            forward.push(pos);
        }

        let Some(bw) = &self.backward else {
            return g.concat(&forward);
        };
        let goal_offset = bw.goal.forward(g, p, hz)?;
        let goal = g.add(last, goal_offset)?;
        if t_pred == 1 {
            return Ok(goal);
        }
        let ctx = g.concat(&[hz, goal_offset])?;
        let init = bw.init.forward(g, p, ctx)?;
        let mut state = g.tanh(init)?;
        let mut cell = g.constant(Tensor::zeros(g.shape(state).to_vec()));
        let xi = bw.lstm.project_input(g, p, ctx)?;
        // backward[t] runs from the goal at t = t_pred-1 toward the observation
        let mut backward = vec![goal; t_pred];
        let mut pos = goal;
        for t in (0..t_pred - 1).rev() {
            (state, cell) = bw.lstm.step_projected(g, p, xi, state, cell)?;
            let delta = bw.out.forward(g, p, state)?;
            pos = g.sub(pos, delta)?;
            backward[t] = pos;
        }
        let denom = (t_pred - 1) as f64;
        let mut blended = Vec::with_capacity(t_pred);
        for t in 0..t_pred {
            let alpha = t as f64 / denom;
            let out = if t == t_pred - 1 {
                goal
            } else {
                let f = g.scale(forward[t], 1.0 - alpha)?;
                let b = g.scale(backward[t], alpha)?;
                g.add(f, b)?
            };
            blended.push(out);
        }
        g.concat(&blended)
    }

    /// Last observed box of each row of `[B, t_obs·4]`.
    pub fn last_observed(&self, g: &mut Graph, observed: Var) -> Result<Var> {
        let shape = g.shape(observed).to_vec();
        let flat = if shape.len() == 3 {
            g.reshape(observed, &[shape[0], shape[1] * shape[2]])?
        } else {
            observed
        };
        g.slice(flat, 4 * (self.config.t_obs - 1), 4)
    }

    /// Training pass: posterior samples (`noise: [B·K, d_z]`), best-of-K loss,
    /// KL to the prior, and `L_traj`.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        observed: Var,
        future: Var,
        noise: Var,
    ) -> Result<TrainForward> {
        let h = self.encode(g, p, observed)?;
        let fe = self.encode_future(g, p, future)?;
        let (prior, posterior) = self.latent_heads(g, p, h, Some(fe))?;
        let posterior = posterior.expect("future encoding given");
        let b = g.shape(h)[0];
        let rows = g.shape(noise)[0];
        if b == 0 || rows % b != 0 {
            return Err(Error::Shape {
                op: "forward_train",
                lhs: vec![b, self.config.d_h],
                rhs: g.shape(noise).to_vec(),
            });
        }
        let k = rows / b;
        let dist = posterior.repeat_rows(g, k)?;
        let z = reparameterize(g, &dist, noise)?;
        let hk = repeat_rows(g, h, k)?;
        let last = self.last_observed(g, observed)?;
        let lastk = repeat_rows(g, last, k)?;
        let predictions = self.decode(g, p, hk, z, lastk)?;
        let target = match g.shape(future).len() {
            3 => g.reshape(future, &[b, self.config.t_pred * 4])?,
            _ => future,
        };
        let bom = bom_l2(g, predictions, target, k)?;
        let kl = kl_gaussian(g, &posterior, &prior)?;
        let traj = traj_loss(g, bom, kl, self.config.lambda_kl)?;
        Ok(TrainForward {
            h,
            prior,
            posterior,
            predictions,
            bom,
            kl,
            traj,
        })
    }

    /// Prior-sampled predictions for `[B, t_obs·4]` inputs; `l` samples each,
    /// noise drawn from a stream seeded by `seed`. Runs without gradients.
    pub fn predict_multimodal(
        &self,
        params: &ParamRegistry,
        observed: &Tensor,
        l: usize,
        seed: u64,
    ) -> Result<PredictionSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.predict_with_rng(params, observed, l, &mut rng)
    }

    pub fn predict_with_rng(
        &self,
        params: &ParamRegistry,
        observed: &Tensor,
        l: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<PredictionSet> {
        if l == 0 {
            return Err(Error::invalid("need at least one prediction sample"));
        }
        let b = observed.shape()[0];
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let obs = g.constant(observed.clone());
        let h = self.encode(&mut g, &p, obs)?;
        let (prior, _) = self.latent_heads(&mut g, &p, h, None)?;
        let noise = g.constant(standard_normal(rng, b * l, self.config.d_z));
        let dist = prior.repeat_rows(&mut g, l)?;
        let z = reparameterize(&mut g, &dist, noise)?;
        let hl = repeat_rows(&mut g, h, l)?;
        let last = self.last_observed(&mut g, obs)?;
        let lastl = repeat_rows(&mut g, last, l)?;
        let out = self.decode(&mut g, &p, hl, z, lastl)?;
        PredictionSet::new(b, l, self.config.t_pred, g.value(out).values().to_vec())
    }

    /// Encoder embeddings `[B, d_h]` without gradients.
    pub fn embed(&self, params: &ParamRegistry, observed: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let obs = g.constant(observed.clone());
        let h = self.encode(&mut g, &p, obs)?;
        Ok(g.value(h).clone())
    }
}
