use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Diagonal Gaussian over the latent code, one row per batch element.
#[derive(Clone, Copy, Debug)]
pub struct LatentGaussian {
    /// `[N, d_z]`
    pub mu: Var,
    /// `[N, d_z]`, log of the standard deviation.
    pub log_sigma: Var,
}

impl LatentGaussian {
    /// Splits a head output `[N, 2·d_z]` into `(mu, log_sigma)`.
    pub fn from_head(g: &mut Graph, out: Var, d_z: usize) -> Result<Self> {
        Ok(LatentGaussian {
            mu: g.slice(out, 0, d_z)?,
            log_sigma: g.slice(out, d_z, d_z)?,
        })
    }

    /// Each row repeated `k` times consecutively (`[N·k, d_z]`).
    pub fn repeat_rows(&self, g: &mut Graph, k: usize) -> Result<Self> {
        Ok(LatentGaussian {
            mu: repeat_rows(g, self.mu, k)?,
            log_sigma: repeat_rows(g, self.log_sigma, k)?,
        })
    }
}

/// Row `i` of the output is row `i / k` of `v`.
pub fn repeat_rows(g: &mut Graph, v: Var, k: usize) -> Result<Var> {
    if k == 1 {
        return Ok(v);
    }
    let n = g.shape(v)[0];
    let index: Vec<usize> = (0..n * k).map(|i| i / k).collect();
    g.gather_rows(v, &index)
}

/// `z = mu + exp(log_sigma) ⊙ noise`.
pub fn reparameterize(g: &mut Graph, dist: &LatentGaussian, noise: Var) -> Result<Var> {
    let sigma = g.exp(dist.log_sigma)?;
    let spread = g.mul(sigma, noise)?;
    g.add(dist.mu, spread)
}

/// Best-of-many squared error. `predictions` holds `l` consecutive rows per
/// target row (`[B·l, D]` against `[B, D]`); the per-row error is the mean
/// over `D`, the minimum over the `l` samples is taken, then the mean over `B`.
pub fn bom_l2(g: &mut Graph, predictions: Var, target: Var, l: usize) -> Result<Var> {
    if l == 0 {
        return Err(Error::invalid("best-of-many loss needs at least one sample"));
    }
    let (ps, ts) = (g.shape(predictions).to_vec(), g.shape(target).to_vec());
    if ps.len() != 2 || ts.len() != 2 || ps[1] != ts[1] || ps[0] != ts[0] * l {
        return Err(Error::Shape {
            op: "bom_l2",
            lhs: ps,
            rhs: ts,
        });
    }
    let b = ts[0];
    let tgt = repeat_rows(g, target, l)?;
    let diff = g.sub(predictions, tgt)?;
    let sq = g.square(diff)?;
    let per_sample = g.mean(sq, 1)?;
    let grid = g.reshape(per_sample, &[b, l])?;
    let best = g.min(grid, 1)?;
    g.mean_all(best)
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians, summed over latent
/// dimensions and averaged over rows.
pub fn kl_gaussian(g: &mut Graph, q: &LatentGaussian, p: &LatentGaussian) -> Result<Var> {
    // log σp − log σq + (σq² + (μq − μp)²) / (2σp²) − ½
    let log_ratio = g.sub(p.log_sigma, q.log_sigma)?;
    let two_lq = g.scale(q.log_sigma, 2.0)?;
    let var_q = g.exp(two_lq)?;
    let dmu = g.sub(q.mu, p.mu)?;
    let dmu2 = g.square(dmu)?;
    let num = g.add(var_q, dmu2)?;
    let two_lp = g.scale(p.log_sigma, 2.0)?;
    let var_p = g.exp(two_lp)?;
    let den = g.scale(var_p, 2.0)?;
    let frac = g.div(num, den)?;
    let t = g.add(log_ratio, frac)?;
    let per_dim = g.add_scalar(t, -0.5)?;
    let per_row = g.sum(per_dim, 1)?;
    g.mean_all(per_row)
}

/// `bom + lambda_kl · kl`.
pub fn traj_loss(g: &mut Graph, bom: Var, kl: Var, lambda_kl: f64) -> Result<Var> {
    let weighted = g.scale(kl, lambda_kl)?;
    g.add(bom, weighted)
}
