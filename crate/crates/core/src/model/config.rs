use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    Forward,
    Bidirectional,
}

impl fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderMode::Forward => "forward",
            DecoderMode::Bidirectional => "bidirectional",
        })
    }
}

impl FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(DecoderMode::Forward),
            "bidirectional" => Ok(DecoderMode::Bidirectional),
            other => Err(Error::Config(format!(
                "unknown decoder mode `{other}` (expected forward or bidirectional)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_h: usize,
    pub d_z: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    pub decoder: DecoderMode,
    /// Latent samples per window for the best-of-many training loss.
    pub k_bom: usize,
    pub lambda_kl: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_h: 256,
            d_z: 32,
            t_obs: 5,
            t_pred: 15,
            decoder: DecoderMode::Bidirectional,
            k_bom: 20,
            lambda_kl: 1.0,
        }
    }
}

const KV_KEYS: [&str; 7] = ["d_h", "d_z", "t_obs", "t_pred", "decoder", "k_bom", "lambda_kl"];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_h == 0 || self.d_z == 0 {
            return bad(format!("d_h and d_z must be >= 1 (got {}, {})", self.d_h, self.d_z));
        }
        if self.t_obs == 0 {
            return bad("t_obs must be >= 1".into());
        }
        if self.t_pred == 0 {
            return bad("t_pred must be >= 1".into());
        }
        if self.k_bom == 0 {
            return bad("k_bom must be >= 1".into());
        }
        if !(self.lambda_kl >= 0.0 && self.lambda_kl.is_finite()) {
            return bad(format!("lambda_kl must be finite and >= 0, got {}", self.lambda_kl));
        }
        Ok(())
    }

    /// `key = value` lines stored next to a checkpoint.
    pub fn to_kv(&self) -> String {
        format!(
            "d_h = {}\nd_z = {}\nt_obs = {}\nt_pred = {}\ndecoder = {}\nk_bom = {}\nlambda_kl = {:?}\n",
            self.d_h, self.d_z, self.t_obs, self.t_pred, self.decoder, self.k_bom, self.lambda_kl
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("model config line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("model config `{k}`: bad integer `{v}`")))
            };
            match k {
                "d_h" => cfg.d_h = num(v)?,
                "d_z" => cfg.d_z = num(v)?,
                "t_obs" => cfg.t_obs = num(v)?,
                "t_pred" => cfg.t_pred = num(v)?,
                "k_bom" => cfg.k_bom = num(v)?,
                "decoder" => cfg.decoder = v.parse().map_err(|e: Error| Error::Checkpoint(e.to_string()))?,
                "lambda_kl" => {
                    cfg.lambda_kl = v
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("model config `lambda_kl`: bad number `{v}`")))?
                }
                other => return Err(Error::Checkpoint(format!("model config: unknown key `{other}`"))),
            }
            seen.push(k.to_string());
        }
        if let Some(missing) = KV_KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
            return Err(Error::Checkpoint(format!("model config: missing key `{missing}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Names of fields whose values differ, as `field (a vs b)`.
    pub fn differences(&self, other: &ModelConfig) -> Vec<String> {
        let a = self.to_kv();
        let b = other.to_kv();
        a.lines()
            .zip(b.lines())
            .filter(|(x, y)| x != y)
            .map(|(x, y)| {
                let (k, va) = x.split_once(" = ").unwrap_or((x, ""));
                let vb = y.split_once(" = ").map_or("", |p| p.1);
                format!("{k} ({va} vs {vb})")
            })
            .collect()
    }
}
