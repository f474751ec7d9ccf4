//! Kinematic generator for action-labeled pedestrian tracks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::record::{BBox, TrajectoryRecord, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Standing,
    Walking,
    Running,
    Bending,
    Turning,
}

impl MotionKind {
    pub fn name(self) -> &'static str {
        match self {
            MotionKind::Standing => "standing",
            MotionKind::Walking => "walking",
            MotionKind::Running => "running",
            MotionKind::Bending => "bending",
            MotionKind::Turning => "turning",
        }
    }
}

/// Standard deviation of per-frame positional jitter, in pixels.
pub const JITTER_SIGMA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_records: usize,
    pub actions: Vec<MotionKind>,
    /// Class fractions; equal shares when empty.
    pub mixture: Vec<f64>,
    pub fps: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub arena_width: f64,
    pub arena_height: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_records: 1000,
            actions: vec![MotionKind::Standing, MotionKind::Walking, MotionKind::Running],
            mixture: Vec::new(),
            fps: 10.0,
            min_frames: 20,
            max_frames: 30,
            arena_width: 1920.0,
            arena_height: 1080.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.actions.len() < 2 {
            return bad("synthetic data needs at least 2 action classes".into());
        }
        let mut seen = self.actions.clone();
        seen.sort_by_key(|a| a.name());
        seen.dedup();
        if seen.len() != self.actions.len() {
            return bad("duplicate action class in synthetic config".into());
        }
        if !self.mixture.is_empty() {
            if self.mixture.len() != self.actions.len() {
                return bad(format!(
                    "mixture has {} entries for {} actions",
                    self.mixture.len(),
                    self.actions.len()
                ));
            }
            let total: f64 = self.mixture.iter().sum();
            if self.mixture.iter().any(|&f| !(f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return bad(format!("mixture must be non-negative and sum to 1, got {:?}", self.mixture));
            }
        }
        if !(self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!(
                "frame range [{}, {}] is empty",
                self.min_frames, self.max_frames
            ));
        }
        if !(self.arena_width >= 200.0 && self.arena_height >= 300.0) {
            return bad("arena must be at least 200x300 px".into());
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let names: Vec<&str> = self.actions.iter().map(|a| a.name()).collect();
        Vocabulary::new(&names).expect("validated: names are unique")
    }

    /// Per-class record counts. Exact when `fraction · n_records` is integral;
    /// otherwise largest remainders (ties to the earlier class) get the rest.
    pub fn class_counts(&self) -> Vec<usize> {
        let k = self.actions.len();
        let fractions = if self.mixture.is_empty() {
            vec![1.0 / k as f64; k]
        } else {
            self.mixture.clone()
        };
        let n = self.n_records as f64;
        let ideal: Vec<f64> = fractions.iter().map(|f| f * n).collect();
        // round() absorbs float noise like 0.3 * 1000 = 300.00000000000006
        let mut counts: Vec<usize> = ideal
            .iter()
            .map(|&x| if (x - x.round()).abs() < 1e-6 { x.round() } else { x.floor() } as usize)
            .collect();
        let mut left = self.n_records.saturating_sub(counts.iter().sum());
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            let ra = ideal[a] - counts[a] as f64;
            let rb = ideal[b] - counts[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &c in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[c] += 1;
            left -= 1;
        }
        counts
    }
}

/// Draws from `N(0, σ²)` conditioned on `|x| ≤ 2σ`.
fn truncated_jitter(rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> f64 {
    loop {
        let x = normal.sample(rng);
        if x.abs() <= 2.0 * JITTER_SIGMA {
            return x;
        }
    }
}

/// Center path, per-frame height factor, and box size before placement.
struct Path {
    centers: Vec<[f64; 2]>,
    height_scale: Vec<f64>,
    width: f64,
    height: f64,
}

fn simulate(kind: MotionKind, n: usize, rng: &mut ChaCha8Rng) -> Path {
    let width = rng.gen_range(20.0..60.0);
    let height = width * rng.gen_range(2.0..3.0);
    let heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut centers = Vec::with_capacity(n);
    let mut height_scale = vec![1.0; n];
    match kind {
        MotionKind::Standing => centers.resize(n, [0.0, 0.0]),
        MotionKind::Walking | MotionKind::Running => {
            let speed = if kind == MotionKind::Walking {
                rng.gen_range(2.0..4.0)
            } else {
                rng.gen_range(6.0..10.0)
            };
            let (s, c) = heading.sin_cos();
            for t in 0..n {
                let d = speed * t as f64;
                centers.push([d * c, d * s]);
            }
        }
        MotionKind::Bending => {
            centers.resize(n, [0.0, 0.0]);
            let shrink = rng.gen_range(0.1..0.3);
            for (t, s) in height_scale.iter_mut().enumerate() {
                let progress = if n > 1 { t as f64 / (n - 1) as f64 } else { 0.0 };
                *s = 1.0 - shrink * progress;
            }
        }
        MotionKind::Turning => {
            let speed = rng.gen_range(2.0..4.0);
            let rate = rng.gen_range(0.03..0.1) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let mut p = [0.0, 0.0];
            for t in 0..n {
                centers.push(p);
                let a = heading + rate * t as f64;
                p = [p[0] + speed * a.cos(), p[1] + speed * a.sin()];
            }
        }
    }
    Path {
        centers,
        height_scale,
        width,
        height,
    }
}

fn generate_one(cfg: &SyntheticConfig, index: usize, kind: MotionKind, class_id: usize) -> TrajectoryRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let n = rng.gen_range(cfg.min_frames..=cfg.max_frames);
    let path = simulate(kind, n, &mut rng);
    let (hw, hh) = (path.width / 2.0, path.height / 2.0);

    // Place the path so it fits in the arena when possible.
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for c in &path.centers {
        for k in 0..2 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let margin = 2.0 * JITTER_SIGMA + 1.0;
    let limits = [
        (hw + margin, cfg.arena_width - hw - margin),
        (hh + margin, cfg.arena_height - hh - margin),
    ];
    let mut offset = [0.0; 2];
    for k in 0..2 {
        let (min_c, max_c) = limits[k];
        let a = min_c - lo[k];
        let b = max_c - hi[k];
        offset[k] = if a < b { rng.gen_range(a..b) } else { (min_c + max_c) / 2.0 - (lo[k] + hi[k]) / 2.0 };
    }

    let normal = Normal::new(0.0, JITTER_SIGMA).expect("positive sigma");
    let boxes: Vec<BBox> = (0..n)
        .map(|t| {
            let cx = (path.centers[t][0] + offset[0] + truncated_jitter(&mut rng, &normal))
                .clamp(hw, cfg.arena_width - hw);
            let cy_feet = path.centers[t][1] + offset[1] + hh + truncated_jitter(&mut rng, &normal);
            let h = path.height * path.height_scale[t];
            // bending keeps the feet fixed and lowers the head
            let y2 = cy_feet.clamp(h, cfg.arena_height);
            [cx - hw, y2 - h, cx + hw, y2]
        })
        .collect();
    TrajectoryRecord {
        id: format!("syn-{index:05}"),
        fps: cfg.fps,
        boxes,
        actions: vec![class_id; n],
    }
}

/// Deterministic per `cfg.seed`; record `i` uses its own RNG stream so
/// records do not depend on each other.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<(Vec<TrajectoryRecord>, Vocabulary)> {
    cfg.validate()?;
    let mut labels = Vec::with_capacity(cfg.n_records);
    for (c, &count) in cfg.class_counts().iter().enumerate() {
        labels.extend(std::iter::repeat(c).take(count));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    labels.shuffle(&mut rng);
    let records = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| generate_one(cfg, i, cfg.actions[c], c))
        .collect();
    Ok((records, cfg.vocabulary()))
}
