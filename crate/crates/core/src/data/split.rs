use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::TrajectoryRecord;
use crate::error::{Error, Result};

/// How records are assigned to train/val/test. Always by record id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSpec {
    Fractions { train: f64, val: f64, test: f64 },
    Explicit { train: Vec<String>, val: Vec<String>, test: Vec<String> },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<TrajectoryRecord>,
    pub val: Vec<TrajectoryRecord>,
    pub test: Vec<TrajectoryRecord>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            SplitSpec::Fractions { train, val, test } => {
                let ok = [train, val, test].iter().all(|f| **f >= 0.0) && (train + val + test - 1.0).abs() < 1e-9;
                if !ok {
                    return Err(Error::Config(format!(
                        "split fractions must be non-negative and sum to 1, got {train}/{val}/{test}"
                    )));
                }
            }
            SplitSpec::Explicit { train, val, test } => {
                let mut seen = HashSet::new();
                for id in train.iter().chain(val).chain(test) {
                    if !seen.insert(id) {
                        return Err(Error::Config(format!("record id `{id}` appears in two splits")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Partitions `records`. Fraction splits shuffle the sorted id list with
    /// `seed`, so the result does not depend on file order.
    pub fn apply(&self, records: &[TrajectoryRecord], seed: u64) -> Result<Split> {
        self.validate()?;
        let mut out = Split::default();
        match self {
            SplitSpec::Fractions { train, val, .. } => {
                let mut ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
                ids.sort_unstable();
                ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let n = ids.len();
                let n_train = ((n as f64) * train).round() as usize;
                let n_val = (((n as f64) * val).round() as usize).min(n - n_train.min(n));
                let rank: std::collections::HashMap<&str, usize> =
                    ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
                for r in records {
                    let k = rank[r.id.as_str()];
                    if k < n_train {
                        out.train.push(r.clone());
                    } else if k < n_train + n_val {
                        out.val.push(r.clone());
                    } else {
                        out.test.push(r.clone());
                    }
                }
            }
            SplitSpec::Explicit { train, val, test } => {
                let sets: [HashSet<&str>; 3] = [
                    train.iter().map(String::as_str).collect(),
                    val.iter().map(String::as_str).collect(),
                    test.iter().map(String::as_str).collect(),
                ];
                for r in records {
                    let id = r.id.as_str();
                    if sets[0].contains(id) {
                        out.train.push(r.clone());
                    } else if sets[1].contains(id) {
                        out.val.push(r.clone());
                    } else if sets[2].contains(id) {
                        out.test.push(r.clone());
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Shuffled index batches over windows with class labels `labels`.
///
/// With `balance`, each class is spread evenly through the epoch order so
/// batches mix classes; a repair pass then swaps rows into any batch still
/// holding a single class when another batch can spare one.
pub fn make_batches(
    labels: &[usize],
    batch_size: usize,
    seed: u64,
    balance: bool,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size must be >= 2, got {batch_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng);
    if balance {
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(labels.len());
        for &c in &classes {
            let members: Vec<usize> = order.iter().copied().filter(|&i| labels[i] == c).collect();
            let n_c = members.len() as f64;
            let u: f64 = rng.gen();
            keyed.extend(members.iter().enumerate().map(|(k, &i)| ((k as f64 + u) / n_c, i)));
        }
        keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        order = keyed.into_iter().map(|(_, i)| i).collect();
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    let short_tail = batches.last().is_some_and(|b| b.len() < batch_size);
    let kept = batches.len() - usize::from(drop_last && short_tail);
    if balance {
        repair_single_class(&mut batches, labels, kept);
    }
    batches.truncate(kept);
    Ok(batches)
}

fn distinct(batch: &[usize], labels: &[usize]) -> usize {
    let mut s: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
    s.sort_unstable();
    s.dedup();
    s.len()
}

/// Fixes the first `kept` batches; later batches (a dropped tail) may donate
/// rows freely.
fn repair_single_class(batches: &mut [Vec<usize>], labels: &[usize], kept: usize) {
    for a in 0..kept {
        if batches[a].len() < 2 || distinct(&batches[a], labels) >= 2 {
            continue;
        }
        let class_a = labels[batches[a][0]];
        'search: for b in 0..batches.len() {
            if b == a {
                continue;
            }
            for j in 0..batches[b].len() {
                if labels[batches[b][j]] == class_a {
                    continue;
                }
                let (x, y) = (batches[a][0], batches[b][j]);
                batches[a][0] = y;
                batches[b][j] = x;
                if b >= kept || distinct(&batches[b], labels) >= 2 {
                    break 'search;
                }
                batches[a][0] = x;
                batches[b][j] = y;
            }
        }
    }
}

/// Contiguous batches in input order, keeping the short tail.
pub fn eval_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
