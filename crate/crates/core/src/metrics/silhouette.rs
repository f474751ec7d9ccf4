use rayon::prelude::*;

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient with Euclidean distance. Points in singleton
/// clusters score 0. `None` unless there are at least two clusters.
pub fn silhouette_score(points: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    assert_eq!(points.len(), labels.len(), "one label per point");
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return None;
    }
    let slot = |l: usize| clusters.binary_search(&l).expect("label collected above");
    let sizes = {
        let mut s = vec![0usize; clusters.len()];
        for &l in labels {
            s[slot(l)] += 1;
        }
        s
    };
    let total: f64 = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let own = slot(labels[i]);
            if sizes[own] < 2 {
                return 0.0;
            }
            let mut sum = vec![0.0; clusters.len()];
            for j in 0..points.len() {
                if j != i {
                    sum[slot(labels[j])] += euclid(&points[i], &points[j]);
                }
            }
            let a = sum[own] / (sizes[own] - 1) as f64;
            let b = (0..clusters.len())
                .filter(|&c| c != own)
                .map(|c| sum[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Some(total / points.len() as f64)
}
