use distillkit::loss::LogitBatch;
use distillkit::metrics::top_k_accuracy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

/// Sort class indices by score, highest first, ties to the lower index, and
/// test whether the label is among the first `k`.
pub fn brute_top_k(rows: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let mut hits = 0usize;
    for (row, &label) in rows.iter().zip(labels) {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        if order[..k].contains(&label) {
            hits += 1;
        }
    }
    hits as f64 / rows.len() as f64
}

/// Integer logits in [-2, 2] so that ties are common.
pub fn check_top_k(instances: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ks = 0usize;
    for case in 0..instances {
        let b = rng.gen_range(1..=5);
        let n = rng.gen_range(2..=6);
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..n).map(|_| rng.gen_range(-2..=2) as f64).collect())
            .collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
        let logits = LogitBatch::from_rows(&rows).map_err(|e| e.to_string())?;
        let mut prev = 0.0;
        for k in 1..=n {
            let got = top_k_accuracy(&logits, &labels, k).map_err(|e| e.to_string())?;
            let want = brute_top_k(&rows, &labels, k);
            if got != want {
                return Err(format!("instance {case} k={k}: {got} vs brute force {want} ({rows:?}, {labels:?})"));
            }
            if got < prev {
                return Err(format!("instance {case}: accuracy drops from {prev} to {got} at k={k}"));
            }
            prev = got;
            ks += 1;
        }
        if prev != 1.0 {
            return Err(format!("instance {case}: top-{n} accuracy is {prev}"));
        }
    }
    Ok(format!("{instances} instances, {ks} (instance, k) pairs, monotone in k"))
}
