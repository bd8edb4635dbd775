//! Scalar loss references over nested `Vec`s. Nothing here goes through
//! ndarray or the library's softmax.

use distillkit::loss::{self, DistillConfig, DistillVariant, LogitBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{close, Outcome};

pub type Matrix = Vec<Vec<f64>>;

pub const GRID_TOLERANCE: f64 = 1e-9;
pub const GRID_TEMPERATURES: [f64; 3] = [1.0, 2.0, 4.0];
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const DECOMPOSITION_TOLERANCE: f64 = 1e-12;

pub fn softmax(v: &[f64], t: f64) -> Vec<f64> {
    let e: Vec<f64> = v.iter().map(|x| (x / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

pub fn transpose(m: &Matrix) -> Matrix {
    (0..m[0].len()).map(|j| m.iter().map(|row| row[j]).collect()).collect()
}

fn mean_lane_kl(teacher: &Matrix, student: &Matrix, t: f64) -> f64 {
    let total: f64 = teacher
        .iter()
        .zip(student)
        .map(|(a, b)| kl(&softmax(a, t), &softmax(b, t)))
        .sum();
    t * t * total / teacher.len() as f64
}

pub fn kd_rowwise(teacher: &Matrix, student: &Matrix, t: f64) -> f64 {
    mean_lane_kl(teacher, student, t)
}

pub fn inter(teacher: &Matrix, student: &Matrix, t: f64) -> f64 {
    mean_lane_kl(teacher, student, t)
}

pub fn intra(teacher: &Matrix, student: &Matrix, t: f64) -> f64 {
    mean_lane_kl(&transpose(teacher), &transpose(student), t)
}

/// `(binary term, non-target term)`, both batch means scaled by `t^2`.
pub fn target_nontarget(teacher: &Matrix, student: &Matrix, labels: &[usize], t: f64) -> (f64, f64) {
    let mut binary = 0.0;
    let mut rest = 0.0;
    for ((a, b), &y) in teacher.iter().zip(student).zip(labels) {
        let p = softmax(a, t)[y];
        let q = softmax(b, t)[y];
        binary += kl(&[p, 1.0 - p], &[q, 1.0 - q]);
        let drop = |v: &[f64]| -> Vec<f64> {
            v.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, x)| *x).collect()
        };
        rest += kl(&softmax(&drop(a), t), &softmax(&drop(b), t));
    }
    let scale = t * t / teacher.len() as f64;
    (scale * binary, scale * rest)
}

/// Decode `code` as base-3 digits mapped to {-1, 0, 1}, row-major.
pub fn grid_matrix(mut code: u64, rows: usize, cols: usize) -> Matrix {
    let mut m = vec![vec![0.0; cols]; rows];
    for row in m.iter_mut() {
        for v in row.iter_mut() {
            *v = (code % 3) as f64 - 1.0;
            code /= 3;
        }
    }
    m
}

fn batch(m: &Matrix) -> LogitBatch {
    LogitBatch::from_rows(m).expect("valid logits")
}

/// Compare every loss operation with the references on one instance and
/// return the largest absolute deviation.
pub fn compare_instance(teacher: &Matrix, student: &Matrix, labels: &[usize], t: f64) -> Result<f64, String> {
    let (lt, ls) = (batch(teacher), batch(student));
    let e = |e: loss::LossError| e.to_string();
    let r_inter = inter(teacher, student, t);
    let r_intra = intra(teacher, student, t);
    let (r_bin, r_rest) = target_nontarget(teacher, student, labels, t);

    let rc = DistillConfig::with_temperature(t);
    let total = loss::total_kd_loss(&lt, &ls, &rc).map_err(e)?;
    let weighted_cfg = DistillConfig {
        weight_inter: 0.5,
        weight_intra: 2.0,
        ..rc.clone()
    };
    let weighted = loss::total_kd_loss(&lt, &ls, &weighted_cfg).map_err(e)?;
    let tnt_cfg = DistillConfig {
        variant: DistillVariant::TargetNonTarget,
        ..rc.clone()
    };
    let tnt = loss::target_nontarget_loss(&lt, &ls, labels, &tnt_cfg).map_err(e)?;

    let pairs = [
        ("kd_loss_rowwise", loss::kd_loss_rowwise(&lt, &ls, t).map_err(e)?, kd_rowwise(teacher, student, t)),
        ("inter_class_loss", loss::inter_class_loss(&lt, &ls, t).map_err(e)?, r_inter),
        ("intra_class_loss", loss::intra_class_loss(&lt, &ls, t).map_err(e)?, r_intra),
        ("total_kd_loss.l_inter", total.l_inter, r_inter),
        ("total_kd_loss.l_intra", total.l_intra, r_intra),
        ("total_kd_loss.l_kd", total.l_kd, r_inter + r_intra),
        ("total_kd_loss(0.5, 2).l_kd", weighted.l_kd, 0.5 * r_inter + 2.0 * r_intra),
        ("target_nontarget_loss.l_inter", tnt.l_inter, r_bin),
        ("target_nontarget_loss.l_intra", tnt.l_intra, r_rest),
        ("target_nontarget_loss.l_kd", tnt.l_kd, r_bin + r_rest),
    ];
    let mut worst = 0.0f64;
    for (name, got, want) in pairs {
        if !close(got, want, GRID_TOLERANCE) {
            return Err(format!(
                "{name}: got {got:e}, reference {want:e} (T={t}, teacher {teacher:?}, student {student:?}, labels {labels:?})"
            ));
        }
        worst = worst.max((got - want).abs());
    }
    Ok(worst)
}

/// Every shape with `B <= 3` and `2 <= N <= 4` at T in {1, 2, 4}.
///
/// Shapes with `2*B*N <= 10` enumerate every (teacher, student) pair. For
/// larger shapes the pair space is out of reach (3^24 at 3x4), so every grid
/// matrix is used as the teacher and paired with a bijectively permuted grid
/// matrix as the student; each matrix therefore appears in both roles.
pub fn check_loss_grid() -> Outcome {
    let mut instances = 0u64;
    let mut worst = 0.0f64;
    for rows in 1..=3usize {
        for cols in 2..=4usize {
            let cells = (rows * cols) as u32;
            let count = 3u64.pow(cells);
            let exhaustive = 2 * cells <= 10;
            let pairs: Box<dyn Iterator<Item = (u64, u64)>> = if exhaustive {
                Box::new((0..count).flat_map(move |a| (0..count).map(move |b| (a, b))))
            } else {
                // 7919 is coprime to 3, so this is a permutation of 0..count.
                Box::new((0..count).map(move |a| (a, (a * 7919 + 12345) % count)))
            };
            for (a, b) in pairs {
                let teacher = grid_matrix(a, rows, cols);
                let student = grid_matrix(b, rows, cols);
                let labels: Vec<usize> = (0..rows).map(|i| ((a + b) as usize + i) % cols).collect();
                for t in GRID_TEMPERATURES {
                    worst = worst.max(compare_instance(&teacher, &student, &labels, t)?);
                    instances += 1;
                }
            }
        }
    }
    Ok(format!("{instances} grid instances, max abs deviation {worst:.1e}"))
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Analytic gradient of `l_total` against central differences.
///
/// The error of one instance is `|g - g_fd| / max(|g|, |g_fd|)` over the whole
/// gradient matrix. Half the instances use the target/non-target variant.
pub fn check_gradients(instances: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..instances {
        let rows = rng.gen_range(1..=4);
        let cols = rng.gen_range(2..=5);
        let teacher = random_matrix(&mut rng, rows, cols, 3.0);
        let mut student = random_matrix(&mut rng, rows, cols, 3.0);
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..cols)).collect();
        let temperature = if rng.gen_bool(0.5) {
            GRID_TEMPERATURES[rng.gen_range(0..3)]
        } else {
            rng.gen_range(0.5..6.0)
        };
        let cfg = DistillConfig {
            temperature,
            weight_inter: rng.gen_range(0.0..2.0),
            weight_intra: rng.gen_range(0.0..2.0),
            weight_task: rng.gen_range(0.1..2.0),
            variant: if case % 2 == 0 {
                DistillVariant::RowColumn
            } else {
                DistillVariant::TargetNonTarget
            },
        };
        let lt = batch(&teacher);
        let f = |s: &Matrix| -> Result<f64, String> {
            loss::total_loss(&lt, &batch(s), &labels, &cfg)
                .map(|b| b.l_total)
                .map_err(|e| e.to_string())
        };
        let (_, grad) = loss::total_loss_with_grad(&lt, &batch(&student), &labels, &cfg).map_err(|e| e.to_string())?;
        let mut numeric = vec![vec![0.0; cols]; rows];
        for i in 0..rows {
            for j in 0..cols {
                let orig = student[i][j];
                student[i][j] = orig + FD_STEP;
                let up = f(&student)?;
                student[i][j] = orig - FD_STEP;
                let down = f(&student)?;
                student[i][j] = orig;
                numeric[i][j] = (up - down) / (2.0 * FD_STEP);
            }
        }
        let diff = norm((0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| grad[[i, j]] - numeric[i][j]));
        let scale = norm(grad.iter().copied()).max(norm(numeric.iter().flatten().copied())).max(1e-12);
        let err = diff / scale;
        if err > FD_TOLERANCE {
            return Err(format!(
                "instance {case} ({rows}x{cols}, {:?}, T={temperature:.3}): relative error {err:.2e}",
                cfg.variant
            ));
        }
        worst = worst.max(err);
    }
    Ok(format!("{instances} instances, max relative error {worst:.2e}"))
}

/// `total_kd_loss` at default weights against separate calls of the two
/// component operations.
pub fn check_decomposition(instances: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..instances {
        let rows = rng.gen_range(1..=8);
        let cols = rng.gen_range(2..=10);
        let lt = batch(&random_matrix(&mut rng, rows, cols, 5.0));
        let ls = batch(&random_matrix(&mut rng, rows, cols, 5.0));
        let t = rng.gen_range(0.5..8.0);
        let e = |e: loss::LossError| e.to_string();
        let total = loss::total_kd_loss(&lt, &ls, &DistillConfig::with_temperature(t)).map_err(e)?;
        let inter = loss::inter_class_loss(&lt, &ls, t).map_err(e)?;
        let intra = loss::intra_class_loss(&lt, &ls, t).map_err(e)?;
        let dev = [
            (total.l_kd - (inter + intra)).abs(),
            (total.l_inter - inter).abs(),
            (total.l_intra - intra).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        if dev > DECOMPOSITION_TOLERANCE {
            return Err(format!("instance {case} ({rows}x{cols}, T={t:.3}): deviation {dev:e}"));
        }
        worst = worst.max(dev);
    }
    Ok(format!("{instances} instances, max deviation {worst:.1e}"))
}
