use distillkit::loss::{self, DistillConfig, DistillVariant, LogitBatch};
use distillkit_oracles::loss as oracle;
use proptest::prelude::*;

#[test]
fn grid_matches_scalar_reference() {
    let summary = oracle::check_loss_grid().unwrap();
    println!("{summary}");
}

#[test]
fn analytic_gradient_matches_central_differences() {
    println!("{}", oracle::check_gradients(50, 0xfd).unwrap());
}

#[test]
fn combined_loss_is_sum_of_parts() {
    println!("{}", oracle::check_decomposition(1000, 4).unwrap());
}

#[test]
fn permuted_non_targets_only_move_the_non_target_term() {
    let t = LogitBatch::from_rows(&[vec![2.0, 1.0, 0.0]]).unwrap();
    let s = LogitBatch::from_rows(&[vec![2.0, 0.0, 1.0]]).unwrap();
    let cfg = DistillConfig {
        variant: DistillVariant::TargetNonTarget,
        ..DistillConfig::with_temperature(1.0)
    };
    let b = loss::target_nontarget_loss(&t, &s, &[0], &cfg).unwrap();
    assert!(b.l_inter.abs() < 1e-12);
    assert!(b.l_intra > 0.0);
}

fn logits(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-8.0f64..8.0, cols), rows)
}

fn pair() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
    (1usize..6, 2usize..7).prop_flat_map(|(b, n)| (logits(b, n), logits(b, n), 0.25f64..10.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn terms_are_nonnegative((t, s, temp) in pair()) {
        let (lt, ls) = (LogitBatch::from_rows(&t).unwrap(), LogitBatch::from_rows(&s).unwrap());
        let labels: Vec<usize> = (0..t.len()).map(|i| i % t[0].len()).collect();
        for variant in [DistillVariant::RowColumn, DistillVariant::TargetNonTarget] {
            let cfg = DistillConfig { variant, ..DistillConfig::with_temperature(temp) };
            let b = loss::total_loss(&lt, &ls, &labels, &cfg).unwrap();
            prop_assert!(b.l_inter >= 0.0 && b.l_intra >= 0.0 && b.l_kd >= 0.0 && b.l_task >= 0.0);
        }
        prop_assert!(loss::kd_loss_rowwise(&lt, &ls, temp).unwrap() >= 0.0);
    }

    #[test]
    fn zero_at_agreement((t, _s, temp) in pair()) {
        let lt = LogitBatch::from_rows(&t).unwrap();
        let labels: Vec<usize> = vec![0; t.len()];
        for variant in [DistillVariant::RowColumn, DistillVariant::TargetNonTarget] {
            let cfg = DistillConfig { variant, ..DistillConfig::with_temperature(temp) };
            let b = loss::total_loss(&lt, &lt, &labels, &cfg).unwrap();
            prop_assert!(b.l_inter.abs() < 1e-9 && b.l_intra.abs() < 1e-9 && b.l_kd.abs() < 1e-9);
        }
    }

    #[test]
    fn shift_invariance((t, s, temp) in pair(), c in -20.0f64..20.0, which in 0usize..6) {
        let (lt, ls) = (LogitBatch::from_rows(&t).unwrap(), LogitBatch::from_rows(&s).unwrap());
        let row = which % t.len();
        let col = which % t[0].len();
        let mut row_shift = s.clone();
        row_shift[row].iter_mut().for_each(|v| *v += c);
        let mut col_shift = s.clone();
        col_shift.iter_mut().for_each(|r| r[col] += c);
        let inter = loss::inter_class_loss(&lt, &ls, temp).unwrap();
        let intra = loss::intra_class_loss(&lt, &ls, temp).unwrap();
        let inter2 = loss::inter_class_loss(&lt, &LogitBatch::from_rows(&row_shift).unwrap(), temp).unwrap();
        let intra2 = loss::intra_class_loss(&lt, &LogitBatch::from_rows(&col_shift).unwrap(), temp).unwrap();
        prop_assert!((inter - inter2).abs() <= 1e-9 * inter.max(1.0));
        prop_assert!((intra - intra2).abs() <= 1e-9 * intra.max(1.0));
    }

    #[test]
    fn rowwise_and_inter_agree((t, s, temp) in pair()) {
        let (lt, ls) = (LogitBatch::from_rows(&t).unwrap(), LogitBatch::from_rows(&s).unwrap());
        let a = loss::kd_loss_rowwise(&lt, &ls, temp).unwrap();
        let b = loss::inter_class_loss(&lt, &ls, temp).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn weighted_sum((t, s, temp) in pair(), wi in 0.0f64..3.0, wa in 0.0f64..3.0) {
        prop_assume!(wi + wa > 0.0);
        let (lt, ls) = (LogitBatch::from_rows(&t).unwrap(), LogitBatch::from_rows(&s).unwrap());
        let cfg = DistillConfig { weight_inter: wi, weight_intra: wa, ..DistillConfig::with_temperature(temp) };
        let b = loss::total_kd_loss(&lt, &ls, &cfg).unwrap();
        prop_assert!((b.l_kd - (wi * b.l_inter + wa * b.l_intra)).abs() <= 1e-9 * b.l_kd.max(1.0));
    }
}
