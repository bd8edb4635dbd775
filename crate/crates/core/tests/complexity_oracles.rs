use distillkit::backbone::{build_gghost_stage, build_student, GGhostStageSpec, StudentConfig};
use distillkit::complexity::{analyze, crosscheck_stage, reduction_ratios, StageCostSymbols};
use distillkit::graph::LayerGraph;
use distillkit_oracles::{counting, stage};
use proptest::prelude::*;

#[test]
fn stage_grid_matches_cost_model() {
    println!("{}", stage::check_stage_ratios().unwrap());
}

#[test]
fn library_crosscheck_agrees_on_the_grid() {
    for &lambda in &stage::LAMBDAS {
        for &n in &stage::BLOCKS {
            let c = crosscheck_stage(&GGhostStageSpec::new(n, lambda, 64, 64, 1), (56, 56)).unwrap();
            assert!(c.within_tolerance, "n={n} lambda={lambda}: {}", c.to_text());
        }
    }
}

#[test]
fn fixture_matches_hand_formulas() {
    println!("{}", counting::check_counting().unwrap());
}

#[test]
fn macs_scale_with_area_params_do_not() {
    let g = counting::fixture();
    let a = analyze(&g, (32, 32)).unwrap();
    let b = analyze(&g, (64, 64)).unwrap();
    assert_eq!(a.total_params, b.total_params);
    let conv = |r: &distillkit::ComplexityReport| r.per_layer.iter().find(|c| c.id == "conv1").unwrap().macs;
    assert_eq!(conv(&b), 4 * conv(&a));
}

#[test]
fn graph_text_roundtrip_keeps_counts() {
    let g = build_student(&StudentConfig::desk(4)).unwrap();
    let back = LayerGraph::from_text(&g.to_text()).unwrap();
    assert_eq!(back, g);
    assert_eq!(analyze(&back, (32, 32)).unwrap(), analyze(&g, (32, 32)).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_lambda_is_identity(costs in prop::collection::vec(1.0f64..1e6, 2..8)) {
        let sym = StageCostSymbols { f: costs.clone(), p: costs, lambda: 0.0, f_mix: 0.0, p_mix: 0.0 };
        prop_assert_eq!(reduction_ratios(&sym).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn ratio_grows_with_lambda(costs in prop::collection::vec(1.0f64..1e6, 2..8), a in 0.0f64..0.9, d in 0.01f64..0.09) {
        let r = |lambda| reduction_ratios(&StageCostSymbols {
            f: costs.clone(), p: costs.clone(), lambda, f_mix: 0.0, p_mix: 0.0,
        }).unwrap().0;
        prop_assert!(r(a + d) >= r(a));
    }

    #[test]
    fn ghost_stage_never_costs_more(n in 2usize..7, c in 4usize..48, lambda in 0.1f64..0.8, stride in 1usize..3) {
        let spec = GGhostStageSpec::new(n, lambda, c, c, stride);
        prop_assume!(spec.validate().is_ok());
        let ghost = analyze(&build_gghost_stage(&spec).unwrap(), (16, 16)).unwrap();
        let plain = analyze(&build_gghost_stage(&spec.plain()).unwrap(), (16, 16)).unwrap();
        prop_assert!(ghost.total_params <= plain.total_params);
    }
}
