//! Desk-scale training smoke runs on the 200-sample synthetic set.

use distillkit::backbone::{build_student, build_teacher, StudentConfig, TeacherConfig};
use distillkit::data::make_synthetic;
use distillkit::nn::Network;
use distillkit::train::{pretrain_teacher, train, TrainConfig};
use distillkit_oracles::training::class_names;

/// Teacher to >= 95% train accuracy, then the distilled student must reach
/// >= 90% train accuracy. The student gets 40 of the allowed 100 epochs.
#[test]
fn teacher_overfits_and_student_follows_on_three_seeds() {
    let data = make_synthetic(4, 50, (32, 32), 0).unwrap();
    let names = class_names();
    for seed in 0..3u64 {
        let teacher = Network::new(build_teacher(&TeacherConfig::desk(4)).unwrap(), seed).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            seed,
            ..TrainConfig::default()
        };
        let t = pretrain_teacher(teacher, &data, &data, &names, &cfg, None).unwrap();
        let t_acc = t.best.clone();
        let t_top1 = t.state.best_top1.unwrap();
        assert!(t_top1 >= 0.95, "seed {seed}: teacher train accuracy {t_top1}");

        let student = Network::new(build_student(&StudentConfig::desk(4)).unwrap(), seed + 100).unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            seed,
            ..TrainConfig::default()
        };
        let s = train(Some(&t_acc), student, &data, &data, &names, &cfg, None).unwrap();
        let reached = s.state.history.iter().position(|h| h.top1 >= 0.9);
        assert!(reached.is_some(), "seed {seed}: student never reached 90% ({:?})", s.state.history.last());
        assert_eq!(s.state.history.len(), 40);
    }
}
