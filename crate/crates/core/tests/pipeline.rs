//! End-to-end runs of every attack on a tiny synthetic corpus.

mod common;

use common::tiny_config;
use tlinv::attack::without_dt::AugmentMode;
use tlinv::eval::Defense;
use tlinv::runner::{self, AttackMethod, SweepAxis};
use tlinv::Error;

#[test]
fn without_dt_reports_both_metrics_and_no_student_queries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), AttackMethod::WithoutDt);
    let prepared = runner::prepare_attack(&cfg).unwrap();
    assert_eq!(prepared.oracle.pre_evaluation_queries(), 0);
    let eval_len = prepared.data.eval.len();
    let r = prepared.evaluate(Defense::None).unwrap().report;
    assert_eq!(r.query_count_pre_eval, 0);
    assert_eq!(r.eval_queries, eval_len);
    assert!(r.mean_inversion_error.is_finite());
    assert!(r.mean_confidence_error.is_some());
    assert_eq!(r.argmax_preservation, 1.0);
    let aug = prepared.augmented.as_ref().unwrap();
    assert_eq!(aug.dataset.len(), 12 * (1 + 2 + 2));
}

#[test]
fn direct_is_the_only_method_that_queries_before_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    for method in [AttackMethod::WithDt, AttackMethod::WithoutDt, AttackMethod::Direct] {
        let cfg = tiny_config(dir.path(), method);
        let r = runner::run_experiment(&cfg).unwrap();
        if method == AttackMethod::Direct {
            assert_eq!(r.query_count_pre_eval, 40, "direct queries the whole query half");
            assert!(r.mean_confidence_error.is_none());
        } else {
            assert_eq!(r.query_count_pre_eval, 0, "{method}");
            assert!(r.mean_confidence_error.is_some());
        }
    }
}

#[test]
fn same_seed_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), AttackMethod::WithoutDt);
    let a = runner::run_experiment(&cfg).unwrap();
    let b = runner::run_experiment(&cfg).unwrap();
    assert_eq!(a.mean_inversion_error, b.mean_inversion_error);
    assert_eq!(a.mean_confidence_error, b.mean_confidence_error);
    assert_eq!(a.argmax_preservation, b.argmax_preservation);
}

#[test]
fn with_dt_without_teacher_data_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), AttackMethod::WithDt);
    cfg.attacker_teacher_per_class = None;
    assert!(matches!(runner::run_experiment(&cfg), Err(Error::Config(_))));
}

#[test]
fn jigsaw_without_auxiliary_data_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), AttackMethod::WithoutDt);
    cfg.augmentation.mode = AugmentMode::Jigsaw;
    assert!(matches!(runner::prepare_attack(&cfg), Err(Error::Config(_))));
}

#[test]
fn jigsaw_with_auxiliary_data_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), AttackMethod::WithoutDt);
    cfg.augmentation.mode = AugmentMode::Jigsaw;
    cfg.augmentation.jigsaw.steps = 5;
    cfg.aux_data = Some(cfg.teacher_data.clone());
    let p = runner::prepare_attack(&cfg).unwrap();
    let aug = p.augmented.as_ref().unwrap();
    assert_eq!(aug.indices_of("jigsaw").len(), 12 * 2);
    assert_eq!(p.oracle.pre_evaluation_queries(), 0);
}

#[test]
fn sweeps_emit_one_report_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), AttackMethod::WithoutDt);
    cfg.output_dir = Some(dir.path().join("out"));
    assert!(matches!(runner::run_sweep(&cfg, SweepAxis::Classes, &[]), Err(Error::Argument(_))));
    let reports = runner::run_sweep(&cfg, SweepAxis::DefenseH, &[4, 2, 1]).unwrap();
    assert_eq!(reports.len(), 3);
    assert!(reports.iter().all(|r| r.argmax_preservation == 1.0));
    let csv = std::fs::read_to_string(dir.path().join("out/sweep-defense_h.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with(runner::CSV_HEADER));
    let reports = runner::run_sweep(&cfg, SweepAxis::Classes, &[2, 4]).unwrap();
    assert_eq!(reports[0].num_classes, 2);
    assert_eq!(reports[1].num_classes, 4);
}

#[test]
fn saved_attack_reloads_with_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    for method in [AttackMethod::WithDt, AttackMethod::WithoutDt, AttackMethod::Direct] {
        let mut cfg = tiny_config(dir.path(), method);
        cfg.cache_dir = Some(dir.path().join("cache"));
        let prepared = runner::prepare_attack(&cfg).unwrap();
        let saved = dir.path().join(format!("attack-{method}"));
        std::fs::create_dir_all(&saved).unwrap();
        prepared.save(&saved).unwrap();
        let before = prepared.evaluate(Defense::TopH { h: 2, renormalize: false }).unwrap().report;
        let reloaded = runner::load_attack(&cfg, &saved).unwrap();
        let after = reloaded.evaluate(Defense::TopH { h: 2, renormalize: false }).unwrap().report;
        assert_eq!(before.mean_inversion_error, after.mean_inversion_error, "{method}");
        assert_eq!(before.mean_confidence_error, after.mean_confidence_error, "{method}");
        assert_eq!(before.query_count_pre_eval, after.query_count_pre_eval, "{method}");
    }
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), AttackMethod::WithoutDt);
    let out = dir.path().join("out");
    cfg.output_dir = Some(out.clone());
    runner::run_experiment(&cfg).unwrap();
    for f in [
        "config.json",
        "training.jsonl",
        "metrics-without_dt-none.json",
        "grid-without_dt-none.png",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
}
