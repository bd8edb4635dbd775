//! Acceptance report: one PASS/FAIL line per criterion, repeated as a summary
//! block at the end. Exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use distillkit_cli::commands::{cmd_ablate, cmd_eval, cmd_report, cmd_train};
use distillkit_cli::{EvalArgs, ReportArgs, RunArgs};
use distillkit_oracles::{counting, loss, split, stage, topk, training, Outcome};

const MINUTE: Duration = Duration::from_secs(60);
const ABLATION_RUN_BUDGET: Duration = Duration::from_secs(10 * 60);
const END_TO_END_BUDGET: Duration = Duration::from_secs(15 * 60);

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn run_args(out: &Path, seed: Option<u64>) -> RunArgs {
    RunArgs {
        config: desk_config(),
        seed,
        out: Some(out.to_path_buf()),
        input_hw: None,
        dataset_root: None,
    }
}

fn within(budget: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let detail = f()?;
    let took = start.elapsed();
    if took > budget {
        return Err(format!("{detail}; took {took:.1?}, budget {budget:?}"));
    }
    Ok(detail)
}

fn loss_grid() -> Outcome {
    within(MINUTE, loss::check_loss_grid)
}

fn gradients() -> Outcome {
    within(MINUTE, || loss::check_gradients(50, 0xfd))
}

fn decomposition() -> Outcome {
    loss::check_decomposition(1000, 4)
}

fn stage_model() -> Outcome {
    within(MINUTE, stage::check_stage_ratios)
}

fn split_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    split::check_split(a.path(), b.path(), 42)
}

fn training_invariants() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let parts = [
        training::check_frozen_teacher()?,
        training::check_zero_lr()?,
        training::check_reproducible_history(a.path(), b.path())?,
    ];
    Ok(parts.join("; "))
}

/// Each seed (teacher, plain student, distilled student) is timed on its
/// own; a final pass over the finished runs assembles the three-seed table.
fn desk_ablation() -> Outcome {
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut slowest = Duration::ZERO;
    for seed in [0, 1, 2] {
        let start = Instant::now();
        cmd_ablate(&run_args(out.path(), Some(seed))).map_err(|e| e.to_string())?;
        let took = start.elapsed();
        if took > ABLATION_RUN_BUDGET {
            return Err(format!("seed {seed} took {took:.1?}"));
        }
        slowest = slowest.max(took);
    }
    let summary = cmd_ablate(&run_args(out.path(), None)).map_err(|e| e.to_string())?;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/");
    let detail = format!(
        "Top-1 teacher {} plain {} distilled {}; distilled >= plain on {}/3 seeds; slowest seed {slowest:.1?}",
        fmt(&summary.rows[0].top1),
        fmt(&summary.rows[1].top1),
        fmt(&summary.rows[2].top1),
        summary.dkd_not_worse
    );
    if summary.rows[1].params != summary.rows[2].params {
        return Err(format!("student rows differ in params; {detail}"));
    }
    if summary.dkd_not_worse < 2 {
        return Err(detail);
    }
    Ok(detail)
}

const RUN_ARTIFACTS: [&str; 16] = [
    "config.toml",
    "manifest.json",
    "best.ckpt",
    "last.ckpt",
    "history.csv",
    "report.json",
    "report.txt",
    "report.csv",
    "curves.svg",
    "run.json",
    "eval.json",
    "eval.txt",
    "teacher/best.ckpt",
    "teacher/last.ckpt",
    "teacher/history.csv",
    "teacher/report.json",
];

fn end_to_end() -> Outcome {
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    within(END_TO_END_BUDGET, || {
        let args = run_args(out.path(), None);
        let summary = cmd_train(&args).map_err(|e| e.to_string())?;
        let eval = cmd_eval(&EvalArgs {
            run: args.clone(),
            checkpoint: None,
        })
        .map_err(|e| e.to_string())?;
        let report = cmd_report(&ReportArgs {
            runs: vec![summary.run_dir.clone()],
            out: Some(out.path().to_path_buf()),
        })
        .map_err(|e| e.to_string())?;
        let mut missing: Vec<String> = RUN_ARTIFACTS
            .iter()
            .map(|f| summary.run_dir.join(f))
            .chain(["report.txt", "report.csv", "curves_desk-seed0.svg"].map(|f| report.dir.join(f)))
            .filter(|p| std::fs::metadata(p).map(|m| m.len() == 0).unwrap_or(true))
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            missing.sort();
            return Err(format!("missing or empty: {}", missing.join(", ")));
        }
        Ok(format!(
            "student Top-1 {:.2}%, eval Top-1 {:.2}%, {} artifacts",
            summary.record.report.top1 * 100.0,
            eval.top1 * 100.0,
            RUN_ARTIFACTS.len() + 3
        ))
    })
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("loss oracle grid", loss_grid),
        ("gradient check", gradients),
        ("decomposition identity", decomposition),
        ("stage cost model agreement", stage_model),
        ("counting closed forms", counting::check_counting),
        ("top-k metric equivalence", || topk::check_top_k(100, 6)),
        ("split determinism", split_determinism),
        ("training invariants", training_invariants),
        ("desk-scale ablation", desk_ablation),
        ("end-to-end smoke", end_to_end),
    ];
    let mut lines = Vec::new();
    for (name, f) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let line = match result {
            Ok(detail) => format!("PASS  {name:<28} {detail} [{took:.1?}]"),
            Err(reason) => format!("FAIL  {name:<28} {reason} [{took:.1?}]"),
        };
        println!("{line}");
        lines.push(line);
    }
    let failed = lines.iter().filter(|l| l.starts_with("FAIL")).count();
    println!("\nacceptance summary");
    for l in &lines {
        println!("{l}");
    }
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
