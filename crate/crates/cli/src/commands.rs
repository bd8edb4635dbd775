use std::fs;
use std::path::{Path, PathBuf};

use distillkit::backbone::{build_gghost_stage, build_student, build_teacher, detect_stages, GGhostStageSpec};
use distillkit::complexity::{analyze, crosscheck_stage};
use distillkit::data::{scan_and_split, synthetic_split, Dataset, DatasetManifest, FolderDataset};
use distillkit::graph::LayerGraph;
use distillkit::metrics::{self, render_table, rows_to_csv, EvalReport, ReportRow};
use distillkit::train::{self, load_checkpoint, read_history, RunPaths, TrainError};
use distillkit::{Network, StudentConfig, TeacherConfig};
use serde::{Deserialize, Serialize};

use crate::ablation::{self, AblationRow};
use crate::config::{DataSource, Overrides, RunConfig};
use crate::plot::write_curves;
use crate::{AnalyzeArgs, Builtin, CliError, EvalArgs, ReportArgs, RunArgs};

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(m) => CliError::Usage(m),
        other => runtime(other),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn hw_arg(v: &Option<Vec<usize>>) -> Result<Option<(usize, usize)>, CliError> {
    match v.as_deref() {
        None => Ok(None),
        Some([h, w]) if *h > 0 && *w > 0 => Ok(Some((*h, *w))),
        Some(other) => Err(CliError::Usage(format!("--input-hw needs two positive integers, got {other:?}"))),
    }
}

/// What was used as data, persisted as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum RunManifest {
    Synthetic {
        classes: Vec<String>,
        seed: u64,
        input_hw: (usize, usize),
        train_samples: usize,
        test_samples: usize,
    },
    Folder {
        train: DatasetManifest,
        test: DatasetManifest,
    },
}

/// A resolved configuration with its datasets.
pub struct Prepared {
    pub cfg: RunConfig,
    pub out_root: PathBuf,
    pub run_dir: PathBuf,
    pub train: Box<dyn Dataset>,
    pub test: Box<dyn Dataset>,
    pub classes: Vec<String>,
    pub manifest: RunManifest,
}

pub fn prepare(args: &RunArgs) -> Result<Prepared, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply(&Overrides {
        seed: args.seed,
        out: args.out.clone(),
        input_hw: hw_arg(&args.input_hw)?,
        dataset_root: args.dataset_root.clone(),
    });
    cfg.validate()?;
    let d = &cfg.data;
    let (train, test, classes, manifest): (Box<dyn Dataset>, Box<dyn Dataset>, Vec<String>, RunManifest) = match d.source {
        DataSource::Synthetic => {
            let s = &d.synthetic;
            let (train, test) = synthetic_split(s.classes, s.train_per_class, s.test_total, d.input_hw, d.seed)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let classes = train.classes.clone();
            let manifest = RunManifest::Synthetic {
                classes: classes.clone(),
                seed: d.seed,
                input_hw: d.input_hw,
                train_samples: train.len(),
                test_samples: test.len(),
            };
            (Box::new(train), Box::new(test), classes, manifest)
        }
        DataSource::Folder => {
            let root = d.root.as_ref().expect("validated");
            let (train_m, test_m) =
                scan_and_split(root, d.seed, d.split_ratio).map_err(|e| CliError::Usage(e.to_string()))?;
            if test_m.is_empty() {
                return Err(CliError::Usage(format!(
                    "split ratio {} leaves no test images under {}",
                    d.split_ratio,
                    root.display()
                )));
            }
            let classes = train_m.classes.clone();
            let manifest = RunManifest::Folder {
                train: train_m.clone(),
                test: test_m.clone(),
            };
            let wrap = |m: DatasetManifest| FolderDataset {
                manifest: m,
                input_hw: d.input_hw,
                norm: d.normalization.clone(),
            };
            let (train, test) = (wrap(train_m), wrap(test_m));
            if d.preload {
                (
                    Box::new(train.preload().map_err(runtime)?) as Box<dyn Dataset>,
                    Box::new(test.preload().map_err(runtime)?) as Box<dyn Dataset>,
                    classes,
                    manifest,
                )
            } else {
                (Box::new(train), Box::new(test), classes, manifest)
            }
        }
    };
    cfg.student.num_classes = classes.len();
    cfg.teacher.num_classes = classes.len();
    let out_root = cfg.out_root(args.out.as_deref());
    let run_dir = out_root.join(cfg.run_id());
    Ok(Prepared {
        cfg,
        out_root,
        run_dir,
        train,
        test,
        classes,
        manifest,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub provenance: String,
    pub report: EvalReport,
    /// Relative to the run directory.
    pub history: String,
    pub teacher_report: Option<EvalReport>,
}

impl RunRecord {
    pub fn load(run_dir: &Path) -> Result<Self, CliError> {
        let path = run_dir.join("run.json");
        let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

pub fn provenance(hash: &str) -> String {
    format!("distillkit-cli {}+cfg.{}", env!("CARGO_PKG_VERSION"), &hash[..12])
}

fn student_network(cfg: &StudentConfig, seed: u64) -> Result<Network, CliError> {
    let graph = build_student(cfg).map_err(|e| CliError::Usage(format!("config field student: {e}")))?;
    Network::new(graph, seed).map_err(runtime)
}

fn teacher_network(cfg: &TeacherConfig, seed: u64) -> Result<Network, CliError> {
    let graph = build_teacher(cfg).map_err(|e| CliError::Usage(format!("config field teacher: {e}")))?;
    Network::new(graph, seed).map_err(runtime)
}

/// Load the configured teacher checkpoint or pretrain one in `dir`.
fn obtain_teacher(p: &Prepared, cfg: &RunConfig, dir: &Path) -> Result<(Network, EvalReport), CliError> {
    let hw = cfg.data.input_hw;
    let tcfg = cfg.teacher_train_config();
    if let Some(ck) = &cfg.teacher_train.checkpoint {
        let (_, net): (String, Network) = load_checkpoint(ck).map_err(runtime)?;
        if net.num_classes() != p.classes.len() {
            return Err(CliError::Usage(format!(
                "teacher checkpoint {} has {} classes, dataset has {}",
                ck.display(),
                net.num_classes(),
                p.classes.len()
            )));
        }
        let report =
            metrics::evaluate(&net, &*p.test, &p.classes, hw, tcfg.eval_batch_size).map_err(runtime)?;
        return Ok((net, report));
    }
    let teacher = teacher_network(&cfg.teacher, cfg.train.seed)?;
    log::info!("pretraining teacher for {} epochs", tcfg.epochs);
    let outcome = train::pretrain_teacher(teacher, &*p.train, &*p.test, &p.classes, &tcfg, Some(&RunPaths::new(dir)))
        .map_err(train_error)?;
    let report = metrics::evaluate(&outcome.best, &*p.test, &p.classes, hw, tcfg.eval_batch_size).map_err(runtime)?;
    write_file(&dir.join("report.json"), report.to_json())?;
    Ok((outcome.best, report))
}

/// Outputs of one completed training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub record: RunRecord,
}

fn train_student(
    p: &Prepared,
    cfg: &RunConfig,
    teacher: Option<&Network>,
    dir: &Path,
) -> Result<(EvalReport, Vec<train::EpochRecord>), CliError> {
    let student = student_network(&cfg.student, cfg.train.seed)?;
    let outcome = train::train(teacher, student, &*p.train, &*p.test, &p.classes, &cfg.train, Some(&RunPaths::new(dir)))
        .map_err(train_error)?;
    Ok((outcome.final_report, outcome.state.history))
}

pub fn cmd_train(args: &RunArgs) -> Result<TrainSummary, CliError> {
    let p = prepare(args)?;
    let cfg = &p.cfg;
    let dir = &p.run_dir;
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    write_file(&dir.join("config.toml"), cfg.to_toml())?;
    write_file(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&p.manifest).expect("manifest serializes"),
    )?;

    let teacher = if cfg.train.distill_enabled {
        Some(obtain_teacher(&p, cfg, &dir.join("teacher"))?)
    } else {
        None
    };
    let (report, history) = train_student(&p, cfg, teacher.as_ref().map(|t| &t.0), dir)?;

    let run_id = cfg.run_id();
    let hash = cfg.hash();
    write_file(&dir.join("report.json"), report.to_json())?;
    write_file(&dir.join("report.txt"), report.to_text(&run_id))?;
    write_file(
        &dir.join("report.csv"),
        rows_to_csv(&[report.row(&run_id)]).map_err(runtime)?,
    )?;
    write_curves(&dir.join("curves.svg"), &run_id, &history)?;
    let record = RunRecord {
        run_id: run_id.clone(),
        name: cfg.name.clone(),
        seed: cfg.train.seed,
        provenance: provenance(&hash),
        config_hash: hash,
        report: report.clone(),
        history: "history.csv".into(),
        teacher_report: teacher.map(|t| t.1),
    };
    write_file(
        &dir.join("run.json"),
        serde_json::to_string_pretty(&record).expect("record serializes"),
    )?;
    println!("{}", report.to_text(&run_id));
    println!("run directory: {}", dir.display());
    Ok(TrainSummary {
        run_dir: dir.clone(),
        record,
    })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let p = prepare(&args.run)?;
    let checkpoint = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| RunPaths::new(&p.run_dir).best_checkpoint());
    if !checkpoint.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} not found; run train first",
            checkpoint.display()
        )));
    }
    let (_, net): (String, Network) =
        load_checkpoint(&checkpoint).map_err(|e| CliError::Usage(e.to_string()))?;
    let report = metrics::evaluate(&net, &*p.test, &p.classes, p.cfg.data.input_hw, p.cfg.train.eval_batch_size)
        .map_err(runtime)?;
    let run_id = p.cfg.run_id();
    write_file(&p.run_dir.join("eval.json"), report.to_json())?;
    write_file(&p.run_dir.join("eval.txt"), report.to_text(&run_id))?;
    println!("{}", report.to_text(&run_id));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// Seeds on which distillation matched or beat the plain student.
    pub dkd_not_worse: usize,
}

pub fn cmd_ablate(args: &RunArgs) -> Result<AblationSummary, CliError> {
    let p = prepare(args)?;
    let base = &p.cfg;
    let dir = p.out_root.join(format!("{}-ablate", base.name));
    let seeds = match args.seed {
        Some(s) => vec![s],
        None => base.ablate.seeds.clone(),
    };
    let hw = base.data.input_hw;
    let teacher_params = analyze(&build_teacher(&base.teacher).map_err(runtime)?, hw)
        .map_err(runtime)?
        .total_params;
    let student_params = analyze(&build_student(&base.student).map_err(runtime)?, hw)
        .map_err(runtime)?
        .total_params;
    let mut top1 = [Vec::new(), Vec::new(), Vec::new()];
    for &seed in &seeds {
        let mut cfg = base.clone();
        cfg.train.seed = seed;
        let seed_dir = dir.join(format!("seed{seed}"));
        let (teacher, teacher_report) = obtain_teacher(&p, &cfg, &seed_dir.join("teacher"))?;
        let plain_cfg = RunConfig {
            train: distillkit::TrainConfig {
                distill_enabled: false,
                ..cfg.train.clone()
            },
            ..cfg.clone()
        };
        let (plain, _) = train_student(&p, &plain_cfg, None, &seed_dir.join("student_plain"))?;
        let dkd_cfg = RunConfig {
            train: distillkit::TrainConfig {
                distill_enabled: true,
                ..cfg.train.clone()
            },
            ..cfg.clone()
        };
        let (dkd, _) = train_student(&p, &dkd_cfg, Some(&teacher), &seed_dir.join("student_dkd"))?;
        log::info!(
            "seed {seed}: teacher {:.4} plain {:.4} distilled {:.4}",
            teacher_report.top1,
            plain.top1,
            dkd.top1
        );
        top1[0].push(teacher_report.top1 * 100.0);
        top1[1].push(plain.top1 * 100.0);
        top1[2].push(dkd.top1 * 100.0);
    }
    let [t, plain, dkd] = top1;
    let dkd_not_worse = plain.iter().zip(&dkd).filter(|(a, b)| b >= a).count();
    let rows = vec![
        AblationRow {
            ghost: false,
            dkd: false,
            params: teacher_params,
            top1: t,
        },
        AblationRow {
            ghost: true,
            dkd: false,
            params: student_params,
            top1: plain,
        },
        AblationRow {
            ghost: true,
            dkd: true,
            params: student_params,
            top1: dkd,
        },
    ];
    let mut text = ablation::render(&rows, &seeds);
    text.push_str(&format!(
        "\ndistilled student >= plain student on {dkd_not_worse} of {} seeds\n",
        seeds.len()
    ));
    write_file(&dir.join("ablation.txt"), &text)?;
    write_file(&dir.join("ablation.csv"), ablation::to_csv(&rows)?)?;
    let summary = AblationSummary {
        seeds,
        rows,
        dkd_not_worse,
    };
    write_file(
        &dir.join("ablation.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    print!("{text}");
    Ok(summary)
}

type Built = (LayerGraph, (usize, usize), Option<GGhostStageSpec>);

fn builtin_graph(args: &AnalyzeArgs) -> Result<Built, CliError> {
    let usage = |e: String| CliError::Usage(e);
    let classes = args.classes;
    Ok(match args.builtin.expect("checked by caller") {
        Builtin::Student => {
            let c = StudentConfig {
                num_classes: classes,
                ..StudentConfig::default()
            };
            (build_student(&c).map_err(|e| usage(e.to_string()))?, c.input_hw, None)
        }
        Builtin::Teacher => {
            let c = TeacherConfig {
                num_classes: classes,
                ..TeacherConfig::default()
            };
            (build_teacher(&c).map_err(|e| usage(e.to_string()))?, c.input_hw, None)
        }
        Builtin::DeskStudent => {
            let c = StudentConfig::desk(classes);
            (build_student(&c).map_err(|e| usage(e.to_string()))?, c.input_hw, None)
        }
        Builtin::DeskTeacher => {
            let c = TeacherConfig::desk(classes);
            (build_teacher(&c).map_err(|e| usage(e.to_string()))?, c.input_hw, None)
        }
        Builtin::Stage => {
            let spec = GGhostStageSpec::new(
                args.stage_n,
                args.stage_lambda,
                args.stage_channels,
                args.stage_channels,
                1,
            );
            (build_gghost_stage(&spec).map_err(|e| usage(e.to_string()))?, (56, 56), Some(spec))
        }
    })
}

/// Complexity report text, followed by a crosscheck for every G-Ghost stage.
/// A `--builtin stage` is checked from its spec, so `lambda = 0` is covered too.
pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<String, CliError> {
    let (graph, natural_hw, stage_spec) = match (&args.graph, args.builtin) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let graph = LayerGraph::from_text(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            (graph, (224, 224), None)
        }
        (None, Some(_)) => builtin_graph(args)?,
        (None, None) => return Err(CliError::Usage("give a graph file or --builtin".into())),
    };
    let hw = hw_arg(&args.input_hw)?.unwrap_or(natural_hw);
    if let Some(path) = &args.write {
        write_file(path, graph.to_text())?;
    }
    let report = analyze(&graph, hw).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut out = report.to_text();
    out.push_str(&format!(
        "\nParams (M): {:.2}  FLOPs (M): {:.2}\n",
        report.params_millions(),
        report.flops_millions()
    ));
    let shapes = graph.infer_shapes(hw).map_err(|e| CliError::Usage(e.to_string()))?;
    let inputs = graph.input_indices();
    let stages = match stage_spec {
        Some(spec) => vec![(String::new(), spec)],
        None => detect_stages(&graph),
    };
    for (prefix, spec) in stages {
        let conv = graph.position(&format!("{prefix}block1.conv")).expect("detected");
        let s = shapes[inputs[conv][0]];
        let check = crosscheck_stage(&spec, (s.height, s.width)).map_err(runtime)?;
        let label = if prefix.is_empty() { "stage".to_string() } else { prefix.trim_end_matches('.').to_string() };
        out.push_str(&format!("\n[{label}]\n{}", check.to_text()));
    }
    Ok(out)
}

fn find_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut runs = Vec::new();
    for p in paths {
        if p.join("run.json").is_file() {
            runs.push(p.clone());
        } else if p.is_dir() {
            let mut children: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|c| c.join("run.json").is_file())
                .collect();
            children.sort();
            runs.extend(children);
        }
    }
    runs.dedup();
    if runs.is_empty() {
        return Err(CliError::Usage(format!("no runs found under {paths:?}")));
    }
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub dir: PathBuf,
    pub rows: Vec<ReportRow>,
}

pub fn cmd_report(args: &ReportArgs) -> Result<ReportOutput, CliError> {
    let runs = find_runs(&args.runs)?;
    let mut records = Vec::new();
    for dir in &runs {
        records.push((dir.clone(), RunRecord::load(dir)?));
    }
    records.sort_by(|a, b| {
        (a.1.report.params, &a.1.run_id).cmp(&(b.1.report.params, &b.1.run_id))
    });
    let out_root = match (&args.out, std::env::var_os(crate::config::OUT_ENV).filter(|v| !v.is_empty())) {
        (Some(o), _) => o.clone(),
        (None, Some(env)) => PathBuf::from(env),
        (None, None) => runs[0].parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let dir = out_root.join("report");
    let rows: Vec<ReportRow> = records.iter().map(|(_, r)| r.report.row(&r.run_id)).collect();
    write_file(&dir.join("report.txt"), render_table(&rows))?;
    write_file(&dir.join("report.csv"), rows_to_csv(&rows).map_err(runtime)?)?;
    for (run_dir, r) in &records {
        let history = read_history(&run_dir.join(&r.history)).map_err(runtime)?;
        write_curves(&dir.join(format!("curves_{}.svg", r.run_id)), &r.run_id, &history)?;
    }
    print!("{}", render_table(&rows));
    Ok(ReportOutput { dir, rows })
}

