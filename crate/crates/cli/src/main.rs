use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use tgda_core::data::{generate_synthetic_fgir, Dataset, Split, SyntheticSpec};
use tgda_core::gradsuite::{self, DEFAULT_EPS, DEFAULT_TOL};
use tgda_core::models::{count_flops, fold_batch_norms, fold_check, preset, Model};
use tgda_core::pipeline::{
    ablation_csv, evaluate, resolve_config, resolve_layered, run_ablation, train_student, train_teacher, Checkpoint,
    RunOutput, Stage, TrainConfig,
};
use tgda_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tgda", version, about = "Two-stage teacher-guided distillation for fine-grained recognition")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON config file layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override applied after the config file, e.g. `optimizer.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic fine-grained benchmark to a folder of PNGs.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the attention teacher.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: train a student against a frozen teacher checkpoint.
    TrainStudent {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for `--set teacher_checkpoint=PATH`.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the four-row component ablation.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        teacher_config: Option<PathBuf>,
        #[arg(long = "teacher-set", value_name = "KEY=VALUE")]
        teacher_set: Vec<String>,
        #[arg(long)]
        student_config: Option<PathBuf>,
        #[arg(long = "student-set", value_name = "KEY=VALUE")]
        student_set: Vec<String>,
        /// Column label in the output table; defaults to the data folder name.
        #[arg(long)]
        dataset_name: Option<String>,
    },
    /// Parameter count and FLOPs of an architecture preset.
    Stats {
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 100)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        input: usize,
        /// Also report the batch-norm-folded graph.
        #[arg(long)]
        folded: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold batch norms of a preset and compare logits with the original.
    FoldCheck {
        #[arg(long, default_value = "vitfs_t")]
        arch: String,
        #[arg(long, default_value_t = 100)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        input: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Resolves a training config, forcing the stage the subcommand implies.
fn train_config(stage: Stage, file: Option<&Path>, set: &[String]) -> Result<TrainConfig> {
    let doc = file.map(read_json).transpose()?;
    let name = serde_json::to_value(stage)?;
    if let Some(given) = doc.as_ref().and_then(|d| d.get("stage")) {
        if *given != name {
            return Err(Error::Config(format!("config stage {given} conflicts with the subcommand ({name})")));
        }
    }
    let mut overrides = vec![format!("stage={name}")];
    overrides.extend_from_slice(set);
    resolve_config(doc, &overrides)
}

fn print_run(run: &RunOutput) {
    let best = run.best_epoch();
    match run.test_record() {
        Some(t) => println!("best epoch {best}: test top1 {:.4} ce {:.4}", t.top1, t.loss_ce),
        None => println!("best epoch {best}"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let doc = cfg.config.as_deref().map(read_json).transpose()?;
            let spec: SyntheticSpec = resolve_layered(&SyntheticSpec::default(), doc, &cfg.set)?;
            let manifest = generate_synthetic_fgir(&spec, &out)?;
            write_json(&out.join("config.json"), &spec)?;
            println!("wrote {} images in {} classes to {}", manifest.samples.len(), manifest.num_classes(), out.display());
        }
        Command::TrainTeacher { cfg, data, out } => {
            let c = train_config(Stage::Teacher, cfg.config.as_deref(), &cfg.set)?;
            let ds = Dataset::load(&data)?;
            print_run(&train_teacher(&c, &ds, Some(&out))?);
        }
        Command::TrainStudent { cfg, data, out, teacher } => {
            let mut set = cfg.set.clone();
            if let Some(t) = teacher {
                set.push(format!("teacher_checkpoint={}", serde_json::to_string(&t)?));
            }
            let c = train_config(Stage::Student, cfg.config.as_deref(), &set)?;
            let ds = Dataset::load(&data)?;
            print_run(&train_student(&c, &ds, Some(&out))?);
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let split = Split::parse(&split)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = Dataset::load(&data)?;
            let record = evaluate(&ckpt, &ds, split)?;
            println!("{}", serde_json::to_string(&record)?);
            if let Some(dir) = out {
                write_json(&dir.join("eval.json"), &record)?;
                write_json(
                    &dir.join("config.json"),
                    &json!({"checkpoint": checkpoint, "data": data, "split": split}),
                )?;
            }
        }
        Command::Ablate {
            data,
            out,
            teacher_config,
            teacher_set,
            student_config,
            student_set,
            dataset_name,
        } => {
            let t = train_config(Stage::Teacher, teacher_config.as_deref(), &teacher_set)?;
            let mut s_set = vec![format!(
                "teacher_checkpoint={}",
                serde_json::to_string(tgda_core::pipeline::ablation::IN_MEMORY_TEACHER)?
            )];
            s_set.extend(student_set);
            let s = train_config(Stage::Student, student_config.as_deref(), &s_set)?;
            let ds = Dataset::load(&data)?;
            let name = dataset_name.unwrap_or_else(|| {
                data.file_name().map_or("dataset".into(), |n| n.to_string_lossy().into_owned())
            });
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            write_json(&out.join("config.json"), &json!({"teacher": t, "student": s, "dataset_name": name}))?;
            let rows = run_ablation(&t, &s, &ds, &name, Some(&out))?;
            print!("{}", ablation_csv(&rows, &name));
        }
        Command::Stats {
            arch,
            classes,
            input,
            folded,
            out,
        } => {
            let spec = preset(&arch, classes, input)?;
            let graph = spec.build()?;
            let flops = count_flops(&graph, &[1, 3, input, input])?;
            let mut report = json!({
                "arch": arch,
                "classes": classes,
                "input": input,
                "params": graph.count_params(),
                "flops": flops.total,
                "norm_ops": flops.norm_ops,
            });
            println!("{arch} classes={classes} input={input}: params {} flops {} norm_ops {}", graph.count_params(), flops.total, flops.norm_ops);
            if folded {
                let model = Model::<f32>::build(&spec, 0)?;
                let (g, p) = fold_batch_norms(&model.graph, &model.params)?;
                let f = count_flops(&g, &[1, 3, input, input])?;
                println!("folded: params {} flops {} norm_ops {}", p.num_params(), f.total, f.norm_ops);
                report["folded"] = json!({"params": p.num_params(), "flops": f.total, "norm_ops": f.norm_ops});
            }
            if let Some(dir) = out {
                write_json(&dir.join("stats.json"), &report)?;
                write_json(&dir.join("config.json"), &json!({"arch": arch, "classes": classes, "input": input, "folded": folded}))?;
            }
        }
        Command::Gradcheck { tol, eps, out } => {
            let results = gradsuite::run_suite(eps, tol);
            for r in &results {
                match &r.failure {
                    None => println!("ok   {:<26} max_rel_err={:.3e}", r.name, r.max_rel_error),
                    Some(msg) => println!("FAIL {:<26} {msg}", r.name),
                }
            }
            if let Some(dir) = out {
                let rows: Vec<Value> = results
                    .iter()
                    .map(|r| json!({"name": r.name, "passed": r.passed(), "max_rel_error": r.max_rel_error, "failure": r.failure}))
                    .collect();
                write_json(&dir.join("gradcheck.json"), &rows)?;
                write_json(&dir.join("config.json"), &json!({"tol": tol, "eps": eps}))?;
            }
            let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            if results.iter().any(|r| !r.passed()) {
                let nan = results.iter().any(|r| r.max_rel_error.is_nan());
                return Err(Error::GradCheck {
                    max_rel_error: if nan { f64::NAN } else { worst },
                    tol,
                });
            }
            println!("{} cases passed, worst relative error {worst:.3e}", results.len());
        }
        Command::FoldCheck {
            arch,
            classes,
            input,
            samples,
            tol,
            seed,
            out,
        } => {
            let spec = preset(&arch, classes, input)?;
            let r = fold_check(&spec, samples, seed)?;
            println!(
                "{arch}: max logit deviation {:.3e} over {samples} inputs; norm ops {} -> {}; flops {} -> {}",
                r.max_logit_deviation, r.norm_ops_before, r.norm_ops_after, r.flops_before, r.flops_after
            );
            if let Some(dir) = out {
                write_json(&dir.join("fold_check.json"), &r)?;
                write_json(
                    &dir.join("config.json"),
                    &json!({"arch": arch, "classes": classes, "input": input, "samples": samples, "tol": tol, "seed": seed}),
                )?;
            }
            if !(r.max_logit_deviation <= tol) {
                return Err(Error::FoldDeviation {
                    deviation: r.max_logit_deviation,
                    tol,
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let msg = e.to_string();
                let first = msg.lines().next().unwrap_or("invalid arguments");
                eprintln!("error class=usage code=1: {}", first.trim_start_matches("error: "));
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            let reason = e.to_string().replace('\n', " ");
            eprintln!("error class={} code={}: {reason}", class.as_str(), class.exit_code());
            ExitCode::from(class.exit_code() as u8)
        }
    }
}
