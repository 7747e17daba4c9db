//! Experiment runner: train the joint or baseline procedures from a JSON
//! config, verify gradients, sweep a config axis, or evaluate a checkpoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use distilda::config::{apply_overrides, ExperimentConfig, Procedure};
use distilda::data::DomainDataset;
use distilda::error::Result;
use distilda::gradcheck;
use distilda::nets::{load_state, save_state, NetworkSpec};
use distilda::trainers::{
    evaluate, final_accuracies, metrics_to_csv, train_baseline, train_mtda, train_stda,
    MetricRecord,
};

#[derive(Parser)]
#[command(name = "distilda", version, about = "Joint distillation and domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Config overrides as dotted `key=value` pairs; bare keys address the
    /// train section.
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
    /// Shorthand for `--override seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training procedure and write metrics, summary, checkpoints.
    Train(RunArgs),
    /// Finite-difference verification of every backward rule.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the config once per value of one axis and aggregate the results.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Dotted config key to vary (e.g. `seed`, `train.epochs`).
        #[arg(long)]
        axis: String,
        /// Comma-separated JSON values for the axis.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Evaluate a saved student checkpoint on the config's datasets.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "override", value_name = "K=V")]
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Gradcheck { instances, seed } => cmd_gradcheck(instances, seed),
        Command::Sweep { run, axis, values } => cmd_sweep(&run, &axis, &values),
        Command::Eval {
            config,
            checkpoint,
            overrides,
        } => cmd_eval(&config, &checkpoint, &overrides),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_with_overrides(args: &RunArgs) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        distilda::Error::Config(format!("cannot read {}: {e}", args.config.display()))
    })?;
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    apply_overrides(&text, &overrides)
}

struct RunOutcome {
    metrics: Vec<MetricRecord>,
    summary: serde_json::Value,
}

fn execute(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    let source = cfg.source.build()?;
    let targets: Vec<DomainDataset> = cfg
        .targets
        .iter()
        .map(|t| t.build())
        .collect::<Result<_>>()?;
    let (teacher_spec, student_spec) = cfg.specs(&source)?;

    let metrics = match cfg.procedure {
        Procedure::Stda | Procedure::Mtda => {
            let refs: Vec<&DomainDataset> = targets.iter().collect();
            let out = if cfg.procedure == Procedure::Stda {
                train_stda(&teacher_spec, &student_spec, &source, refs[0], &cfg.train)?
            } else {
                train_mtda(&teacher_spec, &student_spec, &source, &refs, &cfg.train)?
            };
            save_state(&out.student, &student_spec, &out_dir.join("student.ckpt"))?;
            for (i, teacher) in out.teachers.iter().enumerate() {
                save_state(teacher, &teacher_spec, &out_dir.join(format!("teacher_{i}.ckpt")))?;
            }
            out.metrics
        }
        _ => {
            let ordering = cfg.procedure.baseline().expect("non-joint procedure");
            let out = train_baseline(
                ordering,
                &teacher_spec,
                &student_spec,
                &source,
                &targets[0],
                &cfg.train,
            )?;
            save_state(&out.model, &student_spec, &out_dir.join("student.ckpt"))?;
            if let Some(teacher) = &out.teacher {
                save_state(teacher, &teacher_spec, &out_dir.join("teacher_0.ckpt"))?;
            }
            out.metrics
        }
    };

    let accs = final_accuracies(&metrics);
    let mut summary_accs = serde_json::Map::new();
    for ((model, domain), acc) in &accs {
        summary_accs.insert(format!("{model}/{domain}"), serde_json::json!(acc));
    }
    let summary = serde_json::json!({
        "run_name": cfg.run_name,
        "procedure": cfg.procedure,
        "seed": cfg.train.seed,
        "epochs": cfg.train.epochs,
        "final_accuracy": summary_accs,
    });
    Ok(RunOutcome { metrics, summary })
}

fn write_run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let outcome = execute(cfg, out_dir)?;
    std::fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)? + "\n",
    )?;
    std::fs::write(
        out_dir.join("metrics.csv"),
        metrics_to_csv(&cfg.run_name, &outcome.metrics),
    )?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&outcome.summary)? + "\n",
    )?;
    Ok(outcome)
}

fn cmd_train(args: &RunArgs) -> Result<ExitCode> {
    let cfg = load_with_overrides(args)?;
    let outcome = write_run(&cfg, &args.out)?;
    println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(instances: usize, seed: u64) -> Result<ExitCode> {
    let outcomes = gradcheck::run_all(instances, seed)?;
    let mut failed = false;
    for o in &outcomes {
        let ok = o.max_rel_err < 1e-4;
        failed |= !ok;
        println!(
            "{:<32} instances={:<4} max_rel_err={:.3e} {}",
            o.name,
            o.instances,
            o.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
    }
    Ok(if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn sweep_threads() -> usize {
    std::env::var("DA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn cmd_sweep(run: &RunArgs, axis: &str, values: &[String]) -> Result<ExitCode> {
    if values.is_empty() {
        return Err(distilda::Error::Config("sweep needs at least one value".into()));
    }
    let text = std::fs::read_to_string(&run.config).map_err(|e| {
        distilda::Error::Config(format!("cannot read {}: {e}", run.config.display()))
    })?;
    // Resolve every config up front so a bad value fails before any training.
    let mut jobs = Vec::new();
    for value in values {
        let mut overrides = run.overrides.clone();
        if let Some(seed) = run.seed {
            overrides.push(format!("seed={seed}"));
        }
        overrides.push(format!("{axis}={value}"));
        let safe = value.replace(['/', '\\', '"', ' '], "_");
        let dir = run.out.join(format!("{}_{safe}", axis.replace('.', "_")));
        let cfg = apply_overrides(&text, &overrides)?;
        jobs.push((value.clone(), dir, cfg));
    }
    std::fs::create_dir_all(&run.out)?;

    let threads = sweep_threads().min(jobs.len());
    let results: Vec<Result<RunOutcome>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in jobs.chunks(jobs.len().div_ceil(threads)) {
            handles.push(scope.spawn(move || {
                chunk
                    .iter()
                    .map(|(_, dir, cfg)| write_run(cfg, dir))
                    .collect::<Vec<_>>()
            }));
        }
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });

    // aggregate final accuracies: one row per run, then mean/std per key
    let mut per_key: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut csv = String::from("axis,value,model,domain,metric,value_out\n");
    for ((value, _, _), result) in jobs.iter().zip(results) {
        let outcome = result?;
        for ((model, domain), acc) in final_accuracies(&outcome.metrics) {
            csv.push_str(&format!("{axis},{value},{model},{domain},accuracy,{acc}\n"));
            per_key.entry(format!("{model},{domain}")).or_default().push(acc);
        }
    }
    for (key, accs) in per_key {
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        csv.push_str(&format!("{axis},mean,{key},accuracy,{mean}\n"));
        csv.push_str(&format!("{axis},std,{key},accuracy,{}\n", var.sqrt()));
    }
    std::fs::write(run.out.join("aggregate.csv"), &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(config: &Path, checkpoint: &Path, overrides: &[String]) -> Result<ExitCode> {
    let text = std::fs::read_to_string(config).map_err(|e| {
        distilda::Error::Config(format!("cannot read {}: {e}", config.display()))
    })?;
    let cfg = apply_overrides(&text, overrides)?;
    let source = cfg.source.build()?;
    let (_, student_spec): (NetworkSpec, NetworkSpec) = cfg.specs(&source)?;
    let state = load_state(&student_spec, checkpoint)?;
    let mut report = serde_json::Map::new();
    let mut domains = vec![source];
    for t in &cfg.targets {
        domains.push(t.build()?);
    }
    for domain in &domains {
        if domain.is_labeled() {
            let acc = evaluate(&state, &student_spec, domain)?;
            report.insert(domain.domain_id.clone(), serde_json::json!(acc));
        }
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::Value::Object(report))?
    );
    Ok(ExitCode::SUCCESS)
}
