use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mbrl_core::envs::Task;
use mbrl_core::exec::Execution;
use mbrl_core::harness::{
    aggregate, dump_trajectories, emit_csv, eval_starts, initial_observation_gaussian, random_policy_baseline,
    reference_policy, run_suite, sample_trajectories, ExperimentConfig, Manifest, ModelKind, RunRecord,
};
use mbrl_core::models::{load_model, read_checkpoint, save_model, write_checkpoint};
use mbrl_core::policy::RbfPolicy;
use mbrl_core::rollout::Propagation;

#[derive(Parser)]
#[command(name = "mbrl", version, about = "Model-based policy search benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the learning loop for every repeat and write the quantile summary.
    Run(RunArgs),
    /// Optimize a policy directly on the true environment.
    Reference(ReferenceArgs),
    /// Sample model trajectories of a trained policy and test their normality.
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long)]
    task: Option<Task>,
    /// TOML file mirroring the experiment configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named setup; `table1` is the only one and the default.
    #[arg(long, default_value = "table1")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Adam steps per policy-optimization restart.
    #[arg(long)]
    policy_steps: Option<usize>,
    #[arg(long)]
    policy_restarts: Option<usize>,
    /// Run everything on the calling thread.
    #[arg(long)]
    sequential: bool,
    /// Log every stage of the learning loop to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    prop: Option<Propagation>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReferenceArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Model checkpoint written by `run`.
    #[arg(long)]
    model_checkpoint: PathBuf,
    /// Policy checkpoint written by `run`.
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 5)]
    steps: usize,
    /// Write per-trajectory states, normality table and histogram.
    #[arg(long)]
    dump_trajectories: bool,
    #[arg(long)]
    out: PathBuf,
}

fn build_config(a: &ConfigArgs) -> Result<ExperimentConfig> {
    if a.preset != "table1" {
        bail!("unknown preset {:?}", a.preset);
    }
    let mut cfg = match (&a.config, a.task) {
        (Some(path), task) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg = ExperimentConfig::from_toml(&text)?;
            if task.is_some_and(|t| t != cfg.task) {
                bail!("--task disagrees with the config file");
            }
            cfg
        }
        (None, Some(task)) => ExperimentConfig::preset(task),
        (None, None) => bail!("either --task or --config is required"),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.particles {
        cfg.n_particles = n;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(n) = a.policy_steps {
        cfg.policy_optim.max_steps = n;
    }
    if let Some(n) = a.policy_restarts {
        cfg.policy_optim.restarts = n;
    }
    if a.sequential {
        cfg.exec = Execution::Sequential;
    }
    cfg.verbose |= a.verbose;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = build_config(&args.cfg)?;
    if let Some(m) = args.model {
        cfg.model = m;
    }
    if let Some(p) = args.prop {
        cfg.propagation = p;
    }
    if let Some(r) = args.repeats {
        cfg.repeats = r;
    }
    cfg.validate()?;
    fs::create_dir_all(&args.out)?;
    let stem = cfg.stem();
    let outcomes = run_suite(&cfg)?;
    let records: Vec<RunRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    let mut outputs = vec![format!("{stem}.csv"), format!("{stem}_records.json")];
    let summary = aggregate(&records)?;
    emit_csv(&summary, &args.out.join(&outputs[0]))?;
    write_json(&args.out.join(&outputs[1]), &records)?;
    for (r, o) in outcomes.iter().enumerate() {
        let policy = format!("{stem}_r{r}_policy.json");
        write_checkpoint(&args.out.join(&policy), &o.policy)?;
        outputs.push(policy);
        if let Some(m) = &o.model {
            let model = format!("{stem}_r{r}_model.json");
            save_model(&args.out.join(&model), m)?;
            outputs.push(model);
        }
    }
    Manifest::new(&cfg, &records, outputs).write(&args.out.join(format!("{stem}_manifest.json")))?;
    for r in &records {
        if let Some(f) = &r.failure {
            eprintln!("repeat {}: {f}", r.repeat);
        }
    }
    if let Some(last) = summary.last() {
        println!(
            "{stem}: iteration {} samples {} median {} q25 {} q75 {}",
            last.iteration, last.samples, last.median, last.q25, last.q75
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ReferenceReport {
    task: Task,
    seed: u64,
    eval_horizon: usize,
    reference_avg_reward: f64,
    random_avg_reward: f64,
    reference_cost: f64,
}

fn reference(args: ReferenceArgs) -> Result<()> {
    let cfg = build_config(&args.cfg)?;
    fs::create_dir_all(&args.out)?;
    let out = reference_policy(&cfg, &cfg.policy_optim)?;
    let starts = eval_starts(&cfg.env, cfg.n_eval_starts, cfg.seed);
    let random = random_policy_baseline(&cfg.env, &starts, cfg.eval_horizon, cfg.seed)?;
    let report = ReferenceReport {
        task: cfg.task,
        seed: cfg.seed,
        eval_horizon: cfg.eval_horizon,
        reference_avg_reward: out.eval_avg_reward,
        random_avg_reward: random,
        reference_cost: out.cost,
    };
    write_json(&args.out.join(format!("{}_reference.json", cfg.task)), &report)?;
    write_checkpoint(&args.out.join(format!("{}_reference_policy.json", cfg.task)), &out.policy)?;
    println!("{}: reference {} random {}", cfg.task, out.eval_avg_reward, random);
    Ok(())
}

fn diagnose(args: DiagnoseArgs) -> Result<()> {
    let cfg = build_config(&args.cfg)?;
    let model = load_model(&args.model_checkpoint)?;
    let policy: RbfPolicy = read_checkpoint(&args.policy)?;
    let init = initial_observation_gaussian(&cfg.env, cfg.init_moment_samples, cfg.seed)?;
    let tr = sample_trajectories(&model, &policy, &cfg.env, &init, args.samples, args.steps, cfg.seed, cfg.exec)?;
    let rows = if args.dump_trajectories {
        dump_trajectories(&tr, &args.out)?
    } else {
        mbrl_core::harness::normality_table(&tr)
    };
    let worst = rows.iter().min_by(|a, b| a.p_value.total_cmp(&b.p_value));
    if let Some(w) = worst {
        println!("smallest normality p-value {} (t {}, component {}, JB {})", w.p_value, w.t, w.component, w.jb);
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Reference(a) => reference(a),
        Command::Diagnose(a) => diagnose(a),
    }
}
