use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use ardir_core::attacks::save_transcript_csv;
use ardir_core::eval::{AttackKind, ResultsTable};
use ardir_core::harness::config::{apply_overrides, load_config, ExperimentConfig, Override};
use ardir_core::harness::data::ingest_dataset;
use ardir_core::harness::presets::{preset, PRESETS};
use ardir_core::harness::registry::TeacherRegistry;
use ardir_core::harness::report::{append_results, eval_checkpoint, find_manifests, load_for_config, pgd_transcript, report};
use ardir_core::harness::run::{train_all, trained_kind, RunManifest, RunOptions, RunPaths};
use ardir_core::harness::sweep::{run_sweep, SweepSpec};
use ardir_core::checkpoint::Checkpoint;

/// Adversarial robust distillation with internal representations.
#[derive(Parser)]
#[command(name = "ardir", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config.
    Train(TrainArgs),
    /// Run a parameter grid and write a summary CSV and plots.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint and append a row to a results CSV.
    Eval(EvalArgs),
    /// Build a results table from run manifests.
    Report(ReportArgs),
    /// Train a clean or adversarially trained teacher and register it.
    MakeTeacher(MakeTeacherArgs),
}

#[derive(Args, Clone)]
struct ConfigSource {
    /// Experiment config (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config name.
    #[arg(long)]
    preset: Option<String>,
    /// Extra `dotted.key=value` setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Let flags replace values the config already sets.
    #[arg(long = "override")]
    force: bool,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Registered teacher name.
    #[arg(long)]
    teacher: Option<String>,
    #[arg(long)]
    augment: Option<bool>,
    /// Teacher registry directory (default `$ARDIR_TEACHER_DIR` or ./teachers).
    #[arg(long)]
    registry: Option<PathBuf>,
}

impl ConfigSource {
    fn overrides(&self) -> anyhow::Result<Vec<Override>> {
        let mut out: Vec<Override> = self.set.iter().map(|s| Override::parse(s)).collect::<Result<_, _>>()?;
        let mut push = |path: &str, v: Option<toml::Value>| {
            if let Some(v) = v {
                out.push(Override::new(path, v));
            }
        };
        push(
            "seeds",
            self.seeds
                .as_ref()
                .map(|s| toml::Value::Array(s.iter().map(|&v| toml::Value::Integer(v as i64)).collect())),
        );
        push("schedule.epochs", self.epochs.map(|v| (v as i64).into()));
        push("schedule.batch_size", self.batch_size.map(|v| (v as i64).into()));
        push("schedule.learning_rate", self.learning_rate.map(Into::into));
        push("loss.beta", self.beta.map(Into::into));
        push("loss.temperature", self.temperature.map(Into::into));
        push("attack.train.epsilon", self.epsilon.map(Into::into));
        push("attack.eval.epsilon", self.epsilon.map(Into::into));
        push("output_dir", self.output_dir.as_ref().map(|p| p.display().to_string().into()));
        push("teacher.registered", self.teacher.clone().map(Into::into));
        push("augment", self.augment.map(Into::into));
        Ok(out)
    }

    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let overrides = self.overrides()?;
        let (config, ignored) = match (&self.config, &self.preset) {
            (Some(path), _) => {
                let (c, applied) = load_config(path, &overrides, self.force)?;
                (c, applied.ignored)
            }
            (None, Some(name)) => {
                let mut root = toml::Value::try_from(preset(name)?)?;
                let applied = apply_overrides(&mut root, &overrides, self.force)?;
                let c: ExperimentConfig = root.try_into()?;
                c.validate()?;
                (c, applied.ignored)
            }
            (None, None) => bail!("pass --config FILE or --preset NAME ({})", PRESETS.join(", ")),
        };
        for key in ignored {
            eprintln!("note: `{key}` is set by the config; pass --override to replace it");
        }
        Ok(config)
    }

    fn registry(&self) -> TeacherRegistry {
        self.registry.clone().map_or_else(TeacherRegistry::from_env, TeacherRegistry::new)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Ignore saved epoch state and start over.
    #[arg(long)]
    fresh: bool,
    /// Print the resolved config and exit.
    #[arg(long)]
    dump_config: bool,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep spec (TOML).
    spec: PathBuf,
    #[arg(long)]
    fresh: bool,
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: ConfigSource,
    /// Comma-separated attacks: fgsm, pgd, pgd-mr. Empty means clean only.
    #[arg(long, default_value = "fgsm,pgd,pgd-mr")]
    attacks: String,
    /// Also evaluate the train split and print the generalization gap.
    #[arg(long)]
    gap: bool,
    /// Write a per-example PGD transcript of the test split.
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[arg(long, default_value = "results.csv")]
    results: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Manifest files or directories to search.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct MakeTeacherArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Registry name for the best checkpoint.
    #[arg(long)]
    name: String,
    /// Seed whose checkpoint is registered; defaults to the first.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fresh: bool,
    #[arg(long, short)]
    quiet: bool,
}

fn parse_attacks(s: &str) -> anyhow::Result<Vec<AttackKind>> {
    s.split(',')
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(|a| match a {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "pgd-mr" => Ok(AttackKind::PgdMr),
            other => bail!("unknown attack {other:?}; use fgsm, pgd or pgd-mr"),
        })
        .collect()
}

fn run_options(registry: TeacherRegistry, fresh: bool, quiet: bool) -> RunOptions {
    RunOptions {
        registry,
        resume: !fresh,
        max_epochs: None,
        quiet,
    }
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let config = args.source.load()?;
    if args.dump_config {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let options = run_options(args.source.registry(), args.fresh, args.quiet);
    for path in train_all(&config, &options)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> anyhow::Result<()> {
    let (spec, base) = SweepSpec::load(&args.spec)?;
    let registry = args.registry.map_or_else(TeacherRegistry::from_env, TeacherRegistry::new);
    let outcome = run_sweep(&spec, &base, &run_options(registry, args.fresh, args.quiet))?;
    let failed = outcome.runs.iter().filter(|r| r.outcome.is_err()).count();
    println!("{}", outcome.summary_csv.display());
    for p in &outcome.plots {
        println!("{}", p.display());
    }
    if failed > 0 {
        eprintln!("{failed} of {} runs failed; see failures.csv", outcome.runs.len());
    }
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let config = args.source.load()?;
    let attacks = parse_attacks(&args.attacks)?;
    let model = load_for_config(&args.checkpoint, &config)?;
    let splits = ingest_dataset(&config.dataset)?;
    let result = eval_checkpoint(&model, &config, &splits, &attacks, args.seed, args.gap)?;
    let table = ResultsTable {
        rows: vec![result.row],
    };
    print!("{}", table.to_text());
    if let Some(gap) = &result.gap {
        print!("{}", gap.to_text());
    }
    append_results(&args.results, &table)?;
    if let Some(path) = &args.transcript {
        save_transcript_csv(&pgd_transcript(&model, &splits.test, &config, args.seed)?, path)?;
    }
    Ok(())
}

fn report_cmd(args: ReportArgs) -> anyhow::Result<()> {
    let mut manifests = Vec::new();
    for p in &args.paths {
        if p.is_dir() {
            manifests.extend(find_manifests(p)?);
        } else {
            manifests.push(p.clone());
        }
    }
    let table = report(&manifests)?;
    print!("{}", table.to_text());
    if let Some(path) = &args.csv {
        let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        table.write_csv(f)?;
    }
    Ok(())
}

fn make_teacher(args: MakeTeacherArgs) -> anyhow::Result<()> {
    let config = args.source.load()?;
    if config.loss.uses_teacher() {
        bail!("make-teacher trains with the sat loss; got {:?}", config.loss.variant);
    }
    let seed = args.seed.unwrap_or(config.seeds[0]);
    if !config.seeds.contains(&seed) {
        bail!("seed {seed} is not among the config's seeds");
    }
    let config = ExperimentConfig {
        seeds: vec![seed],
        ..config
    };
    let registry = args.source.registry();
    train_all(&config, &run_options(registry.clone(), args.fresh, args.quiet))?;
    let paths = RunPaths::new(&config.output_dir, seed);
    let manifest = RunManifest::load(&paths.manifest())?;
    let ck = Checkpoint::load(paths.best())?;
    let entry = registry.register(&args.name, &ck, trained_kind(&config), Some(manifest.config_hash))?;
    println!(
        "registered {} ({:?}, id {}) in {}",
        args.name,
        entry.kind,
        &entry.checkpoint_id[..12],
        registry.dir().display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report_cmd(a),
        Command::MakeTeacher(a) => make_teacher(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = matches!(e.downcast_ref::<ardir_core::Error>(), Some(ardir_core::Error::Config(_)));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
