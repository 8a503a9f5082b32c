use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use superpose::config::{CliConfig, ConfigLayer, MergeSettings, TaskEntry};
use superpose::report::{ablation_report, method_config, preservation_report};
use superpose::roles::RoleRules;
use superpose::store::Checkpoint;
use superpose::synth::{write_synthetic_transformer, TransformerSpec};
use superpose::{classify, merge_checkpoints, Error, Result};
use superpose_core::{AblationSpec, AblationTarget};

#[derive(Parser)]
#[command(name = "superpose", version, about = "Merge fine-tuned checkpoints by task-feature superposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge task checkpoints into the base checkpoint.
    Merge {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print tensor names, shapes, dtypes and merge roles.
    Inspect {
        path: PathBuf,
        /// Config file whose [roles] section is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare how well each method preserves task features.
    PreserveReport {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated methods: stf, average, ta.
        #[arg(long, value_delimiter = ',', default_value = "stf,average,ta")]
        methods: Vec<String>,
        #[arg(long, default_value = "preservation.json")]
        json: PathBuf,
        #[arg(long, default_value = "preservation.csv")]
        csv: PathBuf,
    },
    /// Merge with singular triplets removed and measure the damage.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// smallest or largest; repeatable.
        #[arg(long, default_values_t = vec!["smallest".to_string()])]
        target: Vec<String>,
        /// Fraction of each task's triplets to remove; repeatable.
        #[arg(long, default_values_t = vec![0.5])]
        fraction: Vec<f64>,
        #[arg(long, default_value = "ablation.json")]
        json: PathBuf,
        #[arg(long, default_value = "ablation.csv")]
        csv: PathBuf,
    },
    /// Write a seeded transformer-shaped base and task checkpoints.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 12)]
        layers: usize,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long, default_value_t = 256)]
        ffn: usize,
        #[arg(long, default_value_t = 128)]
        vocab: usize,
        #[arg(long, default_value_t = 3)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    /// Task checkpoint as `[id=]path`; repeatable, order is kept.
    #[arg(long = "task")]
    tasks: Vec<String>,
    /// Output checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON merge report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, env = "SUPERPOSE_THREADS")]
    threads: Option<usize>,
    /// full-finetune, adapter or large-model.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    rank_tol: Option<f64>,
    #[arg(long)]
    solver_tol: Option<f64>,
    /// task-matrix or fine-tuned-matrix.
    #[arg(long)]
    mode: Option<String>,
    /// none, average or task-arithmetic.
    #[arg(long)]
    baseline: Option<String>,
    /// Treat task files as LoRA adapters.
    #[arg(long)]
    lora: bool,
    #[arg(long)]
    lora_scale: Option<f32>,
    /// Write tensors in the base dtype instead of F32.
    #[arg(long)]
    keep_dtype: bool,
    /// Also report the other merge mode's superposition residuals.
    #[arg(long)]
    compare_modes: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<CliConfig> {
        self.resolve_over(ConfigLayer::default())
    }

    /// Resolves with `defaults` below the config file and the flags.
    fn resolve_over(&self, defaults: ConfigLayer) -> Result<CliConfig> {
        let mut layers = vec![defaults];
        if let Some(path) = &self.config {
            layers.push(ConfigLayer::load(path)?);
        }
        let set = |b: bool| b.then_some(true);
        layers.push(ConfigLayer {
            base: self.base.clone(),
            output: self.out.clone(),
            report: self.report.clone(),
            threads: self.threads,
            tasks: self.tasks.iter().map(|t| TaskEntry::parse(t)).collect(),
            merge: MergeSettings {
                preset: self.preset.clone(),
                eta: self.eta,
                gamma: self.gamma,
                rank_tol: self.rank_tol,
                solver_tol: self.solver_tol,
                mode: self.mode.clone(),
                baseline: self.baseline.clone(),
                lora: set(self.lora),
                lora_scale: self.lora_scale,
                keep_dtype: set(self.keep_dtype),
                compare_modes: set(self.compare_modes),
            },
            roles: None,
        });
        CliConfig::resolve(&layers)
    }
}

fn cmd_merge(run: &RunArgs) -> Result<()> {
    let config = run.resolve()?;
    let out = config.output.clone().ok_or_else(|| Error::Config("no output path given (--out)".into()))?;
    let set = config.open_set()?;
    let report = merge_checkpoints(&set, &config.pipeline_options(), &out)?;
    if let Some(path) = &config.report {
        report.write_json(path)?;
    }
    eprintln!(
        "[superpose] wrote {} ({} tensors merged, {:.2}s)",
        out.display(),
        report.totals.layers_merged,
        report.totals.wall_time_secs
    );
    Ok(())
}

fn cmd_inspect(path: &PathBuf, config: Option<&PathBuf>) -> Result<()> {
    let rules = match config {
        Some(c) => ConfigLayer::load(c)?.roles.unwrap_or_default(),
        None => RoleRules::default(),
    };
    let ck = Checkpoint::open(path)?;
    let roles = classify(&ck, &rules)?;
    let rows: Vec<[String; 4]> = ck
        .infos()
        .map(|(name, info)| {
            [name.to_string(), format!("{:?}", info.shape), info.dtype.as_str().to_string(), roles[name].to_string()]
        })
        .collect();
    let header = ["name", "shape", "dtype", "role"].map(String::from);
    let mut widths = header.clone().map(|h| h.len());
    for r in &rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    for r in std::iter::once(&header).chain(&rows) {
        println!(
            "{:<w0$}  {:<w1$}  {:<w2$}  {}",
            r[0],
            r[1],
            r[2],
            r[3],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2]
        );
    }
    Ok(())
}

/// Diagnostics compare against untrimmed task features, so they default to no
/// trimming.
fn untrimmed() -> ConfigLayer {
    let merge = MergeSettings { preset: Some("large-model".into()), ..MergeSettings::default() };
    ConfigLayer { merge, ..ConfigLayer::default() }
}

fn cmd_preserve_report(run: &RunArgs, methods: &[String], json: &PathBuf, csv: &PathBuf) -> Result<()> {
    let config = run.resolve_over(untrimmed())?;
    let methods =
        methods.iter().map(|m| Ok((m.clone(), method_config(m, config.merge)?))).collect::<Result<Vec<_>>>()?;
    let set = config.open_set()?;
    let report = preservation_report(&set, &config.rules, &methods)?;
    report.write(json, csv)?;
    for m in &report.methods {
        eprintln!(
            "[superpose] {}: mean |preservation| {:.6e} over {} triplets",
            m.method, m.mean_abs_preservation, m.triplets
        );
    }
    Ok(())
}

fn cmd_ablate(run: &RunArgs, targets: &[String], fractions: &[f64], json: &PathBuf, csv: &PathBuf) -> Result<()> {
    let config = run.resolve_over(untrimmed())?;
    let mut specs = Vec::new();
    for t in targets {
        let target: AblationTarget = t.parse()?;
        for f in fractions {
            specs.push(AblationSpec::new(target, *f)?);
        }
    }
    let set = config.open_set()?;
    let report = ablation_report(&set, &config.rules, config.merge, &specs)?;
    report.write(json, csv)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Merge { run } => cmd_merge(&run),
        Command::Inspect { path, config } => cmd_inspect(&path, config.as_ref()),
        Command::PreserveReport { run, methods, json, csv } => cmd_preserve_report(&run, &methods, &json, &csv),
        Command::Ablate { run, target, fraction, json, csv } => cmd_ablate(&run, &target, &fraction, &json, &csv),
        Command::Synth { dir, layers, hidden, ffn, vocab, tasks, seed } => {
            let spec = TransformerSpec { layers, hidden, ffn, vocab, tasks, seed, ..TransformerSpec::default() };
            let (base, tasks) = write_synthetic_transformer(&dir, &spec)?;
            println!("{}", base.display());
            for t in tasks {
                println!("{}", t.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("superpose: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
