use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eda_core::pipeline::{paths, Manifest, Run, Stage};
use eda_core::{Error, Result};

/// Root under which run directories are created when --run-dir is absent.
const OUT_ROOT_VAR: &str = "EDA_OUT_ROOT";

#[derive(Parser)]
#[command(name = "eda", version, about = "Draft-model adaptation laboratory for speculative decoding")]
struct Cli {
    /// Run directory; defaults to $EDA_OUT_ROOT/<manifest name> (EDA_OUT_ROOT defaults to ./runs)
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Suppress progress lines on stderr
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate base, domain, evaluation and general-prompt corpora
    GenCorpus(ManifestArgs),
    /// Train the base target on the base corpus
    TrainTarget(ManifestArgs),
    /// Fine-tune the base target on the domain corpus
    FinetuneTarget(ManifestArgs),
    /// Distil the base draft from the base target
    PretrainDraft(ManifestArgs),
    /// Complete domain and general prompts with the fine-tuned target, storing hidden states
    Selfgen(ManifestArgs),
    /// Score self-generated samples against the general reference and keep the budgeted top share
    ScoreSelect(ManifestArgs),
    /// Adapt the draft: full fine-tuning, EDA on ground truth, EDA on the selected subset
    Adapt(ManifestArgs),
    /// Acceptance length and speedup proxy for every method over the K x T grid
    Evaluate(ManifestArgs),
    /// Budget sweep over fractions and selection strategies
    Sweep(ManifestArgs),
    /// Write metrics.csv and plotdata.json
    Report(ManifestArgs),
    /// Every stage for base text -> arithmetic
    PresetMathTransfer(ManifestArgs),
    /// Every stage for base text -> bracket code
    PresetCodeTransfer(ManifestArgs),
}

#[derive(Args, Clone, Default)]
struct ManifestArgs {
    /// Named preset: math-transfer, code-transfer or smoke [default: math-transfer]
    #[arg(long, conflicts_with = "manifest")]
    preset: Option<String>,
    /// Manifest JSON file instead of a preset
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Global seed every stage derives from [preset: 20240601]
    #[arg(long)]
    seed: Option<u64>,
    /// Base corpus size [preset: 8000]
    #[arg(long)]
    base_size: Option<usize>,
    /// Domain corpus size [preset: 4000]
    #[arg(long)]
    domain_size: Option<usize>,
    /// Evaluation prompts [preset: 500]
    #[arg(long)]
    eval_size: Option<usize>,
    /// Epochs for every training stage [preset: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size for every training stage [preset: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate for every training stage [preset: 0.001, adaptation 0.003]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Weight of the hidden-state matching term in draft training [preset: 0.1]
    #[arg(long)]
    lambda_reg: Option<f64>,
    /// Epochs for draft adaptation only [preset: 20]
    #[arg(long)]
    adapt_epochs: Option<usize>,
    /// Share of the self-generated set kept for selected adaptation [preset: 0.5]
    #[arg(long)]
    budget_fraction: Option<f64>,
    /// Complete speculative rounds per evaluation cell [preset: 500]
    #[arg(long)]
    min_rounds: Option<usize>,
}

impl ManifestArgs {
    fn has_overrides(&self) -> bool {
        self.preset.is_some()
            || self.manifest.is_some()
            || self.seed.is_some()
            || self.base_size.is_some()
            || self.domain_size.is_some()
            || self.eval_size.is_some()
            || self.epochs.is_some()
            || self.batch_size.is_some()
            || self.learning_rate.is_some()
            || self.lambda_reg.is_some()
            || self.adapt_epochs.is_some()
            || self.budget_fraction.is_some()
            || self.min_rounds.is_some()
    }

    fn build(&self, default_preset: &str) -> Result<Manifest> {
        let mut m = match &self.manifest {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            }
            None => Manifest::preset(self.preset.as_deref().unwrap_or(default_preset))?,
        };
        if let Some(s) = self.seed {
            m.seed = s;
        }
        if let Some(n) = self.base_size {
            m.sizes.base = n;
        }
        if let Some(n) = self.domain_size {
            m.sizes.domain = n;
        }
        if let Some(n) = self.eval_size {
            m.sizes.eval = n;
        }
        for cfg in [&mut m.train_target, &mut m.finetune_target, &mut m.pretrain_draft, &mut m.adapt] {
            if let Some(e) = self.epochs {
                cfg.epochs = e;
            }
            if let Some(b) = self.batch_size {
                cfg.batch_size = b;
            }
            if let Some(lr) = self.learning_rate {
                cfg.learning_rate = lr;
            }
            if let Some(l) = self.lambda_reg {
                cfg.lambda_reg = l;
            }
        }
        if let Some(e) = self.adapt_epochs {
            m.adapt.epochs = e;
        }
        if let Some(f) = self.budget_fraction {
            m.budget_fraction = f;
        }
        if let Some(r) = self.min_rounds {
            m.eval.min_rounds = r;
        }
        m.validate()?;
        Ok(m)
    }
}

fn run_dir(explicit: Option<&Path>, name: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| "runs".into());
            root.join(name)
        }
    }
}

/// An existing run is reused as-is unless manifest flags were given.
fn bind(cli: &Cli, args: &ManifestArgs, default_preset: &str) -> Result<Run> {
    if !args.has_overrides() {
        if let Some(dir) = &cli.run_dir {
            if dir.join(paths::MANIFEST).exists() {
                return Run::open(dir);
            }
        }
    }
    let manifest = args.build(default_preset)?;
    let dir = run_dir(cli.run_dir.as_deref(), &manifest.name);
    Run::create(&dir, manifest)
}

fn execute(cli: &Cli) -> Result<()> {
    let (stage, args, preset) = match &cli.command {
        Command::GenCorpus(a) => (Some(Stage::GenCorpus), a, "math-transfer"),
        Command::TrainTarget(a) => (Some(Stage::TrainTarget), a, "math-transfer"),
        Command::FinetuneTarget(a) => (Some(Stage::FinetuneTarget), a, "math-transfer"),
        Command::PretrainDraft(a) => (Some(Stage::PretrainDraft), a, "math-transfer"),
        Command::Selfgen(a) => (Some(Stage::Selfgen), a, "math-transfer"),
        Command::ScoreSelect(a) => (Some(Stage::ScoreSelect), a, "math-transfer"),
        Command::Adapt(a) => (Some(Stage::Adapt), a, "math-transfer"),
        Command::Evaluate(a) => (Some(Stage::Evaluate), a, "math-transfer"),
        Command::Sweep(a) => (Some(Stage::Sweep), a, "math-transfer"),
        Command::Report(a) => (Some(Stage::Report), a, "math-transfer"),
        Command::PresetMathTransfer(a) => (None, a, "math-transfer"),
        Command::PresetCodeTransfer(a) => (None, a, "code-transfer"),
    };
    let mut run = bind(cli, args, preset)?;
    run.verbose = !cli.quiet;
    match stage {
        Some(s) => run.run_stage(s)?,
        None => run.run_all()?,
    }
    println!("ok run_dir={} manifest_hash={}", run.root().display(), run.manifest_hash());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            let stages: Vec<_> = Stage::ALL.iter().map(|s| s.name()).collect();
            eprintln!(
                "error class=usage message={first:?} stages={},preset-math-transfer,preset-code-transfer",
                stages.join(",")
            );
            return ExitCode::from(2);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error class={} message={:?}", e.class(), e.to_string());
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}
