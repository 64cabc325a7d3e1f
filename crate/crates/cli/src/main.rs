use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use il_core::ablate::{self, Suite};
use il_core::backbone::{Backbone, Stage};
use il_core::checkpoint::Checkpoint;
use il_core::config::ExperimentConfig;
use il_core::data::{Dataset, DatasetSpec};
use il_core::eval::{evaluate_domain, style_diagnostics, StyleDiagConfig};
use il_core::trainer::fit;
use il_core::{gradcheck, Error};

// Training churns through large short-lived buffers; the system allocator
// keeps returning them to the kernel and pays page faults on every step.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "il", version, about = "Style interleaved learning on a synthetic multi-domain benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        /// Dataset spec (JSON); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write metrics, checkpoint and resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Retrieval metrics of a checkpoint on one domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "target")]
        domain: String,
    },
    /// Export original and generated feature styles.
    StyleDiag {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
        /// Model to extract features with; a freshly initialized one otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "after_stage1")]
        stage: Stage,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Multi-seed ablation sweep.
    Ablate {
        #[arg(long)]
        suite: Suite,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// Base experiment config; its train section seeds every variant.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Existing dataset; generated from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_CONFIG,
                Error::Numerical(_) => EXIT_NUMERICAL,
                _ => 1,
            })
        }
    }
}

fn load_config(path: Option<&Path>) -> il_core::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_json(&fs::read_to_string(p)?),
        None => ExperimentConfig::from_json("{}"),
    }
}

fn create(path: &Path) -> il_core::Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn run(command: Command) -> il_core::Result<ExitCode> {
    match command {
        Command::Gen { spec, out, seed } => {
            let mut spec: DatasetSpec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?,
                None => DatasetSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = Dataset::generate(&spec)?;
            data.save(&out)?;
            println!("wrote {} domains to {}", data.domains.len(), out.display());
        }
        Command::Train { config, data, out, seed } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(s) = seed {
                config.train.seed = s;
            }
            let data = Dataset::load(&data)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("resolved-config.json"), config.to_json())?;
            let mut metrics = create(&out.join("metrics.jsonl"))?;
            let outcome = fit(&config.train, &data, |m| {
                writeln!(metrics, "{}", m.to_json_line())?;
                metrics.flush()?;
                eprintln!("epoch {:>3}  mAP {:.4}  rank1 {:.4}", m.epoch, m.map_target, m.rank1_target);
                Ok(())
            })?;
            Checkpoint::from_model(&outcome.backbone, &outcome.banks).save(&out.join("checkpoint.bin"))?;
        }
        Command::Eval { checkpoint, data, domain } => {
            let backbone = Checkpoint::load(&checkpoint)?.backbone()?;
            let data = Dataset::load(&data)?;
            let dom = data
                .domains
                .iter()
                .find(|d| d.name == domain)
                .ok_or_else(|| Error::Config(format!("no domain named {domain:?}")))?;
            let m = evaluate_domain(&backbone, dom)?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::StyleDiag { data, out, draws, checkpoint, stage, seed } => {
            let data = Dataset::load(&data)?;
            let backbone = match checkpoint {
                Some(p) => Checkpoint::load(&p)?.backbone()?,
                None => Backbone::new(seed),
            };
            let config = StyleDiagConfig { draws, stage, seed, ..Default::default() };
            fs::create_dir_all(&out)?;
            let mut csv = create(&out.join("styles.csv"))?;
            let summary = style_diagnostics(&backbone, data.sources(), &config, &mut csv)?;
            csv.flush()?;
            let text = serde_json::to_string_pretty(&summary)?;
            fs::write(out.join("style-summary.json"), text.clone() + "\n")?;
            println!("{text}");
        }
        Command::Gradcheck => {
            let reports = gradcheck::full_suite()?;
            let mut ok = true;
            for r in &reports {
                ok &= r.passed;
                println!(
                    "{:<40} {:>5} coords  max rel err {:.2e}  {}",
                    r.name,
                    r.coords,
                    r.max_rel_error,
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
            if !ok {
                return Ok(ExitCode::from(EXIT_CHECK_FAILED));
            }
        }
        Command::Ablate { suite, seeds, out, config, data } => {
            let config = load_config(config.as_deref())?;
            let data = match data {
                Some(p) => Dataset::load(&p)?,
                None => Dataset::generate(&config.dataset)?,
            };
            let seeds: Vec<u64> = (0..seeds).collect();
            let rows = ablate::run(&ablate::variants(suite, &config.train), &seeds, &data)?;
            fs::create_dir_all(&out)?;
            let mut w = create(&out.join(format!("ablation-{}.csv", suite.name())))?;
            ablate::write_rows_csv(&rows, &mut w)?;
            w.flush()?;
            let summary = ablate::summarize(&rows);
            let mut w = create(&out.join(format!("ablation-{}-summary.csv", suite.name())))?;
            ablate::write_summary_csv(&summary, &mut w)?;
            w.flush()?;
            ablate::write_summary_csv(&summary, &mut std::io::stdout())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
