//! Command-line front end: corpus generation, staged training, checkpoint
//! averaging, evaluation, coefficient export and the gradient audit.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use accent_adapt::accents::ReferenceMode;
use accent_adapt::corpus::{accent_counts, generate_corpus, load_corpus, save_corpus, CorpusSpec};
use accent_adapt::harness::train::{last_epoch_paths, train_stage};
use accent_adapt::harness::{evaluate, export_coefficients, Stage, TrainConfig};
use accent_adapt::model::checkpoint::{average_checkpoints, Checkpoint};
use accent_adapt::{Error, Result};

#[derive(Parser)]
#[command(name = "accent-adapt", version, about = "Accent-adaptive joint CTC-attention lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-accent corpus into a directory.
    GenCorpus {
        /// TOML corpus description; omitted keys take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage and write per-epoch checkpoints plus metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the stage named in the config file.
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from (required for inject_frozen and
        /// finetune_all).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Average the last K epoch checkpoints of a training directory.
    Avg {
        #[arg(long = "in")]
        in_dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        last: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Beam-decode a split and report losses, overall and per-accent error rates.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory written by gen-corpus.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = 0.3)]
        ctc_weight: f64,
        #[arg(long, default_value_t = 0.3)]
        lambda_ctc: f64,
        #[arg(long, default_value_t = 0.01)]
        gamma_mtl: f64,
        /// Per-utterance decode CSV; omitted means metrics only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write predicted adapter coefficients per utterance plus quartile
    /// summaries per accent and basis.
    ExportCoeffs {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare every hand-derived gradient against finite differences.
    Gradcheck {
        /// Run only the named case.
        #[arg(long)]
        module: Option<String>,
    },
}

fn parse_stage(s: &str) -> Result<Stage> {
    match s.replace('-', "_").as_str() {
        "baseline" => Ok(Stage::Baseline),
        "inject_frozen" => Ok(Stage::InjectFrozen),
        "finetune_all" => Ok(Stage::FinetuneAll),
        other => Err(Error::Usage(format!(
            "unknown stage {other:?}; expected baseline, inject_frozen or finetune_all"
        ))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { spec, out } => {
            let spec: CorpusSpec = match spec {
                Some(path) => toml::from_str(&std::fs::read_to_string(path)?)
                    .map_err(|e| Error::Serde(e.to_string()))?,
                None => CorpusSpec::default(),
            };
            let corpus = generate_corpus(&spec)?;
            save_corpus(&corpus, &out)?;
            for (name, utts) in [
                ("train", &corpus.train),
                ("cv", &corpus.cv),
                ("test", &corpus.test),
            ] {
                let counts = accent_counts(utts);
                let detail: Vec<String> =
                    counts.iter().map(|(a, n)| format!("{a}:{n}")).collect();
                println!("{name}: {} utterances ({})", utts.len(), detail.join(", "));
            }
            println!("wrote corpus to {}", out.display());
        }
        Command::Train {
            config,
            stage,
            out,
            init,
        } => {
            let mut config = TrainConfig::load(&config)?;
            if let Some(s) = stage {
                config.stage = parse_stage(&s)?;
            }
            let corpus = load_corpus(PathBuf::from(&config.data_dir).as_path())?;
            let init = init.map(|p| Checkpoint::load(&p)).transpose()?;
            let (_, metrics) = train_stage(&config, &corpus, init, &out)?;
            for row in metrics.iter().filter(|r| r.split == "cv") {
                println!(
                    "epoch {:3}  cv  l_mtl {:.4}  ter {:.4}",
                    row.epoch, row.l_mtl, row.ter
                );
            }
            println!("wrote checkpoints and metrics.csv to {}", out.display());
        }
        Command::Avg { in_dir, last, out } => {
            let paths = last_epoch_paths(&in_dir, last)?;
            let avg = average_checkpoints(&paths)?;
            avg.save(&out)?;
            println!("averaged {} checkpoints into {}", paths.len(), out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            beam,
            ctc_weight,
            lambda_ctc,
            gamma_mtl,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let corpus = load_corpus(&data)?;
            let utts = corpus.split(&split)?;
            // the mse column is only meaningful when the checkpoint carries
            // the clustering fitted at injection
            let reference_mode = ckpt.cluster.as_ref().map(|_| ReferenceMode::Hard);
            let report = evaluate(
                &ckpt,
                utts,
                lambda_ctc,
                gamma_mtl,
                reference_mode,
                beam,
                ctc_weight,
                &split,
            )?;
            let m = &report.metrics;
            println!(
                "{split}: l_ctc {:.4}  l_s2s {:.4}  l_jca {:.4}  l_mse {:.4}  ter {:.4}",
                m.l_ctc, m.l_s2s, m.l_jca, m.l_mse, m.ter
            );
            for (accent, ter) in &report.per_accent_ter {
                println!("  {accent}: ter {ter:.4}");
            }
            if let Some(path) = out {
                accent_adapt::harness::eval::write_decodes_csv(&path, &report)?;
                println!("wrote decodes to {}", path.display());
            }
        }
        Command::ExportCoeffs {
            checkpoint,
            data,
            split,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let corpus = load_corpus(&data)?;
            let utts = corpus.split(&split)?;
            let summaries = export_coefficients(&ckpt, utts, &out)?;
            for s in &summaries {
                println!(
                    "{} basis {}: median {:.4} (q1 {:.4}, q3 {:.4})",
                    s.accent, s.basis, s.median, s.q1, s.q3
                );
            }
            println!("wrote coefficients to {}", out.display());
        }
        Command::Gradcheck { module } => {
            let results = accent_adapt::harness::gradsuite::run_suite();
            let selected: Vec<_> = match &module {
                Some(name) => {
                    let hit: Vec<_> = results.into_iter().filter(|r| &r.name == name).collect();
                    if hit.is_empty() {
                        return Err(Error::Usage(format!("no gradcheck case named {name:?}")));
                    }
                    hit
                }
                None => results,
            };
            let mut failed = false;
            for r in &selected {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:24} {:>9.3e} over {} instances  {}",
                    r.name, r.max_rel_err, r.instances, status
                );
                failed |= !r.passed();
            }
            if failed {
                return Err(Error::Guard("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
