use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use weend_cli::commands::{
    cmd_ablate_tap, cmd_decode, cmd_eval, cmd_orchestrate, cmd_simulate, cmd_train_asr, cmd_train_aux,
};
use weend_cli::config::{test_manifest_name, RunConfig, VOCAB_FILE};
use weend_cli::{categorize, UsageError};

#[derive(Debug, Parser)]
#[command(name = "weend", version, about = "Word-level diarization transducer toolkit")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the simulator and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Per-example gradients on all cores.
    #[arg(long, global = true)]
    parallel: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the lexicon, speaker pools, training and held-out manifests.
    Simulate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a fresh model on the wordpiece loss.
    TrainAsr {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Train the speaker network on top of a frozen ASR checkpoint.
    TrainAux {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Diarized transcripts for every utterance of a manifest, as JSON lines.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Overrides eval.beam_size; 1 is greedy.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Baseline: give each CTM word the RTTM speaker it overlaps most.
    Orchestrate {
        #[arg(long)]
        ctm: PathBuf,
        #[arg(long)]
        rttm: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seconds per frame in the emitted records.
        #[arg(long)]
        frame_step: Option<f64>,
    },
    /// WER, WDER and modified WDER of decode output against a manifest.
    Eval {
        /// Decode or orchestrate output.
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// JSON report; a CSV table is written alongside.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        best_permutation: bool,
    },
    /// Train one speaker network per tap layer and tabulate WDER.
    AblateTap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated: first, middle, last or 1-based indices.
        #[arg(long, value_delimiter = ',', default_value = "first,middle,last")]
        taps: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Held-out manifests; defaults to every configured speaker count.
        #[arg(long, value_delimiter = ',')]
        test: Vec<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
}

fn vocab_for(explicit: Option<PathBuf>, manifest: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.data.simulator.seed = s;
    }
    cfg.train.parallel |= cli.parallel;
    let force = cli.force;
    match cli.command {
        Command::Simulate { out } => {
            let out = out.unwrap_or_else(|| cfg.data.dir.clone());
            let s = cmd_simulate(&cfg, &out, force)?;
            println!("wrote {} training conversations to {}", s.train_conversations, out.display());
            for (name, n) in &s.test_sets {
                println!("  {name}: {n}");
            }
        }
        Command::TrainAsr { out, manifest, vocab } => {
            let manifest = manifest.unwrap_or_else(|| cfg.data.train_manifest());
            let vocab = vocab_for(vocab, &manifest);
            let s = cmd_train_asr(&cfg, &manifest, &vocab, &out, force)?;
            println!("{} steps, loss {:?} -> {:?}", s.steps, s.first_loss, s.final_loss);
        }
        Command::TrainAux {
            checkpoint,
            out,
            manifest,
            vocab,
        } => {
            let manifest = manifest.unwrap_or_else(|| cfg.data.train_manifest());
            let vocab = vocab_for(vocab, &manifest);
            let s = cmd_train_aux(&cfg, &checkpoint, &manifest, &vocab, &out, force)?;
            println!("{} steps, loss {:?} -> {:?}", s.steps, s.first_loss, s.final_loss);
            println!("asr tensors sha256 {} (before) {} (after)", s.asr_hash_before, s.asr_hash_after);
        }
        Command::Decode {
            checkpoint,
            manifest,
            out,
            vocab,
            beam,
        } => {
            if let Some(b) = beam {
                cfg.eval.beam_size = b;
            }
            let vocab = vocab_for(vocab, &manifest);
            let s = cmd_decode(&cfg, &checkpoint, &manifest, &vocab, &out, force)?;
            println!(
                "decoded {} utterances, {} words, {} words with conflicting piece speakers",
                s.utterances, s.words, s.speaker_conflicts
            );
        }
        Command::Orchestrate {
            ctm,
            rttm,
            out,
            frame_step,
        } => {
            let step = frame_step.unwrap_or(cfg.data.simulator.synth.frame_step);
            let s = cmd_orchestrate(&ctm, &rttm, step, &out, force)?;
            println!("{} files, {} words, {} nearest-segment fallbacks", s.files, s.words, s.fallbacks);
        }
        Command::Eval {
            hyp,
            manifest,
            out,
            best_permutation,
        } => {
            if best_permutation {
                cfg.eval.mapping = weend::metrics::SpeakerMapping::BestPermutation;
            }
            let r = cmd_eval(&cfg, &hyp, &manifest, &out, force)?;
            print!("{}", r.to_csv());
        }
        Command::AblateTap {
            checkpoint,
            taps,
            out,
            manifest,
            test,
            vocab,
        } => {
            let manifest = manifest.unwrap_or_else(|| cfg.data.train_manifest());
            let vocab = vocab_for(vocab, &manifest);
            let tests = if test.is_empty() {
                let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
                cfg.data.test_speaker_counts.iter().map(|&m| dir.join(test_manifest_name(m))).collect()
            } else {
                test
            };
            if tests.is_empty() {
                return Err(UsageError("no test manifests".into()).into());
            }
            let r = cmd_ablate_tap(&cfg, &checkpoint, &manifest, &tests, &vocab, &taps, &out, force)?;
            print!("{}", r.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = categorize(&e);
            eprintln!("error[{}]: {e:#}", cat.label());
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
