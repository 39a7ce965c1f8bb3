use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ctvc::dsp::{load_audio, mcd_truncated, mel_spectrogram, MelConfig};
use ctvc::inference::{convert, probe, probe_split, ConversionRequest, ProbeConfig};
use ctvc::synth::{write_corpus, CorpusConfig};
use ctvc::training::{
    ablate, build_dataset, load_checkpoint, resume, train, BuildOptions, Dataset, Manifest,
    TrainConfig, FINAL_CHECKPOINT, LOG_FILE,
};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Voice conversion with contrastive content features and time-invariant
/// speaker embeddings.
#[derive(Parser, Debug)]
#[command(name = "ctvc", version)]
struct Cli {
    /// Seed overriding the config's training seed and the probe seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for feature extraction.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// JSON Lines manifest: {"audio", "alignment", "speaker"} per line.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for cached mel features.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract and cache mel features, parse alignments, report failures.
    Preprocess {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model; writes the loss log and checkpoints to --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint up to the config's step count.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the number of steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Convert --source to the voice of --target.
    Convert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        /// Target speaker reference; repeat to average several.
        #[arg(long, required = true)]
        target: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Griffin-Lim iterations.
        #[arg(long, default_value_t = 32)]
        iterations: usize,
    },
    /// Probe a checkpoint's representations; prints a JSON report.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Evaluate on this manifest and fit probes on --manifest; without
        /// it, --manifest is split per speaker.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model and three ablations, then probe each.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        heldout: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mel-cepstral distortion between two recordings.
    Mcd {
        reference: PathBuf,
        hypothesis: PathBuf,
        #[arg(long, default_value_t = 13)]
        order: usize,
    },
    /// Write the synthetic multi-speaker corpus with exact alignments.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn load_dataset(manifest: &Path, cache: Option<&PathBuf>, mel: &MelConfig, threads: usize, base: Option<&Dataset>) -> Result<Dataset> {
    let m = Manifest::load(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let opts = BuildOptions {
        cache_dir: cache.cloned(),
        threads,
        inventory: base.map(|d| d.inventory.clone()),
    };
    let mut ds = build_dataset(&m, mel, &opts)?;
    if let Some(b) = base {
        ds.num_speakers = ds.num_speakers.max(b.num_speakers);
    }
    Ok(ds)
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Preprocess { data, config } => {
            let cfg: TrainConfig = read_json(config.as_deref())?;
            let ds = load_dataset(&data.manifest, data.cache_dir.as_ref(), &cfg.mel, threads, None)?;
            emit(
                &json!({
                    "utterances": ds.len(),
                    "speakers": ds.num_speakers,
                    "phonemes": ds.inventory.len(),
                    "cache_hits": ds.cache_hits,
                    "rejected": ds.rejected,
                }),
                None,
            )
        }
        Command::Train {
            config,
            data,
            out,
            resume: from,
            steps,
        } => {
            let mut cfg: TrainConfig = read_json(config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.rng_seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let ds = load_dataset(&data.manifest, data.cache_dir.as_ref(), &cfg.mel, threads, None)?;
            let outcome = match from {
                Some(ckpt) => {
                    let mut state = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
                    state.config.steps = cfg.steps;
                    resume(state, &ds, Some(&out))?
                }
                None => train(&cfg, &ds, Some(&out))?,
            };
            emit(
                &json!({
                    "steps": outcome.state.step,
                    "final": outcome.reports.last(),
                    "log": out.join(LOG_FILE),
                    "checkpoint": out.join(FINAL_CHECKPOINT),
                }),
                None,
            )
        }
        Command::Convert {
            ckpt,
            source,
            target,
            out,
            iterations,
        } => {
            let c = convert(&ConversionRequest {
                source_audio: source,
                target_references: target,
                checkpoint: ckpt,
                output: out.clone(),
                vocoder_iterations: iterations,
            })?;
            emit(
                &json!({"output": out, "frames": c.mel.num_frames(), "samples": c.waveform.len()}),
                None,
            )
        }
        Command::Probe {
            ckpt,
            data,
            heldout,
            out,
        } => {
            let state = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let mel = &state.config.mel;
            let probe_cfg = ProbeConfig {
                seed: cli.seed.unwrap_or(0),
                ..ProbeConfig::default()
            };
            let fit = load_dataset(&data.manifest, data.cache_dir.as_ref(), mel, threads, None)?;
            let report = match heldout {
                Some(h) => {
                    let eval = load_dataset(&h, data.cache_dir.as_ref(), mel, threads, Some(&fit))?;
                    probe(&state.params, &fit, &eval, &probe_cfg)?
                }
                None => probe_split(&state.params, &fit, &probe_cfg)?,
            };
            emit(&serde_json::to_value(report)?, out.as_deref())
        }
        Command::Ablate {
            config,
            data,
            heldout,
            out,
        } => {
            let mut cfg: TrainConfig = read_json(config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.rng_seed = s;
            }
            let ds = load_dataset(&data.manifest, data.cache_dir.as_ref(), &cfg.mel, threads, None)?;
            let eval = load_dataset(&heldout, data.cache_dir.as_ref(), &cfg.mel, threads, Some(&ds))?;
            let probe_cfg = ProbeConfig {
                seed: cfg.rng_seed,
                ..ProbeConfig::default()
            };
            let table = ablate(&cfg, &ds, &ds, &eval, &probe_cfg)?;
            emit(&serde_json::to_value(table)?, out.as_deref())
        }
        Command::Mcd {
            reference,
            hypothesis,
            order,
        } => {
            let mel = MelConfig::default();
            let extract = |p: &Path| -> Result<_> {
                let w = load_audio(p, mel.sample_rate).with_context(|| format!("reading {}", p.display()))?;
                Ok(mel_spectrogram(&w, &mel)?)
            };
            let (a, b) = (extract(&reference)?, extract(&hypothesis)?);
            let (value, frames) = mcd_truncated(&a, &b, order)?;
            println!("{}", json!({"mcd_db": value, "frames": frames}));
            Ok(())
        }
        Command::Synth { out, config } => {
            let mut cfg: CorpusConfig = read_json(config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if cfg.utterances_per_speaker == 0 {
                bail!("corpus config has no training utterances");
            }
            let files = write_corpus(&cfg, &MelConfig::default(), &out)?;
            emit(
                &json!({"train": files.train_manifest, "heldout": files.heldout_manifest}),
                None,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
