use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use keyguide::config::ExperimentConfig;
use keyguide::corpus::{read_dataset, write_dataset, MixtureSample};
use keyguide::detector::frames_to_ms;
use keyguide::eval::{best_row, sweep_table, sweep_thresholds};
use keyguide::experiment::{output_root, write_report, Experiment, KCE_LOG, REPORT_JSON, TSE_LOG};
use keyguide::pipeline::{gradient_self_check, infer};
use keyguide::signal::wav::{read_wav, write_wav};
use keyguide::textfront::phonemize;
use keyguide::{Error, Models, Result};

/// Keyword-guided target speaker extraction on a synthetic two-talker corpus.
///
/// Configuration precedence, lowest first: built-in defaults, `--config`
/// file, `--set` pairs in order, `--seed`.
#[derive(Parser)]
#[command(name = "keyguide", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// File of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to $KEYGUIDE_OUT, then `runs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a held-out mixture set (about half negative cues) as WAVs plus a manifest.
    Simulate {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the keyword-conditioned cue encoder.
    TrainKce,
    /// Train the extraction backbone with the cue encoder frozen.
    TrainTse {
        /// Directory holding the trained cue encoder; defaults to the output directory.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Detect the keyword in a mixture and extract its speaker, or output silence.
    Infer {
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        mixture: PathBuf,
        /// Space-separated keyword text.
        #[arg(long)]
        keyword: String,
    },
    /// Extraction, detection, localization and embedding metrics on fresh held-out sets.
    Evaluate {
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Detection and localization over the configured threshold grid.
    Sweep {
        #[arg(long)]
        models: Option<PathBuf>,
        /// Dataset manifest from `simulate`; a fresh set is generated otherwise.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Finite-difference check of both training objectives on miniature models.
    GradCheck,
    /// Train both stages and evaluate in one go.
    Run,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::TrainKce => "train-kce",
            Command::TrainTse { .. } => "train-tse",
            Command::Infer { .. } => "infer",
            Command::Evaluate { .. } => "evaluate",
            Command::Sweep { .. } => "sweep",
            Command::GradCheck => "grad-check",
            Command::Run => "run",
        }
    }
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    ExperimentConfig::resolve(common.config.as_deref(), &overrides)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn execute(cli: &Cli, config: ExperimentConfig) -> Result<()> {
    let out = output_root(cli.common.out.as_deref());
    create_dir(&out)?;
    write_text(
        &out.join(format!("{}.config", cli.command.name())),
        &config.to_pairs_text()?,
    )?;
    let exp = Experiment::new(config)?;
    let models_dir = |m: &Option<PathBuf>| m.clone().unwrap_or_else(|| out.clone());

    match &cli.command {
        Command::Simulate { n } => {
            let n = n.unwrap_or(exp.config().eval.detection_samples);
            let samples: Vec<MixtureSample<f64>> = exp.detection_set(n)?;
            let manifest = write_dataset(&out, &samples)?;
            exp.world().lexicon().save(&out.join("lexicon.tsv"))?;
            println!("wrote {} samples to {}", samples.len(), manifest.display());
        }
        Command::TrainKce => {
            let mut models: Models = exp.init_models()?;
            let summary = exp.train_kce(&mut models, Some(&out.join(KCE_LOG)))?;
            models.save_kce(&out)?;
            println!(
                "cue encoder: {} steps, loss {:.3} -> {:.3}",
                summary.steps,
                summary.head_mean(50),
                summary.tail_mean(50)
            );
        }
        Command::TrainTse { models } => {
            let mut m: Models = exp.load_models(&models_dir(models))?;
            m.tse_params = exp.init_models::<f64>()?.tse_params;
            let summary = exp.train_tse(&mut m, Some(&out.join(TSE_LOG)))?;
            m.save(&out)?;
            println!(
                "backbone: {} steps, loss {:.3} -> {:.3}",
                summary.steps,
                summary.head_mean(50),
                summary.tail_mean(50)
            );
        }
        Command::Infer {
            models,
            mixture,
            keyword,
        } => {
            let m: Models = exp.load_models(&models_dir(models))?;
            let words: Vec<&str> = keyword.split_whitespace().collect();
            let cue = phonemize(exp.world().lexicon(), &words)?;
            let x = read_wav(mixture)?;
            let det = &exp.config().detector;
            let result = infer(&m, &x, &cue.phoneme_ids, det.threshold, det.scoring)?;
            write_wav(&out.join("output.wav"), &result.output)?;
            let json = serde_json::json!({
                "keyword": words,
                "phonemes": cue.phoneme_ids,
                "threshold": det.threshold,
                "scoring": det.scoring,
                "detected": result.detected(),
                "raw_score": result.detection.as_ref().map(|d| d.raw_score),
                "normalized_score": result.detection.as_ref().map(|d| d.normalized_score),
                "start_frame": result.detection.as_ref().map(|d| d.start_frame),
                "trigger_frame": result.detection.as_ref().map(|d| d.trigger_frame),
                "start_ms": result.detection.as_ref().map(|d| frames_to_ms(d.span().0)),
                "end_ms": result.detection.as_ref().map(|d| frames_to_ms(d.span().1)),
            });
            write_text(&out.join("detection.json"), &serde_json::to_string_pretty(&json)?)?;
            println!("detected: {}", result.detected());
        }
        Command::Evaluate { models } => {
            let m: Models = exp.load_models(&models_dir(models))?;
            let report = exp.evaluate(&m)?;
            write_report(&out.join(REPORT_JSON), &report)?;
            let table = report.to_table();
            write_text(&out.join("report.txt"), &table)?;
            print!("{table}");
        }
        Command::Sweep { models, manifest } => {
            let m: Models = exp.load_models(&models_dir(models))?;
            let samples: Vec<MixtureSample<f64>> = match manifest {
                Some(path) => read_dataset(path)?,
                None => exp.detection_set(exp.config().eval.detection_samples)?,
            };
            let det = &exp.config().detector;
            let rows = sweep_thresholds(&m, &samples, &exp.config().eval.thresholds, det.scoring)?;
            write_text(&out.join("sweep.json"), &serde_json::to_string_pretty(&rows)?)?;
            let mut table = sweep_table(&rows);
            if let Some(best) = best_row(&rows) {
                table.push_str(&format!("best tau {:.2}\n", best.threshold));
            }
            write_text(&out.join("sweep.txt"), &table)?;
            print!("{table}");
        }
        Command::GradCheck => {
            let reports = gradient_self_check(exp.config().run.seed)?;
            write_text(&out.join("grad_check.json"), &serde_json::to_string_pretty(&reports)?)?;
            let mut ok = true;
            for (name, r) in &reports {
                println!(
                    "{} {name}: max relative error {:.3e} (tolerance {:.0e})",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.max_error(),
                    r.tolerance
                );
                ok &= r.passed;
            }
            if !ok {
                return Err(Error::InvalidArgument("gradient check failed".into()));
            }
        }
        Command::Run => {
            let outcome = exp.run(Some(&out))?;
            print!("{}", outcome.report.to_table());
            println!("finished in {:.0} s", outcome.seconds);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match resolve_config(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(2);
        }
    };
    match execute(&cli, config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
