//! Command-line surface: enhance audio, train at toy scale, inspect and
//! verify models. Logs go to stderr; data (CSV, WAV, weights) goes to
//! files or stdout, so commands compose in pipelines.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use dparn::dsp::{istft, load_wav, save_wav, stft, StftConfig, WavBuffer, SAMPLE_RATE};
use dparn::error::{DparnError, Result};
use dparn::metrics::{si_sdr, write_metrics_csv};
use dparn::model::weights::{load_weights, save_weights};
use dparn::model::{DparnModel, ModelConfig};
use dparn::scm::{write_matrix_csv, ScmMatrix};
use dparn::training::{train_toy, write_loss_csv, LrSchedule, TrainConfig};
use dparn::verify::{gradcheck_reduced_model, scm_suite, stft_suite};

#[derive(Parser)]
#[command(
    name = "dparn",
    version,
    about = "Full-band (48 kHz) speech enhancement: dual-path attention-recurrent network with learnable spectral compression"
)]
struct Cli {
    /// Seed for all randomness; falls back to DPARN_SEED, then to a
    /// generated value (logged).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Extra progress logging on stderr.
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Regime {
    /// Long warm-up (40000 steps).
    Exp1,
    /// Short warm-up (5000 steps).
    Exp2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    Gradcheck,
    Scm,
    Stft,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Denoise a 48 kHz WAV file with a trained model.
    Enhance {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Average multi-channel input to mono instead of rejecting it.
        #[arg(long)]
        downmix: bool,
    },
    /// Overfit one clip at a chosen SNR and write the weights.
    TrainToy {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        noise: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        snr: f64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Warm-up regime; switches only the warm-up step count.
        #[arg(long, value_enum)]
        regime: Option<Regime>,
        /// Explicit warm-up step count (overrides --regime).
        #[arg(long)]
        warmup: Option<usize>,
        /// Train the full-size configuration instead of the reduced one.
        #[arg(long)]
        full: bool,
        /// Loss trace CSV path (default: <out>.loss.csv).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        downmix: bool,
    },
    /// Print the per-layer table and parameter count of a weight file.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
    /// Run verification suites; nonzero exit on any failure.
    Verify {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
    },
    /// SI-SDR of an estimate against a reference.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long = "est")]
        estimate: PathBuf,
        /// Write a CSV row instead of human-readable output.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        downmix: bool,
    },
    /// Write the initial compression matrix as CSV.
    DumpScm {
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve_seed(flag: Option<u64>) -> (u64, &'static str) {
    if let Some(s) = flag {
        return (s, "flag");
    }
    if let Ok(env) = std::env::var("DPARN_SEED") {
        if let Ok(s) = env.parse() {
            return (s, "env DPARN_SEED");
        }
    }
    let generated = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0x5eed);
    (generated, "generated")
}

fn mono_48k(buf: WavBuffer, downmix: bool, what: &str) -> Result<WavBuffer> {
    if buf.sample_rate != SAMPLE_RATE {
        return Err(DparnError::Config(format!(
            "{what}: sample rate {} Hz, the enhancement path requires {SAMPLE_RATE} Hz",
            buf.sample_rate
        )));
    }
    if buf.channels > 1 {
        if !downmix {
            return Err(DparnError::Config(format!(
                "{what}: {} channels; pass --downmix to average to mono",
                buf.channels
            )));
        }
        return Ok(buf.downmix());
    }
    Ok(buf)
}

fn run(cli: Cli) -> Result<i32> {
    let (seed, seed_source) = resolve_seed(cli.seed);
    let threads = std::env::var("DPARN_THREADS").ok();
    eprintln!(
        "dparn {} | seed {} ({}) | threads {}",
        env!("CARGO_PKG_VERSION"),
        seed,
        seed_source,
        threads.as_deref().unwrap_or("1 (single-threaded engine)")
    );

    match cli.command {
        Command::Enhance {
            input,
            model,
            out,
            downmix,
        } => {
            let wav = mono_48k(load_wav(&input)?, downmix, "input")?;
            if wav.samples.is_empty() {
                return Err(DparnError::Degenerate("empty input file".into()));
            }
            let net = load_weights::<f32>(&model)?;
            if net.config.f_bins != StftConfig::default().bins() {
                return Err(DparnError::Config(format!(
                    "model expects {} bins, the 48 kHz front-end produces {}",
                    net.config.f_bins,
                    StftConfig::default().bins()
                )));
            }
            eprintln!(
                "enhance: {} samples ({:.2} s), model '{}' ({} trainable parameters)",
                wav.samples.len(),
                wav.duration_secs(),
                model.display(),
                net.num_trainable()
            );
            let start = Instant::now();
            let cfg = StftConfig::default();
            let spec = stft(&wav.samples, &cfg)?;
            let enhanced_spec = net.enhance_spectrogram(&spec)?;
            let mut samples = istft(&enhanced_spec, &cfg)?;
            samples.truncate(wav.samples.len());
            let elapsed = start.elapsed().as_secs_f64();
            let out_buf = WavBuffer {
                samples,
                sample_rate: SAMPLE_RATE,
                channels: 1,
                format: wav.format,
            };
            save_wav(&out, &out_buf)?;
            eprintln!(
                "enhance: {} frames in {:.2} s (real-time factor {:.2})",
                spec.frames,
                elapsed,
                wav.duration_secs() / elapsed.max(1e-9)
            );
            Ok(0)
        }

        Command::TrainToy {
            clean,
            noise,
            snr,
            steps,
            out,
            regime,
            warmup,
            full,
            loss_csv,
            downmix,
        } => {
            let clean_buf = mono_48k(load_wav(&clean)?, downmix, "clean")?;
            let noise_buf = mono_48k(load_wav(&noise)?, downmix, "noise")?;
            let config = if full {
                ModelConfig::canonical()
            } else {
                ModelConfig::reduced()
            };
            let channels = config.channels();
            let mut cfg = TrainConfig::toy(channels, steps, snr);
            if let Some(r) = regime {
                cfg.schedule = match r {
                    Regime::Exp1 => LrSchedule::exp1(),
                    Regime::Exp2 => LrSchedule::exp2(),
                };
                cfg.schedule.dim_constant = channels as f64;
            }
            if let Some(w) = warmup {
                cfg.schedule.warmup_steps = w;
            }
            eprintln!(
                "train-toy: model {} ({} ch), snr {} dB, steps {}, warmup {}, dim constant {}, clip {}",
                if full { "full" } else { "reduced" },
                channels,
                snr,
                steps,
                cfg.schedule.warmup_steps,
                cfg.schedule.dim_constant,
                cfg.grad_clip
            );
            let mut model = DparnModel::<f32>::new(config, seed)?;
            let start = Instant::now();
            let trace = train_toy(&mut model, &clean_buf.samples, &noise_buf.samples, &cfg)?;
            eprintln!(
                "train-toy: {} steps in {:.1} s{}",
                trace.len(),
                start.elapsed().as_secs_f64(),
                trace
                    .last()
                    .map(|t| format!(", loss {:.4} -> {:.4}", trace[0].total, t.total))
                    .unwrap_or_default()
            );
            save_weights(&model, &out)?;
            let csv_path = loss_csv.unwrap_or_else(|| {
                let mut p = out.clone();
                p.set_extension("loss.csv");
                p
            });
            let file = std::fs::File::create(&csv_path)?;
            write_loss_csv(&trace, file)?;
            eprintln!(
                "train-toy: weights -> {}, trace -> {}",
                out.display(),
                csv_path.display()
            );
            Ok(0)
        }

        Command::Inspect { model } => {
            let net = load_weights::<f32>(&model)?;
            let mut stdout = std::io::stdout().lock();
            writeln!(
                stdout,
                "{:<28} {:>16} {:>10} {:>10}",
                "name", "shape", "params", "train"
            )?;
            for (name, shape, trainable, numel) in net.summary() {
                writeln!(
                    stdout,
                    "{:<28} {:>16} {:>10} {:>10}",
                    name,
                    format!("{shape:?}"),
                    numel,
                    if trainable { "yes" } else { "frozen" }
                )?;
            }
            writeln!(
                stdout,
                "total trainable parameters: {}",
                net.num_trainable()
            )?;
            writeln!(
                stdout,
                "configuration: {} bins -> {} compressed ({} identity), {} encoder layers, {} attention blocks x {} heads, lstm hidden {}",
                net.config.f_bins,
                net.config.compressed,
                net.config.low_band,
                net.config.encoder_channels.len(),
                net.config.mha_blocks,
                net.config.heads,
                net.config.lstm_hidden
            )?;
            Ok(0)
        }

        Command::Verify { suite } => {
            let mut results = Vec::new();
            if matches!(suite, Suite::Scm | Suite::All) {
                let scm = ScmMatrix::canonical();
                results.extend(scm_suite(
                    &scm.full_matrix(),
                    scm.f_bins,
                    scm.compressed,
                    scm.low_band,
                ));
            }
            if matches!(suite, Suite::Stft | Suite::All) {
                results.extend(stft_suite(seed));
            }
            if matches!(suite, Suite::Gradcheck | Suite::All) {
                let report = gradcheck_reduced_model(200, seed)?;
                results.push(dparn::verify::CheckResult {
                    name: "gradcheck.reduced_model_loss".into(),
                    passed: report.passed(),
                    detail: format!(
                        "{} sampled parameters, max rel err {:.3e} at {} (tolerance {:.0e})",
                        report.sampled, report.max_rel_err, report.worst_param, report.tolerance
                    ),
                });
            }
            let mut stdout = std::io::stdout().lock();
            let mut failures = 0;
            for r in &results {
                writeln!(
                    stdout,
                    "{} {} | {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                )?;
                if !r.passed {
                    failures += 1;
                }
            }
            writeln!(stdout, "{} checks, {} failed", results.len(), failures)?;
            Ok(if failures == 0 { 0 } else { 1 })
        }

        Command::Metrics {
            reference,
            estimate,
            csv,
            downmix,
        } => {
            let r = mono_48k(load_wav(&reference)?, downmix, "reference")?;
            let e = mono_48k(load_wav(&estimate)?, downmix, "estimate")?;
            let result = si_sdr(&e.samples, &r.samples)?;
            if result.truncated {
                eprintln!(
                    "metrics: lengths differ, compared the first {} samples",
                    result.aligned_len
                );
            }
            match csv {
                Some(path) => {
                    let rows = vec![(estimate.display().to_string(), result)];
                    let file = std::fs::File::create(&path)?;
                    write_metrics_csv(&rows, file)?;
                    eprintln!("metrics: csv -> {}", path.display());
                }
                None => {
                    println!("si_sdr_db {:.4}", result.db);
                    println!("alpha {:.6}", result.alpha);
                }
            }
            Ok(0)
        }

        Command::DumpScm { out } => {
            let scm = ScmMatrix::canonical();
            match out {
                Some(path) => {
                    let file = std::fs::File::create(&path)?;
                    write_matrix_csv(&scm, file)?;
                    eprintln!(
                        "dump-scm: {} x {} matrix -> {}",
                        scm.compressed,
                        scm.f_bins,
                        path.display()
                    );
                }
                None => write_matrix_csv(&scm, std::io::stdout().lock())?,
            }
            Ok(0)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(err.exit_code());
        }
    }
}
