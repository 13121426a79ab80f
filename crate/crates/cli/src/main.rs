use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use parnet::autodiff::Tensor;
use parnet::bench::{
    ablation_suite, emit_csv, emit_plot, load_dataset, read_csv, run_experiment, split_windows, sweep,
    synth_dataset, test_samples, write_series, ExperimentConfig, SweepResult, SynthSpec,
};
use parnet::certify::{certify, verify_prop2, CertifyOptions, Prop2Config};
use parnet::corpus::{align_texts, load_numerical, load_text_events, ColumnSpec, Frequency};
use parnet::embed::Embedder;
use parnet::model::{ParNet, Variant};
use parnet::perturb::{perturb_window, write_audit_log, PerturbationSpec, Strategy};
use parnet::train::{evaluate, prepare_samples, write_epoch_log};

#[derive(Parser)]
#[command(name = "parnet", version, about = "Perturbation-aware multimodal forecasting toolkit")]
struct Cli {
    /// Experiment config (TOML). Defaults to the built-in synthetic setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align a numeric CSV with timestamped texts and write the result.
    Ingest {
        #[arg(long)]
        numeric: PathBuf,
        #[arg(long)]
        texts: Option<PathBuf>,
        #[arg(long, default_value = "monthly")]
        frequency: Frequency,
        #[arg(long)]
        target: Option<String>,
    },
    /// Corrupt the lookback texts of every window and write an audit log.
    Perturb {
        #[arg(long)]
        rho: f64,
        /// Restrict to one strategy: insert_irrelevant, shuffle_tokens or
        /// inject_contradiction.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Write the synthetic dataset in the ingestion formats.
    Synth {
        #[arg(long, default_value_t = 600)]
        len: usize,
        #[arg(long, default_value_t = 0.9)]
        strength: f64,
    },
    /// Train one model and save its checkpoint and epoch log.
    Train {
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long, default_value_t = 0.0)]
        rho: f64,
    },
    /// Score a checkpoint on the (perturbed) test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long, default_value_t = 0.0)]
        rho: f64,
    },
    /// Run every configured (variant, rho, seed) cell.
    Sweep,
    /// Run all four variants over the configured rhos and seeds.
    Ablate,
    /// Compute a Lipschitz certificate for a checkpoint.
    Certify {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of test lookbacks used as anchors.
        #[arg(long, default_value_t = 8)]
        anchors: usize,
        #[arg(long, default_value_t = 1.0)]
        softmax_constant: f64,
        #[arg(long, default_value_t = 1.5)]
        safety_factor: f64,
    },
    /// Run the linear-Gaussian denoising check.
    VerifyProp2 {
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 100)]
        reps: usize,
    },
    /// Rebuild the markdown table and chart from a results CSV.
    Report {
        #[arg(long)]
        csv: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let out = cli.out.clone();
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Ingest {
            numeric,
            texts,
            frequency,
            target,
        } => {
            let spec = ColumnSpec {
                target: target.clone(),
                ..ColumnSpec::new(*frequency)
            };
            let series = load_numerical(numeric, &spec)?;
            let events = match texts {
                Some(p) => load_text_events(p, *frequency)?,
                None => Vec::new(),
            };
            let aligned = align_texts(&series, &events);
            let mut buf = String::new();
            for s in &aligned.steps {
                buf.push_str(&serde_json::json!({"date": s.date.to_string(), "values": s.values, "text": s.text}).to_string());
                buf.push('\n');
            }
            write(&out.join("aligned.jsonl"), buf)?;
            let with_text = aligned.steps.iter().filter(|s| !s.text.is_empty()).count();
            println!("{} steps, {} channels, {with_text} with text", aligned.len(), aligned.channels());
        }
        Command::Perturb { rho, strategy } => {
            let cfg = config(&cli)?;
            let data = load_dataset(&cfg)?;
            let mut spec = PerturbationSpec::new(*rho, seed);
            if let Some(name) = strategy {
                let s = Strategy::ALL
                    .into_iter()
                    .find(|s| serde_json::to_value(s).ok().and_then(|v| v.as_str().map(|v| v == name)) == Some(true))
                    .with_context(|| format!("unknown strategy {name:?}"))?;
                spec = spec.only(s);
            }
            let [train, _, _] = split_windows(&cfg, &data)?;
            let mut records = Vec::new();
            let mut buf = String::new();
            for (k, w) in train.iter().enumerate() {
                let (texts, recs) = perturb_window(&w.lookback_texts, &spec, k as u64)?;
                buf.push_str(&serde_json::json!({"window": k, "start": w.start, "texts": texts}).to_string());
                buf.push('\n');
                records.extend(recs);
            }
            write(&out.join("perturbed.jsonl"), buf)?;
            write_audit_log(out.join("audit.jsonl"), &records)?;
            println!("{} windows, {} texts perturbed", train.len(), records.len());
        }
        Command::Synth { len, strength } => {
            let spec = SynthSpec {
                len: *len,
                strength: *strength,
                seed,
                ..SynthSpec::default()
            };
            write_series(&synth_dataset(&spec)?, &out)?;
            println!("wrote {} steps to {}", len, out.display());
        }
        Command::Train { variant, rho } => {
            let cfg = config(&cli)?;
            let data = load_dataset(&cfg)?;
            let (cell, model, report) = run_experiment(&cfg, &data, *variant, *rho, seed)?;
            model.save(out.join("checkpoint.json"))?;
            write_epoch_log(out.join("epochs.csv"), &report.epochs)?;
            write(&out.join("metrics.json"), serde_json::to_string_pretty(&cell)?)?;
            println!(
                "{variant} rho={rho} seed={seed}: test mse {} mae {} after {} epochs (best {})",
                cell.mse, cell.mae, cell.epochs, cell.best_epoch
            );
        }
        Command::Evaluate {
            checkpoint,
            variant,
            rho,
        } => {
            let cfg = config(&cli)?;
            let data = load_dataset(&cfg)?;
            let model = ParNet::load(checkpoint)?;
            let samples = test_samples(&cfg, &data, *rho, seed)?;
            let m = evaluate(&model, &samples, *variant, cfg.train_config(seed, *variant).batch_size)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Sweep | Command::Ablate => {
            let cfg = config(&cli)?;
            let data = load_dataset(&cfg)?;
            let result = if matches!(cli.command, Command::Sweep) {
                sweep(&cfg, &data)?
            } else {
                ablation_suite(&cfg, &data)?
            };
            return finish_sweep(&out, &result);
        }
        Command::Certify {
            checkpoint,
            anchors,
            softmax_constant,
            safety_factor,
        } => {
            let cfg = config(&cli)?;
            let data = load_dataset(&cfg)?;
            let model = ParNet::load(checkpoint)?;
            let [_, _, test] = split_windows(&cfg, &data)?;
            let embedder = Embedder::new(cfg.embedder_config())?;
            let step = (test.len() / (*anchors).max(1)).max(1);
            let picked: Vec<_> = test.iter().step_by(step).take(*anchors).cloned().collect();
            let (samples, _) = prepare_samples(&picked, &embedder, None, 0)?;
            let xs: Vec<Tensor> = samples.into_iter().map(|s| s.x).collect();
            let opts = CertifyOptions {
                softmax_constant: *softmax_constant,
                safety_factor: *safety_factor,
                seed,
                ..CertifyOptions::default()
            };
            let cert = certify(&model, &xs, &opts)?;
            write(&out.join("certificate.json"), cert.to_json()?)?;
            println!(
                "L_total {} = L_F {} x L_A {} x (1 + L_phi {})",
                cert.l_total, cert.l_forecaster, cert.l_attention, cert.l_projection
            );
        }
        Command::VerifyProp2 { trials, reps } => {
            let cfg = Prop2Config {
                trials: *trials,
                reps: *reps,
                seed,
                ..Prop2Config::default()
            };
            let report = verify_prop2(&cfg)?;
            write(&out.join("prop2.json"), serde_json::to_string_pretty(&report)?)?;
            println!(
                "positive margins {}/{}, bound held {}/{}, expected margin {}: {}",
                report.positive_margins,
                report.reps.len(),
                report.bounds_held,
                report.reps.len(),
                report.expected_margin,
                if report.passed() { "PASS" } else { "FAIL" }
            );
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report { csv } => {
            let table = read_csv(csv)?;
            write(&out.join("table.md"), table.to_markdown())?;
            emit_plot(&table, out.join("chart.svg"))?;
            print!("{}", table.to_markdown());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn finish_sweep(out: &Path, result: &SweepResult) -> Result<ExitCode> {
    let table = result.table();
    emit_csv(&table, out.join("results.csv"))?;
    emit_plot(&table, out.join("chart.svg"))?;
    write(&out.join("table.md"), table.to_markdown())?;
    print!("{}", table.to_markdown());
    if !result.failures.is_empty() {
        write(&out.join("failures.json"), serde_json::to_string_pretty(&result.failures)?)?;
        for f in &result.failures {
            eprintln!("failed: {} rho={} seed={}: {}", f.variant, f.rho, f.seed, f.error);
        }
        bail!("{} of {} cells failed", result.failures.len(), result.failures.len() + result.cells.len());
    }
    Ok(ExitCode::SUCCESS)
}
