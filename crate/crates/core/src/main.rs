use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fedreplay::datastore::{gen_synthetic, load_dataset, save_dataset, SyntheticSpec};
use fedreplay::orchestrator::{
    evaluate, load_data, load_params, run_late_join, run_pulse_probe, run_simulation,
    save_params, write_csv, DataSource, FedConfig, OrchestratorError, Summary,
};

#[derive(Parser)]
#[command(name = "fedreplay", version, about = "Replay-assisted federated training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; re-derives every stage seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the number of rounds.
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Standard federated run.
    Simulate(Common),
    /// Run with a client joining mid-training.
    LateJoin(Common),
    /// No-replay run with periodic centralized fine-tuning.
    PulseProbe(Common),
    /// Write the configured synthetic dataset as a FEDR file.
    GenData(Common),
    /// Score a saved head on a FEDR file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<FedConfig, OrchestratorError> {
    let mut cfg = match &c.config {
        Some(p) => FedConfig::load(p)?,
        None => FedConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(r) = c.rounds {
        cfg.rounds = r;
    }
    cfg.validate()?;
    fs::create_dir_all(&c.out)?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), OrchestratorError> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), OrchestratorError> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = load_config(&c)?;
            let data = load_data(&cfg)?;
            let outcome = run_simulation(&cfg, &data)?;
            write_csv(&outcome.reports, &c.out.join("metrics.csv"))?;
            let summary = Summary::new(&outcome.reports, outcome.final_params.param_count(), &cfg);
            summary.write(&c.out.join("summary.json"))?;
            save_params(&outcome.final_params, &c.out.join("model.fedh"))?;
            println!(
                "final accuracy {:.4}, best {:.4}, {} bytes",
                summary.final_accuracy, summary.best_accuracy, summary.total_bytes
            );
        }
        Command::LateJoin(c) => {
            let cfg = load_config(&c)?;
            let data = load_data(&cfg)?;
            let outcome = run_late_join(&cfg, &data)?;
            write_csv(&outcome.reports, &c.out.join("metrics.csv"))?;
            let summary = Summary::new(&outcome.reports, outcome.final_params.param_count(), &cfg);
            let mut value = serde_json::to_value(&summary)?;
            value["join"] = serde_json::to_value(&outcome.join)?;
            write_json(&c.out.join("summary.json"), &value)?;
            save_params(&outcome.final_params, &c.out.join("model.fedh"))?;
            let j = &outcome.join;
            println!(
                "join at round {}: accuracy {:.4} -> {:.4}, old classes {:.4} -> {:.4} after distillation, final {:.4}",
                j.join_round,
                j.accuracy_before,
                j.accuracy_after_join,
                j.old_class_accuracy_before,
                j.old_class_accuracy_after_kd,
                summary.final_accuracy
            );
        }
        Command::PulseProbe(c) => {
            let cfg = load_config(&c)?;
            let data = load_data(&cfg)?;
            let outcome = run_pulse_probe(&cfg, &data)?;
            write_csv(&outcome.reports, &c.out.join("metrics.csv"))?;
            let param_count = outcome.reports.first().map(|r| r.param_count).unwrap_or(0);
            let summary = Summary::new(&outcome.reports, param_count, &cfg);
            let mut value = serde_json::to_value(&summary)?;
            value["pulses"] = serde_json::to_value(&outcome.pulses)?;
            value["pulse_fraction"] = json!(outcome.pulse_fraction());
            write_json(&c.out.join("summary.json"), &value)?;
            println!(
                "{} pulses, {:.0}% rose then fell, mean drop {:.4}",
                outcome.pulses.len(),
                100.0 * outcome.pulse_fraction(),
                outcome.mean_degradation()
            );
        }
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let spec = match &cfg.data {
                DataSource::Synthetic(s) => s.clone(),
                DataSource::File { .. } => SyntheticSpec::default(),
            };
            let mut ds = gen_synthetic(&spec, cfg.seeds.data)?;
            ds.provenance = format!("synthetic sigma={} seed={}", spec.sigma, cfg.seeds.data);
            let path = c.out.join("synthetic.fedr");
            save_dataset(&ds, &path)?;
            println!("wrote {} records to {}", ds.len(), path.display());
        }
        Command::Eval { common, model, data } => {
            fs::create_dir_all(&common.out)?;
            let params = load_params(&model)?;
            let ds = load_dataset(&data)?;
            let res = evaluate(&params, &ds)?;
            write_json(&common.out.join("eval.json"), &serde_json::to_value(&res)?)?;
            println!("accuracy {:.4} over {} records", res.accuracy, ds.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
