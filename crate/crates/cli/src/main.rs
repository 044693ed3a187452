//! Command-line front end: simulate, train, eval, explain, gradcheck.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcam_cli::config::Config;
use mcam_cli::pipeline::caption_of;
use mcam_cli::run;
use mcam_core::dsdag::scenario::traffic_scenario;
use mcam_core::simulator::read_dataset;
use mcam_core::vlt::Vocab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "mcam", about = "Causal driving-caption reference stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory (datasets under <out>/data, runs under <out>/run).
    #[arg(long, default_value = "mcam-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset with train/val/test splits.
    Simulate(Common),
    /// Train the full pipeline on a simulated dataset.
    Train(Common),
    /// Score decoded captions on the test split.
    Eval(Common),
    /// Explain one episode: SCM key factors next to neural attribution.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
    /// Finite-difference check of the composed pipeline gradient.
    Gradcheck(Common),
}

fn load_config(common: &Common) -> anyhow::Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.reseed(seed);
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Simulate(common) => {
            let cfg = load_config(&common)?;
            let summary = run::run_simulate(&cfg, &common.out.join("data"))?;
            println!(
                "wrote {} train / {} val / {} test episodes under {}",
                summary.train.len(),
                summary.val.len(),
                summary.test.len(),
                common.out.join("data").display()
            );
        }
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            let summary =
                run::run_train(&cfg, &common.out.join("data"), &common.out.join("run"))?;
            println!(
                "trained {} epochs; best val loss {:.6}; checkpoint at {}",
                summary.history.len(),
                summary.best_val,
                summary.checkpoint.display()
            );
        }
        Command::Eval(common) => {
            let _ = load_config(&common)?;
            let report = run::run_eval(
                &common.out.join("run").join("checkpoint.bin"),
                &common.out.join("data"),
                "test",
            )?;
            let path = common.out.join("run").join("eval.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            println!(
                "narration BLEU-4 {:.4}, reasoning BLEU-4 {:.4}; report at {}",
                report.narration.bleu4,
                report.reasoning.bleu4,
                path.display()
            );
        }
        Command::Explain { common, episode } => {
            let cfg = load_config(&common)?;
            let scm = traffic_scenario()?;
            let episodes = read_dataset(&common.out.join("data").join("test"))?;
            let target = episodes
                .get(episode)
                .ok_or_else(|| anyhow::anyhow!("episode index {episode} out of range"))?;
            let ckpt = common.out.join("run").join("checkpoint.bin");
            let report = if ckpt.exists() {
                let (pipeline, _) = mcam_cli::load_checkpoint(&ckpt)?;
                run::run_explain(&scm, target, Some(&pipeline))?
            } else {
                // No trained model: SCM-only explanation. A vocabulary is
                // still needed to exercise config validation early.
                let texts: Vec<String> = episodes.iter().map(caption_of).collect();
                let _ = Vocab::build(texts.iter().map(|s| s.as_str()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let _ = &mut rng;
                run::run_explain(&scm, target, None)?
            };
            let path = common.out.join("run").join("explain.json");
            std::fs::create_dir_all(common.out.join("run"))?;
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            println!(
                "episode {}: top SCM factor {:?}; report at {}",
                report.episode_id,
                report.scm_ranking.first().map(|(n, _)| n.as_str()).unwrap_or("-"),
                path.display()
            );
        }
        Command::Gradcheck(common) => {
            let cfg = load_config(&common)?;
            let report = run::gradcheck_composed(cfg.seed, 64)?;
            println!(
                "composed gradient check: worst relative error {:.3e} ({})",
                report.worst(),
                if report.passed() { "pass" } else { "FAIL" }
            );
            if !report.passed() {
                anyhow::bail!("gradient check failed");
            }
        }
    }
    Ok(())
}
