pub mod args;
pub mod commands;
pub mod error;
pub mod output;
pub mod serve;

use args::{Cli, Command};
use error::{CliError, Result};

/// Runs one parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    if let Command::Replay(a) = &cli.command {
        return commands::replay_cmd(a);
    }
    let cfg = commands::load_config(&cli.global)?;
    match &cli.command {
        Command::Simulate(a) => commands::simulate(&cfg, a),
        Command::GenCorpus(a) => commands::gen_corpus_cmd(&cfg, a),
        Command::CalibrateThresholds(a) => commands::calibrate_thresholds(&cfg, a),
        Command::Classify(a) => commands::classify(&cfg, a),
        Command::TrainVision(a) => commands::train_vision(&cfg, a),
        Command::EvalVision(a) => commands::eval_vision(&cfg, a),
        Command::Metrics(a) => commands::metrics(&cfg, a),
        Command::Report(a) => commands::report(&cfg, a),
        Command::Serve(a) => serve_cmd(cfg, a),
        Command::Replay(_) => unreachable!("handled above"),
    }
}

fn serve_cmd(cfg: anastomosis_core::config::GlobalConfig, a: &args::ServeArgs) -> Result<()> {
    let opts = serve::ServeOptions {
        scenario: commands::load_scenario(a.scenario.as_deref(), &cfg)?,
        speedup: a.speedup,
        exit_when_done: a.exit_when_done,
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(format!("tokio runtime: {e}")))?;
    let out_root = commands::out_dir(&cfg);
    let (seed, hash) = (cfg.seed, cfg.hash());
    let Some(done) = rt.block_on(serve::serve(cfg, &a.host, a.port, opts))? else {
        return Ok(());
    };
    let mut out = output::OutputDir::create(&out_root)?;
    out.write("serve/report.json", done.report.to_json_pretty())?;
    out.write("serve/report.md", done.report.to_markdown())?;
    out.write("serve/events.jsonl", done.log_text())?;
    let details = serde_json::json!({
        "outcome": done.report.outcome,
        "state_trace_hash": done.report.state_trace_hash,
    });
    out.finish("serve", seed, &hash, details)?;
    Ok(())
}
