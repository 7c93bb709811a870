use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anastomosis_core::config::GlobalConfig;
use anastomosis_core::controller::{replay, simulate_runs, ProcedureOutput, Scenario};
use anastomosis_core::metrics::{compare_report, raw_measurements_csv, summarize_runs, OutcomeFixtures, RunOutcome};
use anastomosis_core::rng::derive_named;
use anastomosis_core::synth::{
    classify_corpus, gen_corpus, linspace, pick_threshold_point, roc_csv, sweep_thresholds, Corpus, CorpusSpec,
};
use anastomosis_core::vision::{build_dataset, curve_csv, evaluate, read_dataset, train, write_dataset, PairClassifier};
use serde::Serialize;
use serde_json::json;

use crate::args::{
    CalibrateArgs, CorpusArgs, EvalVisionArgs, GenCorpusArgs, GlobalArgs, InputArgs, ReplayArgs, ReportArgs,
    SimulateArgs, TrainVisionArgs,
};
use crate::error::{CliError, Result};
use crate::output::OutputDir;

pub const DEFAULT_OUT: &str = "out";
pub const MODEL_FILE: &str = "vision_model.bin";

pub fn load_config(g: &GlobalArgs) -> Result<GlobalConfig> {
    let mut cfg = match &g.config {
        Some(path) => GlobalConfig::load(path)?,
        None => GlobalConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.output_dir = Some(out.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn out_dir(cfg: &GlobalConfig) -> PathBuf {
    PathBuf::from(cfg.output_dir.as_deref().unwrap_or(DEFAULT_OUT))
}

pub fn load_scenario(path: Option<&Path>, cfg: &GlobalConfig) -> Result<Scenario> {
    let path = path.map(Path::to_path_buf).or_else(|| cfg.policy_path.as_ref().map(PathBuf::from));
    match path {
        None => Ok(Scenario::default()),
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
            Scenario::from_json_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Prints a line to stdout; a closed pipe is not an error.
pub fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub runs: usize,
    pub completed: usize,
    pub autonomy_fraction: f64,
    pub interventions: usize,
    pub engaged_drives: usize,
    pub drives: usize,
    pub crossed_stitch_runs: usize,
    pub disconnects: u32,
    pub mean_time_per_stitch_s: f64,
}

pub fn summarize_outputs(outputs: &[ProcedureOutput], n_sutures: usize) -> SimulateSummary {
    let n = outputs.len().max(1) as f64;
    SimulateSummary {
        runs: outputs.len(),
        completed: outputs.iter().filter(|o| o.report.completed()).count(),
        autonomy_fraction: outputs.iter().map(|o| o.report.autonomy_fraction(n_sutures)).sum::<f64>() / n,
        interventions: outputs.iter().map(|o| o.report.interventions.len()).sum(),
        engaged_drives: outputs.iter().map(|o| o.report.engaged_drives()).sum(),
        drives: outputs.iter().map(|o| o.report.drives()).sum(),
        crossed_stitch_runs: outputs.iter().filter(|o| o.report.crossed_stitch).count(),
        disconnects: outputs.iter().map(|o| o.report.disconnect_count).sum(),
        mean_time_per_stitch_s: outputs.iter().map(|o| o.report.metrics.time_per_stitch_s).sum::<f64>() / n,
    }
}

pub fn simulate(cfg: &GlobalConfig, args: &SimulateArgs) -> Result<()> {
    if args.runs == 0 {
        return Err(CliError::Config("--runs must be at least 1".into()));
    }
    let scenario = load_scenario(args.scenario.as_deref(), cfg)?;
    let outputs = simulate_runs(cfg, args.runs, &scenario, args.threads)?;
    let mut out = OutputDir::create(&out_dir(cfg))?;
    out.write("config.json", cfg.to_json_pretty())?;
    for o in &outputs {
        let dir = format!("runs/run_{:03}", o.report.run);
        out.write(&format!("{dir}/report.json"), o.report.to_json_pretty())?;
        out.write(&format!("{dir}/report.md"), o.report.to_markdown())?;
        out.write(&format!("{dir}/events.jsonl"), o.log_text())?;
        eprintln!(
            "run {:>3} seed {:>20}: {:?}, {:.1} s/stitch, {} interventions",
            o.report.run,
            o.report.seed,
            o.report.outcome,
            o.report.metrics.time_per_stitch_s,
            o.report.interventions.len()
        );
    }
    let runs: Vec<RunOutcome> = outputs.iter().filter(|o| o.report.completed()).map(|o| o.report.to_run_outcome()).collect();
    out.write("runs.json", pretty(&runs))?;
    out.write("raw_measurements.csv", raw_measurements_csv(&runs))?;
    if !runs.is_empty() {
        let fixtures = OutcomeFixtures::embedded();
        let cmp = compare_report(&runs, Some(&fixtures))?;
        out.write("comparison.json", pretty(&cmp))?;
        out.write("comparison.md", cmp.to_markdown())?;
    }
    let summary = summarize_outputs(&outputs, cfg.controller.n_sutures);
    out.write("summary.json", pretty(&summary))?;
    emit(&pretty(&summary));
    out.finish("simulate", cfg.seed, &cfg.hash(), serde_json::to_value(&summary).expect("summary serializes"))?;
    Ok(())
}

pub fn gen_corpus_cmd(cfg: &GlobalConfig, args: &GenCorpusArgs) -> Result<()> {
    let level = args.noise_level.unwrap_or(cfg.oct.calibrated_noise_level);
    let mut spec = CorpusSpec::standard(level);
    spec.noise_model = cfg.oct.noise_model;
    let corpus = gen_corpus(&spec, derive_named(cfg.seed, "corpus"))?;
    let mut out = OutputDir::create(&out_dir(cfg))?;
    let dir = args.corpus.clone().unwrap_or_else(|| out.root().join("corpus"));
    corpus.write_to(&dir)?;
    let details = json!({
        "corpus_dir": dir.display().to_string(),
        "scans": corpus.entries.len(),
        "noise_level": level,
        "content_hash": corpus.content_hash(),
    });
    out.write("corpus.json", pretty(&details))?;
    emit(&pretty(&details));
    out.finish("gen-corpus", cfg.seed, &cfg.hash(), details)?;
    Ok(())
}

fn read_corpus(dir: &Path) -> Result<Corpus> {
    if !dir.is_dir() {
        return Err(CliError::Io(format!("corpus directory {} not found", dir.display())));
    }
    Ok(Corpus::read_from(dir)?)
}

pub fn calibrate_thresholds(cfg: &GlobalConfig, args: &CalibrateArgs) -> Result<()> {
    if args.grid < 2 {
        return Err(CliError::Config("--grid must be at least 2".into()));
    }
    let corpus = read_corpus(&args.corpus)?;
    let base = cfg.oct.thresholds;
    let points = sweep_thresholds(&corpus, &base, &linspace(0.05, 0.30, args.grid), &linspace(0.05, 0.40, args.grid))?;
    let best = pick_threshold_point(&points, &base).ok_or_else(|| CliError::Runtime("empty sweep".into()))?;
    let mut out = OutputDir::create(&out_dir(cfg))?;
    out.write("roc.csv", roc_csv(&points))?;
    let chosen = json!({
        "operating_point": best,
        "thresholds": { "tau_air": best.tau_air, "tau_rmse": best.tau_rmse, "tau_surface": base.tau_surface, "smoothing_window": base.smoothing_window },
        "scans": corpus.entries.len(),
    });
    out.write("operating_point.json", pretty(&chosen))?;
    emit(&pretty(&chosen));
    out.finish("calibrate-thresholds", cfg.seed, &cfg.hash(), chosen)?;
    Ok(())
}

pub fn classify(cfg: &GlobalConfig, args: &CorpusArgs) -> Result<()> {
    let corpus = read_corpus(&args.corpus)?;
    let (labels, summary) = classify_corpus(&corpus, &cfg.oct.thresholds)?;
    let mut csv = String::from("file,label,predicted\n");
    for (e, l) in corpus.entries.iter().zip(&labels) {
        csv.push_str(&format!("{},{},{}\n", e.file, e.label.as_str(), l.as_str()));
    }
    let mut out = OutputDir::create(&out_dir(cfg))?;
    out.write("labels.csv", &csv)?;
    let details = json!({
        "scans": summary.total(),
        "correct": summary.correct(),
        "accuracy": summary.accuracy(),
        "confusion": summary,
    });
    out.write("confusion.json", pretty(&details))?;
    emit(csv.trim_end());
    emit(&format!("accuracy {:.4} ({}/{})", summary.accuracy(), summary.correct(), summary.total()));
    out.finish("classify", cfg.seed, &cfg.hash(), details)?;
    Ok(())
}

pub fn train_vision(cfg: &GlobalConfig, args: &TrainVisionArgs) -> Result<()> {
    let split = match &args.dataset {
        Some(dir) => read_dataset(dir)?,
        None => build_dataset(
            cfg.vision.dataset_pairs,
            cfg.vision.imbalance_ratio,
            &cfg.devices.camera,
            derive_named(cfg.seed, "vision-dataset"),
        )?,
    };
    let mut out = OutputDir::create(&out_dir(cfg))?;
    if args.save_dataset && args.dataset.is_none() {
        let dir = out.root().join("dataset");
        write_dataset(&dir, &split)?;
        out.adopt("dataset/manifest.json")?;
    }
    let outcome = train(&split, &cfg.vision.train, derive_named(cfg.seed, "vision-train"))?;
    let model_path = out.root().join(MODEL_FILE);
    outcome.classifier.save(&model_path)?;
    out.adopt(MODEL_FILE)?;
    out.write("training_curve.csv", curve_csv(&outcome.curve))?;
    let details = json!({
        "epochs": outcome.curve.len(),
        "best_epoch": outcome.best_epoch,
        "stopped_early": outcome.stopped_early,
        "val": outcome.val_metrics,
        "test": outcome.test_metrics,
        "train_config_hash": cfg.vision.train.hash(),
    });
    out.write("training.json", pretty(&details))?;
    emit(&pretty(&details));
    out.finish("train-vision", cfg.seed, &cfg.hash(), details)?;
    Ok(())
}

pub fn eval_vision(cfg: &GlobalConfig, args: &EvalVisionArgs) -> Result<()> {
    let model = PairClassifier::load(&args.model)?;
    let split = match &args.dataset {
        Some(dir) => read_dataset(dir)?,
        None => build_dataset(
            cfg.vision.dataset_pairs,
            cfg.vision.imbalance_ratio,
            &cfg.devices.camera,
            derive_named(cfg.seed, "vision-dataset"),
        )?,
    };
    let metrics = evaluate(&model, &split.test)?;
    let mut out = OutputDir::create(&out_dir(cfg))?;
    let details = serde_json::to_value(metrics).expect("metrics serialize");
    out.write("eval.json", pretty(&details))?;
    emit(&pretty(&details));
    out.finish("eval-vision", cfg.seed, &cfg.hash(), details)?;
    Ok(())
}

fn read_runs(path: &Path) -> Result<Vec<RunOutcome>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn metrics(cfg: &GlobalConfig, args: &InputArgs) -> Result<()> {
    let runs = read_runs(&args.input)?;
    let summary = summarize_runs(&runs)?;
    let mut out = OutputDir::create(&out_dir(cfg))?;
    out.write("metrics.json", pretty(&summary))?;
    out.write("raw_measurements.csv", raw_measurements_csv(&runs))?;
    emit(&pretty(&summary));
    out.finish("metrics", cfg.seed, &cfg.hash(), serde_json::to_value(&summary).expect("summary serializes"))?;
    Ok(())
}

pub fn report(cfg: &GlobalConfig, args: &ReportArgs) -> Result<()> {
    let runs = read_runs(&args.input)?;
    let fixtures = OutcomeFixtures::embedded();
    let cmp = compare_report(&runs, (!args.no_fixtures).then_some(&fixtures))?;
    let mut out = OutputDir::create(&out_dir(cfg))?;
    out.write("comparison.json", pretty(&cmp))?;
    let md = cmp.to_markdown();
    out.write("comparison.md", &md)?;
    emit(md.trim_end());
    out.finish("report", cfg.seed, &cfg.hash(), json!({ "runs": runs.len(), "degenerate": cmp.degenerate }))?;
    Ok(())
}

/// A hash mismatch is a runtime failure.
pub fn replay_cmd(args: &ReplayArgs) -> Result<()> {
    let text = fs::read_to_string(&args.log).map_err(|e| CliError::io(&args.log, e))?;
    let res = replay(&text)?;
    emit(&pretty(&res));
    if res.matched {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "state-trace hash mismatch: log {} replayed {}",
            res.expected_hash, res.replayed_hash
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::args::GlobalArgs;

    #[test]
    fn overrides_apply_before_validation() {
        let g = GlobalArgs {
            config: None,
            seed: Some(42),
            out: Some(PathBuf::from("elsewhere")),
        };
        let cfg = load_config(&g).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(out_dir(&cfg), PathBuf::from("elsewhere"));
        assert_eq!(out_dir(&GlobalConfig::default()), PathBuf::from(DEFAULT_OUT));
    }

    #[test]
    fn scenario_file_errors_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        fs::write(&p, r#"{ "faults": "soon" }"#).unwrap();
        let err = load_scenario(Some(&p), &GlobalConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert_eq!(load_scenario(None, &GlobalConfig::default()).unwrap(), Scenario::default());
    }
}
