//! `seglab`: generate synthetic scenarios, run incremental-training
//! methods on them, and compare the resulting reports.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the
//! `--config` TOML file, individual command-line flags. The environment
//! variable `SEGLAB_OUT_ROOT`, when set, anchors every relative output
//! path. Exit codes: 0 success, 2 configuration error, 3 runtime error.

pub mod compare;
pub mod manifest;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use seglab_core::io::{read_checkpoint, read_scenario, write_checkpoint, write_scenario};
use seglab_core::scenario::{generate, ScenarioSpec};
use seglab_core::train::{
    run_on_scenario, run_steps_from, Ablation, MethodConfig, RunOutput, TrainingConfig,
};
use seglab_core::{Error, Result};

use manifest::{
    sha256_file, tool_version, write_json, GenerateManifest, MethodRef, RunManifest, ScenarioRef,
    MANIFEST_VERSION,
};
use report::{aggregate_csv, report_csv, svg_chart, SeedReport};

#[derive(Parser)]
#[command(
    name = "seglab",
    version,
    about = "Incremental semantic segmentation lab on synthetic scenarios"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a scenario file from a spec.
    Generate(GenerateArgs),
    /// Train a method on a scenario and write reports.
    Run(RunArgs),
    /// Compare the reports of several runs on the same scenario.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Scenario spec as TOML; omitted fields (or the whole flag) use
    /// built-in defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output scenario file; a manifest is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MethodName {
    /// Sequential fine-tuning, no mechanism (lower bound).
    Ft,
    /// One offline training pass on all data (upper bound).
    Joint,
    /// Pseudo labels from the frozen model's argmax.
    Naive,
    /// Pseudo labels gated by per-class median entropy.
    Median,
    /// Uniform weight fusion of the old and new model.
    Wf,
    /// Full method: guided pseudo labels, prototype replay, selective
    /// consolidation.
    Cs2k,
}

impl MethodName {
    fn as_str(self) -> &'static str {
        match self {
            MethodName::Ft => "ft",
            MethodName::Joint => "joint",
            MethodName::Naive => "naive",
            MethodName::Median => "median",
            MethodName::Wf => "wf",
            MethodName::Cs2k => "cs2k",
        }
    }

    fn config(self) -> MethodConfig {
        match self {
            MethodName::Ft => MethodConfig::ft(),
            MethodName::Joint => MethodConfig::joint(),
            MethodName::Naive => MethodConfig::naive_pl(),
            MethodName::Median => MethodConfig::median_pl(),
            MethodName::Wf => MethodConfig::wf(),
            MethodName::Cs2k => MethodConfig::cs2k(),
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum AblationName {
    /// Degrade guided pseudo labels to the naive argmax.
    Ppl,
    /// Drop the self-jitter replay term.
    PcaSa,
    /// Drop the mixture replay term.
    PcaIa,
    /// Drop selective consolidation.
    Wsc,
}

impl AblationName {
    fn as_str(self) -> &'static str {
        match self {
            AblationName::Ppl => "ppl",
            AblationName::PcaSa => "pca-sa",
            AblationName::PcaIa => "pca-ia",
            AblationName::Wsc => "wsc",
        }
    }

    fn ablation(self) -> Ablation {
        match self {
            AblationName::Ppl => Ablation::Ppl,
            AblationName::PcaSa => Ablation::PcaSa,
            AblationName::PcaIa => Ablation::PcaIa,
            AblationName::Wsc => Ablation::Wsc,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file produced by `generate`.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum)]
    method: MethodName,
    /// Mechanisms to remove from the full method (cs2k only).
    #[arg(long, value_enum, value_delimiter = ',')]
    ablate: Vec<AblationName>,
    /// Training seeds; one report directory per seed.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    /// Output directory for the manifest, per-seed reports, and aggregate.
    #[arg(long)]
    out: PathBuf,
    /// Training configuration as TOML; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Also write an mIoU-vs-step chart per seed.
    #[arg(long)]
    svg: bool,
    /// Resume each seed from its step N-1 checkpoint and retrain steps
    /// N onward.
    #[arg(long)]
    from_step: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories; the first is the baseline for delta columns.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the comparison as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Anchor relative output paths at `SEGLAB_OUT_ROOT` when it is set.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("SEGLAB_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn read_toml<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let spec: ScenarioSpec = match &args.spec {
        Some(path) => read_toml(path)?,
        None => ScenarioSpec::default(),
    };
    spec.validate()?;
    let scenario = generate(&spec, args.seed)?;
    let out = resolve_out(&args.out);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_scenario(&out, &scenario)?;
    let manifest = GenerateManifest {
        format_version: MANIFEST_VERSION,
        tool_version: tool_version().to_string(),
        spec,
        seed: args.seed,
        sha256: sha256_file(&out)?,
    };
    let manifest_path = out.with_file_name(format!(
        "{}.manifest.json",
        out.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".into())
    ));
    write_json(&manifest_path, &manifest)?;
    println!(
        "wrote scenario with {} steps to {}",
        scenario.spec.num_steps(),
        out.display()
    );
    Ok(())
}

fn method_label(preset: MethodName, ablations: &[AblationName]) -> String {
    let mut label = preset.as_str().to_string();
    for a in ablations {
        label.push_str("-wo-");
        label.push_str(a.as_str());
    }
    label
}

fn resolve_training(args: &RunArgs) -> Result<TrainingConfig> {
    let mut training: TrainingConfig = match &args.config {
        Some(path) => read_toml(path)?,
        None => TrainingConfig::default(),
    };
    if let Some(epochs) = args.epochs {
        training.epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        training.batch_size = batch;
    }
    if let Some(lr) = args.lr {
        training.learning_rate = lr;
    }
    training.validate()?;
    Ok(training)
}

fn resolve_method(args: &RunArgs) -> Result<MethodRef> {
    let mut ablations = args.ablate.clone();
    ablations.dedup();
    if !ablations.is_empty() && args.method != MethodName::Cs2k {
        return Err(Error::config(
            "--ablate removes mechanisms from the full method; it requires --method cs2k",
        ));
    }
    let mut config = args.method.config();
    for a in &ablations {
        config = config.ablate(a.ablation());
    }
    Ok(MethodRef {
        label: method_label(args.method, &ablations),
        preset: args.method.as_str().to_string(),
        ablations: ablations.iter().map(|a| a.as_str().to_string()).collect(),
        config,
    })
}

fn checkpoint_path(seed_dir: &Path, step: usize) -> PathBuf {
    seed_dir
        .join("checkpoints")
        .join(format!("step_{step:03}.ckpt"))
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let method = resolve_method(args)?;
    let training = resolve_training(args)?;
    if args.seeds.is_empty() {
        return Err(Error::config("--seeds needs at least one seed"));
    }
    let mut unique = args.seeds.clone();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != args.seeds.len() {
        return Err(Error::config("--seeds must not repeat"));
    }

    let scenario = read_scenario(&args.scenario)?;
    let n_steps = scenario.spec.num_steps();
    if let Some(from) = args.from_step {
        if method.config.joint_training {
            return Err(Error::config(
                "joint training has no step checkpoints to resume",
            ));
        }
        if from == 0 || from >= n_steps {
            return Err(Error::config(format!(
                "--from-step must be in 1..={} for this scenario",
                n_steps - 1
            )));
        }
    }

    let out = resolve_out(&args.out);
    fs::create_dir_all(&out)?;
    let run_manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        tool_version: tool_version().to_string(),
        scenario: ScenarioRef {
            path: args.scenario.display().to_string(),
            sha256: sha256_file(&args.scenario)?,
            seed: scenario.seed,
            spec: scenario.spec.clone(),
        },
        method: method.clone(),
        training: training.clone(),
        seeds: args.seeds.clone(),
        svg: args.svg,
    };
    let manifest_path = out.join("manifest.json");
    if args.from_step.is_some() {
        let existing: RunManifest = manifest::read_json(&manifest_path).map_err(|e| {
            Error::config(format!(
                "cannot resume: no readable manifest in {}: {e}",
                out.display()
            ))
        })?;
        run_manifest.check_resumable(&existing)?;
    }
    write_json(&manifest_path, &run_manifest)?;

    let mut seed_reports = Vec::with_capacity(args.seeds.len());
    for &seed in &args.seeds {
        let seed_dir = out.join(format!("seed_{seed}"));
        fs::create_dir_all(seed_dir.join("checkpoints"))?;

        let (steps, output): (Vec<_>, RunOutput) = match args.from_step {
            None => {
                let output = run_on_scenario(&scenario, &method.config, &training, seed)?;
                (output.reports.clone(), output)
            }
            Some(from) => {
                let state = read_checkpoint(&checkpoint_path(&seed_dir, from - 1))?;
                if state.step != from {
                    return Err(Error::config(format!(
                        "checkpoint resumes at step {}, not {from}",
                        state.step
                    )));
                }
                if state.seed != seed {
                    return Err(Error::config(format!(
                        "checkpoint belongs to seed {}, not {seed}",
                        state.seed
                    )));
                }
                let previous = report::read_report(&seed_dir.join("report.json"))?;
                if previous.steps.len() < from {
                    return Err(Error::config(format!(
                        "existing report covers {} steps; cannot resume at step {from}",
                        previous.steps.len()
                    )));
                }
                let output = run_steps_from(&scenario, &method.config, &training, state)?;
                let mut steps = previous.steps[..from].to_vec();
                steps.extend(output.reports.iter().cloned());
                (steps, output)
            }
        };

        for snapshot in &output.snapshots {
            write_checkpoint(&checkpoint_path(&seed_dir, snapshot.step - 1), snapshot)?;
        }
        let seed_report = SeedReport {
            seed,
            scenario_sha256: run_manifest.scenario.sha256.clone(),
            method: method.label.clone(),
            steps,
        };
        report::write_report(&seed_dir.join("report.json"), &seed_report)?;
        fs::write(seed_dir.join("report.csv"), report_csv(&seed_report.steps))?;
        if args.svg {
            fs::write(seed_dir.join("miou.svg"), svg_chart(&seed_report.steps))?;
        }
        seed_reports.push(seed_report);
    }

    fs::write(out.join("aggregate.csv"), aggregate_csv(&seed_reports))?;
    for r in &seed_reports {
        let last = r.steps.last().expect("every run has at least one step");
        println!(
            "{} seed {}: final all-mIoU {}",
            method.label,
            r.seed,
            report::fmt_opt(last.miou_all)
        );
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let summaries = args
        .runs
        .iter()
        .map(|dir| compare::load_run_dir(dir))
        .collect::<Result<Vec<_>>>()?;
    compare::check_same_scenario(&summaries)?;
    print!("{}", compare::compare_console(&summaries));
    if let Some(path) = &args.out {
        let path = resolve_out(path);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, compare::compare_csv(&summaries))?;
    }
    Ok(())
}

/// Parse `args` and execute; the process exit code is returned rather
/// than set, so tests can call this in-process.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path with exit
            // code 0; real usage errors map to the config exit code.
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.cmd {
        Cmd::Generate(args) => cmd_generate(args),
        Cmd::Run(args) => cmd_run(args),
        Cmd::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_labels_include_ablations() {
        assert_eq!(method_label(MethodName::Ft, &[]), "ft");
        assert_eq!(
            method_label(MethodName::Cs2k, &[AblationName::Wsc, AblationName::Ppl]),
            "cs2k-wo-wsc-wo-ppl"
        );
    }

    #[test]
    fn ablate_requires_the_full_method() {
        let args = RunArgs {
            scenario: PathBuf::from("x"),
            method: MethodName::Ft,
            ablate: vec![AblationName::Wsc],
            seeds: vec![1],
            out: PathBuf::from("y"),
            config: None,
            epochs: None,
            batch_size: None,
            lr: None,
            svg: false,
            from_step: None,
        };
        assert!(matches!(
            resolve_method(&args).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn ablate_wsc_turns_consolidation_off() {
        let args = RunArgs {
            scenario: PathBuf::from("x"),
            method: MethodName::Cs2k,
            ablate: vec![AblationName::Wsc],
            seeds: vec![1],
            out: PathBuf::from("y"),
            config: None,
            epochs: None,
            batch_size: None,
            lr: None,
            svg: false,
            from_step: None,
        };
        let m = resolve_method(&args).unwrap();
        assert_eq!(
            m.config.consolidation,
            seglab_core::train::Consolidation::None
        );
        assert_eq!(m.label, "cs2k-wo-wsc");
        let full = resolve_method(&RunArgs {
            ablate: vec![],
            ..args
        })
        .unwrap();
        assert_eq!(full.config, MethodConfig::cs2k());
    }

    #[test]
    fn flag_overrides_beat_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("train.toml");
        fs::write(&cfg, "epochs = 5\nlearning_rate = 0.5\n").unwrap();
        let args = RunArgs {
            scenario: PathBuf::from("x"),
            method: MethodName::Ft,
            ablate: vec![],
            seeds: vec![1],
            out: PathBuf::from("y"),
            config: Some(cfg),
            epochs: Some(9),
            batch_size: None,
            lr: None,
            svg: false,
            from_step: None,
        };
        let t = resolve_training(&args).unwrap();
        assert_eq!(t.epochs, 9);
        assert_eq!(t.learning_rate, 0.5);
        assert_eq!(t.batch_size, TrainingConfig::default().batch_size);
    }

    #[test]
    fn unknown_training_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("train.toml");
        fs::write(&cfg, "epoch_count = 5\n").unwrap();
        let got: Result<TrainingConfig> = read_toml(&cfg);
        assert!(matches!(got.unwrap_err(), Error::Config(_)));
    }
}
