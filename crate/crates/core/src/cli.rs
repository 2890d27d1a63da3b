//! Command-line surface: `petseg <subcommand> [options]`.
//!
//! Every subcommand resolves the experiment config (defaults, then
//! `--config`, then `--set` overrides, then `--seed`), writes it to
//! `<out>/resolved_config.json` and runs one pipeline stage.
//!
//! Exit codes: 0 success, 1 usage or configuration error (and other
//! failures), 2 missing input files.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evaluate::{comparison_table, evaluate_prediction_dir, Connectivity, EvalReport};
use crate::inference::{predict_manifest, Ensemble};
use crate::io::{ingest_case, write_case, DatasetManifest};
use crate::model::Checkpoint;
use crate::preprocess::preprocess_case;
use crate::synthetic::{synthetic_pretrain_entry, write_synthetic_dataset, SyntheticConfig};
use crate::trainer::{fingerprints_for, pretrain, train_all_folds, PretrainManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_MISSING_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "petseg", version, about = "PET/CT lesion segmentation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON experiment config; unspecified keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override such as `augment.misalign.prob=0.5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Global seed; overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Resample and normalise a dataset onto the training grid.
    Preprocess {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset manifest.
        #[arg(long)]
        cases: PathBuf,
    },
    /// Multi-dataset pretraining with one head per dataset.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Pretraining manifest listing the datasets.
        #[arg(long)]
        datasets: PathBuf,
    },
    /// K-fold fine-tuning with cross-validation report.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset manifest.
        #[arg(long)]
        cases: PathBuf,
        /// Pretrained checkpoint to transfer from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Ensemble inference with time-budgeted test-time mirroring.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        /// A checkpoint file, a training output directory or a directory of `.ckpt` files.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Dataset manifest of the cases to predict.
        #[arg(long)]
        cases: PathBuf,
        /// Per-case time budget in seconds.
        #[arg(long = "budget-s")]
        budget_s: Option<f64>,
        /// Also write fused lesion probabilities.
        #[arg(long)]
        save_probabilities: bool,
    },
    /// Score `<case_id>_pred.nii.gz` files against ground truth.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory with predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset manifest with ground-truth lesion masks.
        #[arg(long)]
        gt: PathBuf,
        /// Component connectivity: 6, 18 or 26.
        #[arg(long, default_value_t = 18)]
        connectivity: usize,
        /// Row label in the table.
        #[arg(long, default_value = "evaluation")]
        setting: String,
    },
    /// Combine evaluation reports into one comparison table.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        /// `NAME=PATH` where PATH is a `report.json` or a directory holding one (repeatable).
        #[arg(long = "run", value_name = "NAME=PATH", required = true)]
        runs: Vec<String>,
    },
    /// Write a synthetic PET/CT dataset (and optionally pretraining datasets).
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of PET/CT cases.
        #[arg(long, default_value_t = 8)]
        cases: usize,
        /// Cubic volume edge length in voxels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Cases per synthetic pretraining dataset (0 skips them).
        #[arg(long, default_value_t = 0)]
        pretrain_cases: usize,
    },
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Preprocess { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Train { common, .. }
            | Command::Predict { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Report { common, .. }
            | Command::Synth { common, .. } => common,
        }
    }
}

/// Exit code for a failed stage.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingFile(_) => EXIT_MISSING_INPUT,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_INPUT,
        _ => EXIT_USAGE,
    }
}

/// Parse `argv` (including the program name), run the stage and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn resolve_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    if let Some(path) = &common.config {
        require_file(path)?;
    }
    let mut config = ExperimentConfig::resolve(common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn prepare_out(out: &Path, config: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("resolved_config.json");
    std::fs::write(&path, config.to_json_pretty()).map_err(|e| Error::io(&path, e))
}

pub fn execute(command: &Command) -> Result<()> {
    let common = command.common();
    let mut config = resolve_config(common)?;
    if let Command::Predict { budget_s: Some(b), .. } = command {
        if !(*b > 0.0) {
            return Err(Error::Config("--budget-s must be positive".into()));
        }
        config.inference.tta_budget_s = *b;
    }
    check_inputs(command)?;
    let out = common.out.as_path();
    prepare_out(out, &config)?;
    match command {
        Command::Preprocess { cases, .. } => run_preprocess(&config, cases, out),
        Command::Pretrain { datasets, .. } => run_pretrain(&config, datasets, out),
        Command::Train { cases, pretrained, .. } => {
            let manifest = DatasetManifest::load(cases)?;
            let pretrained = pretrained.as_ref().map(Checkpoint::load).transpose()?;
            let cv = train_all_folds(&config, &manifest, pretrained.as_ref(), out)?;
            print!("{}", cv.report.to_table("cross-validation"));
            Ok(())
        }
        Command::Predict {
            checkpoints,
            cases,
            save_probabilities,
            ..
        } => {
            let paths = discover_checkpoints(checkpoints)?;
            let ensemble = Ensemble::load(&paths, &config)?;
            let manifest = DatasetManifest::load(cases)?;
            let timings = predict_manifest(&ensemble, &manifest, &config.inference, out, *save_probabilities)?;
            for (id, t) in timings {
                println!(
                    "{id}: {} fold(s), mirror axes {:?}, {:.1} s",
                    t.folds_used, t.chosen_axes, t.total_s
                );
            }
            Ok(())
        }
        Command::Evaluate {
            pred,
            gt,
            connectivity,
            setting,
            ..
        } => {
            let connectivity = Connectivity::from_neighbours(*connectivity)?;
            let manifest = DatasetManifest::load(gt)?;
            let report = evaluate_prediction_dir(pred, &manifest, None, connectivity)?;
            report.write_all(out, setting)?;
            print!("{}", report.to_table(setting));
            Ok(())
        }
        Command::Report { runs, .. } => run_report(runs, out),
        Command::Synth {
            cases,
            size,
            pretrain_cases,
            ..
        } => run_synth(&config, *cases, *size, *pretrain_cases, out),
    }
}

fn parse_run(item: &str) -> Result<(String, PathBuf)> {
    let (name, path) = item
        .split_once('=')
        .filter(|(n, p)| !n.is_empty() && !p.is_empty())
        .ok_or_else(|| Error::InvalidArgument(format!("--run `{item}` is not NAME=PATH")))?;
    let path = PathBuf::from(path);
    let path = if path.is_dir() { path.join("report.json") } else { path };
    Ok((name.to_string(), path))
}

fn check_inputs(command: &Command) -> Result<()> {
    match command {
        Command::Preprocess { cases, .. } => require_file(cases),
        Command::Pretrain { datasets, .. } => require_file(datasets),
        Command::Train { cases, pretrained, .. } => {
            require_file(cases)?;
            pretrained.as_deref().map_or(Ok(()), require_file)
        }
        Command::Predict { checkpoints, cases, .. } => {
            if !checkpoints.exists() {
                return Err(Error::MissingFile(checkpoints.clone()));
            }
            require_file(cases)
        }
        Command::Evaluate { pred, gt, .. } => {
            require_dir(pred)?;
            require_file(gt)
        }
        Command::Report { runs, .. } => {
            for r in runs {
                require_file(&parse_run(r)?.1)?;
            }
            Ok(())
        }
        Command::Synth { cases, size, .. } => {
            if *cases == 0 || *size < 8 {
                return Err(Error::InvalidArgument("synth needs ≥ 1 case and size ≥ 8".into()));
            }
            Ok(())
        }
    }
}

/// A checkpoint file, the per-fold final checkpoints of a training run, or
/// every `.ckpt` directly inside a directory.
pub fn discover_checkpoints(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    require_dir(path)?;
    let list = |dir: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let mut found: Vec<PathBuf> = list(path)?
        .into_iter()
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("fold_")))
        .map(|d| d.join("checkpoint_final.ckpt"))
        .filter(|p| p.is_file())
        .collect();
    if found.is_empty() {
        found = list(path)?
            .into_iter()
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "ckpt"))
            .collect();
    }
    if found.is_empty() {
        return Err(Error::MissingFile(path.join("*.ckpt")));
    }
    Ok(found)
}

fn run_preprocess(config: &ExperimentConfig, cases: &Path, out: &Path) -> Result<()> {
    let manifest = DatasetManifest::load(cases)?;
    let raw = manifest.cases.iter().map(ingest_case).collect::<Result<Vec<_>>>()?;
    let fingerprints = fingerprints_for(config, &raw)?;
    if let Some(fp) = &fingerprints {
        fp.save(out.join("fingerprints.json"))?;
    }
    let dir = out.join("cases");
    let mut written = DatasetManifest::default();
    for case in &raw {
        let pre = preprocess_case(case, &config.preprocess, fingerprints.as_ref())?;
        written.cases.push(write_case(&pre, &dir)?);
    }
    written.save(dir.join("manifest.json"))?;
    println!("preprocessed {} case(s) into {}", raw.len(), dir.display());
    Ok(())
}

fn run_pretrain(config: &ExperimentConfig, datasets: &Path, out: &Path) -> Result<()> {
    let entries = PretrainManifest::load(datasets)?.load_entries(config.pretrain.target_spacing)?;
    let outcome = pretrain(config, &entries, Some(&out.join("pretrain_log.jsonl")))?;
    outcome.checkpoint.save(out.join("pretrained.ckpt"))?;
    let steps = out.join("head_steps.json");
    std::fs::write(&steps, serde_json::to_string_pretty(&outcome.head_steps)?).map_err(|e| Error::io(&steps, e))?;
    for (head, n) in &outcome.head_steps {
        println!("{head}: {n} step(s)");
    }
    Ok(())
}

fn run_report(runs: &[String], out: &Path) -> Result<()> {
    let reports = runs
        .iter()
        .map(|r| {
            let (name, path) = parse_run(r)?;
            Ok((name, EvalReport::load_json(path)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<(&str, &EvalReport)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let table = comparison_table(&rows);
    let path = out.join("table.txt");
    std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    let summary: serde_json::Map<String, serde_json::Value> = reports
        .iter()
        .map(|(n, r)| Ok((n.clone(), serde_json::to_value(&r.aggregates)?)))
        .collect::<Result<_>>()?;
    let path = out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    print!("{table}");
    Ok(())
}

fn run_synth(config: &ExperimentConfig, cases: usize, size: usize, pretrain_cases: usize, out: &Path) -> Result<()> {
    let cfg = SyntheticConfig {
        num_cases: cases,
        shape: [size; 3],
        spacing: config.preprocess.target_spacing,
        seed: config.seed,
        ..SyntheticConfig::default()
    };
    let manifest = write_synthetic_dataset(&cfg, out.join("dataset"))?;
    println!("dataset manifest: {}", manifest.display());
    if pretrain_cases > 0 {
        let shape = [size; 3];
        let entries = [
            synthetic_pretrain_entry("synth_ct", pretrain_cases, 4, shape, config.seed ^ 1)?,
            synthetic_pretrain_entry("synth_mr", pretrain_cases.div_ceil(2), 3, shape, config.seed ^ 2)?,
        ];
        let path = PretrainManifest::write_entries(&entries, config.pretrain.target_spacing, out.join("pretrain"))?;
        println!("pretraining manifest: {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_inputs_map_to_exit_two() {
        assert_eq!(exit_code(&Error::MissingFile("x".into())), EXIT_MISSING_INPUT);
        let nf = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(exit_code(&Error::io(Path::new("x"), nf)), EXIT_MISSING_INPUT);
        assert_eq!(exit_code(&Error::Config("bad".into())), EXIT_USAGE);
    }

    #[test]
    fn run_specs_split_on_the_first_equals_sign() {
        let (name, path) = parse_run("a=b=c.json").unwrap();
        assert_eq!((name.as_str(), path), ("a", PathBuf::from("b=c.json")));
        assert!(parse_run("=x").is_err());
        assert!(parse_run("x=").is_err());
    }

    #[test]
    fn checkpoint_discovery_prefers_fold_directories() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        std::fs::write(d.join("z.ckpt"), b"").unwrap();
        std::fs::write(d.join("a.ckpt"), b"").unwrap();
        assert_eq!(discover_checkpoints(d).unwrap(), vec![d.join("a.ckpt"), d.join("z.ckpt")]);
        for k in [1, 0] {
            std::fs::create_dir(d.join(format!("fold_{k}"))).unwrap();
            std::fs::write(d.join(format!("fold_{k}/checkpoint_final.ckpt")), b"").unwrap();
        }
        let found = discover_checkpoints(d).unwrap();
        assert_eq!(found, vec![d.join("fold_0/checkpoint_final.ckpt"), d.join("fold_1/checkpoint_final.ckpt")]);
        assert_eq!(discover_checkpoints(&d.join("a.ckpt")).unwrap(), vec![d.join("a.ckpt")]);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(discover_checkpoints(empty.path()), Err(Error::MissingFile(_))));
    }
}
