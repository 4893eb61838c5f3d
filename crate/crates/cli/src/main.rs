use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use warpdet::detector::load_checkpoint;
use warpdet::evaluation::evaluate_model;
use warpdet::experiment::{
    emit_report, run_ablation_matrix, run_alpha_sweep, run_experiment, run_gamma_alpha_grid, ExperimentConfig,
};
use warpdet::task_stream::{save_dataset, ClassId};
use warpdet::Error;

const DEFAULT_OUT: &str = "runs";

#[derive(Parser, Debug)]
#[command(name = "warpdet", version, about = "Class-incremental detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `train.alpha=0.4` or `seeds=[0]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to `$WARPDET_OUT/<name>-<command>`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, env = "WARPDET_OUT", default_value = DEFAULT_OUT)]
    out_root: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset to `<out>/train` and `<out>/test`.
    GenerateData(ConfigArgs),
    /// Train the configured task sequence for every seed.
    Train(ConfigArgs),
    /// Run the six distillation / warp / fine-tuning combinations.
    Ablate(ConfigArgs),
    /// Sweep the distillation weight on a two-task setting.
    SweepAlpha {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.4,0.6,0.8")]
        alphas: Vec<f64>,
    },
    /// Grid over warp interval and distillation weight.
    GridGammaAlpha {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "20,200,2000")]
        gammas: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.4")]
        alphas: Vec<f64>,
    },
    /// Evaluate a checkpoint on the configured test set.
    Evaluate {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class ids counted as old for mAP-old, e.g. `1-10` or `1,2,5`.
        #[arg(long, default_value = "")]
        old_classes: String,
    },
    /// Regenerate tables and plots of a finished run directory.
    Report { run_dir: PathBuf },
}

/// Sets `key` (dotted path) in a TOML table. The value is parsed as a TOML
/// literal, falling back to a plain string; it stays a plain string when the
/// current value is one, so `preset=20` means the preset named "20".
fn apply_override(root: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| anyhow!("override `{assignment}` is not KEY=VALUE"))?;
    let literal = toml::from_str::<toml::Table>(&format!("v = {raw}")).ok().and_then(|mut t| t.remove("v"));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in path {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{p}` in `{key}` is not a table"))?;
    }
    let value = match (literal, table.get(*last)) {
        (Some(v @ toml::Value::String(_)), _) => v,
        (_, Some(toml::Value::String(_))) | (None, _) => toml::Value::String(raw.to_string()),
        (Some(v), _) => v,
    };
    table.insert(last.to_string(), value);
    Ok(())
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<ExperimentConfig> {
    let mut table: toml::Table = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| Error::Parse { path: p.clone(), message: e.to_string() })?
        }
        None => toml::Table::try_from(ExperimentConfig::default())?,
    };
    for o in &args.overrides {
        apply_override(&mut table, o)?;
    }
    let config: ExperimentConfig =
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn out_dir(args: &ConfigArgs, config: &ExperimentConfig, command: &str) -> PathBuf {
    args.out.clone().unwrap_or_else(|| args.out_root.join(format!("{}-{command}", config.name)))
}

fn parse_classes(spec: &str) -> anyhow::Result<BTreeSet<ClassId>> {
    let mut out = BTreeSet::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => out.extend((a.parse::<usize>()?..=b.parse::<usize>()?).map(ClassId)),
            None => {
                out.insert(ClassId(part.parse()?));
            }
        }
    }
    Ok(out)
}

fn report_written(dir: &Path) {
    println!("results written to {}", dir.display());
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData(args) => {
            let config = load_config(&args)?;
            let dir = out_dir(&args, &config, "data");
            let data = config.load_data()?;
            save_dataset(&dir.join("train"), &data.train, &data.registry)?;
            save_dataset(&dir.join("test"), &data.test, &data.registry)?;
            println!("{} train and {} test images written to {}", data.train.len(), data.test.len(), dir.display());
        }
        Command::Train(args) => {
            let config = load_config(&args)?;
            let dir = out_dir(&args, &config, "train");
            run_experiment(&config, Some(&dir))?;
            print!("{}", fs::read_to_string(dir.join("summary.md"))?);
            report_written(&dir);
        }
        Command::Ablate(args) => {
            let config = load_config(&args)?;
            let dir = out_dir(&args, &config, "ablate");
            run_ablation_matrix(&config, Some(&dir))?;
            print!("{}", fs::read_to_string(dir.join("ablation.md"))?);
            report_written(&dir);
        }
        Command::SweepAlpha { args, alphas } => {
            let config = load_config(&args)?;
            let dir = out_dir(&args, &config, "sweep-alpha");
            run_alpha_sweep(&config, &alphas, Some(&dir))?;
            print!("{}", fs::read_to_string(dir.join("alpha_sweep.md"))?);
            report_written(&dir);
        }
        Command::GridGammaAlpha { args, gammas, alphas } => {
            let config = load_config(&args)?;
            let dir = out_dir(&args, &config, "grid-gamma-alpha");
            run_gamma_alpha_grid(&config, &gammas, &alphas, Some(&dir))?;
            print!("{}", fs::read_to_string(dir.join("gamma_alpha.md"))?);
            report_written(&dir);
        }
        Command::Evaluate { args, checkpoint, old_classes } => {
            let config = load_config(&args)?;
            let (model, _) = load_checkpoint(&checkpoint)?;
            let old = parse_classes(&old_classes).map_err(|e| Error::Config(format!("bad --old-classes: {e}")))?;
            let data = config.load_data()?;
            let seen = model.seen_classes().clone();
            info!("evaluating {} on {} images", checkpoint.display(), data.test.len());
            let report = evaluate_model(&model, &data.test, &seen, &old, &config.eval)?;
            print!("{}", report.to_markdown(&data.registry));
            if let Some(dir) = &args.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
                report_written(dir);
            }
        }
        Command::Report { run_dir } => {
            for p in emit_report(&run_dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// 1 for invalid input, 2 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Parse { .. } | Error::UnknownClass(_)) => 1,
        Some(_) => 2,
        None if err.downcast_ref::<toml::ser::Error>().is_some() => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let mut t = toml::Table::try_from(ExperimentConfig::default()).unwrap();
        apply_override(&mut t, "train.alpha=0.4").unwrap();
        apply_override(&mut t, "seeds=[3, 4]").unwrap();
        apply_override(&mut t, "preset=15+5").unwrap();
        apply_override(&mut t, "name=20").unwrap();
        let c: ExperimentConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(c.train.alpha, 0.4);
        assert_eq!(c.seeds, [3, 4]);
        assert_eq!(c.preset, "15+5");
        assert_eq!(c.name, "20");
    }

    #[test]
    fn class_ranges() {
        let c = parse_classes("1-3, 7").unwrap();
        assert_eq!(c.into_iter().map(|c| c.0).collect::<Vec<_>>(), [1, 2, 3, 7]);
        assert!(parse_classes("").unwrap().is_empty());
        assert!(parse_classes("x").is_err());
    }
}
