//! Command-line front end.
//!
//! Exit codes: 0 success, 1 verification or training failure, 2 I/O or
//! configuration error, 3 incompatible or unreadable artifacts.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::bench::{permutation_robustness, profile};
use crate::config::{DataConfig, RunConfig, Task, Variant};
use crate::error::{PicError, Result};
use crate::network::build_cascade;
use crate::persist::{self, load_model, save_model};
use crate::synthdata::{Dataset, Protocol};
use crate::train::train;
use crate::verify::{run_verify, VerifyOptions};

/// Environment variable that relocates relative output paths.
pub const OUTPUT_DIR_ENV: &str = "PIC_OUTPUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "pic", version, about = "Permutation invariant temporal convolution toolkit")]
pub struct Cli {
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic activity dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// History CSV; defaults to `<out>.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a model on the test split, optionally under permutations.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Protocols to evaluate, comma separated.
        #[arg(long, value_delimiter = ',')]
        perm: Vec<Protocol>,
        /// Number of permutation seeds (0..k).
        #[arg(long)]
        perm_seeds: Option<usize>,
        /// Drop-table CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Parameter, FLOP and latency profile across depths.
    Profile {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Inclusive range `a..b` or comma list.
        #[arg(long, default_value = "1..4")]
        depths: String,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        /// Timed forward passes per row; 0 skips timing.
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fast invariant suite.
    Verify {
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Fault {
    /// Resolve row-max ties to the highest index.
    TieBreak,
}

impl clap::builder::ValueParserFactory for Protocol {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Protocol>().map_err(|e| e.to_string()))
    }
}

impl clap::builder::ValueParserFactory for Variant {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Variant>().map_err(|e| e.to_string()))
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &PicError) -> i32 {
    match e {
        PicError::Io { .. } | PicError::Config(_) => 2,
        PicError::Compatibility(_) | PicError::Format(_) => 3,
        _ => 1,
    }
}

/// Relative paths are placed under `$PIC_OUTPUT_DIR` when it is set.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if p.is_relative() && !dir.is_empty() => Path::new(&dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let bytes = persist::read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| PicError::config(format!("{} is not UTF-8", path.display())))?;
    RunConfig::from_json(&text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    persist::write_file(path, text.as_bytes())
}

/// `field: a -> b` lines for every differing data setting.
pub fn data_config_diff(a: &DataConfig, b: &DataConfig) -> Vec<String> {
    let (va, vb) = (serde_json::to_value(a).unwrap(), serde_json::to_value(b).unwrap());
    let (Some(ma), Some(mb)) = (va.as_object(), vb.as_object()) else {
        return Vec::new();
    };
    ma.iter()
        .filter(|(k, v)| mb.get(*k) != Some(*v))
        .map(|(k, v)| format!("  {k}: {v} -> {}", mb.get(k).cloned().unwrap_or_default()))
        .collect()
}

/// Channel and class counts must agree; other data settings only warn.
fn check_compatible(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let diff = data_config_diff(&cfg.data, &data.config);
    let classes = match cfg.task {
        Task::SingleLabel => data.taxonomy.num_classes(),
        Task::MultiLabel => data.taxonomy.vocabulary(),
    };
    if cfg.channels != data.channels() || cfg.num_classes() != classes {
        let mut msg = format!(
            "model expects {} channels and {} classes, dataset has {} channels and {} classes",
            cfg.channels,
            cfg.num_classes(),
            data.channels(),
            classes
        );
        for line in &diff {
            msg.push('\n');
            msg.push_str(line);
        }
        return Err(PicError::Compatibility(msg));
    }
    if !diff.is_empty() {
        eprintln!("warning: data settings differ from the dataset file:\n{}", diff.join("\n"));
    }
    Ok(())
}

fn parse_depths(s: &str) -> Result<Vec<usize>> {
    let bad = || PicError::config(format!("invalid depth list `{s}`"));
    let depths: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..=b).collect()
    } else {
        s.split(',').map(|d| d.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
    };
    if depths.is_empty() {
        return Err(bad());
    }
    Ok(depths)
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let data = Dataset::generate(&cfg.data, cfg.channels)?;
    let sum = data.save(&output_path(out))?;
    let d = &data.config;
    println!(
        "classes {} x segments {} x actions {} (vocabulary {}), channels {}, timesteps {}",
        d.num_classes,
        d.segments_per_class,
        d.actions_per_segment,
        d.vocabulary,
        data.channels(),
        d.timesteps
    );
    for (k, segs) in data.taxonomy.classes.iter().enumerate() {
        println!("  class {k}: {segs:?}");
    }
    println!("samples {} train + {} test", data.train.len(), data.test.len());
    println!("sha256 {sum}");
    Ok(())
}

fn train_cmd(threads: usize, config: &Path, data: &Path, out: &Path, history: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.threads = threads;
    let data = Dataset::load(data)?;
    check_compatible(&cfg, &data)?;
    cfg.data = data.config.clone();
    let out = output_path(out);
    let history = output_path(&history.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(&out, ".history.csv")));
    let model = build_cascade(&cfg)?;
    match train(model, &data.train, &data.test, &data.taxonomy, &cfg) {
        Ok(o) => {
            save_model(&o.model, &out)?;
            write_text(&history, &o.history.to_csv(&cfg))?;
            if let Some(r) = o.history.records.last() {
                let m = r.eval_metric.map(|v| format!(", eval {v:.4}")).unwrap_or_default();
                println!("epoch {}: train loss {:.4}{m}", r.epoch, r.train_loss);
            }
            println!("model written to {}", out.display());
            Ok(())
        }
        Err(f) => {
            save_model(&f.last_good, &out)?;
            write_text(&history, &f.history.to_csv(&cfg))?;
            eprintln!("last good model written to {}", out.display());
            Err(f.error)
        }
    }
}

fn eval_cmd(
    threads: usize,
    model: &Path,
    data: &Path,
    perm: &[Protocol],
    perm_seeds: Option<usize>,
    report: Option<&Path>,
) -> Result<()> {
    let model = load_model(model)?;
    let data = Dataset::load(data)?;
    check_compatible(&model.config, &data)?;
    if data.test.is_empty() {
        return Err(PicError::config("dataset has no test samples"));
    }
    let k = perm_seeds.unwrap_or(model.config.perm_seeds);
    let seeds: Vec<u64> = (0..k as u64).collect();
    let protocols = if perm.is_empty() { vec![Protocol::Uniform] } else { perm.to_vec() };
    let table = permutation_robustness(&model, &data.test, &data.taxonomy, &protocols, &seeds, threads)?;
    println!("{} {} ({} samples)", table.metric, table.baseline, data.test.len());
    if !perm.is_empty() {
        print!("{}", table.summary());
    }
    if let Some(r) = report {
        write_text(&output_path(r), &table.to_csv(&model.config))?;
    }
    Ok(())
}

fn profile_cmd(config: Option<&Path>, depths: &str, variants: &[Variant], repeats: usize, out: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let depths = parse_depths(depths)?;
    let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants.to_vec() };
    let report = profile(&cfg, &variants, &depths, repeats)?;
    let csv = report.to_csv(&cfg);
    match out {
        Some(p) => write_text(&output_path(p), &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn verify_cmd(fault: Option<Fault>) -> Result<()> {
    let opts = VerifyOptions {
        flip_tie_break: matches!(fault, Some(Fault::TieBreak)),
    };
    let report = run_verify(opts);
    print!("{report}");
    let failures = report.failures();
    if failures.is_empty() {
        println!("all {} checks passed", report.checks.len());
        return Ok(());
    }
    let names: Vec<&str> = failures.iter().map(|c| c.name.as_str()).collect();
    Err(PicError::Validation(format!("failed checks: {}", names.join(", "))))
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train {
            config,
            data,
            out,
            history,
        } => train_cmd(threads, &config, &data, &out, history.as_deref()),
        Command::Eval {
            model,
            data,
            perm,
            perm_seeds,
            report,
        } => eval_cmd(threads, &model, &data, &perm, perm_seeds, report.as_deref()),
        Command::Profile {
            config,
            depths,
            variants,
            repeats,
            out,
        } => profile_cmd(config.as_deref(), &depths, &variants, repeats, out.as_deref()),
        Command::Verify { inject_fault } => verify_cmd(inject_fault),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_lists() {
        assert_eq!(parse_depths("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_depths("2,5").unwrap(), vec![2, 5]);
        assert!(parse_depths("x").is_err());
        assert!(parse_depths("3..1").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&PicError::config("x")), 2);
        assert_eq!(exit_code(&PicError::Compatibility("x".into())), 3);
        assert_eq!(exit_code(&PicError::Validation("x".into())), 1);
    }

    #[test]
    fn diff_lists_changed_fields() {
        let a = DataConfig::default();
        let b = DataConfig {
            timesteps: 32,
            ..DataConfig::default()
        };
        let d = data_config_diff(&a, &b);
        assert_eq!(d, vec!["  timesteps: 64 -> 32".to_string()]);
    }

    #[test]
    fn parses_verbs() {
        let c = Cli::try_parse_from(["pic", "eval", "--model", "m", "--data", "d", "--perm", "uniform,fine"]).unwrap();
        match c.command {
            Command::Eval { perm, .. } => assert_eq!(perm, vec![Protocol::Uniform, Protocol::Fine]),
            _ => panic!(),
        }
        let c = Cli::try_parse_from(["pic", "--threads", "4", "verify", "--inject-fault", "tie-break"]).unwrap();
        assert_eq!(c.threads, 4);
    }
}
