use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use ueo_core::datamodel::{load_cache, save_cache, ShiftKind};
use ueo_core::experiment::{
    aggregate_by, aggregate_csv, aggregate_table, curve_charts, load_records, run_plan, sweep,
    write_run_outputs, AccuracyKind, RunConfig, RunMethod, SweepAxis,
};
use ueo_core::objectives::check_gradients;
use ueo_core::synth::{generate, SynthConfig};

#[derive(Parser)]
#[command(
    name = "ueo",
    version,
    about = "Universal entropy optimization on cached embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/test/prototype caches.
    Synth {
        /// SynthConfig JSON; defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
        /// Overrides the generator seed (first value is used).
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
    },
    /// Train and evaluate every method x seed x shift, then aggregate.
    Run(RunArgs),
    /// Re-run the experiment once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// beta, batch_size, weight_fn or lambda.
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Rebuild the aggregate, a markdown table and OS/HOS plots from a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Use global instead of per-class-mean accuracy in the ACC column.
        #[arg(long)]
        global_accuracy: bool,
    },
    /// Compare analytic gradients with central finite differences.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Validate EMB1 caches and print a JSON summary of each.
    ExtractPassthrough {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    method: Vec<RunMethod>,
    /// Keep only shifts of these kinds.
    #[arg(long, value_delimiter = ',')]
    shift: Vec<ShiftKind>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::from_file(&self.config)
            .with_context(|| format!("reading {}", self.config.display()))?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if !self.seed.is_empty() {
            cfg.seeds = self.seed.clone();
        }
        if !self.method.is_empty() {
            cfg.methods = self.method.clone();
        }
        if !self.shift.is_empty() {
            let mut kept = Vec::new();
            for s in cfg.shifts {
                if self.shift.contains(&s.resolve()?.1.kind()) {
                    kept.push(s);
                }
            }
            if kept.is_empty() {
                bail!("no configured shift matches --shift");
            }
            cfg.shifts = kept;
        }
        Ok(cfg)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(config: Option<PathBuf>, out: PathBuf, seed: Vec<u64>) -> Result<()> {
    let mut cfg: SynthConfig = match config {
        Some(p) => serde_json::from_str(
            &fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => SynthConfig::default(),
    };
    if let Some(&s) = seed.first() {
        cfg.seed = s;
    }
    let data = generate(&cfg)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for (name, cache) in [
        ("train", &data.train),
        ("test", &data.test),
        ("prototypes", &data.prototypes),
    ] {
        save_cache(out.join(format!("{name}.emb")), cache)?;
    }
    write(&out.join("synth.json"), serde_json::to_string_pretty(&cfg)?)?;
    println!(
        "{}",
        json!({
            "out": out,
            "train": data.train.n(),
            "test": data.test.n(),
            "prototypes": data.prototypes.n(),
            "d": cfg.d,
        })
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<bool> {
    let cfg = args.load()?;
    let data = cfg.load_data()?;
    let plan = cfg.plan()?;
    let records = run_plan(&data, &plan);
    let rows = write_run_outputs(&cfg.out_dir, &records, cfg.accuracy)?;
    print!("{}", aggregate_table(&rows));
    let failures = records.iter().filter(|r| r.error.is_some()).count();
    if failures > 0 {
        log::warn!(
            "{failures} of {} runs failed; see runs/*.json",
            records.len()
        );
    }
    Ok(failures == 0)
}

fn cmd_sweep(args: RunArgs, axis: SweepAxis, values: Vec<String>) -> Result<()> {
    let cfg = args.load()?;
    let data = cfg.load_data()?;
    let plan = cfg.plan()?;
    let result = sweep(&data, &plan, axis, &values)?;
    let dir = cfg.out_dir.join(format!("sweep_{}", axis.as_str()));
    for (value, records) in &result.runs {
        write_run_outputs(
            &dir.join(format!("{}={value}", axis.as_str())),
            records,
            cfg.accuracy,
        )?;
    }
    write(&dir.join("sweep.csv"), result.to_csv())?;
    for (name, svg) in result.charts() {
        write(&dir.join(name), svg)?;
    }
    print!("{}", result.to_csv());
    Ok(())
}

fn cmd_report(out: PathBuf, global_accuracy: bool) -> Result<()> {
    let records = load_records(&out)?;
    if records.is_empty() {
        bail!("no runs under {}", out.join("runs").display());
    }
    let accuracy = if global_accuracy {
        AccuracyKind::Global
    } else {
        AccuracyKind::Macro
    };
    let rows = aggregate_by(&records, accuracy);
    write(&out.join("aggregate.csv"), aggregate_csv(&rows))?;
    let table = aggregate_table(&rows);
    write(&out.join("report.md"), &table)?;
    for (name, svg) in curve_charts(&records) {
        write(&out.join("plots").join(name), svg)?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_check_grad(seed: u64, trials: usize) -> Result<bool> {
    let report = check_gradients(seed, trials)?;
    for e in report.failures() {
        println!(
            "FAIL {} {} trial {}: rel err {:.3e} at {}",
            e.method.as_str(),
            e.weight_fn.as_str(),
            e.trial,
            e.max_rel_error,
            e.worst
        );
    }
    println!(
        "{}",
        json!({
            "checks": report.entries.len(),
            "max_rel_error": report.max_rel_error(),
            "passed": report.passed(),
        })
    );
    Ok(report.passed())
}

fn cmd_extract_passthrough(files: Vec<PathBuf>) -> bool {
    let mut ok = true;
    for path in files {
        let summary = match load_cache(&path) {
            Ok(cache) => {
                let mut counts = vec![0usize; cache.class_names().len()];
                for &l in cache.labels() {
                    counts[l as usize] += 1;
                }
                json!({
                    "path": path,
                    "valid": true,
                    "n": cache.n(),
                    "d": cache.d(),
                    "classes": cache.class_names().len(),
                    "source": cache.source(),
                    "normalized": cache.normalized(),
                    "per_class": counts,
                })
            }
            Err(e) => {
                ok = false;
                json!({ "path": path, "valid": false, "error": e.to_string() })
            }
        };
        println!("{summary}");
    }
    ok
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(config, out, seed).map(|_| true),
        Command::Run(args) => cmd_run(args),
        Command::Sweep { run, axis, values } => cmd_sweep(run, axis, values).map(|_| true),
        Command::Report {
            out,
            global_accuracy,
        } => cmd_report(out, global_accuracy).map(|_| true),
        Command::CheckGrad { seed, trials } => cmd_check_grad(seed, trials),
        Command::ExtractPassthrough { files } => Ok(cmd_extract_passthrough(files)),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
