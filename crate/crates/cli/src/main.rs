use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use walkhammer::config::{list_presets, preset, Config, DefenseKind, Regime};
use walkhammer::error::{ConfigError, HarnessError};
use walkhammer::harness::{emit_report, run_experiment, Executor, ExperimentId, ExperimentSpec, Sweep};

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "walkhammer", version, about = "Page-table-walk rowhammer simulator and experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run one experiment.
    Run(RunArgs),
    /// Run several experiments (all by default) into one output directory.
    Sweep(RunArgs),
    /// List the built-in presets, or print one as JSON.
    Presets {
        /// Preset to print in full.
        name: Option<String>,
    },
    /// Check a config and print its hash.
    Validate {
        #[arg(long)]
        config: String,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Preset name or path to a JSON config.
    #[arg(long, default_value = "desk")]
    config: String,
    /// E1..E7; `sweep` accepts a comma-separated list.
    #[arg(long)]
    experiment: Option<String>,
    /// First seed; repetitions use consecutive seeds.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Repetitions (defaults per experiment).
    #[arg(long)]
    reps: Option<u32>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// none, catt, riprh or cta.
    #[arg(long)]
    defense: Option<String>,
    /// superpage or regular.
    #[arg(long)]
    regime: Option<String>,
    /// JSON file with sweep parameters (sizes, trials, paddings, ...).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Run seeds one after another.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

/// A preset name, or a JSON file.
fn load_config(arg: &str) -> Result<(String, Config), Failure> {
    if let Some(c) = preset(arg) {
        return Ok((arg.to_string(), c));
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(Failure::Config(format!("`{arg}` is neither a preset nor a file")));
    }
    let c = Config::load(path)?;
    Ok((c.machine.name.clone(), c))
}

fn parse_ids(s: Option<&str>, many: bool) -> Result<Vec<ExperimentId>, Failure> {
    let Some(s) = s else {
        return if many { Ok(ExperimentId::ALL.to_vec()) } else { Err(Failure::Usage("--experiment is required".into())) };
    };
    let ids = s
        .split(',')
        .map(|t| ExperimentId::parse(t.trim()).ok_or_else(|| Failure::Usage(format!("unknown experiment `{t}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    if !many && ids.len() != 1 {
        return Err(Failure::Usage("`run` takes one experiment; use `sweep` for several".into()));
    }
    Ok(ids)
}

fn run(a: &RunArgs, many: bool) -> Result<(), Failure> {
    let ids = parse_ids(a.experiment.as_deref(), many)?;
    let defense = match &a.defense {
        Some(d) => Some(DefenseKind::parse(d).ok_or_else(|| Failure::Usage(format!("unknown defense `{d}`")))?),
        None => None,
    };
    let regime = match &a.regime {
        Some(r) => Some(Regime::parse(r).ok_or_else(|| Failure::Usage(format!("unknown regime `{r}`")))?),
        None => None,
    };
    if a.reps == Some(0) {
        return Err(Failure::Usage("--reps must be positive".into()));
    }
    let sweep: Sweep = match &a.params {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => Default::default(),
    };
    let (label, base) = load_config(&a.config)?;
    let exec = if a.sequential { Executor::Sequential } else { Executor::Parallel };
    let mut outputs = Vec::new();
    for id in ids {
        let mut spec = ExperimentSpec::new(id, &label);
        spec.seed = a.seed;
        spec.defense = defense;
        spec.regime = regime;
        spec.sweep = sweep.clone();
        if let Some(r) = a.reps {
            spec.reps = r;
        }
        let t = std::time::Instant::now();
        let out = run_experiment(&spec, &base, exec)?;
        let rows: usize = out.tables.iter().map(|t| t.rows).sum();
        eprintln!("{} on {label}: {} seeds, {rows} rows, {:.1}s", id.name(), spec.reps, t.elapsed().as_secs_f64());
        outputs.push(out);
    }
    let m = emit_report(&a.out, &base, a.seed, &outputs)?;
    for f in &m.files {
        println!("{}", a.out.join(&f.file).display());
    }
    println!("{}", a.out.join(walkhammer::harness::MANIFEST_FILE).display());
    Ok(())
}

fn presets(name: Option<&str>) -> Result<(), Failure> {
    if let Some(n) = name {
        let c = preset(n).ok_or_else(|| Failure::Config(format!("unknown preset `{n}`")))?;
        println!("{}", c.to_json());
        return Ok(());
    }
    println!("{:<8} {:>8} {:>6} {:>10} {:>10} {:>16}", "name", "MiB", "banks", "llc", "l2 tlb", "flip threshold");
    for (n, c) in list_presets() {
        let m = &c.machine;
        println!(
            "{:<8} {:>8} {:>6} {:>10} {:>10} {:>16}",
            n,
            m.dram.dram_bytes() >> 20,
            m.dram.total_banks(),
            format!("{}x{}", m.caches.llc.sets * m.caches.llc_slices, m.caches.llc.ways),
            format!("{}x{}", m.tlb.l2s.sets, m.tlb.l2s.ways),
            format!("{}-{}", m.flip.threshold_min, m.flip.threshold_max),
        );
    }
    Ok(())
}

fn validate(arg: &str) -> Result<(), Failure> {
    let (label, c) = load_config(arg)?;
    c.validate()?;
    println!("{label} ok {}", c.hash());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let r = match &cli.cmd {
        Cmd::Run(a) => run(a, false),
        Cmd::Sweep(a) => run(a, true),
        Cmd::Presets { name } => presets(name.as_deref()),
        Cmd::Validate { config } => validate(config),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("{m}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
