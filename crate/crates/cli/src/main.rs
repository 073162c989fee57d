use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pe_lab::analysis::{decay_curves, max_step, verify_appendix_inequality, DEFAULT_SCAN_STEP};
use pe_lab::bias::{build_bias, bias_csv, write_cache, BiasForm};
use pe_lab::experiment::{write_comparison, ExperimentConfig};
use pe_lab::fusion::FusionPreset;
use pe_lab::io_util::{fmt_sig9, write_atomic};
use pe_lab::lm::{loss_curves_csv, summary_csv, train, RunSpec};
use pe_lab::slopes::{slopes_for_heads, SlopeSchedule};
use pe_lab::Error;

#[cfg(not(target_env = "msvc"))]
#[global_allocator]
static GLOBAL: tikv_jemallocator::Jemalloc = tikv_jemallocator::Jemalloc;

const AFTER_HELP: &str = "\
Presets: alibi, gaussian, kerple-log, sandwich, t5, mep-free, mep-param

Slope schedules (--slopes, --schedule):
  default | geometric   per-head slopes 2^(-8n/H), n = 1..H
  h=<exp>               every head gets slope 2^(-exp)
  <from>t<to>[,...]     geometric, with the head whose exponent is <from>
                        moved to exponent <to> (e.g. 8t2,6t9)

Heads on the command line are 1-based.

Exit codes: 0 success, 1 inequality never holds on the scanned range,
2 configuration error, 3 I/O error.
PE_LAB_THREADS caps the number of training runs executed in parallel.";

#[derive(Parser)]
#[command(
    name = "pe-lab",
    version,
    about = "Distance-kernel positional biases: export, analysis and toy-model extrapolation runs",
    after_help = AFTER_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Form {
    /// Additive logit bias (masked cells empty)
    Add,
    /// Post-softmax multiplicative kernel (masked cells empty)
    Mult,
}

#[derive(clap::Args)]
struct RunOverrides {
    /// Output directory (overrides output_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training steps (overrides train.steps)
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated seeds (overrides seeds)
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated evaluation lengths (overrides eval_lens)
    #[arg(long, value_delimiter = ',')]
    eval_lens: Option<Vec<usize>>,
    /// Comma-separated presets (overrides presets)
    #[arg(long, value_delimiter = ',')]
    presets: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Write one head's bias matrix as CSV
    Bias {
        preset: String,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 512)]
        len: usize,
        /// 1-based head index
        #[arg(long, default_value_t = 1)]
        head: usize,
        #[arg(long, value_enum, default_value_t = Form::Mult)]
        form: Form,
        #[arg(long, default_value = "default")]
        slopes: String,
        /// Multiply exported multiplicative values by this factor
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Also write the whole pack as a binary cache next to the CSV
        #[arg(long)]
        cache: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write decay curves (columns d,value) and a smoothness table
    Curves {
        #[arg(required = true)]
        presets: Vec<String>,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        /// 1-based head index
        #[arg(long, default_value_t = 1)]
        head: usize,
        #[arg(long, default_value_t = 512)]
        len: usize,
        #[arg(long, default_value = "default")]
        slopes: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Scan |k'_MKL(x)| < |k'_e(x)| and report the crossover x0
    VerifyAppendix {
        #[arg(long, default_value_t = 1.0)]
        sigma1: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma2: f64,
        #[arg(long, default_value_t = 50.0)]
        xmax: f64,
        #[arg(long, default_value_t = DEFAULT_SCAN_STEP)]
        step: f64,
    },
    /// Train one model per (preset, seed) and write loss curves
    Train {
        config: PathBuf,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Train and evaluate perplexity at every eval length
    Compare {
        config: PathBuf,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Compare slope schedules for one preset
    AblateSlopes {
        config: PathBuf,
        /// Schedule to compare; repeat the flag for several
        #[arg(long, required = true)]
        schedule: Vec<String>,
        /// Preset to ablate (defaults to the config's first preset)
        #[arg(long)]
        preset: Option<String>,
        /// Print the resolved slopes and exit without training
        #[arg(long)]
        slopes_only: bool,
        #[command(flatten)]
        overrides: RunOverrides,
    },
}

#[derive(Debug)]
enum Failure {
    Lib(Error),
    NeverHolds(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::NeverHolds(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 3 } else { 2 })
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("PE_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("PE_LAB_THREADS must be a positive integer, got '{raw}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Bias {
            preset,
            heads,
            len,
            head,
            form,
            slopes,
            scale,
            cache,
            out,
        } => cmd_bias(&preset, heads, len, head, form, &slopes, scale, cache, &out),
        Command::Curves {
            presets,
            heads,
            head,
            len,
            slopes,
            out,
        } => cmd_curves(&presets, heads, head, len, &slopes, &out),
        Command::VerifyAppendix {
            sigma1,
            sigma2,
            xmax,
            step,
        } => cmd_verify(sigma1, sigma2, xmax, step),
        Command::Train { config, overrides } => cmd_train(&load(&config, &overrides)?),
        Command::Compare { config, overrides } => cmd_compare(&load(&config, &overrides)?),
        Command::AblateSlopes {
            config,
            schedule,
            preset,
            slopes_only,
            overrides,
        } => cmd_ablate(&load(&config, &overrides)?, &schedule, preset.as_deref(), slopes_only),
    }
}

fn zero_based(head: usize, heads: usize) -> Result<usize, Error> {
    if head == 0 || head > heads {
        return Err(Error::Config(format!("--head must lie in 1..={heads}, got {head}")));
    }
    Ok(head - 1)
}

fn resolve_presets(names: &[String], slopes: &str, heads: usize) -> Result<Vec<FusionPreset>, Error> {
    if heads == 0 {
        return Err(Error::Config("--heads must be >= 1".into()));
    }
    let slopes = slopes_for_heads(&SlopeSchedule::parse(slopes, heads)?)?;
    names.iter().map(|n| FusionPreset::from_name(n, &slopes)).collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_bias(
    preset: &str,
    heads: usize,
    len: usize,
    head: usize,
    form: Form,
    slopes: &str,
    scale: f64,
    cache: bool,
    out: &Path,
) -> CmdResult {
    let preset = resolve_presets(&[preset.to_string()], slopes, heads)?.remove(0);
    let head = zero_based(head, heads)?;
    let pack = build_bias(&preset, heads, len)?;
    let (form, tag) = match form {
        Form::Add => (BiasForm::Additive, "add"),
        Form::Mult => (BiasForm::Multiplicative, "mult"),
    };
    let csv = bias_csv(&pack, head, form, scale)?;
    let path = out.join(format!("{}_head{}_{tag}.csv", preset.name(), head + 1));
    write_atomic(&path, csv.as_bytes())?;
    println!("wrote {}", path.display());
    if cache {
        let path = out.join(format!("{}.mepb", preset.name()));
        write_cache(&pack, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_curves(names: &[String], heads: usize, head: usize, len: usize, slopes: &str, out: &Path) -> CmdResult {
    let presets = resolve_presets(names, slopes, heads)?;
    let head = zero_based(head, heads)?;
    let curves = decay_curves(&presets, head, len)?;
    let mut table = String::from("preset,max_step\n");
    for c in &curves {
        let path = out.join(format!("{}.csv", c.label));
        write_atomic(&path, c.to_csv().as_bytes())?;
        println!("wrote {}", path.display());
        table.push_str(&format!("{},{}\n", c.label, fmt_sig9(max_step(&c.values()))));
    }
    let path = out.join("smoothness.csv");
    write_atomic(&path, table.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_verify(sigma1: f64, sigma2: f64, xmax: f64, step: f64) -> CmdResult {
    let report = verify_appendix_inequality(sigma1, sigma2, xmax, step)?;
    if let Some(holds) = report.holds_at_one {
        println!("at x = 1: inequality {}", if holds { "holds" } else { "fails" });
    }
    match report.x0 {
        Some(x0) => {
            println!("x0 = {x0:.4}");
            println!("holds on ({x0:.4}, {xmax}]");
            Ok(())
        }
        None => Err(Failure::NeverHolds(format!(
            "|k'_MKL| < |k'_e| fails at the end of the scanned range (0, {xmax}]; no x0 found"
        ))),
    }
}

fn load(path: &Path, o: &RunOverrides) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &o.out {
        cfg.output_dir = out.clone();
    }
    if let Some(steps) = o.steps {
        cfg.train.steps = steps;
    }
    if let Some(seeds) = &o.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(lens) = &o.eval_lens {
        cfg.eval_lens = lens.clone();
    }
    if let Some(presets) = &o.presets {
        cfg.presets = presets.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(cfg: &ExperimentConfig) -> CmdResult {
    use rayon::prelude::*;
    let runs = cfg.runs()?;
    let jobs: Vec<(&RunSpec, u64)> = runs
        .iter()
        .flat_map(|r| cfg.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|(run, seed)| {
            let model = cfg.model_config(&run.preset, *seed);
            train(&model, &cfg.train, &cfg.task.with_seed(*seed))
        })
        .collect();
    let mut curves = Vec::new();
    let mut summary = Vec::new();
    for ((run, seed), res) in jobs.iter().zip(results) {
        let res = res?;
        summary.push(serde_json::json!({
            "preset": run.label,
            "seed": seed,
            "first_loss": res.losses.first(),
            "final_loss": res.losses.last(),
            "non_decreasing": res.non_decreasing,
            "bias_params": res.params.bias_values(),
        }));
        if res.non_decreasing {
            eprintln!("warning: loss did not decrease for {} seed {seed}", run.label);
        }
        curves.push((run.label.clone(), *seed, res.losses));
    }
    let dir = &cfg.output_dir;
    let path = dir.join("loss_curves.csv");
    write_atomic(&path, loss_curves_csv(&curves).as_bytes())?;
    println!("wrote {}", path.display());
    let body = serde_json::to_string_pretty(&summary).expect("summary serializes");
    let path = dir.join("train_summary.json");
    write_atomic(&path, body.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_compare(cfg: &ExperimentConfig) -> CmdResult {
    let cmp = cfg.compare(&cfg.runs()?)?;
    for path in write_comparison(&cmp, &cfg.output_dir)? {
        println!("wrote {}", path.display());
    }
    print!("{}", summary_csv(&cmp.summary));
    Ok(())
}

fn cmd_ablate(cfg: &ExperimentConfig, schedules: &[String], preset: Option<&str>, slopes_only: bool) -> CmdResult {
    let name = preset.unwrap_or(&cfg.presets[0]);
    let mut runs = Vec::with_capacity(schedules.len());
    for text in schedules {
        let schedule = SlopeSchedule::parse(text, cfg.model.heads)?;
        let slopes = slopes_for_heads(&schedule)?;
        let values: Vec<String> = slopes.as_slice().iter().map(|&m| fmt_sig9(m)).collect();
        println!("{text}: {}", values.join(" "));
        runs.push(RunSpec {
            label: format!("{name}:{}", text.replace(',', "+")),
            preset: FusionPreset::from_name(name, &slopes)?,
        });
    }
    if slopes_only {
        return Ok(());
    }
    let cmp = cfg.compare(&runs)?;
    for path in write_comparison(&cmp, &cfg.output_dir)? {
        println!("wrote {}", path.display());
    }
    print!("{}", summary_csv(&cmp.summary));
    Ok(())
}
