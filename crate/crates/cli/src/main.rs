use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use hbyield::harness::cases::{self, run_case_study, CASES};
use hbyield::harness::model::{defect_lambda, lut_key};
use hbyield::harness::validation::{run_validation, Manifest, ModelEvaluator, SimEvaluator};
use hbyield::harness::{run_model, LutCache, ProcessConfig, YieldReport};
use hbyield::morphology::BitGrid;
use hbyield::simulator::{converge, sample_wafer_voids, simulate, void_map_csv, BondMode};
use hbyield::Result;

#[derive(Parser)]
#[command(name = "hbyield", version, about = "Hybrid-bonding yield model and Monte Carlo simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args)]
struct Opts {
    /// TOML process configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Layout file to use instead of a generated pattern.
    #[arg(long, global = true)]
    layout: Option<PathBuf>,
    #[arg(long, global = true, value_name = "w2w|d2w")]
    mode: Option<BondMode>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one configuration key, e.g. `process.defect_density_cm2=0.05`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Analytical yield for one configuration.
    Model,
    /// Monte Carlo yield for one configuration.
    Simulate {
        /// Grow the sample count until the CV target is met.
        #[arg(long)]
        converge: bool,
    },
    /// Model against simulation over the validation manifest.
    Validate {
        /// Manifest TOML; the bundled one by default.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Number of parameter sets to draw.
        #[arg(long)]
        sets: Option<usize>,
    },
    /// Run a named case study, or `all`.
    CaseStudy { name: String },
    /// Build (or reuse) the critical-area table for the configuration.
    Lut,
    /// Write the configured layout as text and PBM.
    LayoutGen,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(opts: &Opts) -> Result<ProcessConfig> {
    let mut cfg = ProcessConfig::load(opts.config.as_deref(), &opts.set)?;
    if let Some(mode) = opts.mode {
        cfg.mode = mode;
    }
    if let Some(seed) = opts.seed {
        cfg.simulation.seed = seed;
    }
    if let Some(path) = &opts.layout {
        cfg.layout.file = Some(path.to_string_lossy().into_owned());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_out(out: Option<&Path>, name: &str, content: &str) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), content)?;
    }
    Ok(())
}

fn cache_for(out: Option<&Path>) -> Result<LutCache> {
    match out {
        Some(dir) => LutCache::new(dir.join("lut")),
        None => Ok(LutCache::in_memory()),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let opts = &cli.opts;
    let out = opts.out.as_deref();
    let cfg = load_config(opts)?;
    let mode = cfg.mode;
    match cli.command {
        Command::Model => {
            let layout = cfg.build_layout(mode)?;
            let m = run_model(&cfg, mode, &layout, &cache_for(out)?)?;
            log::info!("delta {:.6} um, lambda {:.6} (+/- {:.2e})", m.delta_um, m.lambda.lambda, m.lambda.error);
            emit_report(out, &m.report)?;
        }
        Command::Simulate { converge: grow } => {
            let layout = cfg.build_layout(mode)?;
            let sc = cfg.sim_config(mode);
            let start = Instant::now();
            let report = if grow {
                let c = converge(&sc, &layout, cfg.simulation.cv_target, cfg.max_samples(mode))?;
                let samples = c.samples * hbyield::simulator::CONVERGENCE_REPETITIONS;
                YieldReport::from_counts(mode, &c.counts, sc.seed, samples, Some(c.cv), start.elapsed().as_secs_f64())
            } else {
                let counts = simulate(&sc, &layout)?;
                YieldReport::from_counts(mode, &counts, sc.seed, sc.samples, None, start.elapsed().as_secs_f64())
            };
            if mode == BondMode::W2W {
                write_out(out, "voids_wafer0.csv", &void_map_csv(&sample_wafer_voids(&sc, 0)))?;
            }
            emit_report(out, &report)?;
        }
        Command::Validate { manifest, sets } => {
            let mut m = match manifest {
                Some(p) => Manifest::from_toml_str(&std::fs::read_to_string(&p)?)?,
                None => Manifest::default(),
            };
            if let Some(n) = sets {
                m.sets = n;
            }
            if let Some(seed) = opts.seed {
                m.seed = seed;
            }
            let cache = cache_for(out)?;
            let v = run_validation(&m.draw(&cfg)?, &ModelEvaluator { cache: &cache }, &SimEvaluator)?;
            write_out(out, "scatter.csv", &v.to_csv())?;
            write_out(out, "mse.csv", &v.mse_csv())?;
            if out.is_none() {
                print!("{}", v.to_csv());
            }
            let failures = v.failures();
            for r in &failures {
                eprintln!(
                    "set {} {}: model {:.4} sim {:.4} (tolerance {:.4})",
                    r.set_id, r.component, r.y_model, r.y_sim, r.tolerance
                );
            }
            eprint!("{}", v.mse_csv());
            if !failures.is_empty() {
                eprintln!("{} of {} rows outside tolerance", failures.len(), v.rows.len());
                return Ok(ExitCode::from(1));
            }
        }
        Command::CaseStudy { name } => {
            let names: Vec<&str> = if name == "all" { CASES.to_vec() } else { vec![name.as_str()] };
            let cache = cache_for(out)?;
            for n in names {
                let csv = cases::to_csv(&run_case_study(n, &cfg, &cache)?);
                write_out(out, &format!("{n}.csv"), &csv)?;
                if out.is_none() {
                    print!("{csv}");
                }
            }
        }
        Command::Lut => {
            let dir = out.unwrap_or(Path::new("."));
            let cache = LutCache::new(dir.join("lut"))?;
            let layout = cfg.build_layout(mode)?;
            let lambda = defect_lambda(&cfg, mode, &layout, &cache)?;
            let (kind, fp) = lut_key(&cfg, mode, &layout)?;
            let path = cache.path_for(kind, &fp).expect("disk cache");
            let info = serde_json::json!({
                "mode": mode,
                "fingerprint": fp,
                "path": path,
                "built": cache.builds() > 0,
                "lambda": lambda.lambda,
                "lambda_error": lambda.error,
                "y_df": lambda.yield_(),
            });
            println!("{}", serde_json::to_string_pretty(&info).expect("json"));
        }
        Command::LayoutGen => {
            let layout = cfg.build_layout(mode)?;
            let text = layout.to_csv();
            let mask = BitGrid::from_fn(layout.rows(), layout.cols(), layout.cell_area(), |r, c| {
                layout.get(r, c).is_functional()
            });
            write_out(out, "layout.txt", &text)?;
            write_out(out, "layout.pbm", &mask.to_pbm())?;
            if out.is_none() {
                print!("{text}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn emit_report(out: Option<&Path>, report: &YieldReport) -> Result<()> {
    let json = report.to_json();
    write_out(out, "report.json", &json)?;
    println!("{json}");
    Ok(())
}
