use clap::{Args, Parser, Subcommand};
use polarsfp::config::{PipelineConfig, CONFIG_ENV};
use polarsfp::pipeline::{self, run_jobs};
use polarsfp::{Error, Result};
use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "polarsfp", version, about = "Shape-from-polarization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value configuration file.
    #[arg(long, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Scene directory; repeat for several scenes.
    #[arg(long)]
    scene: Vec<PathBuf>,
    /// Output directory (default: the scene directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Noise seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Scenes processed concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Accept over-polarized pixels with DoP clamped to 1.
    #[arg(long)]
    clamp: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene directory.
    Simulate(Common),
    /// Subtract a uniform backscatter estimate.
    Descatter(Common),
    /// Invert polarization planes to a normal map.
    Solve(Common),
    /// Integrate a normal map into depth and a mesh.
    Integrate(Common),
    /// Compare a prediction against a reference scene.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Reference scene (default: the evaluated scene itself).
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// List the deterministic train/val/test split of the given scenes.
    Split(Common),
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.noise.seed = seed;
    }
    if c.clamp {
        cfg.polar.clamp = true;
    }
    Ok(cfg)
}

/// `--out`, then `output_dir`, then the scene itself; several scenes get
/// one subdirectory each.
fn out_dir(c: &Common, cfg: &PipelineConfig, scene: &Path) -> PathBuf {
    let base = c.out.clone().or_else(|| cfg.output_dir.clone());
    match base {
        None => scene.to_path_buf(),
        Some(b) if c.scene.len() > 1 => b.join(scene.file_name().unwrap_or(scene.as_os_str())),
        Some(b) => b,
    }
}

fn scenes(c: &Common) -> Result<&[PathBuf]> {
    if c.scene.is_empty() {
        Err(Error::Pipeline("--scene DIR is required".into()))
    } else {
        Ok(&c.scene)
    }
}

enum Outcome {
    Ok(Value),
    Breach(Value),
}

fn run(command: &Command) -> Result<Vec<Result<Outcome>>> {
    let ok = |v: Value| Ok(Outcome::Ok(v));
    Ok(match command {
        Command::Simulate(c) => {
            let cfg = load_config(c)?;
            let targets: Vec<PathBuf> = if c.scene.is_empty() {
                vec![c
                    .out
                    .clone()
                    .or_else(|| cfg.output_dir.clone())
                    .ok_or_else(|| Error::Pipeline("simulate needs --out DIR or --scene DIR".into()))?]
            } else {
                c.scene.clone()
            };
            run_jobs(&targets, c.jobs, |t| ok(pipeline::cmd_simulate(&cfg, t)?.to_json()))
        }
        Command::Descatter(c) => {
            let cfg = load_config(c)?;
            run_jobs(scenes(c)?, c.jobs, |s| {
                ok(pipeline::cmd_descatter(s, &out_dir(c, &cfg, s), &cfg)?.to_json())
            })
        }
        Command::Solve(c) => {
            let cfg = load_config(c)?;
            run_jobs(scenes(c)?, c.jobs, |s| {
                let r = pipeline::cmd_solve(s, &out_dir(c, &cfg, s), &cfg)?;
                Ok(if r.threshold_exceeded {
                    Outcome::Breach(r.to_json())
                } else {
                    Outcome::Ok(r.to_json())
                })
            })
        }
        Command::Integrate(c) => {
            let cfg = load_config(c)?;
            run_jobs(scenes(c)?, c.jobs, |s| {
                ok(pipeline::cmd_integrate(s, &out_dir(c, &cfg, s), &cfg)?.to_json())
            })
        }
        Command::Evaluate { common: c, gt } => {
            let cfg = load_config(c)?;
            run_jobs(scenes(c)?, c.jobs, |s| {
                let reference = gt.as_deref().unwrap_or(s);
                ok(pipeline::cmd_evaluate(s, reference, &out_dir(c, &cfg, s), &cfg)?.to_json())
            })
        }
        Command::Split(c) => scenes(c)?
            .iter()
            .map(|s| {
                let name = s.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let split = pipeline::split_of(&name).name();
                ok(serde_json::json!({ "scene": name, "split": split }))
            })
            .collect(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let results = match run(&cli.command) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("polarsfp: {e}");
            return ExitCode::from(1);
        }
    };
    let mut code = 0u8;
    for r in results {
        match r {
            Ok(Outcome::Ok(v)) => println!("{v}"),
            Ok(Outcome::Breach(v)) => {
                println!("{v}");
                eprintln!("polarsfp: solver failure fraction above the configured threshold");
                code = code.max(2);
            }
            Err(e) => {
                eprintln!("polarsfp: {e}");
                code = code.max(1);
            }
        }
    }
    ExitCode::from(code)
}
