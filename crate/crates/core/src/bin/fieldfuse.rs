use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fieldfuse_core::pipeline::config::RepaintSection;
use fieldfuse_core::pipeline::{cmd_insert, cmd_refine, cmd_render, repaint_trace, RunManifest, SceneConfig};
use fieldfuse_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fieldfuse", version, about = "Insert objects into radiance-field scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scene configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the reference view and its depth.
    Render(Common),
    /// Edit, align, place and fuse the object into the scene.
    Insert {
        #[command(flatten)]
        common: Common,
        /// Resume at this stage, reusing earlier artifacts in the output
        /// directory.
        #[arg(long)]
        stage: Option<String>,
        /// Extra views around the object as `az:el` pairs in degrees,
        /// comma separated.
        #[arg(long)]
        views: Option<String>,
    },
    /// Refine the placed object over a frontal-first view schedule.
    Refine(Common),
    /// Print the inpainting scheduler's step sequence.
    TraceRepaint {
        /// Take the diffusion settings from this config instead of the
        /// defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the trace here instead of standard output.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn parse_views(text: &str) -> Result<Vec<(f64, f64)>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (a, e) = pair
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("view `{pair}` is not of the form az:el")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad angle `{s}` in view `{pair}`")))
            };
            Ok((parse(a)?, parse(e)?))
        })
        .collect()
}

fn prepare(common: &Common) -> Result<(SceneConfig, PathBuf)> {
    let mut cfg = SceneConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    Ok((cfg, out))
}

fn report(out: &Path, manifest: &RunManifest) {
    let done: Vec<&str> = manifest.stages.keys().map(String::as_str).collect();
    println!("{}: stages {}", out.display(), done.join(", "));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Render(common) => {
            let (cfg, out) = prepare(&common)?;
            report(&out, &cmd_render(&cfg, &out)?);
        }
        Command::Insert { common, stage, views } => {
            let (mut cfg, out) = prepare(&common)?;
            if let Some(v) = views {
                cfg.views = parse_views(&v)?;
            }
            report(&out, &cmd_insert(&cfg, &out, stage.as_deref())?);
        }
        Command::Refine(common) => {
            let (cfg, out) = prepare(&common)?;
            report(&out, &cmd_refine(&cfg, &out)?);
        }
        Command::TraceRepaint { config, trace } => {
            let section = match config {
                Some(p) => SceneConfig::load(p)?.repaint,
                None => RepaintSection::default(),
            };
            let text: String = repaint_trace(&section)?.iter().map(|s| format!("{s}\n")).collect();
            match trace {
                Some(p) => std::fs::write(p, text)?,
                None => std::io::stdout().write_all(text.as_bytes())?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn views_parse() {
        assert_eq!(parse_views("0:0, 30:-15").unwrap(), vec![(0.0, 0.0), (30.0, -15.0)]);
        assert!(parse_views("30").is_err());
        assert!(parse_views("").unwrap().is_empty());
    }
}
