//! Command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ovd_core::eval::{evaluate, Protocol};
use ovd_core::pipelines::Variant;

use crate::bench::bench;
use crate::coco::{detections_json, load_dataset, read_detections, read_json};
use crate::config::{FeatureMode, RunConfig};
use crate::error::{Error, Result};
use crate::report::{CategoryNames, ReportJson};
use crate::session::Session;
use crate::synth::{generate, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "ovd", version, about = "Open-vocabulary detection engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a pipeline over a bundle and write COCO-style detections.
    Detect {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; the output does not depend on this.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Overrides the config's output path; `-` writes to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score detections against ground truth.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// `generalized-ap50` or `lvis-groups`.
        #[arg(long, default_value = "generalized-ap50")]
        protocol: String,
        /// Metrics JSON; a table is always printed to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Time pipelines over a bundle. Trunk features are always recomputed
    /// so every backbone pass is timed.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// Variants to time; defaults to the config's.
        #[arg(long = "variant")]
        variants: Vec<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic bundle.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON generator spec; `--seed` overrides its seed.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

fn write_out(path: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) if p != Path::new("-") => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        _ => stdout
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

pub fn parse_protocol(s: &str) -> Result<Protocol> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| Error::config(format!("unknown protocol {s:?}; expected generalized-ap50 or lvis-groups")))
}

pub fn run(command: Command, stdout: &mut dyn Write) -> Result<()> {
    match command {
        Command::Detect {
            config,
            workers,
            output,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = output.or_else(|| cfg.output.clone());
            let session = Session::open(cfg)?;
            let dets = session.detect(workers)?;
            write_out(out.as_deref(), &detections_json(&dets), stdout)?;
            match out.as_deref() {
                Some(p) if p != Path::new("-") => writeln!(
                    stdout,
                    "{}: {} detections on {} images -> {}",
                    session.config.pipeline.variant,
                    dets.len(),
                    session.fixtures.images.len(),
                    p.display()
                )
                .map_err(|e| Error::io("<stdout>", e)),
                _ => Ok(()),
            }
        }
        Command::Eval {
            detections,
            annotations,
            split,
            protocol,
            output,
        } => {
            let protocol = parse_protocol(&protocol)?;
            let (gt, split) = load_dataset(&annotations, &split)?;
            let dets = read_detections(&detections)?;
            let report = evaluate(&dets, &gt, &split, protocol).map_err(Error::schema)?;
            let json = ReportJson::new(&report, protocol, &CategoryNames { gt: &gt, split: &split });
            if let Some(p) = &output {
                write_out(Some(p), &json.to_json(), stdout)?;
            }
            write_out(None, &json.to_table(), stdout)
        }
        Command::Bench {
            config,
            reps,
            variants,
            output,
        } => {
            let base = RunConfig::load(&config)?;
            let variants: Vec<Variant> = if variants.is_empty() {
                vec![base.pipeline.variant]
            } else {
                variants
                    .iter()
                    .map(|v| v.parse().map_err(Error::config))
                    .collect::<Result<_>>()?
            };
            let mut reports = Vec::with_capacity(variants.len());
            for v in variants {
                let mut cfg = base.clone();
                cfg.pipeline.variant = v;
                cfg.features = FeatureMode::Live;
                reports.push(bench(&Session::open(cfg)?, reps)?);
            }
            let mut text = serde_json::to_string_pretty(&reports).map_err(Error::schema)?;
            text.push('\n');
            write_out(output.as_deref(), &text, stdout)
        }
        Command::Fixtures { out, seed, spec } => {
            let mut s: SynthSpec = match &spec {
                Some(p) => read_json(p).map_err(|e| match e {
                    Error::Schema(m) => Error::Config(m),
                    other => other,
                })?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let manifest = generate(&s, &out)?;
            writeln!(stdout, "{}", manifest.display()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

/// One-line JSON error record for stderr.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({ "error": e.class(), "message": e.to_string() }).to_string()
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", error_json(&Error::config(first.trim_start_matches("error: "))));
            return 1;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(cli.command, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            e.exit_code()
        }
    }
}
