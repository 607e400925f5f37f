//! Command-line drivers for `stylize` and `stylize-eval`.
//!
//! Both entry points return a process exit code: 0 on success, 1 for usage
//! errors and 2 for runtime failures, with the message on standard error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{CommandFactory, Parser, Subcommand};
use glyphstyle::backend::create_backend;
use glyphstyle::config::RunConfig;
use glyphstyle::eval::{self, EvalManifest, ScoreRecord};
use glyphstyle::pipeline::{self, StepRecord, StylizationRequest};
use glyphstyle::Error;
use serde::Serialize;
use toml::{Table, Value};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Stylize the text in an image. Flags override the config file, which
/// overrides built-in defaults.
#[derive(Debug, Parser)]
#[command(name = "stylize", version)]
pub struct StylizeArgs {
    /// Content image (PNG).
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Style prompt, e.g. "A watercolor painting".
    #[arg(long)]
    pub prompt: Option<String>,
    /// Binary text mask PNG.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Region file (JSON boxes/polygons).
    #[arg(long)]
    pub regions: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Soft band width around text, in pixels.
    #[arg(long)]
    pub distance: Option<f64>,
    /// High-frequency gain on skip features.
    #[arg(long)]
    pub s: Option<f64>,
    /// Normalized radius above which the gain applies.
    #[arg(long)]
    pub cutoff: Option<f64>,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    #[arg(long)]
    pub lambda_k: Option<f64>,
    #[arg(long)]
    pub lambda_mid: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// toy-zero, toy-unet or sd21 (weights root from $GLYPHSTYLE_WEIGHTS).
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub guidance: Option<f32>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dump_latents: bool,
    #[arg(long)]
    pub dump_packets: bool,
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub print_config: bool,
    /// No per-step progress on standard error.
    #[arg(long, short)]
    pub quiet: bool,
}

impl StylizeArgs {
    /// Flags as a TOML layer with the same keys as [`RunConfig`].
    pub fn overrides(&self) -> Table {
        fn put(t: &mut Table, key: &str, v: Option<Value>) {
            if let Some(v) = v {
                t.insert(key.to_string(), v);
            }
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::String(p.display().to_string()));
        let float = |v: Option<f64>| v.map(Value::Float);

        let mut top = Table::new();
        put(&mut top, "image", path(&self.image));
        put(&mut top, "prompt", self.prompt.clone().map(Value::String));
        put(&mut top, "mask", path(&self.mask));
        put(&mut top, "regions", path(&self.regions));
        put(&mut top, "steps", self.steps.map(|v| Value::Integer(v as i64)));
        put(&mut top, "distance", float(self.distance));
        put(&mut top, "seed", self.seed.map(|v| Value::Integer(v as i64)));
        put(&mut top, "backend", self.backend.clone().map(Value::String));
        put(&mut top, "guidance", float(self.guidance.map(f64::from)));
        put(&mut top, "out", path(&self.out));
        if self.dump_latents {
            top.insert("dump_latents".into(), Value::Boolean(true));
        }
        if self.dump_packets {
            top.insert("dump_packets".into(), Value::Boolean(true));
        }

        let mut freq = Table::new();
        put(&mut freq, "s", float(self.s));
        put(&mut freq, "cutoff", float(self.cutoff));
        if !freq.is_empty() {
            top.insert("freq".into(), Value::Table(freq));
        }
        let mut injection = Table::new();
        put(&mut injection, "lambda_max", float(self.lambda_max));
        put(&mut injection, "lambda_k", float(self.lambda_k));
        put(&mut injection, "lambda_mid", float(self.lambda_mid));
        if !injection.is_empty() {
            top.insert("injection".into(), Value::Table(injection));
        }
        top
    }

    pub fn resolve(&self) -> glyphstyle::Result<RunConfig> {
        match &self.config {
            Some(path) => RunConfig::load(path, &self.overrides()),
            None => RunConfig::resolve(None, &self.overrides()),
        }
    }
}

/// Parse with clap; `Err` carries the exit code after printing.
fn parse<P: Parser>(argv: impl IntoIterator<Item = OsString>, out: &mut dyn Write, err: &mut dyn Write) -> Result<P, i32> {
    P::try_parse_from(argv).map_err(|e| {
        use clap::error::ErrorKind;
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                let _ = write!(out, "{e}");
                EXIT_OK
            }
            _ => {
                let _ = write!(err, "{}", e.render().ansi());
                EXIT_USAGE
            }
        }
    })
}

fn runtime_error(err: &mut dyn Write, e: &Error) -> i32 {
    let _ = writeln!(err, "error: {e}");
    EXIT_RUNTIME
}

/// The `stylize` entry point.
pub fn run(argv: impl IntoIterator<Item = OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let args: StylizeArgs = match parse(argv, out, err) {
        Ok(a) => a,
        Err(code) => return code,
    };
    let config = match args.resolve() {
        Ok(c) => c,
        Err(e) => return runtime_error(err, &e),
    };
    if args.print_config {
        let _ = write!(out, "{}", config.to_toml());
        return EXIT_OK;
    }
    if config.image.is_none() {
        let _ = writeln!(
            err,
            "error: --image is required (or set `image` in the config file)\n\n{}",
            StylizeArgs::command().render_usage()
        );
        return EXIT_USAGE;
    }

    let quiet = args.quiet;
    let result = (|| {
        let backend = create_backend(&config.backend, config.steps, None)?;
        let request = StylizationRequest::from_config(config.clone())?;
        let steps = config.steps;
        let mut progress = |r: &StepRecord<'_>| -> glyphstyle::Result<()> {
            if !quiet {
                let _ = writeln!(err, "step {}/{steps} (t={})", r.index + 1, r.timestep);
            }
            Ok(())
        };
        pipeline::stylize(&request, backend.as_ref(), Some(&mut progress))
    })();
    match result {
        Ok((_, manifest)) => {
            let _ = writeln!(out, "{}", config.out.join(&manifest.artifacts.stylized).display());
            EXIT_OK
        }
        Err(e) => runtime_error(err, &e),
    }
}

/// Evaluation tools: reference images, scoring and reports.
#[derive(Debug, Parser)]
#[command(name = "stylize-eval", version)]
pub struct EvalArgs {
    #[command(subcommand)]
    pub command: EvalCommand,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Sample a style reference image for a prompt.
    Reference {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value = "toy-unet")]
        backend: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 75)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 7.5)]
        guidance: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every case of a manifest; writes `records.json` and the report.
    Score {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Render a report from saved records.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "Ours")]
        method: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize, serde::Deserialize)]
struct Records {
    records: Vec<ScoreRecord>,
}

/// The `stylize-eval` entry point.
pub fn run_eval(argv: impl IntoIterator<Item = OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let args: EvalArgs = match parse(argv, out, err) {
        Ok(a) => a,
        Err(code) => return code,
    };
    let result = match args.command {
        EvalCommand::Reference {
            prompt,
            backend,
            seed,
            steps,
            height,
            width,
            guidance,
            out: path,
        } => (|| {
            let backend = create_backend(&backend, steps, None)?;
            let image = eval::build_style_reference(&prompt, backend.as_ref(), seed, height, width, guidance)?;
            glyphstyle::io::write_image(&path, &image)?;
            let _ = writeln!(out, "{}", path.display());
            Ok(())
        })(),
        EvalCommand::Score { manifest } => (|| {
            let (manifest, base) = EvalManifest::read(&manifest)?;
            manifest.validate(&base)?;
            let scorers = manifest.build_scorers(&base)?;
            let records = eval::score(&manifest.cases, &base, &scorers);
            for r in records.iter().filter(|r| r.error.is_some()) {
                let _ = writeln!(err, "warning: {} {}: {}", r.case_id, r.metric.name(), r.error.as_deref().unwrap_or(""));
            }
            let dir = base.join(&manifest.report);
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            write_records(&dir.join("records.json"), &records)?;
            let report = eval::render_report(&records, &manifest.method)?;
            eval::write_report(&dir, &report)?;
            let _ = write!(out, "{}", report.to_markdown());
            Ok(())
        })(),
        EvalCommand::Report {
            records,
            method,
            out: dir,
        } => (|| {
            let text = std::fs::read_to_string(&records).map_err(|e| Error::Io {
                path: records.clone(),
                source: e,
            })?;
            let parsed: Records = serde_json::from_str(&text).map_err(|e| Error::Format {
                what: "records",
                message: e.to_string(),
            })?;
            let report = eval::render_report(&parsed.records, &method)?;
            eval::write_report(&dir, &report)?;
            let _ = write!(out, "{}", report.to_markdown());
            Ok(())
        })(),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => runtime_error(err, &e),
    }
}

fn write_records(path: &std::path::Path, records: &[ScoreRecord]) -> glyphstyle::Result<()> {
    let text = serde_json::to_string_pretty(&Records {
        records: records.to_vec(),
    })
    .map_err(|e| Error::Format {
        what: "records",
        message: e.to_string(),
    })?;
    glyphstyle::io::atomic_write(path, text.as_bytes())
}
