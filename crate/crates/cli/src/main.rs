//! `ffprop` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ffprop::checkpoint::Checkpoint;
use ffprop::codec::ToyCodec;
use ffprop::config::{Ablation, RunConfig};
use ffprop::data::{DataParams, DatasetSpec};
use ffprop::eval::{comparison_table, evaluate};
use ffprop::gradcheck::{grad_check, CheckShape, Component};
use ffprop::probe::{classify_model, probe_inputs};
use ffprop::train::{prepare, train_with};
use ffprop::{FfpError, HeadKind, Result};

#[derive(Parser)]
#[command(
    name = "ffprop",
    version,
    about = "First-frame propagation toy toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset description (re-rendered deterministically on load).
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
    },
    /// Classify every attention head of a checkpoint as spatial or temporal.
    ClassifyHeads {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = ffprop::heads::DEFAULT_PROBE_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = ffprop::heads::DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the probe clips.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a TOML config, optionally forcing one ablation row.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Print a progress line every N steps (0 = silent).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Sample from one or more checkpoints and score against ground truth.
    Eval {
        /// Repeat to compare several checkpoints side by side.
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Text report path; `.json` and `.dat` siblings are written too.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        #[arg(long)]
        component: Component,
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Exit nonzero when the maximum relative error reaches this value.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Print the default run config as TOML.
    DefaultConfig,
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn row_label(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            seed,
            count,
            out,
            frames,
            height,
            width,
        } => {
            let params = DataParams {
                frames,
                height,
                width,
                ..DataParams::default()
            };
            let spec = DatasetSpec::generate(seed, count, params)?;
            fs::write(&out, spec.to_json())?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::ClassifyHeads {
            ckpt,
            samples,
            epsilon,
            out,
            seed,
        } => {
            let c = Checkpoint::load(&ckpt)?;
            let codec = ToyCodec::new(c.meta.codec)?;
            let data = prepare(
                DatasetSpec::generate(seed, samples, c.meta.data)?.render()?,
                &codec,
            )?;
            let inputs = probe_inputs(&data, samples, seed)?;
            let p = classify_model(&c.params, &c.meta.model, &inputs, epsilon, &[])?;
            p.save(&out)?;
            println!(
                "{} spatial, {} temporal heads; manifest written to {}",
                p.count(HeadKind::Spatial),
                p.count(HeadKind::Temporal),
                out.display()
            );
        }
        Command::Train {
            config,
            ablation,
            log_every,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(row) = ablation {
                cfg = cfg.with_ablation(row);
            }
            let out = train_with(&cfg, |r| {
                if log_every > 0 && (r.step % log_every == 0 || r.step + 1 == cfg.steps) {
                    eprintln!(
                        "step {:>6} [{}] total {:.5} fm {:.5} motion {:.5} mmd {:.5}",
                        r.step, r.phase, r.total, r.l_fm, r.l_motion, r.l_mmd
                    );
                }
            })?;
            println!("checkpoint {}", out.paths.checkpoint.display());
            println!("metrics    {}", out.paths.metrics.display());
            println!("eval data  {}", out.paths.dataset.display());
            if out.partition.is_some() {
                println!("manifest   {}", out.paths.manifest.display());
            }
        }
        Command::Eval {
            ckpt,
            data,
            report,
            steps,
        } => {
            let spec = DatasetSpec::from_json(&fs::read_to_string(&data)?)?;
            let mut rows = Vec::new();
            for path in &ckpt {
                let c = Checkpoint::load(path)?;
                rows.push((row_label(path), evaluate(&c, &spec, steps)?));
            }
            let mut text = String::new();
            if rows.len() > 1 {
                text.push_str(&comparison_table(&rows));
                text.push('\n');
            }
            let mut plot = String::new();
            for (name, r) in &rows {
                text.push_str(&format!("[{name}]\n{}\n", r.to_text()));
                for (i, line) in r.plot_data().lines().enumerate() {
                    if i == 0 && plot.is_empty() {
                        plot.push_str(&format!("row {line}\n"));
                    } else if i > 0 {
                        plot.push_str(&format!("{name} {line}\n"));
                    }
                }
            }
            let json: Vec<_> = rows
                .iter()
                .map(|(n, r)| serde_json::json!({ "row": n, "report": r }))
                .collect();
            fs::write(&report, &text)?;
            fs::write(
                sibling(&report, "json"),
                serde_json::to_string_pretty(&json).expect("json"),
            )?;
            fs::write(sibling(&report, "dat"), plot)?;
            print!("{text}");
        }
        Command::GradCheck {
            component,
            h,
            seed,
            tolerance,
        } => {
            let r = grad_check(component, CheckShape::default(), h, seed)?;
            println!(
                "component={} h={:e} coordinates={} max_rel_error={:e} worst={} analytic={:e} numeric={:e} \
                 max_coordinate_rel_error={:e} worst_coordinate={}",
                r.component,
                r.h,
                r.coordinates,
                r.max_rel_error,
                r.worst,
                r.analytic,
                r.numeric,
                r.max_coordinate_rel_error,
                r.worst_coordinate
            );
            if let Some(tol) = tolerance {
                if r.max_rel_error >= tol {
                    return Err(FfpError::NumericInput(format!(
                        "max relative error {:e} >= tolerance {tol:e}",
                        r.max_rel_error
                    )));
                }
            }
        }
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml_string()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::to_string(&e.to_string()).expect("string serialises");
            eprintln!("error kind={} message={msg}", e.kind());
            ExitCode::from(1)
        }
    }
}
