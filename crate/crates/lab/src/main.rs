use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use sfl_core::dynamics::{abm_simulate, equilibrium_scale, AbmConfig};
use sfl_core::gradcheck::check_model;
use sfl_core::model::checkpoint;
use sfl_core::model::ForwardOptions;
use sfl_core::optim::MatrixOptimizer;
use sfl_core::reparam::merge_store;
use sfl_core::{Model, ModelConfig, ParamKind, PlacementMode, ProjectorMode, Rng};
use sfl_lab::experiments::{self, Experiment, Scale};
use sfl_lab::metrics::{write_consolidated_csv, MetricSink};
use sfl_lab::sweep::{best_of, run_sweep, LrPoint};
use sfl_lab::{run_training, RunConfig};

#[derive(Parser)]
#[command(name = "sfl", version, about = "Learnable-multiplier training lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model from a TOML config.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Expand the config's sweep axes and run every point.
    Sweep {
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Simulate Adam Brownian motion from a TOML config.
    Abm {
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Finite-difference check of the toy model under every placement.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Run one of the named experiments.
    Experiment {
        name: Experiment,
        #[arg(long, default_value = "adamw")]
        opt: MatrixOptimizer,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, default_value = "quick")]
        scale: Scale,
    },
    /// Fold multipliers into their matrices and save `<ckpt>.merged.sfl`.
    Merge { ckpt: PathBuf },
    /// Consolidate every metrics file under a directory into one CSV.
    ReportData {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Run { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let r = run_training(&cfg, Some(&out))?;
            println!(
                "{}: {:?}, eval loss {:.4} -> {:.4} in {:.1}s",
                r.run_id, r.status, r.initial_loss, r.final_loss, r.wall_s
            );
        }
        Cmd::Sweep { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let runs = run_sweep(&cfg, Some(&out))?;
            for r in &runs {
                println!("{}: {:?}, final eval loss {:.4}", r.run_id, r.status, r.final_loss);
            }
            if cfg.sweep.lr_grid.is_some() {
                let table = runs
                    .iter()
                    .map(|r| LrPoint {
                        lr: r.config.schedule.peak_lr,
                        final_loss: r.final_loss,
                        diverged: r.diverged(),
                    })
                    .collect();
                let best = best_of(table)?;
                println!("best lr {} (loss {:.4})", best.best_lr, best.best_loss);
            }
        }
        Cmd::Abm { config, out } => abm(&config, &out)?,
        Cmd::Gradcheck { tol } => gradcheck(tol)?,
        Cmd::Experiment {
            name,
            opt,
            out,
            scale,
        } => {
            let summary = experiments::run_named(name, opt, &scale.settings(), Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Cmd::Merge { ckpt } => merge(&ckpt)?,
        Cmd::ReportData { dir, out } => {
            let out = out.unwrap_or_else(|| dir.join("metrics.csv"));
            let n = write_consolidated_csv(&dir, &out)?;
            println!("wrote {n} rows to {}", out.display());
        }
    }
    Ok(())
}

fn abm(config: &Path, out: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| config.display().to_string())?;
    let cfg: AbmConfig = toml::from_str(&text).with_context(|| config.display().to_string())?;
    let run_id = config
        .file_stem()
        .map_or("abm".into(), |s| s.to_string_lossy().into_owned());
    let trace = abm_simulate(&cfg)?;
    let mut sink = MetricSink::to_dir(&run_id, out)?;
    for (&t, &n) in trace.steps.iter().zip(&trace.norms) {
        sink.record(t, "abm/norm", n)?;
    }
    let terminal = trace.terminal(cfg.steps);
    sink.record(cfg.steps, "abm/terminal", terminal)?;
    sink.flush()?;
    let s = equilibrium_scale(cfg.schedule.peak_lr, cfg.lambda)?;
    println!("terminal norm {terminal:.6}, S = {s:.6}, ratio {:.4}", terminal / s);
    Ok(())
}

fn gradcheck(tol: f64) -> anyhow::Result<()> {
    let placements = [
        PlacementMode::None,
        PlacementMode::ScalarAll,
        PlacementMode::VectorFull,
        PlacementMode::VectorSymmetryAware,
    ];
    let mut worst = 0.0f64;
    for placement in placements {
        for manual in [false, true] {
            let cfg = ModelConfig {
                placement,
                projector: ProjectorMode::VpnRow,
                ..ModelConfig::tiny()
            };
            let mut model = Model::<f64>::new(cfg.clone(), 3)?;
            // Move off the init point, where some vector gradients are ~1e-8.
            // Those tensors (ssm.log_a) also keep the step at 1e-4: with the
            // whole model in the loss, smaller steps measure roundoff.
            let mut rng = Rng::new(7);
            for p in model.store.iter_mut() {
                if p.kind != ParamKind::Matrix {
                    for v in p.value.data_mut() {
                        *v += 0.3 * rng.normal();
                    }
                }
            }
            let batch: Vec<Vec<usize>> = (0..2)
                .map(|b| (0..=cfg.seq_len).map(|t| (3 * t + 5 * b + 1) % cfg.vocab).collect())
                .collect();
            let r = check_model(&mut model, &batch, 1e-4, manual, 1e-4)?;
            let (name, _) = r
                .per_param
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .expect("model has parameters");
            println!(
                "{:?} manual={manual}: max relative error {:.3e} ({name})",
                placement, r.max_rel_error
            );
            worst = worst.max(r.max_rel_error);
        }
    }
    if !(worst < tol) {
        bail!("gradient check failed: {worst:.3e} >= {tol:.1e}");
    }
    Ok(())
}

fn merge(ckpt: &Path) -> anyhow::Result<()> {
    let tensors = checkpoint::load::<f64>(ckpt)?;
    let store = checkpoint::store_from_tensors(&tensors, false)?;
    let merged = merge_store(&store)?;
    let out = ckpt.with_extension("merged.sfl");
    checkpoint::save(&out, &checkpoint::store_tensors(&merged))?;
    println!("wrote {}", out.display());

    let cfg_path = ckpt.with_extension("toml");
    if cfg_path.exists() {
        let cfg = RunConfig::load(&cfg_path)?;
        let a = Model::from_store(cfg.model.clone(), store)?;
        let b = Model::from_store(cfg.model.clone(), merged)?;
        let tokens: Vec<usize> = (0..cfg.model.seq_len).map(|t| (7 * t + 3) % cfg.model.vocab).collect();
        let opts = ForwardOptions::default();
        let diff = a.logits(&tokens, &opts)?.max_abs_diff(&b.logits(&tokens, &opts)?);
        println!("max logit difference after merge: {diff:.3e}");
        if !(diff < 1e-9) {
            bail!("merged model disagrees with the original ({diff:.3e})");
        }
    }
    Ok(())
}
