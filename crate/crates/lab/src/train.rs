use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sfl_core::dynamics::{pair_metrics, rms, rms_norm_of, row_col_norm_distribution};
use sfl_core::model::checkpoint;
use sfl_core::model::{ForwardOptions, Probes};
use sfl_core::optim::{clip_global_norm, clip_norms, ClipStats, Optimizer};
use sfl_core::model::Block;
use sfl_core::{Graph, Model, Rng, Tensor};

use crate::config::RunConfig;
use crate::data::{fixed_windows, generate_data, sample_windows, Corpus};
use crate::error::{io_err, Result};
use crate::metrics::{last_value, series, MetricRecord, MetricSink};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { step: u64 },
}

pub struct RunResult {
    pub run_id: String,
    pub config: RunConfig,
    pub status: RunStatus,
    /// Held-out cross-entropy before the first step.
    pub initial_loss: f64,
    /// Held-out cross-entropy after the last step; NaN when diverged.
    pub final_loss: f64,
    pub records: Vec<MetricRecord>,
    pub model: Model<f64>,
    pub optimizer: Optimizer<f64>,
    pub checkpoint: Option<PathBuf>,
    pub wall_s: f64,
}

impl RunResult {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    pub fn series(&self, metric: &str) -> Vec<(u64, f64)> {
        series(&self.records, metric)
    }

    pub fn last(&self, metric: &str) -> Option<f64> {
        last_value(&self.records, metric)
    }
}

/// Train one model end to end. With `out_dir`, metrics stream to
/// `<out_dir>/<run_id>.jsonl` and the checkpoint goes next to them.
pub fn run_training(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunResult> {
    let cfg = cfg.resolved()?;
    let corpus = generate_data(&cfg.data)?;
    run_with_corpus(&cfg, &corpus, out_dir)
}

/// [`run_training`] on pre-generated data; `cfg` must already be resolved.
pub fn run_with_corpus(cfg: &RunConfig, corpus: &Corpus, out_dir: Option<&Path>) -> Result<RunResult> {
    let start = Instant::now();
    let mut sink = match out_dir {
        Some(d) => MetricSink::to_dir(&cfg.run_id, d)?,
        None => MetricSink::memory(&cfg.run_id),
    };
    let mut model = Model::<f64>::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Optimizer::new(&model.store, &cfg.policy, cfg.optim, cfg.schedule.peak_lr)?;
    let excluded = opt.clip_exclusion();
    let window = cfg.model.seq_len + 1;
    let eval = fixed_windows(&corpus.eval, window, cfg.train.eval_seqs);
    let mut rng = Rng::fork(cfg.seed, "batches");
    let steps = cfg.steps();
    let every = cfg.train.telemetry_every.max(1);

    let initial_loss = telemetry(&model, &eval, 0, false, &mut sink)?;
    let mut status = RunStatus::Completed;
    for t in 1..=steps {
        let batch = sample_windows(&corpus.train, window, cfg.train.batch_size, &mut rng);
        let (loss, mut grads) =
            model.loss_and_grads(&batch, cfg.train.z_loss, cfg.train.manual_grads)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            status = RunStatus::Diverged { step: t };
            break;
        }
        let lr = cfg.schedule.lr(t);
        let clip = match cfg.optim.clip {
            Some(th) => clip_global_norm(&mut grads, th, &excluded),
            None => {
                let (included_norm, total_norm) = clip_norms(&grads, &excluded);
                ClipStats {
                    scale: 1.0,
                    included_norm,
                    total_norm,
                }
            }
        };
        sink.record(t, "loss/train", loss)?;
        sink.record(t, "lr", lr)?;
        sink.record(t, "clip/scale", clip.scale)?;
        sink.record(t, "grad_norm/included", clip.included_norm)?;
        sink.record(t, "grad_norm/total", clip.total_norm)?;
        opt.step(&mut model.store, &grads, lr)?;
        if model.store.iter().any(|p| !p.value.is_finite()) {
            status = RunStatus::Diverged { step: t };
            break;
        }
        if t % every == 0 || t == steps {
            telemetry(&model, &eval, t, t == steps, &mut sink)?;
        }
    }

    let final_loss = match status {
        RunStatus::Completed => last_value(sink.records(), "loss/eval").unwrap_or(f64::NAN),
        RunStatus::Diverged { step } => {
            sink.record(step, "diverged", step as f64)?;
            f64::NAN
        }
    };
    let end = match status {
        RunStatus::Completed => steps,
        RunStatus::Diverged { step } => step,
    };
    sink.record(end, "final/eval_loss", final_loss)?;

    let mut ckpt = None;
    if let Some(dir) = out_dir {
        let cfg_path = dir.join(format!("{}.toml", cfg.run_id));
        std::fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;
        if cfg.train.checkpoint {
            let path = dir.join(format!("{}.sfl", cfg.run_id));
            let mut tensors = checkpoint::store_tensors(&model.store);
            tensors.extend(opt.state_tensors(&model.store));
            checkpoint::save(&path, &tensors)?;
            ckpt = Some(path);
        }
    }
    Ok(RunResult {
        run_id: cfg.run_id.clone(),
        config: cfg.clone(),
        status,
        initial_loss,
        final_loss,
        records: sink.into_records()?,
        model,
        optimizer: opt,
        checkpoint: ckpt,
        wall_s: start.elapsed().as_secs_f64(),
    })
}

/// Held-out loss (no z-loss) plus norm, multiplier, activation and symmetry
/// telemetry. Returns the held-out loss.
fn telemetry(
    model: &Model<f64>,
    eval: &[Vec<usize>],
    step: u64,
    last: bool,
    sink: &mut MetricSink,
) -> Result<f64> {
    let loss = model.loss_value(eval, 0.0)?;
    sink.record(step, "loss/eval", loss)?;
    for p in model.store.iter() {
        sink.record(step, format!("norm/{}", p.name), rms_norm_of(&p.value))?;
    }
    let mut effective = Vec::new();
    for layer in model.layers() {
        let (s, r, c) = layer.factors(&model.store);
        if let Some(s) = s {
            sink.record(step, format!("mult/{}.scalar", layer.prefix), s)?;
        }
        if let Some(r) = &r {
            sink.record(step, format!("mult/{}.row", layer.prefix), rms(r))?;
        }
        if let Some(c) = &c {
            sink.record(step, format!("mult/{}.col", layer.prefix), rms(c))?;
        }
        let w = layer.merged_weight(&model.store)?;
        sink.record(step, format!("norm_eff/{}", layer.prefix), rms_norm_of(&w))?;
        if layer.role != "embed" {
            effective.push(w);
        }
    }
    for (i, block) in model.blocks.iter().enumerate() {
        if let Block::Attn { q, k, .. } = block {
            let (_, rq, _) = q.factors(&model.store);
            let (_, rk, _) = k.factors(&model.store);
            if let (Some(rq), Some(rk)) = (rq, rk) {
                let m = pair_metrics(&Tensor::vector(rq), &Tensor::vector(rk));
                sink.record(step, format!("sym/blocks.{i}.qk_product"), m.product)?;
                sink.record(step, format!("sym/blocks.{i}.qk_ratio"), m.ratio)?;
            }
        }
    }
    let mut g = Graph::new();
    let b = model.bind(&mut g, false)?;
    let mut probes = Probes::new();
    let tokens = &eval[0][..eval[0].len() - 1];
    model.forward(&mut g, &b, tokens, &ForwardOptions::default(), Some(&mut probes))?;
    // Per-head probes share a name; pool them into one rms.
    let mut pooled: Vec<(&str, f64, usize)> = Vec::new();
    for (name, var) in &probes {
        let v = g.value(*var);
        let ss = v.data().iter().map(|x| x * x).sum::<f64>();
        match pooled.iter_mut().find(|p| p.0 == name) {
            Some(p) => {
                p.1 += ss;
                p.2 += v.len();
            }
            None => pooled.push((name, ss, v.len())),
        }
    }
    for (name, ss, n) in pooled {
        sink.record(step, format!("act/{name}"), (ss / n.max(1) as f64).sqrt())?;
    }
    if last {
        let dist = row_col_norm_distribution(&effective)?;
        sink.record_hist(step, "dist/rows", dist.rows)?;
        sink.record_hist(step, "dist/cols", dist.cols)?;
    }
    Ok(loss)
}
