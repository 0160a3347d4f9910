//! Training-loop orchestration: per-sequence gradient drivers for the
//! predictive-coding algorithms, batch reduction, optimiser application,
//! metrics persistence and checkpointing.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::baselines;
use crate::cells::{init_parameters, sample_dropout_mask, CellGrads, CellParameters};
use crate::checkpoint;
use crate::config::{Algorithm, RunConfig, ScheduleKind, TaskKind};
use crate::energy::{InferenceConfig, Target};
use crate::error::{Result, TpcError};
use crate::metrics::{summary_json, MetricsRecord, MetricsWriter, RunSummary};
use crate::num::Real;
use crate::optim::{clip_global_norm, cosine_warmup_lr, Optimiser};
use crate::rtrl::{
    immediate_update, learning_terms, parameter_update, update_dense_inplace, update_trace,
    InfluenceTrace,
};
use crate::tasks::{
    chunk_windows, generate_copy_batch, ingest_text_corpus, stream_seed, synthetic_corpus,
    EvalMetrics, Sequence, StreamKind,
};
use crate::temporal::{accumulate_or_apply, step, TemporalContext, UpdateSchedule};

/// Per-sequence statistics from a predictive-coding pass.
#[derive(Clone, Copy, Debug)]
pub struct PcStats<F> {
    /// Summed inference-mode internal energy over the sequence.
    pub internal_energy: F,
    /// Summed inference-mode output energy over the sequence.
    pub output_energy: F,
    /// Summed feedforward cross-entropy (the BP-comparable loss).
    pub loss: F,
}

/// Time-batched gradients of one sequence under tPC (no trace) or tPC-RTRL
/// (`with_trace`). Gradient contributions are summed over time; the trace is
/// refreshed after each step's parameter accumulation.
pub fn pc_sequence_gradients<F: Real>(
    seq: &Sequence<F>,
    params: &CellParameters<F>,
    inference: &InferenceConfig<F>,
    smoothing: F,
    mask: Option<Array1<F>>,
    with_trace: bool,
) -> Result<(CellGrads<F>, PcStats<F>)> {
    let mut ctx = TemporalContext::initial(params, mask);
    let mut trace = if with_trace {
        Some(InfluenceTrace::zeros(params))
    } else {
        None
    };
    // scratch buffer for the in-place dense recursion; the trace is large
    // enough that per-step reallocation dominates otherwise
    let mut scratch = match &trace {
        Some(InfluenceTrace::Dense(d)) => Some(Array2::zeros(d.m.dim())),
        _ => None,
    };
    let mut grads = CellGrads::zeros_like(params);
    let mut stats = PcStats {
        internal_energy: F::zero(),
        output_energy: F::zero(),
        loss: F::zero(),
    };
    for t in 0..seq.len() {
        let input = seq.input_row(t);
        let target = seq.targets[t].map(|i| Target::with_smoothing(i, smoothing));
        let out = step(&ctx, &input, target, params, inference)?;
        let lt = learning_terms(&out.converged, params, &input, target);
        let mut step_grads = lt.readout;
        let recurrent = match &trace {
            Some(tr) => parameter_update(tr, &out.converged, &ctx, &input, params, &lt.rho)?,
            None => immediate_update(&out.converged, &ctx, &input, params, &lt.rho),
        };
        step_grads.add_scaled(&recurrent, F::one());
        accumulate_or_apply(&mut grads, &step_grads, UpdateSchedule::TimeBatched, &mut |_| {
            unreachable!("time-batched accumulation never applies eagerly")
        });
        match (params, trace.as_mut()) {
            (CellParameters::Tanh(cell), Some(InfluenceTrace::Dense(d))) => {
                // non-finite traces surface through the gradients at the
                // optimiser, so the hot path skips the per-step scan
                update_dense_inplace(
                    cell,
                    d,
                    scratch.as_mut().expect("dense scratch"),
                    &out.converged,
                    ctx.prev.expect_real(),
                    &input,
                );
            }
            (_, Some(tr)) => {
                *tr = update_trace(tr, &out.converged, &ctx, &input, params)?;
            }
            (_, None) => {}
        }
        stats.internal_energy += out.energy.internal_sum();
        stats.output_energy += out.energy.output_term;
        if let Some(tgt) = target {
            stats.loss += crate::num::cross_entropy(
                &out.converged.initial_logits,
                tgt.index,
                F::zero(),
            );
        }
        ctx = out.context;
    }
    Ok((grads, stats))
}

/// Immediate-schedule variant: the whole batch advances in lockstep over
/// time and the optimiser runs once per time step on the batch-mean
/// gradient.
#[allow(clippy::too_many_arguments)]
pub fn pc_batch_immediate<F: Real>(
    batch: &[Sequence<F>],
    params: &mut CellParameters<F>,
    optimiser: &mut Optimiser<F>,
    lr: F,
    inference: &InferenceConfig<F>,
    smoothing: F,
    masks: &[Option<Array1<F>>],
    with_trace: bool,
    clip: Option<F>,
) -> Result<PcStats<F>> {
    let t_len = batch.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut contexts: Vec<TemporalContext<F>> = batch
        .iter()
        .enumerate()
        .map(|(i, _)| TemporalContext::initial(params, masks[i].clone()))
        .collect();
    let mut traces: Vec<Option<InfluenceTrace<F>>> = batch
        .iter()
        .map(|_| with_trace.then(|| InfluenceTrace::zeros(params)))
        .collect();
    let mut stats = PcStats {
        internal_energy: F::zero(),
        output_energy: F::zero(),
        loss: F::zero(),
    };
    let scale = F::one() / F::f(batch.len() as f64);
    for t in 0..t_len {
        let mut mean = CellGrads::zeros_like(params);
        for (i, seq) in batch.iter().enumerate() {
            if t >= seq.len() {
                continue;
            }
            let input = seq.input_row(t);
            let target = seq.targets[t].map(|ix| Target::with_smoothing(ix, smoothing));
            let out = step(&contexts[i], &input, target, params, inference)?;
            let lt = learning_terms(&out.converged, params, &input, target);
            let mut step_grads = lt.readout;
            let recurrent = match &traces[i] {
                Some(tr) => {
                    parameter_update(tr, &out.converged, &contexts[i], &input, params, &lt.rho)?
                }
                None => immediate_update(&out.converged, &contexts[i], &input, params, &lt.rho),
            };
            step_grads.add_scaled(&recurrent, F::one());
            mean.add_scaled(&step_grads, scale);
            if let Some(tr) = traces[i].take() {
                traces[i] =
                    Some(update_trace(&tr, &out.converged, &contexts[i], &input, params)?);
            }
            stats.internal_energy += out.energy.internal_sum() * scale;
            stats.output_energy += out.energy.output_term * scale;
            if let Some(tgt) = target {
                stats.loss += crate::num::cross_entropy(
                    &out.converged.initial_logits,
                    tgt.index,
                    F::zero(),
                ) * scale;
            }
            contexts[i] = out.context;
        }
        let mut flat = mean.to_flat();
        if let Some(c) = clip {
            clip_global_norm(&mut flat, c);
        }
        let mut p_flat = params.to_flat();
        optimiser.apply(&mut p_flat, &flat, lr)?;
        params.assign_from_flat(&p_flat);
    }
    Ok(stats)
}

/// One batch worth of gradients for any algorithm, reduced in sequence
/// order so results do not depend on thread count. Returns
/// `(mean gradients, mean loss, mean internal energy, mean output energy)`.
pub fn batch_gradients<F: Real>(
    algorithm: Algorithm,
    batch: &[Sequence<F>],
    params: &CellParameters<F>,
    inference: &InferenceConfig<F>,
    smoothing: F,
    masks: &[Option<Array1<F>>],
) -> Result<(CellGrads<F>, F, F, F)> {
    let scale = F::one() / F::f(batch.len() as f64);
    match algorithm {
        Algorithm::Bptt | Algorithm::SpatialBp => {
            let (grads, loss) = if algorithm == Algorithm::Bptt {
                baselines::bptt_gradients(batch, params, Some(masks), smoothing)?
            } else {
                baselines::spatial_bp_gradients(batch, params, Some(masks), smoothing)?
            };
            Ok((grads, loss, F::zero(), F::zero()))
        }
        Algorithm::Tpc | Algorithm::TpcRtrl => {
            let with_trace = algorithm == Algorithm::TpcRtrl;
            let results: Vec<Result<(CellGrads<F>, PcStats<F>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(i, seq)| {
                    pc_sequence_gradients(
                        seq,
                        params,
                        inference,
                        smoothing,
                        masks[i].clone(),
                        with_trace,
                    )
                })
                .collect();
            let mut grads = CellGrads::zeros_like(params);
            let mut loss = F::zero();
            let mut internal = F::zero();
            let mut output = F::zero();
            for r in results {
                let (g, s) = r?;
                grads.add_scaled(&g, scale);
                loss += s.loss * scale;
                internal += s.internal_energy * scale;
                output += s.output_energy * scale;
            }
            Ok((grads, loss, internal, output))
        }
    }
}

/// Training data source resolved from the task configuration.
enum DataSource<F> {
    Copy,
    Chunks {
        train: Vec<Sequence<F>>,
        eval: Vec<Sequence<F>>,
    },
}

fn shuffled_indices(len: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx
}

impl<F: Real> DataSource<F> {
    fn build(cfg: &RunConfig) -> Result<Self> {
        match cfg.task {
            TaskKind::Copy => Ok(DataSource::Copy),
            TaskKind::CharLm => {
                let tokens_vocab = match &cfg.corpus {
                    Some(path) => ingest_text_corpus(Path::new(path), cfg.vocab_limit)?,
                    None => {
                        let text = synthetic_corpus(cfg.synth_corpus_bytes, cfg.seed_data);
                        crate::tasks::ingest_text(&text, cfg.vocab_limit)?
                    }
                };
                let (tokens, vocab) = tokens_vocab;
                // one-hot width is the configured vocab limit; the actual
                // alphabet may be smaller and simply leaves trailing zeros
                if vocab.len() > cfg.vocab_limit {
                    return Err(TpcError::Corpus(format!(
                        "vocabulary of {} exceeds the configured limit {}",
                        vocab.len(),
                        cfg.vocab_limit
                    )));
                }
                let chunks = chunk_windows::<F>(&tokens, cfg.window, cfg.vocab_limit);
                if chunks.len() < 10 {
                    return Err(TpcError::Corpus(format!(
                        "corpus too small: only {} windows",
                        chunks.len()
                    )));
                }
                // every tenth window is held out for evaluation
                let mut train = Vec::new();
                let mut eval = Vec::new();
                for (i, c) in chunks.into_iter().enumerate() {
                    if i % 10 == 9 {
                        eval.push(c);
                    } else {
                        train.push(c);
                    }
                }
                Ok(DataSource::Chunks { train, eval })
            }
        }
    }

    fn train_batch(&self, cfg: &RunConfig, batch_index: u64) -> Vec<Sequence<F>> {
        match self {
            DataSource::Copy => {
                generate_copy_batch(
                    cfg.batch_size,
                    stream_seed(cfg.seed_data, StreamKind::Train, batch_index),
                    cfg.mask_all,
                )
                .sequences
            }
            DataSource::Chunks { train, .. } => {
                let per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
                let epoch = batch_index / per_epoch;
                let pos = (batch_index % per_epoch) as usize;
                let order = shuffled_indices(
                    train.len(),
                    stream_seed(cfg.seed_data, StreamKind::Shuffle, epoch),
                );
                order
                    .iter()
                    .cycle()
                    .skip(pos * cfg.batch_size)
                    .take(cfg.batch_size)
                    .map(|&i| train[i].clone())
                    .collect()
            }
        }
    }

    fn eval_set(&self, cfg: &RunConfig) -> Vec<Sequence<F>> {
        match self {
            DataSource::Copy => {
                generate_copy_batch(
                    cfg.eval_samples,
                    stream_seed(cfg.seed_data, StreamKind::Eval, 0),
                    cfg.mask_all,
                )
                .sequences
            }
            DataSource::Chunks { eval, .. } => {
                eval.iter().take(cfg.eval_samples).cloned().collect()
            }
        }
    }
}

/// Output paths of one training run.
pub struct RunArtifacts {
    pub metrics_csv: PathBuf,
    pub summary_json: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics_csv: dir.join("metrics.csv"),
            summary_json: dir.join("summary.json"),
            checkpoint: dir.join("checkpoint.tpc"),
        }
    }
}

/// Full training run: builds the model, iterates batches, evaluates on the
/// configured interval, and writes metrics CSV, summary JSON, and a
/// parameter checkpoint. On numerical divergence the metrics written so far
/// are preserved and an error is returned.
pub fn run_training<F: Real>(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let artifacts = RunArtifacts::in_dir(out_dir);
    let started = Instant::now();

    let data = DataSource::<F>::build(cfg)?;
    let mut params: CellParameters<F> = init_parameters(
        cfg.cell,
        cfg.dims,
        cfg.dropout,
        cfg.lru_init,
        cfg.seed_init,
    )?;
    let mut optimiser = Optimiser::<F>::new(cfg.optimiser, params.flat_len());
    let inference = InferenceConfig::new(
        cfg.inference.iterations,
        F::f(cfg.inference.lr),
        F::f(cfg.inference.momentum),
    )?;
    let smoothing = F::f(cfg.label_smoothing);
    let eval_set = data.eval_set(cfg);

    let mut writer = MetricsWriter::create(&artifacts.metrics_csv)?;
    let mut best_eval: Option<EvalMetrics> = None;
    let mut best_loss = f64::INFINITY;
    let mut best_accuracy = 0.0f64;
    let mut last_eval: Option<EvalMetrics> = None;
    let mut batches_run = 0u64;
    let mut diverged: Option<TpcError> = None;

    'training: for batch_index in 0..cfg.batches {
        let batch = data.train_batch(cfg, batch_index);
        let masks: Vec<Option<Array1<F>>> = batch
            .iter()
            .enumerate()
            .map(|(i, _)| {
                sample_dropout_mask(
                    &params,
                    stream_seed(
                        cfg.seed_data,
                        StreamKind::DropoutMask,
                        batch_index * cfg.batch_size as u64 + i as u64,
                    ),
                )
            })
            .collect();
        let lr = F::f(match cfg.schedule {
            ScheduleKind::Constant => cfg.lr,
            ScheduleKind::CosineWarmup => {
                cosine_warmup_lr(batch_index, cfg.batches, cfg.lr, cfg.warmup_frac)
            }
        });

        let step_result: Result<(F, F, F, f64)> = (|| {
            if cfg.update_mode == UpdateSchedule::Immediate
                && matches!(cfg.algorithm, Algorithm::Tpc | Algorithm::TpcRtrl)
            {
                let stats = pc_batch_immediate(
                    &batch,
                    &mut params,
                    &mut optimiser,
                    lr,
                    &inference,
                    smoothing,
                    &masks,
                    cfg.algorithm == Algorithm::TpcRtrl,
                    cfg.clip_norm.map(F::f),
                )?;
                Ok((stats.loss, stats.internal_energy, stats.output_energy, f64::NAN))
            } else {
                let (grads, loss, internal, output) = batch_gradients(
                    cfg.algorithm,
                    &batch,
                    &params,
                    &inference,
                    smoothing,
                    &masks,
                )?;
                let mut flat = grads.to_flat();
                let pre_norm = match cfg.clip_norm {
                    Some(c) => clip_global_norm(&mut flat, F::f(c)).to_f64(),
                    None => flat.iter().map(|&g| (g * g).to_f64()).sum::<f64>().sqrt(),
                };
                let mut p_flat = params.to_flat();
                optimiser.apply(&mut p_flat, &flat, lr)?;
                params.assign_from_flat(&p_flat);
                Ok((loss, internal, output, pre_norm))
            }
        })();

        let (loss, internal, output, grad_norm) = match step_result {
            Ok(v) => v,
            Err(e) => {
                diverged = Some(e);
                break 'training;
            }
        };
        batches_run = batch_index + 1;

        let is_eval_point =
            batches_run % cfg.eval_interval == 0 || batches_run == cfg.batches;
        if is_eval_point {
            let eval = crate::tasks::evaluate(&params, &eval_set);
            let record = MetricsRecord {
                batch: batches_run,
                train_loss: loss.to_f64() / mean_supervised_steps(&batch),
                eval_loss: eval.mean_ce,
                eval_accuracy: eval.accuracy,
                eval_accuracy_all: eval.accuracy_all,
                grad_norm_pre_clip: grad_norm,
                energy_internal: if cfg.algorithm.is_pc() {
                    internal.to_f64() / batch[0].len() as f64
                } else {
                    f64::NAN
                },
                energy_output: if cfg.algorithm.is_pc() {
                    output.to_f64() / batch[0].len() as f64
                } else {
                    f64::NAN
                },
            };
            writer.append(&record)?;
            if eval.mean_ce < best_loss {
                best_loss = eval.mean_ce;
            }
            if eval.accuracy > best_accuracy {
                best_accuracy = eval.accuracy;
            }
            if best_eval.is_none()
                || eval.accuracy > best_eval.as_ref().unwrap().accuracy
                || (eval.accuracy == best_eval.as_ref().unwrap().accuracy
                    && eval.mean_ce < best_eval.as_ref().unwrap().mean_ce)
            {
                best_eval = Some(eval);
            }
            last_eval = Some(eval);
            let stop_acc = cfg.stop_accuracy.map_or(false, |a| best_accuracy >= a);
            let stop_loss = cfg.stop_loss.map_or(true, |l| best_loss <= l);
            if cfg.stop_accuracy.is_some() && stop_acc && stop_loss {
                break 'training;
            }
        }
    }

    let final_eval = last_eval.unwrap_or_else(|| crate::tasks::evaluate(&params, &eval_set));
    checkpoint::save(
        &artifacts.checkpoint,
        &params,
        cfg.seed_data,
        cfg.seed_init,
    )?;
    let summary = RunSummary {
        algorithm: cfg.algorithm,
        cell: cfg.cell,
        task: cfg.task,
        batches_run,
        best_eval_loss: best_loss,
        best_eval_accuracy: best_accuracy,
        final_eval,
        wall_ms: started.elapsed().as_millis() as u64,
        seed_data: cfg.seed_data,
        seed_init: cfg.seed_init,
        config_echo: cfg.render(),
        diverged: diverged.as_ref().map(|e| e.to_string()),
    };
    let mut f = std::fs::File::create(&artifacts.summary_json)?;
    f.write_all(summary_json(&summary)?.as_bytes())?;
    match diverged {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

fn mean_supervised_steps<F: Real>(batch: &[Sequence<F>]) -> f64 {
    let total: usize = batch
        .iter()
        .map(|s| s.targets.iter().filter(|t| t.is_some()).count())
        .sum();
    (total as f64 / batch.len() as f64).max(1.0)
}

/// Evaluation-only pass against a saved checkpoint.
pub fn eval_checkpoint<F: Real>(checkpoint_path: &Path, cfg: &RunConfig) -> Result<EvalMetrics> {
    let (params, _seeds): (CellParameters<F>, _) = checkpoint::load(checkpoint_path)?;
    if params.dims() != cfg.dims {
        return Err(TpcError::Usage(format!(
            "checkpoint dims {:?} do not match config dims {:?}",
            params.dims(),
            cfg.dims
        )));
    }
    let data = DataSource::<F>::build(cfg)?;
    Ok(crate::tasks::evaluate(&params, &data.eval_set(cfg)))
}
