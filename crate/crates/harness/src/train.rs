//! The training loop behind `train` and every ablation cell.

use std::time::Instant;

use dnt_core::diagnostics::{grad_report, spectrum_report, RunDiagnostics};
use dnt_core::model::{Model, ParamKind, Params};
use dnt_core::optim::{clip_global_norm, cosine_lr, OptimizerState};
use dnt_core::tensor::{Matrix, Rng};

use crate::config::RunConfig;
use crate::data::{Corpus, MarkovSource};
use crate::error::{HarnessError, Result};
use crate::report::{RunReport, ARTIFACT_VERSION};

/// Everything a finished run leaves behind.
pub struct RunOutcome {
    pub report: RunReport,
    pub model: Model,
    pub state: OptimizerState,
}

/// Corpus and loss floor shared by every run with the same data spec.
pub struct Dataset {
    pub source: MarkovSource,
    pub corpus: Corpus,
    /// Cross-entropy of the true chain on the validation split.
    pub floor: f64,
}

impl Dataset {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let seed = cfg.data_seed();
        let source = MarkovSource::random(seed, cfg.model.vocab, d.order, d.concentration)?;
        let corpus = Corpus::split(source.generate(seed, d.length), d.valid_fraction);
        let floor = source.corpus_cross_entropy(&corpus.valid);
        Ok(Self { source, corpus, floor })
    }
}

/// Large transient buffers are allocated and freed every step; without this
/// glibc hands them back to the kernel each time and the page faults cost a
/// third of the step time.
fn keep_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        const THRESHOLD: i32 = 1 << 30;
        // SAFETY: mallopt only adjusts allocator tuning parameters.
        unsafe {
            libc::mallopt(libc::M_TRIM_THRESHOLD, THRESHOLD);
            libc::mallopt(libc::M_MMAP_THRESHOLD, THRESHOLD);
        }
    }
}

fn refs(v: &[Vec<usize>]) -> Vec<&[usize]> {
    v.iter().map(Vec::as_slice).collect()
}

fn snapshot(params: &Params, grads: &Params, step: usize, cfg: &RunConfig, diag: &mut RunDiagnostics) -> Result<()> {
    for (v, g) in params.views().iter().zip(grads.views()) {
        if v.kind == ParamKind::Weight {
            diag.grads.push(grad_report(&v.name, step, g.data, cfg.train.bins)?);
        }
    }
    Ok(())
}

fn spectra(params: &Params) -> Result<Vec<dnt_core::diagnostics::SpectrumReport>> {
    params
        .views()
        .iter()
        .filter(|v| v.kind == ParamKind::Weight)
        .map(|v| {
            let m = Matrix::new(v.shape.0, v.shape.1, v.data.to_vec())?;
            Ok(spectrum_report(&v.name, &m)?)
        })
        .collect()
}

pub fn train(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = Dataset::build(cfg)?;
    train_on(cfg, &data)
}

pub fn train_on(cfg: &RunConfig, data: &Dataset) -> Result<RunOutcome> {
    cfg.validate()?;
    keep_freed_memory();
    let started = Instant::now();
    let seq = cfg.model.seq_len;
    let mut model = Model::new(cfg.model.clone(), &Rng::new(cfg.seed).split(1))?;
    let mut state = OptimizerState::new(cfg.optim.clone(), &model.params)?;
    let mut batches = Rng::new(cfg.data_seed()).split(2);
    let (eval_in, eval_tg) = data.corpus.eval_batch(cfg.train.eval_windows, seq);
    let (eval_in, eval_tg) = (refs(&eval_in), refs(&eval_tg));
    let snapshots = cfg.train.snapshot_steps();
    let prec = cfg.train.precision;

    let mut report = RunReport {
        version: ARTIFACT_VERSION.to_string(),
        config: cfg.clone(),
        seed: cfg.seed,
        parameter_count: model.parameter_count(),
        initial_loss: model.loss_with(prec, &eval_in, &eval_tg)?,
        final_loss: f64::NAN,
        loss_floor: data.floor,
        entropy_rate: data.source.entropy_rate(),
        losses: Vec::with_capacity(cfg.train.steps),
        lrs: Vec::with_capacity(cfg.train.steps),
        grad_norms: Vec::with_capacity(cfg.train.steps),
        evals: Vec::new(),
        diagnostics: RunDiagnostics::default(),
        wall_clock_secs: 0.0,
    };

    let h = &cfg.optim;
    for step in 0..cfg.train.steps {
        let (inputs, targets) = data.corpus.sample_batch(&mut batches, cfg.train.batch, seq);
        let outcome = model.loss_and_grad_with(prec, &refs(&inputs), &refs(&targets));
        let (loss, mut grads) = match outcome {
            Ok((loss, g)) if loss.is_finite() && g.is_finite() => (loss, g),
            Ok((loss, g)) => {
                if g.is_finite() {
                    snapshot(&model.params, &g, step, cfg, &mut report.diagnostics)?;
                }
                return Err(diverged(report, step, format!("loss {loss}"), started));
            }
            Err(e) => return Err(diverged(report, step, e.to_string(), started)),
        };
        if snapshots.binary_search(&step).is_ok() {
            snapshot(&model.params, &grads, step, cfg, &mut report.diagnostics)?;
        }
        let norm = match h.clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => grads.global_norm(),
        };
        let lr = cosine_lr(step, h.warmup, cfg.train.steps, h.lr, h.lr_min);
        if let Err(e) = state.step(&mut model.params, &grads, lr) {
            return Err(diverged(report, step, e.to_string(), started));
        }
        report.losses.push(loss);
        report.lrs.push(lr);
        report.grad_norms.push(norm);
        let every = cfg.train.eval_every;
        if every > 0 && (step + 1) % every == 0 {
            report.evals.push((step + 1, model.loss_with(prec, &eval_in, &eval_tg)?));
        }
    }
    report.final_loss = model.loss_with(prec, &eval_in, &eval_tg)?;
    report.diagnostics.spectra = spectra(&model.params)?;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(RunOutcome { report, model, state })
}

fn diverged(mut report: RunReport, step: usize, reason: String, started: Instant) -> HarnessError {
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    HarnessError::Diverged {
        step,
        reason,
        report: Box::new(report),
    }
}
