//! Training loops: single-pair teachers, the multilingual student with
//! selective distillation, and back-distillation.

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::BpeModel;
use crate::corpus::{sequential_batches, upsample, Batch, CorpusError, MultiDataset, PairSampler, ParallelCorpus};
use crate::eval::{evaluate_corpus, DecodeOptions, EvalError};
use crate::loss::{combined_loss, kd_loss, nll_loss, LossError, LossValue};
use crate::model::{backward_into, forward, Gradients, ModelConfig, ModelError, Mode, Params};
use crate::teacher::{export_topk, TeacherError, TeacherTrace};

/// Keeps dropout streams apart from the batch-sampling streams.
const DROPOUT_SALT: u64 = 0xd0d0_5eed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training plan: {0}")]
    Plan(String),
    #[error("loss became non-finite at step {step} on pair {pair}")]
    Diverged { step: u64, pair: usize },
    #[error("expected values for {expected} pairs, got {found}")]
    PairCount { expected: usize, found: usize },
    #[error("pair {pair}: {source}")]
    Trace { pair: usize, source: TeacherError },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
}

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,
    /// Multiplier on the scheduled learning rate.
    pub lr_scale: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup: 4000,
            lr_scale: 1.0,
        }
    }
}

/// One bias-corrected Adam update at 1-based step `t`.
pub fn adam_step(
    values: &mut [f32],
    grads: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    lr: f64,
    t: u64,
    cfg: &AdamConfig,
) {
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let step = (lr / c1) as f32;
    let c2_sqrt = c2.sqrt() as f32;
    let eps = cfg.eps as f32;
    for (((x, &g), m), v) in values.iter_mut().zip(grads).zip(m).zip(v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *x -= step * *m / (v.sqrt() / c2_sqrt + eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient held a non-finite value; parameters and moments were
    /// left untouched.
    Skipped,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    /// Applied updates so far.
    pub step: u64,
    pub skipped: u64,
}

impl OptimizerState {
    pub fn new(params: &Params<f32>, config: AdamConfig) -> Self {
        OptimizerState {
            config,
            m: vec![0.0; params.num_params()],
            v: vec![0.0; params.num_params()],
            step: 0,
            skipped: 0,
        }
    }

    pub fn moments(&self) -> (&[f32], &[f32]) {
        (&self.m, &self.v)
    }

    /// Applies one scheduled update.
    pub fn update(&mut self, params: &mut Params<f32>, grads: &Gradients<f32>) -> StepOutcome {
        if !grads.all_finite() {
            self.skipped += 1;
            warn!("non-finite gradient, skipping update ({} skipped so far)", self.skipped);
            return StepOutcome::Skipped;
        }
        self.step += 1;
        let lr = self.config.lr_scale
            * lr_schedule(self.step, params.config.d_model, self.config.warmup);
        let t = self.step;
        let cfg = self.config;
        adam_step(params.values_mut(), &grads.values, &mut self.m, &mut self.v, lr, t, &cfg);
        StepOutcome::Applied
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub total_steps: u64,
    pub check_every: u64,
    /// Distillation threshold in BLEU points.
    pub tau: f64,
    pub lambda: f64,
    pub topk: usize,
    /// Target tokens per batch and pair.
    pub token_budget: usize,
    pub seed: u64,
    /// Dev sentences per pair used for the periodic checks.
    pub dev_cap: usize,
    pub decode: DecodeOptions,
    pub adam: AdamConfig,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            total_steps: 30_000,
            check_every: 3000,
            tau: 1.0,
            lambda: 0.5,
            topk: 8,
            token_budget: 8192,
            seed: 1,
            dev_cap: 500,
            decode: DecodeOptions::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Plan(m.into()));
        if self.check_every == 0 {
            return fail("check_every must be at least 1");
        }
        if !(self.tau >= 0.0) {
            return fail("tau must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail("lambda must lie in [0, 1]");
        }
        if self.topk == 0 {
            return fail("topk must be at least 1");
        }
        if self.decode.beam == 0 {
            return fail("beam must be at least 1");
        }
        if self.dev_cap == 0 || self.token_budget == 0 {
            return fail("dev_cap and token_budget must be positive");
        }
        Ok(())
    }
}

/// The distillation predicate: keep distilling while the student has not
/// overtaken the teacher by at least `tau`.
pub fn distill_predicate(student_bleu: f64, teacher_bleu: f64, tau: f64) -> bool {
    student_bleu < teacher_bleu + tau
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagEvent {
    pub step: u64,
    pub pair: usize,
    pub student_bleu: f64,
    pub flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillState {
    pub flags: Vec<bool>,
    pub step: u64,
    pub teacher_dev_bleu: Vec<f64>,
    pub history: Vec<FlagEvent>,
}

impl DistillState {
    pub fn new(teacher_dev_bleu: Vec<f64>) -> Self {
        DistillState {
            flags: vec![true; teacher_dev_bleu.len()],
            step: 0,
            teacher_dev_bleu,
            history: Vec::new(),
        }
    }

    /// Re-evaluates every pair's flag from fresh student dev BLEU.
    pub fn update_flags(&mut self, student_dev_bleu: &[f64], tau: f64) -> Result<(), TrainError> {
        if student_dev_bleu.len() != self.flags.len() {
            return Err(TrainError::PairCount {
                expected: self.flags.len(),
                found: student_dev_bleu.len(),
            });
        }
        for (pair, &s) in student_dev_bleu.iter().enumerate() {
            let flag = distill_predicate(s, self.teacher_dev_bleu[pair], tau);
            self.flags[pair] = flag;
            self.history.push(FlagEvent {
                step: self.step,
                pair,
                student_bleu: s,
                flag,
            });
        }
        Ok(())
    }
}

/// How the distillation flags evolve during a distilled run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlagPolicy {
    /// Flags follow the dev-BLEU check.
    Selective,
    /// Every pair is distilled at every step.
    AlwaysOn,
    /// No pair is ever distilled.
    AlwaysOff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TrainMode {
    Baseline,
    Distill { policy: FlagPolicy },
}

/// Teacher signal for a distilled run.
pub struct Teachers<'a> {
    pub traces: &'a [TeacherTrace],
    pub dev_bleu: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub step: u64,
    pub pair: usize,
    pub bleu: f64,
    /// Distillation flag after this check; always false for baseline runs.
    pub flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    /// Token-mean training loss per pair at this step.
    pub per_pair: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub run_id: String,
    pub mode: TrainMode,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub pairs: Vec<String>,
    pub teacher_dev_bleu: Option<Vec<f64>>,
    pub checks: Vec<CheckRecord>,
    pub losses: Vec<LossRecord>,
    pub best_step: u64,
    pub best_dev_bleu: Vec<f64>,
    pub skipped_updates: u64,
}

pub struct TrainOutcome {
    /// Parameters with the best average dev BLEU over all checks.
    pub best: Params<f32>,
    pub last: Params<f32>,
    pub report: TrainReport,
}

/// Adds the token-mean gradient of one batch to `grads`. `kd` carries the
/// teacher trace and λ when this pair is distilled at this step.
pub fn accumulate_batch_gradient(
    params: &Params<f32>,
    batch: &Batch,
    kd: Option<(&TeacherTrace, f64)>,
    rng: &mut ChaCha8Rng,
    grads: &mut Gradients<f32>,
) -> Result<LossValue, TrainError> {
    let out = forward(params, batch, Mode::Train, rng)?;
    let nll = nll_loss(out.logprobs.view(), batch.tgt_out.view(), batch.tgt_mask.view())?;
    let (value, mut weights) = match kd {
        None => nll,
        Some((trace, lambda)) => {
            let records: Vec<_> = batch.example_ids.iter().map(|&i| trace.records(i)).collect();
            let kd = kd_loss(out.logprobs.view(), &records, batch.tgt_mask.view())?;
            combined_loss(&nll, &kd, lambda)?
        }
    };
    if value.per_token_count > 0 {
        weights.scale(1.0 / value.per_token_count as f32);
    }
    backward_into(params, &out, &weights, grads)?;
    Ok(value)
}

/// Token-mean NLL of a corpus under the model in eval mode.
pub fn corpus_nll(params: &Params<f32>, corpus: &ParallelCorpus) -> Result<f64, TrainError> {
    let budget = 4096.max(corpus.max_target_len());
    let parts: Vec<LossValue> = sequential_batches(corpus, budget)
        .par_iter()
        .map(|b| {
            let out = forward(params, b, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
            Ok(nll_loss(out.logprobs.view(), b.tgt_out.view(), b.tgt_mask.view())?.0)
        })
        .collect::<Result<_, TrainError>>()?;
    let total: f64 = parts.iter().map(|v| v.total).sum();
    let count: usize = parts.iter().map(|v| v.per_token_count).sum();
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

fn dev_bleus(
    params: &Params<f32>,
    devs: &[ParallelCorpus],
    bpe: &BpeModel,
    plan: &TrainPlan,
) -> Result<Vec<f64>, TrainError> {
    devs.iter()
        .map(|d| Ok(evaluate_corpus(params, &d.head(plan.dev_cap), bpe, plan.decode)?.0.bleu))
        .collect()
}

/// Algorithm 1. Every step accumulates one batch per pair, distilled or
/// plain depending on that pair's flag, and applies one Adam update. Every
/// `check_every` steps the student is scored on each dev set and the flags
/// are re-evaluated.
pub fn train_multilingual(
    model: &ModelConfig,
    plan: &TrainPlan,
    mode: TrainMode,
    dataset: &MultiDataset,
    devs: &[ParallelCorpus],
    bpe: &BpeModel,
    teachers: Option<Teachers<'_>>,
    init: Option<Params<f32>>,
) -> Result<TrainOutcome, TrainError> {
    plan.validate()?;
    model.validate()?;
    let pairs = dataset.num_pairs();
    if devs.len() != pairs {
        return Err(TrainError::PairCount {
            expected: pairs,
            found: devs.len(),
        });
    }
    let mut state = match mode {
        TrainMode::Baseline => None,
        TrainMode::Distill { policy } => {
            let t = teachers.as_ref().ok_or_else(|| {
                TrainError::Plan("distillation needs teacher traces and dev BLEU".into())
            })?;
            if t.traces.len() != pairs || t.dev_bleu.len() != pairs {
                return Err(TrainError::PairCount {
                    expected: pairs,
                    found: t.traces.len().min(t.dev_bleu.len()),
                });
            }
            for (p, trace) in t.traces.iter().enumerate() {
                trace
                    .check_alignment(&dataset.corpora[p])
                    .map_err(|source| TrainError::Trace { pair: p, source })?;
            }
            let mut s = DistillState::new(t.dev_bleu.to_vec());
            if policy == FlagPolicy::AlwaysOff {
                s.flags.fill(false);
            }
            Some((s, policy))
        }
    };

    let mut params = match init {
        Some(p) => p,
        None => Params::init(model, plan.seed)?,
    };
    let mut opt = OptimizerState::new(&params, plan.adam);
    let mut samplers: Vec<PairSampler> = (0..pairs)
        .map(|p| PairSampler::new(dataset, p, plan.token_budget, plan.seed))
        .collect::<Result<_, _>>()?;
    let mut rngs: Vec<ChaCha8Rng> = (0..pairs)
        .map(|p| {
            let mut r = ChaCha8Rng::seed_from_u64(plan.seed ^ DROPOUT_SALT);
            r.set_stream(p as u64);
            r
        })
        .collect();
    let mut pair_grads: Vec<Gradients<f32>> = (0..pairs).map(|_| Gradients::zeros_like(&params)).collect();
    let mut total = Gradients::zeros_like(&params);

    let mut checks = Vec::new();
    let mut losses = Vec::new();
    let mut best: Option<(f64, u64, Vec<f64>, Params<f32>)> = None;

    for step in 1..=plan.total_steps {
        let batches: Vec<Batch> = samplers.iter_mut().map(|s| s.next_batch(dataset)).collect();
        let flags: Vec<bool> = match &state {
            Some((s, _)) => s.flags.clone(),
            None => vec![false; pairs],
        };
        let current = &params;
        let values: Vec<LossValue> = pair_grads
            .par_iter_mut()
            .zip(rngs.par_iter_mut())
            .zip(batches.par_iter())
            .enumerate()
            .map(|(p, ((g, rng), batch))| {
                g.zero();
                let kd = match &teachers {
                    Some(t) if flags[p] => Some((&t.traces[p], plan.lambda)),
                    _ => None,
                };
                accumulate_batch_gradient(current, batch, kd, rng, g)
            })
            .collect::<Result<_, _>>()?;
        // Reduce in pair order so the sum does not depend on scheduling.
        total.zero();
        for g in &pair_grads {
            total.add_scaled(g, 1.0);
        }
        let per_pair: Vec<f64> = values.iter().map(|v| v.mean()).collect();
        if let Some(pair) = per_pair.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::Diverged { step, pair });
        }
        opt.update(&mut params, &total);
        if step % 100 == 0 || step == 1 {
            info!("step {step}: loss {per_pair:.4?}");
        }
        losses.push(LossRecord { step, per_pair });

        let is_check = step % plan.check_every == 0;
        if is_check || step == plan.total_steps {
            let bleus = dev_bleus(&params, devs, bpe, plan)?;
            info!("step {step}: dev BLEU {bleus:.2?}");
            if let Some((s, policy)) = state.as_mut() {
                s.step = step;
                if is_check && *policy == FlagPolicy::Selective {
                    s.update_flags(&bleus, plan.tau)?;
                }
            }
            for (pair, &bleu) in bleus.iter().enumerate() {
                checks.push(CheckRecord {
                    step,
                    pair,
                    bleu,
                    flag: state.as_ref().is_some_and(|(s, _)| s.flags[pair]),
                });
            }
            let avg = bleus.iter().sum::<f64>() / pairs as f64;
            if best.as_ref().is_none_or(|b| avg > b.0) {
                best = Some((avg, step, bleus, params.clone()));
            }
        }
    }

    let (best_step, best_dev_bleu, best_params) = match best {
        Some((_, step, bleus, p)) => (step, bleus, p),
        None => (0, dev_bleus(&params, devs, bpe, plan)?, params.clone()),
    };
    let mode_name = match mode {
        TrainMode::Baseline => "baseline".to_string(),
        TrainMode::Distill { policy } => format!("distill-{policy:?}").to_lowercase(),
    };
    let report = TrainReport {
        run_id: format!("{mode_name}-seed{}", plan.seed),
        mode,
        model: model.clone(),
        plan: *plan,
        pairs: dataset.corpora.iter().map(|c| c.pair.name()).collect(),
        teacher_dev_bleu: teachers.as_ref().map(|t| t.dev_bleu.to_vec()),
        checks,
        losses,
        best_step,
        best_dev_bleu,
        skipped_updates: opt.skipped,
    };
    Ok(TrainOutcome {
        best: best_params,
        last: params,
        report,
    })
}

/// Trains one pair. Without a trace this is plain NLL training (teachers);
/// with one, every step uses the interpolated loss.
pub fn train_single(
    model: &ModelConfig,
    plan: &TrainPlan,
    corpus: &ParallelCorpus,
    dev: &ParallelCorpus,
    bpe: &BpeModel,
    trace: Option<&TeacherTrace>,
    init: Option<Params<f32>>,
) -> Result<TrainOutcome, TrainError> {
    let mut single = corpus.clone();
    let mut dev = dev.clone();
    // A one-pair dataset always has pair id 0.
    single.pair.id = 0;
    dev.pair.id = 0;
    let dataset = upsample(vec![single], plan.seed)?;
    match trace {
        None => train_multilingual(model, plan, TrainMode::Baseline, &dataset, &[dev], bpe, None, init),
        Some(t) => {
            let traces = std::slice::from_ref(t);
            train_multilingual(
                model,
                plan,
                TrainMode::Distill {
                    policy: FlagPolicy::AlwaysOn,
                },
                &dataset,
                &[dev],
                bpe,
                Some(Teachers {
                    traces,
                    dev_bleu: &[0.0],
                }),
                init,
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackDistillReport {
    pub pair: String,
    pub before_dev_bleu: Option<f64>,
    pub after_dev_bleu: f64,
    pub train: TrainReport,
}

/// Uses the multilingual model as the teacher of one pair: exports its
/// top-K trace on that pair's training data and trains the individual model
/// (from `individual` or from scratch) on the interpolated loss.
pub fn back_distill(
    multilingual: &Params<f32>,
    individual: Option<Params<f32>>,
    model: &ModelConfig,
    plan: &TrainPlan,
    corpus: &ParallelCorpus,
    dev: &ParallelCorpus,
    bpe: &BpeModel,
) -> Result<(TrainOutcome, TeacherTrace, BackDistillReport), TrainError> {
    let trace = export_topk(multilingual, corpus, plan.topk)?;
    let before = match &individual {
        Some(p) => Some(evaluate_corpus(p, &dev.head(plan.dev_cap), bpe, plan.decode)?.0.bleu),
        None => None,
    };
    let mut trace0 = trace.clone();
    trace0.pair_id = 0;
    let outcome = train_single(model, plan, corpus, dev, bpe, Some(&trace0), individual)?;
    let after = outcome.report.best_dev_bleu[0];
    let report = BackDistillReport {
        pair: corpus.pair.name(),
        before_dev_bleu: before,
        after_dev_bleu: after,
        train: outcome.report.clone(),
    };
    Ok((outcome, trace, report))
}
