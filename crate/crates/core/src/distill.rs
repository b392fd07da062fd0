//! On-policy distillation of a guided teacher into a guidance-free student,
//! optionally rewarded for diversity.
//!
//! Each step draws `batch_size` prompts, rolls the student out
//! `samples_per_prompt` times per prompt and minimizes
//! `mean_y sum_n KL(pi_theta(.|y_<n,x) || pi_cfg(.|y_<n,x)) - beta * D_hat`,
//! where `D_hat` is the diversity policy-gradient surrogate. Sampled tokens
//! are treated as data.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cfg::{CfgPolicy, DEFAULT_GAMMA};
use crate::diversity::{BaselineMode, DiversityBatch, EmbeddingModel};
use crate::error::{arg, structural, Error, Result};
use crate::math::ln;
use crate::rng::{stream, StdRng};
use crate::seqmodel::{
    adam_step, AdamState, GradBuffer, LossGraph, Part, Policy, PolicyModel, Rollout,
    DEFAULT_TEMPERATURE,
};
use crate::Token;

const STREAM_TRAIN: u64 = 0x5452_4149;
const STREAM_PROBE: u64 = 0x5052_4f42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub gamma: f64,
    pub t_sample: f64,
    /// Temperature of both distributions inside the KL.
    pub t_kl: f64,
    pub batch_size: usize,
    /// Rollouts per prompt; at least 2 when a diversity reward is used.
    pub samples_per_prompt: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta_max: f64,
    pub beta_ramp_steps: usize,
    pub seed: u64,
    pub eval_interval: usize,
    /// Student rollouts in the fixed probe set behind `kl_to_teacher`.
    pub probe_size: usize,
    pub baseline: BaselineMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            gamma: DEFAULT_GAMMA,
            t_sample: DEFAULT_TEMPERATURE,
            t_kl: DEFAULT_TEMPERATURE,
            batch_size: 32,
            samples_per_prompt: 2,
            steps: 2000,
            lr: 1e-3,
            beta_max: 0.0,
            beta_ramp_steps: 1000,
            seed: 0,
            eval_interval: 100,
            probe_size: 16,
            baseline: BaselineMode::LeaveOneOut,
        }
    }
}

impl DistillConfig {
    /// Batch size and learning rate of the full-scale setup.
    pub const FULL_SCALE_BATCH_SIZE: usize = 128;
    pub const FULL_SCALE_LR: f64 = 0.00015;

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(arg("batch_size must be at least 1"));
        }
        if self.samples_per_prompt == 0 {
            return Err(arg("samples_per_prompt must be at least 1"));
        }
        if !(self.beta_max >= 0.0 && self.beta_max.is_finite()) {
            return Err(arg("beta_max must be finite and >= 0"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(arg("lr must be finite and >= 0"));
        }
        if !(self.t_sample > 0.0 && self.t_kl > 0.0) {
            return Err(arg("temperatures must be positive"));
        }
        if self.eval_interval == 0 {
            return Err(arg("eval_interval must be at least 1"));
        }
        if self.probe_size == 0 {
            return Err(arg("probe_size must be at least 1"));
        }
        Ok(())
    }
}

/// `KL(p || q) = sum_i p_i ln(p_i / q_i)` with `0 ln 0 = 0`.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(structural("distributions have different supports"));
    }
    let mut kl = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::DivergenceInfinite { index: i });
            }
            kl += a * (ln(a) - ln(b));
        }
    }
    Ok(kl.max(0.0))
}

/// `beta_max * min(1, step / ramp)`.
pub fn beta_at(step: usize, cfg: &DistillConfig) -> f64 {
    if cfg.beta_ramp_steps == 0 {
        return cfg.beta_max;
    }
    cfg.beta_max * (step as f64 / cfg.beta_ramp_steps as f64).min(1.0)
}

fn check_pair(student: &PolicyModel, teacher: &CfgPolicy<'_>) -> Result<()> {
    let (s, t) = (student.config(), teacher.base().config());
    if s.v_gen != t.v_gen || s.v_prompt != t.v_prompt || s.seq_len != t.seq_len {
        return Err(structural("teacher and student vocabularies differ"));
    }
    Ok(())
}

/// KL part toward the teacher along `y`.
fn kl_part(teacher: &CfgPolicy<'_>, prompt: &[Token], y: &[Token], t_kl: f64, weight: f64) -> Result<Part> {
    Ok(Part::KlTo {
        targets: teacher.cfg_dists_along(prompt, y, t_kl)?,
        weight,
        temperature: t_kl,
    })
}

/// `sum_n KL(pi_theta(.|y_<n,x) || pi_cfg(.|y_<n,x))` as a loss graph on the
/// student.
pub fn distill_loss(
    student: &PolicyModel,
    teacher: &CfgPolicy<'_>,
    prompt: &[Token],
    y: &[Token],
    t_kl: f64,
) -> Result<LossGraph> {
    check_pair(student, teacher)?;
    let mut g = LossGraph::new(student);
    g.push(prompt, y, vec![kl_part(teacher, prompt, y, t_kl, 1.0)?]);
    Ok(g)
}

/// Mean per-position KL of the student to the teacher over rollouts drawn
/// from a fixed stream.
pub fn probe_kl(
    student: &PolicyModel,
    teacher: &CfgPolicy<'_>,
    prompts: &[Vec<Token>],
    n: usize,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(arg("no prompts"));
    }
    let mut rng = stream(seed, STREAM_PROBE);
    let mut g = LossGraph::new(student);
    for k in 0..n {
        let prompt = &prompts[k % prompts.len()];
        let y = student.rollout(prompt, cfg.t_sample, &mut rng)?.tokens;
        g.push(prompt, &y, vec![kl_part(teacher, prompt, &y, cfg.t_kl, 1.0)?]);
    }
    Ok(g.evaluate(student)? / (n * student.config().seq_len) as f64)
}

/// One record of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    /// Mean per-position KL on the fixed probe set, measured every
    /// `eval_interval` steps and on the final record.
    pub kl_to_teacher: Option<f64>,
    /// Mean per-position KL on the training batch (absent on the final record).
    pub kl_batch: Option<f64>,
    pub diversity_reward_mean: Option<f64>,
    pub beta: f64,
    pub quality_eval: Option<f64>,
    pub diversity_eval: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<TrainStep>,
    /// Diversity prompts skipped for degenerate embeddings.
    pub skipped: usize,
}

impl TrainTrace {
    pub fn first_kl(&self) -> Option<f64> {
        self.steps.first().and_then(|s| s.kl_to_teacher)
    }

    pub fn last_kl(&self) -> Option<f64> {
        self.steps.last().and_then(|s| s.kl_to_teacher)
    }
}

/// Diversity reward attached to a run.
#[derive(Debug, Clone, Copy)]
pub struct DiversityEngine<'a> {
    pub embedding: &'a EmbeddingModel,
}

/// Evaluation hook called every `eval_interval` steps and after the final
/// step; returns `(quality, diversity)`.
pub type EvalHook<'h> = dyn FnMut(usize, &PolicyModel) -> Result<(f64, f64)> + 'h;

/// Rollouts and loss graph of one training step.
pub struct StepBatch {
    pub prompts: Vec<Vec<Token>>,
    pub rollouts: Vec<Vec<Rollout>>,
    pub diversity: Option<DiversityBatch>,
}

/// Samples one step's prompts and student rollouts.
pub fn sample_step(
    student: &PolicyModel,
    prompts: &[Vec<Token>],
    cfg: &DistillConfig,
    rng: &mut StdRng,
) -> Result<(Vec<Vec<Token>>, Vec<Vec<Rollout>>)> {
    let chosen: Vec<Vec<Token>> = (0..cfg.batch_size)
        .map(|_| prompts[rng.random_range(0..prompts.len())].clone())
        .collect();
    let mut rollouts = Vec::with_capacity(chosen.len());
    for p in &chosen {
        let rs = (0..cfg.samples_per_prompt)
            .map(|_| student.rollout(p, cfg.t_sample, rng))
            .collect::<Result<Vec<_>>>()?;
        rollouts.push(rs);
    }
    Ok((chosen, rollouts))
}

/// Which parts of the joint objective to include in a step graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Distill,
    Diversity,
    Joint,
}

/// Builds the step loss `KL_mean - beta * D_hat` (or one of its parts).
pub fn step_graph(
    student: &PolicyModel,
    teacher: &CfgPolicy<'_>,
    batch: &StepBatch,
    beta: f64,
    cfg: &DistillConfig,
    objective: Objective,
) -> Result<LossGraph> {
    let total = batch.rollouts.iter().map(Vec::len).sum::<usize>() as f64;
    let coef: Vec<f64> = match &batch.diversity {
        Some(d) if objective != Objective::Distill => {
            let c = d.coefficients();
            let mut by_prompt = vec![0.0; batch.prompts.len()];
            for (&k, &ci) in d.sources.iter().zip(&c) {
                by_prompt[k] = ci;
            }
            by_prompt
        }
        _ => vec![0.0; batch.prompts.len()],
    };
    let mut g = LossGraph::new(student);
    for (k, (p, rs)) in batch.prompts.iter().zip(&batch.rollouts).enumerate() {
        for r in rs {
            let mut parts = Vec::with_capacity(2);
            if objective != Objective::Diversity {
                parts.push(kl_part(teacher, p, &r.tokens, cfg.t_kl, 1.0 / total)?);
            }
            if objective != Objective::Distill && coef[k] != 0.0 && beta != 0.0 {
                parts.push(Part::LogProb {
                    weight: -beta * coef[k],
                    temperature: cfg.t_sample,
                });
            }
            if !parts.is_empty() {
                g.push(p, &r.tokens, parts);
            }
        }
    }
    Ok(g)
}

/// Scores a step's rollouts for diversity.
pub fn score_step(
    engine: &DiversityEngine<'_>,
    prompts: &[Vec<Token>],
    rollouts: &[Vec<Rollout>],
    mode: BaselineMode,
) -> Result<DiversityBatch> {
    let sets = prompts.iter().cloned().zip(rollouts.iter().cloned()).collect();
    DiversityBatch::score(engine.embedding, sets, mode)
}

/// Runs the training loop and returns the final parameters with the trace.
pub fn train(
    student_init: &PolicyModel,
    teacher: &CfgPolicy<'_>,
    prompts: &[Vec<Token>],
    cfg: &DistillConfig,
    diversity: Option<DiversityEngine<'_>>,
    mut eval: Option<&mut EvalHook<'_>>,
) -> Result<(PolicyModel, TrainTrace)> {
    cfg.validate()?;
    check_pair(student_init, teacher)?;
    if student_init.params.lineage() != teacher.base().params.lineage() {
        return Err(structural("student and teacher do not share a lineage"));
    }
    if prompts.is_empty() {
        return Err(arg("no training prompts"));
    }
    if teacher.gamma() != cfg.gamma {
        return Err(arg("teacher guidance factor differs from the configured gamma"));
    }
    if diversity.is_some() && cfg.samples_per_prompt < 2 {
        return Err(arg("a diversity reward needs samples_per_prompt >= 2"));
    }
    let mut student = student_init.clone();
    let mut adam = AdamState::for_params(&student.params);
    let mut rng = stream(cfg.seed, STREAM_TRAIN);
    let mut trace = TrainTrace::default();
    let l = student.config().seq_len as f64;

    let numerical = |step: usize, what: &str, m: &PolicyModel| Error::Numerical {
        step,
        what: what.into(),
        param_norm: m.params.norm(),
    };

    for step in 0..=cfg.steps {
        if !student.params.values.iter().all(|x| x.is_finite()) {
            return Err(numerical(step, "parameters", &student));
        }
        let eval_step = step % cfg.eval_interval == 0 || step == cfg.steps;
        let mut rec = TrainStep {
            step,
            kl_to_teacher: None,
            kl_batch: None,
            diversity_reward_mean: None,
            beta: beta_at(step, cfg),
            quality_eval: None,
            diversity_eval: None,
        };
        if eval_step {
            rec.kl_to_teacher = Some(probe_kl(&student, teacher, prompts, cfg.probe_size, cfg, cfg.seed)?);
            if let Some(hook) = eval.as_deref_mut() {
                let (q, d) = hook(step, &student)?;
                rec.quality_eval = Some(q);
                rec.diversity_eval = Some(d);
            }
        }
        if step == cfg.steps {
            trace.steps.push(rec);
            break;
        }

        let (chosen, rollouts) = sample_step(&student, prompts, cfg, &mut rng)?;
        let div = match &diversity {
            Some(engine) => {
                let d = score_step(engine, &chosen, &rollouts, cfg.baseline)?;
                trace.skipped += d.skipped;
                rec.diversity_reward_mean = d.reward_mean();
                Some(d)
            }
            None => None,
        };
        let batch = StepBatch {
            prompts: chosen,
            rollouts,
            diversity: div,
        };
        let graph = step_graph(&student, teacher, &batch, rec.beta, cfg, Objective::Joint)?;
        let (value, grad) = graph.value_and_grad(&student).map_err(|e| match e {
            Error::Argument(_) => numerical(step, "loss", &student),
            other => other,
        })?;
        if !value.is_finite() || !grad.is_finite() {
            return Err(numerical(step, "loss", &student));
        }
        if batch.diversity.is_none() || rec.beta == 0.0 {
            rec.kl_batch = Some(value / l);
        } else {
            let kl = step_graph(&student, teacher, &batch, 0.0, cfg, Objective::Distill)?;
            rec.kl_batch = Some(kl.evaluate(&student)? / l);
        }
        adam_step(&mut student.params, &grad, &mut adam, cfg.lr)?;
        trace.steps.push(rec);
    }
    Ok((student, trace))
}

/// Gradients of the distill part, the diversity part and the joint objective
/// on one batch; the joint one should equal `distill + diversity`.
pub fn linearity_check(
    student: &PolicyModel,
    teacher: &CfgPolicy<'_>,
    batch: &StepBatch,
    beta: f64,
    cfg: &DistillConfig,
) -> Result<(GradBuffer, GradBuffer, GradBuffer)> {
    let grad = |o| -> Result<GradBuffer> {
        Ok(step_graph(student, teacher, batch, beta, cfg, o)?
            .value_and_grad(student)?
            .1)
    };
    Ok((grad(Objective::Distill)?, grad(Objective::Diversity)?, grad(Objective::Joint)?))
}
