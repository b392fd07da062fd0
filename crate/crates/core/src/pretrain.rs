//! Maximum-likelihood pretraining of the base model on the corpus.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sequence};
use crate::error::{arg, Error, Result};
use crate::rng::stream;
use crate::seqmodel::{adam_step, AdamState, LossGraph, PolicyModel};

const STREAM_PRETRAIN: u64 = 0x5052_4554;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Hard cap on optimizer steps.
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Every `heldout_every`-th corpus sequence is held out.
    pub heldout_every: usize,
    /// Held-out sequences scored per evaluation (0 means all).
    pub heldout_size: usize,
    pub eval_every: usize,
    /// Stop once held-out loss improved by less than `min_improvement` over
    /// the last `window` steps.
    pub window: usize,
    pub min_improvement: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            max_steps: 3000,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
            heldout_every: 10,
            heldout_size: 64,
            eval_every: 50,
            window: 200,
            min_improvement: 1e-3,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.heldout_every < 2 {
            return Err(arg("batch_size and eval_every must be >= 1, heldout_every >= 2"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(arg("lr must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// `(step, held-out per-token log-loss)` at every evaluation.
    pub heldout: Vec<(usize, f64)>,
    /// `ln V_gen`, the loss of the uniform predictor.
    pub uniform_loss: f64,
    pub stopped_early: bool,
}

impl PretrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.heldout.last().map(|h| h.1)
    }
}

/// Mean negative log-likelihood per token at temperature 1.
pub fn per_token_loss(model: &PolicyModel, seqs: &[&Sequence]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(arg("no sequences to score"));
    }
    let mut g = LossGraph::new(model);
    let tokens: usize = seqs.iter().map(|s| s.tokens.len()).sum();
    for s in seqs {
        g.add_log_prob(&s.prompt, &s.tokens, 1.0, -1.0 / tokens as f64);
    }
    g.evaluate(model)
}

/// Trains `init` by maximum likelihood on the corpus training split.
pub fn pretrain(init: &PolicyModel, corpus: &Corpus, cfg: &PretrainConfig) -> Result<(PolicyModel, PretrainReport)> {
    cfg.validate()?;
    let (train, held) = corpus.split(cfg.heldout_every);
    if train.is_empty() || held.is_empty() {
        return Err(arg("corpus too small for a train/held-out split"));
    }
    let held = if cfg.heldout_size == 0 || cfg.heldout_size >= held.len() {
        held
    } else {
        let stride = held.len() / cfg.heldout_size;
        held.into_iter().step_by(stride).take(cfg.heldout_size).collect()
    };
    let mut model = init.clone();
    let mut adam = AdamState::for_params(&model.params);
    let mut rng = stream(cfg.seed, STREAM_PRETRAIN);
    let mut report = PretrainReport {
        uniform_loss: crate::math::ln(model.config().v_gen as f64),
        ..PretrainReport::default()
    };
    let numerical = |step: usize, m: &PolicyModel| Error::Numerical {
        step,
        what: "pretraining loss".into(),
        param_norm: m.params.norm(),
    };
    let mut step = 0;
    loop {
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let loss = per_token_loss(&model, &held).map_err(|_| numerical(step, &model))?;
            report.heldout.push((step, loss));
            if let Some(&(_, old)) = report.heldout.iter().rev().find(|(s, _)| step >= s + cfg.window) {
                if old - loss < cfg.min_improvement {
                    report.stopped_early = step < cfg.max_steps;
                    break;
                }
            }
        }
        if step == cfg.max_steps {
            break;
        }
        let mut g = LossGraph::new(&model);
        let w = -1.0 / (cfg.batch_size * corpus.seq_len) as f64;
        for _ in 0..cfg.batch_size {
            let s = train[rng.random_range(0..train.len())];
            g.add_log_prob(&s.prompt, &s.tokens, 1.0, w);
        }
        let (value, grad) = g.value_and_grad(&model).map_err(|_| numerical(step, &model))?;
        if !value.is_finite() || !grad.is_finite() {
            return Err(numerical(step, &model));
        }
        adam_step(&mut model.params, &grad, &mut adam, cfg.lr)?;
        step += 1;
    }
    report.steps = step;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_styles, sample_corpus};
    use crate::seqmodel::{init_model, ModelConfig};

    fn setup() -> (PolicyModel, Corpus) {
        let styles = gen_styles(2, 4, 1, 3.0).unwrap();
        let corpus = sample_corpus(&styles, 20, 8, 2).unwrap();
        let m = init_model(&ModelConfig {
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            v_prompt: corpus.v_prompt,
            v_gen: corpus.v_gen,
            seq_len: 8,
            prompt_len: 1,
            init_seed: 1,
            tie_output: false,
        })
        .unwrap();
        (m, corpus)
    }

    #[test]
    fn zero_cap_returns_init() {
        let (m, corpus) = setup();
        let cfg = PretrainConfig {
            max_steps: 0,
            ..PretrainConfig::default()
        };
        let (out, report) = pretrain(&m, &corpus, &cfg).unwrap();
        assert_eq!(out.params.content_hash(), m.params.content_hash());
        assert_eq!(report.steps, 0);
    }

    #[test]
    fn loss_drops_below_uniform() {
        let (m, corpus) = setup();
        let cfg = PretrainConfig {
            max_steps: 300,
            batch_size: 8,
            lr: 1e-2,
            ..PretrainConfig::default()
        };
        let (a, report) = pretrain(&m, &corpus, &cfg).unwrap();
        assert!(report.final_loss().unwrap() < report.uniform_loss);
        let (b, _) = pretrain(&m, &corpus, &cfg).unwrap();
        assert_eq!(a.params.content_hash(), b.params.content_hash());
    }
}
