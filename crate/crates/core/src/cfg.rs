//! Classifier-free guidance over a frozen base model.
//!
//! Guided logits combine a conditional and a negative-prompt pass:
//! `z = gamma * m(s | y_<n, x) + (1 - gamma) * m(s | y_<n, x_neg)`.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{arg, Result};
use crate::math::{entropy, ln, sample_index, softmax_into};
use crate::rng::uniform;
use crate::seqmodel::{check_temperature, Policy, PolicyModel, Rollout};
use crate::Token;

/// Guidance factor used for the teacher throughout.
pub const DEFAULT_GAMMA: f64 = 3.0;

/// Which prompt plays the role of `x_neg`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeKind {
    /// The degraded-style descriptor.
    Negative,
    /// The reserved empty prompt (unconditional guidance).
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfgConfig {
    pub gamma: f64,
    pub negative_prompt: Vec<Token>,
}

impl CfgConfig {
    pub fn new(gamma: f64, negative_prompt: Vec<Token>) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(arg("gamma must be a finite value >= 0"));
        }
        Ok(CfgConfig {
            gamma,
            negative_prompt,
        })
    }

    pub fn for_corpus(corpus: &Corpus, gamma: f64, kind: NegativeKind) -> Result<Self> {
        let tok = match kind {
            NegativeKind::Negative => corpus.negative_token(),
            NegativeKind::Empty => corpus.empty_token(),
        };
        Self::new(gamma, vec![tok])
    }
}

/// Guided teacher. Borrows the base model immutably, so its parameters
/// cannot change through this wrapper.
#[derive(Debug)]
pub struct CfgPolicy<'a> {
    base: &'a PolicyModel,
    cfg: CfgConfig,
    evaluations: AtomicU64,
}

impl<'a> CfgPolicy<'a> {
    pub fn new(base: &'a PolicyModel, cfg: CfgConfig) -> Result<Self> {
        base.check_prompt(&cfg.negative_prompt)?;
        Ok(CfgPolicy {
            base,
            cfg,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn base(&self) -> &PolicyModel {
        self.base
    }

    pub fn config(&self) -> &CfgConfig {
        &self.cfg
    }

    pub fn gamma(&self) -> f64 {
        self.cfg.gamma
    }

    /// Number of single-position model evaluations performed so far; every
    /// guided position costs two.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    fn count(&self, n: usize) {
        self.evaluations.fetch_add(n as u64, Ordering::Relaxed);
    }

    /// Writes the guided combination of `cond` and `neg` into `out`.
    fn combine(&self, cond: &[f64], neg: &[f64], out: &mut [f64]) {
        let g = self.cfg.gamma;
        if g == 1.0 {
            out.copy_from_slice(cond);
            return;
        }
        if g == 0.0 {
            out.copy_from_slice(neg);
            return;
        }
        for ((o, &c), &n) in out.iter_mut().zip(cond).zip(neg) {
            *o = g * c + (1.0 - g) * n;
        }
    }

    /// Guided logits after `y_prefix`.
    pub fn cfg_logits(&self, prompt: &[Token], y_prefix: &[Token]) -> Result<Vec<f64>> {
        let cond = self.base.logits(prompt, y_prefix)?;
        let neg = self.base.logits(&self.cfg.negative_prompt, y_prefix)?;
        self.count(2);
        let mut out = vec![0.0; cond.len()];
        self.combine(&cond, &neg, &mut out);
        Ok(out)
    }

    /// `pi^CFG(. | y_prefix, x)` at temperature `t`.
    pub fn cfg_next_dist(&self, prompt: &[Token], y_prefix: &[Token], t: f64) -> Result<Vec<f64>> {
        check_temperature(t)?;
        let z = self.cfg_logits(prompt, y_prefix)?;
        let mut p = vec![0.0; z.len()];
        softmax_into(&z, t, &mut p);
        Ok(p)
    }

    /// Guided next-token distributions at every position of `y` under teacher
    /// forcing: `y.len()` rows of `v_gen`.
    pub fn cfg_dists_along(&self, prompt: &[Token], y: &[Token], t: f64) -> Result<Vec<f64>> {
        check_temperature(t)?;
        let cond = self.base.teacher_forced_logits(prompt, y)?;
        let neg = self.base.teacher_forced_logits(&self.cfg.negative_prompt, y)?;
        self.count(2 * y.len());
        let v = self.base.config().v_gen;
        let mut z = vec![0.0; v];
        let mut out = vec![0.0; cond.len()];
        for n in 0..y.len() {
            let r = n * v..(n + 1) * v;
            self.combine(&cond[r.clone()], &neg[r.clone()], &mut z);
            softmax_into(&z, t, &mut out[r]);
        }
        Ok(out)
    }

    /// Ancestral sampling from the guided policy.
    pub fn cfg_sample(&self, prompt: &[Token], t: f64, rng: &mut dyn RngCore) -> Result<Vec<Token>> {
        Ok(self.rollout(prompt, t, rng)?.tokens)
    }
}

impl Policy for CfgPolicy<'_> {
    fn seq_len(&self) -> usize {
        self.base.config().seq_len
    }

    fn v_gen(&self) -> usize {
        self.base.config().v_gen
    }

    fn rollout(&self, prompt: &[Token], t: f64, rng: &mut dyn RngCore) -> Result<Rollout> {
        check_temperature(t)?;
        self.base.check_prompt(prompt)?;
        let (l, v) = (self.seq_len(), self.v_gen());
        let mut cond_state = self.base.new_state();
        let mut neg_state = self.base.new_state();
        let mut zc = vec![0.0; v];
        let mut zn = vec![0.0; v];
        let mut z = vec![0.0; v];
        let mut p = vec![0.0; v];
        self.base.prefill(prompt, &mut cond_state, &mut zc);
        self.base.prefill(&self.cfg.negative_prompt, &mut neg_state, &mut zn);
        let mut tokens = Vec::with_capacity(l);
        let mut entropies = Vec::with_capacity(l);
        let mut log_prob = 0.0;
        for n in 0..l {
            self.count(2);
            self.combine(&zc, &zn, &mut z);
            softmax_into(&z, t, &mut p);
            entropies.push(entropy(&p));
            let s = sample_index(&p, uniform(rng)) as Token;
            log_prob += ln(p[s as usize]);
            tokens.push(s);
            if n + 1 < l {
                self.base.decode(s, &mut cond_state, &mut zc);
                self.base.decode(s, &mut neg_state, &mut zn);
            }
        }
        Ok(Rollout {
            tokens,
            entropies,
            log_prob,
        })
    }
}
