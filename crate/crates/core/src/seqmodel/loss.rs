//! Scalar losses built from per-position log-probability and KL terms, and
//! their exact reverse-mode gradient.

use alloc::vec;
use alloc::vec::Vec;

use super::params::GradBuffer;
use super::policy::{check_temperature, PolicyModel};
use crate::error::{arg, structural, Error, Result};
use crate::hash::Digest;
use crate::math::{ln, log_softmax_into, softmax_into};
use crate::Token;

/// One differentiable contribution attached to a teacher-forced sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    /// `weight * log p_theta(y | x)` at `temperature`.
    LogProb { weight: f64, temperature: f64 },
    /// `weight * sum_n KL(pi_theta(.|y_<n,x) || q_n)`, where `targets` holds one
    /// fixed distribution `q_n` per position (`y.len()` rows of `v_gen`).
    KlTo {
        targets: Vec<f64>,
        weight: f64,
        temperature: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTerm {
    pub prompt: Vec<Token>,
    pub tokens: Vec<Token>,
    pub parts: Vec<Part>,
}

/// A scalar loss over one model: a constant plus sequence terms. The graph
/// is bound to the lineage of the model it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGraph {
    lineage: Digest,
    pub constant: f64,
    pub terms: Vec<SequenceTerm>,
}

impl LossGraph {
    pub fn new(model: &PolicyModel) -> Self {
        LossGraph {
            lineage: model.params.lineage(),
            constant: 0.0,
            terms: Vec::new(),
        }
    }

    pub fn constant(model: &PolicyModel, c: f64) -> Self {
        let mut g = Self::new(model);
        g.constant = c;
        g
    }

    pub fn lineage(&self) -> Digest {
        self.lineage
    }

    pub fn push(&mut self, prompt: &[Token], tokens: &[Token], parts: Vec<Part>) {
        self.terms.push(SequenceTerm {
            prompt: prompt.to_vec(),
            tokens: tokens.to_vec(),
            parts,
        });
    }

    pub fn add_log_prob(&mut self, prompt: &[Token], tokens: &[Token], temperature: f64, weight: f64) {
        self.push(prompt, tokens, vec![Part::LogProb { weight, temperature }]);
    }

    fn check(&self, model: &PolicyModel) -> Result<()> {
        if self.lineage != model.params.lineage() {
            return Err(structural("loss graph is not connected to this model"));
        }
        let v = model.config().v_gen;
        for term in &self.terms {
            for part in &term.parts {
                match part {
                    Part::LogProb { temperature, .. } => check_temperature(*temperature)?,
                    Part::KlTo {
                        targets,
                        temperature,
                        ..
                    } => {
                        check_temperature(*temperature)?;
                        if targets.len() != term.tokens.len() * v {
                            return Err(structural("KL targets do not cover every position"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Loss value without gradients.
    pub fn evaluate(&self, model: &PolicyModel) -> Result<f64> {
        self.check(model)?;
        let mut total = self.constant;
        for term in &self.terms {
            let z = model.teacher_forced_logits(&term.prompt, &term.tokens)?;
            total += term_value_and_dlogits(model, term, &z, None)?;
        }
        Ok(total)
    }

    /// Loss value and exact gradient with respect to every parameter.
    pub fn value_and_grad(&self, model: &PolicyModel) -> Result<(f64, GradBuffer)> {
        self.check(model)?;
        let v = model.config().v_gen;
        let mut grad = GradBuffer::zeros(model.params.len());
        let mut total = self.constant;
        let net = model.net();
        for term in &self.terms {
            let trace = model.traced(&term.prompt, &term.tokens)?;
            let n_in = trace.n_positions();
            let first = n_in - term.tokens.len();
            let z = &trace.logits[first * v..];
            let mut dlogits = vec![0.0; n_in * v];
            total += term_value_and_dlogits(model, term, z, Some(&mut dlogits[first * v..]))?;
            net.backward(&trace, &dlogits, &mut grad.values);
        }
        Ok((total, grad))
    }
}

/// Exact gradient of `graph` with respect to the parameters of `model`.
pub fn backward(model: &PolicyModel, graph: &LossGraph) -> Result<GradBuffer> {
    Ok(graph.value_and_grad(model)?.1)
}

/// Value of one sequence term given its logits (one row per generated
/// position); optionally writes d(value)/d(logits).
fn term_value_and_dlogits(
    model: &PolicyModel,
    term: &SequenceTerm,
    z: &[f64],
    mut dz: Option<&mut [f64]>,
) -> Result<f64> {
    let v = model.config().v_gen;
    let mut p = vec![0.0; v];
    let mut lp = vec![0.0; v];
    let mut total = 0.0;
    for part in &term.parts {
        match part {
            Part::LogProb {
                weight,
                temperature: t,
            } => {
                for (n, &s) in term.tokens.iter().enumerate() {
                    let row = &z[n * v..(n + 1) * v];
                    log_softmax_into(row, *t, &mut lp);
                    total += weight * lp[s as usize];
                    if let Some(dz) = dz.as_deref_mut() {
                        softmax_into(row, *t, &mut p);
                        let g = &mut dz[n * v..(n + 1) * v];
                        for k in 0..v {
                            let onehot = if k == s as usize { 1.0 } else { 0.0 };
                            g[k] += weight * (onehot - p[k]) / t;
                        }
                    }
                }
            }
            Part::KlTo {
                targets,
                weight,
                temperature: t,
            } => {
                for n in 0..term.tokens.len() {
                    let row = &z[n * v..(n + 1) * v];
                    let q = &targets[n * v..(n + 1) * v];
                    softmax_into(row, *t, &mut p);
                    log_softmax_into(row, *t, &mut lp);
                    let mut kl = 0.0;
                    for k in 0..v {
                        if p[k] > 0.0 {
                            if q[k] <= 0.0 {
                                return Err(Error::DivergenceInfinite { index: k });
                            }
                            kl += p[k] * (lp[k] - ln(q[k]));
                        }
                    }
                    total += weight * kl;
                    if let Some(dz) = dz.as_deref_mut() {
                        let g = &mut dz[n * v..(n + 1) * v];
                        for k in 0..v {
                            if p[k] > 0.0 {
                                g[k] += weight * p[k] * (lp[k] - ln(q[k]) - kl) / t;
                            }
                        }
                    }
                }
            }
        }
    }
    if !total.is_finite() {
        return Err(arg("loss term is not finite"));
    }
    Ok(total)
}
