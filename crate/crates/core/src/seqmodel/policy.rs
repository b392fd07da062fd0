use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

use super::config::ModelConfig;
use super::params::ParamVector;
use super::transformer::{build_layout, init_scales, DecodeState, Net, Offsets, Trace};
use crate::error::{arg, structural, Error, Result};
use crate::math::{entropy, ln, log_softmax_into, sample_index, softmax_into};
use crate::rng::{normal, stream, uniform};
use crate::Token;

/// Sampling temperature used for student rollouts.
pub const DEFAULT_TEMPERATURE: f64 = 0.99;

const STREAM_INIT: u64 = 0x494e_4954;

/// A sampled sequence together with the entropy (nats) of the sampling
/// distribution at every generated position and its total log-probability at
/// the sampling temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<Token>,
    pub entropies: Vec<f64>,
    pub log_prob: f64,
}

/// Anything that can be rolled out autoregressively: plain models and
/// guided teachers alike.
pub trait Policy {
    fn seq_len(&self) -> usize;
    fn v_gen(&self) -> usize;
    fn rollout(&self, prompt: &[Token], temperature: f64, rng: &mut dyn RngCore) -> Result<Rollout>;
}

/// Causal model `m_theta`: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    config: ModelConfig,
    pub params: ParamVector,
    offsets: Offsets,
}

/// Builds a model with scaled-normal parameters drawn from `config.init_seed`.
pub fn init_model(config: &ModelConfig) -> Result<PolicyModel> {
    config.validate()?;
    let (layout, offsets) = build_layout(config);
    let n = layout.len();
    let (std, fill) = init_scales(config, &offsets, n);
    let mut rng = stream(config.init_seed, STREAM_INIT);
    let values = std
        .iter()
        .zip(&fill)
        .map(|(&s, &f)| if s > 0.0 { s * normal(&mut rng) } else { f })
        .collect();
    let params = ParamVector::new(values, layout, config.lineage_hash())?;
    Ok(PolicyModel {
        config: config.clone(),
        params,
        offsets,
    })
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(arg("temperature must be positive"))
    }
}

impl PolicyModel {
    /// Rebuilds a model around existing parameters, checking layout and lineage.
    pub fn from_params(config: &ModelConfig, params: ParamVector) -> Result<Self> {
        config.validate()?;
        let (layout, offsets) = build_layout(config);
        if params.layout() != &layout {
            return Err(structural("parameter layout does not match the configuration"));
        }
        if params.lineage() != config.lineage_hash() {
            return Err(structural("parameter lineage does not match the configuration"));
        }
        Ok(PolicyModel {
            config: config.clone(),
            params,
            offsets,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub(crate) fn net(&self) -> Net<'_> {
        Net {
            c: &self.config,
            off: &self.offsets,
            p: &self.params.values,
        }
    }

    pub fn check_prompt(&self, prompt: &[Token]) -> Result<()> {
        if prompt.len() != self.config.prompt_len {
            return Err(arg("prompt length differs from prompt_len"));
        }
        if let Some(&t) = prompt.iter().find(|&&t| t as usize >= self.config.v_prompt) {
            return Err(Error::Domain {
                token: t,
                vocab: self.config.v_prompt,
            });
        }
        Ok(())
    }

    pub(crate) fn check_tokens(&self, y: &[Token]) -> Result<()> {
        if let Some(&t) = y.iter().find(|&&t| t as usize >= self.config.v_gen) {
            return Err(Error::Domain {
                token: t,
                vocab: self.config.v_gen,
            });
        }
        Ok(())
    }

    /// Next-token logits `z_n` after `prompt` and `y_prefix`.
    pub fn logits(&self, prompt: &[Token], y_prefix: &[Token]) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        self.check_tokens(y_prefix)?;
        if y_prefix.len() >= self.config.seq_len {
            return Err(arg("prefix must be shorter than seq_len"));
        }
        let all = self.net().run(prompt, y_prefix, None);
        let v = self.config.v_gen;
        Ok(all[all.len() - v..].to_vec())
    }

    /// `pi_theta(. | y_prefix, x)` at temperature `t`.
    pub fn next_dist(&self, prompt: &[Token], y_prefix: &[Token], t: f64) -> Result<Vec<f64>> {
        check_temperature(t)?;
        let z = self.logits(prompt, y_prefix)?;
        let mut p = vec![0.0; z.len()];
        softmax_into(&z, t, &mut p);
        Ok(p)
    }

    /// Logits at every generated position of `y` under teacher forcing,
    /// `y.len()` rows of `v_gen`.
    pub fn teacher_forced_logits(&self, prompt: &[Token], y: &[Token]) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        self.check_tokens(y)?;
        if y.is_empty() || y.len() > self.config.seq_len {
            return Err(arg("sequence length must be in 1..=seq_len"));
        }
        let mut all = self.net().run(prompt, &y[..y.len() - 1], None);
        all.truncate(y.len() * self.config.v_gen);
        Ok(all)
    }

    /// Teacher-forced pass that records activations for [`super::backward`].
    pub(crate) fn traced(&self, prompt: &[Token], y: &[Token]) -> Result<Trace> {
        self.check_prompt(prompt)?;
        self.check_tokens(y)?;
        if y.is_empty() || y.len() > self.config.seq_len {
            return Err(arg("sequence length must be in 1..=seq_len"));
        }
        let mut trace = Trace::default();
        self.net().run(prompt, &y[..y.len() - 1], Some(&mut trace));
        Ok(trace)
    }

    /// `log p_theta(y | x) = sum_n log pi_theta(s_n | y_<n, x)`.
    pub fn log_prob(&self, prompt: &[Token], y: &[Token], t: f64) -> Result<f64> {
        check_temperature(t)?;
        if y.len() != self.config.seq_len {
            return Err(arg("sequence length differs from seq_len"));
        }
        let z = self.teacher_forced_logits(prompt, y)?;
        let v = self.config.v_gen;
        let mut lp = vec![0.0; v];
        let mut total = 0.0;
        for (n, &s) in y.iter().enumerate() {
            log_softmax_into(&z[n * v..(n + 1) * v], t, &mut lp);
            total += lp[s as usize];
        }
        Ok(total)
    }

    /// Ancestral sampling of a full sequence of length `L`.
    pub fn sample(&self, prompt: &[Token], t: f64, rng: &mut dyn RngCore) -> Result<Vec<Token>> {
        Ok(self.rollout(prompt, t, rng)?.tokens)
    }

    /// Feeds the prompt into a fresh cache and returns the first logits row.
    pub(crate) fn prefill(&self, prompt: &[Token], state: &mut DecodeState, logits: &mut [f64]) {
        let net = self.net();
        for &tok in prompt {
            net.step(true, tok, state, logits);
        }
    }

    pub(crate) fn new_state(&self) -> DecodeState {
        self.net().new_state()
    }

    pub(crate) fn decode(&self, token: Token, state: &mut DecodeState, logits: &mut [f64]) {
        self.net().step(false, token, state, logits);
    }
}

impl Policy for PolicyModel {
    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn v_gen(&self) -> usize {
        self.config.v_gen
    }

    fn rollout(&self, prompt: &[Token], t: f64, rng: &mut dyn RngCore) -> Result<Rollout> {
        check_temperature(t)?;
        self.check_prompt(prompt)?;
        let (l, v) = (self.config.seq_len, self.config.v_gen);
        let mut state = self.new_state();
        let mut z = vec![0.0; v];
        let mut p = vec![0.0; v];
        self.prefill(prompt, &mut state, &mut z);
        let mut tokens = Vec::with_capacity(l);
        let mut entropies = Vec::with_capacity(l);
        let mut log_prob = 0.0;
        for n in 0..l {
            softmax_into(&z, t, &mut p);
            entropies.push(entropy(&p));
            let s = sample_index(&p, uniform(rng)) as Token;
            log_prob += ln(p[s as usize]);
            tokens.push(s);
            if n + 1 < l {
                self.decode(s, &mut state, &mut z);
            }
        }
        Ok(Rollout {
            tokens,
            entropies,
            log_prob,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::exp;

    fn tiny(v_gen: usize, seq_len: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            v_prompt: 3,
            v_gen,
            seq_len,
            prompt_len: 1,
            init_seed: 3,
            tie_output: false,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&ModelConfig::default()).unwrap();
        let b = init_model(&ModelConfig::default()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.params.content_hash(), b.params.content_hash());
    }

    #[test]
    fn init_logits_nondegenerate() {
        let m = init_model(&ModelConfig::default()).unwrap();
        let mut rng = stream(1, 1);
        for _ in 0..10 {
            let prompt = [rng.next_u32() % 10];
            let plen = (rng.next_u32() % 31) as usize;
            let prefix: Vec<Token> = (0..plen).map(|_| rng.next_u32() % 18).collect();
            let z = m.logits(&prompt, &prefix).unwrap();
            assert_eq!(z.len(), 18);
            let mean = z.iter().sum::<f64>() / 18.0;
            let var = z.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 18.0;
            assert!(z.iter().all(|x| x.is_finite()));
            assert!(var.sqrt() > 0.0);
        }
    }

    #[test]
    fn causal_prefix_invariance() {
        let m = init_model(&tiny(5, 6)).unwrap();
        let y = [1, 4, 2, 0, 3];
        let full = m.teacher_forced_logits(&[2], &y).unwrap();
        for n in 0..y.len() {
            let z = m.logits(&[2], &y[..n]).unwrap();
            assert_eq!(z[..], full[n * 5..(n + 1) * 5]);
        }
        // changing a later token leaves earlier rows intact
        let y2 = [1, 4, 2, 1, 3];
        let full2 = m.teacher_forced_logits(&[2], &y2).unwrap();
        assert_eq!(full[..4 * 5], full2[..4 * 5]);
        assert_ne!(full[4 * 5..], full2[4 * 5..]);
    }

    #[test]
    fn tied_output_runs() {
        let mut c = tiny(4, 4);
        c.tie_output = true;
        let m = init_model(&c).unwrap();
        assert!(m.params.layout().segment("head.w_out").is_none());
        assert_eq!(m.logits(&[0], &[1, 2]).unwrap().len(), 4);
    }

    #[test]
    fn argument_errors() {
        let m = init_model(&tiny(4, 4)).unwrap();
        assert!(m.logits(&[0], &[0, 1, 2, 3]).is_err());
        assert!(m.logits(&[0, 1], &[]).is_err());
        assert!(m.logits(&[7], &[]).is_err());
        assert!(matches!(m.logits(&[0], &[9]), Err(Error::Domain { .. })));
        assert!(m.next_dist(&[0], &[], 0.0).is_err());
        assert!(m.next_dist(&[0], &[], -1.0).is_err());
        assert!(m.log_prob(&[0], &[1, 2], 1.0).is_err());
    }

    #[test]
    fn low_temperature_concentrates() {
        let mut p = [0.0; 2];
        softmax_into(&[1.0, 0.0], 0.01, &mut p);
        assert!(p[0] >= 0.99);
        softmax_into(&[0.5, 0.5], 1.0, &mut p);
        assert_eq!(p, [0.5, 0.5]);
    }

    #[test]
    fn next_dist_normalized() {
        let m = init_model(&tiny(6, 5)).unwrap();
        for t in [0.3, 0.99, 2.0] {
            let p = m.next_dist(&[1], &[0, 5], t).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn log_prob_sums_to_one() {
        for (v, l) in [(2usize, 2usize), (3, 3), (2, 3)] {
            let m = init_model(&tiny(v, l)).unwrap();
            let mut total = 0.0;
            let count = v.pow(l as u32);
            for idx in 0..count {
                let mut y = Vec::new();
                let mut k = idx;
                for _ in 0..l {
                    y.push((k % v) as Token);
                    k /= v;
                }
                let lp = m.log_prob(&[0], &y, 0.8).unwrap();
                assert!(lp <= 0.0);
                total += exp(lp);
            }
            assert!((total - 1.0).abs() < 1e-12, "v={v} l={l} total={total}");
        }
    }

    #[test]
    fn uniform_logits_log_prob() {
        // Zeroing the head makes every distribution uniform.
        let mut m = init_model(&tiny(2, 3)).unwrap();
        let layout = m.params.layout().clone();
        for name in ["head.w_out", "head.b_out"] {
            let s = layout.segment(name).unwrap();
            for v in &mut m.params.values[s.offset..s.offset + s.len()] {
                *v = 0.0;
            }
        }
        let lp = m.log_prob(&[0], &[0, 1, 1], 1.0).unwrap();
        assert!((lp - 3.0 * ln(0.5)).abs() < 1e-15);
    }

    #[test]
    fn sampling_reproducible_and_finite() {
        let m = init_model(&tiny(5, 6)).unwrap();
        let a = m.sample(&[1], 0.99, &mut stream(4, 0)).unwrap();
        let b = m.sample(&[1], 0.99, &mut stream(4, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(m.log_prob(&[1], &a, 0.99).unwrap().is_finite());
    }

    #[test]
    fn first_token_frequencies_match() {
        let m = init_model(&tiny(4, 2)).unwrap();
        let p = m.next_dist(&[2], &[], 1.0).unwrap();
        let mut rng = stream(5, 0);
        let mut counts = [0.0f64; 4];
        let n = 50_000;
        for _ in 0..n {
            let y = m.sample(&[2], 1.0, &mut rng).unwrap();
            counts[y[0] as usize] += 1.0;
        }
        for i in 0..4 {
            assert!((counts[i] / n as f64 - p[i]).abs() <= 0.01, "{counts:?} {p:?}");
        }
    }

    #[test]
    fn parameter_perturbation_is_local() {
        let m = init_model(&tiny(5, 4)).unwrap();
        let base = m.logits(&[1], &[2, 3]).unwrap();
        let mut rng = stream(8, 8);
        for _ in 0..50 {
            let mut p = m.clone();
            let i = (rng.next_u64() % p.params.len() as u64) as usize;
            p.params.values[i] += 1e-6;
            let z = p.logits(&[1], &[2, 3]).unwrap();
            let diff = z.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-3);
        }
    }

    #[test]
    fn from_params_checks_lineage() {
        let m = init_model(&tiny(4, 4)).unwrap();
        let mut other = tiny(4, 4);
        other.init_seed = 99;
        assert!(PolicyModel::from_params(&other, m.params.clone()).is_err());
        assert!(PolicyModel::from_params(&tiny(4, 4), m.params.clone()).is_ok());
    }
}
