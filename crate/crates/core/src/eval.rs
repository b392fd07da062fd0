//! Quality, diversity and entropy metrics, and quality-diversity fronts.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::cfg::{CfgConfig, CfgPolicy};
use crate::corpus::{AdherenceOracle, Corpus, StyleSpec};
use crate::diversity::{reward_from_embeddings, reward_set_embedded, EmbeddingModel};
use crate::error::{arg, Error, Result};
use crate::math::mean_se;
use crate::merge::sweep_lambda;
use crate::rng::stream;
use crate::seqmodel::{Policy, PolicyModel};
use crate::Token;

/// Weight of adherence inside the quality score.
pub const DEFAULT_OMEGA: f64 = 5.0;

const STREAM_EVAL: u64 = 0x4556_414c;
const STREAM_CROSS: u64 = 0x4352_4f53;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_prompts: usize,
    /// Generations per prompt.
    pub m: usize,
    pub t_eval: f64,
    pub omega: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_prompts: 200,
            m: 4,
            t_eval: 1.0,
            omega: DEFAULT_OMEGA,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(arg("eval needs M >= 2 generations per prompt"));
        }
        if self.n_prompts == 0 {
            return Err(arg("n_prompts must be positive"));
        }
        if !(self.t_eval > 0.0) || !(self.omega >= 0.0) {
            return Err(arg("t_eval must be positive and omega non-negative"));
        }
        Ok(())
    }
}

/// `omega * adherence + preference` from precomputed oracle values.
pub fn combine_quality(adherence: f64, preference: f64, omega: f64) -> f64 {
    omega * adherence + preference
}

/// `omega * oracle_adherence(y, style) + oracle_preference(y)`.
pub fn quality_score(y: &[Token], style: &StyleSpec, omega: f64) -> Result<f64> {
    let adherence = crate::corpus::oracle_adherence(y, style)?;
    Ok(combine_quality(adherence, crate::corpus::oracle_preference(y, style.noise_from), omega))
}

/// Aggregated evaluation of one policy; standard errors are taken across
/// prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub quality: f64,
    pub quality_se: f64,
    pub adherence: f64,
    pub adherence_se: f64,
    pub preference: f64,
    pub diversity: f64,
    pub diversity_se: f64,
    /// Mean entropy (nats) of the sampling distribution per generated token.
    pub entropy: f64,
    pub n_prompts: usize,
    pub m: usize,
    /// Prompts left out of the diversity mean for degenerate embeddings.
    pub skipped: usize,
}

/// Evaluation prompts: the regular styles in round-robin order.
pub fn eval_prompts(corpus: &Corpus, n: usize) -> Vec<Vec<Token>> {
    let ps = corpus.prompts();
    (0..n).map(|k| ps[k % ps.len()].clone()).collect()
}

/// Oracles for every regular style, keyed by prompt.
pub struct QualityOracle<'c> {
    corpus: &'c Corpus,
    adherence: Vec<AdherenceOracle<'c>>,
    omega: f64,
}

impl<'c> QualityOracle<'c> {
    pub fn new(corpus: &'c Corpus, omega: f64) -> Result<Self> {
        let adherence = corpus
            .styles
            .iter()
            .map(|s| AdherenceOracle::new(s, corpus.seq_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(QualityOracle {
            corpus,
            adherence,
            omega,
        })
    }

    /// `(adherence, preference, quality)` of `y` under the style of `prompt`.
    pub fn score(&self, prompt: &[Token], y: &[Token]) -> Result<(f64, f64, f64)> {
        let style = self
            .corpus
            .style_for_prompt(prompt)
            .ok_or_else(|| arg("prompt is not bound to a regular style"))?;
        let idx = self
            .corpus
            .styles
            .iter()
            .position(|s| s.style_id == style.style_id)
            .expect("style present");
        let a = self.adherence[idx].score(y)?;
        let p = self.corpus.preference(y);
        Ok((a, p, combine_quality(a, p, self.omega)))
    }
}

/// Samples `M` generations for each evaluation prompt and aggregates
/// quality, within-prompt diversity and entropy. Prompt `k` draws from its own
/// stream, so two policies evaluated with one seed share random numbers.
pub fn evaluate(
    policy: &dyn Policy,
    corpus: &Corpus,
    e: &EmbeddingModel,
    cfg: &EvalConfig,
) -> Result<Metrics> {
    cfg.validate()?;
    let oracle = QualityOracle::new(corpus, cfg.omega)?;
    let prompts = eval_prompts(corpus, cfg.n_prompts);
    let mut q = Vec::with_capacity(prompts.len());
    let mut adh = Vec::with_capacity(prompts.len());
    let mut pref = Vec::with_capacity(prompts.len());
    let mut div = Vec::with_capacity(prompts.len());
    let mut ent_sum = 0.0;
    let mut ent_n = 0usize;
    let mut skipped = 0;
    for (k, prompt) in prompts.iter().enumerate() {
        let mut rng = stream(cfg.seed ^ STREAM_EVAL, k as u64);
        let (mut qs, mut adhs, mut prefs) = (0.0, 0.0, 0.0);
        let mut embs = Vec::with_capacity(cfg.m);
        for _ in 0..cfg.m {
            let r = policy.rollout(prompt, cfg.t_eval, &mut rng)?;
            let (a, p, qq) = oracle.score(prompt, &r.tokens)?;
            qs += qq;
            adhs += a;
            prefs += p;
            ent_sum += r.entropies.iter().sum::<f64>();
            ent_n += r.entropies.len();
            embs.push(e.embed(&r.tokens)?);
        }
        let mf = cfg.m as f64;
        q.push(qs / mf);
        adh.push(adhs / mf);
        pref.push(prefs / mf);
        match reward_set_embedded(&embs) {
            Ok(d) => div.push(d),
            Err(Error::DegenerateEmbedding { .. }) => skipped += 1,
            Err(err) => return Err(err),
        }
    }
    let (quality, quality_se) = mean_se(&q);
    let (adherence, adherence_se) = mean_se(&adh);
    let (diversity, diversity_se) = if div.is_empty() { (0.0, 0.0) } else { mean_se(&div) };
    Ok(Metrics {
        quality,
        quality_se,
        adherence,
        adherence_se,
        preference: mean_se(&pref).0,
        diversity,
        diversity_se,
        entropy: ent_sum / ent_n as f64,
        n_prompts: prompts.len(),
        m: cfg.m,
        skipped,
    })
}

/// Mean within-prompt diversity of `m` generations per prompt.
pub fn diversity_score(
    policy: &dyn Policy,
    e: &EmbeddingModel,
    prompts: &[Vec<Token>],
    m: usize,
    t_eval: f64,
    rng: &mut dyn RngCore,
) -> Result<(f64, usize)> {
    if m < 2 {
        return Err(arg("diversity needs M >= 2"));
    }
    let mut vals = Vec::with_capacity(prompts.len());
    let mut skipped = 0;
    for p in prompts {
        let embs = (0..m)
            .map(|_| e.embed(&policy.rollout(p, t_eval, rng)?.tokens))
            .collect::<Result<Vec<_>>>()?;
        match reward_set_embedded(&embs) {
            Ok(d) => vals.push(d),
            Err(Error::DegenerateEmbedding { .. }) => skipped += 1,
            Err(err) => return Err(err),
        }
    }
    if vals.is_empty() {
        return Err(Error::DegenerateEmbedding { norm: 0.0 });
    }
    Ok((vals.iter().sum::<f64>() / vals.len() as f64, skipped))
}

/// Mean reward between generations for two different prompts, averaged over
/// `n_pairs` random prompt pairs.
pub fn cross_prompt_upper_bound(
    policy: &dyn Policy,
    e: &EmbeddingModel,
    prompts: &[Vec<Token>],
    n_pairs: usize,
    t_eval: f64,
    seed: u64,
) -> Result<f64> {
    if prompts.len() < 2 {
        return Err(arg("cross-prompt diversity needs at least two prompts"));
    }
    if n_pairs == 0 {
        return Err(arg("n_pairs must be positive"));
    }
    let mut rng = stream(seed, STREAM_CROSS);
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let i = rng.random_range(0..prompts.len());
        let mut j = rng.random_range(0..prompts.len() - 1);
        if j >= i {
            j += 1;
        }
        let a = e.embed(&policy.rollout(&prompts[i], t_eval, &mut rng)?.tokens)?;
        let b = e.embed(&policy.rollout(&prompts[j], t_eval, &mut rng)?.tokens)?;
        total += reward_from_embeddings(&a, &b)?;
    }
    Ok(total / n_pairs as f64)
}

/// Mean Shannon entropy (nats) of the next-token distribution over all
/// rollout positions, one rollout per prompt.
pub fn entropy_per_token(
    policy: &dyn Policy,
    prompts: &[Vec<Token>],
    t: f64,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(arg("no prompts"));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for p in prompts {
        let r = policy.rollout(p, t, rng)?;
        sum += r.entropies.iter().sum::<f64>();
        n += r.entropies.len();
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Knob {
    Beta,
    Lambda,
    Gamma,
    Temperature,
}

impl Knob {
    pub fn as_str(self) -> &'static str {
        match self {
            Knob::Beta => "beta",
            Knob::Lambda => "lambda",
            Knob::Gamma => "gamma",
            Knob::Temperature => "temperature",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "beta" => Some(Knob::Beta),
            "lambda" => Some(Knob::Lambda),
            "gamma" => Some(Knob::Gamma),
            "temperature" => Some(Knob::Temperature),
            _ => None,
        }
    }
}

/// One evaluated operating point of a front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontPoint {
    pub knob: Knob,
    pub knob_value: f64,
    pub quality: f64,
    pub diversity: f64,
    pub entropy: f64,
    /// Content hash (hex) of the evaluated parameters.
    pub model_ref: String,
    pub n_prompts: usize,
    pub m: usize,
    pub seed: u64,
    /// Name of the curve this point belongs to.
    pub curve: String,
    pub adherence: f64,
    pub quality_se: f64,
    pub diversity_se: f64,
}

impl FrontPoint {
    pub fn from_metrics(knob: Knob, knob_value: f64, m: &Metrics, model_ref: String, seed: u64, curve: &str) -> Self {
        FrontPoint {
            knob,
            knob_value,
            quality: m.quality,
            diversity: m.diversity,
            entropy: m.entropy,
            model_ref,
            n_prompts: m.n_prompts,
            m: m.m,
            seed,
            curve: curve.into(),
            adherence: m.adherence,
            quality_se: m.quality_se,
            diversity_se: m.diversity_se,
        }
    }
}

/// Grid to trace a front along.
pub enum Sweep<'a> {
    /// Interpolants between two checkpoints.
    Lambda {
        theta_q: &'a PolicyModel,
        theta_d: &'a PolicyModel,
        step: f64,
    },
    /// Guided base model at each guidance factor.
    Gamma {
        base: &'a PolicyModel,
        gammas: &'a [f64],
        negative_prompt: Vec<Token>,
    },
    /// One model sampled at each temperature.
    Temperature {
        model: &'a PolicyModel,
        temperatures: &'a [f64],
    },
    /// Explicit checkpoints tagged with a knob value.
    Checkpoints {
        knob: Knob,
        models: Vec<(f64, &'a PolicyModel)>,
    },
}

/// Evaluates every grid point of `sweep` with one shared seed.
pub fn sweep_front(
    sweep: &Sweep<'_>,
    corpus: &Corpus,
    e: &EmbeddingModel,
    cfg: &EvalConfig,
    curve: &str,
) -> Result<Vec<FrontPoint>> {
    let mut out = Vec::new();
    let point = |knob, value, policy: &dyn Policy, href: String, cfg: &EvalConfig| -> Result<FrontPoint> {
        let m = evaluate(policy, corpus, e, cfg)?;
        Ok(FrontPoint::from_metrics(knob, value, &m, href, cfg.seed, curve))
    };
    match sweep {
        Sweep::Lambda {
            theta_q,
            theta_d,
            step,
        } => {
            for (l, params) in sweep_lambda(&theta_q.params, &theta_d.params, *step)? {
                let model = PolicyModel::from_params(theta_q.config(), params)?;
                let href = model.params.content_hash().to_string();
                out.push(point(Knob::Lambda, l, &model, href, cfg)?);
            }
        }
        Sweep::Gamma {
            base,
            gammas,
            negative_prompt,
        } => {
            let href = base.params.content_hash().to_string();
            for &g in gammas.iter() {
                let teacher = CfgPolicy::new(base, CfgConfig::new(g, negative_prompt.clone())?)?;
                out.push(point(Knob::Gamma, g, &teacher, href.clone(), cfg)?);
            }
        }
        Sweep::Temperature {
            model,
            temperatures,
        } => {
            let href = model.params.content_hash().to_string();
            for &t in temperatures.iter() {
                let c = EvalConfig {
                    t_eval: t,
                    ..cfg.clone()
                };
                out.push(point(Knob::Temperature, t, *model, href.clone(), &c)?);
            }
        }
        Sweep::Checkpoints { knob, models } => {
            for (v, model) in models {
                let href = model.params.content_hash().to_string();
                out.push(point(*knob, *v, *model, href, cfg)?);
            }
        }
    }
    Ok(out)
}

/// Number of adjacent steps that move against the expected direction by more
/// than zero, and the largest such move.
pub fn inversions(values: &[f64], increasing: bool) -> (usize, f64) {
    let mut count = 0;
    let mut worst: f64 = 0.0;
    for w in values.windows(2) {
        let delta = if increasing { w[0] - w[1] } else { w[1] - w[0] };
        if delta > 0.0 {
            count += 1;
            worst = worst.max(delta);
        }
    }
    (count, worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_styles, sample_corpus};
    use crate::diversity::EmbedConfig;
    use crate::math::ln;
    use crate::seqmodel::{init_model, ModelConfig, Rollout};
    use alloc::vec;

    struct Fixed {
        dist: Vec<f64>,
        len: usize,
    }

    impl Policy for Fixed {
        fn seq_len(&self) -> usize {
            self.len
        }
        fn v_gen(&self) -> usize {
            self.dist.len()
        }
        fn rollout(&self, _: &[Token], _: f64, rng: &mut dyn RngCore) -> Result<Rollout> {
            let mut tokens = Vec::new();
            for _ in 0..self.len {
                let u = crate::rng::uniform(rng);
                tokens.push(crate::math::sample_index(&self.dist, u) as Token);
            }
            Ok(Rollout {
                tokens,
                entropies: vec![crate::math::entropy(&self.dist); self.len],
                log_prob: 0.0,
            })
        }
    }

    fn setup() -> (Corpus, EmbeddingModel, PolicyModel) {
        let styles = gen_styles(3, 4, 1, 3.0).unwrap();
        let corpus = sample_corpus(&styles, 10, 8, 2).unwrap();
        let e = EmbeddingModel::new(&EmbedConfig {
            vocab: corpus.v_gen,
            max_len: 8,
            ..EmbedConfig::default()
        })
        .unwrap();
        let m = init_model(&ModelConfig {
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            v_prompt: corpus.v_prompt,
            v_gen: corpus.v_gen,
            seq_len: 8,
            prompt_len: 1,
            init_seed: 3,
            tie_output: false,
        })
        .unwrap();
        (corpus, e, m)
    }

    #[test]
    fn quality_arithmetic() {
        assert!((combine_quality(0.2, 0.3, 5.0) - 1.3).abs() < 1e-15);
        assert_eq!(combine_quality(0.0, 0.0, 5.0), 0.0);
        assert!(combine_quality(0.4, 0.3, 5.0) > combine_quality(0.2, 0.3, 5.0));
        assert!(combine_quality(0.2, 0.5, 5.0) > combine_quality(0.2, 0.3, 5.0));
    }

    #[test]
    fn entropy_of_uniform_and_one_hot() {
        let mut rng = stream(1, 1);
        let u = Fixed {
            dist: vec![0.25; 4],
            len: 5,
        };
        let h = entropy_per_token(&u, &[vec![0]], 1.0, &mut rng).unwrap();
        assert!((h - ln(4.0)).abs() < 1e-12);
        let one = Fixed {
            dist: vec![0.0, 1.0, 0.0, 0.0],
            len: 5,
        };
        assert_eq!(entropy_per_token(&one, &[vec![0]], 1.0, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn deterministic_policy_has_zero_diversity() {
        let (corpus, e, _) = setup();
        let one = Fixed {
            dist: {
                let mut d = vec![0.0; corpus.v_gen];
                d[2] = 1.0;
                d
            },
            len: 8,
        };
        let mut rng = stream(1, 1);
        let (d, _) = diversity_score(&one, &e, &corpus.prompts(), 3, 1.0, &mut rng).unwrap();
        assert!(d.abs() < 1e-12);
        let m = evaluate(&one, &corpus, &e, &EvalConfig { n_prompts: 6, ..EvalConfig::default() }).unwrap();
        assert!(m.diversity.abs() < 1e-12);
        assert_eq!(m.entropy, 0.0);
    }

    #[test]
    fn metrics_in_range_and_reproducible() {
        let (corpus, e, model) = setup();
        let cfg = EvalConfig {
            n_prompts: 12,
            ..EvalConfig::default()
        };
        let a = evaluate(&model, &corpus, &e, &cfg).unwrap();
        assert_eq!(a, evaluate(&model, &corpus, &e, &cfg).unwrap());
        assert!((0.0..=2.0).contains(&a.diversity));
        assert!((0.0..=ln(corpus.v_gen as f64) + 1e-12).contains(&a.entropy));
        assert!((0.0..=cfg.omega + 1.0).contains(&a.quality));
        assert!(a.diversity > 0.0);
        let ub = cross_prompt_upper_bound(&model, &e, &corpus.prompts(), 50, 1.0, 3).unwrap();
        assert_eq!(ub, cross_prompt_upper_bound(&model, &e, &corpus.prompts(), 50, 1.0, 3).unwrap());
        assert!(cross_prompt_upper_bound(&model, &e, &corpus.prompts()[..1], 5, 1.0, 3).is_err());
    }

    #[test]
    fn sweep_counts_and_endpoints() {
        let (corpus, e, model) = setup();
        let cfg = EvalConfig {
            n_prompts: 3,
            m: 2,
            ..EvalConfig::default()
        };
        let pts = sweep_front(
            &Sweep::Lambda {
                theta_q: &model,
                theta_d: &model,
                step: 0.05,
            },
            &corpus,
            &e,
            &cfg,
            "lerp",
        )
        .unwrap();
        assert_eq!(pts.len(), 21);
        assert_eq!(pts[0].quality, pts[20].quality);
        let gammas = [1.0, 2.0, 3.0];
        let pts = sweep_front(
            &Sweep::Gamma {
                base: &model,
                gammas: &gammas,
                negative_prompt: vec![corpus.negative_token()],
            },
            &corpus,
            &e,
            &cfg,
            "cfg",
        )
        .unwrap();
        assert_eq!(pts.len(), 3);
        let plain = evaluate(&model, &corpus, &e, &cfg).unwrap();
        assert_eq!(pts[0].quality, plain.quality);
    }

    #[test]
    fn inversion_counting() {
        assert_eq!(inversions(&[1.0, 2.0, 3.0], true), (0, 0.0));
        let (n, w) = inversions(&[1.0, 0.995, 3.0, 2.0], true);
        assert_eq!(n, 2);
        assert!((w - 1.0).abs() < 1e-12);
        assert_eq!(inversions(&[3.0, 2.0, 2.5], false).0, 1);
    }
}
