//! Embedding-based diversity reward and its multi-sample policy gradient.
//!
//! The reward between two generations is `1 - cos(E(y1), E(y2))`; for `N`
//! generations it is the mean over all distinct pairs. The gradient of the
//! diversity objective `D = E_x E_{y_1..y_N} [r_D(y_1..y_N)]` is estimated by
//! `(1/B) sum_i sum_j (r_i - b_i) grad log p(y_ij | x_i)`.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::corpus::ContrastivePair;
use crate::error::{arg, Error, Result};
use crate::hash::{Digest, Hasher};
use crate::math::{dot, norm, sqrt, tanh};
use crate::rng::{normal, stream, uniform};
use crate::seqmodel::{
    adam_step, AdamState, GradBuffer, Layout, LayoutBuilder, LossGraph, ParamVector, Policy,
    PolicyModel, Rollout,
};
use crate::Token;

/// Floor on embedding norms used in cosine denominators.
pub const EPS_NORM: f64 = 1e-8;

const STREAM_EMBED_INIT: u64 = 0x454d_4244;
const STREAM_TRIPLET: u64 = 0x5452_4950;
const STREAM_HELDOUT: u64 = 0x484f_4c44;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbedConfig {
    /// Generation vocabulary size.
    pub vocab: usize,
    pub token_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Longest accepted input.
    pub max_len: usize,
    pub init_seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            vocab: 18,
            token_dim: 16,
            hidden: 32,
            embed_dim: 32,
            max_len: 32,
            init_seed: 0,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.token_dim == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return Err(arg("embedding dimensions must be positive"));
        }
        if self.max_len == 0 {
            return Err(arg("max_len must be positive"));
        }
        Ok(())
    }

    pub fn lineage_hash(&self) -> Digest {
        let mut h = Hasher::new();
        h.str("qdcfg-embed-v1");
        for x in [self.vocab, self.token_dim, self.hidden, self.embed_dim, self.max_len] {
            h.u64(x as u64);
        }
        h.u64(self.init_seed);
        h.finish()
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    tok: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

fn layout(c: &EmbedConfig) -> (Layout, Offsets) {
    let mut b = LayoutBuilder::new();
    let off = Offsets {
        tok: b.add("tok", &[c.vocab, c.token_dim]),
        w1: b.add("mlp.w1", &[c.hidden, c.token_dim]),
        b1: b.add("mlp.b1", &[c.hidden]),
        w2: b.add("mlp.w2", &[c.embed_dim, c.hidden]),
        b2: b.add("mlp.b2", &[c.embed_dim]),
    };
    (b.finish(), off)
}

/// Sequence encoder `E`: token table, mean pooling, then a tanh MLP.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    config: EmbedConfig,
    pub params: ParamVector,
    off: Offsets,
}

struct Cache {
    kept: Vec<Token>,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

impl EmbeddingModel {
    pub fn new(config: &EmbedConfig) -> Result<Self> {
        config.validate()?;
        let (layout, off) = layout(config);
        let mut params = ParamVector::zeros(layout, config.lineage_hash());
        let mut rng = stream(config.init_seed, STREAM_EMBED_INIT);
        let c = config;
        let s1 = 1.0 / sqrt(c.token_dim as f64);
        let s2 = 1.0 / sqrt(c.hidden as f64);
        let v = &mut params.values;
        for x in &mut v[off.tok..off.tok + c.vocab * c.token_dim] {
            *x = normal(&mut rng);
        }
        for x in &mut v[off.w1..off.w1 + c.hidden * c.token_dim] {
            *x = s1 * normal(&mut rng);
        }
        for x in &mut v[off.w2..off.w2 + c.embed_dim * c.hidden] {
            *x = s2 * normal(&mut rng);
        }
        Ok(EmbeddingModel {
            config: config.clone(),
            params,
            off,
        })
    }

    pub fn from_params(config: &EmbedConfig, params: ParamVector) -> Result<Self> {
        let mut m = Self::new(config)?;
        if params.lineage() != m.params.lineage() || !params.same_shape(&m.params) {
            return Err(Error::Structural(
                "embedding parameters do not match the configuration".into(),
            ));
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &EmbedConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn check(&self, y: &[Token]) -> Result<()> {
        if y.is_empty() {
            return Err(arg("cannot embed an empty sequence"));
        }
        if y.len() > self.config.max_len {
            return Err(arg("sequence longer than the embedding max_len"));
        }
        if let Some(&t) = y.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::Domain {
                token: t,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    /// `E(y)`, a vector of dimension `embed_dim`.
    pub fn embed(&self, y: &[Token]) -> Result<Vec<f64>> {
        self.check(y)?;
        Ok(self.forward(y, None).out)
    }

    fn forward(&self, y: &[Token], keep: Option<&[bool]>) -> Cache {
        let c = &self.config;
        let (td, h, e) = (c.token_dim, c.hidden, c.embed_dim);
        let p = &self.params.values;
        let kept: Vec<Token> = match keep {
            Some(mask) if mask.iter().any(|&k| k) => y
                .iter()
                .zip(mask)
                .filter(|(_, &k)| k)
                .map(|(&t, _)| t)
                .collect(),
            _ => y.to_vec(),
        };
        let mut pooled = vec![0.0; td];
        for &t in &kept {
            let row = &p[self.off.tok + t as usize * td..][..td];
            for (f, &r) in pooled.iter_mut().zip(row) {
                *f += r;
            }
        }
        let inv = 1.0 / kept.len() as f64;
        for f in &mut pooled {
            *f *= inv;
        }
        let mut hidden = vec![0.0; h];
        for (i, hv) in hidden.iter_mut().enumerate() {
            let w = &p[self.off.w1 + i * td..][..td];
            *hv = tanh(dot(w, &pooled) + p[self.off.b1 + i]);
        }
        let mut out = vec![0.0; e];
        for (i, o) in out.iter_mut().enumerate() {
            let w = &p[self.off.w2 + i * h..][..h];
            *o = dot(w, &hidden) + p[self.off.b2 + i];
        }
        Cache {
            kept,
            pooled,
            hidden,
            out,
        }
    }

    fn backward(&self, cache: &Cache, dout: &[f64], grad: &mut [f64]) {
        let c = &self.config;
        let (td, h, e) = (c.token_dim, c.hidden, c.embed_dim);
        let p = &self.params.values;
        let mut dh = vec![0.0; h];
        for i in 0..e {
            let g = dout[i];
            if g == 0.0 {
                continue;
            }
            grad[self.off.b2 + i] += g;
            for j in 0..h {
                grad[self.off.w2 + i * h + j] += g * cache.hidden[j];
                dh[j] += g * p[self.off.w2 + i * h + j];
            }
        }
        let mut df = vec![0.0; td];
        for i in 0..h {
            let du = dh[i] * (1.0 - cache.hidden[i] * cache.hidden[i]);
            grad[self.off.b1 + i] += du;
            for k in 0..td {
                grad[self.off.w1 + i * td + k] += du * cache.pooled[k];
                df[k] += du * p[self.off.w1 + i * td + k];
            }
        }
        let inv = 1.0 / cache.kept.len() as f64;
        for &t in &cache.kept {
            let row = &mut grad[self.off.tok + t as usize * td..][..td];
            for (g, &d) in row.iter_mut().zip(&df) {
                *g += d * inv;
            }
        }
    }
}

/// Cosine similarity, failing when either norm is below [`EPS_NORM`].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    let n = na.min(nb);
    if !(n >= EPS_NORM) {
        return Err(Error::DegenerateEmbedding { norm: n });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity with its gradients with respect to both inputs.
fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = (norm(a), norm(b));
    let n = na.min(nb);
    if !(n >= EPS_NORM) {
        return Err(Error::DegenerateEmbedding { norm: n });
    }
    let c = dot(a, b) / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y / (na * nb) - c * x / (na * na))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x / (na * nb) - c * y / (nb * nb))
        .collect();
    Ok((c, da, db))
}

/// `1 - cos` between two embeddings, in `[0, 2]`; exactly 0 when they are equal.
pub fn reward_from_embeddings(a: &[f64], b: &[f64]) -> Result<f64> {
    let c = cosine(a, b)?;
    if a == b {
        return Ok(0.0);
    }
    Ok(1.0 - c)
}

/// `r_D(y1, y2) = 1 - cos(E(y1), E(y2))`.
pub fn reward_pair(e: &EmbeddingModel, y1: &[Token], y2: &[Token]) -> Result<f64> {
    reward_from_embeddings(&e.embed(y1)?, &e.embed(y2)?)
}

/// Mean pairwise reward over a set of embeddings. Pair values are summed in
/// sorted order, so the result is bitwise invariant under permutation.
pub fn reward_set_embedded(embs: &[Vec<f64>]) -> Result<f64> {
    if embs.len() < 2 {
        return Err(arg("reward_set needs at least two generations"));
    }
    let mut vals = Vec::with_capacity(embs.len() * (embs.len() - 1) / 2);
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            vals.push(reward_from_embeddings(&embs[i], &embs[j])?);
        }
    }
    vals.sort_by(f64::total_cmp);
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// `r_D(y_1, ..., y_N)`: mean of `r_D` over all distinct pairs.
pub fn reward_set(e: &EmbeddingModel, ys: &[Vec<Token>]) -> Result<f64> {
    let embs = ys.iter().map(|y| e.embed(y)).collect::<Result<Vec<_>>>()?;
    reward_set_embedded(&embs)
}

/// Variance-reduction baseline subtracted from each prompt's set reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum BaselineMode {
    /// Mean reward of the other prompts in the batch (zero when alone).
    LeaveOneOut,
    Constant(f64),
    None,
}

/// Baselines for a batch of set rewards.
pub fn baselines(rewards: &[f64], mode: BaselineMode) -> Vec<f64> {
    match mode {
        BaselineMode::None => vec![0.0; rewards.len()],
        BaselineMode::Constant(c) => vec![c; rewards.len()],
        BaselineMode::LeaveOneOut => {
            let b = rewards.len();
            if b < 2 {
                return vec![0.0; b];
            }
            let total: f64 = rewards.iter().sum();
            rewards
                .iter()
                .map(|&r| (total - r) / (b - 1) as f64)
                .collect()
        }
    }
}

/// One prompt's `N` generations with their set reward.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversitySample {
    pub prompt: Vec<Token>,
    pub generations: Vec<Vec<Token>>,
    pub reward: f64,
    /// `log p_theta(y_j | x)` at the sampling temperature.
    pub log_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiversityBatch {
    pub samples: Vec<DiversitySample>,
    pub baselines: Vec<f64>,
    /// Position of each sample among the scored sets.
    pub sources: Vec<usize>,
    /// Prompts dropped because an embedding fell below the norm floor.
    pub skipped: usize,
}

impl DiversityBatch {
    /// Scores sampled generation sets, skipping (and counting) degenerate ones.
    pub fn score(
        e: &EmbeddingModel,
        sets: Vec<(Vec<Token>, Vec<Rollout>)>,
        mode: BaselineMode,
    ) -> Result<Self> {
        let mut batch = DiversityBatch::default();
        for (k, (prompt, rollouts)) in sets.into_iter().enumerate() {
            if rollouts.len() < 2 {
                return Err(arg("diversity needs at least two generations per prompt"));
            }
            let generations: Vec<Vec<Token>> = rollouts.iter().map(|r| r.tokens.clone()).collect();
            match reward_set(e, &generations) {
                Ok(reward) => {
                    batch.sources.push(k);
                    batch.samples.push(DiversitySample {
                        prompt,
                        log_probs: rollouts.iter().map(|r| r.log_prob).collect(),
                        generations,
                        reward,
                    })
                }
                Err(Error::DegenerateEmbedding { .. }) => batch.skipped += 1,
                Err(err) => return Err(err),
            }
        }
        let rewards: Vec<f64> = batch.samples.iter().map(|s| s.reward).collect();
        batch.baselines = baselines(&rewards, mode);
        Ok(batch)
    }

    pub fn reward_mean(&self) -> Option<f64> {
        if self.samples.is_empty() {
            return None;
        }
        Some(self.samples.iter().map(|s| s.reward).sum::<f64>() / self.samples.len() as f64)
    }

    /// Per-prompt score-function weight `(r_i - b_i) / B`.
    pub fn coefficients(&self) -> Vec<f64> {
        let b = self.samples.len() as f64;
        self.samples
            .iter()
            .zip(&self.baselines)
            .map(|(s, &base)| (s.reward - base) / b)
            .collect()
    }

    /// Adds `scale * coef_i * log p(y_ij | x_i)` for every generation.
    pub fn add_to_graph(&self, graph: &mut LossGraph, temperature: f64, scale: f64) {
        for (s, c) in self.samples.iter().zip(self.coefficients()) {
            for y in &s.generations {
                graph.add_log_prob(&s.prompt, y, temperature, scale * c);
            }
        }
    }
}

/// Estimated gradient of `D` (ascent direction) from a scored batch.
pub fn estimate(student: &PolicyModel, batch: &DiversityBatch, temperature: f64) -> Result<GradBuffer> {
    let mut graph = LossGraph::new(student);
    batch.add_to_graph(&mut graph, temperature, 1.0);
    Ok(graph.value_and_grad(student)?.1)
}

/// Samples `n` generations per prompt and returns the diversity policy
/// gradient of the maximization objective with the batch statistics.
pub fn diversity_grad(
    student: &PolicyModel,
    e: &EmbeddingModel,
    prompts: &[Vec<Token>],
    n: usize,
    mode: BaselineMode,
    temperature: f64,
    rng: &mut dyn RngCore,
) -> Result<(GradBuffer, DiversityBatch)> {
    if n < 2 {
        return Err(arg("diversity needs N >= 2"));
    }
    let mut sets = Vec::with_capacity(prompts.len());
    for p in prompts {
        let rs = (0..n)
            .map(|_| student.rollout(p, temperature, rng))
            .collect::<Result<Vec<_>>>()?;
        sets.push((p.clone(), rs));
    }
    let batch = DiversityBatch::score(e, sets, mode)?;
    let grad = estimate(student, &batch, temperature)?;
    Ok((grad, batch))
}

/// Hinge of the triplet objective with cosine distances.
pub fn triplet_loss(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Per-token drop probability applied to training chunks.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 0.2,
            steps: 2000,
            lr: 3e-3,
            batch_size: 48,
            dropout: 0.05,
            seed: 0,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !(self.lr >= 0.0) {
            return Err(arg("margin and lr must be non-negative"));
        }
        if self.batch_size < 2 {
            return Err(arg("triplet batch_size must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(arg("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Equal-length anchor, positive and negative chunk lists.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TripletBatch {
    pub anchors: Vec<Vec<Token>>,
    pub positives: Vec<Vec<Token>>,
    pub negatives: Vec<Vec<Token>>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Builds `n` triplets from pairs: each pair supplies anchor and positive,
/// a pair of a different source supplies the negative.
pub fn make_triplets(pairs: &[ContrastivePair], n: usize, seed: u64) -> Result<TripletBatch> {
    let first = pairs.first().ok_or_else(|| arg("no pairs"))?;
    if pairs.iter().all(|p| p.source_id == first.source_id) {
        return Err(arg("triplets need at least two sources"));
    }
    let mut rng = stream(seed, STREAM_HELDOUT);
    let mut out = TripletBatch::default();
    while out.len() < n {
        let a = &pairs[rng.random_range(0..pairs.len())];
        let b = &pairs[rng.random_range(0..pairs.len())];
        if a.source_id == b.source_id {
            continue;
        }
        let neg = if rng.random::<bool>() { &b.anchor } else { &b.positive };
        out.anchors.push(a.anchor.clone());
        out.positives.push(a.positive.clone());
        out.negatives.push(neg.clone());
    }
    Ok(out)
}

/// Fraction of triplets whose positive is closer (in cosine) than the negative.
pub fn triplet_accuracy(e: &EmbeddingModel, t: &TripletBatch) -> Result<f64> {
    if t.is_empty() {
        return Err(arg("empty triplet set"));
    }
    let mut hits = 0usize;
    for k in 0..t.len() {
        let a = e.embed(&t.anchors[k])?;
        let sp = cosine(&a, &e.embed(&t.positives[k])?)?;
        let sn = cosine(&a, &e.embed(&t.negatives[k])?)?;
        if sp > sn {
            hits += 1;
        }
    }
    Ok(hits as f64 / t.len() as f64)
}

/// Semi-hard triplet training with in-batch negative mining.
///
/// Returns the trained model and the mean hinge loss per step.
pub fn train_embedding(
    init: &EmbeddingModel,
    pairs: &[ContrastivePair],
    cfg: &TripletConfig,
) -> Result<(EmbeddingModel, Vec<f64>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(arg("no contrastive pairs"));
    }
    let mut model = init.clone();
    let mut adam = AdamState::for_params(&model.params);
    let mut rng = stream(cfg.seed, STREAM_TRIPLET);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..pairs.len()))
            .collect();
        let mut chunks: Vec<Cache> = Vec::with_capacity(2 * idx.len());
        for &i in &idx {
            for y in [&pairs[i].anchor, &pairs[i].positive] {
                model.check(y)?;
                let mask: Vec<bool> = y.iter().map(|_| uniform(&mut rng) >= cfg.dropout).collect();
                chunks.push(model.forward(y, Some(&mask)));
            }
        }
        let valid: Vec<bool> = chunks.iter().map(|c| norm(&c.out) >= EPS_NORM).collect();
        if valid.iter().all(|v| !v) {
            return Err(Error::Training("every embedding in the batch is degenerate".into()));
        }
        let b = idx.len();
        let unit = |c: &Cache| {
            let n = norm(&c.out);
            c.out.iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let units: Vec<Vec<f64>> = chunks
            .iter()
            .zip(&valid)
            .map(|(c, &ok)| if ok { unit(c) } else { c.out.clone() })
            .collect();
        let dist = |i: usize, j: usize| 1.0 - dot(&units[i], &units[j]);

        let mut douts: Vec<Vec<f64>> = chunks.iter().map(|c| vec![0.0; c.out.len()]).collect();
        let mut total = 0.0;
        let mut count = 0usize;
        for k in 0..b {
            let (ai, pi) = (2 * k, 2 * k + 1);
            if !valid[ai] || !valid[pi] {
                continue;
            }
            let d_ap = dist(ai, pi);
            let mut semi: Option<(f64, usize)> = None;
            let mut hard: Option<(f64, usize)> = None;
            for m in 0..b {
                if pairs[idx[m]].source_id == pairs[idx[k]].source_id {
                    continue;
                }
                for ni in [2 * m, 2 * m + 1] {
                    if !valid[ni] {
                        continue;
                    }
                    let d_an = dist(ai, ni);
                    if d_an > d_ap && d_an < d_ap + cfg.margin && semi.is_none_or(|(d, _)| d_an < d) {
                        semi = Some((d_an, ni));
                    }
                    if hard.is_none_or(|(d, _)| d_an < d) {
                        hard = Some((d_an, ni));
                    }
                }
            }
            let Some((d_an, ni)) = semi.or(hard) else {
                continue;
            };
            count += 1;
            let l = triplet_loss(d_ap, d_an, cfg.margin);
            total += l;
            if l > 0.0 {
                let (_, ga, gp) = cosine_with_grad(&chunks[ai].out, &chunks[pi].out)?;
                let (_, ga2, gn) = cosine_with_grad(&chunks[ai].out, &chunks[ni].out)?;
                for j in 0..ga.len() {
                    douts[ai][j] += -ga[j] + ga2[j];
                    douts[pi][j] += -gp[j];
                    douts[ni][j] += gn[j];
                }
            }
        }
        if count == 0 {
            losses.push(0.0);
            continue;
        }
        let scale = 1.0 / count as f64;
        let mut grad = GradBuffer::zeros(model.params.len());
        for (c, d) in chunks.iter().zip(&douts) {
            if d.iter().any(|&x| x != 0.0) {
                let scaled: Vec<f64> = d.iter().map(|x| x * scale).collect();
                model.backward(c, &scaled, &mut grad.values);
            }
        }
        if !grad.is_finite() {
            return Err(Error::Training("non-finite embedding gradient".into()));
        }
        adam_step(&mut model.params, &grad, &mut adam, cfg.lr)?;
        losses.push(total * scale);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_styles, make_pairs, sample_corpus};
    use crate::seqmodel::{init_model, ModelConfig};

    fn small_embed(vocab: usize) -> EmbeddingModel {
        EmbeddingModel::new(&EmbedConfig {
            vocab,
            token_dim: 6,
            hidden: 8,
            embed_dim: 5,
            max_len: 16,
            init_seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn embed_shape_purity_and_errors() {
        let e = small_embed(6);
        let a = e.embed(&[1, 2, 3]).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, e.embed(&[1, 2, 3]).unwrap());
        assert!(e.embed(&[]).is_err());
        assert!(e.embed(&[6]).is_err());
        assert!(e.embed(&[0; 17]).is_err());
    }

    #[test]
    fn reward_identities() {
        let e = small_embed(6);
        let y1 = [0, 1, 2, 3];
        let y2 = [5, 5, 4, 1];
        assert!(reward_pair(&e, &y1, &y1).unwrap().abs() <= 1e-12);
        assert_eq!(reward_pair(&e, &y1, &y2).unwrap(), reward_pair(&e, &y2, &y1).unwrap());
        assert_eq!(reward_from_embeddings(&[1.0, 0.0], &[-2.0, 0.0]).unwrap(), 2.0);
        assert_eq!(reward_from_embeddings(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 1.0);
        assert!(matches!(
            reward_from_embeddings(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn reward_set_properties() {
        let e = small_embed(6);
        let ys: Vec<Vec<Token>> = vec![vec![0, 1, 2], vec![3, 3, 4], vec![5, 0, 5], vec![2, 2, 2]];
        assert_eq!(
            reward_set(&e, &ys[..2]).unwrap(),
            reward_pair(&e, &ys[0], &ys[1]).unwrap()
        );
        assert_eq!(reward_set(&e, &vec![ys[0].clone(); 3]).unwrap(), 0.0);
        let base = reward_set(&e, &ys).unwrap();
        let mut perm = [0usize, 1, 2, 3];
        // Heap's algorithm over all 24 orderings.
        let mut c = [0usize; 4];
        let mut i = 0;
        while i < 4 {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                let shuffled: Vec<Vec<Token>> = perm.iter().map(|&k| ys[k].clone()).collect();
                assert_eq!(reward_set(&e, &shuffled).unwrap(), base);
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        assert!((0.0..=2.0).contains(&base));
        assert!(reward_set(&e, &ys[..1]).is_err());
    }

    #[test]
    fn leave_one_out_baselines() {
        let b = baselines(&[1.0, 2.0, 3.0], BaselineMode::LeaveOneOut);
        assert_eq!(b, vec![2.5, 2.0, 1.5]);
        assert_eq!(baselines(&[0.7], BaselineMode::LeaveOneOut), vec![0.0]);
        for b in baselines(&[0.1; 3], BaselineMode::LeaveOneOut) {
            assert!((b - 0.1).abs() < 1e-16);
        }
        assert_eq!(baselines(&[1.0, 2.0], BaselineMode::Constant(0.5)), vec![0.5, 0.5]);
    }

    #[test]
    fn triplet_hinge() {
        assert_eq!(triplet_loss(0.1, 0.5, 0.2), 0.0);
        assert!((triplet_loss(0.4, 0.5, 0.2) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let e = small_embed(6);
        let y = [0, 3, 3, 5, 1];
        let w: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.5).collect();
        let f = |m: &EmbeddingModel| dot(&m.embed(&y).unwrap(), &w);
        let cache = e.forward(&y, None);
        let mut grad = vec![0.0; e.params.len()];
        e.backward(&cache, &w, &mut grad);
        for i in 0..e.params.len() {
            let h = 1e-5;
            let mut p = e.clone();
            p.params.values[i] += h;
            let mut m = e.clone();
            m.params.values[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-7 + 1e-5 * fd.abs(), "i={i}");
        }
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let a = [0.3, -1.2, 0.8];
        let b = [1.1, 0.4, -0.2];
        let (_, da, db) = cosine_with_grad(&a, &b).unwrap();
        for k in 0..3 {
            let h = 1e-6;
            let mut ap = a;
            ap[k] += h;
            let mut am = a;
            am[k] -= h;
            let fd = (cosine(&ap, &b).unwrap() - cosine(&am, &b).unwrap()) / (2.0 * h);
            assert!((fd - da[k]).abs() < 1e-8);
            let mut bp = b;
            bp[k] += h;
            let mut bm = b;
            bm[k] -= h;
            let fd = (cosine(&a, &bp).unwrap() - cosine(&a, &bm).unwrap()) / (2.0 * h);
            assert!((fd - db[k]).abs() < 1e-8);
        }
    }

    fn pair_corpus() -> Vec<ContrastivePair> {
        let styles = gen_styles(3, 6, 2, 2.0).unwrap();
        let corpus = sample_corpus(&styles, 30, 16, 4).unwrap();
        make_pairs(&corpus, 8, 400, 5).unwrap()
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let e = small_embed(8);
        let cfg = TripletConfig {
            margin: 0.0,
            steps: 0,
            ..TripletConfig::default()
        };
        let (out, losses) = train_embedding(&e, &pair_corpus(), &cfg).unwrap();
        assert!(losses.is_empty());
        assert_eq!(out.params.content_hash(), e.params.content_hash());
    }

    #[test]
    fn training_improves_triplet_accuracy() {
        let pairs = pair_corpus();
        let (train, held) = pairs.split_at(300);
        let e = small_embed(8);
        let triplets = make_triplets(held, 300, 1).unwrap();
        let before = triplet_accuracy(&e, &triplets).unwrap();
        let cfg = TripletConfig {
            steps: 150,
            batch_size: 24,
            ..TripletConfig::default()
        };
        let (trained, losses) = train_embedding(&e, train, &cfg).unwrap();
        let after = triplet_accuracy(&trained, &triplets).unwrap();
        assert!(after > before, "{before} -> {after}");
        assert!(losses.last().unwrap() < &losses[0]);
    }

    fn tiny_policy() -> PolicyModel {
        init_model(&ModelConfig {
            d_model: 4,
            n_blocks: 1,
            n_heads: 1,
            v_prompt: 2,
            v_gen: 3,
            seq_len: 3,
            prompt_len: 1,
            init_seed: 9,
            tie_output: false,
        })
        .unwrap()
    }

    #[test]
    fn equal_rewards_give_zero_gradient() {
        let m = tiny_policy();
        let batch = DiversityBatch {
            samples: (0..3)
                .map(|i| DiversitySample {
                    prompt: vec![i % 2],
                    generations: vec![vec![0, 1, 2], vec![i, 2, 1]],
                    reward: 0.37,
                    log_probs: vec![0.0; 2],
                })
                .collect(),
            baselines: baselines(&[0.37; 3], BaselineMode::LeaveOneOut),
            sources: vec![0, 1, 2],
            skipped: 0,
        };
        let g = estimate(&m, &batch, 0.99).unwrap();
        assert!(g.values.iter().all(|x| x.abs() <= 1e-12));
    }

    #[test]
    fn diversity_grad_reports_batch() {
        let m = tiny_policy();
        let e = small_embed(3);
        let mut rng = stream(4, 4);
        let prompts = vec![vec![0], vec![1], vec![0]];
        let (g, batch) =
            diversity_grad(&m, &e, &prompts, 3, BaselineMode::LeaveOneOut, 0.99, &mut rng).unwrap();
        assert_eq!(g.len(), m.params.len());
        assert_eq!(batch.samples.len() + batch.skipped, 3);
        for s in &batch.samples {
            assert_eq!(s.generations.len(), 3);
            for (y, &lp) in s.generations.iter().zip(&s.log_probs) {
                assert!((m.log_prob(&s.prompt, y, 0.99).unwrap() - lp).abs() < 1e-10);
            }
        }
        assert!(diversity_grad(&m, &e, &prompts, 1, BaselineMode::None, 0.99, &mut rng).is_err());
    }
}
