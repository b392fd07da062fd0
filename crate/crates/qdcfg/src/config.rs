//! Experiment configuration files (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};

use qdcfg_core::cfg::NegativeKind;
use qdcfg_core::corpus::DEFAULT_NOISE_TOKENS;
use qdcfg_core::distill::DistillConfig;
use qdcfg_core::diversity::{BaselineMode, EmbedConfig, TripletConfig};
use qdcfg_core::eval::EvalConfig;
use qdcfg_core::hash::{Digest, Hasher};
use qdcfg_core::pretrain::PretrainConfig;
use qdcfg_core::seqmodel::{ModelConfig, DEFAULT_TEMPERATURE};

use crate::error::{io_err, CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that overrides the global seed.
pub const SEED_ENV: &str = "QD_SEED";

/// The configuration shipped with the binary.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Parent of the per-run directories.
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub cfg: CfgSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub merge: MergeSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out_dir() -> String {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub n_styles: usize,
    /// Regular generation tokens; noise tokens come on top.
    pub v_gen: usize,
    pub n_noise: usize,
    pub seq_len: usize,
    pub concentration: f64,
    pub n_per_style: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_styles: 8,
            v_gen: 16,
            n_noise: DEFAULT_NOISE_TOKENS,
            seq_len: 32,
            concentration: 3.0,
            n_per_style: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub tie_output: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 16,
            n_blocks: 2,
            n_heads: 2,
            tie_output: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub heldout_every: usize,
    pub heldout_size: usize,
    pub eval_every: usize,
    pub window: usize,
    pub min_improvement: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        PretrainSection {
            max_steps: d.max_steps,
            batch_size: d.batch_size,
            lr: d.lr,
            heldout_every: d.heldout_every,
            heldout_size: d.heldout_size,
            eval_every: d.eval_every,
            window: d.window,
            min_improvement: d.min_improvement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub token_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub chunk_len: usize,
    pub n_pairs: usize,
    /// Held-out triplets for the accuracy check.
    pub heldout_triplets: usize,
    pub margin: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        let e = EmbedConfig::default();
        let t = TripletConfig::default();
        EmbeddingSection {
            token_dim: e.token_dim,
            hidden: e.hidden,
            embed_dim: e.embed_dim,
            chunk_len: 8,
            n_pairs: 4000,
            heldout_triplets: 1000,
            margin: t.margin,
            steps: t.steps,
            lr: t.lr,
            batch_size: t.batch_size,
            dropout: t.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfgSection {
    pub gamma: f64,
    pub negative: NegativeKind,
}

impl Default for CfgSection {
    fn default() -> Self {
        CfgSection {
            gamma: qdcfg_core::cfg::DEFAULT_GAMMA,
            negative: NegativeKind::Negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub t_sample: f64,
    /// Defaults to `t_sample`.
    pub t_kl: Option<f64>,
    pub batch_size: usize,
    pub samples_per_prompt: usize,
    pub steps: usize,
    pub lr: f64,
    /// One run per value.
    pub betas: Vec<f64>,
    pub beta_ramp_steps: usize,
    pub eval_interval: usize,
    pub probe_size: usize,
    pub baseline: BaselineMode,
    /// Prompts scored by the in-training evaluation (0 disables it).
    pub hook_prompts: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            t_sample: DEFAULT_TEMPERATURE,
            t_kl: None,
            batch_size: d.batch_size,
            samples_per_prompt: d.samples_per_prompt,
            steps: d.steps,
            lr: d.lr,
            betas: vec![0.0, 5.0, 10.0, 15.0],
            beta_ramp_steps: d.beta_ramp_steps,
            eval_interval: d.eval_interval,
            probe_size: d.probe_size,
            baseline: d.baseline,
            hook_prompts: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSection {
    /// Beta of the quality endpoint `theta_q`.
    pub quality_beta: f64,
    /// Beta of the diversity endpoint `theta_d`.
    pub diversity_beta: f64,
    /// Interpolation weight of the checkpoint written by `merge`.
    pub lambda: f64,
    pub lambda_step: f64,
}

impl Default for MergeSection {
    fn default() -> Self {
        MergeSection {
            quality_beta: 0.0,
            diversity_beta: 15.0,
            lambda: 0.5,
            lambda_step: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_prompts: usize,
    pub m: usize,
    pub t_eval: f64,
    pub omega: f64,
    pub gammas: Vec<f64>,
    pub temperatures: Vec<f64>,
    /// Prompt pairs behind the cross-prompt diversity bound.
    pub cross_pairs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        EvalSection {
            n_prompts: e.n_prompts,
            m: e.m,
            t_eval: e.t_eval,
            omega: e.omega,
            gammas: (1..=7).map(f64::from).collect(),
            temperatures: vec![0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2],
            cross_pairs: 200,
        }
    }
}

/// Seed for one pipeline stage, derived from the global seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Hasher::new();
    h.u64(seed);
    h.str(label);
    let d = h.finish();
    u64::from_le_bytes(d.0[..8].try_into().unwrap())
}

/// 1-based line and column of a byte offset.
fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}

/// Line of `key = ...` inside `[section]` (or top level when empty), if present.
fn locate(src: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    let mut section_line = 1;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                section_line = i + 1;
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return i + 1;
                }
            }
        }
    }
    section_line
}

impl ExperimentConfig {
    /// Parses and validates; `origin` names the source in diagnostics.
    pub fn parse(src: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(src).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_col(src, s.start));
            CliError::Config {
                path: origin.into(),
                line,
                column,
                message: e.message().trim().to_string(),
            }
        })?;
        cfg.validate().map_err(|(section, key, message)| CliError::Config {
            path: origin.into(),
            line: locate(src, section, key),
            column: 1,
            message: format!("{}{key}: {message}", if section.is_empty() { String::new() } else { format!("{section}.") }),
        })?;
        Ok(cfg)
    }

    /// Reads `path` (or the bundled default when `None`) and applies the
    /// seed override from the environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let (src, origin) = match path {
            Some(p) => (
                std::fs::read_to_string(p).map_err(io_err(p))?,
                p.display().to_string(),
            ),
            None => (DEFAULT_CONFIG.to_string(), "<default config>".to_string()),
        };
        let mut cfg = Self::parse(&src, &origin)?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().map_err(|_| CliError::Config {
                path: SEED_ENV.into(),
                line: 1,
                column: 1,
                message: format!("{SEED_ENV} must be an unsigned integer, got {v:?}"),
            })?;
        }
        Ok(cfg)
    }

    fn validate(&self) -> std::result::Result<(), (&'static str, &'static str, String)> {
        let fail = |s, k, m: &str| Err((s, k, m.to_string()));
        if self.schema_version != SCHEMA_VERSION {
            return fail("", "schema_version", &format!("expected {SCHEMA_VERSION}"));
        }
        let c = &self.corpus;
        if c.n_styles < 2 {
            return fail("corpus", "n_styles", "must be at least 2");
        }
        if c.v_gen < 2 {
            return fail("corpus", "v_gen", "must be at least 2");
        }
        if c.seq_len < 4 {
            return fail("corpus", "seq_len", "must be at least 4");
        }
        if !(c.concentration > 0.0 && c.concentration.is_finite()) {
            return fail("corpus", "concentration", "must be positive");
        }
        if c.n_per_style == 0 {
            return fail("corpus", "n_per_style", "must be positive");
        }
        let m = &self.model;
        if m.d_model == 0 || m.n_heads == 0 || m.d_model % m.n_heads != 0 {
            return fail("model", "n_heads", "must be positive and divide d_model");
        }
        if m.n_blocks == 0 {
            return fail("model", "n_blocks", "must be positive");
        }
        let e = &self.embedding;
        if e.chunk_len == 0 || 2 * e.chunk_len > c.seq_len {
            return fail("embedding", "chunk_len", "must satisfy 0 < 2*chunk_len <= corpus.seq_len");
        }
        if e.n_pairs == 0 || e.heldout_triplets == 0 {
            return fail("embedding", "n_pairs", "pair counts must be positive");
        }
        if self.cfg.gamma < 0.0 || !self.cfg.gamma.is_finite() {
            return fail("cfg", "gamma", "must be finite and >= 0");
        }
        let d = &self.distill;
        if d.betas.is_empty() {
            return fail("distill", "betas", "needs at least one value");
        }
        if d.betas.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return fail("distill", "betas", "values must be finite and >= 0");
        }
        if d.samples_per_prompt < 2 {
            return fail("distill", "samples_per_prompt", "must be at least 2 for the diversity reward");
        }
        if d.hook_prompts == 1 {
            return fail("distill", "hook_prompts", "must be 0 or at least 2");
        }
        if let Err(err) = self.distill_config(0.0).validate() {
            return fail("distill", "steps", &err.to_string());
        }
        let mg = &self.merge;
        if !d.betas.contains(&mg.quality_beta) {
            return fail("merge", "quality_beta", "names no configured distillation run");
        }
        if !d.betas.contains(&mg.diversity_beta) {
            return fail("merge", "diversity_beta", "names no configured distillation run");
        }
        if !(0.0..=1.0).contains(&mg.lambda) {
            return fail("merge", "lambda", "must lie in [0, 1]");
        }
        if !(mg.lambda_step > 0.0 && mg.lambda_step <= 0.5) {
            return fail("merge", "lambda_step", "must lie in (0, 0.5]");
        }
        if let Err(err) = self.eval_config().validate() {
            return fail("eval", "m", &err.to_string());
        }
        if self.eval.gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return fail("eval", "gammas", "values must be finite and >= 0");
        }
        if self.eval.temperatures.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return fail("eval", "temperatures", "values must be positive");
        }
        if self.eval.cross_pairs == 0 {
            return fail("eval", "cross_pairs", "must be positive");
        }
        Ok(())
    }

    /// Canonical JSON of every field that influences results.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("out_dir");
        serde_json::to_string(&v).expect("value serializes")
    }

    pub fn hash(&self) -> Digest {
        Digest::of(self.canonical_json().as_bytes())
    }

    pub fn v_gen_total(&self) -> usize {
        self.corpus.v_gen + self.corpus.n_noise
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            n_blocks: self.model.n_blocks,
            n_heads: self.model.n_heads,
            v_prompt: self.corpus.n_styles + 2,
            v_gen: self.v_gen_total(),
            seq_len: self.corpus.seq_len,
            prompt_len: 1,
            init_seed: derive_seed(self.seed, "model.init"),
            tie_output: self.model.tie_output,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            max_steps: p.max_steps,
            batch_size: p.batch_size,
            lr: p.lr,
            seed: derive_seed(self.seed, "pretrain"),
            heldout_every: p.heldout_every,
            heldout_size: p.heldout_size,
            eval_every: p.eval_every,
            window: p.window,
            min_improvement: p.min_improvement,
        }
    }

    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig {
            vocab: self.v_gen_total(),
            token_dim: self.embedding.token_dim,
            hidden: self.embedding.hidden,
            embed_dim: self.embedding.embed_dim,
            max_len: self.corpus.seq_len,
            init_seed: derive_seed(self.seed, "embedding.init"),
        }
    }

    pub fn triplet_config(&self) -> TripletConfig {
        let e = &self.embedding;
        TripletConfig {
            margin: e.margin,
            steps: e.steps,
            lr: e.lr,
            batch_size: e.batch_size,
            dropout: e.dropout,
            seed: derive_seed(self.seed, "embedding.train"),
        }
    }

    /// Distillation settings of the run with the given `beta_max`.
    pub fn distill_config(&self, beta: f64) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            gamma: self.cfg.gamma,
            t_sample: d.t_sample,
            t_kl: d.t_kl.unwrap_or(d.t_sample),
            batch_size: d.batch_size,
            samples_per_prompt: d.samples_per_prompt,
            steps: d.steps,
            lr: d.lr,
            beta_max: beta,
            beta_ramp_steps: d.beta_ramp_steps,
            seed: derive_seed(self.seed, "distill"),
            eval_interval: d.eval_interval,
            probe_size: d.probe_size,
            baseline: d.baseline,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        let e = &self.eval;
        EvalConfig {
            n_prompts: e.n_prompts,
            m: e.m,
            t_eval: e.t_eval,
            omega: e.omega,
            seed: derive_seed(self.seed, "eval"),
        }
    }
}
