//! Experiment stages, their artifacts and manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use qdcfg_core::cfg::{CfgConfig, CfgPolicy, NegativeKind};
use qdcfg_core::corpus::{gen_styles_with_noise, make_pairs, sample_corpus, Corpus};
use qdcfg_core::distill::{train, DiversityEngine, EvalHook};
use qdcfg_core::diversity::{
    make_triplets, train_embedding, triplet_accuracy, EmbeddingModel,
};
use qdcfg_core::eval::{cross_prompt_upper_bound, evaluate, sweep_front, EvalConfig, FrontPoint, Knob, Sweep};
use qdcfg_core::hash::Digest;
use qdcfg_core::merge::{MergeMode, MergeSpec};
use qdcfg_core::pretrain::{pretrain, PretrainReport};
use qdcfg_core::seqmodel::{init_model, PolicyModel};

use crate::checkpoint::{self, Header, MergeInput, MergeProvenance};
use crate::config::{derive_seed, ExperimentConfig};
use crate::error::{io_err, CliError, Result};
use crate::formats::{
    self, load_corpus, load_front, read_json, save_corpus, save_front, trace_csv, write_json, FrontFile,
    TraceFile, FRONT_VERSION,
};
use crate::svg;

pub const CORPUS: &str = "corpus.json";
pub const BASE: &str = "base.qdck";
pub const PRETRAIN_REPORT: &str = "pretrain.json";
pub const EMBED: &str = "embed.qdck";
pub const EMBED_REPORT: &str = "embed.json";
pub const SWEEP_REPORT: &str = "fronts/sweep.json";
pub const REPORT_DIR: &str = "report";
pub const UNIFORM_MERGE: &str = "merge/uniform.qdck";

/// Sequences per style in the freshly sampled held-out corpus used for the
/// embedding accuracy check.
const HELDOUT_PER_STYLE: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenCorpus,
    Pretrain,
    TrainEmbed,
    Distill,
    Merge,
    Sweep,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenCorpus,
        Stage::Pretrain,
        Stage::TrainEmbed,
        Stage::Distill,
        Stage::Merge,
        Stage::Sweep,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::Pretrain => "pretrain",
            Stage::TrainEmbed => "train-embed",
            Stage::Distill => "distill",
            Stage::Merge => "merge",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }

    /// Inputs that must exist before the stage runs.
    pub fn inputs(self, cfg: &ExperimentConfig) -> Vec<String> {
        match self {
            Stage::GenCorpus => vec![],
            Stage::Pretrain | Stage::TrainEmbed => vec![CORPUS.into()],
            Stage::Distill => vec![CORPUS.into(), BASE.into(), EMBED.into()],
            Stage::Merge => cfg.distill.betas.iter().map(|&b| distill_checkpoint(b)).collect(),
            Stage::Sweep => vec![CORPUS.into(), BASE.into(), EMBED.into()],
            Stage::Report => vec![SWEEP_REPORT.into()],
        }
    }

    /// Inputs used when present, listed as missing otherwise.
    pub fn optional_inputs(self, cfg: &ExperimentConfig) -> Vec<String> {
        match self {
            Stage::Sweep => cfg.distill.betas.iter().map(|&b| distill_checkpoint(b)).collect(),
            Stage::Report => front_stems().iter().map(|s| format!("fronts/{s}.json")).collect(),
            _ => vec![],
        }
    }

    pub fn outputs(self, cfg: &ExperimentConfig) -> Vec<String> {
        match self {
            Stage::GenCorpus => vec![CORPUS.into()],
            Stage::Pretrain => vec![BASE.into(), PRETRAIN_REPORT.into()],
            Stage::TrainEmbed => vec![EMBED.into(), EMBED_REPORT.into()],
            Stage::Distill => cfg
                .distill
                .betas
                .iter()
                .flat_map(|&b| {
                    let t = beta_tag(b);
                    [
                        distill_checkpoint(b),
                        format!("distill/beta_{t}.trace.csv"),
                        format!("distill/beta_{t}.trace.json"),
                    ]
                })
                .collect(),
            Stage::Merge => {
                let mut out = vec![merge_checkpoint(cfg.merge.lambda)];
                if cfg.distill.betas.len() >= 2 {
                    out.push(UNIFORM_MERGE.into());
                }
                out.push("merge/merge.json".into());
                out
            }
            Stage::Sweep => {
                let mut out: Vec<String> = front_stems()
                    .iter()
                    .flat_map(|s| ["json", "csv", "svg"].map(|e| format!("fronts/{s}.{e}")))
                    .collect();
                out.push(SWEEP_REPORT.into());
                out
            }
            Stage::Report => ["front.json", "front.csv", "front.svg", "summary.json"]
                .iter()
                .map(|f| format!("{REPORT_DIR}/{f}"))
                .collect(),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// File-name tag of a `beta` value.
pub fn beta_tag(beta: f64) -> String {
    format!("{beta}")
}

pub fn distill_checkpoint(beta: f64) -> String {
    format!("distill/beta_{}.qdck", beta_tag(beta))
}

pub fn merge_checkpoint(lambda: f64) -> String {
    format!("merge/lambda_{lambda}.qdck")
}

pub fn front_stems() -> [&'static str; 6] {
    ["beta", "lambda", "uniform", "gamma_negative", "gamma_empty", "temperature"]
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub dry_run: bool,
    pub cache: bool,
    pub quiet: bool,
}

/// One experiment: a resolved configuration and its run directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
    pub opts: RunOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Planned,
    Cached,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    /// Relative path to content hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    #[serde(default)]
    pub timings_s: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainFile {
    pub config_hash: String,
    pub init_ref: String,
    pub base_ref: String,
    pub report: PretrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedFile {
    pub config_hash: String,
    pub embed_ref: String,
    pub heldout_accuracy: f64,
    pub heldout_triplets: usize,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeFile {
    pub config_hash: String,
    pub quality_ref: String,
    pub diversity_ref: String,
    pub lambda: f64,
    pub merged_ref: String,
    /// Uniform average of every distillation run, when there are at least two.
    pub uniform_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFile {
    pub config_hash: String,
    /// Mean diversity between generations for two different prompts.
    pub cross_prompt_bound: f64,
    pub fronts: Vec<String>,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub curve: String,
    pub points: usize,
    pub best_quality: f64,
    pub best_diversity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub config_hash: String,
    pub seed: u64,
    pub cross_prompt_bound: f64,
    pub curves: Vec<CurveSummary>,
    pub missing: Vec<String>,
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(Digest::of(&bytes).to_string())
}

impl Run {
    /// Resolves the run directory `<out>/<first 8 hex digits of the config hash>`.
    pub fn new(config: ExperimentConfig, out: Option<&Path>, opts: RunOptions) -> Self {
        let hash = config.hash().to_string();
        let base = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&config.out_dir));
        let dir = base.join(&hash[..8]);
        Run {
            config,
            hash,
            dir,
            opts,
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.opts.quiet {
            eprintln!("[{}] {}", &self.hash[..8], msg.as_ref());
        }
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.path(&format!("manifests/{}.json", stage.name()))
    }

    fn check_lineage(&self, what: &str, config_hash: &str) -> Result<()> {
        if config_hash != self.hash {
            return Err(CliError::Lineage(format!(
                "{what} was produced by config {}, this run is {}",
                &config_hash[..config_hash.len().min(8)],
                &self.hash[..8]
            )));
        }
        Ok(())
    }

    fn load_corpus(&self) -> Result<Corpus> {
        let f = load_corpus(&self.path(CORPUS))?;
        self.check_lineage(CORPUS, &f.config_hash)?;
        let mc = self.config.model_config();
        if f.corpus.v_gen != mc.v_gen || f.corpus.v_prompt != mc.v_prompt || f.corpus.seq_len != mc.seq_len {
            return Err(CliError::format(self.path(CORPUS), "corpus vocabulary does not match the model section"));
        }
        Ok(f.corpus)
    }

    fn load_policy(&self, rel: &str) -> Result<(PolicyModel, Header)> {
        let (m, h) = checkpoint::load_policy(&self.path(rel))?;
        self.check_lineage(rel, &h.config_hash)?;
        Ok((m, h))
    }

    fn load_embedding(&self) -> Result<EmbeddingModel> {
        let (e, h) = checkpoint::load_embedding(&self.path(EMBED))?;
        self.check_lineage(EMBED, &h.config_hash)?;
        Ok(e)
    }

    fn cached(&self, stage: Stage, inputs: &BTreeMap<String, String>) -> bool {
        let Ok(m) = read_json::<Manifest>(&self.manifest_path(stage)) else {
            return false;
        };
        if m.config_hash != self.hash || &m.inputs != inputs {
            return false;
        }
        m.outputs
            .iter()
            .all(|(rel, h)| file_hash(&self.path(rel)).is_ok_and(|x| &x == h))
            && stage.outputs(&self.config).iter().all(|o| m.outputs.contains_key(o))
    }

    /// Runs one stage, honouring `--dry-run` and `--cache`.
    pub fn stage(&self, stage: Stage) -> Result<Outcome> {
        let required = stage.inputs(&self.config);
        let optional = stage.optional_inputs(&self.config);
        if self.opts.dry_run {
            println!("{}:", stage.name());
            for i in &required {
                println!("  read   {}", self.path(i).display());
            }
            for i in &optional {
                println!("  read?  {}", self.path(i).display());
            }
            for o in stage.outputs(&self.config) {
                println!("  write  {}", self.path(&o).display());
            }
            println!("  write  {}", self.manifest_path(stage).display());
            return Ok(Outcome::Planned);
        }
        let mut inputs = BTreeMap::new();
        for rel in &required {
            let p = self.path(rel);
            if !p.exists() {
                return Err(CliError::MissingArtifact(p));
            }
            inputs.insert(rel.clone(), file_hash(&p)?);
        }
        for rel in &optional {
            if let Ok(h) = file_hash(&self.path(rel)) {
                inputs.insert(rel.clone(), h);
            }
        }
        if self.opts.cache && self.cached(stage, &inputs) {
            self.log(format!("{}: cached", stage.name()));
            return Ok(Outcome::Cached);
        }
        self.log(format!("{}: start", stage.name()));
        let t0 = Instant::now();
        let timings = match stage {
            Stage::GenCorpus => self.gen_corpus()?,
            Stage::Pretrain => self.pretrain()?,
            Stage::TrainEmbed => self.train_embed()?,
            Stage::Distill => self.distill()?,
            Stage::Merge => self.merge()?,
            Stage::Sweep => self.sweep()?,
            Stage::Report => self.report()?,
        };
        let wall = t0.elapsed().as_secs_f64();
        let mut outputs = BTreeMap::new();
        for rel in stage.outputs(&self.config) {
            if let Ok(h) = file_hash(&self.path(&rel)) {
                outputs.insert(rel, h);
            }
        }
        let manifest = Manifest {
            stage: stage.name().into(),
            config_hash: self.hash.clone(),
            config: serde_json::from_str(&self.config.canonical_json()).expect("canonical json"),
            inputs,
            outputs,
            wall_time_s: wall,
            timings_s: timings,
        };
        write_json(&self.manifest_path(stage), &manifest)?;
        self.log(format!("{}: done in {wall:.1}s", stage.name()));
        Ok(Outcome::Done)
    }

    /// Every stage in order.
    pub fn all(&self) -> Result<Vec<Outcome>> {
        Stage::ALL.iter().map(|&s| self.stage(s)).collect()
    }

    fn gen_corpus(&self) -> Result<BTreeMap<String, f64>> {
        let c = &self.config.corpus;
        let seed = self.config.seed;
        let styles = gen_styles_with_noise(
            c.n_styles,
            c.v_gen,
            c.n_noise,
            derive_seed(seed, "corpus.styles"),
            c.concentration,
        )?;
        let corpus = sample_corpus(&styles, c.n_per_style, c.seq_len, derive_seed(seed, "corpus.sample"))?;
        save_corpus(&self.path(CORPUS), &corpus, &self.hash)?;
        println!(
            "corpus: {} sequences, {} styles + negative, V_prompt={}, V_gen={} ({} noise), L={}",
            corpus.sequences.len(),
            corpus.n_styles(),
            corpus.v_prompt,
            corpus.v_gen,
            corpus.n_noise,
            corpus.seq_len
        );
        Ok(BTreeMap::new())
    }

    fn pretrain(&self) -> Result<BTreeMap<String, f64>> {
        let corpus = self.load_corpus()?;
        let init = init_model(&self.config.model_config())?;
        let (base, report) = pretrain(&init, &corpus, &self.config.pretrain_config())?;
        checkpoint::save_policy(&self.path(BASE), &base, &self.hash)?;
        println!(
            "pretrain: {} steps, held-out loss {:.4} (uniform {:.4}){}",
            report.steps,
            report.final_loss().unwrap_or(f64::NAN),
            report.uniform_loss,
            if report.stopped_early { ", converged" } else { "" }
        );
        write_json(
            &self.path(PRETRAIN_REPORT),
            &PretrainFile {
                config_hash: self.hash.clone(),
                init_ref: init.params.content_hash().to_string(),
                base_ref: base.params.content_hash().to_string(),
                report,
            },
        )?;
        Ok(BTreeMap::new())
    }

    fn train_embed(&self) -> Result<BTreeMap<String, f64>> {
        let corpus = self.load_corpus()?;
        let e = &self.config.embedding;
        let seed = self.config.seed;
        let pairs = make_pairs(&corpus, e.chunk_len, e.n_pairs, derive_seed(seed, "embedding.pairs"))?;
        let init = EmbeddingModel::new(&self.config.embed_config())?;
        let (model, losses) = train_embedding(&init, &pairs, &self.config.triplet_config())?;

        let mut styles = corpus.styles.clone();
        styles.push(corpus.negative_style.clone());
        let held = sample_corpus(&styles, HELDOUT_PER_STYLE, corpus.seq_len, derive_seed(seed, "embedding.heldout"))?;
        let held_pairs = make_pairs(&held, e.chunk_len, 2 * e.heldout_triplets, derive_seed(seed, "embedding.heldout.pairs"))?;
        let triplets = make_triplets(&held_pairs, e.heldout_triplets, derive_seed(seed, "embedding.heldout.triplets"))?;
        let accuracy = triplet_accuracy(&model, &triplets)?;
        checkpoint::save_embedding(&self.path(EMBED), &model, &self.hash)?;
        println!("train-embed: held-out triplet accuracy {accuracy:.3} over {} triplets", triplets.len());
        write_json(
            &self.path(EMBED_REPORT),
            &EmbedFile {
                config_hash: self.hash.clone(),
                embed_ref: model.params.content_hash().to_string(),
                heldout_accuracy: accuracy,
                heldout_triplets: triplets.len(),
                losses,
            },
        )?;
        Ok(BTreeMap::new())
    }

    fn teacher_config(&self, corpus: &Corpus, gamma: f64, kind: NegativeKind) -> Result<CfgConfig> {
        Ok(CfgConfig::for_corpus(corpus, gamma, kind)?)
    }

    fn distill(&self) -> Result<BTreeMap<String, f64>> {
        let corpus = self.load_corpus()?;
        let (base, _) = self.load_policy(BASE)?;
        let embedding = self.load_embedding()?;
        let teacher = CfgPolicy::new(&base, self.teacher_config(&corpus, self.config.cfg.gamma, self.config.cfg.negative)?)?;
        let prompts = corpus.prompts();
        let hook_cfg = EvalConfig {
            n_prompts: self.config.distill.hook_prompts.max(2),
            ..self.config.eval_config()
        };
        let mut timings = BTreeMap::new();
        for &beta in &self.config.distill.betas {
            let cfg = self.config.distill_config(beta);
            let t0 = Instant::now();
            let mut hook = |_: usize, m: &PolicyModel| -> qdcfg_core::Result<(f64, f64)> {
                let r = evaluate(m, &corpus, &embedding, &hook_cfg)?;
                Ok((r.quality, r.diversity))
            };
            let hook_ref: Option<&mut EvalHook<'_>> = if self.config.distill.hook_prompts > 0 {
                Some(&mut hook)
            } else {
                None
            };
            let engine = DiversityEngine {
                embedding: &embedding,
            };
            let (student, trace) = train(&base, &teacher, &prompts, &cfg, Some(engine), hook_ref)?;
            let tag = beta_tag(beta);
            checkpoint::save_policy(&self.path(&distill_checkpoint(beta)), &student, &self.hash)?;
            let csv_path = self.path(&format!("distill/beta_{tag}.trace.csv"));
            fs::write(&csv_path, trace_csv(&trace)).map_err(io_err(&csv_path))?;
            println!(
                "distill beta={tag}: KL {:.4} -> {:.4}, {} steps",
                trace.first_kl().unwrap_or(f64::NAN),
                trace.last_kl().unwrap_or(f64::NAN),
                cfg.steps
            );
            write_json(
                &self.path(&format!("distill/beta_{tag}.trace.json")),
                &TraceFile {
                    config_hash: self.hash.clone(),
                    beta,
                    trace,
                },
            )?;
            timings.insert(format!("beta_{tag}"), t0.elapsed().as_secs_f64());
        }
        Ok(timings)
    }

    fn merge(&self) -> Result<BTreeMap<String, f64>> {
        let m = &self.config.merge;
        let mut runs = Vec::new();
        for &b in &self.config.distill.betas {
            let rel = distill_checkpoint(b);
            runs.push((rel.clone(), self.load_policy(&rel)?.0));
        }
        let find = |beta: f64| &runs.iter().find(|(r, _)| *r == distill_checkpoint(beta)).expect("beta is configured").1;
        let (q, d) = (find(m.quality_beta), find(m.diversity_beta));
        let spec = MergeSpec::lerp(q.params.clone(), d.params.clone(), m.lambda);
        let sources = [distill_checkpoint(m.quality_beta), distill_checkpoint(m.diversity_beta)];
        let merged = apply_merge(&spec, &sources, q)?;
        checkpoint::save_merged(&self.path(&merge_checkpoint(m.lambda)), &merged.0, &self.hash, merged.1)?;
        let merged = merged.0;
        println!("merge: lambda={} -> {}", m.lambda, merged.params.content_hash().short());
        let uniform_ref = if runs.len() >= 2 {
            let spec = MergeSpec::uniform(runs.iter().map(|(_, r)| r.params.clone()).collect());
            let sources: Vec<String> = runs.iter().map(|(rel, _)| rel.clone()).collect();
            let (u, prov) = apply_merge(&spec, &sources, q)?;
            checkpoint::save_merged(&self.path(UNIFORM_MERGE), &u, &self.hash, prov)?;
            println!("merge: uniform over {} runs -> {}", runs.len(), u.params.content_hash().short());
            Some(u.params.content_hash().to_string())
        } else {
            None
        };
        write_json(
            &self.path("merge/merge.json"),
            &MergeFile {
                config_hash: self.hash.clone(),
                quality_ref: q.params.content_hash().to_string(),
                diversity_ref: d.params.content_hash().to_string(),
                lambda: m.lambda,
                merged_ref: merged.params.content_hash().to_string(),
                uniform_ref,
            },
        )?;
        Ok(BTreeMap::new())
    }

    fn write_front(&self, stem: &str, points: Vec<FrontPoint>, missing: Vec<String>) -> Result<()> {
        let file = FrontFile {
            version: FRONT_VERSION,
            config_hash: self.hash.clone(),
            curve: stem.into(),
            points,
            missing,
        };
        save_front(&self.path("fronts"), stem, &file, &format!("{stem} sweep"))?;
        Ok(())
    }

    fn sweep(&self) -> Result<BTreeMap<String, f64>> {
        let corpus = self.load_corpus()?;
        let (base, _) = self.load_policy(BASE)?;
        let e = self.load_embedding()?;
        let ecfg = self.config.eval_config();
        let mut missing = Vec::new();
        let mut timings = BTreeMap::new();

        let mut runs: Vec<(f64, PolicyModel)> = Vec::new();
        for &b in &self.config.distill.betas {
            let rel = distill_checkpoint(b);
            if self.path(&rel).exists() {
                runs.push((b, self.load_policy(&rel)?.0));
            } else {
                self.log(format!("sweep: missing {rel}"));
                missing.push(rel);
            }
        }
        let find = |beta: f64| runs.iter().find(|(b, _)| *b == beta).map(|(_, m)| m);

        let t0 = Instant::now();
        let sweep = Sweep::Checkpoints {
            knob: Knob::Beta,
            models: runs.iter().map(|(b, m)| (*b, m)).collect(),
        };
        let pts = sweep_front(&sweep, &corpus, &e, &ecfg, "beta")?;
        self.write_front("beta", pts, missing.clone())?;
        timings.insert("beta".into(), t0.elapsed().as_secs_f64());

        let mg = &self.config.merge;
        let t0 = Instant::now();
        let (q, d) = (find(mg.quality_beta), find(mg.diversity_beta));
        let lambda_pts = match (q, d) {
            (Some(q), Some(d)) => sweep_front(
                &Sweep::Lambda {
                    theta_q: q,
                    theta_d: d,
                    step: mg.lambda_step,
                },
                &corpus,
                &e,
                &ecfg,
                "lambda",
            )?,
            _ => Vec::new(),
        };
        let lambda_missing = [mg.quality_beta, mg.diversity_beta]
            .iter()
            .map(|&b| distill_checkpoint(b))
            .filter(|r| missing.contains(r))
            .collect();
        self.write_front("lambda", lambda_pts, lambda_missing)?;
        timings.insert("lambda".into(), t0.elapsed().as_secs_f64());

        let t0 = Instant::now();
        let k = self.config.distill.betas.len();
        let uniform_pts = if missing.is_empty() && k >= 2 {
            let params = MergeSpec::uniform(runs.iter().map(|(_, m)| m.params.clone()).collect()).apply()?;
            let model = PolicyModel::from_params(base.config(), params)?;
            let sweep = Sweep::Checkpoints {
                knob: Knob::Lambda,
                models: vec![(1.0 / k as f64, &model)],
            };
            sweep_front(&sweep, &corpus, &e, &ecfg, "uniform")?
        } else {
            Vec::new()
        };
        self.write_front("uniform", uniform_pts, missing.clone())?;
        timings.insert("uniform".into(), t0.elapsed().as_secs_f64());

        for (stem, kind) in [("gamma_negative", NegativeKind::Negative), ("gamma_empty", NegativeKind::Empty)] {
            let t0 = Instant::now();
            let neg = self.teacher_config(&corpus, 1.0, kind)?.negative_prompt;
            let pts = sweep_front(
                &Sweep::Gamma {
                    base: &base,
                    gammas: &self.config.eval.gammas,
                    negative_prompt: neg,
                },
                &corpus,
                &e,
                &ecfg,
                stem,
            )?;
            self.write_front(stem, pts, Vec::new())?;
            timings.insert(stem.into(), t0.elapsed().as_secs_f64());
        }

        let t0 = Instant::now();
        let temp_pts = match q {
            Some(model) => sweep_front(
                &Sweep::Temperature {
                    model,
                    temperatures: &self.config.eval.temperatures,
                },
                &corpus,
                &e,
                &ecfg,
                "temperature",
            )?,
            None => Vec::new(),
        };
        let temp_missing = if q.is_none() {
            vec![distill_checkpoint(mg.quality_beta)]
        } else {
            Vec::new()
        };
        self.write_front("temperature", temp_pts, temp_missing)?;
        timings.insert("temperature".into(), t0.elapsed().as_secs_f64());

        let bound = cross_prompt_upper_bound(
            &base,
            &e,
            &corpus.prompts(),
            self.config.eval.cross_pairs,
            ecfg.t_eval,
            derive_seed(self.config.seed, "eval.cross"),
        )?;
        println!("sweep: {} fronts, cross-prompt diversity bound {bound:.4}", front_stems().len());
        if !missing.is_empty() {
            println!("sweep: missing checkpoints: {}", missing.join(", "));
        }
        write_json(
            &self.path(SWEEP_REPORT),
            &SweepFile {
                config_hash: self.hash.clone(),
                cross_prompt_bound: bound,
                fronts: front_stems().iter().map(|s| s.to_string()).collect(),
                missing,
            },
        )?;
        Ok(timings)
    }

    fn report(&self) -> Result<BTreeMap<String, f64>> {
        let sweep: SweepFile = read_json(&self.path(SWEEP_REPORT))?;
        self.check_lineage(SWEEP_REPORT, &sweep.config_hash)?;
        let mut all = Vec::new();
        let mut curves = Vec::new();
        let mut missing = sweep.missing.clone();
        for stem in front_stems() {
            let rel = format!("fronts/{stem}.json");
            let p = self.path(&rel);
            if !p.exists() {
                missing.push(rel);
                continue;
            }
            let f = load_front(&p)?;
            self.check_lineage(&rel, &f.config_hash)?;
            for m in &f.missing {
                if !missing.contains(m) {
                    missing.push(m.clone());
                }
            }
            if f.points.is_empty() {
                continue;
            }
            curves.push(CurveSummary {
                curve: f.curve.clone(),
                points: f.points.len(),
                best_quality: f.points.iter().map(|p| p.quality).fold(f64::NEG_INFINITY, f64::max),
                best_diversity: f.points.iter().map(|p| p.diversity).fold(f64::NEG_INFINITY, f64::max),
            });
            all.extend(f.points);
        }
        let dir = self.path(REPORT_DIR);
        let combined = FrontFile {
            version: FRONT_VERSION,
            config_hash: self.hash.clone(),
            curve: "combined".into(),
            points: all.clone(),
            missing: missing.clone(),
        };
        write_json(&dir.join("front.json"), &combined)?;
        let csv_path = dir.join("front.csv");
        fs::write(&csv_path, formats::front_csv(&all)).map_err(io_err(&csv_path))?;
        let svg_path = dir.join("front.svg");
        fs::write(&svg_path, svg::scatter("quality-diversity fronts", &all)).map_err(io_err(&svg_path))?;
        println!("{:<16} {:>6} {:>12} {:>14}", "curve", "points", "max quality", "max diversity");
        for c in &curves {
            println!("{:<16} {:>6} {:>12.4} {:>14.4}", c.curve, c.points, c.best_quality, c.best_diversity);
        }
        write_json(
            &dir.join("summary.json"),
            &SummaryFile {
                config_hash: self.hash.clone(),
                seed: self.config.seed,
                cross_prompt_bound: sweep.cross_prompt_bound,
                curves,
                missing,
            },
        )?;
        Ok(BTreeMap::new())
    }
}

/// Applies `spec` and records where each input came from.
fn apply_merge(spec: &MergeSpec, sources: &[String], like: &PolicyModel) -> Result<(PolicyModel, MergeProvenance)> {
    let params = spec.apply()?;
    let model = PolicyModel::from_params(like.config(), params)?;
    let provenance = MergeProvenance {
        mode: spec.mode,
        inputs: spec
            .inputs
            .iter()
            .zip(sources)
            .map(|((p, w), src)| MergeInput {
                content_hash: p.content_hash().to_string(),
                weight: *w,
                source: src.clone(),
            })
            .collect(),
    };
    Ok((model, provenance))
}

fn usage(msg: &str) -> CliError {
    CliError::Core(qdcfg_core::Error::Argument(msg.into()))
}

/// Weighting for a merge of explicit checkpoint files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MergeWeights {
    Lambda(f64),
    Uniform,
}

impl std::str::FromStr for MergeWeights {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "uniform" {
            return Ok(MergeWeights::Uniform);
        }
        s.parse::<f64>()
            .map(MergeWeights::Lambda)
            .map_err(|_| format!("expected a number in [0, 1] or \"uniform\", got {s:?}"))
    }
}

/// Merges checkpoint files outside any run directory. The inputs must come
/// from one experiment configuration; the output inherits its hash.
pub fn merge_files(inputs: &[PathBuf], weights: MergeWeights, output: &Path) -> Result<PolicyModel> {
    let mut models = Vec::with_capacity(inputs.len());
    let mut config_hash: Option<String> = None;
    for p in inputs {
        let (m, h) = checkpoint::load_policy(p)?;
        match &config_hash {
            Some(c) if *c != h.config_hash => {
                return Err(CliError::Lineage(format!(
                    "{} was produced by config {}, {} by config {}",
                    p.display(),
                    &h.config_hash[..h.config_hash.len().min(8)],
                    inputs[0].display(),
                    &c[..c.len().min(8)]
                )))
            }
            Some(_) => {}
            None => config_hash = Some(h.config_hash.clone()),
        }
        models.push(m);
    }
    let spec = match weights {
        MergeWeights::Lambda(l) if models.len() == 2 => {
            if !(0.0..=1.0).contains(&l) {
                return Err(usage("lambda must lie in [0, 1]"));
            }
            MergeSpec::lerp(models[0].params.clone(), models[1].params.clone(), l)
        }
        MergeWeights::Lambda(_) => {
            return Err(usage("a lambda merge takes exactly two checkpoints"))
        }
        MergeWeights::Uniform => MergeSpec::uniform(models.iter().map(|m| m.params.clone()).collect()),
    };
    let first = models.first().ok_or_else(|| usage("no checkpoints to merge"))?;
    let sources: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
    let (merged, provenance) = apply_merge(&spec, &sources, first)?;
    checkpoint::save_merged(output, &merged, config_hash.as_deref().unwrap_or_default(), provenance)?;
    println!(
        "merge: {} inputs ({}) -> {} [{}]",
        inputs.len(),
        match spec.mode {
            MergeMode::PairwiseLerp => "lerp",
            MergeMode::Uniform => "uniform",
        },
        output.display(),
        merged.params.content_hash().short()
    );
    Ok(merged)
}

pub fn cmd_gen_corpus(run: &Run) -> Result<Outcome> {
    run.stage(Stage::GenCorpus)
}

pub fn cmd_pretrain(run: &Run) -> Result<Outcome> {
    run.stage(Stage::Pretrain)
}

pub fn cmd_train_embed(run: &Run) -> Result<Outcome> {
    run.stage(Stage::TrainEmbed)
}

pub fn cmd_distill(run: &Run) -> Result<Outcome> {
    run.stage(Stage::Distill)
}

pub fn cmd_merge(run: &Run) -> Result<Outcome> {
    run.stage(Stage::Merge)
}

pub fn cmd_sweep(run: &Run) -> Result<Outcome> {
    run.stage(Stage::Sweep)
}

pub fn cmd_report(run: &Run) -> Result<Outcome> {
    run.stage(Stage::Report)
}
