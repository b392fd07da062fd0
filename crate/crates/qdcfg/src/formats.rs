//! JSON and CSV files for corpora, training traces and fronts.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use qdcfg_core::corpus::Corpus;
use qdcfg_core::distill::{TrainStep, TrainTrace};
use qdcfg_core::eval::{FrontPoint, Knob};

use crate::error::{io_err, CliError, Result};

pub const CORPUS_VERSION: u32 = 1;
pub const FRONT_VERSION: u32 = 1;

pub const TRACE_HEADER: [&str; 7] = [
    "step",
    "kl_to_teacher",
    "kl_batch",
    "diversity_reward_mean",
    "beta",
    "quality_eval",
    "diversity_eval",
];

pub const FRONT_HEADER: [&str; 13] = [
    "knob",
    "knob_value",
    "quality",
    "diversity",
    "entropy",
    "model_ref",
    "n_prompts",
    "M",
    "seed",
    "curve",
    "adherence",
    "quality_se",
    "diversity_se",
];

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&s).map_err(|e| CliError::format(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFile {
    pub version: u32,
    pub config_hash: String,
    pub corpus: Corpus,
}

pub fn save_corpus(path: &Path, corpus: &Corpus, config_hash: &str) -> Result<()> {
    write_json(
        path,
        &CorpusFile {
            version: CORPUS_VERSION,
            config_hash: config_hash.into(),
            corpus: corpus.clone(),
        },
    )
}

pub fn load_corpus(path: &Path) -> Result<CorpusFile> {
    let f: CorpusFile = read_json(path)?;
    if f.version != CORPUS_VERSION {
        return Err(CliError::format(path, format!("unsupported corpus version {}", f.version)));
    }
    f.corpus.validate().map_err(|e| CliError::format(path, e))?;
    Ok(f)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(path: &Path, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| CliError::format(path, format!("bad number {s:?}")))
}

fn parse<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.parse().map_err(|_| CliError::format(path, format!("bad value {s:?}")))
}

pub fn trace_csv(trace: &TrainTrace) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRACE_HEADER).expect("in-memory write");
    for s in &trace.steps {
        w.write_record([
            s.step.to_string(),
            opt(s.kl_to_teacher),
            opt(s.kl_batch),
            opt(s.diversity_reward_mean),
            s.beta.to_string(),
            opt(s.quality_eval),
            opt(s.diversity_eval),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

pub fn parse_trace_csv(path: &Path, text: &str) -> Result<Vec<TrainStep>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| CliError::format(path, e))?.clone();
    if header.iter().ne(TRACE_HEADER) {
        return Err(CliError::format(path, "unexpected trace header"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::format(path, e))?;
        out.push(TrainStep {
            step: parse(path, &rec[0])?,
            kl_to_teacher: parse_opt(path, &rec[1])?,
            kl_batch: parse_opt(path, &rec[2])?,
            diversity_reward_mean: parse_opt(path, &rec[3])?,
            beta: parse(path, &rec[4])?,
            quality_eval: parse_opt(path, &rec[5])?,
            diversity_eval: parse_opt(path, &rec[6])?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub config_hash: String,
    pub beta: f64,
    pub trace: TrainTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontFile {
    pub version: u32,
    pub config_hash: String,
    pub curve: String,
    pub points: Vec<FrontPoint>,
    /// Checkpoints the sweep could not find.
    #[serde(default)]
    pub missing: Vec<String>,
}

pub fn front_csv(points: &[FrontPoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(FRONT_HEADER).expect("in-memory write");
    for p in points {
        w.write_record([
            p.knob.as_str().to_string(),
            p.knob_value.to_string(),
            p.quality.to_string(),
            p.diversity.to_string(),
            p.entropy.to_string(),
            p.model_ref.clone(),
            p.n_prompts.to_string(),
            p.m.to_string(),
            p.seed.to_string(),
            p.curve.clone(),
            p.adherence.to_string(),
            p.quality_se.to_string(),
            p.diversity_se.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

pub fn parse_front_csv(path: &Path, text: &str) -> Result<Vec<FrontPoint>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| CliError::format(path, e))?.clone();
    if header.iter().take(9).ne(FRONT_HEADER.iter().take(9).copied()) {
        return Err(CliError::format(path, "unexpected front header"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::format(path, e))?;
        let extra = |i: usize| rec.get(i).unwrap_or("");
        out.push(FrontPoint {
            knob: Knob::parse(&rec[0]).ok_or_else(|| CliError::format(path, format!("unknown knob {:?}", &rec[0])))?,
            knob_value: parse(path, &rec[1])?,
            quality: parse(path, &rec[2])?,
            diversity: parse(path, &rec[3])?,
            entropy: parse(path, &rec[4])?,
            model_ref: rec[5].to_string(),
            n_prompts: parse(path, &rec[6])?,
            m: parse(path, &rec[7])?,
            seed: parse(path, &rec[8])?,
            curve: extra(9).to_string(),
            adherence: parse_opt(path, extra(10))?.unwrap_or(f64::NAN),
            quality_se: parse_opt(path, extra(11))?.unwrap_or(f64::NAN),
            diversity_se: parse_opt(path, extra(12))?.unwrap_or(f64::NAN),
        });
    }
    Ok(out)
}

/// Writes `<stem>.json`, `<stem>.csv` and `<stem>.svg`.
pub fn save_front(dir: &Path, stem: &str, front: &FrontFile, title: &str) -> Result<()> {
    write_json(&dir.join(format!("{stem}.json")), front)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    fs::write(&csv_path, front_csv(&front.points)).map_err(io_err(&csv_path))?;
    let svg_path = dir.join(format!("{stem}.svg"));
    fs::write(&svg_path, crate::svg::scatter(title, &front.points)).map_err(io_err(&svg_path))
}

pub fn load_front(path: &Path) -> Result<FrontFile> {
    let f: FrontFile = read_json(path)?;
    if f.version != FRONT_VERSION {
        return Err(CliError::format(path, format!("unsupported front version {}", f.version)));
    }
    Ok(f)
}
