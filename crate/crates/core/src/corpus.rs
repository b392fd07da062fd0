//! Synthetic prompt-conditioned sequence domain.
//!
//! Each style is a first-order Markov chain over the generation vocabulary,
//! bound to one prompt token (its descriptor). The last `n_noise` generation
//! tokens are noise tokens: regular styles almost never emit them, while the
//! degraded negative style emits them often and repeats itself. Two oracles
//! score generations: adherence to a style's chain and a style-independent
//! preference score penalising repetitions and noise.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::math::{exp, ln};
use crate::rng::{normal, stream, uniform, Rng};
use crate::Token;

/// Noise tokens appended after the regular generation vocabulary.
pub const DEFAULT_NOISE_TOKENS: usize = 2;

/// Uniform floor mixed into every regular-style row so all tokens keep
/// nonzero likelihood.
const STYLE_FLOOR: f64 = 0.02;

/// Negative style: probability of emitting some noise token.
const NEG_NOISE_MASS: f64 = 0.4;
/// Negative style: probability of repeating the previous token.
const NEG_REPEAT_MASS: f64 = 0.3;

const STREAM_STYLES: u64 = 0x5354_594c;
const STREAM_CORPUS: u64 = 0x434f_5250;
const STREAM_PAIRS: u64 = 0x5041_4952;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub style_id: u32,
    /// Row-stochastic `v_gen x v_gen` matrix.
    pub transition: Vec<Vec<f64>>,
    pub start: Vec<f64>,
    /// Prompt token bound to this style.
    pub descriptor: Token,
    /// First noise token id; ids from here to `v_gen` are noise.
    pub noise_from: Token,
}

impl StyleSpec {
    pub fn v_gen(&self) -> usize {
        self.start.len()
    }

    /// Log-likelihood of `y` under this chain.
    pub fn log_likelihood(&self, y: &[Token]) -> Result<f64> {
        let v = self.v_gen();
        let mut prev: Option<usize> = None;
        let mut total = 0.0;
        for &t in y {
            let t = t as usize;
            if t >= v {
                return Err(Error::Domain {
                    token: t as u32,
                    vocab: v,
                });
            }
            let p = match prev {
                None => self.start[t],
                Some(a) => self.transition[a][t],
            };
            total += ln(p);
            prev = Some(t);
        }
        Ok(total)
    }

    /// Most likely token after `prev` (or at the start), lowest id on ties.
    pub fn argmax_next(&self, prev: Option<Token>) -> Token {
        let row = match prev {
            None => &self.start,
            Some(a) => &self.transition[a as usize],
        };
        argmax(row) as Token
    }

    fn check(&self) -> bool {
        let ok_row = |r: &[f64]| {
            r.iter().all(|&p| p >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= 1e-12
        };
        ok_row(&self.start) && self.transition.iter().all(|r| r.len() == self.v_gen() && ok_row(r))
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

fn normalize(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    for p in row.iter_mut() {
        *p /= s;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub prompt: Vec<Token>,
    pub tokens: Vec<Token>,
    pub style_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub styles: Vec<StyleSpec>,
    pub negative_style: StyleSpec,
    pub sequences: Vec<Sequence>,
    pub seq_len: usize,
    pub v_prompt: usize,
    pub v_gen: usize,
    pub n_noise: usize,
}

impl Corpus {
    pub fn n_styles(&self) -> usize {
        self.styles.len()
    }

    /// Reserved prompt token for the unconditional ("empty") prompt.
    pub fn empty_token(&self) -> Token {
        self.negative_style.descriptor + 1
    }

    pub fn negative_token(&self) -> Token {
        self.negative_style.descriptor
    }

    /// Prompts of the regular styles, in style order.
    pub fn prompts(&self) -> Vec<Vec<Token>> {
        self.styles.iter().map(|s| vec![s.descriptor]).collect()
    }

    pub fn style(&self, style_id: u32) -> Option<&StyleSpec> {
        self.styles
            .iter()
            .chain(core::iter::once(&self.negative_style))
            .find(|s| s.style_id == style_id)
    }

    /// Style bound to a regular prompt.
    pub fn style_for_prompt(&self, prompt: &[Token]) -> Option<&StyleSpec> {
        let d = *prompt.first()?;
        self.styles.iter().find(|s| s.descriptor == d)
    }

    pub fn is_noise(&self, t: Token) -> bool {
        (t as usize) >= self.v_gen - self.n_noise && (t as usize) < self.v_gen
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if !self.styles.iter().all(StyleSpec::check) || !self.negative_style.check() {
            return Err(arg("style rows are not probability vectors"));
        }
        if self
            .styles
            .iter()
            .any(|s| s.style_id == self.negative_style.style_id)
        {
            return Err(arg("negative style id collides with a regular style"));
        }
        for s in &self.sequences {
            if s.tokens.len() != self.seq_len {
                return Err(arg("sequence length differs from seq_len"));
            }
            if self.style(s.style_id).is_none() {
                return Err(arg("sequence names an unknown style"));
            }
        }
        Ok(())
    }

    /// Deterministic split into (train, held-out) by sequence index.
    pub fn split(&self, heldout_every: usize) -> (Vec<&Sequence>, Vec<&Sequence>) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (i, s) in self.sequences.iter().enumerate() {
            if heldout_every > 0 && i % heldout_every == heldout_every - 1 {
                held.push(s);
            } else {
                train.push(s);
            }
        }
        (train, held)
    }
}

/// Generates `n_styles` regular styles plus the degraded negative style (last).
///
/// `v_gen` counts the regular tokens; [`DEFAULT_NOISE_TOKENS`] noise tokens are
/// appended. Larger `concentration` makes rows peakier.
pub fn gen_styles(
    n_styles: usize,
    v_gen: usize,
    seed: u64,
    concentration: f64,
) -> Result<Vec<StyleSpec>> {
    gen_styles_with_noise(n_styles, v_gen, DEFAULT_NOISE_TOKENS, seed, concentration)
}

pub fn gen_styles_with_noise(
    n_styles: usize,
    v_gen: usize,
    n_noise: usize,
    seed: u64,
    concentration: f64,
) -> Result<Vec<StyleSpec>> {
    if n_styles < 2 {
        return Err(arg("n_styles must be at least 2"));
    }
    if v_gen < 2 {
        return Err(arg("v_gen must be at least 2"));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(arg("concentration must be positive"));
    }
    let total = v_gen + n_noise;
    let mut rng = stream(seed, STREAM_STYLES);
    let floor = STYLE_FLOOR / total as f64;

    let peaked_row = |rng: &mut crate::rng::StdRng| {
        let g: Vec<f64> = (0..v_gen).map(|_| normal(rng)).collect();
        let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut row: Vec<f64> = g.iter().map(|x| exp(concentration * (x - max))).collect();
        normalize(&mut row);
        let mut full = vec![floor; total];
        for (f, p) in full.iter_mut().zip(&row) {
            *f += (1.0 - STYLE_FLOOR) * p;
        }
        normalize(&mut full);
        full
    };

    let mut styles = Vec::with_capacity(n_styles + 1);
    for s in 0..n_styles {
        let start = peaked_row(&mut rng);
        let transition = (0..total).map(|_| peaked_row(&mut rng)).collect();
        styles.push(StyleSpec {
            style_id: s as u32,
            transition,
            start,
            descriptor: s as Token,
            noise_from: v_gen as Token,
        });
    }
    styles.push(negative_style(n_styles, v_gen, n_noise));
    Ok(styles)
}

fn negative_style(n_styles: usize, v_gen: usize, n_noise: usize) -> StyleSpec {
    let total = v_gen + n_noise;
    let (noise_mass, regular_mass) = if n_noise == 0 {
        (0.0, 1.0)
    } else {
        (NEG_NOISE_MASS, 1.0 - NEG_NOISE_MASS)
    };
    let mut start = vec![0.0; total];
    for (i, p) in start.iter_mut().enumerate() {
        *p = if i < v_gen {
            regular_mass / v_gen as f64
        } else {
            noise_mass / n_noise as f64
        };
    }
    normalize(&mut start);
    let transition = (0..total)
        .map(|prev| {
            let mut row: Vec<f64> = start.iter().map(|p| p * (1.0 - NEG_REPEAT_MASS)).collect();
            row[prev] += NEG_REPEAT_MASS;
            normalize(&mut row);
            row
        })
        .collect();
    StyleSpec {
        style_id: n_styles as u32,
        transition,
        start,
        descriptor: n_styles as Token,
        noise_from: v_gen as Token,
    }
}

fn sample_chain<R: Rng + ?Sized>(style: &StyleSpec, len: usize, rng: &mut R) -> Vec<Token> {
    let mut out = Vec::with_capacity(len);
    let mut prev: Option<usize> = None;
    for _ in 0..len {
        let row = match prev {
            None => &style.start,
            Some(a) => &style.transition[a],
        };
        let t = crate::math::sample_index(row, uniform(rng));
        out.push(t as Token);
        prev = Some(t);
    }
    out
}

/// Draws `n_per_style` sequences of length `seq_len` from every regular style
/// and from the negative style (both under their own descriptors), plus
/// `n_per_style` sequences under the empty prompt, each from a uniformly
/// chosen style (the negative one included), so the empty prompt models the
/// unconditional data distribution. `styles` is the output of [`gen_styles`].
pub fn sample_corpus(
    styles: &[StyleSpec],
    n_per_style: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Corpus> {
    if seq_len < 4 {
        return Err(arg("seq_len must be at least 4"));
    }
    if styles.len() < 3 {
        return Err(arg("need at least two regular styles and the negative style"));
    }
    let (negative, regular) = styles.split_last().expect("nonempty");
    let v_gen = negative.v_gen();
    if regular.iter().any(|s| s.v_gen() != v_gen) {
        return Err(arg("styles disagree on the generation vocabulary"));
    }
    let n_noise = v_gen - negative.noise_from as usize;
    let mut rng = stream(seed, STREAM_CORPUS);
    let mut sequences = Vec::with_capacity(n_per_style * (regular.len() + 2));
    for style in styles {
        for _ in 0..n_per_style {
            sequences.push(Sequence {
                prompt: vec![style.descriptor],
                tokens: sample_chain(style, seq_len, &mut rng),
                style_id: style.style_id,
            });
        }
    }
    let empty = negative.descriptor + 1;
    for _ in 0..n_per_style {
        let style = &styles[rng.random_range(0..styles.len())];
        sequences.push(Sequence {
            prompt: vec![empty],
            tokens: sample_chain(style, seq_len, &mut rng),
            style_id: style.style_id,
        });
    }
    Ok(Corpus {
        styles: regular.to_vec(),
        negative_style: negative.clone(),
        sequences,
        seq_len,
        v_prompt: regular.len() + 2,
        v_gen,
        n_noise,
    })
}

/// Calibrated adherence scorer for one style and one sequence length.
///
/// The per-token geometric-mean likelihood `g(y)` is mapped affinely so that
/// the expected log-likelihood of a uniform-random sequence lands at 0 and
/// the most likely sequence of that length (Viterbi) lands at 1, then clamped.
#[derive(Debug, Clone)]
pub struct AdherenceOracle<'a> {
    style: &'a StyleSpec,
    len: usize,
    lo: f64,
    hi: f64,
}

impl<'a> AdherenceOracle<'a> {
    pub fn new(style: &'a StyleSpec, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(arg("adherence needs a nonempty sequence"));
        }
        let v = style.v_gen();
        let vf = v as f64;
        let mean_start: f64 = style.start.iter().map(|&p| ln(p)).sum::<f64>() / vf;
        let mean_trans: f64 = style
            .transition
            .iter()
            .flat_map(|r| r.iter())
            .map(|&p| ln(p))
            .sum::<f64>()
            / (vf * vf);
        let lo_ll = (mean_start + (len - 1) as f64 * mean_trans) / len as f64;

        // Viterbi over paths of length `len`.
        let mut best: Vec<f64> = style.start.iter().map(|&p| ln(p)).collect();
        let mut next = vec![0.0; v];
        for _ in 1..len {
            for (b, slot) in next.iter_mut().enumerate() {
                *slot = (0..v)
                    .map(|a| best[a] + ln(style.transition[a][b]))
                    .fold(f64::NEG_INFINITY, f64::max);
            }
            core::mem::swap(&mut best, &mut next);
        }
        let hi_ll = best.iter().copied().fold(f64::NEG_INFINITY, f64::max) / len as f64;
        Ok(AdherenceOracle {
            style,
            len,
            lo: exp(lo_ll),
            hi: exp(hi_ll),
        })
    }

    pub fn score(&self, y: &[Token]) -> Result<f64> {
        if y.len() != self.len {
            return Err(arg("sequence length differs from the calibrated length"));
        }
        let g = exp(self.style.log_likelihood(y)? / y.len() as f64);
        Ok(((g - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0))
    }
}

/// Adherence of `y` to `style`, in `[0, 1]`.
pub fn oracle_adherence(y: &[Token], style: &StyleSpec) -> Result<f64> {
    AdherenceOracle::new(style, y.len())?.score(y)
}

/// Preference score: `1 - repeats/(len-1) - noise/len`, clamped at 0.
///
/// `noise_from` is the first noise token id; tokens at or above it count as noise.
pub fn oracle_preference(y: &[Token], noise_from: Token) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let repeats = y.windows(2).filter(|w| w[0] == w[1]).count();
    let rep_frac = if y.len() > 1 {
        repeats as f64 / (y.len() - 1) as f64
    } else {
        0.0
    };
    let noise = y.iter().filter(|&&t| t >= noise_from).count();
    (1.0 - rep_frac - noise as f64 / y.len() as f64).max(0.0)
}

impl Corpus {
    pub fn noise_from(&self) -> Token {
        (self.v_gen - self.n_noise) as Token
    }

    pub fn preference(&self, y: &[Token]) -> f64 {
        oracle_preference(y, self.noise_from())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub anchor: Vec<Token>,
    pub positive: Vec<Token>,
    /// Style that generated the chunks; triplet negatives come from another.
    pub source_id: u32,
    /// Index of the corpus sequence both chunks were cut from.
    pub sequence: u32,
}

/// Draws `n_pairs` pairs of non-overlapping chunks from uniformly chosen
/// corpus sequences. The anchor is always the earlier chunk.
pub fn make_pairs(
    corpus: &Corpus,
    chunk_len: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<ContrastivePair>> {
    let len = corpus.seq_len;
    if chunk_len == 0 || 2 * chunk_len > len {
        return Err(arg("chunk_len must satisfy 0 < 2*chunk_len <= seq_len"));
    }
    if corpus.sequences.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = stream(seed, STREAM_PAIRS);
    let mut out = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let src = rng.random_range(0..corpus.sequences.len());
        let toks = &corpus.sequences[src].tokens;
        let a = rng.random_range(0..=len - 2 * chunk_len);
        let b = rng.random_range(a + chunk_len..=len - chunk_len);
        out.push(ContrastivePair {
            anchor: toks[a..a + chunk_len].to_vec(),
            positive: toks[b..b + chunk_len].to_vec(),
            source_id: corpus.sequences[src].style_id,
            sequence: src as u32,
        });
    }
    Ok(out)
}
