//! Pre-norm causal transformer: forward step with a key/value cache, a
//! recorded trace for teacher-forced sequences, and the hand-derived backward
//! pass over that trace.
//!
//! Weights are stored `[in, out]` row-major. The same per-position step is used
//! for incremental decoding and for full teacher-forced passes, so both paths
//! produce bitwise-identical logits.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::config::ModelConfig;
use super::params::{Layout, LayoutBuilder};
use crate::math::{exp, sqrt};
use crate::Token;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone)]
pub(crate) struct BlockOffsets {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc1: usize,
    b_fc1: usize,
    w_fc2: usize,
    b_fc2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    tok_prompt: usize,
    tok_gen: usize,
    pos: usize,
    blocks: Vec<BlockOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: Option<usize>,
    b_out: usize,
}

/// Builds the parameter layout and the offsets the kernels index with.
pub(crate) fn build_layout(c: &ModelConfig) -> (Layout, Offsets) {
    let d = c.d_model;
    let m = c.mlp_dim();
    let mut b = LayoutBuilder::new();
    let tok_prompt = b.add("tok_prompt", &[c.v_prompt, d]);
    let tok_gen = b.add("tok_gen", &[c.v_gen, d]);
    let pos = b.add("pos", &[c.n_positions(), d]);
    let mut blocks = Vec::with_capacity(c.n_blocks);
    for i in 0..c.n_blocks {
        blocks.push(BlockOffsets {
            ln1_g: b.add(format!("block{i}.ln1.gain"), &[d]),
            ln1_b: b.add(format!("block{i}.ln1.bias"), &[d]),
            w_qkv: b.add(format!("block{i}.attn.w_qkv"), &[d, 3 * d]),
            b_qkv: b.add(format!("block{i}.attn.b_qkv"), &[3 * d]),
            w_o: b.add(format!("block{i}.attn.w_o"), &[d, d]),
            b_o: b.add(format!("block{i}.attn.b_o"), &[d]),
            ln2_g: b.add(format!("block{i}.ln2.gain"), &[d]),
            ln2_b: b.add(format!("block{i}.ln2.bias"), &[d]),
            w_fc1: b.add(format!("block{i}.mlp.w_fc1"), &[d, m]),
            b_fc1: b.add(format!("block{i}.mlp.b_fc1"), &[m]),
            w_fc2: b.add(format!("block{i}.mlp.w_fc2"), &[m, d]),
            b_fc2: b.add(format!("block{i}.mlp.b_fc2"), &[d]),
        });
    }
    let lnf_g = b.add("lnf.gain", &[d]);
    let lnf_b = b.add("lnf.bias", &[d]);
    let w_out = (!c.tie_output).then(|| b.add("head.w_out", &[d, c.v_gen]));
    let b_out = b.add("head.b_out", &[c.v_gen]);
    (
        b.finish(),
        Offsets {
            tok_prompt,
            tok_gen,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
        },
    )
}

/// Scaled normal initialisation. Returns one standard deviation per scalar,
/// zero meaning "set to the constant in `fill`".
pub(crate) fn init_scales(c: &ModelConfig, off: &Offsets, n: usize) -> (Vec<f64>, Vec<f64>) {
    let d = c.d_model;
    let m = c.mlp_dim();
    let mut std = vec![0.0; n];
    let mut fill = vec![0.0; n];
    let mut set = |start: usize, len: usize, s: f64| {
        for v in &mut std[start..start + len] {
            *v = s;
        }
    };
    let resid = 1.0 / sqrt(2.0 * c.n_blocks as f64);
    set(off.tok_prompt, c.v_prompt * d, 0.5);
    set(off.tok_gen, c.v_gen * d, 0.5);
    set(off.pos, c.n_positions() * d, 0.1);
    for b in &off.blocks {
        set(b.w_qkv, d * 3 * d, 1.0 / sqrt(d as f64));
        set(b.w_o, d * d, resid / sqrt(d as f64));
        set(b.w_fc1, d * m, 1.0 / sqrt(d as f64));
        set(b.w_fc2, m * d, resid / sqrt(m as f64));
    }
    if let Some(w) = off.w_out {
        set(w, d * c.v_gen, 1.0 / sqrt(d as f64));
    }
    let mut ones = |start: usize| {
        for v in &mut fill[start..start + d] {
            *v = 1.0;
        }
    };
    for b in &off.blocks {
        ones(b.ln1_g);
        ones(b.ln2_g);
    }
    ones(off.lnf_g);
    (std, fill)
}

/// Per-block key/value cache for incremental decoding.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub(crate) t: usize,
    keys: Vec<Vec<f64>>,
    vals: Vec<Vec<f64>>,
    scratch: Scratch,
}

impl DecodeState {
    pub(crate) fn new(c: &ModelConfig) -> Self {
        let cap = c.n_positions() * c.d_model;
        DecodeState {
            t: 0,
            keys: (0..c.n_blocks).map(|_| Vec::with_capacity(cap)).collect(),
            vals: (0..c.n_blocks).map(|_| Vec::with_capacity(cap)).collect(),
            scratch: Scratch::new(c),
        }
    }

    /// Number of positions processed so far.
    pub fn position(&self) -> usize {
        self.t
    }
}

/// Activations of one block over a teacher-forced sequence, one row per position.
#[derive(Debug, Clone, Default)]
struct BlockTrace {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a1: Vec<f64>,
    qkv: Vec<f64>,
    /// Attention weights; position `t` holds `heads * (t + 1)` values
    /// starting at `heads * t * (t + 1) / 2`.
    att: Vec<f64>,
    cat: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    a2: Vec<f64>,
    h1: Vec<f64>,
    g1: Vec<f64>,
}

/// Recorded forward pass over a full input sequence.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    inputs: Vec<(bool, Token)>,
    blocks: Vec<BlockTrace>,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    af: Vec<f64>,
    /// Logits for every input position, `v_gen` per row.
    pub logits: Vec<f64>,
}

impl Trace {
    pub fn n_positions(&self) -> usize {
        self.inputs.len()
    }
}

/// Scratch buffers for a single position.
#[derive(Debug, Clone, Default)]
struct Scratch {
    x: Vec<f64>,
    xhat: Vec<f64>,
    a: Vec<f64>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    cat: Vec<f64>,
    tmp: Vec<f64>,
    h1: Vec<f64>,
    g1: Vec<f64>,
}

impl Scratch {
    fn new(c: &ModelConfig) -> Self {
        let d = c.d_model;
        Scratch {
            x: vec![0.0; d],
            xhat: vec![0.0; d],
            a: vec![0.0; d],
            qkv: vec![0.0; 3 * d],
            att: Vec::with_capacity(c.n_heads * c.n_positions()),
            cat: vec![0.0; d],
            tmp: vec![0.0; d],
            h1: vec![0.0; c.mlp_dim()],
            g1: vec![0.0; c.mlp_dim()],
        }
    }
}

#[inline]
fn affine(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n = out.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// Accumulates `dW += x^T dy`, `db += dy` and writes `dx = W dy`.
#[inline]
fn affine_back(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let n = dy.len();
    for (g, &d) in db.iter_mut().zip(dy) {
        *g += d;
    }
    for (i, &xi) in x.iter().enumerate() {
        let wrow = &w[i * n..(i + 1) * n];
        let dwrow = &mut dw[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for j in 0..n {
            dwrow[j] += xi * dy[j];
            acc += wrow[j] * dy[j];
        }
        dx[i] = acc;
    }
}

/// Layer norm: writes `xhat` and returns `1 / std`.
#[inline]
fn layer_norm(x: &[f64], xhat: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / sqrt(var + LN_EPS);
    for (h, &v) in xhat.iter_mut().zip(x) {
        *h = (v - mean) * rstd;
    }
    rstd
}

/// Backward through `a = gain * xhat + bias`; adds the input gradient to `dx`.
#[inline]
fn layer_norm_back(
    xhat: &[f64],
    rstd: f64,
    gain: &[f64],
    da: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
) {
    let n = xhat.len() as f64;
    let mut mean_dxhat = 0.0;
    let mut mean_dxhat_xhat = 0.0;
    for i in 0..xhat.len() {
        dgain[i] += da[i] * xhat[i];
        dbias[i] += da[i];
        let dxh = da[i] * gain[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    for i in 0..xhat.len() {
        let dxh = da[i] * gain[i];
        dx[i] += rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

/// `tanh` through a single `exp`, which is markedly cheaper than `libm::tanh`.
#[inline]
fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / (exp(2.0 * u) + 1.0)
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = tanh(u);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Borrowed view of a model's parameters with precomputed offsets.
pub(crate) struct Net<'a> {
    pub c: &'a ModelConfig,
    pub off: &'a Offsets,
    pub p: &'a [f64],
}

impl<'a> Net<'a> {
    #[inline]
    fn seg(&self, at: usize, len: usize) -> &'a [f64] {
        &self.p[at..at + len]
    }

    /// Processes one input token at position `state.t`, writing the logits
    /// for the next generated token into `logits`.
    fn step_inner(
        &self,
        is_prompt: bool,
        token: Token,
        state: &mut DecodeState,
        s: &mut Scratch,
        logits: &mut [f64],
        mut trace: Option<&mut Trace>,
    ) {
        let c = self.c;
        let d = c.d_model;
        let m = c.mlp_dim();
        let heads = c.n_heads;
        let dh = c.head_dim();
        let scale = 1.0 / sqrt(dh as f64);
        let t = state.t;

        let table = if is_prompt {
            self.off.tok_prompt
        } else {
            self.off.tok_gen
        };
        let emb = self.seg(table + token as usize * d, d);
        let pos = self.seg(self.off.pos + t * d, d);
        for i in 0..d {
            s.x[i] = emb[i] + pos[i];
        }

        for (bi, b) in self.off.blocks.iter().enumerate() {
            let rstd1 = layer_norm(&s.x, &mut s.xhat);
            let g = self.seg(b.ln1_g, d);
            let bb = self.seg(b.ln1_b, d);
            for i in 0..d {
                s.a[i] = g[i] * s.xhat[i] + bb[i];
            }
            affine(
                &s.a,
                self.seg(b.w_qkv, d * 3 * d),
                self.seg(b.b_qkv, 3 * d),
                &mut s.qkv,
            );
            state.keys[bi].extend_from_slice(&s.qkv[d..2 * d]);
            state.vals[bi].extend_from_slice(&s.qkv[2 * d..3 * d]);
            let keys = &state.keys[bi];
            let vals = &state.vals[bi];

            s.att.clear();
            for v in s.cat.iter_mut() {
                *v = 0.0;
            }
            for h in 0..heads {
                let q = &s.qkv[h * dh..(h + 1) * dh];
                let base = s.att.len();
                let mut max = f64::NEG_INFINITY;
                for j in 0..=t {
                    let k = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                    let mut sc = 0.0;
                    for e in 0..dh {
                        sc += q[e] * k[e];
                    }
                    sc *= scale;
                    max = max.max(sc);
                    s.att.push(sc);
                }
                let mut sum = 0.0;
                for w in &mut s.att[base..] {
                    *w = exp(*w - max);
                    sum += *w;
                }
                for w in &mut s.att[base..] {
                    *w /= sum;
                }
                let out = &mut s.cat[h * dh..(h + 1) * dh];
                for j in 0..=t {
                    let w = s.att[base + j];
                    let v = &vals[j * d + h * dh..j * d + (h + 1) * dh];
                    for e in 0..dh {
                        out[e] += w * v[e];
                    }
                }
            }
            affine(&s.cat, self.seg(b.w_o, d * d), self.seg(b.b_o, d), &mut s.tmp);
            for i in 0..d {
                s.x[i] += s.tmp[i];
            }

            if let Some(tr) = trace.as_deref_mut() {
                let bt = &mut tr.blocks[bi];
                bt.xhat1.extend_from_slice(&s.xhat);
                bt.rstd1.push(rstd1);
                bt.a1.extend_from_slice(&s.a);
                bt.qkv.extend_from_slice(&s.qkv);
                bt.att.extend_from_slice(&s.att);
                bt.cat.extend_from_slice(&s.cat);
            }

            let rstd2 = layer_norm(&s.x, &mut s.xhat);
            let g = self.seg(b.ln2_g, d);
            let bb = self.seg(b.ln2_b, d);
            for i in 0..d {
                s.a[i] = g[i] * s.xhat[i] + bb[i];
            }
            affine(&s.a, self.seg(b.w_fc1, d * m), self.seg(b.b_fc1, m), &mut s.h1);
            for (o, &h) in s.g1.iter_mut().zip(&s.h1) {
                *o = gelu(h);
            }
            affine(&s.g1, self.seg(b.w_fc2, m * d), self.seg(b.b_fc2, d), &mut s.tmp);
            for i in 0..d {
                s.x[i] += s.tmp[i];
            }

            if let Some(tr) = trace.as_deref_mut() {
                let bt = &mut tr.blocks[bi];
                bt.xhat2.extend_from_slice(&s.xhat);
                bt.rstd2.push(rstd2);
                bt.a2.extend_from_slice(&s.a);
                bt.h1.extend_from_slice(&s.h1);
                bt.g1.extend_from_slice(&s.g1);
            }
        }

        let rstdf = layer_norm(&s.x, &mut s.xhat);
        let g = self.seg(self.off.lnf_g, d);
        let bb = self.seg(self.off.lnf_b, d);
        for i in 0..d {
            s.a[i] = g[i] * s.xhat[i] + bb[i];
        }
        self.head(&s.a, logits);
        state.t += 1;

        if let Some(tr) = trace {
            tr.inputs.push((is_prompt, token));
            tr.xhatf.extend_from_slice(&s.xhat);
            tr.rstdf.push(rstdf);
            tr.af.extend_from_slice(&s.a);
            tr.logits.extend_from_slice(logits);
        }
    }

    fn head(&self, a: &[f64], logits: &mut [f64]) {
        let d = self.c.d_model;
        let v = self.c.v_gen;
        let b_out = self.seg(self.off.b_out, v);
        match self.off.w_out {
            Some(w) => affine(a, self.seg(w, d * v), b_out, logits),
            None => {
                let table = self.seg(self.off.tok_gen, v * d);
                for j in 0..v {
                    let row = &table[j * d..(j + 1) * d];
                    let mut acc = b_out[j];
                    for i in 0..d {
                        acc += a[i] * row[i];
                    }
                    logits[j] = acc;
                }
            }
        }
    }

    pub fn new_state(&self) -> DecodeState {
        DecodeState::new(self.c)
    }

    /// Single decoding step without recording.
    pub fn step(&self, is_prompt: bool, token: Token, state: &mut DecodeState, logits: &mut [f64]) {
        let mut s = core::mem::take(&mut state.scratch);
        self.step_inner(is_prompt, token, state, &mut s, logits, None);
        state.scratch = s;
    }

    /// Runs the prompt and then `gen` tokens, returning logits for every
    /// position from the last prompt token onwards (`gen.len() + 1` rows).
    pub fn run(&self, prompt: &[Token], gen: &[Token], trace: Option<&mut Trace>) -> Vec<f64> {
        let v = self.c.v_gen;
        let mut state = DecodeState::new(self.c);
        let mut s = Scratch::new(self.c);
        let mut row = vec![0.0; v];
        let mut out = Vec::with_capacity((gen.len() + 1) * v);
        let mut trace = trace;
        if let Some(tr) = trace.as_deref_mut() {
            *tr = Trace {
                blocks: vec![BlockTrace::default(); self.c.n_blocks],
                ..Trace::default()
            };
        }
        let last_prompt = prompt.len() - 1;
        for (i, &tok) in prompt.iter().enumerate() {
            self.step_inner(true, tok, &mut state, &mut s, &mut row, trace.as_deref_mut());
            if i == last_prompt {
                out.extend_from_slice(&row);
            }
        }
        for &tok in gen {
            self.step_inner(false, tok, &mut state, &mut s, &mut row, trace.as_deref_mut());
            out.extend_from_slice(&row);
        }
        out
    }

    /// Backpropagates `dlogits` (one `v_gen` row per input position of the
    /// trace, rows for positions without a loss may be zero) into `grad`.
    pub fn backward(&self, tr: &Trace, dlogits: &[f64], grad: &mut [f64]) {
        let c = self.c;
        let d = c.d_model;
        let m = c.mlp_dim();
        let v = c.v_gen;
        let heads = c.n_heads;
        let dh = c.head_dim();
        let scale = 1.0 / sqrt(dh as f64);
        let n = tr.n_positions();
        debug_assert_eq!(dlogits.len(), n * v);

        // Residual-stream gradient per position.
        let mut dres = vec![0.0; n * d];
        let mut da = vec![0.0; d];
        {
            let (b_out_off, tok_gen_off) = (self.off.b_out, self.off.tok_gen);
            for t in 0..n {
                let dz = &dlogits[t * v..(t + 1) * v];
                if dz.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let af = &tr.af[t * d..(t + 1) * d];
                match self.off.w_out {
                    Some(w) => {
                        let (dw, db) = split_two(grad, w, d * v, b_out_off, v);
                        affine_back(af, self.seg(w, d * v), dz, dw, db, &mut da);
                    }
                    None => {
                        let table = self.seg(tok_gen_off, v * d);
                        for j in 0..v {
                            grad[b_out_off + j] += dz[j];
                        }
                        for i in 0..d {
                            da[i] = 0.0;
                        }
                        for j in 0..v {
                            let row = &table[j * d..(j + 1) * d];
                            let g = &mut grad[tok_gen_off + j * d..tok_gen_off + (j + 1) * d];
                            for i in 0..d {
                                g[i] += dz[j] * af[i];
                                da[i] += dz[j] * row[i];
                            }
                        }
                    }
                }
                let gain = self.seg(self.off.lnf_g, d);
                let (dg, dbias) = split_two(grad, self.off.lnf_g, d, self.off.lnf_b, d);
                layer_norm_back(
                    &tr.xhatf[t * d..(t + 1) * d],
                    tr.rstdf[t],
                    gain,
                    &da,
                    dg,
                    dbias,
                    &mut dres[t * d..(t + 1) * d],
                );
            }
        }

        let mut dh1 = vec![0.0; m];
        let mut dg1 = vec![0.0; m];
        let mut dcat = vec![0.0; n * d];
        let mut dqkv = vec![0.0; n * 3 * d];
        let mut dtmp = vec![0.0; d];
        for (bi, b) in self.off.blocks.iter().enumerate().rev() {
            let bt = &tr.blocks[bi];

            // MLP sub-block: x_out = x_mid + fc2(gelu(fc1(ln2(x_mid)))).
            for t in 0..n {
                let dy = &dres[t * d..(t + 1) * d];
                {
                    let (dw, db) = split_two(grad, b.w_fc2, m * d, b.b_fc2, d);
                    affine_back(&bt.g1[t * m..(t + 1) * m], self.seg(b.w_fc2, m * d), dy, dw, db, &mut dg1);
                }
                for k in 0..m {
                    dh1[k] = dg1[k] * gelu_grad(bt.h1[t * m + k]);
                }
                {
                    let (dw, db) = split_two(grad, b.w_fc1, d * m, b.b_fc1, m);
                    affine_back(&bt.a2[t * d..(t + 1) * d], self.seg(b.w_fc1, d * m), &dh1, dw, db, &mut da);
                }
                let gain = self.seg(b.ln2_g, d);
                let (dg, dbias) = split_two(grad, b.ln2_g, d, b.ln2_b, d);
                layer_norm_back(
                    &bt.xhat2[t * d..(t + 1) * d],
                    bt.rstd2[t],
                    gain,
                    &da,
                    dg,
                    dbias,
                    &mut dres[t * d..(t + 1) * d],
                );
            }

            // Attention sub-block: x_mid = x_in + w_o(attn(ln1(x_in))).
            for t in 0..n {
                let dy = &dres[t * d..(t + 1) * d];
                let (dw, db) = split_two(grad, b.w_o, d * d, b.b_o, d);
                affine_back(&bt.cat[t * d..(t + 1) * d], self.seg(b.w_o, d * d), dy, dw, db, &mut dtmp);
                dcat[t * d..(t + 1) * d].copy_from_slice(&dtmp);
            }
            for x in dqkv.iter_mut() {
                *x = 0.0;
            }
            let mut datt = Vec::with_capacity(n);
            for t in 0..n {
                let att_base = heads * t * (t + 1) / 2;
                for h in 0..heads {
                    let att = &bt.att[att_base + h * (t + 1)..att_base + (h + 1) * (t + 1)];
                    let dout = &dcat[t * d + h * dh..t * d + (h + 1) * dh];
                    datt.clear();
                    let mut dot_sum = 0.0;
                    for j in 0..=t {
                        let vj = &bt.qkv[j * 3 * d + 2 * d + h * dh..j * 3 * d + 2 * d + (h + 1) * dh];
                        let mut acc = 0.0;
                        for e in 0..dh {
                            acc += dout[e] * vj[e];
                        }
                        datt.push(acc);
                        dot_sum += att[j] * acc;
                        let dv = &mut dqkv[j * 3 * d + 2 * d + h * dh..j * 3 * d + 2 * d + (h + 1) * dh];
                        for e in 0..dh {
                            dv[e] += att[j] * dout[e];
                        }
                    }
                    for j in 0..=t {
                        let dscore = att[j] * (datt[j] - dot_sum) * scale;
                        if dscore == 0.0 {
                            continue;
                        }
                        for e in 0..dh {
                            let k = bt.qkv[j * 3 * d + d + h * dh + e];
                            let q = bt.qkv[t * 3 * d + h * dh + e];
                            dqkv[t * 3 * d + h * dh + e] += dscore * k;
                            dqkv[j * 3 * d + d + h * dh + e] += dscore * q;
                        }
                    }
                }
            }
            for t in 0..n {
                {
                    let (dw, db) = split_two(grad, b.w_qkv, d * 3 * d, b.b_qkv, 3 * d);
                    affine_back(
                        &bt.a1[t * d..(t + 1) * d],
                        self.seg(b.w_qkv, d * 3 * d),
                        &dqkv[t * 3 * d..(t + 1) * 3 * d],
                        dw,
                        db,
                        &mut da,
                    );
                }
                let gain = self.seg(b.ln1_g, d);
                let (dg, dbias) = split_two(grad, b.ln1_g, d, b.ln1_b, d);
                layer_norm_back(
                    &bt.xhat1[t * d..(t + 1) * d],
                    bt.rstd1[t],
                    gain,
                    &da,
                    dg,
                    dbias,
                    &mut dres[t * d..(t + 1) * d],
                );
            }
        }

        for (t, &(is_prompt, tok)) in tr.inputs.iter().enumerate() {
            let table = if is_prompt {
                self.off.tok_prompt
            } else {
                self.off.tok_gen
            };
            let dy = &dres[t * d..(t + 1) * d];
            let e = table + tok as usize * d;
            for i in 0..d {
                grad[e + i] += dy[i];
            }
            let p = self.off.pos + t * d;
            for i in 0..d {
                grad[p + i] += dy[i];
            }
        }
    }
}

/// Two disjoint mutable windows into one buffer; `a` must precede `b`.
#[inline]
fn split_two(buf: &mut [f64], a: usize, a_len: usize, b: usize, b_len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + a_len <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + a_len], &mut hi[..b_len])
}
