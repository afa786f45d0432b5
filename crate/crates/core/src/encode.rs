//! Frozen transformer encoder used as the semantic encoder and the prompt fuser.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::graph::{attention_pool, AttentionPooler};
use crate::numcore::{gaussian, Ctx, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub max_len: usize,
    /// Token id placed at position 0; its output is the summary vector.
    pub summary_id: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.depth == 0 || self.max_len < 2 {
            return Err(Error::Invalid(format!("encoder config {self:?}")));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.summary_id >= self.vocab_size {
            return Err(Error::Invalid("summary id outside vocabulary".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    wq: Arc<Tensor>,
    wk: Arc<Tensor>,
    wv: Arc<Tensor>,
    wo: Arc<Tensor>,
    w1: Arc<Tensor>,
    w2: Arc<Tensor>,
}

/// One piece of an input sequence.
#[derive(Clone, Copy, Debug)]
pub enum Segment<'a> {
    /// `[n, d]` vectors inserted as-is (soft tokens, prompts).
    Vectors(Var),
    Tokens(&'a [usize]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Bidirectional attention, only the summary row is returned.
    Summary,
    /// Bidirectional attention, every row returned.
    Full,
    /// Causal attention, every row returned.
    Causal,
}

/// Pre-norm transformer with parameters drawn once from a seeded stream and
/// never updated. Weights enter the tape as shared constants.
#[derive(Clone, Debug)]
pub struct FrozenSequenceEncoder {
    config: EncoderConfig,
    token_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<Block>,
}

impl FrozenSequenceEncoder {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let token_emb = gaussian(rng, config.vocab_size, d, 1.0);
        let pos_emb = gaussian(rng, config.max_len, d, 0.1);
        let s = 1.0 / (d as f64).sqrt();
        let s2 = 1.0 / ((4 * d) as f64).sqrt();
        let blocks = (0..config.depth)
            .map(|_| Block {
                wq: Arc::new(gaussian(rng, d, d, s)),
                wk: Arc::new(gaussian(rng, d, d, s)),
                wv: Arc::new(gaussian(rng, d, d, s)),
                wo: Arc::new(gaussian(rng, d, d, s)),
                w1: Arc::new(gaussian(rng, 4 * d, d, s)),
                w2: Arc::new(gaussian(rng, d, 4 * d, s2)),
            })
            .collect();
        Ok(Self { config, token_emb, pos_emb, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    /// Hex sha256 of every parameter byte.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.token_emb.to_le_bytes());
        h.update(self.pos_emb.to_le_bytes());
        for b in &self.blocks {
            for w in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
                h.update(w.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Runs the encoder over `[summary; segments...]`.
    ///
    /// Returns `[1, d]` in [`Mode::Summary`], otherwise `[n + 1, d]`.
    pub fn forward(&self, tape: &mut Tape, segments: &[Segment], mode: Mode) -> Result<Var> {
        let d = self.dim();
        let mut parts = Vec::with_capacity(segments.len() + 1);
        parts.push(tape.constant(self.embed_tokens(&[self.config.summary_id], 0)?));
        let mut pos = 1;
        for seg in segments {
            match *seg {
                Segment::Tokens(toks) => {
                    if toks.is_empty() {
                        continue;
                    }
                    parts.push(tape.constant(self.embed_tokens(toks, pos)?));
                    pos += toks.len();
                }
                Segment::Vectors(v) => {
                    let (n, w) = tape.shape(v);
                    if w != d {
                        return Err(shape_err("fuse_prompt", format!("vector segment width {w}, model width {d}")));
                    }
                    self.check_len(pos + n)?;
                    let p = tape.constant(self.positions(pos, n));
                    parts.push(tape.add(v, p)?);
                    pos += n;
                }
            }
        }
        let mut x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let n = pos;
        let mask = (mode == Mode::Causal && n > 1).then(|| tape.constant(causal_mask(n)));
        for (i, block) in self.blocks.iter().enumerate() {
            let last = i + 1 == self.blocks.len();
            let only_summary = last && mode == Mode::Summary;
            x = self.block(tape, block, x, only_summary, mask)?;
        }
        Ok(tape.layer_norm_rows(x))
    }

    /// Output with no gradient tracking, as a plain tensor.
    pub fn eval(&self, tokens: &[usize], mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &[Segment::Tokens(tokens)], mode)?;
        Ok(tape.value(out).clone())
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.config.max_len {
            return Err(Error::Invalid(format!("sequence of {n} positions exceeds max_len {}", self.config.max_len)));
        }
        Ok(())
    }

    fn positions(&self, start: usize, n: usize) -> Tensor {
        let d = self.dim();
        let data = self.pos_emb.data()[start * d..(start + n) * d].to_vec();
        Tensor::matrix(n, d, data).expect("position rows")
    }

    fn embed_tokens(&self, toks: &[usize], start: usize) -> Result<Tensor> {
        self.check_len(start + toks.len())?;
        let d = self.dim();
        let mut data = Vec::with_capacity(toks.len() * d);
        for (j, &t) in toks.iter().enumerate() {
            if t >= self.config.vocab_size {
                return Err(Error::Invalid(format!("token {t} outside vocabulary of {}", self.config.vocab_size)));
            }
            let p = self.pos_emb.row_slice(start + j);
            data.extend(self.token_emb.row_slice(t).iter().zip(p).map(|(a, b)| a + b));
        }
        Tensor::matrix(toks.len(), d, data)
    }

    fn block(&self, tape: &mut Tape, b: &Block, x: Var, only_summary: bool, mask: Option<Var>) -> Result<Var> {
        let d = self.dim();
        let heads = self.config.heads;
        let dh = d / heads;
        let a = tape.layer_norm_rows(x);
        let k = tape.linear_const(a, &b.wk)?;
        let v = tape.linear_const(a, &b.wv)?;
        let (x_q, a_q) = if only_summary {
            (tape.slice_rows(x, 0, 1)?, tape.slice_rows(a, 0, 1)?)
        } else {
            (x, a)
        };
        let q = tape.linear_const(a_q, &b.wq)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, h * dh, dh)?, tape.slice_cols(k, h * dh, dh)?, tape.slice_cols(v, h * dh, dh)?)
            };
            let s = tape.matmul_bt(qh, kh)?;
            let mut s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            if let (Some(m), false) = (mask, only_summary) {
                s = tape.add(s, m)?;
            }
            let p = tape.softmax_rows(s);
            outs.push(tape.matmul(p, vh)?);
        }
        let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let attn = tape.linear_const(o, &b.wo)?;
        let x1 = tape.add(x_q, attn)?;
        let m = tape.layer_norm_rows(x1);
        let hid = tape.linear_const(m, &b.w1)?;
        let hid = tape.gelu(hid);
        let mlp = tape.linear_const(hid, &b.w2)?;
        tape.add(x1, mlp)
    }
}

fn causal_mask(n: usize) -> Tensor {
    let mut t = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            t.set(i, j, -1e30);
        }
    }
    t
}

/// Keeps the newest `keep` tokens; the flag reports whether anything was cut.
pub fn truncate_left(tokens: &[usize], keep: usize) -> (&[usize], bool) {
    if tokens.len() > keep {
        (&tokens[tokens.len() - keep..], true)
    } else {
        (tokens, false)
    }
}

#[derive(Clone, Debug)]
pub struct ContextEncoding {
    /// `[n + 1, d]` per-position outputs, summary slot first.
    pub h_c: Tensor,
    /// `[1, d]` summary vector.
    pub h_cls: Tensor,
    pub truncated: bool,
}

/// Encodes a conversation; over-long input loses its oldest tokens.
pub fn encode_context(encoder: &FrozenSequenceEncoder, tokens: &[usize]) -> Result<ContextEncoding> {
    let (kept, truncated) = truncate_left(tokens, encoder.max_len() - 1);
    let h_c = encoder.eval(kept, Mode::Full)?;
    let h_cls = Tensor::row(h_c.row_slice(0).to_vec());
    Ok(ContextEncoding { h_c, h_cls, truncated })
}

/// Summary vector of every entity name, `[n_entities, d]`.
pub fn entity_semantic_table(encoder: &FrozenSequenceEncoder, names: &[Vec<usize>]) -> Result<Tensor> {
    if names.is_empty() {
        return Err(Error::Empty("entity names"));
    }
    let mut rows = Vec::with_capacity(names.len());
    for name in names {
        let (kept, _) = truncate_left(name, encoder.max_len() - 1);
        rows.push(encoder.eval(kept, Mode::Summary)?.into_data());
    }
    Tensor::from_rows(&rows)
}

/// Subtracts the column mean from every row.
///
/// Summaries of a random frozen encoder share one dominant direction, which
/// would otherwise swamp cosine comparisons between them.
pub fn center_rows(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut mean = vec![0.0; c];
    for i in 0..r {
        for (m, x) in mean.iter_mut().zip(t.row_slice(i)) {
            *m += x / r as f64;
        }
    }
    let mut out = t.clone();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        *x -= mean[i % c];
    }
    out
}

pub struct EntitySemantics {
    /// `[n, d]` semantic vectors of the mentioned entities.
    pub h_es: Var,
    /// `[1, d]` pooled proxy vector.
    pub h_p: Var,
}

/// Looks up the mentioned entities' semantic vectors and pools them.
pub fn encode_entities(ctx: &mut Ctx, table: &Tensor, pooler: &AttentionPooler, mentioned: &[usize]) -> Result<EntitySemantics> {
    if mentioned.is_empty() {
        return Err(Error::NoMentionedEntities);
    }
    let mut data = Vec::with_capacity(mentioned.len() * table.cols());
    for &e in mentioned {
        if e >= table.rows() {
            return Err(Error::Invalid(format!("entity {e} outside semantic table")));
        }
        data.extend_from_slice(table.row_slice(e));
    }
    let h_es = ctx.tape.constant(Tensor::matrix(mentioned.len(), table.cols(), data)?);
    let h_p = attention_pool(ctx, pooler, h_es)?.pooled;
    Ok(EntitySemantics { h_es, h_p })
}

/// Runs the fuser over the segments and returns its summary vector.
pub fn fuse_prompt(tape: &mut Tape, fuser: &FrozenSequenceEncoder, segments: &[Segment]) -> Result<Var> {
    fuser.forward(tape, segments, Mode::Summary)
}
