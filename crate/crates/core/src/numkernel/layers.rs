//! Transformer stacks built on the tape: a bidirectional encoder, a causal
//! decoder with cross-attention, and the slot denoiser.
//!
//! All stacks use pre-layer-norm residual blocks. Sequences of a batch are
//! stacked row-wise; attention never crosses segment boundaries.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkernel::params::{ModelConfig, ParameterStore};
use crate::numkernel::tape::{AttnSegment, Tape, Var};
use crate::numkernel::tensor::Tensor;
use crate::scalar::Scalar;

/// Read access to one parameter namespace.
#[derive(Clone, Copy)]
pub struct ParamSource<'a, T: Scalar> {
    pub store: &'a ParameterStore<T>,
    pub trainable: bool,
}

impl<'a, T: Scalar> ParamSource<'a, T> {
    pub fn trainable(store: &'a ParameterStore<T>) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParameterStore<T>) -> Self {
        Self { store, trainable: false }
    }

    pub fn get(&self, tape: &mut Tape<'a, T>, name: &str) -> Result<Var> {
        let t = self.store.get(name)?;
        Ok(tape.param(name, t, self.trainable))
    }
}

/// Token sequences stacked for one batched forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeqBatch {
    pub ids: Vec<usize>,
    pub segs: Vec<Range<usize>>,
}

impl SeqBatch {
    pub fn new<S: AsRef<[u32]>>(seqs: &[S]) -> Self {
        let mut ids = Vec::new();
        let mut segs = Vec::with_capacity(seqs.len());
        for s in seqs {
            let start = ids.len();
            ids.extend(s.as_ref().iter().map(|&t| t as usize));
            segs.push(start..ids.len());
        }
        Self { ids, segs }
    }

    pub fn positions(&self) -> Vec<usize> {
        let mut pos = Vec::with_capacity(self.ids.len());
        for s in &self.segs {
            pos.extend(0..s.len());
        }
        pos
    }

    /// Row index of the first token of every segment.
    pub fn starts(&self) -> Vec<usize> {
        self.segs.iter().map(|s| s.start).collect()
    }

    pub fn self_segments(&self) -> Vec<AttnSegment> {
        self.segs.iter().map(|s| AttnSegment { q: s.clone(), k: s.clone() }).collect()
    }
}

fn linear<'a, T: Scalar>(tape: &mut Tape<'a, T>, src: &ParamSource<'a, T>, prefix: &str, x: Var) -> Result<Var> {
    let w = src.get(tape, &format!("{prefix}.w"))?;
    let b = src.get(tape, &format!("{prefix}.b"))?;
    tape.linear(x, w, Some(b))
}

fn layer_norm<'a, T: Scalar>(tape: &mut Tape<'a, T>, src: &ParamSource<'a, T>, prefix: &str, x: Var) -> Result<Var> {
    let g = src.get(tape, &format!("{prefix}.g"))?;
    let b = src.get(tape, &format!("{prefix}.b"))?;
    tape.layer_norm(x, g, b)
}

fn init_attention<T: Scalar, R: Rng>(store: &mut ParameterStore<T>, prefix: &str, d: usize, out_gain: f64, rng: &mut R) {
    store.init_layer_norm(&format!("{prefix}.ln"), d);
    for p in ["q", "k", "v"] {
        store.init_linear(&format!("{prefix}.{p}"), d, d, 1.0, rng);
    }
    store.init_linear(&format!("{prefix}.o"), d, d, out_gain, rng);
}

fn init_ffn<T: Scalar, R: Rng>(store: &mut ParameterStore<T>, prefix: &str, d: usize, d_ff: usize, out_gain: f64, rng: &mut R) {
    store.init_layer_norm(&format!("{prefix}.ln"), d);
    store.init_linear(&format!("{prefix}.w1"), d, d_ff, 1.0, rng);
    store.init_linear(&format!("{prefix}.w2"), d_ff, d, out_gain, rng);
}

#[allow(clippy::too_many_arguments)]
fn attention_block<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    src: &ParamSource<'a, T>,
    prefix: &str,
    x: Var,
    memory: Option<Var>,
    segs: &[AttnSegment],
    cfg: &ModelConfig,
    causal: bool,
) -> Result<Var> {
    let h = layer_norm(tape, src, &format!("{prefix}.ln"), x)?;
    let kv_in = memory.unwrap_or(h);
    let q = linear(tape, src, &format!("{prefix}.q"), h)?;
    let k = linear(tape, src, &format!("{prefix}.k"), kv_in)?;
    let v = linear(tape, src, &format!("{prefix}.v"), kv_in)?;
    let a = tape.attention(q, k, v, segs, cfg.n_heads, causal)?;
    let o = linear(tape, src, &format!("{prefix}.o"), a)?;
    let o = tape.dropout(o, cfg.dropout);
    tape.add(x, o)
}

fn ffn_block<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    src: &ParamSource<'a, T>,
    prefix: &str,
    x: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let h = layer_norm(tape, src, &format!("{prefix}.ln"), x)?;
    let h = linear(tape, src, &format!("{prefix}.w1"), h)?;
    let h = tape.gelu(h);
    let h = linear(tape, src, &format!("{prefix}.w2"), h)?;
    let h = tape.dropout(h, cfg.dropout);
    tape.add(x, h)
}

fn embed_tokens<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    src: &ParamSource<'a, T>,
    prefix: &str,
    batch: &SeqBatch,
    cfg: &ModelConfig,
) -> Result<Var> {
    let tok = src.get(tape, &format!("{prefix}tok"))?;
    let pos = src.get(tape, &format!("{prefix}pos"))?;
    let positions = batch.positions();
    if let Some(&p) = positions.iter().max() {
        if p >= cfg.max_len {
            return Err(Error::Input(format!("sequence of {} tokens exceeds max_len {}", p + 1, cfg.max_len)));
        }
    }
    let e = tape.gather(tok, &batch.ids)?;
    let p = tape.gather(pos, &positions)?;
    let x = tape.add(e, p)?;
    Ok(tape.dropout(x, cfg.dropout))
}

fn out_gain(cfg: &ModelConfig) -> f64 {
    1.0 / (2.0 * cfg.n_layers.max(1) as f64).sqrt()
}

/// Bidirectional self-attention encoder: `{prefix}tok`, `{prefix}pos`,
/// `{prefix}l{i}.*`, `{prefix}lnf`.
pub fn init_encoder<T: Scalar, R: Rng>(store: &mut ParameterStore<T>, prefix: &str, cfg: &ModelConfig, vocab: usize, rng: &mut R) {
    let d = cfg.d;
    store.init_normal(&format!("{prefix}tok"), &[vocab, d], 0.3, rng);
    store.init_normal(&format!("{prefix}pos"), &[cfg.max_len, d], 0.1, rng);
    for l in 0..cfg.n_layers {
        init_attention(store, &format!("{prefix}l{l}.sa"), d, out_gain(cfg), rng);
        init_ffn(store, &format!("{prefix}l{l}.ff"), d, cfg.d_ff, out_gain(cfg), rng);
    }
    store.init_layer_norm(&format!("{prefix}lnf"), d);
}

/// Hidden states (`total tokens × d`) for every token of `batch`.
pub fn encoder_stack<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    src: &ParamSource<'a, T>,
    prefix: &str,
    cfg: &ModelConfig,
    batch: &SeqBatch,
) -> Result<Var> {
    let segs = batch.self_segments();
    let mut x = embed_tokens(tape, src, prefix, batch, cfg)?;
    for l in 0..cfg.n_layers {
        x = attention_block(tape, src, &format!("{prefix}l{l}.sa"), x, None, &segs, cfg, false)?;
        x = ffn_block(tape, src, &format!("{prefix}l{l}.ff"), x, cfg)?;
    }
    layer_norm(tape, src, &format!("{prefix}lnf"), x)
}

/// Causal decoder with cross-attention and an output projection to the
/// vocabulary: adds `{prefix}l{i}.ca.*` and `{prefix}out` to the encoder names.
pub fn init_decoder<T: Scalar, R: Rng>(store: &mut ParameterStore<T>, prefix: &str, cfg: &ModelConfig, vocab: usize, rng: &mut R) {
    let d = cfg.d;
    store.init_normal(&format!("{prefix}tok"), &[vocab, d], 0.3, rng);
    store.init_normal(&format!("{prefix}pos"), &[cfg.max_len, d], 0.1, rng);
    for l in 0..cfg.n_layers {
        init_attention(store, &format!("{prefix}l{l}.sa"), d, out_gain(cfg), rng);
        init_attention(store, &format!("{prefix}l{l}.ca"), d, out_gain(cfg), rng);
        init_ffn(store, &format!("{prefix}l{l}.ff"), d, cfg.d_ff, out_gain(cfg), rng);
    }
    store.init_layer_norm(&format!("{prefix}lnf"), d);
    store.init_linear(&format!("{prefix}out"), d, vocab, 1.0, rng);
}

/// Vocabulary logits for every input token. `memory_segs[i]` lists the rows
/// of `memory` visible to sequence `i`.
pub fn decoder_stack<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    src: &ParamSource<'a, T>,
    prefix: &str,
    cfg: &ModelConfig,
    batch: &SeqBatch,
    memory: Var,
    memory_segs: &[Range<usize>],
) -> Result<Var> {
    if memory_segs.len() != batch.segs.len() {
        return Err(Error::Shape(format!(
            "{} decoder sequences but {} memory segments",
            batch.segs.len(),
            memory_segs.len()
        )));
    }
    let self_segs = batch.self_segments();
    let cross: Vec<AttnSegment> = batch
        .segs
        .iter()
        .zip(memory_segs)
        .map(|(q, k)| AttnSegment { q: q.clone(), k: k.clone() })
        .collect();
    let mut x = embed_tokens(tape, src, prefix, batch, cfg)?;
    for l in 0..cfg.n_layers {
        x = attention_block(tape, src, &format!("{prefix}l{l}.sa"), x, None, &self_segs, cfg, true)?;
        x = attention_block(tape, src, &format!("{prefix}l{l}.ca"), x, Some(memory), &cross, cfg, false)?;
        x = ffn_block(tape, src, &format!("{prefix}l{l}.ff"), x, cfg)?;
    }
    let x = layer_norm(tape, src, &format!("{prefix}lnf"), x)?;
    linear(tape, src, &format!("{prefix}out"), x)
}

/// Sinusoidal encoding of a scalar position (used for diffusion steps).
pub fn sinusoid<T: Scalar>(t: f64, d: usize) -> Vec<T> {
    let half = d / 2;
    let mut out = vec![T::zero(); d];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = T::of((t * freq).sin());
        out[i + half] = T::of((t * freq).cos());
    }
    out
}

/// Slot denoiser: joint projection of `[z_t ; ẑ_0]`, step embedding,
/// slot-position embedding, then bidirectional self-attention blocks with
/// cross-attention to the context encoding.
pub fn init_denoiser<T: Scalar, R: Rng>(store: &mut ParameterStore<T>, prefix: &str, cfg: &ModelConfig, rng: &mut R) {
    let d = cfg.d;
    store.init_linear(&format!("{prefix}in1"), 2 * d, d, 1.0, rng);
    store.init_linear(&format!("{prefix}in2"), d, d, 1.0, rng);
    store.init_linear(&format!("{prefix}time"), d, d, 1.0, rng);
    store.init_normal(&format!("{prefix}slot"), &[cfg.max_slots, d], 0.1, rng);
    for l in 0..cfg.n_layers {
        init_attention(store, &format!("{prefix}l{l}.sa"), d, out_gain(cfg), rng);
        init_attention(store, &format!("{prefix}l{l}.ca"), d, out_gain(cfg), rng);
        init_ffn(store, &format!("{prefix}l{l}.ff"), d, cfg.d_ff, out_gain(cfg), rng);
    }
    store.init_layer_norm(&format!("{prefix}lnf"), d);
    store.init_linear(&format!("{prefix}out"), d, d, 1.0, rng);
}

/// One block of slots to denoise: rows `slots` of the stacked latents and
/// rows `ctx` of the stacked context encoding, at diffusion step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseSegment {
    pub slots: Range<usize>,
    pub ctx: Range<usize>,
    pub t: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn denoiser_stack<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    src: &ParamSource<'a, T>,
    prefix: &str,
    cfg: &ModelConfig,
    z_t: Var,
    z0_prev: Var,
    ctx: Var,
    segs: &[DenoiseSegment],
) -> Result<Var> {
    let (zt, zp) = (tape.value(z_t), tape.value(z0_prev));
    if zt.shape() != zp.shape() || zt.cols() != cfg.d {
        return Err(Error::Shape(format!(
            "denoiser inputs {:?} and {:?} for d={}",
            zt.shape(),
            zp.shape(),
            cfg.d
        )));
    }
    let rows = zt.rows();
    let mut slot_pos = vec![0usize; rows];
    let mut time = vec![T::zero(); rows * cfg.d];
    for s in segs {
        if s.slots.len() > cfg.max_slots {
            return Err(Error::SlotOverflow { index: 0, needed: s.slots.len(), max: cfg.max_slots });
        }
        let emb = sinusoid::<T>(s.t as f64, cfg.d);
        for (i, r) in s.slots.clone().enumerate() {
            slot_pos[r] = i;
            time[r * cfg.d..(r + 1) * cfg.d].copy_from_slice(&emb);
        }
    }
    let joint = tape.concat_cols(&[z_t, z0_prev])?;
    let h = linear(tape, src, &format!("{prefix}in1"), joint)?;
    let h = tape.gelu(h);
    let h = linear(tape, src, &format!("{prefix}in2"), h)?;
    let time = tape.constant(Tensor::matrix(rows, cfg.d, time)?);
    let time = linear(tape, src, &format!("{prefix}time"), time)?;
    let h = tape.add(h, time)?;
    let slot_table = src.get(tape, &format!("{prefix}slot"))?;
    let sp = tape.gather(slot_table, &slot_pos)?;
    let mut x = tape.add(h, sp)?;
    let self_segs: Vec<AttnSegment> = segs.iter().map(|s| AttnSegment { q: s.slots.clone(), k: s.slots.clone() }).collect();
    let cross: Vec<AttnSegment> = segs.iter().map(|s| AttnSegment { q: s.slots.clone(), k: s.ctx.clone() }).collect();
    for l in 0..cfg.n_layers {
        x = attention_block(tape, src, &format!("{prefix}l{l}.sa"), x, None, &self_segs, cfg, false)?;
        x = attention_block(tape, src, &format!("{prefix}l{l}.ca"), x, Some(ctx), &cross, cfg, false)?;
        x = ffn_block(tape, src, &format!("{prefix}l{l}.ff"), x, cfg)?;
    }
    let x = layer_norm(tape, src, &format!("{prefix}lnf"), x)?;
    linear(tape, src, &format!("{prefix}out"), x)
}

/// Encoder pass over a single token sequence; returns `len × d` states.
pub fn encoder_forward<T: Scalar>(
    tokens: &[u32],
    params: &ParameterStore<T>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let vocab = params.get(&format!("{prefix}tok"))?.rows();
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenOutOfRange { id: bad as usize, vocab });
    }
    let mut tape = Tape::eval();
    let src = ParamSource::frozen(params);
    let batch = SeqBatch::new(&[tokens]);
    let out = encoder_stack(&mut tape, &src, prefix, cfg, &batch)?;
    Ok(tape.value(out).clone())
}

/// Single-block denoiser pass: `z_t` and `z0_prev` are `N × d` slot rows,
/// `ctx` the `len × d` context encoding.
pub fn denoiser_forward<T: Scalar>(
    z_t: &Tensor<T>,
    z0_prev: &Tensor<T>,
    t: usize,
    ctx: &Tensor<T>,
    params: &ParameterStore<T>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    if z_t.shape() != z0_prev.shape() {
        return Err(Error::Shape(format!("z_t {:?} vs z0_prev {:?}", z_t.shape(), z0_prev.shape())));
    }
    if z_t.rows() > cfg.max_slots {
        return Err(Error::SlotOverflow { index: 0, needed: z_t.rows(), max: cfg.max_slots });
    }
    let mut tape = Tape::eval();
    let src = ParamSource::frozen(params);
    let zt = tape.constant(z_t.clone());
    let zp = tape.constant(z0_prev.clone());
    let c = tape.constant(ctx.clone());
    let seg = DenoiseSegment { slots: 0..z_t.rows(), ctx: 0..ctx.rows(), t };
    let out = denoiser_stack(&mut tape, &src, prefix, cfg, zt, zp, c, &[seg])?;
    Ok(tape.value(out).clone())
}
