//! Contextual latent diffusion over sets of knowledge units: context
//! encoding, self-conditioned denoising, MSE + anchor training, and
//! `<eok>`-truncated generation.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{BOS, EOS};
use crate::corpus::{is_eok, parse_fact, FactTriple, KnowledgeUnit, NarrativeSample, RelationCatalog, Vocabulary};
use crate::embedder::{EmbeddingBlock, Embedder};
use crate::error::{Error, Result};
use crate::numkernel::{
    denoiser_stack, encoder_stack, init_denoiser, init_encoder, AdamW, DenoiseSegment, Grads, ModelConfig, ParamSource,
    ParameterStore, SeqBatch, Tape, Tensor, Var,
};
use crate::rng::{child_rng, derive_seed};
use crate::scalar::Scalar;
use crate::schedule::{adapt_schedule, AdaptiveState, LatentBlock, NoiseSchedule};

pub const CTX_PREFIX: &str = "diff.ctx.";
pub const DEN_PREFIX: &str = "diff.den.";
pub const SCHEDULE_FILE: &str = "schedule.json";

/// Diffusion model and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffuserConfig {
    pub model: ModelConfig,
    /// Slots per knowledge set, in training and generation. Gold sets are
    /// padded to this width with `<eok>` units.
    pub width: usize,
    /// Diffusion steps `T`.
    pub steps: usize,
    /// Offset `s` of the sqrt schedule.
    pub offset: f64,
    /// Forward-noise amplification `A`.
    pub amp: f64,
    /// Anchor-loss weight `γ`.
    pub gamma: f64,
    pub batch_size: usize,
    pub train_steps: u64,
    pub optim: AdamW,
    pub adapt_every: u64,
    pub self_cond_prob: f64,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for DiffuserConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            width: 16,
            steps: 2000,
            offset: 1e-4,
            amp: 4.0,
            gamma: 1.0,
            batch_size: 16,
            train_steps: 150_000,
            optim: AdamW::default(),
            adapt_every: crate::schedule::ADAPT_EVERY,
            self_cond_prob: 0.5,
            log_every: 100,
            seed: 0,
        }
    }
}

impl DiffuserConfig {
    /// Small model for synthetic corpora and tests.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig { d: 64, n_layers: 2, n_heads: 4, d_ff: 128, max_slots: 16, max_len: 64, dropout: 0.0 },
            width: 6,
            steps: 200,
            amp: 1.0,
            batch_size: 8,
            train_steps: 5000,
            optim: AdamW { lr: 1e-3, warmup: 200, total: 5000, clip: Some(1.0), ..AdamW::default() },
            log_every: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.width == 0 || self.width > self.model.max_slots {
            return Err(Error::Config(format!("width {} outside 1..={}", self.width, self.model.max_slots)));
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.self_cond_prob) {
            return Err(Error::Config("self_cond_prob outside [0,1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Sampling settings for one generation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub inference_steps: usize,
    /// Generation width; `None` uses the trained width.
    pub n_slots: Option<usize>,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { inference_steps: usize::MAX, n_slots: None, seed: 0 }
    }
}

/// One training example: context tokens and the token sequences of its gold
/// units (without `<eok>`).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub context: Vec<u32>,
    pub units: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub mse: f64,
    pub anchor: f64,
    pub total: f64,
}

/// Windowed loss means plus bookkeeping from a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_anchor: f64,
    pub points: Vec<LossPoint>,
    /// Indices of samples skipped because their set does not fit the width.
    pub skipped: Vec<usize>,
    pub schedule_updates: u64,
    pub skipped_updates: u64,
    /// Schedule after each adaptive update, tagged with the training step.
    #[serde(default)]
    pub schedule_snapshots: Vec<(u64, NoiseSchedule)>,
}

/// Output of one generation: decoded unit sequences before the first `<eok>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub units: Vec<Vec<u32>>,
    /// Decodes of every slot, including those at and after the first `<eok>`.
    pub slots: Vec<Vec<u32>>,
    pub steps_run: usize,
}

/// Parsed fact generation with the count of unparseable columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactGeneration {
    pub facts: Vec<FactTriple>,
    pub n_dropped: usize,
}

/// Context encoder + denoiser parameters, the training configuration and
/// the current noise schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Diffuser<T: Scalar> {
    params: ParameterStore<T>,
    cfg: DiffuserConfig,
    schedule: NoiseSchedule,
    vocab_size: usize,
}

struct Prepared<T> {
    context: Vec<u32>,
    e: Tensor<T>,
    targets: Vec<Vec<u32>>,
}

/// `<s> context </s>`, truncated to `max_len` tokens.
pub fn context_tokens(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<u32>> {
    let mut ids = vocab.encode_sentence(text);
    if ids.len() <= 2 {
        return Err(Error::Input("context has no tokens".into()));
    }
    if ids.len() > max_len {
        ids.truncate(max_len - 1);
        ids.push(EOS);
    }
    Ok(ids)
}

/// Fact-mode training items from narrative samples.
pub fn fact_items(samples: &[NarrativeSample], catalog: &RelationCatalog, vocab: &Vocabulary, max_len: usize) -> Result<Vec<TrainItem>> {
    samples
        .iter()
        .map(|s| {
            Ok(TrainItem {
                context: context_tokens(&s.context, vocab, max_len)?,
                units: s
                    .gold
                    .facts()
                    .iter()
                    .map(|k| KnowledgeUnit::Fact(k.clone()).tokens(catalog, vocab))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Descending step sequence of length `k` over `1..=T` with uniform stride.
pub fn step_sequence(total: usize, k: usize) -> Vec<usize> {
    let k = k.clamp(1, total);
    (0..k).map(|i| total - (i * total) / k).collect()
}

fn gaussian_block<T: Scalar, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

fn seq_hash_seed(seed: u64, tokens: &[u32]) -> u64 {
    let key: Vec<String> = tokens.iter().map(u32::to_string).collect();
    derive_seed(seed, &format!("generate:{}", key.join(",")))
}

impl<T: Scalar> Diffuser<T> {
    pub fn init(cfg: &DiffuserConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = child_rng(cfg.seed, "diffuser-init");
        let mut params = ParameterStore::new();
        init_encoder(&mut params, CTX_PREFIX, &cfg.model, vocab_size, &mut rng);
        init_denoiser(&mut params, DEN_PREFIX, &cfg.model, &mut rng);
        let schedule = NoiseSchedule::sqrt(cfg.steps, cfg.offset, cfg.amp)?;
        Ok(Self { params, cfg: cfg.clone(), schedule, vocab_size })
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    pub fn config(&self) -> &DiffuserConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn width(&self) -> usize {
        self.cfg.width
    }

    /// Context hidden states (`len × d`) for stacked contexts.
    fn encode_batch(&self, contexts: &[&[u32]]) -> Result<(Tensor<T>, Vec<Range<usize>>)> {
        let mut tape = Tape::eval();
        let src = ParamSource::frozen(&self.params);
        let batch = SeqBatch::new(contexts);
        let h = encoder_stack(&mut tape, &src, CTX_PREFIX, &self.cfg.model, &batch)?;
        Ok((tape.value(h).clone(), batch.segs))
    }

    /// Context encoding of one token sequence.
    pub fn encode_context(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::TokenOutOfRange { id: bad as usize, vocab: self.vocab_size });
        }
        Ok(self.encode_batch(&[tokens])?.0)
    }

    fn denoise_raw(&self, z_t: &Tensor<T>, z0_prev: &Tensor<T>, ctx: &Tensor<T>, segs: &[DenoiseSegment]) -> Result<Tensor<T>> {
        let mut tape = Tape::eval();
        let src = ParamSource::frozen(&self.params);
        let zt = tape.constant(z_t.clone());
        let zp = tape.constant(z0_prev.clone());
        let c = tape.constant(ctx.clone());
        let out = denoiser_stack(&mut tape, &src, DEN_PREFIX, &self.cfg.model, zt, zp, c, segs)?;
        Ok(tape.value(out).clone())
    }

    /// Self-conditioned prediction of the clean latent from `z_t`.
    pub fn denoise_step(&self, z0_prev: &LatentBlock<T>, z_t: &LatentBlock<T>, ctx: &Tensor<T>) -> Result<LatentBlock<T>> {
        if z0_prev.data.shape() != z_t.data.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", z0_prev.data.shape(), z_t.data.shape())));
        }
        let seg = DenoiseSegment { slots: 0..z_t.n_slots(), ctx: 0..ctx.rows(), t: z_t.t };
        let out = self.denoise_raw(&z_t.data, &z0_prev.data, ctx, &[seg])?;
        LatentBlock::new(out, z_t.t.saturating_sub(1))
    }

    fn prepare(&self, items: &[TrainItem], emb: &Embedder<T>, eok: &[u32], log: &mut TrainLog) -> Result<Vec<Prepared<T>>> {
        let w = self.cfg.width;
        let mut out = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if item.units.len() + 1 > w {
                eprintln!(
                    "warning: sample {i} has {} units; {} slots needed but width is {w}; skipped",
                    item.units.len(),
                    item.units.len() + 1
                );
                log.skipped.push(i);
                continue;
            }
            let mut targets = item.units.clone();
            targets.resize(w, eok.to_vec());
            let e = emb.embed_sequences(&targets)?;
            out.push(Prepared { context: item.context.clone(), e, targets });
        }
        Ok(out)
    }

    /// Loss terms and gradients for one batch.
    fn batch_grads<R: Rng>(
        &self,
        emb: &Embedder<T>,
        batch: &[&Prepared<T>],
        rng: &mut R,
        tape_seed: u64,
    ) -> Result<(Grads<T>, LossPoint, Vec<(usize, usize, f64)>)> {
        let w = self.cfg.width;
        let mut z0s = Vec::with_capacity(batch.len());
        let mut zts = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut ts = Vec::with_capacity(batch.len());
        for p in batch {
            let t = rng.gen_range(1..=self.cfg.steps);
            let z0 = emb.sample_z0(&EmbeddingBlock { data: p.e.clone() }, &self.schedule, rng)?;
            let zt = self.schedule.forward_jump(&z0, t, rng)?;
            targets.push(if t == 1 { p.e.clone() } else { z0.data.clone() });
            z0s.push(z0.data);
            zts.push(zt.data);
            ts.push(t);
        }
        let z0 = Tensor::stack_rows(&z0s.iter().collect::<Vec<_>>())?;
        let zt = Tensor::stack_rows(&zts.iter().collect::<Vec<_>>())?;
        let target = Tensor::stack_rows(&targets.iter().collect::<Vec<_>>())?;
        let contexts: Vec<&[u32]> = batch.iter().map(|p| p.context.as_slice()).collect();
        let ctx_batch = SeqBatch::new(&contexts);
        let segs: Vec<DenoiseSegment> = ctx_batch
            .segs
            .iter()
            .enumerate()
            .map(|(i, c)| DenoiseSegment { slots: i * w..(i + 1) * w, ctx: c.clone(), t: ts[i] })
            .collect();

        let z0_prev = if rng.gen::<f64>() < self.cfg.self_cond_prob {
            let (ctx, _) = self.encode_batch(&contexts)?;
            self.denoise_raw(&zt, &Tensor::zeros(zt.shape()), &ctx, &segs)?
        } else {
            Tensor::zeros(zt.shape())
        };

        let slot_targets: Vec<&[u32]> = batch.iter().flat_map(|p| p.targets.iter().map(Vec::as_slice)).collect();
        let inputs = ObjectiveBatch { contexts, z_t: zt, z0_prev, target, steps: ts.clone(), slot_targets };
        let mut tape = Tape::train(tape_seed);
        let src = ParamSource::trainable(&self.params);
        let terms = diffusion_objective(&mut tape, &src, &self.cfg, emb, &inputs)?;
        let (pred, total) = (terms.pred, terms.total);
        let mut point = LossPoint { mse: tape.value(terms.mse).item().as_f64(), ..Default::default() };
        if let Some(a) = terms.anchor {
            point.anchor = tape.value(a).item().as_f64();
        }
        point.total = tape.value(total).item().as_f64();
        if !point.total.is_finite() {
            return Err(Error::NonFinite("diffusion loss".into()));
        }
        let pv = tape.value(pred);
        let mut per_pos = Vec::with_capacity(batch.len() * w);
        for (i, &t) in ts.iter().enumerate() {
            for n in 0..w {
                let r = i * w + n;
                let l: f64 = pv.row(r).iter().zip(z0.row(r)).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
                per_pos.push((t, n, l));
            }
        }
        let grads = tape.backward(total)?;
        Ok((grads, point, per_pos))
    }

    fn anchor_probe(&self, emb: &Embedder<T>, data: &[Prepared<T>], seed: u64) -> Result<f64> {
        let mut rng = child_rng(seed, "diffuser-anchor-probe");
        let take: Vec<&Prepared<T>> = data.iter().take(self.cfg.batch_size.max(1)).collect();
        let (_, point, _) = self.batch_grads(emb, &take, &mut rng, 0)?;
        Ok(point.anchor)
    }

    /// Trains on `items` with the frozen `emb`; returns the loss log.
    pub fn train(&mut self, items: &[TrainItem], emb: &Embedder<T>, vocab: &Vocabulary, catalog: &RelationCatalog) -> Result<TrainLog> {
        if !emb.is_frozen() {
            return Err(Error::Config("the embedder must be frozen before diffusion training".into()));
        }
        if emb.dim() != self.cfg.model.d {
            return Err(Error::Config(format!("embedder width {} != diffuser width {}", emb.dim(), self.cfg.model.d)));
        }
        let eok = KnowledgeUnit::Eok.tokens(catalog, vocab)?;
        let mut log = TrainLog::default();
        let data = self.prepare(items, emb, &eok, &mut log)?;
        if data.is_empty() {
            return Err(Error::Input("no trainable samples".into()));
        }
        log.initial_anchor = self.anchor_probe(emb, &data, self.cfg.seed)?;
        let mut rng = child_rng(self.cfg.seed, "diffuser-train");
        let mut state = AdaptiveState::new(self.cfg.steps, self.cfg.width);
        state.cadence = self.cfg.adapt_every.max(1);
        let mut window = LossPoint::default();
        let mut in_window = 0u64;
        for step in 0..self.cfg.train_steps {
            let idx: Vec<usize> = (0..self.cfg.batch_size).map(|_| rng.gen_range(0..data.len())).collect();
            let batch: Vec<&Prepared<T>> = idx.iter().map(|&i| &data[i]).collect();
            let tape_seed = derive_seed(self.cfg.seed, &format!("diffuser-dropout-{step}"));
            let (grads, point, per_pos) = self.batch_grads(emb, &batch, &mut rng, tape_seed)?;
            self.cfg.optim.step(&mut self.params, &grads);
            for (t, n, l) in per_pos {
                state.record(t, n, l);
            }
            if state.tick() {
                self.schedule = adapt_schedule(&state, &self.schedule);
                state.reset();
                log.schedule_updates += 1;
                log.schedule_snapshots.push((step + 1, self.schedule.clone()));
            }
            window.mse += point.mse;
            window.anchor += point.anchor;
            window.total += point.total;
            in_window += 1;
            if in_window == self.cfg.log_every.max(1) || step + 1 == self.cfg.train_steps {
                let k = in_window as f64;
                log.points.push(LossPoint { step: step + 1, mse: window.mse / k, anchor: window.anchor / k, total: window.total / k });
                window = LossPoint::default();
                in_window = 0;
            }
        }
        log.skipped_updates = self.params.skipped_updates;
        Ok(log)
    }

    /// Generates unit sequences for a batch of contexts. Each context's
    /// randomness is derived from the seed and its tokens only, so results do
    /// not depend on batch composition.
    pub fn generate_batch(&self, contexts: &[Vec<u32>], emb: &Embedder<T>, gen: &GenerationConfig) -> Result<Vec<Generated>> {
        if contexts.is_empty() {
            return Ok(Vec::new());
        }
        let w = gen.n_slots.unwrap_or(self.cfg.width);
        if w == 0 || w > self.cfg.model.max_slots {
            return Err(Error::Config(format!("n_slots {w} outside 1..={}", self.cfg.model.max_slots)));
        }
        if gen.inference_steps == 0 {
            return Err(Error::Config("inference_steps must be at least 1".into()));
        }
        let d = self.cfg.model.d;
        let refs: Vec<&[u32]> = contexts.iter().map(Vec::as_slice).collect();
        for r in &refs {
            if let Some(&bad) = r.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::TokenOutOfRange { id: bad as usize, vocab: self.vocab_size });
            }
        }
        let (ctx, ctx_segs) = self.encode_batch(&refs)?;
        let mut rngs: Vec<_> = contexts.iter().map(|c| child_rng(seq_hash_seed(gen.seed, c), "noise")).collect();
        let amp = self.schedule.amp;
        let mut z_parts: Vec<Tensor<T>> = rngs.iter_mut().map(|r| gaussian_block(w, d, amp, r)).collect();
        let mut z0_prev = Tensor::zeros(&[w * contexts.len(), d]);
        let steps = step_sequence(self.cfg.steps, gen.inference_steps);
        for (i, &t) in steps.iter().enumerate() {
            let segs: Vec<DenoiseSegment> = ctx_segs
                .iter()
                .enumerate()
                .map(|(b, c)| DenoiseSegment { slots: b * w..(b + 1) * w, ctx: c.clone(), t })
                .collect();
            let z = Tensor::stack_rows(&z_parts.iter().collect::<Vec<_>>())?;
            let pred = self.denoise_raw(&z, &z0_prev, &ctx, &segs)?;
            if !pred.all_finite() {
                return Err(Error::NonFinite(format!("denoiser output at step {t}")));
            }
            if let Some(&next) = steps.get(i + 1) {
                for (b, rng) in rngs.iter_mut().enumerate() {
                    let rows: Vec<usize> = (b * w..(b + 1) * w).collect();
                    let block = LatentBlock::new(pred.select_rows(&rows), 0)?;
                    z_parts[b] = self.schedule.forward_jump(&block, next, rng)?.data;
                }
            }
            z0_prev = pred;
        }
        let decoded = emb.decode_rows(&z0_prev, emb.config().max_len)?;
        Ok(decoded
            .chunks(w)
            .map(|cols| {
                let units = cols.iter().take_while(|c| !is_eok(c)).cloned().collect();
                Generated { units, slots: cols.to_vec(), steps_run: steps.len() }
            })
            .collect())
    }

    /// Fact generation for several contexts; unparseable columns are dropped and counted.
    pub fn generate_facts_batch(
        &self,
        contexts: &[&str],
        emb: &Embedder<T>,
        vocab: &Vocabulary,
        catalog: &RelationCatalog,
        gen: &GenerationConfig,
    ) -> Result<Vec<FactGeneration>> {
        let toks = contexts
            .iter()
            .map(|c| context_tokens(c, vocab, self.cfg.model.max_len))
            .collect::<Result<Vec<_>>>()?;
        let out = self.generate_batch(&toks, emb, gen)?;
        Ok(out
            .into_iter()
            .map(|g| {
                let total = g.units.len();
                let facts: Vec<FactTriple> = g.units.iter().filter_map(|u| parse_fact(u, catalog, vocab)).collect();
                FactGeneration { n_dropped: total - facts.len(), facts }
            })
            .collect())
    }

    pub fn generate_facts(
        &self,
        context: &str,
        emb: &Embedder<T>,
        vocab: &Vocabulary,
        catalog: &RelationCatalog,
        gen: &GenerationConfig,
    ) -> Result<FactGeneration> {
        Ok(self.generate_facts_batch(&[context], emb, vocab, catalog, gen)?.remove(0))
    }

    /// Writes the parameters and the current schedule into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": "diffuser", "vocab_size": self.vocab_size, "diffuser": self.cfg });
        self.params.save(dir, &self.cfg.model, meta)?;
        self.schedule.save(&dir.join(SCHEDULE_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (params, _, meta) = ParameterStore::load(dir)?;
        let cfg: DiffuserConfig = serde_json::from_value(
            meta.get("diffuser").cloned().ok_or_else(|| Error::Config("checkpoint lacks diffuser config".into()))?,
        )?;
        let vocab_size = meta
            .get("vocab_size")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Config("checkpoint lacks vocab_size".into()))? as usize;
        let schedule = NoiseSchedule::load(&dir.join(SCHEDULE_FILE))?;
        schedule.validate()?;
        Ok(Self { params, cfg, schedule, vocab_size })
    }
}

/// A stacked training batch for [`diffusion_objective`]: `width` slot rows
/// per context.
pub struct ObjectiveBatch<'b, T: Scalar> {
    pub contexts: Vec<&'b [u32]>,
    pub z_t: Tensor<T>,
    /// Self-conditioning input (zeros when disabled).
    pub z0_prev: Tensor<T>,
    pub target: Tensor<T>,
    pub steps: Vec<usize>,
    /// Unit token sequences decoded by the anchor loss, one per slot.
    pub slot_targets: Vec<&'b [u32]>,
}

#[derive(Clone, Copy, Debug)]
pub struct ObjectiveTerms {
    pub pred: Var,
    pub mse: Var,
    pub anchor: Option<Var>,
    pub total: Var,
}

/// Context encoding, self-conditioned denoising, the slot-summed MSE and the
/// anchor loss through the frozen decoder, with diffuser parameters from `src`.
pub fn diffusion_objective<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    src: &ParamSource<'a, T>,
    cfg: &DiffuserConfig,
    emb: &'a Embedder<T>,
    b: &ObjectiveBatch<'_, T>,
) -> Result<ObjectiveTerms> {
    let w = cfg.width;
    if b.contexts.len() != b.steps.len() || b.z_t.rows() != w * b.contexts.len() {
        return Err(Error::Shape(format!(
            "{} contexts, {} steps, {} latent rows at width {w}",
            b.contexts.len(),
            b.steps.len(),
            b.z_t.rows()
        )));
    }
    let ctx_batch = SeqBatch::new(&b.contexts);
    let segs: Vec<DenoiseSegment> = ctx_batch
        .segs
        .iter()
        .enumerate()
        .map(|(i, c)| DenoiseSegment { slots: i * w..(i + 1) * w, ctx: c.clone(), t: b.steps[i] })
        .collect();
    let ctx = encoder_stack(tape, src, CTX_PREFIX, &cfg.model, &ctx_batch)?;
    let ztv = tape.constant(b.z_t.clone());
    let zpv = tape.constant(b.z0_prev.clone());
    let pred = denoiser_stack(tape, src, DEN_PREFIX, &cfg.model, ztv, zpv, ctx, &segs)?;
    // Mean over slots of the squared norm.
    let mse = tape.mse(pred, &b.target)?;
    let mse = tape.scale(mse, T::of(cfg.model.d as f64));
    if cfg.gamma > 0.0 {
        let anchor = emb.reconstruction_loss(tape, pred, &b.slot_targets, false)?;
        let weighted = tape.scale(anchor, T::of(cfg.gamma));
        let total = tape.add(mse, weighted)?;
        Ok(ObjectiveTerms { pred, mse, anchor: Some(anchor), total })
    } else {
        Ok(ObjectiveTerms { pred, mse, anchor: None, total: mse })
    }
}

/// Padding helper for callers assembling unit lists by hand.
pub fn eok_sequence() -> Vec<u32> {
    vec![BOS, crate::corpus::vocab::EOK, EOS]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::toy::{toy_kg, toy_narratives};
    use crate::embedder::{pretrain_embedder, PretrainConfig};

    #[test]
    fn step_sequences() {
        assert_eq!(step_sequence(10, 1), vec![10]);
        assert_eq!(step_sequence(10, 10), (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(step_sequence(10, 100), (1..=10).rev().collect::<Vec<_>>());
        let s = step_sequence(200, 7);
        assert_eq!(s.len(), 7);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s[0], 200);
    }

    fn tiny() -> (DiffuserConfig, PretrainConfig) {
        let model = ModelConfig { d: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_slots: 6, max_len: 32, dropout: 0.0 };
        let d = DiffuserConfig {
            model: model.clone(),
            width: 6,
            steps: 20,
            amp: 1.0,
            batch_size: 2,
            train_steps: 6,
            adapt_every: 3,
            log_every: 2,
            optim: AdamW { lr: 1e-3, warmup: 2, total: 6, ..AdamW::default() },
            ..DiffuserConfig::default()
        };
        let p = PretrainConfig { model, epochs: 2, ..PretrainConfig::default() };
        (d, p)
    }

    #[test]
    fn smoke_train_generate_and_reload() {
        let kg = toy_kg(40, 2, 3);
        let samples = toy_narratives(&kg, 4, 3);
        let cat = RelationCatalog::atomic();
        let vocab = Vocabulary::build(&samples, &kg, &cat, 1);
        let (dcfg, pcfg) = tiny();
        let (emb, _) = pretrain_embedder::<f32>(&kg, &cat, &vocab, &pcfg).unwrap();
        let before = emb.params().clone();
        let items = fact_items(&samples, &cat, &vocab, 32).unwrap();
        let mut m = Diffuser::<f32>::init(&dcfg, vocab.len()).unwrap();
        let log = m.train(&items, &emb, &vocab, &cat).unwrap();
        assert_eq!(emb.params(), &before, "embedder changed during diffusion training");
        assert_eq!(log.points.len(), 3);
        assert_eq!(log.schedule_updates, 2);
        m.schedule().validate().unwrap();

        let gen = GenerationConfig { inference_steps: 3, n_slots: None, seed: 9 };
        let a = m.generate_facts(&samples[0].context, &emb, &vocab, &cat, &gen).unwrap();
        let b = m.generate_facts(&samples[0].context, &emb, &vocab, &cat, &gen).unwrap();
        assert_eq!(a, b);
        assert!(a.facts.len() + a.n_dropped <= 6);
        let ctxs: Vec<&str> = samples.iter().map(|s| s.context.as_str()).collect();
        let batch = m.generate_facts_batch(&ctxs, &emb, &vocab, &cat, &gen).unwrap();
        assert_eq!(batch[0], a, "generation depends on batch composition");

        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = Diffuser::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.schedule(), m.schedule());
        let c = back.generate_facts(&samples[0].context, &emb, &vocab, &cat, &gen).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn oversized_sets_are_skipped() {
        let kg = toy_kg(40, 2, 3);
        let samples = toy_narratives(&kg, 3, 3);
        let cat = RelationCatalog::atomic();
        let vocab = Vocabulary::build(&samples, &kg, &cat, 1);
        let (mut dcfg, pcfg) = tiny();
        dcfg.width = 2;
        dcfg.train_steps = 1;
        let (emb, _) = pretrain_embedder::<f32>(&kg, &cat, &vocab, &pcfg).unwrap();
        let items = fact_items(&samples, &cat, &vocab, 32).unwrap();
        let mut m = Diffuser::<f32>::init(&dcfg, vocab.len()).unwrap();
        match m.train(&items, &emb, &vocab, &cat) {
            Ok(log) => assert!(!log.skipped.is_empty()),
            Err(Error::Input(_)) => {}
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn gamma_zero_drops_anchor_term() {
        let kg = toy_kg(20, 2, 3);
        let samples = toy_narratives(&kg, 2, 3);
        let cat = RelationCatalog::atomic();
        let vocab = Vocabulary::build(&samples, &kg, &cat, 1);
        let (mut dcfg, pcfg) = tiny();
        dcfg.gamma = 0.0;
        dcfg.train_steps = 2;
        let (emb, _) = pretrain_embedder::<f32>(&kg, &cat, &vocab, &pcfg).unwrap();
        let items = fact_items(&samples, &cat, &vocab, 32).unwrap();
        let mut m = Diffuser::<f32>::init(&dcfg, vocab.len()).unwrap();
        let log = m.train(&items, &emb, &vocab, &cat).unwrap();
        assert!(log.points.iter().all(|p| p.anchor == 0.0 && (p.total - p.mse).abs() < 1e-12));
    }

    #[test]
    fn denoise_step_shapes_and_determinism() {
        let (dcfg, _) = tiny();
        let m = Diffuser::<f32>::init(&dcfg, 30).unwrap();
        let ctx = m.encode_context(&[BOS, 7, 8, EOS]).unwrap();
        assert_eq!(ctx.shape(), &[4, 16]);
        let zt = LatentBlock::new(Tensor::filled(&[3, 16], 0.2f32), 5).unwrap();
        let zp = LatentBlock::zeros(3, 16);
        let a = m.denoise_step(&zp, &zt, &ctx).unwrap();
        assert_eq!(a.data.shape(), &[3, 16]);
        assert_eq!(a.t, 4);
        assert_eq!(a, m.denoise_step(&zp, &zt, &ctx).unwrap());
        assert!(m.denoise_step(&LatentBlock::zeros(2, 16), &zt, &ctx).is_err());
    }
}
