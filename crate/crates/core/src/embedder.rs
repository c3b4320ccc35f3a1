//! Context-independent unit embeddings: an encoder maps a verbalized fact
//! (or entity) to one vector, a decoder reconstructs it from that vector.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{BOS, EOS};
use crate::corpus::{strip_markers, KnowledgeSet, KnowledgeUnit, RelationCatalog, Vocabulary};
use crate::error::{Error, Result};
use crate::numkernel::{
    decoder_stack, encoder_stack, init_decoder, init_encoder, AdamW, ModelConfig, ParamSource, ParameterStore, SeqBatch,
    Tape, Tensor, Var,
};
use crate::rng::{child_rng, derive_seed};
use crate::scalar::Scalar;
use crate::schedule::{LatentBlock, NoiseSchedule};

pub const ENC_PREFIX: &str = "embed.enc.";
pub const DEC_PREFIX: &str = "embed.dec.";
const EVAL_CHUNK: usize = 128;

/// Embeddings of the units of one knowledge set, one row per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBlock<T> {
    pub data: Tensor<T>,
}

impl<T: Scalar> EmbeddingBlock<T> {
    pub fn new(data: Tensor<T>, max_slots: usize) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::Shape(format!("embedding block must be 2-d, got {:?}", data.shape())));
        }
        if data.rows() > max_slots {
            return Err(Error::SlotOverflow { index: 0, needed: data.rows(), max: max_slots });
        }
        if !data.all_finite() {
            return Err(Error::NonFinite("embedding block".into()));
        }
        Ok(Self { data })
    }

    pub fn n_slots(&self) -> usize {
        self.data.rows()
    }
}

/// Embedder pretraining hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamW,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig { d: 64, n_layers: 1, n_heads: 4, d_ff: 128, max_slots: 16, max_len: 32, dropout: 0.0 },
            epochs: 60,
            batch_size: 16,
            optim: AdamW { lr: 3e-3, warmup: 50, total: 100_000, clip: Some(1.0), ..AdamW::default() },
            seed: 0,
        }
    }
}

/// Loss at initialization and the mean training loss of every epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub skipped_updates: u64,
}

/// Encoder/decoder pair. Once frozen there is no way to mutate its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedder<T: Scalar> {
    params: ParameterStore<T>,
    cfg: ModelConfig,
    vocab_size: usize,
    frozen: bool,
}

fn teacher_forcing(seqs: &[&[u32]]) -> (Vec<Vec<u32>>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut targets = Vec::new();
    for s in seqs {
        let n = s.len().saturating_sub(1).max(1);
        inputs.push(s[..n].to_vec());
        targets.extend(s[1..=n.min(s.len() - 1)].iter().map(|&t| t as usize));
    }
    (inputs, targets)
}

/// Encoder pass reading parameters from `src`: the `<s>` row of each sequence.
pub fn encode_with<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    src: &ParamSource<'a, T>,
    cfg: &ModelConfig,
    seqs: &[&[u32]],
) -> Result<Var> {
    let batch = SeqBatch::new(seqs);
    let h = encoder_stack(tape, src, ENC_PREFIX, cfg, &batch)?;
    tape.gather(h, &batch.starts())
}

/// Teacher-forced decoder cross-entropy of `targets[i]` given memory row `i`.
pub fn decode_loss_with<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    src: &ParamSource<'a, T>,
    cfg: &ModelConfig,
    memory: Var,
    targets: &[&[u32]],
) -> Result<Var> {
    let (inputs, gold) = teacher_forcing(targets);
    let batch = SeqBatch::new(&inputs);
    let mem_segs: Vec<_> = (0..targets.len()).map(|i| i..i + 1).collect();
    let logits = decoder_stack(tape, src, DEC_PREFIX, cfg, &batch, memory, &mem_segs)?;
    tape.cross_entropy(logits, &gold)
}

impl<T: Scalar> Embedder<T> {
    /// Randomly initialized, trainable embedder.
    pub fn init(cfg: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = child_rng(seed, "embedder-init");
        let mut params = ParameterStore::new();
        init_encoder(&mut params, ENC_PREFIX, cfg, vocab_size, &mut rng);
        init_decoder(&mut params, DEC_PREFIX, cfg, vocab_size, &mut rng);
        Ok(Self { params, cfg: cfg.clone(), vocab_size, frozen: false })
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.d
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self.params.moments.clear();
        self
    }

    fn check_tokens(&self, seq: &[u32]) -> Result<()> {
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::TokenOutOfRange { id: bad as usize, vocab: self.vocab_size });
        }
        if seq.is_empty() || seq.len() > self.cfg.max_len {
            return Err(Error::Input(format!("sequence length {} outside 1..={}", seq.len(), self.cfg.max_len)));
        }
        Ok(())
    }

    /// `<s>` hidden states for a batch on an existing tape (one row per sequence).
    pub fn encode_on_tape<'a>(&'a self, tape: &mut Tape<'a, T>, seqs: &[&[u32]], trainable: bool) -> Result<Var> {
        for s in seqs {
            self.check_tokens(s)?;
        }
        let src = ParamSource { store: &self.params, trainable: trainable && !self.frozen };
        encode_with(tape, &src, &self.cfg, seqs)
    }

    /// Mean token cross-entropy of reconstructing `targets[i]` from memory row `i`.
    pub fn reconstruction_loss<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        memory: Var,
        targets: &[&[u32]],
        trainable: bool,
    ) -> Result<Var> {
        if tape.value(memory).rows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} memory rows for {} targets",
                tape.value(memory).rows(),
                targets.len()
            )));
        }
        for s in targets {
            self.check_tokens(s)?;
            if s.len() < 2 {
                return Err(Error::Input("reconstruction target needs at least two tokens".into()));
            }
        }
        let src = ParamSource { store: &self.params, trainable: trainable && !self.frozen };
        decode_loss_with(tape, &src, &self.cfg, memory, targets)
    }

    /// Embeddings (`n × d`) of token sequences.
    pub fn embed_sequences(&self, seqs: &[Vec<u32>]) -> Result<Tensor<T>> {
        let mut parts = Vec::new();
        for chunk in seqs.chunks(EVAL_CHUNK) {
            let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
            let mut tape = Tape::eval();
            let e = self.encode_on_tape(&mut tape, &refs, false)?;
            parts.push(tape.value(e).clone());
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, self.cfg.d]));
        }
        Tensor::stack_rows(&parts.iter().collect::<Vec<_>>())
    }

    pub fn embed_unit(&self, unit: &KnowledgeUnit, catalog: &RelationCatalog, vocab: &Vocabulary) -> Result<Vec<T>> {
        let ids = unit.tokens(catalog, vocab)?;
        Ok(self.embed_sequences(&[ids])?.into_data())
    }

    pub fn embed_units(&self, units: &[KnowledgeUnit], catalog: &RelationCatalog, vocab: &Vocabulary) -> Result<Tensor<T>> {
        let seqs = units.iter().map(|u| u.tokens(catalog, vocab)).collect::<Result<Vec<_>>>()?;
        self.embed_sequences(&seqs)
    }

    /// Greedy decoding of every row of `rows`. Outputs start with `<s>` and
    /// stop after `</s>` or at `max_len` tokens.
    pub fn decode_rows(&self, rows: &Tensor<T>, max_len: usize) -> Result<Vec<Vec<u32>>> {
        if rows.cols() != self.cfg.d {
            return Err(Error::Shape(format!("decode expects width {}, got {}", self.cfg.d, rows.cols())));
        }
        let max_len = max_len.clamp(1, self.cfg.max_len);
        let n = rows.rows();
        let mut out: Vec<Vec<u32>> = vec![vec![BOS]; n];
        let mut active: Vec<usize> = (0..n).collect();
        while !active.is_empty() {
            active.retain(|&i| out[i].len() < max_len && out[i].last() != Some(&EOS));
            if active.is_empty() {
                break;
            }
            for chunk in active.chunks(EVAL_CHUNK) {
                let mut tape = Tape::eval();
                let mem = tape.constant(rows.select_rows(chunk));
                let seqs: Vec<&[u32]> = chunk.iter().map(|&i| out[i].as_slice()).collect();
                let batch = SeqBatch::new(&seqs);
                let segs: Vec<_> = (0..chunk.len()).map(|i| i..i + 1).collect();
                let src = ParamSource::frozen(&self.params);
                let logits = decoder_stack(&mut tape, &src, DEC_PREFIX, &self.cfg, &batch, mem, &segs)?;
                let lv = tape.value(logits);
                let next: Vec<u32> = batch
                    .segs
                    .iter()
                    .map(|s| {
                        let row = lv.row(s.end - 1);
                        let mut best = 0;
                        for (j, v) in row.iter().enumerate() {
                            if *v > row[best] {
                                best = j;
                            }
                        }
                        best as u32
                    })
                    .collect();
                for (&i, tok) in chunk.iter().zip(next) {
                    out[i].push(tok);
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, e: &[T], max_len: usize) -> Result<Vec<u32>> {
        let rows = Tensor::matrix(1, e.len(), e.to_vec())?;
        Ok(self.decode_rows(&rows, max_len)?.remove(0))
    }

    /// Fraction of sequences whose embed→decode round trip reproduces them.
    pub fn reconstruction_rate(&self, seqs: &[Vec<u32>]) -> Result<f64> {
        if seqs.is_empty() {
            return Ok(1.0);
        }
        let e = self.embed_sequences(seqs)?;
        let decoded = self.decode_rows(&e, self.cfg.max_len)?;
        let ok = seqs.iter().zip(&decoded).filter(|(a, b)| strip_markers(a) == strip_markers(b)).count();
        Ok(ok as f64 / seqs.len() as f64)
    }

    /// `z_0 ~ N(e, β_0·I)` row-wise.
    pub fn sample_z0<R: Rng>(&self, block: &EmbeddingBlock<T>, sched: &NoiseSchedule, rng: &mut R) -> Result<LatentBlock<T>> {
        if block.n_slots() > self.cfg.max_slots {
            return Err(Error::SlotOverflow { index: 0, needed: block.n_slots(), max: self.cfg.max_slots });
        }
        let mut z = block.data.clone();
        for n in 0..z.rows() {
            let std = sched.beta(0, n).sqrt();
            for v in z.row_mut(n) {
                *v = T::of(v.as_f64() + std * rng.sample::<f64, _>(StandardNormal));
            }
        }
        LatentBlock::new(z, 0)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": "embedder", "vocab_size": self.vocab_size });
        self.params.save(dir, &self.cfg, meta)
    }

    /// Loads a checkpoint; the result is frozen.
    pub fn load(dir: &Path) -> Result<Self> {
        let (params, cfg, meta) = ParameterStore::load(dir)?;
        let vocab_size = meta
            .get("vocab_size")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Config("embedder checkpoint lacks vocab_size".into()))? as usize;
        let want = format!("{ENC_PREFIX}tok");
        if !params.contains(&want) {
            return Err(Error::MissingParameter(want));
        }
        Ok(Self { params, cfg, vocab_size, frozen: true })
    }

    fn mean_loss(&self, seqs: &[Vec<u32>], batch_size: usize) -> Result<f64> {
        let mut total = 0.0;
        for chunk in seqs.chunks(batch_size.max(1)) {
            let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
            let mut tape = Tape::eval();
            let e = self.encode_on_tape(&mut tape, &refs, false)?;
            let l = self.reconstruction_loss(&mut tape, e, &refs, false)?;
            total += tape.value(l).item().as_f64() * chunk.len() as f64;
        }
        Ok(total / seqs.len() as f64)
    }
}

/// Jointly trains encoder and decoder to reconstruct `seqs` (each starting
/// with `<s>` and ending with `</s>`); returns the frozen embedder.
pub fn pretrain_sequences<T: Scalar>(
    seqs: &[Vec<u32>],
    vocab_size: usize,
    cfg: &PretrainConfig,
) -> Result<(Embedder<T>, PretrainReport)> {
    if seqs.is_empty() {
        return Err(Error::Input("embedder pretraining needs at least one unit".into()));
    }
    let mut model = Embedder::<T>::init(&cfg.model, vocab_size, cfg.seed)?;
    let mut report = PretrainReport { initial_loss: model.mean_loss(seqs, cfg.batch_size)?, ..Default::default() };
    let mut rng = child_rng(cfg.seed, "embedder-shuffle");
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let refs: Vec<&[u32]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
            let grads = {
                let mut tape = Tape::train(derive_seed(cfg.seed, &format!("embedder-dropout-{epoch}-{b}")));
                let e = model.encode_on_tape(&mut tape, &refs, true)?;
                let loss = model.reconstruction_loss(&mut tape, e, &refs, true)?;
                let v = tape.value(loss).item().as_f64();
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("reconstruction loss at epoch {epoch}")));
                }
                sum += v * chunk.len() as f64;
                count += chunk.len();
                tape.backward(loss)?
            };
            cfg.optim.step(&mut model.params, &grads);
        }
        report.epoch_losses.push(sum / count as f64);
    }
    report.skipped_updates = model.params.skipped_updates;
    Ok((model.freeze(), report))
}

/// Token sequences of every fact in `kg`, followed by the `<eok>` pseudo-fact.
pub fn fact_sequences(kg: &KnowledgeSet, catalog: &RelationCatalog, vocab: &Vocabulary) -> Result<Vec<Vec<u32>>> {
    let mut seqs: Vec<Vec<u32>> =
        kg.facts().iter().map(|k| KnowledgeUnit::Fact(k.clone()).tokens(catalog, vocab)).collect::<Result<_>>()?;
    seqs.push(KnowledgeUnit::Eok.tokens(catalog, vocab)?);
    Ok(seqs)
}

/// Token sequences of entity strings, followed by `<eok>`.
pub fn entity_sequences<S: AsRef<str>>(entities: &[S], catalog: &RelationCatalog, vocab: &Vocabulary) -> Result<Vec<Vec<u32>>> {
    let mut seqs: Vec<Vec<u32>> = entities
        .iter()
        .map(|e| KnowledgeUnit::Entity(e.as_ref().to_string()).tokens(catalog, vocab))
        .collect::<Result<_>>()?;
    seqs.push(KnowledgeUnit::Eok.tokens(catalog, vocab)?);
    Ok(seqs)
}

/// Pretrains a fact embedder on `kg` (the `<eok>` pseudo-fact is added).
pub fn pretrain_embedder<T: Scalar>(
    kg: &KnowledgeSet,
    catalog: &RelationCatalog,
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
) -> Result<(Embedder<T>, PretrainReport)> {
    if kg.is_empty() {
        return Err(Error::Input("knowledge set is empty".into()));
    }
    pretrain_sequences(&fact_sequences(kg, catalog, vocab)?, vocab.len(), cfg)
}

/// Fraction of query rows whose nearest key row (Euclidean) has the same index.
pub fn nearest_neighbor_rate<T: Scalar>(queries: &Tensor<T>, keys: &Tensor<T>) -> f64 {
    let n = queries.rows().min(keys.rows());
    if n == 0 {
        return 1.0;
    }
    let hits = (0..n)
        .filter(|&i| {
            let q = queries.row(i);
            let dist = |j: usize| -> f64 {
                keys.row(j).iter().zip(q).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum()
            };
            let own = dist(i);
            (0..keys.rows()).all(|j| j == i || dist(j) > own)
        })
        .count();
    hits as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::toy::toy_kg;
    use crate::corpus::vocab::EOK;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { d: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_slots: 4, max_len: 16, dropout: 0.0 }
    }

    #[test]
    fn embedding_is_deterministic_and_sized() {
        let m = Embedder::<f32>::init(&tiny_cfg(), 20, 3).unwrap();
        let seqs = vec![vec![BOS, 7, 8, EOS], vec![BOS, 9, EOS]];
        let a = m.embed_sequences(&seqs).unwrap();
        let b = m.embed_sequences(&seqs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 16]);
        let single = m.embed_sequences(&seqs[..1]).unwrap();
        assert!(single.max_abs_diff(&a.select_rows(&[0])) < 1e-6, "embedding depends on batch mates");
    }

    #[test]
    fn decode_respects_max_len() {
        let m = Embedder::<f32>::init(&tiny_cfg(), 20, 3).unwrap();
        let e = vec![0.1f32; 16];
        assert_eq!(m.decode(&e, 1).unwrap(), vec![BOS]);
        assert!(m.decode(&e, 5).unwrap().len() <= 5);
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let m = Embedder::<f32>::init(&tiny_cfg(), 10, 3).unwrap();
        assert!(matches!(m.embed_sequences(&[vec![BOS, 42, EOS]]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn sample_z0_is_centered_and_seeded() {
        let m = Embedder::<f64>::init(&tiny_cfg(), 10, 3).unwrap();
        let sched = NoiseSchedule::sqrt(100, 1e-4, 1.0).unwrap();
        let block = EmbeddingBlock::new(Tensor::filled(&[1, 16], 0.5), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 6250;
        let mut sum = 0.0;
        for _ in 0..draws {
            let z = m.sample_z0(&block, &sched, &mut rng).unwrap();
            sum += z.data.data().iter().map(|v| v - 0.5).sum::<f64>();
        }
        let n = (draws * 16) as f64;
        assert!((sum / n).abs() < 3.0 * 0.1 / n.sqrt());
        let a = m.sample_z0(&block, &sched, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = m.sample_z0(&block, &sched, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_block_is_rejected() {
        assert!(EmbeddingBlock::new(Tensor::<f32>::zeros(&[5, 16]), 4).is_err());
    }

    #[test]
    fn pretraining_reduces_loss_and_learns_eok() {
        let kg = toy_kg(12, 3, 4);
        let cat = RelationCatalog::atomic();
        let vocab = Vocabulary::build(&[], &kg, &cat, 1);
        let cfg = PretrainConfig {
            model: ModelConfig { d: 32, n_layers: 1, n_heads: 2, d_ff: 64, max_slots: 4, max_len: 24, dropout: 0.0 },
            epochs: 30,
            batch_size: 8,
            ..PretrainConfig::default()
        };
        let (m, rep) = pretrain_embedder::<f32>(&kg, &cat, &vocab, &cfg).unwrap();
        assert!(m.is_frozen());
        assert!(rep.epoch_losses[0] < rep.initial_loss);
        assert!(rep.epoch_losses.last().unwrap() < &rep.epoch_losses[0]);
        let eok = KnowledgeUnit::Eok.tokens(&cat, &vocab).unwrap();
        let e = m.embed_sequences(std::slice::from_ref(&eok)).unwrap();
        assert_eq!(m.decode_rows(&e, 8).unwrap()[0], vec![BOS, EOK, EOS]);
    }

    #[test]
    fn empty_kg_is_an_error() {
        let cat = RelationCatalog::atomic();
        let vocab = Vocabulary::build(&[], &KnowledgeSet::default(), &cat, 1);
        assert!(pretrain_embedder::<f32>(&KnowledgeSet::default(), &cat, &vocab, &PretrainConfig::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Embedder::<f32>::init(&tiny_cfg(), 20, 3).unwrap().freeze();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = Embedder::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.params().iter().count(), m.params().iter().count());
        let seqs = vec![vec![BOS, 7, EOS]];
        assert_eq!(back.embed_sequences(&seqs).unwrap(), m.embed_sequences(&seqs).unwrap());
    }

    #[test]
    fn nearest_neighbor_identity() {
        let keys = Tensor::<f64>::matrix(3, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(nearest_neighbor_rate(&keys, &keys), 1.0);
        let q = Tensor::<f64>::matrix(3, 2, vec![0.9, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((nearest_neighbor_rate(&q, &keys) - 2.0 / 3.0).abs() < 1e-12);
    }
}
