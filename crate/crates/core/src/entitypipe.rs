//! Entity-level generation: diffuse head entities, expand the context with
//! each head and diffuse its tails, then classify the relation of every
//! (head, tail) pair.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{EOS, FSEP};
use crate::corpus::{parse_entity, FactTriple, KnowledgeSet, NarrativeSample, RelationCatalog, Vocabulary};
use crate::diffuser::{context_tokens, Diffuser, DiffuserConfig, GenerationConfig, TrainItem, TrainLog};
use crate::embedder::{entity_sequences, pretrain_sequences, Embedder, PretrainConfig, PretrainReport};
use crate::error::{Error, Result};
use crate::numkernel::{encoder_stack, init_encoder, AdamW, ModelConfig, ParamSource, ParameterStore, SeqBatch, Tape, Var};
use crate::rng::{child_rng, derive_seed};
use crate::scalar::Scalar;

const REL_PREFIX: &str = "rel.enc.";
const REL_OUT: &str = "rel.out";

fn dedup(items: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items.into_iter().filter(|s| seen.insert(s.clone())).collect()
}

/// `<s> S <fsep> part_1 <fsep> part_2 ... </s>`, truncated to `max_len`.
pub fn expanded_context(context: &str, parts: &[&str], vocab: &Vocabulary, max_len: usize) -> Result<Vec<u32>> {
    let mut ids = context_tokens(context, vocab, usize::MAX)?;
    ids.pop();
    for p in parts {
        ids.push(FSEP);
        ids.extend(vocab.encode(p));
    }
    if ids.len() + 1 > max_len {
        // Keep the expansion; trim the context from the right.
        let tail_len = ids.len() - ids.iter().position(|&t| t == FSEP).unwrap_or(ids.len());
        let keep = max_len.saturating_sub(tail_len + 1).max(1);
        let cut = ids.len() - tail_len;
        let mut trimmed = ids[..keep.min(cut)].to_vec();
        trimmed.extend_from_slice(&ids[cut..]);
        ids = trimmed;
        ids.truncate(max_len - 1);
    }
    ids.push(EOS);
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamW,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig { d: 64, n_layers: 1, n_heads: 4, d_ff: 128, max_slots: 16, max_len: 64, dropout: 0.0 },
            epochs: 60,
            batch_size: 8,
            optim: AdamW { lr: 2e-3, warmup: 20, total: 100_000, clip: Some(1.0), ..AdamW::default() },
            seed: 0,
        }
    }
}

/// Context encoder with a linear softmax head over relation labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationClassifier<T: Scalar> {
    params: ParameterStore<T>,
    cfg: ModelConfig,
    labels: Vec<String>,
    vocab_size: usize,
}

impl<T: Scalar> RelationClassifier<T> {
    pub fn init(cfg: &ModelConfig, labels: Vec<String>, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if labels.is_empty() {
            return Err(Error::Config("relation classifier needs at least one label".into()));
        }
        let mut rng = child_rng(seed, "relation-init");
        let mut params = ParameterStore::new();
        init_encoder(&mut params, REL_PREFIX, cfg, vocab_size, &mut rng);
        params.init_linear(REL_OUT, cfg.d, labels.len(), 1.0, &mut rng);
        Ok(Self { params, cfg: cfg.clone(), labels, vocab_size })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    fn logits<'a>(&'a self, tape: &mut Tape<'a, T>, seqs: &[&[u32]], trainable: bool) -> Result<Var> {
        for s in seqs {
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::TokenOutOfRange { id: bad as usize, vocab: self.vocab_size });
            }
        }
        let src = ParamSource { store: &self.params, trainable };
        let batch = SeqBatch::new(seqs);
        let h = encoder_stack(tape, &src, REL_PREFIX, &self.cfg, &batch)?;
        let s = tape.gather(h, &batch.starts())?;
        let w = src.get(tape, &format!("{REL_OUT}.w"))?;
        let b = src.get(tape, &format!("{REL_OUT}.b"))?;
        tape.linear(s, w, Some(b))
    }

    /// Softmax distribution over [`RelationClassifier::labels`].
    pub fn scores(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::eval();
        let l = self.logits(&mut tape, &[tokens], false)?;
        Ok(softmax(&tape.value(l).row(0).iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
    }

    pub fn predict(&self, tokens: &[u32]) -> Result<String> {
        let s = self.scores(tokens)?;
        Ok(self.labels[argmax(&s)].clone())
    }

    /// Trains on `(tokens, label index)` pairs; returns per-epoch mean losses.
    pub fn train(&mut self, data: &[(Vec<u32>, usize)], cfg: &ClassifierConfig) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Input("no relation training pairs".into()));
        }
        let mut rng = child_rng(cfg.seed, "relation-shuffle");
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut curve = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for (b, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
                let seqs: Vec<&[u32]> = chunk.iter().map(|&i| data[i].0.as_slice()).collect();
                let gold: Vec<usize> = chunk.iter().map(|&i| data[i].1).collect();
                let grads = {
                    let mut tape = Tape::train(derive_seed(cfg.seed, &format!("relation-{epoch}-{b}")));
                    let l = self.logits(&mut tape, &seqs, true)?;
                    let loss = tape.cross_entropy(l, &gold)?;
                    let v = tape.value(loss).item().as_f64();
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!("classifier loss at epoch {epoch}")));
                    }
                    sum += v * chunk.len() as f64;
                    tape.backward(loss)?
                };
                cfg.optim.step(&mut self.params, &grads);
            }
            curve.push(sum / data.len() as f64);
        }
        Ok(curve)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": "relation-classifier", "labels": self.labels, "vocab_size": self.vocab_size });
        self.params.save(dir, &self.cfg, meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (params, cfg, meta) = ParameterStore::load(dir)?;
        let labels: Vec<String> = serde_json::from_value(
            meta.get("labels").cloned().ok_or_else(|| Error::Config("classifier checkpoint lacks labels".into()))?,
        )?;
        let vocab_size = meta
            .get("vocab_size")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Config("classifier checkpoint lacks vocab_size".into()))? as usize;
        Ok(Self { params, cfg, labels, vocab_size })
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Training settings for all three stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityTrainConfig {
    pub embedder: PretrainConfig,
    pub heads: DiffuserConfig,
    pub tails: DiffuserConfig,
    pub classifier: ClassifierConfig,
}

impl EntityTrainConfig {
    pub fn toy() -> Self {
        let mut d = DiffuserConfig::toy();
        d.width = 4;
        d.train_steps = 2000;
        d.optim.total = 2000;
        let mut tails = d.clone();
        tails.seed = 1;
        Self { embedder: PretrainConfig::default(), heads: d, tails, classifier: ClassifierConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityTrainReport {
    pub embedder: PretrainReport,
    pub heads: TrainLog,
    pub tails: TrainLog,
    pub classifier_losses: Vec<f64>,
}

/// Output of composed generation for one context.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityGeneration {
    pub heads: Vec<String>,
    pub facts: Vec<FactTriple>,
    pub pairs_scored: usize,
}

/// Head and tail diffusers sharing one frozen entity embedder, plus the
/// relation classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityPipeline<T: Scalar> {
    pub embedder: Embedder<T>,
    pub heads: Diffuser<T>,
    pub tails: Diffuser<T>,
    pub relations: RelationClassifier<T>,
}

fn entity_tokens(e: &str, vocab: &Vocabulary) -> Vec<u32> {
    vocab.encode_sentence(e)
}

impl<T: Scalar> EntityPipeline<T> {
    fn decode_entities(&self, units: &[Vec<u32>], vocab: &Vocabulary) -> Vec<String> {
        dedup(units.iter().filter_map(|u| parse_entity(u, vocab)).collect())
    }

    /// Unique generated head entities, first-seen order.
    pub fn generate_heads(&self, context: &str, vocab: &Vocabulary, gen: &GenerationConfig) -> Result<Vec<String>> {
        let ctx = context_tokens(context, vocab, self.heads.config().model.max_len)?;
        let out = self.heads.generate_batch(&[ctx], &self.embedder, gen)?;
        Ok(self.decode_entities(&out[0].units, vocab))
    }

    /// Unique generated tails of `head` in `context`.
    pub fn generate_tails(&self, context: &str, head: &str, vocab: &Vocabulary, gen: &GenerationConfig) -> Result<Vec<String>> {
        if head.trim().is_empty() {
            return Err(Error::Input("head entity is empty".into()));
        }
        let ctx = expanded_context(context, &[head], vocab, self.tails.config().model.max_len)?;
        let out = self.tails.generate_batch(&[ctx], &self.embedder, gen)?;
        Ok(self.decode_entities(&out[0].units, vocab))
    }

    pub fn relation_scores(&self, context: &str, head: &str, tail: &str, vocab: &Vocabulary) -> Result<Vec<f64>> {
        let toks = expanded_context(context, &[head, tail], vocab, self.relations.cfg.max_len)?;
        self.relations.scores(&toks)
    }

    pub fn predict_relation(&self, context: &str, head: &str, tail: &str, vocab: &Vocabulary) -> Result<String> {
        let s = self.relation_scores(context, head, tail, vocab)?;
        Ok(self.relations.labels[argmax(&s)].clone())
    }

    /// Heads, then tails per head, then one relation per pair; duplicate
    /// triples removed, head-major order.
    pub fn generate_fact_graph(&self, context: &str, vocab: &Vocabulary, gen: &GenerationConfig) -> Result<EntityGeneration> {
        let heads = self.generate_heads(context, vocab, gen)?;
        let mut facts = Vec::new();
        let mut seen = HashSet::new();
        let mut pairs = 0;
        for h in &heads {
            for t in self.generate_tails(context, h, vocab, gen)? {
                pairs += 1;
                let r = self.predict_relation(context, h, &t, vocab)?;
                let f = FactTriple::new(h.clone(), r, t);
                if seen.insert(f.clone()) {
                    facts.push(f);
                }
            }
        }
        Ok(EntityGeneration { heads, facts, pairs_scored: pairs })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.embedder.save(&dir.join("embedder"))?;
        self.heads.save(&dir.join("heads"))?;
        self.tails.save(&dir.join("tails"))?;
        self.relations.save(&dir.join("relations"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            embedder: Embedder::load(&dir.join("embedder"))?,
            heads: Diffuser::load(&dir.join("heads"))?,
            tails: Diffuser::load(&dir.join("tails"))?,
            relations: RelationClassifier::load(&dir.join("relations"))?,
        })
    }
}

/// Head-diffusion items: unique gold heads per context.
pub fn head_items(samples: &[NarrativeSample], vocab: &Vocabulary, max_len: usize) -> Result<Vec<TrainItem>> {
    samples
        .iter()
        .map(|s| {
            Ok(TrainItem {
                context: context_tokens(&s.context, vocab, max_len)?,
                units: s.gold.heads().iter().map(|h| entity_tokens(h, vocab)).collect(),
            })
        })
        .collect()
}

/// Tail-diffusion items: one per (context, gold head), units = that head's tails.
pub fn tail_items(samples: &[NarrativeSample], vocab: &Vocabulary, max_len: usize) -> Result<Vec<TrainItem>> {
    let mut out = Vec::new();
    for s in samples {
        for h in s.gold.heads() {
            out.push(TrainItem {
                context: expanded_context(&s.context, &[h], vocab, max_len)?,
                units: s.gold.tails_of(h).iter().map(|t| entity_tokens(t, vocab)).collect(),
            });
        }
    }
    Ok(out)
}

/// Entity units seen by the shared embedder: every head and tail of the KG
/// and of the gold sets, deduplicated in first-seen order.
pub fn entity_units(samples: &[NarrativeSample], kg: &KnowledgeSet) -> Vec<String> {
    let mut entities: Vec<String> = kg.heads().iter().chain(kg.tails()).cloned().collect();
    for s in samples {
        entities.extend(s.gold.heads().iter().chain(s.gold.tails()).cloned());
    }
    dedup(entities)
}

/// Trains the shared entity embedder, both diffusers and the classifier.
pub fn train_entity_pipeline<T: Scalar>(
    samples: &[NarrativeSample],
    kg: &KnowledgeSet,
    catalog: &RelationCatalog,
    vocab: &Vocabulary,
    cfg: &EntityTrainConfig,
) -> Result<(EntityPipeline<T>, EntityTrainReport)> {
    let entities = entity_units(samples, kg);
    if entities.is_empty() {
        return Err(Error::Input("no entities to pretrain on".into()));
    }
    let (embedder, emb_report) =
        pretrain_sequences::<T>(&entity_sequences(&entities, catalog, vocab)?, vocab.len(), &cfg.embedder)?;
    let (pipe, mut report) = train_entity_models(embedder, samples, catalog, vocab, cfg)?;
    report.embedder = emb_report;
    Ok((pipe, report))
}

/// Trains both diffusers and the classifier on top of a frozen entity
/// embedder; the embedder part of the report is left empty.
pub fn train_entity_models<T: Scalar>(
    embedder: Embedder<T>,
    samples: &[NarrativeSample],
    catalog: &RelationCatalog,
    vocab: &Vocabulary,
    cfg: &EntityTrainConfig,
) -> Result<(EntityPipeline<T>, EntityTrainReport)> {
    let mut heads = Diffuser::init(&cfg.heads, vocab.len())?;
    let head_log = heads.train(&head_items(samples, vocab, cfg.heads.model.max_len)?, &embedder, vocab, catalog)?;
    let mut tails = Diffuser::init(&cfg.tails, vocab.len())?;
    let tail_log = tails.train(&tail_items(samples, vocab, cfg.tails.model.max_len)?, &embedder, vocab, catalog)?;

    let labels: Vec<String> = catalog.labels().cloned().collect();
    let mut relations = RelationClassifier::init(&cfg.classifier.model, labels.clone(), vocab.len(), cfg.classifier.seed)?;
    let mut pairs = Vec::new();
    for s in samples {
        for f in s.gold.facts() {
            let idx = labels
                .iter()
                .position(|l| l == &f.relation)
                .ok_or_else(|| Error::UnknownRelation(f.relation.clone()))?;
            pairs.push((expanded_context(&s.context, &[&f.head, &f.tail], vocab, cfg.classifier.model.max_len)?, idx));
        }
    }
    let classifier_losses = relations.train(&pairs, &cfg.classifier)?;
    let report = EntityTrainReport { embedder: PretrainReport::default(), heads: head_log, tails: tail_log, classifier_losses };
    Ok((EntityPipeline { embedder, heads, tails, relations }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::toy::{toy_kg, toy_narratives};
    use crate::corpus::vocab::BOS;

    #[test]
    fn dedup_preserves_order() {
        let v = dedup(vec!["cap".into(), "cap".into(), "vacation".into()]);
        assert_eq!(v, vec!["cap".to_string(), "vacation".to_string()]);
    }

    #[test]
    fn softmax_is_normalized_and_shift_invariant() {
        let a = softmax(&[1.0, 2.0, -3.0]);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let b = softmax(&[101.0, 102.0, 97.0]);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn expansion_layout() {
        let kg = toy_kg(10, 2, 1);
        let samples = toy_narratives(&kg, 2, 1);
        let cat = RelationCatalog::atomic();
        let vocab = Vocabulary::build(&samples, &kg, &cat, 1);
        let h = kg.heads()[0].clone();
        let ids = expanded_context("anna saw it .", &[&h], &vocab, 64).unwrap();
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(ids.iter().filter(|&&t| t == FSEP).count(), 1);
        let short = expanded_context("anna saw it . later ben saw it too .", &[&h], &vocab, 8).unwrap();
        assert_eq!(short.len(), 8);
        assert!(short.contains(&FSEP));
    }

    #[test]
    fn classifier_scores_are_a_distribution() {
        let cfg = ModelConfig { d: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_slots: 4, max_len: 16, dropout: 0.0 };
        let c = RelationClassifier::<f32>::init(&cfg, vec!["a".into(), "b".into(), "c".into()], 12, 0).unwrap();
        let s = c.scores(&[BOS, 7, EOS]).unwrap();
        assert_eq!(s.len(), 3);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tiny_pipeline_smoke() {
        let kg = toy_kg(16, 2, 5);
        let samples = toy_narratives(&kg, 3, 5);
        let cat = RelationCatalog::atomic();
        let vocab = Vocabulary::build(&samples, &kg, &cat, 1);
        let model = ModelConfig { d: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_slots: 4, max_len: 32, dropout: 0.0 };
        let mut d = DiffuserConfig::toy();
        d.model = model.clone();
        d.width = 4;
        d.steps = 10;
        d.train_steps = 3;
        d.batch_size = 2;
        let cfg = EntityTrainConfig {
            embedder: PretrainConfig { model: model.clone(), epochs: 2, ..PretrainConfig::default() },
            heads: d.clone(),
            tails: d,
            classifier: ClassifierConfig { model, epochs: 2, ..ClassifierConfig::default() },
        };
        let (p, rep) = train_entity_pipeline::<f32>(&samples, &kg, &cat, &vocab, &cfg).unwrap();
        assert_eq!(rep.classifier_losses.len(), 2);
        let gen = GenerationConfig { inference_steps: 2, n_slots: None, seed: 3 };
        let g = p.generate_fact_graph(&samples[0].context, &vocab, &gen).unwrap();
        assert!(g.facts.len() <= g.pairs_scored);
        assert!(g.facts.iter().all(|f| cat.contains(&f.relation)));
        assert_eq!(g, p.generate_fact_graph(&samples[0].context, &vocab, &gen).unwrap());
        assert!(p.generate_tails(&samples[0].context, "  ", &vocab, &gen).is_err());

        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        let back = EntityPipeline::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.generate_fact_graph(&samples[0].context, &vocab, &gen).unwrap(), g);
    }
}
