//! A small extractive QA model used in place of a document transformer.
//!
//! Token embeddings are mean-pooled and summed with a key (question) embedding
//! and a linear projection of the page's visual features. One ReLU hidden
//! layer feeds a softmax over a closed answer vocabulary. A per-key copy gate
//! adds a bonus to answers that literally appear in the document and whose
//! type matches the question, so the model can both read and memorize.

mod adamw;
mod checkpoint;
mod metrics;
mod params;
mod redact;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use adamw::{train_local, AdamW, LocalSteps, TrainHyper};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use metrics::{evaluate, evaluate_predictions, write_utility_csv, UtilityReport, ANLS_THRESHOLD, CONF_HI};
pub use params::{l2_norm, ModelLayout, ParameterVector, Segment};
pub use redact::{redact, REDACT_THRESHOLD};

use crate::corpus::{Corpus, Document, QaExample};
use crate::error::{Error, Result};
use crate::seed::SeedStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Standard deviation of the random initialisation of the input-side weights.
    pub init_scale: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { embed_dim: 64, hidden_dim: 256, init_scale: 1.0 }
    }
}

/// Closed token and answer vocabularies built from a corpus.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_index: HashMap<String, u32>,
    answers: Vec<String>,
    answer_index: HashMap<String, u32>,
    /// Bit `k` set when the answer has appeared as a value of key `k`.
    answer_keys: Vec<u64>,
    keys: Vec<String>,
}

impl Vocab {
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let keys: Vec<String> = corpus.config.keys.iter().map(|k| k.name.clone()).collect();
        if keys.len() > 63 {
            return Err(Error::Config("at most 63 keys are supported".into()));
        }
        let tokens: BTreeSet<&str> =
            corpus.documents.iter().flat_map(|d| d.token_stream.iter().map(String::as_str)).collect();
        // index 0 is reserved for out-of-vocabulary tokens
        let token_index = tokens.into_iter().enumerate().map(|(i, t)| (t.to_string(), i as u32 + 1)).collect();

        let mut typed: std::collections::BTreeMap<&str, u64> = Default::default();
        for d in &corpus.documents {
            for (k, key) in keys.iter().enumerate() {
                for field in [key.clone(), format!("counterparty_{key}")] {
                    if let Some(v) = d.fields.get(&field) {
                        *typed.entry(v.as_str()).or_default() |= 1 << k;
                    }
                }
            }
        }
        // index 0 is the empty answer
        let mut answers = vec![String::new()];
        let mut answer_keys = vec![0u64];
        for (v, mask) in typed {
            if v.is_empty() {
                continue;
            }
            answers.push(v.to_string());
            answer_keys.push(mask);
        }
        let answer_index = answers.iter().enumerate().map(|(i, a)| (a.clone(), i as u32)).collect();
        Ok(Self { token_index, answers, answer_index, answer_keys, keys })
    }

    pub fn n_tokens(&self) -> usize {
        self.token_index.len() + 1
    }

    pub fn n_answers(&self) -> usize {
        self.answers.len()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn answer(&self, idx: u32) -> &str {
        &self.answers[idx as usize]
    }

    pub fn answer_id(&self, s: &str) -> Option<u32> {
        self.answer_index.get(s).copied()
    }

    pub fn key_slot(&self, key: Option<&str>) -> Result<usize> {
        match key {
            None => Ok(self.keys.len()),
            Some(k) => self.keys.iter().position(|x| x == k).ok_or_else(|| Error::Input(format!("unknown key {k:?}"))),
        }
    }
}

/// A document and question in index form.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub tokens: Vec<u32>,
    pub visual: Vec<f64>,
    pub key_slot: usize,
    /// Answer classes present in the document whose type matches the question.
    pub present: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub input: EncodedInput,
    pub gold: u32,
    pub provider_id: usize,
    pub doc_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub answer: String,
    pub answer_index: u32,
    pub conf: f64,
    /// Cross-entropy against the gold answer, when one was supplied.
    pub loss: Option<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QaModel {
    vocab: Arc<Vocab>,
    layout: ModelLayout,
    init_scale: f64,
}

struct Activations {
    x: Vec<f64>,
    h: Vec<f64>,
    probs: Vec<f64>,
    logits: Vec<f64>,
}

impl QaModel {
    pub fn from_corpus(corpus: &Corpus, dims: &ModelDims) -> Result<Self> {
        let vocab = Vocab::from_corpus(corpus)?;
        let layout = ModelLayout {
            n_tokens: vocab.n_tokens(),
            n_key_slots: vocab.keys.len() + 1,
            visual_dim: corpus.config.visual_dim,
            embed_dim: dims.embed_dim,
            hidden_dim: dims.hidden_dim,
            n_answers: vocab.n_answers(),
            frozen: vec![],
        };
        if dims.embed_dim == 0 || dims.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(Self { vocab: Arc::new(vocab), layout, init_scale: dims.init_scale })
    }

    pub fn with_frozen(mut self, frozen: Vec<Segment>) -> Self {
        self.layout.frozen = frozen;
        self
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    /// Random input-side weights; output head and copy gate start at zero so
    /// the untrained model is uniform over answers and emits the empty answer.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut p = ParameterVector::zeros(self.layout.clone());
        let mut rng = SeedStream::new(seed).child("model-init").rng();
        let d = self.layout.embed_dim as f64;
        let scales = [
            (Segment::TokenEmbedding, self.init_scale),
            (Segment::KeyEmbedding, self.init_scale),
            (Segment::VisualProjection, self.init_scale / (self.layout.visual_dim as f64).sqrt()),
            (Segment::HiddenWeight, 1.0 / d.sqrt()),
        ];
        for (seg, scale) in scales {
            for v in p.segment_mut(seg) {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    pub fn encode(&self, doc: &Document, key: Option<&str>) -> Result<EncodedInput> {
        let key_slot = self.vocab.key_slot(key)?;
        let tokens: Vec<u32> =
            doc.token_stream.iter().map(|t| self.vocab.token_index.get(t).copied().unwrap_or(0)).collect();
        let mut present: Vec<u32> = doc
            .token_stream
            .iter()
            .filter_map(|t| self.vocab.answer_id(t))
            .filter(|&a| a != 0 && (key.is_none() || self.vocab.answer_keys[a as usize] & (1 << key_slot) != 0))
            .collect();
        present.sort_unstable();
        present.dedup();
        Ok(EncodedInput { tokens, visual: doc.visual.clone(), key_slot, present })
    }

    pub fn encode_example(&self, doc: &Document, ex: &QaExample) -> Result<EncodedExample> {
        let gold = self
            .vocab
            .answer_id(&ex.answer)
            .ok_or_else(|| Error::Input(format!("answer {:?} is not in the answer vocabulary", ex.answer)))?;
        Ok(EncodedExample {
            input: self.encode(doc, Some(&ex.key))?,
            gold,
            provider_id: ex.provider_id,
            doc_id: doc.doc_id,
        })
    }

    /// Encodes every QA pair of the given documents.
    pub fn encode_docs<'a, I>(&self, corpus: &Corpus, doc_ids: I) -> Result<Vec<EncodedExample>>
    where
        I: IntoIterator<Item = &'a usize>,
    {
        let mut out = Vec::new();
        for &d in doc_ids {
            let doc = corpus.document(d);
            for ex in &doc.qa {
                out.push(self.encode_example(doc, ex)?);
            }
        }
        Ok(out)
    }

    fn check(&self, params: &ParameterVector, input: &EncodedInput) -> Result<()> {
        if params.values.len() != self.layout.dim() || params.layout != self.layout {
            return Err(Error::Dimension { expected: self.layout.dim(), actual: params.values.len() });
        }
        if input.visual.len() != self.layout.visual_dim {
            return Err(Error::Dimension { expected: self.layout.visual_dim, actual: input.visual.len() });
        }
        if input.key_slot >= self.layout.n_key_slots {
            return Err(Error::Input(format!("key slot {} out of range", input.key_slot)));
        }
        Ok(())
    }

    fn activations(&self, p: &ParameterVector, input: &EncodedInput) -> Activations {
        let l = &self.layout;
        let (d, hd) = (l.embed_dim, l.hidden_dim);
        let emb = p.segment(Segment::TokenEmbedding);
        let mut x = vec![0.0; d];
        if !input.tokens.is_empty() {
            for &t in &input.tokens {
                let t = (t as usize).min(l.n_tokens - 1);
                for (xi, e) in x.iter_mut().zip(&emb[t * d..(t + 1) * d]) {
                    *xi += e;
                }
            }
            let inv = 1.0 / input.tokens.len() as f64;
            x.iter_mut().for_each(|v| *v *= inv);
        }
        let key = &p.segment(Segment::KeyEmbedding)[input.key_slot * d..(input.key_slot + 1) * d];
        let proj = p.segment(Segment::VisualProjection);
        for i in 0..d {
            let row = &proj[i * l.visual_dim..(i + 1) * l.visual_dim];
            x[i] += key[i] + dot(row, &input.visual);
        }
        let w1 = p.segment(Segment::HiddenWeight);
        let b1 = p.segment(Segment::HiddenBias);
        let h: Vec<f64> = (0..hd).map(|j| (dot(&w1[j * d..(j + 1) * d], &x) + b1[j]).max(0.0)).collect();
        let u = p.segment(Segment::HeadWeight);
        let b = p.segment(Segment::HeadBias);
        let mut logits: Vec<f64> = (0..l.n_answers).map(|c| dot(&u[c * hd..(c + 1) * hd], &h) + b[c]).collect();
        let gate = p.segment(Segment::CopyGate)[input.key_slot];
        for &c in &input.present {
            logits[c as usize] += gate;
        }
        let probs = softmax(&logits);
        Activations { x, h, probs, logits }
    }

    pub fn forward(&self, params: &ParameterVector, input: &EncodedInput, gold: Option<u32>) -> Result<Prediction> {
        self.check(params, input)?;
        let act = self.activations(params, input);
        if act.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        // first index wins ties
        let best = act.probs.iter().enumerate().fold(0usize, |b, (i, &p)| if p > act.probs[b] { i } else { b });
        let loss = gold.map(|g| -act.probs[g as usize].max(f64::MIN_POSITIVE).ln());
        Ok(Prediction {
            answer: self.vocab.answers[best].clone(),
            answer_index: best as u32,
            conf: act.probs[best],
            loss,
            logits: act.logits,
        })
    }

    /// Mean cross-entropy over the batch and its gradient.
    pub fn loss_and_grad(&self, params: &ParameterVector, batch: &[&EncodedExample]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.layout.dim()];
        let mut total = 0.0;
        for ex in batch {
            self.check(params, &ex.input)?;
            total += self.accumulate_grad(params, ex, 1.0 / batch.len() as f64, &mut grad);
        }
        Ok((total / batch.len().max(1) as f64, grad))
    }

    fn accumulate_grad(&self, p: &ParameterVector, ex: &EncodedExample, weight: f64, grad: &mut [f64]) -> f64 {
        let l = &self.layout;
        let (d, hd, vd) = (l.embed_dim, l.hidden_dim, l.visual_dim);
        let act = self.activations(p, &ex.input);
        let loss = -act.probs[ex.gold as usize].max(f64::MIN_POSITIVE).ln();

        let mut dz = act.probs;
        dz[ex.gold as usize] -= 1.0;
        dz.iter_mut().for_each(|v| *v *= weight);

        let u = p.segment(Segment::HeadWeight);
        let gate_r = l.range(Segment::CopyGate);
        for &c in &ex.input.present {
            grad[gate_r.start + ex.input.key_slot] += dz[c as usize];
        }
        let hb = l.range(Segment::HeadBias);
        let hw = l.range(Segment::HeadWeight);
        let mut dh = vec![0.0; hd];
        for (c, &g) in dz.iter().enumerate() {
            grad[hb.start + c] += g;
            let row = &mut grad[hw.start + c * hd..hw.start + (c + 1) * hd];
            for (r, h) in row.iter_mut().zip(&act.h) {
                *r += g * h;
            }
            for (acc, w) in dh.iter_mut().zip(&u[c * hd..(c + 1) * hd]) {
                *acc += g * w;
            }
        }
        let da: Vec<f64> = dh.iter().zip(&act.h).map(|(g, h)| if *h > 0.0 { *g } else { 0.0 }).collect();

        let w1 = p.segment(Segment::HiddenWeight);
        let w1r = l.range(Segment::HiddenWeight);
        let b1r = l.range(Segment::HiddenBias);
        let mut dx = vec![0.0; d];
        for j in 0..hd {
            grad[b1r.start + j] += da[j];
            let row = &mut grad[w1r.start + j * d..w1r.start + (j + 1) * d];
            for (r, x) in row.iter_mut().zip(&act.x) {
                *r += da[j] * x;
            }
            for (acc, w) in dx.iter_mut().zip(&w1[j * d..(j + 1) * d]) {
                *acc += da[j] * w;
            }
        }

        let kr = l.range(Segment::KeyEmbedding);
        let slot = ex.input.key_slot;
        for (g, v) in grad[kr.start + slot * d..kr.start + (slot + 1) * d].iter_mut().zip(&dx) {
            *g += v;
        }
        let pr = l.range(Segment::VisualProjection);
        for i in 0..d {
            for (k, vis) in ex.input.visual.iter().enumerate() {
                grad[pr.start + i * vd + k] += dx[i] * vis;
            }
        }
        if !ex.input.tokens.is_empty() {
            let inv = 1.0 / ex.input.tokens.len() as f64;
            let er = l.range(Segment::TokenEmbedding);
            for &t in &ex.input.tokens {
                let t = (t as usize).min(l.n_tokens - 1);
                for (g, v) in grad[er.start + t * d..er.start + (t + 1) * d].iter_mut().zip(&dx) {
                    *g += v * inv;
                }
            }
        }
        loss
    }

    /// Answer distribution for an input; sums to one.
    pub fn probabilities(&self, params: &ParameterVector, input: &EncodedInput) -> Result<Vec<f64>> {
        self.check(params, input)?;
        Ok(self.activations(params, input).probs)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
