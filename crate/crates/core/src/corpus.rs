//! Synthetic invoice-QA corpus with a provider / client / BLUE / RED layout.
//!
//! Providers own a few constant "generic" fields (name, email, tax id) and a
//! visual signature. Every document of a provider repeats those values next to
//! per-document fields (dates, amounts), counterparty values of the same kind
//! and distractor words. One question is asked per key per document.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{SeedStream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Name,
    Email,
    TaxId,
    Date,
    Amount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeySpec {
    pub name: String,
    pub kind: ValueKind,
    /// Constant across all documents of a provider.
    pub generic: bool,
    /// Also print a value of the same kind that is not the answer
    /// (e.g. the customer's name next to the provider's name).
    #[serde(default)]
    pub counterparty: bool,
    pub templates: Vec<String>,
}

impl KeySpec {
    fn new(name: &str, kind: ValueKind, generic: bool, counterparty: bool, templates: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind,
            generic,
            counterparty,
            templates: templates.iter().map(|t| t.to_string()).collect(),
        }
    }
}

pub fn default_keys() -> Vec<KeySpec> {
    vec![
        KeySpec::new(
            "name",
            ValueKind::Name,
            true,
            true,
            &[
                "What is the name of the provider?",
                "What name is associated with the vendor?",
                "Who issued this invoice?",
            ],
        ),
        KeySpec::new(
            "email",
            ValueKind::Email,
            true,
            true,
            &[
                "What is the provider's email address?",
                "Which email can the vendor be reached at?",
                "What is the contact email of the issuer?",
            ],
        ),
        KeySpec::new(
            "tax_id",
            ValueKind::TaxId,
            true,
            false,
            &[
                "What is the provider's tax ID?",
                "Which VAT number is listed for the vendor?",
                "What tax identification number appears on the invoice?",
            ],
        ),
        KeySpec::new(
            "invoice_date",
            ValueKind::Date,
            false,
            true,
            &["When was the invoice issued?", "What is the invoice date?", "On which date was this document created?"],
        ),
        KeySpec::new(
            "total_amount",
            ValueKind::Amount,
            false,
            false,
            &["What is the total amount due?", "How much is the invoice total?", "What is the amount to be paid?"],
        ),
    ]
}

fn default_docs_range() -> (usize, usize) {
    (2, 8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_providers: usize,
    pub docs_per_provider: (usize, usize),
    pub n_clients: usize,
    pub keys: Vec<KeySpec>,
    /// Number of distinct values available to per-document keys of each kind.
    pub value_pool_size: usize,
    pub distractors_per_doc: usize,
    pub distractor_vocab_size: usize,
    pub visual_dim: usize,
    /// Per-document jitter added to the provider's visual signature.
    pub visual_noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_providers: 200,
            docs_per_provider: default_docs_range(),
            n_clients: 10,
            keys: default_keys(),
            value_pool_size: 60,
            distractors_per_doc: 20,
            distractor_vocab_size: 400,
            visual_dim: 8,
            visual_noise: 0.05,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_clients == 0 {
            return bad("n_clients must be at least 1");
        }
        if self.n_providers < 2 * self.n_clients {
            return bad("n_providers must be at least 2 * n_clients");
        }
        if self.keys.is_empty() {
            return bad("key schema is empty");
        }
        let mut names = HashSet::new();
        for k in &self.keys {
            if !names.insert(k.name.as_str()) {
                return Err(Error::Config(format!("duplicate key {:?}", k.name)));
            }
            if k.templates.is_empty() {
                return Err(Error::Config(format!("key {:?} has no question templates", k.name)));
            }
        }
        let (lo, hi) = self.docs_per_provider;
        if lo == 0 || lo > hi {
            return bad("docs_per_provider must satisfy 1 <= min <= max");
        }
        if self.visual_dim == 0 {
            return bad("visual_dim must be positive");
        }
        if self.value_pool_size < 2 {
            return bad("value_pool_size must be at least 2");
        }
        if self.distractors_per_doc > 0 && self.distractor_vocab_size == 0 {
            return bad("distractor_vocab_size must be positive when distractors are requested");
        }
        if !(self.visual_noise >= 0.0 && self.visual_noise.is_finite()) {
            return bad("visual_noise must be a finite non-negative number");
        }
        Ok(())
    }

    pub fn key_index(&self, name: &str) -> Option<usize> {
        self.keys.iter().position(|k| k.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provider {
    pub provider_id: usize,
    pub generic_keys: BTreeMap<String, String>,
    pub visual_signature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub example_id: usize,
    pub doc_id: usize,
    pub provider_id: usize,
    pub key: String,
    pub question_template_id: usize,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: usize,
    pub provider_id: usize,
    pub fields: BTreeMap<String, String>,
    pub token_stream: Vec<String>,
    /// Visual features of the page; the provider's signature plus jitter.
    pub visual: Vec<f64>,
    pub qa: Vec<QaExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub providers: Vec<Provider>,
    pub documents: Vec<Document>,
}

#[derive(Serialize, Deserialize)]
struct DocumentRecord {
    #[serde(flatten)]
    document: Document,
    provider_signature: Vec<f64>,
}

struct Identity {
    name: String,
    email: String,
    tax_id: String,
}

const CONSONANTS: &[&str] =
    &["b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const DOMAINS: &[&str] = &["mail.com", "invoices.net", "corp.io", "trade.org"];
const FORM_WORDS: &[&str] = &[
    "invoice",
    "total",
    "qty",
    "unit",
    "price",
    "vat",
    "subtotal",
    "due",
    "bill",
    "ship",
    "to",
    "from",
    "page",
    "ref",
    "order",
    "item",
    "description",
    "tax",
    "date",
    "amount",
];

fn pseudo_word(rng: &mut StreamRng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(CONSONANTS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
    }
    w
}

fn unique_values<F>(n: usize, taken: &mut HashSet<String>, rng: &mut StreamRng, mut gen: F) -> Vec<String>
where
    F: FnMut(&mut StreamRng) -> String,
{
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        let v = gen(rng);
        attempts += 1;
        if taken.insert(v.clone()) {
            out.push(v);
        }
        assert!(attempts < 1000 * (n + 10), "value space exhausted");
    }
    out
}

/// Generate a corpus. The output is a pure function of the configuration.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let stream = SeedStream::new(config.seed).child("corpus");
    let mut rng = stream.child("values").rng();
    let n = config.n_providers;

    let mut taken = HashSet::new();
    let names = unique_values(n, &mut taken, &mut rng, |r| {
        let s = r.random_range(2..=3);
        pseudo_word(r, s)
    });
    let identities: Vec<Identity> = names
        .into_iter()
        .enumerate()
        .map(|(i, name)| Identity {
            email: format!("{name}@{}", DOMAINS[i % DOMAINS.len()]),
            tax_id: String::new(),
            name,
        })
        .collect();
    let tax_ids = unique_values(n, &mut taken, &mut rng, |r| format!("TX{:06}", r.random_range(0..1_000_000)));
    let identities: Vec<Identity> =
        identities.into_iter().zip(tax_ids).map(|(id, tax_id)| Identity { tax_id, ..id }).collect();
    let dates = unique_values(config.value_pool_size, &mut taken, &mut rng, |r| {
        format!("{:02}/{:02}/{:02}", r.random_range(1..=12), r.random_range(1..=28), r.random_range(10..=24))
    });
    let amounts = unique_values(config.value_pool_size, &mut taken, &mut rng, |r| {
        format!("{}.{:02}", r.random_range(10..10_000), r.random_range(0..100))
    });
    let mut distractors: Vec<String> =
        FORM_WORDS.iter().filter(|w| !taken.contains(**w)).map(|w| w.to_string()).collect();
    for w in &distractors {
        taken.insert(w.clone());
    }
    let extra = config.distractor_vocab_size.saturating_sub(distractors.len());
    distractors.extend(unique_values(extra, &mut taken, &mut rng, |r| {
        let s = r.random_range(1..=3);
        pseudo_word(r, s)
    }));
    distractors.truncate(config.distractor_vocab_size.max(1));

    let mut prov_rng = stream.child("providers").rng();
    let mut provider_values: Vec<BTreeMap<String, String>> = Vec::with_capacity(n);
    let mut providers = Vec::with_capacity(n);
    for (pid, ident) in identities.iter().enumerate() {
        let mut generic = BTreeMap::new();
        for key in config.keys.iter().filter(|k| k.generic) {
            let v = match key.kind {
                ValueKind::Name => ident.name.clone(),
                ValueKind::Email => ident.email.clone(),
                ValueKind::TaxId => ident.tax_id.clone(),
                ValueKind::Date => dates.choose(&mut prov_rng).unwrap().clone(),
                ValueKind::Amount => amounts.choose(&mut prov_rng).unwrap().clone(),
            };
            generic.insert(key.name.clone(), v);
        }
        let visual_signature: Vec<f64> = (0..config.visual_dim).map(|_| prov_rng.sample(StandardNormal)).collect();
        provider_values.push(generic.clone());
        providers.push(Provider { provider_id: pid, generic_keys: generic, visual_signature });
    }

    let draw_other = |kind: ValueKind, own: usize, rng: &mut StreamRng| -> String {
        match kind {
            ValueKind::Date => dates.choose(rng).unwrap().clone(),
            ValueKind::Amount => amounts.choose(rng).unwrap().clone(),
            _ => {
                let mut other = rng.random_range(0..n);
                if other == own {
                    other = (other + 1) % n;
                }
                let id = &identities[other];
                match kind {
                    ValueKind::Name => id.name.clone(),
                    ValueKind::Email => id.email.clone(),
                    _ => id.tax_id.clone(),
                }
            }
        }
    };

    let mut documents = Vec::new();
    let mut example_id = 0usize;
    let (lo, hi) = config.docs_per_provider;
    for provider in &providers {
        let pid = provider.provider_id;
        let mut rng = stream.child("documents").index(pid as u64).rng();
        let n_docs = rng.random_range(lo..=hi);
        for _ in 0..n_docs {
            let doc_id = documents.len();
            let mut fields = BTreeMap::new();
            for key in &config.keys {
                let value = if key.generic {
                    provider_values[pid][&key.name].clone()
                } else {
                    draw_other(key.kind, pid, &mut rng)
                };
                if key.counterparty {
                    let mut other = draw_other(key.kind, pid, &mut rng);
                    while other == value {
                        other = draw_other(key.kind, usize::MAX, &mut rng);
                    }
                    fields.insert(format!("counterparty_{}", key.name), other);
                }
                fields.insert(key.name.clone(), value);
            }
            let mut tokens: Vec<String> = fields.values().cloned().collect();
            for _ in 0..config.distractors_per_doc {
                tokens.push(distractors.choose(&mut rng).unwrap().clone());
            }
            tokens.shuffle(&mut rng);
            let visual = provider
                .visual_signature
                .iter()
                .map(|s| s + config.visual_noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let qa = config
                .keys
                .iter()
                .map(|key| {
                    let ex = QaExample {
                        example_id,
                        doc_id,
                        provider_id: pid,
                        key: key.name.clone(),
                        question_template_id: rng.random_range(0..key.templates.len()),
                        answer: fields[&key.name].clone(),
                    };
                    example_id += 1;
                    ex
                })
                .collect();
            documents.push(Document { doc_id, provider_id: pid, fields, token_stream: tokens, visual, qa });
        }
    }
    Ok(Corpus { config: config.clone(), providers, documents })
}

impl Corpus {
    pub fn document(&self, doc_id: usize) -> &Document {
        &self.documents[doc_id]
    }

    pub fn provider(&self, provider_id: usize) -> &Provider {
        &self.providers[provider_id]
    }

    pub fn docs_of(&self, provider_id: usize) -> impl Iterator<Item = &Document> {
        self.documents.iter().filter(move |d| d.provider_id == provider_id)
    }

    pub fn question(&self, ex: &QaExample) -> &str {
        let key = self.config.keys.iter().find(|k| k.name == ex.key).expect("key in schema");
        &key.templates[ex.question_template_id]
    }

    /// One JSON object per document, with the QA pairs embedded.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for doc in &self.documents {
            let rec = DocumentRecord {
                document: doc.clone(),
                provider_signature: self.providers[doc.provider_id].visual_signature.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, config: CorpusConfig) -> Result<Corpus> {
        let mut documents: Vec<Document> = Vec::new();
        let mut providers: BTreeMap<usize, Provider> = BTreeMap::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DocumentRecord = serde_json::from_str(&line)?;
            let doc = rec.document;
            if doc.doc_id != documents.len() {
                return Err(Error::Format(format!("document ids out of order at {}", doc.doc_id)));
            }
            providers.entry(doc.provider_id).or_insert_with(|| Provider {
                provider_id: doc.provider_id,
                generic_keys: config
                    .keys
                    .iter()
                    .filter(|k| k.generic)
                    .filter_map(|k| doc.fields.get(&k.name).map(|v| (k.name.clone(), v.clone())))
                    .collect(),
                visual_signature: rec.provider_signature.clone(),
            });
            documents.push(doc);
        }
        let providers: Vec<Provider> = providers.into_values().collect();
        if providers.iter().enumerate().any(|(i, p)| p.provider_id != i) {
            return Err(Error::Format("provider ids are not contiguous".into()));
        }
        Ok(Corpus { config, providers, documents })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join("corpus.jsonl"))?;
        self.write_jsonl(std::io::BufWriter::new(f))?;
        std::fs::write(dir.join("corpus_config.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let config: CorpusConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("corpus_config.json"))?)?;
        let f = std::fs::File::open(dir.join("corpus.jsonl"))?;
        Corpus::read_jsonl(std::io::BufReader::new(f), config)
    }
}

/// A provider together with the subset of its documents assigned to one split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderDocs {
    pub provider_id: usize,
    pub doc_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RedSplit {
    /// Held-out documents of providers seen in training.
    pub red_in: Vec<ProviderDocs>,
    /// Documents of providers never seen in training.
    pub red_out: Vec<ProviderDocs>,
}

impl RedSplit {
    pub fn member_ids(&self) -> BTreeSet<usize> {
        self.red_in.iter().map(|p| p.provider_id).collect()
    }

    pub fn doc_ids(&self) -> BTreeSet<usize> {
        self.red_in.iter().chain(&self.red_out).flat_map(|p| p.doc_ids.iter().copied()).collect()
    }

    /// `(provider docs, is_member)` for every RED provider, members first.
    pub fn labeled(&self) -> impl Iterator<Item = (&ProviderDocs, bool)> {
        self.red_in.iter().map(|p| (p, true)).chain(self.red_out.iter().map(|p| (p, false)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub frac_in: f64,
    pub in_providers: Vec<usize>,
    pub out_providers: Vec<usize>,
    pub blue_train: Vec<ProviderDocs>,
    pub blue_val: Vec<usize>,
    pub blue_test: Vec<usize>,
    pub red: RedSplit,
    /// In-providers with a single document: they train but cannot appear in RED.
    pub skipped: Vec<usize>,
}

impl Splits {
    pub fn train_doc_ids(&self) -> BTreeSet<usize> {
        self.blue_train.iter().flat_map(|p| p.doc_ids.iter().copied()).collect()
    }
}

/// Splits a provider's shuffled documents into (test, val, red, rest).
fn allocate(docs: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>) {
    let n = docs.len();
    match n {
        0 => (vec![], vec![], vec![], vec![]),
        1 => (vec![], vec![], vec![], docs.to_vec()),
        2 => (vec![], vec![], vec![docs[0]], vec![docs[1]]),
        _ => {
            let test = vec![docs[0]];
            let (val, rest) = if n >= 5 { (vec![docs[1]], &docs[2..]) } else { (vec![], &docs[1..]) };
            let n_red = rest.len().div_ceil(2);
            (test, val, rest[..n_red].to_vec(), rest[n_red..].to_vec())
        }
    }
}

/// Designates `frac_in` of the providers as training (D_in) providers and
/// builds the BLUE train/val/test and RED in/out document sets.
///
/// Every provider's documents are divided the same way; for D_in providers the
/// remainder trains, for D_out providers it joins the BLUE test set, so RED
/// document counts per provider follow the same distribution in both halves.
pub fn split_red(corpus: &Corpus, frac_in: f64, seed: u64) -> Result<Splits> {
    if !(frac_in > 0.0 && frac_in < 1.0) {
        return Err(Error::Config(format!("frac_in must be in (0, 1), got {frac_in}")));
    }
    let stream = SeedStream::new(seed).child("split");
    let n = corpus.providers.len();
    let n_in = ((frac_in * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 2 {
        return Err(Error::Config("need at least two providers to split".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream.child("providers").rng());
    let mut in_providers = order[..n_in].to_vec();
    let mut out_providers = order[n_in..].to_vec();
    in_providers.sort_unstable();
    out_providers.sort_unstable();

    let mut by_provider: Vec<Vec<usize>> = vec![Vec::new(); n];
    for d in &corpus.documents {
        by_provider[d.provider_id].push(d.doc_id);
    }
    let in_set: BTreeSet<usize> = in_providers.iter().copied().collect();

    let mut splits = Splits {
        frac_in,
        in_providers: in_providers.clone(),
        out_providers: out_providers.clone(),
        blue_train: vec![],
        blue_val: vec![],
        blue_test: vec![],
        red: RedSplit::default(),
        skipped: vec![],
    };
    for (pid, docs) in by_provider.iter().enumerate() {
        let mut docs = docs.clone();
        docs.shuffle(&mut stream.child("docs").index(pid as u64).rng());
        let (test, val, red, rest) = allocate(&docs);
        let sorted = |mut v: Vec<usize>| {
            v.sort_unstable();
            v
        };
        splits.blue_test.extend(&test);
        splits.blue_val.extend(&val);
        if in_set.contains(&pid) {
            if red.is_empty() {
                splits.skipped.push(pid);
                log::debug!("provider {pid} has a single document; kept out of RED");
            } else {
                splits.red.red_in.push(ProviderDocs { provider_id: pid, doc_ids: sorted(red) });
            }
            splits.blue_train.push(ProviderDocs { provider_id: pid, doc_ids: sorted(rest) });
        } else {
            let mut red = red;
            let mut rest = rest;
            if red.is_empty() {
                red = std::mem::take(&mut rest);
            }
            splits.red.red_out.push(ProviderDocs { provider_id: pid, doc_ids: sorted(red) });
            splits.blue_test.extend(rest);
        }
    }
    splits.blue_test.sort_unstable();
    splits.blue_val.sort_unstable();
    Ok(splits)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub providers: Vec<ProviderDocs>,
}

impl ClientShard {
    pub fn n_documents(&self) -> usize {
        self.providers.iter().map(|p| p.doc_ids.len()).sum()
    }

    pub fn provider_ids(&self) -> Vec<usize> {
        self.providers.iter().map(|p| p.provider_id).collect()
    }
}

/// Deals the BLUE training providers out to `n_clients` disjoint shards of
/// near-equal provider counts.
pub fn partition_blue(splits: &Splits, n_clients: usize, seed: u64) -> Result<Vec<ClientShard>> {
    let mut providers: Vec<&ProviderDocs> = splits.blue_train.iter().filter(|p| !p.doc_ids.is_empty()).collect();
    if n_clients == 0 || n_clients > providers.len() {
        return Err(Error::Config(format!(
            "cannot partition {} training providers among {n_clients} clients",
            providers.len()
        )));
    }
    providers.shuffle(&mut SeedStream::new(seed).child("partition").rng());
    let mut shards: Vec<ClientShard> =
        (0..n_clients).map(|client_id| ClientShard { client_id, providers: vec![] }).collect();
    for (i, p) in providers.into_iter().enumerate() {
        shards[i % n_clients].providers.push(p.clone());
    }
    for s in &mut shards {
        s.providers.sort_by_key(|p| p.provider_id);
    }
    Ok(shards)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRow {
    pub dataset: String,
    pub split: String,
    pub subset: String,
    pub providers: usize,
    pub documents: usize,
    pub questions: usize,
}

pub fn write_stats_csv<W: Write>(w: W, rows: &[StatsRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Provider/document/question counts per client and per subset.
pub fn corpus_stats(corpus: &Corpus, splits: &Splits, shards: &[ClientShard]) -> Vec<StatsRow> {
    let n_keys = corpus.config.keys.len();
    let row = |dataset: &str, split: &str, subset: String, docs: &[usize]| {
        let providers: BTreeSet<usize> = docs.iter().map(|&d| corpus.documents[d].provider_id).collect();
        StatsRow {
            dataset: dataset.into(),
            split: split.into(),
            subset,
            providers: providers.len(),
            documents: docs.len(),
            questions: docs.len() * n_keys,
        }
    };
    let flatten = |ps: &[ProviderDocs]| ps.iter().flat_map(|p| p.doc_ids.clone()).collect::<Vec<_>>();
    let in_set: BTreeSet<usize> = splits.in_providers.iter().copied().collect();
    let mut rows: Vec<StatsRow> =
        shards.iter().map(|s| row("BLUE", "train", s.client_id.to_string(), &flatten(&s.providers))).collect();
    for (name, docs) in [("val", &splits.blue_val), ("test", &splits.blue_test)] {
        let (pos, neg): (Vec<usize>, Vec<usize>) =
            docs.iter().partition(|&&d| in_set.contains(&corpus.documents[d].provider_id));
        rows.push(row("BLUE", name, "positive".into(), &pos));
        rows.push(row("BLUE", name, "negative".into(), &neg));
    }
    rows.push(row("RED", "test", "positive".into(), &flatten(&splits.red.red_in)));
    rows.push(row("RED", "test", "negative".into(), &flatten(&splits.red.red_out)));
    rows
}

fn write_ids(path: &Path, ids: impl IntoIterator<Item = usize>) -> Result<()> {
    let mut s = String::new();
    for id in ids {
        s.push_str(&id.to_string());
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn read_ids(path: &Path) -> Result<Vec<usize>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<usize>().map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Writes plain-text manifests (one id per line) describing a split.
/// Returns the file names written.
pub fn write_split_manifests(dir: &Path, splits: &Splits, shards: &[ClientShard]) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let docs = |ps: &[ProviderDocs]| ps.iter().flat_map(|p| p.doc_ids.clone()).collect::<BTreeSet<_>>();
    let ids = |ps: &[ProviderDocs]| ps.iter().map(|p| p.provider_id).collect::<Vec<_>>();
    let mut files: Vec<(String, Vec<usize>)> = vec![
        ("in_providers.txt".into(), splits.in_providers.clone()),
        ("out_providers.txt".into(), splits.out_providers.clone()),
        ("red_in_providers.txt".into(), ids(&splits.red.red_in)),
        ("red_out_providers.txt".into(), ids(&splits.red.red_out)),
        ("red_in_docs.txt".into(), docs(&splits.red.red_in).into_iter().collect()),
        ("red_out_docs.txt".into(), docs(&splits.red.red_out).into_iter().collect()),
        ("blue_train_docs.txt".into(), docs(&splits.blue_train).into_iter().collect()),
        ("blue_val_docs.txt".into(), splits.blue_val.clone()),
        ("blue_test_docs.txt".into(), splits.blue_test.clone()),
    ];
    for s in shards {
        files.push((format!("client_{:02}_providers.txt", s.client_id), s.provider_ids()));
    }
    for (name, v) in &files {
        write_ids(&dir.join(name), v.iter().copied())?;
    }
    Ok(files.into_iter().map(|(n, _)| n).collect())
}

/// Rebuilds the RED split from manifests written by [`write_split_manifests`].
pub fn read_red_manifests(dir: &Path, corpus: &Corpus) -> Result<RedSplit> {
    let group = |docs: Vec<usize>| -> Result<Vec<ProviderDocs>> {
        let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for d in docs {
            let doc = corpus
                .documents
                .get(d)
                .ok_or_else(|| Error::Format(format!("manifest references unknown document {d}")))?;
            by.entry(doc.provider_id).or_default().push(d);
        }
        Ok(by.into_iter().map(|(provider_id, doc_ids)| ProviderDocs { provider_id, doc_ids }).collect())
    };
    Ok(RedSplit {
        red_in: group(read_ids(&dir.join("red_in_docs.txt"))?)?,
        red_out: group(read_ids(&dir.join("red_out_docs.txt"))?)?,
    })
}
