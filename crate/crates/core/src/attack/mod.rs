//! Provider membership inference: per-query metrics, per-provider features,
//! the unsupervised (AZK) and supervised (APK) attacks, the hard-voting
//! ensemble, and memorization tests.

mod forest;
mod kmeans;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use forest::{DecisionTree, ForestParams, RandomForest};
pub use kmeans::{kmeans, standardize, KMeansFit, MAX_ITER, RESTARTS};

use crate::corpus::{Corpus, RedSplit};
use crate::error::{Error, Result};
use crate::model::{
    evaluate_predictions, redact, ParameterVector, QaModel, UtilityReport, ANLS_THRESHOLD, REDACT_THRESHOLD,
};
use crate::seed::SeedStream;
use crate::text::{exact_match, nls};

/// Generic key used for memorization queries.
pub const DEFAULT_MEM_KEY: &str = "name";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub provider_id: usize,
    pub example_id: usize,
    pub doc_id: usize,
    pub member: bool,
    pub acc: f64,
    pub nls: f64,
    pub loss: f64,
    pub conf: f64,
    /// `L_pre - L_post`.
    pub delta_loss: f64,
    /// `conf_post - conf_pre`.
    pub delta_conf: f64,
    /// Present only on the memorization-key query of a document whose
    /// redaction removed something.
    pub nls_mem: Option<f64>,
    pub delta_nls_mem: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureGroups {
    G1,
    G12,
    G123,
    G1234,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Acc,
    Nls,
    Loss,
    Conf,
    DeltaLoss,
    DeltaConf,
    NlsMem,
    DeltaNlsMem,
}

impl FeatureGroups {
    pub fn metrics(self) -> &'static [Metric] {
        use Metric::*;
        const ALL: [Metric; 8] = [Acc, Nls, Loss, Conf, DeltaLoss, DeltaConf, NlsMem, DeltaNlsMem];
        let n = match self {
            FeatureGroups::G1 => 2,
            FeatureGroups::G12 => 4,
            FeatureGroups::G123 => 6,
            FeatureGroups::G1234 => 8,
        };
        &ALL[..n]
    }

    pub fn dim(self) -> usize {
        2 * self.metrics().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureGroups::G1 => "g1",
            FeatureGroups::G12 => "g12",
            FeatureGroups::G123 => "g123",
            FeatureGroups::G1234 => "g1234",
        }
    }

    /// Offset of a metric's mean in the feature vector.
    pub fn offset(self, m: Metric) -> Option<usize> {
        self.metrics().iter().position(|&x| x == m).map(|i| 2 * i)
    }
}

impl std::str::FromStr for FeatureGroups {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g1" => Ok(FeatureGroups::G1),
            "g12" => Ok(FeatureGroups::G12),
            "g123" => Ok(FeatureGroups::G123),
            "g1234" => Ok(FeatureGroups::G1234),
            _ => Err(Error::Config(format!("unknown feature groups {s:?}"))),
        }
    }
}

impl MetricRow {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Acc => Some(self.acc),
            Metric::Nls => Some(self.nls),
            Metric::Loss => Some(self.loss),
            Metric::Conf => Some(self.conf),
            Metric::DeltaLoss => Some(self.delta_loss),
            Metric::DeltaConf => Some(self.delta_conf),
            Metric::NlsMem => self.nls_mem,
            Metric::DeltaNlsMem => self.delta_nls_mem,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemorizationRow {
    pub doc_id: usize,
    pub provider_id: usize,
    pub gold: String,
    /// Answer on the redacted document.
    pub prediction: String,
    pub conf: f64,
    pub nls_mem: f64,
    pub delta_nls_mem: f64,
}

/// Memorization queries for `key` on each document.
///
/// Documents where redacting the gold answer removes nothing are skipped.
/// For the unprompted probe, an empty first output means there is nothing to
/// compare, and `delta_nls_mem` is 0.
pub fn memorization_metrics(
    model: &QaModel,
    params: &ParameterVector,
    corpus: &Corpus,
    doc_ids: &[usize],
    key: &str,
) -> Result<Vec<MemorizationRow>> {
    let spec = corpus
        .config
        .keys
        .iter()
        .find(|k| k.name == key)
        .ok_or_else(|| Error::Input(format!("unknown key {key:?}")))?;
    if !spec.generic {
        return Err(Error::Input(format!("memorization key {key:?} is not constant per provider")));
    }
    doc_ids
        .par_iter()
        .filter_map(|&d| {
            let doc = corpus.document(d);
            let gold = doc.fields.get(key)?;
            let redacted = redact(doc, gold, REDACT_THRESHOLD);
            if redacted.token_stream.len() == doc.token_stream.len() {
                return None;
            }
            Some((|| {
                let pred = model.forward(params, &model.encode(&redacted, Some(key))?, None)?;
                let o1 = model.forward(params, &model.encode(doc, None)?, None)?.answer;
                let delta = if o1.is_empty() {
                    0.0
                } else {
                    let stripped = redact(doc, &o1, REDACT_THRESHOLD);
                    let o2 = model.forward(params, &model.encode(&stripped, None)?, None)?.answer;
                    nls(&o1, &o2)
                };
                Ok(MemorizationRow {
                    doc_id: d,
                    provider_id: doc.provider_id,
                    gold: gold.clone(),
                    nls_mem: nls(&pred.answer, gold),
                    prediction: pred.answer,
                    conf: pred.conf,
                    delta_nls_mem: delta,
                })
            })())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemorizationReport {
    pub red_in: UtilityReport,
    pub red_out: UtilityReport,
}

/// Accuracy of answering `key` from redacted RED documents, per half.
pub fn memorization_test(
    model: &QaModel,
    params: &ParameterVector,
    corpus: &Corpus,
    red: &RedSplit,
    key: &str,
) -> Result<MemorizationReport> {
    let score = |half: &[crate::corpus::ProviderDocs]| -> Result<UtilityReport> {
        let docs: Vec<usize> = half.iter().flat_map(|p| p.doc_ids.iter().copied()).collect();
        let rows = memorization_metrics(model, params, corpus, &docs, key)?;
        evaluate_predictions(rows.iter().map(|r| (r.prediction.as_str(), r.gold.as_str(), r.conf)), ANLS_THRESHOLD)
    };
    Ok(MemorizationReport { red_in: score(&red.red_in)?, red_out: score(&red.red_out)? })
}

/// One row per RED question, comparing the model before and after fine-tuning.
pub fn extract_metrics(
    model: &QaModel,
    pre: &ParameterVector,
    post: &ParameterVector,
    corpus: &Corpus,
    red: &RedSplit,
    mem_key: Option<&str>,
) -> Result<Vec<MetricRow>> {
    if pre.layout != post.layout {
        return Err(Error::Dimension { expected: pre.len(), actual: post.len() });
    }
    let labeled: Vec<(usize, &[usize], bool)> =
        red.labeled().map(|(p, m)| (p.provider_id, p.doc_ids.as_slice(), m)).collect();
    let per_provider: Vec<Vec<MetricRow>> = labeled
        .par_iter()
        .map(|&(provider_id, docs, member)| {
            if docs.is_empty() {
                log::warn!("provider {provider_id} has no RED documents; skipped");
                return Ok(vec![]);
            }
            let mem: BTreeMap<usize, MemorizationRow> = match mem_key {
                Some(k) => {
                    memorization_metrics(model, post, corpus, docs, k)?.into_iter().map(|r| (r.doc_id, r)).collect()
                }
                None => BTreeMap::new(),
            };
            let mut rows = Vec::new();
            for &d in docs {
                let doc = corpus.document(d);
                for ex in &doc.qa {
                    let enc = model.encode_example(doc, ex)?;
                    let a = model.forward(post, &enc.input, Some(enc.gold))?;
                    let b = model.forward(pre, &enc.input, Some(enc.gold))?;
                    let m = mem.get(&d).filter(|_| Some(ex.key.as_str()) == mem_key);
                    let (loss_post, loss_pre) = (a.loss.unwrap_or(0.0), b.loss.unwrap_or(0.0));
                    rows.push(MetricRow {
                        provider_id,
                        example_id: ex.example_id,
                        doc_id: d,
                        member,
                        acc: if exact_match(&a.answer, &ex.answer) { 1.0 } else { 0.0 },
                        nls: nls(&a.answer, &ex.answer),
                        loss: loss_post,
                        conf: a.conf,
                        delta_loss: loss_pre - loss_post,
                        delta_conf: a.conf - b.conf,
                        nls_mem: m.map(|r| r.nls_mem),
                        delta_nls_mem: m.map(|r| r.delta_nls_mem),
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<MetricRow> = per_provider.into_iter().flatten().collect();
    if rows.iter().any(|r| ![r.loss, r.conf, r.delta_loss, r.delta_conf].iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("attack metrics".into()));
    }
    Ok(rows)
}

pub fn write_metric_rows<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProviderFeatureVector {
    pub provider_id: usize,
    pub features: Vec<f64>,
    pub n_queries: usize,
    pub member: bool,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(mean, std)` of each enabled metric over one provider's rows, in group
/// order. A metric absent from every row contributes `(0, 0)`.
pub fn aggregate_provider(rows: &[&MetricRow], groups: FeatureGroups) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::Input("cannot aggregate an empty group".into()));
    }
    let mut f = Vec::with_capacity(groups.dim());
    for &m in groups.metrics() {
        let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(m)).collect();
        let (mean, std) = mean_std(&vals);
        f.extend([mean, std]);
    }
    Ok(f)
}

/// Groups rows by provider (ascending id) and aggregates each group.
pub fn aggregate_features(rows: &[MetricRow], groups: FeatureGroups) -> Result<Vec<ProviderFeatureVector>> {
    let mut by: BTreeMap<usize, Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        by.entry(r.provider_id).or_default().push(r);
    }
    by.into_iter()
        .map(|(provider_id, rs)| {
            Ok(ProviderFeatureVector {
                provider_id,
                features: aggregate_provider(&rs, groups)?,
                n_queries: rs.len(),
                member: rs[0].member,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AzkOutput {
    pub labels: Vec<bool>,
    /// All feature vectors were identical; every provider is labeled non-member.
    pub degenerate: bool,
}

/// Two-means on standardized G1 features; the cluster with the higher mean
/// accuracy is labeled member.
pub fn azk_attack(features: &[ProviderFeatureVector], seed: u64) -> Result<AzkOutput> {
    if features.len() < 2 {
        return Err(Error::Input("AZK needs at least two providers".into()));
    }
    let g1 = FeatureGroups::G1.dim();
    if features.iter().any(|f| f.features.len() < g1) {
        return Err(Error::Input("AZK needs G1 features".into()));
    }
    let raw: Vec<Vec<f64>> = features.iter().map(|f| f.features[..g1].to_vec()).collect();
    if raw.iter().all(|r| r == &raw[0]) {
        return Ok(AzkOutput { labels: vec![false; raw.len()], degenerate: true });
    }
    let fit = kmeans(&standardize(&raw), 2, seed)?;
    let labels = higher_mean_cluster(&fit.assignments, raw.iter().map(|r| r[0]));
    Ok(AzkOutput { labels, degenerate: false })
}

/// Labels members as the cluster whose mean of `key` is larger; ties favor neither (all non-member).
fn higher_mean_cluster(assignments: &[usize], key: impl Iterator<Item = f64>) -> Vec<bool> {
    let (mut sum, mut cnt) = ([0.0; 2], [0usize; 2]);
    for (&a, v) in assignments.iter().zip(key) {
        sum[a] += v;
        cnt[a] += 1;
    }
    let mean = |c: usize| if cnt[c] > 0 { sum[c] / cnt[c] as f64 } else { f64::NEG_INFINITY };
    let member = match mean(0).partial_cmp(&mean(1)) {
        Some(std::cmp::Ordering::Greater) => Some(0),
        Some(std::cmp::Ordering::Less) => Some(1),
        _ => None,
    };
    assignments.iter().map(|&a| Some(a) == member).collect()
}

/// Random forest on class-balanced training providers.
pub fn apk_attack(train: &[(Vec<f64>, bool)], test: &[Vec<f64>], seed: u64) -> Result<Vec<bool>> {
    let stream = SeedStream::new(seed).child("apk");
    let mut pos: Vec<usize> = (0..train.len()).filter(|&i| train[i].1).collect();
    let mut neg: Vec<usize> = (0..train.len()).filter(|&i| !train[i].1).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Input("APK training set contains a single class".into()));
    }
    let mut rng = stream.child("balance").rng();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let n = pos.len().min(neg.len());
    let mut idx: Vec<usize> = pos[..n].iter().chain(&neg[..n]).copied().collect();
    idx.sort_unstable();
    let x: Vec<Vec<f64>> = idx.iter().map(|&i| train[i].0.clone()).collect();
    let y: Vec<bool> = idx.iter().map(|&i| train[i].1).collect();
    let forest = RandomForest::fit(&x, &y, ForestParams::default(), stream.child("forest").seed_u64())?;
    Ok(test.iter().map(|t| forest.predict(t)).collect())
}

/// Majority of the main classifier, `nls_mem > 0`, and two-means on `delta_nls_mem`.
pub fn ensemble(main: &[bool], nls_mem: &[f64], delta_nls_mem: &[f64], seed: u64) -> Result<Vec<bool>> {
    if main.len() != nls_mem.len() || main.len() != delta_nls_mem.len() {
        return Err(Error::Input("ensemble inputs differ in length".into()));
    }
    let cls1: Vec<bool> = nls_mem.iter().map(|&v| v > 0.0).collect();
    let cls2: Vec<bool> = if main.len() < 2 || delta_nls_mem.iter().all(|&v| v == delta_nls_mem[0]) {
        vec![false; main.len()]
    } else {
        let pts: Vec<Vec<f64>> = delta_nls_mem.iter().map(|&v| vec![v]).collect();
        let fit = kmeans(&pts, 2, seed)?;
        higher_mean_cluster(&fit.assignments, delta_nls_mem.iter().copied())
    };
    Ok((0..main.len()).map(|i| (main[i] as u8 + cls1[i] as u8 + cls2[i] as u8) >= 2).collect())
}

/// Indices of providers with more than `s` queries.
pub fn filter_ts(features: &[ProviderFeatureVector], s: usize) -> Vec<usize> {
    (0..features.len()).filter(|&i| features[i].n_queries > s).collect()
}

/// Percentage of correct labels.
pub fn attack_accuracy(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Input("predictions must be non-empty and match the labels".into()));
    }
    let ok = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(100.0 * ok as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackSetting {
    Azk,
    Apk,
    /// APK as the main classifier, voted with the two memorization classifiers.
    Ensemble,
}

impl AttackSetting {
    pub fn name(self) -> &'static str {
        match self {
            AttackSetting::Azk => "azk",
            AttackSetting::Apk => "apk",
            AttackSetting::Ensemble => "ensemble",
        }
    }
}

impl std::str::FromStr for AttackSetting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "azk" => Ok(AttackSetting::Azk),
            "apk" => Ok(AttackSetting::Apk),
            "ensemble" => Ok(AttackSetting::Ensemble),
            _ => Err(Error::Config(format!("unknown attack setting {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub s: usize,
    pub r: f64,
    pub n_seeds: usize,
    pub features: FeatureGroups,
    pub settings: Vec<AttackSetting>,
    pub mem_key: String,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            s: 5,
            r: 0.15,
            n_seeds: 5,
            features: FeatureGroups::G1234,
            settings: vec![AttackSetting::Azk, AttackSetting::Apk],
            mem_key: DEFAULT_MEM_KEY.to_string(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::Config(format!("attack sampling ratio r must be in (0, 1), got {}", self.r)));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("attack needs at least one seed".into()));
        }
        if self.settings.contains(&AttackSetting::Ensemble) && self.features != FeatureGroups::G1234 {
            return Err(Error::Config("the ensemble needs G4 features (g1234)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackResult {
    pub setting: AttackSetting,
    pub features: FeatureGroups,
    pub s: usize,
    pub r: f64,
    pub seed: usize,
    pub accuracy: f64,
    pub n_test: usize,
}

/// Runs one attack setting over `config.n_seeds` seeds.
///
/// Each seed draws a fraction `r` of the T_s providers as the attacker's
/// labeled set; every setting is scored on the remaining providers.
pub fn run_attack(
    features: &[ProviderFeatureVector],
    setting: AttackSetting,
    config: &AttackConfig,
    seed: u64,
) -> Result<Vec<AttackResult>> {
    config.validate()?;
    let ts = filter_ts(features, config.s);
    if ts.is_empty() {
        return Err(Error::Input(format!("no provider has more than {} questions", config.s)));
    }
    let stream = SeedStream::new(seed).child("attack");
    (0..config.n_seeds)
        .map(|k| {
            let st = stream.index(k as u64);
            let mut order = ts.clone();
            order.shuffle(&mut st.child("split").rng());
            let n_train = ((config.r * ts.len() as f64).round() as usize).clamp(1, ts.len() - 1);
            let (train_idx, test_idx) = order.split_at(n_train);
            let mut test_idx = test_idx.to_vec();
            test_idx.sort_unstable();
            let test: Vec<&ProviderFeatureVector> = test_idx.iter().map(|&i| &features[i]).collect();
            let truth: Vec<bool> = test.iter().map(|f| f.member).collect();
            let pred = match setting {
                AttackSetting::Azk => {
                    let owned: Vec<ProviderFeatureVector> = test.iter().map(|&f| f.clone()).collect();
                    azk_attack(&owned, st.child("azk").seed_u64())?.labels
                }
                AttackSetting::Apk | AttackSetting::Ensemble => {
                    let train: Vec<(Vec<f64>, bool)> =
                        train_idx.iter().map(|&i| (features[i].features.clone(), features[i].member)).collect();
                    let xs: Vec<Vec<f64>> = test.iter().map(|f| f.features.clone()).collect();
                    let main = apk_attack(&train, &xs, st.child("apk").seed_u64())?;
                    if setting == AttackSetting::Ensemble {
                        let at = |m| config.features.offset(m).expect("validated");
                        let mem: Vec<f64> = test.iter().map(|f| f.features[at(Metric::NlsMem)]).collect();
                        let dmem: Vec<f64> = test.iter().map(|f| f.features[at(Metric::DeltaNlsMem)]).collect();
                        ensemble(&main, &mem, &dmem, st.child("ensemble").seed_u64())?
                    } else {
                        main
                    }
                }
            };
            Ok(AttackResult {
                setting,
                features: config.features,
                s: config.s,
                r: config.r,
                seed: k,
                accuracy: attack_accuracy(&pred, &truth)?,
                n_test: truth.len(),
            })
        })
        .collect()
}

/// Mean and population std of accuracy over seeds.
pub fn eval_attack(results: &[AttackResult]) -> Result<(f64, f64)> {
    if results.is_empty() {
        return Err(Error::Input("no attack results".into()));
    }
    let acc: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    Ok(mean_std(&acc))
}

pub fn write_attack_csv<W: Write>(w: W, results: &[AttackResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["setting", "features", "s", "r", "seed", "accuracy"])?;
    for r in results {
        out.write_record([
            r.setting.name().to_string(),
            r.features.name().to_string(),
            r.s.to_string(),
            r.r.to_string(),
            r.seed.to_string(),
            format!("{:.4}", r.accuracy),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Rows `setting,features,s,r,mean,std` for each (setting, features, s) group.
pub fn write_attack_summary<W: Write>(w: W, results: &[AttackResult]) -> Result<()> {
    let mut groups: BTreeMap<(AttackSetting, FeatureGroups, usize), Vec<AttackResult>> = BTreeMap::new();
    for r in results {
        groups.entry((r.setting, r.features, r.s)).or_default().push(r.clone());
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["setting", "features", "s", "r", "mean", "std"])?;
    for ((setting, features, s), rs) in groups {
        let (m, sd) = eval_attack(&rs)?;
        out.write_record([
            setting.name().to_string(),
            features.name().to_string(),
            s.to_string(),
            rs[0].r.to_string(),
            format!("{m:.4}"),
            format!("{sd:.4}"),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Ids of RED documents the attack reads.
pub fn attack_document_ids(red: &RedSplit) -> BTreeSet<usize> {
    red.doc_ids()
}
