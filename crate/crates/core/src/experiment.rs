//! Declarative experiment runs: corpus, training variants, evaluation and
//! attacks, with every artifact listed in a manifest.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{
    aggregate_features, extract_metrics, memorization_test, run_attack, write_attack_csv, write_attack_summary,
    write_metric_rows, AttackConfig, AttackResult,
};
use crate::corpus::{
    corpus_stats, generate_corpus, partition_blue, split_red, write_split_manifests, write_stats_csv, ClientShard,
    Corpus, CorpusConfig, Splits,
};
use crate::dp::DpConfig;
use crate::error::{Error, Result};
use crate::fed::{
    communication_cost, run_centralized, run_centralized_dp, run_fedavg, run_fl_provider_dp, write_round_csv,
    ClientData, FlConfig, TrainOutput,
};
use crate::model::{evaluate, write_checkpoint, write_utility_csv, ModelDims, QaModel, UtilityReport};
use crate::seed::SeedStream;

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ZeroShot,
    Central,
    CentralDp,
    Fedavg,
    FlDp,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::ZeroShot => "zero-shot",
            Mode::Central => "central",
            Mode::CentralDp => "central-dp",
            Mode::Fedavg => "fedavg",
            Mode::FlDp => "fl-dp",
        }
    }

    pub fn is_dp(self) -> bool {
        matches!(self, Mode::CentralDp | Mode::FlDp)
    }

    pub fn is_federated(self) -> bool {
        matches!(self, Mode::Fedavg | Mode::FlDp)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Mode::ZeroShot, Mode::Central, Mode::CentralDp, Mode::Fedavg, Mode::FlDp]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

fn default_frac_in() -> f64 {
    0.5
}

fn default_modes() -> Vec<Mode> {
    vec![Mode::Fedavg]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Expands into the corpus, init, train and attack streams; overrides
    /// the seeds of the nested sections.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub model: ModelDims,
    #[serde(default = "default_frac_in")]
    pub frac_in: f64,
    #[serde(default)]
    pub training: FlConfig,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    /// Clip norm, δ, and either σ or a target ε for the DP modes.
    #[serde(default)]
    pub dp: Option<DpConfig>,
    /// One DP variant per target ε; overrides `dp.epsilon_target` and `dp.noise_multiplier`.
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.corpus.validate()?;
        if !(self.frac_in > 0.0 && self.frac_in < 1.0) {
            return Err(Error::Config(format!("frac_in must be in (0, 1), got {}", self.frac_in)));
        }
        if self.training.dp.is_some() {
            return Err(Error::Config("put DP settings in the top-level [dp] table".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("no training modes selected".into()));
        }
        self.training.validate(self.corpus.n_clients)?;
        if self.modes.iter().any(|m| m.is_dp()) {
            let dp = self.dp.as_ref().ok_or_else(|| Error::Config("DP modes need a [dp] table".into()))?;
            if self.epsilons.is_empty() {
                dp.validate()?;
            } else if self.epsilons.iter().any(|e| !(*e > 0.0)) {
                return Err(Error::Config("epsilons must be positive".into()));
            }
        }
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted) JSON form.
    pub fn hash(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let bytes = serde_json::to_vec(&value)?;
        Ok(hex(&Sha256::digest(bytes)))
    }

    /// The training variants this config expands to, in summary order.
    pub fn variants(&self) -> Vec<Variant> {
        let mut modes = self.modes.clone();
        modes.sort();
        modes.dedup();
        let mut out = Vec::new();
        for mode in modes {
            if !mode.is_dp() {
                out.push(Variant { mode, dp: None });
                continue;
            }
            let base = self.dp.clone().expect("validated");
            if self.epsilons.is_empty() {
                out.push(Variant { mode, dp: Some(base) });
            } else {
                let mut eps = self.epsilons.clone();
                eps.sort_by(|a, b| b.total_cmp(a));
                eps.dedup();
                for e in eps {
                    out.push(Variant {
                        mode,
                        dp: Some(DpConfig { epsilon_target: Some(e), noise_multiplier: None, ..base.clone() }),
                    });
                }
            }
        }
        out
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub mode: Mode,
    pub dp: Option<DpConfig>,
}

impl Variant {
    pub fn epsilon(&self) -> Option<f64> {
        self.dp.as_ref().and_then(|d| d.epsilon_target)
    }

    pub fn name(&self) -> String {
        match (&self.dp, self.epsilon()) {
            (Some(_), Some(e)) => format!("{}-eps{e}", self.mode.name()),
            (Some(d), None) => format!("{}-sigma{}", self.mode.name(), d.noise_multiplier.unwrap_or(0.0)),
            (None, _) => self.mode.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub seed: u64,
    pub completed_stages: Vec<String>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    /// Paths relative to the run directory, sorted.
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ATTACK_SUMMARY_FILE: &str = "attack_summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub epsilon: Option<f64>,
    pub sigma: Option<f64>,
    pub anls: f64,
    pub acc: f64,
    pub red_in_acc: f64,
    pub red_out_acc: f64,
    pub mem_red_in_acc: f64,
    pub mem_red_out_acc: f64,
    pub communication_gb: Option<f64>,
}

pub struct Prepared {
    pub corpus: Corpus,
    pub splits: Splits,
    pub shards: Vec<ClientShard>,
    /// Files written, relative to the output directory.
    pub files: Vec<String>,
}

/// Generates the corpus, splits and client shards from the global seed and
/// writes them under `dir/corpus` and `dir/splits`.
pub fn prepare_corpus(config: &ExperimentConfig, dir: &Path) -> Result<Prepared> {
    let streams = SeedStream::new(config.seed);
    let corpus_cfg = CorpusConfig { seed: streams.child("corpus").seed_u64(), ..config.corpus.clone() };
    let corpus = generate_corpus(&corpus_cfg)?;
    corpus.save(&dir.join("corpus"))?;
    let mut files = vec!["corpus/corpus.jsonl".to_string(), "corpus/corpus_config.json".to_string()];
    let split_seed = streams.child("split").seed_u64();
    let splits = split_red(&corpus, config.frac_in, split_seed)?;
    let shards = partition_blue(&splits, config.corpus.n_clients, split_seed)?;
    for f in write_split_manifests(&dir.join("splits"), &splits, &shards)? {
        files.push(format!("splits/{f}"));
    }
    let stats = corpus_stats(&corpus, &splits, &shards);
    write_stats_csv(BufWriter::new(File::create(dir.join("corpus/stats.csv"))?), &stats)?;
    files.push("corpus/stats.csv".into());
    Ok(Prepared { corpus, splits, shards, files })
}

struct Run<'a> {
    dir: &'a Path,
    manifest: RunManifest,
    start: Instant,
}

impl Run<'_> {
    fn add(&mut self, rel: impl Into<String>) {
        self.manifest.artifacts.push(rel.into());
    }

    fn create(&mut self, rel: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.add(rel);
        Ok(BufWriter::new(File::create(path)?))
    }

    fn done(&mut self, stage: &str) -> Result<()> {
        self.manifest.completed_stages.push(stage.to_string());
        self.write_manifest()
    }

    fn write_manifest(&mut self) -> Result<()> {
        self.manifest.wall_clock_seconds = self.start.elapsed().as_secs_f64();
        let mut m = self.manifest.clone();
        m.artifacts.push(MANIFEST_FILE.to_string());
        m.artifacts.sort();
        m.artifacts.dedup();
        std::fs::write(self.dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }
}

/// Runs the full pipeline into `out_dir`. On failure the manifest records
/// the completed stages and the error before it is returned.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunManifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut run = Run {
        dir: out_dir,
        manifest: RunManifest {
            config_hash: config.hash()?,
            tool_version: TOOL_VERSION.to_string(),
            seed: config.seed,
            completed_stages: vec![],
            failed_stage: None,
            error: None,
            artifacts: vec![],
            wall_clock_seconds: 0.0,
        },
        start: Instant::now(),
    };
    let mut stage = String::from("config");
    let result = pipeline(config, &mut run, &mut stage);
    if let Err(e) = &result {
        run.manifest.failed_stage = Some(stage);
        run.manifest.error = Some(e.to_string());
    }
    run.write_manifest()?;
    result?;
    let mut m = run.manifest.clone();
    m.artifacts.push(MANIFEST_FILE.to_string());
    m.artifacts.sort();
    Ok(m)
}

fn pipeline(config: &ExperimentConfig, run: &mut Run<'_>, stage: &mut String) -> Result<()> {
    let streams = SeedStream::new(config.seed);
    std::fs::write(run.dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    run.add("config.json");
    run.done("config")?;

    *stage = "corpus".into();
    let prepared = prepare_corpus(config, run.dir)?;
    for f in &prepared.files {
        run.add(f.clone());
    }
    let Prepared { corpus, splits, shards, .. } = prepared;
    run.done("corpus")?;

    let model = QaModel::from_corpus(&corpus, &config.model)?;
    let init = model.init_params(streams.child("init").seed_u64());
    let clients = ClientData::from_shards(&model, &corpus, &shards)?;
    let sets: Vec<(&str, Vec<usize>)> = vec![
        ("blue_test", splits.blue_test.clone()),
        ("blue_val", splits.blue_val.clone()),
        ("red_in", splits.red.red_in.iter().flat_map(|p| p.doc_ids.clone()).collect()),
        ("red_out", splits.red.red_out.iter().flat_map(|p| p.doc_ids.clone()).collect()),
    ];
    let encoded: Vec<(&str, Vec<_>)> = sets
        .iter()
        .filter(|(_, ids)| !ids.is_empty())
        .map(|(n, ids)| Ok((*n, model.encode_docs(&corpus, ids.iter())?)))
        .collect::<Result<_>>()?;
    let mem_key =
        config.attack.as_ref().map(|a| a.mem_key.clone()).unwrap_or_else(|| crate::attack::DEFAULT_MEM_KEY.into());

    let mut summary = Vec::new();
    let mut attack_results: Vec<(String, Vec<AttackResult>)> = Vec::new();
    for variant in config.variants() {
        let name = variant.name();
        *stage = format!("train:{name}");
        let fl =
            FlConfig { dp: variant.dp.clone(), seed: streams.child("train").seed_u64(), ..config.training.clone() };
        let out: TrainOutput = match variant.mode {
            Mode::ZeroShot => TrainOutput { params: init.clone(), records: vec![], sigma: None, m: 0 },
            Mode::Central => run_centralized(&model, &init, &clients, &fl)?,
            Mode::CentralDp => run_centralized_dp(&model, &init, &clients, &fl)?,
            Mode::Fedavg => run_fedavg(&model, &init, &clients, &fl)?,
            Mode::FlDp => run_fl_provider_dp(&model, &init, &clients, &fl)?,
        };
        write_checkpoint(run.create(&format!("{name}/model.ckpt"))?, &out.params)?;
        if variant.mode != Mode::ZeroShot {
            write_round_csv(run.create(&format!("{name}/rounds.csv"))?, &out.records)?;
        }
        run.done(&format!("train:{name}"))?;

        *stage = format!("evaluate:{name}");
        let mut reports: Vec<(String, UtilityReport)> = encoded
            .iter()
            .map(|(set, ex)| Ok((set.to_string(), evaluate(&model, &out.params, ex)?)))
            .collect::<Result<_>>()?;
        let mem = memorization_test(&model, &out.params, &corpus, &splits.red, &mem_key)?;
        reports.push(("memorization_red_in".into(), mem.red_in.clone()));
        reports.push(("memorization_red_out".into(), mem.red_out.clone()));
        write_utility_csv(run.create(&format!("{name}/utility.csv"))?, &reports)?;
        let get = |s: &str| reports.iter().find(|(n, _)| n == s).map(|(_, r)| r.clone());
        let test = get("blue_test").ok_or_else(|| Error::Input("the BLUE test split is empty".into()))?;
        let sampled: Vec<usize> = out.records.iter().map(|r| r.sampled_clients.len()).collect();
        summary.push(SummaryRow {
            method: variant.mode.name().to_string(),
            epsilon: variant.epsilon(),
            sigma: out.sigma,
            anls: test.anls,
            acc: test.acc,
            red_in_acc: get("red_in").map(|r| r.acc).unwrap_or(0.0),
            red_out_acc: get("red_out").map(|r| r.acc).unwrap_or(0.0),
            mem_red_in_acc: mem.red_in.acc,
            mem_red_out_acc: mem.red_out.acc,
            communication_gb: variant.mode.is_federated().then(|| {
                communication_cost(&sampled, model.layout().trainable_count(), config.training.bytes_per_param)
            }),
        });
        run.done(&format!("evaluate:{name}"))?;

        if let Some(attack) = &config.attack {
            *stage = format!("attack:{name}");
            let rows = extract_metrics(&model, &init, &out.params, &corpus, &splits.red, Some(&attack.mem_key))?;
            write_metric_rows(run.create(&format!("{name}/metric_rows.csv"))?, &rows)?;
            let features = aggregate_features(&rows, attack.features)?;
            let attack_seed = streams.child("attack").seed_u64();
            let mut results = Vec::new();
            for &setting in &attack.settings {
                results.extend(run_attack(&features, setting, attack, attack_seed)?);
            }
            write_attack_csv(run.create(&format!("{name}/attack.csv"))?, &results)?;
            attack_results.push((name.clone(), results));
            run.done(&format!("attack:{name}"))?;
        }
    }

    *stage = "summary".into();
    write_summary_csv(run.create(SUMMARY_FILE)?, &summary)?;
    if !attack_results.is_empty() {
        write_model_attack_summary(run.create(ATTACK_SUMMARY_FILE)?, &attack_results)?;
    }
    run.done("summary")?;
    Ok(())
}

const SUMMARY_HEADER: [&str; 10] = [
    "method",
    "epsilon",
    "sigma",
    "anls",
    "acc",
    "red_in_acc",
    "red_out_acc",
    "mem_red_in_acc",
    "mem_red_out_acc",
    "communication_gb",
];

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map(|x| format!("{x:.prec$}")).unwrap_or_default()
}

pub fn write_summary_csv<W: std::io::Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_HEADER)?;
    for r in rows {
        out.write_record([
            r.method.clone(),
            opt(r.epsilon, 4),
            opt(r.sigma, 8),
            format!("{:.4}", r.anls),
            format!("{:.4}", r.acc),
            format!("{:.4}", r.red_in_acc),
            format!("{:.4}", r.red_out_acc),
            format!("{:.4}", r.mem_red_in_acc),
            format!("{:.4}", r.mem_red_out_acc),
            opt(r.communication_gb, 6),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn write_model_attack_summary<W: std::io::Write>(w: W, per_model: &[(String, Vec<AttackResult>)]) -> Result<()> {
    let mut buf = Vec::new();
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "setting", "features", "s", "r", "mean", "std"])?;
    for (model, results) in per_model {
        buf.clear();
        write_attack_summary(&mut buf, results)?;
        let mut rd = csv::Reader::from_reader(buf.as_slice());
        for rec in rd.records() {
            let rec = rec?;
            let mut row = vec![model.clone()];
            row.extend(rec.iter().map(str::to_string));
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|e| Error::Format(format!("{s:?}: {e}")))
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let missing: Vec<&str> = SUMMARY_HEADER.iter().copied().filter(|h| !header.iter().any(|x| x == h)).collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!("{} lacks columns {}", path.display(), missing.join(", "))));
    }
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
    rd.records()
        .map(|rec| {
            let rec = rec?;
            let f = |n: &str| rec.get(col(n)).unwrap_or("");
            Ok(SummaryRow {
                method: f("method").to_string(),
                epsilon: parse_opt(f("epsilon"))?,
                sigma: parse_opt(f("sigma"))?,
                anls: num(f("anls"))?,
                acc: num(f("acc"))?,
                red_in_acc: num(f("red_in_acc"))?,
                red_out_acc: num(f("red_out_acc"))?,
                mem_red_in_acc: num(f("mem_red_in_acc"))?,
                mem_red_out_acc: num(f("mem_red_out_acc"))?,
                communication_gb: parse_opt(f("communication_gb"))?,
            })
        })
        .collect()
}

/// Merges the summaries of several runs, ordered by method then decreasing ε
/// (non-private rows first).
pub fn summarize(run_dirs: &[PathBuf]) -> Result<Vec<SummaryRow>> {
    if run_dirs.is_empty() {
        return Err(Error::Input("no run directories given".into()));
    }
    let mut rows = Vec::new();
    for d in run_dirs {
        if !d.join(MANIFEST_FILE).exists() {
            return Err(Error::Input(format!("{} has no {MANIFEST_FILE}", d.display())));
        }
        rows.extend(read_summary_csv(&d.join(SUMMARY_FILE))?);
    }
    let rank = |m: &str| m.parse::<Mode>().map(|m| m as usize).unwrap_or(usize::MAX);
    rows.sort_by(|a, b| {
        rank(&a.method)
            .cmp(&rank(&b.method))
            .then_with(|| a.method.cmp(&b.method))
            .then_with(|| b.epsilon.unwrap_or(f64::INFINITY).total_cmp(&a.epsilon.unwrap_or(f64::INFINITY)))
    });
    Ok(rows)
}

/// Concatenates the attack summaries of several runs into one CSV keyed by
/// model, setting, features and s. Returns false when no run has one.
pub fn summarize_attacks<W: std::io::Write>(w: W, run_dirs: &[PathBuf]) -> Result<bool> {
    let mut out = csv::Writer::from_writer(w);
    let mut any = false;
    for d in run_dirs {
        let p = d.join(ATTACK_SUMMARY_FILE);
        if !p.exists() {
            continue;
        }
        let mut rd = csv::Reader::from_path(&p)?;
        if !any {
            out.write_record(rd.headers()?)?;
            any = true;
        }
        for rec in rd.records() {
            out.write_record(&rec?)?;
        }
    }
    out.flush()?;
    Ok(any)
}
