use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use provider_dp::attack::{
    aggregate_features, extract_metrics, run_attack, write_attack_csv, write_attack_summary, write_metric_rows,
    AttackConfig, AttackSetting, FeatureGroups, DEFAULT_MEM_KEY,
};
use provider_dp::corpus::{read_red_manifests, Corpus};
use provider_dp::dp::{calibrate_sigma, epsilon_for};
use provider_dp::experiment::{
    prepare_corpus, run_experiment, summarize, summarize_attacks, write_summary_csv, ExperimentConfig, Mode,
    SCHEMA_VERSION,
};
use provider_dp::model::{read_checkpoint, ModelDims, QaModel};
use provider_dp::{Error, Result};

#[derive(Parser)]
#[command(name = "pdp", version, about = "Provider-level DP federated learning simulator")]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its split manifests.
    GenCorpus(RunArgs),
    /// Train and evaluate one model variant.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        mode: Mode,
    },
    /// Run a membership-inference attack against two checkpoints.
    Attack {
        #[arg(long)]
        model_pre: PathBuf,
        #[arg(long)]
        model_post: PathBuf,
        /// Directory holding the split manifests (red_in_docs.txt, red_out_docs.txt).
        #[arg(long)]
        red: PathBuf,
        /// Corpus directory; defaults to `<red>/../corpus`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "apk")]
        setting: AttackSetting,
        #[arg(long, default_value_t = 5)]
        s: usize,
        #[arg(long, default_value_t = 0.15)]
        r: f64,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value = "g1234")]
        features: FeatureGroups,
        #[arg(long, default_value = DEFAULT_MEM_KEY)]
        mem_key: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print ε for a noise multiplier.
    Account {
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        rounds: u64,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
    },
    /// Print the smallest noise multiplier reaching a target ε.
    Calibrate {
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        rounds: u64,
    },
    /// Run the full configured experiment.
    Run(RunArgs),
    /// Merge the summaries of several runs.
    Summarize {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output CSV; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut config = match &args.config {
        Some(p) => ExperimentConfig::from_toml(
            &std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        )?,
        None => ExperimentConfig::from_toml(&format!("schema_version = {SCHEMA_VERSION}"))?,
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let out = args
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))?;
    Ok((config, out))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn gen_corpus(args: &RunArgs) -> Result<()> {
    let (config, out) = load_config(args)?;
    let p = prepare_corpus(&config, &out)?;
    log::info!(
        "wrote {} documents from {} providers to {}",
        p.corpus.documents.len(),
        p.corpus.providers.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attack(
    model_pre: &Path,
    model_post: &Path,
    red_dir: &Path,
    corpus_dir: Option<&Path>,
    config: &AttackConfig,
    setting: AttackSetting,
    seed: u64,
    out: &Path,
) -> Result<()> {
    config.validate()?;
    let corpus_dir = corpus_dir.map(Path::to_path_buf).unwrap_or_else(|| red_dir.join("..").join("corpus"));
    let corpus = Corpus::load(&corpus_dir)?;
    let red = read_red_manifests(red_dir, &corpus)?;
    let pre = read_checkpoint(std::io::BufReader::new(File::open(model_pre)?))?;
    let post = read_checkpoint(std::io::BufReader::new(File::open(model_post)?))?;
    let dims = ModelDims { embed_dim: pre.layout.embed_dim, hidden_dim: pre.layout.hidden_dim, ..Default::default() };
    let model = QaModel::from_corpus(&corpus, &dims)?.with_frozen(pre.layout.frozen.clone());
    if *model.layout() != pre.layout || *model.layout() != post.layout {
        return Err(Error::Input("checkpoints do not match the corpus vocabulary".into()));
    }
    let rows = extract_metrics(&model, &pre, &post, &corpus, &red, Some(&config.mem_key))?;
    write_metric_rows(create(&out.join("metric_rows.csv"))?, &rows)?;
    let features = aggregate_features(&rows, config.features)?;
    let results = run_attack(&features, setting, config, seed)?;
    write_attack_csv(create(&out.join("attack.csv"))?, &results)?;
    write_attack_summary(create(&out.join("attack_summary.csv"))?, &results)?;
    let (mean, std) = provider_dp::attack::eval_attack(&results)?;
    println!("setting={} accuracy={mean:.4} std={std:.4}", setting.name());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(args) => gen_corpus(&args),
        Command::Train { run, mode } => {
            let (mut config, out) = load_config(&run)?;
            config.modes = vec![mode];
            config.attack = None;
            let m = run_experiment(&config, &out)?;
            log::info!("wrote {} artifacts to {}", m.artifacts.len(), out.display());
            Ok(())
        }
        Command::Run(args) => {
            let (config, out) = load_config(&args)?;
            let m = run_experiment(&config, &out)?;
            log::info!("wrote {} artifacts to {} in {:.1}s", m.artifacts.len(), out.display(), m.wall_clock_seconds);
            Ok(())
        }
        Command::Attack { model_pre, model_post, red, corpus, setting, s, r, seeds, features, mem_key, seed, out } => {
            let config = AttackConfig { s, r, n_seeds: seeds, features, settings: vec![setting], mem_key };
            attack(&model_pre, &model_post, &red, corpus.as_deref(), &config, setting, seed, &out)
        }
        Command::Account { sigma, q, rounds, delta } => {
            let r = epsilon_for(sigma, q, rounds, delta).map_err(as_config)?;
            println!("epsilon={:.6} order={}", r.epsilon, r.order);
            Ok(())
        }
        Command::Calibrate { epsilon, delta, q, rounds } => {
            let s = calibrate_sigma(epsilon, delta, q, rounds).map_err(as_config)?;
            println!("sigma={s:.6}");
            Ok(())
        }
        Command::Summarize { runs, out } => {
            let rows = summarize(&runs)?;
            match &out {
                Some(p) => {
                    write_summary_csv(create(p)?, &rows)?;
                    let attacks = p.with_file_name("attack_summary_merged.csv");
                    if !summarize_attacks(create(&attacks)?, &runs)? {
                        std::fs::remove_file(&attacks)?;
                    }
                }
                None => write_summary_csv(std::io::stdout().lock(), &rows)?,
            }
            Ok(())
        }
    }
}

/// Bad accountant arguments are user input errors, not runtime failures.
fn as_config(e: Error) -> Error {
    match e {
        Error::Input(m) | Error::Calibration(m) => Error::Config(m),
        Error::InfinitePrivacyLoss => Error::Config(e.to_string()),
        other => other,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
