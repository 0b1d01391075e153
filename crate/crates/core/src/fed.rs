//! FedAvg, provider-level DP federated training, and their centralized forms.
//!
//! Every variant shares one server step, `w_t = w_{t-1} + (1/|K|) sum_k u_k`,
//! applied in client-id order. Local training is seeded by the round and the
//! set of providers whose data is being trained on, so two algorithms that
//! train on the same data in the same round draw the same mini-batches.

use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClientShard, Corpus};
use crate::dp::{clip_in_place, gaussian_noise, DpConfig};
use crate::error::{Error, Result};
use crate::model::{l2_norm, train_local, EncodedExample, ParameterVector, QaModel, TrainHyper};
use crate::secagg::{secure_sum, DEFAULT_FIXED_POINT_BITS};
use crate::seed::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClientSampling {
    /// Every client every round.
    All,
    /// Each client independently with probability `q`.
    Poisson { q: f64 },
    /// Exactly `k` clients uniformly without replacement.
    Fixed { k: usize },
}

impl ClientSampling {
    /// Per-round inclusion probability of a given client.
    pub fn rate(&self, n_clients: usize) -> f64 {
        match *self {
            ClientSampling::All => 1.0,
            ClientSampling::Poisson { q } => q,
            ClientSampling::Fixed { k } => k as f64 / n_clients as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlConfig {
    pub rounds: usize,
    pub client_sampling: ClientSampling,
    /// Per-provider inclusion probability within a sampled client; DP runs only.
    #[serde(default = "one")]
    pub q_provider: f64,
    #[serde(default)]
    pub hyper: TrainHyper,
    #[serde(default)]
    pub dp: Option<DpConfig>,
    #[serde(default)]
    pub secure_aggregation: bool,
    #[serde(default = "default_fixed_point_bits")]
    pub fixed_point_bits: u8,
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn default_fixed_point_bits() -> u8 {
    DEFAULT_FIXED_POINT_BITS
}

fn default_bytes_per_param() -> usize {
    4
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            client_sampling: ClientSampling::Fixed { k: 2 },
            q_provider: 1.0,
            hyper: TrainHyper::default(),
            dp: None,
            secure_aggregation: false,
            fixed_point_bits: DEFAULT_FIXED_POINT_BITS,
            bytes_per_param: 4,
            seed: 0,
        }
    }
}

impl FlConfig {
    pub fn validate(&self, n_clients: usize) -> Result<()> {
        self.hyper.validate()?;
        if n_clients == 0 {
            return Err(Error::Config("no clients".into()));
        }
        match self.client_sampling {
            ClientSampling::Poisson { q } if !(q > 0.0 && q <= 1.0) => {
                return Err(Error::Config(format!("client sampling rate must be in (0, 1], got {q}")))
            }
            ClientSampling::Fixed { k } if k == 0 || k > n_clients => {
                return Err(Error::Config(format!("cannot sample {k} of {n_clients} clients")))
            }
            _ => {}
        }
        if !(self.q_provider > 0.0 && self.q_provider <= 1.0) {
            return Err(Error::Config(format!("provider sampling rate must be in (0, 1], got {}", self.q_provider)));
        }
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        Ok(())
    }

    /// Effective per-round sampling rate of one provider.
    pub fn provider_rate(&self, n_clients: usize) -> f64 {
        self.client_sampling.rate(n_clients) * self.q_provider
    }
}

#[derive(Debug, Clone)]
pub struct ProviderData {
    pub provider_id: usize,
    pub examples: Vec<EncodedExample>,
}

#[derive(Debug, Clone)]
pub struct ClientData {
    pub client_id: usize,
    pub providers: Vec<ProviderData>,
}

impl ClientData {
    pub fn from_shards(model: &QaModel, corpus: &Corpus, shards: &[ClientShard]) -> Result<Vec<ClientData>> {
        shards
            .iter()
            .map(|s| {
                let providers = s
                    .providers
                    .iter()
                    .map(|p| {
                        Ok(ProviderData {
                            provider_id: p.provider_id,
                            examples: model.encode_docs(corpus, p.doc_ids.iter())?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ClientData { client_id: s.client_id, providers })
            })
            .collect()
    }

    /// All data merged into one client, as in centralized training.
    pub fn merged(clients: &[ClientData]) -> ClientData {
        let mut providers: Vec<ProviderData> = clients.iter().flat_map(|c| c.providers.iter().cloned()).collect();
        providers.sort_by_key(|p| p.provider_id);
        ClientData { client_id: 0, providers }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sampled_clients: Vec<usize>,
    /// Providers trained on, per sampled client.
    pub providers_sampled: Vec<usize>,
    pub pre_clip_norms: Vec<f64>,
    pub post_clip_norms: Vec<f64>,
    /// Std of each Gaussian draw this round: per client `σC/sqrt(|K|)`, or the
    /// server-side `σC/M` on an empty round. Zero without DP.
    pub noise_std: f64,
    pub bytes: u64,
}

impl RoundRecord {
    pub fn mean_clip_ratio(&self) -> Option<f64> {
        if self.pre_clip_norms.is_empty() {
            return None;
        }
        let s: f64 = self
            .pre_clip_norms
            .iter()
            .zip(&self.post_clip_norms)
            .map(|(&a, &b)| if a == 0.0 { 1.0 } else { b / a })
            .sum();
        Some(s / self.pre_clip_norms.len() as f64)
    }
}

pub fn write_round_csv<W: Write>(w: W, records: &[RoundRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["round", "sampled_clients", "providers_sampled", "mean_clip_ratio", "noise_std", "bytes"])?;
    for r in records {
        let clients: Vec<String> = r.sampled_clients.iter().map(|c| c.to_string()).collect();
        out.write_record([
            r.round.to_string(),
            clients.join(";"),
            r.providers_sampled.iter().sum::<usize>().to_string(),
            r.mean_clip_ratio().map(|x| x.to_string()).unwrap_or_default(),
            r.noise_std.to_string(),
            r.bytes.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Gigabytes moved when each sampled client downloads and uploads the trainable parameters once.
pub fn communication_cost(sampled_per_round: &[usize], trainable_params: usize, bytes_per_param: usize) -> f64 {
    let clients: usize = sampled_per_round.iter().sum();
    clients as f64 * 2.0 * trainable_params as f64 * bytes_per_param as f64 / 1e9
}

pub struct TrainOutput {
    pub params: ParameterVector,
    pub records: Vec<RoundRecord>,
    /// Noise multiplier actually used; `None` without DP.
    pub sigma: Option<f64>,
    /// Smallest provider count over clients.
    pub m: usize,
}

fn sample_clients(sampling: ClientSampling, n: usize, stream: &SeedStream) -> Vec<usize> {
    let mut rng = stream.rng();
    match sampling {
        ClientSampling::All => (0..n).collect(),
        ClientSampling::Poisson { q } => (0..n).filter(|_| rng.random::<f64>() < q).collect(),
        ClientSampling::Fixed { k } => {
            let mut v = sample_indices(&mut rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
    }
}

fn local_seed(stream: &SeedStream, round: usize, providers: &[&ProviderData]) -> u64 {
    let mut ids: Vec<usize> = providers.iter().map(|p| p.provider_id).collect();
    ids.sort_unstable();
    let key: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
    stream.child("local").index(round as u64).child(&key.join(",")).seed_u64()
}

fn train_delta(
    model: &QaModel,
    w: &ParameterVector,
    providers: &[&ProviderData],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<Vec<f64>> {
    let examples: Vec<&EncodedExample> = providers.iter().flat_map(|p| p.examples.iter()).collect();
    if examples.is_empty() {
        return Ok(vec![0.0; w.len()]);
    }
    let trained = train_local(model, w, &examples, hyper, seed)?;
    if !trained.is_finite() {
        return Err(Error::NonFinite("local update".into()));
    }
    Ok(trained.delta_from(w))
}

/// Adds Gaussian noise of std `σC/sqrt(n_sampled)` to a sum of clipped
/// provider updates and normalizes by `m`.
pub fn noisy_client_update<R: Rng + ?Sized>(
    mut clipped_sum: Vec<f64>,
    sigma: f64,
    clip: f64,
    n_sampled: usize,
    m: usize,
    rng: &mut R,
) -> Vec<f64> {
    let std = sigma * clip / (n_sampled as f64).sqrt();
    if std > 0.0 {
        let noise = gaussian_noise(clipped_sum.len(), std, rng);
        for (x, z) in clipped_sum.iter_mut().zip(noise) {
            *x += z;
        }
    }
    let m = m as f64;
    for x in clipped_sum.iter_mut() {
        *x /= m;
    }
    clipped_sum
}

/// Coordinate-wise sum in slice order.
pub fn sum_updates(updates: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for u in updates {
        for (a, x) in acc.iter_mut().zip(u) {
            *a += x;
        }
    }
    acc
}

struct ClientResult {
    update: Vec<f64>,
    n_providers: usize,
    pre: Vec<f64>,
    post: Vec<f64>,
}

struct Runner<'a> {
    model: &'a QaModel,
    clients: &'a [ClientData],
    config: &'a FlConfig,
    stream: SeedStream,
}

impl Runner<'_> {
    fn aggregate(&self, round: usize, updates: &[Vec<f64>], bound: f64, dim: usize) -> Result<Vec<f64>> {
        if self.config.secure_aggregation {
            let seed = self.stream.child("secagg").index(round as u64).seed_u64();
            secure_sum(updates, bound, self.config.fixed_point_bits, seed)
        } else {
            Ok(sum_updates(updates, dim))
        }
    }

    fn bytes(&self, n_clients: usize) -> u64 {
        (n_clients * 2 * self.model.layout().trainable_count() * self.config.bytes_per_param) as u64
    }

    fn run(
        &self,
        init: &ParameterVector,
        dp: Option<(f64, f64)>,
    ) -> Result<(ParameterVector, Vec<RoundRecord>, usize)> {
        self.config.validate(self.clients.len())?;
        if init.layout != *self.model.layout() {
            return Err(Error::Dimension { expected: self.model.layout().dim(), actual: init.len() });
        }
        let m = self.clients.iter().map(|c| c.providers.len()).min().unwrap_or(0);
        if dp.is_some() && m == 0 {
            return Err(Error::Input("a client holds no providers, so M = 0".into()));
        }
        let dim = init.len();
        let mut w = init.clone();
        let mut records = Vec::with_capacity(self.config.rounds);
        for t in 0..self.config.rounds {
            let sampled = sample_clients(
                self.config.client_sampling,
                self.clients.len(),
                &self.stream.child("clients").index(t as u64),
            );
            let k = sampled.len();
            let results: Vec<ClientResult> = sampled
                .par_iter()
                .map(|&ci| match dp {
                    None => self.fedavg_client(&w, t, &self.clients[ci]),
                    Some((sigma, clip)) => self.dp_client(&w, t, &self.clients[ci], k, m, sigma, clip),
                })
                .collect::<Result<_>>()?;

            let mut record = RoundRecord {
                round: t,
                sampled_clients: sampled.iter().map(|&i| self.clients[i].client_id).collect(),
                providers_sampled: results.iter().map(|r| r.n_providers).collect(),
                pre_clip_norms: results.iter().flat_map(|r| r.pre.iter().copied()).collect(),
                post_clip_norms: results.iter().flat_map(|r| r.post.iter().copied()).collect(),
                noise_std: 0.0,
                bytes: self.bytes(k),
            };
            if k == 0 {
                if let Some((sigma, clip)) = dp {
                    let std = sigma * clip / m as f64;
                    let mut rng = self.stream.child("noise").index(t as u64).child("server").rng();
                    w.add_assign(&gaussian_noise(dim, std, &mut rng));
                    record.noise_std = std;
                }
            } else {
                let updates: Vec<Vec<f64>> = results.into_iter().map(|r| r.update).collect();
                let bound = match dp {
                    Some((sigma, clip)) => {
                        let most = record.providers_sampled.iter().copied().max().unwrap_or(0) as f64;
                        record.noise_std = sigma * clip / (k as f64).sqrt();
                        (most * clip + 6.0 * record.noise_std) / m as f64
                    }
                    None => updates.iter().flat_map(|u| u.iter()).fold(0.0f64, |a, x| a.max(x.abs())).max(1e-12),
                };
                let total = self.aggregate(t, &updates, bound, dim)?;
                let kf = k as f64;
                let avg: Vec<f64> = total.iter().map(|x| x / kf).collect();
                w.add_assign(&avg);
            }
            if !w.is_finite() {
                return Err(Error::NonFinite(format!("global model after round {t}")));
            }
            log::debug!("round {t}: {} clients, {} providers", k, record.providers_sampled.iter().sum::<usize>());
            records.push(record);
        }
        Ok((w, records, m))
    }

    fn fedavg_client(&self, w: &ParameterVector, t: usize, client: &ClientData) -> Result<ClientResult> {
        let providers: Vec<&ProviderData> = client.providers.iter().collect();
        let seed = local_seed(&self.stream, t, &providers);
        let update = train_delta(self.model, w, &providers, &self.config.hyper, seed)?;
        Ok(ClientResult { update, n_providers: providers.len(), pre: vec![], post: vec![] })
    }

    #[allow(clippy::too_many_arguments)]
    fn dp_client(
        &self,
        w: &ParameterVector,
        t: usize,
        client: &ClientData,
        k: usize,
        m: usize,
        sigma: f64,
        clip: f64,
    ) -> Result<ClientResult> {
        let mut rng = self.stream.child("providers").index(t as u64).index(client.client_id as u64).rng();
        let chosen: Vec<&ProviderData> =
            client.providers.iter().filter(|_| rng.random::<f64>() < self.config.q_provider).collect();
        let deltas: Vec<(Vec<f64>, f64)> = chosen
            .par_iter()
            .map(|p| {
                let seed = local_seed(&self.stream, t, &[p]);
                let mut d = train_delta(self.model, w, &[p], &self.config.hyper, seed)?;
                let pre = clip_in_place(&mut d, clip)?;
                Ok((d, pre))
            })
            .collect::<Result<_>>()?;
        let pre: Vec<f64> = deltas.iter().map(|(_, n)| *n).collect();
        let post: Vec<f64> = deltas.iter().map(|(d, _)| l2_norm(d)).collect();
        let clipped: Vec<Vec<f64>> = deltas.into_iter().map(|(d, _)| d).collect();
        let sum = sum_updates(&clipped, w.len());
        let mut noise_rng = self.stream.child("noise").index(t as u64).index(client.client_id as u64).rng();
        let update = noisy_client_update(sum, sigma, clip, k, m, &mut noise_rng);
        Ok(ClientResult { update, n_providers: chosen.len(), pre, post })
    }
}

pub fn run_fedavg(
    model: &QaModel,
    init: &ParameterVector,
    clients: &[ClientData],
    config: &FlConfig,
) -> Result<TrainOutput> {
    if config.dp.is_some() {
        return Err(Error::Config("FedAvg does not take a DP configuration".into()));
    }
    let runner = Runner { model, clients, config, stream: SeedStream::new(config.seed).child("train") };
    let (params, records, m) = runner.run(init, None)?;
    Ok(TrainOutput { params, records, sigma: None, m })
}

pub fn run_fl_provider_dp(
    model: &QaModel,
    init: &ParameterVector,
    clients: &[ClientData],
    config: &FlConfig,
) -> Result<TrainOutput> {
    let dp = config.dp.as_ref().ok_or_else(|| Error::Config("FL-PROVIDER-DP needs a DP configuration".into()))?;
    config.validate(clients.len())?;
    let sigma = dp.resolve_sigma(config.provider_rate(clients.len()), config.rounds as u64)?;
    let runner = Runner { model, clients, config, stream: SeedStream::new(config.seed).child("train") };
    let (params, records, m) = runner.run(init, Some((sigma, dp.clip_norm)))?;
    Ok(TrainOutput { params, records, sigma: Some(sigma), m })
}

fn centralized(config: &FlConfig) -> FlConfig {
    FlConfig { client_sampling: ClientSampling::All, ..config.clone() }
}

/// FedAvg with a single client holding all training data.
pub fn run_centralized(
    model: &QaModel,
    init: &ParameterVector,
    clients: &[ClientData],
    config: &FlConfig,
) -> Result<TrainOutput> {
    run_fedavg(model, init, &[ClientData::merged(clients)], &centralized(config))
}

/// FL-PROVIDER-DP with one always-selected client holding every provider.
pub fn run_centralized_dp(
    model: &QaModel,
    init: &ParameterVector,
    clients: &[ClientData],
    config: &FlConfig,
) -> Result<TrainOutput> {
    run_fl_provider_dp(model, init, &[ClientData::merged(clients)], &centralized(config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn communication_examples() {
        let gb = communication_cost(&[2; 10], 1_000_000, 4);
        assert!((gb - 0.16).abs() < 1e-12);
        assert_eq!(communication_cost(&[], 1_000_000, 4), 0.0);
    }

    #[test]
    fn fixed_sampling_draws_k_distinct_sorted() {
        let s = sample_clients(ClientSampling::Fixed { k: 3 }, 10, &SeedStream::new(4));
        assert_eq!(s.len(), 3);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn noise_free_client_update_is_exact_division() {
        let mut rng = SeedStream::new(0).rng();
        let u = noisy_client_update(vec![2.0, -4.0], 0.0, 1.0, 3, 2, &mut rng);
        assert_eq!(u, vec![1.0, -2.0]);
    }
}
