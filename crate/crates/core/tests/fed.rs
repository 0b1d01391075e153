use provider_dp::corpus::{generate_corpus, partition_blue, split_red, CorpusConfig};
use provider_dp::dp::DpConfig;
use provider_dp::fed::{
    communication_cost, run_centralized_dp, run_fedavg, run_fl_provider_dp, write_round_csv, ClientData,
    ClientSampling, FlConfig,
};
use provider_dp::model::{LocalSteps, ModelDims, ParameterVector, QaModel, TrainHyper};
use provider_dp::Error;

struct Setup {
    model: QaModel,
    init: ParameterVector,
    clients: Vec<ClientData>,
}

fn setup(n_providers: usize, n_clients: usize) -> Setup {
    let corpus = generate_corpus(&CorpusConfig {
        n_providers,
        n_clients,
        docs_per_provider: (3, 4),
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let model = QaModel::from_corpus(&corpus, &ModelDims { embed_dim: 4, hidden_dim: 8, init_scale: 1.0 }).unwrap();
    let splits = split_red(&corpus, 0.5, 1).unwrap();
    let shards = partition_blue(&splits, n_clients, 1).unwrap();
    let clients = ClientData::from_shards(&model, &corpus, &shards).unwrap();
    let init = model.init_params(1);
    Setup { model, init, clients }
}

fn dp(sigma: f64, clip: f64) -> Option<DpConfig> {
    Some(DpConfig { epsilon_target: None, delta: 1e-5, clip_norm: clip, noise_multiplier: Some(sigma) })
}

fn config(rounds: usize, sampling: ClientSampling) -> FlConfig {
    FlConfig {
        rounds,
        client_sampling: sampling,
        hyper: TrainHyper { local_steps: LocalSteps::Steps(2), learning_rate: 1e-2, ..Default::default() },
        ..Default::default()
    }
}

fn max_abs_diff(a: &ParameterVector, b: &ParameterVector) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn clients_with_identical_data_match_one_client() {
    let s = setup(12, 2);
    let twin = ClientData { client_id: 1, providers: s.clients[0].providers.clone() };
    let pair = vec![s.clients[0].clone(), twin];
    let c = config(3, ClientSampling::All);
    let both = run_fedavg(&s.model, &s.init, &pair, &c).unwrap();
    let one = run_fedavg(&s.model, &s.init, &pair[..1], &c).unwrap();
    assert_eq!(both.params, one.params);
    assert_eq!(both.records[0].bytes, 2 * one.records[0].bytes);
}

#[test]
fn empty_rounds_still_add_server_noise() {
    let s = setup(12, 3);
    let c = FlConfig { dp: dp(2.0, 0.5), ..config(4, ClientSampling::Poisson { q: 1e-12 }) };
    let out = run_fl_provider_dp(&s.model, &s.init, &s.clients, &c).unwrap();
    let expected = 2.0 * 0.5 / out.m as f64;
    for r in &out.records {
        assert!(r.sampled_clients.is_empty());
        assert_eq!(r.bytes, 0);
        assert!((r.noise_std - expected).abs() < 1e-15);
    }
    assert!(max_abs_diff(&out.params, &s.init) > 0.0);
    let trainable = s.model.layout().trainable_mask();
    for (i, (a, b)) in out.params.iter().zip(s.init.iter()).enumerate() {
        if !trainable[i] {
            assert_eq!(a, b, "frozen coordinate {i} moved");
        }
    }
}

#[test]
fn provider_sampling_matches_its_rate() {
    let s = setup(40, 2);
    let total: usize = s.clients.iter().map(|c| c.providers.len()).sum();
    let q = 0.3;
    let rounds = 100;
    let mut c = config(rounds, ClientSampling::All);
    c.q_provider = q;
    c.dp = dp(1.0, 1.0);
    c.hyper.local_steps = LocalSteps::Steps(1);
    let out = run_fl_provider_dp(&s.model, &s.init, &s.clients, &c).unwrap();
    let drawn: usize = out.records.iter().map(|r| r.providers_sampled.iter().sum::<usize>()).sum();
    let n = (rounds * total) as f64;
    let (mean, sd) = (n * q, (n * q * (1.0 - q)).sqrt());
    assert!((drawn as f64 - mean).abs() <= 3.0 * sd, "{drawn} providers, expected {mean} +- {sd}");
}

#[test]
fn dp_round_records_are_consistent() {
    let s = setup(20, 4);
    let clip = 0.05;
    let c = FlConfig { dp: dp(1.3, clip), q_provider: 0.8, ..config(3, ClientSampling::Fixed { k: 3 }) };
    let out = run_fl_provider_dp(&s.model, &s.init, &s.clients, &c).unwrap();
    assert_eq!(out.sigma, Some(1.3));
    for r in &out.records {
        assert_eq!(r.sampled_clients.len(), 3);
        assert!((r.noise_std - 1.3 * clip / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.pre_clip_norms.len(), r.providers_sampled.iter().sum::<usize>());
        for (pre, post) in r.pre_clip_norms.iter().zip(&r.post_clip_norms) {
            assert!(*post <= clip * (1.0 + 1e-12) && post <= pre);
        }
    }
    let again = run_fl_provider_dp(&s.model, &s.init, &s.clients, &c).unwrap();
    assert_eq!(again.params, out.params);
    let other = run_fl_provider_dp(&s.model, &s.init, &s.clients, &FlConfig { seed: 1, ..c }).unwrap();
    assert_ne!(other.params, out.params);
}

#[test]
fn centralized_dp_is_a_single_always_sampled_client() {
    let s = setup(16, 4);
    let c = FlConfig { dp: dp(1.0, 1.0), q_provider: 0.5, ..config(2, ClientSampling::Fixed { k: 1 }) };
    let central = run_centralized_dp(&s.model, &s.init, &s.clients, &c).unwrap();
    let merged = vec![ClientData::merged(&s.clients)];
    let direct =
        run_fl_provider_dp(&s.model, &s.init, &merged, &FlConfig { client_sampling: ClientSampling::All, ..c })
            .unwrap();
    assert_eq!(central.params, direct.params);
    assert!(central.records.iter().all(|r| r.sampled_clients == vec![0]));
    assert_eq!(central.m, s.clients.iter().map(|c| c.providers.len()).sum::<usize>());
}

#[test]
fn secure_aggregation_only_adds_quantization_error() {
    let s = setup(16, 4);
    let f = 24u8;
    for dp_cfg in [None, dp(1.0, 1.0)] {
        let plain = FlConfig { dp: dp_cfg, fixed_point_bits: f, ..config(1, ClientSampling::All) };
        let masked = FlConfig { secure_aggregation: true, ..plain.clone() };
        let (a, b) = if plain.dp.is_some() {
            (
                run_fl_provider_dp(&s.model, &s.init, &s.clients, &plain).unwrap(),
                run_fl_provider_dp(&s.model, &s.init, &s.clients, &masked).unwrap(),
            )
        } else {
            (
                run_fedavg(&s.model, &s.init, &s.clients, &plain).unwrap(),
                run_fedavg(&s.model, &s.init, &s.clients, &masked).unwrap(),
            )
        };
        // k updates each rounded by at most half a unit, then averaged over k
        let bound = 2f64.powi(-(f as i32) - 1) + 1e-12;
        let d = max_abs_diff(&a.params, &b.params);
        assert!(d <= bound, "secure aggregation moved a coordinate by {d}");
    }
}

#[test]
fn configuration_errors() {
    let s = setup(12, 2);
    let c = config(1, ClientSampling::All);
    assert!(matches!(
        run_fedavg(&s.model, &s.init, &s.clients, &FlConfig { dp: dp(1.0, 1.0), ..c.clone() }),
        Err(Error::Config(_))
    ));
    assert!(matches!(run_fl_provider_dp(&s.model, &s.init, &s.clients, &c), Err(Error::Config(_))));
    assert!(run_fedavg(&s.model, &s.init, &s.clients, &config(1, ClientSampling::Fixed { k: 3 })).is_err());
    assert!(run_fedavg(&s.model, &s.init, &s.clients, &config(1, ClientSampling::Poisson { q: 0.0 })).is_err());
    let mut bad_q = c.clone();
    bad_q.q_provider = 1.5;
    assert!(run_fedavg(&s.model, &s.init, &s.clients, &bad_q).is_err());

    let empty = vec![s.clients[0].clone(), ClientData { client_id: 1, providers: vec![] }];
    assert!(matches!(
        run_fl_provider_dp(&s.model, &s.init, &empty, &FlConfig { dp: dp(1.0, 1.0), ..c }),
        Err(Error::Input(_))
    ));
}

#[test]
fn round_csv_and_communication_volume() {
    let s = setup(12, 3);
    let c = config(4, ClientSampling::Fixed { k: 2 });
    let out = run_fedavg(&s.model, &s.init, &s.clients, &c).unwrap();
    let mut buf = Vec::new();
    write_round_csv(&mut buf, &out.records).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "round,sampled_clients,providers_sampled,mean_clip_ratio,noise_std,bytes");
    assert_eq!(lines.count(), 4);

    let per_round: Vec<usize> = out.records.iter().map(|r| r.sampled_clients.len()).collect();
    let gb = communication_cost(&per_round, s.model.layout().trainable_count(), 4);
    let bytes: u64 = out.records.iter().map(|r| r.bytes).sum();
    assert!((gb - bytes as f64 / 1e9).abs() < 1e-15);
}
