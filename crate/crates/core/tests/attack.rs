use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use provider_dp::attack::{
    aggregate_features, apk_attack, attack_accuracy, azk_attack, ensemble, eval_attack, extract_metrics, filter_ts,
    kmeans, memorization_test, run_attack, standardize, AttackConfig, AttackSetting, FeatureGroups, ForestParams,
    ProviderFeatureVector, RandomForest, DEFAULT_MEM_KEY,
};
use provider_dp::corpus::{generate_corpus, split_red, CorpusConfig};
use provider_dp::model::{ModelDims, QaModel};
use provider_dp::Error;

fn blobs(n: usize, gap: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let data = truth
        .iter()
        .map(|&c| (0..3).map(|_| c as f64 * gap + rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    (data, truth)
}

/// Members answer better: their mean accuracy feature is shifted up by `gap`.
fn providers(n: usize, gap: f64, seed: u64) -> Vec<ProviderFeatureVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let member = i % 2 == 0;
            let shift = if member { gap } else { 0.0 };
            let features = (0..FeatureGroups::G1234.dim())
                .map(|j| rng.sample::<f64, _>(StandardNormal) + if j == 0 { shift } else { 0.0 })
                .collect();
            ProviderFeatureVector { provider_id: i, features, n_queries: 6 + i % 7, member }
        })
        .collect()
}

#[test]
fn kmeans_recovers_separated_clusters() {
    let (data, truth) = blobs(400, 8.0, 1);
    let fit = kmeans(&data, 2, 3).unwrap();
    let agree = fit.assignments.iter().zip(&truth).filter(|(a, b)| a == b).count();
    let best = agree.max(truth.len() - agree);
    assert!(best as f64 >= 0.99 * truth.len() as f64, "{best} of {}", truth.len());
    assert_eq!(kmeans(&data, 2, 3).unwrap(), fit);
    assert!(kmeans(&data[..1], 2, 0).is_err());
}

#[test]
fn standardized_columns_have_zero_mean_unit_std() {
    let (mut data, _) = blobs(101, 3.0, 2);
    for r in data.iter_mut() {
        r.push(4.0);
    }
    let z = standardize(&data);
    for j in 0..3 {
        let col: Vec<f64> = z.iter().map(|r| r[j]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
    assert!(z.iter().all(|r| r[3] == 0.0));
}

#[test]
fn azk_labels_do_not_depend_on_provider_order() {
    let f = providers(60, 6.0, 4);
    let labels = azk_attack(&f, 9).unwrap().labels;
    let truth: Vec<bool> = f.iter().map(|p| p.member).collect();
    assert!(attack_accuracy(&labels, &truth).unwrap() >= 95.0);
    let mut rev = f.clone();
    rev.reverse();
    let mut back = azk_attack(&rev, 9).unwrap().labels;
    back.reverse();
    assert_eq!(back, labels);

    let same = vec![f[0].clone(), f[0].clone(), f[0].clone()];
    let out = azk_attack(&same, 0).unwrap();
    assert!(out.degenerate && out.labels.iter().all(|l| !l));
}

#[test]
fn forest_fits_a_threshold_exactly() {
    let x: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 10.0]).collect();
    let y: Vec<bool> = x.iter().map(|v| v[0] > 7.35).collect();
    let forest = RandomForest::fit(&x, &y, ForestParams::default(), 5).unwrap();
    let pred: Vec<bool> = x.iter().map(|v| forest.predict(v)).collect();
    assert_eq!(attack_accuracy(&pred, &y).unwrap(), 100.0);
    assert_eq!(RandomForest::fit(&x, &y, ForestParams::default(), 5).unwrap(), forest);
}

#[test]
fn apk_needs_both_classes() {
    let train = vec![(vec![0.0], true), (vec![1.0], true)];
    assert!(matches!(apk_attack(&train, &[vec![0.5]], 0), Err(Error::Input(_))));
}

#[test]
fn random_labels_give_chance_accuracy() {
    let mut f = providers(400, 0.0, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for p in f.iter_mut() {
        p.member = rng.random::<bool>();
    }
    let config = AttackConfig { n_seeds: 5, r: 0.5, ..Default::default() };
    for setting in [AttackSetting::Azk, AttackSetting::Apk] {
        let (mean, _) = eval_attack(&run_attack(&f, setting, &config, 1).unwrap()).unwrap();
        assert!((40.0..=60.0).contains(&mean), "{setting:?}: {mean}");
    }
}

#[test]
fn separable_providers_are_found() {
    let f = providers(120, 6.0, 7);
    let config = AttackConfig { n_seeds: 3, settings: vec![AttackSetting::Apk], ..Default::default() };
    for setting in [AttackSetting::Azk, AttackSetting::Apk] {
        let results = run_attack(&f, setting, &config, 2).unwrap();
        assert_eq!(results.len(), 3);
        let (mean, _) = eval_attack(&results).unwrap();
        assert!(mean >= 95.0, "{setting:?}: {mean}");
    }
    assert_eq!(
        run_attack(&f, AttackSetting::Apk, &config, 2).unwrap(),
        run_attack(&f, AttackSetting::Apk, &config, 2).unwrap()
    );
}

#[test]
fn larger_thresholds_keep_fewer_providers() {
    let f = providers(100, 0.0, 8);
    let sizes: Vec<usize> = (0..15).map(|s| filter_ts(&f, s).len()).collect();
    assert!(sizes.windows(2).all(|w| w[1] <= w[0]), "{sizes:?}");
    assert_eq!(sizes[0], 100);
    assert!(run_attack(&f, AttackSetting::Azk, &AttackConfig { s: 50, ..Default::default() }, 0).is_err());
}

#[test]
fn ensemble_is_a_majority_vote() {
    let main = [true, true, false, false];
    let out = ensemble(&main, &[1.0, 0.0, 1.0, 0.0], &[0.0; 4], 0).unwrap();
    assert_eq!(out, vec![true, false, false, false]);
    let out = ensemble(&main, &[1.0, 0.0, 1.0, 0.0], &[0.9, 0.9, 0.9, 0.0], 0).unwrap();
    assert_eq!(out, vec![true, true, true, false]);
    assert!(ensemble(&main, &[1.0], &[0.0; 4], 0).is_err());
}

#[test]
fn metrics_read_only_red_documents() {
    let corpus = generate_corpus(&CorpusConfig {
        n_providers: 20,
        n_clients: 2,
        docs_per_provider: (2, 5),
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let splits = split_red(&corpus, 0.5, 3).unwrap();
    let model = QaModel::from_corpus(&corpus, &ModelDims { embed_dim: 4, hidden_dim: 8, init_scale: 1.0 }).unwrap();
    let params = model.init_params(3);
    let rows = extract_metrics(&model, &params, &params, &corpus, &splits.red, Some(DEFAULT_MEM_KEY)).unwrap();

    let red = splits.red.doc_ids();
    let train = splits.train_doc_ids();
    let expected: usize = red.iter().map(|&d| corpus.documents[d].qa.len()).sum();
    assert_eq!(rows.len(), expected);
    for r in &rows {
        assert!(red.contains(&r.doc_id) && !train.contains(&r.doc_id));
        assert_eq!(r.member, splits.red.member_ids().contains(&r.provider_id));
        assert_eq!((r.delta_loss, r.delta_conf), (0.0, 0.0));
    }
    let with_mem = rows.iter().filter(|r| r.nls_mem.is_some()).count();
    assert!(with_mem > 0 && with_mem <= red.len());

    let features = aggregate_features(&rows, FeatureGroups::G1234).unwrap();
    assert_eq!(features.len(), splits.red.red_in.len() + splits.red.red_out.len());
    assert!(features.iter().all(|f| f.features.len() == 16));

    let report = memorization_test(&model, &params, &corpus, &splits.red, DEFAULT_MEM_KEY).unwrap();
    assert_eq!((report.red_in.acc, report.red_out.acc), (0.0, 0.0));
    assert!(memorization_test(&model, &params, &corpus, &splits.red, "total").is_err());
}
