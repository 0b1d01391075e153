use std::collections::BTreeSet;

use provider_dp::corpus::{
    corpus_stats, generate_corpus, partition_blue, read_red_manifests, split_red, write_split_manifests, Corpus,
    CorpusConfig,
};

fn corpus(n_providers: usize, docs: (usize, usize), seed: u64) -> Corpus {
    generate_corpus(&CorpusConfig { n_providers, docs_per_provider: docs, n_clients: 4, seed, ..Default::default() })
        .unwrap()
}

#[test]
fn save_and_load_round_trip_through_disk() {
    let c = corpus(12, (1, 5), 1);
    let dir = tempfile::tempdir().unwrap();
    c.save(dir.path()).unwrap();
    assert_eq!(Corpus::load(dir.path()).unwrap(), c);
    assert!(Corpus::load(&dir.path().join("missing")).is_err());
}

#[test]
fn every_answer_is_readable_from_its_document() {
    for seed in 0..5 {
        let c = corpus(20, (1, 6), seed);
        for d in &c.documents {
            assert_eq!(d.qa.len(), c.config.keys.len());
            for q in &d.qa {
                assert!(d.token_stream.contains(&q.answer), "doc {} lacks {:?}", d.doc_id, q.answer);
                assert_eq!(d.fields[&q.key], q.answer);
                assert_eq!(q.provider_id, d.provider_id);
            }
        }
    }
}

#[test]
fn every_document_lands_in_exactly_one_split() {
    for seed in 0..10 {
        let c = corpus(30, (1, 9), seed);
        let s = split_red(&c, 0.5, seed).unwrap();
        let mut seen = vec![0usize; c.documents.len()];
        let train = s.train_doc_ids();
        for d in train.iter().chain(&s.blue_val).chain(&s.blue_test).chain(&s.red.doc_ids()) {
            seen[*d] += 1;
        }
        assert!(seen.iter().all(|&n| n == 1), "seed {seed}: {seen:?}");

        let red = s.red.doc_ids();
        assert!(red.is_disjoint(&train));
        let in_set: BTreeSet<usize> = s.in_providers.iter().copied().collect();
        for p in &s.red.red_out {
            assert!(!in_set.contains(&p.provider_id));
            assert!(!p.doc_ids.is_empty());
        }
        for p in &s.red.red_in {
            assert!(in_set.contains(&p.provider_id));
        }
        for p in &s.blue_train {
            assert!(in_set.contains(&p.provider_id));
        }
    }
}

#[test]
fn shards_never_contain_out_providers() {
    let c = corpus(60, (1, 6), 2);
    let s = split_red(&c, 0.5, 2).unwrap();
    let out: BTreeSet<usize> = s.red.red_out.iter().map(|p| p.provider_id).collect();
    let shards = partition_blue(&s, 6, 7).unwrap();
    let mut all = BTreeSet::new();
    for sh in &shards {
        for pid in sh.provider_ids() {
            assert!(!out.contains(&pid));
            assert!(all.insert(pid), "provider {pid} on two clients");
        }
    }
    assert_eq!(partition_blue(&s, 6, 7).unwrap(), shards);
    assert_ne!(partition_blue(&s, 6, 8).unwrap(), shards);
}

#[test]
fn split_depends_only_on_its_seed() {
    let c = corpus(40, (2, 5), 3);
    assert_eq!(split_red(&c, 0.5, 9).unwrap(), split_red(&c, 0.5, 9).unwrap());
    assert_ne!(split_red(&c, 0.5, 9).unwrap().in_providers, split_red(&c, 0.5, 10).unwrap().in_providers);
}

#[test]
fn paper_scale_shape() {
    let c = corpus(660, (2, 8), 0);
    let s = split_red(&c, 0.5, 0).unwrap();
    assert_eq!(s.in_providers.len(), 330);
    assert_eq!(s.out_providers.len(), 330);
    assert_eq!(s.red.red_in.len(), 330);
    assert_eq!(s.red.red_out.len(), 330);
    let shards = partition_blue(&s, 10, 0).unwrap();
    let counts: Vec<usize> = shards.iter().map(|sh| sh.providers.len()).collect();
    assert_eq!(counts.iter().sum::<usize>(), 330);
    assert!(counts.iter().all(|&n| n == 33), "{counts:?}");
}

#[test]
fn stats_agree_with_splits() {
    let c = corpus(24, (1, 7), 4);
    let s = split_red(&c, 0.5, 4).unwrap();
    let shards = partition_blue(&s, 3, 4).unwrap();
    let rows = corpus_stats(&c, &s, &shards);
    let docs: usize = rows.iter().map(|r| r.documents).sum();
    assert_eq!(docs, c.documents.len());
    let red_pos = rows.iter().find(|r| r.dataset == "RED" && r.subset == "positive").unwrap();
    assert_eq!(red_pos.providers, s.red.red_in.len());
    assert!(rows.iter().all(|r| r.questions == r.documents * c.config.keys.len()));
}

#[test]
fn manifests_restore_the_red_split() {
    let c = corpus(16, (1, 6), 5);
    let s = split_red(&c, 0.5, 5).unwrap();
    let shards = partition_blue(&s, 2, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = write_split_manifests(dir.path(), &s, &shards).unwrap();
    for f in &files {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    assert!(files.contains(&"client_01_providers.txt".to_string()));
    assert_eq!(read_red_manifests(dir.path(), &c).unwrap(), s.red);

    std::fs::write(dir.path().join("red_in_docs.txt"), "999999\n").unwrap();
    assert!(read_red_manifests(dir.path(), &c).is_err());
}
