use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use provider_dp::corpus::{generate_corpus, Corpus, CorpusConfig};
use provider_dp::model::{
    evaluate, evaluate_predictions, read_checkpoint, redact, train_local, write_checkpoint, EncodedExample, LocalSteps,
    ModelDims, QaModel, TrainHyper, ANLS_THRESHOLD, REDACT_THRESHOLD,
};
use provider_dp::text::nls;

fn corpus(n_providers: usize, seed: u64) -> Corpus {
    let config = CorpusConfig { n_providers, n_clients: 1, docs_per_provider: (2, 4), seed, ..Default::default() };
    generate_corpus(&config).unwrap()
}

fn loss(model: &QaModel, params: &provider_dp::model::ParameterVector, batch: &[&EncodedExample]) -> f64 {
    model.loss_and_grad(params, batch).unwrap().0
}

#[test]
fn gradient_matches_finite_differences() {
    let c = corpus(4, 1);
    let model = QaModel::from_corpus(&c, &ModelDims { embed_dim: 3, hidden_dim: 4, init_scale: 1.0 }).unwrap();
    let examples = model.encode_docs(&c, (0..c.documents.len()).collect::<Vec<_>>().iter()).unwrap();
    let trainable = model.layout().trainable_mask();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-6;
    for trial in 0..100 {
        let mut params = model.init_params(trial);
        for v in params.iter_mut() {
            *v *= 4.0;
        }
        let size = rng.random_range(1..=4);
        let batch: Vec<&EncodedExample> = (0..size).map(|_| &examples[rng.random_range(0..examples.len())]).collect();
        let (_, grad) = model.loss_and_grad(&params, &batch).unwrap();
        let mut coords: Vec<usize> = (0..params.len()).filter(|&i| trainable[i] && grad[i] != 0.0).collect();
        while coords.len() > 100 {
            coords.swap_remove(rng.random_range(0..coords.len()));
        }
        let (mut diff, mut norm) = (0.0, 0.0);
        for &i in &coords {
            let mut p = params.clone();
            p[i] += h;
            let up = loss(&model, &p, &batch);
            p[i] -= 2.0 * h;
            let fd = (up - loss(&model, &p, &batch)) / (2.0 * h);
            diff += (fd - grad[i]).powi(2);
            norm += fd.powi(2);
        }
        let rel = (diff / norm).sqrt();
        assert!(rel < 1e-4, "trial {trial}: relative error {rel}");
    }
}

#[test]
fn probabilities_are_normalised() {
    let c = corpus(6, 2);
    let model = QaModel::from_corpus(&c, &ModelDims::default()).unwrap();
    let params = model.init_params(2);
    for ex in model.encode_docs(&c, [0usize, 1, 2].iter()).unwrap() {
        let p = model.probabilities(&params, &ex.input).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let pred = model.forward(&params, &ex.input, Some(ex.gold)).unwrap();
        assert!((pred.conf - p[pred.answer_index as usize]).abs() < 1e-12);
        assert!((pred.loss.unwrap() + p[ex.gold as usize].ln()).abs() < 1e-9);
    }
}

#[test]
fn untrained_model_answers_nothing() {
    let c = corpus(6, 3);
    let model = QaModel::from_corpus(&c, &ModelDims::default()).unwrap();
    let params = model.init_params(3);
    let examples = model.encode_docs(&c, (0..c.documents.len()).collect::<Vec<_>>().iter()).unwrap();
    let report = evaluate(&model, &params, &examples).unwrap();
    assert_eq!(report.acc, 0.0);
    for ex in &examples {
        assert_eq!(model.forward(&params, &ex.input, None).unwrap().answer, "");
    }
}

#[test]
fn memorizes_a_single_pair() {
    let c = corpus(10, 4);
    let model = QaModel::from_corpus(&c, &ModelDims::default()).unwrap();
    let params = model.init_params(4);
    let ex = model.encode_docs(&c, [0usize].iter()).unwrap().remove(0);
    let hyper = TrainHyper { local_steps: LocalSteps::Steps(200), learning_rate: 2e-4, ..Default::default() };
    let trained = train_local(&model, &params, &[&ex], &hyper, 4).unwrap();
    let l = loss(&model, &trained, &[&ex]);
    assert!(l < 0.01, "loss after 200 steps: {l}");
    let again = train_local(&model, &params, &[&ex], &hyper, 4).unwrap();
    assert_eq!(trained.values, again.values);
    assert_ne!(trained.values, params.values);
}

#[test]
fn training_loss_falls_over_five_step_windows() {
    let c = corpus(8, 5);
    let model = QaModel::from_corpus(&c, &ModelDims::default()).unwrap();
    let params = model.init_params(5);
    let generic: Vec<&str> = c.config.keys.iter().filter(|k| k.generic).map(|k| k.name.as_str()).collect();
    let examples: Vec<EncodedExample> = c
        .docs_of(0)
        .flat_map(|d| d.qa.iter().filter(|q| generic.contains(&q.key.as_str())).map(move |q| (d, q)))
        .map(|(d, q)| model.encode_example(d, q).unwrap())
        .collect();
    assert!(!examples.is_empty());
    let batch: Vec<&EncodedExample> = examples.iter().collect();
    let mut prev = loss(&model, &params, &batch);
    for steps in (5..=50).step_by(5) {
        let hyper = TrainHyper { local_steps: LocalSteps::Steps(steps), ..Default::default() };
        let l = loss(&model, &train_local(&model, &params, &batch, &hyper, 5).unwrap(), &batch);
        assert!(l < prev, "loss rose to {l} from {prev} at {steps} steps");
        prev = l;
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let c = corpus(4, 6);
    let model = QaModel::from_corpus(&c, &ModelDims::default()).unwrap();
    let params = model.init_params(6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    write_checkpoint(std::fs::File::create(&path).unwrap(), &params).unwrap();
    let back = read_checkpoint(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back, params);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(read_checkpoint(bytes.as_slice()).is_err());
}

#[test]
fn redaction_removes_every_close_token() {
    let c = corpus(10, 7);
    for doc in &c.documents {
        for (key, value) in &doc.fields {
            let red = redact(doc, value, REDACT_THRESHOLD);
            assert!(red.token_stream.iter().all(|t| nls(t, value) < REDACT_THRESHOLD), "{key} survived");
            assert!(red.visual.iter().all(|&v| v == 0.0));
            assert_eq!(c.documents[doc.doc_id], *doc);
        }
    }
}

proptest! {
    #[test]
    fn anls_never_below_acc(
        pairs in prop::collection::vec(("[a-cA-C ]{0,6}", "[a-c]{0,6}", 0.0f64..1.0), 1..30)
    ) {
        let r = evaluate_predictions(pairs.iter().map(|(p, g, c)| (p.as_str(), g.as_str(), *c)), ANLS_THRESHOLD).unwrap();
        prop_assert!(r.anls >= r.acc);
        prop_assert!((0.0..=100.0).contains(&r.acc) && (0.0..=100.0).contains(&r.anls));
    }
}
