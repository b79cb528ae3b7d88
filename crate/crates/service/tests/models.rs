use std::sync::Arc;

use hiersample::checkpoint;
use hiersample::coherence::{ClassifierConfig, EncoderClassifier};
use hiersample::corpus::Vocabulary;
use hiersample::decoding::DecodeConfig;
use hiersample::model::{ModelConfig, Seq2SeqModel};
use hiersample_service::api::{CreateSession, PostUtterance};
use hiersample_service::responder::load_registry;
use hiersample_service::store::Mode;
use hiersample_service::{Service, ServiceConfig, ServiceError, Store};

fn write_models(dir: &std::path::Path) -> std::path::PathBuf {
    let vocab = Vocabulary::new(["hello", "there", "+f1", "-f1", "w0"]);
    let model = Seq2SeqModel::new(ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        heads: 2,
        d_ff: 32,
        encoder_layers: 1,
        decoder_layers: 1,
        max_positions: 64,
        init_seed: 3,
    })
    .unwrap();
    let clf = EncoderClassifier::new(
        ClassifierConfig { d_model: 16, heads: 2, d_ff: 32, layers: 1, ..ClassifierConfig::default() },
        vocab.len(),
    )
    .unwrap();
    checkpoint::write(&dir.join("policy.ckpt"), &checkpoint::encode_model(&model, &vocab)).unwrap();
    checkpoint::write(&dir.join("clf.ckpt"), &checkpoint::encode_classifier(&clf, &vocab)).unwrap();
    let reg = dir.join("registry.toml");
    std::fs::write(
        &reg,
        "[models.plain]\ncheckpoint = \"policy.ckpt\"\n\n[models.ranked]\ncheckpoint = \"policy.ckpt\"\nclassifier = \"clf.ckpt\"\n",
    )
    .unwrap();
    reg
}

fn service(reg: &std::path::Path, max_input_tokens: usize) -> Service {
    let registry = load_registry(reg, &DecodeConfig::greedy(6), 3, max_input_tokens).unwrap();
    Service::new(Store::in_memory(), registry, ServiceConfig::default())
}

fn create(models: &[&str], mode: Mode, rerank: bool) -> CreateSession {
    CreateSession { models: models.iter().map(|s| s.to_string()).collect(), mode, prompt: None, seed: Some(9), rerank }
}

#[tokio::test]
async fn checkpointed_models_answer_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let reg = write_models(dir.path());
    let mut transcripts = Vec::new();
    for _ in 0..2 {
        let svc = service(&reg, 512);
        let (view, _) = svc.create_session(create(&["plain", "ranked"], Mode::SideBySide, false)).await.unwrap();
        let mut replies = Vec::new();
        for text in ["hello there", "+f1 hello", "w0 -f1"] {
            let r = svc.post_utterance(&view.id, PostUtterance { text: text.into(), turn_id: None }).await.unwrap();
            assert_eq!(r.replies.len(), 2);
            assert!(r.replies.iter().all(|l| !l.text.is_empty() && !l.truncated));
            replies.push(r);
        }
        transcripts.push(replies);
    }
    assert_eq!(transcripts[0], transcripts[1]);
}

#[tokio::test]
async fn rerank_needs_a_classifier() {
    let dir = tempfile::tempdir().unwrap();
    let reg = write_models(dir.path());
    let svc = service(&reg, 512);
    assert!(matches!(svc.create_session(create(&["plain"], Mode::Single, true)).await, Err(ServiceError::Invalid(_))));
    let (view, _) = svc.create_session(create(&["ranked"], Mode::Single, true)).await.unwrap();
    let r = svc.post_utterance(&view.id, PostUtterance { text: "hello".into(), turn_id: None }).await.unwrap();
    assert!(!r.replies[0].text.is_empty());
}

#[tokio::test]
async fn long_histories_are_flagged_as_truncated() {
    let dir = tempfile::tempdir().unwrap();
    let reg = write_models(dir.path());
    let svc = Arc::new(service(&reg, 8));
    let (view, _) = svc.create_session(create(&["plain"], Mode::Single, false)).await.unwrap();
    let first = svc.post_utterance(&view.id, PostUtterance { text: "hello".into(), turn_id: None }).await.unwrap();
    assert!(!first.replies[0].truncated);
    let long = svc
        .post_utterance(&view.id, PostUtterance { text: "hello there hello there hello there".into(), turn_id: None })
        .await
        .unwrap();
    assert!(long.replies[0].truncated);
    let view = svc.view(&view.id).await.unwrap();
    assert!(view.lanes[0].turns.last().unwrap().truncated);
}

#[test]
fn registry_rejects_mismatched_vocabularies() {
    let dir = tempfile::tempdir().unwrap();
    write_models(dir.path());
    let other = Vocabulary::new(["x"]);
    let clf = EncoderClassifier::new(
        ClassifierConfig { d_model: 16, heads: 2, d_ff: 32, layers: 1, ..ClassifierConfig::default() },
        other.len(),
    )
    .unwrap();
    checkpoint::write(&dir.path().join("clf.ckpt"), &checkpoint::encode_classifier(&clf, &other)).unwrap();
    let reg = dir.path().join("registry.toml");
    assert!(load_registry(&reg, &DecodeConfig::default(), 3, 512).is_err());
}
