use std::io::Read;
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::*;
use crate::synthetic::{fruit_profile, fruit_schema};

fn mock(profile: MockProfile) -> Arc<dyn Backend> {
    Arc::new(MockBackend::new(profile).unwrap())
}

fn fruit_classifier() -> Classifier {
    Classifier::new(mock(fruit_profile()), fruit_schema())
}

fn plain_spec() -> PromptSpec {
    PromptSpec::new(&fruit_schema(), "Classify the fruit described by the customer.")
}

fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    dot / (a.norm() * b.norm())
}

#[test]
fn tart_rule_answers_cranberry() {
    let schema = fruit_schema();
    let rendered = build_prompt(&schema, &plain_spec()).unwrap();
    let prompt = with_document(&rendered.text, "A very tart little berry.");
    let raw = complete(mock(fruit_profile()).as_ref(), &prompt).unwrap();
    assert_eq!(
        parse_classification(&raw, &schema).unwrap(),
        Label::pair("Red Fruits", "Cranberry")
    );
}

#[test]
fn empty_prompt_is_rejected() {
    assert!(matches!(
        complete(mock(MockProfile::default()).as_ref(), "  \n"),
        Err(GatewayError::EmptyPrompt)
    ));
}

#[test]
fn crescent_document_is_banana() {
    let doc = ProcessedDocument::from_text("d1", "This fruit is yellow and has a crescent shape.");
    let result = fruit_classifier().classify(&doc, &plain_spec()).unwrap();
    assert_eq!(result.parent, "Yellow Fruits");
    assert_eq!(result.child.as_deref(), Some("Banana"));
    assert_eq!(result.raw_response, r#"{"child":"K-02.1","parent":"K-02"}"#);
    assert_eq!(result.prompt_hash, build_prompt(&fruit_schema(), &plain_spec()).unwrap().hash);
    assert_eq!(result.backend_id, "mock");
}

#[test]
fn unknown_label_from_backend() {
    let profile = MockProfile {
        fallback: Fallback::FirstTokenLabel,
        ..MockProfile::default()
    };
    let classifier = Classifier::new(mock(profile), fruit_schema());
    let doc = ProcessedDocument::from_text("d1", "Dragonfruit is pink.");
    let err = classifier.classify(&doc, &plain_spec()).unwrap_err();
    assert!(matches!(err, GatewayError::UnknownLabel(l) if l == "Dragonfruit"));
}

#[test]
fn prefix_window_misses_late_signal() {
    let profile = MockProfile {
        read_window: ReadWindow::PrefixFraction { fraction: 0.3 },
        ..fruit_profile()
    };
    let classifier = Classifier::new(mock(profile), fruit_schema());
    let text = "one two three four five six seven eight nine and finally tart";
    let doc = ProcessedDocument::from_text("d1", text);
    let result = classifier.classify(&doc, &plain_spec()).unwrap();
    // the profile falls back to K-02/K-02.1
    assert_eq!(result.label(), Label::pair("Yellow Fruits", "Banana"));

    let full = fruit_classifier().classify(&doc, &plain_spec()).unwrap();
    assert_eq!(full.label(), Label::pair("Red Fruits", "Cranberry"));
}

#[test]
fn prefix_window_counts_ceiling_of_words() {
    // 10 words, fraction 0.3 → exactly 3 words visible
    let profile = MockProfile {
        read_window: ReadWindow::PrefixFraction { fraction: 0.3 },
        ..fruit_profile()
    };
    let classifier = Classifier::new(mock(profile), fruit_schema());
    let hit = ProcessedDocument::from_text("a", "one two tart four five six seven eight nine ten");
    let miss = ProcessedDocument::from_text("b", "one two three tart five six seven eight nine ten");
    assert_eq!(classifier.classify(&hit, &plain_spec()).unwrap().child.as_deref(), Some("Cranberry"));
    assert_eq!(classifier.classify(&miss, &plain_spec()).unwrap().child.as_deref(), Some("Banana"));
}

#[test]
fn invalid_profiles_are_rejected() {
    let bad_fraction = MockProfile {
        read_window: ReadWindow::PrefixFraction { fraction: 0.0 },
        ..MockProfile::default()
    };
    assert!(matches!(MockBackend::new(bad_fraction), Err(GatewayError::Config(_))));
    let empty_pattern = MockProfile {
        keyword_rules: vec![KeywordRule::new("  ", "K-01", None)],
        ..MockProfile::default()
    };
    assert!(matches!(MockBackend::new(empty_pattern), Err(GatewayError::Config(_))));
}

#[test]
fn mock_profile_round_trips_through_toml() {
    let profile = MockProfile {
        flip_rule: Some(FlipRule {
            doc_ids: vec!["d1".into()],
            parity: Parity::Odd,
            parent: "K-03".into(),
            child: None,
        }),
        read_window: ReadWindow::PrefixFraction { fraction: 0.5 },
        fallback: Fallback::LastExampleLabel,
        ..fruit_profile()
    };
    let body = toml::to_string(&profile).unwrap();
    assert_eq!(MockProfile::parse(&body).unwrap(), profile);
}

#[test]
fn fixed_fallback_without_parent_uses_first_listed_class() {
    let classifier = Classifier::new(mock(MockProfile::default()), fruit_schema());
    let doc = ProcessedDocument::from_text("d", "Nothing recognizable here.");
    assert_eq!(classifier.classify(&doc, &plain_spec()).unwrap().label(), Label::parent("Red Fruits"));
}

#[test]
fn last_example_fallback_follows_example_order() {
    use crate::prompting::{ExampleOrigin, FewShotExample};
    let schema = fruit_schema();
    let profile = MockProfile {
        fallback: Fallback::LastExampleLabel,
        ..MockProfile::default()
    };
    let classifier = Classifier::new(mock(profile), schema.clone());
    let spec = plain_spec().with_examples(vec![
        FewShotExample::new("a lime", &Label::pair("Green Fruits", "Lime"), ExampleOrigin::Seed),
        FewShotExample::new("a lemon", &Label::pair("Yellow Fruits", "Lemon"), ExampleOrigin::Seed),
    ]);
    let doc = ProcessedDocument::from_text("d", "Unclear produce.");
    assert_eq!(classifier.classify(&doc, &spec).unwrap().child.as_deref(), Some("Lemon"));
    let swapped = spec.with_order(vec![1, 0]);
    assert_eq!(classifier.classify(&doc, &swapped).unwrap().child.as_deref(), Some("Lime"));
}

#[test]
fn grounded_rule_needs_prompt_support() {
    let schema = fruit_schema();
    let profile = MockProfile {
        keyword_rules: vec![KeywordRule::new("velvet", "K-03", Some("K-03.2")).grounded()],
        ..MockProfile::default()
    };
    let classifier = Classifier::new(mock(profile), schema.clone());
    let doc = ProcessedDocument::from_text("d", "A velvet-skinned fruit.");
    let without = classifier.classify(&doc, &plain_spec()).unwrap();
    assert_eq!(without.label(), Label::parent("Red Fruits"));
    let with = PromptSpec::new(&schema, "Velvet skin is a strong hint.");
    assert_eq!(classifier.classify(&doc, &with).unwrap().label(), Label::pair("Green Fruits", "Kiwi"));
}

#[test]
fn flip_rule_alternates_by_run() {
    let profile = MockProfile {
        flip_rule: Some(FlipRule {
            doc_ids: vec!["d1".into()],
            parity: Parity::Odd,
            parent: "K-03".into(),
            child: Some("K-03.1".into()),
        }),
        ..fruit_profile()
    };
    let classifier = Classifier::new(mock(profile), fruit_schema());
    let flipped = ProcessedDocument::from_text("d1", "crescent");
    let steady = ProcessedDocument::from_text("d2", "crescent");
    let runs: Vec<String> = (0..4)
        .map(|_| classifier.classify(&flipped, &plain_spec()).unwrap().child.unwrap())
        .collect();
    assert_eq!(runs, vec!["Banana", "Lime", "Banana", "Lime"]);
    for _ in 0..4 {
        assert_eq!(classifier.classify(&steady, &plain_spec()).unwrap().child.as_deref(), Some("Banana"));
    }
}

#[test]
fn cot_response_still_parses() {
    let classifier = fruit_classifier();
    let spec = plain_spec().with_cot(true);
    let doc = ProcessedDocument::from_text("d", "Fuzzy and brown.");
    let result = classifier.classify(&doc, &spec).unwrap();
    assert!(result.raw_response.starts_with("The document"));
    assert_eq!(result.label(), Label::pair("Green Fruits", "Kiwi"));
}

#[test]
fn batch_keeps_input_order() {
    let docs: Vec<ProcessedDocument> = ["tart", "crescent", "fuzzy", "zest", "rind"]
        .iter()
        .enumerate()
        .map(|(i, t)| ProcessedDocument::from_text(format!("d{i}"), *t))
        .collect();
    let results = fruit_classifier().with_workers(3).classify_batch(&docs, &plain_spec()).unwrap();
    let children: Vec<_> = results.iter().map(|r| r.child.clone().unwrap()).collect();
    assert_eq!(children, vec!["Cranberry", "Banana", "Kiwi", "Lime", "Lemon"]);
}

#[test]
fn topics_follow_rule_table_and_merge_case() {
    let docs = vec![
        ProcessedDocument::from_text("a", "tart berries"),
        ProcessedDocument::from_text("b", "crescent"),
        ProcessedDocument::from_text("c", "thick rind"),
        ProcessedDocument::from_text("d", "nothing"),
    ];
    let corpus = Corpus::from_documents(docs).unwrap();
    let backend = mock(fruit_profile());
    let found = discover_topics(&corpus, DEFAULT_TOPIC_PROMPT, 10, backend.as_ref(), 2).unwrap();
    assert_eq!(found.topics.names(), vec!["Berries", "Tropical", "Citrus", "Other"]);
    assert_eq!(found.assignments["a"], "Berries");
    assert_eq!(found.assignments["c"], "Citrus");
    assert_eq!(found.assignments["d"], "Other");

    let shouting = MockProfile {
        keyword_rules: vec![
            KeywordRule::new("upper", "K-01", None).topic("LOGIN", "x"),
            KeywordRule::new("lower", "K-01", None).topic("login", "y"),
        ],
        ..MockProfile::default()
    };
    let corpus = Corpus::from_documents(vec![
        ProcessedDocument::from_text("1", "upper"),
        ProcessedDocument::from_text("2", "lower"),
    ])
    .unwrap();
    let found = discover_topics(&corpus, DEFAULT_TOPIC_PROMPT, 5, mock(shouting).as_ref(), 1).unwrap();
    assert_eq!(found.topics.len(), 1);
    assert_eq!(found.assignments["2"], "LOGIN");
}

#[test]
fn topics_respect_budget() {
    let docs: Vec<ProcessedDocument> = ["tart", "tart", "crescent", "rind", "rind", "rind", "nothing"]
        .iter()
        .enumerate()
        .map(|(i, t)| ProcessedDocument::from_text(format!("d{i}"), *t))
        .collect();
    let corpus = Corpus::from_documents(docs).unwrap();
    let found = discover_topics(&corpus, DEFAULT_TOPIC_PROMPT, 2, mock(fruit_profile()).as_ref(), 1).unwrap();
    assert!(found.topics.len() <= 2);
    assert_eq!(found.topics.names(), vec!["Citrus", "Other"]);
    assert_eq!(found.assignments.len(), 7);
    assert_eq!(found.assignments["d0"], "Other");
    assert_eq!(found.assignments["d3"], "Citrus");
}

#[test]
fn empty_corpus_yields_no_topics() {
    let corpus = Corpus::from_documents(vec![]).unwrap();
    let found = discover_topics(&corpus, DEFAULT_TOPIC_PROMPT, 3, mock(fruit_profile()).as_ref(), 1).unwrap();
    assert!(found.topics.is_empty());
    assert!(found.assignments.is_empty());
    assert!(discover_topics(&corpus, DEFAULT_TOPIC_PROMPT, 0, mock(fruit_profile()).as_ref(), 1).is_err());
}

#[test]
fn mock_embeddings() {
    let backend = mock(MockProfile::default());
    let a = embed(backend.as_ref(), "apple").unwrap();
    let b = embed(backend.as_ref(), "apple").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dim, 256);
    assert_eq!(a.provider_id, "mock-bow-256");
    assert!((cosine(&a, &b) - 1.0).abs() < 1e-12);
    // token-disjoint strings whose tokens hash to different buckets
    let c = embed(backend.as_ref(), "red berry").unwrap();
    let d = embed(backend.as_ref(), "yellow banana").unwrap();
    assert_eq!(cosine(&c, &d), 0.0);
    assert!(matches!(embed(backend.as_ref(), " "), Err(GatewayError::EmptyText)));
}

#[test]
fn retries_stop_after_limit() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let attempts = Arc::new(AtomicUsize::new(0));
    let counter = attempts.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            counter.fetch_add(1, Ordering::SeqCst);
            let mut buf = [0u8; 1024];
            let _ = stream.read(&mut buf);
            drop(stream);
        }
    });
    let config = BackendConfig {
        kind: BackendKind::Http,
        endpoint: Some(format!("http://{addr}/complete")),
        retry_limit: 2,
        retry_backoff_ms: 1,
        timeout_secs: 5.0,
        ..BackendConfig::default()
    };
    let backend = build_backend(&config).unwrap();
    let err = complete(backend.as_ref(), "hello").unwrap_err();
    assert!(matches!(err, GatewayError::Transport(_)), "{err:?}");
    assert_eq!(attempts.load(Ordering::SeqCst), 3);
}

#[test]
fn http_round_trip() {
    use std::io::Write;
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut buf = vec![0u8; 8192];
        let mut got = Vec::new();
        // read until the JSON body is complete
        loop {
            let n = stream.read(&mut buf).unwrap();
            got.extend_from_slice(&buf[..n]);
            let s = String::from_utf8_lossy(&got);
            if let Some(i) = s.find("\r\n\r\n") {
                if s[i..].contains('}') {
                    break;
                }
            }
            if n == 0 {
                break;
            }
        }
        let body = r#"{"text": "{\"parent\": \"K-02\"}"}"#;
        write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            body.len(),
            body
        )
        .unwrap();
        String::from_utf8_lossy(&got).to_string()
    });
    let config = BackendConfig {
        kind: BackendKind::Http,
        endpoint: Some(format!("http://{addr}/complete")),
        model_id: "m1".into(),
        ..BackendConfig::default()
    };
    let backend = build_backend(&config).unwrap();
    let text = complete(backend.as_ref(), "TASK: CLASSIFICATION\nhi").unwrap();
    assert_eq!(text, r#"{"parent": "K-02"}"#);
    let request = handle.join().unwrap();
    assert!(request.starts_with("POST /complete"));
    let body: serde_json::Value = serde_json::from_str(request.split("\r\n\r\n").nth(1).unwrap()).unwrap();
    assert_eq!(body["model"], "m1");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["prompt"], "TASK: CLASSIFICATION\nhi");
}

#[test]
fn http_needs_endpoint_and_nonnegative_temperature() {
    let config = BackendConfig {
        kind: BackendKind::Http,
        ..BackendConfig::default()
    };
    assert!(matches!(build_backend(&config), Err(GatewayError::Config(_))));
    let config = BackendConfig {
        temperature: -1.0,
        ..BackendConfig::default()
    };
    assert!(matches!(build_backend(&config), Err(GatewayError::Config(_))));
    assert!(BackendConfig::default().require_deterministic().is_ok());
}

#[test]
fn wire_fixture_documents_both_calls() {
    let body = include_str!("../../fixtures/http_wire.json");
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    for key in ["model", "temperature", "prompt"] {
        assert!(v["completion"]["request"]["body"].get(key).is_some());
    }
    assert!(v["completion"]["response"]["body"]["text"].is_string());
    assert!(v["embedding"]["response"]["body"]["embedding"].is_array());
}
