use std::sync::Arc;

use approx::assert_abs_diff_eq;
use chrono::TimeZone;
use proptest::prelude::*;

use super::*;
use crate::gateway::{Completion, Fallback, KeywordRule, MockBackend, MockProfile};
use crate::schema::ClassDef;
use crate::store::GoldenEntry;
use crate::synthetic::{fruit_profile, fruit_schema};

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 6, 1, 0, 0, 0).unwrap()
}

fn vector(values: &[f64]) -> EmbeddingVector {
    EmbeddingVector::new(values.to_vec(), "test")
}

fn mock(profile: MockProfile) -> Arc<dyn Backend> {
    Arc::new(MockBackend::new(profile).unwrap())
}

#[test]
fn cosine_examples() {
    let u = vector(&[0.3, -1.2, 2.0]);
    assert_abs_diff_eq!(cosine_similarity(&u, &u).unwrap(), 1.0, epsilon = 1e-12);
    assert_eq!(cosine_similarity(&vector(&[1.0, 0.0]), &vector(&[0.0, 1.0])).unwrap(), 0.0);
    assert_abs_diff_eq!(
        cosine_similarity(&vector(&[1.0, 1.0, 0.0]), &vector(&[1.0, 0.0, 0.0])).unwrap(),
        std::f64::consts::FRAC_1_SQRT_2,
        epsilon = 1e-5
    );
    assert!(matches!(
        cosine_similarity(&vector(&[1.0]), &vector(&[1.0, 0.0])),
        Err(FewshotError::DimensionMismatch(_))
    ));
    let other_provider = EmbeddingVector::new(vec![1.0, 0.0], "else");
    assert!(matches!(
        cosine_similarity(&vector(&[1.0, 0.0]), &other_provider),
        Err(FewshotError::DimensionMismatch(_))
    ));
    assert!(matches!(
        cosine_similarity(&vector(&[0.0, 0.0]), &vector(&[1.0, 0.0])),
        Err(FewshotError::ZeroVector)
    ));
}

#[test]
fn ranking_by_description_similarity() {
    let backend = mock(MockProfile::default());
    let mut descriptions = BTreeMap::new();
    descriptions.insert("Red Fruits/Cranberry".to_string(), "very tart bog berries".to_string());
    let label = Label::pair("Red Fruits", "Cranberry");
    let candidates = vec![
        (ProcessedDocument::from_text("z", "completely unrelated words"), label.clone()),
        (ProcessedDocument::from_text("b", "tart berries"), label.clone()),
        (ProcessedDocument::from_text("a", "tart berries"), label.clone()),
        (ProcessedDocument::from_text("y", "very tart bog berries"), label.clone()),
    ];
    let ranked = rank_examples(&candidates, &descriptions, backend.as_ref()).unwrap();
    let ids: Vec<&str> = ranked.iter().map(|r| r.doc_id.as_str()).collect();
    assert_eq!(ids, vec!["y", "a", "b", "z"]);
    assert_abs_diff_eq!(ranked[0].similarity, 1.0, epsilon = 1e-12);
    assert_eq!(ranked[3].similarity, 0.0);
    assert_eq!(ranked[1].similarity, ranked[2].similarity);

    let missing = vec![(ProcessedDocument::from_text("q", "x"), Label::parent("Green Fruits"))];
    assert!(matches!(
        rank_examples(&missing, &descriptions, backend.as_ref()),
        Err(FewshotError::MissingDescription(c)) if c == "Green Fruits"
    ));
}

/// Three parents; rules cover "alpha" → A and "beta" → B; anything else
/// copies the last example's label (the first class when there are none).
fn scenario() -> (Classifier, PromptSpec, Vec<RankedExample>, GoldenSet, Corpus) {
    let schema = ClassSchema::new(
        1,
        vec![
            ClassDef::new("A", "first kind"),
            ClassDef::new("B", "second kind"),
            ClassDef::new("C", "third kind"),
        ],
    );
    let profile = MockProfile {
        keyword_rules: vec![
            KeywordRule::new("alpha", "K-01", None),
            KeywordRule::new("beta", "K-02", None),
        ],
        fallback: Fallback::LastExampleLabel,
        ..MockProfile::default()
    };
    let classifier = Classifier::new(mock(profile), schema.clone()).with_workers(1);
    let spec = PromptSpec::new(&schema, "Pick a kind.");
    let ranked = vec![
        RankedExample {
            doc_id: "e1".into(),
            class_name: "B".into(),
            similarity: 0.9,
            text: "second sample".into(),
        },
        RankedExample {
            doc_id: "e2".into(),
            class_name: "C".into(),
            similarity: 0.8,
            text: "third sample".into(),
        },
    ];
    let mut golden = Vec::new();
    let mut push = |text: &str, label: &str, n: usize| {
        for _ in 0..n {
            let id = format!("g{}", golden.len());
            golden.push(GoldenEntry::new(id, text, Label::parent(label)));
        }
    };
    push("alpha item", "A", 4);
    push("beta item", "B", 4);
    push("plain item", "C", 3);
    push("plain item", "B", 2);
    let mut docs = Vec::new();
    for (text, n) in [("alpha doc", 45), ("beta doc", 45), ("plain doc", 10)] {
        for _ in 0..n {
            docs.push(ProcessedDocument::from_text(format!("m{}", docs.len()), text));
        }
    }
    (classifier, spec, ranked, GoldenSet::new(golden), Corpus::from_documents(docs).unwrap())
}

#[test]
fn select_k_respects_kl_budget() {
    let (classifier, spec, ranked, golden, monitoring) = scenario();
    let report = select_k(&ranked, &golden, &monitoring, None, &spec, &classifier, 0.1, 0.5).unwrap();
    assert_eq!(report.steps.len(), 3);
    let v: Vec<f64> = report.steps.iter().map(|s| s.validity).collect();
    assert_abs_diff_eq!(v[0], (8.0 / 13.0 + 0.8) / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(v[1], 0.6, epsilon = 1e-12);
    assert_abs_diff_eq!(v[2], 0.85, epsilon = 1e-12);
    assert_eq!(report.steps[0].distribution.counts, vec![55, 45, 0]);
    assert_eq!(report.steps[1].distribution.counts, vec![45, 55, 0]);
    assert_eq!(report.steps[2].distribution.counts, vec![45, 45, 10]);
    assert_eq!(report.steps[0].kl, 0.0);
    assert!(report.steps[1].kl < 0.1 && report.steps[2].kl > 0.1);
    assert_eq!(report.k_star, 1);
    assert_eq!(report.chosen.len(), 1);

    // exhaustive oracle: argmax over feasible k, smallest k on ties
    for eps in [0.0, 0.05, 0.1, 0.5, f64::INFINITY] {
        let r = select_k(&ranked, &golden, &monitoring, None, &spec, &classifier, eps, 0.5).unwrap();
        let mut best = 0;
        for s in &r.steps {
            if s.kl <= eps && s.validity > r.steps[best].validity {
                best = s.k;
            }
        }
        assert_eq!(r.k_star, best, "eps {eps}");
    }
    let unconstrained = select_k(&ranked, &golden, &monitoring, None, &spec, &classifier, f64::INFINITY, 0.5).unwrap();
    assert_eq!(unconstrained.k_star, 2);
}

#[test]
fn select_k_with_nothing_ranked() {
    let (classifier, spec, _, golden, monitoring) = scenario();
    let r = select_k(&[], &golden, &monitoring, None, &spec, &classifier, 0.1, 0.5).unwrap();
    assert_eq!(r.k_star, 0);
    assert_eq!(r.steps.len(), 1);
    assert!(r.chosen.is_empty());
}

#[test]
fn preference_recording() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let schema = fruit_schema();
    let doc = ProcessedDocument::from_text("d1", "small red fruit");
    let banana = Label::pair("Yellow Fruits", "Banana");
    let cran = Label::pair("Red Fruits", "Cranberry");
    let pair = record_preference(&store, &schema, &doc, cran.clone(), banana.clone(), "ann", PreferenceSource::Human, 1, t0()).unwrap();
    assert_eq!(load_preferences(&store).unwrap(), vec![pair]);

    assert!(matches!(
        record_preference(&store, &schema, &doc, banana.clone(), banana.clone(), "ann", PreferenceSource::Human, 2, t0()),
        Err(FewshotError::LabelEqualsLoser(_))
    ));
    assert!(matches!(
        record_preference(&store, &schema, &doc, banana.clone(), cran.clone(), "ann", PreferenceSource::Human, 1, t0()),
        Err(FewshotError::DuplicateJudgment { .. })
    ));
    assert!(matches!(
        record_preference(&store, &schema, &doc, Label::parent("Zzz"), cran.clone(), "ann", PreferenceSource::Human, 1, t0()),
        Err(FewshotError::UnknownLabel(_))
    ));
    // another reviewer or round is fine
    record_preference(&store, &schema, &doc, banana.clone(), cran.clone(), "bob", PreferenceSource::Human, 1, t0()).unwrap();
    record_preference(&store, &schema, &doc, banana, cran, "ann", PreferenceSource::Human, 2, t0()).unwrap();
    assert_eq!(load_preferences(&store).unwrap().len(), 3);
}

fn commonness() -> Constitution {
    Constitution::parse(
        "When two fruits both fit, prefer the more common fruit.\n\nPrefer the label whose definition\nmatches more details.",
        1,
    )
}

#[test]
fn constitution_paragraphs() {
    let c = commonness();
    assert_eq!(c.principles.len(), 2);
    assert_eq!(c.principles[1], "Prefer the label whose definition matches more details.");
}

#[test]
fn judge_prefers_currant_for_bush_fruit() {
    let schema = fruit_schema();
    let doc = ProcessedDocument::from_text("amb", "small, red, tart fruit that grows on a bush");
    let cran = Label::pair("Red Fruits", "Cranberry");
    let currant = Label::pair("Red Fruits", "Redcurrant");
    let backend = mock(fruit_profile());
    let pair = judge_preference(&schema, &doc, &[cran.clone(), currant.clone()], &commonness(), backend.as_ref(), "judge", 1, t0()).unwrap();
    assert_eq!(pair.y_w, currant);
    assert_eq!(pair.y_l, cran);
    assert_eq!(pair.source, PreferenceSource::Judge);

    // no rule hit: the mock echoes the first candidate
    let plain = ProcessedDocument::from_text("p", "a piece of fruit");
    let pair = judge_preference(&schema, &plain, &[cran.clone(), currant.clone()], &commonness(), backend.as_ref(), "judge", 1, t0()).unwrap();
    assert_eq!(pair.y_w, cran);

    let prompt = judge_prompt(&schema, &doc, &[cran.clone(), currant.clone()], &commonness()).unwrap();
    assert!(prompt.contains("- K-01.1:"));
    assert!(!prompt.contains("Cranberry"));

    assert!(matches!(
        judge_preference(&schema, &doc, std::slice::from_ref(&cran), &commonness(), backend.as_ref(), "j", 1, t0()),
        Err(FewshotError::CandidateCount)
    ));
    assert!(matches!(
        judge_preference(&schema, &doc, &[cran.clone(), currant.clone()], &Constitution::parse("", 1), backend.as_ref(), "j", 1, t0()),
        Err(FewshotError::EmptyConstitution)
    ));
}

struct Replies(&'static str);

impl Backend for Replies {
    fn id(&self) -> &str {
        "fixed"
    }
    fn complete(&self, _: CompletionRequest<'_>) -> Result<Completion, GatewayError> {
        Ok(Completion {
            text: self.0.into(),
            latency: std::time::Duration::ZERO,
        })
    }
    fn embed(&self, _: &str) -> Result<EmbeddingVector, GatewayError> {
        Err(GatewayError::Unsupported("embeddings"))
    }
}

#[test]
fn judge_outside_candidates_is_rejected() {
    let schema = fruit_schema();
    let doc = ProcessedDocument::from_text("d", "fruit");
    let cands = [Label::pair("Red Fruits", "Cranberry"), Label::pair("Red Fruits", "Redcurrant")];
    let err = judge_preference(&schema, &doc, &cands, &commonness(), &Replies("{\"winner\": \"Apple\"}"), "j", 1, t0()).unwrap_err();
    assert!(matches!(err, FewshotError::Gateway(GatewayError::WinnerNotCandidate(w)) if w == "Apple"));
    let err = judge_preference(&schema, &doc, &cands, &commonness(), &Replies("Apple"), "j", 1, t0()).unwrap_err();
    assert!(matches!(err, FewshotError::Gateway(GatewayError::UnparseableResponse { .. })));
}

fn labels(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(d, l)| (d.to_string(), l.to_string())).collect()
}

#[test]
fn agreement_examples() {
    let same = labels(&[("1", "x"), ("2", "y"), ("3", "x")]);
    let mut j = Judgments::new();
    j.insert("ann".into(), same.clone());
    j.insert("bob".into(), same.clone());
    let r = agreement(&j, &BTreeMap::new()).unwrap();
    assert_eq!(r.inter[0].kappa, 1.0);
    assert_eq!(r.mean_inter, Some(1.0));

    let mut j = Judgments::new();
    j.insert("ann".into(), labels(&[("1", "x"), ("2", "y")]));
    j.insert("bob".into(), labels(&[("1", "y"), ("2", "x")]));
    assert_eq!(agreement(&j, &BTreeMap::new()).unwrap().inter[0].kappa, -1.0);

    let mut j = Judgments::new();
    j.insert("ann".into(), labels(&[("1", "x"), ("2", "y")]));
    j.insert("bob".into(), labels(&[("1", "x"), ("3", "x")]));
    assert!(matches!(agreement(&j, &BTreeMap::new()), Err(FewshotError::InsufficientOverlap(..))));

    let mut rounds = BTreeMap::new();
    rounds.insert("ann".to_string(), vec![same.clone(), same]);
    let r = agreement(&Judgments::new(), &rounds).unwrap();
    assert_eq!(r.intra["ann"], 1.0);
}

#[test]
fn judgments_group_by_round() {
    let mk = |doc: &str, reviewer: &str, round: u32, w: &str| PreferencePair {
        doc_id: doc.into(),
        y_w: Label::parent(w),
        y_l: Label::parent("Z"),
        reviewer: reviewer.into(),
        source: PreferenceSource::Human,
        round,
        created_at: t0(),
    };
    let pairs = vec![mk("1", "ann", 1, "A"), mk("1", "ann", 2, "B"), mk("2", "ann", 2, "A")];
    let (latest, rounds) = judgments_from_pairs(&pairs);
    assert_eq!(latest["ann"]["1"], "B");
    assert_eq!(rounds["ann"].len(), 2);
    assert_eq!(reviewed_docs(&pairs).len(), 2);
}

proptest! {
    #[test]
    fn ranking_is_a_sorted_permutation(texts in prop::collection::vec("[a-e ]{1,12}", 1..12)) {
        let backend = mock(MockProfile::default());
        let mut descriptions = BTreeMap::new();
        descriptions.insert("A".to_string(), "a b c".to_string());
        let candidates: Vec<(ProcessedDocument, Label)> = texts
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.trim().is_empty())
            .map(|(i, t)| (ProcessedDocument::from_text(format!("d{i:02}"), t.clone()), Label::parent("A")))
            .collect();
        let ranked = rank_examples(&candidates, &descriptions, backend.as_ref()).unwrap();
        let mut got: Vec<&str> = ranked.iter().map(|r| r.doc_id.as_str()).collect();
        for w in ranked.windows(2) {
            prop_assert!(w[0].similarity > w[1].similarity
                || (w[0].similarity == w[1].similarity && w[0].doc_id < w[1].doc_id));
        }
        got.sort();
        let mut want: Vec<String> = candidates.iter().map(|(d, _)| d.id.clone()).collect();
        want.sort();
        prop_assert_eq!(got, want.iter().map(String::as_str).collect::<Vec<_>>());
    }
}
