//! A small, fully synthetic fruit taxonomy with a matching mock profile and
//! a deterministic document generator. Used by the bundled example data, the
//! CLI smoke tests, and anything else that needs realistic-looking input
//! without a model.

use chrono::{Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, ProcessedDocument};
use crate::gateway::{Fallback, KeywordRule, MockProfile};
use crate::schema::{ClassDef, ClassSchema, Label};
use crate::store::{GoldenEntry, GoldenSet};

/// The fruit taxonomy. Definitions never spell out class names, so the
/// rendered prompt passes an obfuscation audit.
pub fn fruit_schema() -> ClassSchema {
    ClassSchema::new(
        1,
        vec![
            ClassDef::new("Red Fruits", "Produce with a crimson or scarlet skin.")
                .child(ClassDef::new(
                    "Cranberry",
                    "Very tart bog berries, harvested by flooding the field.",
                ))
                .child(ClassDef::new(
                    "Redcurrant",
                    "Tiny translucent berries that hang in clusters and grow on a bush.",
                ))
                .child(ClassDef::new(
                    "Strawberry",
                    "Heart-shaped berries carrying their seeds on the outside.",
                )),
            ClassDef::new("Yellow Fruits", "Produce with a golden peel or rind.")
                .child(ClassDef::new("Banana", "Long crescent-shaped fruit with a soft peel."))
                .child(ClassDef::new("Lemon", "Sour oval citrus with a thick bright rind.")),
            ClassDef::new("Green Fruits", "Produce with green skin or green flesh.")
                .exclude("citrus with a golden rind")
                .child(ClassDef::new("Lime", "Small green citrus prized for its zest."))
                .child(ClassDef::new("Kiwi", "Fuzzy brown skin over green flesh.")),
        ],
    )
}

/// Keyword rules for [`fruit_schema`], in aliases. "grows on a bush" sits
/// ahead of "tart" so a tart berry from a bush resolves to the currant.
pub fn fruit_profile() -> MockProfile {
    let rule = |pattern: &str, parent: &str, child: &str, topic: &str, description: &str| {
        KeywordRule::new(pattern, parent, Some(child)).topic(topic, description)
    };
    MockProfile {
        keyword_rules: vec![
            rule("grows on a bush", "K-01", "K-01.2", "Berries", "Tart berries from a bog or a bush."),
            rule("tart", "K-01", "K-01.1", "Berries", "Tart berries from a bog or a bush."),
            rule("bog", "K-01", "K-01.1", "Berries", "Tart berries from a bog or a bush."),
            rule("bush", "K-01", "K-01.2", "Berries", "Tart berries from a bog or a bush."),
            rule("heart-shaped", "K-01", "K-01.3", "Berries", "Tart berries from a bog or a bush."),
            rule("crescent", "K-02", "K-02.1", "Tropical", "Crescent-shaped fruit or fuzzy brown skin."),
            rule("rind", "K-02", "K-02.2", "Citrus", "Sour citrus with a thick rind or zest."),
            rule("zest", "K-03", "K-03.1", "Citrus", "Sour citrus with a thick rind or zest."),
            rule("fuzzy", "K-03", "K-03.2", "Tropical", "Crescent-shaped fruit or fuzzy brown skin."),
        ],
        fallback: Fallback::FixedLabel {
            parent: Some("K-02".into()),
            child: Some("K-02.1".into()),
        },
        ..MockProfile::default()
    }
}

/// Signal phrases per fruit: (parent, child, phrases).
const FRUITS: &[(&str, &str, &[&str])] = &[
    ("Red Fruits", "Cranberry", &["very tart and sour", "picked from a flooded bog"]),
    ("Red Fruits", "Redcurrant", &["from a plant that grows on a bush", "hanging from a bush in clusters"]),
    ("Red Fruits", "Strawberry", &["heart-shaped with seeds outside", "bright and heart-shaped"]),
    ("Yellow Fruits", "Banana", &["yellow with a crescent shape", "curved like a crescent moon"]),
    ("Yellow Fruits", "Lemon", &["sour with a thick yellow rind", "hard to peel because of the rind"]),
    ("Green Fruits", "Lime", &["small and green, good for zest", "mostly used for zest and juice"]),
    ("Green Fruits", "Kiwi", &["fuzzy and brown outside", "fuzzy with green flesh inside"]),
];

const OPENERS: &[&str] = &[
    "Picked up a fruit at the {place} market today.",
    "My neighbour brought something back from the {place} stall.",
    "The {place} grocer had a new delivery this morning.",
    "Saw an unusual fruit in the {place} shop window.",
];

const PLACES: &[&str] = &["harbour", "village", "downtown", "station", "riverside", "old town"];

const CLOSERS: &[&str] = &[
    "We ate it after dinner.",
    "The price was reasonable.",
    "I will probably buy more next week.",
    "The kids were curious about it.",
    "",
];

const REGIONS: &[&str] = &["north", "south", "east", "west"];

/// `n` labeled fruit reviews, deterministic in `seed`. Documents are
/// timestamped one hour apart from 2024-01-01.
pub fn fruit_documents(n: usize, seed: u64) -> Vec<(ProcessedDocument, Label)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
    (0..n)
        .map(|i| {
            let (parent, child, phrases) = FRUITS[i % FRUITS.len()];
            let opener = OPENERS.choose(&mut rng).unwrap().replace("{place}", PLACES.choose(&mut rng).unwrap());
            let phrase = phrases.choose(&mut rng).unwrap();
            let closer = CLOSERS.choose(&mut rng).unwrap();
            let text = format!("{opener} It was {phrase}. {closer}").trim().to_string();
            let mut doc = ProcessedDocument::from_text(format!("f{:03}", i + 1), text);
            doc.timestamp = Some(start + Duration::hours(i as i64));
            doc.dimensions
                .insert("region".into(), REGIONS[rng.gen_range(0..REGIONS.len())].into());
            (doc, Label::pair(parent, child))
        })
        .collect()
}

pub fn fruit_corpus(n: usize, seed: u64) -> Corpus {
    Corpus::from_documents(fruit_documents(n, seed).into_iter().map(|(d, _)| d).collect())
        .expect("generated ids are unique")
}

/// Golden entries for the first `n` generated documents.
pub fn fruit_golden(n: usize, seed: u64) -> GoldenSet {
    GoldenSet::new(
        fruit_documents(n, seed)
            .into_iter()
            .map(|(doc, label)| GoldenEntry::new(doc.id, doc.text, label))
            .collect(),
    )
}
