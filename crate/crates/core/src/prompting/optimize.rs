//! Greedy segment ablation: shorten a prompt while its validation score
//! stays at or above a threshold.

use serde::{Deserialize, Serialize};

use super::{build_prompt, AuditRecord, ClassText, PromptError, PromptSpec};
use crate::drift::golden_eval;
use crate::gateway::Classifier;
use crate::schema::ClassSchema;
use crate::store::GoldenSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    PreambleSentence,
    DefinitionSentence,
    Exclusion,
    Example,
    Reasoning,
}

/// A removable unit of a prompt: a sentence, a list item, an example, or
/// the reasoning block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Class key for definition and exclusion segments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<String>,
    /// Index within the owning list (sentence, exclusion, or example slot).
    pub index: usize,
    pub text: String,
}

impl Segment {
    fn describe(&self) -> String {
        match &self.owner {
            Some(o) => format!("{:?}[{}]@{}: {}", self.kind, self.index, o, self.text),
            None => format!("{:?}[{}]: {}", self.kind, self.index, self.text),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub input_tokens: usize,
    pub output_tokens: usize,
    pub input_score: f64,
    pub output_score: f64,
    pub theta: f64,
    pub removed: Vec<Segment>,
    pub evaluations: usize,
}

pub(crate) fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\n' {
            push_sentence(&mut out, &mut cur);
            continue;
        }
        cur.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            push_sentence(&mut out, &mut cur);
        }
    }
    push_sentence(&mut out, &mut cur);
    out
}

fn push_sentence(out: &mut Vec<String>, cur: &mut String) {
    let s = cur.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    cur.clear();
}

/// All removable segments of `spec`, in rendering order.
pub fn segments(schema: &ClassSchema, spec: &PromptSpec) -> Vec<Segment> {
    let mut out = Vec::new();
    for (i, s) in split_sentences(&spec.preamble).into_iter().enumerate() {
        out.push(Segment {
            kind: SegmentKind::PreambleSentence,
            owner: None,
            index: i,
            text: s,
        });
    }
    for (key, _) in schema.all_classes() {
        let Some(text) = spec.class_text(schema, &key) else {
            continue;
        };
        for (i, s) in split_sentences(&text.definition).into_iter().enumerate() {
            out.push(Segment {
                kind: SegmentKind::DefinitionSentence,
                owner: Some(key.clone()),
                index: i,
                text: s,
            });
        }
        for (i, e) in text.exclusions.iter().enumerate() {
            out.push(Segment {
                kind: SegmentKind::Exclusion,
                owner: Some(key.clone()),
                index: i,
                text: e.clone(),
            });
        }
    }
    let order = if spec.example_order.is_empty() {
        (0..spec.examples.len()).collect()
    } else {
        spec.example_order.clone()
    };
    for &i in &order {
        if let Some(ex) = spec.examples.get(i) {
            out.push(Segment {
                kind: SegmentKind::Example,
                owner: None,
                index: i,
                text: ex.text.clone(),
            });
        }
    }
    if spec.cot_enabled {
        out.push(Segment {
            kind: SegmentKind::Reasoning,
            owner: None,
            index: 0,
            text: super::COT_INSTRUCTION.to_string(),
        });
    }
    out
}

/// `spec` with one segment dropped.
pub(crate) fn without(schema: &ClassSchema, spec: &PromptSpec, seg: &Segment) -> PromptSpec {
    let mut next = spec.clone();
    match seg.kind {
        SegmentKind::PreambleSentence => {
            let mut sentences = split_sentences(&spec.preamble);
            sentences.remove(seg.index);
            next.preamble = sentences.join(" ");
        }
        SegmentKind::DefinitionSentence | SegmentKind::Exclusion => {
            let key = seg.owner.as_deref().expect("class segment has owner");
            let mut text: ClassText = spec.class_text(schema, key).expect("class exists");
            if seg.kind == SegmentKind::DefinitionSentence {
                let mut sentences = split_sentences(&text.definition);
                sentences.remove(seg.index);
                text.definition = sentences.join(" ");
            } else {
                text.exclusions.remove(seg.index);
            }
            next.overrides.insert(key.to_string(), text);
        }
        SegmentKind::Example => {
            next.examples.remove(seg.index);
            let order: Vec<usize> = if spec.example_order.is_empty() {
                (0..spec.examples.len()).collect()
            } else {
                spec.example_order.clone()
            };
            next.example_order = order
                .into_iter()
                .filter(|&i| i != seg.index)
                .map(|i| if i > seg.index { i - 1 } else { i })
                .collect();
        }
        SegmentKind::Reasoning => next.cot_enabled = false,
    }
    next
}

fn score(
    classifier: &Classifier,
    spec: &PromptSpec,
    validation: &GoldenSet,
) -> Result<f64, PromptError> {
    let rendered = build_prompt(classifier.schema(), spec)?;
    let report = golden_eval(validation, |doc| classifier.label_rendered(doc, &rendered))
        .map_err(|e| match e {
            crate::drift::DriftError::Gateway(g) => PromptError::Gateway(g),
            _ => PromptError::EmptyValidation,
        })?;
    Ok(report.macro_f1)
}

/// Finds a shorter prompt whose macro-F1 on `validation` stays ≥ `theta`.
///
/// Each round tries removals in order of largest token saving (earliest
/// position on ties) and commits the first one that keeps the score at or
/// above `theta`. Stops when no segment can go.
pub fn optimize_prompt(
    spec: &PromptSpec,
    validation: &GoldenSet,
    theta: f64,
    classifier: &Classifier,
) -> Result<(PromptSpec, OptimizeReport), PromptError> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(PromptError::InvalidThreshold(theta));
    }
    if validation.entries.is_empty() {
        return Err(PromptError::EmptyValidation);
    }
    let schema = classifier.schema();
    let input_tokens = build_prompt(schema, spec)?.tokens;
    let input_score = score(classifier, spec, validation)?;
    let mut evaluations = 1;
    if input_score < theta {
        return Err(PromptError::ThresholdUnreachable {
            score: input_score,
            theta,
        });
    }

    let mut current = spec.clone();
    let mut current_tokens = input_tokens;
    let mut current_score = input_score;
    let mut removed = Vec::new();
    loop {
        let mut candidates: Vec<(usize, usize, Segment, PromptSpec)> = Vec::new();
        for (position, seg) in segments(schema, &current).into_iter().enumerate() {
            let next = without(schema, &current, &seg);
            let tokens = build_prompt(schema, &next)?.tokens;
            if tokens < current_tokens {
                candidates.push((current_tokens - tokens, position, seg, next));
            }
        }
        candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

        let mut accepted = None;
        for (saving, _, seg, next) in candidates {
            let s = score(classifier, &next, validation)?;
            evaluations += 1;
            if s >= theta {
                accepted = Some((saving, seg, next, s));
                break;
            }
        }
        match accepted {
            Some((saving, seg, next, s)) => {
                current = next;
                current_tokens -= saving;
                current_score = s;
                removed.push(seg);
            }
            None => break,
        }
    }

    if !removed.is_empty() {
        current.parent_iteration = Some(spec.iteration);
        current.parent_hash = Some(build_prompt(schema, spec)?.hash);
        current.iteration = spec.iteration + 1;
        current.audit.push(AuditRecord {
            iteration: current.iteration,
            edits: Vec::new(),
            alignment_snapshot: None,
            removed_segments: removed.iter().map(Segment::describe).collect(),
        });
    }
    let current = current.sealed(schema)?;
    Ok((
        current,
        OptimizeReport {
            input_tokens,
            output_tokens: current_tokens,
            input_score,
            output_score: current_score,
            theta,
            removed,
            evaluations,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::{ExampleOrigin, FewShotExample};
    use crate::schema::{ClassDef, Label};

    #[test]
    fn sentences_split_on_terminators_and_newlines() {
        assert_eq!(
            split_sentences("One. Two! Three?\nFour"),
            vec!["One.", "Two!", "Three?", "Four"]
        );
        assert_eq!(split_sentences("v1.2 is out. ok"), vec!["v1.2 is out.", "ok"]);
        assert!(split_sentences("  ").is_empty());
    }

    #[test]
    fn segment_removal_shapes() {
        let schema = ClassSchema::new(
            1,
            vec![ClassDef::new("A", "First. Second.").exclude("x").exclude("y")],
        );
        let spec = PromptSpec::new(&schema, "Hello. World.")
            .with_examples(vec![
                FewShotExample::new("e0", &Label::parent("A"), ExampleOrigin::Seed),
                FewShotExample::new("e1", &Label::parent("A"), ExampleOrigin::Seed),
            ])
            .with_order(vec![1, 0])
            .with_cot(true);
        let segs = segments(&schema, &spec);
        let kinds: Vec<SegmentKind> = segs.iter().map(|s| s.kind).collect();
        use SegmentKind::*;
        assert_eq!(
            kinds,
            vec![
                PreambleSentence,
                PreambleSentence,
                DefinitionSentence,
                DefinitionSentence,
                Exclusion,
                Exclusion,
                Example,
                Example,
                Reasoning
            ]
        );
        let no_hello = without(&schema, &spec, &segs[0]);
        assert_eq!(no_hello.preamble, "World.");
        let no_second = without(&schema, &spec, &segs[3]);
        assert_eq!(no_second.class_text(&schema, "A").unwrap().definition, "First.");
        let no_y = without(&schema, &spec, &segs[5]);
        assert_eq!(no_y.class_text(&schema, "A").unwrap().exclusions, vec!["x"]);
        // first rendered example is examples[1]
        let no_e1 = without(&schema, &spec, &segs[6]);
        assert_eq!(no_e1.examples.len(), 1);
        assert_eq!(no_e1.examples[0].text, "e0");
        assert_eq!(no_e1.example_order, vec![0]);
        assert!(!without(&schema, &spec, &segs[8]).cot_enabled);
    }
}
