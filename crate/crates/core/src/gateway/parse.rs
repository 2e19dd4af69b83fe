//! Response grammar. Models may wrap the answer in reasoning prose; the
//! last JSON object in the text is the answer.

use std::sync::OnceLock;

use regex::Regex;
use serde_json::{Map, Value};

use super::GatewayError;
use crate::schema::{ClassSchema, Label, Topic};

/// The JSON object that ends last in `raw` (outermost on ties).
pub fn extract_last_object(raw: &str) -> Option<Map<String, Value>> {
    let mut best: Option<(usize, usize, Map<String, Value>)> = None;
    for (start, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(obj))) = stream.next() {
            let end = start + stream.byte_offset();
            let better = match &best {
                None => true,
                Some((s, e, _)) => end > *e || (end == *e && start < *s),
            };
            if better {
                best = Some((start, end, obj));
            }
        }
    }
    best.map(|(_, _, obj)| obj)
}

fn label_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^\s*(?:label|parent|class)\s*:\s*(.+?)\s*$").unwrap())
}

fn string_field<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a str> {
    obj.get(key)
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
}

/// Extracts `(parent_alias, child_alias)` from a response.
fn raw_aliases(raw: &str) -> Option<(String, Option<String>)> {
    if let Some(obj) = extract_last_object(raw) {
        let parent = string_field(&obj, "parent").or_else(|| string_field(&obj, "label")).or_else(|| {
            // single-field objects such as {"fruit": "Banana"}
            let strings: Vec<&str> = obj.values().filter_map(Value::as_str).collect();
            (obj.len() == 1 && strings.len() == 1).then(|| strings[0].trim())
        });
        if let Some(parent) = parent {
            let child = string_field(&obj, "child").map(str::to_string);
            return Some((parent.to_string(), child));
        }
    }
    let line = label_line_re().captures_iter(raw).last()?;
    let value = line[1].trim().trim_matches('"');
    match value.split_once('/') {
        Some((p, c)) => Some((p.trim().to_string(), Some(c.trim().to_string()))),
        None => Some((value.to_string(), None)),
    }
}

/// Parses a classification response and maps aliases to internal names.
pub fn parse_classification(raw: &str, schema: &ClassSchema) -> Result<Label, GatewayError> {
    let (parent_alias, child_alias) =
        raw_aliases(raw).ok_or_else(|| GatewayError::UnparseableResponse { raw: raw.to_string() })?;
    let resolved = schema
        .resolve_alias(&parent_alias)
        .ok_or_else(|| GatewayError::UnknownLabel(parent_alias.clone()))?;
    let Some(child_alias) = child_alias else {
        return Ok(resolved);
    };
    let parent_def = schema.parent(&resolved.parent).expect("resolved parent exists");
    let child = parent_def
        .children
        .iter()
        .find(|c| c.external_alias.eq_ignore_ascii_case(child_alias.trim()))
        .ok_or(GatewayError::UnknownLabel(child_alias))?;
    if let Some(existing) = &resolved.child {
        if existing != &child.internal_name {
            return Err(GatewayError::UnknownLabel(child.external_alias.clone()));
        }
    }
    Ok(Label::pair(resolved.parent, &child.internal_name))
}

pub fn parse_topic(raw: &str) -> Result<Topic, GatewayError> {
    let unparseable = || GatewayError::UnparseableResponse { raw: raw.to_string() };
    let obj = extract_last_object(raw).ok_or_else(unparseable)?;
    let name = string_field(&obj, "topic").ok_or_else(unparseable)?;
    let description = string_field(&obj, "description").unwrap_or(name);
    Ok(Topic {
        name: name.to_string(),
        description: description.to_string(),
    })
}

/// The alias a judge picked.
pub fn parse_winner(raw: &str) -> Result<String, GatewayError> {
    let obj = extract_last_object(raw)
        .ok_or_else(|| GatewayError::UnparseableResponse { raw: raw.to_string() })?;
    string_field(&obj, "winner")
        .map(str::to_string)
        .ok_or_else(|| GatewayError::UnparseableResponse { raw: raw.to_string() })
}
