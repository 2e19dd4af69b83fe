//! The hierarchical class taxonomy: parents, their children, and the
//! external aliases that are the only names a model or user ever sees.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("cannot parse schema: {0}")]
    Parse(String),
    #[error("schema has violations: {0:?}")]
    Invalid(Vec<SchemaViolation>),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A parent class or, one level down, a child class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDef {
    pub internal_name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub external_alias: String,
    pub definition: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exclusions: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<ClassDef>,
}

impl ClassDef {
    pub fn new(internal_name: impl Into<String>, definition: impl Into<String>) -> Self {
        Self {
            internal_name: internal_name.into(),
            external_alias: String::new(),
            definition: definition.into(),
            exclusions: Vec::new(),
            children: Vec::new(),
        }
    }

    pub fn alias(mut self, alias: impl Into<String>) -> Self {
        self.external_alias = alias.into();
        self
    }

    pub fn exclude(mut self, text: impl Into<String>) -> Self {
        self.exclusions.push(text.into());
        self
    }

    pub fn child(mut self, child: ClassDef) -> Self {
        self.children.push(child);
        self
    }

    pub fn child_named(&self, name: &str) -> Option<&ClassDef> {
        self.children.iter().find(|c| c.internal_name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSchema {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_from: Option<u32>,
    pub parents: Vec<ClassDef>,
}

/// A hierarchical label: a parent and, optionally, one of its children.
///
/// The string form is `Parent` or `Parent/Child`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label {
    pub parent: String,
    pub child: Option<String>,
}

impl Label {
    pub fn parent(parent: impl Into<String>) -> Self {
        Self {
            parent: parent.into(),
            child: None,
        }
    }

    pub fn new(parent: impl Into<String>, child: Option<impl Into<String>>) -> Self {
        Self {
            parent: parent.into(),
            child: child.map(Into::into),
        }
    }

    pub fn pair(parent: impl Into<String>, child: impl Into<String>) -> Self {
        Self {
            parent: parent.into(),
            child: Some(child.into()),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.child {
            Some(c) => write!(f, "{}/{}", self.parent, c),
            None => f.write_str(&self.parent),
        }
    }
}

impl FromStr for Label {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Err(SchemaError::UnknownClass(String::new()));
        }
        Ok(match s.split_once('/') {
            Some((p, c)) => Label::pair(p.trim(), c.trim()),
            None => Label::parent(s),
        })
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemaViolation {
    NoParents,
    DuplicateName { path: String },
    AliasCollision { path: String },
    DuplicateAlias { path: String, alias: String },
    EmptyDefinition { path: String },
    EmptyName { path: String },
    ReservedCharacter { path: String },
    NestingTooDeep { path: String },
}

impl ClassSchema {
    pub fn new(version: u32, parents: Vec<ClassDef>) -> Self {
        let mut schema = Self {
            version,
            created_from: None,
            parents,
        };
        schema.assign_aliases();
        schema
    }

    /// Parses JSON or TOML, fills in missing aliases, and validates.
    pub fn parse(body: &str, toml_format: bool) -> Result<Self, SchemaError> {
        let mut schema: Self = if toml_format {
            toml::from_str(body).map_err(|e| SchemaError::Parse(e.to_string()))?
        } else {
            serde_json::from_str(body).map_err(|e| SchemaError::Parse(e.to_string()))?
        };
        schema.assign_aliases();
        let violations = validate_schema(&schema);
        if !violations.is_empty() {
            return Err(SchemaError::Invalid(violations));
        }
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        let body = fs::read_to_string(path)?;
        Self::parse(&body, path.extension().is_some_and(|e| e == "toml"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    /// Gives every class without an alias an opaque positional code:
    /// `K-01` for parents, `K-01.2` for children.
    pub fn assign_aliases(&mut self) {
        for (i, parent) in self.parents.iter_mut().enumerate() {
            if parent.external_alias.is_empty() {
                parent.external_alias = format!("K-{:02}", i + 1);
            }
            for (j, child) in parent.children.iter_mut().enumerate() {
                if child.external_alias.is_empty() {
                    child.external_alias = format!("K-{:02}.{}", i + 1, j + 1);
                }
            }
        }
    }

    pub fn parent(&self, name: &str) -> Option<&ClassDef> {
        self.parents.iter().find(|p| p.internal_name == name)
    }

    pub fn parent_names(&self) -> Vec<String> {
        self.parents.iter().map(|p| p.internal_name.clone()).collect()
    }

    /// Looks up a class by `Parent` or `Parent/Child` key.
    pub fn class(&self, key: &str) -> Option<&ClassDef> {
        match key.split_once('/') {
            Some((p, c)) => self.parent(p)?.child_named(c),
            None => self.parent(key),
        }
    }

    pub fn contains(&self, label: &Label) -> bool {
        match (self.parent(&label.parent), &label.child) {
            (Some(_), None) => true,
            (Some(p), Some(c)) => p.child_named(c).is_some(),
            (None, _) => false,
        }
    }

    pub fn check_label(&self, label: &Label) -> Result<(), SchemaError> {
        if self.contains(label) {
            Ok(())
        } else {
            Err(SchemaError::UnknownClass(label.to_string()))
        }
    }

    /// Maps an external alias (case-insensitive) to its internal label.
    pub fn resolve_alias(&self, alias: &str) -> Option<Label> {
        let alias = alias.trim();
        for p in &self.parents {
            if p.external_alias.eq_ignore_ascii_case(alias) {
                return Some(Label::parent(&p.internal_name));
            }
            for c in &p.children {
                if c.external_alias.eq_ignore_ascii_case(alias) {
                    return Some(Label::pair(&p.internal_name, &c.internal_name));
                }
            }
        }
        None
    }

    /// The alias shown in place of `label`: the child alias when a child is
    /// set, else the parent alias.
    pub fn alias_of(&self, label: &Label) -> Option<&str> {
        let parent = self.parent(&label.parent)?;
        match &label.child {
            Some(c) => parent.child_named(c).map(|c| c.external_alias.as_str()),
            None => Some(parent.external_alias.as_str()),
        }
    }

    pub fn parent_alias(&self, parent: &str) -> Option<&str> {
        self.parent(parent).map(|p| p.external_alias.as_str())
    }

    /// Every class as (key, def), parents first then their children.
    pub fn all_classes(&self) -> Vec<(String, &ClassDef)> {
        let mut out = Vec::new();
        for p in &self.parents {
            out.push((p.internal_name.clone(), p));
            for c in &p.children {
                out.push((format!("{}/{}", p.internal_name, c.internal_name), c));
            }
        }
        out
    }

    /// Every internal name, parents and children alike.
    pub fn internal_names(&self) -> BTreeSet<String> {
        self.all_classes()
            .into_iter()
            .map(|(_, c)| c.internal_name.clone())
            .collect()
    }
}

/// Checks every structural invariant; an empty result means the schema is
/// usable.
pub fn validate_schema(schema: &ClassSchema) -> Vec<SchemaViolation> {
    let mut out = Vec::new();
    if schema.parents.is_empty() {
        out.push(SchemaViolation::NoParents);
    }
    let mut aliases: HashSet<String> = HashSet::new();
    check_siblings(&schema.parents, "", 0, &mut aliases, &mut out);
    out
}

fn check_siblings(
    siblings: &[ClassDef],
    prefix: &str,
    depth: usize,
    aliases: &mut HashSet<String>,
    out: &mut Vec<SchemaViolation>,
) {
    let mut names: HashSet<&str> = HashSet::new();
    for class in siblings {
        let path = if prefix.is_empty() {
            class.internal_name.clone()
        } else {
            format!("{prefix}/{}", class.internal_name)
        };
        if class.internal_name.trim().is_empty() {
            out.push(SchemaViolation::EmptyName { path: path.clone() });
        }
        if class.internal_name.contains('/') {
            out.push(SchemaViolation::ReservedCharacter { path: path.clone() });
        }
        if !names.insert(class.internal_name.as_str()) {
            out.push(SchemaViolation::DuplicateName { path: path.clone() });
        }
        if class.internal_name == class.external_alias {
            out.push(SchemaViolation::AliasCollision { path: path.clone() });
        }
        if !class.external_alias.is_empty()
            && !aliases.insert(class.external_alias.to_ascii_lowercase())
        {
            out.push(SchemaViolation::DuplicateAlias {
                path: path.clone(),
                alias: class.external_alias.clone(),
            });
        }
        if class.definition.trim().is_empty() {
            out.push(SchemaViolation::EmptyDefinition { path: path.clone() });
        }
        if depth >= 1 && !class.children.is_empty() {
            out.push(SchemaViolation::NestingTooDeep { path: path.clone() });
        }
        check_siblings(&class.children, &path, depth + 1, aliases, out);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDiff {
    pub added: Vec<String>,
    pub removed: Vec<String>,
    pub changed: Vec<String>,
}

impl SchemaDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.changed.is_empty()
    }
}

/// Classes added, removed, or with edited definition/exclusions, keyed by
/// `Parent` or `Parent/Child`.
pub fn diff_schema(old: &ClassSchema, new: &ClassSchema) -> SchemaDiff {
    let index = |s: &ClassSchema| -> BTreeMap<String, (String, Vec<String>)> {
        s.all_classes()
            .into_iter()
            .map(|(k, c)| (k, (c.definition.clone(), c.exclusions.clone())))
            .collect()
    };
    let old_ix = index(old);
    let new_ix = index(new);
    let mut diff = SchemaDiff::default();
    for (k, v) in &new_ix {
        match old_ix.get(k) {
            None => diff.added.push(k.clone()),
            Some(prev) if prev != v => diff.changed.push(k.clone()),
            _ => {}
        }
    }
    diff.removed = old_ix.keys().filter(|k| !new_ix.contains_key(*k)).cloned().collect();
    diff
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub name: String,
    pub description: String,
}

/// Emergent topics, unique by case-folded name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicSet {
    pub topics: Vec<Topic>,
}

impl TopicSet {
    pub fn fold(name: &str) -> String {
        name.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
    }

    /// Inserts unless a case-folded duplicate exists; returns the canonical
    /// name the topic is stored under.
    pub fn insert(&mut self, topic: Topic) -> String {
        let key = Self::fold(&topic.name);
        if let Some(existing) = self.topics.iter().find(|t| Self::fold(&t.name) == key) {
            return existing.name.clone();
        }
        let name = topic.name.clone();
        self.topics.push(topic);
        name
    }

    pub fn len(&self) -> usize {
        self.topics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.topics.iter().map(|t| t.name.clone()).collect()
    }
}
