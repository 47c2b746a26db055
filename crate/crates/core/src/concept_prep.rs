//! Turning generated sentences into short, class-name-free concepts.
//!
//! Sentence decomposition is rule based: clauses are cut at semicolons,
//! commas, and at `" and "` when it starts a new clause or noun phrase, then
//! leading subject stubs such as "the hen is" are dropped.

use std::collections::{BTreeMap, HashSet};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding_store::{ClassId, ConceptCatalog, ConceptEntry, ConceptId, StoreError};

pub const CLASS_PLACEHOLDER: &str = "{class}";
pub const SUPERCLASS_PLACEHOLDER: &str = "{superclass}";

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("template {0} must contain {{class}} exactly once")]
    MissingPlaceholder(u32),
    #[error("no prompt templates given")]
    NoTemplates,
    #[error("sentence for class {class_id} references unknown class")]
    UnknownClass { class_id: ClassId },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: u32,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(template_id: u32, text: impl Into<String>) -> Result<Self, PrepError> {
        let t = Self {
            template_id,
            text: text.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), PrepError> {
        if self.text.matches(CLASS_PLACEHOLDER).count() != 1 {
            return Err(PrepError::MissingPlaceholder(self.template_id));
        }
        Ok(())
    }
}

/// Built-in prompt set. Only the first one is a known-good prompt; the rest
/// are generic visual-description prompts meant to be edited per dataset.
pub fn default_templates() -> Vec<PromptTemplate> {
    [
        "describe what the {class} {superclass} looks like",
        "describe the appearance of the {class} {superclass}",
        "describe the color of the {class} {superclass}",
        "describe the pattern of the {class} {superclass}",
        "describe the shape of the {class} {superclass}",
    ]
    .iter()
    .enumerate()
    .map(|(i, t)| PromptTemplate {
        template_id: i as u32,
        text: (*t).to_string(),
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSentence {
    pub class_id: ClassId,
    pub prompt_id: u32,
    pub text: String,
}

pub fn render_prompts(
    class_name: &str,
    superclass: &str,
    templates: &[PromptTemplate],
) -> Result<Vec<String>, PrepError> {
    if templates.is_empty() {
        return Err(PrepError::NoTemplates);
    }
    templates
        .iter()
        .map(|t| {
            t.validate()?;
            let mut text = t.text.replace(CLASS_PLACEHOLDER, class_name);
            if superclass.is_empty() {
                text = text
                    .replace(&format!(" {SUPERCLASS_PLACEHOLDER}"), "")
                    .replace(&format!("{SUPERCLASS_PLACEHOLDER} "), "")
                    .replace(SUPERCLASS_PLACEHOLDER, "");
            } else {
                text = text.replace(SUPERCLASS_PLACEHOLDER, superclass);
            }
            Ok(text)
        })
        .collect()
}

const ARTICLES: &[&str] = &["a", "an", "the"];
const DETERMINERS: &[&str] = &["the", "a", "an", "this", "these", "those", "its", "their"];
const STUB_VERBS: &[&str] = &["is", "are", "has", "have", "was", "were"];
const MAX_SUBJECT_TOKENS: usize = 4;

/// Splits `s` at top-level (outside parentheses) separators.
fn split_top_level(s: &str) -> Vec<String> {
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut current = String::new();
    for ch in s.chars() {
        match ch {
            '(' => {
                depth += 1;
                current.push(ch);
            }
            ')' => {
                depth = depth.saturating_sub(1);
                current.push(ch);
            }
            ';' | ',' if depth == 0 => parts.push(std::mem::take(&mut current)),
            _ => current.push(ch),
        }
    }
    parts.push(current);
    parts
}

/// Cuts a clause at " and " when the right-hand side opens a new clause
/// ("and has ...") or a new noun phrase ("and a small tail"). Coordinated
/// modifiers such as "long and slender" stay together.
fn split_conjunctions(clause: &str) -> Vec<String> {
    let tokens: Vec<&str> = clause.split_whitespace().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut depth = 0i32;
    for (i, tok) in tokens.iter().enumerate() {
        depth += tok.matches('(').count() as i32 - tok.matches(')').count() as i32;
        if *tok == "and" && depth == 0 && i > start {
            if let Some(next) = tokens.get(i + 1) {
                if STUB_VERBS.contains(next) || ARTICLES.contains(next) {
                    out.push(tokens[start..i].join(" "));
                    start = i + 1;
                }
            }
        }
    }
    out.push(tokens[start..].join(" "));
    out
}

fn strip_stubs(fragment: &str) -> String {
    let mut tokens: Vec<&str> = fragment.split_whitespace().collect();
    // "the hen is brown" -> "brown"
    if tokens.first().is_some_and(|t| DETERMINERS.contains(t)) {
        let verb = tokens
            .iter()
            .take(MAX_SUBJECT_TOKENS + 2)
            .skip(2)
            .position(|t| STUB_VERBS.contains(t))
            .map(|p| p + 2);
        if let Some(v) = verb {
            if v + 1 < tokens.len() {
                tokens.drain(..=v);
            }
        }
    }
    // "has a white chest" -> "a white chest"
    if tokens.len() > 1 && STUB_VERBS.contains(&tokens[0]) {
        tokens.remove(0);
    }
    // "a white chest" -> "white chest"
    if tokens.len() > 1 && ARTICLES.contains(&tokens[0]) {
        tokens.remove(0);
    }
    tokens.join(" ")
}

/// Decomposes a sentence into lowercase concept fragments. Never returns an
/// empty list for a sentence with visible characters.
pub fn split_sentence(s: &RawSentence) -> Vec<String> {
    let text = s.text.trim().to_lowercase();
    let text = text.trim_end_matches(['.', '!', '?']).trim();
    let concepts: Vec<String> = split_top_level(text)
        .iter()
        .flat_map(|clause| split_conjunctions(clause.trim()))
        .map(|frag| strip_stubs(frag.trim()))
        .map(|frag| frag.trim_matches(|c: char| c.is_whitespace() || c == '.').to_string())
        .filter(|frag| !frag.is_empty())
        .collect();
    if concepts.is_empty() && !text.is_empty() {
        return vec![text.to_string()];
    }
    if concepts.is_empty() {
        let whole = s.text.trim().to_lowercase();
        return if whole.is_empty() { Vec::new() } else { vec![whole] };
    }
    concepts
}

/// Lowercased alphanumeric tokens; hyphens and punctuation are boundaries.
pub fn tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn phrase_regex(name: &str) -> Option<Regex> {
    let toks = tokens(name);
    if toks.is_empty() {
        return None;
    }
    let body = toks.iter().map(|t| regex::escape(t)).collect::<Vec<_>>().join(r"[^a-z0-9]+");
    Some(Regex::new(&format!(r"(?i)(^|[^a-z0-9])({body})($|[^a-z0-9])")).expect("escaped pattern"))
}

/// True when `text` contains `name` as a contiguous, word-bounded,
/// case-insensitive token sequence.
pub fn contains_phrase(text: &str, name: &str) -> bool {
    phrase_regex(name).is_some_and(|re| re.is_match(text))
}

fn replace_phrase(text: &str, re: &Regex, replacement: &str) -> String {
    let mut out = text.to_string();
    // the surrounding boundary characters are part of each match, so adjacent
    // occurrences need repeated passes
    loop {
        let next = re
            .replace_all(&out, |caps: &regex::Captures| format!("{}{}{}", &caps[1], replacement, &caps[3]))
            .into_owned();
        if next == out {
            break;
        }
        out = next;
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Strips class names from a concept.
///
/// A contiguous mention of any class name is replaced by `superclass`. A
/// concept that still carries every token of a multi-token class name, in any
/// order, is dropped. Both rules run against every class (plus `owner_class`)
/// until the text stops changing, which makes the function idempotent.
pub fn remove_class_names(
    concept: &str,
    class_names: &[String],
    superclass: &str,
    owner_class: &str,
) -> Option<String> {
    let mut names: Vec<&str> = class_names.iter().map(String::as_str).collect();
    if !owner_class.is_empty() && !names.iter().any(|n| n.eq_ignore_ascii_case(owner_class)) {
        names.push(owner_class);
    }
    let compiled: Vec<(Vec<String>, Regex)> = names
        .iter()
        .filter_map(|n| phrase_regex(n).map(|re| (tokens(n), re)))
        .collect();

    let mut text = concept.trim().to_string();
    // bounded: every replacement that changes the text consumes a class-name match
    for _ in 0..=compiled.len() + 1 {
        let before = text.clone();
        for (toks, re) in &compiled {
            if re.is_match(&text) {
                text = replace_phrase(&text, re, superclass);
            }
            if toks.len() > 1 {
                let present: HashSet<String> = tokens(&text).into_iter().collect();
                if toks.iter().all(|t| present.contains(t)) {
                    return None;
                }
            }
        }
        if text == before {
            break;
        }
    }
    if text.is_empty() {
        None
    } else {
        Some(text)
    }
}

/// Drops duplicates after lowercase/trim normalization, keeping the first
/// occurrence and the input order.
pub fn dedupe_candidates(concepts: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    concepts
        .iter()
        .map(|c| c.trim().to_lowercase())
        .filter(|c| seen.insert(c.clone()))
        .collect()
}

/// Full preparation pipeline: split, sanitize, dedupe within each class, and
/// assign sequential concept ids in class order.
pub fn prepare_catalog(
    sentences: &[RawSentence],
    class_names: &[String],
    superclass: &str,
) -> Result<ConceptCatalog, PrepError> {
    let mut per_class: BTreeMap<ClassId, Vec<(u32, String)>> = BTreeMap::new();
    for s in sentences {
        let owner = class_names
            .get(s.class_id)
            .ok_or(PrepError::UnknownClass { class_id: s.class_id })?;
        if s.text.trim().is_empty() {
            continue;
        }
        for concept in split_sentence(s) {
            if let Some(clean) = remove_class_names(&concept, class_names, superclass, owner) {
                per_class.entry(s.class_id).or_default().push((s.prompt_id, clean));
            }
        }
    }

    let mut entries = Vec::new();
    let mut next_id: ConceptId = 0;
    for (class_id, items) in per_class {
        let mut seen = HashSet::new();
        for (prompt_id, text) in items {
            let key = text.trim().to_lowercase();
            if !seen.insert(key.clone()) {
                continue;
            }
            entries.push(ConceptEntry {
                concept_id: next_id,
                text: key,
                class_id,
                prompt_id,
                sanitized: true,
            });
            next_id += 1;
        }
    }
    Ok(ConceptCatalog::new(entries)?)
}
