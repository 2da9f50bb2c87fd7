//! Plain-text prompt templates with named placeholders.
//!
//! A template file has a `[system]` section followed by a `[user]` section.
//! `{name}` is replaced by the value bound to `name`; `{{` and `}}` produce
//! literal braces. Unknown placeholders are rejected when the template is
//! loaded, missing values when it is rendered.

use std::collections::{BTreeMap, BTreeSet};

use crate::hashing::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    hash: String,
    system: Vec<Piece>,
    user: Vec<Piece>,
}

impl PromptTemplate {
    /// Parses `source` and checks its placeholders: every one must be in
    /// `allowed` and every name in `required` must occur.
    pub fn parse(
        name: &str,
        source: &str,
        required: &[&str],
        allowed: &[&str],
    ) -> Result<Self, String> {
        let normalized = source.replace("\r\n", "\n");
        let (system, user) = split_sections(&normalized)?;
        let system = tokenize(system)?;
        let user = tokenize(user)?;
        let used: BTreeSet<&str> = system
            .iter()
            .chain(&user)
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s.as_str()),
                Piece::Text(_) => None,
            })
            .collect();
        if let Some(unknown) = used.iter().find(|s| !allowed.contains(s)) {
            return Err(format!("unknown placeholder {{{unknown}}}"));
        }
        if let Some(missing) = required.iter().find(|r| !used.contains(*r)) {
            return Err(format!("required placeholder {{{missing}}} is missing"));
        }
        Ok(PromptTemplate {
            name: name.to_string(),
            hash: sha256_hex(normalized.as_bytes()),
            system,
            user,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// SHA-256 of the template source with normalized line endings.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Renders `(system_text, user_text)`.
    pub fn render(&self, values: &BTreeMap<String, String>) -> Result<(String, String), String> {
        Ok((fill(&self.system, values)?, fill(&self.user, values)?))
    }
}

fn split_sections(source: &str) -> Result<(&str, &str), String> {
    let rest = source
        .trim_start()
        .strip_prefix("[system]\n")
        .ok_or("template must start with a [system] line")?;
    let split = rest
        .find("\n[user]\n")
        .map(|i| (i, i + "\n[user]\n".len()))
        .or_else(|| rest.starts_with("[user]\n").then_some((0, "[user]\n".len())))
        .ok_or("template needs a [user] line")?;
    let system = &rest[..split.0];
    let user = rest[split.1..].trim_end_matches('\n');
    Ok((system, user))
}

fn tokenize(text: &str) -> Result<Vec<Piece>, String> {
    let mut pieces = Vec::new();
    let mut literal = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                literal.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                literal.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(ch) if ch.is_ascii_lowercase() || ch == '_' => name.push(ch),
                        Some(ch) => return Err(format!("invalid character {ch:?} in placeholder")),
                        None => return Err("unterminated placeholder".into()),
                    }
                }
                if name.is_empty() {
                    return Err("empty placeholder {}".into());
                }
                if !literal.is_empty() {
                    pieces.push(Piece::Text(std::mem::take(&mut literal)));
                }
                pieces.push(Piece::Slot(name));
            }
            '}' => return Err("unmatched '}' (write '}}' for a literal brace)".into()),
            _ => literal.push(c),
        }
    }
    if !literal.is_empty() {
        pieces.push(Piece::Text(literal));
    }
    Ok(pieces)
}

fn fill(pieces: &[Piece], values: &BTreeMap<String, String>) -> Result<String, String> {
    let mut out = String::new();
    for piece in pieces {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(name) => out.push_str(
                values
                    .get(name)
                    .ok_or_else(|| format!("no value bound to {{{name}}}"))?,
            ),
        }
    }
    Ok(out)
}
