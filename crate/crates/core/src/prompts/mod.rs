//! Prompt assembly for candidate generation, selection and replacement
//! planning, and strict parsing of the model replies.
//!
//! Prompt wording lives in text assets (`generate.txt`, `select.txt`,
//! `replace.txt`); the defaults ship inside the binary and a directory with
//! the same three files overrides them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendSuite, ChatBackend, ChatRequest, PromptPurpose};
use crate::hashing::hash_u64;

mod template;

pub use template::PromptTemplate;

pub const DEFAULT_CANDIDATES: usize = 5;
pub const GENERATE_TEMPERATURE: f64 = 0.7;
pub const SELECT_TEMPERATURE: f64 = 0.0;
pub const REPLACE_TEMPERATURE: f64 = 0.0;
/// Attempts per protocol step for blank, unparseable or invalid replies.
pub const DEFAULT_RETRY_BUDGET: u32 = 3;

const DEFAULT_GENERATE: &str = include_str!("../../prompts/generate.txt");
const DEFAULT_SELECT: &str = include_str!("../../prompts/select.txt");
const DEFAULT_REPLACE: &str = include_str!("../../prompts/replace.txt");

const CONTEXT_SLOTS: [&str; 3] = ["input_caption", "edited_caption", "original_instruction"];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("invalid prompt input: {0}")]
    InvalidInput(String),
    #[error("template {name}: {message}")]
    Template { name: String, message: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no usable reply after {attempts} attempts (last problem: {last})")]
    Exhausted { attempts: u32, last: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplyError {
    #[error("malformed reply: {0}")]
    Malformed(String),
    #[error("invalid reply: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenPromptInput {
    pub input_caption: String,
    pub edited_caption: String,
    pub original_instruction: String,
}

impl GenPromptInput {
    pub fn validate(&self) -> Result<(), PromptError> {
        for (name, value) in self.fields() {
            if value.trim().is_empty() {
                return Err(PromptError::InvalidInput(format!("{name} is empty")));
            }
        }
        Ok(())
    }

    fn fields(&self) -> [(&'static str, &str); 3] {
        [
            ("input_caption", &self.input_caption),
            ("edited_caption", &self.edited_caption),
            ("original_instruction", &self.original_instruction),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplaceOutcome {
    pub selected_category: String,
    pub target_category: String,
    pub reasoning_instruction: String,
}

impl ReplaceOutcome {
    /// The reply a well-behaved model would send for this outcome.
    pub fn to_reply(&self) -> String {
        serde_json::json!({
            "selected": self.selected_category,
            "target": self.target_category,
            "instruction": self.reasoning_instruction,
        })
        .to_string()
    }
}

/// Something that answers chat requests: a bare backend, or the suite with
/// caching and the empty-completion contract.
pub trait Completer {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub cache_key: Option<String>,
}

impl<T: ChatBackend + ?Sized> Completer for T {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, BackendError> {
        let text = self.chat(req)?;
        if text.trim().is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        Ok(Completion {
            text,
            cache_key: None,
        })
    }
}

impl Completer for BackendSuite {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, BackendError> {
        let served = self.chat(req)?;
        Ok(Completion {
            text: served.value,
            cache_key: Some(served.cache_key),
        })
    }
}

/// Cache keys and warnings collected while running a protocol step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub cache_keys: Vec<String>,
    pub warnings: Vec<String>,
}

impl Trace {
    fn record(&mut self, completion: &Completion) {
        if let Some(key) = &completion.cache_key {
            self.cache_keys.push(key.clone());
        }
    }

    pub fn absorb(&mut self, other: Trace) {
        self.cache_keys.extend(other.cache_keys);
        self.warnings.extend(other.warnings);
    }
}

/// Seed for attempt `k` of a protocol step, derived from the sample seed.
pub fn derive_seed(base: u64, step: &str, k: u64) -> u64 {
    hash_u64(&[step.as_bytes(), &base.to_le_bytes(), &k.to_le_bytes()])
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    generate: PromptTemplate,
    select: PromptTemplate,
    replace: PromptTemplate,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet::from_sources(DEFAULT_GENERATE, DEFAULT_SELECT, DEFAULT_REPLACE)
            .expect("shipped templates are valid")
    }
}

impl PromptSet {
    pub fn from_sources(generate: &str, select: &str, replace: &str) -> Result<Self, PromptError> {
        let parse = |name: &str, src: &str, required: &[&str], allowed: &[&str]| {
            PromptTemplate::parse(name, src, required, allowed).map_err(|message| PromptError::Template {
                name: name.to_string(),
                message,
            })
        };
        Ok(PromptSet {
            generate: parse("generate", generate, &CONTEXT_SLOTS, &CONTEXT_SLOTS)?,
            select: parse(
                "select",
                select,
                &["candidates"],
                &["candidates", "count", "input_caption", "edited_caption", "original_instruction"],
            )?,
            replace: parse(
                "replace",
                replace,
                &["caption", "candidate_list"],
                &["caption", "candidate_list", "count"],
            )?,
        })
    }

    /// Loads `generate.txt`, `select.txt` and `replace.txt` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |file: &str| {
            fs::read_to_string(dir.join(file)).map_err(|e| PromptError::Template {
                name: file.to_string(),
                message: format!("cannot read {}: {e}", dir.join(file).display()),
            })
        };
        PromptSet::from_sources(&read("generate.txt")?, &read("select.txt")?, &read("replace.txt")?)
    }

    /// Writes the shipped defaults into `dir`.
    pub fn write_defaults(dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("generate.txt"), DEFAULT_GENERATE)?;
        fs::write(dir.join("select.txt"), DEFAULT_SELECT)?;
        fs::write(dir.join("replace.txt"), DEFAULT_REPLACE)
    }

    /// Template name to source hash.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        [&self.generate, &self.select, &self.replace]
            .iter()
            .map(|t| (t.name().to_string(), t.hash().to_string()))
            .collect()
    }

    fn request(
        &self,
        template: &PromptTemplate,
        purpose: PromptPurpose,
        slots: BTreeMap<String, String>,
        temperature: f64,
    ) -> Result<ChatRequest, PromptError> {
        let (system_text, user_text) = template.render(&slots).map_err(|message| PromptError::Template {
            name: template.name().to_string(),
            message,
        })?;
        Ok(ChatRequest {
            system_text,
            user_text,
            temperature,
            seed: 0,
            purpose,
            slots,
        })
    }

    /// Candidate-generation request embedding the captions and the original
    /// command verbatim.
    pub fn build_gen_prompt(&self, inp: &GenPromptInput) -> Result<ChatRequest, PromptError> {
        inp.validate()?;
        let slots = inp
            .fields()
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        self.request(&self.generate, PromptPurpose::Generate, slots, GENERATE_TEMPERATURE)
    }

    /// Selection request listing candidates with 1-based indices.
    pub fn build_select_prompt(
        &self,
        candidates: &[String],
        context: Option<&GenPromptInput>,
    ) -> Result<ChatRequest, PromptError> {
        if candidates.is_empty() {
            return Err(PromptError::InvalidInput("no candidates to select from".into()));
        }
        let mut slots: BTreeMap<String, String> = BTreeMap::new();
        for (name, value) in context.map(|c| c.fields()).unwrap_or([
            ("input_caption", "(not provided)"),
            ("edited_caption", "(not provided)"),
            ("original_instruction", "(not provided)"),
        ]) {
            slots.insert(name.to_string(), value.to_string());
        }
        slots.insert("candidates".into(), enumerate(candidates));
        slots.insert("count".into(), candidates.len().to_string());
        self.request(&self.select, PromptPurpose::Select, slots, SELECT_TEMPERATURE)
    }

    /// Replacement-planning request over deduplicated candidate categories.
    pub fn build_replace_prompt(&self, caption: &str, candidates: &[String]) -> Result<ChatRequest, PromptError> {
        if caption.trim().is_empty() {
            return Err(PromptError::InvalidInput("caption is empty".into()));
        }
        if candidates.is_empty() {
            return Err(PromptError::InvalidInput("no candidate categories".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in candidates {
            let norm = c.trim().to_lowercase();
            if norm.is_empty() {
                return Err(PromptError::InvalidInput("empty candidate category".into()));
            }
            if !seen.insert(norm) {
                return Err(PromptError::InvalidInput(format!("duplicate candidate category {c:?}")));
            }
        }
        let slots = [
            ("caption".to_string(), caption.to_string()),
            ("candidate_list".to_string(), enumerate(candidates)),
            ("candidates".to_string(), candidates.join("\n")),
            ("count".to_string(), candidates.len().to_string()),
        ]
        .into();
        self.request(&self.replace, PromptPurpose::Replace, slots, REPLACE_TEMPERATURE)
    }
}

fn enumerate(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {}", i + 1, c))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Collapses a completion onto one line and drops wrapping quotes.
fn single_line(text: &str) -> String {
    let joined = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let trimmed = joined.trim_matches(|c| c == '"' || c == '\'' || c == '`');
    trimmed.trim().to_string()
}

/// Asks the model `n` times for rewritten instructions, each with its own
/// seed. Blank replies are retried up to `retry_budget` attempts per
/// candidate.
pub fn generate_candidates<C: Completer + ?Sized>(
    llm: &C,
    prompts: &PromptSet,
    inp: &GenPromptInput,
    n: usize,
    seed: u64,
    retry_budget: u32,
) -> Result<(Vec<String>, Trace), PromptError> {
    if n == 0 {
        return Err(PromptError::InvalidInput("n must be at least 1".into()));
    }
    let base = prompts.build_gen_prompt(inp)?;
    let mut trace = Trace::default();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut attempt = 0;
        let candidate = loop {
            if attempt >= retry_budget.max(1) {
                return Err(PromptError::Exhausted {
                    attempts: attempt,
                    last: "blank completion".into(),
                });
            }
            let mut req = base.clone();
            req.seed = derive_seed(seed, "generate", attempt as u64 * n as u64 + i as u64);
            attempt += 1;
            match llm.complete(&req) {
                Ok(completion) => {
                    trace.record(&completion);
                    let line = single_line(&completion.text);
                    if !line.is_empty() {
                        break line;
                    }
                }
                Err(BackendError::EmptyCompletion) => {}
                Err(e) => return Err(e.into()),
            }
            trace.warnings.push(format!("candidate {} attempt {attempt}: blank completion", i + 1));
        };
        out.push(candidate);
    }
    Ok((out, trace))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// 0-based position in the candidate list.
    pub index: usize,
    pub text: String,
    pub fell_back: bool,
}

/// Parses an index-only reply into a 0-based position.
pub fn parse_index_reply(reply: &str, count: usize) -> Option<usize> {
    let trimmed = reply
        .trim()
        .trim_end_matches('.')
        .trim_matches(|c| matches!(c, '(' | ')' | '[' | ']' | '"' | '\'' | '`' | '*'))
        .trim();
    let index: usize = trimmed.parse().ok()?;
    (1..=count).contains(&index).then(|| index - 1)
}

/// Asks the model to pick the best candidate. One candidate is returned
/// without a call; unusable replies are retried and then fall back to the
/// first candidate with a warning.
pub fn select_best<C: Completer + ?Sized>(
    llm: &C,
    prompts: &PromptSet,
    candidates: &[String],
    context: Option<&GenPromptInput>,
    seed: u64,
    retry_budget: u32,
) -> Result<(Selection, Trace), PromptError> {
    let mut trace = Trace::default();
    match candidates {
        [] => return Err(PromptError::InvalidInput("no candidates to select from".into())),
        [only] => {
            return Ok((
                Selection {
                    index: 0,
                    text: only.clone(),
                    fell_back: false,
                },
                trace,
            ))
        }
        _ => {}
    }
    let base = prompts.build_select_prompt(candidates, context)?;
    for attempt in 0..retry_budget.max(1) {
        let mut req = base.clone();
        req.seed = derive_seed(seed, "select", attempt as u64);
        let reply = match llm.complete(&req) {
            Ok(c) => {
                trace.record(&c);
                c.text
            }
            Err(BackendError::EmptyCompletion) => String::new(),
            Err(e) if e.is_retryable() => {
                trace.warnings.push(format!("selection attempt {}: {e}", attempt + 1));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        if let Some(index) = parse_index_reply(&reply, candidates.len()) {
            return Ok((
                Selection {
                    index,
                    text: candidates[index].clone(),
                    fell_back: false,
                },
                trace,
            ));
        }
        trace.warnings.push(format!(
            "selection attempt {}: unusable reply {:?}",
            attempt + 1,
            reply.chars().take(40).collect::<String>()
        ));
    }
    trace
        .warnings
        .push("selection fell back to candidate 1".to_string());
    Ok((
        Selection {
            index: 0,
            text: candidates[0].clone(),
            fell_back: true,
        },
        trace,
    ))
}

fn strip_code_fences(reply: &str) -> &str {
    let trimmed = reply.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    // Drop an info string such as ```json.
    let body = match rest.find('\n') {
        Some(i) => &rest[i + 1..],
        None => rest,
    };
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReplace {
    selected: String,
    target: String,
    instruction: String,
}

/// Parses a `{selected, target, instruction}` reply and validates it against
/// the candidates. The selected category is returned in the candidate's own
/// spelling.
pub fn parse_replace_reply(reply: &str, candidates: &[String]) -> Result<ReplaceOutcome, ReplyError> {
    if reply.trim().is_empty() {
        return Err(ReplyError::Malformed("empty reply".into()));
    }
    let raw: RawReplace =
        serde_json::from_str(strip_code_fences(reply)).map_err(|e| ReplyError::Malformed(e.to_string()))?;
    let selected = raw.selected.trim();
    let target = raw.target.trim();
    let instruction = raw.instruction.trim();
    if selected.is_empty() || target.is_empty() || instruction.is_empty() {
        return Err(ReplyError::Validation("selected, target and instruction must be non-empty".into()));
    }
    let canonical = candidates
        .iter()
        .find(|c| c.trim().eq_ignore_ascii_case(selected))
        .ok_or_else(|| ReplyError::Validation(format!("selected {selected:?} is not one of the candidates")))?;
    if target.eq_ignore_ascii_case(canonical.trim()) {
        return Err(ReplyError::Validation(format!("target {target:?} equals the selected category")));
    }
    Ok(ReplaceOutcome {
        selected_category: canonical.trim().to_string(),
        target_category: target.to_string(),
        reasoning_instruction: instruction.to_string(),
    })
}

/// Runs the replacement-planning exchange, retrying malformed or invalid
/// replies up to `retry_budget` attempts.
pub fn request_replacement<C: Completer + ?Sized>(
    llm: &C,
    prompts: &PromptSet,
    caption: &str,
    candidates: &[String],
    seed: u64,
    retry_budget: u32,
) -> Result<(ReplaceOutcome, Trace), PromptError> {
    let base = prompts.build_replace_prompt(caption, candidates)?;
    let mut trace = Trace::default();
    let mut last = String::new();
    let attempts = retry_budget.max(1);
    for attempt in 0..attempts {
        let mut req = base.clone();
        req.seed = derive_seed(seed, "replace", attempt as u64);
        let reply = match llm.complete(&req) {
            Ok(c) => {
                trace.record(&c);
                c.text
            }
            Err(BackendError::EmptyCompletion) => String::new(),
            Err(e) => return Err(e.into()),
        };
        match parse_replace_reply(&reply, candidates) {
            Ok(outcome) => return Ok((outcome, trace)),
            Err(e) => {
                last = e.to_string();
                trace.warnings.push(format!("replacement attempt {}: {e}", attempt + 1));
            }
        }
    }
    Err(PromptError::Exhausted { attempts, last })
}
