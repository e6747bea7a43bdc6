//! Prompt assembly (visual info, then demonstrations, then the test question)
//! and answer extraction from model output.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{choice_label, label_index, Demonstration, MultimodalQuestion, VisualInfo};

pub const DEFAULT_PREAMBLE: &str = "Answer the final question. Reason step by step, \
then finish with a line of the form \"The answer is X.\"";

/// Label strings and limits for rendering. Loadable from JSON; every field
/// has a default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub preamble: String,
    pub caption_label: String,
    pub ocr_label: String,
    pub question_label: String,
    pub choices_label: String,
    pub solution_label: String,
    pub answer_prefix: String,
    pub rationale_char_cap: usize,
    /// Trailing demonstrations are dropped while the estimate exceeds this.
    pub max_prompt_tokens: Option<usize>,
    /// Render caption/OCR lines inside demonstration blocks.
    pub demo_visual_info: bool,
    /// With image attachment on, also attach demonstration images.
    pub attach_demo_images: bool,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            preamble: DEFAULT_PREAMBLE.to_string(),
            caption_label: "Caption: ".into(),
            ocr_label: "OCR: ".into(),
            question_label: "Question: ".into(),
            choices_label: "Choices: ".into(),
            solution_label: "Solution: ".into(),
            answer_prefix: "The answer is ".into(),
            rationale_char_cap: 2000,
            max_prompt_tokens: None,
            demo_visual_info: true,
            attach_demo_images: false,
        }
    }
}

impl PromptTemplate {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub question_id: String,
    pub question_categories: BTreeMap<String, String>,
    pub system_preamble: String,
    pub rendered_prompt: String,
    pub demonstrations_used: Vec<Demonstration>,
    pub image_refs_attached: Vec<String>,
    pub token_estimate: usize,
    /// Demonstrations removed by the prompt-length guard.
    #[serde(default)]
    pub dropped_demonstrations: usize,
}

impl PromptBundle {
    /// The prompt without the preamble, for providers that take the
    /// preamble as a separate system message.
    pub fn user_content(&self) -> &str {
        self.rendered_prompt
            .strip_prefix(&self.system_preamble)
            .unwrap_or(&self.rendered_prompt)
            .trim_start_matches('\n')
    }
}

pub fn token_estimate(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// Cuts `text` to at most `cap` characters, ending at the last sentence
/// terminator (`.`, `!`, `?` followed by whitespace or end of text) that
/// fits. Falls back to a hard cut when no sentence ends inside the cap.
pub fn truncate_rationale(text: &str, cap: usize) -> Cow<'_, str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    if chars.len() <= cap {
        return Cow::Borrowed(text);
    }
    let mut cut = None;
    for i in (0..cap).rev() {
        let (byte, c) = chars[i];
        if matches!(c, '.' | '!' | '?') && chars.get(i + 1).is_none_or(|(_, n)| n.is_whitespace()) {
            cut = Some(byte + c.len_utf8());
            break;
        }
    }
    match cut {
        Some(end) => Cow::Owned(text[..end].to_string()),
        None => Cow::Owned(text[..chars[cap].0].trim_end().to_string()),
    }
}

fn push_visual(out: &mut String, visual: &VisualInfo, t: &PromptTemplate) {
    if !visual.caption.is_empty() {
        out.push_str(&t.caption_label);
        out.push_str(&visual.caption);
        out.push('\n');
    }
    if !visual.ocr.is_empty() {
        out.push_str(&t.ocr_label);
        out.push_str(&visual.ocr);
        out.push('\n');
    }
}

fn push_question(out: &mut String, q: &MultimodalQuestion, t: &PromptTemplate) {
    out.push_str(&t.question_label);
    out.push_str(&q.text_context);
    out.push('\n');
    if !q.choices.is_empty() {
        out.push_str(&t.choices_label);
        let rendered: Vec<String> = q
            .choices
            .iter()
            .enumerate()
            .map(|(i, c)| format!("({}) {}", choice_label(i), c))
            .collect();
        out.push_str(&rendered.join(" "));
        out.push('\n');
    }
}

pub fn render_demonstration(d: &Demonstration, visual: &VisualInfo, t: &PromptTemplate) -> Result<String> {
    let q = &d.question;
    let rationale = q
        .rationale
        .as_deref()
        .filter(|r| !r.trim().is_empty())
        .ok_or_else(|| Error::MissingRationale(q.id.clone()))?;
    if q.gold_answer.trim().is_empty() {
        return Err(Error::MissingRationale(q.id.clone()));
    }
    let mut out = String::new();
    if t.demo_visual_info {
        push_visual(&mut out, visual, t);
    }
    push_question(&mut out, q, t);
    out.push_str(&t.solution_label);
    out.push_str(truncate_rationale(rationale.trim(), t.rationale_char_cap).as_ref());
    out.push('\n');
    out.push_str(&t.answer_prefix);
    out.push_str(&q.gold_answer);
    out.push_str(".\n");
    Ok(out)
}

/// The test-question block: visual info, question, choices, then the
/// solution label left open for the model.
pub fn render_test_block(q: &MultimodalQuestion, visual: &VisualInfo, t: &PromptTemplate) -> String {
    let mut out = String::new();
    push_visual(&mut out, visual, t);
    push_question(&mut out, q, t);
    out.push_str(t.solution_label.trim_end());
    out.push('\n');
    out
}

fn join_prompt(preamble: &str, blocks: &[String]) -> String {
    let body = blocks.join("\n");
    if preamble.is_empty() {
        body
    } else {
        format!("{preamble}\n\n{body}")
    }
}

pub fn assemble_prompt(
    q: &MultimodalQuestion,
    visual: &VisualInfo,
    demos: &[Demonstration],
    visual_of_demos: &BTreeMap<String, VisualInfo>,
    t: &PromptTemplate,
    attach_images: bool,
) -> Result<PromptBundle> {
    let mut blocks = Vec::with_capacity(demos.len() + 1);
    for d in demos {
        let v = crate::dataset::visual_for(&d.question, visual_of_demos);
        blocks.push(render_demonstration(d, &v, t)?);
    }
    let test_block = render_test_block(q, visual, t);

    let mut used = demos.len();
    let mut rendered = join_prompt(&t.preamble, &with_test(&blocks[..used], &test_block));
    if let Some(limit) = t.max_prompt_tokens {
        while used > 0 && token_estimate(&rendered) > limit {
            used -= 1;
            rendered = join_prompt(&t.preamble, &with_test(&blocks[..used], &test_block));
        }
        if used < demos.len() {
            log::warn!(
                "prompt for `{}` exceeded {limit} tokens; dropped {} trailing demonstration(s)",
                q.id,
                demos.len() - used
            );
        }
    }
    let demonstrations_used = demos[..used].to_vec();

    let mut image_refs_attached = Vec::new();
    if attach_images {
        if t.attach_demo_images {
            image_refs_attached.extend(demonstrations_used.iter().filter_map(|d| d.question.image_ref.clone()));
        }
        image_refs_attached.extend(q.image_ref.clone());
    }

    Ok(PromptBundle {
        question_id: q.id.clone(),
        question_categories: q.categories.clone(),
        system_preamble: t.preamble.clone(),
        token_estimate: token_estimate(&rendered),
        rendered_prompt: rendered,
        demonstrations_used,
        image_refs_attached,
        dropped_demonstrations: demos.len() - used,
    })
}

fn with_test(blocks: &[String], test: &str) -> Vec<String> {
    let mut all = blocks.to_vec();
    all.push(test.to_string());
    all
}

// ---------------------------------------------------------------------------
// Answer extraction

pub const FAILED_PREDICTION: &str = "<no answer>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    Marker,
    ChoiceMatch,
    NumericMatch,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    pub raw_response: String,
    pub predicted: String,
    pub method: ExtractionMethod,
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)answer\s+is\s*:?\s*(.+?)\s*(?:\.(?:\s|$)|\n|$)").unwrap())
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?(?:\d[\d,]*(?:\.\d+)?|\.\d+)").unwrap())
}

fn paren_label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([A-Za-z]{1,2})\)").unwrap())
}

/// Canonical decimal form: commas removed, no trailing zeros, integers
/// without a fractional part.
pub fn normalize_number(raw: &str) -> Option<String> {
    let cleaned: String = raw.chars().filter(|&c| c != ',').collect();
    let value: f64 = cleaned.parse().ok()?;
    if !value.is_finite() {
        return None;
    }
    if value.fract() == 0.0 && value.abs() < 1e15 {
        Some(format!("{}", value as i64))
    } else {
        Some(format!("{value}"))
    }
}

fn last_number(text: &str) -> Option<String> {
    number_re().find_iter(text).filter_map(|m| normalize_number(m.as_str())).last()
}

fn first_number(text: &str) -> Option<String> {
    number_re().find_iter(text).find_map(|m| normalize_number(m.as_str()))
}

fn clean_candidate(raw: &str) -> &str {
    raw.trim()
        .trim_matches(|c: char| matches!(c, '*' | '"' | '\'' | '`' | '$'))
        .trim_end_matches(['.', ':', ';', ','])
        .trim()
}

fn valid_label(q: &MultimodalQuestion, label: &str) -> Option<String> {
    label_index(label)
        .filter(|&i| i < q.choices.len())
        .map(choice_label)
}

/// Resolves a marker payload such as `(B)`, `B`, `B) whale` or `whale` to a
/// choice label.
fn resolve_choice(q: &MultimodalQuestion, candidate: &str) -> Option<String> {
    let c = clean_candidate(candidate);
    if let Some(m) = paren_label_re().captures(c).filter(|m| m.get(0).unwrap().start() == 0) {
        if let Some(l) = valid_label(q, &m[1]) {
            return Some(l);
        }
    }
    let bare = c.trim_end_matches(')');
    if bare.len() <= 2 && bare.chars().all(|ch| ch.is_ascii_alphabetic()) {
        if let Some(l) = valid_label(q, bare) {
            return Some(l);
        }
    }
    if let Some((head, _)) = c.split_once([')', ':']) {
        if head.len() <= 2 {
            if let Some(l) = valid_label(q, head.trim_start_matches('(')) {
                return Some(l);
            }
        }
    }
    let matches: Vec<usize> = q
        .choices
        .iter()
        .enumerate()
        .filter(|(_, text)| text.trim().eq_ignore_ascii_case(c))
        .map(|(i, _)| i)
        .collect();
    (matches.len() == 1).then(|| choice_label(matches[0]))
}

/// Looks for a parenthesized label, or else exactly one choice text, in the
/// tail of the response.
fn match_choice_in_tail(q: &MultimodalQuestion, response: &str) -> Option<String> {
    let tail_start = response
        .char_indices()
        .rev()
        .nth(299)
        .map_or(0, |(i, _)| i);
    let tail = &response[tail_start..];
    if let Some(label) = paren_label_re()
        .captures_iter(tail)
        .filter_map(|m| valid_label(q, &m[1]))
        .last()
    {
        return Some(label);
    }
    let lower = tail.to_lowercase();
    let hits: Vec<usize> = q
        .choices
        .iter()
        .enumerate()
        .filter(|(_, text)| {
            let t = text.trim().to_lowercase();
            !t.is_empty() && contains_word(&lower, &t)
        })
        .map(|(i, _)| i)
        .collect();
    (hits.len() == 1).then(|| choice_label(hits[0]))
}

fn contains_word(haystack: &str, needle: &str) -> bool {
    haystack.match_indices(needle).any(|(i, _)| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + needle.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

pub fn extract_answer(response: &str, q: &MultimodalQuestion) -> ExtractedAnswer {
    let done = |predicted: String, method| ExtractedAnswer {
        raw_response: response.to_string(),
        predicted,
        method,
    };

    let marker = marker_re()
        .captures_iter(response)
        .last()
        .map(|c| c.get(1).unwrap().as_str().to_string());

    if let Some(x) = &marker {
        if q.choices.is_empty() {
            let cleaned = clean_candidate(x);
            if let Some(n) = first_number(cleaned) {
                return done(n, ExtractionMethod::Marker);
            }
            if !cleaned.is_empty() {
                return done(cleaned.to_string(), ExtractionMethod::Marker);
            }
        } else if let Some(label) = resolve_choice(q, x) {
            return done(label, ExtractionMethod::Marker);
        }
    }

    if !q.choices.is_empty() {
        let from_marker = marker.as_deref().and_then(|x| match_choice_in_tail(q, x));
        if let Some(label) = from_marker.or_else(|| match_choice_in_tail(q, response)) {
            return done(label, ExtractionMethod::ChoiceMatch);
        }
        return done(FAILED_PREDICTION.to_string(), ExtractionMethod::Failed);
    }

    if let Some(n) = last_number(response) {
        return done(n, ExtractionMethod::NumericMatch);
    }
    done(FAILED_PREDICTION.to_string(), ExtractionMethod::Failed)
}

/// Scores a prediction against the question's gold answer.
pub fn is_correct(answer: &ExtractedAnswer, q: &MultimodalQuestion) -> bool {
    if answer.method == ExtractionMethod::Failed {
        return false;
    }
    let predicted = answer.predicted.trim();
    let gold = q.gold_answer.trim();
    if !q.choices.is_empty() {
        return predicted.eq_ignore_ascii_case(gold);
    }
    match (normalize_number(predicted), normalize_number(gold)) {
        (Some(a), Some(b)) => a == b,
        _ => predicted.eq_ignore_ascii_case(gold),
    }
}
