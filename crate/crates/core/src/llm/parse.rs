//! Turning free-form completions into concept lists and yes/no answers.

use std::collections::HashSet;

use super::LlmError;
use crate::corpus::normalize_concept;

/// Concepts extracted from a completion. `no_items` flags a completion that
/// yielded nothing usable.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedList {
    pub items: Vec<String>,
    pub no_items: bool,
}

fn list_region(text: &str) -> Vec<&str> {
    if let Some(open) = text.find('[') {
        if let Some(len) = text[open..].find(']') {
            return text[open + 1..open + len].split(',').collect();
        }
    }
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.ends_with(':'))
        .collect();
    if let Some(line) = lines.iter().find(|l| l.contains(',')) {
        let after = line.rsplit_once(':').map_or(*line, |(_, rest)| rest);
        return after.split(',').collect();
    }
    lines
}

fn strip_marker(item: &str) -> &str {
    let mut item = item.trim_start();
    loop {
        let before = item;
        if let Some(rest) = item.strip_prefix(['-', '*', '•']) {
            item = rest.trim_start();
        }
        let digits = item.bytes().take_while(u8::is_ascii_digit).count();
        if digits > 0 {
            let rest = &item[digits..];
            if let Some(after) = rest.strip_prefix(['.', ')']) {
                if after.starts_with(char::is_whitespace) {
                    item = after.trim_start();
                }
            }
        }
        if item == before {
            return item;
        }
    }
}

fn clean_item(raw: &str) -> String {
    let raw = raw.rsplit_once(':').map_or(raw, |(_, rest)| rest);
    let raw: String = raw.chars().filter(|c| !matches!(c, '[' | ']')).collect();
    let mut item = raw.as_str();
    loop {
        let before = item;
        item = strip_marker(item.trim_matches(|c: char| c.is_whitespace() || "\"'`(){}.;!?".contains(c)));
        if item == before {
            return normalize_concept(item);
        }
    }
}

/// Accepts bracketed quoted lists, comma-separated lines (with any chatter
/// before the last `:` dropped) and one-item-per-line lists. Items are
/// normalized and deduplicated keeping the first occurrence.
pub fn parse_cc_list(text: &str) -> ParsedList {
    let mut seen = HashSet::new();
    let mut items = Vec::new();
    for raw in list_region(text) {
        let item = clean_item(raw);
        if !item.is_empty() && seen.insert(item.clone()) {
            items.push(item);
        }
    }
    ParsedList {
        no_items: items.is_empty(),
        items,
    }
}

/// Reads the first alphabetic word of a completion as yes or no.
pub fn parse_visibility(text: &str) -> Result<bool, LlmError> {
    let word: String = text
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .flat_map(char::to_lowercase)
        .collect();
    match word.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(LlmError::Unparseable(text.chars().take(80).collect())),
    }
}
