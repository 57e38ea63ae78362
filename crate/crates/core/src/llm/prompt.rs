use std::fmt;

use serde::{Deserialize, Serialize};

use super::LlmError;

/// Which instruction a template carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptKind {
    CcGeneration,
    Visibility,
    PartRemoval,
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptKind::CcGeneration => "cc-generation",
            PromptKind::Visibility => "visibility",
            PromptKind::PartRemoval => "part-removal",
        })
    }
}

const SLOT: &str = "{q}";

const CC_GENERATION: &[&str] = &[
    "You are a helpful AI assistant with visual abilities.",
    "Given an input object O, I want you to generate a list of words related to objects that can be surrounding input object O in an image to help me perform semantic segmentation.",
    "For example:",
    "* If the input object is 'fork', you can generate a list of words such as '[\"bottle\", \"knife\", \"table\", \"napkin\", \"bread\"]'.",
    "* If the input object is 'child', you can generate a list of words such as '[\"toy\", \"drawing\", \"bed\", \"room\", \"playground\"]'.",
    "You should not generate synonyms of input object O, nor parts of input object O.",
    "Generate a list of objects surrounding the input object {q} without any synonym nor parts, nor content of it. Answer with a list of words. No explanation.",
    "Answer:",
];

const VISIBILITY: &[&str] = &[
    "Please specify whether {q} is something that one can see.",
    "Reply with 'yes' or 'no' only. No explanation.",
    "Answer:",
];

const PART_REMOVAL: &[&str] = &[
    "You are a helpful AI assistant with visual abilities.",
    "Given an input object O, I want you to generate a list of words that are parts of an object O.",
    "For example:",
    "* If the input object is 'rabbit', you can generate a list of words such as '[\"paw\", \"tail\", \"fur\", \"ears\", \"muzzle\"]'.",
    "* If the input object is 'building', you can generate a list of words such as '[\"door\", \"window\", \"wall\", \"hall\", \"floor\"]'.",
    "Generate a list of parts of the input object {q}. Answer with a list of words. Do not give any word that is not a part of the input object. No explanation.",
    "Answer:",
];

/// A prompt body with a single `{q}` slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub body: String,
    pub version: String,
}

impl PromptTemplate {
    pub fn new(kind: PromptKind, body: impl Into<String>, version: impl Into<String>) -> Result<Self, LlmError> {
        let body = body.into();
        let slots = body.matches(SLOT).count();
        if slots != 1 {
            return Err(LlmError::BadTemplate(format!("expected exactly one {SLOT} slot, found {slots}")));
        }
        Ok(Self {
            kind,
            body,
            version: version.into(),
        })
    }

    /// The built-in instruction for `kind`. With `markers`, the body is wrapped
    /// in the Mixtral-Instruct `<s> [INST] ... [/INST]` markers.
    pub fn builtin(kind: PromptKind, markers: bool) -> Self {
        let paragraphs = match kind {
            PromptKind::CcGeneration => CC_GENERATION,
            PromptKind::Visibility => VISIBILITY,
            PromptKind::PartRemoval => PART_REMOVAL,
        };
        let text = paragraphs.join("\n\n");
        let (body, flavor) = if markers {
            (format!("<s> [INST] {text} [/INST]"), "inst")
        } else {
            (text, "plain")
        };
        Self::new(kind, body, format!("{kind}/v1-{flavor}")).expect("built-in templates have one slot")
    }
}

/// Substitutes `q` into the template's slot.
pub fn render(template: &PromptTemplate, q: &str) -> Result<String, LlmError> {
    if q.trim().is_empty() {
        return Err(LlmError::EmptyQuery);
    }
    Ok(template.body.replacen(SLOT, q, 1))
}
