//! Prompt templates and rendering.
//!
//! Templates live as text assets in the crate; placeholders use `{slot}`
//! syntax and literal braces are written `{{` / `}}`. Rendering is strict:
//! a slot without a value fails, naming the slot.

use std::collections::BTreeMap;

use crate::{Error, Result};

use super::{ChatRequest, SamplingParams, TemplateId};

struct TemplateAssets {
    system: &'static str,
    user: &'static str,
}

fn assets(template_id: TemplateId) -> TemplateAssets {
    match template_id {
        TemplateId::KcGeneration => TemplateAssets {
            system: include_str!("../../assets/prompts/kc-generation.system.txt"),
            user: include_str!("../../assets/prompts/kc-generation.user.txt"),
        },
        TemplateId::ClusterLabel => TemplateAssets {
            system: include_str!("../../assets/prompts/cluster-label.system.txt"),
            user: include_str!("../../assets/prompts/cluster-label.user.txt"),
        },
        TemplateId::KcErrorLabel => TemplateAssets {
            system: include_str!("../../assets/prompts/kc-error-label.system.txt"),
            user: include_str!("../../assets/prompts/kc-error-label.user.txt"),
        },
        TemplateId::TagConversion => TemplateAssets {
            system: include_str!("../../assets/prompts/tag-conversion.system.txt"),
            user: include_str!("../../assets/prompts/tag-conversion.user.txt"),
        },
    }
}

fn render_text(
    template_id: TemplateId,
    text: &str,
    slots: &BTreeMap<String, String>,
) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' => {
                if chars.peek() == Some(&'{') {
                    chars.next();
                    out.push('{');
                    continue;
                }
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(c) if c.is_ascii_lowercase() || c == '_' => name.push(c),
                        Some(c) => {
                            return Err(Error::Parse {
                                location: format!("template {template_id}"),
                                message: format!("invalid character {c:?} in slot name"),
                            })
                        }
                        None => {
                            return Err(Error::Parse {
                                location: format!("template {template_id}"),
                                message: "unterminated slot".to_string(),
                            })
                        }
                    }
                }
                match slots.get(&name) {
                    Some(value) => out.push_str(value),
                    None => {
                        return Err(Error::MissingSlot {
                            template: template_id.to_string(),
                            slot: name,
                        })
                    }
                }
            }
            '}' => {
                if chars.peek() == Some(&'}') {
                    chars.next();
                }
                out.push('}');
            }
            c => out.push(c),
        }
    }
    Ok(out)
}

/// Render a template into a ready-to-send request with default sampling.
/// Slot values are embedded verbatim.
pub fn render_prompt(
    template_id: TemplateId,
    slots: &BTreeMap<String, String>,
) -> Result<ChatRequest> {
    let assets = assets(template_id);
    Ok(ChatRequest {
        template_id: Some(template_id),
        system_message: render_text(template_id, assets.system, slots)?,
        user_message: render_text(template_id, assets.user, slots)?,
        sampling: SamplingParams::default(),
        provider_model_id: String::new(),
        seed: None,
    })
}

const ORDINALS: [&str; 12] = [
    "First", "Second", "Third", "Fourth", "Fifth", "Sixth", "Seventh", "Eighth", "Ninth",
    "Tenth", "Eleventh", "Twelfth",
];

/// Format representative solutions for the generation prompt, each under
/// an ordinal heading.
pub fn format_solutions_block(solutions: &[String]) -> String {
    let mut out = String::new();
    for (i, code) in solutions.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        match ORDINALS.get(i) {
            Some(word) => out.push_str(&format!("{word} sample solution is:\n{code}")),
            None => out.push_str(&format!("Sample solution {} is:\n{code}", i + 1)),
        }
    }
    out
}

/// Format few-shot demonstrations: each example pairs a problem statement
/// with the KC names expected for it.
pub fn format_few_shot_examples(examples: &[(String, Vec<String>)]) -> String {
    let mut out = String::new();
    for (i, (problem, kcs)) in examples.iter().enumerate() {
        out.push_str(&format!("Example {}:\nProblem: {}\nExpected Output:\n", i + 1, problem));
        for (k, name) in kcs.iter().enumerate() {
            out.push_str(&format!("KC {}: {}\n", k + 1, name));
        }
        out.push('\n');
    }
    out
}
