//! Prompt templates. Inputs are limited to the task text, policy names,
//! descriptions and parameter types, and the domain's knowledge notes;
//! nothing from sitemaps, condition sources or web content is accepted.

use std::collections::BTreeMap;

use cellgate_core::{Effect, PolicySet, ValueType};

use crate::provider::ChatMessage;

/// Bumped whenever template wording changes, so benchmark reports can be
/// tied to the templates that produced them.
pub const PROMPT_VERSION: &str = "select-v1";

/// The parts of a policy a model may see.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyCard {
    pub name: String,
    pub effect: Effect,
    pub description: String,
    pub params: BTreeMap<String, ValueType>,
}

impl PolicyCard {
    pub fn from_set(set: &PolicySet) -> Vec<PolicyCard> {
        set.policies
            .iter()
            .filter(|p| p.effect != Effect::Deny)
            .map(|p| PolicyCard {
                name: p.name.clone(),
                effect: p.effect,
                description: p.description.clone(),
                params: p.condition.as_ref().map(|c| c.params.clone()).unwrap_or_default(),
            })
            .collect()
    }
}

const DOMAIN_SYSTEM: &str = "\
You decide which web applications a browser agent needs for a user's task.
Answer with JSON only: {\"domains\": [\"example.com\", ...]}.
Use registrable domains in lowercase without scheme or path (amazon.com, not https://www.amazon.com).
List a domain only when the task names the application or unmistakably refers to it.
Brand or product names alone do not name an application: a task about a Sony TV does not require sony.com.
If the task does not say which application to use, answer {\"domains\": []}.";

pub fn domain_messages(task: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::system(DOMAIN_SYSTEM), ChatMessage::user(format!("Task: {task}"))]
}

const POLICY_SYSTEM: &str = "\
You grant a browser agent the smallest set of permissions that still lets it finish the user's task on one web application.
You are given the application's predefined policies. Pick the minimal subset the task needs; every extra policy widens what a hijacked agent could do, and every missing policy makes the task fail.
For policies of kind `condition`, fill in every listed parameter from the task, using the declared type. Give all parameters even when the task implies them only indirectly.
Answer with JSON only: {\"policies\": [{\"name\": \"...\"}, {\"name\": \"...\", \"params\": {\"param\": value}}]}.
Use only the policy names listed. Omit `params` for policies of kind `allow`.";

fn type_hint(t: ValueType) -> &'static str {
    match t {
        ValueType::Number => "number",
        ValueType::String => "string",
        ValueType::Boolean => "boolean",
        ValueType::StringList => "list of strings",
    }
}

pub fn policy_messages(task: &str, domain: &str, cards: &[PolicyCard], knowledge: Option<&str>) -> Vec<ChatMessage> {
    let mut listing = String::new();
    for c in cards {
        let kind = match c.effect {
            Effect::Condition => "condition",
            _ => "allow",
        };
        listing.push_str(&format!("- {} ({kind}): {}\n", c.name, c.description));
        for (p, t) in &c.params {
            listing.push_str(&format!("    param {p}: {}\n", type_hint(*t)));
        }
    }
    let mut user = format!("Application: {domain}\n\nPolicies:\n{listing}");
    if let Some(k) = knowledge.map(str::trim).filter(|k| !k.is_empty()) {
        user.push_str(&format!("\nNotes about this application:\n{k}\n"));
    }
    user.push_str(&format!("\nTask: {task}"));
    vec![ChatMessage::system(POLICY_SYSTEM), ChatMessage::user(user)]
}

/// Follow-up after an answer that failed validation.
pub fn correction(previous: &str, error: &str) -> Vec<ChatMessage> {
    vec![
        ChatMessage::assistant(previous),
        ChatMessage::user(format!(
            "That answer was rejected: {error}. Reply again with JSON only, following the required format."
        )),
    ]
}
