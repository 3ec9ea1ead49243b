//! Interactive review of a selection before it is bound to a session.
//!
//! Commands, one per line:
//!   `<n>`                 toggle policy n on or off
//!   `<n> <param>=<value>` set a parameter (value parsed as JSON, else a string)
//!   `a`                   approve this domain
//!   `q`                   abort

use std::io::{BufRead, Write};

use cellgate_core::{assemble_composite, CompositePolicy, Effect};
use serde_json::{Map, Value as Json};

use crate::prompts::PolicyCard;
use crate::selector::{DomainSelection, SelectionResult};

#[derive(Debug, thiserror::Error)]
pub enum ConfirmError {
    #[error("aborted by user")]
    Aborted,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Row {
    card: PolicyCard,
    on: bool,
    params: Map<String, Json>,
}

fn rows(sel: &DomainSelection) -> Vec<Row> {
    PolicyCard::from_set(&sel.set)
        .into_iter()
        .map(|card| {
            let chosen = sel.selections.iter().find(|(n, _)| *n == card.name);
            Row {
                on: chosen.is_some(),
                params: chosen.and_then(|(_, p)| p.clone()).unwrap_or_default(),
                card,
            }
        })
        .collect()
}

fn assemble(sel: &DomainSelection, rows: &[Row]) -> Result<CompositePolicy, String> {
    let picks: Vec<(String, Option<Map<String, Json>>)> = rows
        .iter()
        .filter(|r| r.on)
        .map(|r| {
            let params = (r.card.effect == Effect::Condition && !(r.card.params.is_empty() && r.params.is_empty()))
                .then(|| r.params.clone());
            (r.card.name.clone(), params)
        })
        .collect();
    assemble_composite(&sel.set, &picks, &sel.set.allowlist).map_err(|e| e.to_string())
}

fn show(out: &mut dyn Write, sel: &DomainSelection, rows: &[Row]) -> std::io::Result<()> {
    writeln!(out, "{}", sel.domain)?;
    for (i, r) in rows.iter().enumerate() {
        let mark = if r.on { "x" } else { " " };
        writeln!(out, "  [{mark}] {:>2} {}  {}", i + 1, r.card.name, r.card.description)?;
        for (p, ty) in &r.card.params {
            let v = r.params.get(p).map(|v| v.to_string()).unwrap_or_else(|| "?".into());
            writeln!(out, "          {p} ({ty}) = {v}")?;
        }
    }
    Ok(())
}

fn parse_value(text: &str) -> Json {
    serde_json::from_str(text).unwrap_or_else(|_| Json::String(text.to_owned()))
}

/// Walks the user through every domain of `result` and returns the approved
/// composites. With `assume_yes` the model's selection is accepted as is.
pub fn confirm(
    result: &SelectionResult,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
    assume_yes: bool,
) -> Result<Vec<CompositePolicy>, ConfirmError> {
    writeln!(out, "Task: {}", result.task.text)?;
    for (d, why) in &result.excluded {
        writeln!(out, "skipped {d}: {why}")?;
    }
    let mut approved = Vec::new();
    for sel in &result.selected {
        let mut rows = rows(sel);
        show(out, sel, &rows)?;
        if assume_yes {
            approved.push(sel.composite.clone());
            continue;
        }
        loop {
            write!(out, "[n] toggle, [n p=v] set param, [a]pprove, [q]uit > ")?;
            out.flush()?;
            let mut line = String::new();
            if input.read_line(&mut line)? == 0 {
                return Err(ConfirmError::Aborted);
            }
            let line = line.trim();
            match line {
                "" => continue,
                "q" => return Err(ConfirmError::Aborted),
                "a" => match assemble(sel, &rows) {
                    Ok(c) => {
                        approved.push(c);
                        break;
                    }
                    Err(e) => writeln!(out, "cannot approve: {e}")?,
                },
                _ => {
                    let (idx, rest) = line.split_once(' ').unwrap_or((line, ""));
                    let Some(row) = idx.parse::<usize>().ok().and_then(|i| i.checked_sub(1)).and_then(|i| rows.get_mut(i))
                    else {
                        writeln!(out, "unknown command `{line}`")?;
                        continue;
                    };
                    let rest = rest.trim();
                    if rest.is_empty() {
                        row.on = !row.on;
                    } else if let Some((p, v)) = rest.split_once('=') {
                        let p = p.trim();
                        if !row.card.params.contains_key(p) {
                            writeln!(out, "{} has no parameter `{p}`", row.card.name)?;
                            continue;
                        }
                        row.params.insert(p.to_owned(), parse_value(v.trim()));
                        row.on = true;
                    } else {
                        writeln!(out, "expected <param>=<value>")?;
                        continue;
                    }
                    show(out, sel, &rows)?;
                }
            }
        }
    }
    Ok(approved)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selector::TaskSpec;
    use cellgate_core::{parse_policy_set, parse_sitemap};
    use serde_json::json;

    fn result() -> SelectionResult {
        let sitemap = parse_sitemap(
            json!({"domain": "amazon.com", "version": 1, "sitemap": [
                {"method": "GET", "url_pattern": "https://www.amazon.com/gp/cart/view.html*",
                 "semantic_action": "ViewCart", "description": "View cart"},
                {"method": "POST", "url_pattern": "https://www.amazon.com/checkout/p/*/spc/place-order",
                 "semantic_action": "PlaceOrder", "description": "Place order",
                 "args": [{"name": "totalAmount", "type": "number", "source": "dom",
                           "url": "https://www.amazon.com/checkout/p/*", "selector": "#total"}]}
            ]})
            .to_string()
            .as_bytes(),
        )
        .unwrap();
        let set = parse_policy_set(
            json!({"domain": "amazon.com", "policies": [
                {"name": "view_shopping_cart", "effect": "allow", "actions": ["ViewCart"], "description": "View the cart"},
                {"name": "purchase_amount_leq", "effect": "condition", "actions": ["PlaceOrder"], "description": "Buy up to a limit",
                 "condition": {"function": "f", "function_src": "args.totalAmount <= params.maxAmount",
                               "params": {"maxAmount": "number"}, "args": ["totalAmount"]}}
            ]})
            .to_string()
            .as_bytes(),
            &sitemap,
        )
        .unwrap();
        let selections = vec![("view_shopping_cart".to_owned(), None)];
        let composite = assemble_composite(&set, &selections, &set.allowlist).unwrap();
        SelectionResult {
            task: TaskSpec::new("view my cart"),
            domains: vec!["amazon.com".into()],
            selected: vec![DomainSelection {
                domain: "amazon.com".into(),
                set,
                selections,
                composite,
            }],
            excluded: Vec::new(),
            transcripts: Vec::new(),
        }
    }

    fn run(script: &str) -> (Result<Vec<CompositePolicy>, ConfirmError>, String) {
        let mut out = Vec::new();
        let r = confirm(&result(), &mut script.as_bytes(), &mut out, false);
        (r, String::from_utf8(out).unwrap())
    }

    #[test]
    fn edit_then_approve() {
        let (r, out) = run("2\na\n2 maxAmount=30\n1\na\n");
        let c = r.unwrap();
        assert!(out.contains("cannot approve"), "{out}");
        assert_eq!(
            c[0].to_json()["policies"],
            json!([{"name": "purchase_amount_leq", "params": {"maxAmount": 30}}])
        );
    }

    #[test]
    fn abort_and_eof_reject() {
        assert!(matches!(run("q\n").0, Err(ConfirmError::Aborted)));
        assert!(matches!(run("1\n").0, Err(ConfirmError::Aborted)));
        let (r, out) = run("9\nzz\na\n");
        assert_eq!(r.unwrap()[0].selected.len(), 1);
        assert!(out.contains("unknown command `9`"));
    }

    #[test]
    fn assume_yes_keeps_model_choice() {
        let mut out = Vec::new();
        let c = confirm(&result(), &mut "".as_bytes(), &mut out, true).unwrap();
        assert_eq!(c[0], result().selected[0].composite);
    }
}
