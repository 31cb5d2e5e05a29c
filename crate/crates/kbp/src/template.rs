//! Placeholder templates: `{X}` is the subject, `{Y}` the object and
//! `{MASK}` the slot left for the mask-fill backend.

use crate::error::TemplateError;

pub const SUBJECT: &str = "X";
pub const OBJECT: &str = "Y";
pub const MASK: &str = "MASK";
/// The mask marker as it appears in rendered prompts.
pub const MASK_MARKER: &str = "{MASK}";

#[derive(Debug, PartialEq, Eq)]
enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn pieces(template: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with('}') {
            if open > 0 {
                out.push(Piece::Text(&rest[..open]));
            }
            out.push(Piece::Slot(&after[..name_len]));
            rest = &after[name_len + 1..];
        } else {
            out.push(Piece::Text(&rest[..open + 1]));
            rest = after;
        }
    }
    if !rest.is_empty() {
        out.push(Piece::Text(rest));
    }
    out
}

/// Number of times the named placeholder occurs in `template`.
pub fn count_slot(template: &str, name: &str) -> usize {
    pieces(template)
        .iter()
        .filter(|p| matches!(p, Piece::Slot(n) if *n == name))
        .count()
}

pub fn has_slot(template: &str, name: &str) -> bool {
    count_slot(template, name) > 0
}

/// Substitute the subject (and object, when the template has `{Y}`).
///
/// Substituted values are inserted verbatim and never re-scanned, so a
/// subject containing braces cannot introduce placeholders. `{MASK}` is
/// kept as is.
pub fn render_template(
    template: &str,
    subject: &str,
    object: Option<&str>,
) -> Result<String, TemplateError> {
    let parts = pieces(template);
    let mut saw_subject = false;
    let mut saw_object = false;
    for p in &parts {
        match p {
            Piece::Slot(SUBJECT) => saw_subject = true,
            Piece::Slot(OBJECT) => saw_object = true,
            Piece::Slot(MASK) | Piece::Text(_) => {}
            Piece::Slot(other) => {
                return Err(TemplateError::Unresolved {
                    template: template.to_string(),
                    name: other.to_string(),
                })
            }
        }
    }
    if !saw_subject {
        return Err(TemplateError::MissingSubject(template.to_string()));
    }
    match (saw_object, object) {
        (true, None) => return Err(TemplateError::MissingObject(template.to_string())),
        (false, Some(_)) => return Err(TemplateError::UnexpectedObject(template.to_string())),
        _ => {}
    }

    let mut out = String::with_capacity(template.len() + subject.len());
    for p in parts {
        match p {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(SUBJECT) => out.push_str(subject),
            Piece::Slot(OBJECT) => out.push_str(object.unwrap_or_default()),
            Piece::Slot(_) => out.push_str(MASK_MARKER),
        }
    }
    Ok(out)
}
