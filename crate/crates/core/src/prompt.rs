//! Prompt template rendering.
//!
//! Templates are plain text files with `{{name}}` placeholders. Rendering
//! substitutes every binding and fails if any placeholder is left unresolved,
//! so a typo in a template surfaces immediately instead of reaching a backend.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("unresolved placeholder `{{{{{0}}}}}` in template")]
    Unresolved(String),
    #[error("template is missing required placeholder `{{{{{0}}}}}`")]
    MissingRequired(String),
}

/// Substitute `{{name}}` placeholders. Every placeholder in the template must
/// be covered by a binding.
pub fn render_template(template: &str, bindings: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = template.to_string();
    for (name, value) in bindings {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    if let Some(name) = first_placeholder(&out) {
        return Err(TemplateError::Unresolved(name));
    }
    Ok(out)
}

/// Check that the template contains at least one of the given placeholder
/// spellings (e.g. `q` or `question`).
pub fn require_placeholder(template: &str, names: &[&str]) -> Result<(), TemplateError> {
    if names.iter().any(|n| template.contains(&format!("{{{{{n}}}}}"))) {
        Ok(())
    } else {
        Err(TemplateError::MissingRequired(names[0].to_string()))
    }
}

/// First `{{name}}` occurrence in the text, if any.
fn first_placeholder(text: &str) -> Option<String> {
    let start = text.find("{{")?;
    let rest = &text[start + 2..];
    let end = rest.find("}}")?;
    Some(rest[..end].to_string())
}
