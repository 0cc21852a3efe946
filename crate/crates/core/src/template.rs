//! `{{placeholder}}` substitution for prompt templates.
//!
//! Substitution is single-pass, so values that themselves contain `{{...}}`
//! are inserted verbatim.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{template}` lacks placeholder {{{{{name}}}}}")]
    MissingPlaceholder { template: String, name: String },
    #[error("template `{template}` uses unknown placeholder {{{{{name}}}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

/// Renders `template`, requiring every key in `vars` to appear and every
/// placeholder in the template to be bound.
pub fn render(template_name: &str, template: &str, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
    for (name, _) in vars {
        if !template.contains(&format!("{{{{{name}}}}}")) {
            return Err(TemplateError::MissingPlaceholder {
                template: template_name.into(),
                name: (*name).into(),
            });
        }
    }
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) if is_identifier(&after[..end]) => {
                let name = &after[..end];
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| TemplateError::UnknownPlaceholder {
                        template: template_name.into(),
                        name: name.into(),
                    })?;
                out.push_str(value);
                rest = &after[end + 2..];
            }
            _ => {
                out.push_str("{{");
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// The four prompt templates one policy handle serves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Templates {
    /// Executor instructions; placeholder `{{tools}}`.
    pub agent_system: String,
    /// Rule-body generation; `{{question}}`, `{{demonstrations}}`.
    pub planner: String,
    /// Triple extraction; `{{history}}`, `{{entity}}`, `{{relation}}`, `{{document}}`.
    pub extraction: String,
    /// Critique of a finished attempt; `{{trajectory}}`, `{{reward}}`.
    pub refinement: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            agent_system: include_str!("../templates/agent_system.txt").into(),
            planner: include_str!("../templates/planner.txt").into(),
            extraction: include_str!("../templates/extraction.txt").into(),
            refinement: include_str!("../templates/refinement.txt").into(),
        }
    }
}

impl Templates {
    /// Loads `agent_system.txt`, `planner.txt`, `extraction.txt` and
    /// `refinement.txt` from `dir`; absent files keep the built-in text.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let dir = dir.as_ref();
        let mut t = Self::default();
        for (file, slot) in [
            ("agent_system.txt", &mut t.agent_system),
            ("planner.txt", &mut t.planner),
            ("extraction.txt", &mut t.extraction),
            ("refinement.txt", &mut t.refinement),
        ] {
            let path = dir.join(file);
            if path.exists() {
                *slot = fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
            }
        }
        Ok(t)
    }

    /// Writes the templates out for editing.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("agent_system.txt"), &self.agent_system)?;
        fs::write(dir.join("planner.txt"), &self.planner)?;
        fs::write(dir.join("extraction.txt"), &self.extraction)?;
        fs::write(dir.join("refinement.txt"), &self.refinement)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_each_placeholder() {
        let out = render("t", "Q: {{question}} / {{question}} ({{n}})", &[("question", "why"), ("n", "2")]).unwrap();
        assert_eq!(out, "Q: why / why (2)");
    }

    #[test]
    fn values_are_not_rescanned() {
        let out = render("t", "{{a}}", &[("a", "{{a}}")]).unwrap();
        assert_eq!(out, "{{a}}");
    }

    #[test]
    fn missing_placeholder_is_an_error() {
        let err = render("plan", "no slots", &[("question", "x")]).unwrap_err();
        assert!(matches!(err, TemplateError::MissingPlaceholder { .. }));
    }

    #[test]
    fn unbound_placeholder_is_an_error() {
        let err = render("plan", "{{question}} {{typo}}", &[("question", "x")]).unwrap_err();
        assert!(matches!(err, TemplateError::UnknownPlaceholder { .. }));
    }

    #[test]
    fn non_identifier_braces_pass_through() {
        let out = render("t", "json {{ \"a\": 1 }} {{x}}", &[("x", "y")]).unwrap();
        assert_eq!(out, "json {{ \"a\": 1 }} y");
    }

    #[test]
    fn built_in_templates_carry_their_placeholders() {
        let t = Templates::default();
        assert!(render("agent", &t.agent_system, &[("tools", "T")]).is_ok());
        assert!(render("planner", &t.planner, &[("question", "q"), ("demonstrations", "d")]).is_ok());
        assert!(render(
            "extraction",
            &t.extraction,
            &[("history", "h"), ("entity", "e"), ("relation", "r"), ("document", "d")]
        )
        .is_ok());
        assert!(render("refinement", &t.refinement, &[("trajectory", "t"), ("reward", "0")]).is_ok());
    }

    #[test]
    fn directory_overrides_single_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("planner.txt"), "{{question}}|{{demonstrations}}").unwrap();
        let t = Templates::load_dir(dir.path()).unwrap();
        assert_eq!(t.planner, "{{question}}|{{demonstrations}}");
        assert_eq!(t.agent_system, Templates::default().agent_system);
    }
}
