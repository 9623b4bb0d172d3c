use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Placeholder(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template `{template}` is missing a binding for `{key}`")]
    MissingBinding { template: String, key: String },
    #[error("template `{template}` repeats placeholder `{key}` back to back")]
    AdjacentDuplicate { template: String, key: String },
}

/// A prompt template with `{key}` placeholders. `{{` and `}}` produce
/// literal braces; a brace pair that does not enclose an identifier is kept
/// as literal text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    segments: Vec<Segment>,
    required_keys: BTreeSet<String>,
}

fn is_key(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase() || c == '_')
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

impl PromptTemplate {
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, TemplateError> {
        let name = name.into();
        let mut segments: Vec<Segment> = Vec::new();
        let mut literal = String::new();
        let mut rest = text;

        while let Some(pos) = rest.find(['{', '}']) {
            literal.push_str(&rest[..pos]);
            let tail = &rest[pos..];
            if tail.starts_with("{{") {
                literal.push('{');
                rest = &tail[2..];
            } else if tail.starts_with("}}") {
                literal.push('}');
                rest = &tail[2..];
            } else if tail.starts_with('{') {
                match tail[1..].find('}') {
                    Some(end) if is_key(&tail[1..1 + end]) => {
                        let key = &tail[1..1 + end];
                        if !literal.is_empty() {
                            segments.push(Segment::Literal(std::mem::take(&mut literal)));
                        }
                        if matches!(segments.last(), Some(Segment::Placeholder(k)) if k == key) {
                            return Err(TemplateError::AdjacentDuplicate { template: name, key: key.into() });
                        }
                        segments.push(Segment::Placeholder(key.to_string()));
                        rest = &tail[end + 2..];
                    }
                    _ => {
                        literal.push('{');
                        rest = &tail[1..];
                    }
                }
            } else {
                literal.push('}');
                rest = &tail[1..];
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }

        let required_keys = segments
            .iter()
            .filter_map(|s| match s {
                Segment::Placeholder(k) => Some(k.clone()),
                Segment::Literal(_) => None,
            })
            .collect();
        Ok(PromptTemplate { name, segments, required_keys })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn required_keys(&self) -> &BTreeSet<String> {
        &self.required_keys
    }

    /// Substitutes every placeholder. Extra bindings are ignored. Bound
    /// values are inserted verbatim, never re-scanned for placeholders.
    pub fn render<V: AsRef<str>>(&self, bindings: &HashMap<&str, V>) -> Result<String, TemplateError> {
        if let Some(missing) = self.required_keys.iter().find(|k| !bindings.contains_key(k.as_str())) {
            return Err(TemplateError::MissingBinding { template: self.name.clone(), key: missing.clone() });
        }
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(t) => out.push_str(t),
                Segment::Placeholder(k) => out.push_str(bindings[k.as_str()].as_ref()),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind<'a>(pairs: &[(&'a str, &'a str)]) -> HashMap<&'a str, &'a str> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn single_substitution() {
        let t = PromptTemplate::parse("t", "Q: {q}").unwrap();
        assert_eq!(t.render(&bind(&[("q", "Why?")])).unwrap(), "Q: Why?");
    }

    #[test]
    fn literal_only_is_identity() {
        let t = PromptTemplate::parse("t", "plain text, no slots").unwrap();
        assert!(t.required_keys().is_empty());
        assert_eq!(t.render(&bind(&[])).unwrap(), "plain text, no slots");
    }

    #[test]
    fn missing_binding_names_key() {
        let t = PromptTemplate::parse("t", "Q: {q}").unwrap();
        let err = t.render(&bind(&[])).unwrap_err();
        assert_eq!(err, TemplateError::MissingBinding { template: "t".into(), key: "q".into() });
    }

    #[test]
    fn unused_binding_ignored() {
        let t = PromptTemplate::parse("t", "{a}!").unwrap();
        assert_eq!(t.render(&bind(&[("a", "x"), ("b", "y")])).unwrap(), "x!");
    }

    #[test]
    fn escapes_and_non_keys_are_literal() {
        let t = PromptTemplate::parse("t", "{{q}} {Not A Key} {q} }").unwrap();
        assert_eq!(t.required_keys().iter().collect::<Vec<_>>(), vec!["q"]);
        assert_eq!(t.render(&bind(&[("q", "v")])).unwrap(), "{q} {Not A Key} v }");
    }

    #[test]
    fn bound_values_are_not_rescanned() {
        let t = PromptTemplate::parse("t", "{a}").unwrap();
        assert_eq!(t.render(&bind(&[("a", "{a}")])).unwrap(), "{a}");
    }

    #[test]
    fn adjacent_duplicate_rejected() {
        assert!(matches!(
            PromptTemplate::parse("t", "{q}{q}"),
            Err(TemplateError::AdjacentDuplicate { .. })
        ));
        assert!(PromptTemplate::parse("t", "{q} {q}").is_ok());
    }

    #[test]
    fn required_keys_match_placeholders() {
        let t = PromptTemplate::parse("t", "{a} and {b} then {a}").unwrap();
        let keys: Vec<_> = t.required_keys().iter().cloned().collect();
        assert_eq!(keys, vec!["a", "b"]);
        let placeholders = t.segments().iter().filter(|s| matches!(s, Segment::Placeholder(_))).count();
        assert_eq!(placeholders, 3);
    }
}
