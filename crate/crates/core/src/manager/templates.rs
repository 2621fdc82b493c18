use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ManagerError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    ConfirmQuery,
    ElicitKey,
    Handoff,
    Fallback,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 4] = [
        TemplateKind::ConfirmQuery,
        TemplateKind::ElicitKey,
        TemplateKind::Handoff,
        TemplateKind::Fallback,
    ];

    /// Slots a pattern of this kind must contain.
    pub fn required_slots(self) -> &'static [&'static str] {
        match self {
            TemplateKind::ConfirmQuery => &["query_text"],
            TemplateKind::ElicitKey => &["key_kind"],
            TemplateKind::Handoff | TemplateKind::Fallback => &[],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::ConfirmQuery => "confirm_query",
            TemplateKind::ElicitKey => "elicit_key",
            TemplateKind::Handoff => "handoff",
            TemplateKind::Fallback => "fallback",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseTemplate {
    pub id: String,
    pub kind: TemplateKind,
    /// Text with `{slot}` markers.
    pub pattern: String,
}

/// Slot names in `pattern`, in order of appearance.
pub fn slots_of(pattern: &str) -> Result<Vec<&str>, ManagerError> {
    let mut out = Vec::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| ManagerError::Template(format!("unclosed slot in {pattern:?}")))?;
        let name = &after[..close];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(ManagerError::Template(format!("bad slot name {name:?} in {pattern:?}")));
        }
        out.push(name);
        rest = &after[close + 1..];
    }
    Ok(out)
}

/// Replaces every `{slot}` of the pattern with its value.
pub fn fill_template(t: &ResponseTemplate, slots: &BTreeMap<String, String>) -> Result<String, ManagerError> {
    let mut out = String::with_capacity(t.pattern.len());
    let mut rest = t.pattern.as_str();
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| ManagerError::Template(format!("unclosed slot in {:?}", t.pattern)))?;
        let name = &after[..close];
        let value = slots.get(name).ok_or_else(|| ManagerError::MissingSlot {
            template: t.id.clone(),
            slot: name.to_string(),
        })?;
        out.push_str(value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Validated templates with at least one of every kind.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    templates: Vec<ResponseTemplate>,
}

impl TemplateSet {
    pub fn new(templates: Vec<ResponseTemplate>) -> Result<Self, ManagerError> {
        let mut ids = BTreeMap::new();
        for t in &templates {
            if ids.insert(t.id.as_str(), ()).is_some() {
                return Err(ManagerError::Template(format!("duplicate template id {}", t.id)));
            }
            let slots = slots_of(&t.pattern)?;
            for req in t.kind.required_slots() {
                if !slots.contains(req) {
                    return Err(ManagerError::Template(format!("template {} lacks slot {{{req}}}", t.id)));
                }
            }
        }
        for kind in TemplateKind::ALL {
            if !templates.iter().any(|t| t.kind == kind) {
                return Err(ManagerError::Template(format!("no {} template", kind.as_str())));
            }
        }
        Ok(Self { templates })
    }

    /// Built-in English templates.
    pub fn english() -> Self {
        let t = |id: &str, kind, pattern: &str| ResponseTemplate {
            id: id.into(),
            kind,
            pattern: pattern.into(),
        };
        Self::new(vec![
            t("confirm_query", TemplateKind::ConfirmQuery, "Do you want to ask: {query_text}?"),
            t("elicit_key", TemplateKind::ElicitKey, "Could you tell me more about the {key_kind}?"),
            t("handoff", TemplateKind::Handoff, "Thanks, transferring you to the answer for: {query_text}."),
            t("fallback", TemplateKind::Fallback, "Sorry, I did not understand. Could you describe your question differently?"),
        ])
        .expect("built-in templates are valid")
    }

    pub fn templates(&self) -> &[ResponseTemplate] {
        &self.templates
    }

    /// Template with id `preferred` if it has `kind`, else the first of `kind`.
    pub fn select(&self, kind: TemplateKind, preferred: Option<&str>) -> &ResponseTemplate {
        preferred
            .and_then(|id| self.templates.iter().find(|t| t.id == id && t.kind == kind))
            .or_else(|| self.templates.iter().find(|t| t.kind == kind))
            .expect("every kind present")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.templates).expect("templates serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ManagerError> {
        let list: Vec<ResponseTemplate> =
            serde_json::from_str(text).map_err(|e| ManagerError::Template(e.to_string()))?;
        Self::new(list)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManagerError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ManagerError::Template(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ManagerError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| ManagerError::Template(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn slots(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn confirm_query_fills() {
        let set = TemplateSet::english();
        let t = set.select(TemplateKind::ConfirmQuery, None);
        let s = fill_template(t, &slots(&[("query_text", "why the credit card failed to pay")])).unwrap();
        assert_eq!(s, "Do you want to ask: why the credit card failed to pay?");
    }

    #[test]
    fn missing_slot_is_reported() {
        let set = TemplateSet::english();
        let t = set.select(TemplateKind::ElicitKey, None);
        assert!(matches!(
            fill_template(t, &BTreeMap::new()),
            Err(ManagerError::MissingSlot { slot, .. }) if slot == "key_kind"
        ));
    }

    #[test]
    fn zero_slot_pattern_verbatim() {
        let t = ResponseTemplate {
            id: "x".into(),
            kind: TemplateKind::Fallback,
            pattern: "Sorry.".into(),
        };
        assert_eq!(fill_template(&t, &slots(&[("unused", "v")])).unwrap(), "Sorry.");
    }

    #[test]
    fn validation_rejects_bad_sets() {
        let mut list = TemplateSet::english().templates().to_vec();
        list[0].pattern = "Do you want to ask?".into();
        assert!(TemplateSet::new(list).is_err());
        let list: Vec<_> = TemplateSet::english()
            .templates()
            .iter()
            .filter(|t| t.kind != TemplateKind::Handoff)
            .cloned()
            .collect();
        assert!(TemplateSet::new(list).is_err());
        assert!(TemplateSet::from_json("[{\"id\":\"a\",\"kind\":\"nope\",\"pattern\":\"\"}]").is_err());
    }

    #[test]
    fn preferred_id_must_match_kind() {
        let mut list = TemplateSet::english().templates().to_vec();
        list.push(ResponseTemplate {
            id: "confirm_short".into(),
            kind: TemplateKind::ConfirmQuery,
            pattern: "{query_text}?".into(),
        });
        let set = TemplateSet::new(list).unwrap();
        assert_eq!(set.select(TemplateKind::ConfirmQuery, Some("confirm_short")).id, "confirm_short");
        assert_eq!(set.select(TemplateKind::Handoff, Some("confirm_short")).id, "handoff");
    }

    #[test]
    fn json_round_trip() {
        let set = TemplateSet::english();
        assert_eq!(TemplateSet::from_json(&set.to_json()).unwrap(), set);
    }

    proptest! {
        #[test]
        fn filled_text_has_no_markers(value in "[a-z ]{0,20}", prefix in "[a-z ]{0,10}") {
            let t = ResponseTemplate {
                id: "t".into(),
                kind: TemplateKind::ConfirmQuery,
                pattern: format!("{prefix}{{query_text}}!"),
            };
            let s = fill_template(&t, &slots(&[("query_text", &value)])).unwrap();
            prop_assert_eq!(s, format!("{prefix}{value}!"));
        }
    }
}
