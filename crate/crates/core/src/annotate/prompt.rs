//! Prompt templates with bracketed slots.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const TRANSLATE: &str = "You are a translator. Please translate the following English text into the [L]: [X]";

pub const EXTRACT: &str = "You are an Information Extraction expert. The following are the extraction results \
of [Y1], which are represented by Subject, Relation, and Object: [S1], [R1], [O1]\n\
Please refer to the extraction results above, extracting a triple that corresponds \
Subject, Relation, and Object from the translated sentence: [Y]. Note that the subject, \
relation, and object must originate from the continuous segment of the sentence. The \
output format must be the same as the sample above.";

pub const SLOTS: [&str; 7] = ["X", "L", "Y", "Y1", "S1", "R1", "O1"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        PromptTemplate { text: text.into() }
    }

    pub fn translate() -> Self {
        Self::new(TRANSLATE)
    }

    pub fn extract() -> Self {
        Self::new(EXTRACT)
    }

    /// Slot names used by the template, in order of first appearance.
    pub fn slots(&self) -> Vec<&'static str> {
        let mut found: Vec<(usize, &'static str)> = SLOTS
            .iter()
            .filter_map(|s| self.text.find(&format!("[{s}]")).map(|i| (i, *s)))
            .collect();
        found.sort();
        found.into_iter().map(|(_, s)| s).collect()
    }

    /// Fills every slot in one left-to-right pass, so filled-in values are
    /// never scanned for slots themselves.
    pub fn render(&self, values: &BTreeMap<&str, &str>) -> Result<String> {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(i) = rest.find('[') {
            out.push_str(&rest[..i]);
            let after = &rest[i + 1..];
            let slot = after
                .find(']')
                .map(|j| &after[..j])
                .filter(|name| SLOTS.contains(name));
            match slot {
                Some(name) => {
                    let v = values
                        .get(name)
                        .ok_or_else(|| Error::Invalid(format!("prompt slot [{name}] is not filled")))?;
                    out.push_str(v);
                    rest = &after[name.len() + 1..];
                }
                None => {
                    out.push('[');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_once() {
        let t = PromptTemplate::translate();
        let v = BTreeMap::from([("L", "German"), ("X", "see [Y] here")]);
        assert_eq!(
            t.render(&v).unwrap(),
            "You are a translator. Please translate the following English text into the German: see [Y] here"
        );
    }

    #[test]
    fn missing_slot_is_an_error() {
        let err = PromptTemplate::extract().render(&BTreeMap::from([("Y", "x")])).unwrap_err();
        assert!(err.to_string().contains("[Y1]"), "{err}");
    }

    #[test]
    fn slot_inventory() {
        assert_eq!(PromptTemplate::translate().slots(), ["L", "X"]);
        assert_eq!(PromptTemplate::extract().slots(), ["Y1", "S1", "R1", "O1", "Y"]);
    }
}
