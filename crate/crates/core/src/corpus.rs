use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::jsonl;

/// One raw corpus line: `{"id": .., "text": .., "domains": [..]?}`. Unknown
/// fields are kept and written back out untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domains: Option<Vec<String>>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl RawDocument {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        RawDocument {
            id: id.into(),
            text: text.into(),
            domains: None,
            extra: Map::new(),
        }
    }
}

/// Loads a corpus and rejects duplicate ids.
pub fn load_corpus(path: &Path) -> Result<Vec<RawDocument>> {
    let docs: Vec<RawDocument> = jsonl::read(path)?;
    let mut seen = HashMap::with_capacity(docs.len());
    for (i, d) in docs.iter().enumerate() {
        if let Some(prev) = seen.insert(d.id.as_str(), i) {
            return Err(Error::InvalidConfig(format!(
                "{}: duplicate document id {:?} on lines {} and {}",
                path.display(),
                d.id,
                prev + 1,
                i + 1
            )));
        }
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_fields_pass_through() {
        let line = r#"{"id":"a","text":"t","lang":"en","score":0.5}"#;
        let doc: RawDocument = serde_json::from_str(line).unwrap();
        assert_eq!(doc.domains, None);
        assert_eq!(doc.extra["lang"], "en");
        let back = serde_json::to_value(&doc).unwrap();
        assert_eq!(back, serde_json::from_str::<Value>(line).unwrap());
    }
}
