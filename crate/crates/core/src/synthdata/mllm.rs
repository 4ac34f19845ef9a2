use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};
use thiserror::Error;

use super::describe::{DescriptionKey, Descriptions};
use super::lexicon::NegationLexicon;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum MllmError {
    #[error("missing key {0}")]
    MissingKey(String),
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("polarity violation in {0}")]
    PolarityViolation(String),
    #[error("empty phrase for {0}")]
    EmptyPhrase(String),
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

/// Object entries in document order, duplicates preserved.
struct RawEntries(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawEntries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawEntries, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    out.push((k, v));
                }
                Ok(RawEntries(out))
            }
        }
        d.deserialize_map(V)
    }
}

const QUOTES: &[char] = &['"', '\'', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}'];

fn normalize_key(k: &str) -> String {
    k.trim().trim_matches(QUOTES).trim().replace('\u{2212}', "-")
}

fn entries_from_json(body: &str) -> Result<Vec<(String, String)>, MllmError> {
    let raw: RawEntries = serde_json::from_str(body).map_err(|e| MllmError::Malformed(e.to_string()))?;
    raw.0
        .into_iter()
        .map(|(k, v)| match v {
            serde_json::Value::String(s) => Ok((normalize_key(&k), s)),
            other => Err(MllmError::Malformed(format!("value of {k} is not a string: {other}"))),
        })
        .collect()
}

fn entries_from_lines(text: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim().trim_start_matches(['-', '*', '\u{2022}']).trim();
        let Some((k, v)) = line.split_once(':') else {
            continue;
        };
        let key = normalize_key(k);
        if !key.contains('_') || key.contains(char::is_whitespace) {
            continue;
        }
        let value = v.trim().trim_end_matches(',').trim().trim_matches(QUOTES).trim();
        out.push((key, value.to_string()));
    }
    out
}

/// Validates an MLLM key-value record, reporting every violation found.
pub fn parse_mllm_response(text: &str, lexicon: &NegationLexicon) -> Result<Descriptions, Vec<MllmError>> {
    let entries = match (text.find('{'), text.rfind('}')) {
        (Some(a), Some(b)) if a < b => entries_from_json(&text[a..=b]).map_err(|e| vec![e])?,
        (Some(_), _) => return Err(vec![MllmError::Malformed("unterminated JSON object".into())]),
        _ => entries_from_lines(text),
    };
    if entries.is_empty() {
        return Err(vec![MllmError::Malformed("no key-value entries found".into())]);
    }
    let mut errors = Vec::new();
    let mut out = Descriptions::new();
    for (k, v) in entries {
        let Ok(key) = k.parse::<DescriptionKey>() else {
            errors.push(MllmError::UnknownKey(k));
            continue;
        };
        if out.contains_key(&key) {
            errors.push(MllmError::DuplicateKey(k));
            continue;
        }
        let phrase = v.trim().trim_matches(QUOTES).trim().to_string();
        if phrase.is_empty() {
            errors.push(MllmError::EmptyPhrase(k.clone()));
        } else if lexicon.contains_negation(&phrase) != key.polarity.is_negated() {
            errors.push(MllmError::PolarityViolation(k.clone()));
        }
        out.insert(key, phrase);
    }
    for key in DescriptionKey::all() {
        if !out.contains_key(&key) {
            errors.push(MllmError::MissingKey(key.to_string()));
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(errors)
    }
}
