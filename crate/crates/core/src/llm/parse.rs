//! Structured-output parsers for pipeline prompts.
//!
//! Every parser either returns a fully schema-conforming value or fails
//! with a structured-output error carrying the raw response, so a caller
//! can re-prompt once with the original request.

use std::collections::BTreeMap;

use serde_json::Value;

use crate::{Error, Result};

/// One generated KC entry: a one-sentence reasoning and a name.
#[derive(Debug, Clone, PartialEq)]
pub struct KcEntry {
    pub reasoning: String,
    pub name: String,
}

/// Cluster labeling outcome: exactly one of the two options is set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLabelResponse {
    pub reasoning: String,
    pub representative_kc: Option<String>,
    pub summary_name: Option<String>,
}

/// Strip surrounding markdown code fences, then fall back to the span
/// between the first `{` and the last `}` so leading chatter is ignored.
fn extract_json(response: &str) -> &str {
    let mut text = response.trim();
    if text.starts_with("```") {
        if let Some(first_newline) = text.find('\n') {
            text = &text[first_newline + 1..];
        }
        if let Some(end) = text.rfind("```") {
            text = &text[..end];
        }
        text = text.trim();
    }
    if !text.starts_with('{') {
        if let (Some(start), Some(end)) = (text.find('{'), text.rfind('}')) {
            if start < end {
                text = &text[start..=end];
            }
        }
    }
    text
}

fn as_object<'v>(value: &'v Value, raw: &str) -> Result<&'v serde_json::Map<String, Value>> {
    value
        .as_object()
        .ok_or_else(|| Error::structured("top-level JSON value is not an object", raw))
}

fn parse_value(response: &str) -> Result<Value> {
    serde_json::from_str(extract_json(response))
        .map_err(|e| Error::structured(format!("response is not valid JSON: {e}"), response))
}

/// Trim, collapse internal whitespace, and case-fold a KC name for
/// matching purposes.
pub fn normalize_kc_name(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Parse a KC-generation response: keys `KC 1..KC n`, each an object with
/// non-empty `reasoning` and `name`. Entries come back in numeric order.
pub fn parse_kc_json(response: &str) -> Result<Vec<KcEntry>> {
    let value = parse_value(response)?;
    let object = as_object(&value, response)?;
    let mut entries: Vec<(u64, KcEntry)> = Vec::new();
    for (key, item) in object {
        let index: u64 = key
            .strip_prefix("KC ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| {
                Error::structured(format!("unexpected key {key:?}, wanted \"KC n\""), response)
            })?;
        let fields = item.as_object().ok_or_else(|| {
            Error::structured(format!("{key} is not an object"), response)
        })?;
        let get = |field: &str| -> Result<String> {
            let text = fields
                .get(field)
                .and_then(Value::as_str)
                .unwrap_or_default()
                .trim()
                .to_string();
            if text.is_empty() {
                return Err(Error::structured(
                    format!("{key} is missing a non-empty {field:?}"),
                    response,
                ));
            }
            Ok(text)
        };
        entries.push((
            index,
            KcEntry {
                reasoning: get("reasoning")?,
                name: get("name")?,
            },
        ));
    }
    if entries.is_empty() {
        return Err(Error::structured("no KC entries found", response));
    }
    entries.sort_by_key(|(i, _)| *i);
    Ok(entries.into_iter().map(|(_, e)| e).collect())
}

fn optional_string(object: &serde_json::Map<String, Value>, field: &str, raw: &str) -> Result<Option<String>> {
    match object.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(Some(s.trim().to_string())),
        Some(other) => Err(Error::structured(
            format!("field {field:?} must be a non-empty string or null, got {other}"),
            raw,
        )),
    }
}

/// Parse a cluster-label response with its `representative kc` /
/// `summary name` alternative.
pub fn parse_cluster_label_json(response: &str) -> Result<ClusterLabelResponse> {
    let value = parse_value(response)?;
    let object = as_object(&value, response)?;
    let reasoning = object
        .get("reasoning")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .trim()
        .to_string();
    if reasoning.is_empty() {
        return Err(Error::structured("missing non-empty \"reasoning\"", response));
    }
    let representative_kc = optional_string(object, "representative kc", response)?;
    let summary_name = optional_string(object, "summary name", response)?;
    match (&representative_kc, &summary_name) {
        (Some(_), Some(_)) => Err(Error::structured(
            "both \"representative kc\" and \"summary name\" are set",
            response,
        )),
        (None, None) => Err(Error::structured(
            "both \"representative kc\" and \"summary name\" are null",
            response,
        )),
        _ => Ok(ClusterLabelResponse {
            reasoning,
            representative_kc,
            summary_name,
        }),
    }
}

/// Parse a KC error-labeling response against the KC list that was sent.
/// Keys are matched after normalization; the returned map is keyed by the
/// caller's names and covers exactly `expected_kcs`.
pub fn parse_kc_error_json(
    response: &str,
    expected_kcs: &[String],
) -> Result<BTreeMap<String, u8>> {
    if expected_kcs.is_empty() {
        return Err(Error::domain("expected_kcs must be non-empty"));
    }
    let value = parse_value(response)?;
    let object = as_object(&value, response)?;
    match object.get("error reasoning") {
        Some(Value::Array(items))
            if !items.is_empty() && items.iter().all(|i| i.is_string()) => {}
        _ => {
            return Err(Error::structured(
                "missing \"error reasoning\" array of sentences",
                response,
            ))
        }
    }
    let errors = object
        .get("KC error")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::structured("missing \"KC error\" object", response))?;

    let mut normalized_response: BTreeMap<String, u8> = BTreeMap::new();
    for (key, value) in errors {
        let label = match value {
            Value::Number(n) if n.as_u64() == Some(0) => 0,
            Value::Number(n) if n.as_u64() == Some(1) => 1,
            other => {
                return Err(Error::structured(
                    format!("KC {key:?} has label {other}, expected 0 or 1"),
                    response,
                ))
            }
        };
        if normalized_response
            .insert(normalize_kc_name(key), label)
            .is_some()
        {
            return Err(Error::structured(
                format!("duplicate KC key {key:?} after normalization"),
                response,
            ));
        }
    }

    let mut out = BTreeMap::new();
    for name in expected_kcs {
        let normalized = normalize_kc_name(name);
        match normalized_response.remove(&normalized) {
            Some(label) => {
                out.insert(name.clone(), label);
            }
            None => {
                return Err(Error::structured(
                    format!("response is missing KC {name:?}"),
                    response,
                ))
            }
        }
    }
    if let Some(extra) = normalized_response.keys().next() {
        return Err(Error::structured(
            format!("response contains unexpected KC {extra:?}"),
            response,
        ));
    }
    Ok(out)
}

/// Parse a tag-conversion response: a flat object mapping each requested
/// tag to a non-empty natural-language name. Every tag must be covered.
pub fn parse_tag_conversion_json(
    response: &str,
    tags: &[String],
) -> Result<BTreeMap<String, String>> {
    if tags.is_empty() {
        return Err(Error::domain("tags must be non-empty"));
    }
    let value = parse_value(response)?;
    let object = as_object(&value, response)?;
    let mut out = BTreeMap::new();
    for tag in tags {
        let name = object
            .get(tag)
            .and_then(Value::as_str)
            .unwrap_or_default()
            .trim()
            .to_string();
        if name.is_empty() {
            return Err(Error::structured(
                format!("response is missing a conversion for tag {tag:?}"),
                response,
            ));
        }
        out.insert(tag.clone(), name);
    }
    Ok(out)
}
