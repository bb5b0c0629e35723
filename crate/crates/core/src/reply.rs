//! Strict parsing of model replies that are supposed to be a JSON object.

use serde_json::{Map, Value};

/// Parses `raw` as a single JSON object. When the whole reply is not one,
/// retries once on the first `{...}` span, with typographic double quotes
/// straightened. Returns the object and whether the repair pass was needed.
pub fn json_object(raw: &str) -> Option<(Map<String, Value>, bool)> {
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(raw.trim()) {
        return Some((map, false));
    }
    let (start, end) = first_brace_span(raw)?;
    let span = raw[start..end].replace(['\u{201c}', '\u{201d}'], "\"");
    match serde_json::from_str::<Value>(&span) {
        Ok(Value::Object(map)) => Some((map, true)),
        _ => None,
    }
}

/// Byte span from the first `{` through the first `}` after it.
pub fn first_brace_span(raw: &str) -> Option<(usize, usize)> {
    let start = raw.find('{')?;
    let end = raw[start..].find('}')? + start + 1;
    Some((start, end))
}

/// Text of `raw` outside its first `{...}` span, trimmed.
pub fn outside_first_object(raw: &str) -> String {
    match first_brace_span(raw) {
        Some((s, e)) => format!("{} {}", raw[..s].trim(), raw[e..].trim())
            .trim()
            .to_string(),
        None => raw.trim().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_reply_object() {
        let (map, repaired) = json_object(" {\"a\": 1} ").unwrap();
        assert_eq!(map["a"], 1);
        assert!(!repaired);
    }

    #[test]
    fn repairs_surrounding_prose_and_curly_quotes() {
        let (map, repaired) =
            json_object("Sure: {\u{201c}status\u{201d}: \u{201c}True\u{201d}} done").unwrap();
        assert_eq!(map["status"], "True");
        assert!(repaired);
    }

    #[test]
    fn rejects_non_objects() {
        assert!(json_object("Sure! It is useful.").is_none());
        assert!(json_object("[1, 2]").is_none());
        assert!(json_object("{broken").is_none());
    }

    #[test]
    fn explanation_is_text_around_the_object() {
        assert_eq!(outside_first_object("Because X. {\"k\":1}"), "Because X.");
        assert_eq!(outside_first_object("no json"), "no json");
    }
}
