//! Small string helpers shared by extraction, linking, the mock backend and metrics.

/// Trim and collapse internal whitespace, preserving case.
pub fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Matching key for entity names: collapsed whitespace, lowercased.
pub fn name_key(s: &str) -> String {
    collapse_whitespace(s).to_lowercase()
}

/// Lowercase alphanumeric word tokens.
pub fn word_tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Cut `s` to at most `max_chars` characters on a char boundary.
pub fn truncate_chars(s: &str, max_chars: usize) -> &str {
    match s.char_indices().nth(max_chars) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}

/// Pull the first JSON value (object or array) out of a model reply.
///
/// Models wrap JSON in prose or markdown fences often enough that a strict
/// `from_str` on the whole reply is not useful.
pub fn extract_json(reply: &str) -> Option<serde_json::Value> {
    let trimmed = reply.trim();
    if let Ok(v) = serde_json::from_str(trimmed) {
        return Some(v);
    }
    for (start, ch) in trimmed.char_indices() {
        if ch != '{' && ch != '[' {
            continue;
        }
        let mut stream =
            serde_json::Deserializer::from_str(&trimmed[start..]).into_iter::<serde_json::Value>();
        if let Some(Ok(v)) = stream.next() {
            return Some(v);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_ignore_case_and_spacing() {
        assert_eq!(name_key("  Large   Language Model "), "large language model");
        assert_eq!(collapse_whitespace(" a \n b "), "a b");
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        assert_eq!(truncate_chars("héllo", 2), "hé");
        assert_eq!(truncate_chars("abc", 10), "abc");
    }

    #[test]
    fn json_is_found_inside_fences() {
        let v = extract_json("Sure:\n```json\n{\"a\": [1, 2]}\n```").unwrap();
        assert_eq!(v["a"][1], 2);
        assert!(extract_json("no json here").is_none());
    }
}
