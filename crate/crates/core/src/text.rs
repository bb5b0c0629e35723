//! Sentence segmentation and answer-string normalization.

/// Splits text into sentences.
///
/// A boundary falls after `.`, `!` or `?` when the next characters are
/// whitespace followed by an uppercase letter, or when only whitespace
/// remains. Abbreviations such as "Dr. Smith" are split like any other
/// period. Returned sentences are trimmed and cover every non-whitespace
/// character of the input, in order.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut sentences = Vec::new();
    let mut start = 0usize;

    for (pos, &(byte, c)) in chars.iter().enumerate() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let end = byte + c.len_utf8();
        let mut next = pos + 1;
        let mut saw_space = false;
        while next < chars.len() && chars[next].1.is_whitespace() {
            saw_space = true;
            next += 1;
        }
        let boundary = next == chars.len() || (saw_space && chars[next].1.is_uppercase());
        if boundary {
            push_trimmed(&mut sentences, &text[start..end]);
            start = end;
        }
    }
    push_trimmed(&mut sentences, &text[start..]);
    sentences
}

fn push_trimmed(out: &mut Vec<String>, piece: &str) {
    let piece = piece.trim();
    if !piece.is_empty() {
        out.push(piece.to_string());
    }
}

/// Collapses every whitespace run to one space and trims the ends.
pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercases, removes ASCII punctuation, and splits on whitespace.
pub fn plain_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// SQuAD-style answer normalization: [`plain_tokens`] with the articles
/// "a", "an" and "the" removed.
pub fn answer_tokens(text: &str) -> Vec<String> {
    plain_tokens(text)
        .into_iter()
        .filter(|t| !matches!(t.as_str(), "a" | "an" | "the"))
        .collect()
}

/// True when `needle` occurs as a contiguous run inside `haystack`.
/// An empty needle only matches an empty haystack.
pub fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    if needle.is_empty() {
        return haystack.is_empty();
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Finds `needle` inside `haystack` ignoring differences in whitespace, and
/// returns the matching byte span of the original `haystack`.
pub fn find_ignoring_whitespace(haystack: &str, needle: &str) -> Option<(usize, usize)> {
    let needle = collapse_whitespace(needle);
    if needle.is_empty() {
        return None;
    }
    // Normalized haystack plus, for every byte of it, the original byte offset.
    let mut normalized = String::with_capacity(haystack.len());
    let mut origin: Vec<usize> = Vec::with_capacity(haystack.len());
    let mut ends: Vec<usize> = Vec::with_capacity(haystack.len());
    let mut pending_space = false;
    for (byte, c) in haystack.char_indices() {
        if c.is_whitespace() {
            pending_space = !normalized.is_empty();
            continue;
        }
        if pending_space {
            normalized.push(' ');
            origin.push(byte);
            ends.push(byte);
            pending_space = false;
        }
        normalized.push(c);
        for _ in 0..c.len_utf8() {
            origin.push(byte);
            ends.push(byte + c.len_utf8());
        }
    }
    let at = normalized.find(&needle)?;
    let last = at + needle.len() - 1;
    Some((origin[at], ends[last]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_on_terminal_periods() {
        assert_eq!(
            split_sentences("A is B. C is D."),
            vec!["A is B.", "C is D."]
        );
    }

    #[test]
    fn unterminated_text_is_one_sentence() {
        assert_eq!(split_sentences("One sentence"), vec!["One sentence"]);
    }

    #[test]
    fn every_terminator_splits() {
        assert_eq!(split_sentences("Hi! Ok? Yes."), vec!["Hi!", "Ok?", "Yes."]);
    }

    #[test]
    fn lowercase_continuation_does_not_split() {
        assert_eq!(
            split_sentences("It costs 3.5 dollars. ok then"),
            vec!["It costs 3.5 dollars. ok then"]
        );
        assert!(split_sentences("   ").is_empty());
    }

    #[test]
    fn answer_normalization_drops_articles_and_punctuation() {
        assert_eq!(
            answer_tokens("The Eiffel-Tower, a landmark!"),
            vec!["eiffeltower", "landmark"]
        );
        assert_eq!(plain_tokens("PARIS, France"), vec!["paris", "france"]);
    }

    #[test]
    fn whitespace_insensitive_find_maps_back_to_original() {
        let hay = "Alpha  beta.\nGamma   delta.";
        let (s, e) = find_ignoring_whitespace(hay, "beta. Gamma delta.").unwrap();
        assert_eq!(&hay[s..e], "beta.\nGamma   delta.");
        assert!(find_ignoring_whitespace(hay, "omega").is_none());
        assert!(find_ignoring_whitespace(hay, "  ").is_none());
    }

    proptest! {
        #[test]
        fn resplitting_joined_sentences_is_a_fixed_point(text in "[A-Za-z .!?\n]{0,80}") {
            let first = split_sentences(&text);
            let again = split_sentences(&first.join(" "));
            prop_assert_eq!(first, again);
        }

        #[test]
        fn sentences_cover_all_non_whitespace(text in "[A-Za-z .!?\n]{0,80}") {
            let joined: String = split_sentences(&text).concat().chars().filter(|c| !c.is_whitespace()).collect();
            let original: String = text.chars().filter(|c| !c.is_whitespace()).collect();
            prop_assert_eq!(joined, original);
        }
    }
}
