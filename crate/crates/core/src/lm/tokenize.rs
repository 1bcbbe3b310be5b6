/// Surface form of the out-of-vocabulary token. The tokenizer strips the
/// angle brackets from any input word, so it can never collide with text.
pub const UNK: &str = "<unk>";

/// Lowercases, splits on whitespace and trims punctuation from both ends of
/// every word. Words that are pure punctuation vanish.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().filter_map(normalize_word).collect()
}

/// Token for a single whitespace-free word, if it has one.
pub fn normalize_word(word: &str) -> Option<String> {
    let lower = word.to_lowercase();
    let trimmed = lower.trim_matches(|c: char| !c.is_alphanumeric());
    if trimmed.is_empty() {
        None
    } else {
        Some(trimmed.to_owned())
    }
}
