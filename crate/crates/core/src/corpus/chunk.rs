use crate::lm::tokenize::normalize_word;

pub const DEFAULT_MAX_CHUNK_TOKENS: usize = 64;
pub const MIN_CHUNK_TOKENS: usize = 8;

/// Splits `body` into sentence-packed chunks of at most `max_tokens` tokens.
///
/// Sentences end at a word whose last character is `.`, `!` or `?` (that is,
/// terminal punctuation followed by whitespace or the end of the body).
/// Consecutive sentences are packed greedily; a sentence longer than the
/// limit is hard-split on word boundaries. Whitespace is normalized to single
/// spaces, so joining the chunks with `" "` yields the normalized body.
pub fn chunk_document(body: &str, max_tokens: usize) -> Vec<String> {
    assert!(
        max_tokens >= MIN_CHUNK_TOKENS,
        "max_tokens must be at least {MIN_CHUNK_TOKENS}"
    );
    let mut chunks = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut current_tokens = 0usize;

    for sentence in sentences(body) {
        let sentence_tokens: usize = sentence.iter().map(|w| word_tokens(w)).sum();
        if sentence_tokens > max_tokens {
            flush(&mut chunks, &mut current, &mut current_tokens);
            for piece in hard_split(&sentence, max_tokens) {
                chunks.push(piece.join(" "));
            }
            continue;
        }
        if current_tokens + sentence_tokens > max_tokens {
            flush(&mut chunks, &mut current, &mut current_tokens);
        }
        current.extend_from_slice(&sentence);
        current_tokens += sentence_tokens;
    }
    flush(&mut chunks, &mut current, &mut current_tokens);
    chunks
}

/// Number of tokens in `text` under the shared tokenizer.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().map(word_tokens).sum()
}

fn word_tokens(word: &str) -> usize {
    usize::from(normalize_word(word).is_some())
}

fn sentences(body: &str) -> Vec<Vec<&str>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    for word in body.split_whitespace() {
        current.push(word);
        if word.ends_with(['.', '!', '?']) {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn hard_split<'a>(sentence: &[&'a str], max_tokens: usize) -> Vec<Vec<&'a str>> {
    let mut pieces = Vec::new();
    let mut piece = Vec::new();
    let mut tokens = 0;
    for word in sentence {
        let n = word_tokens(word);
        if tokens + n > max_tokens {
            pieces.push(std::mem::take(&mut piece));
            tokens = 0;
        }
        piece.push(*word);
        tokens += n;
    }
    if !piece.is_empty() {
        pieces.push(piece);
    }
    pieces
}

fn flush(chunks: &mut Vec<String>, current: &mut Vec<&str>, tokens: &mut usize) {
    if !current.is_empty() {
        chunks.push(current.join(" "));
        current.clear();
    }
    *tokens = 0;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::tokenize::tokenize;
    use proptest::prelude::*;

    fn sentence_of(n: usize, stem: &str) -> String {
        let words: Vec<String> = (0..n).map(|i| format!("{stem}{i}")).collect();
        format!("{}.", words.join(" "))
    }

    #[test]
    fn short_body_is_one_chunk() {
        assert_eq!(chunk_document("A b. C d.", 64), vec!["A b. C d."]);
    }

    #[test]
    fn two_forty_token_sentences_split() {
        let body = format!("{} {}", sentence_of(40, "w"), sentence_of(40, "v"));
        // Hand count: each sentence is 40 words, every word one token.
        assert_eq!(tokenize(&body).len(), 80);
        let chunks = chunk_document(&body, 64);
        assert_eq!(chunks.len(), 2);
        assert_eq!(token_count(&chunks[0]), 40);
        assert_eq!(token_count(&chunks[1]), 40);
    }

    #[test]
    fn empty_body_has_no_chunks() {
        assert!(chunk_document("", 64).is_empty());
        assert!(chunk_document("   \n ", 64).is_empty());
    }

    #[test]
    fn long_sentence_is_hard_split() {
        let body = sentence_of(20, "x");
        let chunks = chunk_document(&body, 8);
        assert_eq!(chunks.iter().map(|c| token_count(c)).collect::<Vec<_>>(), vec![8, 8, 4]);
    }

    #[test]
    fn terminal_punctuation_needs_whitespace() {
        // "3.5" does not end a sentence; "end." does.
        let chunks = chunk_document("value 3.5 ok end. next one", 8);
        assert_eq!(chunks, vec!["value 3.5 ok end. next one"]);
        let s = sentence_of(6, "a");
        let body = format!("{s} {s}");
        assert_eq!(chunk_document(&body, 8), vec![s.clone(), s]);
    }

    proptest! {
        #[test]
        fn chunking_is_lossless_and_bounded(
            words in proptest::collection::vec("[a-z]{1,6}[.!?,]?|--", 0..120),
            limit in 8usize..40,
        ) {
            let body = words.join(" ");
            let chunks = chunk_document(&body, limit);
            prop_assert_eq!(chunks.join(" "), body.split_whitespace().collect::<Vec<_>>().join(" "));
            for c in &chunks {
                prop_assert!(token_count(c) <= limit);
                prop_assert!(!c.is_empty());
            }
            prop_assert_eq!(chunk_document(&body, limit), chunks);
        }
    }
}
