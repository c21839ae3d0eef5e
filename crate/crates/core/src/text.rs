//! Shared tokenization for every overlap metric and for the toy model.

/// Lowercases, removes ASCII punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|word| {
            word.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Tokenized form joined back with single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}
