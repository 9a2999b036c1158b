//! Caption tokenization: lowercase, strip punctuation, whitespace split.

pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowercases_and_strips_punctuation() {
        assert_eq!(
            tokenize("A cracked Beam, near the exit!"),
            vec!["a", "cracked", "beam", "near", "the", "exit"]
        );
    }

    #[test]
    fn drops_pure_punctuation_tokens() {
        assert_eq!(tokenize("a - b"), vec!["a", "b"]);
    }
}
