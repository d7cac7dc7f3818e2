//! Shared text handling: normalization and the tokenization rule used by
//! chunking and by the overlap metrics.
//!
//! A token is a single character for CJK ideographs and CJK/full-width
//! punctuation, and a whitespace-delimited run of anything else.

use unicode_normalization::UnicodeNormalization;

/// NFC-normalizes `text` and folds CR/LF and lone CR line endings to LF.
pub fn normalize(text: &str) -> String {
    let folded = text.replace("\r\n", "\n").replace('\r', "\n");
    folded.nfc().collect()
}

/// CJK unified ideographs, including extension A and the supplementary-plane
/// extensions, plus compatibility ideographs.
pub fn is_cjk_ideograph(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0xF900..=0xFAFF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x30000..=0x3134F)
}

/// CJK symbols and punctuation block plus half/full-width forms.
pub fn is_cjk_punctuation(c: char) -> bool {
    matches!(c as u32, 0x3000..=0x303F | 0xFF00..=0xFFEF)
}

fn is_single_char_token(c: char) -> bool {
    is_cjk_ideograph(c) || (is_cjk_punctuation(c) && c != '\u{3000}')
}

fn is_separator(c: char) -> bool {
    c.is_whitespace()
}

/// Byte ranges `[start, end)` of every token in `text`, in order.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if is_separator(c) {
            if let Some(s) = word_start.take() {
                spans.push((s, i));
            }
        } else if is_single_char_token(c) {
            if let Some(s) = word_start.take() {
                spans.push((s, i));
            }
            spans.push((i, i + c.len_utf8()));
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    if let Some(s) = word_start {
        spans.push((s, text.len()));
    }
    spans
}

/// Splits `text` into tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    token_spans(text)
        .into_iter()
        .map(|(s, e)| &text[s..e])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latin_words_split_on_whitespace() {
        assert_eq!(tokenize("the  cat\tsat\n"), vec!["the", "cat", "sat"]);
    }

    #[test]
    fn cjk_characters_are_single_tokens() {
        assert_eq!(tokenize("本院查明X。"), vec!["本", "院", "查", "明", "X", "。"]);
    }

    #[test]
    fn mixed_runs() {
        assert_eq!(
            tokenize("判处有期徒刑5年，罚金2000元"),
            vec!["判", "处", "有", "期", "徒", "刑", "5", "年", "，", "罚", "金", "2000", "元"]
        );
    }

    #[test]
    fn line_endings_fold_to_lf() {
        assert_eq!(normalize("a\r\nb\rc"), "a\nb\nc");
    }

    #[test]
    fn nfc_composes() {
        assert_eq!(normalize("e\u{0301}"), "\u{00e9}");
    }

    #[test]
    fn empty_and_blank_have_no_tokens() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \n ").is_empty());
    }
}
