//! GPT-2 pre-tokenization, hand-compiled from the reference pattern
//!
//! ```text
//! 's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
//! ```
//!
//! Alternatives are tried in order at each position, exactly like a
//! backtracking regex engine would. `\s` is the Unicode `White_Space`
//! property, `\p{L}` and `\p{N}` are general categories.

use unicode_general_category::{get_general_category, GeneralCategory as Gc};

fn is_letter(c: char) -> bool {
    matches!(
        get_general_category(c),
        Gc::UppercaseLetter
            | Gc::LowercaseLetter
            | Gc::TitlecaseLetter
            | Gc::ModifierLetter
            | Gc::OtherLetter
    )
}

fn is_number(c: char) -> bool {
    matches!(
        get_general_category(c),
        Gc::DecimalNumber | Gc::LetterNumber | Gc::OtherNumber
    )
}

fn is_space(c: char) -> bool {
    c.is_whitespace()
}

fn is_other(c: char) -> bool {
    !is_space(c) && !is_letter(c) && !is_number(c)
}

const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];

/// Split `text` into pre-tokens. The pieces concatenate back to `text`.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let len = match_at(&text[pos..]);
        debug_assert!(len > 0);
        pieces.push(&text[pos..pos + len]);
        pos += len;
    }
    pieces
}

/// Byte length of the match starting at the beginning of `rest` (non-empty).
fn match_at(rest: &str) -> usize {
    if let Some(c) = CONTRACTIONS.iter().find(|c| rest.starts_with(**c)) {
        return c.len();
    }
    for class in [is_letter as fn(char) -> bool, is_number, is_other] {
        if let Some(len) = optional_space_then_run(rest, class) {
            return len;
        }
    }
    whitespace(rest)
}

/// ` ?class+`
fn optional_space_then_run(rest: &str, class: fn(char) -> bool) -> Option<usize> {
    let body = rest.strip_prefix(' ').unwrap_or(rest);
    let prefix = rest.len() - body.len();
    let run = run_len(body, class);
    if run > 0 {
        return Some(prefix + run);
    }
    // ` ?` may also match empty; then the run must start at the space itself,
    // which no class here accepts except `is_other` (and it rejects spaces).
    None
}

fn run_len(s: &str, class: fn(char) -> bool) -> usize {
    s.char_indices()
        .find(|&(_, c)| !class(c))
        .map_or(s.len(), |(i, _)| i)
}

/// `\s+(?!\S)|\s+` on input that starts with whitespace.
fn whitespace(rest: &str) -> usize {
    let run = run_len(rest, is_space);
    if run == 0 {
        // Unreachable for well-formed input: every char is a letter, a
        // number, whitespace, or "other". Consume one char to make progress.
        return rest.chars().next().map_or(0, char::len_utf8);
    }
    if run == rest.len() {
        return run;
    }
    // Followed by non-whitespace: give back the last whitespace char, unless
    // that would leave nothing, in which case the plain `\s+` branch takes it.
    let last = rest[..run].chars().next_back().map_or(0, char::len_utf8);
    if run > last {
        run - last
    } else {
        run
    }
}
