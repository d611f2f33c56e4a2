use std::collections::HashSet;

use crate::scenegen::COLORS;

pub const DETERMINERS: [&str; 5] = ["the", "a", "an", "this", "that"];
const SIZE_WORDS: [&str; 6] = ["small", "large", "tall", "short", "left", "right"];

/// Words that end a noun phrase when scanning left from its head.
const FUNCTION_WORDS: [&str; 24] = [
    "is", "are", "to", "of", "on", "in", "at", "and", "or", "with", "by", "from", "which", "who", "it", "near",
    "next", "find", "choose", "located", "between", "behind", "under", "top",
];

/// Longest distance from a determiner to its head noun when the words in
/// between are unlisted modifiers such as `office` in `the office chair`.
const MAX_MODIFIERS: usize = 2;

fn is_adjective(w: &str) -> bool {
    SIZE_WORDS.contains(&w) || COLORS.iter().any(|(c, _)| *c == w)
}

/// Rule-based chunker for the target noun phrase: the first class word,
/// extended left over adjectives and an optional determiner. Returns the
/// half-open token range, or `None` when no class word occurs.
pub fn parse_target_phrase<S: AsRef<str>>(tokens: &[S], classes: &HashSet<String>) -> Option<(usize, usize)> {
    parse_phrases(tokens, classes).into_iter().next()
}

/// Every class-word noun phrase in order, chunked like the target phrase.
/// A phrase never extends into the one before it.
pub fn parse_phrases<S: AsRef<str>>(tokens: &[S], classes: &HashSet<String>) -> Vec<(usize, usize)> {
    let words: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let mut out = Vec::new();
    let mut floor = 0;
    for head in 0..words.len() {
        if classes.contains(words[head]) {
            let start = phrase_start(&words, head, floor, classes);
            out.push((start, head + 1));
            floor = head + 1;
        }
    }
    out
}

fn phrase_start(words: &[&str], head: usize, floor: usize, classes: &HashSet<String>) -> usize {
    let mut start = head;
    while start > floor && is_adjective(words[start - 1]) {
        start -= 1;
    }
    if start > floor && DETERMINERS.contains(&words[start - 1]) {
        return start - 1;
    }
    // Unlisted modifiers are accepted only when a nearby determiner closes them.
    let modifier = |w: &str| !DETERMINERS.contains(&w) && !FUNCTION_WORDS.contains(&w) && !classes.contains(w);
    let mut i = start;
    while i > floor && start - i < MAX_MODIFIERS && modifier(words[i - 1]) {
        i -= 1;
        if i > floor && DETERMINERS.contains(&words[i - 1]) {
            return i - 1;
        }
    }
    start
}
