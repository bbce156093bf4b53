//! Seeded generator for a small structured English-like corpus. Sentences
//! follow a fixed grammar with subject–verb number agreement, so tokens
//! carry both local (spelling) and longer-range (agreement) dependencies.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::rng;

const NOUNS: &[&str] = &["cat", "dog", "bird", "fox", "owl", "hen", "frog", "mole"];
const ADJECTIVES: &[&str] = &["red", "big", "old", "shy", "wet", "tiny"];
const TRANSITIVE: &[&str] = &["see", "find", "like", "chase", "help"];
const INTRANSITIVE: &[&str] = &["nap", "sing", "hide", "run"];
const PLACES: &[&str] = &["mat", "den", "sea", "hill", "barn"];
const PREPOSITIONS: &[&str] = &["on", "in", "by", "near"];

fn noun_phrase<R: Rng>(rng: &mut R, plural: bool) -> String {
    let mut s = String::from("the ");
    if rng.random_bool(0.4) {
        s.push_str(ADJECTIVES.choose(rng).expect("non-empty"));
        s.push(' ');
    }
    s.push_str(NOUNS.choose(rng).expect("non-empty"));
    if plural {
        s.push('s');
    }
    s
}

fn verb(stem: &str, plural_subject: bool) -> String {
    match (plural_subject, stem.ends_with('h') || stem.ends_with('s')) {
        (true, _) => stem.to_string(),
        (false, true) => format!("{stem}es"),
        (false, false) => format!("{stem}s"),
    }
}

/// One sentence, ending in a period (no trailing space).
pub fn sentence<R: Rng>(rng: &mut R) -> String {
    let plural = rng.random_bool(0.5);
    let mut s = noun_phrase(rng, plural);
    s.push(' ');
    if rng.random_bool(0.6) {
        s.push_str(&verb(TRANSITIVE.choose(rng).expect("non-empty"), plural));
        s.push(' ');
        let obj_plural = rng.random_bool(0.5);
        s.push_str(&noun_phrase(rng, obj_plural));
    } else {
        s.push_str(&verb(INTRANSITIVE.choose(rng).expect("non-empty"), plural));
        s.push(' ');
        s.push_str(PREPOSITIONS.choose(rng).expect("non-empty"));
        s.push_str(" the ");
        s.push_str(PLACES.choose(rng).expect("non-empty"));
    }
    s.push('.');
    s
}

/// Space-separated sentences totalling at least `min_chars` characters.
pub fn text(seed: u64, min_chars: usize) -> String {
    let mut r = rng::stream(seed, 0x5EED);
    let mut out = String::new();
    while out.chars().count() < min_chars {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&sentence(&mut r));
    }
    out
}

/// `count` stories of `sentences` sentences each, one story per line.
pub fn stories(seed: u64, count: usize, sentences: usize) -> String {
    let mut r = rng::stream(seed, 0x570E);
    (0..count)
        .map(|_| {
            (0..sentences)
                .map(|_| sentence(&mut r))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}
