//! Lexical helpers shared by the corpus, prompting and attribution code.

/// Case-fold and collapse internal whitespace.
pub fn fold(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Normalize an already folded surface form against a vocabulary.
///
/// Returns the folded form itself if it is known; otherwise strips a single
/// trailing "es" or "s" when the resulting stem is known. Returns `None` if
/// no form matches.
pub fn match_known<'a, F>(folded: &'a str, known: F) -> Option<std::borrow::Cow<'a, str>>
where
    F: Fn(&str) -> bool,
{
    if known(folded) {
        return Some(std::borrow::Cow::Borrowed(folded));
    }
    for suffix in ["es", "s"] {
        if let Some(stem) = folded.strip_suffix(suffix) {
            if !stem.is_empty() && known(stem) {
                return Some(std::borrow::Cow::Borrowed(stem));
            }
        }
    }
    None
}

/// Split a caption into folded alphanumeric tokens.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\''))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

const SMALL_NUMBERS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
    "nineteen", "twenty",
];

/// Parse a quantity term ("2", "two", "a pair of" is not supported).
pub fn quantity_value(term: &str) -> Option<u32> {
    let t = fold(term);
    if let Ok(n) = t.parse::<u32>() {
        return Some(n);
    }
    SMALL_NUMBERS.iter().position(|w| *w == t).map(|n| n as u32)
}

pub fn number_word(n: u32) -> String {
    SMALL_NUMBERS
        .get(n as usize)
        .map(|s| s.to_string())
        .unwrap_or_else(|| n.to_string())
}

const IRREGULAR_PLURALS: &[(&str, &str)] = &[
    ("person", "people"),
    ("man", "men"),
    ("woman", "women"),
    ("child", "children"),
    ("mouse", "mice"),
    ("goose", "geese"),
    ("foot", "feet"),
    ("tooth", "teeth"),
    ("ox", "oxen"),
    ("leaf", "leaves"),
    ("knife", "knives"),
    ("wolf", "wolves"),
    ("shelf", "shelves"),
    ("loaf", "loaves"),
    ("calf", "calves"),
    ("half", "halves"),
    ("potato", "potatoes"),
    ("tomato", "tomatoes"),
    ("hero", "heroes"),
];

const INVARIANT_PLURALS: &[&str] = &["sheep", "fish", "deer", "series", "species", "aircraft", "bison"];

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

fn pluralize_word(word: &str) -> String {
    let lower = word.to_lowercase();
    if let Some((_, p)) = IRREGULAR_PLURALS.iter().find(|(s, _)| *s == lower) {
        return p.to_string();
    }
    if INVARIANT_PLURALS.contains(&lower.as_str()) {
        return word.to_string();
    }
    if ["s", "x", "z", "ch", "sh"].iter().any(|s| lower.ends_with(s)) {
        return format!("{word}es");
    }
    let chars: Vec<char> = lower.chars().collect();
    if chars.len() >= 2 && chars[chars.len() - 1] == 'y' && !is_vowel(chars[chars.len() - 2]) {
        return format!("{}ies", &word[..word.len() - 1]);
    }
    format!("{word}s")
}

/// Pluralize the head (last word) of a noun phrase.
pub fn pluralize(phrase: &str) -> String {
    match phrase.rsplit_once(' ') {
        Some((head, last)) => format!("{head} {}", pluralize_word(last)),
        None => pluralize_word(phrase),
    }
}

/// "a" or "an" for the following word.
pub fn indefinite_article(next: &str) -> &'static str {
    let lower = next.to_lowercase();
    // Common exceptions where spelling and sound disagree.
    if ["hour", "honest", "honor", "heir"].iter().any(|p| lower.starts_with(p)) {
        return "an";
    }
    if ["uni", "use", "usu", "one", "euro", "ewe"].iter().any(|p| lower.starts_with(p)) {
        return "a";
    }
    match lower.chars().next() {
        Some(c) if is_vowel(c) => "an",
        _ => "a",
    }
}

fn gerund_word(verb: &str) -> String {
    let lower = verb.to_lowercase();
    if lower.ends_with("ing") && lower.len() > 4 {
        return verb.to_string();
    }
    if lower.ends_with("ie") {
        return format!("{}ying", &verb[..verb.len() - 2]);
    }
    if lower.ends_with("ee") || lower.ends_with("ye") || lower.ends_with("oe") {
        return format!("{verb}ing");
    }
    if lower.ends_with('e') && lower.len() > 2 {
        return format!("{}ing", &verb[..verb.len() - 1]);
    }
    let chars: Vec<char> = lower.chars().collect();
    let n = chars.len();
    // Double the final consonant of short consonant-vowel-consonant verbs.
    if n >= 3
        && n <= 4
        && !is_vowel(chars[n - 1])
        && !matches!(chars[n - 1], 'w' | 'x' | 'y')
        && is_vowel(chars[n - 2])
        && !is_vowel(chars[n - 3])
    {
        return format!("{verb}{}ing", chars[n - 1]);
    }
    format!("{verb}ing")
}

/// Put the leading verb of an action clause in its -ing form.
pub fn gerund_clause(clause: &str) -> String {
    let clause = clause.trim();
    let clause = clause.strip_prefix("is ").unwrap_or(clause);
    match clause.split_once(' ') {
        Some((verb, rest)) => format!("{} {rest}", gerund_word(verb)),
        None => gerund_word(clause),
    }
}

pub fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}
