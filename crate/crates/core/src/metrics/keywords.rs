//! Per-language keyword lists, shipped as plain-text resource files (one
//! keyword per line) and loaded once per process.

use crate::corpus::Language;
use std::collections::HashSet;
use std::sync::OnceLock;

const JAVA_KEYWORDS: &str = include_str!("../../resources/java_keywords.txt");
const PYTHON_KEYWORDS: &str = include_str!("../../resources/python_keywords.txt");

fn parse_list(text: &'static str) -> HashSet<&'static str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
}

/// The keyword set for `language`. Literal words (`true`, `None`, ...)
/// are included, mirroring what the weighted n-gram metric should boost.
pub fn keyword_set(language: Language) -> &'static HashSet<&'static str> {
    static JAVA: OnceLock<HashSet<&'static str>> = OnceLock::new();
    static PYTHON: OnceLock<HashSet<&'static str>> = OnceLock::new();
    match language {
        Language::Java => JAVA.get_or_init(|| parse_list(JAVA_KEYWORDS)),
        Language::Python => PYTHON.get_or_init(|| parse_list(PYTHON_KEYWORDS)),
    }
}
