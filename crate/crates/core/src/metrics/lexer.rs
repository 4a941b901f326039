//! Error-tolerant lexers for Java and Python source text.
//!
//! Tokenization is total: every input produces a stream, and a character
//! that fits no rule becomes a single-character punctuation token.
//! Comments and insignificant whitespace are dropped. Python layout is
//! preserved through synthetic structure tokens (`<newline>`, `<indent>`,
//! `<dedent>`) that mirror the reference tokenizer's NEWLINE / INDENT /
//! DEDENT stream, so two snippets that differ only in block structure
//! produce different streams.
//!
//! The streams normalize the source rather than reproduce it: joining
//! lexemes with single spaces and rendering the structure tokens as
//! layout recovers an equivalent program, which is the losslessness the
//! downstream n-gram metrics rely on.

use crate::corpus::Language;
use crate::metrics::keywords::keyword_set;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Keyword,
    Identifier,
    Literal,
    Operator,
    Punct,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub lexeme: String,
    pub kind: TokenKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub tokens: Vec<Token>,
    pub language: Language,
}

impl TokenStream {
    pub fn lexemes(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.lexeme.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Lexeme of the synthetic end-of-logical-line token (Python).
pub const NEWLINE: &str = "<newline>";
/// Lexeme of the synthetic block-open token (Python).
pub const INDENT: &str = "<indent>";
/// Lexeme of the synthetic block-close token (Python).
pub const DEDENT: &str = "<dedent>";

/// Tokenizes `code` under the lexical grammar of `language`. Total: never
/// fails, regardless of how broken the input is.
pub fn tokenize(code: &str, language: Language) -> TokenStream {
    let tokens = match language {
        Language::Java => JavaLexer::new(code).run(),
        Language::Python => PythonLexer::new(code).run(),
    };
    TokenStream { tokens, language }
}

fn push(tokens: &mut Vec<Token>, lexeme: impl Into<String>, kind: TokenKind) {
    tokens.push(Token {
        lexeme: lexeme.into(),
        kind,
    });
}

fn is_ident_start(c: char, language: Language) -> bool {
    c.is_ascii_alphabetic() || c == '_' || (language == Language::Java && c == '$')
}

fn is_ident_continue(c: char, language: Language) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || (language == Language::Java && c == '$')
}

/// Multi-character operators, longest first so maximal munch is a linear
/// scan over this table.
const JAVA_OPERATORS: &[&str] = &[
    ">>>=", ">>>", "<<=", ">>=", "...", "->", "::", "++", "--", "==", "!=", "<=", ">=", "&&",
    "||", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<", ">>", "+", "-", "*", "/", "%",
    "=", "<", ">", "!", "&", "|", "^", "~", "?", ":",
];

struct JavaLexer {
    chars: Vec<char>,
    i: usize,
}

impl JavaLexer {
    fn new(code: &str) -> Self {
        JavaLexer {
            chars: code.chars().collect(),
            i: 0,
        }
    }

    fn peek(&self, ahead: usize) -> Option<char> {
        self.chars.get(self.i + ahead).copied()
    }

    fn run(mut self) -> Vec<Token> {
        let keywords = keyword_set(Language::Java);
        let mut tokens = Vec::new();
        while let Some(c) = self.peek(0) {
            if c.is_whitespace() {
                self.i += 1;
                continue;
            }
            if c == '/' && self.peek(1) == Some('/') {
                while let Some(c) = self.peek(0) {
                    if c == '\n' {
                        break;
                    }
                    self.i += 1;
                }
                continue;
            }
            if c == '/' && self.peek(1) == Some('*') {
                self.i += 2;
                while let Some(c) = self.peek(0) {
                    if c == '*' && self.peek(1) == Some('/') {
                        self.i += 2;
                        break;
                    }
                    self.i += 1;
                }
                continue;
            }
            if is_ident_start(c, Language::Java) {
                let start = self.i;
                while self
                    .peek(0)
                    .is_some_and(|c| is_ident_continue(c, Language::Java))
                {
                    self.i += 1;
                }
                let word: String = self.chars[start..self.i].iter().collect();
                let kind = if keywords.contains(word.as_str()) {
                    TokenKind::Keyword
                } else {
                    TokenKind::Identifier
                };
                push(&mut tokens, word, kind);
                continue;
            }
            if c.is_ascii_digit() || (c == '.' && self.peek(1).is_some_and(|d| d.is_ascii_digit()))
            {
                let lit = self.lex_number();
                push(&mut tokens, lit, TokenKind::Literal);
                continue;
            }
            if c == '"' || c == '\'' {
                let lit = self.lex_string(c);
                push(&mut tokens, lit, TokenKind::Literal);
                continue;
            }
            if let Some(op) = match_operator(&self.chars[self.i..], JAVA_OPERATORS) {
                self.i += op.chars().count();
                push(&mut tokens, op, TokenKind::Operator);
                continue;
            }
            // Known punctuation and anything unrecognized both land here
            // as single-character punct tokens; the latter keeps the
            // lexer total on arbitrary input.
            push(&mut tokens, c.to_string(), TokenKind::Punct);
            self.i += 1;
        }
        tokens
    }

    fn lex_number(&mut self) -> String {
        let start = self.i;
        if self.peek(0) == Some('0') && matches!(self.peek(1), Some('x') | Some('X')) {
            self.i += 2;
            while self
                .peek(0)
                .is_some_and(|c| c.is_ascii_hexdigit() || c == '_')
            {
                self.i += 1;
            }
        } else {
            while self.peek(0).is_some_and(|c| c.is_ascii_digit() || c == '_') {
                self.i += 1;
            }
            if self.peek(0) == Some('.') && self.peek(1).is_some_and(|c| c.is_ascii_digit()) {
                self.i += 1;
                while self.peek(0).is_some_and(|c| c.is_ascii_digit() || c == '_') {
                    self.i += 1;
                }
            }
            if matches!(self.peek(0), Some('e') | Some('E'))
                && (self.peek(1).is_some_and(|c| c.is_ascii_digit())
                    || (matches!(self.peek(1), Some('+') | Some('-'))
                        && self.peek(2).is_some_and(|c| c.is_ascii_digit())))
            {
                self.i += 2;
                while self.peek(0).is_some_and(|c| c.is_ascii_digit()) {
                    self.i += 1;
                }
            }
        }
        if matches!(
            self.peek(0),
            Some('l') | Some('L') | Some('f') | Some('F') | Some('d') | Some('D')
        ) {
            self.i += 1;
        }
        self.chars[start..self.i].iter().collect()
    }

    /// Consumes a string or char literal. An unterminated literal stops at
    /// end of line so one missing quote cannot swallow the rest of the
    /// file.
    fn lex_string(&mut self, quote: char) -> String {
        let start = self.i;
        self.i += 1;
        while let Some(c) = self.peek(0) {
            if c == '\\' {
                self.i += 2;
                continue;
            }
            if c == quote {
                self.i += 1;
                break;
            }
            if c == '\n' {
                break;
            }
            self.i += 1;
        }
        self.chars[start..self.i.min(self.chars.len())].iter().collect()
    }
}

const PYTHON_OPERATORS: &[&str] = &[
    "**=", "//=", ">>=", "<<=", "**", "//", "<<", ">>", "<=", ">=", "==", "!=", "->", ":=",
    "+=", "-=", "*=", "/=", "%=", "@=", "&=", "|=", "^=", "+", "-", "*", "/", "%", "@", "&",
    "|", "^", "~", "<", ">", "=",
];

fn match_operator(rest: &[char], table: &'static [&'static str]) -> Option<&'static str> {
    table
        .iter()
        .find(|op| rest.len() >= op.len() && op.chars().zip(rest).all(|(a, &b)| a == b))
        .copied()
}

struct PythonLexer {
    chars: Vec<char>,
    i: usize,
}

impl PythonLexer {
    fn new(code: &str) -> Self {
        PythonLexer {
            chars: code.chars().collect(),
            i: 0,
        }
    }

    fn peek(&self, ahead: usize) -> Option<char> {
        self.chars.get(self.i + ahead).copied()
    }

    fn run(mut self) -> Vec<Token> {
        let keywords = keyword_set(Language::Python);
        let mut tokens = Vec::new();
        let mut indents: Vec<usize> = vec![0];
        let mut depth = 0usize;
        let mut line_has_tokens = false;
        let mut at_line_start = true;

        while self.i < self.chars.len() {
            if at_line_start && depth == 0 {
                let col = self.measure_indent();
                match self.peek(0) {
                    // Blank or comment-only lines produce no tokens and do
                    // not affect the indentation stack.
                    None => break,
                    Some('\n') => {
                        self.i += 1;
                        continue;
                    }
                    Some('#') => {
                        self.skip_to_eol();
                        continue;
                    }
                    Some('\r') => {
                        self.i += 1;
                        continue;
                    }
                    _ => {}
                }
                if col > *indents.last().unwrap() {
                    indents.push(col);
                    push(&mut tokens, INDENT, TokenKind::Punct);
                } else {
                    while col < *indents.last().unwrap() {
                        indents.pop();
                        push(&mut tokens, DEDENT, TokenKind::Punct);
                    }
                    // Recovery for inconsistent dedents: re-open a block at
                    // the observed column instead of failing.
                    if col > *indents.last().unwrap() {
                        indents.push(col);
                        push(&mut tokens, INDENT, TokenKind::Punct);
                    }
                }
                at_line_start = false;
                line_has_tokens = false;
                continue;
            }

            let Some(c) = self.peek(0) else { break };
            match c {
                '\n' => {
                    self.i += 1;
                    if depth == 0 {
                        if line_has_tokens {
                            push(&mut tokens, NEWLINE, TokenKind::Punct);
                            line_has_tokens = false;
                        }
                        at_line_start = true;
                    }
                }
                '\r' => self.i += 1,
                ' ' | '\t' => self.i += 1,
                '#' => self.skip_to_eol(),
                '\\' if self.peek(1) == Some('\n') => self.i += 2,
                _ if is_ident_start(c, Language::Python) => {
                    if let Some(lit) = self.try_prefixed_string() {
                        push(&mut tokens, lit, TokenKind::Literal);
                    } else {
                        let start = self.i;
                        while self
                            .peek(0)
                            .is_some_and(|c| is_ident_continue(c, Language::Python))
                        {
                            self.i += 1;
                        }
                        let word: String = self.chars[start..self.i].iter().collect();
                        let kind = if keywords.contains(word.as_str()) {
                            TokenKind::Keyword
                        } else {
                            TokenKind::Identifier
                        };
                        push(&mut tokens, word, kind);
                    }
                    line_has_tokens = true;
                }
                _ if c.is_ascii_digit()
                    || (c == '.' && self.peek(1).is_some_and(|d| d.is_ascii_digit())) =>
                {
                    let lit = self.lex_number();
                    push(&mut tokens, lit, TokenKind::Literal);
                    line_has_tokens = true;
                }
                '"' | '\'' => {
                    let lit = self.lex_string(false);
                    push(&mut tokens, lit, TokenKind::Literal);
                    line_has_tokens = true;
                }
                _ => {
                    if let Some(op) = match_operator(&self.chars[self.i..], PYTHON_OPERATORS) {
                        self.i += op.chars().count();
                        push(&mut tokens, op, TokenKind::Operator);
                    } else {
                        match c {
                            '(' | '[' | '{' => depth += 1,
                            ')' | ']' | '}' => depth = depth.saturating_sub(1),
                            _ => {}
                        }
                        push(&mut tokens, c.to_string(), TokenKind::Punct);
                        self.i += 1;
                    }
                    line_has_tokens = true;
                }
            }
        }

        if line_has_tokens {
            push(&mut tokens, NEWLINE, TokenKind::Punct);
        }
        while indents.len() > 1 {
            indents.pop();
            push(&mut tokens, DEDENT, TokenKind::Punct);
        }
        tokens
    }

    /// Columns advance by one per space; a tab advances to the next
    /// multiple of 8, matching the reference tokenizer.
    fn measure_indent(&mut self) -> usize {
        let mut col = 0;
        loop {
            match self.peek(0) {
                Some(' ') => {
                    col += 1;
                    self.i += 1;
                }
                Some('\t') => {
                    col = (col / 8 + 1) * 8;
                    self.i += 1;
                }
                _ => break,
            }
        }
        col
    }

    fn skip_to_eol(&mut self) {
        while let Some(c) = self.peek(0) {
            self.i += 1;
            if c == '\n' {
                break;
            }
        }
    }

    fn try_prefixed_string(&mut self) -> Option<String> {
        let mut j = 0;
        while j < 2 {
            match self.peek(j) {
                Some(c) if "rbufRBUF".contains(c) => j += 1,
                _ => break,
            }
        }
        if j == 0 || !matches!(self.peek(j), Some('"') | Some('\'')) {
            return None;
        }
        let raw = (0..j).any(|k| matches!(self.peek(k), Some('r') | Some('R')));
        let start = self.i;
        self.i += j;
        let body = self.lex_string(raw);
        let mut prefix: String = self.chars[start..start + j].iter().collect();
        prefix.push_str(&body);
        Some(prefix)
    }

    fn lex_number(&mut self) -> String {
        let start = self.i;
        if self.peek(0) == Some('0')
            && matches!(
                self.peek(1),
                Some('x') | Some('X') | Some('o') | Some('O') | Some('b') | Some('B')
            )
        {
            self.i += 2;
            while self
                .peek(0)
                .is_some_and(|c| c.is_ascii_alphanumeric() || c == '_')
            {
                self.i += 1;
            }
            return self.chars[start..self.i].iter().collect();
        }
        while self.peek(0).is_some_and(|c| c.is_ascii_digit() || c == '_') {
            self.i += 1;
        }
        if self.peek(0) == Some('.') && self.peek(1).is_some_and(|c| c.is_ascii_digit()) {
            self.i += 1;
            while self.peek(0).is_some_and(|c| c.is_ascii_digit() || c == '_') {
                self.i += 1;
            }
        } else if self.peek(0) == Some('.') && start < self.i {
            // Trailing-dot floats ("3.") are accepted when not followed by
            // an identifier character, so "3.x" stays "3" "." "x".
            if !self
                .peek(1)
                .is_some_and(|c| is_ident_continue(c, Language::Python) || c == '.')
            {
                self.i += 1;
            }
        }
        if matches!(self.peek(0), Some('e') | Some('E'))
            && (self.peek(1).is_some_and(|c| c.is_ascii_digit())
                || (matches!(self.peek(1), Some('+') | Some('-'))
                    && self.peek(2).is_some_and(|c| c.is_ascii_digit())))
        {
            self.i += 2;
            while self.peek(0).is_some_and(|c| c.is_ascii_digit()) {
                self.i += 1;
            }
        }
        if matches!(self.peek(0), Some('j') | Some('J')) {
            self.i += 1;
        }
        self.chars[start..self.i].iter().collect()
    }

    /// Single- or triple-quoted string starting at the current quote. An
    /// unterminated single-quoted string stops at end of line; an
    /// unterminated triple-quoted string runs to end of input.
    fn lex_string(&mut self, raw: bool) -> String {
        let start = self.i;
        let quote = self.peek(0).unwrap();
        let triple = self.peek(1) == Some(quote) && self.peek(2) == Some(quote);
        self.i += if triple { 3 } else { 1 };
        while let Some(c) = self.peek(0) {
            if !raw && c == '\\' {
                self.i += 2;
                continue;
            }
            if triple {
                if c == quote && self.peek(1) == Some(quote) && self.peek(2) == Some(quote) {
                    self.i += 3;
                    break;
                }
            } else {
                if c == quote {
                    self.i += 1;
                    break;
                }
                if c == '\n' {
                    break;
                }
            }
            self.i += 1;
        }
        self.chars[start..self.i.min(self.chars.len())].iter().collect()
    }
}
