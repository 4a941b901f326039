//! A deliberately naive second implementation of the similarity
//! metric, used as an oracle.
//!
//! Everything here favors obviousness over speed: linear scans
//! instead of hash maps, sorted-vector multiset intersection instead
//! of clipped counters, raw parser nodes instead of the library's
//! owned tree type, and a flat recursive walker for dataflow events.
//! The frozen conformance corpus is generated from these functions,
//! so a slip in either implementation shows up as a disagreement.

use kaser_core::corpus::Language;
use kaser_core::metrics::{TokenKind, TokenStream};
use tree_sitter::{Node, Tree};

/// BLEU-style score; `keyword_weight` switches on head-token
/// weighting.
pub fn oracle_ngram(
    hyp: &TokenStream,
    reference: &TokenStream,
    max_n: usize,
    keyword_weight: Option<f64>,
) -> f64 {
    if hyp.len() == 0 {
        return 0.0;
    }
    let hyp_lex: Vec<&str> = hyp.tokens.iter().map(|t| t.lexeme.as_str()).collect();
    let ref_lex: Vec<&str> = reference.tokens.iter().map(|t| t.lexeme.as_str()).collect();
    let mut product = 1.0;
    for n in 1..=max_n {
        let hyp_grams = windows(&hyp_lex, n);
        let ref_grams = windows(&ref_lex, n);
        let mut matched = 0.0;
        let mut total = 0.0;
        let mut seen: Vec<&[&str]> = Vec::new();
        for (i, gram) in hyp_grams.iter().enumerate() {
            if seen.iter().any(|s| s == gram) {
                continue;
            }
            seen.push(gram);
            let weight = match keyword_weight {
                Some(w) if hyp.tokens[i].kind == TokenKind::Keyword => w,
                _ => 1.0,
            };
            let in_hyp = hyp_grams.iter().filter(|g| g == &gram).count();
            let in_ref = ref_grams.iter().filter(|g| g == &gram).count();
            matched += weight * in_hyp.min(in_ref) as f64;
            total += weight * in_hyp as f64;
        }
        let p = if matched == 0.0 || total == 0.0 {
            if n == 1 {
                return 0.0;
            }
            (matched + 1.0) / (total + 1.0)
        } else {
            matched / total
        };
        product *= p;
    }
    let brevity = if hyp.len() > reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / hyp.len() as f64).exp()
    };
    brevity * product.powf(1.0 / max_n as f64)
}

fn windows<'a>(lexemes: &'a [&'a str], n: usize) -> Vec<&'a [&'a str]> {
    if lexemes.len() < n {
        Vec::new()
    } else {
        (0..=lexemes.len() - n).map(|i| &lexemes[i..i + n]).collect()
    }
}

pub fn ts_parse(code: &str, language: Language) -> Option<Tree> {
    let grammar: tree_sitter::Language = match language {
        Language::Java => tree_sitter_java::LANGUAGE.into(),
        Language::Python => tree_sitter_python::LANGUAGE.into(),
    };
    let mut parser = tree_sitter::Parser::new();
    parser.set_language(&grammar).unwrap();
    parser.parse(code, None)
}

fn sexp(node: Node<'_>) -> String {
    let mut inner = Vec::new();
    let mut cursor = node.walk();
    for child in node.named_children(&mut cursor) {
        inner.push(sexp(child));
    }
    if inner.is_empty() {
        node.kind().to_string()
    } else {
        format!("({} {})", node.kind(), inner.join(" "))
    }
}

fn all_subtrees(node: Node<'_>, out: &mut Vec<String>) {
    if node.is_named() {
        out.push(sexp(node));
    }
    let mut cursor = node.walk();
    for child in node.children(&mut cursor) {
        all_subtrees(child, out);
    }
}

/// Count of elements shared by two sorted multisets.
fn sorted_overlap<T: Ord>(a: &[T], b: &[T]) -> usize {
    let (mut i, mut j, mut shared) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    shared
}

pub fn oracle_syntax(hyp: &Tree, reference: &Tree) -> f64 {
    let mut hyp_subs = Vec::new();
    let mut ref_subs = Vec::new();
    all_subtrees(hyp.root_node(), &mut hyp_subs);
    all_subtrees(reference.root_node(), &mut ref_subs);
    if ref_subs.is_empty() {
        return 0.0;
    }
    hyp_subs.sort();
    ref_subs.sort();
    sorted_overlap(&hyp_subs, &ref_subs) as f64 / ref_subs.len() as f64
}

// ---------------------------------------------------------------- dataflow

#[derive(Default)]
struct Flow {
    /// (position, name) of every def/use event.
    events: Vec<(usize, String)>,
    /// (def position, use position, used name).
    edges: Vec<(usize, usize, String)>,
    /// (def position, defined name).
    defs: Vec<(usize, String)>,
}

struct FlowScan<'s> {
    src: &'s str,
    language: Language,
    flow: Flow,
}

fn node_text<'s>(node: Node<'_>, src: &'s str) -> &'s str {
    &src[node.byte_range()]
}

fn is_function(kind: &str) -> bool {
    matches!(
        kind,
        "method_declaration"
            | "constructor_declaration"
            | "lambda_expression"
            | "function_definition"
            | "lambda"
    )
}

fn children_of(node: Node<'_>) -> Vec<(Node<'_>, Option<&'static str>)> {
    let mut cursor = node.walk();
    let mut out = Vec::new();
    if cursor.goto_first_child() {
        loop {
            out.push((cursor.node(), cursor.field_name()));
            if !cursor.goto_next_sibling() {
                break;
            }
        }
    }
    out
}

impl FlowScan<'_> {
    fn define(&mut self, scope: &mut Vec<(String, usize)>, pos: usize, name: String) {
        self.flow.events.push((pos, name.clone()));
        self.flow.defs.push((pos, name.clone()));
        scope.push((name, pos));
    }

    fn use_at(&mut self, node: Node<'_>, scope: &mut Vec<(String, usize)>, targets: &[usize]) {
        let name = node_text(node, self.src).to_string();
        let pos = node.start_byte();
        self.flow.events.push((pos, name.clone()));
        // Most recent definition wins: scan the scope from the back.
        if let Some((_, d)) = scope.iter().rev().find(|(n, _)| *n == name) {
            self.flow.edges.push((*d, pos, name.clone()));
        }
        for &t in targets {
            self.flow.edges.push((t, pos, name.clone()));
        }
    }

    fn visit(&mut self, node: Node<'_>, scope: &mut Vec<(String, usize)>, targets: &[usize]) {
        let kind = node.kind();
        if is_function(kind) {
            return;
        }
        match kind {
            "import_declaration" | "import_statement" | "import_from_statement"
            | "future_import_statement" | "global_statement" | "nonlocal_statement"
            | "decorator" | "type" | "annotation" | "marker_annotation" => {}
            "identifier" => self.use_at(node, scope, targets),
            "variable_declarator" | "resource" => {
                let name = node.child_by_field_name("name");
                match name {
                    Some(n) if n.kind() == "identifier" => {
                        let pos = n.start_byte();
                        if let Some(value) = node.child_by_field_name("value") {
                            self.visit(value, scope, &[pos]);
                        }
                        self.define(scope, pos, node_text(n, self.src).to_string());
                    }
                    _ => self.visit_children(node, scope, &[], &[]),
                }
            }
            "assignment_expression" => {
                let left = node.child_by_field_name("left");
                match left {
                    Some(l) if l.kind() == "identifier" => {
                        let pos = l.start_byte();
                        let compound = node
                            .child_by_field_name("operator")
                            .map(|op| op.kind() != "=")
                            .unwrap_or(false);
                        if compound {
                            self.use_at(l, scope, &[pos]);
                        }
                        if let Some(r) = node.child_by_field_name("right") {
                            self.visit(r, scope, &[pos]);
                        }
                        self.define(scope, pos, node_text(l, self.src).to_string());
                    }
                    _ => {
                        if let Some(l) = left {
                            self.visit(l, scope, &[]);
                        }
                        if let Some(r) = node.child_by_field_name("right") {
                            self.visit(r, scope, &[]);
                        }
                    }
                }
            }
            "update_expression" => {
                let operand = children_of(node).into_iter().find(|(c, _)| c.is_named());
                match operand {
                    Some((op, _)) if op.kind() == "identifier" => {
                        self.use_at(op, scope, &[op.start_byte()]);
                        self.define(scope, op.start_byte(), node_text(op, self.src).to_string());
                    }
                    _ => self.visit_children(node, scope, &[], &[]),
                }
            }
            "formal_parameter" | "catch_formal_parameter" => {
                match node.child_by_field_name("name") {
                    Some(n) if n.kind() == "identifier" => {
                        self.define(scope, n.start_byte(), node_text(n, self.src).to_string());
                    }
                    _ => self.visit_children(node, scope, targets, &[]),
                }
            }
            "enhanced_for_statement" => self.loop_binding(node, scope, "name", "value"),
            "inferred_parameters" => {
                for (c, _) in children_of(node) {
                    if c.kind() == "identifier" {
                        self.define(scope, c.start_byte(), node_text(c, self.src).to_string());
                    }
                }
            }
            "method_invocation" => self.visit_children(node, scope, targets, &["name"]),
            "field_access" => self.visit_children(node, scope, targets, &["field"]),
            "assignment" => {
                let mut defs = Vec::new();
                if let Some(left) = node.child_by_field_name("left") {
                    self.targets_of(left, scope, &mut defs);
                }
                if let Some(right) = node.child_by_field_name("right") {
                    let positions: Vec<usize> = defs.iter().map(|(p, _)| *p).collect();
                    self.visit(right, scope, &positions);
                    for (pos, name) in defs {
                        self.define(scope, pos, name);
                    }
                }
            }
            "augmented_assignment" => {
                let left = node.child_by_field_name("left");
                match left {
                    Some(l) if l.kind() == "identifier" => {
                        let pos = l.start_byte();
                        self.use_at(l, scope, &[pos]);
                        if let Some(r) = node.child_by_field_name("right") {
                            self.visit(r, scope, &[pos]);
                        }
                        self.define(scope, pos, node_text(l, self.src).to_string());
                    }
                    _ => self.visit_children(node, scope, &[], &[]),
                }
            }
            "for_statement" if self.language == Language::Python => {
                self.loop_binding(node, scope, "left", "right")
            }
            "for_in_clause" => self.loop_binding(node, scope, "left", "right"),
            "named_expression" => {
                let name = node.child_by_field_name("name");
                match name {
                    Some(n) if n.kind() == "identifier" => {
                        let pos = n.start_byte();
                        if let Some(v) = node.child_by_field_name("value") {
                            self.visit(v, scope, &[pos]);
                        }
                        self.define(scope, pos, node_text(n, self.src).to_string());
                    }
                    _ => self.visit_children(node, scope, targets, &[]),
                }
            }
            "as_pattern" => {
                let alias = node
                    .child_by_field_name("alias")
                    .and_then(|a| first_ident(a));
                match alias {
                    Some(ident) => {
                        let pos = ident.start_byte();
                        for (c, f) in children_of(node) {
                            if f != Some("alias") {
                                self.visit(c, scope, &[pos]);
                            }
                        }
                        self.define(scope, pos, node_text(ident, self.src).to_string());
                    }
                    None => self.visit_children(node, scope, &[], &[]),
                }
            }
            "attribute" => self.visit_children(node, scope, targets, &["attribute"]),
            "call" => {
                for (c, f) in children_of(node) {
                    if !(f == Some("function") && c.kind() == "identifier") {
                        self.visit(c, scope, targets);
                    }
                }
            }
            "keyword_argument" => self.visit_children(node, scope, targets, &["name"]),
            "parameters" | "lambda_parameters" => {
                for (c, _) in children_of(node) {
                    if c.kind() == "identifier" {
                        self.define(scope, c.start_byte(), node_text(c, self.src).to_string());
                    } else {
                        self.visit(c, scope, targets);
                    }
                }
            }
            "default_parameter" | "typed_default_parameter" => {
                let name = node.child_by_field_name("name");
                match name {
                    Some(n) if n.kind() == "identifier" => {
                        let pos = n.start_byte();
                        if let Some(v) = node.child_by_field_name("value") {
                            self.visit(v, scope, &[pos]);
                        }
                        self.define(scope, pos, node_text(n, self.src).to_string());
                    }
                    _ => self.visit_children(node, scope, targets, &[]),
                }
            }
            "typed_parameter" | "list_splat_pattern" | "dictionary_splat_pattern" => {
                if let Some(ident) = first_ident(node) {
                    self.define(scope, ident.start_byte(), node_text(ident, self.src).to_string());
                }
            }
            "class_declaration" | "class_definition" | "interface_declaration"
            | "enum_declaration" => self.visit_children(node, scope, targets, &["name"]),
            _ => self.visit_children(node, scope, targets, &[]),
        }
    }

    fn visit_children(
        &mut self,
        node: Node<'_>,
        scope: &mut Vec<(String, usize)>,
        targets: &[usize],
        skip_fields: &[&str],
    ) {
        for (c, f) in children_of(node) {
            if f.map(|name| skip_fields.contains(&name)).unwrap_or(false) {
                continue;
            }
            self.visit(c, scope, targets);
        }
    }

    fn loop_binding(
        &mut self,
        node: Node<'_>,
        scope: &mut Vec<(String, usize)>,
        name_field: &str,
        src_field: &str,
    ) {
        let mut defs = Vec::new();
        if let Some(target) = node.child_by_field_name(name_field) {
            self.targets_of(target, scope, &mut defs);
        }
        let positions: Vec<usize> = defs.iter().map(|(p, _)| *p).collect();
        if let Some(src) = node.child_by_field_name(src_field) {
            self.visit(src, scope, &positions);
        }
        for (pos, name) in defs {
            self.define(scope, pos, name);
        }
        for (c, f) in children_of(node) {
            if f != Some(name_field) && f != Some(src_field) {
                self.visit(c, scope, &[]);
            }
        }
    }

    fn targets_of(
        &mut self,
        node: Node<'_>,
        scope: &mut Vec<(String, usize)>,
        defs: &mut Vec<(usize, String)>,
    ) {
        match node.kind() {
            "identifier" => defs.push((node.start_byte(), node_text(node, self.src).to_string())),
            "pattern_list" | "tuple_pattern" | "list_pattern" | "list_splat_pattern" => {
                for (c, _) in children_of(node) {
                    if c.is_named() {
                        self.targets_of(c, scope, defs);
                    }
                }
            }
            _ => self.visit(node, scope, &[]),
        }
    }
}

fn first_ident(node: Node<'_>) -> Option<Node<'_>> {
    if node.kind() == "identifier" {
        return Some(node);
    }
    let mut cursor = node.walk();
    let children: Vec<Node<'_>> = node.children(&mut cursor).collect();
    children.into_iter().find_map(first_ident)
}

fn collect_fn_nodes<'t>(node: Node<'t>, out: &mut Vec<Node<'t>>) {
    if is_function(node.kind()) {
        out.push(node);
    }
    let mut cursor = node.walk();
    let children: Vec<Node<'t>> = node.children(&mut cursor).collect();
    for c in children {
        collect_fn_nodes(c, out);
    }
}

/// All dataflow edges of `code` as (used variable, defined variable)
/// pairs over first-occurrence indices.
pub fn oracle_relations(tree: &Tree, code: &str, language: Language) -> Vec<(usize, usize)> {
    let mut scan = FlowScan {
        src: code,
        language,
        flow: Flow::default(),
    };
    let mut top_scope = Vec::new();
    scan.visit(tree.root_node(), &mut top_scope, &[]);
    let mut fns = Vec::new();
    collect_fn_nodes(tree.root_node(), &mut fns);
    for f in fns {
        let mut scope = Vec::new();
        for (c, field) in children_of(f) {
            match field {
                Some("parameters") => {
                    if c.kind() == "identifier" {
                        scan.define(&mut scope, c.start_byte(), node_text(c, code).to_string());
                    } else {
                        scan.visit(c, &mut scope, &[]);
                    }
                }
                Some("body") => scan.visit(c, &mut scope, &[]),
                _ => {}
            }
        }
    }
    let Flow {
        mut events,
        mut edges,
        defs,
    } = scan.flow;
    events.sort();
    let mut names: Vec<String> = Vec::new();
    for (_, name) in events {
        if !names.contains(&name) {
            names.push(name);
        }
    }
    let idx = |name: &str| names.iter().position(|n| n == name).unwrap();
    edges.sort();
    edges.dedup();
    edges
        .into_iter()
        .map(|(def_pos, _use_pos, used)| {
            let defined = defs.iter().find(|(p, _)| *p == def_pos).unwrap();
            (idx(&used), idx(&defined.1))
        })
        .collect()
}

pub fn oracle_dataflow(
    hyp_tree: &Tree,
    hyp: &str,
    ref_tree: &Tree,
    reference: &str,
    language: Language,
) -> f64 {
    let mut hyp_rel = oracle_relations(hyp_tree, hyp, language);
    let mut ref_rel = oracle_relations(ref_tree, reference, language);
    if ref_rel.is_empty() {
        return 1.0;
    }
    hyp_rel.sort_unstable();
    ref_rel.sort_unstable();
    sorted_overlap(&hyp_rel, &ref_rel) as f64 / ref_rel.len() as f64
}

/// Uniform-weight combined score, assembled from the naive parts.
pub fn oracle_combined(hyp: &str, reference: &str, language: Language) -> f64 {
    let hyp_tokens = kaser_core::metrics::tokenize(hyp, language);
    let ref_tokens = kaser_core::metrics::tokenize(reference, language);
    let ngram = oracle_ngram(&hyp_tokens, &ref_tokens, 4, None);
    let weighted = oracle_ngram(&hyp_tokens, &ref_tokens, 4, Some(5.0));
    let (syntax, dataflow) = match (ts_parse(hyp, language), ts_parse(reference, language)) {
        (Some(h), Some(r)) => (
            oracle_syntax(&h, &r),
            oracle_dataflow(&h, hyp, &r, reference, language),
        ),
        _ => (0.0, 0.0),
    };
    0.25 * ngram + 0.25 * weighted + 0.25 * syntax + 0.25 * dataflow
}
