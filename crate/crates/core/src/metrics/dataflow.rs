//! Dataflow-graph extraction and matching.
//!
//! The graph is a set of edges between identifier occurrences. Two
//! events produce edges:
//!
//! * a **use** of a variable with an earlier definition in the same
//!   scope links the most recent such definition to the use;
//! * a use appearing in the source expression of a definition (the
//!   right side of an assignment, a declarator initializer, a loop
//!   iterable) additionally links the *defined* position to the use —
//!   "x is computed from a".
//!
//! Scopes are function bodies plus the top level, each excluding
//! nested function subtrees; edges never cross scopes. Variable names
//! never appear in the finished graph: each distinct name is replaced
//! by its index in first-occurrence order over the whole source, so a
//! consistent renaming yields an identical graph. Identifiers that are
//! not variable references — member/attribute names, bare callee
//! names, keyword-argument names, imports, annotations — produce no
//! events.
//!
//! Matching projects every edge to the pair (variable used, variable
//! defined) and takes the clipped multiset overlap relative to the
//! reference; a reference with no edges matches anything perfectly,
//! so trivially stateless snippets are not penalized.
//!
//! Extraction is a single in-order pass per scope, so a use textually
//! before its definition (the body expression of a comprehension, say)
//! gets no incoming edge. That keeps the pass simple and affects both
//! sides of a comparison equally.

use super::parse::{SyntaxTree, TreeNode};
use crate::corpus::Language;
use std::collections::{BTreeMap, BTreeSet, HashMap};

/// One dataflow edge; positions are byte offsets of the two
/// identifier occurrences, `var` the normalized index of the variable
/// being used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct DataflowEdge {
    pub def_pos: usize,
    pub use_pos: usize,
    pub var: usize,
}

/// Dataflow graph of one source text.
#[derive(Debug, Clone, Default)]
pub struct DataflowGraph {
    /// Sorted, deduplicated edges.
    pub edges: Vec<DataflowEdge>,
    /// Definition position → normalized index of the variable defined
    /// there.
    defs: BTreeMap<usize, usize>,
}

impl DataflowGraph {
    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Each edge as (variable used, variable defined), sorted.
    pub fn relations(&self) -> Vec<(usize, usize)> {
        let mut rel: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|e| (e.var, self.defs[&e.def_pos]))
            .collect();
        rel.sort_unstable();
        rel
    }

    fn relation_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for rel in self.relations() {
            *counts.entry(rel).or_insert(0) += 1;
        }
        counts
    }
}

/// Clipped fraction of reference edges matched by the hypothesis,
/// comparing edges by their (used, defined) variable pairs.
pub fn dataflow_match(hyp: &DataflowGraph, reference: &DataflowGraph) -> f64 {
    let ref_counts = reference.relation_counts();
    let total: usize = ref_counts.values().sum();
    if total == 0 {
        return 1.0;
    }
    let hyp_counts = hyp.relation_counts();
    let matched: usize = ref_counts
        .iter()
        .map(|(rel, &count)| count.min(hyp_counts.get(rel).copied().unwrap_or(0)))
        .sum();
    matched as f64 / total as f64
}

/// Extracts the dataflow graph of a parsed source.
pub fn extract_dataflow(tree: &SyntaxTree, source: &str, language: Language) -> DataflowGraph {
    let mut ex = Extractor {
        source,
        language,
        events: Vec::new(),
        raw_edges: Vec::new(),
        raw_defs: BTreeMap::new(),
    };
    let mut top = Scope::default();
    ex.walk(&tree.root, &mut top, &[]);
    let mut functions = Vec::new();
    collect_functions(&tree.root, &mut functions);
    for f in functions {
        ex.analyze_function(f);
    }
    ex.finish()
}

fn is_function_kind(kind: &str) -> bool {
    matches!(
        kind,
        "method_declaration"
            | "constructor_declaration"
            | "lambda_expression"
            | "function_definition"
            | "lambda"
    )
}

fn collect_functions<'t>(node: &'t TreeNode, out: &mut Vec<&'t TreeNode>) {
    if is_function_kind(&node.kind) {
        out.push(node);
    }
    for child in &node.children {
        collect_functions(child, out);
    }
}

fn field<'t>(node: &'t TreeNode, name: &str) -> Option<&'t TreeNode> {
    node.children
        .iter()
        .find(|c| c.field.as_deref() == Some(name))
}

fn first_identifier(node: &TreeNode) -> Option<&TreeNode> {
    if node.kind == "identifier" {
        return Some(node);
    }
    node.children.iter().find_map(first_identifier)
}

#[derive(Default)]
struct Scope {
    last_def: HashMap<String, usize>,
}

struct Extractor<'a> {
    source: &'a str,
    language: Language,
    /// Every def/use event as (position, name); the basis for
    /// first-occurrence normalization.
    events: Vec<(usize, String)>,
    /// (def position, use position, used variable name).
    raw_edges: Vec<(usize, usize, String)>,
    raw_defs: BTreeMap<usize, String>,
}

impl<'a> Extractor<'a> {
    fn analyze_function(&mut self, f: &TreeNode) {
        let mut scope = Scope::default();
        for child in &f.children {
            match child.field.as_deref() {
                Some("parameters") => {
                    if child.kind == "identifier" {
                        // Single-parameter lambda without parentheses.
                        self.define(&mut scope, child.start, self.text(child));
                    } else {
                        self.walk(child, &mut scope, &[]);
                    }
                }
                Some("body") => self.walk(child, &mut scope, &[]),
                _ => {}
            }
        }
    }

    fn text(&self, node: &TreeNode) -> String {
        node.text(self.source).to_string()
    }

    fn define(&mut self, scope: &mut Scope, pos: usize, name: String) {
        self.events.push((pos, name.clone()));
        self.raw_defs.insert(pos, name.clone());
        scope.last_def.insert(name, pos);
    }

    fn use_of(&mut self, node: &TreeNode, scope: &mut Scope, targets: &[usize]) {
        let name = self.text(node);
        self.events.push((node.start, name.clone()));
        if let Some(&d) = scope.last_def.get(&name) {
            self.raw_edges.push((d, node.start, name.clone()));
        }
        for &t in targets {
            self.raw_edges.push((t, node.start, name.clone()));
        }
    }

    /// Walks `node` inside one scope. `targets` holds definition
    /// positions whose source expression we are currently inside.
    fn walk(&mut self, node: &TreeNode, scope: &mut Scope, targets: &[usize]) {
        match node.kind.as_str() {
            k if is_function_kind(k) => {}
            // Subtrees that bind or mention names without using
            // variables.
            "import_declaration" | "import_statement" | "import_from_statement"
            | "future_import_statement" | "global_statement" | "nonlocal_statement"
            | "decorator" | "type" | "annotation" | "marker_annotation" => {}
            "identifier" => self.use_of(node, scope, targets),
            "variable_declarator" | "resource" => self.declarator(node, scope),
            "assignment_expression" => self.java_assignment(node, scope),
            "update_expression" => self.java_update(node, scope),
            "formal_parameter" | "catch_formal_parameter" => {
                if let Some(name) = field(node, "name") {
                    if name.kind == "identifier" {
                        self.define(scope, name.start, self.text(name));
                        return;
                    }
                }
                self.walk_children(node, scope, targets, &[]);
            }
            "enhanced_for_statement" => self.iteration(node, scope, "name", "value"),
            "inferred_parameters" => {
                for c in &node.children {
                    if c.kind == "identifier" {
                        self.define(scope, c.start, self.text(c));
                    }
                }
            }
            "method_invocation" => self.walk_children(node, scope, targets, &["name"]),
            "field_access" => self.walk_children(node, scope, targets, &["field"]),
            "assignment" => self.python_assignment(node, scope),
            "augmented_assignment" => self.python_augmented(node, scope),
            "for_statement" if self.language == Language::Python => {
                self.iteration(node, scope, "left", "right")
            }
            "for_in_clause" => self.iteration(node, scope, "left", "right"),
            "named_expression" => {
                if let Some(name) = field(node, "name") {
                    if name.kind == "identifier" {
                        let pos = name.start;
                        if let Some(value) = field(node, "value") {
                            self.walk(value, scope, &[pos]);
                        }
                        self.define(scope, pos, self.text(name));
                        return;
                    }
                }
                self.walk_children(node, scope, targets, &[]);
            }
            "as_pattern" => self.as_pattern(node, scope),
            "attribute" => self.walk_children(node, scope, targets, &["attribute"]),
            "call" => {
                for c in &node.children {
                    let bare_callee =
                        c.field.as_deref() == Some("function") && c.kind == "identifier";
                    if !bare_callee {
                        self.walk(c, scope, targets);
                    }
                }
            }
            "keyword_argument" => self.walk_children(node, scope, targets, &["name"]),
            "parameters" | "lambda_parameters" => {
                for c in &node.children {
                    if c.kind == "identifier" {
                        self.define(scope, c.start, self.text(c));
                    } else {
                        self.walk(c, scope, targets);
                    }
                }
            }
            "default_parameter" | "typed_default_parameter" => {
                if let Some(name) = field(node, "name") {
                    if name.kind == "identifier" {
                        let pos = name.start;
                        if let Some(value) = field(node, "value") {
                            self.walk(value, scope, &[pos]);
                        }
                        self.define(scope, pos, self.text(name));
                        return;
                    }
                }
                self.walk_children(node, scope, targets, &[]);
            }
            "typed_parameter" | "list_splat_pattern" | "dictionary_splat_pattern" => {
                if let Some(ident) = first_identifier(node) {
                    self.define(scope, ident.start, self.text(ident));
                }
            }
            "class_declaration" | "class_definition" | "interface_declaration"
            | "enum_declaration" => self.walk_children(node, scope, targets, &["name"]),
            _ => self.walk_children(node, scope, targets, &[]),
        }
    }

    fn walk_children(
        &mut self,
        node: &TreeNode,
        scope: &mut Scope,
        targets: &[usize],
        skip_fields: &[&str],
    ) {
        for c in &node.children {
            let skipped = c
                .field
                .as_deref()
                .is_some_and(|f| skip_fields.contains(&f));
            if !skipped {
                self.walk(c, scope, targets);
            }
        }
    }

    /// `T name = value` declarators and try-with-resources bindings.
    fn declarator(&mut self, node: &TreeNode, scope: &mut Scope) {
        let Some(name) = field(node, "name") else {
            self.walk_children(node, scope, &[], &[]);
            return;
        };
        if name.kind != "identifier" {
            self.walk_children(node, scope, &[], &[]);
            return;
        }
        let pos = name.start;
        if let Some(value) = field(node, "value") {
            self.walk(value, scope, &[pos]);
        }
        self.define(scope, pos, self.text(name));
    }

    fn java_assignment(&mut self, node: &TreeNode, scope: &mut Scope) {
        let left = field(node, "left");
        let right = field(node, "right");
        match left {
            Some(l) if l.kind == "identifier" => {
                let pos = l.start;
                let compound = field(node, "operator").is_some_and(|op| op.kind != "=");
                if compound {
                    // The old value feeds the new one.
                    self.use_of(l, scope, &[pos]);
                }
                if let Some(r) = right {
                    self.walk(r, scope, &[pos]);
                }
                self.define(scope, pos, self.text(l));
            }
            _ => {
                // Assignment through a field or element: uses only.
                if let Some(l) = left {
                    self.walk(l, scope, &[]);
                }
                if let Some(r) = right {
                    self.walk(r, scope, &[]);
                }
            }
        }
    }

    fn java_update(&mut self, node: &TreeNode, scope: &mut Scope) {
        let operand = node.children.iter().find(|c| c.named);
        match operand {
            Some(op) if op.kind == "identifier" => {
                self.use_of(op, scope, &[op.start]);
                self.define(scope, op.start, self.text(op));
            }
            _ => self.walk_children(node, scope, &[], &[]),
        }
    }

    fn python_assignment(&mut self, node: &TreeNode, scope: &mut Scope) {
        let mut defs = Vec::new();
        if let Some(left) = field(node, "left") {
            self.collect_targets(left, scope, &mut defs);
        }
        let Some(right) = field(node, "right") else {
            // Bare annotation (`x: int`) binds nothing.
            return;
        };
        let positions: Vec<usize> = defs.iter().map(|(p, _)| *p).collect();
        self.walk(right, scope, &positions);
        for (pos, name) in defs {
            self.define(scope, pos, name);
        }
    }

    fn python_augmented(&mut self, node: &TreeNode, scope: &mut Scope) {
        let left = field(node, "left");
        match left {
            Some(l) if l.kind == "identifier" => {
                let pos = l.start;
                self.use_of(l, scope, &[pos]);
                if let Some(r) = field(node, "right") {
                    self.walk(r, scope, &[pos]);
                }
                self.define(scope, pos, self.text(l));
            }
            _ => self.walk_children(node, scope, &[], &[]),
        }
    }

    /// Loop binding: `left`/`name` defined from the `right`/`value`
    /// iterable; the rest of the node walks normally afterwards.
    fn iteration(&mut self, node: &TreeNode, scope: &mut Scope, name_field: &str, src_field: &str) {
        let mut defs = Vec::new();
        if let Some(target) = field(node, name_field) {
            self.collect_targets(target, scope, &mut defs);
        }
        let positions: Vec<usize> = defs.iter().map(|(p, _)| *p).collect();
        if let Some(src) = field(node, src_field) {
            self.walk(src, scope, &positions);
        }
        for (pos, name) in defs {
            self.define(scope, pos, name);
        }
        for c in &node.children {
            let f = c.field.as_deref();
            if f != Some(name_field) && f != Some(src_field) {
                self.walk(c, scope, &[]);
            }
        }
    }

    fn as_pattern(&mut self, node: &TreeNode, scope: &mut Scope) {
        let alias_ident = field(node, "alias").and_then(first_identifier);
        let Some(alias) = alias_ident else {
            self.walk_children(node, scope, &[], &[]);
            return;
        };
        let pos = alias.start;
        let name = self.text(alias);
        for c in &node.children {
            if c.field.as_deref() != Some("alias") {
                self.walk(c, scope, &[pos]);
            }
        }
        self.define(scope, pos, name);
    }

    /// Splits an assignment/loop target into definition sites,
    /// walking any non-binding parts (subscripts, attributes) as
    /// plain uses.
    fn collect_targets(
        &mut self,
        node: &TreeNode,
        scope: &mut Scope,
        defs: &mut Vec<(usize, String)>,
    ) {
        match node.kind.as_str() {
            "identifier" => defs.push((node.start, self.text(node))),
            "pattern_list" | "tuple_pattern" | "list_pattern" | "list_splat_pattern" => {
                for c in &node.children {
                    if c.named {
                        self.collect_targets(c, scope, defs);
                    }
                }
            }
            _ => self.walk(node, scope, &[]),
        }
    }

    fn finish(self) -> DataflowGraph {
        let Extractor {
            mut events,
            raw_edges,
            raw_defs,
            ..
        } = self;
        events.sort();
        let mut index: HashMap<String, usize> = HashMap::new();
        for (_, name) in events {
            let next = index.len();
            index.entry(name).or_insert(next);
        }
        let edges: BTreeSet<DataflowEdge> = raw_edges
            .into_iter()
            .map(|(def_pos, use_pos, name)| DataflowEdge {
                def_pos,
                use_pos,
                var: index[&name],
            })
            .collect();
        DataflowGraph {
            edges: edges.into_iter().collect(),
            defs: raw_defs
                .into_iter()
                .map(|(pos, name)| (pos, index[&name]))
                .collect(),
        }
    }
}
