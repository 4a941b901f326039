//! Parsing front-end: turns source text into an owned syntax tree.
//!
//! The grammar-backed parser is error-recovering, so syntactically
//! broken student code still yields a tree (with `ERROR` nodes in
//! place of the unparseable stretches). A `None` from [`parse`] means
//! the parser gave up entirely, which callers treat as the degenerate
//! "unparseable" case rather than an error.
//!
//! The owned [`TreeNode`] keeps every node — named and anonymous —
//! because downstream consumers need both: subtree matching works on
//! named nodes, while dataflow extraction reads anonymous operator
//! tokens to classify assignments.

use crate::corpus::Language;
use tree_sitter::{Node, Parser};

/// One node of an owned parse tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    /// Grammar kind label, e.g. `identifier` or `while_statement`.
    pub kind: String,
    /// Whether the grammar marks this node as named (vs. an anonymous
    /// literal token such as `;` or `+=`).
    pub named: bool,
    /// Byte span into the original source.
    pub start: usize,
    pub end: usize,
    /// Field name relating this node to its parent, when the grammar
    /// declares one (e.g. `left` under an assignment).
    pub field: Option<String>,
    pub children: Vec<TreeNode>,
}

impl TreeNode {
    /// Builds a detached node for tests and oracles; spans are empty.
    pub fn synthetic(kind: &str, children: Vec<TreeNode>) -> TreeNode {
        TreeNode {
            kind: kind.to_string(),
            named: true,
            start: 0,
            end: 0,
            field: None,
            children,
        }
    }

    /// The source text this node spans.
    pub fn text<'a>(&self, source: &'a str) -> &'a str {
        &source[self.start..self.end]
    }

    /// Number of nodes in this subtree, itself included.
    pub fn size(&self) -> usize {
        1 + self.children.iter().map(TreeNode::size).sum::<usize>()
    }
}

/// An owned parse of one source text.
#[derive(Debug, Clone)]
pub struct SyntaxTree {
    pub root: TreeNode,
    /// True when recovery kicked in somewhere (the tree contains error
    /// or missing nodes). Recovered trees are still scored normally.
    pub had_error: bool,
}

/// Parses `code`, recovering from syntax errors where possible.
pub fn parse(code: &str, language: Language) -> Option<SyntaxTree> {
    let mut parser = Parser::new();
    let grammar: tree_sitter::Language = match language {
        Language::Java => tree_sitter_java::LANGUAGE.into(),
        Language::Python => tree_sitter_python::LANGUAGE.into(),
    };
    parser
        .set_language(&grammar)
        .expect("bundled grammar is compatible with the parser library");
    let tree = parser.parse(code, None)?;
    Some(SyntaxTree {
        had_error: tree.root_node().has_error(),
        root: convert(tree.root_node(), None),
    })
}

fn convert(node: Node<'_>, field: Option<String>) -> TreeNode {
    let mut children = Vec::with_capacity(node.child_count());
    let mut cursor = node.walk();
    if cursor.goto_first_child() {
        loop {
            let child_field = cursor.field_name().map(str::to_string);
            children.push(convert(cursor.node(), child_field));
            if !cursor.goto_next_sibling() {
                break;
            }
        }
    }
    TreeNode {
        kind: node.kind().to_string(),
        named: node.is_named(),
        start: node.start_byte(),
        end: node.end_byte(),
        field,
        children,
    }
}
