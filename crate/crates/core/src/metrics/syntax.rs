//! Subtree-overlap scoring between two parse trees.
//!
//! Every named node roots one subtree, single-node leaves included.
//! A subtree is serialized structurally from kind labels alone — a
//! leaf as `kind`, an internal node as `(kind child ...)` over its
//! named children — so renaming identifiers or changing literals never
//! affects the score, but moving or reshaping statements does. The
//! score is the clipped fraction of reference subtrees that also occur
//! in the hypothesis, counting multiplicity.

use super::parse::{SyntaxTree, TreeNode};
use std::collections::HashMap;

/// Serializes the subtree rooted at `node` by kind labels.
pub fn serialize_subtree(node: &TreeNode) -> String {
    let mut parts = Vec::new();
    for child in &node.children {
        collect_named(child, &mut parts);
    }
    if parts.is_empty() {
        node.kind.clone()
    } else {
        format!("({} {})", node.kind, parts.join(" "))
    }
}

fn collect_named(node: &TreeNode, out: &mut Vec<String>) {
    if node.named {
        out.push(serialize_subtree(node));
    } else {
        // Anonymous tokens are dropped; any named descendants they
        // might carry flatten into the grandparent.
        for child in &node.children {
            collect_named(child, out);
        }
    }
}

/// Multiset of serialized subtrees over all named nodes under `root`.
pub fn enumerate_subtrees(root: &TreeNode) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    walk(root, &mut out);
    out
}

fn walk(node: &TreeNode, out: &mut HashMap<String, usize>) {
    if node.named {
        *out.entry(serialize_subtree(node)).or_insert(0) += 1;
    }
    for child in &node.children {
        walk(child, out);
    }
}

/// Clipped fraction of reference subtrees present in the hypothesis.
pub fn subtree_match(hyp: &TreeNode, reference: &TreeNode) -> f64 {
    let hyp_counts = enumerate_subtrees(hyp);
    let ref_counts = enumerate_subtrees(reference);
    let total: usize = ref_counts.values().sum();
    if total == 0 {
        // Unreachable for parsed sources (the root node is named), but
        // synthetic anonymous-only trees land here.
        return 0.0;
    }
    let matched: usize = ref_counts
        .iter()
        .map(|(s, &count)| count.min(hyp_counts.get(s).copied().unwrap_or(0)))
        .sum();
    matched as f64 / total as f64
}

/// Subtree overlap between two parses.
pub fn syntax_match(hyp: &SyntaxTree, reference: &SyntaxTree) -> f64 {
    subtree_match(&hyp.root, &reference.root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Language;
    use crate::metrics::parse::parse;

    fn leaf(kind: &str) -> TreeNode {
        TreeNode::synthetic(kind, vec![])
    }

    #[test]
    fn serializes_leaf_as_bare_kind() {
        assert_eq!(serialize_subtree(&leaf("identifier")), "identifier");
    }

    #[test]
    fn serializes_internal_nodes_with_parens() {
        let t = TreeNode::synthetic("call", vec![leaf("identifier"), leaf("argument_list")]);
        assert_eq!(serialize_subtree(&t), "(call identifier argument_list)");
    }

    #[test]
    fn enumeration_counts_every_named_node() {
        let t = TreeNode::synthetic(
            "a",
            vec![leaf("b"), TreeNode::synthetic("c", vec![leaf("d")])],
        );
        let counts = enumerate_subtrees(&t);
        assert_eq!(counts.len(), 4);
        assert_eq!(counts["(a b (c d))"], 1);
        assert_eq!(counts["b"], 1);
        assert_eq!(counts["(c d)"], 1);
        assert_eq!(counts["d"], 1);
    }

    #[test]
    fn anonymous_tokens_never_appear_in_serializations() {
        let src = "int a = 1;";
        let tree = parse(src, Language::Java).unwrap();
        fn find<'a>(node: &'a TreeNode, kind: &str) -> Option<&'a TreeNode> {
            if node.kind == kind {
                return Some(node);
            }
            node.children.iter().find_map(|c| find(c, kind))
        }
        let decl = find(&tree.root, "variable_declarator").unwrap();
        // The "=" token between name and value is anonymous and must
        // not show up.
        assert_eq!(
            serialize_subtree(decl),
            "(variable_declarator identifier decimal_integer_literal)"
        );
    }

    #[test]
    fn identical_trees_score_one() {
        let a = parse("int a = 1; int b = a + 2;", Language::Java).unwrap();
        let b = parse("int a = 1; int b = a + 2;", Language::Java).unwrap();
        assert_eq!(syntax_match(&a, &b), 1.0);
    }

    #[test]
    fn single_nodes_with_different_labels_score_zero() {
        assert_eq!(subtree_match(&leaf("a"), &leaf("b")), 0.0);
    }

    #[test]
    fn renamed_identifiers_do_not_change_the_score() {
        let a = parse("int total = x + y;", Language::Java).unwrap();
        let b = parse("int sum = p + q;", Language::Java).unwrap();
        assert_eq!(syntax_match(&a, &b), 1.0);
    }

    #[test]
    fn strict_subtree_scores_between_zero_and_one() {
        let hyp = parse("int a = 1;", Language::Java).unwrap();
        let reference = parse("int a = 1; int b = 2;", Language::Java).unwrap();
        let score = syntax_match(&hyp, &reference);
        assert!(score > 0.0 && score < 1.0, "score {score}");
    }

    #[test]
    fn repeated_subtrees_are_clipped() {
        // Reference repeats a shape twice; hypothesis has it once.
        let hyp = TreeNode::synthetic("root", vec![TreeNode::synthetic("s", vec![leaf("x")])]);
        let reference = TreeNode::synthetic(
            "root",
            vec![
                TreeNode::synthetic("s", vec![leaf("x")]),
                TreeNode::synthetic("s", vec![leaf("x")]),
            ],
        );
        // Reference multiset: root-shape ×1, (s x) ×2, x ×2 → 5 total.
        // Hypothesis supplies (s x) ×1 and x ×1; the differing roots
        // don't match.
        let score = subtree_match(&hyp, &reference);
        assert!((score - 2.0 / 5.0).abs() < 1e-12, "score {score}");
    }

    #[test]
    fn structural_edit_lowers_score_more_than_rename() {
        let reference = parse("while (a < n) { a += 1; }", Language::Java).unwrap();
        let renamed = parse("while (b < m) { b += 1; }", Language::Java).unwrap();
        let restructured = parse("if (a < n) { a += 1; }", Language::Java).unwrap();
        assert!(syntax_match(&renamed, &reference) > syntax_match(&restructured, &reference));
    }
}
