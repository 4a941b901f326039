//! The bundled toy classroom: a deterministic 20-student corpus plus the
//! offline service fixtures that annotate and judge it.
//!
//! Every problem ships four snippet variants — one correct, three each
//! planted with a single characteristic bug — and the fixture rules
//! recognize exactly those bugs. Submissions are generated from per-student
//! mastery archetypes, so the corpus carries real knowledge structure for
//! the estimator while staying small enough to push through the whole
//! pipeline in seconds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dataset, KnowledgeComponent, Language, Problem, Submission};
use crate::mock::{MockFixtures, MockRule};
use crate::taxonomy::ErrorCategory;
use crate::util::sha256_hex;

/// Students in the bundled corpus.
pub const TOY_STUDENTS: usize = 20;

/// Problems in the bundled corpus.
pub const TOY_PROBLEMS: usize = 10;

/// Label for `=` used where `==` was intended.
pub const LABEL_COMPARISON: &str = "incorrect comparison logic";

/// Label for loops that run one iteration past the end.
pub const LABEL_OFF_BY_ONE: &str = "loop bound overruns by one";

/// Label for functions that never return their result.
pub const LABEL_MISSING_RETURN: &str = "missing return statement";

/// Label for accumulators starting from the wrong constant.
pub const LABEL_WRONG_INIT: &str = "accumulator initialized to the wrong value";

/// The four planted bug kinds. Each maps to one fixture rule, one error
/// label, and one knowledge component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ToyBug {
    Comparison,
    OffByOne,
    MissingReturn,
    WrongInit,
}

impl ToyBug {
    pub fn label(self) -> &'static str {
        match self {
            ToyBug::Comparison => LABEL_COMPARISON,
            ToyBug::OffByOne => LABEL_OFF_BY_ONE,
            ToyBug::MissingReturn => LABEL_MISSING_RETURN,
            ToyBug::WrongInit => LABEL_WRONG_INIT,
        }
    }

    pub fn category(self) -> ErrorCategory {
        match self {
            ToyBug::MissingReturn => ErrorCategory::Runtime,
            _ => ErrorCategory::Logical,
        }
    }

    /// The knowledge component this bug is evidence against.
    pub fn kc_id(self) -> &'static str {
        match self {
            ToyBug::Comparison => "kc-compare",
            ToyBug::OffByOne => "kc-loops",
            ToyBug::MissingReturn => "kc-return",
            ToyBug::WrongInit => "kc-init",
        }
    }
}

/// One snippet variant of a problem: either the correct solution or a
/// single-bug mutant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyVariant {
    pub code: String,
    pub bug: Option<ToyBug>,
}

/// A problem template with its four variants (correct first).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyProblemSpec {
    pub id: String,
    pub statement: String,
    pub language: Language,
    pub kc_ids: Vec<String>,
    pub variants: Vec<ToyVariant>,
}

impl ToyProblemSpec {
    pub fn correct(&self) -> &ToyVariant {
        &self.variants[0]
    }

    pub fn variant_for(&self, bug: ToyBug) -> Option<&ToyVariant> {
        self.variants.iter().find(|v| v.bug == Some(bug))
    }
}

fn j(lines: &[&str]) -> String {
    lines.join("\n")
}

fn spec(
    id: &str,
    statement: &str,
    language: Language,
    variants: Vec<ToyVariant>,
) -> ToyProblemSpec {
    let mut kc_ids: Vec<String> = variants
        .iter()
        .filter_map(|v| v.bug.map(|b| b.kc_id().to_string()))
        .collect();
    kc_ids.sort();
    ToyProblemSpec {
        id: id.to_string(),
        statement: statement.to_string(),
        language,
        kc_ids,
        variants,
    }
}

fn ok(lines: &[&str]) -> ToyVariant {
    ToyVariant {
        code: j(lines),
        bug: None,
    }
}

fn bug(kind: ToyBug, lines: &[&str]) -> ToyVariant {
    ToyVariant {
        code: j(lines),
        bug: Some(kind),
    }
}

/// The knowledge-component catalog, in a fixed order.
pub fn toy_kcs() -> Vec<KnowledgeComponent> {
    let kc = |id: &str, name: &str| KnowledgeComponent {
        id: id.to_string(),
        name: name.to_string(),
    };
    vec![
        kc("kc-compare", "relational comparisons"),
        kc("kc-loops", "loop bounds and iteration"),
        kc("kc-return", "returning computed results"),
        kc("kc-init", "accumulator initialization"),
    ]
}

/// The ten problem templates. Variant order is pinned (correct first) so
/// the derived policy vocabulary is stable.
pub fn toy_problem_specs() -> Vec<ToyProblemSpec> {
    vec![
        spec(
            "p00",
            "Sum the integers from 0 up to but not including n.",
            Language::Java,
            vec![
                ok(&[
                    "int sumToN(int n) {",
                    "    int total = 0;",
                    "    for (int i = 0; i < n; i++) {",
                    "        total = total + i;",
                    "    }",
                    "    return total;",
                    "}",
                ]),
                bug(ToyBug::OffByOne, &[
                    "int sumToN(int n) {",
                    "    int total = 0;",
                    "    for (int i = 0; i <= n; i++) {",
                    "        total = total + i;",
                    "    }",
                    "    return total;",
                    "}",
                ]),
                bug(ToyBug::WrongInit, &[
                    "int sumToN(int n) {",
                    "    int total = 1;",
                    "    for (int i = 0; i < n; i++) {",
                    "        total = total + i;",
                    "    }",
                    "    return total;",
                    "}",
                ]),
                bug(ToyBug::MissingReturn, &[
                    "int sumToN(int n) {",
                    "    int total = 0;",
                    "    for (int i = 0; i < n; i++) {",
                    "        total = total + i;",
                    "    }",
                    "}",
                ]),
            ],
        ),
        spec(
            "p01",
            "Find the largest value among the first n entries of xs.",
            Language::Java,
            vec![
                ok(&[
                    "int maxOfArray(int[] xs, int n) {",
                    "    int best = xs[0];",
                    "    for (int i = 0; i < n; i++) {",
                    "        int x = xs[i];",
                    "        if (best < x) {",
                    "            best = x;",
                    "        }",
                    "    }",
                    "    return best;",
                    "}",
                ]),
                bug(ToyBug::Comparison, &[
                    "int maxOfArray(int[] xs, int n) {",
                    "    int best = xs[0];",
                    "    for (int i = 0; i < n; i++) {",
                    "        int x = xs[i];",
                    "        if (best = x) {",
                    "            best = x;",
                    "        }",
                    "    }",
                    "    return best;",
                    "}",
                ]),
                bug(ToyBug::OffByOne, &[
                    "int maxOfArray(int[] xs, int n) {",
                    "    int best = xs[0];",
                    "    for (int i = 0; i <= n; i++) {",
                    "        int x = xs[i];",
                    "        if (best < x) {",
                    "            best = x;",
                    "        }",
                    "    }",
                    "    return best;",
                    "}",
                ]),
                bug(ToyBug::MissingReturn, &[
                    "int maxOfArray(int[] xs, int n) {",
                    "    int best = xs[0];",
                    "    for (int i = 0; i < n; i++) {",
                    "        int x = xs[i];",
                    "        if (best < x) {",
                    "            best = x;",
                    "        }",
                    "    }",
                    "}",
                ]),
            ],
        ),
        spec(
            "p02",
            "Count how many of the first n entries of xs equal target.",
            Language::Java,
            vec![
                ok(&[
                    "int countMatches(int[] xs, int n, int target) {",
                    "    int count = 0;",
                    "    for (int i = 0; i < n; i++) {",
                    "        int x = xs[i];",
                    "        if (x == target) {",
                    "            count = count + 1;",
                    "        }",
                    "    }",
                    "    return count;",
                    "}",
                ]),
                bug(ToyBug::Comparison, &[
                    "int countMatches(int[] xs, int n, int target) {",
                    "    int count = 0;",
                    "    for (int i = 0; i < n; i++) {",
                    "        int x = xs[i];",
                    "        if (x = target) {",
                    "            count = count + 1;",
                    "        }",
                    "    }",
                    "    return count;",
                    "}",
                ]),
                bug(ToyBug::OffByOne, &[
                    "int countMatches(int[] xs, int n, int target) {",
                    "    int count = 0;",
                    "    for (int i = 0; i <= n; i++) {",
                    "        int x = xs[i];",
                    "        if (x == target) {",
                    "            count = count + 1;",
                    "        }",
                    "    }",
                    "    return count;",
                    "}",
                ]),
                bug(ToyBug::WrongInit, &[
                    "int countMatches(int[] xs, int n, int target) {",
                    "    int count = 1;",
                    "    for (int i = 0; i < n; i++) {",
                    "        int x = xs[i];",
                    "        if (x == target) {",
                    "            count = count + 1;",
                    "        }",
                    "    }",
                    "    return count;",
                    "}",
                ]),
            ],
        ),
        spec(
            "p03",
            "Sum the squares of the integers from 0 up to but not including n.",
            Language::Java,
            vec![
                ok(&[
                    "int sumOfSquares(int n) {",
                    "    int total = 0;",
                    "    for (int i = 0; i < n; i++) {",
                    "        total = total + i * i;",
                    "    }",
                    "    return total;",
                    "}",
                ]),
                bug(ToyBug::WrongInit, &[
                    "int sumOfSquares(int n) {",
                    "    int total = 1;",
                    "    for (int i = 0; i < n; i++) {",
                    "        total = total + i * i;",
                    "    }",
                    "    return total;",
                    "}",
                ]),
                bug(ToyBug::OffByOne, &[
                    "int sumOfSquares(int n) {",
                    "    int total = 0;",
                    "    for (int i = 0; i <= n; i++) {",
                    "        total = total + i * i;",
                    "    }",
                    "    return total;",
                    "}",
                ]),
                bug(ToyBug::MissingReturn, &[
                    "int sumOfSquares(int n) {",
                    "    int total = 0;",
                    "    for (int i = 0; i < n; i++) {",
                    "        total = total + i * i;",
                    "    }",
                    "}",
                ]),
            ],
        ),
        spec(
            "p04",
            "Report whether target occurs among the first n entries of xs.",
            Language::Java,
            vec![
                ok(&[
                    "boolean containsValue(int[] xs, int n, int target) {",
                    "    boolean found = false;",
                    "    for (int i = 0; i < n; i++) {",
                    "        int x = xs[i];",
                    "        if (x == target) {",
                    "            found = true;",
                    "        }",
                    "    }",
                    "    return found;",
                    "}",
                ]),
                bug(ToyBug::Comparison, &[
                    "boolean containsValue(int[] xs, int n, int target) {",
                    "    boolean found = false;",
                    "    for (int i = 0; i < n; i++) {",
                    "        int x = xs[i];",
                    "        if (x = target) {",
                    "            found = true;",
                    "        }",
                    "    }",
                    "    return found;",
                    "}",
                ]),
                bug(ToyBug::MissingReturn, &[
                    "boolean containsValue(int[] xs, int n, int target) {",
                    "    boolean found = false;",
                    "    for (int i = 0; i < n; i++) {",
                    "        int x = xs[i];",
                    "        if (x == target) {",
                    "            found = true;",
                    "        }",
                    "    }",
                    "}",
                ]),
                bug(ToyBug::OffByOne, &[
                    "boolean containsValue(int[] xs, int n, int target) {",
                    "    boolean found = false;",
                    "    for (int i = 0; i <= n; i++) {",
                    "        int x = xs[i];",
                    "        if (x == target) {",
                    "            found = true;",
                    "        }",
                    "    }",
                    "    return found;",
                    "}",
                ]),
            ],
        ),
        spec(
            "p05",
            "Find the smallest value among the first n entries of xs.",
            Language::Java,
            vec![
                ok(&[
                    "int minOfArray(int[] xs, int n) {",
                    "    int best = xs[0];",
                    "    for (int i = 0; i < n; i++) {",
                    "        int x = xs[i];",
                    "        if (x < best) {",
                    "            best = x;",
                    "        }",
                    "    }",
                    "    return best;",
                    "}",
                ]),
                bug(ToyBug::Comparison, &[
                    "int minOfArray(int[] xs, int n) {",
                    "    int best = xs[0];",
                    "    for (int i = 0; i < n; i++) {",
                    "        int x = xs[i];",
                    "        if (x = best) {",
                    "            best = x;",
                    "        }",
                    "    }",
                    "    return best;",
                    "}",
                ]),
                bug(ToyBug::OffByOne, &[
                    "int minOfArray(int[] xs, int n) {",
                    "    int best = xs[0];",
                    "    for (int i = 0; i <= n; i++) {",
                    "        int x = xs[i];",
                    "        if (x < best) {",
                    "            best = x;",
                    "        }",
                    "    }",
                    "    return best;",
                    "}",
                ]),
                bug(ToyBug::MissingReturn, &[
                    "int minOfArray(int[] xs, int n) {",
                    "    int best = xs[0];",
                    "    for (int i = 0; i < n; i++) {",
                    "        int x = xs[i];",
                    "        if (x < best) {",
                    "            best = x;",
                    "        }",
                    "    }",
                    "}",
                ]),
            ],
        ),
        spec(
            "p06",
            "Count the even values among the first n entries of xs.",
            Language::Java,
            vec![
                ok(&[
                    "int countEvens(int[] xs, int n) {",
                    "    int count = 0;",
                    "    for (int i = 0; i < n; i++) {",
                    "        int r = xs[i] % 2;",
                    "        if (r == 0) {",
                    "            count = count + 1;",
                    "        }",
                    "    }",
                    "    return count;",
                    "}",
                ]),
                bug(ToyBug::Comparison, &[
                    "int countEvens(int[] xs, int n) {",
                    "    int count = 0;",
                    "    for (int i = 0; i < n; i++) {",
                    "        int r = xs[i] % 2;",
                    "        if (r = 0) {",
                    "            count = count + 1;",
                    "        }",
                    "    }",
                    "    return count;",
                    "}",
                ]),
                bug(ToyBug::WrongInit, &[
                    "int countEvens(int[] xs, int n) {",
                    "    int count = 1;",
                    "    for (int i = 0; i < n; i++) {",
                    "        int r = xs[i] % 2;",
                    "        if (r == 0) {",
                    "            count = count + 1;",
                    "        }",
                    "    }",
                    "    return count;",
                    "}",
                ]),
                bug(ToyBug::OffByOne, &[
                    "int countEvens(int[] xs, int n) {",
                    "    int count = 0;",
                    "    for (int i = 0; i <= n; i++) {",
                    "        int r = xs[i] % 2;",
                    "        if (r == 0) {",
                    "            count = count + 1;",
                    "        }",
                    "    }",
                    "    return count;",
                    "}",
                ]),
            ],
        ),
        spec(
            "p07",
            "Sum the integers from a up to but not including b.",
            Language::Java,
            vec![
                ok(&[
                    "int sumBetween(int a, int b) {",
                    "    int total = 0;",
                    "    for (int i = a; i < b; i++) {",
                    "        total = total + i;",
                    "    }",
                    "    return total;",
                    "}",
                ]),
                bug(ToyBug::OffByOne, &[
                    "int sumBetween(int a, int b) {",
                    "    int total = 0;",
                    "    for (int i = a; i <= b; i++) {",
                    "        total = total + i;",
                    "    }",
                    "    return total;",
                    "}",
                ]),
                bug(ToyBug::MissingReturn, &[
                    "int sumBetween(int a, int b) {",
                    "    int total = 0;",
                    "    for (int i = a; i < b; i++) {",
                    "        total = total + i;",
                    "    }",
                    "}",
                ]),
                bug(ToyBug::WrongInit, &[
                    "int sumBetween(int a, int b) {",
                    "    int total = 1;",
                    "    for (int i = a; i < b; i++) {",
                    "        total = total + i;",
                    "    }",
                    "    return total;",
                    "}",
                ]),
            ],
        ),
        spec(
            "p08",
            "Count how many of the first n entries of xs equal target.",
            Language::Python,
            vec![
                ok(&[
                    "def count_target(xs, n, target):",
                    "    count = 0",
                    "    for i in range(n):",
                    "        x = xs[i]",
                    "        if x == target:",
                    "            count = count + 1",
                    "    return count",
                ]),
                bug(ToyBug::Comparison, &[
                    "def count_target(xs, n, target):",
                    "    count = 0",
                    "    for i in range(n):",
                    "        x = xs[i]",
                    "        if x = target:",
                    "            count = count + 1",
                    "    return count",
                ]),
                bug(ToyBug::OffByOne, &[
                    "def count_target(xs, n, target):",
                    "    count = 0",
                    "    for i in range(n + 1):",
                    "        x = xs[i]",
                    "        if x == target:",
                    "            count = count + 1",
                    "    return count",
                ]),
                bug(ToyBug::WrongInit, &[
                    "def count_target(xs, n, target):",
                    "    count = 1",
                    "    for i in range(n):",
                    "        x = xs[i]",
                    "        if x == target:",
                    "            count = count + 1",
                    "    return count",
                ]),
            ],
        ),
        spec(
            "p09",
            "Sum the first n entries of xs.",
            Language::Python,
            vec![
                ok(&[
                    "def sum_list(xs, n):",
                    "    total = 0",
                    "    for i in range(n):",
                    "        total = total + xs[i]",
                    "    return total",
                ]),
                bug(ToyBug::WrongInit, &[
                    "def sum_list(xs, n):",
                    "    total = 1",
                    "    for i in range(n):",
                    "        total = total + xs[i]",
                    "    return total",
                ]),
                bug(ToyBug::OffByOne, &[
                    "def sum_list(xs, n):",
                    "    total = 0",
                    "    for i in range(n + 1):",
                    "        total = total + xs[i]",
                    "    return total",
                ]),
                bug(ToyBug::MissingReturn, &[
                    "def sum_list(xs, n):",
                    "    total = 0",
                    "    for i in range(n):",
                    "        total = total + xs[i]",
                ]),
            ],
        ),
    ]
}

/// Every variant snippet in template order: the sampling vocabulary for the
/// toy policy.
pub fn toy_vocabulary() -> Vec<String> {
    toy_problem_specs()
        .iter()
        .flat_map(|p| p.variants.iter().map(|v| v.code.clone()))
        .collect()
}

/// The fixture rules that recognize the planted bugs. One rule per bug
/// kind; a variant triggers exactly the rule for its own bug, and correct
/// variants trigger none.
pub fn toy_rules() -> Vec<MockRule> {
    let rule = |bug: ToyBug, pattern: &str, absent: Option<&str>| MockRule {
        label: bug.label().to_string(),
        category: bug.category(),
        pattern: pattern.to_string(),
        absent: absent.map(str::to_string),
    };
    vec![
        // `if (x = y)` or `if x = y:` — a single `=` in an if-condition.
        rule(ToyBug::Comparison, r"if \(?[a-z_]+ = [^=]", None),
        rule(ToyBug::OffByOne, r"<= [a-z]\)?;|range\([a-z] \+ 1\)", None),
        rule(ToyBug::MissingReturn, r"(?s).", Some(r"\breturn\b")),
        rule(ToyBug::WrongInit, r"(total|count|sum|acc) = 1\b", None),
    ]
}

/// The full offline service fixture set for the toy corpus.
pub fn toy_fixtures() -> MockFixtures {
    MockFixtures {
        rules: toy_rules(),
        canned: Default::default(),
        generations: Vec::new(),
        embedding_dim: 64,
    }
}

fn stream_seed(seed: u64, tag: &str, a: &str, b: &str) -> u64 {
    let digest = sha256_hex(format!("{seed}|{tag}|{a}|{b}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("sha256 prefix is hex")
}

/// Planted mastery of one student on one knowledge component at attempt
/// `t`. Students are weak on the component their archetype names and
/// improve slightly with practice.
fn planted_mastery(weak_kc: usize, kc: usize, t: usize, jitter: f64) -> f64 {
    let base = if kc == weak_kc { 0.25 } else { 0.9 };
    (base + 0.03 * t as f64 + jitter).clamp(0.05, 0.97)
}

/// Builds the bundled corpus. Submissions carry correctness flags but no
/// error labels — annotation is the pipeline's first stage. Deterministic
/// in `seed`.
pub fn toy_dataset(seed: u64) -> Dataset {
    let kcs = toy_kcs();
    let specs = toy_problem_specs();
    let problems: Vec<Problem> = specs
        .iter()
        .map(|p| Problem {
            id: p.id.clone(),
            statement: p.statement.clone(),
            language: p.language,
            kc_ids: p.kc_ids.clone(),
        })
        .collect();

    let kc_index = |id: &str| kcs.iter().position(|kc| kc.id == id).expect("known kc");
    let mut submissions = Vec::with_capacity(TOY_STUDENTS * TOY_PROBLEMS);
    for s in 0..TOY_STUDENTS {
        let student_id = format!("s{s:02}");
        // Archetypes rotate through the four knowledge components.
        let weak_kc = s % kcs.len();
        let jitters: Vec<f64> = (0..kcs.len())
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                    seed,
                    "jitter",
                    &student_id,
                    &kcs[k].id,
                ));
                rng.gen_range(-0.05..0.05)
            })
            .collect();
        for (t, problem) in specs.iter().enumerate() {
            let mastery_of = |kc_id: &str| {
                let k = kc_index(kc_id);
                planted_mastery(weak_kc, k, t, jitters[k])
            };
            let p_correct: f64 = problem.kc_ids.iter().map(|id| mastery_of(id)).product();
            let mut rng =
                ChaCha8Rng::seed_from_u64(stream_seed(seed, "draw", &student_id, &problem.id));
            let correct = rng.gen::<f64>() < p_correct;
            let variant = if correct {
                problem.correct()
            } else {
                // Fail in the way the student's weakest tagged component
                // predicts.
                let weakest = problem
                    .kc_ids
                    .iter()
                    .min_by(|a, b| {
                        mastery_of(a)
                            .partial_cmp(&mastery_of(b))
                            .expect("masteries are finite")
                    })
                    .expect("problems tag at least one kc");
                problem
                    .variants
                    .iter()
                    .find(|v| v.bug.map(|b| b.kc_id()) == Some(weakest.as_str()))
                    .expect("every tagged kc has a matching variant")
            };
            submissions.push(Submission {
                student_id: student_id.clone(),
                problem_id: problem.id.clone(),
                order_index: t as u64,
                code: variant.code.clone(),
                correct,
                errors: Vec::new(),
            });
        }
    }
    Dataset::new(kcs, problems, submissions).expect("toy corpus is well-formed")
}
