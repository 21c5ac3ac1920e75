//! A fixed table of programming concept families.
//!
//! Two components share this table so they stay aligned: the synthetic
//! dataset generator composes problem statements out of each family's
//! statement phrases, and the mock chat provider recovers KCs from a
//! statement by scanning for each family's keywords. Each family carries
//! several fine-grained phrasings so the generated KC set has enough
//! lexical variety for clustering to be meaningful.

/// One family of related programming concepts.
pub struct ConceptFamily {
    /// Stable identifier.
    pub key: &'static str,
    /// Human-authored tag in the style of classic KC labels.
    pub human_tag: &'static str,
    /// Lowercase keywords that mark this family in a problem statement.
    /// Single words match on word boundaries; multi-word entries match as
    /// substrings.
    pub keywords: &'static [&'static str],
    /// Fine-grained KC descriptions attributable to this family.
    pub phrasings: &'static [&'static str],
    /// Statement fragments the synthetic generator can embed. Every
    /// fragment contains at least one of `keywords`.
    pub statement_phrases: &'static [&'static str],
    /// Tiny code fragments per language: (java, python).
    pub code_fragments: (&'static str, &'static str),
}

pub const FAMILIES: &[ConceptFamily] = &[
    ConceptFamily {
        key: "conditionals",
        human_tag: "If/Else",
        keywords: &["if", "otherwise", "branch", "case"],
        phrasings: &[
            "If and else if statement",
            "Conditional branching",
            "If statement usage",
            "Else branch handling",
            "Conditional expression evaluation",
            "Multi-way conditional logic",
            "Guard condition checks",
            "Selection control flow",
        ],
        statement_phrases: &[
            "picks a branch depending on the input",
            "handles one case if the value is small and another otherwise",
            "decides what to do if the inputs disagree",
        ],
        code_fragments: (
            "if (a > b) { result = a; } else { result = b; }",
            "if a > b:\n        result = a\n    else:\n        result = b",
        ),
    },
    ConceptFamily {
        key: "loops",
        human_tag: "For",
        keywords: &["loop", "iterate", "iterates", "repeat", "repeatedly"],
        phrasings: &[
            "For loop iteration",
            "While loop",
            "Loop counter management",
            "Iterating over a sequence",
            "Loop termination conditions",
            "Repeated execution with loops",
            "Bounded iteration",
            "Traversal with a loop",
        ],
        statement_phrases: &[
            "iterates over the input values",
            "uses a loop to visit every value",
            "repeatedly processes the input until done",
        ],
        code_fragments: (
            "for (int i = 0; i < a; i++) { result = result + i; }",
            "for i in range(a):\n        result = result + i",
        ),
    },
    ConceptFamily {
        key: "nested_loops",
        human_tag: "NestedFor",
        keywords: &["nested", "grid", "combination"],
        phrasings: &[
            "Nested for loops",
            "Nested loop iteration",
            "Inner and outer loop coordination",
            "Pairwise iteration",
            "Two-dimensional traversal",
            "Nested repetition",
            "Loop nesting",
            "Quadratic scanning with nested loops",
        ],
        statement_phrases: &[
            "scans every combination of two positions",
            "walks a nested structure row by row",
        ],
        code_fragments: (
            "for (int i = 0; i < a; i++) { for (int j = 0; j < b; j++) { result++; } }",
            "for i in range(a):\n        for j in range(b):\n            result = result + 1",
        ),
    },
    ConceptFamily {
        key: "arithmetic",
        human_tag: "Math+-*/",
        keywords: &["sum", "add", "difference", "product", "total", "average"],
        phrasings: &[
            "Basic arithmetic operations",
            "Addition and subtraction",
            "Integer arithmetic",
            "Accumulating a numeric total",
            "Arithmetic expression evaluation",
            "Multiplication and division",
            "Numeric accumulation",
            "Computing averages",
        ],
        statement_phrases: &[
            "computes the sum of the inputs",
            "reports the difference between the largest and smallest input",
            "keeps a running total of the values",
        ],
        code_fragments: ("result = a + b;", "result = a + b"),
    },
    ConceptFamily {
        key: "modulo",
        human_tag: "Math%",
        keywords: &["remainder", "divisible", "even", "odd", "modulo"],
        phrasings: &[
            "Modulo operation",
            "Remainder computation",
            "Divisibility checking",
            "Even and odd detection",
            "Modular arithmetic",
            "Wrap-around indexing with modulo",
            "Parity checks",
            "Cyclic counting with remainders",
        ],
        statement_phrases: &[
            "counts how many values are even",
            "checks whether one input is divisible by the other",
            "keeps only values whose remainder is zero",
        ],
        code_fragments: ("result = a % 2;", "result = a % 2"),
    },
    ConceptFamily {
        key: "comparisons",
        human_tag: "LogicCompareNum",
        keywords: &["greater", "less", "larger", "smaller", "compare", "compares"],
        phrasings: &[
            "Numerical comparisons",
            "Relational operators",
            "Comparing two values",
            "Range checking",
            "Threshold comparison",
            "Ordering of numeric values",
            "Inequality testing",
            "Bounds comparison",
        ],
        statement_phrases: &[
            "compares the two inputs",
            "finds the larger of the inputs",
            "tests whether the value is greater than a threshold",
        ],
        code_fragments: ("result = (a > b) ? 1 : 0;", "result = 1 if a > b else 0"),
    },
    ConceptFamily {
        key: "booleans",
        human_tag: "LogicBoolean",
        keywords: &["boolean", "whether", "flag"],
        phrasings: &[
            "Boolean logic",
            "Boolean return values",
            "Truth value computation",
            "Boolean expression construction",
            "Predicate evaluation",
            "Boolean flags",
            "Logical conditions as values",
            "Returning a boolean result",
        ],
        statement_phrases: &[
            "reports whether the inputs satisfy the rule",
            "returns a boolean verdict",
        ],
        code_fragments: ("boolean ok = a == b;", "ok = a == b"),
    },
    ConceptFamily {
        key: "logic_ops",
        human_tag: "LogicAndNotOr",
        keywords: &["both", "either", "neither", "negate"],
        phrasings: &[
            "Logical operators",
            "Logical conjunction and disjunction",
            "Combining conditions with and/or",
            "Logical negation",
            "Short-circuit evaluation",
            "Compound boolean conditions",
            "Boolean operator precedence",
            "Combining multiple predicates",
        ],
        statement_phrases: &[
            "succeeds when both conditions hold",
            "accepts the input when either rule applies",
        ],
        code_fragments: (
            "boolean ok = (a > 0) && (b > 0);",
            "ok = a > 0 and b > 0",
        ),
    },
    ConceptFamily {
        key: "strings",
        human_tag: "StringConcat",
        keywords: &["string", "text", "word", "concatenate"],
        phrasings: &[
            "String concatenation",
            "String manipulation",
            "Building strings incrementally",
            "Joining text values",
            "String construction",
            "Appending to a string",
            "Assembling output strings",
            "Combining string segments",
        ],
        statement_phrases: &[
            "builds an output string from the pieces",
            "concatenates the given text values",
        ],
        code_fragments: (
            "String s = \"\" + a + b;",
            "s = str(a) + str(b)",
        ),
    },
    ConceptFamily {
        key: "string_index",
        human_tag: "StringIndex",
        keywords: &["substring", "position", "character at"],
        phrasings: &[
            "String indexing",
            "Substring extraction",
            "Character access by position",
            "Locating characters in a string",
            "Slicing strings",
            "Index-based string access",
            "Finding substring positions",
            "Extracting parts of a string",
        ],
        statement_phrases: &[
            "extracts the substring between two markers",
            "reads the character at a given position",
        ],
        code_fragments: (
            "char c = s.charAt(0);",
            "c = s[0]",
        ),
    },
    ConceptFamily {
        key: "string_length",
        human_tag: "StringLen",
        keywords: &["length", "shortest", "longest"],
        phrasings: &[
            "String length",
            "String length determination",
            "Measuring string size",
            "Length-based string checks",
            "Counting characters",
            "Using length in bounds",
            "Empty string detection",
            "Length arithmetic on strings",
        ],
        statement_phrases: &[
            "measures the length of the text",
            "picks the longest of the inputs",
        ],
        code_fragments: ("int n = s.length();", "n = len(s)"),
    },
    ConceptFamily {
        key: "string_equal",
        human_tag: "StringEqual",
        keywords: &["equals", "matches", "identical", "same text"],
        phrasings: &[
            "String equality comparison",
            "Equality comparison",
            "Comparing strings for equality",
            "Case-sensitive string matching",
            "Content equality checks",
            "Exact string matching",
            "Equality testing of text",
            "Character sequence comparison",
        ],
        statement_phrases: &[
            "checks whether the two pieces of text are identical",
            "tests if the input matches the expected word",
        ],
        code_fragments: (
            "boolean same = s.equals(t);",
            "same = s == t",
        ),
    },
    ConceptFamily {
        key: "arrays",
        human_tag: "ArrayIndex",
        keywords: &["array", "element", "entries"],
        phrasings: &[
            "Array indexing and assignment",
            "Array iteration",
            "Array element access",
            "Index-based array traversal",
            "Array bounds handling",
            "Reading array elements",
            "Array accumulation",
            "Positional access in arrays",
        ],
        statement_phrases: &[
            "visits each element of the array",
            "reads entries of the array by index",
        ],
        code_fragments: (
            "int x = nums[0];",
            "x = nums[0]",
        ),
    },
    ConceptFamily {
        key: "functions",
        human_tag: "DefFunction",
        keywords: &["helper", "routine", "procedure"],
        phrasings: &[
            "Function definition",
            "Method signatures",
            "Return statement usage",
            "Parameter passing",
            "Defining reusable functions",
            "Function return values",
            "Method declaration",
            "Procedure abstraction",
        ],
        statement_phrases: &[
            "delegates the core step to a helper routine",
            "defines a small procedure for the repeated part",
        ],
        code_fragments: (
            "int helper(int x) { return x; }",
            "def helper(x):\n        return x",
        ),
    },
    ConceptFamily {
        key: "absolute",
        human_tag: "Math+-*/",
        keywords: &["absolute", "magnitude"],
        phrasings: &[
            "Absolute value computation",
            "Magnitude calculation",
            "Distance between numbers",
            "Absolute difference",
            "Sign-independent comparison",
            "Using built-in math functions",
        ],
        statement_phrases: &[
            "works with the absolute difference of the inputs",
            "ignores sign by taking the magnitude",
        ],
        code_fragments: (
            "result = Math.abs(a - b);",
            "result = abs(a - b)",
        ),
    },
];

/// Look up a family by key.
pub fn family(key: &str) -> Option<&'static ConceptFamily> {
    FAMILIES.iter().find(|f| f.key == key)
}

/// Families whose keywords appear in `statement`, in table order.
/// Single-word keywords match whole words; multi-word keywords match as
/// substrings. Matching is case-insensitive.
pub fn families_in_statement(statement: &str) -> Vec<&'static ConceptFamily> {
    let lower = statement.to_lowercase();
    let words: std::collections::HashSet<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    FAMILIES
        .iter()
        .filter(|f| {
            f.keywords.iter().any(|k| {
                if k.contains(' ') {
                    lower.contains(k)
                } else {
                    words.contains(k)
                }
            })
        })
        .collect()
}
