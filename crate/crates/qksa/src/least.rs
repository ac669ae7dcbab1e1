//! Resource accounting for reconstruction strategies and the evolvable
//! cost functions that rank them.
//!
//! Every strategy gets a five-vector of resource estimates: description
//! length in bytes, energy as a multiply-accumulate count, approximation
//! error scale, space in bytes of retained history, and wall-clock time.
//! A cost tree maps the min-max-normalized vector (scaled by per-resource
//! weights) to a scalar cost, and a hypothesis with cost `c` carries weight
//! `2^-c` in the agent's policy.  Cost trees mutate by subtree replacement,
//! which is what evolution acts on.

use rand::Rng;
use thiserror::Error;

use crate::tomography::{QPTDescriptor, ReconInstrumentation};

/// Deepest tree the system accepts (a lone leaf has depth 1).
pub const MAX_TREE_DEPTH: usize = 8;

/// Costs clamp into `[0, COST_CLAMP]`, so weights live in `[2^-64, 1]`.
pub const COST_CLAMP: f64 = 64.0;

/// Constant leaves stay within `[0, CONST_LEAF_MAX]`.
pub const CONST_LEAF_MAX: f64 = 10.0;

/// Divisors smaller than this in magnitude trigger the protected value.
pub const DIV_GUARD: f64 = 1e-9;

/// Depth of subtrees grown during mutation.
const MUTATION_GROW_DEPTH: usize = 2;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("cost tree offset {offset}: expected {expected}, found {found:?}")]
    Unexpected { offset: usize, expected: &'static str, found: String },
    #[error("cost tree offset {offset}: operator {op:?} takes {want} argument(s)")]
    Arity { offset: usize, op: String, want: usize },
    #[error("cost tree offset {offset}: unknown operator {op:?}")]
    UnknownOp { offset: usize, op: String },
    #[error("constant {0} outside [0, {CONST_LEAF_MAX}]")]
    ConstOutOfRange(f64),
    #[error("tree depth {0} exceeds the maximum of {MAX_TREE_DEPTH}")]
    TooDeep(usize),
    #[error("trailing input after the tree")]
    Trailing,
}

/// Raw resource estimate for one strategy; all fields nonnegative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeastEstimate {
    pub length: f64,
    pub energy: f64,
    pub approx: f64,
    pub space: f64,
    pub time: f64,
}

/// Inclusive upper bounds a hypothesis must respect to be considered at
/// all.  `None` leaves that resource unbounded.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LeastBounds {
    pub length: Option<f64>,
    pub energy: Option<f64>,
    pub approx: Option<f64>,
    pub space: Option<f64>,
    pub time: Option<f64>,
}

/// Per-resource weights applied at the cost tree's leaves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub length: f64,
    pub energy: f64,
    pub approx: f64,
    pub space: f64,
    pub time: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights { length: 1.0, energy: 1.0, approx: 1.0, space: 1.0, time: 1.0 }
    }
}

/// Resource estimate of one reconstruction pass: description length from
/// the descriptor, energy and time from the instrumentation, error scale
/// from the precision, space from the window.
pub fn estimate_least(desc: &QPTDescriptor, instr: &ReconInstrumentation) -> LeastEstimate {
    let record_bytes = (instr.qubits * 2 + 8) as f64;
    LeastEstimate {
        length: desc.length_const,
        energy: instr.cmacs as f64,
        approx: 10f64.powi(-(desc.approx_places as i32)),
        space: desc.window as f64 * record_bytes,
        time: instr.seconds,
    }
}

/// Min-max normalize one estimate against the whole candidate pool.
/// Resources constant across the pool normalize to zero.
pub fn normalize(est: &LeastEstimate, pool: &[LeastEstimate]) -> LeastEstimate {
    fn norm(value: f64, all: impl Iterator<Item = f64> + Clone) -> f64 {
        let min = all.clone().fold(f64::INFINITY, f64::min);
        let max = all.fold(f64::NEG_INFINITY, f64::max);
        if max > min {
            (value - min) / (max - min)
        } else {
            0.0
        }
    }
    LeastEstimate {
        length: norm(est.length, pool.iter().map(|e| e.length)),
        energy: norm(est.energy, pool.iter().map(|e| e.energy)),
        approx: norm(est.approx, pool.iter().map(|e| e.approx)),
        space: norm(est.space, pool.iter().map(|e| e.space)),
        time: norm(est.time, pool.iter().map(|e| e.time)),
    }
}

/// Conjunctive bounds check on the raw estimate; bounds are inclusive.
pub fn within_bounds(est: &LeastEstimate, bounds: &LeastBounds) -> bool {
    let ok = |value: f64, bound: Option<f64>| bound.is_none_or(|b| value <= b);
    ok(est.length, bounds.length)
        && ok(est.energy, bounds.energy)
        && ok(est.approx, bounds.approx)
        && ok(est.space, bounds.space)
        && ok(est.time, bounds.time)
}

/// An expression over the five resource leaves and bounded constants.
#[derive(Debug, Clone, PartialEq)]
pub enum CostTree {
    Length,
    Energy,
    Approx,
    Space,
    Time,
    Const(f64),
    Add(Box<CostTree>, Box<CostTree>),
    Sub(Box<CostTree>, Box<CostTree>),
    Mul(Box<CostTree>, Box<CostTree>),
    Div(Box<CostTree>, Box<CostTree>),
    Min(Box<CostTree>, Box<CostTree>),
    Max(Box<CostTree>, Box<CostTree>),
    Sqrt(Box<CostTree>),
    Log2(Box<CostTree>),
}

impl CostTree {
    pub fn depth(&self) -> usize {
        match self {
            CostTree::Length
            | CostTree::Energy
            | CostTree::Approx
            | CostTree::Space
            | CostTree::Time
            | CostTree::Const(_) => 1,
            CostTree::Sqrt(a) | CostTree::Log2(a) => 1 + a.depth(),
            CostTree::Add(a, b)
            | CostTree::Sub(a, b)
            | CostTree::Mul(a, b)
            | CostTree::Div(a, b)
            | CostTree::Min(a, b)
            | CostTree::Max(a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            CostTree::Length
            | CostTree::Energy
            | CostTree::Approx
            | CostTree::Space
            | CostTree::Time
            | CostTree::Const(_) => 1,
            CostTree::Sqrt(a) | CostTree::Log2(a) => 1 + a.node_count(),
            CostTree::Add(a, b)
            | CostTree::Sub(a, b)
            | CostTree::Mul(a, b)
            | CostTree::Div(a, b)
            | CostTree::Min(a, b)
            | CostTree::Max(a, b) => 1 + a.node_count() + b.node_count(),
        }
    }

    fn eval_raw(&self, est: &LeastEstimate, w: &Weights) -> f64 {
        match self {
            CostTree::Length => w.length * est.length,
            CostTree::Energy => w.energy * est.energy,
            CostTree::Approx => w.approx * est.approx,
            CostTree::Space => w.space * est.space,
            CostTree::Time => w.time * est.time,
            CostTree::Const(c) => *c,
            CostTree::Add(a, b) => a.eval_raw(est, w) + b.eval_raw(est, w),
            CostTree::Sub(a, b) => a.eval_raw(est, w) - b.eval_raw(est, w),
            CostTree::Mul(a, b) => a.eval_raw(est, w) * b.eval_raw(est, w),
            CostTree::Div(a, b) => {
                let denom = b.eval_raw(est, w);
                if denom.abs() < DIV_GUARD {
                    1.0
                } else {
                    a.eval_raw(est, w) / denom
                }
            }
            CostTree::Min(a, b) => a.eval_raw(est, w).min(b.eval_raw(est, w)),
            CostTree::Max(a, b) => a.eval_raw(est, w).max(b.eval_raw(est, w)),
            CostTree::Sqrt(a) => {
                let v = a.eval_raw(est, w);
                if v < 0.0 {
                    0.0
                } else {
                    v.sqrt()
                }
            }
            CostTree::Log2(a) => {
                let v = a.eval_raw(est, w);
                if v <= 0.0 {
                    0.0
                } else {
                    v.log2()
                }
            }
        }
    }

    /// Enforce the structural bounds on a parsed or hand-built tree.
    pub fn validate(&self) -> Result<(), TreeError> {
        let depth = self.depth();
        if depth > MAX_TREE_DEPTH {
            return Err(TreeError::TooDeep(depth));
        }
        fn check_consts(tree: &CostTree) -> Result<(), TreeError> {
            match tree {
                CostTree::Const(c) => {
                    if !c.is_finite() || *c < 0.0 || *c > CONST_LEAF_MAX {
                        return Err(TreeError::ConstOutOfRange(*c));
                    }
                    Ok(())
                }
                CostTree::Sqrt(a) | CostTree::Log2(a) => check_consts(a),
                CostTree::Add(a, b)
                | CostTree::Sub(a, b)
                | CostTree::Mul(a, b)
                | CostTree::Div(a, b)
                | CostTree::Min(a, b)
                | CostTree::Max(a, b) => {
                    check_consts(a)?;
                    check_consts(b)
                }
                _ => Ok(()),
            }
        }
        check_consts(self)
    }
}

/// Evaluate a cost tree on a normalized estimate.  Protected operators
/// keep every syntactically valid tree total; the result clamps into
/// `[0, COST_CLAMP]`, with non-finite values pinned to the top.
pub fn eval_cost(tree: &CostTree, est: &LeastEstimate, w: &Weights) -> f64 {
    let v = tree.eval_raw(est, w);
    if v.is_finite() {
        v.clamp(0.0, COST_CLAMP)
    } else {
        COST_CLAMP
    }
}

/// Hypothesis weight `2^-cost`.
pub fn weight(cost: f64) -> f64 {
    (-cost).exp2()
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

impl std::fmt::Display for CostTree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CostTree::Length => f.write_str("L"),
            CostTree::Energy => f.write_str("E"),
            CostTree::Approx => f.write_str("A"),
            CostTree::Space => f.write_str("S"),
            CostTree::Time => f.write_str("T"),
            CostTree::Const(c) => write!(f, "{c}"),
            CostTree::Add(a, b) => write!(f, "(add {a} {b})"),
            CostTree::Sub(a, b) => write!(f, "(sub {a} {b})"),
            CostTree::Mul(a, b) => write!(f, "(mul {a} {b})"),
            CostTree::Div(a, b) => write!(f, "(div {a} {b})"),
            CostTree::Min(a, b) => write!(f, "(min {a} {b})"),
            CostTree::Max(a, b) => write!(f, "(max {a} {b})"),
            CostTree::Sqrt(a) => write!(f, "(sqrt {a})"),
            CostTree::Log2(a) => write!(f, "(log2 {a})"),
        }
    }
}

struct Parser<'a> {
    input: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.input.len()
            && self.input.as_bytes()[self.pos].is_ascii_whitespace()
        {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.input.as_bytes().get(self.pos).copied()
    }

    fn token(&mut self) -> Option<&'a str> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.input.len() {
            let b = self.input.as_bytes()[self.pos];
            if b.is_ascii_whitespace() || b == b'(' || b == b')' {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            None
        } else {
            Some(&self.input[start..self.pos])
        }
    }

    fn parse_expr(&mut self) -> Result<CostTree, TreeError> {
        self.skip_ws();
        let offset = self.pos;
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let op = self.token().ok_or(TreeError::Unexpected {
                    offset,
                    expected: "operator",
                    found: "end of input".to_string(),
                })?;
                let op_owned = op.to_string();
                let want = match op {
                    "add" | "sub" | "mul" | "div" | "min" | "max" => 2,
                    "sqrt" | "log2" => 1,
                    _ => {
                        return Err(TreeError::UnknownOp { offset, op: op_owned });
                    }
                };
                let mut args = Vec::with_capacity(want);
                loop {
                    self.skip_ws();
                    match self.peek() {
                        Some(b')') => {
                            self.pos += 1;
                            break;
                        }
                        Some(_) => args.push(self.parse_expr()?),
                        None => {
                            return Err(TreeError::Unexpected {
                                offset: self.pos,
                                expected: "`)`",
                                found: "end of input".to_string(),
                            });
                        }
                    }
                }
                if args.len() != want {
                    return Err(TreeError::Arity { offset, op: op_owned, want });
                }
                let mut args = args.into_iter();
                let first = Box::new(args.next().unwrap());
                Ok(match (op_owned.as_str(), args.next()) {
                    ("add", Some(b)) => CostTree::Add(first, Box::new(b)),
                    ("sub", Some(b)) => CostTree::Sub(first, Box::new(b)),
                    ("mul", Some(b)) => CostTree::Mul(first, Box::new(b)),
                    ("div", Some(b)) => CostTree::Div(first, Box::new(b)),
                    ("min", Some(b)) => CostTree::Min(first, Box::new(b)),
                    ("max", Some(b)) => CostTree::Max(first, Box::new(b)),
                    ("sqrt", None) => CostTree::Sqrt(first),
                    ("log2", None) => CostTree::Log2(first),
                    _ => unreachable!("arity already checked"),
                })
            }
            Some(b')') => Err(TreeError::Unexpected {
                offset,
                expected: "leaf or `(`",
                found: ")".to_string(),
            }),
            Some(_) => {
                let tok = self.token().unwrap();
                match tok {
                    "L" => Ok(CostTree::Length),
                    "E" => Ok(CostTree::Energy),
                    "A" => Ok(CostTree::Approx),
                    "S" => Ok(CostTree::Space),
                    "T" => Ok(CostTree::Time),
                    other => match other.parse::<f64>() {
                        Ok(c) => {
                            if !c.is_finite() || !(0.0..=CONST_LEAF_MAX).contains(&c) {
                                Err(TreeError::ConstOutOfRange(c))
                            } else {
                                Ok(CostTree::Const(c))
                            }
                        }
                        Err(_) => Err(TreeError::Unexpected {
                            offset,
                            expected: "leaf",
                            found: other.to_string(),
                        }),
                    },
                }
            }
            None => Err(TreeError::Unexpected {
                offset,
                expected: "expression",
                found: "end of input".to_string(),
            }),
        }
    }
}

impl std::str::FromStr for CostTree {
    type Err = TreeError;

    fn from_str(s: &str) -> Result<Self, TreeError> {
        let mut parser = Parser { input: s, pos: 0 };
        let tree = parser.parse_expr()?;
        parser.skip_ws();
        if parser.pos != s.len() {
            return Err(TreeError::Trailing);
        }
        tree.validate()?;
        Ok(tree)
    }
}

// ---------------------------------------------------------------------------
// random generation and mutation
// ---------------------------------------------------------------------------

fn random_leaf(rng: &mut impl Rng) -> CostTree {
    match rng.random_range(0..6u32) {
        0 => CostTree::Length,
        1 => CostTree::Energy,
        2 => CostTree::Approx,
        3 => CostTree::Space,
        4 => CostTree::Time,
        _ => CostTree::Const(rng.random::<f64>() * CONST_LEAF_MAX),
    }
}

#[derive(Clone, Copy)]
enum GenMode {
    // any primitive until the depth budget forces a leaf
    Grow,
    // internal nodes all the way to the target depth
    Full,
}

fn gen_tree(rng: &mut impl Rng, depth_left: usize, mode: GenMode) -> CostTree {
    let force_leaf = match mode {
        GenMode::Grow => depth_left <= 1 || rng.random_range(0..14u32) < 6,
        GenMode::Full => depth_left <= 1,
    };
    if force_leaf {
        return random_leaf(rng);
    }
    let pick = rng.random_range(0..8u32);
    let a = Box::new(gen_tree(rng, depth_left - 1, mode));
    match pick {
        0 => CostTree::Add(a, Box::new(gen_tree(rng, depth_left - 1, mode))),
        1 => CostTree::Sub(a, Box::new(gen_tree(rng, depth_left - 1, mode))),
        2 => CostTree::Mul(a, Box::new(gen_tree(rng, depth_left - 1, mode))),
        3 => CostTree::Div(a, Box::new(gen_tree(rng, depth_left - 1, mode))),
        4 => CostTree::Min(a, Box::new(gen_tree(rng, depth_left - 1, mode))),
        5 => CostTree::Max(a, Box::new(gen_tree(rng, depth_left - 1, mode))),
        6 => CostTree::Sqrt(a),
        _ => CostTree::Log2(a),
    }
}

/// Ramped half-and-half tree generation up to `max_depth`.
pub fn random_tree(rng: &mut impl Rng, max_depth: usize) -> CostTree {
    let max_depth = max_depth.clamp(1, MAX_TREE_DEPTH);
    let target = if max_depth <= 2 { max_depth } else { rng.random_range(2..=max_depth) };
    let mode = if rng.random::<bool>() { GenMode::Full } else { GenMode::Grow };
    let tree = gen_tree(rng, target, mode);
    debug_assert!(tree.validate().is_ok());
    tree
}

fn subtree_depths(tree: &CostTree, depth: usize, out: &mut Vec<usize>) {
    out.push(depth);
    match tree {
        CostTree::Sqrt(a) | CostTree::Log2(a) => subtree_depths(a, depth + 1, out),
        CostTree::Add(a, b)
        | CostTree::Sub(a, b)
        | CostTree::Mul(a, b)
        | CostTree::Div(a, b)
        | CostTree::Min(a, b)
        | CostTree::Max(a, b) => {
            subtree_depths(a, depth + 1, out);
            subtree_depths(b, depth + 1, out);
        }
        _ => {}
    }
}

fn replace_at(tree: &CostTree, target: usize, replacement: &CostTree, next: &mut usize) -> CostTree {
    let here = *next;
    *next += 1;
    if here == target {
        return replacement.clone();
    }
    match tree {
        CostTree::Sqrt(a) => CostTree::Sqrt(Box::new(replace_at(a, target, replacement, next))),
        CostTree::Log2(a) => CostTree::Log2(Box::new(replace_at(a, target, replacement, next))),
        CostTree::Add(a, b) => CostTree::Add(
            Box::new(replace_at(a, target, replacement, next)),
            Box::new(replace_at(b, target, replacement, next)),
        ),
        CostTree::Sub(a, b) => CostTree::Sub(
            Box::new(replace_at(a, target, replacement, next)),
            Box::new(replace_at(b, target, replacement, next)),
        ),
        CostTree::Mul(a, b) => CostTree::Mul(
            Box::new(replace_at(a, target, replacement, next)),
            Box::new(replace_at(b, target, replacement, next)),
        ),
        CostTree::Div(a, b) => CostTree::Div(
            Box::new(replace_at(a, target, replacement, next)),
            Box::new(replace_at(b, target, replacement, next)),
        ),
        CostTree::Min(a, b) => CostTree::Min(
            Box::new(replace_at(a, target, replacement, next)),
            Box::new(replace_at(b, target, replacement, next)),
        ),
        CostTree::Max(a, b) => CostTree::Max(
            Box::new(replace_at(a, target, replacement, next)),
            Box::new(replace_at(b, target, replacement, next)),
        ),
        leaf => leaf.clone(),
    }
}

/// Point mutation: every node is independently marked with probability
/// `m_c`; one uniformly chosen marked node has its subtree replaced by a
/// freshly grown one.  No marks, no change.  The replacement depth shrinks
/// near the depth limit so the result always stays within bounds.
pub fn mutate(tree: &CostTree, m_c: f64, rng: &mut impl Rng) -> CostTree {
    let mut depths = Vec::with_capacity(tree.node_count());
    subtree_depths(tree, 1, &mut depths);
    let selected: Vec<usize> =
        (0..depths.len()).filter(|_| rng.random::<f64>() < m_c).collect();
    if selected.is_empty() {
        return tree.clone();
    }
    let target = selected[rng.random_range(0..selected.len())];
    let budget = (MAX_TREE_DEPTH + 1 - depths[target]).min(MUTATION_GROW_DEPTH).max(1);
    let replacement = gen_tree(rng, budget, GenMode::Grow);
    let mut next = 0usize;
    let mutated = replace_at(tree, target, &replacement, &mut next);
    debug_assert!(mutated.validate().is_ok());
    mutated
}
