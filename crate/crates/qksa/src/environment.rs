//! The quantum process under study and the agent's only window into it:
//! pick a measurement setting, receive one outcome bit string.
//!
//! The process is a unitary channel given either as a gate circuit or drawn
//! Haar-randomly from a seed.  Internally the environment prepares the
//! channel's process state on `2n` qubits and samples outcomes from it, so
//! one interaction step plays the role of one entanglement-assisted probe.

use rand::Rng;
use thiserror::Error;

use crate::metrics::{self, DistanceId};
use crate::qcore::{
    born_probabilities, choi_of_unitary, haar_random_unitary, kron, BasisString, CMatrix,
    DensityMatrix, PauliAxis, Unitary,
};
use crate::SeededRng;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("circuit line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("action {0:?} is not in this environment's action space")]
    UnknownAction(String),
    #[error(transparent)]
    Core(#[from] crate::qcore::Error),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
}

pub type Result<T> = std::result::Result<T, EnvError>;

// ---------------------------------------------------------------------------
// circuits
// ---------------------------------------------------------------------------

/// One gate application.  Rotation angles are radians.
#[derive(Debug, Clone, PartialEq)]
pub enum GateOp {
    H(usize),
    X(usize),
    Y(usize),
    Z(usize),
    S(usize),
    T(usize),
    Rx(usize, f64),
    Ry(usize, f64),
    Rz(usize, f64),
    Cx(usize, usize),
}

/// A parsed circuit: qubit count plus gates in application order.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitSpec {
    pub n_qubits: usize,
    pub ops: Vec<GateOp>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> EnvError {
    EnvError::Parse { line, msg: msg.into() }
}

/// Parse the line-oriented circuit format:
///
/// ```text
/// qubits 1
/// # a comment
/// h 0
/// rx(1.5707963268) 0
/// cx 0 1
/// ```
pub fn parse_circuit(text: &str) -> Result<CircuitSpec> {
    let mut n_qubits: Option<usize> = None;
    let mut ops = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let head = parts.next().unwrap();
        if n_qubits.is_none() {
            if head != "qubits" {
                return Err(parse_err(line_no, "first directive must be `qubits <n>`"));
            }
            let arg = parts
                .next()
                .ok_or_else(|| parse_err(line_no, "`qubits` needs a count"))?;
            let n: usize = arg
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad qubit count {arg:?}")))?;
            if n == 0 {
                return Err(parse_err(line_no, "qubit count must be at least 1"));
            }
            if parts.next().is_some() {
                return Err(parse_err(line_no, "trailing tokens after `qubits <n>`"));
            }
            n_qubits = Some(n);
            continue;
        }
        let n = n_qubits.unwrap();
        let targets: Vec<usize> = parts
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| parse_err(line_no, format!("bad qubit index {tok:?}")))
            })
            .collect::<Result<_>>()?;
        for &t in &targets {
            if t >= n {
                return Err(parse_err(line_no, format!("qubit {t} out of range (0..{n})")));
            }
        }
        let (name, angle) = match head.find('(') {
            Some(open) => {
                if !head.ends_with(')') {
                    return Err(parse_err(line_no, "unterminated gate parameter"));
                }
                let inner = &head[open + 1..head.len() - 1];
                let angle: f64 = inner
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("bad angle {inner:?}")))?;
                (&head[..open], Some(angle))
            }
            None => (head, None),
        };
        let expect_targets = |want: usize| -> Result<()> {
            if targets.len() != want {
                Err(parse_err(
                    line_no,
                    format!("gate {name} takes {want} target(s), got {}", targets.len()),
                ))
            } else {
                Ok(())
            }
        };
        let no_param = |op: GateOp| -> Result<GateOp> {
            if angle.is_some() {
                Err(parse_err(line_no, format!("gate {name} takes no parameter")))
            } else {
                Ok(op)
            }
        };
        let op = match name {
            "h" => {
                expect_targets(1)?;
                no_param(GateOp::H(targets[0]))?
            }
            "x" => {
                expect_targets(1)?;
                no_param(GateOp::X(targets[0]))?
            }
            "y" => {
                expect_targets(1)?;
                no_param(GateOp::Y(targets[0]))?
            }
            "z" => {
                expect_targets(1)?;
                no_param(GateOp::Z(targets[0]))?
            }
            "s" => {
                expect_targets(1)?;
                no_param(GateOp::S(targets[0]))?
            }
            "t" => {
                expect_targets(1)?;
                no_param(GateOp::T(targets[0]))?
            }
            "rx" | "ry" | "rz" => {
                expect_targets(1)?;
                let angle = angle
                    .ok_or_else(|| parse_err(line_no, format!("gate {name} needs an angle")))?;
                match name {
                    "rx" => GateOp::Rx(targets[0], angle),
                    "ry" => GateOp::Ry(targets[0], angle),
                    _ => GateOp::Rz(targets[0], angle),
                }
            }
            "cx" => {
                expect_targets(2)?;
                if targets[0] == targets[1] {
                    return Err(parse_err(line_no, "cx control and target must differ"));
                }
                no_param(GateOp::Cx(targets[0], targets[1]))?
            }
            other => return Err(parse_err(line_no, format!("unknown gate {other:?}"))),
        };
        ops.push(op);
    }
    let n_qubits = n_qubits.ok_or_else(|| parse_err(1, "missing `qubits <n>` directive"))?;
    Ok(CircuitSpec { n_qubits, ops })
}

fn c(re: f64, im: f64) -> num_complex::Complex64 {
    num_complex::Complex64::new(re, im)
}

fn gate_matrix_1q(op: &GateOp) -> CMatrix {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    match op {
        GateOp::H(_) => CMatrix::from_row_slice(2, 2, &[c(s, 0.0), c(s, 0.0), c(s, 0.0), c(-s, 0.0)]),
        GateOp::X(_) => PauliAxis::X.matrix(),
        GateOp::Y(_) => PauliAxis::Y.matrix(),
        GateOp::Z(_) => PauliAxis::Z.matrix(),
        GateOp::S(_) => CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 1.0)]),
        GateOp::T(_) => {
            let phase = std::f64::consts::FRAC_PI_4;
            CMatrix::from_row_slice(
                2,
                2,
                &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(phase.cos(), phase.sin())],
            )
        }
        GateOp::Rx(_, t) => {
            let (ct, st) = ((t / 2.0).cos(), (t / 2.0).sin());
            CMatrix::from_row_slice(2, 2, &[c(ct, 0.0), c(0.0, -st), c(0.0, -st), c(ct, 0.0)])
        }
        GateOp::Ry(_, t) => {
            let (ct, st) = ((t / 2.0).cos(), (t / 2.0).sin());
            CMatrix::from_row_slice(2, 2, &[c(ct, 0.0), c(-st, 0.0), c(st, 0.0), c(ct, 0.0)])
        }
        GateOp::Rz(_, t) => {
            let half = t / 2.0;
            CMatrix::from_row_slice(
                2,
                2,
                &[c(half.cos(), -half.sin()), c(0.0, 0.0), c(0.0, 0.0), c(half.cos(), half.sin())],
            )
        }
        GateOp::Cx(..) => unreachable!("cx is not a single-qubit gate"),
    }
}

fn lift_1q(gate: &CMatrix, q: usize, n: usize) -> CMatrix {
    let mut acc = CMatrix::identity(1, 1);
    for k in 0..n {
        let factor = if k == q { gate.clone() } else { CMatrix::identity(2, 2) };
        acc = kron(&acc, &factor);
    }
    acc
}

fn cx_matrix(control: usize, target: usize, n: usize) -> CMatrix {
    let d = 1usize << n;
    let cbit = n - 1 - control;
    let tbit = n - 1 - target;
    let mut m = CMatrix::zeros(d, d);
    for col in 0..d {
        let row = if (col >> cbit) & 1 == 1 { col ^ (1 << tbit) } else { col };
        m[(row, col)] = c(1.0, 0.0);
    }
    m
}

/// Multiply out the circuit into one unitary, first gate applied first.
pub fn unitary_of_circuit(spec: &CircuitSpec) -> Unitary {
    let n = spec.n_qubits;
    let d = 1usize << n;
    let mut acc = CMatrix::identity(d, d);
    for op in &spec.ops {
        let full = match op {
            GateOp::Cx(control, target) => cx_matrix(*control, *target, n),
            GateOp::H(q)
            | GateOp::X(q)
            | GateOp::Y(q)
            | GateOp::Z(q)
            | GateOp::S(q)
            | GateOp::T(q)
            | GateOp::Rx(q, _)
            | GateOp::Ry(q, _)
            | GateOp::Rz(q, _) => lift_1q(&gate_matrix_1q(op), *q, n),
        };
        acc = full * acc;
    }
    Unitary::new(acc).expect("product of unitaries drifted past tolerance")
}

// ---------------------------------------------------------------------------
// the interactive environment
// ---------------------------------------------------------------------------

/// One completed interaction: which setting was measured at which step and
/// what came out.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub step: u64,
    pub action: BasisString,
    pub percept: String,
}

/// Where the hidden channel comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvSource {
    Circuit(CircuitSpec),
    Random { n_qubits: usize, seed: u64 },
}

/// The hidden unitary process plus the measurement interface the agent
/// sees.  Actions are Pauli settings on all `2n` qubits of the process
/// state; percepts are outcome bit strings of the same length.
pub struct Environment {
    n: usize,
    u_true: Unitary,
    choi_true: DensityMatrix,
    action_space: Vec<BasisString>,
    percept_space: Vec<String>,
    action_probs: Vec<Option<Vec<f64>>>,
    rng: SeededRng,
}

/// Render outcome index `m` as a bit string over `k` qubits, qubit 0 first.
pub fn percept_string(m: usize, k: usize) -> String {
    (0..k).map(|q| if (m >> (k - 1 - q)) & 1 == 1 { '1' } else { '0' }).collect()
}

/// Build an environment.  `interaction_seed` drives outcome sampling only;
/// the channel itself is fixed by `source`.  An optional whitelist narrows
/// the action space, preserving lexicographic order.
pub fn make_environment(
    source: &EnvSource,
    interaction_seed: u64,
    whitelist: Option<&[BasisString]>,
) -> Result<Environment> {
    let (n, u_true) = match source {
        EnvSource::Circuit(spec) => (spec.n_qubits, unitary_of_circuit(spec)),
        EnvSource::Random { n_qubits, seed } => {
            let mut rng = crate::rng_from_seed(*seed);
            (*n_qubits, haar_random_unitary(*n_qubits, &mut rng))
        }
    };
    let choi_true = choi_of_unitary(&u_true);
    let k = 2 * n;
    let mut action_space = BasisString::enumerate(k);
    if let Some(allowed) = whitelist {
        for b in allowed {
            if b.len() != k {
                return Err(EnvError::Core(crate::qcore::Error::BasisLength {
                    expected: k,
                    got: b.len(),
                }));
            }
        }
        let keep: std::collections::HashSet<&BasisString> = allowed.iter().collect();
        action_space.retain(|b| keep.contains(b));
        if action_space.is_empty() {
            return Err(EnvError::UnknownAction("whitelist left no actions".to_string()));
        }
    }
    let percept_space = (0..1usize << k).map(|m| percept_string(m, k)).collect();
    let action_probs = vec![None; action_space.len()];
    Ok(Environment {
        n,
        u_true,
        choi_true,
        action_space,
        percept_space,
        action_probs,
        rng: crate::rng_from_seed(interaction_seed),
    })
}

impl Environment {
    /// Channel qubit count; the process state lives on twice as many.
    pub fn n_qubits(&self) -> usize {
        self.n
    }

    pub fn action_space(&self) -> &[BasisString] {
        &self.action_space
    }

    pub fn percept_space(&self) -> &[String] {
        &self.percept_space
    }

    pub fn u_true(&self) -> &Unitary {
        &self.u_true
    }

    pub fn choi_true(&self) -> &DensityMatrix {
        &self.choi_true
    }

    /// Measure the process state in the given setting and sample one
    /// outcome.  The hidden channel is never mutated; only the sampling
    /// stream advances.
    pub fn interact(&mut self, action: &BasisString) -> Result<String> {
        let idx = self
            .action_space
            .iter()
            .position(|a| a == action)
            .ok_or_else(|| EnvError::UnknownAction(action.to_string()))?;
        if self.action_probs[idx].is_none() {
            self.action_probs[idx] = Some(born_probabilities(&self.choi_true, action)?);
        }
        let probs = self.action_probs[idx].as_ref().unwrap();
        let draw: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut outcome = probs.len() - 1;
        for (m, &p) in probs.iter().enumerate() {
            acc += p;
            if draw < acc {
                outcome = m;
                break;
            }
        }
        Ok(percept_string(outcome, 2 * self.n))
    }

    /// How far a model still is from the hidden process state, under the
    /// given measure.  Diagnostic only; agents cannot call this on their
    /// own behalf.
    pub fn remaining_utility(
        &self,
        rho: &DensityMatrix,
        id: DistanceId,
        places: u32,
    ) -> Result<f64> {
        Ok(metrics::distance(id, rho, &self.choi_true, places)?)
    }

    /// Same hidden channel, fresh sampling stream.  This is how each agent
    /// in a population gets its own environment instance.
    pub fn fork_with_seed(&self, interaction_seed: u64) -> Environment {
        Environment {
            n: self.n,
            u_true: self.u_true.clone(),
            choi_true: self.choi_true.clone(),
            action_space: self.action_space.clone(),
            percept_space: self.percept_space.clone(),
            action_probs: self.action_probs.clone(),
            rng: crate::rng_from_seed(interaction_seed),
        }
    }
}
