//! The agent itself: a one-step expectimax policy over a pool of
//! reconstruction strategies, utility and knowledge bookkeeping, and the
//! lifecycle triggers that drive reproduction and death.
//!
//! Each step the agent reconstructs a model per strategy, scores every
//! candidate measurement by the expected model shift it would cause, sums
//! those scores across strategies weighted by `2^-cost`, and performs the
//! best action.  The perceived shift feeds a knowledge signal whose
//! windowed mean decides whether the agent keeps going, spawns a child, or
//! halts.

use rand::Rng;
use thiserror::Error;

use crate::environment::{EnvError, Environment, HistoryRecord};
use crate::least::{self, CostTree, LeastBounds, LeastEstimate, TreeError, Weights};
use crate::metrics::{self, DistanceId, MetricError};
use crate::qcore::DensityMatrix;
use crate::tomography::{self, QPTDescriptor, SufficientStats};
use crate::{derive_seed, rng_from_seed, streams, SeededRng};

/// Action scores within this relative distance of the maximum count as
/// tied; the lowest action index among them wins.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Percepts this unlikely under the current model are skipped when taking
/// the expectation over hypothetical updates.
const LAMBDA_FLOOR: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("genome invalid: {0}")]
    Genome(String),
    #[error("no strategy passes the resource bounds at step {step}")]
    NoAdmissibleStrategy { step: u64 },
    #[error("agent is {0}, not active")]
    NotActive(AgentStatus),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Core(#[from] crate::qcore::Error),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, AgentError>;

/// Discounting scheme.  Only the episodic one-step mode exists: the next
/// step carries weight 1 and everything after it weight 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GammaMode {
    #[default]
    Episodic,
}

impl std::fmt::Display for GammaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("episodic")
    }
}

impl std::str::FromStr for GammaMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "episodic" => Ok(GammaMode::Episodic),
            other => Err(format!("unknown gamma mode {other:?}")),
        }
    }
}

/// How the bookkeeping strategy is picked from the admitted pool: the one
/// with the largest weight, or a weight-proportional random draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QptChoice {
    #[default]
    Argmax,
    Weighted,
}

impl std::fmt::Display for QptChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QptChoice::Argmax => "argmax",
            QptChoice::Weighted => "weighted",
        })
    }
}

impl std::str::FromStr for QptChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "argmax" => Ok(QptChoice::Argmax),
            "weighted" => Ok(QptChoice::Weighted),
            other => Err(format!("unknown strategy choice mode {other:?}")),
        }
    }
}

/// Everything heritable.  The cost tree is the only gene mutation touches;
/// the rest copies verbatim into children.
#[derive(Debug, Clone, PartialEq)]
pub struct Genome {
    pub agent_id: String,
    pub generation: u32,
    pub pool: Vec<QPTDescriptor>,
    /// Lookahead horizon; fixed at 1.
    pub t_f: u32,
    pub gamma_mode: GammaMode,
    pub distance: DistanceId,
    pub bounds: LeastBounds,
    pub weights: Weights,
    /// Per-node mutation rate used when this genome replicates.
    pub m_c: f64,
    /// Reproduction threshold on the windowed knowledge mean.
    pub k_r: f64,
    /// Death threshold on the windowed knowledge mean.
    pub k_d: f64,
    pub max_steps: u64,
    pub max_children: u32,
    /// Steps averaged for the lifecycle triggers.
    pub trigger_window: usize,
    pub cost_tree: CostTree,
    pub master_seed: u64,
}

/// The cost tree a seed genome starts from when none is configured.  It
/// reads only deterministic resources, so runs stay reproducible.
pub fn default_cost_tree() -> CostTree {
    "(add L (add A S))".parse().expect("default tree is well-formed")
}

impl Genome {
    /// A seed genome around the given strategy pool, with the documented
    /// default thresholds.
    pub fn with_defaults(agent_id: impl Into<String>, pool: Vec<QPTDescriptor>, master_seed: u64) -> Genome {
        Genome {
            agent_id: agent_id.into(),
            generation: 0,
            pool,
            t_f: 1,
            gamma_mode: GammaMode::Episodic,
            distance: DistanceId::Trace,
            bounds: LeastBounds::default(),
            weights: Weights::default(),
            m_c: 0.25,
            k_r: 0.01,
            k_d: -0.05,
            max_steps: 20000,
            max_children: 4,
            trigger_window: 100,
            cost_tree: default_cost_tree(),
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(AgentError::Genome(msg));
        // ids end up in file names and whitespace-delimited records
        let id_ok = |s: &str| {
            !s.is_empty()
                && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        };
        if !id_ok(&self.agent_id) {
            return fail(format!(
                "agent_id {:?} must be nonempty [A-Za-z0-9_-]",
                self.agent_id
            ));
        }
        if self.pool.is_empty() {
            return fail("strategy pool must be nonempty".into());
        }
        for (i, d) in self.pool.iter().enumerate() {
            if !id_ok(&d.id) {
                return fail(format!("pool entry {i} id {:?} must be nonempty [A-Za-z0-9_-]", d.id));
            }
            if d.window == 0 {
                return fail(format!("strategy {:?} has window 0", d.id));
            }
            if self.pool[..i].iter().any(|e| e.id == d.id) {
                return fail(format!("duplicate strategy id {:?}", d.id));
            }
        }
        if self.t_f != 1 {
            return fail(format!("t_f = {} unsupported; only the 1-step horizon exists", self.t_f));
        }
        if !(self.m_c >= 0.0 && self.m_c <= 1.0) {
            return fail(format!("m_c = {} outside [0, 1]", self.m_c));
        }
        if !(self.k_d <= self.k_r) {
            return fail(format!("K_D = {} must not exceed K_R = {}", self.k_d, self.k_r));
        }
        if self.trigger_window == 0 {
            return fail("trigger window must be at least 1".into());
        }
        if self.max_steps < self.trigger_window as u64 {
            return fail(format!(
                "max_steps = {} is below the trigger window {}",
                self.max_steps, self.trigger_window
            ));
        }
        self.cost_tree.validate().map_err(|e: TreeError| AgentError::Genome(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentStatus {
    Active,
    Archived,
    Dead,
}

impl std::fmt::Display for AgentStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AgentStatus::Active => "active",
            AgentStatus::Archived => "archived",
            AgentStatus::Dead => "dead",
        })
    }
}

/// What the lifecycle check asked for this step.  `Reproduce` leaves the
/// agent active; the scheduler performs the spawn and records it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LifecycleDecision {
    Continue,
    Reproduce,
    Die,
    Archive,
}

/// One step of history as logged: what was done, what came back, and every
/// derived quantity.  `t_est` is measured wall-clock time and is the only
/// field that varies between identical runs.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub qpt_id: String,
    pub action: String,
    pub percept: String,
    pub u_pred: f64,
    pub u_perc: f64,
    pub knowledge: f64,
    pub ret: f64,
    pub cost_chosen: f64,
    pub remaining: Option<f64>,
    pub t_est: f64,
}

#[derive(Debug, Clone)]
pub struct AgentState {
    /// Parallel to the genome's pool.
    pub stats: Vec<SufficientStats>,
    pub rho_t: DensityMatrix,
    pub rho_prev: DensityMatrix,
    pub step: u64,
    pub log: Vec<LogRow>,
    pub children_spawned: u32,
    pub status: AgentStatus,
}

/// Per-run knobs that are not part of the genome.
#[derive(Debug, Clone, Copy, Default)]
pub struct AgentOptions {
    /// Log the distance to the hidden channel each step.
    pub diagnostics: bool,
    pub qpt_choice: QptChoice,
}

/// Outcome of action selection, before the action is performed.
#[derive(Debug, Clone)]
pub struct Selection {
    pub action_index: usize,
    /// Index into the genome's pool.
    pub qpt_index: usize,
    pub u_pred: f64,
    pub cost_chosen: f64,
    pub t_est: f64,
    /// Per-pool-slot cost; `None` for strategies the bounds rejected.
    pub costs: Vec<Option<f64>>,
}

pub fn knowledge(u_pred: f64, u_perc: f64) -> f64 {
    u_pred - u_perc
}

/// Mean predicted utility over the last `window` logged steps.
pub fn learning_gradient(log: &[LogRow], window: usize) -> Option<f64> {
    if log.is_empty() || window == 0 {
        return None;
    }
    let tail = &log[log.len().saturating_sub(window)..];
    Some(tail.iter().map(|r| r.ret).sum::<f64>() / tail.len() as f64)
}

/// The lifecycle rule, pure in the genome and state.  Nothing fires before
/// a full trigger window; then death, reproduction, and archival are
/// checked in that order against the windowed knowledge mean, at most one
/// transition per step.
pub fn lifecycle(genome: &Genome, state: &AgentState) -> LifecycleDecision {
    let w = genome.trigger_window;
    if state.step < w as u64 || state.log.len() < w {
        return LifecycleDecision::Continue;
    }
    let tail = &state.log[state.log.len() - w..];
    let mean_k = tail.iter().map(|r| r.knowledge).sum::<f64>() / w as f64;
    if mean_k < genome.k_d {
        LifecycleDecision::Die
    } else if mean_k < genome.k_r && state.children_spawned < genome.max_children {
        LifecycleDecision::Reproduce
    } else if state.step >= genome.max_steps || state.children_spawned >= genome.max_children {
        LifecycleDecision::Archive
    } else {
        LifecycleDecision::Continue
    }
}

pub struct Agent {
    genome: Genome,
    options: AgentOptions,
    state: AgentState,
    rng: SeededRng,
}

impl Agent {
    /// Build a fresh agent for an `n_env_qubits`-qubit process.  The agent
    /// models the process state on twice that many qubits.
    pub fn new(genome: Genome, n_env_qubits: usize, options: AgentOptions) -> Result<Agent> {
        genome.validate()?;
        let k = 2 * n_env_qubits;
        let stats =
            genome.pool.iter().map(|d| SufficientStats::new(k, d.window)).collect();
        let rho = DensityMatrix::maximally_mixed(k);
        let rng = rng_from_seed(derive_seed(genome.master_seed, streams::POLICY));
        Ok(Agent {
            genome,
            options,
            state: AgentState {
                stats,
                rho_t: rho.clone(),
                rho_prev: rho,
                step: 0,
                log: Vec::new(),
                children_spawned: 0,
                status: AgentStatus::Active,
            },
            rng,
        })
    }

    pub fn genome(&self) -> &Genome {
        &self.genome
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn status(&self) -> AgentStatus {
        self.state.status
    }

    pub fn options(&self) -> AgentOptions {
        self.options
    }

    /// Count a successful spawn against the replication cap.
    pub fn record_spawn(&mut self) {
        self.state.children_spawned += 1;
    }

    /// Mark the agent dead after an unrecoverable fault.
    pub fn mark_dead(&mut self) {
        self.state.status = AgentStatus::Dead;
    }

    /// Score every action under every admitted strategy and pick the best.
    ///
    /// Per admitted strategy the current model is reconstructed, each
    /// action is valued by the expected distance between the hypothetical
    /// one-record update and the current model, and action scores sum the
    /// per-strategy values weighted by `2^-cost`.  Ties break toward the
    /// lowest action index.
    pub fn select_action(&mut self, env: &Environment) -> Result<Selection> {
        let pool = &self.genome.pool;
        let raw: Vec<(DensityMatrix, f64, LeastEstimate)> = pool
            .iter()
            .zip(&self.state.stats)
            .map(|(desc, stats)| {
                let (rho, instr) = tomography::reconstruct(desc, stats);
                let est = least::estimate_least(desc, &instr);
                (rho, instr.seconds, est)
            })
            .collect();
        let admitted: Vec<usize> = (0..pool.len())
            .filter(|&i| least::within_bounds(&raw[i].2, &self.genome.bounds))
            .collect();
        if admitted.is_empty() {
            return Err(AgentError::NoAdmissibleStrategy { step: self.state.step });
        }

        let admitted_ests: Vec<LeastEstimate> = admitted.iter().map(|&i| raw[i].2).collect();
        let mut costs: Vec<Option<f64>> = vec![None; pool.len()];
        let mut strat_weights = Vec::with_capacity(admitted.len());
        for (j, &i) in admitted.iter().enumerate() {
            let norm = least::normalize(&admitted_ests[j], &admitted_ests);
            let c = least::eval_cost(&self.genome.cost_tree, &norm, &self.genome.weights);
            costs[i] = Some(c);
            strat_weights.push(least::weight(c));
        }

        let actions = env.action_space();
        let percepts = env.percept_space();
        let mut values = vec![vec![0.0; actions.len()]; admitted.len()];
        for (j, &i) in admitted.iter().enumerate() {
            let desc = &pool[i];
            let stats = &self.state.stats[i];
            let rho_p = &raw[i].0;
            for (ai, action) in actions.iter().enumerate() {
                let lambda = tomography::predict_distribution(desc, rho_p, action)?;
                let mut value = 0.0;
                for (ei, &p) in lambda.iter().enumerate() {
                    if p <= LAMBDA_FLOOR {
                        continue;
                    }
                    let rho_hyp =
                        tomography::hypothetical_update(desc, stats, action, &percepts[ei]);
                    value += p
                        * metrics::distance(
                            self.genome.distance,
                            &rho_hyp,
                            rho_p,
                            desc.approx_places,
                        )?;
                }
                values[j][ai] = value;
            }
        }

        let mut scores = vec![0.0; actions.len()];
        for (j, row) in values.iter().enumerate() {
            for (ai, v) in row.iter().enumerate() {
                scores[ai] += strat_weights[j] * v;
            }
        }
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tol = TIE_TOLERANCE * best.max(0.0);
        let action_index = scores
            .iter()
            .position(|&s| s >= best - tol)
            .expect("max over a nonempty score vector");

        let chosen_j = match self.options.qpt_choice {
            QptChoice::Argmax => {
                let mut best_j = 0;
                for j in 1..strat_weights.len() {
                    if strat_weights[j] > strat_weights[best_j] {
                        best_j = j;
                    }
                }
                best_j
            }
            QptChoice::Weighted => {
                let total: f64 = strat_weights.iter().sum();
                let mut x = self.rng.random::<f64>() * total;
                let mut pick = strat_weights.len() - 1;
                for (j, w) in strat_weights.iter().enumerate() {
                    if x < *w {
                        pick = j;
                        break;
                    }
                    x -= w;
                }
                pick
            }
        };
        let qpt_index = admitted[chosen_j];

        Ok(Selection {
            action_index,
            qpt_index,
            u_pred: values[chosen_j][action_index],
            cost_chosen: costs[qpt_index].expect("admitted strategies are costed"),
            t_est: raw[qpt_index].1,
            costs,
        })
    }

    /// One full interaction step: select, act, absorb the percept into
    /// every strategy, update the model with the chosen one, log, and run
    /// the lifecycle check.
    pub fn step(&mut self, env: &mut Environment) -> Result<LifecycleDecision> {
        if self.state.status != AgentStatus::Active {
            return Err(AgentError::NotActive(self.state.status));
        }
        let sel = self.select_action(env)?;
        let action = env.action_space()[sel.action_index].clone();
        let percept = env.interact(&action)?;

        let rec = HistoryRecord {
            step: self.state.step,
            action: action.clone(),
            percept: percept.clone(),
        };
        for stats in &mut self.state.stats {
            stats.insert(rec.clone());
        }

        let desc = &self.genome.pool[sel.qpt_index];
        let (rho_new, _) = tomography::reconstruct(desc, &self.state.stats[sel.qpt_index]);
        self.state.rho_prev = std::mem::replace(&mut self.state.rho_t, rho_new);

        let u_perc = metrics::distance(
            self.genome.distance,
            &self.state.rho_t,
            &self.state.rho_prev,
            desc.approx_places,
        )?;
        let k_t = knowledge(sel.u_pred, u_perc);
        let remaining = if self.options.diagnostics {
            Some(env.remaining_utility(&self.state.rho_t, self.genome.distance, desc.approx_places)?)
        } else {
            None
        };

        self.state.log.push(LogRow {
            step: self.state.step,
            qpt_id: desc.id.clone(),
            action: action.to_string(),
            percept,
            u_pred: sel.u_pred,
            u_perc,
            knowledge: k_t,
            ret: sel.u_pred,
            cost_chosen: sel.cost_chosen,
            remaining,
            t_est: sel.t_est,
        });
        self.state.step += 1;

        let decision = lifecycle(&self.genome, &self.state);
        match decision {
            LifecycleDecision::Die => self.state.status = AgentStatus::Dead,
            LifecycleDecision::Archive => self.state.status = AgentStatus::Archived,
            LifecycleDecision::Continue | LifecycleDecision::Reproduce => {}
        }
        Ok(decision)
    }
}
