//! Orchestration: experiment configs, the round-robin scheduler that
//! dovetails a population of agents, the averaged-random-channels preset,
//! and the post-run report.
//!
//! A run directory is self-contained: `config.resolved` plus the copied
//! circuit (when there is one) reproduce the run, and `manifest.txt`
//! records the seeds, the scheduler mode, and one line per agent.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{
    Agent, AgentError, AgentOptions, AgentStatus, Genome, LifecycleDecision, LogRow, QptChoice,
    learning_gradient,
};
use crate::environment::{make_environment, parse_circuit, EnvError, EnvSource, Environment};
use crate::evolve::{self, EvolveError};
use crate::tomography::QPTDescriptor;
use crate::{derive_seed, rng_from_seed, streams};

/// Stream tag for per-repetition master seeds.
const REP_STREAM_BASE: u64 = 0x5EED_0000;

#[derive(Debug, Error)]
pub enum HypervisorError {
    #[error("{path}:{line}: {msg}")]
    Config { path: String, line: usize, msg: String },
    #[error("no manifest found in {0}")]
    NoManifest(PathBuf),
    #[error("{path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Evolve(#[from] EvolveError),
}

impl HypervisorError {
    /// 1 for configuration problems, 2 for runtime faults.
    pub fn exit_code(&self) -> i32 {
        match self {
            HypervisorError::Config { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, HypervisorError>;

/// Where the hidden channel comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigSource {
    /// Parsed circuit plus the path it was loaded from.
    Circuit { path: PathBuf, source: EnvSource },
    /// One Haar-random channel per repetition.
    Random { n_qubits: usize, channel_seeds: Vec<u64> },
}

/// A fully resolved experiment: scheduler knobs, channel source, strategy
/// pool, and the seed genome template.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub max_active_agents: usize,
    pub total_step_budget: Option<u64>,
    pub repeats: usize,
    pub diagnostics: bool,
    pub parallel: bool,
    pub base_seed: u64,
    pub qpt_choice: QptChoice,
    pub source: ConfigSource,
    /// Template for the seed agent; `master_seed` is replaced per
    /// repetition and `generation` starts at 0.
    pub genome: Genome,
}

// ---------------------------------------------------------------------------
// config parsing
// ---------------------------------------------------------------------------

struct RawConfig {
    path: PathBuf,
    /// (section, key, value, line)
    entries: Vec<(String, String, String, usize)>,
}

fn read_raw_config(path: &Path) -> Result<RawConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HypervisorError::Config {
        path: path.display().to_string(),
        line: 0,
        msg: format!("cannot read config: {e}"),
    })?;
    let mut entries = Vec::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| HypervisorError::Config {
                path: path.display().to_string(),
                line: lineno,
                msg: format!("malformed section header {line:?}"),
            })?;
            section = name.trim().to_string();
            if !matches!(section.as_str(), "run" | "environment" | "pool" | "genome") {
                return Err(HypervisorError::Config {
                    path: path.display().to_string(),
                    line: lineno,
                    msg: format!("unknown section {section:?}"),
                });
            }
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| HypervisorError::Config {
            path: path.display().to_string(),
            line: lineno,
            msg: format!("expected `key = value`, got {line:?}"),
        })?;
        if section.is_empty() {
            return Err(HypervisorError::Config {
                path: path.display().to_string(),
                line: lineno,
                msg: "key outside any [section]".to_string(),
            });
        }
        entries.push((
            section.clone(),
            key.trim().to_string(),
            value.trim().to_string(),
            lineno,
        ));
    }
    Ok(RawConfig { path: path.to_path_buf(), entries })
}

impl RawConfig {
    fn err(&self, line: usize, msg: String) -> HypervisorError {
        HypervisorError::Config { path: self.path.display().to_string(), line, msg }
    }

    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        let idx = self
            .entries
            .iter()
            .position(|(s, k, _, _)| s == section && k == key)?;
        let (_, _, value, line) = self.entries.remove(idx);
        Some((value, line))
    }

    fn take_all(&mut self, section: &str, key: &str) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        while let Some(entry) = self.take(section, key) {
            out.push(entry);
        }
        out
    }

    fn take_parse<T: std::str::FromStr>(
        &mut self,
        section: &str,
        key: &str,
        default: T,
    ) -> Result<T> {
        match self.take(section, key) {
            None => Ok(default),
            Some((value, line)) => value
                .parse()
                .map_err(|_| self.err(line, format!("bad value {value:?} for key {key:?}"))),
        }
    }

    fn take_bool(&mut self, section: &str, key: &str) -> Result<bool> {
        match self.take(section, key) {
            None => Ok(false),
            Some((value, line)) => match value.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                other => {
                    Err(self.err(line, format!("key {key:?} wants true or false, got {other:?}")))
                }
            },
        }
    }
}

/// Parse and validate a config file.  Relative circuit paths resolve
/// against the config file's directory, and the circuit is parsed here so
/// a broken file fails at load, not mid-run.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut raw = read_raw_config(path)?;

    let out: PathBuf = match raw.take("run", "out") {
        Some((v, _)) => PathBuf::from(v),
        None => PathBuf::from("qksa-run"),
    };
    let max_active_agents: usize = raw.take_parse("run", "max_active_agents", 4)?;
    let total_step_budget = match raw.take("run", "total_step_budget") {
        None => None,
        Some((v, _)) if v == "none" => None,
        Some((v, line)) => Some(v.parse::<u64>().map_err(|_| {
            raw.err(line, format!("bad value {v:?} for key \"total_step_budget\""))
        })?),
    };
    let repeats_entry = raw.take("run", "repeats");
    let diagnostics = raw.take_bool("run", "diagnostics")?;
    let parallel = raw.take_bool("run", "parallel")?;
    let base_seed: u64 = raw.take_parse("run", "seed", 1)?;
    let qpt_choice: QptChoice = raw.take_parse("run", "qpt_choice", QptChoice::Argmax)?;

    let source_kind = match raw.take("environment", "source") {
        Some((v, line)) => (v, line),
        None => {
            return Err(raw.err(0, "missing key \"source\" in [environment]".to_string()));
        }
    };
    let mut declared_repeats: Option<usize> = match repeats_entry {
        None => None,
        Some((value, line)) => Some(value.parse().map_err(|_| {
            raw.err(line, format!("bad value {value:?} for key \"repeats\""))
        })?),
    };
    let source = match source_kind.0.as_str() {
        "circuit" => {
            let (file, line) = raw.take("environment", "circuit").ok_or_else(|| {
                raw.err(source_kind.1, "circuit source needs key \"circuit\"".to_string())
            })?;
            if let Some((_, l)) = raw.take("environment", "qubits") {
                return Err(raw.err(l, "\"qubits\" is set by the circuit file".to_string()));
            }
            let circuit_path = if Path::new(&file).is_absolute() {
                PathBuf::from(&file)
            } else {
                path.parent().unwrap_or(Path::new(".")).join(&file)
            };
            let text = std::fs::read_to_string(&circuit_path).map_err(|e| {
                raw.err(line, format!("cannot read circuit {}: {e}", circuit_path.display()))
            })?;
            let spec = parse_circuit(&text).map_err(|e| {
                raw.err(line, format!("circuit {}: {e}", circuit_path.display()))
            })?;
            ConfigSource::Circuit { path: circuit_path, source: EnvSource::Circuit(spec) }
        }
        "random" => {
            let n_qubits: usize = raw.take_parse("environment", "qubits", 1)?;
            let (seeds_value, seeds_line) =
                raw.take("environment", "channel_seeds").ok_or_else(|| {
                    raw.err(
                        source_kind.1,
                        "random source needs key \"channel_seeds\"".to_string(),
                    )
                })?;
            let channel_seeds: Vec<u64> = seeds_value
                .split_whitespace()
                .map(|s| s.parse::<u64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| {
                    raw.err(seeds_line, format!("bad channel seed list {seeds_value:?}"))
                })?;
            if channel_seeds.is_empty() {
                return Err(raw.err(seeds_line, "channel_seeds must list at least one seed".into()));
            }
            match declared_repeats {
                None => declared_repeats = Some(channel_seeds.len()),
                Some(r) if r != channel_seeds.len() => {
                    return Err(raw.err(
                        seeds_line,
                        format!(
                            "repeats = {r} but {} channel seeds listed",
                            channel_seeds.len()
                        ),
                    ));
                }
                Some(_) => {}
            }
            ConfigSource::Random { n_qubits, channel_seeds }
        }
        other => {
            return Err(raw.err(
                source_kind.1,
                format!("source must be \"circuit\" or \"random\", got {other:?}"),
            ));
        }
    };
    let repeats = declared_repeats.unwrap_or(1);

    let mut pool = Vec::new();
    for (value, line) in raw.take_all("pool", "qpt") {
        let fields: Vec<&str> = value.split_whitespace().collect();
        let parse_field = |what: &str, s: &str| -> Result<u64> {
            s.parse::<u64>()
                .map_err(|_| raw.err(line, format!("bad qpt {what} in {value:?}")))
        };
        match fields.as_slice() {
            [id, places, window] => pool.push(QPTDescriptor::with_auto_length(
                *id,
                parse_field("approx_places", places)? as u32,
                parse_field("window", window)? as usize,
            )),
            [id, places, window, length] => pool.push(QPTDescriptor::new(
                *id,
                parse_field("approx_places", places)? as u32,
                parse_field("window", window)? as usize,
                length.parse::<f64>().map_err(|_| {
                    raw.err(line, format!("bad qpt length in {value:?}"))
                })?,
            )),
            _ => {
                return Err(raw.err(
                    line,
                    format!("qpt takes `id approx_places window [length]`, got {value:?}"),
                ));
            }
        }
    }
    if pool.is_empty() {
        return Err(raw.err(0, "missing key \"qpt\" in [pool]".to_string()));
    }

    let agent_id: String = raw.take_parse("genome", "agent_id", "a0".into())?;
    let mut genome = Genome::with_defaults(agent_id, pool, base_seed);
    genome.distance = raw.take_parse("genome", "distance", genome.distance)?;
    genome.cost_tree = raw.take_parse("genome", "cost_tree", genome.cost_tree)?;
    genome.gamma_mode = raw.take_parse("genome", "gamma_mode", genome.gamma_mode)?;
    genome.t_f = raw.take_parse("genome", "t_f", genome.t_f)?;
    genome.m_c = raw.take_parse("genome", "m_c", genome.m_c)?;
    genome.k_r = raw.take_parse("genome", "k_r", genome.k_r)?;
    genome.k_d = raw.take_parse("genome", "k_d", genome.k_d)?;
    genome.max_steps = raw.take_parse("genome", "max_steps", genome.max_steps)?;
    genome.max_children = raw.take_parse("genome", "max_children", genome.max_children)?;
    genome.trigger_window = raw.take_parse("genome", "trigger_window", genome.trigger_window)?;
    genome.weights.length = raw.take_parse("genome", "weight_length", genome.weights.length)?;
    genome.weights.energy = raw.take_parse("genome", "weight_energy", genome.weights.energy)?;
    genome.weights.approx = raw.take_parse("genome", "weight_approx", genome.weights.approx)?;
    genome.weights.space = raw.take_parse("genome", "weight_space", genome.weights.space)?;
    genome.weights.time = raw.take_parse("genome", "weight_time", genome.weights.time)?;
    for (key, slot) in [
        ("bound_length", 0usize),
        ("bound_energy", 1),
        ("bound_approx", 2),
        ("bound_space", 3),
        ("bound_time", 4),
    ] {
        if let Some((value, line)) = raw.take("genome", key) {
            let parsed = if value == "none" {
                None
            } else {
                Some(value.parse::<f64>().map_err(|_| {
                    raw.err(line, format!("bad value {value:?} for key {key:?}"))
                })?)
            };
            match slot {
                0 => genome.bounds.length = parsed,
                1 => genome.bounds.energy = parsed,
                2 => genome.bounds.approx = parsed,
                3 => genome.bounds.space = parsed,
                _ => genome.bounds.time = parsed,
            }
        }
    }

    if let Some((section, key, _, line)) = raw.entries.first() {
        return Err(raw.err(*line, format!("unknown key {key:?} in [{section}]")));
    }

    if repeats < 1 {
        return Err(raw.err(0, "repeats must be at least 1".to_string()));
    }
    if max_active_agents < 1 {
        return Err(raw.err(0, "max_active_agents must be at least 1".to_string()));
    }
    genome.validate().map_err(|e| raw.err(0, e.to_string()))?;

    Ok(ExperimentConfig {
        out,
        max_active_agents,
        total_step_budget,
        repeats,
        diagnostics,
        parallel,
        base_seed,
        qpt_choice,
        source,
        genome,
    })
}

/// Render the effective config.  The result parses back via
/// [`load_config`]; a circuit source is referenced as `environment.circ`
/// next to the rendered file, which is where [`run`] copies it.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    s.push_str("[run]\n");
    let _ = writeln!(s, "max_active_agents = {}", cfg.max_active_agents);
    match cfg.total_step_budget {
        Some(b) => {
            let _ = writeln!(s, "total_step_budget = {b}");
        }
        None => s.push_str("total_step_budget = none\n"),
    }
    let _ = writeln!(s, "repeats = {}", cfg.repeats);
    let _ = writeln!(s, "diagnostics = {}", cfg.diagnostics);
    let _ = writeln!(s, "parallel = {}", cfg.parallel);
    let _ = writeln!(s, "seed = {}", cfg.base_seed);
    let _ = writeln!(s, "qpt_choice = {}", cfg.qpt_choice);
    s.push_str("\n[environment]\n");
    match &cfg.source {
        ConfigSource::Circuit { .. } => {
            s.push_str("source = circuit\ncircuit = environment.circ\n");
        }
        ConfigSource::Random { n_qubits, channel_seeds } => {
            s.push_str("source = random\n");
            let _ = writeln!(s, "qubits = {n_qubits}");
            let seeds: Vec<String> = channel_seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "channel_seeds = {}", seeds.join(" "));
        }
    }
    s.push_str("\n[pool]\n");
    for d in &cfg.genome.pool {
        let _ = writeln!(s, "qpt = {} {} {} {}", d.id, d.approx_places, d.window, d.length_const);
    }
    s.push_str("\n[genome]\n");
    let g = &cfg.genome;
    let _ = writeln!(s, "agent_id = {}", g.agent_id);
    let _ = writeln!(s, "distance = {}", g.distance);
    let _ = writeln!(s, "cost_tree = {}", g.cost_tree);
    let _ = writeln!(s, "gamma_mode = {}", g.gamma_mode);
    let _ = writeln!(s, "t_f = {}", g.t_f);
    let _ = writeln!(s, "m_c = {}", g.m_c);
    let _ = writeln!(s, "k_r = {}", g.k_r);
    let _ = writeln!(s, "k_d = {}", g.k_d);
    let _ = writeln!(s, "max_steps = {}", g.max_steps);
    let _ = writeln!(s, "max_children = {}", g.max_children);
    let _ = writeln!(s, "trigger_window = {}", g.trigger_window);
    let _ = writeln!(s, "weight_length = {}", g.weights.length);
    let _ = writeln!(s, "weight_energy = {}", g.weights.energy);
    let _ = writeln!(s, "weight_approx = {}", g.weights.approx);
    let _ = writeln!(s, "weight_space = {}", g.weights.space);
    let _ = writeln!(s, "weight_time = {}", g.weights.time);
    let bound = |b: Option<f64>| b.map_or_else(|| "none".to_string(), |v| v.to_string());
    let _ = writeln!(s, "bound_length = {}", bound(g.bounds.length));
    let _ = writeln!(s, "bound_energy = {}", bound(g.bounds.energy));
    let _ = writeln!(s, "bound_approx = {}", bound(g.bounds.approx));
    let _ = writeln!(s, "bound_space = {}", bound(g.bounds.space));
    let _ = writeln!(s, "bound_time = {}", bound(g.bounds.time));
    s
}

// ---------------------------------------------------------------------------
// the scheduler
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AgentSummary {
    pub id: String,
    pub generation: u32,
    pub parent: Option<String>,
    pub master_seed: u64,
    pub status: AgentStatus,
    pub steps: u64,
    pub children: u32,
    pub kbar: Option<f64>,
    pub gradient: Option<f64>,
    pub cost_tree: String,
}

#[derive(Debug, Clone)]
pub struct RepSummary {
    pub dir: PathBuf,
    pub agents: Vec<AgentSummary>,
    pub steps_used: u64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out: PathBuf,
    pub reps: Vec<RepSummary>,
}

struct Slot {
    agent: Agent,
    env: Environment,
    parent: Option<String>,
}

fn windowed_knowledge_mean(log: &[LogRow], window: usize) -> Option<f64> {
    if log.is_empty() {
        return None;
    }
    let tail = &log[log.len().saturating_sub(window)..];
    Some(tail.iter().map(|r| r.knowledge).sum::<f64>() / tail.len() as f64)
}

fn summarize(slot: &Slot) -> AgentSummary {
    let g = slot.agent.genome();
    let st = slot.agent.state();
    AgentSummary {
        id: g.agent_id.clone(),
        generation: g.generation,
        parent: slot.parent.clone(),
        master_seed: g.master_seed,
        status: slot.agent.status(),
        steps: st.step,
        children: st.children_spawned,
        kbar: windowed_knowledge_mean(&st.log, g.trigger_window),
        gradient: learning_gradient(&st.log, g.trigger_window),
        cost_tree: g.cost_tree.to_string(),
    }
}

fn csv_header(diagnostics: bool) -> &'static str {
    if diagnostics {
        "step,agent_id,qpt_id,action,percept,u_pred,u_perc,knowledge,return,cost_chosen,remaining,t_est"
    } else {
        "step,agent_id,qpt_id,action,percept,u_pred,u_perc,knowledge,return,cost_chosen,t_est"
    }
}

fn render_csv(agent: &Agent, diagnostics: bool) -> String {
    let id = &agent.genome().agent_id;
    let mut out = String::with_capacity(64 + agent.state().log.len() * 96);
    out.push_str(csv_header(diagnostics));
    out.push('\n');
    for r in &agent.state().log {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step, id, r.qpt_id, r.action, r.percept, r.u_pred, r.u_perc, r.knowledge, r.ret,
            r.cost_chosen
        );
        if diagnostics {
            let _ = write!(out, ",{}", r.remaining.unwrap_or(f64::NAN));
        }
        let _ = writeln!(out, ",{}", r.t_est);
    }
    out
}

fn flush_agent_csv(dir: &Path, agent: &Agent, diagnostics: bool) -> Result<()> {
    let path = dir.join("agents").join(format!("{}.csv", agent.genome().agent_id));
    std::fs::write(path, render_csv(agent, diagnostics))?;
    Ok(())
}

fn manifest_agent_line(s: &AgentSummary) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
    format!(
        "agent = {} {} {} {} {} {} {} {} {} {}\n",
        s.id,
        s.generation,
        s.parent.as_deref().unwrap_or("-"),
        s.master_seed,
        s.status,
        s.steps,
        s.children,
        opt(s.kbar),
        opt(s.gradient),
        s.cost_tree
    )
}

fn run_one_repetition(
    cfg: &ExperimentConfig,
    rep: usize,
    rep_dir: &Path,
    config_hash: &str,
) -> Result<RepSummary> {
    std::fs::create_dir_all(rep_dir.join("agents"))?;
    std::fs::create_dir_all(rep_dir.join("spawn"))?;

    let rep_master = derive_seed(cfg.base_seed, REP_STREAM_BASE + rep as u64);
    let (env_source, source_line) = match &cfg.source {
        ConfigSource::Circuit { source, .. } => {
            (source.clone(), "source = circuit environment.circ".to_string())
        }
        ConfigSource::Random { n_qubits, channel_seeds } => {
            let seed = channel_seeds[rep];
            (
                EnvSource::Random { n_qubits: *n_qubits, seed },
                format!("source = random {seed}"),
            )
        }
    };

    let mut manifest = String::new();
    let _ = writeln!(manifest, "config_hash = {config_hash}");
    let _ = writeln!(
        manifest,
        "scheduler = {}",
        if cfg.parallel { "parallel" } else { "sequential" }
    );
    let _ = writeln!(manifest, "base_seed = {}", cfg.base_seed);
    let _ = writeln!(manifest, "repetition = {rep}");
    manifest.push_str(&source_line);
    manifest.push('\n');

    let mut seed_genome = cfg.genome.clone();
    seed_genome.master_seed = rep_master;
    let options = AgentOptions { diagnostics: cfg.diagnostics, qpt_choice: cfg.qpt_choice };

    let base_env = make_environment(&env_source, 0, None)?;
    let n_qubits = base_env.n_qubits();
    let make_slot = |genome: Genome, parent: Option<String>| -> Result<Slot> {
        let env_seed = derive_seed(genome.master_seed, streams::ENVIRONMENT);
        let env = base_env.fork_with_seed(env_seed);
        let agent = Agent::new(genome, n_qubits, options)?;
        Ok(Slot { agent, env, parent })
    };

    let mut active: Vec<Slot> = vec![make_slot(seed_genome, None)?];
    let mut waitlist: VecDeque<(PathBuf, String)> = VecDeque::new();
    let mut finished: Vec<AgentSummary> = Vec::new();
    let mut steps_used: u64 = 0;
    let budget = cfg.total_step_budget.unwrap_or(u64::MAX);

    while !active.is_empty() && steps_used < budget {
        // one dovetailing cycle: each active agent takes one step
        let cycle_len = active.len().min((budget - steps_used) as usize);
        let decisions: Vec<std::result::Result<LifecycleDecision, AgentError>> =
            if cfg.parallel && cycle_len == active.len() {
                active
                    .par_iter_mut()
                    .map(|slot| slot.agent.step(&mut slot.env))
                    .collect()
            } else {
                active
                    .iter_mut()
                    .take(cycle_len)
                    .map(|slot| slot.agent.step(&mut slot.env))
                    .collect()
            };
        steps_used += decisions.len() as u64;

        let mut retired = Vec::new();
        for (i, decision) in decisions.into_iter().enumerate() {
            let slot = &mut active[i];
            match decision {
                Ok(LifecycleDecision::Continue) => {}
                Ok(LifecycleDecision::Reproduce) => {
                    let parent = slot.agent.genome();
                    let spawned = slot.agent.state().children_spawned;
                    let mut rng = rng_from_seed(derive_seed(
                        parent.master_seed,
                        streams::MUTATION_BASE + spawned as u64,
                    ));
                    let spawn = evolve::replicate(parent, spawned, &mut rng)?;
                    let path = evolve::write_spawn_file(&rep_dir.join("spawn"), &spawn)?;
                    waitlist.push_back((path, parent.agent_id.clone()));
                    slot.agent.record_spawn();
                }
                Ok(LifecycleDecision::Die) | Ok(LifecycleDecision::Archive) => {
                    retired.push(i);
                }
                Err(e) => {
                    let _ = writeln!(
                        manifest,
                        "fault = {} {e}",
                        slot.agent.genome().agent_id
                    );
                    slot.agent.mark_dead();
                    retired.push(i);
                }
            }
        }
        for &i in retired.iter().rev() {
            let slot = active.remove(i);
            flush_agent_csv(rep_dir, &slot.agent, cfg.diagnostics)?;
            let summary = summarize(&slot);
            manifest.push_str(&manifest_agent_line(&summary));
            finished.push(summary);
        }
        // between cycles: instantiate waitlisted spawn files while there
        // is capacity, in creation order, by reading them back from disk
        while active.len() < cfg.max_active_agents {
            let Some((path, parent_id)) = waitlist.pop_front() else { break };
            let spawn = evolve::read_spawn_file(&path)?;
            active.push(make_slot(spawn.genome, Some(parent_id))?);
        }
    }

    // budget exhausted with agents still active: flush them as they stand
    for slot in &active {
        flush_agent_csv(rep_dir, &slot.agent, cfg.diagnostics)?;
        let summary = summarize(slot);
        manifest.push_str(&manifest_agent_line(&summary));
        finished.push(summary);
    }

    std::fs::write(rep_dir.join("manifest.txt"), manifest)?;
    Ok(RepSummary { dir: rep_dir.to_path_buf(), agents: finished, steps_used })
}

/// Execute a configured run: write `config.resolved`, copy the circuit in,
/// and run every repetition through the scheduler.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    std::fs::create_dir_all(&cfg.out)?;
    let resolved = serialize_config(cfg);
    std::fs::write(cfg.out.join("config.resolved"), &resolved)?;
    let config_hash: String = Sha256::digest(resolved.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    if let ConfigSource::Circuit { path, .. } = &cfg.source {
        std::fs::copy(path, cfg.out.join("environment.circ"))?;
    }

    let mut reps = Vec::with_capacity(cfg.repeats);
    for rep in 0..cfg.repeats {
        let rep_dir = if cfg.repeats == 1 {
            cfg.out.clone()
        } else {
            cfg.out.join(format!("rep-{rep:03}"))
        };
        reps.push(run_one_repetition(cfg, rep, &rep_dir, &config_hash)?);
    }
    Ok(RunSummary { out: cfg.out.clone(), reps })
}

// ---------------------------------------------------------------------------
// the averaged-random-channels preset
// ---------------------------------------------------------------------------

/// Options for the averaged learning-curve experiment: one agent per
/// random 1-qubit channel, curves averaged across channels.
#[derive(Debug, Clone)]
pub struct S5Options {
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub out: PathBuf,
}

/// Seed list for the preset: `count` seeds fanned out from a base seed.
pub fn s5_seed_list(base_seed: u64, count: u32) -> Vec<u64> {
    (0..count as u64).map(|i| derive_seed(base_seed, 0xE5_0000 + i)).collect()
}

/// The two-strategy pool the preset ships: a coarse wide-window strategy
/// and a fine narrower one.
pub fn s5_pool() -> Vec<QPTDescriptor> {
    vec![
        QPTDescriptor::with_auto_length("qpt0", 5, 16384),
        QPTDescriptor::with_auto_length("qpt1", 8, 8192),
    ]
}

fn s5_genome(seed: u64, steps: u64) -> Genome {
    let mut g = Genome::with_defaults("a0", s5_pool(), seed);
    // lifecycle disabled: the preset observes learning curves, not evolution
    g.k_r = f64::NEG_INFINITY;
    g.k_d = f64::NEG_INFINITY;
    g.max_steps = steps;
    g.trigger_window = steps.min(100).max(1) as usize;
    g
}

/// Run the preset and write `experiment_s5.csv`: per-step means across
/// channels of predicted utility, perceived utility, knowledge, and the
/// distance still separating the model from the hidden channel.
pub fn experiment_s5(opts: &S5Options) -> Result<PathBuf> {
    let per_seed: Vec<std::result::Result<Vec<LogRow>, HypervisorError>> = opts
        .seeds
        .par_iter()
        .map(|&seed| {
            let source = EnvSource::Random { n_qubits: 1, seed };
            let mut env =
                make_environment(&source, derive_seed(seed, streams::ENVIRONMENT), None)?;
            let options = AgentOptions { diagnostics: true, qpt_choice: QptChoice::Argmax };
            let mut agent = Agent::new(s5_genome(seed, opts.steps), 1, options)?;
            for _ in 0..opts.steps {
                if agent.status() != AgentStatus::Active {
                    break;
                }
                agent.step(&mut env)?;
            }
            Ok(agent.state().log.clone())
        })
        .collect();

    let mut logs = Vec::with_capacity(per_seed.len());
    for r in per_seed {
        logs.push(r?);
    }

    std::fs::create_dir_all(&opts.out)?;
    let mut csv = String::from("step,mean_u_pred,mean_u_perc,mean_knowledge,mean_remaining\n");
    let n = logs.len() as f64;
    for t in 0..opts.steps as usize {
        let mut u_pred = 0.0;
        let mut u_perc = 0.0;
        let mut know = 0.0;
        let mut remaining = 0.0;
        for log in &logs {
            let row = &log[t];
            u_pred += row.u_pred;
            u_perc += row.u_perc;
            know += row.knowledge;
            remaining += row.remaining.expect("preset runs with diagnostics on");
        }
        let _ = writeln!(
            csv,
            "{t},{},{},{},{}",
            u_pred / n,
            u_perc / n,
            know / n,
            remaining / n
        );
    }
    let csv_path = opts.out.join("experiment_s5.csv");
    std::fs::write(&csv_path, csv)?;

    let seeds: Vec<String> = opts.seeds.iter().map(u64::to_string).collect();
    let manifest = format!(
        "experiment = s5\nsteps = {}\nchannels = {}\nseeds = {}\n",
        opts.steps,
        opts.seeds.len(),
        seeds.join(" ")
    );
    std::fs::write(opts.out.join("manifest.txt"), manifest)?;
    Ok(csv_path)
}

// ---------------------------------------------------------------------------
// reporting
// ---------------------------------------------------------------------------

fn parse_manifest_agents(path: &Path) -> Result<Vec<AgentSummary>> {
    let text = std::fs::read_to_string(path)?;
    let mut agents = Vec::new();
    for line in text.lines() {
        let Some(rest) = line.strip_prefix("agent = ") else { continue };
        let fields: Vec<&str> = rest.splitn(10, ' ').collect();
        if fields.len() != 10 {
            return Err(HypervisorError::Manifest {
                path: path.display().to_string(),
                msg: format!("malformed agent line {rest:?}"),
            });
        }
        let bad = |what: &str| HypervisorError::Manifest {
            path: path.display().to_string(),
            msg: format!("bad {what} in agent line {rest:?}"),
        };
        let opt = |s: &str| -> Option<f64> { s.parse().ok() };
        let status = match fields[4] {
            "active" => AgentStatus::Active,
            "archived" => AgentStatus::Archived,
            "dead" => AgentStatus::Dead,
            _ => return Err(bad("status")),
        };
        agents.push(AgentSummary {
            id: fields[0].to_string(),
            generation: fields[1].parse().map_err(|_| bad("generation"))?,
            parent: (fields[2] != "-").then(|| fields[2].to_string()),
            master_seed: fields[3].parse().map_err(|_| bad("master_seed"))?,
            status,
            steps: fields[5].parse().map_err(|_| bad("steps"))?,
            children: fields[6].parse().map_err(|_| bad("children"))?,
            kbar: opt(fields[7]),
            gradient: opt(fields[8]),
            cost_tree: fields[9].to_string(),
        });
    }
    Ok(agents)
}

fn render_lineage(out: &mut String, agents: &[AgentSummary], parent: Option<&str>, depth: usize) {
    for a in agents.iter().filter(|a| a.parent.as_deref() == parent) {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        let _ = writeln!(
            out,
            "{:indent$}{} gen {} {} steps {} children {} kbar {} gradient {} tree {}",
            "",
            a.id,
            a.generation,
            a.status,
            a.steps,
            a.children,
            opt(a.kbar),
            opt(a.gradient),
            a.cost_tree,
            indent = depth * 2
        );
        render_lineage(out, agents, Some(&a.id), depth + 1);
    }
}

/// Summarize a finished run directory: lineage per repetition and the
/// surviving cost trees ranked by how small their remaining learning
/// gradient is.
pub fn report(run_dir: &Path) -> Result<String> {
    let mut manifests = Vec::new();
    if run_dir.join("manifest.txt").is_file() {
        manifests.push(run_dir.join("manifest.txt"));
    } else {
        let mut reps: Vec<PathBuf> = std::fs::read_dir(run_dir)
            .map_err(|_| HypervisorError::NoManifest(run_dir.to_path_buf()))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir() && p.join("manifest.txt").is_file())
            .collect();
        reps.sort();
        for rep in reps {
            manifests.push(rep.join("manifest.txt"));
        }
    }
    if manifests.is_empty() {
        return Err(HypervisorError::NoManifest(run_dir.to_path_buf()));
    }

    let mut out = String::new();
    let _ = writeln!(out, "run: {}", run_dir.display());
    let mut survivors: Vec<AgentSummary> = Vec::new();
    for manifest in &manifests {
        let agents = parse_manifest_agents(manifest)?;
        let label = manifest
            .parent()
            .and_then(|p| p.file_name())
            .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned());
        let _ = writeln!(out, "\n{label}: {} agent(s)", agents.len());
        render_lineage(&mut out, &agents, None, 1);
        survivors.extend(agents.into_iter().filter(|a| a.status != AgentStatus::Dead));
    }

    survivors.sort_by(|a, b| {
        let key = |s: &AgentSummary| s.gradient.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b)).then_with(|| a.id.cmp(&b.id))
    });
    out.push_str("\nsurvivors by learning gradient (most converged first):\n");
    if survivors.is_empty() {
        out.push_str("  none\n");
    }
    for (i, a) in survivors.iter().enumerate() {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        let _ = writeln!(out, "  {}. {} gradient {} tree {}", i + 1, a.id, opt(a.gradient), a.cost_tree);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("exp.conf");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    fn minimal_config(dir: &Path) -> PathBuf {
        std::fs::write(dir.join("id.circ"), "qubits 1\n").unwrap();
        write_config(
            dir,
            "[environment]\nsource = circuit\ncircuit = id.circ\n\n[pool]\nqpt = qpt0 5 256\n",
        )
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config(&minimal_config(dir.path())).unwrap();
        assert_eq!(cfg.repeats, 1);
        assert_eq!(cfg.max_active_agents, 4);
        assert_eq!(cfg.total_step_budget, None);
        assert!(!cfg.diagnostics);
        assert!(!cfg.parallel);
        assert_eq!(cfg.genome.agent_id, "a0");
        assert_eq!(cfg.genome.m_c, 0.25);
        assert_eq!(cfg.genome.pool.len(), 1);
        assert_eq!(cfg.qpt_choice, QptChoice::Argmax);
    }

    #[test]
    fn config_errors_name_key_and_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("id.circ"), "qubits 1\n").unwrap();
        let path = write_config(
            dir.path(),
            "[run]\nrepeats = 0\n\n[environment]\nsource = circuit\ncircuit = id.circ\n\n[pool]\nqpt = qpt0 5 256\n",
        );
        match load_config(&path) {
            Err(HypervisorError::Config { msg, .. }) => assert!(msg.contains("repeats")),
            other => panic!("{other:?}"),
        }

        let path = write_config(
            dir.path(),
            "[environment]\nsource = circuit\ncircuit = id.circ\nmood = blue\n\n[pool]\nqpt = qpt0 5 256\n",
        );
        match load_config(&path) {
            Err(HypervisorError::Config { line, msg, .. }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("mood"));
            }
            other => panic!("{other:?}"),
        }

        let path = write_config(dir.path(), "[weather]\nsunny = yes\n");
        match load_config(&path) {
            Err(HypervisorError::Config { line, msg, .. }) => {
                assert_eq!(line, 1);
                assert!(msg.contains("weather"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_requires_an_existing_circuit() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "[environment]\nsource = circuit\ncircuit = ghost.circ\n\n[pool]\nqpt = qpt0 5 256\n",
        );
        match load_config(&path) {
            Err(HypervisorError::Config { msg, .. }) => assert!(msg.contains("ghost.circ")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn random_source_ties_repeats_to_seed_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "[environment]\nsource = random\nchannel_seeds = 7 8 9\n\n[pool]\nqpt = qpt0 5 128\n",
        );
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.repeats, 3);
        match cfg.source {
            ConfigSource::Random { n_qubits, channel_seeds } => {
                assert_eq!(n_qubits, 1);
                assert_eq!(channel_seeds, vec![7, 8, 9]);
            }
            other => panic!("{other:?}"),
        }

        let path = write_config(
            dir.path(),
            "[run]\nrepeats = 2\n\n[environment]\nsource = random\nchannel_seeds = 7 8 9\n\n[pool]\nqpt = qpt0 5 128\n",
        );
        assert!(matches!(load_config(&path), Err(HypervisorError::Config { .. })));
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config(&minimal_config(dir.path())).unwrap();
        let rendered = serialize_config(&cfg);
        // the resolved text references the copied circuit, so place one
        let out = tempfile::tempdir().unwrap();
        std::fs::copy(dir.path().join("id.circ"), out.path().join("environment.circ")).unwrap();
        let resolved_path = out.path().join("config.resolved");
        std::fs::write(&resolved_path, &rendered).unwrap();
        let reloaded = load_config(&resolved_path).unwrap();
        assert_eq!(reloaded.genome, cfg.genome);
        assert_eq!(reloaded.repeats, cfg.repeats);
        assert_eq!(reloaded.base_seed, cfg.base_seed);
        assert_eq!(serialize_config(&reloaded), rendered);
    }

    #[test]
    fn s5_seed_list_is_stable() {
        let a = s5_seed_list(1, 20);
        let b = s5_seed_list(1, 20);
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        let mut dedup = a.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 20, "seed collisions");
    }

    #[test]
    fn report_needs_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        match report(dir.path()) {
            Err(HypervisorError::NoManifest(p)) => assert_eq!(p, dir.path()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_agent_lines_round_trip() {
        let summary = AgentSummary {
            id: "a0-1".into(),
            generation: 1,
            parent: Some("a0".into()),
            master_seed: 99,
            status: AgentStatus::Archived,
            steps: 1234,
            children: 2,
            kbar: Some(0.00125),
            gradient: Some(0.5),
            cost_tree: "(add L (add A S))".into(),
        };
        let line = manifest_agent_line(&summary);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        std::fs::write(&path, &line).unwrap();
        let parsed = parse_manifest_agents(&path).unwrap();
        assert_eq!(parsed.len(), 1);
        let p = &parsed[0];
        assert_eq!(p.id, summary.id);
        assert_eq!(p.parent, summary.parent);
        assert_eq!(p.status, AgentStatus::Archived);
        assert_eq!(p.kbar, summary.kbar);
        assert_eq!(p.gradient, summary.gradient);
        assert_eq!(p.cost_tree, summary.cost_tree);
    }
}
