//! Genome persistence and replication.
//!
//! A parent replicates by writing a spawn file: its complete genome with
//! the cost tree mutated, a fresh master seed, and a bumped generation.
//! The scheduler instantiates children from these files, so a spawn file
//! must carry everything needed to rebuild the agent.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::agent::{AgentError, GammaMode, Genome};
use crate::least::{self, CostTree};
use crate::metrics::DistanceId;
use crate::tomography::QPTDescriptor;
use crate::{derive_seed, streams};

pub const SPAWN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error("replication cap of {0} children reached")]
    CapReached(u32),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing required key {0:?}")]
    MissingKey(&'static str),
    #[error(transparent)]
    Invalid(#[from] AgentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvolveError>;

/// A serialized child: everything the scheduler needs to instantiate it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpawnFile {
    pub format_version: u32,
    pub parent_id: String,
    pub genome: Genome,
}

/// Produce a child genome: all genes copied verbatim except the mutated
/// cost tree, a derived master seed, and the lineage fields.
pub fn replicate(
    parent: &Genome,
    children_spawned: u32,
    rng: &mut impl Rng,
) -> Result<SpawnFile> {
    if children_spawned >= parent.max_children {
        return Err(EvolveError::CapReached(parent.max_children));
    }
    let mut child = parent.clone();
    child.agent_id = format!("{}-{}", parent.agent_id, children_spawned + 1);
    child.generation = parent.generation + 1;
    child.master_seed =
        derive_seed(parent.master_seed, streams::CHILD_BASE + children_spawned as u64);
    child.cost_tree = least::mutate(&parent.cost_tree, parent.m_c, rng);
    Ok(SpawnFile {
        format_version: SPAWN_FORMAT_VERSION,
        parent_id: parent.agent_id.clone(),
        genome: child,
    })
}

/// Line-oriented `key = value` rendering of a genome.  Bounds serialize as
/// `none` when absent; each pool entry is one `qpt` line.
pub fn genome_serialize(g: &Genome) -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    line("agent_id", g.agent_id.clone());
    line("generation", g.generation.to_string());
    line("t_f", g.t_f.to_string());
    line("gamma_mode", g.gamma_mode.to_string());
    line("distance", g.distance.to_string());
    line("m_c", g.m_c.to_string());
    line("k_r", g.k_r.to_string());
    line("k_d", g.k_d.to_string());
    line("max_steps", g.max_steps.to_string());
    line("max_children", g.max_children.to_string());
    line("trigger_window", g.trigger_window.to_string());
    line("master_seed", g.master_seed.to_string());
    line("cost_tree", g.cost_tree.to_string());
    for d in &g.pool {
        line("qpt", format!("{} {} {} {}", d.id, d.approx_places, d.window, d.length_const));
    }
    line("weight_length", g.weights.length.to_string());
    line("weight_energy", g.weights.energy.to_string());
    line("weight_approx", g.weights.approx.to_string());
    line("weight_space", g.weights.space.to_string());
    line("weight_time", g.weights.time.to_string());
    let bound = |b: Option<f64>| b.map_or_else(|| "none".to_string(), |v| v.to_string());
    line("bound_length", bound(g.bounds.length));
    line("bound_energy", bound(g.bounds.energy));
    line("bound_approx", bound(g.bounds.approx));
    line("bound_space", bound(g.bounds.space));
    line("bound_time", bound(g.bounds.time));
    out
}

struct Entries {
    /// key -> (1-based line, value)
    scalar: HashMap<String, (usize, String)>,
    /// repeated `qpt` lines in order
    pool: Vec<(usize, String)>,
}

fn split_entries<'a>(
    lines: impl Iterator<Item = (usize, &'a str)>,
) -> Result<Entries> {
    let mut scalar = HashMap::new();
    let mut pool = Vec::new();
    for (lineno, raw) in lines {
        let text = raw.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let (key, value) = text.split_once('=').ok_or_else(|| EvolveError::Parse {
            line: lineno,
            msg: format!("expected `key = value`, got {text:?}"),
        })?;
        let key = key.trim();
        let value = value.trim().to_string();
        if key == "qpt" {
            pool.push((lineno, value));
        } else if scalar.insert(key.to_string(), (lineno, value)).is_some() {
            return Err(EvolveError::Parse {
                line: lineno,
                msg: format!("duplicate key {key:?}"),
            });
        }
    }
    Ok(Entries { scalar, pool })
}

fn take<T: std::str::FromStr>(entries: &mut Entries, key: &'static str) -> Result<T> {
    let (line, value) = entries.scalar.remove(key).ok_or(EvolveError::MissingKey(key))?;
    value.parse().map_err(|_| EvolveError::Parse {
        line,
        msg: format!("bad value {value:?} for key {key:?}"),
    })
}

fn take_bound(entries: &mut Entries, key: &'static str) -> Result<Option<f64>> {
    let (line, value) = entries.scalar.remove(key).ok_or(EvolveError::MissingKey(key))?;
    if value == "none" {
        return Ok(None);
    }
    value
        .parse()
        .map(Some)
        .map_err(|_| EvolveError::Parse { line, msg: format!("bad value {value:?} for key {key:?}") })
}

fn parse_qpt(line: usize, value: &str) -> Result<QPTDescriptor> {
    let fields: Vec<&str> = value.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(EvolveError::Parse {
            line,
            msg: format!("qpt takes `id approx_places window length`, got {value:?}"),
        });
    }
    let bad = |what: &str| EvolveError::Parse {
        line,
        msg: format!("bad qpt {what} {:?}", value),
    };
    Ok(QPTDescriptor {
        id: fields[0].to_string(),
        approx_places: fields[1].parse().map_err(|_| bad("approx_places"))?,
        window: fields[2].parse().map_err(|_| bad("window"))?,
        length_const: fields[3].parse().map_err(|_| bad("length"))?,
    })
}

fn genome_from_entries(mut entries: Entries) -> Result<Genome> {
    let genome = Genome {
        agent_id: take(&mut entries, "agent_id")?,
        generation: take(&mut entries, "generation")?,
        t_f: take(&mut entries, "t_f")?,
        gamma_mode: take::<GammaMode>(&mut entries, "gamma_mode")?,
        distance: take::<DistanceId>(&mut entries, "distance")?,
        m_c: take(&mut entries, "m_c")?,
        k_r: take(&mut entries, "k_r")?,
        k_d: take(&mut entries, "k_d")?,
        max_steps: take(&mut entries, "max_steps")?,
        max_children: take(&mut entries, "max_children")?,
        trigger_window: take(&mut entries, "trigger_window")?,
        master_seed: take(&mut entries, "master_seed")?,
        cost_tree: take::<CostTree>(&mut entries, "cost_tree")?,
        pool: entries
            .pool
            .iter()
            .map(|(line, value)| parse_qpt(*line, value))
            .collect::<Result<Vec<_>>>()?,
        weights: crate::least::Weights {
            length: take(&mut entries, "weight_length")?,
            energy: take(&mut entries, "weight_energy")?,
            approx: take(&mut entries, "weight_approx")?,
            space: take(&mut entries, "weight_space")?,
            time: take(&mut entries, "weight_time")?,
        },
        bounds: crate::least::LeastBounds {
            length: take_bound(&mut entries, "bound_length")?,
            energy: take_bound(&mut entries, "bound_energy")?,
            approx: take_bound(&mut entries, "bound_approx")?,
            space: take_bound(&mut entries, "bound_space")?,
            time: take_bound(&mut entries, "bound_time")?,
        },
    };
    if genome.pool.is_empty() {
        return Err(EvolveError::MissingKey("qpt"));
    }
    if let Some((key, (line, _))) = entries.scalar.iter().min_by_key(|(_, (line, _))| *line) {
        return Err(EvolveError::Parse { line: *line, msg: format!("unknown key {key:?}") });
    }
    genome.validate()?;
    Ok(genome)
}

pub fn genome_parse(text: &str) -> Result<Genome> {
    genome_from_entries(split_entries(
        text.lines().enumerate().map(|(i, l)| (i + 1, l)),
    )?)
}

pub fn spawn_serialize(spawn: &SpawnFile) -> String {
    format!(
        "format_version = {}\nparent_id = {}\n{}",
        spawn.format_version,
        spawn.parent_id,
        genome_serialize(&spawn.genome)
    )
}

pub fn spawn_parse(text: &str) -> Result<SpawnFile> {
    let mut entries = split_entries(text.lines().enumerate().map(|(i, l)| (i + 1, l)))?;
    let format_version: u32 = take(&mut entries, "format_version")?;
    if format_version != SPAWN_FORMAT_VERSION {
        return Err(EvolveError::Parse {
            line: 1,
            msg: format!(
                "unsupported format_version {format_version}, expected {SPAWN_FORMAT_VERSION}"
            ),
        });
    }
    let parent_id: String = take(&mut entries, "parent_id")?;
    let genome = genome_from_entries(entries)?;
    Ok(SpawnFile { format_version, parent_id, genome })
}

/// Atomically write a spawn file into `dir` as `agent_<id>.genome`.
pub fn write_spawn_file(dir: &Path, spawn: &SpawnFile) -> Result<PathBuf> {
    let name = format!("agent_{}.genome", spawn.genome.agent_id);
    let tmp = dir.join(format!(".{name}.tmp"));
    let path = dir.join(name);
    std::fs::write(&tmp, spawn_serialize(spawn))?;
    std::fs::rename(&tmp, &path)?;
    Ok(path)
}

pub fn read_spawn_file(path: &Path) -> Result<SpawnFile> {
    spawn_parse(&std::fs::read_to_string(path)?)
}
