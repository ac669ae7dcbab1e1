use std::f64::consts::FRAC_1_SQRT_2;
use std::path::Path;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::Rng;

use qksa::agent::{
    default_cost_tree, lifecycle, Agent, AgentOptions, AgentState, AgentStatus, Genome,
    LifecycleDecision, LogRow,
};
use qksa::environment::{make_environment, parse_circuit, EnvSource, HistoryRecord};
use qksa::evolve::replicate;
use qksa::hypervisor::{experiment_s5, load_config, run, s5_pool, s5_seed_list, S5Options};
use qksa::least::{eval_cost, random_tree, CostTree, LeastEstimate, Weights};
use qksa::metrics::{bures, fidelity, trace_distance};
use qksa::qcore::{
    apply_unitary, choi_evolve, choi_of_unitary, haar_random_unitary, max_abs_diff,
    random_density_matrix, DensityMatrix,
};
use qksa::tomography::{reconstruct, QPTDescriptor, SufficientStats};
use qksa::{derive_seed, rng_from_seed, streams};

fn gate(name: &str, check: impl FnOnce() + std::panic::UnwindSafe) {
    match std::panic::catch_unwind(check) {
        Ok(()) => println!("{name}: PASS"),
        Err(e) => {
            println!("{name}: FAIL");
            std::panic::resume_unwind(e);
        }
    }
}

fn assert_within(elapsed: Duration, bound: Duration) {
    assert!(
        elapsed <= bound,
        "took {:.1}s, bound {:.0}s",
        elapsed.as_secs_f64(),
        bound.as_secs_f64()
    );
}

#[test]
fn choi_representation_round_trips_unitary_channels() {
    gate("choi round-trip", || {
        let start = Instant::now();
        let mut rng = rng_from_seed(101);
        for _ in 0..500 {
            let u = haar_random_unitary(1, &mut rng);
            let rho = random_density_matrix(1, &mut rng);
            let direct = apply_unitary(&rho, &u).unwrap();
            let via_choi = choi_evolve(&choi_of_unitary(&u), &rho).unwrap();
            let gap = max_abs_diff(direct.matrix(), via_choi.matrix());
            assert!(gap <= 1e-9, "entrywise gap {gap:e}");
        }
        assert_within(start.elapsed(), Duration::from_secs(5));
    });
}

#[test]
fn distances_match_their_closed_forms() {
    gate("analytic distance table", || {
        let zero = DensityMatrix::pure(&[Complex64::ONE, Complex64::ZERO]).unwrap();
        let one = DensityMatrix::pure(&[Complex64::ZERO, Complex64::ONE]).unwrap();
        let plus = DensityMatrix::pure(&[
            Complex64::new(FRAC_1_SQRT_2, 0.0),
            Complex64::new(FRAC_1_SQRT_2, 0.0),
        ])
        .unwrap();
        let mixed = DensityMatrix::maximally_mixed(1);

        assert!((trace_distance(&zero, &mixed).unwrap() - 0.5).abs() <= 1e-9);
        assert!((trace_distance(&zero, &one).unwrap() - 1.0).abs() <= 1e-9);
        assert!((fidelity(&zero, &plus).unwrap() - 0.5).abs() <= 1e-9);

        let mut rng = rng_from_seed(202);
        for i in 0..1000 {
            let qubits = 1 + i % 2;
            let a = random_density_matrix(qubits, &mut rng);
            let b = random_density_matrix(qubits, &mut rng);
            let squared = bures(&a, &b).unwrap().powi(2);
            let from_fidelity = 2.0 * (1.0 - fidelity(&a, &b).unwrap().sqrt());
            assert!(
                (squared - from_fidelity).abs() <= 1e-9,
                "pair {i}: {squared} vs {from_fidelity}"
            );
        }
    });
}

#[test]
fn random_basis_shots_reconstruct_the_identity_channel() {
    gate("tomographic consistency", || {
        let start = Instant::now();
        let source = EnvSource::Circuit(parse_circuit("qubits 1\n").unwrap());
        let phi_plus = DensityMatrix::pure(&[
            Complex64::new(FRAC_1_SQRT_2, 0.0),
            Complex64::ZERO,
            Complex64::ZERO,
            Complex64::new(FRAC_1_SQRT_2, 0.0),
        ])
        .unwrap();
        let desc = QPTDescriptor::with_auto_length("qpt0", 8, 16384);

        let mut close = 0;
        for trial in 0..20u64 {
            let mut env = make_environment(&source, derive_seed(777, trial), None).unwrap();
            let mut basis_rng = rng_from_seed(derive_seed(888, trial));
            let mut stats = SufficientStats::new(2, desc.window);
            for _ in 0..16384 {
                let action =
                    env.action_space()[basis_rng.random_range(0..env.action_space().len())].clone();
                let percept = env.interact(&action).unwrap();
                let step = stats.records().next_step();
                stats.insert(HistoryRecord { step, action, percept });
            }
            let (rho, _) = reconstruct(&desc, &stats);
            if trace_distance(&rho, &phi_plus).unwrap() <= 0.1 {
                close += 1;
            }
        }
        assert!(close >= 19, "only {close}/20 trials within 0.1");
        assert_within(start.elapsed(), Duration::from_secs(60));
    });
}

#[test]
fn averaged_learning_curves_converge() {
    gate("averaged learning curves", || {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let steps = 4096usize;
        let opts = S5Options {
            seeds: s5_seed_list(1, 20),
            steps: steps as u64,
            out: dir.path().to_path_buf(),
        };
        let csv_path = experiment_s5(&opts).unwrap();

        let text = std::fs::read_to_string(&csv_path).unwrap();
        let mut u_perc = Vec::with_capacity(steps);
        let mut remaining = Vec::with_capacity(steps);
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            u_perc.push(fields[2].parse::<f64>().unwrap());
            remaining.push(fields[4].parse::<f64>().unwrap());
        }
        assert_eq!(remaining.len(), steps);

        let block_means: Vec<f64> = remaining
            .chunks_exact(200)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        for pair in block_means.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "remaining distance rose between blocks: {} -> {}",
                pair[0],
                pair[1]
            );
        }

        let tenth = steps / 10;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let early = mean(&u_perc[..tenth]);
        let late = mean(&u_perc[steps - tenth..]);
        assert!(
            late < 0.25 * early,
            "perceived utility only fell from {early} to {late}"
        );
        assert_within(start.elapsed(), Duration::from_secs(900));
    });
}

fn selection_genome(tree: &str, seed: u64) -> Genome {
    let mut g = Genome::with_defaults("a0", s5_pool(), seed);
    g.k_r = f64::NEG_INFINITY;
    g.k_d = f64::NEG_INFINITY;
    g.max_steps = 1_000_000;
    g.trigger_window = 1;
    g.cost_tree = tree.parse().unwrap();
    g
}

fn hadamard_env(seed: u64) -> qksa::environment::Environment {
    let source = EnvSource::Circuit(parse_circuit("qubits 1\nh 0\n").unwrap());
    make_environment(&source, seed, None).unwrap()
}

#[test]
fn cheaper_strategies_win_selection_and_cost_offsets_cancel() {
    gate("selection monotonicity", || {
        let start = Instant::now();
        for leaf in ["A", "S"] {
            let mut env = hadamard_env(31);
            let mut agent =
                Agent::new(selection_genome(leaf, 17), 1, AgentOptions::default()).unwrap();
            for _ in 0..300 {
                agent.step(&mut env).unwrap();
            }
            for row in &agent.state().log {
                assert_eq!(row.qpt_id, "qpt1", "leaf {leaf} picked {} at step {}", row.qpt_id, row.step);
            }
        }

        let base = default_cost_tree().to_string();
        let offset = format!("(add {base} 3)");
        let mut actions = Vec::new();
        for tree in [base.as_str(), offset.as_str()] {
            let mut env = hadamard_env(31);
            let mut agent =
                Agent::new(selection_genome(tree, 17), 1, AgentOptions::default()).unwrap();
            for _ in 0..300 {
                agent.step(&mut env).unwrap();
            }
            actions.push(
                agent.state().log.iter().map(|r| r.action.clone()).collect::<Vec<String>>(),
            );
        }
        assert_eq!(actions[0], actions[1], "constant cost offset changed the policy");
        assert_within(start.elapsed(), Duration::from_secs(60));
    });
}

fn scripted_row(step: u64, knowledge: f64) -> LogRow {
    LogRow {
        step,
        qpt_id: "qpt0".to_string(),
        action: "XX".to_string(),
        percept: "00".to_string(),
        u_pred: 0.0,
        u_perc: 0.0,
        knowledge,
        ret: 0.0,
        cost_chosen: 0.0,
        remaining: None,
        t_est: 0.0,
    }
}

#[test]
fn scripted_knowledge_crossings_fire_in_order() {
    gate("lifecycle determinism", || {
        let mut genome = Genome::with_defaults(
            "a0",
            vec![QPTDescriptor::with_auto_length("qpt0", 5, 64)],
            1,
        );
        genome.k_r = 0.01;
        genome.k_d = -0.05;
        genome.trigger_window = 1;
        genome.max_steps = 1000;

        let mixed = DensityMatrix::maximally_mixed(2);
        let mut state = AgentState {
            stats: Vec::new(),
            rho_t: mixed.clone(),
            rho_prev: mixed,
            step: 0,
            log: Vec::new(),
            children_spawned: 0,
            status: AgentStatus::Active,
        };

        let mut transitions = Vec::new();
        for (i, k) in [0.5, 0.005, -0.5].into_iter().enumerate() {
            state.log.push(scripted_row(i as u64, k));
            state.step += 1;
            let decision = lifecycle(&genome, &state);
            match decision {
                LifecycleDecision::Continue => {}
                LifecycleDecision::Reproduce => {
                    state.children_spawned += 1;
                    transitions.push(decision);
                }
                _ => transitions.push(decision),
            }
        }
        assert_eq!(
            transitions,
            vec![LifecycleDecision::Reproduce, LifecycleDecision::Die],
            "wrong transition sequence"
        );

        // a long lineage rewrites only identity, seed, and cost tree
        let ancestor = Genome::with_defaults("a0", s5_pool(), 99);
        let mut parent = ancestor.clone();
        for generation in 1..=10u32 {
            let mut rng = rng_from_seed(derive_seed(parent.master_seed, streams::MUTATION_BASE));
            let spawn = replicate(&parent, 0, &mut rng).unwrap();
            let child = spawn.genome;
            assert_eq!(child.generation, generation);
            assert_eq!(child.t_f, ancestor.t_f);
            assert_eq!(child.gamma_mode, ancestor.gamma_mode);
            assert_eq!(child.distance, ancestor.distance);
            assert_eq!(child.m_c.to_bits(), ancestor.m_c.to_bits());
            assert_eq!(child.k_r.to_bits(), ancestor.k_r.to_bits());
            assert_eq!(child.k_d.to_bits(), ancestor.k_d.to_bits());
            assert_eq!(child.max_steps, ancestor.max_steps);
            assert_eq!(child.max_children, ancestor.max_children);
            assert_eq!(child.trigger_window, ancestor.trigger_window);
            assert_eq!(child.weights.length.to_bits(), ancestor.weights.length.to_bits());
            assert_eq!(child.weights.energy.to_bits(), ancestor.weights.energy.to_bits());
            assert_eq!(child.weights.approx.to_bits(), ancestor.weights.approx.to_bits());
            assert_eq!(child.weights.space.to_bits(), ancestor.weights.space.to_bits());
            assert_eq!(child.weights.time.to_bits(), ancestor.weights.time.to_bits());
            assert_eq!(child.bounds, ancestor.bounds);
            assert_eq!(child.pool.len(), ancestor.pool.len());
            for (c, a) in child.pool.iter().zip(ancestor.pool.iter()) {
                assert_eq!(c.id, a.id);
                assert_eq!(c.approx_places, a.approx_places);
                assert_eq!(c.window, a.window);
                assert_eq!(c.length_const.to_bits(), a.length_const.to_bits());
            }
            parent = child;
        }
        assert_eq!(parent.agent_id, "a0-1-1-1-1-1-1-1-1-1-1");
    });
}

#[test]
fn mutation_stays_closed_over_valid_trees() {
    gate("mutation closure fuzz", || {
        let start = Instant::now();
        let est = LeastEstimate {
            length: 5.0,
            energy: 3.0,
            approx: 1e-5,
            space: 98304.0,
            time: 0.001,
        };
        let weights = Weights::default();
        let mut rng = rng_from_seed(424_242);
        let mut tree = random_tree(&mut rng, 8);
        for call in 0..100_000u32 {
            if call % 1000 == 0 {
                tree = random_tree(&mut rng, 8);
            }
            let m_c = rng.random_range(0.0..=1.0);
            tree = qksa::least::mutate(&tree, m_c, &mut rng);
            tree.validate().unwrap_or_else(|e| panic!("call {call}: invalid tree {tree}: {e}"));
            let reparsed: CostTree = tree.to_string().parse().unwrap();
            assert_eq!(reparsed, tree, "call {call}: display round trip diverged");
            assert!(eval_cost(&tree, &est, &weights).is_finite(), "call {call}: nonfinite cost");
        }
        assert_within(start.elapsed(), Duration::from_secs(30));
    });
}

fn strip_wall_clock_column(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let (kept, _) = line.rsplit_once(',').unwrap();
        out.push_str(kept);
        out.push('\n');
    }
    out
}

fn deterministic_csvs(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<(String, String)> = std::fs::read_dir(dir.join("agents"))
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            let body = strip_wall_clock_column(&std::fs::read_to_string(&path).unwrap());
            (name, body)
        })
        .collect();
    files.sort();
    files
}

fn read_dir_files(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<(String, String)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read_to_string(&path).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn identical_configs_replay_byte_identically() {
    gate("full-run determinism", || {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("env.circ"), "qubits 1\nh 0\n").unwrap();
        let config_body = |m_c: f64| {
            format!(
                "[run]\n\
                 total_step_budget = 300\n\
                 diagnostics = true\n\
                 seed = 13\n\
                 \n\
                 [environment]\n\
                 source = circuit\n\
                 circuit = env.circ\n\
                 \n\
                 [pool]\n\
                 qpt = qpt0 5 64\n\
                 qpt = qpt1 8 32\n\
                 \n\
                 [genome]\n\
                 m_c = {m_c}\n\
                 k_r = 100\n\
                 k_d = -100\n\
                 max_steps = 1000\n\
                 max_children = 1\n\
                 trigger_window = 5\n"
            )
        };

        std::fs::write(dir.path().join("exp.conf"), config_body(0.0)).unwrap();
        let base = load_config(&dir.path().join("exp.conf")).unwrap();
        let run_into = |name: &str| {
            let mut cfg = base.clone();
            cfg.out = dir.path().join(name);
            run(&cfg).unwrap();
            deterministic_csvs(&cfg.out)
        };
        let first = run_into("out-a");
        assert!(first.len() > 1, "expected a multi-agent population");
        for replay in [run_into("out-b"), run_into("out-c")] {
            assert_eq!(first, replay);
        }

        // with mutation on, descendants can evolve trees over the measured
        // reconstruction time, which is nondeterministic by definition; the
        // replicated genomes themselves must still replay exactly
        std::fs::write(dir.path().join("exp.conf"), config_body(0.5)).unwrap();
        let mutating = load_config(&dir.path().join("exp.conf")).unwrap();
        let spawn_into = |name: &str| {
            let mut cfg = mutating.clone();
            cfg.out = dir.path().join(name);
            run(&cfg).unwrap();
            read_dir_files(&cfg.out.join("spawn"))
        };
        let genomes = spawn_into("mut-a");
        assert!(!genomes.is_empty());
        assert_eq!(genomes, spawn_into("mut-b"));
    });
}
