//! Release gate: one test per acceptance bar, each printing a PASS line
//! with its measured numbers when it holds. The remeshing-benefit and
//! controllability tests share a single desk-scale training run.

use lamp::datagen::{
    generate_trajectories, solve_trajectory, ForcingTerm, PdeParams, SolveOptions, Trajectory,
};
use lamp::evolution::{pretrain, EvolutionModel};
use lamp::gnn::encode;
use lamp::harness::{
    build_models, evaluate_model, stress_mesh, sweep_beta, ExperimentConfig, Remesher,
};
use lamp::interp::{transfer, Location, Locator};
use lamp::mesh::{
    apply_action, coarsen_edge_2d, edge_wants_flip, flip_all_2d, is_coarsenable_2d,
    split_edge_2d, validate, Domain, EdgeId, Mesh, NodeId, OpOutcome, RemeshAction,
};
use lamp::policy::{
    action_entropy, action_log_prob, actor_loss_on_tape, compute_reward, joint_train,
    PolicyModel, SampledAction,
};
use lamp::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::OnceLock;

// ---------------------------------------------------------------- criterion 1

#[test]
fn solver_matches_heat_decay_and_conserves_mass() {
    // Diffusion only: u(t,x) = sin(kx) exp(-beta k^2 t).
    let params = PdeParams {
        alpha: 0.0,
        beta_pde: 0.1,
        gamma: 0.0,
    };
    let length = 16.0;
    let init: Vec<f64> = (0..200)
        .map(|i| {
            let x = length * i as f64 / 200.0;
            (2.0 * std::f64::consts::PI * x / length).sin()
        })
        .collect();
    let opts = SolveOptions {
        initial: Some(init.clone()),
        ..SolveOptions::default()
    };
    let traj = solve_trajectory(params, ForcingTerm::zero(), 0, &opts).unwrap();
    let k = 2.0 * std::f64::consts::PI / length;
    let decay = (-0.1 * k * k * 4.0).exp();
    let last = traj.frame(traj.n_t - 1);
    let mut max_err = 0.0f64;
    for (i, &x) in traj.grid.iter().enumerate() {
        max_err = max_err.max((last[i] - (k * x).sin() * decay).abs());
    }
    assert!(
        max_err <= 1e-3,
        "heat decay max error {} at t=4 exceeds 1e-3",
        max_err
    );

    // Advection + diffusion, no forcing: spatial mean is conserved.
    let params = PdeParams {
        alpha: 1.0,
        beta_pde: 0.05,
        gamma: 0.0,
    };
    let shifted: Vec<f64> = init.iter().map(|v| 0.8 * v + 0.3).collect();
    let opts = SolveOptions {
        initial: Some(shifted),
        ..SolveOptions::default()
    };
    let traj = solve_trajectory(params, ForcingTerm::zero(), 0, &opts).unwrap();
    let mean0 = traj.spatial_mean(0);
    let mut max_drift = 0.0f64;
    for f in 0..traj.n_t {
        max_drift = max_drift.max((traj.spatial_mean(f) - mean0).abs());
    }
    assert!(
        max_drift <= 1e-8,
        "mass drifted by {} under zero forcing",
        max_drift
    );
    println!(
        "PASS solver: heat-decay max err {:.2e} (<= 1e-3), mass drift {:.2e} (<= 1e-8)",
        max_err, max_drift
    );
}

// ---------------------------------------------------------------- criterion 2

/// Central finite differences on the f64 replay versus the f32 backward
/// pass, 2-norm relative error per parameter tensor. Parameters whose
/// absolute disagreement is at f32 noise level pass outright (the loss can
/// be exactly invariant to a softmax shift, zeroing the denominator).
fn finite_diff_check(tape: &Tape, loss: Var, params: &[Var], label: &str) -> f64 {
    let grads = tape.backward(loss).expect("backward pass");
    let h = 1e-3f64;
    let mut worst = 0.0f64;
    for (pi, &p) in params.iter().enumerate() {
        let base: Vec<f64> = tape.value(p).data().iter().map(|&x| x as f64).collect();
        assert!(base.len() <= 64, "{}: tensor {} over 64 elements", label, pi);
        let analytic = grads.grad_or_zeros(tape, p);
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..base.len() {
            let mut up = base.clone();
            up[i] += h;
            let mut dn = base.clone();
            dn[i] -= h;
            let lu = tape.replay_f64(loss, &[(p, up)]).unwrap();
            let ld = tape.replay_f64(loss, &[(p, dn)]).unwrap();
            let fd = (lu - ld) / (2.0 * h);
            num += (analytic.data()[i] as f64 - fd).powi(2);
            den += fd.powi(2);
        }
        let abs = num.sqrt();
        let rel = abs / den.sqrt().max(1e-12);
        if abs > 1e-5 {
            assert!(
                rel <= 1e-4,
                "{}: tensor {} rel err {:.3e} > 1e-4",
                label,
                pi,
                rel
            );
            worst = worst.max(rel);
        }
    }
    worst
}

fn random_small_mesh(n: usize, bundle: usize, seed: u64) -> Mesh {
    let mut m = Mesh::uniform_1d(n, 16.0, bundle, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<NodeId> = m.nodes().map(|x| x.id).collect();
    for id in ids {
        let q: Vec<f32> = (0..bundle).map(|_| rng.gen_range(-1.0..1.0)).collect();
        m.node_mut(id).unwrap().q = q;
    }
    m
}

#[test]
fn gradients_match_finite_differences_on_every_model() {
    const BUNDLE: usize = 3;
    const HIDDEN: usize = 4;
    let mut worst = 0.0f64;
    for seed in [0u64, 1, 2, 3, 4] {
        // Evolution model through a one-step prediction loss.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut evo = EvolutionModel::new(&mut rng, BUNDLE, HIDDEN, 1, 2).unwrap();
        let mesh = random_small_mesh(6, BUNDLE, seed + 100);
        let batch = encode(&mesh).unwrap();
        evo.observe_norm(&batch).unwrap();
        evo.freeze_norm();
        let mut tape = Tape::new();
        let vars = evo.bind(&mut tape);
        let q: Vec<f32> = mesh.bundles().into_iter().flat_map(|(_, q)| q).collect();
        let qv = tape.constant(Tensor::new(vec![6, BUNDLE], q).unwrap());
        let pred = evo.forward_step(&mut tape, &vars, &batch, qv).unwrap();
        let sq = tape.square(pred);
        let loss = tape.mean(sq);
        worst = worst.max(finite_diff_check(
            &tape,
            loss,
            &vars.leaves(),
            &format!("evolution seed {}", seed),
        ));

        // Policy heads through the log-probability + entropy of a sample.
        let policy = PolicyModel::new(&mut rng, BUNDLE, HIDDEN, 1, 2, 5).unwrap();
        let (_, sampled) = policy.act_sample(&mesh, 0.3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = policy.bind(&mut tape);
        let eval = policy.forward(&mut tape, &vars, &batch, 0.3).unwrap();
        let lp = action_log_prob(&mut tape, &eval, &sampled).unwrap();
        let ent = action_entropy(&mut tape, &eval, &sampled).unwrap();
        let ent_half = tape.mul_scalar(ent, 0.5);
        let loss = tape.add(lp, ent_half).unwrap();
        worst = worst.max(finite_diff_check(
            &tape,
            loss,
            &vars.leaves(),
            &format!("policy seed {}", seed),
        ));

        // Value head through a squared regression loss.
        let mut tape = Tape::new();
        let vars = policy.bind(&mut tape);
        let eval = policy.forward(&mut tape, &vars, &batch, 0.4).unwrap();
        let c = tape.constant(Tensor::new(vec![1], vec![0.7]).unwrap());
        let d = tape.sub(eval.value, c).unwrap();
        let loss = tape.square(d);
        worst = worst.max(finite_diff_check(
            &tape,
            loss,
            &vars.leaves(),
            &format!("value seed {}", seed),
        ));
    }
    println!(
        "PASS autodiff: worst rel err {:.3e} (<= 1e-4) over 5 seeds x 3 graphs",
        worst
    );
}

// ---------------------------------------------------------------- criterion 3

fn random_action(mesh: &Mesh, rng: &mut ChaCha8Rng) -> RemeshAction {
    let edges: Vec<EdgeId> = mesh.edges().map(|e| e.id).collect();
    let n_re = rng.gen_range(0..=3);
    let n_co = rng.gen_range(0..=3);
    let mut pick = |n: usize| -> Vec<EdgeId> {
        (0..n)
            .map(|_| edges[rng.gen_range(0..edges.len())])
            .collect()
    };
    RemeshAction {
        refine: pick(n_re),
        coarsen: pick(n_co),
    }
}

fn triangulated_grid(n: usize) -> Mesh {
    let mut coords = Vec::new();
    for j in 0..=n {
        for i in 0..=n {
            coords.push([i as f64 / n as f64, j as f64 / n as f64]);
        }
    }
    let mut tris = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let v = j * (n + 1) + i;
            tris.push([v, v + 1, v + n + 2]);
            tris.push([v, v + n + 2, v + n + 1]);
        }
    }
    let mut domain = Domain::two_d(0.02, 10.0);
    domain.vertex_cap = Some(250);
    Mesh::from_triangles(&coords, &tris, 1, domain).unwrap()
}

#[test]
fn mesh_editor_survives_ten_thousand_actions_with_exact_deltas() {
    // 10,000 random filtered actions per dimension, validating after each.
    stress_mesh(25, 10_000, 21).expect("1D stress run");

    let mut mesh = triangulated_grid(5);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for i in 0..10_000 {
        let action = random_action(&mesh, &mut rng);
        apply_action(&mut mesh, &action).unwrap_or_else(|e| panic!("action {}: {}", i, e));
        validate(&mesh).unwrap_or_else(|e| panic!("invalid after action {}: {}", i, e));
    }

    // Exact (nodes, edges, faces) deltas per 2D operation.
    let counts = |m: &Mesh| {
        (
            m.n_nodes() as isize,
            m.n_edges() as isize,
            m.n_faces() as isize,
        )
    };
    let delta = |a: (isize, isize, isize), b: (isize, isize, isize)| {
        (b.0 - a.0, b.1 - a.1, b.2 - a.2)
    };

    let mut m = triangulated_grid(3);
    let interior = m
        .edges()
        .find(|e| m.faces_of_edge(e.id).len() == 2)
        .unwrap()
        .id;
    let before = counts(&m);
    assert!(split_edge_2d(&mut m, interior).unwrap().applied());
    assert_eq!(delta(before, counts(&m)), (1, 3, 2), "interior split");

    let mut m = triangulated_grid(3);
    let boundary = m
        .edges()
        .find(|e| m.faces_of_edge(e.id).len() == 1)
        .unwrap()
        .id;
    let before = counts(&m);
    assert!(split_edge_2d(&mut m, boundary).unwrap().applied());
    assert_eq!(delta(before, counts(&m)), (1, 2, 1), "boundary split");

    let mut m = triangulated_grid(3);
    let diagonal = m
        .edges()
        .find(|e| {
            let (a, b) = e.nodes;
            let (ua, ub) = (m.node(a).unwrap().u, m.node(b).unwrap().u);
            ua[0] != ub[0] && ua[1] != ub[1]
        })
        .unwrap()
        .id;
    let midpoint = match split_edge_2d(&mut m, diagonal).unwrap() {
        OpOutcome::Applied { new_node: Some(n) } => n,
        other => panic!("split must create a node, got {:?}", other),
    };
    let collapse_edge = m
        .edges_of_node(midpoint)
        .iter()
        .copied()
        .find(|&e| matches!(is_coarsenable_2d(&m, e), Ok(Some(v)) if v == midpoint))
        .expect("fresh midpoint is collapsible");
    let before = counts(&m);
    assert!(coarsen_edge_2d(&mut m, collapse_edge).unwrap().applied());
    assert_eq!(delta(before, counts(&m)), (-1, -3, -2), "interior collapse");

    // Flip sweeps settle fan triangulations of convex polygons within the
    // sweep budget, leaving no edge that wants a flip.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst_sweeps = 0usize;
    for case in 0..10 {
        let n = rng.gen_range(8..=14);
        let mut angles: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        angles.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
        if angles.len() < 5 {
            continue;
        }
        let coords: Vec<[f64; 2]> = angles
            .iter()
            .map(|&t| [2.0 * t.cos(), t.sin()])
            .collect();
        let tris: Vec<[usize; 3]> = (1..coords.len() - 1).map(|i| [0, i, i + 1]).collect();
        let mut m =
            Mesh::from_triangles(&coords, &tris, 1, Domain::two_d(1e-6, 100.0)).unwrap();
        let summary = flip_all_2d(&mut m).unwrap();
        assert!(summary.sweeps <= 20, "case {} exhausted the budget", case);
        validate(&m).unwrap();
        for e in m.edges() {
            assert!(
                !edge_wants_flip(&m, e.id).unwrap(),
                "case {}: edge {} unsettled",
                case,
                e.id
            );
        }
        worst_sweeps = worst_sweeps.max(summary.sweeps);
    }
    println!(
        "PASS mesh: 10,000 valid actions per dimension, exact op deltas, flips settle in <= {} sweeps",
        worst_sweeps
    );
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn interpolation_reproduces_affine_fields_and_partitions_unity() {
    // 1D: a + b*u is reproduced to 1e-10 inside the node span.
    let mut m = Mesh::uniform_1d(32, 16.0, 1, None).unwrap();
    let ids: Vec<NodeId> = m.nodes().map(|n| n.id).collect();
    for id in ids {
        let u = m.node(id).unwrap().u[0];
        m.node_mut(id).unwrap().q = vec![(0.25 * u + 3.5) as f32];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst_1d = 0.0f64;
    for _ in 0..5_000 {
        let u: f64 = rng.gen_range(0.0..16.0 - 0.5);
        let got = transfer(&m, &[[u, 0.0]]).unwrap()[0][0];
        worst_1d = worst_1d.max((got - (0.25 * u + 3.5)).abs());
    }
    assert!(worst_1d <= 1e-10, "1D affine error {}", worst_1d);

    // 2D: a + b*x + c*y across a fan.
    let coords = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]];
    let tris = [[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]];
    let mut m2 =
        Mesh::from_triangles(&coords, &tris, 1, Domain::two_d(0.001, 10.0)).unwrap();
    let ids: Vec<NodeId> = m2.nodes().map(|n| n.id).collect();
    for id in ids {
        let u = m2.node(id).unwrap().u;
        m2.node_mut(id).unwrap().q = vec![(0.5 * u[0] + 0.25 * u[1] + 1.25) as f32];
    }
    let mut worst_2d = 0.0f64;
    for _ in 0..5_000 {
        let p = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let got = transfer(&m2, &[p]).unwrap()[0][0];
        worst_2d = worst_2d.max((got - (0.5 * p[0] + 0.25 * p[1] + 1.25)).abs());
    }
    assert!(worst_2d <= 1e-10, "2D affine error {}", worst_2d);

    // Barycentric weights over 10,000 random points sum to 1 within 1e-12.
    let locator = Locator::new(&m2).unwrap();
    let mut worst_sum = 0.0f64;
    for _ in 0..10_000 {
        let p = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        match locator.locate(p).unwrap() {
            Location::Triangle { weights, .. } => {
                worst_sum = worst_sum.max((weights.iter().sum::<f64>() - 1.0).abs());
                assert!(weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
            }
            other => panic!("expected a triangle at {:?}, got {:?}", p, other),
        }
    }
    assert!(worst_sum <= 1e-12, "partition of unity off by {}", worst_sum);
    println!(
        "PASS interpolation: affine err 1D {:.2e} / 2D {:.2e} (<= 1e-10), unity off by {:.2e} (<= 1e-12)",
        worst_1d, worst_2d, worst_sum
    );
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn reward_and_policy_gradient_identities_hold() {
    // Identity rollouts give a reward of exactly zero at every beta.
    let losses = vec![0.31, 0.12, 0.544];
    let countsv = vec![25, 25, 25];
    let rec = lamp::evolution::RolloutRecord {
        meshes: Vec::new(),
        node_counts: countsv.clone(),
        losses: losses.clone(),
    };
    let same = lamp::evolution::RolloutRecord {
        meshes: Vec::new(),
        node_counts: countsv,
        losses,
    };
    for beta in [0.0, 0.1, 0.3, 0.5, 1.0] {
        let r = compute_reward(&rec, &same, 25, beta, true).unwrap();
        assert_eq!(r.r, 0.0, "identity reward must be exactly 0 at beta {}", beta);
    }

    // Zero advantage zeroes every gradient of the log-prob term.
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let policy = PolicyModel::new(&mut rng, 3, 4, 1, 2, 5).unwrap();
    let mesh = random_small_mesh(8, 3, 42);
    let (_, sampled) = policy.act_sample(&mesh, 0.2, &mut rng).unwrap();
    let batch = encode(&mesh).unwrap();
    let mut tape = Tape::new();
    let vars = policy.bind(&mut tape);
    let eval = policy.forward(&mut tape, &vars, &batch, 0.2).unwrap();
    let lp = action_log_prob(&mut tape, &eval, &sampled).unwrap();
    let ent = action_entropy(&mut tape, &eval, &sampled).unwrap();
    // Reward equal to the value estimate makes the advantage exactly zero;
    // with no entropy bonus the actor loss must have zero gradients.
    let reward = tape.value(eval.value).item() as f64;
    let loss = actor_loss_on_tape(&mut tape, lp, reward, eval.value, ent, 0.0).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (i, v) in vars.leaves().iter().enumerate() {
        let g = grads.grad_or_zeros(&tape, *v);
        assert!(
            g.data().iter().all(|&x| x == 0.0),
            "zero-advantage gradient {} is not exactly zero",
            i
        );
    }

    // Log-probability factorization against a hand-computed case: uniform
    // logits over 21 counts and 10 edges, one edge drawn per branch.
    let mut tape = Tape::new();
    let zeros_counts = tape.constant(Tensor::zeros(&[1, 21]));
    let zeros_counts2 = tape.constant(Tensor::zeros(&[1, 21]));
    let zeros_edges = tape.constant(Tensor::zeros(&[1, 10]));
    let zeros_edges2 = tape.constant(Tensor::zeros(&[1, 10]));
    let value = tape.constant(Tensor::zeros(&[1]));
    let eval = lamp::policy::PolicyEval {
        k_refine: zeros_counts,
        k_coarsen: zeros_counts2,
        edge_refine: zeros_edges,
        edge_coarsen: zeros_edges2,
        value,
        edge_ids: (0..10).map(|i| EdgeId(i as u32)).collect(),
    };
    let act = SampledAction {
        k_refine: 1,
        k_coarsen: 0,
        refine_edges: vec![3],
        coarsen_edges: vec![],
        log_prob: 0.0,
        value: 0.0,
    };
    let lp = action_log_prob(&mut tape, &eval, &act).unwrap();
    let got = tape.value(lp).item() as f64;
    let want = 2.0 * (1.0f64 / 21.0).ln() + (1.0f64 / 10.0).ln();
    assert!(
        (got - want).abs() <= 1e-5,
        "log-prob {} vs hand value {}",
        got,
        want
    );
    println!(
        "PASS policy algebra: identity reward 0, zero-advantage grads 0, log-prob {:.6} = 2 ln(1/21) + ln(1/10)",
        got
    );
}

// ------------------------------------------------------- criteria 6 and 7

struct TrainedArtifacts {
    evo: EvolutionModel,
    policy: PolicyModel,
    test_trajs: Vec<Trajectory>,
    cfg: ExperimentConfig,
}

static TRAINED: OnceLock<TrainedArtifacts> = OnceLock::new();

/// Desk-scale end-to-end training shared by the remeshing-benefit and
/// controllability tests. Takes the bulk of the suite's runtime.
fn trained() -> &'static TrainedArtifacts {
    TRAINED.get_or_init(|| {
        let cfg = ExperimentConfig::desk_scale();
        cfg.validate().unwrap();
        let train = generate_trajectories(42, cfg.n_train).unwrap();
        let test_trajs = generate_trajectories(43, cfg.n_test).unwrap();
        let (mut evo, mut policy) = build_models(&cfg).unwrap();
        let curve = pretrain(&mut evo, &train, &cfg.pretrain_config(), cfg.seed).unwrap();
        println!(
            "  [training] pretrain {} epochs: loss {:.5} -> {:.5}",
            curve.len(),
            curve.first().unwrap(),
            curve.last().unwrap()
        );
        let log = joint_train(&mut evo, &mut policy, &train, &cfg.joint_config(), cfg.seed)
            .unwrap();
        let reward_tail: f64 = {
            let eps = &log.episodes;
            let tail = &eps[eps.len().saturating_sub(200)..];
            tail.iter().map(|e| e.reward).sum::<f64>() / tail.len().max(1) as f64
        };
        println!(
            "  [training] joint {} episodes ({} skipped), tail mean reward {:+.4}",
            log.episodes.len(),
            log.skipped_episodes,
            reward_tail
        );
        TrainedArtifacts {
            evo,
            policy,
            test_trajs,
            cfg,
        }
    })
}

#[test]
fn trained_remeshing_beats_identity_at_low_beta() {
    let t = trained();
    let identity = evaluate_model(
        &t.evo,
        &Remesher::Identity,
        &t.test_trajs,
        &t.cfg,
        0.1,
        0,
    )
    .unwrap();
    let learned = evaluate_model(
        &t.evo,
        &Remesher::Learned(&t.policy),
        &t.test_trajs,
        &t.cfg,
        0.1,
        0,
    )
    .unwrap();
    let gap = 1.0 - learned.mse / identity.mse;
    assert!(
        learned.avg_vertices <= 100.0,
        "average vertex count {} exceeds the cap of 100",
        learned.avg_vertices
    );
    assert!(
        gap >= 0.20,
        "remeshing must cut rollout MSE by >= 20%: learned {:.5} vs identity {:.5} ({:.1}%)",
        learned.mse,
        identity.mse,
        100.0 * gap
    );
    println!(
        "PASS remeshing benefit: MSE {:.5} vs identity {:.5} ({:.1}% lower, >= 20% required), avg vertices {:.1} (<= 100)",
        learned.mse,
        identity.mse,
        100.0 * gap,
        learned.avg_vertices
    );
}

#[test]
fn vertex_count_weakly_decreases_with_beta() {
    let t = trained();
    let betas = [0.1, 0.2, 0.3, 0.4, 0.5];
    let rows = sweep_beta(&t.evo, &t.policy, &t.test_trajs, &t.cfg, &betas, 0).unwrap();
    let verts: Vec<f64> = rows.iter().map(|r| r.avg_vertices).collect();
    let inversions = verts.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(
        inversions <= 1,
        "average vertices {:?} rise {} times across the beta sweep (max 1)",
        verts,
        inversions
    );
    println!(
        "PASS controllability: avg vertices across beta {:?} = {:?} ({} inversion(s), <= 1 allowed)",
        betas, verts, inversions
    );
}

// ---------------------------------------------------------------- criterion 8

fn run_cli(args: &[&str]) {
    let exe = env!("CARGO_BIN_EXE_lamp");
    let out = std::process::Command::new(exe)
        .args(args)
        .output()
        .expect("spawn CLI");
    assert!(
        out.status.success(),
        "lamp {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_identical(a: &Path, b: &Path, what: &str) {
    let ba = std::fs::read(a).unwrap();
    let bb = std::fs::read(b).unwrap();
    assert!(
        ba == bb,
        "{}: reruns differ ({} vs {} bytes)",
        what,
        ba.len(),
        bb.len()
    );
}

#[test]
fn cli_reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let s = |path: &std::path::PathBuf| path.to_str().unwrap().to_string();

    // A configuration small enough that every subcommand runs in seconds.
    let cfg = ExperimentConfig {
        n_train: 6,
        n_test: 4,
        gt_resolution: 50,
        initial_nx: 25,
        vertex_cap: 60,
        eval_applications: 3,
        hidden: 16,
        pretrain_epochs: 2,
        pretrain_batch: 3,
        pretrain_weights: vec![1.0, 0.1],
        resolutions: vec![50, 25],
        joint_epochs: 1,
        policy_steps: 4,
        evo_steps: 1,
        evo_batch: 2,
        s_steps: 2,
        seed: 9,
        ..ExperimentConfig::default()
    };
    cfg.validate().unwrap();
    let cfg_path = p("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let cfg_arg = s(&cfg_path);

    // generate-data: identical dataset bytes.
    let (d1, d2) = (p("a.lmpd"), p("b.lmpd"));
    run_cli(&["generate-data", "--count", "6", "--seed", "5", "--out", &s(&d1)]);
    run_cli(&["generate-data", "--count", "6", "--seed", "5", "--out", &s(&d2)]);
    assert_identical(&d1, &d2, "generate-data");

    // pretrain: identical checkpoint and loss-curve bytes.
    let (c1, c2) = (p("evo1.ckpt"), p("evo2.ckpt"));
    let (l1, l2) = (p("pre1.csv"), p("pre2.csv"));
    for (c, l) in [(&c1, &l1), (&c2, &l2)] {
        run_cli(&[
            "pretrain", "--config", &cfg_arg, "--data", &s(&d1), "--out", &s(c), "--log", &s(l),
        ]);
    }
    assert_identical(&c1, &c2, "pretrain checkpoint");
    assert_identical(&l1, &l2, "pretrain metrics");

    // train-joint: identical joint checkpoint and episode log.
    let (j1, j2) = (p("joint1.ckpt"), p("joint2.ckpt"));
    let (e1, e2) = (p("ep1.csv"), p("ep2.csv"));
    for (j, e) in [(&j1, &e1), (&j2, &e2)] {
        run_cli(&[
            "train-joint", "--config", &cfg_arg, "--data", &s(&d1), "--evo", &s(&c1), "--out",
            &s(j), "--log", &s(e),
        ]);
    }
    assert_identical(&j1, &j2, "joint checkpoint");
    assert_identical(&e1, &e2, "joint metrics");

    // evaluate: identical metrics row.
    let (v1, v2) = (p("ev1.csv"), p("ev2.csv"));
    for v in [&v1, &v2] {
        run_cli(&[
            "evaluate", "--config", &cfg_arg, "--data", &s(&d1), "--ckpt", &s(&j1), "--beta",
            "0.2", "--seed", "3", "--out", &s(v),
        ]);
    }
    assert_identical(&v1, &v2, "evaluate metrics");

    // sweep-beta: identical sweep table.
    let (w1, w2) = (p("sw1.csv"), p("sw2.csv"));
    for w in [&w1, &w2] {
        run_cli(&[
            "sweep-beta", "--config", &cfg_arg, "--data", &s(&d1), "--ckpt", &s(&j1), "--betas",
            "0.1,0.3", "--out", &s(w),
        ]);
    }
    assert_identical(&w1, &w2, "sweep metrics");
    println!(
        "PASS reproducibility: generate-data, pretrain, train-joint, evaluate, sweep-beta all bit-identical on rerun"
    );
}
