//! Long-running randomized stress tests for the mesh editor: thousands of
//! filtered actions in both dimensions, exact count deltas per operation,
//! and flip-sweep convergence.

use lamp::mesh::{
    apply_action, coarsen_edge_2d, edge_wants_flip, flip_all_2d, is_coarsenable_2d,
    split_edge_2d, validate, Domain, EdgeId, Mesh, RemeshAction,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

#[test]
fn ten_thousand_random_filtered_actions_keep_a_1d_mesh_valid() {
    let mut mesh = Mesh::uniform_1d(25, 16.0, 4, Some(100)).expect("uniform chain");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..10_000 {
        let action = random_action(&mesh, &mut rng);
        apply_action(&mut mesh, &action).unwrap_or_else(|e| panic!("action {} failed: {}", i, e));
        validate(&mesh).unwrap_or_else(|e| panic!("mesh invalid after action {}: {}", i, e));
        assert!(
            mesh.n_nodes() <= 100,
            "vertex cap breached at action {}: {} nodes",
            i,
            mesh.n_nodes()
        );
    }
    assert!(mesh.n_nodes() >= 2, "chain collapsed below its boundary");
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
    Mesh::from_triangles(&coords, &tris, 1, domain).expect("grid triangulation")
}

#[test]
fn ten_thousand_random_filtered_actions_keep_a_2d_mesh_valid() {
    let mut mesh = triangulated_grid(5);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..10_000 {
        let action = random_action(&mesh, &mut rng);
        apply_action(&mut mesh, &action).unwrap_or_else(|e| panic!("action {} failed: {}", i, e));
        validate(&mesh).unwrap_or_else(|e| panic!("mesh invalid after action {}: {}", i, e));
        assert!(
            mesh.n_nodes() <= 250,
            "vertex cap breached at action {}: {} nodes",
            i,
            mesh.n_nodes()
        );
    }
    assert!(mesh.n_faces() > 0, "surface vanished under random editing");
}

fn counts(m: &Mesh) -> (isize, isize, isize) {
    (
        m.n_nodes() as isize,
        m.n_edges() as isize,
        m.n_faces() as isize,
    )
}

#[test]
fn two_d_operations_change_counts_by_exact_deltas() {
    // Interior split: +1 node, +3 edges, +2 faces.
    let mut m = triangulated_grid(3);
    let interior = m
        .edges()
        .find(|e| m.faces_of_edge(e.id).len() == 2)
        .expect("grid has interior edges")
        .id;
    let before = counts(&m);
    assert!(split_edge_2d(&mut m, interior).unwrap().applied());
    let after = counts(&m);
    assert_eq!(
        (after.0 - before.0, after.1 - before.1, after.2 - before.2),
        (1, 3, 2),
        "interior split delta"
    );
    validate(&m).unwrap();

    // Boundary split: +1 node, +2 edges, +1 face.
    let mut m = triangulated_grid(3);
    let boundary = m
        .edges()
        .find(|e| m.faces_of_edge(e.id).len() == 1)
        .expect("grid has boundary edges")
        .id;
    let before = counts(&m);
    assert!(split_edge_2d(&mut m, boundary).unwrap().applied());
    let after = counts(&m);
    assert_eq!(
        (after.0 - before.0, after.1 - before.1, after.2 - before.2),
        (1, 2, 1),
        "boundary split delta"
    );
    validate(&m).unwrap();

    // Interior collapse: -1 node, -3 edges, -2 faces. The midpoint of a
    // split cell diagonal is the canonical collapsible node: interior,
    // degree 4, and every surrounding angle is 45 degrees. Midpoints of
    // axis-aligned edges do not qualify (their fans contain right angles).
    let mut m = triangulated_grid(3);
    let diagonal = m
        .edges()
        .find(|e| {
            let (a, b) = e.nodes;
            let (ua, ub) = (m.node(a).unwrap().u, m.node(b).unwrap().u);
            ua[0] != ub[0] && ua[1] != ub[1]
        })
        .expect("grid has diagonal edges")
        .id;
    let midpoint = match split_edge_2d(&mut m, diagonal).unwrap() {
        lamp::mesh::OpOutcome::Applied { new_node: Some(n) } => n,
        other => panic!("interior split must create a node, got {:?}", other),
    };
    let collapsible = m
        .edges_of_node(midpoint)
        .iter()
        .copied()
        .find(|&e| matches!(is_coarsenable_2d(&m, e), Ok(Some(v)) if v == midpoint))
        .expect("fresh midpoint must be collapsible");
    let before = counts(&m);
    assert!(coarsen_edge_2d(&mut m, collapsible).unwrap().applied());
    let after = counts(&m);
    assert_eq!(
        (after.0 - before.0, after.1 - before.1, after.2 - before.2),
        (-1, -3, -2),
        "interior collapse delta"
    );
    validate(&m).unwrap();
}

#[test]
fn one_d_split_and_collapse_change_counts_by_one() {
    let mut m = Mesh::uniform_1d(9, 8.0, 1, None).unwrap();
    let mid = m.edges().nth(4).unwrap().id;
    let before = counts(&m);
    let rec = apply_action(
        &mut m,
        &RemeshAction {
            refine: vec![mid],
            coarsen: vec![],
        },
    )
    .unwrap();
    assert_eq!(rec.total_delta(), (1, 1, 0), "1D split adds a node and an edge");
    let after = counts(&m);
    assert_eq!((after.0 - before.0, after.1 - before.1), (1, 1));
    validate(&m).unwrap();
}

/// Fan triangulations of convex polygons are valid but generally far from
/// the angle-balanced optimum; the flip sweep must settle every edge.
#[test]
fn flip_sweeps_reach_a_fixpoint_on_random_convex_fans() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..25 {
        let n = rng.gen_range(6..=16);
        let mut angles: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        angles.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
        if angles.len() < 5 {
            continue;
        }
        // Points on an ellipse so the vertices are not co-circular.
        let coords: Vec<[f64; 2]> = angles
            .iter()
            .map(|&t| [2.0 * t.cos(), 1.0 * t.sin()])
            .collect();
        let tris: Vec<[usize; 3]> = (1..coords.len() - 1).map(|i| [0, i, i + 1]).collect();
        let mut m =
            Mesh::from_triangles(&coords, &tris, 1, Domain::two_d(1e-6, 100.0)).unwrap();
        validate(&m).unwrap();

        let summary = flip_all_2d(&mut m).unwrap();
        assert!(
            summary.sweeps <= 20,
            "case {}: sweep budget exhausted ({} sweeps)",
            case,
            summary.sweeps
        );
        validate(&m).unwrap();
        for e in m.edges() {
            assert!(
                !edge_wants_flip(&m, e.id).unwrap(),
                "case {}: edge {} still wants a flip after the sweep",
                case,
                e.id
            );
        }
        // Flips preserve all counts.
        assert_eq!(m.n_nodes(), coords.len());
        assert_eq!(m.n_faces(), tris.len());
    }
}

/// A mesh already satisfying the angle test is a fixpoint: one sweep, no
/// flips.
#[test]
fn flip_sweep_is_idle_on_an_angle_balanced_grid() {
    let mut m = triangulated_grid(4);
    let summary = flip_all_2d(&mut m).unwrap();
    assert_eq!(summary.flips, 0, "right-triangle grid needs no flips");
    assert_eq!(summary.sweeps, 1);
}
