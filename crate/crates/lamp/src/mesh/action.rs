//! Remeshing actions: a set of edges to refine plus a set to coarsen,
//! filtered for conflicts and applied in a deterministic order
//! (coarsens by ascending edge id, then splits by ascending edge id,
//! then a flip sweep on 2D meshes).

use super::{
    coarsen_edge_1d, coarsen_edge_2d, flip_all_2d, split_edge_1d, split_edge_2d, EdgeId, Mesh,
    MeshDim, NodeId,
};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropReason {
    /// The edge no longer exists (consumed by an earlier edit).
    MissingEdge,
    /// Splitting would exceed the domain vertex cap.
    VertexCap,
    /// A produced edge would leave the domain length bounds.
    LengthBound,
    /// Both 1D endpoints are domain boundary nodes.
    BoundaryPinned,
    /// Neither endpoint qualifies for a 2D collapse.
    NotCoarsenable,
    /// A produced face would be inverted or near-zero.
    Degenerate,
    /// Removed by conflict filtering before any edit ran.
    ConflictFiltered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpOutcome {
    Applied { new_node: Option<NodeId> },
    Dropped(DropReason),
}

impl OpOutcome {
    pub fn applied(&self) -> bool {
        matches!(self, OpOutcome::Applied { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Refine,
    Coarsen,
}

/// A sampled action. Lists may contain duplicates and stale edge ids; the
/// conflict filter cleans both up.
#[derive(Clone, Debug, Default)]
pub struct RemeshAction {
    pub refine: Vec<EdgeId>,
    pub coarsen: Vec<EdgeId>,
}

/// Conflict-free action: deduplicated, existing edges only, ascending id.
#[derive(Clone, Debug, Default)]
pub struct FilteredAction {
    pub refine: Vec<EdgeId>,
    pub coarsen: Vec<EdgeId>,
    pub dropped: Vec<(OpKind, EdgeId, DropReason)>,
}

/// Resolves conflicts within an action without touching the mesh:
/// - duplicates collapse to one request; ids not on the mesh drop;
/// - an edge requested for both refine and coarsen keeps the refine;
/// - 1D: of coarsen edges sharing a vertex, the rightmost survives;
/// - 2D: each face tolerates at most one split and one coarsen among its
///   edges, granted in ascending edge id order.
///
/// Filtering a filtered action is a no-op.
pub fn filter_conflicts(m: &Mesh, action: &RemeshAction) -> FilteredAction {
    let mut dropped = Vec::new();
    let mut refine = clean(m, OpKind::Refine, &action.refine, &mut dropped);
    let mut coarsen = clean(m, OpKind::Coarsen, &action.coarsen, &mut dropped);

    coarsen.retain(|e| {
        if refine.contains(e) {
            dropped.push((OpKind::Coarsen, *e, DropReason::ConflictFiltered));
            false
        } else {
            true
        }
    });

    match m.dim {
        MeshDim::One => {
            // Rightmost-first greedy pass: later (leftward) edges sharing a
            // vertex with a kept edge drop out.
            let mut by_pos = coarsen.clone();
            by_pos.sort_by(|a, b| {
                let ua = m.node(m.edge(*a).unwrap().nodes.0).unwrap().u[0];
                let ub = m.node(m.edge(*b).unwrap().nodes.0).unwrap().u[0];
                ub.partial_cmp(&ua).unwrap().then(b.cmp(a))
            });
            let mut used: Vec<NodeId> = Vec::new();
            let mut kept: Vec<EdgeId> = Vec::new();
            for e in by_pos {
                let (a, b) = m.edge(e).unwrap().nodes;
                if used.contains(&a) || used.contains(&b) {
                    dropped.push((OpKind::Coarsen, e, DropReason::ConflictFiltered));
                } else {
                    used.push(a);
                    used.push(b);
                    kept.push(e);
                }
            }
            kept.sort_unstable();
            coarsen = kept;
        }
        MeshDim::Two => {
            refine = face_quota(m, OpKind::Refine, &refine, &mut dropped);
            coarsen = face_quota(m, OpKind::Coarsen, &coarsen, &mut dropped);
        }
    }

    FilteredAction {
        refine,
        coarsen,
        dropped,
    }
}

fn clean(
    m: &Mesh,
    kind: OpKind,
    requested: &[EdgeId],
    dropped: &mut Vec<(OpKind, EdgeId, DropReason)>,
) -> Vec<EdgeId> {
    let mut ids = requested.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.retain(|e| {
        if m.has_edge(*e) {
            true
        } else {
            dropped.push((kind, *e, DropReason::MissingEdge));
            false
        }
    });
    ids
}

fn face_quota(
    m: &Mesh,
    kind: OpKind,
    edges: &[EdgeId],
    dropped: &mut Vec<(OpKind, EdgeId, DropReason)>,
) -> Vec<EdgeId> {
    let mut touched: Vec<super::FaceId> = Vec::new();
    let mut kept = Vec::new();
    for &e in edges {
        let faces = m.faces_of_edge(e);
        if faces.iter().any(|f| touched.contains(f)) {
            dropped.push((kind, e, DropReason::ConflictFiltered));
        } else {
            touched.extend_from_slice(faces);
            kept.push(e);
        }
    }
    kept
}

#[derive(Clone, Debug)]
pub struct ActionRecordEntry {
    pub kind: OpKind,
    pub edge: EdgeId,
    pub outcome: OpOutcome,
    /// (nodes, edges, faces) change this op caused.
    pub delta: (isize, isize, isize),
}

#[derive(Clone, Debug, Default)]
pub struct ActionRecord {
    pub entries: Vec<ActionRecordEntry>,
    pub flips: usize,
}

impl ActionRecord {
    pub fn n_applied(&self, kind: OpKind) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == kind && e.outcome.applied())
            .count()
    }

    pub fn total_delta(&self) -> (isize, isize, isize) {
        self.entries.iter().fold((0, 0, 0), |acc, e| {
            (acc.0 + e.delta.0, acc.1 + e.delta.1, acc.2 + e.delta.2)
        })
    }
}

fn counts(m: &Mesh) -> (isize, isize, isize) {
    (
        m.n_nodes() as isize,
        m.n_edges() as isize,
        m.n_faces() as isize,
    )
}

/// Filters the action and applies it: coarsens, then splits, then (2D) a
/// flip sweep. Returns what happened to each requested edit and the exact
/// count changes.
pub fn apply_action(m: &mut Mesh, action: &RemeshAction) -> Result<ActionRecord> {
    let filtered = filter_conflicts(m, action);
    let mut entries: Vec<ActionRecordEntry> = filtered
        .dropped
        .iter()
        .map(|&(kind, edge, reason)| ActionRecordEntry {
            kind,
            edge,
            outcome: OpOutcome::Dropped(reason),
            delta: (0, 0, 0),
        })
        .collect();
    for &e in &filtered.coarsen {
        let before = counts(m);
        let outcome = match m.dim {
            MeshDim::One => coarsen_edge_1d(m, e)?,
            MeshDim::Two => coarsen_edge_2d(m, e)?,
        };
        let after = counts(m);
        entries.push(ActionRecordEntry {
            kind: OpKind::Coarsen,
            edge: e,
            outcome,
            delta: (after.0 - before.0, after.1 - before.1, after.2 - before.2),
        });
    }
    for &e in &filtered.refine {
        let before = counts(m);
        let outcome = match m.dim {
            MeshDim::One => split_edge_1d(m, e)?,
            MeshDim::Two => split_edge_2d(m, e)?,
        };
        let after = counts(m);
        entries.push(ActionRecordEntry {
            kind: OpKind::Refine,
            edge: e,
            outcome,
            delta: (after.0 - before.0, after.1 - before.1, after.2 - before.2),
        });
    }
    let flips = if m.dim == MeshDim::Two {
        flip_all_2d(m)?.flips
    } else {
        0
    };
    Ok(ActionRecord { entries, flips })
}

#[cfg(test)]
mod tests {
    use super::super::{validate, Mesh};
    use super::*;

    #[test]
    fn filter_dedupes_and_drops_missing_edges() {
        let m = Mesh::uniform_1d(5, 1.0, 1, None).unwrap();
        let e0 = m.edges().next().unwrap().id;
        let ghost = EdgeId(999);
        let action = RemeshAction {
            refine: vec![e0, e0, ghost],
            coarsen: vec![],
        };
        let f = filter_conflicts(&m, &action);
        assert_eq!(f.refine, vec![e0]);
        assert!(f
            .dropped
            .contains(&(OpKind::Refine, ghost, DropReason::MissingEdge)));
    }

    #[test]
    fn refine_wins_when_an_edge_is_requested_for_both() {
        let m = Mesh::uniform_1d(5, 1.0, 1, None).unwrap();
        let e = m.edges().nth(1).unwrap().id;
        let action = RemeshAction {
            refine: vec![e],
            coarsen: vec![e],
        };
        let f = filter_conflicts(&m, &action);
        assert_eq!(f.refine, vec![e]);
        assert!(f.coarsen.is_empty());
        assert!(f
            .dropped
            .contains(&(OpKind::Coarsen, e, DropReason::ConflictFiltered)));
    }

    #[test]
    fn adjacent_coarsens_keep_the_rightmost() {
        let m = Mesh::uniform_1d(6, 1.0, 1, None).unwrap();
        let order = m.chain_order();
        let e_left = m.edge_between(order[1], order[2]).unwrap();
        let e_right = m.edge_between(order[2], order[3]).unwrap();
        let action = RemeshAction {
            refine: vec![],
            coarsen: vec![e_left, e_right],
        };
        let f = filter_conflicts(&m, &action);
        assert_eq!(f.coarsen, vec![e_right], "the rightmost of the pair survives");
        assert!(f
            .dropped
            .contains(&(OpKind::Coarsen, e_left, DropReason::ConflictFiltered)));
    }

    #[test]
    fn filtering_is_idempotent() {
        let m = Mesh::uniform_1d(8, 1.0, 1, None).unwrap();
        let ids: Vec<EdgeId> = m.edges().map(|e| e.id).collect();
        let action = RemeshAction {
            refine: vec![ids[0], ids[0], ids[3]],
            coarsen: vec![ids[1], ids[2], ids[3], ids[6]],
        };
        let once = filter_conflicts(&m, &action);
        let again = filter_conflicts(
            &m,
            &RemeshAction {
                refine: once.refine.clone(),
                coarsen: once.coarsen.clone(),
            },
        );
        assert_eq!(once.refine, again.refine);
        assert_eq!(once.coarsen, again.coarsen);
        assert!(again.dropped.is_empty(), "second pass must drop nothing");
    }

    #[test]
    fn two_d_face_quota_grants_lowest_edge_id() {
        let coords = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let m = Mesh::from_triangles(
            &coords,
            &[[0, 1, 2], [0, 2, 3]],
            1,
            super::super::Domain::two_d(0.001, 10.0),
        )
        .unwrap();
        // Two edges of the same face both ask for a split.
        let face = m.faces().next().unwrap().id;
        let (a, b, c) = m.face(face).unwrap().nodes;
        let e1 = m.edge_between(a, b).unwrap();
        let e2 = m.edge_between(b, c).unwrap();
        let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        let f = filter_conflicts(
            &m,
            &RemeshAction {
                refine: vec![hi, lo],
                coarsen: vec![],
            },
        );
        assert_eq!(f.refine, vec![lo], "ascending id wins the per-face quota");
        assert!(f
            .dropped
            .contains(&(OpKind::Refine, hi, DropReason::ConflictFiltered)));
    }

    #[test]
    fn apply_runs_coarsens_before_splits_and_reports_exact_deltas() {
        let mut m = Mesh::uniform_1d(6, 1.0, 1, None).unwrap();
        let order = m.chain_order();
        let split_e = m.edge_between(order[0], order[1]).unwrap();
        let coarsen_e = m.edge_between(order[3], order[4]).unwrap();
        let record = apply_action(
            &mut m,
            &RemeshAction {
                refine: vec![split_e],
                coarsen: vec![coarsen_e],
            },
        )
        .unwrap();
        assert_eq!(record.n_applied(OpKind::Refine), 1);
        assert_eq!(record.n_applied(OpKind::Coarsen), 1);
        assert_eq!(record.total_delta(), (0, 0, 0), "one split and one coarsen cancel");
        assert_eq!(m.n_nodes(), 6);
        for e in &record.entries {
            match (e.kind, e.outcome.applied()) {
                (OpKind::Refine, true) => assert_eq!(e.delta, (1, 1, 0)),
                (OpKind::Coarsen, true) => assert_eq!(e.delta, (-1, -1, 0)),
                (_, false) => assert_eq!(e.delta, (0, 0, 0)),
            }
        }
        validate(&m).unwrap();
    }

    #[test]
    fn apply_records_vertex_cap_drops() {
        let mut m = Mesh::uniform_1d(4, 1.0, 1, Some(5)).unwrap();
        let ids: Vec<EdgeId> = m.edges().map(|e| e.id).collect();
        let record = apply_action(
            &mut m,
            &RemeshAction {
                refine: ids.clone(),
                coarsen: vec![],
            },
        )
        .unwrap();
        assert_eq!(m.n_nodes(), 5, "cap must stop growth at 5 nodes");
        assert_eq!(record.n_applied(OpKind::Refine), 1);
        let capped = record
            .entries
            .iter()
            .filter(|e| e.outcome == OpOutcome::Dropped(DropReason::VertexCap))
            .count();
        assert_eq!(capped, 2, "the remaining splits must report the cap");
        validate(&m).unwrap();
    }

    #[test]
    fn split_requested_on_a_coarsened_edge_reports_missing() {
        // Coarsening edge (1,2) removes node 1, consuming edge (0,1); a
        // split queued on (0,1) then finds it gone.
        let mut m = Mesh::uniform_1d(5, 1.0, 1, None).unwrap();
        let order = m.chain_order();
        let doomed = m.edge_between(order[0], order[1]).unwrap();
        let coarsen_e = m.edge_between(order[1], order[2]).unwrap();
        let record = apply_action(
            &mut m,
            &RemeshAction {
                refine: vec![doomed],
                coarsen: vec![coarsen_e],
            },
        )
        .unwrap();
        let entry = record
            .entries
            .iter()
            .find(|e| e.kind == OpKind::Refine && e.edge == doomed)
            .unwrap();
        assert_eq!(entry.outcome, OpOutcome::Dropped(DropReason::MissingEdge));
        validate(&m).unwrap();
    }
}
