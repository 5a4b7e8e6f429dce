//! 1D chain edits: midpoint splits and endpoint-removal coarsening.

use super::{Mesh, MeshDim, NodeId};
use super::action::{DropReason, OpOutcome};
use crate::error::{Error, Result};

/// Splits a chain edge at its midpoint. The new node's features are the
/// average of the endpoint bundles. Dropped when the vertex cap is full.
pub fn split_edge_1d(m: &mut Mesh, e: super::EdgeId) -> Result<OpOutcome> {
    if m.dim != MeshDim::One {
        return Err(Error::invalid("split_edge_1d on a 2D mesh"));
    }
    if !m.has_edge(e) {
        return Ok(OpOutcome::Dropped(DropReason::MissingEdge));
    }
    if let Some(cap) = m.domain.vertex_cap {
        if m.n_nodes() >= cap {
            return Ok(OpOutcome::Dropped(DropReason::VertexCap));
        }
    }
    let (a, b) = m.edge(e)?.nodes;
    let (ua, ub) = (m.node(a)?.u[0], m.node(b)?.u[0]);
    let q: Vec<f32> = {
        let (qa, qb) = (&m.node(a)?.q, &m.node(b)?.q);
        qa.iter().zip(qb.iter()).map(|(x, y)| 0.5 * (x + y)).collect()
    };
    m.remove_edge(e)?;
    let mid = m.add_node([0.5 * (ua + ub), 0.0], None, q, false);
    m.add_edge(a, mid)?;
    m.add_edge(mid, b)?;
    Ok(OpOutcome::Applied {
        new_node: Some(mid),
    })
}

/// Removes one endpoint of a chain edge and bridges its neighbors. Prefers
/// the left endpoint; falls back to the right when the left is a domain
/// boundary; dropped when both are.
pub fn coarsen_edge_1d(m: &mut Mesh, e: super::EdgeId) -> Result<OpOutcome> {
    if m.dim != MeshDim::One {
        return Err(Error::invalid("coarsen_edge_1d on a 2D mesh"));
    }
    if !m.has_edge(e) {
        return Ok(OpOutcome::Dropped(DropReason::MissingEdge));
    }
    let (left, right) = m.edge(e)?.nodes;
    let victim = if !m.node(left)?.boundary {
        left
    } else if !m.node(right)?.boundary {
        right
    } else {
        return Ok(OpOutcome::Dropped(DropReason::BoundaryPinned));
    };
    remove_chain_node(m, victim)?;
    Ok(OpOutcome::Applied { new_node: None })
}

/// Removes an interior chain node and bridges its two neighbors.
pub fn remove_chain_node(m: &mut Mesh, victim: NodeId) -> Result<()> {
    if m.node(victim)?.boundary {
        return Err(Error::mesh(format!("node {} is a boundary node", victim)));
    }
    let incident: Vec<super::EdgeId> = m.edges_of_node(victim).to_vec();
    if incident.len() != 2 {
        return Err(Error::mesh(format!(
            "chain node {} has degree {}",
            victim,
            incident.len()
        )));
    }
    let mut neighbors = Vec::with_capacity(2);
    for &e in &incident {
        let (a, b) = m.edge(e)?.nodes;
        neighbors.push(if a == victim { b } else { a });
        m.remove_edge(e)?;
    }
    m.remove_node(victim)?;
    m.add_edge(neighbors[0], neighbors[1])?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{validate, DropReason, Mesh, OpOutcome};
    use super::*;

    #[test]
    fn split_inserts_midpoint_with_averaged_features() {
        let mut m = Mesh::uniform_1d(3, 16.0, 2, None).unwrap();
        // Nodes at 0, 16/3, 32/3; give them distinct features.
        let ids: Vec<NodeId> = m.nodes().map(|n| n.id).collect();
        m.node_mut(ids[0]).unwrap().q = vec![1.0, 2.0];
        m.node_mut(ids[1]).unwrap().q = vec![3.0, 6.0];
        let e = m.edge_between(ids[0], ids[1]).unwrap();
        let out = split_edge_1d(&mut m, e).unwrap();
        let mid = match out {
            OpOutcome::Applied { new_node: Some(n) } => n,
            other => panic!("expected applied split, got {:?}", other),
        };
        assert_eq!(m.n_nodes(), 4, "split must add exactly one node");
        assert_eq!(m.n_edges(), 3, "split must net one extra edge");
        let node = m.node(mid).unwrap();
        assert!(
            (node.u[0] - 16.0 / 6.0).abs() < 1e-12,
            "midpoint at {} (expected {})",
            node.u[0],
            16.0 / 6.0
        );
        assert_eq!(node.q, vec![2.0, 4.0], "features must average endpoints");
        assert!(!node.boundary);
        validate(&m).unwrap();
    }

    #[test]
    fn split_respects_vertex_cap() {
        let mut m = Mesh::uniform_1d(3, 1.0, 1, Some(3)).unwrap();
        let first = m.edges().next().unwrap().id;
        let out = split_edge_1d(&mut m, first).unwrap();
        assert_eq!(out, OpOutcome::Dropped(DropReason::VertexCap));
        assert_eq!(m.n_nodes(), 3);
        validate(&m).unwrap();
    }

    #[test]
    fn coarsen_removes_left_endpoint() {
        // Chain 0, 0.25, 0.5, 0.75 (length 1, last node at 0.75).
        let mut m = Mesh::uniform_1d(4, 1.0, 1, None).unwrap();
        let order = m.chain_order();
        let e = m.edge_between(order[1], order[2]).unwrap();
        let out = coarsen_edge_1d(&mut m, e).unwrap();
        assert_eq!(out, OpOutcome::Applied { new_node: None });
        assert_eq!(m.n_nodes(), 3);
        assert!(
            m.node(order[1]).is_err(),
            "left endpoint should be the removed node"
        );
        assert!(m.node(order[2]).is_ok());
        validate(&m).unwrap();
    }

    #[test]
    fn coarsen_falls_back_to_right_when_left_is_boundary() {
        let mut m = Mesh::uniform_1d(3, 1.0, 1, None).unwrap();
        let order = m.chain_order();
        let e = m.edge_between(order[0], order[1]).unwrap();
        let out = coarsen_edge_1d(&mut m, e).unwrap();
        assert_eq!(out, OpOutcome::Applied { new_node: None });
        assert!(m.node(order[0]).is_ok(), "boundary node must survive");
        assert!(m.node(order[1]).is_err());
        validate(&m).unwrap();
    }

    #[test]
    fn coarsen_drops_when_both_endpoints_are_boundary() {
        let mut m = Mesh::uniform_1d(2, 1.0, 1, None).unwrap();
        let e = m.edges().next().unwrap().id;
        let out = coarsen_edge_1d(&mut m, e).unwrap();
        assert_eq!(out, OpOutcome::Dropped(DropReason::BoundaryPinned));
        assert_eq!(m.n_nodes(), 2);
        validate(&m).unwrap();
    }

    #[test]
    fn three_node_chain_coarsens_to_the_ends() {
        // {0, 0.5, 1} with the middle node removed leaves {0, 1}.
        let mut m = Mesh::uniform_1d(3, 1.5, 1, None).unwrap();
        let order = m.chain_order();
        let e = m.edge_between(order[1], order[2]).unwrap();
        coarsen_edge_1d(&mut m, e).unwrap();
        let left: Vec<f64> = m.chain_order().iter().map(|&i| m.node(i).unwrap().u[0]).collect();
        assert_eq!(left, vec![0.0, 1.0], "surviving nodes should be the ends");
        assert_eq!(m.n_edges(), 1);
        validate(&m).unwrap();
    }

    #[test]
    fn split_then_coarsen_restores_counts() {
        let mut m = Mesh::uniform_1d(5, 16.0, 25, None).unwrap();
        let (n0, e0) = (m.n_nodes(), m.n_edges());
        let order = m.chain_order();
        let e = m.edge_between(order[2], order[3]).unwrap();
        let mid = match split_edge_1d(&mut m, e).unwrap() {
            OpOutcome::Applied { new_node: Some(n) } => n,
            other => panic!("expected split, got {:?}", other),
        };
        // The new node is interior so coarsening its right edge removes it.
        let right_edge = m
            .edges_of_node(mid)
            .iter()
            .copied()
            .find(|&e| m.edge(e).unwrap().nodes.0 == mid)
            .unwrap();
        coarsen_edge_1d(&mut m, right_edge).unwrap();
        assert_eq!((m.n_nodes(), m.n_edges()), (n0, e0));
        validate(&m).unwrap();
    }
}
