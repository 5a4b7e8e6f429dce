//! Feature transfer between meshes: piecewise-linear on 1D chains (with
//! periodic wrapping), barycentric on 2D triangulations.
//!
//! Location math runs in f64; `transfer` combines features in f64 so affine
//! fields reproduce to well under 1e-10 when the stored f32 node values are
//! exact. `TransferPlan` freezes locations into the fixed-arity index/weight
//! form the tape's `gather_weighted` op consumes.

use crate::error::{Error, Result};
use crate::mesh::{signed_area, EdgeId, FaceId, Mesh, MeshDim, NodeId};
use crate::tensor::{Tape, Tensor, Var};
use std::collections::BTreeMap;

/// Acceptance slack for barycentric containment.
const INSIDE_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub enum Location {
    /// 1D: point on a chain segment. `edge` is None only on the periodic
    /// wrap segment between the last and first nodes, which has no edge.
    Segment {
        edge: Option<EdgeId>,
        nodes: (NodeId, NodeId),
        /// Fraction of the way from `nodes.0` to `nodes.1`.
        t: f64,
    },
    /// 2D: point in a face, as convex vertex weights.
    Triangle {
        face: FaceId,
        nodes: (NodeId, NodeId, NodeId),
        weights: [f64; 3],
    },
}

impl Location {
    /// (node, weight) pairs of the convex combination.
    pub fn node_weights(&self) -> Vec<(NodeId, f64)> {
        match self {
            Location::Segment { nodes, t, .. } => {
                vec![(nodes.0, 1.0 - t), (nodes.1, *t)]
            }
            Location::Triangle { nodes, weights, .. } => vec![
                (nodes.0, weights[0]),
                (nodes.1, weights[1]),
                (nodes.2, weights[2]),
            ],
        }
    }
}

/// Barycentric weights of `p` in the triangle (a, b, c). The raw weights
/// reproduce `p` exactly; no clamping happens here.
pub fn barycentric_weights(a: [f64; 2], b: [f64; 2], c: [f64; 2], p: [f64; 2]) -> Result<[f64; 3]> {
    let den = signed_area(a, b, c);
    if den.abs() < 1e-12 {
        return Err(Error::invalid("barycentric_weights: degenerate triangle"));
    }
    Ok([
        signed_area(p, b, c) / den,
        signed_area(a, p, c) / den,
        signed_area(a, b, p) / den,
    ])
}

struct Chain1D {
    /// Node ids left to right.
    order: Vec<NodeId>,
    /// Matching positions, strictly increasing.
    pos: Vec<f64>,
}

struct BucketGrid {
    x0: f64,
    y0: f64,
    inv_dx: f64,
    inv_dy: f64,
    nx: usize,
    ny: usize,
    /// Face ids per cell, ascending.
    cells: Vec<Vec<FaceId>>,
}

impl BucketGrid {
    fn cell_of(&self, p: [f64; 2]) -> Option<usize> {
        let ix = ((p[0] - self.x0) * self.inv_dx).floor();
        let iy = ((p[1] - self.y0) * self.inv_dy).floor();
        if ix < 0.0 || iy < 0.0 {
            return None;
        }
        let (ix, iy) = (ix as usize, iy as usize);
        if ix >= self.nx || iy >= self.ny {
            return None;
        }
        Some(iy * self.nx + ix)
    }
}

/// Reusable point locator; build once per source mesh, query many times.
pub struct Locator<'a> {
    mesh: &'a Mesh,
    chain: Option<Chain1D>,
    grid: Option<BucketGrid>,
}

impl<'a> Locator<'a> {
    pub fn new(mesh: &'a Mesh) -> Result<Self> {
        match mesh.dim {
            MeshDim::One => {
                let order = mesh.chain_order();
                let pos = order
                    .iter()
                    .map(|&n| Ok(mesh.node(n)?.u[0]))
                    .collect::<Result<Vec<f64>>>()?;
                Ok(Locator {
                    mesh,
                    chain: Some(Chain1D { order, pos }),
                    grid: None,
                })
            }
            MeshDim::Two => Ok(Locator {
                mesh,
                chain: None,
                grid: Some(build_grid(mesh)?),
            }),
        }
    }

    pub fn locate(&self, p: [f64; 2]) -> Result<Location> {
        match self.mesh.dim {
            MeshDim::One => self.locate_1d(p[0]),
            MeshDim::Two => self.locate_2d(p),
        }
    }

    fn locate_1d(&self, u: f64) -> Result<Location> {
        let chain = self.chain.as_ref().unwrap();
        if !u.is_finite() {
            return Err(Error::OutOfDomain(vec![u]));
        }
        let l = self.mesh.domain.length;
        let uw = u.rem_euclid(l);
        let n = chain.pos.len();
        // Largest i with pos[i] <= uw; pos[0] <= uw always holds after wrap
        // because the leftmost node sits at the domain origin.
        if uw < chain.pos[0] {
            return Err(Error::OutOfDomain(vec![u]));
        }
        let i = chain.pos.partition_point(|&x| x <= uw) - 1;
        if i == n - 1 {
            if uw == chain.pos[i] {
                // Exactly on the last node: its left edge is the only real
                // element touching it.
                let nodes = (chain.order[n - 2], chain.order[n - 1]);
                let edge = self.mesh.edge_between(nodes.0, nodes.1);
                return Ok(Location::Segment { edge, nodes, t: 1.0 });
            }
            // Periodic wrap segment from the last node around to the first.
            let span = l + chain.pos[0] - chain.pos[n - 1];
            return Ok(Location::Segment {
                edge: None,
                nodes: (chain.order[n - 1], chain.order[0]),
                t: (uw - chain.pos[n - 1]) / span,
            });
        }
        if uw == chain.pos[i] && i > 0 {
            // Exactly on an interior node: both incident edges contain the
            // point; the lower edge id wins.
            let left_nodes = (chain.order[i - 1], chain.order[i]);
            let right_nodes = (chain.order[i], chain.order[i + 1]);
            let le = self.mesh.edge_between(left_nodes.0, left_nodes.1);
            let re = self.mesh.edge_between(right_nodes.0, right_nodes.1);
            if let (Some(le), Some(re)) = (le, re) {
                if le < re {
                    return Ok(Location::Segment {
                        edge: Some(le),
                        nodes: left_nodes,
                        t: 1.0,
                    });
                }
            }
            return Ok(Location::Segment {
                edge: re,
                nodes: right_nodes,
                t: 0.0,
            });
        }
        let t = (uw - chain.pos[i]) / (chain.pos[i + 1] - chain.pos[i]);
        Ok(Location::Segment {
            edge: self.mesh.edge_between(chain.order[i], chain.order[i + 1]),
            nodes: (chain.order[i], chain.order[i + 1]),
            t,
        })
    }

    fn locate_2d(&self, p: [f64; 2]) -> Result<Location> {
        let grid = self.grid.as_ref().unwrap();
        if let Some(cell) = grid.cell_of(p) {
            for &f in &grid.cells[cell] {
                if let Some(loc) = self.try_face(f, p)? {
                    return Ok(loc);
                }
            }
        }
        // Roundoff near cell borders can miss; fall back to a full scan
        // before declaring the point outside.
        for f in self.mesh.faces().map(|f| f.id).collect::<Vec<_>>() {
            if let Some(loc) = self.try_face(f, p)? {
                return Ok(loc);
            }
        }
        Err(Error::OutOfDomain(vec![p[0], p[1]]))
    }

    fn try_face(&self, f: FaceId, p: [f64; 2]) -> Result<Option<Location>> {
        let face = self.mesh.face(f)?;
        let (a, b, c) = face.nodes;
        let w = barycentric_weights(
            self.mesh.node(a)?.u,
            self.mesh.node(b)?.u,
            self.mesh.node(c)?.u,
            p,
        )?;
        if w.iter().any(|&x| x < -INSIDE_EPS) {
            return Ok(None);
        }
        let clamped = [w[0].clamp(0.0, 1.0), w[1].clamp(0.0, 1.0), w[2].clamp(0.0, 1.0)];
        let sum: f64 = clamped.iter().sum();
        Ok(Some(Location::Triangle {
            face: f,
            nodes: (a, b, c),
            weights: [clamped[0] / sum, clamped[1] / sum, clamped[2] / sum],
        }))
    }
}

fn build_grid(mesh: &Mesh) -> Result<BucketGrid> {
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for n in mesh.nodes() {
        x_min = x_min.min(n.u[0]);
        x_max = x_max.max(n.u[0]);
        y_min = y_min.min(n.u[1]);
        y_max = y_max.max(n.u[1]);
    }
    if !(x_min.is_finite() && y_min.is_finite()) {
        return Err(Error::mesh("cannot grid an empty mesh"));
    }
    let n_faces = mesh.n_faces().max(1);
    let side = (n_faces as f64).sqrt().ceil() as usize;
    let (nx, ny) = (side.max(1), side.max(1));
    // Pad so boundary points land strictly inside the grid.
    let pad_x = (x_max - x_min).max(1e-9) * 1e-9;
    let pad_y = (y_max - y_min).max(1e-9) * 1e-9;
    let x0 = x_min - pad_x;
    let y0 = y_min - pad_y;
    let dx = (x_max - x_min + 2.0 * pad_x) / nx as f64;
    let dy = (y_max - y_min + 2.0 * pad_y) / ny as f64;
    let mut cells = vec![Vec::new(); nx * ny];
    for face in mesh.faces() {
        let (a, b, c) = face.nodes;
        let pts = [mesh.node(a)?.u, mesh.node(b)?.u, mesh.node(c)?.u];
        let fx0 = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let fx1 = pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let fy0 = pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let fy1 = pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let ix0 = (((fx0 - x0) / dx).floor().max(0.0) as usize).min(nx - 1);
        let ix1 = (((fx1 - x0) / dx).floor().max(0.0) as usize).min(nx - 1);
        let iy0 = (((fy0 - y0) / dy).floor().max(0.0) as usize).min(ny - 1);
        let iy1 = (((fy1 - y0) / dy).floor().max(0.0) as usize).min(ny - 1);
        for iy in iy0..=iy1 {
            for ix in ix0..=ix1 {
                cells[iy * nx + ix].push(face.id);
            }
        }
    }
    Ok(BucketGrid {
        x0,
        y0,
        inv_dx: 1.0 / dx,
        inv_dy: 1.0 / dy,
        nx,
        ny,
        cells,
    })
}

/// Locates a single point; build a `Locator` for repeated queries.
pub fn locate(mesh: &Mesh, p: [f64; 2]) -> Result<Location> {
    Locator::new(mesh)?.locate(p)
}

/// Interpolates the source mesh's feature bundles at the target points.
/// Combination runs in f64.
pub fn transfer(source: &Mesh, targets: &[[f64; 2]]) -> Result<Vec<Vec<f64>>> {
    let locator = Locator::new(source)?;
    let mut out = Vec::with_capacity(targets.len());
    for &p in targets {
        let loc = locator.locate(p)?;
        let parts = loc.node_weights();
        let width = source.node(parts[0].0)?.q.len();
        let mut acc = vec![0.0f64; width];
        for (n, w) in parts {
            for (a, &qv) in acc.iter_mut().zip(&source.node(n)?.q) {
                *a += w * qv as f64;
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// Row index of every node in the ascending-id feature matrix layout.
pub fn node_rows(mesh: &Mesh) -> BTreeMap<NodeId, usize> {
    mesh.nodes()
        .enumerate()
        .map(|(row, n)| (n.id, row))
        .collect()
}

/// Frozen interpolation: `n_targets` rows, each a fixed-arity weighted sum
/// of source feature rows. Matches the tape's `gather_weighted` layout.
#[derive(Clone, Debug)]
pub struct TransferPlan {
    pub arity: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<f32>,
    pub n_targets: usize,
}

impl TransferPlan {
    /// Applies the plan to an f32 feature matrix (rows in ascending source
    /// node id order), mirroring the tape kernel exactly.
    pub fn apply(&self, src: &Tensor) -> Result<Tensor> {
        let width = src.row_width();
        let rows = src.rows();
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "transfer plan index {} out of {} rows",
                bad, rows
            )));
        }
        let mut data = vec![0.0f32; self.n_targets * width];
        for g in 0..self.n_targets {
            let dst = &mut data[g * width..(g + 1) * width];
            for k in 0..self.arity {
                let j = self.indices[g * self.arity + k];
                let wk = self.weights[g * self.arity + k];
                for (d, s) in dst
                    .iter_mut()
                    .zip(&src.data()[j * width..j * width + width])
                {
                    *d += wk * s;
                }
            }
        }
        Tensor::new(vec![self.n_targets, width], data)
    }

    /// Applies the plan as a differentiable tape op; gradients flow back to
    /// the source features.
    pub fn apply_on_tape(&self, tape: &mut Tape, src: Var) -> Result<Var> {
        tape.gather_weighted(src, self.arity, &self.indices, &self.weights)
    }
}

/// Builds a plan interpolating from `source` at the given points.
pub fn plan_points(source: &Mesh, targets: &[[f64; 2]]) -> Result<TransferPlan> {
    let locator = Locator::new(source)?;
    let rows = node_rows(source);
    let arity = match source.dim {
        MeshDim::One => 2,
        MeshDim::Two => 3,
    };
    let mut indices = Vec::with_capacity(targets.len() * arity);
    let mut weights = Vec::with_capacity(targets.len() * arity);
    for &p in targets {
        let loc = locator.locate(p)?;
        for (n, w) in loc.node_weights() {
            indices.push(rows[&n]);
            weights.push(w as f32);
        }
    }
    Ok(TransferPlan {
        arity,
        indices,
        weights,
        n_targets: targets.len(),
    })
}

/// Builds a plan interpolating from `source` onto the nodes of `target`
/// (ascending target node id order).
pub fn plan_transfer(source: &Mesh, target: &Mesh) -> Result<TransferPlan> {
    let points: Vec<[f64; 2]> = target.nodes().map(|n| [n.u[0], n.u[1]]).collect();
    plan_points(source, &points)
}
